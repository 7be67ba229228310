"""Reference run for the regularisation-gain threshold.

Runs the step-function scan on grids finer than the desk setting and prints
the median gain at each resolution, so the desk-scale pass threshold can be
set below what the converged numbers show.

    python3 demos/fine_grid_reference.py [n_paths]
"""

import sys
import time

import numpy as np

from regnoise.grid_fields import SpatialGrid
from regnoise.random_fields import field_preset
from regnoise.stochastics import TimeGrid, sample_brownian
from regnoise.trick import regularity_scan

n_paths = int(sys.argv[1]) if len(sys.argv) > 1 else 100
levels = [(512, 1024), (1024, 4096), (2048, 4096), (2048, 16384)]

print(f"{'n':>6} {'n_steps':>8} {'alpha_in':>9} {'alpha_out':>10} {'gain':>7} {'r2_out':>7} {'sec':>6}")
for n, n_steps in levels:
    grid = SpatialGrid(1, n, 8.0)
    paths = sample_brownian(TimeGrid(1.0, n_steps), 1, 2024, n_paths=n_paths)
    t0 = time.perf_counter()
    rep = regularity_scan(field_preset("step"), None, grid, paths)
    print(f"{n:6d} {n_steps:8d} {rep.alpha_in:9.3f} {np.median(rep.alpha_out):10.3f} {rep.gain:7.3f} "
          f"{np.median(rep.r2_out):7.3f} {time.perf_counter() - t0:6.1f}")
