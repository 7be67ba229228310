"""Experiment configuration: defaults, dotted overrides, validation and hashing."""

from __future__ import annotations

import copy
import hashlib
import json
import math

from .random_fields import DRIFT_PRESETS, FIELD_PRESETS

DEFAULTS = {
    "grid": {"d": 1, "n": 512, "L": 8.0},
    "time": {"T": 1.0, "n_steps": 64},
    "exponents": {"p": None, "q": None, "gate": True},
    "mc": {"paths": 20, "M": 256, "seed": 0, "groups": None},
    "solver": {"tol": 1e-8, "max_iter": 50},
    "field": {"name": "step", "params": {}},
    "drift": {"name": "zero", "params": {}},
    "x0": None,
    "check": {},
    "workers": None,
    "output": {"dir": "results", "timing": True},
}

# keys that never change a computed number
NON_SEMANTIC = ("output", "workers")


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n" + "\n".join(f"  {k}: {m}" for k, m in self.problems))


def _merge(base: dict, over: dict, path: str, problems: list, strict: bool = True) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        key = f"{path}{k}"
        if k not in base:
            if strict:
                problems.append((key, "unknown key"))
                continue
            out[k] = v
        elif isinstance(base[k], dict) and k not in ("params", "check"):
            if not isinstance(v, dict):
                problems.append((key, "expected a table of settings"))
                continue
            out[k] = _merge(base[k], v, key + ".", problems)
        elif k in ("params", "check"):
            if not isinstance(v, dict):
                problems.append((key, "expected a table of settings"))
                continue
            merged = dict(base[k])
            merged.update(v)
            out[k] = merged
        else:
            out[k] = v
    return out


def set_dotted(cfg: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = cfg
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError([(dotted, "cannot set a sub-key of a scalar setting")])
    node[parts[-1]] = value


def parse_value(text: str):
    """JSON literal if it parses, otherwise the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load(raw: dict | None = None, overrides: dict | None = None) -> dict:
    """Resolve ``raw`` (a config or a manifest) plus dotted overrides against the defaults."""
    raw = copy.deepcopy(raw or {})
    if "config" in raw and "config_hash" in raw:  # a manifest written by a previous run
        raw = raw["config"]
    for k, v in (overrides or {}).items():
        set_dotted(raw, k, v)
    problems: list = []
    cfg = _merge(DEFAULTS, raw, "", problems)
    problems += validate(cfg)
    if problems:
        raise ConfigError(problems)
    return cfg


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def validate(cfg: dict) -> list:
    """Field-level diagnostics as ``(key, message)`` pairs; empty when valid."""
    P = []
    g = cfg["grid"]
    if g["d"] not in (1, 2, 3) or not _is_int(g["d"]):
        P.append(("grid.d", "must be 1, 2 or 3"))
    if not _is_int(g["n"]) or g["n"] < 8 or g["n"] & (g["n"] - 1):
        P.append(("grid.n", "must be a power of two >= 8"))
    if not _is_num(g["L"]) or g["L"] <= 0:
        P.append(("grid.L", "must be a positive number"))
    t = cfg["time"]
    if not _is_num(t["T"]) or t["T"] <= 0:
        P.append(("time.T", "must be a positive number"))
    if not _is_int(t["n_steps"]) or t["n_steps"] < 1:
        P.append(("time.n_steps", "must be a positive integer"))
    e = cfg["exponents"]
    for k in ("p", "q"):
        v = e[k]
        if v is not None and (not _is_num(v) or v <= 2):
            P.append((f"exponents.{k}", "must lie in (2, inf)"))
    if e["gate"] and _is_num(e["p"]) and _is_num(e["q"]) and e["p"] > 2 and e["q"] > 2 and _is_int(g["d"]):
        lhs = g["d"] / e["p"] + 2 / e["q"]
        if not lhs < 1:
            P.append(("exponents", f"integrability condition d/p + 2/q < 1 violated: "
                                   f"{g['d']}/{e['p']} + 2/{e['q']} = {lhs:.6g} (strict inequality required)"))
    mc = cfg["mc"]
    if not _is_int(mc["paths"]) or mc["paths"] < 1:
        P.append(("mc.paths", "must be a positive integer"))
    if not _is_int(mc["M"]) or mc["M"] < 2:
        P.append(("mc.M", "must be an integer >= 2"))
    if not _is_int(mc["seed"]) or mc["seed"] < 0:
        P.append(("mc.seed", "must be a non-negative integer"))
    if mc["groups"] is not None and (not _is_int(mc["groups"]) or not 2 <= mc["groups"] <= max(mc["M"], 2)):
        P.append(("mc.groups", "must be an integer in [2, M]"))
    s = cfg["solver"]
    if not _is_num(s["tol"]) or s["tol"] <= 0:
        P.append(("solver.tol", "must be positive"))
    if not _is_int(s["max_iter"]) or s["max_iter"] < 1:
        P.append(("solver.max_iter", "must be a positive integer"))
    if cfg["field"]["name"] not in FIELD_PRESETS:
        P.append(("field.name", f"unknown preset {cfg['field']['name']!r}; valid: {', '.join(FIELD_PRESETS)}"))
    if cfg["drift"]["name"] not in DRIFT_PRESETS:
        P.append(("drift.name", f"unknown preset {cfg['drift']['name']!r}; valid: {', '.join(DRIFT_PRESETS)}"))
    w = cfg["workers"]
    if w is not None and (not _is_int(w) or w < 1):
        P.append(("workers", "must be a positive integer"))
    x0 = cfg["x0"]
    if x0 is not None:
        vals = x0 if isinstance(x0, list) else [x0]
        if not all(_is_num(v) for v in vals) or (len(vals) not in (1, g["d"])):
            P.append(("x0", "must be a number or a list of d numbers"))
    if not P:
        x0n = 0.0 if x0 is None else max(abs(v) for v in (x0 if isinstance(x0, list) else [x0]))
        need = 6 * math.sqrt(t["T"]) + x0n
        if g["L"] < need:
            P.append(("grid.L", f"box too small: need L >= 6 sqrt(T) + |x0| = {need:.3g} to keep paths inside"))
    return P


def config_hash(cfg: dict) -> str:
    sem = {k: v for k, v in cfg.items() if k not in NON_SEMANTIC}
    blob = json.dumps(sem, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()
