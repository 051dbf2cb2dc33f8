"""Strict run configuration: JSON with explicit keys for every search
hyperparameter plus corpus/seed/output sections. Unknown keys are errors."""
from __future__ import annotations

import copy
import json

from .mirror import PruneConfig
from .saliency import MetricConfig


class ConfigError(ValueError):
    pass


DEFAULT_CONFIG = {
    "model": {"depth": 2, "width": 16, "vocab": 27, "context": 16,
              "mlp_ratio": 4, "seed": 0},
    "corpus": {"path": None,
               "generator": {"seed": 0, "docs": 48, "doc_len": 96},
               "heldout_frac": 0.1},
    "pretrain": {"steps": 300, "lr": 0.2, "batch_size": 8, "seed": 0},
    "search": {"rho": 0.01, "kappa": 1.0, "lambda": 0.001, "alpha": "auto",
               "steps": 300, "seed": 0, "batch_size": None,
               "straight_through": False, "pattern": "unstructured",
               "metric": {"kind": "stochria", "a": 0.5, "q": 0.3, "seed": 0}},
    "export": {"sparsities": [0.5, 0.6, 0.7], "scope": "per-layer"},
    "output": {"dir": "runs/default"},
}


def _merge_strict(defaults: dict, given: dict, path: str = "") -> dict:
    out = copy.deepcopy(defaults)
    for key, val in given.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(defaults[key], dict) and defaults[key]:
            if not isinstance(val, dict):
                raise ConfigError(f"{where} must be a section")
            out[key] = _merge_strict(defaults[key], val, where)
        else:
            out[key] = val
    return out


def load_config(path) -> dict:
    try:
        with open(path) as f:
            given = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from None
    cfg = _merge_strict(DEFAULT_CONFIG, given)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    s = cfg["search"]
    if s["alpha"] != "auto":
        prune_config(cfg)  # full validation only possible once alpha is known
    pat = s["pattern"]
    if pat != "unstructured":
        if not (isinstance(pat, (list, tuple)) and len(pat) == 2):
            raise ConfigError("search.pattern must be \"unstructured\" or [N, M]")
    for sp in cfg["export"]["sparsities"]:
        if not (0.0 <= sp <= 1.0):
            raise ConfigError(f"export sparsity {sp} outside [0, 1]")
    if cfg["export"]["scope"] not in ("per-layer", "global"):
        raise ConfigError("export.scope must be per-layer or global")
    if cfg["corpus"]["path"] is None and cfg["corpus"]["generator"] is None:
        raise ConfigError("missing input: corpus.path or corpus.generator must be set")


def prune_config(cfg: dict, alpha: float | list | None = None) -> PruneConfig:
    s = cfg["search"]
    m = s["metric"]
    a = alpha if alpha is not None else s["alpha"]
    if a == "auto":
        raise ConfigError("search.alpha is \"auto\" but no resolved value was given")
    pat = s["pattern"]
    pc = PruneConfig(
        rho=s["rho"], kappa=s["kappa"], lam=s["lambda"], alpha=a,
        steps=s["steps"], seed=s["seed"], batch_size=s["batch_size"],
        straight_through=s["straight_through"],
        pattern="unstructured" if pat == "unstructured" else tuple(pat),
        metric=MetricConfig(kind=m["kind"], a=m["a"], q=m["q"], seed=m["seed"]),
    )
    try:
        pc.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return pc
