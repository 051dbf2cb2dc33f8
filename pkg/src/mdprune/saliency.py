"""Local importance metrics: magnitude, activation-weighted (Wanda-style),
relative-importance-with-activations (RIA-style) and its stochastic variant.

All metrics are nonnegative functions of |W|; gradients of the alignment
term 0.5 * ||Gamma - S(W)||^2 are closed-form, with sign(0) = 0.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ActivationStats

METRIC_KINDS = ("magnitude", "wanda", "ria", "stochria")


@dataclass
class MetricConfig:
    kind: str = "stochria"
    a: float = 0.5       # activation exponent for ria/stochria
    q: float = 0.3       # subsample fraction for stochria
    seed: int = 0

    def validate(self):
        if self.kind not in METRIC_KINDS:
            raise ValueError(f"unknown metric kind {self.kind!r}")
        if self.a < 0:
            raise ValueError("activation exponent must be >= 0")
        if not (0.0 < self.q <= 1.0):
            raise ValueError("sample fraction q must be in (0, 1]")


@dataclass
class ScoreMatrix:
    scores: np.ndarray
    metric_tag: str


def magnitude_score(w: np.ndarray) -> ScoreMatrix:
    return ScoreMatrix(np.abs(w), "magnitude")


def wanda_score(w: np.ndarray, stats: ActivationStats) -> ScoreMatrix:
    _check_dims(w, stats)
    return ScoreMatrix(np.abs(w) * stats.col_norms[None, :], "wanda")


def _relative_importance(aw: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row/column-normalized terms of |W|; zero rows/columns contribute 0."""
    row = aw.sum(axis=1, keepdims=True)
    col = aw.sum(axis=0, keepdims=True)
    inv_row = np.divide(1.0, row, out=np.zeros_like(row), where=row > 0)
    inv_col = np.divide(1.0, col, out=np.zeros_like(col), where=col > 0)
    return aw * inv_row + aw * inv_col, inv_row, inv_col


def _ria_from_norms(w: np.ndarray, norms: np.ndarray, a: float, tag: str) -> ScoreMatrix:
    rel, _, _ = _relative_importance(np.abs(w))
    return ScoreMatrix(rel * norms[None, :] ** a, tag)


def ria_score(w: np.ndarray, stats: ActivationStats, a: float = 0.5) -> ScoreMatrix:
    _check_dims(w, stats)
    if a < 0:
        raise ValueError("exponent a must be >= 0")
    return _ria_from_norms(w, stats.col_norms, a, "ria")


def subsampled_norms(stats: ActivationStats, q: float, seed: int) -> np.ndarray:
    """Column norms estimated from a seeded q-fraction of calibration rows,
    rescaled by 1/q so the squared norms are unbiased."""
    if not (0.0 < q <= 1.0):
        raise ValueError("sample fraction q must be in (0, 1]")
    if q == 1.0:
        return stats.col_norms
    if stats.row_sq is None:
        raise ValueError("stats were collected without per-row data; "
                         "cannot subsample")
    rng = np.random.default_rng(seed)
    n = stats.row_sq.shape[0]
    k = max(1, int(round(q * n)))
    idx = rng.choice(n, size=k, replace=False)
    return np.sqrt(stats.row_sq[idx].sum(axis=0) / q)


def stoch_ria_score(w: np.ndarray, stats: ActivationStats, a: float = 0.5,
                    q: float = 0.3, seed: int = 0) -> ScoreMatrix:
    _check_dims(w, stats)
    if q == 1.0:
        return ScoreMatrix(ria_score(w, stats, a).scores, "stochria")
    return _ria_from_norms(w, subsampled_norms(stats, q, seed), a, "stochria")


def compute_score(w: np.ndarray, stats: ActivationStats | None,
                  metric: MetricConfig) -> ScoreMatrix:
    metric.validate()
    if metric.kind == "magnitude":
        return magnitude_score(w)
    if metric.kind == "wanda":
        return wanda_score(w, stats)
    if metric.kind == "ria":
        return ria_score(w, stats, metric.a)
    return stoch_ria_score(w, stats, metric.a, metric.q, metric.seed)


def _metric_norms(stats: ActivationStats | None, metric: MetricConfig) -> np.ndarray | None:
    if metric.kind == "magnitude":
        return None
    if metric.kind in ("wanda", "ria"):
        return stats.col_norms
    return subsampled_norms(stats, metric.q, metric.seed)


def score_vjp(w: np.ndarray, stats: ActivationStats | None, metric: MetricConfig,
              residual: np.ndarray) -> np.ndarray:
    """J_S(W)^T residual: the chain-rule pullback of the metric map, using
    sign(W) for d|W|/dW (0 at 0)."""
    metric.validate()
    s = np.sign(w)
    if metric.kind == "magnitude":
        return residual * s
    norms = _metric_norms(stats, metric)
    if metric.kind == "wanda":
        return residual * norms[None, :] * s
    # ria / stochria: S_ij = (|W_ij|/r_i + |W_ij|/c_j) * t_j with t_j = norms_j^a
    aw = np.abs(w)
    t = norms ** metric.a
    row = aw.sum(axis=1, keepdims=True)
    col = aw.sum(axis=0, keepdims=True)
    inv_r = np.divide(1.0, row, out=np.zeros_like(row), where=row > 0)
    inv_c = np.divide(1.0, col, out=np.zeros_like(col), where=col > 0)
    rt = residual * t[None, :]
    direct = rt * (inv_r + inv_c)
    row_corr = (rt * aw).sum(axis=1, keepdims=True) * inv_r ** 2
    col_corr = (rt * aw).sum(axis=0, keepdims=True) * inv_c ** 2
    return (direct - row_corr - col_corr) * s


def alignment_gradient(w: np.ndarray, gamma: np.ndarray,
                       stats: ActivationStats | None, metric: MetricConfig) -> np.ndarray:
    """Gradient w.r.t. W of 0.5 * ||Gamma - S(W)||_F^2."""
    s = compute_score(w, stats, metric).scores
    return score_vjp(w, stats, metric, s - gamma)


def _check_dims(w: np.ndarray, stats: ActivationStats):
    if stats is None or stats.col_norms.shape[0] != w.shape[1]:
        got = None if stats is None else stats.col_norms.shape[0]
        raise ValueError(f"col_norms length {got} does not match in-dim {w.shape[1]}")
