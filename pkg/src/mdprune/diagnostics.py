"""Convergence machinery as runtime checks: step-size bound, Lyapunov
sufficient descent, subgradient stationarity residual, rate summaries.

Symbol note: the alignment weight (config ``rho``) and the descent constant
(``rho_desc`` = 1/kappa - alpha*(L_W + rho*L_S^2)/2) are distinct and never
conflated here.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np


@dataclass
class DiagnosticsTrace:
    """Per-state record along a search run. Row k describes state k; the
    difference columns (dp_sq, dq_sq, h_norm, bregman) describe the
    transition from state k-1 and are zero at k = 0."""

    alpha: list = field(default_factory=list)
    config_fingerprint: str = ""
    energy: list = field(default_factory=list)
    lyapunov: list = field(default_factory=list)
    dp_sq: list = field(default_factory=list)
    dq_sq: list = field(default_factory=list)
    h_norm: list = field(default_factory=list)
    bregman: list = field(default_factory=list)

    def append(self, energy, lyapunov, dp_sq, dq_sq, h_norm, bregman):
        self.energy.append(float(energy))
        self.lyapunov.append(float(lyapunov))
        self.dp_sq.append(float(dp_sq))
        self.dq_sq.append(float(dq_sq))
        self.h_norm.append(float(h_norm))
        self.bregman.append(float(bregman))

    def __len__(self):
        return len(self.energy)

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "energy", "F", "dP_sq", "H_norm", "bregman"])
            for k in range(len(self)):
                w.writerow([k, self.energy[k], self.lyapunov[k], self.dp_sq[k],
                            self.h_norm[k], self.bregman[k]])


def bregman_term(u: np.ndarray, v: np.ndarray, g: np.ndarray, lam: float) -> float:
    """B_Omega^g(u, v) for Omega = lam * ||.||_1; nonnegative whenever g is a
    valid subgradient of Omega at v."""
    return float(lam * (np.abs(u).sum() - np.abs(v).sum()) - np.sum(g * (u - v)))


def lyapunov_value(alpha: float, energy: float, breg: float) -> float:
    return alpha * energy + breg


def step_size_bound(l_w: float, l_s: float, rho: float, kappa: float) -> float:
    """Largest admissible step: 2 / (kappa * (L_W + rho * L_S^2))."""
    if min(l_w, l_s, rho) < 0 or kappa <= 0:
        raise ValueError("require L_W, L_S, rho >= 0 and kappa > 0")
    denom = kappa * (l_w + rho * l_s * l_s)
    if denom == 0:
        raise ValueError("zero denominator: L_W + rho * L_S^2 must be positive")
    return 2.0 / denom


def descent_constant(kappa: float, alpha: float, l_w: float, l_s: float,
                     rho: float) -> float:
    return 1.0 / kappa - alpha * (l_w + rho * l_s * l_s) / 2.0


def estimate_map_lipschitz(fn, x0: np.ndarray, probes: int = 100,
                           radius: float = 1e-2, seed: int = 0,
                           refine: int = 5) -> float:
    """Probe-based lower-bound estimate of the Lipschitz constant of a map
    around x0: max finite-difference ratio over random probe pairs, then a
    few iterations that re-probe along the steepest observed direction."""
    if probes < 2:
        raise ValueError("need at least 2 probes")
    rng = np.random.default_rng(seed)
    x0 = np.asarray(x0, dtype=np.float64)
    best = 0.0
    best_dir = None
    f0 = fn(x0)
    for _ in range(probes):
        u = rng.standard_normal(x0.shape)
        nu = np.linalg.norm(u)
        if nu == 0:
            continue
        u = u / nu * radius
        ratio = np.linalg.norm(fn(x0 + u) - f0) / radius
        if ratio > best:
            best, best_dir = ratio, u / radius
    d = best_dir if best_dir is not None else rng.standard_normal(x0.shape)
    for _ in range(refine):
        nd = np.linalg.norm(d)
        if nd == 0:
            break
        step = d / nd * radius
        diff = fn(x0 + step) - fn(x0 - step)
        ratio = np.linalg.norm(diff) / (2 * radius)
        best = max(best, ratio)
        d = diff
    return best


def estimate_lipschitz(model, calib, probes: int = 40, radius: float = 1e-2,
                       seed: int = 0, metric=None) -> tuple[float, float]:
    """(L_W, L_S): probe estimates for the task-gradient map and the metric
    map around W0, over the flattened prunable weights."""
    from .model import task_gradients
    from .saliency import compute_score

    names = model.layer_names
    shapes = [model.layers[n].w0.shape for n in names]
    sizes = [int(np.prod(s)) for s in shapes]

    def unflatten(x):
        out, off = {}, 0
        for n, s, sz in zip(names, shapes, sizes):
            out[n] = x[off: off + sz].reshape(s)
            off += sz
        return out

    x0 = np.concatenate([model.layers[n].w0.data.ravel() for n in names])

    def grad_map(x):
        ws = unflatten(x)
        _, grads = task_gradients(model, calib.sequences, source=ws)
        return np.concatenate([grads[n].ravel() for n in names])

    def metric_map(x):
        ws = unflatten(x)
        return np.concatenate([
            compute_score(ws[n], model.layers[n].stats, metric).scores.ravel()
            for n in names])

    l_w = estimate_map_lipschitz(grad_map, x0, probes=probes, radius=radius, seed=seed)
    l_s = 1.0
    if metric is not None:
        l_s = estimate_map_lipschitz(metric_map, x0, probes=probes, radius=radius,
                                     seed=seed + 1)
    return l_w, l_s


@dataclass
class DescentReport:
    checks: np.ndarray       # per-transition booleans, transitions k -> k+1 for k >= 1
    pass_rate: float
    violations: int


def descent_check(trace: DiagnosticsTrace, rho_desc: float,
                  slack: float = 1e-8) -> DescentReport:
    """Verify F(Q_{k+1}) <= F(Q_k) - rho_desc * ||P_{k+1} - P_k||^2 + slack
    along the trace. The Lyapunov value is defined from k >= 1 (the Bregman
    term needs two iterates), so transitions are checked from k = 1 on."""
    if len(trace) < 3:
        raise ValueError("trace too short for a descent check")
    f = np.asarray(trace.lyapunov)
    dp = np.asarray(trace.dp_sq)
    ok = f[2:] <= f[1:-1] - rho_desc * dp[2:] + slack
    return DescentReport(ok, float(ok.mean()), int((~ok).sum()))


def stationarity_trend(trace: DiagnosticsTrace) -> tuple[float, float]:
    """(first-half mean, second-half mean) of ||P_{k+1} - P_k||^2."""
    dp = np.asarray(trace.dp_sq[1:])
    if len(dp) < 4:
        raise ValueError("trace too short for a trend check")
    half = len(dp) // 2
    return float(dp[:half].mean()), float(dp[half:].mean())


def residual_rate_fit(trace: DiagnosticsTrace, envelope: float = 3.0
                      ) -> tuple[float, bool]:
    """Fit c in running-mean(||H_k||^2) <= c / K. c is taken from the stable
    tail (median of K * running mean over the second half); returns (c, ok)
    where ok says the whole trajectory stays inside ``envelope * c / K``."""
    h2 = np.asarray(trace.h_norm[1:]) ** 2
    if len(h2) < 4:
        raise ValueError("trace too short for a rate fit")
    k = np.arange(1, len(h2) + 1)
    running = np.cumsum(h2) / k
    c = float(np.median((running * k)[len(h2) // 2:]))
    ok = bool(np.all(running * k <= envelope * max(c, 1e-300)))
    return c, ok


def residual_bound_check(trace: DiagnosticsTrace, kappa: float, alpha: float,
                         l_w: float, rho: float) -> np.ndarray:
    """Per-transition check ||H_{k+1}|| <= rho_1 * ||Q_{k+1} - Q_k|| with
    rho_1 = 2/kappa + 1 + alpha * (L_W + 2 * rho)."""
    rho1 = 2.0 / kappa + 1.0 + alpha * (l_w + 2.0 * rho)
    h = np.asarray(trace.h_norm[1:])
    dq = np.sqrt(np.asarray(trace.dq_sq[1:]))
    return h <= rho1 * dq + 1e-12
