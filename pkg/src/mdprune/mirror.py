"""Coupled search dynamics: gradient step on the trainable weights, dual
accumulation, and a soft-threshold proximal step producing the saliency
variable, plus the 2:4 regularizer branch.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .archive import read_archive, write_archive
from .corpus import CalibrationSet
from .diagnostics import DiagnosticsTrace, bregman_term
from .model import ToyModel, task_gradients
from .saliency import MetricConfig, compute_score, score_vjp


class SearchDiverged(RuntimeError):
    def __init__(self, step: int, layer: str, trace: "DiagnosticsTrace"):
        super().__init__(f"non-finite values at step {step}, layer {layer}")
        self.step = step
        self.layer = layer
        self.trace = trace


@dataclass
class PruneConfig:
    rho: float = 1.0
    kappa: float = 1.0
    lam: float = 1e-3
    alpha: float | list = 1e-4        # constant step or explicit schedule
    steps: int = 400
    metric: MetricConfig = field(default_factory=MetricConfig)
    pattern: str | tuple = "unstructured"   # "unstructured" or (N, M)
    seed: int = 0
    batch_size: int | None = None      # None = full batch (diagnostic runs)
    straight_through: bool = False     # treat S as constant in the W step
    r24_eta: float | None = None       # default kappa * alpha_n
    record_stationarity: bool = True

    def validate(self):
        if self.rho < 0 or self.kappa <= 0 or self.lam < 0:
            raise ValueError("require rho >= 0, kappa > 0, lambda >= 0")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        sched = self.alpha_schedule()
        if len(sched) < self.steps or any(a <= 0 for a in sched[: self.steps]):
            raise ValueError("alpha schedule must cover all steps with positive values")
        self.metric.validate()
        if self.pattern != "unstructured":
            n, m = self.pattern
            if not (0 < n <= m):
                raise ValueError(f"bad N:M pattern {self.pattern}")

    def alpha_schedule(self) -> list[float]:
        if isinstance(self.alpha, (int, float)):
            return [float(self.alpha)] * self.steps
        return [float(a) for a in self.alpha]

    def fingerprint(self) -> str:
        blob = json.dumps({
            "rho": self.rho, "kappa": self.kappa, "lam": self.lam,
            "alpha": self.alpha_schedule(), "steps": self.steps,
            "metric": [self.metric.kind, self.metric.a, self.metric.q, self.metric.seed],
            "pattern": list(self.pattern) if self.pattern != "unstructured" else "unstructured",
            "seed": self.seed, "batch_size": self.batch_size,
            "straight_through": self.straight_through,
        }, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def soft_threshold(z: np.ndarray, t: float) -> np.ndarray:
    """Prox of t * ||.||_1: sign(z) * max(|z| - t, 0) elementwise."""
    if t < 0:
        raise ValueError("threshold must be >= 0")
    z = np.asarray(z, dtype=np.float64)
    return np.sign(z) * np.maximum(np.abs(z) - t, 0.0)


def r24_penalty(block) -> float:
    """Sum of the four triple products of absolute values over a 4-block;
    zero exactly when at most two entries are nonzero."""
    a = np.abs(np.asarray(block, dtype=np.float64))
    if a.shape != (4,):
        raise ValueError(f"block must have length 4, got shape {a.shape}")
    return float(a[0] * a[1] * a[2] + a[1] * a[2] * a[3]
                 + a[2] * a[3] * a[0] + a[3] * a[0] * a[1])


def r24_total(w: np.ndarray) -> float:
    a = np.abs(_blocks_of_4(w))
    e3 = (a[:, 0] * a[:, 1] * a[:, 2] + a[:, 1] * a[:, 2] * a[:, 3]
          + a[:, 2] * a[:, 3] * a[:, 0] + a[:, 3] * a[:, 0] * a[:, 1])
    return float(e3.sum())


def _blocks_of_4(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.shape[-1] % 4 != 0:
        raise ValueError(f"row length {w.shape[-1]} not divisible by 4")
    return w.reshape(-1, 4)


def r24_prox_step(w: np.ndarray, eta: float) -> np.ndarray:
    """One damped subgradient step on the 2:4 penalty in |w|-space: shrink
    each magnitude by eta times the penalty's partial, clipped at zero.
    Never flips a sign and never increases any |w_i|."""
    if eta <= 0:
        raise ValueError("eta must be > 0")
    blocks = _blocks_of_4(w)
    a = np.abs(blocks)
    s = a.sum(axis=1, keepdims=True)
    e2_total = 0.5 * (s ** 2 - (a ** 2).sum(axis=1, keepdims=True))
    # pairwise-product sum over the other three entries, cyclic in each slot
    d = e2_total - a * (s - a)
    shrunk = np.maximum(a - eta * d, 0.0)
    return (np.sign(blocks) * shrunk).reshape(np.asarray(w).shape)


@dataclass
class SearchResult:
    gamma_star: dict[str, np.ndarray]
    trace: DiagnosticsTrace
    steps_run: int


def _energy_terms(model: ToyModel, config: PruneConfig,
                  scores: dict[str, np.ndarray]) -> float:
    reg = 0.0
    for name, layer in model.layers.items():
        reg += 0.5 * config.rho * float(np.sum((layer.gamma - scores[name]) ** 2))
        reg += config.lam * float(np.abs(layer.gamma).sum())
    return reg


def _update_layer(layer, g_task: np.ndarray, score: np.ndarray,
                  config: PruneConfig, alpha: float
                  ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Algorithm lines for one layer: W gradient step (with optional 2:4
    prox), dual accumulation, soft-threshold prox. Pure: returns new state."""
    if config.straight_through:
        g_align = np.zeros_like(layer.w)
    else:
        g_align = config.rho * score_vjp(layer.w, layer.stats, config.metric,
                                         score - layer.gamma)
    w_new = layer.w - config.kappa * alpha * (g_task + g_align)
    if config.pattern != "unstructured":
        eta = config.r24_eta if config.r24_eta is not None else config.kappa * alpha
        w_new = r24_prox_step(w_new, eta)
    v_new = layer.v - alpha * config.rho * (layer.gamma - score)
    gamma_new = soft_threshold(v_new, config.lam)
    return w_new, v_new, gamma_new


def mirror_step(model: ToyModel, config: PruneConfig, batch: np.ndarray,
                alpha: float) -> float:
    """One coupled search step over all layers using gradients from the same
    batch. Mutates the model's (W, Gamma, V); returns the batch task loss."""
    loss, g_task = task_gradients(model, batch, source="w")
    for name, layer in model.layers.items():
        score = compute_score(layer.w, layer.stats, config.metric).scores
        w_new, v_new, gamma_new = _update_layer(layer, g_task[name], score,
                                                config, alpha)
        layer.w, layer.v, layer.gamma = w_new, v_new, gamma_new
    return loss


def run_search(model: ToyModel, calib: CalibrationSet, config: PruneConfig
               ) -> SearchResult:
    """Full search loop. Mutates the model's trainable copies (W, Gamma, V);
    W0 is never touched. Raises SearchDiverged (with the partial trace
    attached) on non-finite state."""
    config.validate()
    for layer in model.layers.values():
        if layer.stats is None:
            raise ValueError(f"activation stats missing for {layer.name}; "
                             "collect them before searching")
        if config.pattern != "unstructured" and layer.w.shape[1] % config.pattern[1] != 0:
            raise ValueError(f"{layer.name}: in-dim {layer.w.shape[1]} not divisible "
                             f"by M={config.pattern[1]}")
    rng = np.random.default_rng(config.seed)
    alphas = config.alpha_schedule()
    trace = DiagnosticsTrace(alpha=alphas[:config.steps],
                             config_fingerprint=config.fingerprint())
    names = model.layer_names
    g = {n: np.zeros_like(model.layers[n].gamma) for n in names}   # Omega subgradient
    g_prev = {n: np.zeros_like(g[n]) for n in names}
    gamma_prev = {n: model.layers[n].gamma.copy() for n in names}

    def pick_batch():
        if config.batch_size is None or config.batch_size >= len(calib):
            return calib.sequences
        idx = rng.choice(len(calib), size=config.batch_size, replace=False)
        return calib.sequences[idx]

    # on the way to divergence intermediate overflow is expected; the finite
    # check below is the arbiter
    old_err = np.seterr(over="ignore", invalid="ignore")
    try:
        return _search_loop(model, calib, config, trace, names, g, g_prev,
                            gamma_prev, alphas, pick_batch)
    finally:
        np.seterr(**old_err)


def _search_loop(model, calib, config, trace, names, g, g_prev, gamma_prev,
                 alphas, pick_batch) -> SearchResult:
    pending_dw_sq = 0.0
    for k in range(config.steps + 1):
        last = k == config.steps
        batch = pick_batch()
        loss, g_task = task_gradients(model, batch, source="w")
        scores = {n: compute_score(model.layers[n].w, model.layers[n].stats,
                                   config.metric).scores for n in names}

        energy = loss + _energy_terms(model, config, scores)
        breg = sum(bregman_term(model.layers[n].gamma, gamma_prev[n],
                                g_prev[n], config.lam) for n in names) if k else 0.0
        f_alpha = alphas[k - 1] if k else (alphas[0] if alphas else 0.0)
        lyap = f_alpha * energy + breg
        dp_sq = pending_dw_sq + (sum(
            float(np.sum((model.layers[n].gamma - gamma_prev[n]) ** 2))
            for n in names) if k else 0.0)
        dg_sq = sum(float(np.sum((g[n] - g_prev[n]) ** 2)) for n in names) if k else 0.0

        h_norm = 0.0
        if k and config.record_stationarity:
            c_sq = 0.0
            for n in names:
                layer = model.layers[n]
                res = scores[n] - layer.gamma
                c1 = f_alpha * (g_task[n] + config.rho *
                                score_vjp(layer.w, layer.stats, config.metric, res))
                c2 = f_alpha * config.rho * (layer.gamma - scores[n]) + g[n] - g_prev[n]
                c3 = gamma_prev[n] - layer.gamma
                c_sq += float(np.sum(c1 ** 2) + np.sum(c2 ** 2) + np.sum(c3 ** 2))
            h_norm = np.sqrt(c_sq)

        trace.append(energy=energy, lyapunov=lyap, dp_sq=dp_sq, dq_sq=dp_sq + dg_sq,
                     h_norm=h_norm, bregman=breg)
        if last:
            break

        alpha = alphas[k]
        pending_dw_sq = 0.0
        for n in names:
            layer = model.layers[n]
            gamma_prev[n] = layer.gamma.copy()
            g_prev[n] = g[n].copy()
            w_new, v_new, gamma_new = _update_layer(layer, g_task[n], scores[n],
                                                    config, alpha)
            grad_gamma = config.rho * (layer.gamma - scores[n])
            g[n] = g[n] - (gamma_new - layer.gamma + config.kappa * alpha * grad_gamma) \
                / config.kappa
            pending_dw_sq += float(np.sum((w_new - layer.w) ** 2))
            layer.w, layer.v, layer.gamma = w_new, v_new, gamma_new
            if not (np.all(np.isfinite(w_new)) and np.all(np.isfinite(v_new))
                    and np.all(np.isfinite(g[n]))):
                raise SearchDiverged(k, n, trace)

    gamma_star = {n: model.layers[n].gamma.copy() for n in names}
    return SearchResult(gamma_star, trace, config.steps)


def save_search_state(path, model: ToyModel, config: PruneConfig, step: int) -> None:
    tensors = {}
    for name, layer in model.layers.items():
        tensors[name + ".w"] = layer.w
        tensors[name + ".gamma"] = layer.gamma
        tensors[name + ".v"] = layer.v
    write_archive(path, tensors,
                  {"config_fingerprint": config.fingerprint(), "step": step})


def load_search_state(path, model: ToyModel, config: PruneConfig) -> int:
    tensors, meta = read_archive(path)
    if meta.get("config_fingerprint") != config.fingerprint():
        raise ValueError("checkpoint was produced by a different configuration")
    for name, layer in model.layers.items():
        layer.w = tensors[name + ".w"]
        layer.gamma = tensors[name + ".gamma"]
        layer.v = tensors[name + ".v"]
    return int(meta["step"])
