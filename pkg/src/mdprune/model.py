"""Toy prunable character LM: stacked blocks of single-head attention
projections and a bias-free MLP. Only the 2-d projection matrices are
prunable; embeddings and the output head are plain parameters.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .archive import read_archive, write_archive
from .autodiff import Tape, Tensor
from .corpus import CalibrationSet

_NEG = -1e9  # additive attention mask for disallowed positions


@dataclass
class ModelConfig:
    depth: int = 2
    width: int = 16
    vocab: int = 27
    context: int = 16
    mlp_ratio: int = 4
    seed: int = 0

    def validate(self):
        if self.depth < 1 or self.width < 1:
            raise ValueError("depth and width must be positive")
        if self.vocab < 2 or self.context < 2:
            raise ValueError("vocab must be >= 2 and context >= 2")


@dataclass
class ActivationStats:
    """Per-input-feature l2 norms of the layer's calibration inputs."""

    col_norms: np.ndarray
    sample_count: int
    row_sq: np.ndarray | None = None  # per-row squared inputs, for stochRIA

    def __post_init__(self):
        self.col_norms = np.asarray(self.col_norms, dtype=np.float64)
        if np.any(self.col_norms < 0):
            raise ValueError("col_norms must be nonnegative")


@dataclass
class PrunableLayer:
    name: str
    w: np.ndarray                     # trainable copy, evolved by the search
    w0: Tensor = None                 # frozen pretrained weights, never mutated
    gamma: np.ndarray = None
    v: np.ndarray = None
    stats: ActivationStats | None = None

    def __post_init__(self):
        self.w = np.array(self.w, dtype=np.float64)
        if self.w0 is None:
            self.w0 = Tensor(self.w)
        if self.gamma is None:
            self.gamma = np.zeros_like(self.w)
        if self.v is None:
            self.v = np.zeros_like(self.w)
        for arr in (self.gamma, self.v):
            if arr.shape != self.w0.shape:
                raise ValueError(f"{self.name}: state shape {arr.shape} != {self.w0.shape}")
        if self.w.shape != self.w0.shape:
            raise ValueError(f"{self.name}: W shape {self.w.shape} != {self.w0.shape}")


_ROLES = ("attn.q", "attn.k", "attn.v", "attn.o", "mlp.up", "mlp.down")

_CONST_CACHE: dict[tuple[int, int], tuple] = {}


def _batch_constants(S: int, T: int):
    """Position one-hots and the block-causal attention mask only depend on
    the batch geometry; cache them across steps."""
    key = (S, T)
    if key not in _CONST_CACHE:
        n = S * T
        pos = np.tile(np.arange(T), S)
        posmap = np.zeros((n, T))
        posmap[np.arange(n), pos] = 1.0
        seg = np.repeat(np.arange(S), T)
        mask = np.where((seg[:, None] == seg[None, :]) & (pos[None, :] <= pos[:, None]),
                        0.0, _NEG)
        if len(_CONST_CACHE) > 16:
            _CONST_CACHE.clear()
        _CONST_CACHE[key] = (posmap, pos, mask)
    return _CONST_CACHE[key]


class ToyModel:
    """Prunable toy LM. Non-prunable params: embed, pos, unembed."""

    def __init__(self, cfg: ModelConfig, embed, pos, unembed, layers):
        self.cfg = cfg
        self.embed = np.asarray(embed, dtype=np.float64)
        self.pos = np.asarray(pos, dtype=np.float64)
        self.unembed = np.asarray(unembed, dtype=np.float64)
        self.layers: dict[str, PrunableLayer] = {l.name: l for l in layers}

    @property
    def layer_names(self) -> list[str]:
        return list(self.layers)

    def layer_weights(self, source) -> dict[str, np.ndarray]:
        """Resolve the weight set to run with: the trainable copy ("w"),
        the frozen pretrained weights ("w0"), or an explicit dict."""
        if isinstance(source, dict):
            return source
        if source == "w":
            return {n: l.w for n, l in self.layers.items()}
        if source == "w0":
            return {n: l.w0.data for n, l in self.layers.items()}
        raise ValueError(f"unknown weight source {source!r}")

    def forward(self, seqs: np.ndarray, source="w", tape: Tape | None = None,
                collect: dict | None = None, train_extras: bool = False):
        """Run the model on a batch of sequences (S, T). Returns
        (loss, tape, leaves); ``leaves`` maps layer names (and, when
        ``train_extras``, embed/pos/unembed) to their tape leaves."""
        seqs = np.asarray(seqs, dtype=np.int64)
        if seqs.ndim != 2 or seqs.shape[1] < 2:
            raise ValueError("batch must be 2-d with sequence length >= 2")
        if tape is None:
            tape = Tape()
        S, T = seqs.shape
        n = S * T
        flat = seqs.reshape(-1)
        d = self.cfg.width

        onehot = np.zeros((n, self.cfg.vocab))
        onehot[np.arange(n), flat] = 1.0
        posmap, pos, mask = _batch_constants(S, T)

        e_var = tape.leaf(self.embed)
        p_var = tape.leaf(self.pos[:T])
        u_var = tape.leaf(self.unembed)
        leaves: dict[str, ad.Var] = {}
        if train_extras:
            leaves.update({"_embed": e_var, "_pos": p_var, "_unembed": u_var})

        weights = self.layer_weights(source)
        x = ad.add(tape, ad.matmul(tape, tape.leaf(onehot), e_var),
                   ad.matmul(tape, tape.leaf(posmap), p_var))
        mask_leaf = tape.leaf(mask)

        def proj(name, inp):
            wv = tape.leaf(weights[name])
            leaves[name] = wv
            if collect is not None:
                collect.setdefault(name, []).append(inp.value.copy())
            return ad.matmul(tape, inp, ad.transpose(tape, wv))

        for b in range(self.cfg.depth):
            pre = f"block{b}."
            q = proj(pre + "attn.q", x)
            k = proj(pre + "attn.k", x)
            v = proj(pre + "attn.v", x)
            scores = ad.add(tape, ad.smul(tape, 1.0 / np.sqrt(d),
                                          ad.matmul(tape, q, ad.transpose(tape, k))),
                            mask_leaf)
            att = ad.row_softmax(tape, scores)
            h = ad.matmul(tape, att, v)
            x = ad.add(tape, x, proj(pre + "attn.o", h))
            hid = ad.relu(tape, proj(pre + "mlp.up", x))
            x = ad.add(tape, x, proj(pre + "mlp.down", hid))

        logits = ad.matmul(tape, x, u_var)
        keep = np.nonzero(pos < T - 1)[0]
        targets = seqs[:, 1:].reshape(-1)
        loss = ad.cross_entropy_logits(tape, ad.take_rows(tape, logits, keep), targets)
        return loss, tape, leaves


def build_toy_model(cfg: ModelConfig) -> ToyModel:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    d, hid = cfg.width, cfg.mlp_ratio * cfg.width
    embed = rng.normal(0.0, 0.5, (cfg.vocab, d))
    pos = rng.normal(0.0, 0.1, (cfg.context, d))
    unembed = rng.normal(0.0, 1.0 / np.sqrt(d), (d, cfg.vocab))
    layers = []
    shapes = {"attn.q": (d, d), "attn.k": (d, d), "attn.v": (d, d), "attn.o": (d, d),
              "mlp.up": (hid, d), "mlp.down": (d, hid)}
    for b in range(cfg.depth):
        for role in _ROLES:
            out, inp = shapes[role]
            w = rng.normal(0.0, 1.0 / np.sqrt(inp), (out, inp))
            layers.append(PrunableLayer(name=f"block{b}.{role}", w=w))
    return ToyModel(cfg, embed, pos, unembed, layers)


def task_loss(model: ToyModel, seqs: np.ndarray, source="w"):
    """Mean next-token cross entropy over the batch, differentiable w.r.t.
    every layer's W (and embeddings when training)."""
    return model.forward(seqs, source=source)


def task_gradients(model: ToyModel, seqs: np.ndarray, source="w"
                   ) -> tuple[float, dict[str, np.ndarray]]:
    loss, tape, leaves = model.forward(seqs, source=source)
    ad.backward(tape, loss)
    return float(loss.value), {n: v.grad for n, v in leaves.items()}


def pretrain(model: ToyModel, calib: CalibrationSet, steps: int, lr: float = 0.2,
             batch_size: int = 8, seed: int = 0) -> list[float]:
    """Plain SGD on all parameters; afterwards the result is frozen into W0
    via ``freeze_pretrained``. Returns the per-step loss history."""
    rng = np.random.default_rng(seed)
    history = []
    seqs = calib.sequences
    for _ in range(steps):
        idx = rng.choice(len(seqs), size=min(batch_size, len(seqs)), replace=False)
        loss, tape, leaves = model.forward(seqs[idx], source="w", train_extras=True)
        ad.backward(tape, loss)
        history.append(float(loss.value))
        for name, var in leaves.items():
            if name == "_embed":
                model.embed -= lr * var.grad
            elif name == "_pos":
                model.pos[: var.grad.shape[0]] -= lr * var.grad
            elif name == "_unembed":
                model.unembed -= lr * var.grad
            else:
                layer = model.layers[name]
                layer.w = layer.w - lr * var.grad
    return history


def freeze_pretrained(model: ToyModel) -> None:
    """Snapshot the current trainable weights as the frozen W0 and reset the
    search state (W = W0, Gamma = 0, V = 0)."""
    for layer in model.layers.values():
        layer.w0 = Tensor(layer.w)
        layer.w = layer.w0.data.copy()
        layer.gamma = np.zeros_like(layer.w)
        layer.v = np.zeros_like(layer.w)


def collect_activation_stats(model: ToyModel, calib: CalibrationSet,
                             keep_rows: bool = True) -> None:
    """One pass over the calibration set at W = W0; per-layer inputs are
    reduced to per-feature l2 norms (and optionally kept squared, row-wise,
    for subsampled metrics). Stats stay frozen for the whole search."""
    if len(calib) == 0:
        raise ValueError("calibration set is empty")
    collected: dict[str, list[np.ndarray]] = {}
    model.forward(calib.sequences, source="w0", collect=collected)
    for name, layer in model.layers.items():
        x = np.concatenate(collected[name], axis=0)
        sq = x * x
        layer.stats = ActivationStats(
            col_norms=np.sqrt(sq.sum(axis=0)),
            sample_count=x.shape[0],
            row_sq=sq if keep_rows else None,
        )


def apply_mask(layer: PrunableLayer, mask: np.ndarray) -> np.ndarray:
    """W0 with the mask applied; W0 and the trainable copy are untouched."""
    mask = np.asarray(mask)
    if mask.shape != layer.w0.shape:
        raise ValueError(f"{layer.name}: mask shape {mask.shape} != {layer.w0.shape}")
    return layer.w0.data * mask


def w0_checksum(model: ToyModel) -> str:
    import hashlib
    h = hashlib.sha256()
    for name in sorted(model.layers):
        h.update(name.encode())
        h.update(model.layers[name].w0.data.tobytes())
    return h.hexdigest()


def save_model(path, model: ToyModel) -> None:
    tensors = {"embed": model.embed, "pos": model.pos, "unembed": model.unembed}
    for name, layer in model.layers.items():
        tensors[name + ".w0"] = layer.w0.data
        tensors[name + ".w"] = layer.w
        tensors[name + ".gamma"] = layer.gamma
        tensors[name + ".v"] = layer.v
    meta = {
        "config": {k: getattr(model.cfg, k) for k in
                   ("depth", "width", "vocab", "context", "mlp_ratio", "seed")},
        "layers": {n: list(l.w0.shape) for n, l in model.layers.items()},
    }
    write_archive(path, tensors, meta)


def load_model(path) -> ToyModel:
    tensors, meta = read_archive(path)
    cfg = ModelConfig(**meta["config"])
    layers = []
    for name in meta["layers"]:
        layers.append(PrunableLayer(
            name=name, w=tensors[name + ".w"], w0=Tensor(tensors[name + ".w0"]),
            gamma=tensors[name + ".gamma"], v=tensors[name + ".v"]))
    return ToyModel(cfg, tensors["embed"], tensors["pos"], tensors["unembed"], layers)
