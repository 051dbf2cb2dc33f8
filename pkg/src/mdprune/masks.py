"""One-shot mask export from the final saliency variable: unstructured
global-threshold selection at arbitrary kept-count budgets, semi-structured
N:M selection, and nested multi-budget sweeps from a single sort.

Tie-breaking is deterministic everywhere: stable order by (layer index, row,
column), keeping the lower index first among equal scores.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np


@dataclass
class Mask:
    layers: dict[str, np.ndarray]          # uint8, same shapes as Gamma*
    pattern: str                           # "unstructured" or "N:M"
    kept: int = 0
    budget: int | None = None              # requested kept-count (unstructured)
    scope: str | None = None
    taus: dict[str, float] = field(default_factory=dict)  # threshold per layer
    tie_note: str = ""

    def total(self) -> int:
        return sum(int(m.size) for m in self.layers.values())

    def kept_count(self) -> int:
        return sum(int(m.sum()) for m in self.layers.values())

    def sparsity(self) -> float:
        t = self.total()
        return 1.0 - self.kept_count() / t if t else 0.0


def _ordered_items(gammas: dict[str, np.ndarray]) -> list[tuple[str, np.ndarray]]:
    return list(gammas.items())


def _selection_order(gammas: dict[str, np.ndarray], scope: str) -> np.ndarray:
    """Global priority order over all entries: index into the concatenated
    flat array, best first. Prefixes of this order give nested masks."""
    items = _ordered_items(gammas)
    flat = np.concatenate([np.abs(g).ravel() for _, g in items])
    if scope == "global":
        # stable argsort keeps lower flat index first among ties
        return np.argsort(-flat, kind="stable")
    if scope != "per-layer":
        raise ValueError(f"unknown scope {scope!r}")
    # per-layer proportional budgets via normalized-rank interleaving: the
    # prefix of length B holds about B * n_l / total entries of each layer,
    # and prefixes are nested by construction (unlike rounded quotas).
    keys = []
    offset = 0
    for li, (_, g) in enumerate(items):
        a = np.abs(g).ravel()
        n = a.size
        order = np.argsort(-a, kind="stable")
        rank = np.empty(n, dtype=np.int64)
        rank[order] = np.arange(n)
        keys.append(np.stack([(rank + 1) / n, np.full(n, li, dtype=np.float64),
                              rank.astype(np.float64),
                              np.arange(offset, offset + n, dtype=np.float64)]))
        offset += n
    all_keys = np.concatenate(keys, axis=1)
    order = np.lexsort((all_keys[2], all_keys[1], all_keys[0]))
    return all_keys[3][order].astype(np.int64)


def _mask_from_kept(gammas: dict[str, np.ndarray], kept_flat: np.ndarray) -> dict:
    items = _ordered_items(gammas)
    total = sum(g.size for _, g in items)
    keep = np.zeros(total, dtype=np.uint8)
    keep[kept_flat] = 1
    out, offset = {}, 0
    for name, g in items:
        out[name] = keep[offset: offset + g.size].reshape(g.shape)
        offset += g.size
    return out


def export_unstructured(gammas: dict[str, np.ndarray], budget: int,
                        scope: str = "per-layer") -> Mask:
    """Keep exactly ``budget`` entries by |Gamma*|, globally sorted or with
    per-layer proportional budgets."""
    total = sum(g.size for g in gammas.values())
    if not (0 <= budget <= total):
        raise ValueError(f"budget {budget} out of range [0, {total}]")
    order = _selection_order(gammas, scope)
    kept = order[:budget]
    layers = _mask_from_kept(gammas, kept)
    mask = Mask(layers, "unstructured", budget=budget, scope=scope,
                tie_note="ties at the threshold keep the lower (layer,row,col) index")
    mask.kept = mask.kept_count()
    for name, g in gammas.items():
        m = layers[name]
        kept_vals = np.abs(g)[m == 1]
        mask.taus[name] = float(kept_vals.min()) if kept_vals.size else float("inf")
    return mask


def export_nm(gammas: dict[str, np.ndarray], n: int, m: int) -> Mask:
    """Per contiguous length-m block along the input dimension, keep the n
    largest |Gamma*| entries (ties: lower index first)."""
    if not (0 < n <= m):
        raise ValueError(f"bad N:M pattern {n}:{m}")
    layers = {}
    for name, g in gammas.items():
        if g.shape[1] % m != 0:
            raise ValueError(f"{name}: row length {g.shape[1]} not divisible by {m}")
        blocks = np.abs(g).reshape(-1, m)
        order = np.argsort(-blocks, axis=1, kind="stable")
        mask = np.zeros_like(blocks, dtype=np.uint8)
        np.put_along_axis(mask, order[:, :n], 1, axis=1)
        layers[name] = mask.reshape(g.shape)
    out = Mask(layers, f"{n}:{m}", tie_note="per-block ties keep the lower column index")
    out.kept = out.kept_count()
    return out


def validate_nm(mask: Mask, n: int, m: int) -> bool:
    for g in mask.layers.values():
        counts = g.reshape(-1, m).sum(axis=1)
        if np.any(counts > n):
            return False
    return True


def sparsity_sweep(gammas: dict[str, np.ndarray], budgets: list[int],
                   scope: str = "per-layer") -> list[Mask]:
    """One sort, many thresholds: masks for ascending kept-count budgets,
    nested by construction."""
    if list(budgets) != sorted(budgets):
        raise ValueError("budgets must be sorted ascending by kept-count")
    total = sum(g.size for g in gammas.values())
    if budgets and not (0 <= budgets[0] and budgets[-1] <= total):
        raise ValueError("budget out of range")
    order = _selection_order(gammas, scope)
    masks = []
    for b in budgets:
        layers = _mask_from_kept(gammas, order[:b])
        mask = Mask(layers, "unstructured", budget=b, scope=scope)
        mask.kept = mask.kept_count()
        for name, g in gammas.items():
            kept_vals = np.abs(g)[layers[name] == 1]
            mask.taus[name] = float(kept_vals.min()) if kept_vals.size else float("inf")
        masks.append(mask)
    return masks


def budget_from_sparsity(gammas: dict[str, np.ndarray], sparsity: float) -> int:
    total = sum(g.size for g in gammas.values())
    if not (0.0 <= sparsity <= 1.0):
        raise ValueError(f"sparsity {sparsity} outside [0, 1]")
    return int(round((1.0 - sparsity) * total))


def _rle(bits: np.ndarray) -> list[int]:
    """Run lengths of a flat 0/1 array, alternating and starting with zeros."""
    bits = np.asarray(bits, dtype=np.uint8).ravel()
    if bits.size == 0:
        return []
    change = np.nonzero(np.diff(bits))[0] + 1
    bounds = np.concatenate([[0], change, [bits.size]])
    runs = np.diff(bounds).tolist()
    if bits[0] == 1:
        runs = [0] + runs
    return [int(r) for r in runs]


def _unrle(runs: list[int], size: int) -> np.ndarray:
    out = np.zeros(size, dtype=np.uint8)
    pos, val = 0, 0
    for r in runs:
        if val:
            out[pos: pos + r] = 1
        pos += r
        val ^= 1
    if pos != size:
        raise ValueError("run lengths do not cover the mask")
    return out


def save_mask(path, mask: Mask) -> None:
    doc = {
        "version": 1,
        "pattern": mask.pattern,
        "budget": mask.budget,
        "scope": mask.scope,
        "kept": mask.kept_count(),
        "tie_note": mask.tie_note,
        "layers": [
            {"name": name, "shape": list(m.shape), "rle": _rle(m),
             "tau": mask.taus.get(name)}
            for name, m in mask.layers.items()
        ],
    }
    with open(path, "w") as f:
        json.dump(doc, f)


def load_mask(path) -> Mask:
    with open(path) as f:
        doc = json.load(f)
    layers = {}
    taus = {}
    for ent in doc["layers"]:
        size = int(np.prod(ent["shape"]))
        layers[ent["name"]] = _unrle(ent["rle"], size).reshape(ent["shape"])
        if ent.get("tau") is not None:
            taus[ent["name"]] = ent["tau"]
    mask = Mask(layers, doc["pattern"], budget=doc.get("budget"),
                scope=doc.get("scope"), taus=taus, tie_note=doc.get("tie_note", ""))
    mask.kept = mask.kept_count()
    return mask


def write_summary_csv(path, mask: Mask) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["layer", "kept", "total", "sparsity", "tau"])
        for name, m in mask.layers.items():
            kept, total = int(m.sum()), int(m.size)
            w.writerow([name, kept, total, 1.0 - kept / total,
                        mask.taus.get(name, "")])
