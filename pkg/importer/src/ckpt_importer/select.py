"""Tensor selection: regex patterns mapping source names to (block, role)
destinations. Only 2-d attention-projection and MLP matrices are eligible."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass

import numpy as np

ROLES = ("q", "k", "v", "o", "up", "down", "gate")

_DEST = {"q": "attn.q", "k": "attn.k", "v": "attn.v", "o": "attn.o",
         "up": "mlp.up", "down": "mlp.down", "gate": "mlp.gate"}


class SelectionError(ValueError):
    pass


@dataclass
class Rule:
    pattern: str     # regex with a capture group for the block index
    role: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise SelectionError(f"unknown role {self.role!r}; "
                                 f"expected one of {ROLES}")
        try:
            self.regex = re.compile(self.pattern)
        except re.error as e:
            raise SelectionError(f"bad pattern {self.pattern!r}: {e}") from None
        if self.regex.groups < 1:
            raise SelectionError(f"pattern {self.pattern!r} needs a capture "
                                 "group for the block index")


@dataclass
class LayerSelection:
    rules: list[Rule]

    def match(self, name: str) -> str | None:
        """Destination name for a source tensor, or None if unselected."""
        for rule in self.rules:
            m = rule.regex.fullmatch(name)
            if m:
                block = int(m.group(1))
                return f"block{block}.{_DEST[rule.role]}"
        return None


def load_selection(path) -> LayerSelection:
    """Map file: JSON list of {"pattern": ..., "role": ...} rules."""
    with open(path) as f:
        doc = json.load(f)
    if not isinstance(doc, list) or not doc:
        raise SelectionError("map file must be a non-empty JSON list of rules")
    rules = []
    for ent in doc:
        if not isinstance(ent, dict) or set(ent) != {"pattern", "role"}:
            raise SelectionError(f"bad rule {ent!r}: expected keys "
                                 "pattern and role")
        rules.append(Rule(ent["pattern"], ent["role"]))
    return LayerSelection(rules)


def select_tensors(tensors: dict[str, np.ndarray],
                   selection: LayerSelection) -> dict[str, np.ndarray]:
    """Apply the selection; enforces 2-d shapes and unique destinations."""
    out: dict[str, np.ndarray] = {}
    origin: dict[str, str] = {}
    for name, arr in tensors.items():
        dest = selection.match(name)
        if dest is None:
            continue
        if arr.ndim != 2:
            raise SelectionError(f"selected tensor {name!r} is not 2-d "
                                 f"(shape {list(arr.shape)})")
        if dest in out:
            raise SelectionError(f"both {origin[dest]!r} and {name!r} map to "
                                 f"{dest!r}")
        out[dest] = arr
        origin[dest] = name
    if not out:
        available = ", ".join(sorted(tensors)) or "(none)"
        raise SelectionError("selection matched no tensors; available: "
                             + available)
    return out
