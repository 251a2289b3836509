"""Named parameter store with per-entry Adam state and freeze flags."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from ..errors import ConfigError, MissingGradientError, ShapeError
from .tensor import Tensor, as_f64

# name -> gradient array
GradMap = dict[str, np.ndarray]


@dataclass
class ParamEntry:
    name: str
    value: np.ndarray
    trainable: bool = True
    adam_m: np.ndarray = field(default=None)  # type: ignore[assignment]
    adam_v: np.ndarray = field(default=None)  # type: ignore[assignment]
    step_count: int = 0

    def __post_init__(self):
        self.value = as_f64(self.value)
        if self.adam_m is None:
            self.adam_m = np.zeros_like(self.value)
        if self.adam_v is None:
            self.adam_v = np.zeros_like(self.value)


class ParamRegistry:
    """Ordered mapping of unique parameter names to entries."""

    def __init__(self):
        self._entries: dict[str, ParamEntry] = {}

    def add(self, name: str, value, trainable: bool = True) -> ParamEntry:
        if name in self._entries:
            raise ConfigError(f"duplicate parameter name '{name}'")
        entry = ParamEntry(name, value, trainable)
        self._entries[name] = entry
        return entry

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __getitem__(self, name: str) -> ParamEntry:
        return self._entries[name]

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def entries(self) -> Iterator[ParamEntry]:
        return iter(self._entries.values())

    def set_trainable(self, mask: Iterable[str]) -> None:
        """Mark exactly the names in `mask` trainable, everything else frozen."""
        mask = set(mask)
        unknown = mask - set(self._entries)
        if unknown:
            raise ConfigError(f"mask names not in registry: {sorted(unknown)}")
        for entry in self._entries.values():
            entry.trainable = entry.name in mask

    def trainable_names(self) -> set[str]:
        return {e.name for e in self._entries.values() if e.trainable}

    def tensors(self, train: bool = False) -> "ParamTensors":
        return ParamTensors(self, train)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: e.value.copy() for name, e in self._entries.items()}


class ParamTensors:
    """Per-forward view of a registry as autograd leaves.

    Leaves are created lazily and cached, so a parameter used twice in one
    forward pass accumulates both gradient contributions on a single node.
    """

    def __init__(self, registry: ParamRegistry, train: bool):
        self._registry = registry
        self._train = train
        self._leaves: dict[str, Tensor] = {}

    def __getitem__(self, name: str) -> Tensor:
        leaf = self._leaves.get(name)
        if leaf is None:
            entry = self._registry[name]
            leaf = Tensor(entry.value, requires_grad=self._train and entry.trainable)
            self._leaves[name] = leaf
        return leaf

    def grads(self) -> GradMap:
        return {name: t.grad for name, t in self._leaves.items() if t.grad is not None}


def adam_step(registry: ParamRegistry, grads: GradMap, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update applied to the trainable entries only.

    Frozen entries are left untouched, values and moments alike.
    """
    for entry in registry.entries():
        if not entry.trainable:
            continue
        g = grads.get(entry.name)
        if g is None:
            raise MissingGradientError(
                f"no gradient for trainable parameter '{entry.name}'")
        if g.shape != entry.value.shape:
            raise ShapeError(
                f"gradient shape {g.shape} != parameter shape {entry.value.shape} "
                f"for '{entry.name}'")
        if not np.isfinite(g).all():
            raise ValueError(f"non-finite gradient for '{entry.name}'")
        entry.step_count += 1
        entry.adam_m = beta1 * entry.adam_m + (1.0 - beta1) * g
        entry.adam_v = beta2 * entry.adam_v + (1.0 - beta2) * (g * g)
        m_hat = entry.adam_m / (1.0 - beta1 ** entry.step_count)
        v_hat = entry.adam_v / (1.0 - beta2 ** entry.step_count)
        entry.value = entry.value - lr * m_hat / (np.sqrt(v_hat) + eps)
        if not np.isfinite(entry.value).all():
            raise ValueError(f"non-finite value for '{entry.name}' after update")
