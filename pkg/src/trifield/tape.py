from __future__ import annotations

from typing import Iterable, Mapping

import numpy as np

from .errors import ContractError


class GradientTape:
    """Gradient accumulators mirroring a dict of parameter arrays.

    Every backward pass in the package adds into a tape with ``accumulate``;
    shapes are checked on every write so a tape built for one model cannot be
    silently reused for another.
    """

    def __init__(self, grads: dict[str, np.ndarray]):
        self.grads = grads

    @classmethod
    def like(cls, params: Mapping[str, np.ndarray]) -> "GradientTape":
        return cls({k: np.zeros_like(v) for k, v in params.items()})

    def __getitem__(self, name: str) -> np.ndarray:
        return self.grads[name]

    def __contains__(self, name: str) -> bool:
        return name in self.grads

    def keys(self):
        return self.grads.keys()

    def items(self):
        return self.grads.items()

    def accumulate(self, name: str, delta: np.ndarray) -> None:
        if name not in self.grads:
            raise ContractError(f"tape has no slot named {name!r}")
        slot = self.grads[name]
        if slot.shape != np.shape(delta):
            raise ContractError(
                f"tape slot {name!r} has shape {slot.shape}, got delta of shape {np.shape(delta)}"
            )
        slot += delta

    def zero(self) -> None:
        for g in self.grads.values():
            g.fill(0)

    def merge(self, others: Iterable["GradientTape"]) -> "GradientTape":
        """Add other tapes into this one, in iteration order."""
        for other in others:
            for k, g in other.grads.items():
                self.accumulate(k, g)
        return self

    def scale(self, factor: float) -> None:
        for g in self.grads.values():
            g *= factor

    def check_mirrors(self, params: Mapping[str, np.ndarray]) -> None:
        if set(params) != set(self.grads):
            raise ContractError("tape keys do not match parameter keys")
        for k, p in params.items():
            if p.shape != self.grads[k].shape:
                raise ContractError(f"tape slot {k!r} shape {self.grads[k].shape} != param {p.shape}")
