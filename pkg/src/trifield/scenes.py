"""Closed-form density/color fields used as ground truth and as test oracles."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import ContractError

SCENES = ("sphere", "boxes", "two-blob", "empty")


class AnalyticField:
    """Forward-only field with the same ``forward``/``density`` surface as a trained one."""

    side: float = 2.0
    out_channels: int = 3

    def evaluate(self, pts: np.ndarray):
        raise NotImplementedError

    def forward(self, points):
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        sigma, color = self.evaluate(pts)
        return sigma, color, None

    def density(self, points) -> np.ndarray:
        return self.forward(points)[0]

    def backward(self, *args, **kwargs):
        raise ContractError("analytic fields have no trainable parameters")


@dataclass
class AnalyticSphere(AnalyticField):
    """Constant-color ball; ``softness == 0`` gives a hard step at ``radius``."""

    radius: float = 0.5
    peak: float = 30.0
    softness: float = 0.0
    center: tuple = (0.0, 0.0, 0.0)
    color: tuple = (0.9, 0.35, 0.2)
    side: float = 2.0

    def evaluate(self, pts):
        r = np.linalg.norm(pts - np.asarray(self.center), axis=1)
        if self.softness > 0:
            occ = expit((self.radius - r) / self.softness)
        else:
            occ = (r < self.radius).astype(np.float64)
        return self.peak * occ, np.broadcast_to(np.asarray(self.color, float), (len(pts), 3))


@dataclass
class SoftBoxes(AnalyticField):
    boxes: list = field(default_factory=lambda: [
        ((-0.35, -0.3, -0.4), (0.3, 0.25, 0.1), (0.2, 0.6, 0.9)),
        ((0.1, 0.0, -0.1), (0.25, 0.35, 0.4), (0.95, 0.8, 0.2)),
    ])
    peak: float = 30.0
    softness: float = 0.02
    side: float = 2.0

    def evaluate(self, pts):
        sig = []
        for center, half, _ in self.boxes:
            d = np.abs(pts - np.asarray(center)) - np.asarray(half)
            sig.append(self.peak * np.prod(expit(-d / self.softness), axis=1))
        sig = np.stack(sig, 1)
        total = sig.sum(1)
        colors = np.array([c for _, _, c in self.boxes], dtype=float)
        mix = sig / np.maximum(total, 1e-12)[:, None]
        mix[total <= 1e-12] = 1.0 / len(self.boxes)
        return np.maximum(sig.max(1), 0.0), mix @ colors


@dataclass
class TwoBlobs(AnalyticField):
    centers: tuple = ((-0.3, 0.0, 0.0), (0.35, 0.1, 0.05))
    scales: tuple = (0.22, 0.18)
    peak: float = 60.0
    colors: tuple = ((0.1, 0.7, 0.3), (0.8, 0.2, 0.6))
    side: float = 2.0

    def evaluate(self, pts):
        sig = np.stack([self.peak * np.exp(-np.sum((pts - np.asarray(c)) ** 2, 1) / (2 * s * s))
                        for c, s in zip(self.centers, self.scales)], 1)
        total = sig.sum(1)
        mix = sig / np.maximum(total, 1e-300)[:, None]
        mix[total <= 1e-300] = 0.5
        return total, mix @ np.asarray(self.colors, dtype=float)


def make_scene(name: str) -> AnalyticField:
    if name == "sphere":
        return AnalyticSphere(radius=0.5, peak=40.0, softness=0.015)
    if name == "boxes":
        return SoftBoxes()
    if name == "two-blob":
        return TwoBlobs()
    if name == "empty":
        return EmptyField()
    raise ContractError(f"unknown scene {name!r}; choose from {SCENES}")


@dataclass
class EmptyField(AnalyticField):
    """Zero density everywhere."""

    side: float = 2.0

    def evaluate(self, pts):
        return np.zeros(len(pts)), np.zeros((len(pts), 3))
