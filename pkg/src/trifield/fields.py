"""Explicit feature storage: tri-planes, dense voxel grids, and a featureless stand-in.

Coordinates are world-space points inside an axis-aligned cube of side ``side``
centred at the origin. Points are normalised to [-1, 1]^3 and grid node ``i``
of an ``n``-node axis sits at ``-1 + 2 i / (n - 1)`` (align-corners). Points
outside the cube are clamped onto its surface before interpolation.

Interpolation is expressed as a sparse matrix ``M`` of shape
``(n_points, n_nodes)`` whose rows hold the bilinear/trilinear weights, so
the forward pass is ``M @ features`` and the backward pass is
``M.T @ upstream``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .errors import ContractError, InputDomainError
from .tape import GradientTape

PLANE_NAMES = ("xy", "xz", "yz")
# (axis indexing plane rows, axis indexing plane columns)
PLANE_AXES = ((0, 1), (0, 2), (1, 2))

FEATURES = "features"


def _as_points(x) -> np.ndarray:
    pts = np.asarray(x)
    if pts.shape[-1:] != (3,):
        raise InputDomainError(f"points must have a trailing dimension of 3, got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise InputDomainError("query points must be finite")
    return pts.reshape(-1, 3)


def _axis_weights(u: np.ndarray, n: int):
    """Lower node index and fractional offset along one axis for normalised coords ``u``."""
    if n == 1:
        i0 = np.zeros(u.shape, dtype=np.intp)
        return i0, i0, np.zeros_like(u)
    g = (np.clip(u, -1.0, 1.0) + 1.0) * (0.5 * (n - 1))
    i0 = np.minimum(np.floor(g).astype(np.intp), n - 2)
    return i0, i0 + 1, g - i0


@dataclass
class FeatureSample:
    """Aggregated feature ``feature`` plus the three per-plane contributions."""

    feature: np.ndarray
    parts: Optional[np.ndarray] = None


@dataclass
class TriPlane:
    """Three axis-aligned ``N x N x C`` feature planes stored as one ``(3, N, N, C)`` array."""

    planes: np.ndarray
    side: float = 2.0
    kind: str = field(default="triplane", init=False)

    def __post_init__(self):
        p = np.asarray(self.planes)
        if p.ndim != 4 or p.shape[0] != 3 or p.shape[1] != p.shape[2]:
            raise ContractError(f"tri-plane array must be (3, N, N, C), got {p.shape}")
        if p.shape[1] < 1 or p.shape[3] < 1:
            raise ContractError("tri-plane resolution and channels must be positive")
        if not np.all(np.isfinite(p)):
            raise ContractError("tri-plane features must be finite")
        if not self.side > 0:
            raise ContractError("cube side must be positive")
        self.planes = p

    @classmethod
    def zeros(cls, resolution: int, channels: int, side: float = 2.0, dtype=np.float32) -> "TriPlane":
        return cls(np.zeros((3, resolution, resolution, channels), dtype=dtype), side)

    @classmethod
    def random(cls, resolution, channels, side=2.0, scale=0.1, rng=None, dtype=np.float32):
        rng = np.random.default_rng(rng)
        planes = rng.normal(0.0, scale, (3, resolution, resolution, channels)).astype(dtype)
        return cls(planes, side)

    @property
    def resolution(self) -> int:
        return self.planes.shape[1]

    @property
    def channels(self) -> int:
        return self.planes.shape[3]

    def params(self) -> dict[str, np.ndarray]:
        return {FEATURES: self.planes}

    def normalise(self, points: np.ndarray) -> np.ndarray:
        return points / (0.5 * self.side)

    def interpolation_matrix(self, points) -> sp.csr_matrix:
        pts = _as_points(points)
        u = self.normalise(pts)
        n = self.resolution
        idx, wts = [], []
        for p, (a, b) in enumerate(PLANE_AXES):
            ia0, ia1, fa = _axis_weights(u[:, a], n)
            ib0, ib1, fb = _axis_weights(u[:, b], n)
            base = p * n * n
            idx += [base + ia0 * n + ib0, base + ia0 * n + ib1, base + ia1 * n + ib0, base + ia1 * n + ib1]
            wts += [(1 - fa) * (1 - fb), (1 - fa) * fb, fa * (1 - fb), fa * fb]
        return _weights_to_csr(np.stack(idx, 1), np.stack(wts, 1), 3 * n * n, self.planes.dtype)

    def query(self, points):
        """Batched query; returns ``(features (P, C), cache)``."""
        m = self.interpolation_matrix(points)
        return m @ self.planes.reshape(-1, self.channels), m

    def backward(self, cache: sp.csr_matrix, grad_features: np.ndarray, tape: GradientTape) -> None:
        delta = (cache.T @ np.asarray(grad_features, dtype=self.planes.dtype)).reshape(self.planes.shape)
        tape.accumulate(FEATURES, delta)

    def per_plane(self, points) -> np.ndarray:
        """Contribution of each plane separately, shape ``(3, P, C)``."""
        m = self.interpolation_matrix(points)
        n2 = self.resolution ** 2
        flat = self.planes.reshape(3, n2, self.channels)
        return np.stack([m[:, p * n2:(p + 1) * n2] @ flat[p] for p in range(3)])


@dataclass
class VoxelGrid:
    """Dense ``M x M x M x C_v`` feature volume indexed ``[x, y, z, channel]``."""

    grid: np.ndarray
    side: float = 2.0
    kind: str = field(default="voxel", init=False)

    def __post_init__(self):
        g = np.asarray(self.grid)
        if g.ndim != 4 or not (g.shape[0] == g.shape[1] == g.shape[2]):
            raise ContractError(f"voxel array must be (M, M, M, C), got {g.shape}")
        if g.shape[0] < 1 or g.shape[3] < 1:
            raise ContractError("voxel resolution and channels must be positive")
        if not np.all(np.isfinite(g)):
            raise ContractError("voxel features must be finite")
        if not self.side > 0:
            raise ContractError("cube side must be positive")
        self.grid = g

    @classmethod
    def zeros(cls, resolution, channels, side=2.0, dtype=np.float32) -> "VoxelGrid":
        return cls(np.zeros((resolution,) * 3 + (channels,), dtype=dtype), side)

    @classmethod
    def random(cls, resolution, channels, side=2.0, scale=0.1, rng=None, dtype=np.float32):
        rng = np.random.default_rng(rng)
        return cls(rng.normal(0.0, scale, (resolution,) * 3 + (channels,)).astype(dtype), side)

    @property
    def resolution(self) -> int:
        return self.grid.shape[0]

    @property
    def channels(self) -> int:
        return self.grid.shape[3]

    def params(self) -> dict[str, np.ndarray]:
        return {FEATURES: self.grid}

    def interpolation_matrix(self, points) -> sp.csr_matrix:
        pts = _as_points(points)
        u = pts / (0.5 * self.side)
        m = self.resolution
        lo_hi = [_axis_weights(u[:, a], m) for a in range(3)]
        idx, wts = [], []
        for cx in (0, 1):
            for cy in (0, 1):
                for cz in (0, 1):
                    i = [lo_hi[a][c] for a, c in enumerate((cx, cy, cz))]
                    w = np.ones(len(pts), dtype=u.dtype)
                    for a, c in enumerate((cx, cy, cz)):
                        f = lo_hi[a][2]
                        w = w * (f if c else 1 - f)
                    idx.append((i[0] * m + i[1]) * m + i[2])
                    wts.append(w)
        return _weights_to_csr(np.stack(idx, 1), np.stack(wts, 1), m ** 3, self.grid.dtype)

    def query(self, points):
        m = self.interpolation_matrix(points)
        return m @ self.grid.reshape(-1, self.channels), m

    def backward(self, cache, grad_features, tape: GradientTape) -> None:
        delta = (cache.T @ np.asarray(grad_features, dtype=self.grid.dtype)).reshape(self.grid.shape)
        tape.accumulate(FEATURES, delta)


@dataclass
class NoFeatures:
    """Featureless representation; pairs with a position-encoded decoder to form a fully implicit field."""

    side: float = 2.0
    kind: str = field(default="implicit", init=False)
    dtype: type = np.float32

    resolution = 0
    channels = 0

    def params(self) -> dict[str, np.ndarray]:
        return {}

    def query(self, points):
        pts = _as_points(points)
        return np.zeros((len(pts), 0), dtype=self.dtype), None

    def backward(self, cache, grad_features, tape) -> None:
        return None


def _weights_to_csr(idx: np.ndarray, wts: np.ndarray, n_nodes: int, dtype) -> sp.csr_matrix:
    n_pts, k = idx.shape
    indptr = np.arange(0, n_pts * k + 1, k)
    return sp.csr_matrix((wts.astype(dtype, copy=False).ravel(), idx.ravel(), indptr), shape=(n_pts, n_nodes))


def triplane_query(tp: TriPlane, x) -> FeatureSample:
    """Query one point (shape (3,)) or a batch (shape (P, 3)) and keep the per-plane parts."""
    pts = np.asarray(x)
    single = pts.ndim == 1
    parts = tp.per_plane(pts)
    feat = parts.sum(axis=0)
    if single:
        return FeatureSample(feat[0], parts[:, 0])
    return FeatureSample(feat, parts)


def triplane_query_backward(tp: TriPlane, x, upstream, tape: GradientTape) -> None:
    m = tp.interpolation_matrix(x)
    tp.backward(m, np.asarray(upstream).reshape(m.shape[0], tp.channels), tape)


def voxel_query(vg: VoxelGrid, x) -> np.ndarray:
    pts = np.asarray(x)
    feat, _ = vg.query(pts)
    return feat[0] if pts.ndim == 1 else feat


def voxel_query_backward(vg: VoxelGrid, x, upstream, tape: GradientTape) -> None:
    m = vg.interpolation_matrix(x)
    vg.backward(m, np.asarray(upstream).reshape(m.shape[0], vg.channels), tape)


def param_count(rep) -> int:
    if isinstance(rep, TriPlane):
        return 3 * rep.resolution ** 2 * rep.channels
    if isinstance(rep, VoxelGrid):
        return rep.resolution ** 3 * rep.channels
    if isinstance(rep, NoFeatures):
        return 0
    raise ContractError(f"unknown representation {type(rep).__name__}")


def triplane_params(n: int, c: int) -> int:
    return 3 * n * n * c


def voxel_params(m: int, c: int) -> int:
    return m ** 3 * c


def matching_triplane_resolution(m: int, c_voxel: int, c_plane: int) -> float:
    """Tri-plane side length giving the same parameter budget as an ``m``-voxel grid."""
    return m ** 1.5 * (c_voxel / (3.0 * c_plane)) ** 0.5
