"""Pinhole rays, two-pass depth sampling and emission-absorption compositing.

All ray-level routines are batched over a leading ray axis ``R``. Random
numbers are drawn from a counter-based hash keyed by (seed, stream, ray id,
sample index), so a ray's samples do not depend on how a batch is split
between workers.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ContractError, InputDomainError

DEPTH_EPS = 1e-10
PDF_FLOOR = 1e-5
DEDUP_TOL = 1e-9


@dataclass
class Camera:
    """Pinhole camera. ``cam2world`` maps camera space (x right, y down, z forward) to world space."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float
    far: float
    cam2world: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        self.cam2world = np.asarray(self.cam2world, dtype=np.float64).reshape(4, 4)

    def validate(self) -> "Camera":
        if not (self.fx > 0 and self.fy > 0):
            raise ContractError("focal lengths must be positive")
        if not (0 < self.near < self.far):
            raise ContractError(f"need 0 < near < far, got near={self.near}, far={self.far}")
        if self.width < 1 or self.height < 1:
            raise ContractError("image size must be positive")
        rot = self.rotation
        if not np.all(np.isfinite(self.cam2world)) or np.abs(rot.T @ rot - np.eye(3)).max() > 1e-5:
            raise ContractError("camera-to-world rotation block is not orthonormal")
        return self

    @property
    def rotation(self) -> np.ndarray:
        return self.cam2world[:3, :3]

    @property
    def position(self) -> np.ndarray:
        return self.cam2world[:3, 3]

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @classmethod
    def look_at(cls, eye, target, fx, fy, cx, cy, width, height, near, far, up=(0.0, 0.0, 1.0)):
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        up = np.asarray(up, dtype=np.float64)
        if np.linalg.norm(np.cross(fwd, up)) < 1e-8:
            up = np.array([0.0, 1.0, 0.0]) if abs(fwd[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        c2w = np.eye(4)
        c2w[:3, 0], c2w[:3, 1], c2w[:3, 2], c2w[:3, 3] = right, down, fwd, eye
        return cls(fx, fy, cx, cy, width, height, near, far, c2w)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy, "w": self.width,
                "h": self.height, "near": self.near, "far": self.far,
                "cam2world": [float(v) for v in self.cam2world.ravel()]}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        try:
            return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), int(d["w"]),
                       int(d["h"]), float(d["near"]), float(d["far"]), np.asarray(d["cam2world"], float))
        except (KeyError, ValueError, TypeError) as exc:
            raise ContractError(f"malformed camera record: {exc}") from exc


@dataclass
class Rays:
    origins: np.ndarray
    directions: np.ndarray
    near: np.ndarray
    far: np.ndarray

    def __len__(self):
        return len(self.origins)

    def subset(self, sel) -> "Rays":
        return Rays(self.origins[sel], self.directions[sel], self.near[sel], self.far[sel])


def pixel_grid(cam: Camera) -> np.ndarray:
    """All ``(u, v)`` pixel coordinates in row-major order (pixel id ``v * W + u``)."""
    v, u = np.mgrid[0:cam.height, 0:cam.width]
    return np.stack([u.ravel(), v.ravel()], axis=1)


def generate_rays(cam: Camera, pixels=None) -> Rays:
    cam.validate()
    px = pixel_grid(cam) if pixels is None else np.asarray(pixels).reshape(-1, 2)
    if np.any(px < 0) or np.any(px[:, 0] >= cam.width) or np.any(px[:, 1] >= cam.height):
        raise InputDomainError("pixel coordinates outside the image")
    d_cam = np.stack([(px[:, 0] + 0.5 - cam.cx) / cam.fx,
                      (px[:, 1] + 0.5 - cam.cy) / cam.fy,
                      np.ones(len(px))], axis=1)
    d = d_cam @ cam.rotation.T
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    o = np.broadcast_to(cam.position, d.shape).copy()
    n = len(px)
    return Rays(o, d, np.full(n, float(cam.near)), np.full(n, float(cam.far)))


_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _splitmix64(x):
    with np.errstate(over="ignore"):
        z = x + _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))


def counter_uniform(seed: int, stream: int, ids, n: int) -> np.ndarray:
    """Uniform [0, 1) draws of shape ``(len(ids), n)``, a pure function of every argument."""
    ids = np.asarray(ids, dtype=np.uint64).reshape(-1, 1)
    key = _splitmix64(_splitmix64(np.array([seed], dtype=np.uint64)) ^ np.uint64(stream))
    h = _splitmix64(key ^ ids)
    h = _splitmix64(h ^ np.arange(n, dtype=np.uint64)[None, :])
    return (h >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


def _uniforms(jitter, shape):
    if jitter is None or jitter is False:
        return None
    if isinstance(jitter, np.random.Generator):
        return jitter.random(shape)
    u = np.asarray(jitter, dtype=np.float64)
    if u.shape != shape:
        raise ContractError(f"jitter array must have shape {shape}, got {u.shape}")
    return u


def sample_coarse(near, far, n_samples: int, jitter=None) -> np.ndarray:
    """Stratified depths: one draw per equal-width bin, or bin midpoints when ``jitter`` is None.

    ``jitter`` may be a Generator or an array of uniforms with shape ``(R, n_samples)``.
    """
    near = np.atleast_1d(np.asarray(near, dtype=np.float64))
    far = np.atleast_1d(np.asarray(far, dtype=np.float64))
    step = (far - near) / n_samples
    u = _uniforms(jitter, (len(near), n_samples))
    offs = 0.5 if u is None else u
    return near[:, None] + (np.arange(n_samples)[None, :] + offs) * step[:, None]


def coarse_bin_edges(near, far, n_samples: int) -> np.ndarray:
    near = np.atleast_1d(np.asarray(near, dtype=np.float64))
    far = np.atleast_1d(np.asarray(far, dtype=np.float64))
    return near[:, None] + np.arange(n_samples + 1)[None, :] * ((far - near) / n_samples)[:, None]


def sample_importance(edges, weights, n_samples: int, jitter=None) -> np.ndarray:
    """Inverse-CDF draws from the piecewise-constant PDF ``weights + floor`` over bins ``edges``.

    ``edges`` is ``(R, B+1)`` and ``weights`` ``(R, B)``. Without jitter the
    quantiles ``(k + 0.5) / n`` are used. Output is sorted, ``(R, n_samples)``.
    """
    edges = np.atleast_2d(np.asarray(edges, dtype=np.float64))
    w = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    n_rays = len(edges)
    if n_samples == 0:
        return np.zeros((n_rays, 0))
    if np.any(w < 0):
        raise ContractError("importance weights must be nonnegative")
    w = w + PDF_FLOOR
    cdf = np.cumsum(w, axis=1)
    cdf = np.concatenate([np.zeros((n_rays, 1)), cdf / cdf[:, -1:]], axis=1)
    u = _uniforms(jitter, (n_rays, n_samples))
    if u is None:
        u = np.broadcast_to((np.arange(n_samples) + 0.5) / n_samples, (n_rays, n_samples))
    else:
        u = np.sort(u, axis=1)
    n_bins = w.shape[1]
    # bin index b with cdf[b] <= u < cdf[b+1], per row
    offsets = (np.arange(n_rays) * 2.0)[:, None]
    b = np.searchsorted((cdf + offsets).ravel(), (u + offsets).ravel(), side="right").reshape(u.shape)
    b = b - (np.arange(n_rays) * (n_bins + 1))[:, None] - 1
    b = np.clip(b, 0, n_bins - 1)
    c0 = np.take_along_axis(cdf, b, 1)
    c1 = np.take_along_axis(cdf, b + 1, 1)
    e0 = np.take_along_axis(edges, b, 1)
    e1 = np.take_along_axis(edges, b + 1, 1)
    frac = np.clip((u - c0) / np.maximum(c1 - c0, 1e-300), 0.0, 1.0)
    return e0 + frac * (e1 - e0)


def merge_depths(a, b):
    """Sorted union of two depth sets plus a mask that drops near-duplicates.

    Of a run of depths closer than ``DEDUP_TOL`` only the last one stays
    valid, so every valid sample keeps a strictly positive interval.
    """
    t = np.sort(np.concatenate([np.atleast_2d(a), np.atleast_2d(b)], axis=1), axis=1)
    valid = np.ones(t.shape, dtype=bool)
    valid[:, :-1] = np.diff(t, axis=1) > DEDUP_TOL
    return t, valid


@dataclass
class Composite:
    """Per-ray compositing result; keeps what the backward pass needs."""

    feature: np.ndarray
    depth: np.ndarray
    opacity: np.ndarray
    weights: np.ndarray
    transmittance: np.ndarray
    t_end: np.ndarray
    t: np.ndarray
    delta: np.ndarray
    features_in: Optional[np.ndarray]
    background: np.ndarray
    depth_num: np.ndarray


def composite(t, sigma, features, far, background=None, valid=None) -> Composite:
    """Alpha-composite samples along each ray.

    ``t``/``sigma`` are ``(R, S)`` (or ``(S,)`` for one ray), ``features`` is
    ``(R, S, K)`` or None. The last interval runs to ``far``.
    """
    t = np.atleast_2d(np.asarray(t))
    sigma = np.atleast_2d(np.asarray(sigma))
    n_rays, n_samp = t.shape
    far = np.broadcast_to(np.asarray(far, dtype=t.dtype), (n_rays,))
    if features is not None:
        features = np.asarray(features)
        if features.ndim == 2:
            features = features[None]
    k = 0 if features is None else features.shape[-1]
    bg = np.zeros(k) if background is None else np.broadcast_to(np.asarray(background, dtype=np.float64), (k,))
    if n_samp and np.any(np.diff(t, axis=1) < 0):
        raise ContractError("sample depths must be sorted")
    delta = np.empty_like(t, dtype=np.result_type(t, sigma))
    delta[:, :-1] = np.diff(t, axis=1)
    if n_samp:
        delta[:, -1] = np.maximum(far - t[:, -1], 0.0)
    if valid is not None:
        delta = delta * valid
    tau = sigma * delta
    cum = np.cumsum(tau, axis=1)
    trans = np.exp(-(cum - tau))
    w = trans * -np.expm1(-tau)
    t_end = np.exp(-cum[:, -1]) if n_samp else np.ones(n_rays)
    opacity = w.sum(axis=1)
    num = (w * t).sum(axis=1)
    depth = num / np.maximum(opacity, DEPTH_EPS)
    if features is None:
        feat = np.zeros((n_rays, 0))
    else:
        feat = np.einsum("rs,rsk->rk", w, features) + t_end[:, None] * bg
    return Composite(feat, depth, opacity, w, trans, t_end, t, delta, features, bg, num)


def composite_backward(comp: Composite, g_feature=None, g_depth=None, g_opacity=None):
    """Exact reverse of :func:`composite`; returns ``(dsigma (R, S), dfeatures (R, S, K))``."""
    n_rays, n_samp = comp.t.shape
    k = comp.feature.shape[1]
    g_f = np.zeros((n_rays, k)) if g_feature is None else np.asarray(g_feature).reshape(n_rays, k)
    g_d = np.zeros(n_rays) if g_depth is None else np.broadcast_to(np.asarray(g_depth), (n_rays,))
    g_o = np.zeros(n_rays) if g_opacity is None else np.broadcast_to(np.asarray(g_opacity), (n_rays,))

    safe = comp.opacity > DEPTH_EPS
    denom = np.maximum(comp.opacity, DEPTH_EPS)
    d_num = g_d / denom
    d_op = g_o - np.where(safe, g_d * comp.depth_num / denom ** 2, 0.0)

    # per-sample scalar "value" seen by the loss: g_f . c_i + d_num t_i + d_op
    s = d_num[:, None] * comp.t + d_op[:, None]
    if k:
        s = s + np.einsum("rk,rsk->rs", g_f, comp.features_in)
    s_bg = g_f @ comp.background
    ws = comp.weights * s
    # suffix_j = sum_{i > j} w_i s_i + T_end s_bg
    suffix = np.cumsum(ws[:, ::-1], axis=1)[:, ::-1] - ws + (comp.t_end * s_bg)[:, None]
    t_next = np.concatenate([comp.transmittance[:, 1:], comp.t_end[:, None]], axis=1)
    d_tau = t_next * s - suffix
    d_sigma = d_tau * comp.delta
    d_feat = comp.weights[:, :, None] * g_f[:, None, :] if k else np.zeros((n_rays, n_samp, 0))
    return d_sigma, d_feat


@dataclass
class RenderConfig:
    n_coarse: int = 48
    n_fine: int = 48
    background: Optional[object] = None
    jitter: bool = False
    seed: int = 0
    chunk: int = 4096

    def background_for(self, k: int) -> np.ndarray:
        if self.background is None:
            return np.zeros(k)
        return np.broadcast_to(np.asarray(self.background, dtype=np.float64), (k,)).copy()


@dataclass
class RayRender:
    feature: np.ndarray
    depth: np.ndarray
    opacity: np.ndarray
    comp: Optional[Composite] = None
    field_cache: object = None
    depths: Optional[tuple] = None


def render_rays(fld, rays: Rays, config: RenderConfig, ids=None, stream: int = 0, need_grad=False,
                depths=None) -> RayRender:
    """Coarse pass, importance pass, then a final composite over the merged samples.

    Passing ``depths`` (a ``(t, valid)`` pair, e.g. ``out.depths`` of an
    earlier render) skips sampling and composites at exactly those depths;
    gradients are always taken with sample positions held fixed.
    """
    n = len(rays)
    ids = np.arange(n) if ids is None else np.asarray(ids)
    dtype = fld.decoder.dtype if hasattr(fld, "decoder") else np.float64
    if depths is None:
        depths = sample_depths(fld, rays, config, ids, stream, dtype)
    t, valid = depths
    sigma, feat, cache = fld.forward(_points(rays, t).astype(dtype, copy=False))
    k = feat.shape[1]
    comp = composite(t, sigma.reshape(t.shape), feat.reshape(t.shape + (k,)), rays.far,
                     config.background_for(k), valid)
    if need_grad:
        return RayRender(comp.feature, comp.depth, comp.opacity, comp, cache, depths)
    return RayRender(comp.feature, comp.depth, comp.opacity, depths=depths)


def sample_depths(fld, rays: Rays, config: RenderConfig, ids, stream=0, dtype=np.float64):
    """Stratified coarse depths merged with importance samples drawn from the coarse weights."""
    jitter_c = counter_uniform(config.seed, 2 * stream, ids, config.n_coarse) if config.jitter else None
    t_c = sample_coarse(rays.near, rays.far, config.n_coarse, jitter_c)
    if config.n_fine > 0:
        sig_c = fld.forward(_points(rays, t_c).astype(dtype, copy=False))[0].reshape(t_c.shape)
        w_c = composite(t_c, sig_c, None, rays.far).weights
        edges = coarse_bin_edges(rays.near, rays.far, config.n_coarse)
        jitter_f = counter_uniform(config.seed, 2 * stream + 1, ids, config.n_fine) if config.jitter else None
        t_f = sample_importance(edges, w_c, config.n_fine, jitter_f)
        return merge_depths(t_c, t_f)
    return t_c, None


def render_rays_backward(fld, out: RayRender, g_feature, tape, g_depth=None, g_opacity=None) -> None:
    if out.comp is None:
        raise ContractError("render backward needs a render made with need_grad=True")
    d_sigma, d_feat = composite_backward(out.comp, g_feature, g_depth, g_opacity)
    dtype = fld.decoder.dtype
    fld.backward(out.field_cache, d_sigma.reshape(-1).astype(dtype, copy=False),
                 d_feat.reshape(-1, d_feat.shape[-1]).astype(dtype, copy=False), tape)


def _points(rays: Rays, t: np.ndarray) -> np.ndarray:
    return (rays.origins[:, None, :] + t[..., None] * rays.directions[:, None, :]).reshape(-1, 3)


@dataclass
class RenderOutput:
    """Feature image ``(H, W, K)`` plus expected depth and opacity maps."""

    features: np.ndarray
    depth: np.ndarray
    opacity: np.ndarray

    @property
    def rgb(self) -> np.ndarray:
        """First three feature channels (a view, not a copy)."""
        return self.features[..., :3]


def render_image(fld, cam: Camera, config: Optional[RenderConfig] = None) -> RenderOutput:
    config = config or RenderConfig()
    cam.validate()
    rays = generate_rays(cam)
    n = len(rays)
    parts = []
    for start in range(0, n, config.chunk):
        sel = slice(start, min(start + config.chunk, n))
        parts.append(render_rays(fld, rays.subset(sel), config, ids=np.arange(sel.start, sel.stop)))
    feat = np.concatenate([p.feature for p in parts])
    h, w = cam.height, cam.width
    return RenderOutput(feat.reshape(h, w, -1),
                        np.concatenate([p.depth for p in parts]).reshape(h, w),
                        np.concatenate([p.opacity for p in parts]).reshape(h, w))
