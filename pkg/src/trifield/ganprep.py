"""Tensor plumbing around a 3D-aware GAN: discriminator inputs, pose labels and training schedules.

Everything here is a pure function of its arguments (random draws come from
an explicit Generator).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ContractError

RAMP_IMAGES = 1_000_000
SWAP_DECAY_IMAGES = 1_000_000
LOW_RES, HIGH_RES = 64, 128
FOCAL_PER_WIDTH = 4.26
LUMA = np.array([0.299, 0.587, 0.114])


def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic ``(n_out, n_in)`` linear-interpolation matrix, half-pixel centres, edge clamped."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    f = src - i0
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.arange(n_out), i0), 1.0 - f)
    np.add.at(m, (np.arange(n_out), i1), f)
    return m


def resize_bilinear(img, size) -> np.ndarray:
    """Resize ``(H, W, C)`` (or ``(H, W)``) to ``size = (h, w)``.

    Same sampling grid as ``align_corners=False`` in common image libraries;
    no anti-aliasing prefilter when shrinking.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = size
    ry = _resize_matrix(img.shape[0], h)
    rx = _resize_matrix(img.shape[1], w)
    out = np.tensordot(ry, img, axes=(1, 0))
    return np.moveaxis(np.tensordot(rx, out, axes=(1, 1)), 0, 1)


@dataclass
class DiscriminatorInput:
    """``(H, W, 6)``: channels 0-2 the final image, 3-5 the resized raw rendering."""

    tensor: np.ndarray

    @property
    def final(self) -> np.ndarray:
        return self.tensor[..., :3]

    @property
    def raw(self) -> np.ndarray:
        return self.tensor[..., 3:]


def assemble_fake_input(final, raw) -> DiscriminatorInput:
    final = np.asarray(final, dtype=np.float64)
    raw = np.asarray(raw, dtype=np.float64)
    if final.shape[-1] != 3 or raw.shape[-1] != 3:
        raise ContractError("both images need three channels")
    big_h, big_w = final.shape[:2]
    if raw.shape[0] > big_h or raw.shape[1] > big_w:
        raise ContractError("raw rendering cannot be larger than the final image")
    up = resize_bilinear(raw, (big_h, big_w))
    return DiscriminatorInput(np.concatenate([final, up], axis=-1))


def assemble_real_input(real, low_res) -> DiscriminatorInput:
    """Pair a real image with a blurred copy made by shrinking to ``low_res`` and growing back."""
    real = np.asarray(real, dtype=np.float64)
    h, w = low_res
    if h > real.shape[0] or w > real.shape[1]:
        raise ContractError("low resolution cannot exceed the image size")
    blurred = resize_bilinear(resize_bilinear(real, (h, w)), real.shape[:2])
    return DiscriminatorInput(np.concatenate([real, blurred], axis=-1))


def swap_probability(images_seen) -> float:
    """Starts at 1 and falls linearly to 0.5 over the first million images, then stays there."""
    return 1.0 - 0.5 * min(max(float(images_seen), 0.0) / SWAP_DECAY_IMAGES, 1.0)


def maybe_swap_pose(true_pose, pool, images_seen, rng):
    pool = np.asarray(pool)
    if pool.size == 0 or len(pool) == 0:
        warnings.warn("empty pose pool; conditioning on the true pose", RuntimeWarning, stacklevel=2)
        return np.asarray(true_pose)
    if rng.random() < swap_probability(images_seen):
        return pool[rng.integers(len(pool))]
    return np.asarray(true_pose)


def neural_res_schedule(images_seen) -> int:
    """Neural rendering resolution: 64 at the start, one pixel more per 1/64 of the ramp, 128 after it."""
    frac = min(max(float(images_seen), 0.0) / RAMP_IMAGES, 1.0)
    return int(min(max(LOW_RES + int(np.floor(frac * (HIGH_RES - LOW_RES))), LOW_RES), HIGH_RES))


def blur_resolution(images_seen) -> tuple[int, int]:
    """Down/up-sampling size for real images, tied to the current neural rendering resolution."""
    r = neural_res_schedule(images_seen)
    return r, r


def pose_sigma(poses) -> np.ndarray:
    """Elementwise standard deviation of a ``(n, 4, 4)`` pose set."""
    poses = np.asarray(poses, dtype=np.float64)
    if poses.ndim != 3 or poses.shape[1:] != (4, 4):
        raise ContractError("pose set must be (n, 4, 4)")
    return poses.std(axis=0)


def corrupt_pose(pose, sigma, k: float, rng) -> np.ndarray:
    pose = np.asarray(pose, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if pose.shape != (4, 4) or sigma.shape != (4, 4):
        raise ContractError("pose and sigma must both be 4x4")
    return pose + k * sigma * rng.standard_normal((4, 4))


def luminance(rgb):
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.shape[-1] != 3:
        raise ContractError("luminance needs a trailing RGB axis")
    return rgb @ LUMA


def default_intrinsics(image_width):
    """Pixel-unit intrinsics with focal length ``4.26 * width`` and a centred principal point."""
    f = FOCAL_PER_WIDTH * image_width
    c = image_width / 2.0
    return {"fx": f, "fy": f, "cx": c, "cy": c}


def pose_label(cam2world, intrinsics, image_width) -> np.ndarray:
    """25-vector: row-major 4x4 extrinsics, then the 3x3 intrinsics divided by the image width."""
    ext = np.asarray(cam2world, dtype=np.float64).reshape(4, 4)
    if isinstance(intrinsics, dict):
        k = np.array([[intrinsics["fx"], 0, intrinsics["cx"]], [0, intrinsics["fy"], intrinsics["cy"]], [0, 0, 1]],
                     dtype=np.float64)
    else:
        k = np.array(intrinsics, dtype=np.float64)
    if k.shape != (3, 3):
        raise ContractError("intrinsics must be a 3x3 matrix or a dict with fx, fy, cx, cy")
    k[:2] /= image_width
    label = np.concatenate([ext.ravel(), k.ravel()])
    if not np.all(np.isfinite(label)):
        raise ContractError("pose label contains non-finite values")
    return label


def selftest() -> list[tuple[str, bool]]:
    """Quick end-to-end check of the schedule and assembly values; returns (name, ok) pairs."""
    fake = assemble_fake_input(np.zeros((512, 512, 3)), np.full((128, 128, 3), 0.25))
    real = assemble_real_input(np.full((512, 512, 3), 0.5), (128, 128))
    ramp = [neural_res_schedule(i) for i in range(0, RAMP_IMAGES + 1, 5000)]
    return [
        ("swap_probability(0) == 1", swap_probability(0) == 1.0),
        ("swap_probability(1e6) == 0.5", swap_probability(1_000_000) == 0.5),
        ("neural_res_schedule(0) == 64", neural_res_schedule(0) == 64),
        ("neural_res_schedule(1e6) == 128", neural_res_schedule(1_000_000) == 128),
        ("ramp nondecreasing", all(a <= b for a, b in zip(ramp, ramp[1:]))),
        ("ramp covers 64..128", set(ramp) == set(range(64, 129))),
        ("fake input 512x512x6", fake.tensor.shape == (512, 512, 6)),
        ("real input 512x512x6", real.tensor.shape == (512, 512, 6)),
        ("luminance(1,0,0) == 0.299", luminance([1.0, 0.0, 0.0]) == 0.299),
        ("focal(512) == 2181.12", abs(default_intrinsics(512)["fx"] - 2181.12) < 1e-9),
    ]
