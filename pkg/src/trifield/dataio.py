"""Datasets of posed images, PNG I/O, and the binary checkpoint format.

Checkpoint layout (all little-endian)::

    char[4]  magic "TPF1"
    u32      version (1)
    u8       kind: 0 tri-plane, 1 voxel, 2 implicit (no feature array)
    u8       dtype: 0 float32, 1 float64
    u32      resolution N (tri-plane) or M (voxel), 0 for implicit
    u32      channels C
    f64      cube side
    ...      feature array, row-major: (3, N, N, C) or (M, M, M, C)
    u32      decoder layer count L
    i32      Fourier bands (-1 when there is no position input)
    u8       flags: bit 0 logistic RGB outputs, bit 1 ReLU hidden layers (softplus otherwise)
    u32      decoder feature-input width
    L times: u32 fan_in, u32 fan_out, weights (fan_in x fan_out row-major), bias (fan_out)
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .decoder import FieldDecoder
from .errors import ContractError, FormatError
from .fields import NoFeatures, TriPlane, VoxelGrid
from .model import NeuralField
from .renderer import Camera, RenderConfig, render_image
from .scenes import make_scene

MANIFEST_VERSION = "tpf-dataset/1"
MAGIC = b"TPF1"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sIBBIId")
_DEC_HEADER = struct.Struct("<IiBI")
_LAYER = struct.Struct("<II")
_KIND_CODES = {"triplane": 0, "voxel": 1, "implicit": 2}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def write_png(path, img) -> None:
    """Write a float image in [0, 1] (H, W) or (H, W, 3) as 8-bit PNG."""
    arr = np.asarray(img)
    if arr.dtype != np.uint8:
        arr = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG", optimize=False)


def read_png(path) -> np.ndarray:
    """Read an 8-bit PNG as float64 RGB in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


@dataclass
class Dataset:
    images: np.ndarray
    cameras: list
    side: float = 2.0
    background: tuple = (1.0, 1.0, 1.0)
    paths: list = field(default_factory=list)
    holdout_every: int = 8

    def __len__(self):
        return len(self.cameras)

    def split(self):
        """Training and held-out view indices; every ``holdout_every``-th frame is held out."""
        hold = [i for i in range(len(self)) if i % self.holdout_every == 0]
        train = [i for i in range(len(self)) if i % self.holdout_every != 0]
        return train, hold

    def poses(self) -> np.ndarray:
        return np.stack([c.cam2world for c in self.cameras]) if self.cameras else np.zeros((0, 4, 4))


def save_manifest(path, frames, side, background, scene=None) -> None:
    doc = {"version": MANIFEST_VERSION, "side": side, "background": list(background), "scene": scene,
           "frames": [{"image": img, "camera": cam.to_dict()} for img, cam in frames]}
    Path(path).write_text(json.dumps(doc, indent=1))


def load_manifest(path) -> Dataset:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read manifest {path}: {exc}") from exc
    if doc.get("version") != MANIFEST_VERSION:
        raise FormatError(f"manifest version {doc.get('version')!r} is not {MANIFEST_VERSION!r}")
    missing = {"side", "background", "frames"} - set(doc)
    if missing:
        raise FormatError(f"manifest {path} lacks {sorted(missing)}")
    root = path.parent
    cams, imgs, paths = [], [], []
    for fr in doc["frames"]:
        p = root / fr["image"]
        if not p.exists():
            raise FormatError(f"manifest references missing image {p}")
        cam = Camera.from_dict(fr["camera"]).validate()
        img = read_png(p)
        if img.shape[:2] != (cam.height, cam.width):
            raise FormatError(f"{p} is {img.shape[:2]}, camera says {(cam.height, cam.width)}")
        cams.append(cam)
        imgs.append(img)
        paths.append(fr["image"])
    images = np.stack(imgs) if imgs else np.zeros((0, 0, 0, 3))
    return Dataset(images, cams, float(doc["side"]), tuple(doc["background"]), paths)


def orbit_cameras(n_views, resolution, seed, radius=2.5, focal_scale=1.5, side=2.0):
    """Cameras looking at the origin, spread over the full azimuth with random elevations."""
    rng = np.random.default_rng(seed)
    half_diag = 0.5 * side * np.sqrt(3.0)
    cams = []
    for i in range(n_views):
        az = 2 * np.pi * (i + rng.uniform(-0.25, 0.25)) / max(n_views, 1)
        el = np.deg2rad(rng.uniform(-30.0, 45.0))
        eye = radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        f = focal_scale * resolution
        cams.append(Camera.look_at(eye, (0, 0, 0), f, f, resolution / 2, resolution / 2, resolution, resolution,
                                   max(radius - half_diag, 0.05), radius + half_diag))
    return cams


def make_dataset(scene: str, n_views: int, resolution: int, seed: int, out_dir, samples: int = 1024,
                 background=(1.0, 1.0, 1.0)) -> Dataset:
    """Render ground-truth views of an analytic scene and write PNGs plus ``manifest.json``."""
    fld = make_scene(scene)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cams = orbit_cameras(n_views, resolution, seed, side=fld.side)
    cfg = RenderConfig(n_coarse=samples, n_fine=0, background=background, chunk=1024)
    frames, imgs = [], []
    for i, cam in enumerate(cams):
        name = f"view_{i:03d}.png"
        write_png(out / name, render_image(fld, cam, cfg).rgb)
        imgs.append(read_png(out / name))
        frames.append((name, cam))
    save_manifest(out / "manifest.json", frames, fld.side, background, scene)
    images = np.stack(imgs) if imgs else np.zeros((0, resolution, resolution, 3))
    return Dataset(images, cams, fld.side, tuple(background), [n for n, _ in frames])


def save_checkpoint(fld: NeuralField, path) -> None:
    rep, dec = fld.rep, fld.decoder
    kind = _KIND_CODES[rep.kind]
    dt = np.dtype(dec.dtype)
    code = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}.get(dt)
    if code is None:
        raise ContractError(f"unsupported checkpoint dtype {dt}")
    le = _DTYPES[code]
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, CHECKPOINT_VERSION, kind, code, rep.resolution, rep.channels, float(rep.side)))
        if kind != 2:
            arr = rep.planes if kind == 0 else rep.grid
            fh.write(np.ascontiguousarray(arr, dtype=le).tobytes())
        nf = -1 if dec.n_freqs is None else dec.n_freqs
        fh.write(_DEC_HEADER.pack(len(dec.weights), nf, int(dec.rgb) | (2 if dec.activation == "relu" else 0), dec.in_features))
        for w, b in zip(dec.weights, dec.biases):
            fh.write(_LAYER.pack(*w.shape))
            fh.write(np.ascontiguousarray(w, dtype=le).tobytes())
            fh.write(np.ascontiguousarray(b, dtype=le).tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("checkpoint is truncated")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, st: struct.Struct):
        return st.unpack(self.take(st.size))

    def array(self, dtype, shape):
        n = int(np.prod(shape)) * dtype.itemsize
        return np.frombuffer(self.take(n), dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


def load_checkpoint(path) -> NeuralField:
    r = _Reader(Path(path).read_bytes())
    magic, version, kind, code, res, ch, side = r.unpack(_HEADER)
    if magic != MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    dt = _DTYPES[code]
    if kind == 0:
        rep = TriPlane(r.array(dt, (3, res, res, ch)), side)
    elif kind == 1:
        rep = VoxelGrid(r.array(dt, (res, res, res, ch)), side)
    elif kind == 2:
        rep = NoFeatures(side, dtype=dt.newbyteorder("=").type)
    else:
        raise FormatError(f"unknown representation code {kind}")
    n_layers, nf, flags, in_feat = r.unpack(_DEC_HEADER)
    if flags & ~3:
        raise FormatError(f"unknown decoder flags {flags:#x}")
    weights, biases = [], []
    for _ in range(n_layers):
        fi, fo = r.unpack(_LAYER)
        weights.append(r.array(dt, (fi, fo)))
        biases.append(r.array(dt, (fo,)))
    if r.pos != len(r.data):
        raise FormatError("trailing bytes after checkpoint payload")
    dec = FieldDecoder(weights, biases, in_feat, None if nf < 0 else nf, bool(flags & 1), side,
                       "relu" if flags & 2 else "softplus")
    return NeuralField(rep, dec)
