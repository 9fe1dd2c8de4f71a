"""Field-evaluation throughput and capacity scaling for tri-plane, voxel and fully implicit fields.

Only point -> (sigma, feature) evaluation is timed; ray generation and
compositing are excluded. Memory is reported as parameter bytes plus a
per-batch activation workspace, kept in separate columns.
"""
from __future__ import annotations

import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .decoder import FieldDecoder, encoding_width
from .errors import ContractError
from .fields import NoFeatures, TriPlane, VoxelGrid, param_count, triplane_params, voxel_params
from .model import NeuralField

MIN_TIMED_SECONDS = 1e-3


def build_implicit_baseline(depth: int = 8, width: int = 256, n_freqs: int = 10, out_channels: int = 3,
                            seed: int = 0, dtype=np.float32) -> NeuralField:
    """Position-encoded ReLU MLP with ``depth`` hidden layers of ``width`` units and no stored features."""
    rng = np.random.default_rng(seed)
    dec = FieldDecoder.build(0, [width] * depth, out_channels, n_freqs, rgb=True, rng=rng, dtype=dtype,
                             activation="relu")
    return NeuralField(NoFeatures(dtype=dtype), dec)


def implicit_param_formula(depth: int, width: int, n_freqs: int, out_channels: int = 3) -> int:
    d_in = encoding_width(n_freqs)
    return (d_in * width + width) + (depth - 1) * (width * width + width) + (width * (1 + out_channels) + 1 + out_channels)


def build_triplane_gan(resolution: int = 256, channels: int = 32, seed: int = 0, dtype=np.float32) -> NeuralField:
    rng = np.random.default_rng(seed)
    rep = TriPlane.random(resolution, channels, 2.0, 0.1, rng, dtype)
    return NeuralField(rep, FieldDecoder.gan_preset(channels, rng, dtype))


def build_hybrid(kind: str, resolution: int, channels: int, hidden=128, n_hidden=4, n_freqs=4, seed=0,
                 dtype=np.float32) -> NeuralField:
    rng = np.random.default_rng(seed)
    cls = TriPlane if kind == "triplane" else VoxelGrid
    rep = cls.random(resolution, channels, 2.0, 0.1, rng, dtype)
    return NeuralField(rep, FieldDecoder.sso_preset(channels, hidden, n_hidden, n_freqs, 2.0, rng, dtype))


def total_params(fld) -> int:
    return param_count(fld.rep) + sum(p.size for p in fld.decoder.params().values())


def workspace_bytes(fld, batch: int) -> int:
    """Activation storage for one batch: gathered features, decoder input and every layer output."""
    widths = [fld.rep.channels, fld.decoder.in_width] + [w.shape[1] for w in fld.decoder.weights]
    return batch * sum(widths) * np.dtype(fld.decoder.dtype).itemsize


@dataclass
class BenchRow:
    name: str
    param_count: int
    bytes: int
    workspace_bytes: int
    queries_per_second: float
    relative_speed: float = 1.0
    relative_memory: float = 1.0
    times: list = field(default_factory=list)
    scaling_efficiency: float | None = None


@dataclass
class BenchReport:
    rows: list
    baseline: str
    n_points: int
    batch: int

    def row(self, name: str) -> BenchRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def csv_text(self) -> str:
        head = "name,param_count,bytes,workspace_bytes,queries_per_second,relative_speed,relative_memory"
        lines = [head]
        for r in self.rows:
            lines.append(f"{r.name},{r.param_count},{r.bytes},{r.workspace_bytes},{r.queries_per_second:.6g},"
                         f"{r.relative_speed:.6g},{r.relative_memory:.6g}")
        return "\n".join(lines) + "\n"

    def table(self) -> str:
        out = [f"{'field':<22}{'params':>12}{'MB':>9}{'Mq/s':>9}{'speed':>8}{'mem':>8}"]
        for r in self.rows:
            out.append(f"{r.name:<22}{r.param_count:>12}{r.bytes / 2**20:>9.1f}{r.queries_per_second / 1e6:>9.3f}"
                       f"{r.relative_speed:>7.2f}x{r.relative_memory:>7.2f}x")
        return "\n".join(out)


def query_points(n_points: int, seed: int, side: float = 2.0, dtype=np.float32) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.uniform(-0.5 * side, 0.5 * side, (n_points, 3)).astype(dtype)


def _time_field(fld, pts: np.ndarray, batch: int, threads: int) -> float:
    batches = [pts[s:s + batch] for s in range(0, len(pts), batch)]

    def run(b):
        fld.forward(b)

    start = time.perf_counter()
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            list(ex.map(run, batches))
    else:
        for b in batches:
            run(b)
    return time.perf_counter() - start


def run_query_bench(fields: dict, n_points: int = 1_000_000, batch: int = 65536, seed: int = 0, reps: int = 5,
                    baseline: str | None = None, threads: int = 1) -> BenchReport:
    """Median-of-``reps`` throughput of each field on the same random points.

    ``fields`` maps a row name to a field; ``baseline`` names the reference
    row (default: the first entry). With ``threads > 1`` batches run on a
    thread pool and each row also reports its efficiency against a
    single-threaded run.
    """
    if n_points <= 0:
        raise ContractError("benchmark needs at least one query point")
    if not fields:
        raise ContractError("benchmark needs at least one field")
    baseline = baseline or next(iter(fields))
    if baseline not in fields:
        raise ContractError(f"baseline {baseline!r} is not among the benchmarked fields")
    pts = query_points(n_points, seed)
    rows = []
    with threadpool_limits(1):
        for name, fld in fields.items():
            b = min(batch, n_points)
            # grow the batch until one batch is comfortably above timer resolution
            while b < n_points and _time_field(fld, pts[:b], b, 1) < MIN_TIMED_SECONDS:
                b = min(2 * b, n_points)
            times = [_time_field(fld, pts, b, threads) for _ in range(reps)]
            qps = n_points / statistics.median(times)
            n_par = total_params(fld)
            item = np.dtype(fld.decoder.dtype).itemsize
            row = BenchRow(name, n_par, n_par * item, workspace_bytes(fld, b), qps, times=times)
            if threads > 1:
                single = n_points / statistics.median([_time_field(fld, pts, b, 1) for _ in range(reps)])
                row.scaling_efficiency = qps / (threads * single)
            rows.append(row)
    ref = next(r for r in rows if r.name == baseline)
    for r in rows:
        r.relative_speed = r.queries_per_second / ref.queries_per_second
        r.relative_memory = (r.bytes + r.workspace_bytes) / (ref.bytes + ref.workspace_bytes)
    return BenchReport(rows, baseline, n_points, batch)


def default_fields(seed: int = 0, full_size: bool = True) -> dict:
    """Implicit baseline first, then the hybrid rows of the efficiency comparison."""
    if full_size:
        n_sso, c_sso, m_vox, c_vox = 512, 48, 128, 18
    else:
        n_sso, c_sso, m_vox, c_vox = 64, 16, 32, 6
    return {
        "implicit-8x256": build_implicit_baseline(seed=seed),
        "voxel-4x128": build_hybrid("voxel", m_vox, c_vox, seed=seed),
        "triplane-sso-4x128": build_hybrid("triplane", n_sso, c_sso, seed=seed),
        "triplane-gan-1x64": build_triplane_gan(256 if full_size else 64, 32, seed),
    }


@dataclass
class ScalingTable:
    resolutions: list
    triplane: list
    voxel: list
    triplane_slope: float
    voxel_slope: float


def run_scaling_bench(resolutions, channels: int = 32) -> ScalingTable:
    """Exact parameter counts versus side length, with log-log slopes fitted by least squares."""
    res = [int(n) for n in resolutions]
    if len(res) < 2:
        raise ContractError("need at least two resolutions to fit a slope")
    tp = [triplane_params(n, channels) for n in res]
    vx = [voxel_params(n, channels) for n in res]
    logn = np.log(res)
    slope_tp = float(np.polyfit(logn, np.log(tp), 1)[0])
    slope_vx = float(np.polyfit(logn, np.log(vx), 1)[0])
    return ScalingTable(res, tp, vx, slope_tp, slope_vx)
