"""Single-scene fitting: losses, Adam, image metrics and the training loop."""
from __future__ import annotations

import csv
import io
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, NumericalAbort
from .fields import FEATURES
from .renderer import RenderConfig, Rays, generate_rays, render_image, render_rays, render_rays_backward
from .tape import GradientTape

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("iter", "mse", "density_reg", "psnr_holdout", "ssim_holdout", "wallclock_ms")


def mse_loss(pred, target):
    """Mean squared error over all elements and its gradient w.r.t. ``pred``."""
    pred = np.asarray(pred)
    diff = pred - np.asarray(target)
    n = diff.size
    if n == 0:
        raise ContractError("mse of an empty batch")
    return float(np.sum(diff * diff) / n), 2.0 * diff / n


def density_regularization(fld, n_pairs: int = 1000, perturb_std: float = 0.008, rng=None,
                           tape: Optional[GradientTape] = None, weight: float = 1.0) -> float:
    """Mean |sigma(x) - sigma(x + dx)| over random pairs in the cube.

    ``x`` is uniform in the cube and ``dx`` is isotropic Gaussian with
    standard deviation ``perturb_std`` (world units). When ``tape`` is given,
    ``weight`` times the loss gradient is accumulated into it.
    """
    if n_pairs < 1:
        raise ContractError("density regularization needs at least one pair")
    rng = np.random.default_rng(rng)
    half = 0.5 * fld.side
    x = rng.uniform(-half, half, (n_pairs, 3))
    dx = rng.normal(0.0, perturb_std, (n_pairs, 3))
    pts = np.concatenate([x, x + dx])
    dtype = fld.decoder.dtype if hasattr(fld, "decoder") else np.float64
    sigma, feat, cache = fld.forward(pts.astype(dtype, copy=False))
    diff = sigma[:n_pairs].astype(np.float64) - sigma[n_pairs:]
    loss = float(np.mean(np.abs(diff)))
    if tape is not None:
        s = weight * np.sign(diff) / n_pairs
        dsigma = np.concatenate([s, -s]).astype(dtype)
        fld.backward(cache, dsigma, np.zeros_like(feat), tape)
    return loss


@dataclass
class AdamState:
    """Bias-corrected Adam moments. ``lr`` is a float or a {param name: lr} dict with an optional ``"*"`` default."""

    lr: object = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def lr_for(self, name: str) -> float:
        if isinstance(self.lr, dict):
            return self.lr.get(name, self.lr.get("*", 1e-3))
        return float(self.lr)


def adam_step(params: dict, tape: GradientTape, state: AdamState) -> None:
    """In-place Adam update of every array in ``params``."""
    tape.check_mirrors(params)
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        g = tape[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        if m.shape != p.shape:
            raise ContractError(f"Adam moment for {name!r} has shape {m.shape}, parameter {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= (state.lr_for(name) / bc1) * m / (np.sqrt(v / bc2) + state.eps)


def psnr(a, b, data_range: float = 1.0) -> float:
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(data_range ** 2 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    rows = sliding_window_view(img, len(win), axis=0) @ win
    return sliding_window_view(rows, len(win), axis=1) @ win


def ssim(a, b, data_range: float = 1.0, win_size: int = 11, sigma: float = 1.5) -> float:
    """Mean structural similarity with a Gaussian window, averaged over channels.

    Statistics are taken over fully-contained windows only. Images smaller
    than the window shrink it to the largest odd size that fits.
    """
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ContractError(f"ssim shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    size = min(win_size, a.shape[0], a.shape[1])
    size -= 1 - size % 2
    win = gaussian_window(size, sigma)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    scores = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _filter_valid(x, win), _filter_valid(y, win)
        sxx = _filter_valid(x * x, win) - mx * mx
        syy = _filter_valid(y * y, win) - my * my
        sxy = _filter_valid(x * y, win) - mx * my
        smap = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
        scores.append(smap.mean())
    return float(np.mean(scores))


@dataclass
class TrainConfig:
    iterations: int = 5000
    batch_rays: int = 6400
    n_coarse: int = 48
    n_fine: int = 48
    lr_features: float = 1e-2
    lr_decoder: float = 1e-3
    density_reg_weight: float = 0.1
    density_reg_every: int = 4
    density_reg_pairs: int = 1000
    perturb_fraction: float = 0.004  # of the cube side
    log_every: int = 50
    eval_every: int = 250
    eval_views: Optional[int] = None
    chunk_rays: int = 512
    workers: int = 1
    seed: int = 0
    target_psnr: Optional[float] = None
    target_ssim: Optional[float] = None
    record_wallclock: bool = False


@dataclass
class TrainResult:
    field: object
    rows: list
    iterations: int
    psnr: float
    ssim: float

    def csv_text(self) -> str:
        return metrics_csv(self.rows)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.10g}"


def metrics_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in METRIC_COLUMNS])
    return buf.getvalue()


def evaluate(fld, dataset, views, render_cfg: RenderConfig):
    """Mean PSNR and SSIM of ``fld`` renders against ``dataset`` images ``views``."""
    ps, ss = [], []
    for i in views:
        img = render_image(fld, dataset.cameras[i], render_cfg).rgb
        ps.append(psnr(img, dataset.images[i]))
        ss.append(ssim(img, dataset.images[i]))
    return float(np.mean(ps)), float(np.mean(ss))


class _RayPool:
    """Every training pixel's ray, colour and global id, flattened."""

    def __init__(self, dataset, views):
        origins, dirs, near, far, colors, ids = [], [], [], [], [], []
        for i in views:
            cam = dataset.cameras[i]
            r = generate_rays(cam)
            origins.append(r.origins)
            dirs.append(r.directions)
            near.append(r.near)
            far.append(r.far)
            colors.append(dataset.images[i].reshape(-1, 3))
            ids.append(i * cam.width * cam.height + np.arange(len(r)))
        self.rays = Rays(np.concatenate(origins), np.concatenate(dirs), np.concatenate(near), np.concatenate(far))
        self.colors = np.concatenate(colors)
        self.ids = np.concatenate(ids)

    def __len__(self):
        return len(self.colors)


def train_step(fld, pool: _RayPool, sel: np.ndarray, iteration: int, config: TrainConfig,
               render_cfg: RenderConfig, executor=None) -> tuple[float, GradientTape]:
    """Photometric loss and gradient for one ray batch.

    The batch is cut into fixed-size chunks whose private tapes are summed in
    chunk order, so the result does not depend on the number of workers.
    """
    n = len(sel)
    n_elems = 3 * n
    chunks = [sel[s:s + config.chunk_rays] for s in range(0, n, config.chunk_rays)]

    def run(chunk):
        rays = pool.rays.subset(chunk)
        out = render_rays(fld, rays, render_cfg, ids=pool.ids[chunk], stream=iteration, need_grad=True)
        diff = out.feature - pool.colors[chunk]
        tape = fld.new_tape()
        render_rays_backward(fld, out, 2.0 * diff / n_elems, tape)
        return float(np.sum(diff * diff)), tape

    results = list(executor.map(run, chunks)) if executor is not None else [run(c) for c in chunks]
    total = fld.new_tape()
    sse = 0.0
    for part, tape in results:
        sse += part
        total.merge([tape])
    return sse / n_elems, total


def train_sso(dataset, fld, config: Optional[TrainConfig] = None, out_dir=None) -> TrainResult:
    """Fit ``fld`` to the dataset's training views with Adam.

    Every ``density_reg_every`` iterations the density smoothness term,
    weighted by ``density_reg_weight``, is added to the photometric loss.
    Held-out views (every 8th frame) are scored at iteration 0, every
    ``eval_every`` iterations, and at the end.
    """
    config = config or TrainConfig()
    if len(dataset) == 0:
        raise ContractError("cannot train on an empty dataset")
    train_views, holdout = dataset.split()
    if not train_views:
        raise ContractError("dataset has no training views after the holdout split")
    if config.eval_views is not None:
        holdout = holdout[:config.eval_views]
    pool = _RayPool(dataset, train_views)
    render_cfg = RenderConfig(config.n_coarse, config.n_fine, dataset.background, jitter=True, seed=config.seed,
                              chunk=config.chunk_rays)
    eval_cfg = RenderConfig(config.n_coarse, config.n_fine, dataset.background, jitter=False, seed=config.seed)
    state = AdamState(lr={FEATURES: config.lr_features, "*": config.lr_decoder})
    params = fld.params()
    perturb = config.perturb_fraction * fld.side
    batch = min(config.batch_rays, len(pool))

    rows = []
    start = time.perf_counter()
    last_p, last_s = (evaluate(fld, dataset, holdout, eval_cfg) if holdout else (None, None))
    rows.append({"iter": 0, "psnr_holdout": last_p, "ssim_holdout": last_s,
                 "wallclock_ms": 0.0 if config.record_wallclock else None})
    done = 0
    executor = ThreadPoolExecutor(config.workers) if config.workers > 1 else None
    try:
        for it in range(1, config.iterations + 1):
            rng = np.random.default_rng([config.seed, it])
            sel = rng.integers(0, len(pool), batch)
            mse, tape = train_step(fld, pool, sel, it, config, render_cfg, executor)
            total = mse
            dreg = None
            if config.density_reg_weight and config.density_reg_every and it % config.density_reg_every == 0:
                dreg = density_regularization(fld, config.density_reg_pairs, perturb, rng, tape,
                                              config.density_reg_weight)
                total += config.density_reg_weight * dreg
            if not np.isfinite(total) or not all(np.all(np.isfinite(g)) for _, g in tape.items()):
                raise NumericalAbort(f"non-finite loss at iteration {it}: mse={mse}, density_reg={dreg}")
            with np.errstate(over="ignore", invalid="ignore"):
                adam_step(params, tape, state)
            bad = [k for k, v in params.items() if not np.all(np.isfinite(v))]
            if bad:
                raise NumericalAbort(f"non-finite parameters after step {it}: {', '.join(bad)}")
            done = it

            evaluated = holdout and (it % config.eval_every == 0 or it == config.iterations)
            if evaluated:
                last_p, last_s = evaluate(fld, dataset, holdout, eval_cfg)
                log.info("iter %d mse %.6f psnr %.3f ssim %.4f", it, mse, last_p, last_s)
            if evaluated or it % config.log_every == 0:
                rows.append({"iter": it, "mse": mse, "density_reg": dreg,
                             "psnr_holdout": last_p if evaluated else None,
                             "ssim_holdout": last_s if evaluated else None,
                             "wallclock_ms": (time.perf_counter() - start) * 1e3 if config.record_wallclock else None})
            if evaluated and _reached(config, last_p, last_s):
                break
    finally:
        if executor is not None:
            executor.shutdown()

    result = TrainResult(fld, rows, done, last_p, last_s)
    if out_dir is not None:
        from .dataio import save_checkpoint

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(fld, out / "checkpoint.tpf")
        (out / "metrics.csv").write_text(result.csv_text())
    return result


def _reached(config: TrainConfig, p, s) -> bool:
    if config.target_psnr is None and config.target_ssim is None:
        return False
    ok_p = config.target_psnr is None or (p is not None and p >= config.target_psnr)
    ok_s = config.target_ssim is None or (s is not None and s >= config.target_ssim)
    return ok_p and ok_s
