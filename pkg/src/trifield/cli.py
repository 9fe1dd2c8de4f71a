"""Command-line entry point.

Exit codes: 0 success, 2 bad input (missing files, malformed configs or
checkpoints, invalid cameras), 3 numerical abort (non-finite training loss).
Option precedence is command-line flag, then ``--config`` file, then the
built-in default.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import tomli

from . import bench, ganprep
from .dataio import load_checkpoint, load_manifest, make_dataset, save_checkpoint, write_png
from .errors import ContractError, FormatError, InputDomainError, NumericalAbort
from .geometry import export_mesh, marching_cubes, sample_density_grid
from .model import KINDS, build_field
from .optim import TrainConfig, train_sso
from .renderer import Camera, RenderConfig, render_image
from .scenes import SCENES, make_scene

log = logging.getLogger("trifield")

DEFAULTS = {
    "make-dataset": {"scene": "sphere", "views": 32, "res": 128, "samples": 1024},
    "fit": {"kind": "triplane", "res": 64, "channels": 16, "hidden": 128, "n_hidden": 2, "n_freqs": 4,
            "iters": 5000, "batch": 6400, "coarse": 48, "fine": 48, "lr_features": 1e-2, "lr_decoder": 1e-3,
            "density_reg_weight": 0.1, "eval_every": 250, "log_every": 50, "workers": 1, "chunk": 512,
            "eval_views": None, "target_psnr": None, "target_ssim": None, "wallclock": False},
    "render": {"coarse": 48, "fine": 48, "background": 1.0},
    "extract-mesh": {"res": 128, "level": 5.0},
    "bench": {"reps": 5, "points": 1_000_000, "batch": 65536, "threads": 1, "small": False},
    "ganprep-selftest": {},
}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trifield", description="tri-plane neural field toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--config", type=Path, default=None, help="TOML file of key = value options")
        sp.add_argument("--out", type=Path, default=None)
        return sp

    sp = common(sub.add_parser("make-dataset", help="render an analytic scene into posed PNGs"))
    sp.add_argument("--scene", choices=SCENES)
    sp.add_argument("--views", type=int)
    sp.add_argument("--res", type=int)
    sp.add_argument("--samples", type=int)

    sp = common(sub.add_parser("fit", help="fit a field to a dataset"))
    sp.add_argument("--data", type=Path, required=True, help="dataset manifest.json")
    sp.add_argument("--kind", choices=KINDS)
    for name, typ in [("res", int), ("channels", int), ("hidden", int), ("n-hidden", int), ("n-freqs", int),
                      ("iters", int), ("batch", int), ("coarse", int), ("fine", int), ("lr-features", float),
                      ("lr-decoder", float), ("density-reg-weight", float), ("eval-every", int),
                      ("log-every", int), ("workers", int), ("chunk", int), ("eval-views", int),
                      ("target-psnr", float), ("target-ssim", float)]:
        sp.add_argument(f"--{name}", type=typ)
    sp.add_argument("--wallclock", action="store_const", const=True, default=None,
                    help="record wall-clock times in the metrics log (makes it non-reproducible)")

    sp = common(sub.add_parser("render", help="render a checkpoint or analytic scene"))
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", type=Path)
    src.add_argument("--scene", choices=SCENES)
    sp.add_argument("--camera", type=Path, required=True, help="camera JSON")
    sp.add_argument("--coarse", type=int)
    sp.add_argument("--fine", type=int)
    sp.add_argument("--background", type=float)

    sp = common(sub.add_parser("extract-mesh", help="marching-cubes mesh of a field's density"))
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", type=Path)
    src.add_argument("--scene", choices=SCENES)
    sp.add_argument("--res", type=int)
    sp.add_argument("--level", type=float)

    sp = common(sub.add_parser("bench", help="field query throughput and memory"))
    sp.add_argument("--reps", type=int)
    sp.add_argument("--points", type=int)
    sp.add_argument("--batch", type=int)
    sp.add_argument("--threads", type=int)
    sp.add_argument("--small", action="store_const", const=True, default=None,
                    help="desk-scale shapes instead of the full-size grids")

    common(sub.add_parser("ganprep-selftest", help="check GAN-side schedules and tensor assembly"))
    return p


def resolve_options(args: argparse.Namespace) -> dict:
    opts = dict(DEFAULTS[args.command])
    opts["seed"] = 0
    opts["out"] = None
    if args.config is not None:
        try:
            with open(args.config, "rb") as fh:
                cfg = tomli.load(fh)
        except (OSError, tomli.TOMLDecodeError) as exc:
            raise FormatError(f"cannot read config {args.config}: {exc}") from exc
        for k, v in cfg.items():
            key = k.replace("-", "_")
            if key not in opts:
                raise FormatError(f"unknown option {k!r} for {args.command}")
            opts[key] = v
    for k, v in vars(args).items():
        if k in ("command", "config", "verbose") or v is None:
            continue
        opts[k] = v
    return opts


def _load_field(opts):
    if opts.get("checkpoint") is not None:
        return load_checkpoint(opts["checkpoint"])
    return make_scene(opts["scene"])


def cmd_make_dataset(o):
    out = o["out"] or Path("dataset")
    ds = make_dataset(o["scene"], o["views"], o["res"], o["seed"], out, o["samples"])
    print(f"wrote {len(ds)} views to {out}")


def cmd_fit(o):
    ds = load_manifest(o["data"])
    fld = build_field(o["kind"], resolution=o["res"], channels=o["channels"], side=ds.side, hidden=o["hidden"],
                      n_hidden=o["n_hidden"], n_freqs=o["n_freqs"], seed=o["seed"])
    cfg = TrainConfig(iterations=o["iters"], batch_rays=o["batch"], n_coarse=o["coarse"], n_fine=o["fine"],
                      lr_features=o["lr_features"], lr_decoder=o["lr_decoder"],
                      density_reg_weight=o["density_reg_weight"], eval_every=o["eval_every"],
                      log_every=o["log_every"], workers=o["workers"], chunk_rays=o["chunk"],
                      eval_views=o["eval_views"], seed=o["seed"], target_psnr=o["target_psnr"],
                      target_ssim=o["target_ssim"], record_wallclock=bool(o["wallclock"]))
    out = o["out"] or Path("fit")
    res = train_sso(ds, fld, cfg, out)
    print(f"{res.iterations} iterations, held-out PSNR {res.psnr:.2f} dB, SSIM {res.ssim:.4f}; wrote {out}")


def cmd_render(o):
    fld = _load_field(o)
    try:
        cam = Camera.from_dict(json.loads(Path(o["camera"]).read_text())).validate()
    except json.JSONDecodeError as exc:
        raise FormatError(f"bad camera JSON: {exc}") from exc
    k = fld.out_channels
    img = render_image(fld, cam, RenderConfig(o["coarse"], o["fine"], background=o["background"]))
    out = o["out"] or Path("render.png")
    write_png(out, img.rgb if k >= 3 else img.features[..., 0])
    print(f"wrote {out}")


def cmd_extract_mesh(o):
    fld = _load_field(o)
    mesh = marching_cubes(sample_density_grid(fld, o["res"]), o["level"])
    out = o["out"] or Path("mesh.obj")
    export_mesh(mesh, out)
    print(f"wrote {len(mesh.vertices)} vertices, {len(mesh.faces)} triangles to {out}")


def cmd_bench(o):
    fields = bench.default_fields(o["seed"], full_size=not o["small"])
    rep = bench.run_query_bench(fields, o["points"], o["batch"], o["seed"], o["reps"], threads=o["threads"])
    print(rep.table())
    text = rep.csv_text()
    if o["out"] is not None:
        Path(o["out"]).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_ganprep_selftest(o):
    results = ganprep.selftest()
    for name, ok in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    if not all(ok for _, ok in results):
        raise ContractError("ganprep self-test failed")


COMMANDS = {"make-dataset": cmd_make_dataset, "fit": cmd_fit, "render": cmd_render,
            "extract-mesh": cmd_extract_mesh, "bench": cmd_bench, "ganprep-selftest": cmd_ganprep_selftest}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](resolve_options(args))
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 3
    except (InputDomainError, ContractError, FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
