import argparse
import json

import numpy as np
import pytest

from trifield.cli import main, resolve_options
from trifield.dataio import (
    MANIFEST_VERSION,
    load_checkpoint,
    load_manifest,
    make_dataset,
    read_png,
    save_checkpoint,
    write_png,
)
from trifield.errors import FormatError
from trifield.model import build_field
from trifield.renderer import Camera
from trifield.scenes import make_scene


def test_png_round_trip_exact(tmp_path):
    fixture = np.arange(4 * 5 * 3, dtype=np.uint8).reshape(4, 5, 3) * 4
    write_png(tmp_path / "a.png", fixture)
    back = read_png(tmp_path / "a.png")
    np.testing.assert_array_equal(np.round(back * 255).astype(np.uint8), fixture)
    # float images quantise to the nearest code and then round-trip exactly
    write_png(tmp_path / "b.png", back)
    np.testing.assert_array_equal(read_png(tmp_path / "b.png"), back)


@pytest.mark.parametrize("kind", ["triplane", "voxel", "implicit"])
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_checkpoint_round_trip_bit_exact(tmp_path, kind, dtype):
    fld = build_field(kind, resolution=5, channels=3, hidden=8, n_hidden=2, n_freqs=2, side=2.5, seed=1,
                      dtype=dtype)
    save_checkpoint(fld, tmp_path / "c.tpf")
    back = load_checkpoint(tmp_path / "c.tpf")
    assert back.kind == fld.kind and back.side == 2.5
    assert set(back.params()) == set(fld.params())
    for k, v in fld.params().items():
        assert back.params()[k].dtype == v.dtype
        assert back.params()[k].tobytes() == v.tobytes()
    pts = np.random.default_rng(0).uniform(-1, 1, (10, 3)).astype(dtype)
    np.testing.assert_array_equal(back.forward(pts)[0], fld.forward(pts)[0])


def test_checkpoint_corruption_detected(tmp_path):
    fld = build_field("triplane", resolution=4, channels=2, hidden=8, seed=0)
    path = tmp_path / "c.tpf"
    save_checkpoint(fld, path)
    data = path.read_bytes()
    for bad in (b"XXXX" + data[4:], data[:-3], data + b"\0", data[:4] + b"\x09" + data[5:]):
        path.write_bytes(bad)
        with pytest.raises(FormatError):
            load_checkpoint(path)


def test_dataset_generation(tmp_path):
    ds = make_dataset("sphere", 3, 24, 7, tmp_path / "a", samples=128)
    assert ds.images.shape == (3, 24, 24, 3)
    again = make_dataset("sphere", 3, 24, 7, tmp_path / "b", samples=128)
    for name in ds.paths:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    loaded = load_manifest(tmp_path / "a" / "manifest.json")
    np.testing.assert_array_equal(loaded.images, again.images)
    # every camera looks at the sphere centre, so the central pixels show its colour
    color = np.asarray(make_scene("sphere").color)
    for img in loaded.images:
        np.testing.assert_allclose(img[11:13, 11:13].reshape(-1, 3), np.tile(color, (4, 1)), atol=1.5 / 255)
        np.testing.assert_allclose(img[0, 0], 1.0)
    azimuths = np.arctan2(loaded.poses()[:, 1, 3], loaded.poses()[:, 0, 3])
    assert len(set(np.round(azimuths, 3))) == 3


def test_empty_dataset(tmp_path):
    ds = make_dataset("sphere", 0, 16, 0, tmp_path)
    assert len(ds) == 0
    assert len(load_manifest(tmp_path / "manifest.json")) == 0


def test_manifest_errors(tmp_path):
    make_dataset("two-blob", 1, 8, 0, tmp_path, samples=16)
    path = tmp_path / "manifest.json"
    doc = json.loads(path.read_text())
    assert doc["version"] == MANIFEST_VERSION
    path.write_text(json.dumps({**doc, "version": "tpf-dataset/0"}))
    with pytest.raises(FormatError):
        load_manifest(path)
    path.write_text(json.dumps({**doc, "frames": [{"image": "nope.png", "camera": doc["frames"][0]["camera"]}]}))
    with pytest.raises(FormatError):
        load_manifest(path)
    path.write_text(json.dumps({"version": MANIFEST_VERSION}))
    with pytest.raises(FormatError):
        load_manifest(path)


def camera_file(tmp_path, res=12):
    cam = Camera.look_at([0.0, -2.5, 0.5], [0, 0, 0], 1.5 * res, 1.5 * res, res / 2, res / 2, res, res, 1.0, 4.0)
    path = tmp_path / "cam.json"
    path.write_text(json.dumps(cam.to_dict()))
    return path


def test_cli_render_empty_field_gives_background(tmp_path):
    out = tmp_path / "r.png"
    assert main(["render", "--scene", "empty", "--camera", str(camera_file(tmp_path)), "--out", str(out)]) == 0
    np.testing.assert_array_equal(read_png(out), 1.0)


def test_cli_fit_zero_iterations_saves_init(tmp_path, small_sphere_dataset):
    args = ["fit", "--data", str(small_sphere_dataset), "--iters", "0", "--res", "6", "--channels", "3",
            "--hidden", "8", "--eval-views", "1", "--coarse", "8", "--fine", "8", "--seed", "5",
            "--out", str(tmp_path / "fit")]
    assert main(args) == 0
    ds = load_manifest(small_sphere_dataset)
    init = build_field("triplane", resolution=6, channels=3, hidden=8, side=ds.side, seed=5)
    back = load_checkpoint(tmp_path / "fit" / "checkpoint.tpf")
    for k, v in init.params().items():
        assert back.params()[k].tobytes() == v.tobytes()


def test_cli_fit_nan_exits_3(tmp_path, small_sphere_dataset):
    args = ["fit", "--data", str(small_sphere_dataset), "--iters", "5", "--res", "6", "--channels", "3",
            "--hidden", "8", "--eval-views", "0", "--batch", "64", "--coarse", "8", "--fine", "8",
            "--lr-decoder", "1e300", "--lr-features", "1e300", "--out", str(tmp_path / "fit")]
    assert main(args) == 3


def test_cli_input_errors_exit_2(tmp_path, capsys):
    assert main(["fit", "--data", str(tmp_path / "missing.json")]) == 2
    bad = tmp_path / "bad.tpf"
    bad.write_bytes(b"nope")
    assert main(["render", "--checkpoint", str(bad), "--camera", str(camera_file(tmp_path))]) == 2
    cam = tmp_path / "badcam.json"
    cam.write_text(json.dumps({"fx": 1}))
    assert main(["render", "--scene", "sphere", "--camera", str(cam)]) == 2
    cfg = tmp_path / "c.toml"
    cfg.write_text("not_an_option = 1\n")
    assert main(["extract-mesh", "--scene", "sphere", "--config", str(cfg)]) == 2
    assert "error" in capsys.readouterr().err


def test_config_precedence(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text("res = 40\nlevel = 3.5\n")
    ns = argparse.Namespace(command="extract-mesh", config=cfg, verbose=False, seed=None, out=None,
                            checkpoint=None, scene="sphere", res=20, level=None)
    opts = resolve_options(ns)
    assert opts["res"] == 20          # flag beats config
    assert opts["level"] == 3.5       # config beats default
    ns.config = None
    ns.res = None
    assert resolve_options(ns)["res"] == 128 and resolve_options(ns)["level"] == 5.0


def test_cli_extract_mesh_and_bench(tmp_path, capsys):
    obj = tmp_path / "s.obj"
    assert main(["extract-mesh", "--scene", "sphere", "--res", "24", "--out", str(obj)]) == 0
    assert obj.read_text().startswith("#")
    csv_path = tmp_path / "b.csv"
    assert main(["bench", "--small", "--points", "2000", "--reps", "1", "--out", str(csv_path)]) == 0
    assert csv_path.read_text().splitlines()[0].startswith("name,param_count,bytes")
    assert main(["ganprep-selftest"]) == 0
    assert "FAIL" not in capsys.readouterr().out


def test_cli_make_dataset_and_fit_are_reproducible(tmp_path):
    for d in ("a", "b"):
        assert main(["make-dataset", "--views", "2", "--res", "12", "--samples", "64", "--seed", "3",
                     "--out", str(tmp_path / d)]) == 0
        assert main(["fit", "--data", str(tmp_path / d / "manifest.json"), "--iters", "4", "--res", "6",
                     "--channels", "3", "--hidden", "8", "--batch", "64", "--coarse", "8", "--fine", "8",
                     "--eval-every", "2", "--log-every", "1", "--out", str(tmp_path / d / "fit")]) == 0
    assert (tmp_path / "a/view_001.png").read_bytes() == (tmp_path / "b/view_001.png").read_bytes()
    assert (tmp_path / "a/fit/metrics.csv").read_bytes() == (tmp_path / "b/fit/metrics.csv").read_bytes()
    assert (tmp_path / "a/fit/checkpoint.tpf").read_bytes() == (tmp_path / "b/fit/checkpoint.tpf").read_bytes()
