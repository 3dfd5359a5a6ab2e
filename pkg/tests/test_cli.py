import csv
import json

import numpy as np
import pytest
from PIL import Image

from sadiagram import cli, codec
from sadiagram.imageio import read_image, write_rgb
from sadiagram.render import boundary_map, render_id_map


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr().out.strip().splitlines()
    return code, (json.loads(out[-1]) if out else None)


def smooth_image(path, w=48, h=40, seed=0):
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:h, 0:w] / max(w, h)
    img = np.stack([0.5 + 0.4 * np.sin(3 * xs + 1), 0.3 + 0.5 * ys, 0.6 * xs * ys], axis=-1)
    img[h // 3: h // 2, w // 4: w // 2] = rng.uniform(0, 1, 3)
    write_rgb(path, img)
    return path


@pytest.fixture
def encoded(tmp_path, capsys):
    src = smooth_image(tmp_path / "img.png")
    code, res = run(["encode", src, "--sites", 120, "--iters", 150, "--out", tmp_path / "img.sad"],
                    capsys)
    assert code == 0
    return src, tmp_path / "img.sad", res


def test_encode_constant_image_is_exact(tmp_path, capsys):
    src = tmp_path / "flat.png"
    write_rgb(src, np.full((24, 32, 3), 0.4))
    code, res = run(["encode", src, "--sites", 16, "--iters", 500], capsys)
    assert code == 0
    assert res["psnr"] >= 60.0
    assert res["sites"] == 16
    assert (tmp_path / "flat.sad").exists()


def test_encode_same_seed_same_bytes(tmp_path, capsys):
    src = smooth_image(tmp_path / "img.png")
    for name in ("a.sad", "b.sad"):
        assert run(["encode", src, "--sites", 60, "--iters", 60, "--seed", 7,
                    "--out", tmp_path / name], capsys)[0] == 0
    assert (tmp_path / "a.sad").read_bytes() == (tmp_path / "b.sad").read_bytes()


def test_decode_matches_encoder_psnr(encoded, tmp_path, capsys):
    src, sad, enc = encoded
    code, res = run(["decode", sad, "--out", tmp_path / "dec.png", "--reference", src,
                     "--compare-passes", 1], capsys)
    assert code == 0
    assert abs(res["psnr"] - enc["psnr"]) <= 0.15
    assert res["psnr_gap"] >= 0.0
    assert read_image(tmp_path / "dec.png").width == 48


def test_corrupt_magic_is_data_error(encoded, tmp_path, capsys):
    _, sad, _ = encoded
    data = bytearray(sad.read_bytes())
    data[0] ^= 0xFF
    bad = tmp_path / "bad.sad"
    bad.write_bytes(bytes(data))
    code, _ = run(["decode", bad], capsys)
    assert code == 3


def test_corrupt_magic_message(encoded, tmp_path, capsys):
    _, sad, _ = encoded
    bad = tmp_path / "bad.sad"
    bad.write_bytes(b"XXXX" + sad.read_bytes()[4:])
    assert cli.main(["decode", str(bad)]) == 3
    assert "magic" in capsys.readouterr().err.lower()


def test_missing_image_is_data_error(tmp_path, capsys):
    assert cli.main(["encode", str(tmp_path / "nope.png"), "--sites", "4"]) == 3


def test_sites_and_bpp_conflict(tmp_path, capsys):
    src = smooth_image(tmp_path / "img.png")
    assert cli.main(["encode", str(src), "--sites", "10", "--bpp", "2"]) == 2


def test_unknown_flag_is_usage_error(capsys):
    assert cli.main(["decode"]) == 2
    assert cli.main(["encode", "x.png", "--bogus"]) == 2


def test_inspect_needs_a_flag(encoded, capsys):
    _, sad, _ = encoded
    assert cli.main(["inspect", str(sad)]) == 2


def test_inspect_maps_match_render_oracles(encoded, tmp_path, capsys):
    _, sad, _ = encoded
    code, res = run(["inspect", sad, "--ids", "--boundaries", "--tau", "--out", tmp_path / "m"],
                    capsys)
    assert code == 0
    _, store, field = cli._load_model(sad, cli.DECODE_PASSES)
    ids = render_id_map(store, field)
    bnd = np.asarray(Image.open(res["boundaries"]))
    np.testing.assert_array_equal(bnd > 127, boundary_map(ids) > 0.5)
    id_img = np.asarray(Image.open(res["ids"]))
    # pixels with equal ids get equal colours
    flat = id_img.reshape(-1, 3)
    for i in np.unique(ids)[:20]:
        cols = flat[ids.ravel() == i]
        assert np.all(cols == cols[0])
    assert np.asarray(Image.open(res["tau"])).shape == ids.shape


def test_inspect_single_site_constant_map(tmp_path, capsys):
    src = tmp_path / "flat.png"
    write_rgb(src, np.full((16, 16, 3), 0.7))
    assert run(["encode", src, "--sites", 1, "--iters", 5], capsys)[0] == 0
    code, res = run(["inspect", tmp_path / "flat.sad", "--ids"], capsys)
    assert code == 0
    img = np.asarray(Image.open(res["ids"]))
    assert np.all(img == img[0, 0])


def test_bench_csv_schema(tmp_path, capsys):
    out = tmp_path / "bench.csv"
    code, res = run(["bench", "--resolutions", "32,64", "--sites", 64, "--passes", 4,
                     "--trials", 1, "--samples", 32, "--timing-runs", 1, "--out", out], capsys)
    assert code == 0
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0].keys()) == ["resolution", "sites", "passes", "trials", "match",
                                    "refresh_ms", "render_ms", "backward_ms"]
    assert [int(r["resolution"]) for r in rows] == [32, 64]
    assert all(0.0 <= float(r["match"]) <= 1.0 for r in rows)
    assert all(float(r["render_ms"]) > 0 for r in rows)


def test_bench_is_deterministic():
    a = cli.bench_row(64, 200, 6, 2, 64, seed=3)
    b = cli.bench_row(64, 200, 6, 2, 64, seed=3)
    assert a == b


def test_poisson_requires_a_domain(capsys):
    assert cli.main(["poisson", "--steps", "1"]) == 2
    assert cli.main(["poisson", "--disk", "10", "--mask", "m.png"]) == 2


def test_poisson_disk_outputs(tmp_path, capsys):
    out = tmp_path / "pois"
    code, res = run(["poisson", "--disk", 14, "--size", 32, "--interior", 80, "--boundary", 32,
                     "--steps", 30, "--out", out], capsys)
    assert code == 0
    assert res["boundary_unchanged"] is True
    for name in ("solution.png", "heightfield.png", "sites.png", "history.csv"):
        assert (out / name).exists()
    with open(out / "history.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 31
    assert float(rows[-1]["residual_mse"]) == pytest.approx(res["residual_mse"])


def test_poisson_mask_file(tmp_path, capsys):
    m = np.zeros((32, 32, 3))
    m[6:26, 4:28] = 1.0
    write_rgb(tmp_path / "mask.png", m)
    code, res = run(["poisson", "--mask", tmp_path / "mask.png", "--interior", 60,
                     "--boundary", 24, "--steps", 10, "--out", tmp_path / "o"], capsys)
    assert code == 0
    assert res["error_mse"] is None


def test_bpp_encode_hits_the_budget(tmp_path, capsys):
    src = smooth_image(tmp_path / "img.png", 96, 64)
    code, res = run(["encode", src, "--bpp", 8, "--iters", 400], capsys)
    assert code == 0
    goal = 8 * 96 * 64 // 128
    assert abs(res["sites"] - goal) <= 0.05 * goal
    assert abs(res["bpp"] - 8) <= 0.05 * 8
    assert codec.read_file(tmp_path / "img.sad").count == res["sites"]


def test_threads_flag(tmp_path, capsys):
    src = tmp_path / "flat.png"
    write_rgb(src, np.full((8, 8, 3), 0.2))
    assert cli.main(["--threads", "1", "encode", str(src), "--sites", "2", "--iters", "2"]) == 0
    assert cli.main(["--threads", "0", "encode", str(src), "--sites", "2", "--iters", "2"]) == 2


def test_bench_16k_row_meets_reference_floor():
    row = cli.bench_row(1024, 16_384, 12, trials=1, samples=256, seed=0)
    assert row["match"] >= 0.92


def test_bench_render_time_grows_with_resolution():
    small = cli.bench_row(64, 256, 4, 1, 16, seed=0, timing_runs=3)
    large = cli.bench_row(512, 256, 4, 1, 16, seed=0, timing_runs=3)
    assert large["render_ms"] > small["render_ms"]
    assert large["refresh_ms"] > small["refresh_ms"]
