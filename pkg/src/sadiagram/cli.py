"""Command-line interface: ``sad encode|decode|inspect|bench|poisson``.

Every command prints one JSON object on stdout; human-readable notes go to
stderr. Exit codes: 0 success, 2 usage, 3 data/format, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import glob
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from .core import (CandidateField, EmptyModelError, FramingError, InvalidInputError, SadError,
                   TrainConfig, host_rng)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

THREADS_ENV = "SAD_THREADS"
DECODE_PASSES = 16
BENCH_FIELDS = ["resolution", "sites", "passes", "trials", "match", "refresh_ms", "render_ms",
                "backward_ms"]

log = logging.getLogger("sadiagram")


class UsageError(Exception):
    """Bad flag combination detected after argparse."""


class NumericError(Exception):
    """A result came out non-finite."""


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True), flush=True)


def _note(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _set_threads(n) -> None:
    if n is None:
        env = os.environ.get(THREADS_ENV)
        n = int(env) if env else None
    if n is None:
        return
    import numba
    if n < 1:
        raise UsageError("--threads must be >= 1")
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


# ---------------------------------------------------------------------------
# encode

def _encode_one(path: Path, out: Path, args) -> dict:
    from . import codec, quality
    from .imageio import read_image
    from .render import render_array
    from .train import fit

    target = read_image(path)
    w, h = target.width, target.height
    cfg = TrainConfig(iters=args.iters, seed=args.seed, lambda_init=args.lambda_init, log_every=0)
    if args.bpp is not None:
        goal = int(math.floor(args.bpp * w * h / (8 * codec.SITE_BYTES)))
        if goal < 1:
            raise UsageError(f"--bpp {args.bpp} gives no sites at {w}x{h}")
        cfg.target_bpp = args.bpp
        cfg.n_sites = min(w * h, args.init_sites or 2 * goal)
    else:
        cfg.n_sites = min(args.sites, w * h)
        cfg.budget = args.budget
    t0 = time.perf_counter()
    result = fit(target, cfg)
    elapsed = time.perf_counter() - t0
    sad = codec.write_file(out, result.store)
    decoded = codec.quantize_store(result.store)
    field = CandidateField(w, h, cfg.k)
    from .candidates import refresh
    field = refresh(decoded, field, mode="full", passes=DECODE_PASSES,
                    inject=cfg.inject_count, seed=cfg.seed)
    img = render_array(decoded, field)
    p, s = quality.psnr(img, target), quality.ssim(img, target)
    if not (math.isfinite(p) and math.isfinite(s)):
        raise NumericError("fit produced a non-finite image")
    if args.history:
        result.history.write_csv(args.history, timings=False)
    return {"command": "encode", "input": str(path), "output": str(out), "width": w,
            "height": h, "sites": sad.count, "bpp": codec.bpp(sad.count, w, h),
            "psnr": p, "ssim": s, "psnr_float": result.history.psnr[-1] if result.history.rows else None,
            "seconds": round(elapsed, 3)}


def cmd_encode(args) -> int:
    if args.sites is not None and args.bpp is not None:
        raise UsageError("--sites and --bpp are mutually exclusive")
    if args.sites is None and args.bpp is None:
        args.sites = TrainConfig.n_sites
    if args.glob:
        paths = sorted(Path(p) for p in glob.glob(args.input))
        if not paths:
            raise InvalidInputError(f"no files match {args.input!r}")
        outdir = Path(args.out) if args.out else Path(".")
        outdir.mkdir(parents=True, exist_ok=True)
        for p in paths:
            _emit(_encode_one(p, outdir / (p.stem + ".sad"), args))
        return EXIT_OK
    src = Path(args.input)
    out = Path(args.out) if args.out else src.with_suffix(".sad")
    res = _encode_one(src, out, args)
    _note(f"{src}: {res['sites']} sites, {res['bpp']:.3f} bpp, {res['psnr']:.2f} dB, "
          f"{res['seconds']:.1f} s")
    _emit(res)
    return EXIT_OK


# ---------------------------------------------------------------------------
# decode / inspect

def _load_model(path, passes: int, seed: int = 0):
    from . import codec
    from .candidates import refresh
    sad = codec.read_file(path)
    store = sad.to_store()
    if store.count_active == 0:
        raise EmptyModelError(f"{path} holds no active sites")
    field = CandidateField(store.width, store.height, TrainConfig.k)
    field = refresh(store, field, mode="full", passes=passes, seed=seed)
    return sad, store, field


def cmd_decode(args) -> int:
    from . import quality
    from .imageio import read_image, write_rgb
    from .render import render_array

    if args.passes < 0:
        raise UsageError("--passes must be >= 0")
    t0 = time.perf_counter()
    sad, store, field = _load_model(args.input, args.passes)
    img = render_array(store, field)
    elapsed = time.perf_counter() - t0
    out = Path(args.out) if args.out else Path(args.input).with_suffix(".png")
    write_rgb(out, img)
    res = {"command": "decode", "input": str(args.input), "output": str(out),
           "width": store.width, "height": store.height, "sites": sad.count,
           "passes": args.passes, "seconds": round(elapsed, 3)}
    if args.reference:
        ref = read_image(args.reference)
        res["psnr"] = quality.psnr(img, ref)
        res["ssim"] = quality.ssim(img, ref)
        if args.compare_passes is not None:
            _, st2, f2 = _load_model(args.input, args.compare_passes)
            other = quality.psnr(render_array(st2, f2), ref)
            res["compare_passes"] = args.compare_passes
            res["psnr_gap"] = res["psnr"] - other
    _emit(res)
    return EXIT_OK


def cmd_inspect(args) -> int:
    from .imageio import id_colors, write_gray, write_rgb
    from .render import boundary_map, render_id_map, render_tau_map

    if not (args.ids or args.boundaries or args.tau):
        raise UsageError("inspect needs at least one of --ids, --boundaries, --tau")
    sad, store, field = _load_model(args.input, DECODE_PASSES)
    stem = Path(args.out) if args.out else Path(args.input).with_suffix("")
    written = {}
    ids = render_id_map(store, field)
    if args.ids:
        p = Path(f"{stem}_ids.png")
        write_rgb(p, id_colors(np.maximum(ids, 0)))
        written["ids"] = str(p)
    if args.boundaries:
        p = Path(f"{stem}_boundaries.png")
        write_gray(p, boundary_map(ids))
        written["boundaries"] = str(p)
    if args.tau:
        p = Path(f"{stem}_tau.png")
        write_gray(p, render_tau_map(store, field))
        written["tau"] = str(p)
    _emit({"command": "inspect", "input": str(args.input), "sites": sad.count, **written})
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench

def bench_row(resolution: int, n_sites: int, passes: int, trials: int, samples: int,
              seed: int, timing_runs: int = 0) -> dict:
    """Exact top-K match rate (and optional timings) for one table cell."""
    from .candidates import exact_match_rate, refresh, scheduled_passes
    from .grad import backward
    from .render import render_array
    from .core import ImageBuffer

    rates, t_ref, t_ren, t_bwd = [], [], [], []
    for trial in range(trials):
        rng = host_rng(seed + trial)
        store = random_store(resolution, n_sites, rng)
        field = CandidateField(resolution, resolution, TrainConfig.k)
        field = scheduled_passes(store, field, passes, seed=seed + trial)
        cells = rng.integers(0, resolution, size=(samples, 2))
        rates.append(exact_match_rate(store, field, cells))
        if timing_runs:
            target = ImageBuffer(np.zeros((resolution, resolution, 3)))
            for i in range(timing_runs + 1):
                a = time.perf_counter()
                refresh(store, field, mode="warm_start", passes=1, seed=seed)
                b = time.perf_counter()
                render_array(store, field)
                c = time.perf_counter()
                backward(store, field, target, want_removal=False)
                d = time.perf_counter()
                if i:  # first run warms the JIT caches
                    t_ref.append(b - a)
                    t_ren.append(c - b)
                    t_bwd.append(d - c)
    ms = lambda v: round(1e3 * float(np.median(v)), 3) if v else ""  # noqa: E731
    return {"resolution": resolution, "sites": n_sites, "passes": passes, "trials": trials,
            "match": float(np.mean(rates)), "refresh_ms": ms(t_ref), "render_ms": ms(t_ren),
            "backward_ms": ms(t_bwd)}


def random_store(resolution: int, n_sites: int, rng):
    """Uniform random sites on distinct pixel centres (collision-free seeding)."""
    from .core import ANISO, CB, CR, LOG_TAU, N_PARAMS, RADIUS, UX, UY, X, Y, SiteStore
    if n_sites > resolution * resolution:
        raise InvalidInputError("more sites than pixels")
    cells = rng.choice(resolution * resolution, size=n_sites, replace=False)
    ys, xs = np.divmod(cells, resolution)
    p = np.zeros((n_sites, N_PARAMS))
    p[:, X] = xs
    p[:, Y] = ys
    p[:, LOG_TAU] = TrainConfig.init_log_tau
    p[:, RADIUS] = math.sqrt(resolution * resolution / n_sites)
    p[:, CR:CB + 1] = rng.uniform(0.0, 1.0, size=(n_sites, 3))
    theta = rng.uniform(0.0, math.pi, size=n_sites)
    p[:, UX] = np.cos(theta)
    p[:, UY] = np.sin(theta)
    p[:, ANISO] = rng.uniform(-0.5, 0.5, size=n_sites)
    return SiteStore.from_params(p, resolution, resolution)


def cmd_bench(args) -> int:
    out = Path(args.out)
    rows = []
    for res in args.resolutions:
        for n in args.sites:
            for passes in args.passes:
                row = bench_row(res, n, passes, args.trials, args.samples, args.seed,
                                args.timing_runs)
                _note(f"{res}^2 {n} sites {passes} passes: match {row['match']:.3f}")
                rows.append(row)
    with open(out, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=BENCH_FIELDS)
        wr.writeheader()
        for row in rows:
            wr.writerow(row)
    _emit({"command": "bench", "output": str(out), "rows": rows})
    return EXIT_OK


# ---------------------------------------------------------------------------
# poisson

def cmd_poisson(args) -> int:
    from . import poisson
    from .imageio import id_colors, read_image, write_gray, write_rgb
    from .render import render_id_map

    if (args.mask is None) == (args.disk is None):
        raise UsageError("poisson needs exactly one of --mask or --disk")
    truth = None
    if args.mask is not None:
        mask = read_image(args.mask).pixels.mean(axis=2) > 0.5
    else:
        mask = poisson.disk_mask(args.size, args.size, args.disk)
        truth = poisson.disk_truth(args.size, args.size, args.disk)
    cfg = poisson.PoissonConfig(steps=args.steps, n_interior=args.interior,
                                n_boundary=args.boundary, seed=args.seed, metric=args.metric)
    t0 = time.perf_counter()
    digest0 = None

    def hook(t, store, field):
        nonlocal digest0
        if digest0 is None:
            digest0 = poisson.frozen_digest(store)

    result = poisson.solve(mask, cfg, truth, callback=hook)
    elapsed = time.perf_counter() - t0
    if not math.isfinite(result.residual_mse):
        raise NumericError("residual is not finite")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_gray(out / "solution.png", np.where(mask, result.u, 0.0))
    write_rgb(out / "heightfield.png", poisson.shaded_heightfield(result.u, mask))
    ids = render_id_map(result.store, result.field)
    write_rgb(out / "sites.png", id_colors(np.maximum(ids, 0)))
    with open(out / "history.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["step", "residual_mse", "error_mse"])
        for step, r, e, _ in result.history:
            wr.writerow([step, repr(r), repr(e)])
    digest1 = poisson.frozen_digest(result.store)
    _emit({"command": "poisson", "output": str(out), "residual_mse": result.residual_mse,
           "error_mse": None if truth is None else result.error_mse,
           "boundary_unchanged": digest0 == digest1, "frozen_digest": digest1,
           "seconds": round(elapsed, 3)})
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sad", description="Soft anisotropic diagram image codec.")
    ap.add_argument("--threads", type=int, default=None,
                    help=f"worker thread cap (default: ${THREADS_ENV} or all cores)")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("encode", help="fit an image and write a .sad file")
    p.add_argument("input")
    p.add_argument("--sites", type=int, default=None)
    p.add_argument("--bpp", type=float, default=None)
    p.add_argument("--init-sites", type=int, default=None,
                   help="starting count with --bpp (default twice the target)")
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lambda-init", type=float, default=TrainConfig.lambda_init)
    p.add_argument("--budget", action="store_true",
                   help="run densify/prune events with --sites (count then drifts)")
    p.add_argument("--history", default=None, help="write the loss history CSV here")
    p.add_argument("--glob", action="store_true", help="treat input as a glob; --out is a directory")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="render a .sad file to PNG")
    p.add_argument("input")
    p.add_argument("--out", default=None)
    p.add_argument("--passes", type=int, default=DECODE_PASSES)
    p.add_argument("--reference", default=None, help="image to score the result against")
    p.add_argument("--compare-passes", type=int, default=None,
                   help="also decode with this many passes and report the PSNR gap")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("inspect", help="write diagnostic maps of a .sad file")
    p.add_argument("input")
    p.add_argument("--ids", action="store_true")
    p.add_argument("--boundaries", action="store_true")
    p.add_argument("--tau", action="store_true")
    p.add_argument("--out", default=None, help="output path stem")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("bench", help="top-K exact-match table and timings as CSV")
    p.add_argument("--resolutions", type=_int_list, default=[1024])
    p.add_argument("--sites", type=_int_list, default=[16384, 65536, 131072])
    p.add_argument("--passes", type=_int_list, default=[12])
    p.add_argument("--trials", type=int, default=4)
    p.add_argument("--samples", type=int, default=256)
    p.add_argument("--timing-runs", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="bench.csv")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("poisson", help="solve the Poisson demo on a mask or disk")
    p.add_argument("--mask", default=None)
    p.add_argument("--disk", type=float, default=None, help="disk radius in pixels")
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--interior", type=int, default=2000)
    p.add_argument("--boundary", type=int, default=512)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--metric", choices=["l2", "sobolev"], default="l2",
                   help="gradient metric for the residual descent")
    p.add_argument("--out", default="poisson_out")
    p.set_defaults(func=cmd_poisson)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        stream=sys.stderr)
    try:
        _set_threads(args.threads)
        return args.func(args)
    except UsageError as exc:
        _note(f"sad: usage error: {exc}")
        return EXIT_USAGE
    except NumericError as exc:
        _note(f"sad: numeric failure: {exc}")
        return EXIT_NUMERIC
    except (FramingError, EmptyModelError, InvalidInputError, SadError, OSError) as exc:
        _note(f"sad: {exc}")
        return EXIT_DATA
    except FloatingPointError as exc:
        _note(f"sad: numeric failure: {exc}")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
