"""Initialisation, the Adam loop with clamping, tau diffusion and the fit driver."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional

import numpy as np
from scipy import ndimage

from .core import (ANISO, CB, CR, LOG_TAU, LOG_TAU_RANGE, N_PARAMS, RADIUS, RADIUS_RANGE,
                   ANISO_RANGE, UX, UY, X, Y, CandidateField, ImageBuffer, InvalidInputError,
                   SiteStore, TrainConfig, host_rng)
from . import candidates
from .grad import GradBuffer, backward

log = logging.getLogger(__name__)

LUMA = np.array([0.2126, 0.7152, 0.0722])


def sobel_gradient(pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sobel derivatives ``(gx, gy)`` of the luminance of an ``(H, W, 3)`` image."""
    lum = np.asarray(pixels, dtype=np.float64) @ LUMA
    gx = ndimage.sobel(lum, axis=1, mode="nearest")
    gy = ndimage.sobel(lum, axis=0, mode="nearest")
    return gx, gy


def init_probabilities(target: ImageBuffer, lambda_init: float) -> np.ndarray:
    """Per-pixel sampling mass mixing gradient magnitude with a uniform prior."""
    if not 0.0 <= lambda_init <= 1.0:
        raise InvalidInputError("lambda_init must lie in [0, 1]")
    gx, gy = sobel_gradient(target.pixels)
    mag = np.hypot(gx, gy).ravel()
    total = mag.sum()
    uniform = np.full(mag.shape, 1.0 / mag.size)
    if total <= 0.0 or not np.isfinite(total):
        return uniform
    p = (1.0 - lambda_init) * mag / total + lambda_init * uniform
    return p / p.sum()


def init_sites(target: ImageBuffer, n: int, lambda_init: float, rng: np.random.Generator,
               config: Optional[TrainConfig] = None, capacity: Optional[int] = None) -> SiteStore:
    """Sample ``n`` distinct pixel cells and place one site in each.

    Positions get a small subpixel jitter so that no two sites coincide; colours
    are the target pixel at the sampled cell.
    """
    config = config or TrainConfig()
    h, w = target.height, target.width
    if not 1 <= n <= h * w:
        raise InvalidInputError(f"site count {n} outside [1, {h * w}]")
    p = init_probabilities(target, lambda_init)
    cells = rng.choice(h * w, size=n, replace=False, p=p)
    ys, xs = np.divmod(cells, w)
    jitter = rng.uniform(-0.25, 0.25, size=(n, 2))
    params = np.zeros((n, N_PARAMS))
    params[:, X] = np.clip(xs + jitter[:, 0], 0.0, w - 1)
    params[:, Y] = np.clip(ys + jitter[:, 1], 0.0, h - 1)
    params[:, LOG_TAU] = config.init_log_tau
    r0 = config.init_radius if config.init_radius is not None else math.sqrt(h * w / n)
    params[:, RADIUS] = min(max(r0, RADIUS_RANGE[0]), RADIUS_RANGE[1])
    params[:, CR:CB + 1] = target.pixels[ys, xs]
    params[:, UX] = 1.0
    params[:, UY] = 0.0
    params[:, ANISO] = config.init_aniso
    cap = capacity if capacity is not None else max(n, int(math.ceil(n * config.capacity_factor)))
    return SiteStore.from_params(params, w, h, capacity=cap, dtype=np.dtype(config.dtype))


# ---------------------------------------------------------------------------
# optimiser

@dataclass
class AdamStats:
    skipped: int = 0


def clamp_project(store: SiteStore, ids=None) -> None:
    """Clamp active, unfrozen sites to valid ranges and renormalise directions."""
    if ids is None:
        ids = np.flatnonzero(store.active & ~store.frozen)
    if len(ids) == 0:
        return
    p = store.params[ids].astype(np.float64)
    p[:, X] = np.clip(p[:, X], 0.0, store.width - 1)
    p[:, Y] = np.clip(p[:, Y], 0.0, store.height - 1)
    p[:, LOG_TAU] = np.clip(p[:, LOG_TAU], *LOG_TAU_RANGE)
    p[:, RADIUS] = np.clip(p[:, RADIUS], *RADIUS_RANGE)
    p[:, CR:CB + 1] = np.clip(p[:, CR:CB + 1], 0.0, 1.0)
    p[:, ANISO] = np.clip(p[:, ANISO], *ANISO_RANGE)
    norm = np.hypot(p[:, UX], p[:, UY])
    bad = ~(norm > 0.0) | ~np.isfinite(norm)
    norm[bad] = 1.0
    p[:, UX] /= norm
    p[:, UY] /= norm
    p[bad, UX] = 1.0
    p[bad, UY] = 0.0
    store.params[ids] = p
    if store.params.dtype != np.float64:
        # rounding to 32-bit can push a unit vector off by an ulp; that is fine,
        # but values must stay inside their clamps
        q = store.params[ids]
        q[:, X] = np.clip(q[:, X], 0.0, store.width - 1)
        q[:, Y] = np.clip(q[:, Y], 0.0, store.height - 1)
        store.params[ids] = q


def adam_step(store: SiteStore, grads: GradBuffer, t: int, lrs, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8, stats: Optional[AdamStats] = None) -> int:
    """One Adam update of every active, unfrozen site, followed by clamping.

    Bias correction uses each site's own step counter, so sites created or reset
    mid-run start their moments afresh. Non-finite gradient components leave
    that component untouched; the number skipped is returned.
    """
    if t < 1:
        raise InvalidInputError("iteration index must be >= 1")
    ids = np.flatnonzero(store.active & ~store.frozen)
    if len(ids) == 0:
        return 0
    lrs = np.asarray(lrs, dtype=np.float64).reshape(1, N_PARAMS)
    g = grads.params[ids].astype(np.float64)
    ok = np.isfinite(g)
    skipped = int(np.count_nonzero(~ok))
    g = np.where(ok, g, 0.0)
    m = store.adam_m[ids].astype(np.float64)
    v = store.adam_v[ids].astype(np.float64)
    m_new = np.where(ok, beta1 * m + (1.0 - beta1) * g, m)
    v_new = np.where(ok, beta2 * v + (1.0 - beta2) * g * g, v)
    step = store.adam_t[ids] + 1
    bc1 = 1.0 - beta1 ** step
    bc2 = 1.0 - beta2 ** step
    mhat = m_new / bc1[:, None]
    vhat = v_new / bc2[:, None]
    delta = np.where(ok, -lrs * mhat / (np.sqrt(vhat) + eps), 0.0)
    p = store.params[ids].astype(np.float64) + delta
    store.params[ids] = p
    store.adam_m[ids] = m_new
    store.adam_v[ids] = v_new
    store.adam_t[ids] = step
    clamp_project(store, ids)
    if stats is not None:
        stats.skipped += skipped
    return skipped


def tau_diffusion(store: SiteStore, field: CandidateField, lambda_diff: float,
                  grads: GradBuffer, id_map: Optional[np.ndarray] = None) -> None:
    """Jacobi smoothing of log_tau gradients over the site adjacency.

    A site's neighbourhood is itself plus every site sharing a candidate list
    with a pixel it owns; its gradient becomes ``(1 - l) own + l mean(neighbourhood)``.
    """
    if not 0.0 <= lambda_diff <= 1.0:
        raise InvalidInputError("lambda_diff must lie in [0, 1]")
    if lambda_diff == 0.0:
        return
    from .render import render_id_map
    if id_map is None:
        id_map = render_id_map(store, field)
    cand = field.pixel_ids().reshape(-1, field.k).astype(np.int64)
    owner = np.asarray(id_map, dtype=np.int64).reshape(-1)
    a = np.repeat(owner, field.k)
    b = cand.reshape(-1)
    ok = (a >= 0) & (b != candidates.INVALID_ID) & (b < store.capacity)
    a, b = a[ok], b[ok]
    ok = store.active[b] & (a != b)
    n = store.capacity
    # both directions: adjacency is symmetric
    keys = np.unique(np.concatenate([a[ok] * n + b[ok], b[ok] * n + a[ok]]))
    src, dst = np.divmod(keys, n)
    g_old = grads.data[:, LOG_TAU].copy()
    total = g_old + np.bincount(src, weights=g_old[dst], minlength=n)
    count = 1.0 + np.bincount(src, minlength=n)
    mixed = (1.0 - lambda_diff) * g_old + lambda_diff * total / count
    grads.data[:, LOG_TAU] = np.where(store.active, mixed, 0.0)


# ---------------------------------------------------------------------------
# driver

def psnr_from_loss(loss: float) -> float:
    mse = loss / 3.0
    if mse <= 0.0:
        return 99.0
    return min(99.0, 10.0 * math.log10(1.0 / mse))


@dataclass
class History:
    rows: list = dc_field(default_factory=list)

    def append(self, iteration, loss, psnr, active, ms):
        self.rows.append((int(iteration), float(loss), float(psnr), int(active), float(ms)))

    @property
    def loss(self) -> np.ndarray:
        return np.array([r[1] for r in self.rows])

    @property
    def psnr(self) -> np.ndarray:
        return np.array([r[2] for r in self.rows])

    @property
    def active(self) -> np.ndarray:
        return np.array([r[3] for r in self.rows], dtype=np.int64)

    def at(self, iteration: int):
        for r in self.rows:
            if r[0] == iteration:
                return r
        raise KeyError(iteration)

    def write_csv(self, path, timings: bool = True) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["iteration", "loss", "psnr", "active", "ms"])
            for it, loss, psnr, act, ms in self.rows:
                wr.writerow([it, repr(loss), repr(psnr), act, f"{ms:.3f}" if timings else "0"])


@dataclass
class FitResult:
    store: SiteStore
    field: CandidateField
    history: History
    schedule_scale: float = 1.0
    skipped_updates: int = 0


def fit(target: ImageBuffer, config: TrainConfig, store: Optional[SiteStore] = None,
        callback: Optional[Callable[[int, SiteStore, CandidateField], None]] = None) -> FitResult:
    """Fit sites to ``target``; returns the final store, field and history.

    Each iteration: warm-start candidate refresh, backward pass, optional tau
    diffusion, Adam step, then any scheduled densify/prune events.
    """
    from . import budget

    config.validate()
    rng = host_rng(config.seed)
    if store is None:
        store = init_sites(target, config.n_sites, config.lambda_init, rng, config)
    if (store.width, store.height) != (target.width, target.height):
        raise InvalidInputError("site store and target disagree on image size")
    n0 = store.count_active
    scale = 1.0
    if config.target_bpp is not None and config.budget:
        scale = budget.plan_schedule(n0, config, target.width, target.height)
    calendar = budget.EventCalendar.from_config(config, scale)
    field = CandidateField(target.width, target.height, config.k, config.grid)
    field = candidates.refresh(store, field, mode="full", passes=config.init_passes,
                               inject=config.inject_count, seed=config.seed)
    lrs = config.learning_rates()
    history = History()
    adam_stats = AdamStats()
    for t in range(1, config.iters + 1):
        t0 = time.perf_counter()
        if (t - 1) % config.candidate_update_period == 0:
            field = candidates.refresh(store, field, mode="warm_start",
                                       passes=config.candidate_passes,
                                       inject=config.inject_count, seed=config.seed)
        grads, loss = backward(store, field, target, want_removal=False, mode=config.merge_mode)
        if config.tau_diffusion_lambda:
            tau_diffusion(store, field, config.tau_diffusion_lambda, grads)
        adam_step(store, grads, t, lrs, config.beta1, config.beta2, config.adam_eps, adam_stats)
        if config.budget:
            dens = calendar.densify_at(t)
            prun = calendar.prune_at(t)
            if dens or prun:
                stats = budget.accumulate_stats(store, field, target, mode=config.merge_mode)
                pairs = np.zeros((0, 2), dtype=np.int64)
                if dens:
                    pairs = budget.densify(store, stats, target, calendar.densify_pct, rng,
                                           config.alpha, config.eps_densify)
                if prun:
                    budget.prune(store, stats, calendar.prune_pct, exclude=pairs.ravel())
                if len(pairs):
                    candidates.inherit(store, field, pairs[:, 0], pairs[:, 1])
                    candidates.seed_sites(store, field, pairs.ravel())
        ms = (time.perf_counter() - t0) * 1e3
        history.append(t, loss, psnr_from_loss(loss), store.count_active, ms)
        if config.log_every and t % config.log_every == 0:
            log.debug("iter %d loss %.6g active %d", t, loss, store.count_active)
        if callback is not None:
            callback(t, store, field)
    field = candidates.refresh(store, field, mode="warm_start", passes=config.candidate_passes,
                               inject=config.inject_count, seed=config.seed)
    return FitResult(store, field, history, scale, adam_stats.skipped)
