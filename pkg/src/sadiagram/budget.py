"""Adaptive site budget: statistics, splitting, removal-delta pruning, schedule planning."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass

import numba as nb
import numpy as np

from .core import (ANISO, ANISO_RANGE, CB, CR, INVALID_ID, LOG_TAU, LOG_TAU_RANGE, RADIUS,
                   RADIUS_RANGE, UX, UY, X, Y, CandidateField, ImageBuffer, InvalidInputError,
                   SiteStore, TrainConfig)
from .grad import _removal_delta, accumulate_tiled
from .score import T_G00, T_G01, T_G11, T_R, T_TAU, T_X, T_Y, site_table

log = logging.getLogger(__name__)

# stats columns
S_MASS, S_ENERGY, S_MX, S_MY, S_MXX, S_MXY, S_MYY, S_REMOVAL = range(8)
N_STATS = 8

SCALE_CAP = 0.95
MIN_OFFSET = 1.5
MAX_OFFSET = 48.0
MIN_MASS_FOR_COV = 4.0
MIN_EIG_RATIO = 1.05
CHILD_TAU_SHIFT = -0.25
CHILD_RADIUS_FACTOR = 0.85
FALLBACK_ANISO_FACTOR = 0.8


@dataclass
class SiteStats:
    """Per-site soft responsibilities and residual moments.

    ``moments`` are sums of ``rho * d``, ``rho * d d^T`` with ``rho = w |c - I|^2``
    and ``d = x - p`` measured from the site's position, so ``energy`` doubles
    as the zeroth moment.
    """

    data: np.ndarray
    valid_pixels: int

    @property
    def mass(self):
        return self.data[:, S_MASS]

    @property
    def energy(self):
        return self.data[:, S_ENERGY]

    @property
    def first_moment(self):
        return self.data[:, S_MX:S_MY + 1]

    @property
    def second_moment(self):
        return self.data[:, S_MXX:S_MYY + 1]

    @property
    def removal_delta(self):
        return self.data[:, S_REMOVAL]

    def covariance(self, i: int) -> np.ndarray:
        """Centred residual-weighted covariance of site ``i``."""
        e = self.data[i, S_ENERGY]
        mx, my = self.data[i, S_MX] / e, self.data[i, S_MY] / e
        cxx = self.data[i, S_MXX] / e - mx * mx
        cxy = self.data[i, S_MXY] / e - mx * my
        cyy = self.data[i, S_MYY] / e - my * my
        return np.array([[cxx, cxy], [cxy, cyy]])


@nb.njit(cache=True, parallel=True)
def _stats_kernel(table, params, active, cand, grid, s, target, ids_out, contrib_out, valid):
    h, w = target.shape[0], target.shape[1]
    k = cand.shape[2]
    for y in nb.prange(h):
        lg = np.empty(k)
        ex = np.empty(k)
        ids = np.empty(k, dtype=np.int64)
        nvalid = 0
        for x in range(w):
            p = y * w + x
            px = float(x)
            py = float(y)
            n = 0
            for j in range(k):
                i = np.int64(cand[y // grid, x // grid, j])
                if i == INVALID_ID or i >= active.shape[0] or not active[i]:
                    continue
                dx = px - table[i, T_X]
                dy = py - table[i, T_Y]
                q = table[i, T_G00] * dx * dx + 2.0 * table[i, T_G01] * dx * dy \
                    + table[i, T_G11] * dy * dy
                nrm = math.sqrt(max(q, 0.0))
                ids[n] = i
                lg[n] = -table[i, T_TAU] * (nrm * s - table[i, T_R] * s)
                n += 1
            for j in range(k):
                ids_out[p, j] = -1
                for c in range(contrib_out.shape[2]):
                    contrib_out[p, j, c] = 0.0
            if n == 0:
                continue
            nvalid += 1
            m = lg[0]
            for j in range(1, n):
                if lg[j] > m:
                    m = lg[j]
            total = 0.0
            for j in range(n):
                ex[j] = math.exp(lg[j] - m)
                total += ex[j]
            c0 = 0.0
            c1 = 0.0
            c2 = 0.0
            for j in range(n):
                wj = ex[j] / total
                i = ids[j]
                c0 += wj * params[i, CR]
                c1 += wj * params[i, CR + 1]
                c2 += wj * params[i, CR + 2]
            t0 = target[y, x, 0]
            t1 = target[y, x, 1]
            t2 = target[y, x, 2]
            err = (c0 - t0) ** 2 + (c1 - t1) ** 2 + (c2 - t2) ** 2
            for j in range(n):
                i = ids[j]
                wj = ex[j] / total
                rho = wj * err
                dx = px - table[i, T_X]
                dy = py - table[i, T_Y]
                ids_out[p, j] = i
                v = contrib_out[p, j]
                v[S_MASS] = wj
                v[S_ENERGY] = rho
                v[S_MX] = rho * dx
                v[S_MY] = rho * dy
                v[S_MXX] = rho * dx * dx
                v[S_MXY] = rho * dx * dy
                v[S_MYY] = rho * dy * dy
                v[S_REMOVAL] = _removal_delta(j, n, ids, lg, ex, total, params,
                                              c0, c1, c2, t0, t1, t2, err)
        valid[y] = nvalid


def _pixels(target) -> np.ndarray:
    return np.ascontiguousarray(target.pixels if isinstance(target, ImageBuffer) else target,
                                dtype=np.float64)


def stats_contributions(store: SiteStore, field: CandidateField, target):
    """Per (pixel, slot) statistics contributions and the valid-pixel count."""
    tpx = _pixels(target)
    if tpx.shape != (field.height, field.width, 3):
        raise InvalidInputError("target does not match the field size")
    h, w, k = field.height, field.width, field.k
    ids = np.empty((h * w, k), dtype=np.int64)
    contrib = np.empty((h * w, k, N_STATS))
    valid = np.zeros(h, dtype=np.int64)
    _stats_kernel(site_table(store), store.params, store.active, field.ids, field.grid,
                  store.scale, tpx, ids, contrib, valid)
    return ids, contrib, int(valid.sum())


def accumulate_stats(store: SiteStore, field: CandidateField, target,
                     mode: str = "ordered") -> SiteStats:
    """One pass over the pixels gathering every per-site statistic."""
    ids, contrib, valid = stats_contributions(store, field, target)
    data = accumulate_tiled(ids, contrib, field.width, field.height, store.capacity, mode=mode)
    data[~store.active] = 0.0
    return SiteStats(data, valid)


def densify_score(energy, mass, alpha: float = 0.7, eps: float = 1e-8):
    """Error density ``E / max(m, eps)^alpha``; sites with ``m <= 1`` score NaN (ineligible)."""
    energy = np.asarray(energy, dtype=np.float64)
    mass = np.asarray(mass, dtype=np.float64)
    score = energy / np.maximum(mass, eps) ** alpha
    score = np.where(mass > 1.0, score, np.nan)
    return score if score.ndim else float(score)


def split_offset(mass: float) -> float:
    """Child offset from the parent: ``0.5 sqrt(m)`` clamped to ``[1.5, 48]`` px."""
    return float(min(max(0.5 * math.sqrt(max(mass, 0.0)), MIN_OFFSET), MAX_OFFSET))


def split_axis(stats: SiteStats, i: int, grad_xy, rng, parent_dir, parent_aniso):
    """Return ``(axis, child_dir, child_aniso, used_covariance)`` for splitting site ``i``."""
    mass = stats.data[i, S_MASS]
    energy = stats.data[i, S_ENERGY]
    if mass >= MIN_MASS_FOR_COV and energy > 0.0:
        cov = stats.covariance(i)
        if np.all(np.isfinite(cov)):
            evals, evecs = np.linalg.eigh(cov)
            lo, hi = float(evals[0]), float(evals[1])
            if lo > 0.0 and hi / lo >= MIN_EIG_RATIO:
                axis = evecs[:, 1]
                if axis[0] < 0 or (axis[0] == 0 and axis[1] < 0):
                    axis = -axis
                aniso = float(np.clip(0.5 * math.log(hi / lo), *ANISO_RANGE))
                # with a > 0 the metric stretches along the second axis, so pointing
                # u across the residual makes the cell long along the split axis
                cdir = np.array([-axis[1], axis[0]])
                return axis, cdir, aniso, True
    gx, gy = grad_xy
    norm = math.hypot(gx, gy)
    if norm > 0.0 and math.isfinite(norm):
        axis = np.array([gx / norm, gy / norm])
    else:
        ang = rng.uniform(-math.pi, math.pi)
        axis = np.array([math.cos(ang), math.sin(ang)])
    return axis, np.asarray(parent_dir, dtype=np.float64).copy(), \
        float(FALLBACK_ANISO_FACTOR * parent_aniso), False


def select_densify(store: SiteStore, stats: SiteStats, percentile: float, alpha: float = 0.7,
                   eps: float = 1e-8) -> np.ndarray:
    """IDs of the top ``floor(percentile * active)`` eligible sites by error density."""
    n_sel = int(math.floor(percentile * store.count_active + 1e-9))
    if n_sel <= 0:
        return np.zeros(0, dtype=np.int64)
    ids = np.flatnonzero(store.active & ~store.frozen)
    score = densify_score(stats.energy[ids], stats.mass[ids], alpha, eps)
    ok = ~np.isnan(score)
    ids, score = ids[ok], score[ok]
    order = np.lexsort((ids, -score))
    return ids[order[:n_sel]].astype(np.int64)


def densify(store: SiteStore, stats: SiteStats, target, percentile: float, rng,
            alpha: float = 0.7, eps: float = 1e-8) -> np.ndarray:
    """Split the highest error-density sites.

    Returns an ``(n, 2)`` array of ``(parent slot, new slot)`` pairs; the parent
    slot now holds the first child.
    """
    if not 0.0 < percentile <= 1.0:
        raise InvalidInputError("densify percentile must lie in (0, 1]")
    parents = select_densify(store, stats, percentile, alpha, eps)
    if len(parents) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    if store.size + len(parents) > store.capacity:
        warnings.warn(f"site capacity {store.capacity} exhausted; densify event skipped")
        return np.zeros((0, 2), dtype=np.int64)
    from .train import clamp_project, sobel_gradient
    tpx = _pixels(target)
    h, w = tpx.shape[:2]
    gx, gy = sobel_gradient(tpx)
    children = []
    for i in parents:
        row = store.params[i].astype(np.float64)
        px, py = row[X], row[Y]
        xi = int(min(max(round(px), 0), w - 1))
        yi = int(min(max(round(py), 0), h - 1))
        axis, cdir, caniso, _ = split_axis(stats, i, (gx[yi, xi], gy[yi, xi]), rng,
                                           row[UX:UY + 1], row[ANISO])
        off = split_offset(stats.data[i, S_MASS])
        base = row.copy()
        base[LOG_TAU] = np.clip(row[LOG_TAU] + CHILD_TAU_SHIFT, *LOG_TAU_RANGE)
        base[RADIUS] = np.clip(row[RADIUS] * CHILD_RADIUS_FACTOR, *RADIUS_RANGE)
        base[UX:UY + 1] = cdir
        base[ANISO] = caniso
        rows = []
        for sign in (1.0, -1.0):
            child = base.copy()
            child[X] = px + sign * off * axis[0]
            child[Y] = py + sign * off * axis[1]
            cx = int(min(max(round(child[X]), 0), w - 1))
            cy = int(min(max(round(child[Y]), 0), h - 1))
            child[CR:CB + 1] = tpx[cy, cx]
            rows.append(child)
        store.params[i] = rows[0]
        store.reset_adam(i)
        j = store.append(rows[1])
        children.append((int(i), j))
    pairs = np.array(children, dtype=np.int64).reshape(-1, 2)
    clamp_project(store, pairs.ravel())
    return pairs


def prune_scores(stats: SiteStats) -> np.ndarray:
    """Accumulated removal delta per site, normalised by the valid-pixel count."""
    return stats.removal_delta / max(stats.valid_pixels, 1)


def prune(store: SiteStore, stats: SiteStats, percentile: float, exclude=None) -> np.ndarray:
    """Deactivate the bottom ``floor(percentile * active)`` sites by removal delta."""
    if not 0.0 <= percentile <= 1.0:
        raise InvalidInputError("prune percentile must lie in [0, 1]")
    n_sel = int(math.floor(percentile * store.count_active + 1e-9))
    if n_sel <= 0:
        return np.zeros(0, dtype=np.int64)
    eligible = store.active & ~store.frozen
    if exclude is not None and len(exclude):
        eligible = eligible.copy()
        eligible[np.asarray(exclude, dtype=np.int64)] = False
    ids = np.flatnonzero(eligible)
    # never prune the model to nothing
    n_sel = min(n_sel, max(store.count_active - 1, 0), len(ids))
    score = prune_scores(stats)[ids]
    order = np.lexsort((ids, score))
    out = ids[order[:n_sel]].astype(np.int64)
    store.deactivate(out)
    return out


# ---------------------------------------------------------------------------
# event calendar and schedule simulation

def _clip_window(start: int, end: int, iters: int) -> tuple[int, int]:
    return start, min(end, iters)


@dataclass
class EventCalendar:
    """Iterations at which densify / prune events fire, with their scaled percentiles."""

    iters: int
    densify_freq: int
    densify_start: int
    densify_end: int
    prune_freq: int
    prune_start: int
    prune_end: int
    prune_during_densify: bool
    densify_pct: float
    prune_pct: float

    @classmethod
    def from_config(cls, config: TrainConfig, scale: float = 1.0) -> "EventCalendar":
        ds, de = _clip_window(config.densify_start, config.densify_end, config.iters)
        ps, pe = _clip_window(config.prune_start, config.prune_end, config.iters)
        return cls(config.iters, config.densify_freq, ds, de, config.prune_freq, ps, pe,
                   config.prune_during_densify,
                   min(config.densify_percentile * scale, SCALE_CAP),
                   min(config.prune_percentile * scale, SCALE_CAP))

    def densify_at(self, t: int) -> bool:
        return (self.densify_pct > 0.0 and self.densify_start <= t <= self.densify_end
                and t % self.densify_freq == 0)

    def prune_at(self, t: int) -> bool:
        if self.prune_pct <= 0.0 or not (self.prune_start <= t < self.prune_end):
            return False
        if not self.prune_during_densify and t <= self.densify_end:
            return False
        return t % self.prune_freq == 0

    def simulate(self, n0: int) -> int:
        """Final active count assuming every event fires at its full percentile."""
        n = int(n0)
        for t in range(1, self.iters + 1):
            if self.densify_at(t):
                n += int(math.floor(self.densify_pct * n + 1e-9))
            if self.prune_at(t):
                n -= min(int(math.floor(self.prune_pct * n + 1e-9)), max(n - 1, 0))
        return n


def target_count(target_bpp: float, width: int, height: int) -> int:
    return int(math.floor(target_bpp * width * height / 128.0))


def simulate_count(n0: int, config: TrainConfig, scale: float) -> int:
    return EventCalendar.from_config(config, scale).simulate(n0)


def plan_schedule(n0: int, config: TrainConfig, width: int, height: int) -> float:
    """Shared percentile scale whose simulated final count is closest to the BPP target."""
    if config.target_bpp is None:
        raise InvalidInputError("plan_schedule needs target_bpp")
    goal = target_count(config.target_bpp, width, height)
    base_max = max(config.densify_percentile, config.prune_percentile, 1e-12)
    s_max = SCALE_CAP / base_max

    def err(s):
        return abs(simulate_count(n0, config, s) - goal)

    grid = np.concatenate([[0.0], np.geomspace(1e-3, s_max, 200)])
    errs = [err(s) for s in grid]
    best = int(np.argmin(errs))
    lo = grid[max(best - 1, 0)]
    hi = grid[min(best + 1, len(grid) - 1)]
    best_s, best_e = grid[best], errs[best]
    for s in np.linspace(lo, hi, 101):
        e = err(s)
        if e < best_e:
            best_s, best_e = float(s), e
    if best_e > 0.05 * max(goal, 1):
        warnings.warn(f"site target {goal} unreachable from {n0} within the schedule "
                      f"(closest simulated miss {best_e})")
    return float(best_s)
