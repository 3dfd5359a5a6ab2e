"""Anisotropic additively weighted distance score.

The scalar functions here are the definitions; :func:`site_table` and the
``_logit_at`` kernel evaluate the same expressions in the same order so that
the vectorised paths agree with them bit for bit in 64-bit.
"""

from __future__ import annotations

import math

import numba as nb
import numpy as np

from .core import (ANISO, CR, INVALID_ID, LOG_TAU, RADIUS, UX, UY, X, Y, EmptyModelError,
                   InvalidInputError, Site, SiteStore)

# site table columns
T_X, T_Y, T_G00, T_G01, T_G11, T_TAU, T_R, T_EA, T_EIA, T_UX, T_UY = range(11)
T_COLS = 11

UNIT_TOL = 1e-6


def metric_from_site(dir, aniso: float) -> np.ndarray:
    """Return the det-1 SPD metric ``e^a u u^T + e^-a v v^T`` with ``v = (-u_y, u_x)``."""
    ux, uy = float(dir[0]), float(dir[1])
    if abs(math.hypot(ux, uy) - 1.0) > UNIT_TOL:
        raise InvalidInputError(f"direction {dir!r} is not unit length")
    g00, g01, g11 = _metric_entries(ux, uy, float(aniso))
    return np.array([[g00, g01], [g01, g11]])


def _metric_entries(ux, uy, a):
    ea = math.exp(a)
    eia = math.exp(-a)
    vx = -uy
    vy = ux
    g00 = ea * ux * ux + eia * vx * vx
    g01 = ea * ux * uy + eia * vx * vy
    g11 = ea * uy * uy + eia * vy * vy
    return g00, g01, g11


def _quad(g00, g01, g11, dx, dy):
    return g00 * dx * dx + 2.0 * g01 * dx * dy + g11 * dy * dy


def d_mix(x, site: Site, s: float) -> float:
    """Signed, normalised score ``|x - p|_G * s - r * s``."""
    if s <= 0:
        raise InvalidInputError("scale s must be positive")
    g00, g01, g11 = _metric_entries(site.dir[0], site.dir[1], site.aniso)
    dx = float(x[0]) - site.pos[0]
    dy = float(x[1]) - site.pos[1]
    n = math.sqrt(max(_quad(g00, g01, g11, dx, dy), 0.0))
    return n * s - site.radius * s


def logit(x, site: Site, s: float) -> float:
    return -math.exp(site.log_tau) * d_mix(x, site, s)


def power_distance(x, pos, weight: float) -> float:
    """Power (Laguerre) distance ``|x - p|^2 - w``; reference only, never used for shading."""
    dx = float(x[0]) - float(pos[0])
    dy = float(x[1]) - float(pos[1])
    return dx * dx + dy * dy - weight


def apollonius_distance(x, pos, radius: float) -> float:
    return math.hypot(float(x[0]) - float(pos[0]), float(x[1]) - float(pos[1])) - radius


# ---------------------------------------------------------------------------
# vectorised evaluation

@nb.njit(cache=True)
def _build_table(params, active, s, out):
    for i in range(params.shape[0]):
        if not active[i]:
            out[i, :] = np.nan
            continue
        ux = np.float64(params[i, UX])
        uy = np.float64(params[i, UY])
        a = np.float64(params[i, ANISO])
        ea = math.exp(a)
        eia = math.exp(-a)
        vx = -uy
        vy = ux
        out[i, T_X] = params[i, X]
        out[i, T_Y] = params[i, Y]
        out[i, T_G00] = ea * ux * ux + eia * vx * vx
        out[i, T_G01] = ea * ux * uy + eia * vx * vy
        out[i, T_G11] = ea * uy * uy + eia * vy * vy
        out[i, T_TAU] = math.exp(np.float64(params[i, LOG_TAU]))
        out[i, T_R] = params[i, RADIUS]
        out[i, T_EA] = ea
        out[i, T_EIA] = eia
        out[i, T_UX] = ux
        out[i, T_UY] = uy


def site_table(store: SiteStore) -> np.ndarray:
    """Per-site derived quantities (metric entries, tau) in float64; inactive rows are NaN."""
    out = np.empty((store.capacity, T_COLS), dtype=np.float64)
    _build_table(store.params, store.active, store.scale, out)
    return out


@nb.njit(cache=True, inline="always")
def _logit_at(table, i, px, py, s):
    dx = px - table[i, T_X]
    dy = py - table[i, T_Y]
    q = table[i, T_G00] * dx * dx + 2.0 * table[i, T_G01] * dx * dy + table[i, T_G11] * dy * dy
    n = math.sqrt(max(q, 0.0))
    dm = n * s - table[i, T_R] * s
    return -table[i, T_TAU] * dm


@nb.njit(cache=True, inline="always")
def _dmix_at(table, i, px, py, s):
    dx = px - table[i, T_X]
    dy = py - table[i, T_Y]
    q = table[i, T_G00] * dx * dx + 2.0 * table[i, T_G01] * dx * dy + table[i, T_G11] * dy * dy
    n = math.sqrt(max(q, 0.0))
    return n * s - table[i, T_R] * s


@nb.njit(cache=True)
def _hard_owner_kernel(table, ids, points, s, out):
    for p in range(points.shape[0]):
        best = np.inf
        best_id = -1
        for j in range(ids.shape[0]):
            i = ids[j]
            d = _dmix_at(table, i, points[p, 0], points[p, 1], s)
            if d < best or (d == best and i < best_id):
                best = d
                best_id = i
        out[p] = best_id


def hard_owner(x, store: SiteStore, table=None) -> int:
    """ID of the active site minimising ``d_mix`` at ``x`` (ties: lowest ID)."""
    return int(hard_owner_many(np.asarray(x, dtype=np.float64)[None, :], store, table)[0])


def hard_owner_many(points, store: SiteStore, table=None) -> np.ndarray:
    ids = store.active_ids()
    if len(ids) == 0:
        raise EmptyModelError("no active sites")
    if table is None:
        table = site_table(store)
    points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 2)
    out = np.empty(len(points), dtype=np.int64)
    _hard_owner_kernel(table, ids, points, store.scale, out)
    return out


def hard_owner_map(store: SiteStore) -> np.ndarray:
    """Exhaustive ownership image ``(H, W)``; the brute-force diagram."""
    ys, xs = np.mgrid[0:store.height, 0:store.width]
    pts = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    return hard_owner_many(pts, store).reshape(store.height, store.width)


def logits_for(store: SiteStore, points, ids) -> np.ndarray:
    """Logits of ``ids[j]`` at ``points[j]``; invalid or inactive IDs give -inf."""
    table = site_table(store)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    ids = np.asarray(ids).reshape(len(points), -1).astype(np.int64)
    out = np.empty(ids.shape)
    _logits_kernel(table, store.active, ids, points, store.scale, out)
    return out


@nb.njit(cache=True)
def _logits_kernel(table, active, ids, points, s, out):
    for p in range(ids.shape[0]):
        for j in range(ids.shape[1]):
            i = ids[p, j]
            if i < 0 or i == INVALID_ID or i >= active.shape[0] or not active[i]:
                out[p, j] = -np.inf
            else:
                out[p, j] = _logit_at(table, i, points[p, 0], points[p, 1], s)


def nearest_color_image(store: SiteStore) -> np.ndarray:
    """Hard-Voronoi rendering: each pixel takes its owner's colour."""
    owners = hard_owner_map(store)
    return store.params[owners, CR:CR + 3].astype(np.float64)
