"""Forward rendering: softmax partition of unity over each pixel's candidates."""

from __future__ import annotations

import math

import numba as nb
import numpy as np

from .core import (CR, INVALID_ID, LOG_TAU, CandidateField, EmptyModelError, ImageBuffer,
                   InvalidInputError, SiteStore)
from .score import _logit_at, logit, site_table


def pixel_weights(x, ids, store: SiteStore) -> list[tuple[int, float]]:
    """Max-subtracted softmax weights of the valid IDs in ``ids`` at pixel ``x``."""
    valid = [int(i) for i in ids
             if int(i) != INVALID_ID and int(i) < store.capacity and store.active[int(i)]]
    if not valid:
        raise EmptyModelError(f"no valid candidates at pixel {tuple(x)}")
    s = store.scale
    logits = [logit(x, store.site(i), s) for i in valid]
    m = max(logits)
    e = [math.exp(l - m) for l in logits]
    total = 0.0
    for v in e:
        total += v
    return [(i, v / total) for i, v in zip(valid, e)]


@nb.njit(cache=True, parallel=True)
def _forward_kernel(table, params, active, cand, grid, s, color_out, id_out, tau_out, empty):
    h, w = color_out.shape[0], color_out.shape[1]
    k = cand.shape[2]
    for y in nb.prange(h):
        lg = np.empty(k)
        ids = np.empty(k, dtype=np.int64)
        for x in range(w):
            cy = y // grid
            cx = x // grid
            n = 0
            for j in range(k):
                i = np.int64(cand[cy, cx, j])
                if i == INVALID_ID or i >= active.shape[0] or not active[i]:
                    continue
                ids[n] = i
                lg[n] = _logit_at(table, i, float(x), float(y), s)
                n += 1
            if n == 0:
                empty[y] = x
                for c in range(3):
                    color_out[y, x, c] = 0.0
                id_out[y, x] = -1
                tau_out[y, x] = np.nan
                continue
            m = lg[0]
            best = 0
            for j in range(1, n):
                if lg[j] > m or (lg[j] == m and ids[j] < ids[best]):
                    m = lg[j]
                    best = j
            total = 0.0
            for j in range(n):
                lg[j] = math.exp(lg[j] - m)
                total += lg[j]
            r = 0.0
            g = 0.0
            b = 0.0
            t = 0.0
            for j in range(n):
                wj = lg[j] / total
                i = ids[j]
                r += wj * params[i, CR]
                g += wj * params[i, CR + 1]
                b += wj * params[i, CR + 2]
                t += wj * params[i, LOG_TAU]
            color_out[y, x, 0] = r
            color_out[y, x, 1] = g
            color_out[y, x, 2] = b
            id_out[y, x] = ids[best]
            tau_out[y, x] = t


def forward(store: SiteStore, field: CandidateField, strict: bool = True):
    """Return ``(rgb, id_map, tau_map)`` rendered from the candidate field.

    With ``strict`` an empty candidate list anywhere raises, naming the pixel.
    """
    if (store.width, store.height) != (field.width, field.height):
        raise InvalidInputError("candidate field and site store disagree on image size")
    h, w = field.height, field.width
    color = np.empty((h, w, 3))
    ids = np.empty((h, w), dtype=np.int64)
    tau = np.empty((h, w))
    empty = np.full(h, -1, dtype=np.int64)
    _forward_kernel(site_table(store), store.params, store.active, field.ids, field.grid,
                    store.scale, color, ids, tau, empty)
    if strict:
        rows = np.flatnonzero(empty >= 0)
        if len(rows):
            y = int(rows[0])
            raise EmptyModelError(f"pixel ({int(empty[y])}, {y}) has an empty candidate list")
    return color, ids, tau


def render_image(store: SiteStore, field: CandidateField) -> ImageBuffer:
    color, _, _ = forward(store, field)
    # convex blends of [0, 1] colours stay in range up to rounding
    assert color.min() >= -1e-9 and color.max() <= 1.0 + 1e-9
    return ImageBuffer(np.clip(color, 0.0, 1.0))


def render_array(store: SiteStore, field: CandidateField) -> np.ndarray:
    """Unclamped float64 ``(H, W, 3)`` rendering."""
    return forward(store, field)[0]


def render_id_map(store: SiteStore, field: CandidateField) -> np.ndarray:
    """Per pixel, the candidate with maximal logit (ties: lowest ID)."""
    return forward(store, field)[1]


def render_tau_map(store: SiteStore, field: CandidateField) -> np.ndarray:
    """Per pixel, the softmax-weighted mean ``log_tau`` of its candidates."""
    return forward(store, field)[2]


def boundary_map(id_map: np.ndarray) -> np.ndarray:
    """True where the 4-neighbourhood (including the pixel) holds >= 2 distinct IDs."""
    ids = np.asarray(id_map)
    b = np.zeros(ids.shape, dtype=bool)
    b[:, 1:] |= ids[:, 1:] != ids[:, :-1]
    b[:, :-1] |= ids[:, :-1] != ids[:, 1:]
    b[1:, :] |= ids[1:, :] != ids[:-1, :]
    b[:-1, :] |= ids[:-1, :] != ids[1:, :]
    return b


def render_reference(store: SiteStore, field: CandidateField) -> np.ndarray:
    """Scalar-loop renderer built on the scalar score functions; slow, for tests."""
    h, w = field.height, field.width
    out = np.empty((h, w, 3))
    cand = field.pixel_ids()
    s = store.scale
    sites = {}
    for y in range(h):
        for x in range(w):
            valid = [int(i) for i in cand[y, x]
                     if int(i) != INVALID_ID and store.active[int(i)]]
            if not valid:
                raise EmptyModelError(f"pixel ({x}, {y}) has an empty candidate list")
            logits = []
            for i in valid:
                if i not in sites:
                    sites[i] = store.site(i)
                logits.append(logit((float(x), float(y)), sites[i], s))
            m = max(logits)
            e = [math.exp(l - m) for l in logits]
            total = 0.0
            for v in e:
                total += v
            r = g = b = 0.0
            for i, v in zip(valid, e):
                wi = v / total
                c = sites[i].color
                r += wi * c[0]
                g += wi * c[1]
                b += wi * c[2]
            out[y, x] = (r, g, b)
    return out
