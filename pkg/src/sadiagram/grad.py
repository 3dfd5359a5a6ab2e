"""Analytic gradients of the rendering, tiled reduction and removal deltas.

Per pixel, with logits ``l_i = -tau_i (|x - p_i|_G s - r_i s)``, softmax weights
``w_i`` and colour ``c = sum_i w_i c_i``, an upstream gradient ``g = dL/dc``
gives

    dL/dc_i  = w_i g
    dL/dl_i  = w_i (c_i - c) . g
    dl/dlogtau = l,   dl/dr = tau s,   dl/dn = -tau s   (n = |x - p|_G)

and ``n = sqrt(q)`` with ``q = e^a (d.u)^2 + e^-a (d.v)^2``, ``d = x - p``,
``v = (-u_y, u_x)``, differentiated with respect to the raw direction vector.
Candidate lists are constants of the differentiation.

Per-pixel contributions are reduced tile by tile through a bounded open-address
table keyed by site ID; entries that cannot be placed within the probe cap go
straight to the global buffer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba as nb
import numpy as np

from .core import (ANISO, CR, INVALID_ID, LOG_TAU, N_ACCUM, RADIUS, REMOVAL, UX, X,
                   CandidateField, ImageBuffer, InvalidInputError, SiteStore)
from .score import (T_EA, T_EIA, T_G00, T_G01, T_G11, T_R, T_TAU, T_UX, T_UY, T_X, T_Y,
                    site_table)

TILE = 16
HASH_SLOTS = 256
MAX_PROBES = 8
HASH_MULT = 2654435761
GRAD_QUANT_SCALE = 1e6  # integer-atomic backends only; unused here
OVERFLOW_QUEUE = 128  # per-tile queue for probe-cap misses in the fused path
SOLE_OWNER_DELTA = 3.0  # max squared colour error of one pixel

_M32 = 0xFFFFFFFF


@dataclass
class GradBuffer:
    """Per-site accumulators; columns follow the parameter layout plus removal delta."""

    data: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "GradBuffer":
        return cls(np.zeros((n, N_ACCUM)))

    @property
    def params(self) -> np.ndarray:
        return self.data[:, :REMOVAL]

    @property
    def pos(self):
        return self.data[:, X:X + 2]

    @property
    def log_tau(self):
        return self.data[:, LOG_TAU]

    @property
    def radius(self):
        return self.data[:, RADIUS]

    @property
    def color(self):
        return self.data[:, CR:CR + 3]

    @property
    def dir(self):
        return self.data[:, UX:UX + 2]

    @property
    def aniso(self):
        return self.data[:, ANISO]

    @property
    def removal_delta(self):
        return self.data[:, REMOVAL]


# ---------------------------------------------------------------------------
# per-pixel kernels

@nb.njit(cache=True, inline="always")
def _finite(v):
    return v == v and v != np.inf and v != -np.inf


@nb.njit(cache=True)
def _removal_delta(j, n, ids, lg, ex, total, params, c0, c1, c2, t0, t1, t2, err_now):
    """Loss change at one pixel when candidate ``j`` is dropped and the rest renormalised."""
    if n == 1:
        return SOLE_OWNER_DELTA
    wj = ex[j] / total
    i = ids[j]
    if wj < 1.0 - 1e-6:
        inv = 1.0 / (1.0 - wj)
        r0 = (c0 - wj * params[i, CR]) * inv
        r1 = (c1 - wj * params[i, CR + 1]) * inv
        r2 = (c2 - wj * params[i, CR + 2]) * inv
    else:
        # others carry almost no weight: renormalise them from their own logits
        m = -np.inf
        for a in range(n):
            if a != j and lg[a] > m:
                m = lg[a]
        den = 0.0
        r0 = 0.0
        r1 = 0.0
        r2 = 0.0
        for a in range(n):
            if a == j:
                continue
            e = math.exp(lg[a] - m)
            den += e
            ia = ids[a]
            r0 += e * params[ia, CR]
            r1 += e * params[ia, CR + 1]
            r2 += e * params[ia, CR + 2]
        r0 /= den
        r1 /= den
        r2 /= den
    e0 = r0 - t0
    e1 = r1 - t1
    e2 = r2 - t2
    return e0 * e0 + e1 * e1 + e2 * e2 - err_now


@nb.njit(cache=True, inline="always")
def _pixel_contrib(table, params, active, cand, grid, s, upstream, target, mse_scale,
                   want_removal, x, y, lg, ex, ids, vals, rgb):
    """Gradient contributions of pixel ``(x, y)`` into ``vals[:n]`` / ``ids[:n]``.

    Returns ``(n, err)``: the number of valid candidates and the pixel's squared
    error (0 when driven by an explicit upstream gradient). With ``mse_scale``
    > 0 the upstream gradient is ``mse_scale * (c - target)``; otherwise
    ``upstream`` is used.
    """
    k = cand.shape[2]
    nc = vals.shape[1]
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
        dm = nrm * s - table[i, T_R] * s
        ids[n] = i
        lg[n] = -table[i, T_TAU] * dm
        n += 1
    for j in range(k):
        for c in range(nc):
            vals[j, c] = 0.0
    rgb[0] = 0.0
    rgb[1] = 0.0
    rgb[2] = 0.0
    if n == 0:
        return 0, 0.0
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
    rgb[0] = c0
    rgb[1] = c1
    rgb[2] = c2
    t0 = 0.0
    t1 = 0.0
    t2 = 0.0
    err_now = 0.0
    if mse_scale > 0.0:
        t0 = target[y, x, 0]
        t1 = target[y, x, 1]
        t2 = target[y, x, 2]
        e0 = c0 - t0
        e1 = c1 - t1
        e2 = c2 - t2
        err_now = e0 * e0 + e1 * e1 + e2 * e2
        g0 = mse_scale * e0
        g1 = mse_scale * e1
        g2 = mse_scale * e2
    else:
        g0 = upstream[y, x, 0]
        g1 = upstream[y, x, 1]
        g2 = upstream[y, x, 2]
    for j in range(n):
        i = ids[j]
        wj = ex[j] / total
        el = wj * ((params[i, CR] - c0) * g0 + (params[i, CR + 1] - c1) * g1
                   + (params[i, CR + 2] - c2) * g2)
        tau = table[i, T_TAU]
        dx = px - table[i, T_X]
        dy = py - table[i, T_Y]
        ea = table[i, T_EA]
        eia = table[i, T_EIA]
        ux = table[i, T_UX]
        uy = table[i, T_UY]
        al = dx * ux + dy * uy
        be = -dx * uy + dy * ux
        q = table[i, T_G00] * dx * dx + 2.0 * table[i, T_G01] * dx * dy \
            + table[i, T_G11] * dy * dy
        nrm = math.sqrt(max(q, 0.0))
        dn = -el * tau * s
        vals[j, CR] = wj * g0
        vals[j, CR + 1] = wj * g1
        vals[j, CR + 2] = wj * g2
        vals[j, LOG_TAU] = el * lg[j]
        vals[j, RADIUS] = el * tau * s
        if nrm > 0.0:
            dq = dn / (2.0 * nrm)
            gdx = table[i, T_G00] * dx + table[i, T_G01] * dy
            gdy = table[i, T_G01] * dx + table[i, T_G11] * dy
            vals[j, X] = -2.0 * dq * gdx
            vals[j, X + 1] = -2.0 * dq * gdy
            vals[j, UX] = dq * (2.0 * ea * al * dx + 2.0 * eia * be * dy)
            vals[j, UX + 1] = dq * (2.0 * ea * al * dy - 2.0 * eia * be * dx)
            vals[j, ANISO] = dq * (ea * al * al - eia * be * be)
        if want_removal and mse_scale > 0.0 and nc > REMOVAL:
            vals[j, REMOVAL] = _removal_delta(j, n, ids, lg, ex, total, params,
                                              c0, c1, c2, t0, t1, t2, err_now)
        for c in range(nc):
            if not _finite(vals[j, c]):
                vals[j, c] = 0.0
    return n, err_now


@nb.njit(cache=True, parallel=True)
def _contrib_kernel(table, params, active, cand, grid, s, upstream, target, mse_scale,
                    want_removal, ids_out, contrib_out, color_out, row_loss, empty):
    """Per (pixel, slot) gradient contributions, materialised for every pixel."""
    h, w = color_out.shape[0], color_out.shape[1]
    k = cand.shape[2]
    nc = contrib_out.shape[2]
    for y in nb.prange(h):
        lg = np.empty(k)
        ex = np.empty(k)
        ids = np.empty(k, dtype=np.int64)
        vals = np.empty((k, nc))
        rgb = np.empty(3)
        loss_acc = 0.0
        for x in range(w):
            p = y * w + x
            n, err = _pixel_contrib(table, params, active, cand, grid, s, upstream, target,
                                    mse_scale, want_removal, x, y, lg, ex, ids, vals, rgb)
            if n == 0:
                empty[y] = x
            loss_acc += err
            for j in range(k):
                ids_out[p, j] = ids[j] if j < n else -1
                for c in range(nc):
                    contrib_out[p, j, c] = vals[j, c]
            for c in range(3):
                color_out[y, x, c] = rgb[c]
        row_loss[y] = loss_acc


@nb.njit(cache=True, parallel=True)
def _fused_kernel(table, params, active, cand, grid, s, upstream, target, mse_scale,
                  width, height, tile, tile_keys, tile_acc, ovf_ids, ovf_vals, ovf_count,
                  tile_loss, empty):
    """Contributions reduced straight into per-tile hash tables (no per-pixel buffer).

    Entries that miss the probe cap are queued per tile in arrival order and
    applied before that tile's flush, which is the same addition sequence as
    :func:`accumulate_tiled`. A full queue sets its count to -1.
    """
    k = cand.shape[2]
    nc = tile_acc.shape[2]
    tiles_x = (width + tile - 1) // tile
    n_tiles = tile_keys.shape[0]
    for t in nb.prange(n_tiles):
        ty = (t // tiles_x) * tile
        tx = (t % tiles_x) * tile
        lg = np.empty(k)
        ex = np.empty(k)
        ids = np.empty(k, dtype=np.int64)
        vals = np.empty((k, nc))
        rgb = np.empty(3)
        keys = tile_keys[t]
        acc = tile_acc[t]
        keys[:] = -1
        acc[:, :] = 0.0
        loss_acc = 0.0
        for y in range(ty, min(ty + tile, height)):
            for x in range(tx, min(tx + tile, width)):
                n, err = _pixel_contrib(table, params, active, cand, grid, s, upstream, target,
                                        mse_scale, False, x, y, lg, ex, ids, vals, rgb)
                if n == 0:
                    empty[t] = y * width + x
                loss_acc += err
                for j in range(n):
                    i = ids[j]
                    h0 = _hash_slot(i)
                    slot = -1
                    for probe in range(MAX_PROBES):
                        sl = (h0 + probe) & (HASH_SLOTS - 1)
                        if keys[sl] == i:
                            slot = sl
                            break
                        if keys[sl] == -1:
                            keys[sl] = i
                            slot = sl
                            break
                    if slot < 0:
                        o = ovf_count[t]
                        if o < 0 or o >= ovf_ids.shape[1]:
                            ovf_count[t] = -1
                        else:
                            ovf_ids[t, o] = i
                            for c in range(nc):
                                ovf_vals[t, o, c] = vals[j, c]
                            ovf_count[t] = o + 1
                    else:
                        for c in range(nc):
                            acc[slot, c] += vals[j, c]
        tile_loss[t] = loss_acc


@nb.njit(cache=True)
def _merge_tiles(tile_keys, tile_acc, ovf_ids, ovf_vals, ovf_count, out):
    for t in range(tile_keys.shape[0]):
        for o in range(ovf_count[t]):
            i = ovf_ids[t, o]
            for c in range(ovf_vals.shape[2]):
                out[i, c] += ovf_vals[t, o, c]
        for sl in range(HASH_SLOTS):
            i = tile_keys[t, sl]
            if i >= 0:
                for c in range(tile_acc.shape[2]):
                    out[i, c] += tile_acc[t, sl, c]


# ---------------------------------------------------------------------------
# tiled reduction

@nb.njit(cache=True, inline="always")
def _hash_slot(key):
    lo = key * (HASH_MULT & 0xFFFF)
    hi = ((key * (HASH_MULT >> 16)) & 0xFFFF) << 16
    return (((lo + hi) & _M32) >> 24) & (HASH_SLOTS - 1)


@nb.njit(cache=True)
def _tiled_float(ids, contrib, width, height, tile, out, stats):
    k = ids.shape[1]
    nc = contrib.shape[2]
    keys = np.empty(HASH_SLOTS, dtype=np.int64)
    acc = np.empty((HASH_SLOTS, nc))
    for ty in range(0, height, tile):
        for tx in range(0, width, tile):
            keys[:] = -1
            acc[:, :] = 0.0
            for y in range(ty, min(ty + tile, height)):
                for x in range(tx, min(tx + tile, width)):
                    p = y * width + x
                    for j in range(k):
                        i = ids[p, j]
                        if i < 0:
                            continue
                        h0 = _hash_slot(i)
                        slot = -1
                        for probe in range(MAX_PROBES):
                            sl = (h0 + probe) & (HASH_SLOTS - 1)
                            if keys[sl] == i:
                                slot = sl
                                break
                            if keys[sl] == -1:
                                keys[sl] = i
                                slot = sl
                                break
                        if slot < 0:
                            stats[1] += 1
                            for c in range(nc):
                                out[i, c] += contrib[p, j, c]
                        else:
                            for c in range(nc):
                                acc[slot, c] += contrib[p, j, c]
            for sl in range(HASH_SLOTS):
                i = keys[sl]
                if i >= 0:
                    stats[0] += 1
                    for c in range(nc):
                        out[i, c] += acc[sl, c]


# exact mode: fixed-point superaccumulator over the whole double range
_BIAS = 1126
_NLIMB = 70


@nb.njit(cache=True, inline="always")
def _sa_add(limbs, v):
    if v == 0.0 or not _finite(v):
        return
    m, e = math.frexp(v)
    mant = np.int64(m * 9007199254740992.0)  # 2**53, exact
    sign = 1
    if mant < 0:
        sign = -1
        mant = -mant
    bit = e - 53 + _BIAS
    j = bit >> 5
    off = bit & 31
    lo = (mant & ((np.int64(1) << (32 - off)) - 1)) << off
    rest = mant >> (32 - off)
    limbs[j] += sign * lo
    limbs[j + 1] += sign * (rest & _M32)
    limbs[j + 2] += sign * (rest >> 32)


@nb.njit(cache=True)
def _sa_to_float(limbs, terms, partials):
    nl = limbs.shape[0]
    for j in range(nl - 1):
        carry = limbs[j] >> 32
        limbs[j] -= carry << 32
        limbs[j + 1] += carry
    neg = limbs[nl - 1] < 0
    if neg:
        # two's-complement tail: convert the magnitude, then flip the sign
        for j in range(nl):
            limbs[j] = -limbs[j]
        for j in range(nl - 1):
            carry = limbs[j] >> 32
            limbs[j] -= carry << 32
            limbs[j + 1] += carry
    nt = 0
    for j in range(nl - 1, -1, -1):
        if limbs[j] != 0:
            terms[nt] = math.ldexp(float(limbs[j]), 32 * j - _BIAS)
            nt += 1
    # correctly rounded sum of exact terms (same algorithm as math.fsum)
    npart = 0
    for t in range(nt):
        xv = terms[t]
        i = 0
        for jj in range(npart):
            yv = partials[jj]
            if abs(xv) < abs(yv):
                xv, yv = yv, xv
            hi = xv + yv
            lo = yv - (hi - xv)
            if lo != 0.0:
                partials[i] = lo
                i += 1
            xv = hi
        partials[i] = xv
        npart = i + 1
    hi = 0.0
    if npart > 0:
        npart -= 1
        hi = partials[npart]
        lo = 0.0
        while npart > 0:
            xv = hi
            npart -= 1
            yv = partials[npart]
            hi = xv + yv
            yr = hi - xv
            lo = yv - yr
            if lo != 0.0:
                break
        if npart > 0 and ((lo < 0.0 and partials[npart - 1] < 0.0)
                          or (lo > 0.0 and partials[npart - 1] > 0.0)):
            yv = lo * 2.0
            xv = hi + yv
            yr = xv - hi
            if yv == yr:
                hi = xv
    return -hi if neg else hi


@nb.njit(cache=True)
def _tiled_exact(ids, contrib, width, height, tile, glob, stats):
    k = ids.shape[1]
    nc = contrib.shape[2]
    keys = np.empty(HASH_SLOTS, dtype=np.int64)
    acc = np.zeros((HASH_SLOTS, nc, _NLIMB), dtype=np.int64)
    for ty in range(0, height, tile):
        for tx in range(0, width, tile):
            keys[:] = -1
            for y in range(ty, min(ty + tile, height)):
                for x in range(tx, min(tx + tile, width)):
                    p = y * width + x
                    for j in range(k):
                        i = ids[p, j]
                        if i < 0:
                            continue
                        h0 = _hash_slot(i)
                        slot = -1
                        for probe in range(MAX_PROBES):
                            sl = (h0 + probe) & (HASH_SLOTS - 1)
                            if keys[sl] == i:
                                slot = sl
                                break
                            if keys[sl] == -1:
                                keys[sl] = i
                                acc[sl, :, :] = 0
                                slot = sl
                                break
                        if slot < 0:
                            stats[1] += 1
                            for c in range(nc):
                                _sa_add(glob[i, c], contrib[p, j, c])
                        else:
                            for c in range(nc):
                                _sa_add(acc[slot, c], contrib[p, j, c])
            for sl in range(HASH_SLOTS):
                i = keys[sl]
                if i >= 0:
                    stats[0] += 1
                    for c in range(nc):
                        for b in range(_NLIMB):
                            glob[i, c, b] += acc[sl, c, b]


@nb.njit(cache=True)
def _finish_exact(glob, out):
    terms = np.empty(_NLIMB)
    partials = np.empty(_NLIMB + 2)
    for i in range(glob.shape[0]):
        for c in range(glob.shape[1]):
            out[i, c] = _sa_to_float(glob[i, c], terms, partials)


def accumulate_tiled(ids, contrib, width: int, height: int, n_sites: int, tile: int = TILE,
                     mode: str = "ordered", return_stats: bool = False):
    """Reduce per-pixel contributions into per-site sums through per-tile hash tables.

    ``ids`` is ``(H*W, K)`` (negative = no contribution) and ``contrib`` is
    ``(H*W, K, C)``. ``ordered`` accumulates floats with tiles flushed in fixed
    raster order (reproducible run to run). ``exact`` carries every sum in a
    fixed-point superaccumulator and rounds once at the end, so the result is
    the correctly rounded sum regardless of grouping.
    """
    ids = np.ascontiguousarray(ids, dtype=np.int64).reshape(width * height, -1)
    contrib = np.ascontiguousarray(contrib, dtype=np.float64).reshape(ids.shape[0], ids.shape[1], -1)
    stats = np.zeros(2, dtype=np.int64)  # (table flushes, fallback writes)
    nc = contrib.shape[2]
    out = np.zeros((n_sites, nc))
    if mode == "ordered":
        _tiled_float(ids, contrib, width, height, tile, out, stats)
    elif mode == "exact":
        glob = np.zeros((n_sites, nc, _NLIMB), dtype=np.int64)
        _tiled_exact(ids, contrib, width, height, tile, glob, stats)
        _finish_exact(glob, out)
    else:
        raise InvalidInputError(f"unknown merge mode {mode!r}")
    if return_stats:
        return out, {"flushes": int(stats[0]), "fallbacks": int(stats[1])}
    return out


def accumulate_naive(ids, contrib, n_sites: int) -> np.ndarray:
    """Sequential per-pixel float summation in raster order (oracle)."""
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    contrib = np.asarray(contrib, dtype=np.float64).reshape(len(ids), -1)
    out = np.zeros((n_sites, contrib.shape[1]))
    mask = ids >= 0
    np.add.at(out, ids[mask], contrib[mask])
    return out


# ---------------------------------------------------------------------------
# public backward

def _prepare(store: SiteStore, field: CandidateField, upstream, target):
    if (store.width, store.height) != (field.width, field.height):
        raise InvalidInputError("candidate field and site store disagree on image size")
    h, w = field.height, field.width
    if target is not None:
        tpx = target.pixels if isinstance(target, ImageBuffer) else np.asarray(target, dtype=np.float64)
        if tpx.shape != (h, w, 3):
            raise InvalidInputError(f"target shape {tpx.shape} does not match {(h, w, 3)}")
        return np.zeros((1, 1, 3)), np.ascontiguousarray(tpx, dtype=np.float64), 2.0 / (h * w)
    if upstream is None:
        raise InvalidInputError("need a target image or an upstream gradient")
    up = np.ascontiguousarray(upstream, dtype=np.float64)
    if up.shape != (h, w, 3):
        raise InvalidInputError(f"upstream shape {up.shape} does not match {(h, w, 3)}")
    return up, np.zeros((1, 1, 3)), 0.0


def _contributions(store: SiteStore, field: CandidateField, upstream=None, target=None,
                   want_removal=False):
    """Materialised per-pixel contributions ``(ids, contrib, color, loss)``."""
    up, tpx, mse_scale = _prepare(store, field, upstream, target)
    h, w, k = field.height, field.width, field.k
    ids = np.empty((h * w, k), dtype=np.int64)
    contrib = np.empty((h * w, k, N_ACCUM))
    color = np.empty((h, w, 3))
    row_loss = np.zeros(h)
    empty = np.full(h, -1, dtype=np.int64)
    _contrib_kernel(site_table(store), store.params, store.active, field.ids, field.grid,
                    store.scale, up, tpx, mse_scale, bool(want_removal),
                    ids, contrib, color, row_loss, empty)
    loss = float(row_loss.sum()) / (h * w) if target is not None else None
    return ids, contrib, color, loss


_WORKSPACE: dict = {}


def _workspace(n_tiles: int):
    """Tile tables reused across calls (fresh pages are slow to fault in)."""
    ws = _WORKSPACE.get(n_tiles)
    if ws is None:
        _WORKSPACE.clear()
        ws = (np.empty((n_tiles, HASH_SLOTS), dtype=np.int64),
              np.empty((n_tiles, HASH_SLOTS, REMOVAL)),
              np.empty((n_tiles, OVERFLOW_QUEUE), dtype=np.int64),
              np.empty((n_tiles, OVERFLOW_QUEUE, REMOVAL)))
        _WORKSPACE[n_tiles] = ws
    return ws


def _fused(store: SiteStore, field: CandidateField, upstream, target, tile: int = TILE):
    """Per-site gradient sums via in-kernel tile tables; ``None`` if any tile overflowed."""
    up, tpx, mse_scale = _prepare(store, field, upstream, target)
    h, w = field.height, field.width
    n_tiles = ((w + tile - 1) // tile) * ((h + tile - 1) // tile)
    keys, acc, ovf_ids, ovf_vals = _workspace(n_tiles)
    ovf_count = np.zeros(n_tiles, dtype=np.int64)
    tile_loss = np.zeros(n_tiles)
    empty = np.full(n_tiles, -1, dtype=np.int64)
    _fused_kernel(site_table(store), store.params, store.active, field.ids, field.grid,
                  store.scale, up, tpx, mse_scale, w, h, tile, keys, acc, ovf_ids, ovf_vals,
                  ovf_count, tile_loss, empty)
    if (ovf_count < 0).any():
        return None
    out = np.zeros((store.capacity, N_ACCUM))
    _merge_tiles(keys, acc, ovf_ids, ovf_vals, ovf_count, out)
    loss = float(tile_loss.sum()) / (h * w) if target is not None else None
    return out, loss


def backward(store: SiteStore, field: CandidateField, target, want_removal: bool = True,
             mode: str = "ordered"):
    """MSE loss and its gradient with respect to every candidate site's parameters.

    Returns ``(GradBuffer, loss)``; the loss is the mean over pixels of the
    squared colour error, and gradients carry the matching ``2 / (H W)`` factor.
    The removal-delta column is filled only when ``want_removal`` is set.
    """
    res = None
    if mode == "ordered" and not want_removal:
        res = _fused(store, field, None, target)
    if res is None:
        ids, contrib, _, loss = _contributions(store, field, target=target,
                                               want_removal=want_removal)
        data = accumulate_tiled(ids, contrib, field.width, field.height, store.capacity,
                                mode=mode)
    else:
        data, loss = res
    data[~store.active] = 0.0
    return GradBuffer(data), loss


def backward_from_upstream(store: SiteStore, field: CandidateField, upstream,
                           mode: str = "ordered") -> GradBuffer:
    """Chain an arbitrary per-pixel ``dL/dc`` (shape ``(H, W, 3)``) back to the sites."""
    res = _fused(store, field, upstream, None) if mode == "ordered" else None
    if res is None:
        ids, contrib, _, _ = _contributions(store, field, upstream=upstream)
        data = accumulate_tiled(ids, contrib, field.width, field.height, store.capacity,
                                mode=mode)
    else:
        data = res[0]
    data[~store.active] = 0.0
    return GradBuffer(data)


def loss_only(store: SiteStore, field: CandidateField, target) -> float:
    from .render import render_array
    c = render_array(store, field)
    tpx = target.pixels if isinstance(target, ImageBuffer) else target
    return float(np.mean(np.sum((c - tpx) ** 2, axis=2)))


def removal_delta_pixel(rendered, target, w_k: float, c_k) -> float:
    """Closed-form loss change when a site with weight ``w_k`` is removed from a pixel."""
    if not 0.0 <= w_k:
        raise InvalidInputError("weight must be non-negative")
    if w_k >= 1.0 - 1e-6:
        return math.inf
    # dividing by 1 - w_k amplifies rounding by up to 1e6 near the cutoff, so
    # the arithmetic runs in extended precision where the platform has it
    ext = np.longdouble
    rendered = np.asarray(rendered, dtype=ext)
    target = np.asarray(target, dtype=ext)
    c_k = np.asarray(c_k, dtype=ext)
    w = ext(w_k)
    after = (rendered - w * c_k) / (ext(1) - w)
    return float(np.sum((after - target) ** 2) - np.sum((rendered - target) ** 2))
