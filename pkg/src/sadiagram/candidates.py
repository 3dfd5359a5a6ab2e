"""Per-pixel top-K candidate maintenance.

A candidate field is refreshed by jump flooding from seeds, then kept current
with cheap step-1 passes that reuse the previous lists (temporal reuse), merge
the lists of the four axis neighbours at the current step (spatial
propagation) and add a few uniformly drawn site IDs (stochastic injection).
All passes read one buffer and write another; each pixel owns its own
xorshift stream, so the pixel processing order never matters.
"""

from __future__ import annotations

import logging
import math
from pathlib import Path
from typing import Optional

import numba as nb
import numpy as np

from .core import INVALID_ID, CandidateField, InvalidInputError, SiteStore
from .score import _logit_at, site_table

logger = logging.getLogger(__name__)

STENCIL_CROSS = 0   # self + 4 neighbours
STENCIL_BOX = 1     # 3x3 neighbourhood (flood events)

_M32 = 0xFFFFFFFF


def jump_bound(width: int, height: int) -> int:
    """Smallest power of two >= max(width, height), at least 2."""
    m = max(int(width), int(height), 2)
    return 1 << (m - 1).bit_length()


def flood_event_count(width: int, height: int) -> int:
    m = max(int(width), int(height))
    return max(1, math.ceil(math.log2(m))) if m > 1 else 1


def jump_step(t: int, b: int) -> int:
    """Jump distance of refresh event ``t``: B/2, B/4, ..., 1, then 1 forever."""
    if t < 0:
        raise InvalidInputError("step index must be non-negative")
    if b < 2 or b & (b - 1):
        raise InvalidInputError(f"jump bound must be a power of two >= 2, got {b}")
    log_b = b.bit_length() - 1
    return max(1, b // (1 << (min(t, log_b - 1) + 1)))


# ---------------------------------------------------------------------------
# integer hashing, identical to core.mix32 / RngState

@nb.njit(cache=True, inline="always")
def _mul32(x, c):
    lo = x * (c & 0xFFFF)
    hi = ((x * (c >> 16)) & 0xFFFF) << 16
    return (lo + hi) & _M32


@nb.njit(cache=True, inline="always")
def _mix32(x):
    x &= _M32
    x ^= x >> 16
    x = _mul32(x, 0x7FEB352D)
    x ^= x >> 15
    x = _mul32(x, 0x846CA68B)
    x ^= x >> 16
    return x


@nb.njit(cache=True, inline="always")
def _xorshift(x):
    x ^= (x << 13) & _M32
    x ^= x >> 17
    x ^= (x << 5) & _M32
    return x


@nb.njit(cache=True, inline="always")
def _seed_state(seed, step, pixel):
    s = _mix32(_mix32(_mix32(seed & _M32) ^ (step & _M32)) ^ (pixel & _M32))
    if s == 0:
        s = 2463534242
    return s


# ---------------------------------------------------------------------------
# sorted fixed-size insertion

@nb.njit(cache=True, inline="always")
def _insert(best_ids, best_l, count, k, i, l):
    """Insert (i, l) keeping descending logit / ascending ID order. Returns new count."""
    for j in range(count):
        if best_ids[j] == i:
            return count
    if count == k:
        lw = best_l[k - 1]
        if l < lw or (l == lw and i > best_ids[k - 1]):
            return count
        pos = k - 1
    else:
        pos = count
        count += 1
    while pos > 0:
        lp = best_l[pos - 1]
        if lp > l or (lp == l and best_ids[pos - 1] < i):
            break
        best_l[pos] = lp
        best_ids[pos] = best_ids[pos - 1]
        pos -= 1
    best_l[pos] = l
    best_ids[pos] = i
    return count


@nb.njit(cache=True, inline="always")
def _sample_point(cx, cy, grid, width, height):
    if grid == 1:
        return float(cx), float(cy)
    px = min((cx + 0.5) * grid - 0.5, width - 1.0)
    py = min((cy + 0.5) * grid - 0.5, height - 1.0)
    return px, py


@nb.njit(cache=True, inline="always")
def _consider(table, active, best_ids, best_l, count, k, i, px, py, s):
    if i == INVALID_ID or i >= active.shape[0] or not active[i]:
        return count
    l = _logit_at(table, i, px, py, s)
    if not (l == l):
        return count
    return _insert(best_ids, best_l, count, k, i, l)


@nb.njit(cache=True, inline="always")
def _consider_once(table, active, stamp, cell, best_ids, best_l, count, k, i, px, py, s):
    """Like ``_consider`` but each ID is scored at most once per cell (``stamp``)."""
    if i == INVALID_ID or i >= active.shape[0] or not active[i]:
        return count
    if stamp[i] == cell:
        return count
    stamp[i] = cell
    l = _logit_at(table, i, px, py, s)
    if not (l == l):
        return count
    if count == k:
        lw = best_l[k - 1]
        if l < lw or (l == lw and i > best_ids[k - 1]):
            return count
        pos = k - 1
    else:
        pos = count
        count += 1
    while pos > 0:
        lp = best_l[pos - 1]
        if lp > l or (lp == l and best_ids[pos - 1] < i):
            break
        best_l[pos] = lp
        best_ids[pos] = best_ids[pos - 1]
        pos -= 1
    best_l[pos] = l
    best_ids[pos] = i
    return count


@nb.njit(cache=True, parallel=True)
def _propagate_kernel(table, active, act_ids, prev, out, step, stencil, n_inject,
                      seed, step_index, s, grid, width, height):
    gh, gw, k = prev.shape
    n_act = act_ids.shape[0]
    n_chunks = min(gh, 64)
    rows_per = (gh + n_chunks - 1) // n_chunks
    for chunk in nb.prange(n_chunks):
        best_ids = np.empty(k, dtype=np.int64)
        best_l = np.empty(k, dtype=np.float64)
        stamp = np.full(active.shape[0], -1, dtype=np.int64)
        for cy in range(chunk * rows_per, min((chunk + 1) * rows_per, gh)):
            for cx in range(gw):
                cell = cy * gw + cx
                px, py = _sample_point(cx, cy, grid, width, height)
                count = 0
                for j in range(k):
                    count = _consider_once(table, active, stamp, cell, best_ids, best_l, count,
                                           k, np.int64(prev[cy, cx, j]), px, py, s)
                for oy in range(-1, 2):
                    for ox in range(-1, 2):
                        if ox == 0 and oy == 0:
                            continue
                        if stencil == 0 and ox != 0 and oy != 0:
                            continue
                        ny = cy + oy * step
                        nx = cx + ox * step
                        if ny < 0 or ny >= gh or nx < 0 or nx >= gw:
                            continue
                        for j in range(k):
                            count = _consider_once(table, active, stamp, cell, best_ids, best_l,
                                                   count, k, np.int64(prev[ny, nx, j]), px, py, s)
                if n_inject > 0 and n_act > 0:
                    state = _seed_state(seed, step_index, cell)
                    for _ in range(n_inject):
                        state = _xorshift(state)
                        pick = (state * n_act) >> 32
                        count = _consider_once(table, active, stamp, cell, best_ids, best_l,
                                               count, k, act_ids[pick], px, py, s)
                for j in range(count):
                    out[cy, cx, j] = best_ids[j]
                for j in range(count, k):
                    out[cy, cx, j] = INVALID_ID


@nb.njit(cache=True)
def _seed_kernel(table, active, ids, field_ids, s, grid, width, height):
    gh, gw, k = field_ids.shape
    best_ids = np.empty(k, dtype=np.int64)
    best_l = np.empty(k, dtype=np.float64)
    for j in range(ids.shape[0]):
        i = ids[j]
        px = min(max(math.floor(table[i, 0] + 0.5), 0.0), width - 1.0)
        py = min(max(math.floor(table[i, 1] + 0.5), 0.0), height - 1.0)
        cx = int(px) // grid
        cy = int(py) // grid
        sx, sy = _sample_point(cx, cy, grid, width, height)
        count = 0
        for jj in range(k):
            cur = field_ids[cy, cx, jj]
            if cur == INVALID_ID:
                break
            best_ids[count] = cur
            best_l[count] = _logit_at(table, np.int64(cur), sx, sy, s)
            count += 1
        count = _insert(best_ids, best_l, count, k, i, _logit_at(table, i, sx, sy, s))
        for jj in range(count):
            field_ids[cy, cx, jj] = best_ids[jj]


@nb.njit(cache=True, parallel=True)
def _inherit_kernel(table, active, sibling, field_ids, s, grid, width, height):
    gh, gw, k = field_ids.shape
    for cy in nb.prange(gh):
        pool = np.empty(2 * k, dtype=np.int64)
        best_ids = np.empty(k, dtype=np.int64)
        best_l = np.empty(k, dtype=np.float64)
        for cx in range(gw):
            n = 0
            hit = False
            for j in range(k):
                i = np.int64(field_ids[cy, cx, j])
                if i == INVALID_ID:
                    continue
                pool[n] = i
                n += 1
                if i < sibling.shape[0] and sibling[i] >= 0:
                    pool[n] = sibling[i]
                    n += 1
                    hit = True
            if not hit:
                continue
            px, py = _sample_point(cx, cy, grid, width, height)
            count = 0
            for j in range(n):
                i = pool[j]
                dup = False
                for jj in range(count):
                    if best_ids[jj] == i:
                        dup = True
                        break
                if not dup:
                    count = _consider(table, active, best_ids, best_l, count, k, i, px, py, s)
            for j in range(count):
                field_ids[cy, cx, j] = best_ids[j]
            for j in range(count, k):
                field_ids[cy, cx, j] = INVALID_ID


def _check(store: SiteStore, field: CandidateField) -> None:
    if (store.width, store.height) != (field.width, field.height):
        raise InvalidInputError(
            f"field is {field.width}x{field.height} but sites describe a "
            f"{store.width}x{store.height} image")


def jfa_seed(store: SiteStore, field: CandidateField, table=None) -> None:
    """Clear ``field`` and write every active site into the cell nearest its position."""
    _check(store, field)
    field.ids[...] = INVALID_ID
    ids = store.active_ids()
    if len(ids) == 0:
        return
    if table is None:
        table = site_table(store)
    _seed_kernel(table, store.active, ids, field.ids, store.scale, field.grid,
                 field.width, field.height)


def seed_sites(store: SiteStore, field: CandidateField, ids, table=None) -> None:
    """Merge ``ids`` into the lists of the cells containing them, keeping everything else."""
    ids = np.asarray(ids, dtype=np.int64)
    if len(ids) == 0:
        return
    if table is None:
        table = site_table(store)
    _seed_kernel(table, store.active, ids, field.ids, store.scale, field.grid,
                 field.width, field.height)


def inherit(store: SiteStore, field: CandidateField, parents, children, table=None) -> None:
    """After a split, add each child to every list that holds its parent, then re-rank.

    ``parents[j]`` and ``children[j]`` are paired; all lists are rescored with the
    current site parameters since the parent slot itself may have moved.
    """
    _check(store, field)
    parents = np.asarray(parents, dtype=np.int64)
    children = np.asarray(children, dtype=np.int64)
    if len(parents) == 0:
        return
    sibling = np.full(store.capacity, -1, dtype=np.int64)
    sibling[parents] = children
    if table is None:
        table = site_table(store)
    _inherit_kernel(table, store.active, sibling, field.ids, store.scale, field.grid,
                    field.width, field.height)


def propagate_pass(store: SiteStore, field_prev: CandidateField, step: int, inject: int = 4,
                   seed: int = 0, stencil: int = STENCIL_CROSS, table=None,
                   act_ids=None) -> CandidateField:
    """One double-buffered propagation pass; returns a new field.

    The injection stream of each cell is seeded from ``(seed, field_prev.passes,
    cell index)``.
    """
    _check(store, field_prev)
    if step < 1:
        raise InvalidInputError("step must be >= 1")
    if inject < 0:
        raise InvalidInputError("inject count must be >= 0")
    if table is None:
        table = site_table(store)
    if act_ids is None:
        act_ids = store.active_ids()
    out = CandidateField(field_prev.width, field_prev.height, field_prev.k, field_prev.grid)
    _propagate_kernel(table, store.active, act_ids, field_prev.ids, out.ids, int(step),
                      int(stencil), int(inject), int(seed) & _M32, field_prev.passes & _M32,
                      store.scale, field_prev.grid, field_prev.width, field_prev.height)
    out.generation = field_prev.generation
    out.passes = field_prev.passes + 1
    return out


def refresh(store: SiteStore, field: CandidateField, mode: str = "warm_start", passes: int = 1,
            inject: int = 4, seed: int = 0) -> CandidateField:
    """Bring ``field`` up to date with ``store``.

    ``full`` seeds, runs one flood event per level of the jump schedule with a
    3x3 stencil, then ``passes`` step-1 cross passes. ``warm_start`` only runs
    the step-1 passes on the existing lists. The returned field replaces the
    argument (double buffering) and carries an incremented generation.
    """
    _check(store, field)
    table = site_table(store)
    act_ids = store.active_ids()
    if mode == "full":
        cur = CandidateField(field.width, field.height, field.k, field.grid)
        cur.passes = field.passes
        jfa_seed(store, cur, table)
        gh, gw = cur.grid_shape
        b = jump_bound(gw, gh)
        for t in range(flood_event_count(gw, gh)):
            cur = propagate_pass(store, cur, jump_step(t, b), inject, seed, STENCIL_BOX,
                                 table, act_ids)
    elif mode == "warm_start":
        cur = field
    else:
        raise InvalidInputError(f"unknown refresh mode {mode!r}")
    for _ in range(passes):
        cur = propagate_pass(store, cur, 1, inject, seed, STENCIL_CROSS, table, act_ids)
    cur.generation = field.generation + 1
    return cur


def scheduled_passes(store: SiteStore, field: CandidateField, passes: int, inject: int = 4,
                     seed: int = 0) -> CandidateField:
    """Seed, then ``passes`` cross passes whose steps follow the jump schedule.

    Pass ``t`` uses ``jump_step(t, B)``, so the first ``log2(B)`` passes are the
    long-range warm-up and the rest are step-1 refinements.
    """
    _check(store, field)
    table = site_table(store)
    act_ids = store.active_ids()
    cur = CandidateField(field.width, field.height, field.k, field.grid)
    cur.passes = field.passes
    jfa_seed(store, cur, table)
    gh, gw = cur.grid_shape
    b = jump_bound(gw, gh)
    for t in range(passes):
        cur = propagate_pass(store, cur, jump_step(t, b), inject, seed, STENCIL_CROSS,
                             table, act_ids)
    cur.generation = field.generation + 1
    return cur


# ---------------------------------------------------------------------------
# exhaustive oracle

@nb.njit(cache=True)
def _all_logits(table, ids, px, py, s, out):
    for j in range(ids.shape[0]):
        out[j] = _logit_at(table, ids[j], px, py, s)


def exact_topk(x, store: SiteStore, k: int, table=None) -> np.ndarray:
    """Exhaustive top-``k`` active IDs at ``x`` by logit (ties: ascending ID)."""
    if k < 1:
        raise InvalidInputError("k must be >= 1")
    ids = store.active_ids()
    if table is None:
        table = site_table(store)
    logits = np.empty(len(ids))
    _all_logits(table, ids, float(x[0]), float(x[1]), store.scale, logits)
    order = np.lexsort((ids, -logits))
    return ids[order[:k]]


def exact_match_rate(store: SiteStore, field: CandidateField, cells) -> float:
    """Fraction of ``cells`` (``(cx, cy)`` pairs) whose list equals the exact top-k as a set."""
    table = site_table(store)
    hits = 0
    for cx, cy in cells:
        px, py = _sample_point(int(cx), int(cy), field.grid, field.width, field.height)
        truth = exact_topk((px, py), store, field.k, table)
        got = field.ids[cy, cx]
        got = got[got != INVALID_ID].astype(np.int64)
        hits += int(set(got.tolist()) == set(truth.tolist()))
    return hits / max(len(cells), 1)


def match_mask(store: SiteStore, field: CandidateField, cells=None) -> np.ndarray:
    """8-bit image, 255 where the cell's list matches the exact oracle as a set."""
    gh, gw = field.grid_shape
    if cells is None:
        cells = [(cx, cy) for cy in range(gh) for cx in range(gw)]
    table = site_table(store)
    mask = np.zeros((gh, gw), dtype=np.uint8)
    for cx, cy in cells:
        px, py = _sample_point(int(cx), int(cy), field.grid, field.width, field.height)
        truth = exact_topk((px, py), store, field.k, table)
        got = field.ids[cy, cx]
        got = got[got != INVALID_ID].astype(np.int64)
        if set(got.tolist()) == set(truth.tolist()):
            mask[cy, cx] = 255
    return mask


def write_debug_dump(field: CandidateField, directory, mask: Optional[np.ndarray] = None) -> None:
    """Write ``candidates.u32`` (raw little-endian IDs) and optionally ``match.png``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "candidates.u32").write_bytes(field.dump())
    if mask is not None:
        from .imageio import write_gray
        write_gray(directory / "match.png", mask)
