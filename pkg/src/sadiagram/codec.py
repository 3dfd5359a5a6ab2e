"""128-bit packed sites, per-image quantisation ranges, the SADF container and BPP.

Word layout of one packed site (little-endian uint32 words):

    w0  bits 0-14 x code, 15-29 y code, 30 reserved, 31 active flag
    w1  bits 0-10 red, 11-21 green, 22-31 blue
    w2  bits 0-15 log_tau, 16-31 radius
    w3  bits 0-15 direction angle over [-pi, pi], 16-31 aniso as IEEE half

Container: ``b"SADF"``, u16 version, u16 width, u16 height, u32 site count,
u32 reserved (zero), ten float32 quantisation scalars, then the packed sites.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import (ANISO, CB, CR, LOG_TAU, N_PARAMS, RADIUS, UX, UY, X, Y, FramingError,
                   InvalidInputError, SiteStore)

MAGIC = b"SADF"
VERSION = 1
HEADER = struct.Struct("<4sHHHII")
SCALARS = struct.Struct("<10f")
HEADER_SIZE = HEADER.size + SCALARS.size  # 18 + 40
SITE_BYTES = 16
MIN_SCALE = 1e-6

POS_BITS = 15
COLOR_BITS = (11, 11, 10)
TAU_BITS = 16
RADIUS_BITS = 16
ANGLE_BITS = 16
ACTIVE_BIT = 31


@dataclass(frozen=True)
class QuantRanges:
    """Per-image ``min`` / ``scale`` pairs; every value is a float32."""

    log_tau_min: float
    log_tau_scale: float
    radius_min: float
    radius_scale: float
    color_min: tuple
    color_scale: tuple

    def as_tuple(self) -> tuple:
        return (self.log_tau_min, self.log_tau_scale, self.radius_min, self.radius_scale,
                *self.color_min, *self.color_scale)

    @classmethod
    def from_tuple(cls, v) -> "QuantRanges":
        v = [float(np.float32(x)) for x in v]
        return cls(v[0], v[1], v[2], v[3], tuple(v[4:7]), tuple(v[7:10]))


def _f32_range(lo: float, hi: float) -> tuple[float, float]:
    """float32 ``(min, scale)`` with ``min <= lo`` and ``min + scale >= hi``."""
    mn = np.float32(lo)
    if float(mn) > lo:
        mn = np.nextafter(mn, np.float32(-np.inf))
    sc = np.float32(max(hi - float(mn), MIN_SCALE))
    while float(mn) + float(sc) < hi:
        sc = np.nextafter(sc, np.float32(np.inf))
    return float(mn), float(sc)


def compute_ranges(store: SiteStore) -> QuantRanges:
    """Min and scale (max - min, floored at 1e-6) over the active sites."""
    ids = store.active_ids()
    if len(ids) == 0:
        return QuantRanges(0.0, 1.0, 0.0, 1.0, (0.0,) * 3, (1.0,) * 3)
    p = store.params[ids].astype(np.float64)
    lt = _f32_range(p[:, LOG_TAU].min(), p[:, LOG_TAU].max())
    rd = _f32_range(p[:, RADIUS].min(), p[:, RADIUS].max())
    cols = [_f32_range(p[:, c].min(), p[:, c].max()) for c in range(CR, CB + 1)]
    return QuantRanges(lt[0], lt[1], rd[0], rd[1], tuple(c[0] for c in cols),
                       tuple(c[1] for c in cols))


def unorm_encode(v, bits: int):
    """``round(clip(v, 0, 1) * (2^bits - 1))`` with halves rounded up."""
    top = (1 << bits) - 1
    return np.floor(np.clip(np.asarray(v, dtype=np.float64), 0.0, 1.0) * top + 0.5).astype(np.uint32)


def unorm_decode(code, bits: int):
    return np.asarray(code, dtype=np.float64) / ((1 << bits) - 1)


def _norm(v, mn, sc):
    return (np.asarray(v, dtype=np.float64) - mn) / sc


def _pos_extent(n: int) -> float:
    return float(max(n - 1, 1))


def pack_sites(params, active, ranges: QuantRanges, width: int, height: int) -> np.ndarray:
    """Pack rows of ``params`` into an ``(N, 4)`` uint32 array; inactive rows are all zero."""
    p = np.asarray(params, dtype=np.float64).reshape(-1, N_PARAMS)
    active = np.asarray(active, dtype=bool).reshape(-1)
    xs = unorm_encode(p[:, X] / _pos_extent(width), POS_BITS)
    ys = unorm_encode(p[:, Y] / _pos_extent(height), POS_BITS)
    w0 = xs | (ys << 15) | (np.uint32(1) << ACTIVE_BIT)
    r = unorm_encode(_norm(p[:, CR], ranges.color_min[0], ranges.color_scale[0]), COLOR_BITS[0])
    g = unorm_encode(_norm(p[:, CR + 1], ranges.color_min[1], ranges.color_scale[1]), COLOR_BITS[1])
    b = unorm_encode(_norm(p[:, CB], ranges.color_min[2], ranges.color_scale[2]), COLOR_BITS[2])
    w1 = r | (g << 11) | (b << 22)
    lt = unorm_encode(_norm(p[:, LOG_TAU], ranges.log_tau_min, ranges.log_tau_scale), TAU_BITS)
    rd = unorm_encode(_norm(p[:, RADIUS], ranges.radius_min, ranges.radius_scale), RADIUS_BITS)
    w2 = lt | (rd << 16)
    ang = np.arctan2(p[:, UY], p[:, UX])
    ac = unorm_encode((ang + math.pi) / (2.0 * math.pi), ANGLE_BITS)
    half = p[:, ANISO].astype(np.float16).view(np.uint16).astype(np.uint32)
    w3 = ac | (half << 16)
    words = np.stack([w0, w1, w2, w3], axis=1).astype(np.uint32)
    words[~active] = 0
    return words


def unpack_sites(words, ranges: QuantRanges, width: int, height: int):
    """Inverse of :func:`pack_sites`; returns ``(params, active)``."""
    words = np.asarray(words, dtype=np.uint32).reshape(-1, 4)
    w0, w1, w2, w3 = (words[:, i] for i in range(4))
    active = (w0 >> ACTIVE_BIT) & 1 == 1
    p = np.zeros((len(words), N_PARAMS))
    p[:, X] = unorm_decode(w0 & 0x7FFF, POS_BITS) * _pos_extent(width)
    p[:, Y] = unorm_decode((w0 >> 15) & 0x7FFF, POS_BITS) * _pos_extent(height)
    if width == 1:
        p[:, X] = 0.0
    if height == 1:
        p[:, Y] = 0.0
    fields = ((w1 & 0x7FF, 11), ((w1 >> 11) & 0x7FF, 11), (w1 >> 22, 10))
    for c, (code, bits) in enumerate(fields):
        p[:, CR + c] = ranges.color_min[c] + unorm_decode(code, bits) * ranges.color_scale[c]
    p[:, LOG_TAU] = ranges.log_tau_min + unorm_decode(w2 & 0xFFFF, TAU_BITS) * ranges.log_tau_scale
    p[:, RADIUS] = ranges.radius_min + unorm_decode(w2 >> 16, RADIUS_BITS) * ranges.radius_scale
    ang = unorm_decode(w3 & 0xFFFF, ANGLE_BITS) * (2.0 * math.pi) - math.pi
    p[:, UX] = np.cos(ang)
    p[:, UY] = np.sin(ang)
    p[:, ANISO] = (w3 >> 16).astype(np.uint16).view(np.float16).astype(np.float64)
    p[~active] = 0.0
    p[~active, X:Y + 1] = -1.0
    p[~active, UX] = 1.0
    return p, active


def pack_site(site_row, ranges: QuantRanges, width: int, height: int, active: bool = True):
    return pack_sites(np.asarray(site_row)[None, :], [active], ranges, width, height)[0]


def unpack_site(words, ranges: QuantRanges, width: int, height: int):
    p, a = unpack_sites(np.asarray(words)[None, :], ranges, width, height)
    return p[0], bool(a[0])


def half_lsb(ranges: QuantRanges, width: int, height: int) -> np.ndarray:
    """Per-parameter roundtrip bound (half a code step) in parameter units."""
    return np.array([
        0.5 * _pos_extent(width) / ((1 << POS_BITS) - 1),
        0.5 * _pos_extent(height) / ((1 << POS_BITS) - 1),
        0.5 * ranges.log_tau_scale / ((1 << TAU_BITS) - 1),
        0.5 * ranges.radius_scale / ((1 << RADIUS_BITS) - 1),
        0.5 * ranges.color_scale[0] / ((1 << COLOR_BITS[0]) - 1),
        0.5 * ranges.color_scale[1] / ((1 << COLOR_BITS[1]) - 1),
        0.5 * ranges.color_scale[2] / ((1 << COLOR_BITS[2]) - 1),
    ])


def bpp(count: int, width: int, height: int) -> float:
    """Parameter-space bits per pixel: 128 bits per site over the pixel count."""
    if width <= 0 or height <= 0:
        raise InvalidInputError("image dimensions must be positive")
    return count * SITE_BYTES * 8 / (width * height)


# ---------------------------------------------------------------------------
# container

@dataclass
class SadFile:
    width: int
    height: int
    ranges: QuantRanges
    words: np.ndarray  # (count, 4) uint32
    version: int = VERSION

    @property
    def count(self) -> int:
        return len(self.words)

    @classmethod
    def from_store(cls, store: SiteStore) -> "SadFile":
        if not (0 < store.width <= 0xFFFF and 0 < store.height <= 0xFFFF):
            raise InvalidInputError("image dimensions must fit in 16 bits")
        ranges = compute_ranges(store)
        ids = store.active_ids()
        words = pack_sites(store.params[ids], np.ones(len(ids), dtype=bool), ranges,
                           store.width, store.height)
        return cls(store.width, store.height, ranges, words)

    def to_store(self, capacity=None, dtype=np.float64) -> SiteStore:
        p, active = unpack_sites(self.words, self.ranges, self.width, self.height)
        store = SiteStore.from_params(p, self.width, self.height, capacity=capacity, dtype=dtype)
        store.active[:len(p)] = active
        return store

    def to_bytes(self) -> bytes:
        head = HEADER.pack(MAGIC, self.version, self.width, self.height, self.count, 0)
        body = np.ascontiguousarray(self.words, dtype="<u4").tobytes()
        return head + SCALARS.pack(*self.ranges.as_tuple()) + body

    @classmethod
    def from_bytes(cls, data: bytes) -> "SadFile":
        if len(data) < 4:
            raise FramingError(f"truncated file: {len(data)} bytes, magic needs 4", len(data))
        if data[:4] != MAGIC:
            raise FramingError(f"bad magic {data[:4]!r} at offset 0", 0)
        if len(data) < HEADER_SIZE:
            raise FramingError(f"truncated header at byte offset {len(data)} "
                               f"(need {HEADER_SIZE})", len(data))
        _, version, width, height, count, _reserved = HEADER.unpack_from(data, 0)
        if version != VERSION:
            raise FramingError(f"unsupported version {version} at offset 4", 4)
        expected = HEADER_SIZE + SITE_BYTES * count
        if len(data) != expected:
            raise FramingError(f"size mismatch: file ends at byte offset {len(data)}, header "
                               f"declares {count} sites ({expected} bytes)", len(data))
        ranges = QuantRanges.from_tuple(SCALARS.unpack_from(data, HEADER.size))
        words = np.frombuffer(data, dtype="<u4", offset=HEADER_SIZE).reshape(count, 4)
        return cls(width, height, ranges, words.astype(np.uint32), version)


def write_file(path, store: SiteStore) -> SadFile:
    sad = SadFile.from_store(store)
    Path(path).write_bytes(sad.to_bytes())
    return sad


def read_file(path) -> SadFile:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise InvalidInputError(f"cannot read {path}: {exc}") from exc
    return SadFile.from_bytes(data)


def quantize_store(store: SiteStore) -> SiteStore:
    """Roundtrip the active sites through the packed format, keeping slot IDs."""
    ranges = compute_ranges(store)
    out = store.copy()
    ids = store.active_ids()
    words = pack_sites(store.params[ids], np.ones(len(ids), dtype=bool), ranges,
                       store.width, store.height)
    p, _ = unpack_sites(words, ranges, store.width, store.height)
    out.params[ids] = p
    return out
