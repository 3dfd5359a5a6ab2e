"""Domain types shared by every module.

Site parameters live in one ``(capacity, 10)`` array whose columns follow the
packed semantic order ``x, y, log_tau, r, c_r, c_g, c_b, u_x, u_y, a``. Named
views (``store.pos``, ``store.color`` ...) are plain numpy slices, so numba
kernels can take the whole table while callers keep readable access.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

logger = logging.getLogger(__name__)

# column layout of SiteStore.params / GradBuffer.data
X, Y, LOG_TAU, RADIUS, CR, CG, CB, UX, UY, ANISO = range(10)
N_PARAMS = 10
REMOVAL = 10
N_ACCUM = 11

INVALID_ID = 0xFFFFFFFF
INACTIVE_POS = -1.0

LOG_TAU_RANGE = (2.0, 20.0)
RADIUS_RANGE = (1.0, 512.0)
ANISO_RANGE = (-2.0, 2.0)


class SadError(Exception):
    """Base class for library errors."""


class InvalidInputError(SadError, ValueError):
    pass


class EmptyModelError(SadError):
    """Raised when an operation needs at least one site but finds none."""


class FramingError(SadError):
    """Malformed container bytes."""

    def __init__(self, message: str, offset: Optional[int] = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


def normalization_scale(width: int, height: int) -> float:
    """Return ``1 / max(width, height)``, the resolution-invariance factor."""
    if width < 1 or height < 1:
        raise InvalidInputError(f"image dimensions must be positive, got {width}x{height}")
    return 1.0 / max(width, height)


@dataclass
class Site:
    """One adaptive primitive. Mostly used at API boundaries and in tests."""

    pos: tuple[float, float]
    log_tau: float
    radius: float
    color: tuple[float, float, float]
    dir: tuple[float, float] = (1.0, 0.0)
    aniso: float = 0.0

    def as_row(self) -> np.ndarray:
        return np.array(
            [*self.pos, self.log_tau, self.radius, *self.color, *self.dir, self.aniso],
            dtype=np.float64,
        )

    @classmethod
    def from_row(cls, row) -> "Site":
        row = [float(v) for v in row]
        return cls(
            pos=(row[X], row[Y]),
            log_tau=row[LOG_TAU],
            radius=row[RADIUS],
            color=(row[CR], row[CG], row[CB]),
            dir=(row[UX], row[UY]),
            aniso=row[ANISO],
        )


class SiteStore:
    """Dense, append-only array of sites with active/frozen flags and Adam state.

    Slots are never removed: pruning flips ``active`` and parks the position at
    the ``(-1, -1)`` sentinel. ``size`` is the high-water mark of used slots.
    """

    def __init__(self, width: int, height: int, capacity: int, dtype=np.float64):
        if capacity < 0:
            raise InvalidInputError("capacity must be non-negative")
        self.width = int(width)
        self.height = int(height)
        self.dtype = np.dtype(dtype)
        self.params = np.zeros((capacity, N_PARAMS), dtype=self.dtype)
        self.params[:, X:Y + 1] = INACTIVE_POS
        self.params[:, UX] = 1.0
        self.active = np.zeros(capacity, dtype=bool)
        self.frozen = np.zeros(capacity, dtype=bool)
        self.adam_m = np.zeros((capacity, N_PARAMS), dtype=self.dtype)
        self.adam_v = np.zeros((capacity, N_PARAMS), dtype=self.dtype)
        self.adam_t = np.zeros(capacity, dtype=np.int64)
        self.size = 0

    @classmethod
    def from_sites(cls, sites, width: int, height: int, capacity: Optional[int] = None,
                   dtype=np.float64) -> "SiteStore":
        sites = list(sites)
        store = cls(width, height, capacity or len(sites), dtype=dtype)
        for site in sites:
            store.append(site.as_row())
        return store

    @classmethod
    def from_params(cls, params, width: int, height: int, capacity: Optional[int] = None,
                    dtype=np.float64) -> "SiteStore":
        params = np.asarray(params, dtype=np.float64).reshape(-1, N_PARAMS)
        store = cls(width, height, max(capacity or 0, len(params)), dtype=dtype)
        n = len(params)
        store.params[:n] = params
        store.active[:n] = True
        store.size = n
        return store

    @property
    def capacity(self) -> int:
        return self.params.shape[0]

    @property
    def scale(self) -> float:
        return normalization_scale(self.width, self.height)

    @property
    def count_active(self) -> int:
        return int(np.count_nonzero(self.active))

    def active_ids(self) -> np.ndarray:
        return np.flatnonzero(self.active).astype(np.int64)

    # column views
    @property
    def pos(self) -> np.ndarray:
        return self.params[:, X:Y + 1]

    @property
    def log_tau(self) -> np.ndarray:
        return self.params[:, LOG_TAU]

    @property
    def radius(self) -> np.ndarray:
        return self.params[:, RADIUS]

    @property
    def color(self) -> np.ndarray:
        return self.params[:, CR:CB + 1]

    @property
    def dir(self) -> np.ndarray:
        return self.params[:, UX:UY + 1]

    @property
    def aniso(self) -> np.ndarray:
        return self.params[:, ANISO]

    def site(self, i: int) -> Site:
        return Site.from_row(self.params[i])

    def append(self, row) -> int:
        """Write ``row`` into the next fresh slot and return its ID."""
        if self.size >= self.capacity:
            raise SadError(f"site store capacity {self.capacity} exhausted")
        i = self.size
        self.params[i] = row
        self.active[i] = True
        self.frozen[i] = False
        self.reset_adam(i)
        self.size += 1
        return i

    def reset_adam(self, ids) -> None:
        self.adam_m[ids] = 0.0
        self.adam_v[ids] = 0.0
        self.adam_t[ids] = 0

    def deactivate(self, ids) -> None:
        ids = np.asarray(ids, dtype=np.int64)
        self.active[ids] = False
        self.params[ids, X:Y + 1] = INACTIVE_POS
        self.reset_adam(ids)

    def compacted(self) -> "SiteStore":
        """Copy holding only the active sites, renumbered densely."""
        ids = self.active_ids()
        out = SiteStore.from_params(self.params[ids], self.width, self.height, dtype=self.dtype)
        out.frozen[:len(ids)] = self.frozen[ids]
        return out

    def copy(self) -> "SiteStore":
        out = SiteStore(self.width, self.height, self.capacity, dtype=self.dtype)
        for name in ("params", "active", "frozen", "adam_m", "adam_v", "adam_t"):
            getattr(out, name)[...] = getattr(self, name)
        out.size = self.size
        return out

    def grow(self, capacity: int) -> None:
        """Enlarge the backing arrays; existing IDs are preserved."""
        if capacity <= self.capacity:
            return
        extra = capacity - self.capacity
        pad = np.zeros((extra, N_PARAMS), dtype=self.dtype)
        pad[:, X:Y + 1] = INACTIVE_POS
        pad[:, UX] = 1.0
        self.params = np.concatenate([self.params, pad])
        self.adam_m = np.concatenate([self.adam_m, np.zeros_like(pad)])
        self.adam_v = np.concatenate([self.adam_v, np.zeros_like(pad)])
        self.adam_t = np.concatenate([self.adam_t, np.zeros(extra, dtype=np.int64)])
        self.active = np.concatenate([self.active, np.zeros(extra, dtype=bool)])
        self.frozen = np.concatenate([self.frozen, np.zeros(extra, dtype=bool)])


@dataclass
class ImageBuffer:
    """Linear RGB image, ``pixels`` shaped ``(height, width, 3)`` in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            px = np.repeat(px[:, :, None], 3, axis=2)
        if px.ndim != 3 or px.shape[2] != 3:
            raise InvalidInputError(f"expected (H, W, 3) pixels, got shape {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise InvalidInputError("empty image")
        if not np.all(np.isfinite(px)):
            raise InvalidInputError("image contains non-finite values")
        if px.min() < 0.0 or px.max() > 1.0:
            raise InvalidInputError("pixel values must lie in [0, 1]")
        self.pixels = px

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def scale(self) -> float:
        return normalization_scale(self.width, self.height)

    @classmethod
    def constant(cls, width: int, height: int, color) -> "ImageBuffer":
        px = np.empty((height, width, 3))
        px[:] = np.asarray(color, dtype=np.float64)
        return cls(px)


class CandidateField:
    """Per-cell fixed-size list of candidate site IDs.

    ``ids`` has shape ``(grid_h, grid_w, k)`` and dtype uint32; unused slots hold
    ``INVALID_ID``. With ``grid`` > 1 each cell covers a ``grid x grid`` block of
    pixels and candidates are scored at the block centre.
    """

    def __init__(self, width: int, height: int, k: int = 8, grid: int = 1):
        if k < 1:
            raise InvalidInputError("k must be >= 1")
        if grid < 1:
            raise InvalidInputError("grid downscale must be >= 1")
        self.width = int(width)
        self.height = int(height)
        self.k = int(k)
        self.grid = int(grid)
        gw = -(-self.width // self.grid)
        gh = -(-self.height // self.grid)
        self.ids = np.full((gh, gw, self.k), INVALID_ID, dtype=np.uint32)
        self.generation = 0
        self.passes = 0

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.ids.shape[0], self.ids.shape[1]

    def copy(self) -> "CandidateField":
        out = CandidateField(self.width, self.height, self.k, self.grid)
        out.ids[...] = self.ids
        out.generation = self.generation
        out.passes = self.passes
        return out

    def pixel_ids(self) -> np.ndarray:
        """Candidate lists expanded to full resolution, shape ``(H, W, k)``."""
        if self.grid == 1:
            return self.ids
        ys = np.arange(self.height) // self.grid
        xs = np.arange(self.width) // self.grid
        return self.ids[ys[:, None], xs[None, :]]

    def dump(self) -> bytes:
        """Raw little-endian uint32 ID grid, row-major ``(grid_h, grid_w, k)``."""
        return self.ids.astype("<u4").tobytes()


@dataclass
class TrainConfig:
    iters: int = 4000
    k: int = 8
    inject_count: int = 4
    n_sites: int = 4096
    lambda_init: float = 0.3
    capacity_factor: float = 4.0
    # budget schedule
    densify_freq: int = 20
    densify_start: int = 20
    densify_end: int = 3000
    densify_percentile: float = 0.01
    alpha: float = 0.7
    eps_densify: float = 1e-8
    prune_freq: int = 40
    prune_start: int = 100
    prune_end: int = 3000
    prune_percentile: float = 0.033
    prune_during_densify: bool = True
    budget: bool = True
    target_bpp: Optional[float] = None
    seed: int = 0
    # optimizer
    lr_pos: float = 0.1
    lr_color: float = 0.02
    lr_log_tau: float = 0.02
    lr_radius: float = 0.02
    lr_dir: float = 0.025
    lr_aniso: float = 0.025
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    # candidates
    candidate_update_period: int = 1
    candidate_passes: int = 1
    init_passes: int = 4
    grid: int = 1
    tau_diffusion_lambda: Optional[float] = None
    # initial site defaults
    init_log_tau: float = 7.5
    init_radius: Optional[float] = None
    init_aniso: float = 0.0
    # numerics
    dtype: str = "float32"
    merge_mode: str = "ordered"
    log_every: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("densify_freq", "prune_freq", "candidate_update_period", "candidate_passes", "k"):
            if getattr(self, name) < 1:
                raise InvalidInputError(f"{name} must be >= 1")
        for name in ("densify_percentile", "prune_percentile", "lambda_init"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvalidInputError(f"{name} must lie in [0, 1], got {v}")
        if self.iters < 0:
            raise InvalidInputError("iters must be non-negative")
        if self.densify_start > self.densify_end or self.prune_start > self.prune_end:
            raise InvalidInputError("schedule window start exceeds end")
        if self.densify_start < 0 or self.prune_start < 0:
            raise InvalidInputError("schedule windows must start at >= 0")
        if self.tau_diffusion_lambda is not None and not 0.0 <= self.tau_diffusion_lambda <= 1.0:
            raise InvalidInputError("tau_diffusion_lambda must lie in [0, 1]")
        if self.dtype not in ("float32", "float64"):
            raise InvalidInputError("dtype must be float32 or float64")
        if self.merge_mode not in ("ordered", "exact"):
            raise InvalidInputError("merge_mode must be 'ordered' or 'exact'")

    def learning_rates(self) -> np.ndarray:
        return np.array([
            self.lr_pos, self.lr_pos, self.lr_log_tau, self.lr_radius,
            self.lr_color, self.lr_color, self.lr_color,
            self.lr_dir, self.lr_dir, self.lr_aniso,
        ])

    def replace(self, **changes) -> "TrainConfig":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return TrainConfig(**values)


MASK32 = 0xFFFFFFFF


def mix32(x: int) -> int:
    """Integer finaliser used to derive xorshift seeds (lowbias32)."""
    x &= MASK32
    x ^= x >> 16
    x = (x * 0x7FEB352D) & MASK32
    x ^= x >> 15
    x = (x * 0x846CA68B) & MASK32
    x ^= x >> 16
    return x


@dataclass
class RngState:
    """32-bit xorshift generator (Marsaglia 13/17/5)."""

    state: int = 2463534242

    def __post_init__(self):
        self.state &= MASK32
        if self.state == 0:
            self.state = 2463534242

    @classmethod
    def seeded(cls, seed: int, step: int, pixel: int) -> "RngState":
        s = mix32(mix32(mix32(seed & MASK32) ^ (step & MASK32)) ^ (pixel & MASK32))
        return cls(s)

    def next_u32(self) -> int:
        x = self.state
        x ^= (x << 13) & MASK32
        x ^= x >> 17
        x ^= (x << 5) & MASK32
        self.state = x
        return x

    def below(self, n: int) -> int:
        """Uniform integer in ``[0, n)`` via multiply-high."""
        return (self.next_u32() * n) >> 32


def host_rng(seed: int) -> np.random.Generator:
    """numpy generator for host-side sampling (init, densify fallbacks)."""
    return np.random.default_rng(np.random.SeedSequence(seed & 0xFFFFFFFFFFFFFFFF))
