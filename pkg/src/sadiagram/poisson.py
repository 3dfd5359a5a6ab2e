"""Poisson equation on a masked domain with a scalar soft-diagram field.

The field value ``u`` lives in the red channel; the other two channels stay 0.
Coordinates are normalised (pixel spacing ``h = 1 / max(W, H)``) so that the
solution of the disk problem stays inside the unit value range.  Dirichlet
``u = 0`` is imposed by frozen sites placed along the mask contour.
"""

from __future__ import annotations

import hashlib
import math
import time
from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np
from scipy import ndimage
from skimage import measure

from .core import (ANISO, CR, LOG_TAU, N_PARAMS, RADIUS, UX, X, Y, CandidateField,
                   InvalidInputError, SiteStore, host_rng, normalization_scale)
from . import candidates
from .grad import backward_from_upstream
from .render import forward
from .train import AdamStats, adam_step


class InvalidDomainError(InvalidInputError):
    """Mask without interior pixels."""


@dataclass
class PoissonConfig:
    steps: int = 2000
    n_interior: int = 2000
    n_boundary: int = 512
    source: float = -4.0
    seed: int = 0
    init_log_tau: float = 3.5
    init_radius: Optional[float] = None
    init_value: float = 0.0
    lr_pos: float = 0.05
    lr_value: float = 2e-3
    lr_log_tau: float = 0.01
    lr_radius: float = 0.05
    lr_dir: float = 0.0
    lr_aniso: float = 0.0
    k: int = 8
    inject_count: int = 4
    init_passes: int = 4
    merge_mode: str = "ordered"
    metric: str = "l2"

    def learning_rates(self) -> np.ndarray:
        return np.array([self.lr_pos, self.lr_pos, self.lr_log_tau, self.lr_radius,
                         self.lr_value, 0.0, 0.0, self.lr_dir, self.lr_dir, self.lr_aniso])


def disk_mask(width: int, height: int, radius: float) -> np.ndarray:
    """Pixels whose centre lies within ``radius`` of the image centre."""
    ys, xs = np.mgrid[0:height, 0:width]
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    return (xs - cx) ** 2 + (ys - cy) ** 2 <= radius * radius


def disk_truth(width: int, height: int, radius: float) -> np.ndarray:
    """``R^2 - rho^2`` in normalised coordinates; its Laplacian is -4."""
    s = normalization_scale(width, height)
    ys, xs = np.mgrid[0:height, 0:width]
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    rho2 = ((xs - cx) ** 2 + (ys - cy) ** 2) * s * s
    return (radius * s) ** 2 - rho2


def interior_mask(mask: np.ndarray) -> np.ndarray:
    """Mask pixels whose four neighbours are also inside the mask."""
    m = np.asarray(mask, dtype=bool)
    inner = m.copy()
    inner[0, :] = inner[-1, :] = False
    inner[:, 0] = inner[:, -1] = False
    inner[1:-1, 1:-1] &= m[:-2, 1:-1] & m[2:, 1:-1] & m[1:-1, :-2] & m[1:-1, 2:]
    return inner


def laplacian(u: np.ndarray, h: float = 1.0) -> np.ndarray:
    """Five-point Laplacian; border pixels are left at zero."""
    u = np.asarray(u, dtype=np.float64)
    out = np.zeros_like(u)
    out[1:-1, 1:-1] = (u[:-2, 1:-1] + u[2:, 1:-1] + u[1:-1, :-2] + u[1:-1, 2:]
                       - 4.0 * u[1:-1, 1:-1]) / (h * h)
    return out


def laplacian_adjoint(r: np.ndarray, h: float = 1.0) -> np.ndarray:
    """Transpose of :func:`laplacian` applied to a map supported on interior pixels."""
    r = np.asarray(r, dtype=np.float64)
    out = np.zeros_like(r)
    c = r[1:-1, 1:-1] / (h * h)
    out[1:-1, 1:-1] -= 4.0 * c
    out[:-2, 1:-1] += c
    out[2:, 1:-1] += c
    out[1:-1, :-2] += c
    out[1:-1, 2:] += c
    return out


def contour_points(mask: np.ndarray, smooth: float = 1.0) -> np.ndarray:
    """Longest zero-level contour of the mask as ``(x, y)`` points, closed.

    The mask is blurred by a Gaussian of width ``smooth`` pixels first; the
    half level of a raw binary mask is a staircase of 0/45/90 degree segments
    that overstates curve length by about 5%.
    """
    m = np.pad(np.asarray(mask, dtype=np.float64), 4)
    if smooth > 0:
        m = ndimage.gaussian_filter(m, smooth)
    contours = measure.find_contours(m, 0.5)
    if not contours:
        raise InvalidDomainError("mask has no contour")
    c = max(contours, key=len)[:, ::-1] - 4.0  # (row, col) -> (x, y), undo padding
    if not np.array_equal(c[0], c[-1]):
        c = np.vstack([c, c[:1]])
    return c


def contour_length(mask: np.ndarray) -> float:
    c = contour_points(mask)
    return float(np.sum(np.hypot(*np.diff(c, axis=0).T)))


def init_boundary_sites(mask: np.ndarray, n_boundary: int, value: float = 0.0,
                        log_tau: float = 3.5, radius: Optional[float] = None) -> np.ndarray:
    """``n`` site rows evenly spaced by arc length along the mask contour.

    Sampling starts at the contour point minimising ``x + y`` (the top-left
    corner of a rectangle) and places site ``k`` at arc length ``(k + 1/2) L / n``.
    """
    if n_boundary < 1:
        raise InvalidInputError("need at least one boundary site")
    c = contour_points(mask)
    start = int(np.lexsort((c[:-1, 1], c[:-1, 0] + c[:-1, 1]))[0])
    ring = np.vstack([c[start:-1], c[:start], c[start:start + 1]])
    seg = np.hypot(*np.diff(ring, axis=0).T)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    length = cum[-1]
    targets = (np.arange(n_boundary) + 0.5) * length / n_boundary
    xs = np.interp(targets, cum, ring[:, 0])
    ys = np.interp(targets, cum, ring[:, 1])
    h, w = mask.shape
    rows = np.zeros((n_boundary, N_PARAMS))
    rows[:, X] = np.clip(xs, 0.0, w - 1)
    rows[:, Y] = np.clip(ys, 0.0, h - 1)
    rows[:, LOG_TAU] = log_tau
    rows[:, RADIUS] = radius if radius is not None else max(1.0, length / n_boundary)
    rows[:, CR] = value
    rows[:, UX] = 1.0
    rows[:, ANISO] = 0.0
    return rows


def init_poisson_store(mask: np.ndarray, config: PoissonConfig,
                       rng: np.random.Generator) -> SiteStore:
    """Frozen boundary sites first, then interior sites on distinct mask pixels."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    if not interior_mask(mask).any():
        raise InvalidDomainError("mask has no interior pixels")
    boundary = init_boundary_sites(mask, config.n_boundary, 0.0, config.init_log_tau)
    cells = np.flatnonzero(mask.ravel())
    if config.n_interior > len(cells):
        raise InvalidInputError(f"{config.n_interior} interior sites exceed {len(cells)} mask pixels")
    pick = np.sort(rng.choice(cells, size=config.n_interior, replace=False))
    ys, xs = np.divmod(pick, w)
    jitter = rng.uniform(-0.25, 0.25, size=(len(pick), 2))
    inner = np.zeros((len(pick), N_PARAMS))
    inner[:, X] = np.clip(xs + jitter[:, 0], 0.0, w - 1)
    inner[:, Y] = np.clip(ys + jitter[:, 1], 0.0, h - 1)
    inner[:, LOG_TAU] = config.init_log_tau
    r0 = config.init_radius if config.init_radius is not None else \
        math.sqrt(mask.sum() / max(config.n_interior, 1))
    inner[:, RADIUS] = max(1.0, r0)
    inner[:, CR] = config.init_value
    inner[:, UX] = 1.0
    store = SiteStore.from_params(np.vstack([boundary, inner]), w, h)
    store.frozen[:config.n_boundary] = True
    return store


def poisson_residual(store: SiteStore, field: CandidateField, source: float, mask: np.ndarray,
                     mode: str = "ordered", metric: str = "l2"):
    """``(loss, grads, u, residual)`` for the mean squared stencil residual on the interior.

    ``metric="l2"`` returns the plain gradient, which pushes ``L^T r`` back
    through rendering.  ``metric="sobolev"`` returns the gradient in the ``H^1``
    metric induced by ``-L``; since the stencil is symmetric this replaces
    ``L^T r`` by ``-r``, so smooth error modes are no longer damped by the
    fourth-order operator ``L^T L``.
    """
    inner = interior_mask(mask)
    n_int = int(inner.sum())
    if n_int == 0:
        raise InvalidDomainError("mask has no interior pixels")
    h = normalization_scale(store.width, store.height)
    rgb, _, _ = forward(store, field)
    u = rgb[..., 0]
    res = np.where(inner, laplacian(u, h) - source, 0.0)
    loss = float(np.sum(res * res) / n_int)
    up = np.zeros(rgb.shape)
    if metric == "l2":
        up[..., 0] = laplacian_adjoint(2.0 * res / n_int, h)
    elif metric == "sobolev":
        up[..., 0] = -2.0 * res / n_int
    else:
        raise InvalidInputError(f"unknown metric {metric!r}")
    grads = backward_from_upstream(store, field, up, mode=mode)
    grads.data[:, CR + 1:CR + 3] = 0.0
    return loss, grads, u, res


def frozen_digest(store: SiteStore) -> str:
    ids = np.flatnonzero(store.frozen)
    return hashlib.sha256(np.ascontiguousarray(store.params[ids]).tobytes()).hexdigest()


@dataclass
class PoissonResult:
    store: SiteStore
    field: CandidateField
    mask: np.ndarray
    u: np.ndarray
    history: list = dc_field(default_factory=list)  # (step, residual mse, error mse, ms)
    truth: Optional[np.ndarray] = None

    @property
    def residual_mse(self) -> float:
        return self.history[-1][1]

    @property
    def error_mse(self) -> float:
        return self.history[-1][2]


def solve(mask: np.ndarray, config: PoissonConfig, truth: Optional[np.ndarray] = None,
          callback=None) -> PoissonResult:
    """Minimise the Poisson residual with Adam; boundary sites never move."""
    mask = np.asarray(mask, dtype=bool)
    rng = host_rng(config.seed)
    store = init_poisson_store(mask, config, rng)
    field = CandidateField(store.width, store.height, config.k)
    field = candidates.refresh(store, field, mode="full", passes=config.init_passes,
                               inject=config.inject_count, seed=config.seed)
    lrs = config.learning_rates()
    inner = interior_mask(mask)
    stats = AdamStats()
    history = []
    u = None
    for t in range(1, config.steps + 1):
        t0 = time.perf_counter()
        field = candidates.refresh(store, field, mode="warm_start", passes=1,
                                   inject=config.inject_count, seed=config.seed)
        loss, grads, u, _ = poisson_residual(store, field, config.source, mask, config.merge_mode,
                                          config.metric)
        err = float(np.mean((u[inner] - truth[inner]) ** 2)) if truth is not None else float("nan")
        adam_step(store, grads, t, lrs, stats=stats)
        store.params[store.active & ~store.frozen, CR + 1:CR + 3] = 0.0
        history.append((t, loss, err, (time.perf_counter() - t0) * 1e3))
        if callback is not None:
            callback(t, store, field)
    field = candidates.refresh(store, field, mode="warm_start", passes=1,
                               inject=config.inject_count, seed=config.seed)
    rgb, _, _ = forward(store, field)
    u = rgb[..., 0]
    h = normalization_scale(store.width, store.height)
    res = np.where(inner, laplacian(u, h) - config.source, 0.0)
    err = float(np.mean((u[inner] - truth[inner]) ** 2)) if truth is not None else float("nan")
    history.append((config.steps + 1, float(np.sum(res * res) / inner.sum()), err, 0.0))
    return PoissonResult(store, field, mask, u, history, truth)


def shaded_heightfield(u: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Lambertian hillshade of ``u`` as an ``(H, W, 3)`` image in [0, 1]."""
    u = np.asarray(u, dtype=np.float64)
    scale = 1.0 / max(np.ptp(u), 1e-12) * 40.0
    gy, gx = np.gradient(u * scale)
    normal = np.stack([-gx, -gy, np.ones_like(u)], axis=-1)
    normal /= np.linalg.norm(normal, axis=-1, keepdims=True)
    light = np.array([-0.5, -0.5, 0.7071])
    light /= np.linalg.norm(light)
    shade = np.clip(normal @ light, 0.0, 1.0)
    lo, hi = float(u.min()), float(u.max())
    height = (u - lo) / (hi - lo) if hi > lo else np.zeros_like(u)
    rgb = np.stack([0.3 + 0.7 * height, 0.45 * np.ones_like(u), 1.0 - 0.7 * height], axis=-1)
    out = rgb * (0.25 + 0.75 * shade[..., None])
    if mask is not None:
        out[~np.asarray(mask, dtype=bool)] = 0.0
    return np.clip(out, 0.0, 1.0)
