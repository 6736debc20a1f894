"""Degenerate-weight Dirichlet solver on a grid truncated around the support.

The continuum problem is a divergence-form equation whose coefficient is a
power of the regularized distance to the support, so the operator degenerates
exactly on the support.  On a discrete measure we solve a finite-volume
truncation instead:

* the support is thickened into a *collar* of grid cells (every cell whose
  center lies within ``collar * h`` of the support); collar cells are pinned
  to the boundary data carried by their nearest support atom;
* every face between two non-collar cells gets the conductance
  ``D(face midpoint) ** (d + 1 + gamma - n)`` scaled by ``h ** (n - 2)``,
  where ``D`` is the kernel-regularized distance; faces into the collar
  couple the unknowns to the pinned data;
* the outer box walls are either reflecting (``outer="neumann"``, the
  default, which preserves the exact constant solution for constant data) or
  absorbing (``outer="dirichlet0"``, which measures the truncation bias).

The resulting matrix is symmetric positive definite and block-diagonal
between pinned and free cells, so one conjugate-gradient solve per boundary
datum suffices.  Symmetry also gives a *representer* shortcut: solving once
with the interpolation stencil of an observation point as right-hand side
yields, for every support atom at once, the weight with which its datum
enters the observed value.  Those weights evaluate hitting probabilities of
arbitrary subsets of the support without further solves, which is what the
scatter diagnostic exploits.

Resolution contract: collar pinning keeps every evaluated face midpoint at
distance at least ``(collar - 0.5) * h`` from the support, and the distance
kernel refuses probes below twice the atom spacing, so ``assemble`` requires
``(collar - 0.5) * h >= 2 * spacing`` up front.
"""

from __future__ import annotations

import itertools
import json
import math
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from . import carleson, distances
from .exceptions import (DegenerateInputError, DomainError, InputError,
                         NumericError, ParameterError, ResolutionError,
                         TopologyError)
from .geometry import Ball, CorkscrewResult, DiscreteMeasure, corkscrew_point

__all__ = [
    "MASK_INTERIOR", "MASK_COLLAR", "MASK_OUTER",
    "SolverConfig", "GridField", "SolveResult", "PoleWeights",
    "HarmonicMeasureResult", "ScatterResult", "SNResult",
    "EllipticSystem", "assemble", "harmonic_measure", "ainfty_scatter",
    "sn_check", "write_field", "read_field", "write_scatter",
]

MASK_INTERIOR = 0
MASK_COLLAR = 1
MASK_OUTER = 2

_MAX_CELLS = 2 ** 31 - 1
_EVAL_SLAB = 2_000_000


def _axis_slice(n: int, axis: int, sl) -> tuple:
    out = [slice(None)] * n
    out[axis] = sl
    return tuple(out)


@dataclass(frozen=True)
class SolverConfig:
    """Knobs of the truncated solver.

    ``collar`` is the pinning half-width in cell units; widening it trades
    boundary resolution for kernel robustness.  ``outer`` picks the wall
    closure.  ``tol`` is the relative CG tolerance.
    """

    beta: float = 2.0
    gamma: float = 0.0
    tol: float = 1e-8
    maxiter: int | None = None
    collar: float = 1.5
    outer: str = "neumann"

    def __post_init__(self):
        if self.beta <= 0:
            raise ParameterError("beta must be positive")
        if not -1.0 < self.gamma < 1.0:
            raise ParameterError("gamma must lie strictly between -1 and 1")
        if self.tol <= 0:
            raise ParameterError("tol must be positive")
        if self.collar < 1.0:
            raise ParameterError("collar must be at least one cell")
        if self.outer not in ("neumann", "dirichlet0"):
            raise ParameterError("outer must be 'neumann' or 'dirichlet0'")
        if self.maxiter is not None and self.maxiter < 1:
            raise ParameterError("maxiter must be positive when given")


@dataclass
class GridField:
    """Cell-centered scalar field on a cubic grid with a cell-role mask."""

    box_lo: np.ndarray
    h: float
    values: np.ndarray
    mask: np.ndarray

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def ambient_dim(self) -> int:
        return self.values.ndim

    def axes(self) -> list[np.ndarray]:
        return [self.box_lo[a] + (np.arange(self.shape[a]) + 0.5) * self.h
                for a in range(self.ambient_dim)]

    def cell_centers(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([g.ravel() for g in mesh], axis=1)

    def interp(self, x):
        """Multilinear interpolation at points strictly inside the
        cell-center hull."""
        pts = np.asarray(x, dtype=np.float64)
        single = pts.ndim == 1
        if single:
            pts = pts[None, :]
        if pts.shape[1] != self.ambient_dim:
            raise InputError("point dimension does not match the grid")
        t = (pts - self.box_lo[None, :]) / self.h - 0.5
        base = np.floor(t).astype(np.int64)
        frac = t - base
        hi = np.asarray(self.shape) - 1
        if (base < 0).any() or (base >= hi[None, :]).any():
            raise DomainError("interpolation point outside the cell-center hull")
        out = np.zeros(pts.shape[0])
        for corner in itertools.product((0, 1), repeat=self.ambient_dim):
            wt = np.ones(pts.shape[0])
            for a, c in enumerate(corner):
                wt *= frac[:, a] if c else 1.0 - frac[:, a]
            out += wt * self.values[tuple((base[:, a] + corner[a])
                                          for a in range(self.ambient_dim))]
        return float(out[0]) if single else out


@dataclass(frozen=True)
class SolveResult:
    field: GridField
    iterations: int
    residual: float
    n_unknowns: int


@dataclass(frozen=True)
class PoleWeights:
    """Per-atom weights of the boundary data in the value at one point."""

    pole: np.ndarray
    weights: np.ndarray
    iterations: int
    residual: float

    def value(self, e) -> float:
        e = np.asarray(e)
        if e.dtype == bool:
            return float(self.weights[e].sum())
        return float(self.weights[np.asarray(e, dtype=np.int64)].sum())


@dataclass(frozen=True)
class HarmonicMeasureResult:
    value: float
    complement_value: float
    mass_gap: float
    pole: np.ndarray
    iterations: tuple
    residual: float
    field: GridField


@dataclass(frozen=True)
class ScatterResult:
    """Hitting-probability ratio vs mass ratio for sampled subsets."""

    pairs: np.ndarray            # (n_sets + 1, 2): (omega_ratio, sigma_ratio)
    descriptors: list
    ball: Ball
    pole: CorkscrewResult
    omega_ball: float
    sigma_ball: float
    n_atoms: int
    iterations: int
    residual: float

    def envelope(self, delta: float) -> float:
        sel = self.pairs[:, 0] < delta
        if not sel.any():
            return 0.0
        return float(self.pairs[sel, 1].max())


@dataclass(frozen=True)
class SNResult:
    """Square-function mass vs pointwise and cone suprema on one ball."""

    square_fn: float
    sup_sq: float
    nt_sq: float
    sup: float
    ball: Ball
    h: float
    iterations: int
    residual: float
    n_cells: int
    n_empty_cones: int
    field: GridField

    def sup_ratio(self) -> float:
        if self.sup_sq > 0:
            return self.square_fn / self.sup_sq
        return 0.0 if self.square_fn == 0 else math.inf

    def nt_ratio(self) -> float:
        if self.nt_sq > 0:
            return self.square_fn / self.nt_sq
        return 0.0 if self.square_fn == 0 else math.inf


class EllipticSystem:
    """Assembled truncated system on one box; reusable across data."""

    def __init__(self, sigma: DiscreteMeasure, config: SolverConfig,
                 box_lo: np.ndarray, h: float, shape: tuple,
                 mask: np.ndarray, anchor: np.ndarray, diag: np.ndarray,
                 w_faces: list, uc_pairs: list):
        self.sigma = sigma
        self.config = config
        self.box_lo = box_lo
        self.h = h
        self.shape = shape
        self.mask = mask                      # flat int8
        self.anchor = anchor                  # flat int32, -1 off-collar
        self.diag = diag                      # flat float64
        self.w_faces = w_faces                # per-axis face-shaped arrays
        self.uc_pairs = uc_pairs              # per-axis (unk, collar, w)
        self.n_cells = int(np.prod(shape))
        self.collar = mask == MASK_COLLAR
        self.n_collar = int(self.collar.sum())
        self.n_unknowns = self.n_cells - self.n_collar
        self._inv_diag = 1.0 / diag
        self._pole_cache: dict = {}
        self._scratch = np.empty(max(w.size for w in w_faces))

    # -- linear algebra ---------------------------------------------------

    def _matvec(self, x: np.ndarray) -> np.ndarray:
        n = len(self.shape)
        x3 = x.reshape(self.shape)
        y3 = self.diag.reshape(self.shape) * x3
        for a, w in enumerate(self.w_faces):
            fr = _axis_slice(n, a, np.s_[:-1])
            bk = _axis_slice(n, a, np.s_[1:])
            s = self._scratch[:w.size].reshape(w.shape)
            np.multiply(w, x3[bk], out=s)
            y3[fr] -= s
            np.multiply(w, x3[fr], out=s)
            y3[bk] -= s
        return y3.ravel()

    def _cg(self, b: np.ndarray, x0: np.ndarray) -> tuple:
        """Jacobi-preconditioned conjugate gradients, hand-rolled so the
        stencil matvec is the only per-iteration cost."""
        maxiter = self.config.maxiter
        if maxiter is None:
            maxiter = max(2000, 60 * max(self.shape))
        bnorm = float(np.linalg.norm(b))
        stop = self.config.tol * bnorm
        x = x0.copy()
        r = b - self._matvec(x)
        iters = 0
        rnorm = float(np.linalg.norm(r))
        if rnorm > stop:
            z = r * self._inv_diag
            p = z.copy()
            rz = float(r @ z)
            for iters in range(1, maxiter + 1):
                ap = self._matvec(p)
                alpha = rz / float(p @ ap)
                x += alpha * p
                r -= alpha * ap
                rnorm = float(np.linalg.norm(r))
                if rnorm <= stop:
                    break
                np.multiply(r, self._inv_diag, out=z)
                rz_new = float(r @ z)
                np.multiply(p, rz_new / rz, out=p)
                p += z
                rz = rz_new
        residual = rnorm / bnorm if bnorm > 0 else rnorm
        if rnorm > stop and bnorm > 0:
            raise NumericError(
                f"conjugate gradients stopped after {iters} iterations "
                f"with relative residual {residual:.3g}")
        return x, iters, residual

    # -- data plumbing ----------------------------------------------------

    def _g_support(self, g) -> np.ndarray:
        npts = self.sigma.points.shape[0]
        if callable(g):
            vals = np.asarray(g(self.sigma.points), dtype=np.float64)
        elif np.isscalar(g):
            vals = np.full(npts, float(g))
        else:
            vals = np.asarray(g, dtype=np.float64)
        if vals.shape != (npts,):
            raise InputError(
                f"boundary data must give one value per support atom "
                f"({npts}); got shape {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise InputError("boundary data contains non-finite values")
        return vals

    def _g_cells(self, g_support: np.ndarray) -> np.ndarray:
        g_cells = np.zeros(self.n_cells)
        coll = self.collar
        g_cells[coll] = g_support[self.anchor[coll]]
        return g_cells

    def _rhs(self, g_cells: np.ndarray) -> np.ndarray:
        b = np.zeros(self.n_cells)
        for unk, col, w in self.uc_pairs:
            if unk.size:
                b += np.bincount(unk, weights=w * g_cells[col],
                                 minlength=self.n_cells)
        b[self.collar] = g_cells[self.collar]
        return b

    def _collar_functional(self, v: np.ndarray) -> np.ndarray:
        """Transpose of the data-to-rhs map applied to v, per support atom."""
        out = np.zeros(self.n_cells)
        for unk, col, w in self.uc_pairs:
            if unk.size:
                out += np.bincount(col, weights=w * v[unk],
                                   minlength=self.n_cells)
        coll = self.collar
        out[coll] += v[coll]
        npts = self.sigma.points.shape[0]
        return np.bincount(self.anchor[coll], weights=out[coll],
                           minlength=npts)

    # -- public operations --------------------------------------------------

    def _warm_start(self, fld: GridField) -> np.ndarray:
        """Previous solution interpolated at this grid's cell centers,
        clamped to the source hull (it only seeds the iteration)."""
        if fld.shape == tuple(self.shape) and fld.h == self.h \
                and np.array_equal(fld.box_lo, self.box_lo):
            return fld.values.ravel().copy()
        n = len(self.shape)
        hull_lo = fld.box_lo + (0.5 + 1e-9) * fld.h
        hull_hi = fld.box_lo + (np.asarray(fld.shape) - 0.5 - 1e-9) * fld.h
        out = np.empty(self.n_cells)
        axes = [self.box_lo[a] + (np.arange(self.shape[a]) + 0.5) * self.h
                for a in range(n)]
        slab = max(1, _EVAL_SLAB // int(np.prod(self.shape[1:])))
        m0 = self.shape[0]
        block = int(np.prod(self.shape[1:]))
        for i0 in range(0, m0, slab):
            i1 = min(i0 + slab, m0)
            mesh = np.meshgrid(axes[0][i0:i1], *axes[1:], indexing="ij")
            pts = np.stack([g.ravel() for g in mesh], axis=1)
            np.clip(pts, hull_lo[None, :], hull_hi[None, :], out=pts)
            out[i0 * block:i1 * block] = fld.interp(pts)
        return out

    def solve(self, g, warm_start: GridField | None = None) -> SolveResult:
        """Solve for the field with the given per-atom boundary data.

        ``warm_start`` seeds the iteration with another field (typically a
        coarser solve of the same data); it never changes the answer."""
        gs = self._g_support(g)
        g_cells = self._g_cells(gs)
        b = self._rhs(g_cells)
        if warm_start is not None:
            x0 = self._warm_start(warm_start)
            x0[self.collar] = g_cells[self.collar]
        else:
            x0 = g_cells.copy()
            x0[~self.collar] = float(gs.mean())
        x, iters, residual = self._cg(b, x0)
        fld = GridField(self.box_lo.copy(), self.h,
                        x.reshape(self.shape),
                        self.mask.reshape(self.shape).copy())
        return SolveResult(fld, iters, residual, self.n_unknowns)

    def _interp_stencil(self, pole: np.ndarray) -> tuple:
        n = len(self.shape)
        t = (pole - self.box_lo) / self.h - 0.5
        base = np.floor(t).astype(np.int64)
        frac = t - base
        m = np.asarray(self.shape)
        if (base < 0).any() or (base + 1 >= m).any():
            raise DomainError("observation point outside the cell-center hull")
        idxs = []
        wts = []
        for corner in itertools.product((0, 1), repeat=n):
            wt = 1.0
            flat = 0
            for a, c in enumerate(corner):
                wt *= frac[a] if c else 1.0 - frac[a]
                flat = flat * self.shape[a] + int(base[a] + c)
            idxs.append(flat)
            wts.append(wt)
        return np.asarray(idxs, dtype=np.int64), np.asarray(wts)

    def check_pole(self, pole) -> np.ndarray:
        pole = np.asarray(pole, dtype=np.float64)
        if pole.shape != (len(self.shape),):
            raise InputError("pole dimension does not match the grid")
        gap = float(self.sigma.dist_to_support(pole))
        if gap < 4.0 * self.h:
            raise DomainError(
                f"pole must clear the support by four cells "
                f"(gap {gap:.3g} < {4 * self.h:.3g})")
        return pole

    def pole_weights(self, pole) -> PoleWeights:
        """Weights of each atom's datum in the solution value at the pole.

        One symmetric solve with the interpolation stencil as right-hand
        side; afterwards any subset's hitting probability is a plain sum.
        """
        pole = self.check_pole(pole)
        key = pole.tobytes()
        hit = self._pole_cache.get(key)
        if hit is not None:
            return hit
        idxs, wts = self._interp_stencil(pole)
        b = np.zeros(self.n_cells)
        np.add.at(b, idxs, wts)
        v, iters, residual = self._cg(b, np.zeros(self.n_cells))
        out = PoleWeights(pole, self._collar_functional(v), iters, residual)
        self._pole_cache[key] = out
        return out


# -- assembly ---------------------------------------------------------------


def _normalize_box(box, n: int) -> tuple:
    try:
        center, side = box
    except (TypeError, ValueError):
        raise InputError("box must be a (center, side) pair") from None
    center = np.asarray(center, dtype=np.float64)
    side = float(side)
    if center.shape != (n,):
        raise InputError(f"box center must have dimension {n}")
    if side <= 0:
        raise ParameterError("box side must be positive")
    return center, side


def assemble(sigma: DiscreteMeasure, box, h: float,
             config: SolverConfig | None = None) -> EllipticSystem:
    """Build the truncated system on a cubic box of cell size h.

    The box side is rounded up to a whole number of cells.  Requires
    codimension at least 2 so the complement of the collar stays connected,
    and ``(collar - 0.5) * h >= 2 * spacing`` so every face midpoint is far
    enough from the support for the distance kernel.
    """
    if config is None:
        config = SolverConfig()
    n = sigma.ambient_dim
    d = sigma.intrinsic_dim
    if n > 4:
        raise ParameterError("ambient dimension above 4 is not supported")
    if d >= n - 1:
        raise ParameterError(
            "support must have codimension at least 2 for the truncated "
            f"solver (got d={d}, n={n})")
    if h <= 0:
        raise ParameterError("cell size h must be positive")
    floor_h = 2.0 * sigma.spacing / (config.collar - 0.5) if config.collar > 0.5 else math.inf
    if (config.collar - 0.5) * h < 2.0 * sigma.spacing * (1.0 - 1e-9):
        raise ResolutionError(
            f"face midpoints would sit closer than two spacings to the "
            f"support; need h >= {floor_h:.4g} at collar={config.collar:g}")
    center, side = _normalize_box(box, n)
    m = max(8, int(math.ceil(side / h - 1e-9)))
    if m ** n > _MAX_CELLS:
        raise ParameterError(f"grid of {m}^{n} cells is too large")
    lo = center - 0.5 * m * h
    shape = (m,) * n
    ncells = m ** n
    axes = [lo[a] + (np.arange(m) + 0.5) * h for a in range(n)]

    # cell-center distances and nearest atoms, slabbed to bound memory
    dist = np.empty(ncells)
    near = np.empty(ncells, dtype=np.int32)
    slab = max(1, _EVAL_SLAB // m ** (n - 1))
    for i0 in range(0, m, slab):
        i1 = min(i0 + slab, m)
        mesh = np.meshgrid(axes[0][i0:i1], *axes[1:], indexing="ij")
        pts = np.stack([g.ravel() for g in mesh], axis=1)
        dd, ii = sigma.tree.query(pts, workers=-1)
        dist[i0 * m ** (n - 1):i1 * m ** (n - 1)] = dd
        near[i0 * m ** (n - 1):i1 * m ** (n - 1)] = ii

    mask = np.zeros(ncells, dtype=np.int8)
    coll = dist <= config.collar * h
    if not coll.any():
        raise DomainError("the box does not reach the support: no collar cells")
    mask[coll] = MASK_COLLAR
    maskn = mask.reshape(shape)
    for a in range(n):
        for edge in (0, m - 1):
            layer = maskn[_axis_slice(n, a, edge)]
            layer[layer == MASK_INTERIOR] = MASK_OUTER

    unknown = (maskn != MASK_COLLAR)
    if not unknown.any():
        raise DomainError("the collar fills the whole box; enlarge the box")
    _, ncomp = ndimage.label(unknown)
    if ncomp > 1:
        raise TopologyError(
            f"the collar splits the box into {ncomp} components; enlarge "
            "the box or refine h")

    anchor = np.where(coll, near, -1).astype(np.int32)
    expo = d + 1.0 + config.gamma - n
    scale = h ** (n - 2)
    diag = np.zeros(ncells)
    idx3 = np.arange(ncells, dtype=np.int64).reshape(shape)
    w_faces = []
    uc_pairs = []

    def _face_weights(flat_face_idx, face_shape, axis):
        """Conductances for the faces with the given flat indices."""
        out = np.empty(flat_face_idx.size)
        for s0 in range(0, flat_face_idx.size, _EVAL_SLAB):
            sl = flat_face_idx[s0:s0 + _EVAL_SLAB]
            coords = np.unravel_index(sl, face_shape)
            probes = np.empty((sl.size, n))
            for b in range(n):
                probes[:, b] = axes[b][coords[b]]
            probes[:, axis] += 0.5 * h
            try:
                dval = distances.regularized_distance(sigma, probes, config.beta)
            except ResolutionError as exc:
                raise NumericError(f"face-weight evaluation refused: {exc}") from None
            out[s0:s0 + sl.size] = dval ** expo
        if not np.all(np.isfinite(out)):
            raise NumericError("non-finite face weight encountered")
        return out * scale

    for a in range(n):
        fr = _axis_slice(n, a, np.s_[:-1])
        bk = _axis_slice(n, a, np.s_[1:])
        uu = unknown[fr] & unknown[bk]
        uc = unknown[fr] & ~unknown[bk]
        cu = ~unknown[fr] & unknown[bk]
        need = uu | uc | cu
        face_shape = need.shape
        w = np.zeros(face_shape)
        nz = np.flatnonzero(need)
        if nz.size:
            w.ravel()[nz] = _face_weights(nz, face_shape, a)
        i_fr = idx3[fr]
        i_bk = idx3[bk]
        diag += np.bincount(i_fr[uu], weights=w[uu], minlength=ncells)
        diag += np.bincount(i_bk[uu], weights=w[uu], minlength=ncells)
        if uc.any():
            diag += np.bincount(i_fr[uc], weights=w[uc], minlength=ncells)
        if cu.any():
            diag += np.bincount(i_bk[cu], weights=w[cu], minlength=ncells)
        w_faces.append(np.where(uu, w, 0.0))
        unk_idx = np.concatenate([i_fr[uc], i_bk[cu]])
        col_idx = np.concatenate([i_bk[uc], i_fr[cu]])
        wv = np.concatenate([w[uc], w[cu]])
        uc_pairs.append((unk_idx, col_idx, wv))

    if config.outer == "dirichlet0":
        for a in range(n):
            for edge, shift in ((0, -0.5), (m - 1, 0.5)):
                sl = _axis_slice(n, a, edge)
                cells = idx3[sl][unknown[sl]].ravel()
                if not cells.size:
                    continue
                coords = np.unravel_index(cells, shape)
                probes = np.empty((cells.size, n))
                for b in range(n):
                    probes[:, b] = axes[b][coords[b]]
                probes[:, a] += shift * h
                try:
                    dval = distances.regularized_distance(sigma, probes,
                                                          config.beta)
                except ResolutionError as exc:
                    raise NumericError(
                        f"wall-weight evaluation refused: {exc}") from None
                diag += np.bincount(cells, weights=dval ** expo * scale,
                                    minlength=ncells)

    coll_flat = mask == MASK_COLLAR
    diag[coll_flat] = 1.0
    if np.any(diag <= 0):
        raise NumericError("isolated cell with no conductance; refine h")

    return EllipticSystem(sigma, config, lo, h, shape, mask, anchor, diag,
                          w_faces, uc_pairs)


# -- harmonic measure --------------------------------------------------------


def _e_mask(e, npts: int) -> np.ndarray:
    e = np.asarray(e)
    if e.dtype == bool:
        if e.shape != (npts,):
            raise InputError(f"set mask must have length {npts}")
        return e
    out = np.zeros(npts, dtype=bool)
    idx = np.asarray(e, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= npts):
        raise InputError("set indices out of range")
    out[idx] = True
    return out


def _default_box(sigma: DiscreteMeasure) -> tuple:
    span = sigma.points.max(axis=0) - sigma.points.min(axis=0)
    center = 0.5 * (sigma.points.max(axis=0) + sigma.points.min(axis=0))
    side = 1.5 * float(span.max())
    return center, side


def harmonic_measure(sigma: DiscreteMeasure, e, pole,
                     config: SolverConfig | None = None, *,
                     box=None, h: float | None = None,
                     system: EllipticSystem | None = None
                     ) -> HarmonicMeasureResult:
    """Hitting probability of the atom set e seen from the pole.

    Solves with indicator data for e and for its complement; the two values
    summing to one (under reflecting walls) is reported as ``mass_gap``.
    """
    if system is None:
        if config is None:
            config = SolverConfig()
        if box is None:
            box = _default_box(sigma)
        if h is None:
            h = _normalize_box(box, sigma.ambient_dim)[1] / 96.0
        system = assemble(sigma, box, h, config)
    elif system.sigma is not sigma:
        raise InputError("system was assembled for a different measure")
    npts = sigma.points.shape[0]
    emask = _e_mask(e, npts)
    pole = system.check_pole(pole)
    res_e = system.solve(emask.astype(np.float64))
    res_c = system.solve((~emask).astype(np.float64))
    value = res_e.field.interp(pole)
    cvalue = res_c.field.interp(pole)
    return HarmonicMeasureResult(
        value=float(value), complement_value=float(cvalue),
        mass_gap=abs(value + cvalue - 1.0), pole=pole,
        iterations=(res_e.iterations, res_c.iterations),
        residual=max(res_e.residual, res_c.residual),
        field=res_e.field)


# -- scatter diagnostic ------------------------------------------------------


def ainfty_scatter(sigma: DiscreteMeasure, ball: Ball,
                   config: SolverConfig | None = None,
                   n_sets: int = 64, seed: int = 0, *,
                   box=None, h: float | None = None,
                   system: EllipticSystem | None = None,
                   extra_sets: Sequence | None = None) -> ScatterResult:
    """Hitting-probability ratio vs mass ratio for random subsets of a ball.

    The pole is a deep interior point of the ball.  Row 0 is the full ball,
    exactly (1, 1); the remaining rows are unions of one to five sub-balls
    with radii between r/20 and r/4, seeded for reproducibility.  All rows
    come from a single representer solve.
    """
    if n_sets < 1:
        raise ParameterError("n_sets must be at least 1")
    if config is None:
        config = SolverConfig()
    npts = sigma.points.shape[0]
    gap = np.linalg.norm(sigma.points - ball.center[None, :], axis=1)
    atoms_in = np.flatnonzero(gap <= ball.radius)
    if atoms_in.size < 2:
        raise DegenerateInputError(
            "ball holds fewer than two support atoms; nothing to sample")
    if system is None:
        if box is None:
            box = (ball.center, 7.5 * ball.radius)
        if h is None:
            h = _normalize_box(box, sigma.ambient_dim)[1] / 96.0
        system = assemble(sigma, box, h, config)
    elif system.sigma is not sigma:
        raise InputError("system was assembled for a different measure")

    pole = corkscrew_point(sigma, ball, ball.radius / 16.0)
    pw = system.pole_weights(pole.point)
    sigma_ball = float(sigma.weights[atoms_in].sum())
    omega_ball = float(pw.weights[atoms_in].sum())
    if sigma_ball <= 0 or omega_ball <= 0:
        raise DegenerateInputError(
            "ball carries no mass or no hitting weight; move or enlarge it")

    rng = np.random.default_rng(seed)
    pairs = [(1.0, 1.0)]
    descriptors = ["full"]
    pts_in = sigma.points[atoms_in]
    for _ in range(n_sets):
        k = int(rng.integers(1, 6))
        centers = pts_in[rng.integers(0, atoms_in.size, size=k)]
        radii = rng.uniform(ball.radius / 20.0, ball.radius / 4.0, size=k)
        member = np.zeros(atoms_in.size, dtype=bool)
        for c, r in zip(centers, radii):
            member |= np.linalg.norm(pts_in - c[None, :], axis=1) <= r
        sub = atoms_in[member]
        pairs.append((float(pw.weights[sub].sum()) / omega_ball,
                      float(sigma.weights[sub].sum()) / sigma_ball))
        descriptors.append(f"union,k={k},atoms={sub.size}")
    if extra_sets is not None:
        for i, e in enumerate(extra_sets):
            emask = _e_mask(e, npts)
            emask = emask & np.isin(np.arange(npts), atoms_in)
            sub = np.flatnonzero(emask)
            pairs.append((float(pw.weights[sub].sum()) / omega_ball,
                          float(sigma.weights[sub].sum()) / sigma_ball))
            descriptors.append(f"extra,i={i},atoms={sub.size}")
    return ScatterResult(np.asarray(pairs), descriptors, ball, pole,
                         omega_ball, sigma_ball, int(atoms_in.size),
                         pw.iterations, pw.residual)


# -- square function vs suprema ----------------------------------------------


def _masked_gradient_sq(field: GridField) -> np.ndarray:
    """Squared gradient magnitude, one-sided where a neighbor is pinned."""
    u = field.values
    n = u.ndim
    valid = field.mask != MASK_COLLAR
    h = field.h
    total = np.zeros_like(u)
    for a in range(n):
        fr = _axis_slice(n, a, np.s_[:-1])
        bk = _axis_slice(n, a, np.s_[1:])
        vp = np.zeros_like(u)
        hp = np.zeros(u.shape, dtype=bool)
        vm = np.zeros_like(u)
        hm = np.zeros(u.shape, dtype=bool)
        vp[fr] = u[bk]
        hp[fr] = valid[bk]
        vm[bk] = u[fr]
        hm[bk] = valid[fr]
        both = hp & hm
        g = np.where(both, (vp - vm) / (2.0 * h),
                     np.where(hp, (vp - u) / h,
                              np.where(hm, (u - vm) / h, 0.0)))
        total += g * g
    return total


def sn_check(sigma: DiscreteMeasure, ball: Ball,
             config: SolverConfig | None = None, g=None, *,
             h: float | None = None, box=None,
             system: EllipticSystem | None = None,
             warm_start: GridField | None = None,
             solution: SolveResult | None = None) -> SNResult:
    """Square-function mass on a ball against pointwise and cone suprema.

    Solves on a box around 2B, sums the weighted squared gradient over
    non-pinned cells of B, and compares with (sup over 2B)^2 times the
    ball's mass and with the mass-weighted squared cone suprema over the
    atoms in 2B.  Requires at least 32 cells per ball radius.

    Both comparisons hold per ball for one fixed solution, so a solve may
    be shared across balls: pass the assembled ``system`` together with its
    ``solution``, and only the ball-local sums are recomputed.  The grid
    must still cover 2B.
    """
    if config is None:
        config = SolverConfig()
    if g is None and solution is None:
        raise InputError("boundary data g is required")
    r = ball.radius
    if h is None:
        h = system.h if system is not None else r / 32.0
    if h > r / 32.0 * (1.0 + 1e-9):
        raise ResolutionError(
            f"ball must be resolved by at least 32 cells per radius "
            f"(h {h:g} > r/32 = {r / 32:g})")
    if system is None:
        if box is None:
            box = (ball.center, 4.0 * r + 8.0 * h)
        system = assemble(sigma, box, h, config)
    elif system.sigma is not sigma:
        raise InputError("system was assembled for a different measure")

    if solution is None:
        sol = system.solve(g, warm_start=warm_start)
    else:
        if solution.field.shape != tuple(system.shape) or \
                not np.allclose(solution.field.box_lo, system.box_lo):
            raise InputError("solution does not match the system's grid")
        sol = solution
    fld = sol.field
    box_lo = system.box_lo
    box_hi = system.box_lo + np.asarray(system.shape) * system.h
    if np.any(ball.center - 2.0 * r < box_lo - 1e-9 * system.h) or \
            np.any(ball.center + 2.0 * r > box_hi + 1e-9 * system.h):
        raise DomainError("the grid does not cover the doubled ball")
    n = sigma.ambient_dim
    d = sigma.intrinsic_dim

    # restrict to the sub-grid spanning 2B (plus one neighbor layer for
    # the differences) so sharing one big solve across balls stays cheap
    full_ax = fld.axes()
    win = []
    for a in range(n):
        i0 = int(np.searchsorted(full_ax[a], ball.center[a] - 2.0 * r - fld.h))
        i1 = int(np.searchsorted(full_ax[a], ball.center[a] + 2.0 * r + fld.h))
        win.append(slice(max(0, i0 - 1), min(fld.shape[a], i1 + 1)))
    win = tuple(win)
    sub = GridField(np.array([full_ax[a][win[a]][0] - 0.5 * fld.h
                              for a in range(n)]),
                    fld.h, fld.values[win], fld.mask[win])
    grad2 = _masked_gradient_sq(sub)

    ax = sub.axes()
    dist2 = np.zeros(sub.shape)
    for a in range(n):
        sh = [1] * n
        sh[a] = -1
        dist2 = dist2 + ((ax[a] - ball.center[a]) ** 2).reshape(sh)
    noncollar = sub.mask != MASK_COLLAR
    in_b = (dist2 <= r * r) & noncollar
    expo2 = d + 2.0 - n
    if np.any(in_b):
        if expo2 == 0.0:
            wgt = 1.0
        else:
            coords = np.nonzero(in_b)
            centers = np.stack([ax[a][coords[a]] for a in range(n)], axis=1)
            try:
                wgt = distances.regularized_distance(
                    sigma, centers, config.beta) ** expo2
            except ResolutionError as exc:
                raise NumericError(
                    f"gradient-weight evaluation refused: {exc}") from None
        square_fn = float(np.sum(grad2[in_b] * wgt) * fld.h ** n)
    else:
        square_fn = 0.0

    in_2b = dist2 <= 4.0 * r * r
    sup = float(np.abs(sub.values[in_2b]).max()) if in_2b.any() else 0.0
    mass_b = sigma.mass_in_ball(ball.center, r)
    sup_sq = sup * sup * mass_b

    coords = np.nonzero(in_2b)
    cells_2b = np.stack([ax[a][coords[a]] for a in range(n)], axis=1)
    u_2b = sub.values[in_2b]
    vert_gap = np.linalg.norm(sigma.points - ball.center[None, :], axis=1)
    verts = np.flatnonzero(vert_gap <= 2.0 * r)
    if not verts.size:
        raise DomainError("no support atoms inside 2B")
    cones = carleson.ConeFamily(sigma.points[verts], 2.0,
                                Ball(ball.center, 2.0 * r))
    nvals, empty = carleson.ntmax_family((cells_2b, u_2b), sigma, cones)
    nt_sq = float(np.sum(sigma.weights[verts] * nvals ** 2))

    return SNResult(square_fn, float(sup_sq), nt_sq, sup, ball, float(h),
                    sol.iterations, sol.residual, int(in_b.sum()),
                    int(empty.sum()), fld)


# -- persistence -------------------------------------------------------------


def write_field(fld: GridField, bin_path, json_path=None, mask_path=None):
    """Flat float64 dump of the values plus an int8 mask dump and a JSON
    sidecar describing the grid."""
    bin_path = str(bin_path)
    if json_path is None:
        json_path = bin_path + ".json"
    json_path = str(json_path)
    if mask_path is None:
        mask_path = bin_path + ".mask"
    mask_path = str(mask_path)
    fld.values.astype("<f8").ravel().tofile(bin_path)
    fld.mask.astype("int8").ravel().tofile(mask_path)
    base = os.path.dirname(os.path.abspath(json_path))
    sidecar = {
        "dims": list(fld.shape),
        "box_lo": [float(v) for v in fld.box_lo],
        "h": fld.h,
        "order": "C",
        "dtype": "<f8",
        "values_file": os.path.relpath(os.path.abspath(bin_path), base),
        "mask_file": os.path.relpath(os.path.abspath(mask_path), base),
        "mask_dtype": "int8",
        "mask_encoding": {"0": "interior", "1": "collar", "2": "outer"},
    }
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_field(json_path) -> GridField:
    """Load a field written by write_field; data files resolve relative to
    the sidecar."""
    with open(json_path, encoding="utf-8") as fh:
        meta = json.load(fh)
    base = os.path.dirname(os.path.abspath(str(json_path)))
    shape = tuple(meta["dims"])
    values = np.fromfile(os.path.join(base, meta["values_file"]),
                         dtype=meta["dtype"]).reshape(shape)
    mask = np.fromfile(os.path.join(base, meta["mask_file"]),
                       dtype=meta["mask_dtype"]).reshape(shape)
    return GridField(np.asarray(meta["box_lo"]), float(meta["h"]),
                     values, mask)


def write_scatter(result: ScatterResult, csv_path):
    """CSV dump of the ratio pairs, one row per sampled set."""
    lines = ["omega_ratio,sigma_ratio,descriptor"]
    for (om, sg), desc in zip(result.pairs, result.descriptors):
        lines.append(f"{om:.17g},{sg:.17g},{desc}")
    with open(str(csv_path), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
