"""Block SOR for quadratic flow energies on regular grids.

The energy minimised over the increment ``dV`` (one 3-vector per grid point) is

    sum_p dV_p^T M_p dV_p + 2 b_p^T dV_p
  + sum_c sum_k sum_p W[c, k, p] * (V_c(p + e_k) - V_c(p))^2

with ``V = V0 + dV``. ``M`` is stored as the six upper-triangle entries
``(xx, xy, xz, yy, yz, zz)``; ``W[c, k, p]`` weights the forward edge from
``p`` along axis ``k`` for flow component ``c`` (ignored on the last slice,
which gives Neumann boundaries). Components flagged inactive keep their
current increment.
"""

from __future__ import annotations

import numba
import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

__all__ = [
    "QuadraticProblem",
    "CoarseSpace",
    "sor_sweep",
    "sor_solve",
    "quadratic_energy",
    "half_gradient",
    "constant_correction",
    "default_blocks",
]


class QuadraticProblem:
    """Arrays of one linearised problem, flattened to C order."""

    def __init__(self, M: np.ndarray, b: np.ndarray, W: np.ndarray, V0: np.ndarray, active=(True, True, True)):
        shape = V0.shape[:-1]
        n = int(np.prod(shape))
        self.shape = tuple(shape)
        self.M = np.ascontiguousarray(M.reshape(n, 6), dtype=np.float64)
        self.b = np.ascontiguousarray(b.reshape(n, 3), dtype=np.float64)
        self.W = np.ascontiguousarray(W.reshape(3, len(shape), n), dtype=np.float64)
        self.V0 = np.ascontiguousarray(V0.reshape(n, 3), dtype=np.float64)
        self.dims = np.asarray(shape, dtype=np.int64)
        strides = np.ones(len(shape), dtype=np.int64)
        for k in range(len(shape) - 2, -1, -1):
            strides[k] = strides[k + 1] * shape[k + 1]
        self.strides = strides
        self.active = np.asarray(active, dtype=np.bool_)


@numba.njit(cache=True)
def _solve3(a00, a01, a02, a11, a12, a22, r0, r1, r2):
    c00 = a11 * a22 - a12 * a12
    c01 = a02 * a12 - a01 * a22
    c02 = a01 * a12 - a02 * a11
    det = a00 * c00 + a01 * c01 + a02 * c02
    scale = abs(a00) + abs(a11) + abs(a22)
    if scale == 0.0 or abs(det) <= 1e-300 + 1e-14 * scale * scale * scale:
        return False, 0.0, 0.0, 0.0
    c11 = a00 * a22 - a02 * a02
    c12 = a01 * a02 - a00 * a12
    c22 = a00 * a11 - a01 * a01
    x0 = (c00 * r0 + c01 * r1 + c02 * r2) / det
    x1 = (c01 * r0 + c11 * r1 + c12 * r2) / det
    x2 = (c02 * r0 + c12 * r1 + c22 * r2) / det
    return True, x0, x1, x2


@numba.njit(cache=True)
def _sweep(M, b, W, V0, dV, dims, strides, omega, active):
    n = dV.shape[0]
    ndim = dims.shape[0]
    change2 = 0.0
    for p in range(n):
        a00 = M[p, 0]
        a01 = M[p, 1]
        a02 = M[p, 2]
        a11 = M[p, 3]
        a12 = M[p, 4]
        a22 = M[p, 5]
        r0 = -b[p, 0]
        r1 = -b[p, 1]
        r2 = -b[p, 2]
        for k in range(ndim):
            ck = (p // strides[k]) % dims[k]
            if ck < dims[k] - 1:
                q = p + strides[k]
                w = W[0, k, p]
                a00 += w
                r0 += w * (V0[q, 0] + dV[q, 0] - V0[p, 0])
                w = W[1, k, p]
                a11 += w
                r1 += w * (V0[q, 1] + dV[q, 1] - V0[p, 1])
                w = W[2, k, p]
                a22 += w
                r2 += w * (V0[q, 2] + dV[q, 2] - V0[p, 2])
            if ck > 0:
                q = p - strides[k]
                w = W[0, k, q]
                a00 += w
                r0 += w * (V0[q, 0] + dV[q, 0] - V0[p, 0])
                w = W[1, k, q]
                a11 += w
                r1 += w * (V0[q, 1] + dV[q, 1] - V0[p, 1])
                w = W[2, k, q]
                a22 += w
                r2 += w * (V0[q, 2] + dV[q, 2] - V0[p, 2])
        if not active[0]:
            r1 -= a01 * dV[p, 0]
            r2 -= a02 * dV[p, 0]
            a00, a01, a02, r0 = 1.0, 0.0, 0.0, dV[p, 0]
        if not active[1]:
            r0 -= a01 * dV[p, 1]
            r2 -= a12 * dV[p, 1]
            a11, a01, a12, r1 = 1.0, 0.0, 0.0, dV[p, 1]
        if not active[2]:
            r0 -= a02 * dV[p, 2]
            r1 -= a12 * dV[p, 2]
            a22, a02, a12, r2 = 1.0, 0.0, 0.0, dV[p, 2]
        ok, x0, x1, x2 = _solve3(a00, a01, a02, a11, a12, a22, r0, r1, r2)
        if not ok:
            continue
        # inactive components are exact in the solve up to rounding; keep them bit-identical
        d0 = omega * (x0 - dV[p, 0]) if active[0] else 0.0
        d1 = omega * (x1 - dV[p, 1]) if active[1] else 0.0
        d2 = omega * (x2 - dV[p, 2]) if active[2] else 0.0
        dV[p, 0] += d0
        dV[p, 1] += d1
        dV[p, 2] += d2
        change2 += d0 * d0 + d1 * d1 + d2 * d2
    return change2


@numba.njit(cache=True)
def _energy(M, b, W, V0, dV, dims, strides):
    n = dV.shape[0]
    ndim = dims.shape[0]
    e = 0.0
    for p in range(n):
        x0 = dV[p, 0]
        x1 = dV[p, 1]
        x2 = dV[p, 2]
        e += (M[p, 0] * x0 * x0 + M[p, 3] * x1 * x1 + M[p, 5] * x2 * x2
              + 2.0 * (M[p, 1] * x0 * x1 + M[p, 2] * x0 * x2 + M[p, 4] * x1 * x2)
              + 2.0 * (b[p, 0] * x0 + b[p, 1] * x1 + b[p, 2] * x2))
        for k in range(ndim):
            ck = (p // strides[k]) % dims[k]
            if ck < dims[k] - 1:
                q = p + strides[k]
                for c in range(3):
                    d = V0[q, c] + dV[q, c] - V0[p, c] - dV[p, c]
                    e += W[c, k, p] * d * d
    return e


def quadratic_energy(prob: QuadraticProblem, dV: np.ndarray) -> float:
    """Value of the quadratic model at increment ``dV`` (constant term omitted)."""
    return float(_energy(prob.M, prob.b, prob.W, prob.V0, dV.reshape(-1, 3), prob.dims, prob.strides))


def sor_sweep(prob: QuadraticProblem, dV: np.ndarray, omega: float = 1.9) -> float:
    """One lexicographic block-SOR sweep in place; returns the L2 norm of the update."""
    if not 0.0 < omega < 2.0:
        raise ValueError("omega must lie in (0, 2)")
    if not (dV.flags.c_contiguous and dV.dtype == np.float64):
        raise ValueError("dV must be a C-contiguous float64 array")
    flat = dV.reshape(-1, 3)
    return float(np.sqrt(_sweep(prob.M, prob.b, prob.W, prob.V0, flat, prob.dims, prob.strides, omega,
                                 prob.active)))


@numba.njit(cache=True)
def _gradient(M, b, W, V0, dV, dims, strides):
    """Half the energy gradient: ``M dV + b + sum_edges W (V_p - V_q)``."""
    n = dV.shape[0]
    ndim = dims.shape[0]
    g = np.empty((n, 3))
    for p in range(n):
        x0 = dV[p, 0]
        x1 = dV[p, 1]
        x2 = dV[p, 2]
        g[p, 0] = M[p, 0] * x0 + M[p, 1] * x1 + M[p, 2] * x2 + b[p, 0]
        g[p, 1] = M[p, 1] * x0 + M[p, 3] * x1 + M[p, 4] * x2 + b[p, 1]
        g[p, 2] = M[p, 2] * x0 + M[p, 4] * x1 + M[p, 5] * x2 + b[p, 2]
    for p in range(n):
        for k in range(ndim):
            ck = (p // strides[k]) % dims[k]
            if ck < dims[k] - 1:
                q = p + strides[k]
                for c in range(3):
                    d = W[c, k, p] * (V0[p, c] + dV[p, c] - V0[q, c] - dV[q, c])
                    g[p, c] += d
                    g[q, c] -= d
    return g


def half_gradient(prob: QuadraticProblem, dV: np.ndarray) -> np.ndarray:
    """Half the gradient of :func:`quadratic_energy` with respect to ``dV``, shaped ``(n, 3)``."""
    return _gradient(prob.M, prob.b, prob.W, prob.V0, dV.reshape(-1, 3), prob.dims, prob.strides)


class CoarseSpace:
    """Exact energy minimisation over piecewise-constant increments on grid blocks.

    Args:
        prob: Linearised problem.
        blocks: Block size per grid axis; ``None`` spans the axis. All-``None``
            gives a single global shift.

    The Galerkin matrix is assembled once; each :meth:`correct` call adds the
    block-constant increment that minimises the quadratic energy, so it can
    only lower it. It removes the smooth error modes that pointwise
    relaxation reduces slowly.
    """

    def __init__(self, prob: QuadraticProblem, blocks):
        shape = prob.shape
        coords = np.indices(shape).reshape(len(shape), -1)
        nblocks = []
        ids = np.zeros(coords.shape[1], dtype=np.int64)
        for k, n in enumerate(shape):
            size = n if blocks[k] is None else max(1, int(blocks[k]))
            nb = -(-n // size)
            ids = ids * nb + coords[k] // size
            nblocks.append(nb)
        self.labels = ids
        self.n_agg = int(np.prod(nblocks))
        act = np.flatnonzero(prob.active)
        self.active = act
        na = self.n_agg
        rows, cols, vals = [], [], []
        # data part: per-aggregate sums of the 3x3 point matrices
        agg = np.arange(na)
        pairs = ((0, 0, 0), (0, 1, 1), (0, 2, 2), (1, 1, 3), (1, 2, 4), (2, 2, 5))
        for c, d, j in pairs:
            s = np.bincount(ids, weights=prob.M[:, j], minlength=na)
            rows.append(c * na + agg), cols.append(d * na + agg), vals.append(s)
            if c != d:
                rows.append(d * na + agg), cols.append(c * na + agg), vals.append(s)
        # smoothness part: only edges joining different aggregates survive
        for k in range(len(shape)):
            has_next = coords[k] < shape[k] - 1
            p = np.flatnonzero(has_next)
            q = p + prob.strides[k]
            J, K = ids[p], ids[q]
            cross = J != K
            p, J, K = p[cross], J[cross], K[cross]
            for c in range(3):
                w = prob.W[c, k, p]
                J3, K3 = c * na + J, c * na + K
                rows += [J3, K3, J3, K3]
                cols += [J3, K3, K3, J3]
                vals += [w, w, -w, -w]
        H = sparse.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                              shape=(3 * na, 3 * na)).tocsc()
        sel = np.concatenate([c * na + agg for c in act]) if len(act) else np.zeros(0, dtype=np.int64)
        self.sel = sel
        self._solve = None
        if len(sel):
            Hs = H[sel][:, sel]
            diag = Hs.diagonal()
            # a relative ridge keeps aggregates without data or coupling solvable; since the zero
            # correction stays feasible, the ridged minimiser still never raises the energy
            ridge = 1e-12 * max(diag.max(initial=0.0), 1e-300)
            self._solve = splu((Hs + ridge * sparse.identity(len(sel), format="csc")).tocsc()).solve
        self.prob = prob

    def correct(self, dV: np.ndarray) -> float:
        """Apply the correction in place; returns the L2 norm of the change."""
        if not len(self.sel):
            return 0.0
        flat = dV.reshape(-1, 3)
        g = half_gradient(self.prob, dV)
        na = self.n_agg
        r = np.concatenate([np.bincount(self.labels, weights=g[:, c], minlength=na) for c in range(3)])[self.sel]
        y = -self._solve(r)
        full = np.zeros(3 * na)
        full[self.sel] = y
        step = full.reshape(3, na)[:, self.labels].T
        flat += step
        return float(np.linalg.norm(step))


def constant_correction(prob: QuadraticProblem, dV: np.ndarray) -> np.ndarray:
    """Add the exact minimising uniform shift to ``dV``; returns the shift."""
    before = dV.reshape(-1, 3)[0].copy()
    CoarseSpace(prob, (None,) * len(prob.shape)).correct(dV)
    return dV.reshape(-1, 3)[0] - before


def default_blocks(shape, target: int = 24):
    """Block sizes giving roughly ``target`` aggregates along each of the last two axes.

    Leading axes (the camera grid of a 4D problem) form a single block.
    """
    lead = [None] * (len(shape) - 2)
    return tuple(lead + [max(1, -(-n // target)) for n in shape[-2:]])


def sor_solve(prob: QuadraticProblem, dV: np.ndarray | None = None, omega: float = 1.9,
              max_iters: int = 200, tol: float = 1e-4, blocks="auto"):
    """Alternate SOR sweeps and coarse corrections until the relative update drops below ``tol``.

    Args:
        prob: Linearised problem.
        dV: Starting increment (zero by default).
        omega: Relaxation factor in (0, 2).
        max_iters: Maximum number of sweeps.
        tol: Stop when ``|update| <= tol * |V0 + dV|``.
        blocks: Coarse-space block sizes, ``"auto"`` for :func:`default_blocks`,
            or ``None`` to disable coarse corrections.

    Returns:
        ``(dV, sweeps, converged)`` with ``dV`` shaped like ``V0``.
    """
    if dV is None:
        dV = np.zeros(prob.shape + (3,))
    dV = np.ascontiguousarray(dV, dtype=np.float64)
    if isinstance(blocks, str):
        blocks = default_blocks(prob.shape)
    coarse = CoarseSpace(prob, blocks) if blocks is not None else None
    converged = False
    sweeps = 0
    for sweeps in range(1, max_iters + 1):
        step = sor_sweep(prob, dV, omega)
        if coarse is not None:
            step = np.hypot(step, coarse.correct(dV))
        ref = np.linalg.norm(prob.V0 + dV.reshape(-1, 3))
        if step <= tol * max(ref, 1e-12):
            converged = True
            break
    return dV, sweeps, converged
