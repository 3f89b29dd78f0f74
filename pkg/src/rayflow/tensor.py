"""Light-field structure tensor, rank classification and normal flow."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .lfcore import MotionVector, RayCoord, RayGradients

__all__ = [
    "RankClass",
    "StructureTensor",
    "Subspace",
    "eig3",
    "window_sum",
    "window_bounds",
    "structure_tensor",
    "classify",
    "recoverable_subspace",
    "normal_flow",
    "default_tau_abs",
    "tensor_maps",
    "DEFAULT_TAU",
]

DEFAULT_TAU = 0.02


class RankClass(enum.IntEnum):
    SMOOTH = 0
    EDGE = 2
    FULL_TEXTURE = 3


# --- closed-form symmetric 3x3 eigen-decomposition ----------------------------------------------


def _cross(a, b):
    return np.stack([
        a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1],
        a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2],
        a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0],
    ], axis=-1)


def _dot(a, b):
    return np.einsum("...i,...i->...", a, b)


def _eigenvector0(A, lam):
    """Unit null vector of ``A - lam I`` from the largest row cross product."""
    M = A - lam[..., None, None] * np.eye(3)
    r0, r1, r2 = M[..., 0, :], M[..., 1, :], M[..., 2, :]
    c = np.stack([_cross(r0, r1), _cross(r0, r2), _cross(r1, r2)], axis=-2)
    n2 = _dot(c, c)
    best = np.argmax(n2, axis=-1)
    vec = np.take_along_axis(c, best[..., None, None], axis=-2)[..., 0, :]
    norm = np.sqrt(np.take_along_axis(n2, best[..., None], axis=-1)[..., 0])
    degenerate = norm == 0
    safe = np.where(degenerate, 1.0, norm)
    vec = vec / safe[..., None]
    vec[degenerate] = (1.0, 0.0, 0.0)
    return vec


def _complement(w):
    use_x = np.abs(w[..., 0]) > np.abs(w[..., 1])
    inv_a = 1.0 / np.sqrt(np.maximum(w[..., 0] ** 2 + w[..., 2] ** 2, 1e-300))
    inv_b = 1.0 / np.sqrt(np.maximum(w[..., 1] ** 2 + w[..., 2] ** 2, 1e-300))
    zero = np.zeros_like(inv_a)
    ua = np.stack([-w[..., 2] * inv_a, zero, w[..., 0] * inv_a], axis=-1)
    ub = np.stack([zero, w[..., 2] * inv_b, -w[..., 1] * inv_b], axis=-1)
    u = np.where(use_x[..., None], ua, ub)
    return u, _cross(w, u)


def _complement_pair(A, w):
    """Closed-form eigenpairs of ``A`` restricted to the plane orthogonal to unit ``w``."""
    U, V = _complement(w)
    AU = np.einsum("...ij,...j->...i", A, U)
    AV = np.einsum("...ij,...j->...i", A, V)
    a, b, d = _dot(U, AU), _dot(U, AV), _dot(V, AV)
    mean = 0.5 * (a + d)
    radius = np.hypot(0.5 * (a - d), b)
    theta = 0.5 * np.arctan2(2.0 * b, a - d)
    c, s = np.cos(theta)[..., None], np.sin(theta)[..., None]
    return mean + radius, mean - radius, c * U + s * V, c * V - s * U


def eig3(S: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of symmetric 3x3 matrices (``(..., 3, 3)``).

    Returns eigenvalues sorted descending ``(..., 3)`` and matching unit
    eigenvectors as columns ``(..., 3, 3)``. The trigonometric solution of the
    characteristic polynomial locates the best-separated eigenvalue, whose
    eigenvector comes from row cross products; the remaining pair is solved
    exactly in its orthogonal complement, which keeps repeated eigenvalues
    accurate to rounding.
    """
    S = np.asarray(S, dtype=np.float64)
    scale = np.max(np.abs(S), axis=(-2, -1))
    safe = np.where(scale > 0, scale, 1.0)
    A = S / safe[..., None, None]
    a00, a11, a22 = A[..., 0, 0], A[..., 1, 1], A[..., 2, 2]
    a01, a02, a12 = A[..., 0, 1], A[..., 0, 2], A[..., 1, 2]
    q = (a00 + a11 + a22) / 3.0
    b00, b11, b22 = a00 - q, a11 - q, a22 - q
    p2 = (b00 ** 2 + b11 ** 2 + b22 ** 2 + 2.0 * (a01 ** 2 + a02 ** 2 + a12 ** 2)) / 6.0
    p = np.sqrt(p2)
    isotropic = p == 0
    ps = np.where(isotropic, 1.0, p)
    det = (b00 * (b11 * b22 - a12 * a12) - a01 * (a01 * b22 - a12 * a02) + a02 * (a01 * a12 - b11 * a02))
    r = np.clip(det / (2.0 * ps ** 3), -1.0, 1.0)
    phi = np.arccos(r) / 3.0
    l1 = q + 2.0 * p * np.cos(phi)
    l3 = q + 2.0 * p * np.cos(phi + 2.0 * math.pi / 3.0)
    l2 = 3.0 * q - l1 - l3

    top_first = (l1 - l2) >= (l2 - l3)
    first = np.where(top_first[..., None], _eigenvector0(A, l1), _eigenvector0(A, l3))
    lam_first = _dot(first, np.einsum("...ij,...j->...i", A, first))
    hi, lo, e_hi, e_lo = _complement_pair(A, first)
    tf = top_first[..., None]
    vals = np.where(tf, np.stack([lam_first, hi, lo], axis=-1), np.stack([hi, lo, lam_first], axis=-1))
    vecs = np.where(tf[..., None], np.stack([first, e_hi, e_lo], axis=-1),
                    np.stack([e_hi, e_lo, first], axis=-1))
    # rounding can swap nearly equal neighbours; restore the descending order
    order = np.argsort(-vals, axis=-1, kind="stable")
    vals = np.take_along_axis(vals, order, axis=-1)
    vecs = np.take_along_axis(vecs, order[..., None, :], axis=-1)
    vals = np.where(isotropic[..., None], q[..., None], vals)
    vecs[isotropic] = np.eye(3)
    return vals * scale[..., None], vecs


# --- windows ---------------------------------------------------------------------------------


def window_bounds(shape, window: Sequence[int | None], center: Sequence[int]):
    """Index slices of a box window (sizes; ``None`` = full axis) clipped to the grid."""
    slices = []
    for n, size, c in zip(shape, window, center):
        if size is None or size >= 2 * n:
            slices.append(slice(0, n))
            continue
        half = int(size) // 2
        lo = max(int(c) - half, 0)
        hi = min(int(c) - half + int(size), n)
        slices.append(slice(lo, hi))
    return tuple(slices)


def window_sum(arr: np.ndarray, window: Sequence[int | None], axes=(0, 1, 2, 3)) -> np.ndarray:
    """Sum of ``arr`` over a centred box window at every grid point.

    Windows are truncated at the grid boundary (no padding). A ``None``
    size sums over the whole axis, which is broadcast back.
    """
    out = np.asarray(arr, dtype=np.float64)
    for axis, size in zip(axes, window):
        n = out.shape[axis]
        if size is None or size >= 2 * n:
            out = np.broadcast_to(out.sum(axis=axis, keepdims=True), out.shape)
            continue
        size = int(size)
        if size <= 1:
            continue
        half = size // 2
        csum = np.cumsum(out, axis=axis)
        zero_shape = list(out.shape)
        zero_shape[axis] = 1
        csum = np.concatenate([np.zeros(zero_shape), csum], axis=axis)
        idx = np.arange(n)
        hi = np.clip(idx - half + size, 0, n)
        lo = np.clip(idx - half, 0, n)
        out = np.take(csum, hi, axis=axis) - np.take(csum, lo, axis=axis)
    return np.ascontiguousarray(out)


# --- structure tensor ------------------------------------------------------------------------


@dataclass(frozen=True)
class StructureTensor:
    s: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray  # columns
    center: tuple[int, int, int, int] | None = None
    window: tuple | None = None
    n_rays: int = 0

    @classmethod
    def from_matrix(cls, s, center=None, window=None, n_rays: int = 0) -> "StructureTensor":
        s = np.asarray(s, dtype=np.float64)
        vals, vecs = eig3(s)
        return cls(s=s, eigenvalues=vals, eigenvectors=vecs, center=center, window=window, n_rays=n_rays)


def _center_index(center) -> tuple[int, int, int, int]:
    if isinstance(center, RayCoord):
        if None in (center.ix, center.iy, center.iu, center.iv):
            raise ValueError("window centre needs grid indices")
        return (center.ix, center.iy, center.iu, center.iv)
    return tuple(int(c) for c in center)


def structure_tensor(grads: RayGradients, window: Sequence[int | None], center,
                     weights: np.ndarray | None = None) -> StructureTensor:
    """``S = sum_i g_i g_i^T`` over a box window of rays, ``g = (L_X, L_Y, L_Z)``."""
    c = _center_index(center)
    sl = window_bounds(grads.lx.shape, window, c)
    g = np.stack([grads.lx[sl], grads.ly[sl], grads.lz[sl]], axis=-1).reshape(-1, 3)
    if g.shape[0] == 0:
        raise ValueError("empty structure tensor window")
    if weights is not None:
        w = np.asarray(weights)[sl].reshape(-1)
        s = (g * w[:, None]).T @ g
    else:
        s = g.T @ g
    return StructureTensor.from_matrix(s, center=c, window=tuple(window), n_rays=g.shape[0])


def default_tau_abs(n_rays: int, dynamic_range: float = 1.0) -> float:
    return 1e-6 * max(n_rays, 1) * dynamic_range ** 2


def classify(st: StructureTensor, tau: float = DEFAULT_TAU, tau_abs: float | None = None) -> RankClass:
    """Smooth / Edge / FullTexture from the eigenvalue spectrum; never rank 1."""
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")
    if tau_abs is None:
        tau_abs = default_tau_abs(st.n_rays)
    l1, _, l3 = st.eigenvalues
    if l1 < tau_abs:
        return RankClass.SMOOTH
    if l3 >= tau * l1:
        return RankClass.FULL_TEXTURE
    return RankClass.EDGE


class Subspace(NamedTuple):
    basis: np.ndarray  # (k, 3) orthonormal rows
    non_physical: bool  # True for a single-direction spectrum, which a real window cannot produce


def recoverable_subspace(st: StructureTensor, tau: float = DEFAULT_TAU,
                         tau_abs: float | None = None) -> Subspace:
    """Eigenvectors whose eigenvalue passes ``tau * lambda_1`` (empty for smooth windows)."""
    if tau_abs is None:
        tau_abs = default_tau_abs(st.n_rays)
    l1 = st.eigenvalues[0]
    if l1 < tau_abs:
        return Subspace(np.zeros((0, 3)), False)
    keep = st.eigenvalues >= tau * l1
    basis = st.eigenvectors[:, keep].T
    return Subspace(basis, basis.shape[0] == 1)


def normal_flow(g: Sequence[float], lt: float) -> MotionVector:
    """Minimum-norm solution ``-L_t g / |g|^2`` of a single ray flow equation."""
    g = np.asarray(g, dtype=np.float64)
    n2 = float(g @ g)
    if n2 == 0.0:
        raise ValueError("normal flow is undefined for a zero gradient")
    v = -float(lt) * g / n2
    return MotionVector(*v)


def tensor_maps(grads: RayGradients, window=(None, None, 9, 9), tau: float = DEFAULT_TAU,
                tau_abs: float | None = None, view: tuple[int, int] | None = None):
    """Per-pixel eigenvalues and rank classes for one sub-aperture view.

    Returns ``(eigenvalues (n_u, n_v, 3), ranks (n_u, n_v), n_rays (n_u, n_v))``.
    """
    calib = grads.calib
    ix, iy = view if view is not None else calib.center_view
    prods = _outer_products(grads)
    sums = {k: window_sum(v, window)[ix, iy] for k, v in prods.items()}
    n_rays = window_sum(np.ones(calib.shape), window)[ix, iy]
    S = _assemble(sums)
    vals, _ = eig3(S)
    if tau_abs is None:
        floor = 1e-6 * n_rays
    else:
        floor = np.full(n_rays.shape, tau_abs)
    ranks = np.where(vals[..., 0] < floor, RankClass.SMOOTH,
                     np.where(vals[..., 2] >= tau * vals[..., 0], RankClass.FULL_TEXTURE, RankClass.EDGE))
    return vals, ranks.astype(np.int8), n_rays


def _outer_products(grads: RayGradients, weights=None):
    lx, ly, lz = grads.lx, grads.ly, grads.lz
    if weights is not None:
        w = weights
    else:
        w = 1.0
    return {
        "xx": w * lx * lx, "xy": w * lx * ly, "xz": w * lx * lz,
        "yy": w * ly * ly, "yz": w * ly * lz, "zz": w * lz * lz,
    }


def _assemble(sums) -> np.ndarray:
    return np.stack([
        np.stack([sums["xx"], sums["xy"], sums["xz"]], axis=-1),
        np.stack([sums["xy"], sums["yy"], sums["yz"]], axis=-1),
        np.stack([sums["xz"], sums["yz"], sums["zz"]], axis=-1),
    ], axis=-2)
