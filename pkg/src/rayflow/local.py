"""Local "Lucas-Kanade" ray flow: window solves, dense estimation, pyramidal registration."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .flowfield import FlowField, Layout
from .lfcore import (LightField, MotionVector, RayGradients, build_pyramid, compute_gradients,
                     prefilter, resample_uv, warp)
from .tensor import (RankClass, StructureTensor, _assemble, _outer_products, classify, default_tau_abs,
                     eig3, window_bounds, window_sum)

log = logging.getLogger(__name__)

__all__ = [
    "LKParams",
    "LKSystem",
    "LKResult",
    "lk_system",
    "lk_window",
    "lk_dense",
    "lk_pyramidal",
    "solve_subspace",
    "usable_rays",
]


@dataclass
class LKParams:
    """Settings for dense and pyramidal local ray flow.

    ``window`` holds box sizes along ``(x, y, u, v)``; ``None`` spans the whole
    axis. ``tau`` is the relative eigenvalue threshold below which a direction
    is treated as unrecoverable.
    """

    window: tuple = (None, None, 13, 13)
    weighting: str = "box"  # or "gaussian"
    tau: float = 1e-4
    tau_abs: float | None = None
    levels: int = 3
    factor: float = 0.5
    warp_iters: int = 3
    prefilter_sigma: tuple[float, float, float, float] = (0.0, 0.0, 1.0, 1.0)
    stride: int = 1

    def __post_init__(self):
        if self.weighting not in ("box", "gaussian"):
            raise ValueError("weighting must be 'box' or 'gaussian'")
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")


@dataclass
class LKSystem:
    """Stacked ray flow equations ``A V = b`` of one window."""

    A: np.ndarray  # (n, 3)
    b: np.ndarray  # (n,)
    weights: np.ndarray | None = None

    def normal_equations(self):
        w = np.ones(len(self.b)) if self.weights is None else self.weights
        Aw = self.A * w[:, None]
        return Aw.T @ self.A, Aw.T @ self.b


@dataclass
class LKResult:
    motion: MotionVector | None
    tensor: StructureTensor
    rank: RankClass
    confidence: float


def lk_system(grads: RayGradients, window, center, weights=None) -> LKSystem:
    sl = window_bounds(grads.lx.shape, window, center)
    A = np.stack([grads.lx[sl], grads.ly[sl], grads.lz[sl]], axis=-1).reshape(-1, 3)
    b = -grads.lt[sl].reshape(-1)
    w = None if weights is None else np.asarray(weights)[sl].reshape(-1)
    if A.shape[0] == 0:
        raise ValueError("empty window")
    return LKSystem(A, b, w)


def solve_subspace(vals: np.ndarray, vecs: np.ndarray, rhs: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Minimum-norm solution restricted to the eigen-directions flagged in ``keep``.

    ``vals`` (..., 3), ``vecs`` (..., 3, 3) columns, ``rhs`` (..., 3) = ``A^T b``.
    """
    proj = np.einsum("...ji,...j->...i", vecs, rhs)
    with np.errstate(divide="ignore", invalid="ignore"):
        coef = np.where(keep, proj / np.where(keep, vals, 1.0), 0.0)
    return np.einsum("...ij,...j->...i", vecs, coef)


def _confidence(vals: np.ndarray, rank: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(vals[..., 0] > 0, vals[..., 2] / vals[..., 0], 0.0)
    return np.where(rank == RankClass.FULL_TEXTURE, ratio,
                    np.where(rank == RankClass.EDGE, 0.5 * ratio, 0.0))


def lk_window(grads: RayGradients, window, center, tau: float = 1e-4, tau_abs: float | None = None,
              weights=None) -> LKResult:
    """Least-squares motion of one window via its structure tensor.

    Rank-deficient windows are solved in their recoverable subspace
    (minimum-norm); smooth windows return ``motion=None``.
    """
    system = lk_system(grads, window, center, weights)
    S, rhs = system.normal_equations()
    st = StructureTensor.from_matrix(S, center=tuple(center), window=tuple(window), n_rays=len(system.b))
    if tau_abs is None:
        tau_abs = default_tau_abs(st.n_rays)
    rank = classify(st, tau, tau_abs)
    if rank == RankClass.SMOOTH:
        return LKResult(None, st, rank, 0.0)
    keep = st.eigenvalues >= tau * st.eigenvalues[0]
    v = solve_subspace(st.eigenvalues, st.eigenvectors, rhs, keep)
    conf = float(_confidence(st.eigenvalues[None], np.array([rank]))[0])
    return LKResult(MotionVector(*v), st, rank, conf)


def _windowed(arr: np.ndarray, window, weighting: str) -> np.ndarray:
    if weighting == "box":
        return window_sum(arr, window)
    out = np.asarray(arr, dtype=np.float64)
    for axis, size in enumerate(window):
        if size is None:
            out = np.broadcast_to(out.sum(axis=axis, keepdims=True), out.shape)
        elif size > 1:
            sigma = size / 4.0
            out = gaussian_filter1d(out, sigma, axis=axis, mode="constant", truncate=(size // 2) / sigma)
    return np.ascontiguousarray(out)


def lk_dense(grads: RayGradients, window=(None, None, 13, 13), mask: np.ndarray | None = None,
             tau: float = 1e-4, tau_abs: float | None = None, weighting: str = "box") -> FlowField:
    """Window solve at every ray.

    Rays outside ``mask`` contribute no equations but still receive the
    solution of the window centred on them; a window is invalid when it is
    smooth or holds fewer than three usable rays.
    """
    calib = grads.calib
    g = grads if mask is None else grads.masked(mask)
    count_src = np.ones(calib.shape) if mask is None else np.asarray(mask, dtype=np.float64)
    # windows spanning the whole angular grid give identical systems for every camera
    reduce_xy = window[0] is None and window[1] is None
    prods = _outer_products(g)
    prods["bx"] = -g.lx * g.lt
    prods["by"] = -g.ly * g.lt
    prods["bz"] = -g.lz * g.lt
    if reduce_xy:
        uv_window = [1, 1] + list(window[2:])
        sums = {k: _windowed(v.sum(axis=(0, 1), keepdims=True), uv_window, weighting)[0, 0]
                for k, v in prods.items()}
        n_rays = window_sum(count_src.sum(axis=(0, 1)), window[2:], axes=(0, 1))
    else:
        sums = {k: _windowed(v, window, weighting) for k, v in prods.items()}
        n_rays = window_sum(count_src, window)
    S = _assemble(sums)
    rhs = np.stack([sums["bx"], sums["by"], sums["bz"]], axis=-1)
    vals, vecs = eig3(S)
    floor = 1e-6 * n_rays if tau_abs is None else np.full(n_rays.shape, float(tau_abs))
    smooth = (vals[..., 0] < floor) | (n_rays < 3)
    keep = (vals >= tau * vals[..., :1]) & ~smooth[..., None]
    vec = solve_subspace(vals, vecs, rhs, keep)
    rank = np.where(smooth, RankClass.SMOOTH,
                    np.where(keep[..., 2], RankClass.FULL_TEXTURE, RankClass.EDGE))
    conf = _confidence(vals, rank)
    valid = ~smooth
    if reduce_xy:
        shape = calib.shape
        vec = np.broadcast_to(vec, shape + (3,)).copy()
        valid = np.broadcast_to(valid, shape).copy()
        conf = np.broadcast_to(conf, shape).copy()
    vec[~valid] = 0.0
    return FlowField(vec, valid, Layout.FULL_RAY, conf)


def usable_rays(inside: np.ndarray) -> np.ndarray:
    """Rays whose warped sample and x/y gradient stencil all lie inside the aperture."""
    ok = inside.copy()
    ok[1:] &= inside[:-1]
    ok[:-1] &= inside[1:]
    ok[:, 1:] &= inside[:, :-1]
    ok[:, :-1] &= inside[:, 1:]
    return ok


def lk_pyramidal(lf0: LightField, lf1: LightField, params: LKParams | None = None,
                 init: np.ndarray | None = None) -> FlowField:
    """Coarse-to-fine Gauss-Newton registration of ``lf1`` onto ``lf0``.

    Each level warps ``lf1`` by the current per-ray flow, re-linearises and
    adds a dense LK increment. Flow is metric, so moving between levels only
    resamples it. Iteration stops early if the mean absolute residual grows
    twice in a row; the best iterate is kept.
    """
    p = params or LKParams()
    f0 = prefilter(lf0, p.prefilter_sigma)
    f1 = prefilter(lf1, p.prefilter_sigma)
    pyr0 = build_pyramid(f0, p.levels, p.factor)
    pyr1 = build_pyramid(f1, len(pyr0), p.factor)
    flow = None
    conf = None
    prev_calib = None
    for level in range(len(pyr0) - 1, -1, -1):
        L0, L1 = pyr0[level], pyr1[level]
        calib = L0.calib
        if flow is None:
            flow = np.zeros(calib.shape + (3,)) if init is None else np.broadcast_to(init, calib.shape + (3,)).copy()
        else:
            flow = resample_uv(flow, prev_calib, calib)
        best = (np.inf, flow.copy())
        increases = 0
        last = np.inf
        for it in range(p.warp_iters):
            warped, inside = warp(L1, flow)
            use = usable_rays(inside)
            grads = compute_gradients(L0, warped)
            resid = float(np.abs(grads.lt[use]).mean()) if use.any() else np.inf
            if resid < best[0]:
                best = (resid, flow.copy())
            increases = increases + 1 if resid > last else 0
            last = resid
            if increases >= 2:
                log.debug("level %d: residual grew twice, keeping best iterate", level)
                break
            step = lk_dense(grads, p.window, mask=use, tau=p.tau, tau_abs=p.tau_abs, weighting=p.weighting)
            flow = flow + np.where(step.valid[..., None], step.vectors, 0.0)
            conf = step.confidence
        else:
            warped, inside = warp(L1, flow)
            use = usable_rays(inside)
            resid = float(np.abs((warped.data - L0.data)[use]).mean()) if use.any() else np.inf
            if resid < best[0]:
                best = (resid, flow.copy())
        flow = best[1]
        prev_calib = calib
    _, inside = warp(pyr1[0], flow)
    valid = inside & (conf > 0 if conf is not None else True)
    flow = np.where(valid[..., None], flow, 0.0)
    return FlowField(flow, valid, Layout.FULL_RAY, conf)
