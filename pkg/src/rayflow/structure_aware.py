"""Structure-aware global ray flow on the central view.

Every central-view pixel gathers the rays of its disparity plane (the rays of
all cameras that see the same scene point), weights them by camera distance
and disparity agreement, and stacks their ray flow equations into one data
term. An edge-aware Charbonnier smoothness term couples neighbouring pixels.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import generic_filter, uniform_filter

from .flowfield import FlowField, Layout, SolveStatus
from .lfcore import (Calibration, LightField, RayGradients, build_pyramid, compute_gradients, interpolate,
                     prefilter, resample_uv, warp)
from .sor import QuadraticProblem, sor_solve
from .variational import ConvergenceWarning, GlobalParams, forward_differences

log = logging.getLogger(__name__)

# (lam, lam_z): the plane data term sums many rays per pixel, so it needs
# stronger smoothing than the per-ray global solver
SAG_WEIGHTS = (0.8, 0.1)

__all__ = [
    "SAG_WEIGHTS",
    "DisparityMap",
    "PlaneSample",
    "PlaneSamples",
    "SAGWeights",
    "estimate_disparity",
    "gather_plane",
    "gather_planes",
    "sag_weight_maps",
    "sag_energy",
    "sag_problem",
    "sag_solve",
    "ray_flow_from_central",
]


@dataclass(frozen=True)
class DisparityMap:
    """Central-view disparity ``alpha = gamma / Z`` with a per-pixel confidence.

    Values are clamped to ``[alpha_min, alpha_max]`` so that ``d_alpha = 1 / alpha``
    stays finite.
    """

    alpha: np.ndarray
    confidence: np.ndarray | None = None
    alpha_min: float = 0.05
    alpha_max: float = 2.0

    def __post_init__(self):
        if not 0 < self.alpha_min < self.alpha_max:
            raise ValueError("need 0 < alpha_min < alpha_max")
        a = np.clip(np.asarray(self.alpha, dtype=np.float64), self.alpha_min, self.alpha_max)
        object.__setattr__(self, "alpha", a)
        if self.confidence is None:
            object.__setattr__(self, "confidence", np.ones_like(a))

    @property
    def d_alpha(self) -> np.ndarray:
        return 1.0 / self.alpha

    @classmethod
    def from_depth(cls, depth, calib: Calibration, z_range=(100.0, 2000.0)) -> "DisparityMap":
        return cls(calib.gamma / np.asarray(depth, dtype=np.float64), None,
                   calib.gamma / z_range[1], calib.gamma / z_range[0])

    def resampled(self, src: Calibration, dst: Calibration) -> "DisparityMap":
        """Same map on another level's pixel grid (disparity is dimensionless)."""
        a = resample_uv(self.alpha, src, dst, axes=(0, 1))
        c = resample_uv(self.confidence, src, dst, axes=(0, 1))
        return replace(self, alpha=a, confidence=c)

    def with_noise(self, rel_sigma: float, seed: int = 0) -> "DisparityMap":
        """Copy with multiplicative Gaussian noise of relative std ``rel_sigma``."""
        rng = np.random.default_rng(seed)
        return replace(self, alpha=self.alpha * (1.0 + rel_sigma * rng.standard_normal(self.alpha.shape)))


@dataclass
class SAGWeights:
    """Bandwidths of the plane weights and the smoothness weight map.

    Attributes:
        sigma_g: Plane-distance bandwidth in (u, v) pixels.
        sigma_o: Disparity-agreement bandwidth in units of ``d_alpha``; ``None``
            means ``0.1 * mean(d_alpha)``.
        sigma_c: Flow-gradient bandwidth in mm per pixel.
        sigma_d: ``d_alpha`` gradient bandwidth per pixel; ``None`` means
            ``0.1 * mean(d_alpha)``.
        lam, lam_z: Smoothness weights; ``None`` defers to :class:`GlobalParams`,
            then to :data:`SAG_WEIGHTS`.
        first_pass_z: Solve all three components in the first pass (then drop Z)
            instead of holding V_Z at zero.
    """

    sigma_g: float = 1.5
    sigma_o: float | None = None
    sigma_c: float = 0.05
    sigma_d: float | None = None
    lam: float | None = None
    lam_z: float | None = None
    first_pass_z: bool = False

    def __post_init__(self):
        for name in ("sigma_g", "sigma_o", "sigma_c", "sigma_d", "lam", "lam_z"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValueError(f"{name} must be positive")

    def resolved(self, dmap: DisparityMap) -> "SAGWeights":
        mean_d = float(np.mean(dmap.d_alpha))
        return replace(self,
                       sigma_o=self.sigma_o if self.sigma_o is not None else 0.1 * mean_d,
                       sigma_d=self.sigma_d if self.sigma_d is not None else 0.1 * mean_d)


# --- disparity ------------------------------------------------------------------------------


def _camera_offsets(calib: Calibration):
    cx, cy = calib.center_view
    dx = calib.x_coords() - calib.x_coords()[cx]
    dy = calib.y_coords() - calib.y_coords()[cy]
    return dx[:, None, None, None], dy[None, :, None, None]


def _plane_positions(calib: Calibration, alpha: np.ndarray):
    """Continuous (iu, iv) indices of every camera's ray on each pixel's disparity plane."""
    dx, dy = _camera_offsets(calib)
    iu = np.arange(calib.n_u, dtype=np.float64)[None, None, :, None]
    iv = np.arange(calib.n_v, dtype=np.float64)[None, None, None, :]
    a = alpha[None, None]
    return iu - a * dx / calib.pixel_scale_u, iv - a * dy / calib.pixel_scale_v


def _camera_index_grids(calib: Calibration):
    ix = np.arange(calib.n_x)[:, None, None, None]
    iy = np.arange(calib.n_y)[None, :, None, None]
    return ix, iy


def _sample_map(img: np.ndarray, fu: np.ndarray, fv: np.ndarray) -> np.ndarray:
    """Bilinear lookup of a central-view map at continuous pixel positions (edge-clamped)."""
    z = np.zeros(np.broadcast_shapes(np.shape(fu), np.shape(fv)), dtype=np.intp)
    return interpolate(img[None, None], (z, z, fu, fv))[0]


def _sample(grid: np.ndarray, calib: Calibration, fu: np.ndarray, fv: np.ndarray):
    ix, iy = _camera_index_grids(calib)
    return interpolate(grid, (ix, iy, fu, fv))


def _fill_from_neighbours(values: np.ndarray, holes: np.ndarray) -> np.ndarray:
    """Replace ``holes`` by the median of non-hole values in growing square windows."""
    filled = np.where(holes, np.nan, values)
    size = 5
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN windows
        while np.isnan(filled).any() and size < 2 * max(values.shape) + 1:
            med = generic_filter(filled, np.nanmedian, size=size, mode="nearest")
            filled = np.where(np.isnan(filled), med, filled)
            size = 2 * size - 1
    return filled


def estimate_disparity(lf: LightField, alpha_range=(0.1, 1.0), steps: int = 64, window: int = 5,
                       min_confidence: float = 0.05, prefilter_sigma: float = 1.0) -> DisparityMap:
    """Plane-sweep disparity of the central view.

    Every candidate ``alpha`` gathers the radiance of each pixel's plane and
    scores it by the variance across cameras, box-averaged over ``window``
    pixels. The best candidate is refined with a parabola through its
    neighbours. The views are blurred by ``prefilter_sigma`` pixels first:
    bilinear resampling of sharp texture lowers the variance at fractional
    shifts and biases the minimum. Confidence is the score curvature relative
    to the mean score, scaled so that a parabola spanning the whole range
    gives 1. Pixels below ``min_confidence`` take the median of their
    confident neighbours.
    """
    calib = lf.calib
    lo, hi = float(alpha_range[0]), float(alpha_range[1])
    if not 0 < lo < hi or steps < 3:
        raise ValueError("alpha_range must satisfy 0 < min < max and steps >= 3")
    if prefilter_sigma > 0:
        lf = prefilter(lf, (0.0, 0.0, prefilter_sigma, prefilter_sigma))
    alphas = np.linspace(lo, hi, steps)
    scores = np.empty((steps, calib.n_u, calib.n_v))
    for k, a in enumerate(alphas):
        fu, fv = _plane_positions(calib, np.full((calib.n_u, calib.n_v), a))
        vals, inside = _sample(lf.data, calib, fu, fv)
        w = inside.astype(np.float64)
        n = np.maximum(w.sum(axis=(0, 1)), 1.0)
        mean = (vals * w).sum(axis=(0, 1)) / n
        var = ((vals - mean) ** 2 * w).sum(axis=(0, 1)) / n
        scores[k] = uniform_filter(var, window, mode="nearest") if window > 1 else var
    best = np.argmin(scores, axis=0)
    k = np.clip(best, 1, steps - 2)
    take = lambda j: np.take_along_axis(scores, j[None], axis=0)[0]
    s0, s1, s2 = take(k - 1), take(k), take(k + 1)
    curv = s0 + s2 - 2.0 * s1
    with np.errstate(divide="ignore", invalid="ignore"):
        offset = np.where(curv > 0, 0.5 * (s0 - s2) / curv, 0.0)
    offset = np.clip(offset, -0.5, 0.5)
    interior = (best > 0) & (best < steps - 1)
    step = alphas[1] - alphas[0]
    alpha = alphas[best] + np.where(interior, offset, 0.0) * step
    scale = 24.0 * scores.mean(axis=0) * step * step / (hi - lo) ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        conf = np.where(scale > 1e-12, np.maximum(curv, 0.0) / scale, 0.0)
    conf = np.where(interior, conf, 0.0)
    weak = conf < min_confidence
    if weak.all():
        alpha = np.full_like(alpha, np.median(alpha))
    elif weak.any():
        alpha = _fill_from_neighbours(alpha, weak)
    return DisparityMap(alpha, conf, lo, hi)


# --- plane gathering ------------------------------------------------------------------------


@dataclass(frozen=True)
class PlaneSample:
    """Rays of one central pixel's disparity plane with their gradients and weights."""

    center: tuple[int, int]
    ix: np.ndarray
    iy: np.ndarray
    x: np.ndarray
    y: np.ndarray
    u: np.ndarray
    v: np.ndarray
    lx: np.ndarray
    ly: np.ndarray
    lz: np.ndarray
    lt: np.ndarray
    weights: np.ndarray

    def coefficients(self) -> np.ndarray:
        return np.stack([self.lx, self.ly, self.lz], axis=-1)


@dataclass(frozen=True)
class PlaneSamples:
    """Gathered planes of all central pixels, arrays shaped ``(n_x, n_y, n_u, n_v)``."""

    lx: np.ndarray
    ly: np.ndarray
    lz: np.ndarray
    lt: np.ndarray
    weights: np.ndarray  # zero for rays that left the grid
    u: np.ndarray
    v: np.ndarray


def _plane_weights(calib: Calibration, dmap: DisparityMap, w: SAGWeights, fu, fv, inside):
    dx, dy = _camera_offsets(calib)
    # (x, y) distances in (u, v) pixel units; the sheared (u, v) terms vanish on the plane
    dist2 = (dx / calib.pixel_scale_u) ** 2 + (dy / calib.pixel_scale_v) ** 2
    hg = np.exp(-dist2 / w.sigma_g ** 2)
    # disparity seen by each plane ray: follow it back to the central camera
    a_i = _sample_map(dmap.alpha, fu, fv)
    a_i = _sample_map(dmap.alpha, fu + a_i * dx / calib.pixel_scale_u, fv + a_i * dy / calib.pixel_scale_v)
    d_i = 1.0 / a_i
    d_c = dmap.d_alpha[None, None]
    ho = np.exp(-((d_i - d_c) ** 2) / w.sigma_o ** 2)
    return np.where(inside, hg * ho, 0.0)


def gather_planes(grads: RayGradients, dmap: DisparityMap, w: SAGWeights,
                  ray_mask: np.ndarray | None = None) -> PlaneSamples:
    """Gather every central pixel's plane at once (bilinear in (u, v))."""
    calib = grads.calib
    w = w.resolved(dmap)
    fu, fv = _plane_positions(calib, dmap.alpha)
    lx, inside = _sample(grads.lx, calib, fu, fv)
    ly, _ = _sample(grads.ly, calib, fu, fv)
    lt, _ = _sample(grads.lt, calib, fu, fv)
    if ray_mask is not None:
        m, _ = _sample(np.asarray(ray_mask, dtype=np.float64), calib, fu, fv)
        inside = inside & (m > 1.0 - 1e-9)
    u = (fu - (calib.n_u - 1) / 2.0) * calib.pixel_scale_u
    v = (fv - (calib.n_v - 1) / 2.0) * calib.pixel_scale_v
    lz = -(u / calib.gamma) * lx - (v / calib.gamma) * ly
    h = _plane_weights(calib, dmap, w, fu, fv, inside)
    return PlaneSamples(lx, ly, lz, lt, h, u, v)


def gather_plane(grads: RayGradients, dmap: DisparityMap, center_uv, w: SAGWeights | None = None) -> PlaneSample:
    """Rays of the disparity plane through central pixel ``center_uv = (iu, iv)``."""
    w = w or SAGWeights()
    iu, iv = (int(c) for c in center_uv)
    ps = gather_planes(grads, dmap, w)
    calib = grads.calib
    ix, iy = np.meshgrid(np.arange(calib.n_x), np.arange(calib.n_y), indexing="ij")
    at = lambda arr: np.broadcast_to(arr, calib.shape)[:, :, iu, iv][keep]
    keep = np.broadcast_to(ps.weights, calib.shape)[:, :, iu, iv] > 0
    x = calib.x_coords()[ix]
    y = calib.y_coords()[iy]
    return PlaneSample(
        center=(iu, iv), ix=ix[keep], iy=iy[keep], x=x[keep], y=y[keep],
        u=at(ps.u), v=at(ps.v), lx=at(ps.lx), ly=at(ps.ly), lz=at(ps.lz), lt=at(ps.lt), weights=at(ps.weights),
    )


# --- smoothness weights ---------------------------------------------------------------------


def _grad2(field: np.ndarray) -> np.ndarray:
    gu, gv = np.gradient(field)
    return gu * gu + gv * gv


def sag_weight_maps(U: np.ndarray, dmap: DisparityMap, w: SAGWeights) -> np.ndarray:
    """Harmonic mean of the flow-edge and depth-edge weights, in ``(0, 1/2]``.

    Args:
        U: ``(n_u, n_v, 2)`` first-pass X/Y flow in mm.
        dmap: Disparity of the central view.
        w: Bandwidths (``sigma_c`` in mm per pixel, ``sigma_d`` per pixel).

    Returns:
        ``(n_u, n_v)`` weight map ``g = g_c g_d / (g_c + g_d)``.
    """
    w = w.resolved(dmap)
    gc = 1.0 / (1.0 + (_grad2(U[..., 0]) + _grad2(U[..., 1])) / w.sigma_c ** 2)
    gd = 1.0 / (1.0 + _grad2(dmap.d_alpha) / w.sigma_d ** 2)
    return gc * gd / (gc + gd)


# --- energy and solver ----------------------------------------------------------------------


def _lams(w: SAGWeights, p: GlobalParams) -> np.ndarray:
    lams = p.weights(SAG_WEIGHTS)
    if w.lam is not None:
        lams[:2] = w.lam
    if w.lam_z is not None:
        lams[2] = w.lam_z
    return lams


def _plane_residual(ps: PlaneSamples, V: np.ndarray) -> np.ndarray:
    return ps.lx * V[..., 0] + ps.ly * V[..., 1] + ps.lz * V[..., 2] + ps.lt


def sag_energy(ps: PlaneSamples, V: np.ndarray, g: np.ndarray, w: SAGWeights, p: GlobalParams,
               dV: np.ndarray | None = None) -> float:
    """Linearised SAG energy of central-view flow ``V`` (``dV`` is the increment over the warp)."""
    inc = V if dV is None else dV
    r = _plane_residual(ps, inc)
    data = (ps.weights * p.rho(r * r)[0]).sum()
    lams = _lams(w, p)
    smooth = 0.0
    for c in range(3):
        d2 = forward_differences(V[..., c]) ** 2
        smooth += lams[c] * (g[None] * p.rho(d2)[0]).sum()
    return float(data + smooth)


def sag_problem(ps: PlaneSamples, V0: np.ndarray, dV: np.ndarray, g: np.ndarray, w: SAGWeights,
                p: GlobalParams, active=(True, True, True)) -> QuadraticProblem:
    """Quadratic model with Charbonnier derivatives frozen at ``V0 + dV``."""
    r = _plane_residual(ps, dV)
    hw = ps.weights * p.rho(r * r)[1]
    a = (ps.lx, ps.ly, ps.lz)
    M = np.stack([(hw * a[i] * a[j]).sum(axis=(0, 1))
                  for i, j in ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))], axis=-1)
    b = np.stack([(hw * a[i] * ps.lt).sum(axis=(0, 1)) for i in range(3)], axis=-1)
    V = V0 + dV
    lams = _lams(w, p)
    W = np.empty((3, 2) + V.shape[:-1])
    for c in range(3):
        d2 = forward_differences(V[..., c]) ** 2
        W[c] = lams[c] * g[None] * p.rho(d2)[1]
    return QuadraticProblem(M, b, W, V0, active)


def ray_flow_from_central(V: np.ndarray, dmap: DisparityMap, calib: Calibration) -> np.ndarray:
    """Per-ray flow: each ray takes the central-view flow of the scene point it sees.

    The point is located by following the ray's disparity plane back to the
    central camera, using the disparity looked up at the ray's own pixel.
    """
    dx, dy = _camera_offsets(calib)
    iu = np.arange(calib.n_u, dtype=np.float64)[None, None, :, None]
    iv = np.arange(calib.n_v, dtype=np.float64)[None, None, None, :]
    a = dmap.alpha[None, None]
    cu = iu + a * dx / calib.pixel_scale_u
    cv = iv + a * dy / calib.pixel_scale_v
    out = np.empty(calib.shape + (3,))
    for c in range(3):
        out[..., c] = _sample_map(V[..., c], cu, cv)
    return out


def _level_dmap(level_lf: LightField, dmap: DisparityMap | None, base: Calibration, sweep):
    if dmap is None:
        return estimate_disparity(level_lf, **sweep)
    return dmap.resampled(base, level_lf.calib)


def _run_pass(pyr0, pyr1, dmaps, w: SAGWeights, p: GlobalParams, g_maps, active, V_init=None):
    V = None
    prev = None
    sweeps = 0
    converged = True
    for level in range(len(pyr0) - 1, -1, -1):
        L0, L1 = pyr0[level], pyr1[level]
        calib = L0.calib
        dm = dmaps[level]
        if V is None:
            V = np.zeros((calib.n_u, calib.n_v, 3)) if V_init is None else resample_uv(V_init, pyr0[0].calib, calib,
                                                                                      axes=(0, 1))
        else:
            V = resample_uv(V, prev, calib, axes=(0, 1))
        g = g_maps[level]
        for _ in range(p.warp_iters):
            ray_flow = ray_flow_from_central(V, dm, calib)
            warped, inside = warp(L1, ray_flow)
            grads = compute_gradients(L0, warped)
            ps = gather_planes(grads, dm, w, ray_mask=inside)
            dV = np.zeros_like(V)
            for _ in range(p.lagged_iters):
                prob = sag_problem(ps, V, dV, g, w, p, active)
                dV, n, ok = sor_solve(prob, dV, p.omega, p.max_iters, p.tol)
                sweeps += n
                converged &= ok
            V = V + dV
        prev = calib
    return V, sweeps, converged


def sag_solve(lf0: LightField, lf1: LightField, dmap: DisparityMap | None = None,
              w: SAGWeights | None = None, p: GlobalParams | None = None,
              alpha_sweep: dict | None = None) -> FlowField:
    """Two-pass structure-aware estimate of the central-view flow.

    Pass 1 solves for X/Y flow with ``V_Z = 0`` and a uniform weight map.
    Pass 2 derives the edge-aware weight map from that flow and the disparity
    and solves for all three components, starting from the pass-1 flow.

    Args:
        lf0, lf1: Frames of the same calibration.
        dmap: Central-view disparity at full resolution; ``None`` runs a plane
            sweep on every pyramid level of ``lf0``.
        w: Plane and weight-map bandwidths.
        p: Penalty, weights and solver settings (Charbonnier recommended).
        alpha_sweep: Keyword arguments for :func:`estimate_disparity`.

    Returns:
        Central-view :class:`FlowField` with solver status.
    """
    w = w or SAGWeights()
    p = p or GlobalParams()
    sweep = dict(alpha_sweep or {})
    pyr0 = build_pyramid(prefilter(lf0, p.prefilter_sigma), p.levels, p.factor)
    pyr1 = build_pyramid(prefilter(lf1, p.prefilter_sigma), len(pyr0), p.factor)
    base = lf0.calib
    dmaps = [_level_dmap(L, dmap, base, sweep) for L in pyr0]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        flat = [np.full((L.calib.n_u, L.calib.n_v), 0.5) for L in pyr0]
        first_active = (True, True, True) if w.first_pass_z else (True, True, False)
        U, s1, ok1 = _run_pass(pyr0, pyr1, dmaps, w, p, flat, first_active)
        U[..., 2] = 0.0
        g_maps = [sag_weight_maps(resample_uv(U, base, L.calib, axes=(0, 1))[..., :2], dmaps[i], w)
                  for i, L in enumerate(pyr0)]
        V, s2, ok2 = _run_pass(pyr0, pyr1, dmaps, w, p, g_maps, (True, True, True), V_init=U)
    converged = ok1 and ok2
    if not converged:
        warnings.warn("structure-aware solver hit max_iters in at least one linearisation",
                      ConvergenceWarning, stacklevel=2)
    cx, cy = base.center_view
    ray_flow = ray_flow_from_central(V, dmaps[0], base)
    _, inside = warp(pyr1[0], ray_flow)
    status = SolveStatus(converged, s1 + s2, "" if converged else "SOR stopped at max_iters")
    return FlowField(V, inside[cx, cy], Layout.CENTRAL_VIEW, None, status)
