"""Global "Horn-Schunck" ray flow over the full 4D ray grid.

Energy::

    E(V) = sum rho_D(r^2) + sum [lam rho_S(|grad V_X|^2) + lam rho_S(|grad V_Y|^2)
                                 + lam_Z rho_S(|grad V_Z|^2)]

with ``r = L_X V_X + L_Y V_Y + L_Z V_Z + L_t`` and forward differences in
grid steps (zero on the last slice). Charbonnier penalties are handled by
lagged nonlinearity: their derivatives are frozen, the resulting quadratic
is minimised by block SOR, and the weights are refreshed.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .flowfield import FlowField, Layout, SolveStatus
from .lfcore import LightField, RayGradients, build_pyramid, compute_gradients, prefilter, resample_uv, warp
from .sor import QuadraticProblem, sor_solve

log = logging.getLogger(__name__)

__all__ = [
    "ConvergenceWarning",
    "HS_WEIGHTS",
    "GlobalParams",
    "charbonnier",
    "forward_differences",
    "gradient_norms",
    "hs_energy",
    "hs_gradient",
    "hs_problem",
    "hs_solve",
    "hs_pyramidal",
]


# (lam, lam_z) for radiance in [0, 1] and gradients per mm; keeps the 8:1 ratio
HS_WEIGHTS = (8e-3, 1e-3)


class ConvergenceWarning(RuntimeWarning):
    pass


def charbonnier(x2, a: float = 0.45, eps: float = 1e-3):
    """Generalised Charbonnier ``(x2 + eps^2)^a`` and its derivative with respect to ``x2``.

    Args:
        x2: Squared argument (scalar or array), non-negative.
        a: Exponent; ``a = 1, eps = 0`` gives the quadratic penalty.
        eps: Smoothing constant.

    Returns:
        Tuple ``(value, derivative)``.
    """
    s = np.asarray(x2, dtype=np.float64) + eps * eps
    if a == 1.0:
        return s, np.ones_like(s)
    val = s ** a
    return val, a * val / s


@dataclass
class GlobalParams:
    """Weights and solver settings shared by the global solvers.

    Attributes:
        lam: Smoothness weight of the X and Y flow; ``None`` picks the
            solver's default (:data:`HS_WEIGHTS` or the structure-aware one).
        lam_z: Smoothness weight of the Z flow, same convention.
        penalty: ``"quadratic"`` or ``"charbonnier"`` (applies to data and smoothness).
        a, eps: Charbonnier exponent and smoothing constant.
        omega: SOR relaxation factor.
        max_iters: SOR sweeps per linearisation.
        tol: Relative update norm at which SOR stops.
        lagged_iters: Weight refreshes per warp (1 for the quadratic penalty).
        warp_iters: Re-linearisations per pyramid level.
        levels, factor: Pyramid depth and (u, v) downsampling ratio.
        prefilter_sigma: Gaussian pre-filter in grid steps along (x, y, u, v).
    """

    lam: float | None = None
    lam_z: float | None = None
    penalty: str = "charbonnier"
    a: float = 0.45
    eps: float = 1e-3
    omega: float = 1.9
    max_iters: int = 200
    tol: float = 1e-4
    lagged_iters: int = 3
    warp_iters: int = 3
    levels: int = 3
    factor: float = 0.5
    prefilter_sigma: tuple[float, float, float, float] = (0.0, 0.0, 1.0, 1.0)

    def __post_init__(self):
        if (self.lam is not None and self.lam <= 0) or (self.lam_z is not None and self.lam_z <= 0):
            raise ValueError("lam and lam_z must be positive")
        if not 0.0 < self.omega < 2.0:
            raise ValueError("omega must lie in (0, 2)")
        if self.penalty not in ("quadratic", "charbonnier"):
            raise ValueError("penalty must be 'quadratic' or 'charbonnier'")
        if not 0.0 < self.a <= 0.5 and self.penalty == "charbonnier":
            raise ValueError("Charbonnier exponent must lie in (0, 0.5]")
        if self.eps <= 0:
            raise ValueError("eps must be positive")

    def rho(self, x2):
        if self.penalty == "quadratic":
            x2 = np.asarray(x2, dtype=np.float64)
            return x2, np.ones_like(x2)
        return charbonnier(x2, self.a, self.eps)

    def weights(self, default=None) -> np.ndarray:
        """Smoothness weights ``(lam, lam, lam_z)``, unset entries taken from ``default``."""
        lam, lam_z = HS_WEIGHTS if default is None else default
        lam = lam if self.lam is None else self.lam
        lam_z = lam_z if self.lam_z is None else self.lam_z
        return np.array([lam, lam, lam_z])


def forward_differences(field: np.ndarray, axes=None) -> np.ndarray:
    """Forward differences of a scalar grid along each axis, zero on the last slice.

    Returns an array with a new leading axis of length ``len(axes)``.
    """
    axes = range(field.ndim) if axes is None else axes
    out = []
    for k in axes:
        d = np.zeros_like(field)
        src = [slice(None)] * field.ndim
        dst = [slice(None)] * field.ndim
        src[k] = slice(1, None)
        dst[k] = slice(None, -1)
        d[tuple(dst)] = field[tuple(src)] - field[tuple(dst)]
        out.append(d)
    return np.stack(out)


def gradient_norms(V: np.ndarray) -> np.ndarray:
    """``|grad V_c|^2`` per component, shape ``(3,) + grid``."""
    return np.stack([(forward_differences(V[..., c]) ** 2).sum(axis=0) for c in range(3)])


def _as_array(V) -> np.ndarray:
    return V.vectors if isinstance(V, FlowField) else np.asarray(V, dtype=np.float64)


def _data_residual(grads: RayGradients, V: np.ndarray) -> np.ndarray:
    return grads.lx * V[..., 0] + grads.ly * V[..., 1] + grads.lz * V[..., 2] + grads.lt


def hs_energy(grads: RayGradients, V, p: GlobalParams, mask: np.ndarray | None = None) -> float:
    """Total energy of a full-ray flow field; rays outside ``mask`` carry no data term."""
    V = _as_array(V)
    r2 = _data_residual(grads, V) ** 2
    data = p.rho(r2)[0]
    if mask is not None:
        data = np.where(mask, data, 0.0)
    smooth = p.rho(gradient_norms(V))[0]
    return float(data.sum() + np.tensordot(p.weights(), smooth.reshape(3, -1).sum(axis=1), axes=1))


def _divergence(weighted: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`forward_differences` (negated divergence), summed over axes."""
    out = np.zeros(weighted.shape[1:])
    for k in range(weighted.shape[0]):
        d = weighted[k]
        n = d.shape[k]
        lo = [slice(None)] * d.ndim
        hi = [slice(None)] * d.ndim
        lo[k] = slice(0, n - 1)
        hi[k] = slice(1, n)
        out[tuple(lo)] -= d[tuple(lo)]
        out[tuple(hi)] += d[tuple(lo)]
    return out


def hs_gradient(grads: RayGradients, V, p: GlobalParams, mask: np.ndarray | None = None) -> np.ndarray:
    """Assembled Euler-Lagrange residual ``dE/dV`` at every ray, shape ``grid + (3,)``."""
    V = _as_array(V)
    r = _data_residual(grads, V)
    dr = 2.0 * p.rho(r * r)[1] * r
    if mask is not None:
        dr = np.where(mask, dr, 0.0)
    g = np.stack([dr * grads.lx, dr * grads.ly, dr * grads.lz], axis=-1)
    for c, lam in enumerate(p.weights()):
        diffs = forward_differences(V[..., c])
        w = p.rho((diffs ** 2).sum(axis=0))[1]
        g[..., c] += 2.0 * lam * _divergence(w[None] * diffs)
    return g


def hs_problem(grads: RayGradients, V0: np.ndarray, dV: np.ndarray, p: GlobalParams,
               mask: np.ndarray | None = None) -> QuadraticProblem:
    """Quadratic model around ``V0 + dV`` with penalty derivatives frozen.

    The data term is linear in the increment: ``r = L . dV + L_t``, where the
    gradients were measured after warping by ``V0``.
    """
    a = (grads.lx, grads.ly, grads.lz)
    r = a[0] * dV[..., 0] + a[1] * dV[..., 1] + a[2] * dV[..., 2] + grads.lt
    wd = p.rho(r * r)[1]
    if mask is not None:
        wd = np.where(mask, wd, 0.0)
    M = np.stack([wd * a[i] * a[j] for i, j in ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))], axis=-1)
    b = np.stack([wd * a[i] * grads.lt for i in range(3)], axis=-1)
    ndim = V0.ndim - 1
    V = V0 + dV
    ws = p.rho(gradient_norms(V))[1] * p.weights().reshape((3,) + (1,) * ndim)
    W = np.broadcast_to(ws[:, None], (3, ndim) + V0.shape[:-1])
    return QuadraticProblem(M, b, W, V0)


def hs_solve(grads: RayGradients, p: GlobalParams | None = None, init=None,
             mask: np.ndarray | None = None) -> FlowField:
    """Minimise the energy for one linearisation (gradients measured at ``init``).

    ``init`` is the flow the gradients were warped with (zero by default); the
    result is ``init`` plus the optimal increment. Non-convergence of SOR is
    reported through ``status`` and a :class:`ConvergenceWarning`; the
    returned field is the last (lowest-energy) iterate.
    """
    p = p or GlobalParams()
    shape = grads.lx.shape
    V0 = np.zeros(shape + (3,)) if init is None else np.broadcast_to(_as_array(init), shape + (3,)).astype(np.float64)
    dV = np.zeros_like(V0)
    lagged = 1 if p.penalty == "quadratic" else p.lagged_iters
    total = 0
    converged = True
    for _ in range(lagged):
        prob = hs_problem(grads, V0, dV, p, mask)
        dV, sweeps, ok = sor_solve(prob, dV, p.omega, p.max_iters, p.tol)
        total += sweeps
        converged &= ok
    status = SolveStatus(converged, total, "" if converged else "SOR stopped at max_iters")
    if not converged:
        warnings.warn(f"global solver did not converge in {p.max_iters} sweeps", ConvergenceWarning, stacklevel=2)
    valid = np.ones(shape, dtype=bool)
    return FlowField(V0 + dV, valid, Layout.FULL_RAY, None, status)


def hs_pyramidal(lf0: LightField, lf1: LightField, p: GlobalParams | None = None,
                 init: np.ndarray | None = None) -> FlowField:
    """Coarse-to-fine global estimate with re-warping at each level.

    Rays whose warped position leaves the camera grid keep no data term; the
    smoothness term fills them in. The returned validity marks rays that stay
    inside the aperture under the final flow.
    """
    p = p or GlobalParams()
    pyr0 = build_pyramid(prefilter(lf0, p.prefilter_sigma), p.levels, p.factor)
    pyr1 = build_pyramid(prefilter(lf1, p.prefilter_sigma), len(pyr0), p.factor)
    flow = None
    prev = None
    sweeps = 0
    converged = True
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        for level in range(len(pyr0) - 1, -1, -1):
            L0, L1 = pyr0[level], pyr1[level]
            calib = L0.calib
            if flow is None:
                flow = np.zeros(calib.shape + (3,)) if init is None else np.broadcast_to(
                    init, calib.shape + (3,)).astype(np.float64)
            else:
                flow = resample_uv(flow, prev, calib)
            for _ in range(p.warp_iters):
                warped, inside = warp(L1, flow)
                grads = compute_gradients(L0, warped)
                res = hs_solve(grads, p, flow, mask=inside)
                flow = res.vectors
                sweeps += res.status.sweeps
                converged &= res.status.converged
            prev = calib
            log.debug("level %d done, %d sweeps so far", level, sweeps)
    if not converged:
        warnings.warn("global solver hit max_iters in at least one linearisation", ConvergenceWarning, stacklevel=2)
    _, inside = warp(pyr1[0], flow)
    status = SolveStatus(converged, sweeps, "" if converged else "SOR stopped at max_iters")
    return FlowField(flow, inside, Layout.FULL_RAY, None, status)
