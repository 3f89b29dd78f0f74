"""Error metrics between estimated and ground-truth flow fields."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .flowfield import FlowField

__all__ = ["Metrics", "mae_rmse", "relative_error", "transition_width", "boundary_profile"]


@dataclass(frozen=True)
class Metrics:
    """Masked error statistics; lengths in mm, ``rel_error`` in percent."""

    mae: tuple[float, float, float]
    rmse: tuple[float, float, float]
    rel_error: float
    epe: float
    n_valid: int

    def as_row(self) -> dict:
        d = asdict(self)
        out = {f"mae_{c}": d["mae"][i] for i, c in enumerate("xyz")}
        out.update({f"rmse_{c}": d["rmse"][i] for i, c in enumerate("xyz")})
        out.update(rel_error=self.rel_error, epe=self.epe, n_valid=self.n_valid)
        return out


def _check_pair(est: FlowField, truth: FlowField):
    if est.layout != truth.layout or est.dims != truth.dims:
        raise ValueError(f"flow fields differ: {est.layout.name}{est.dims} vs {truth.layout.name}{truth.dims}")


def mae_rmse(est: FlowField, truth: FlowField, floor: float = 1e-6) -> Metrics:
    """Error statistics over entries valid in both fields.

    Args:
        est: Estimated flow.
        truth: Ground truth of the same layout and dims.
        floor: Entries with ``|truth| <= floor`` are left out of the relative error.

    Returns:
        :class:`Metrics`; all values are NaN when no entry is jointly valid.
    """
    _check_pair(est, truth)
    both = est.valid & truth.valid
    n = int(both.sum())
    if n == 0:
        nan3 = (float("nan"),) * 3
        return Metrics(nan3, nan3, float("nan"), float("nan"), 0)
    diff = est.vectors[both] - truth.vectors[both]
    mae = np.abs(diff).mean(axis=0)
    rmse = np.sqrt((diff ** 2).mean(axis=0))
    epe_each = np.linalg.norm(diff, axis=1)
    norm = np.linalg.norm(truth.vectors[both], axis=1)
    big = norm > floor
    rel = float(100.0 * (epe_each[big] / norm[big]).mean()) if big.any() else float("nan")
    return Metrics(tuple(map(float, mae)), tuple(map(float, rmse)), rel, float(epe_each.mean()), n)


def relative_error(est: FlowField, truth: FlowField, invalid_error: float = 1.0) -> float:
    """Mean ``|V - V_gt| / |V_gt|`` over the entries valid in ``truth`` (a fraction, not percent).

    Entries the estimator marks invalid count as ``invalid_error``, so a
    method cannot lower its error by abstaining where the motion leaves the
    aperture. Entries with zero true motion are skipped.
    """
    _check_pair(est, truth)
    norm = np.linalg.norm(truth.vectors, axis=-1)
    use = truth.valid & (norm > 0)
    if not use.any():
        return float("nan")
    err = np.linalg.norm(est.vectors - truth.vectors, axis=-1) / np.where(use, norm, 1.0)
    err = np.where(est.valid, err, invalid_error)
    return float(err[use].mean())


def boundary_profile(component: np.ndarray, axis: int = 0) -> np.ndarray:
    """Mean of a central-view map across the boundary direction (over ``1 - axis``)."""
    return np.asarray(component, dtype=np.float64).mean(axis=1 - axis)


def _crossing(positions: np.ndarray, frac: np.ndarray, level: float, centre: float) -> float:
    hits = []
    for i in range(len(frac) - 1):
        a, b = frac[i], frac[i + 1]
        if a != b and (a - level) * (b - level) <= 0:
            hits.append(positions[i] + (level - a) / (b - a) * (positions[i + 1] - positions[i]))
    return min(hits, key=lambda x: abs(x - centre)) if hits else float("nan")


def transition_width(component: np.ndarray, axis: int = 0, centre: float | None = None,
                     low: float = 0.1, high: float = 0.9) -> float:
    """10-90 % rise distance (pixels) of a straight motion boundary.

    The map is averaged along the boundary, normalised between the medians of
    the outer quarters on either side, and the ``low``/``high`` crossings
    closest to ``centre`` (default: middle of the axis) are interpolated
    linearly.

    Args:
        component: Central-view map, e.g. ``V_X``, indexed ``[iu, iv]``.
        axis: Pixel axis across the boundary.
        centre: Expected boundary position in pixels.
        low, high: Normalised levels bounding the transition.

    Returns:
        Width in pixels, or NaN if the plateaus coincide or a level is never crossed.
    """
    prof = boundary_profile(component, axis)
    n = len(prof)
    q = max(1, n // 4)
    lo, hi = np.median(prof[:q]), np.median(prof[-q:])
    if hi == lo:
        return float("nan")
    frac = (prof - lo) / (hi - lo)
    pos = np.arange(n, dtype=np.float64)
    centre = (n - 1) / 2.0 if centre is None else float(centre)
    return float(abs(_crossing(pos, frac, high, centre) - _crossing(pos, frac, low, centre)))
