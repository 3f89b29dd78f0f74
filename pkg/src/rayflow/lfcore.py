"""Light-field container, ray geometry, gradients, warping and pyramids.

Conventions used throughout the package:

* A light field is a 4D grid ``data[ix, iy, iu, iv]``. ``(ix, iy)`` index the
  sub-aperture camera, ``(iu, iv)`` the pixel inside a sub-aperture image.
* Continuous ray coordinates are in millimetres and centred on the grid:
  ``x = (ix - (n_x - 1) / 2) * cam_spacing_x`` and
  ``u = (iu - (n_u - 1) / 2) * pixel_scale_u`` (same for ``y`` and ``v``).
  ``(x, y)`` lives on the ``Z = 0`` plane, ``(u, v)`` is the relative offset on
  the ``Z = gamma`` plane.
* Motion is always metric (mm per frame), never in pixels.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter1d

__all__ = [
    "Calibration",
    "RayCoord",
    "SceneRay",
    "LightField",
    "RayGradients",
    "MotionVector",
    "Pyramid",
    "scene_to_ray",
    "ray_to_scene",
    "prefilter",
    "compute_gradients",
    "warp",
    "interpolate",
    "build_pyramid",
    "resample_uv",
]


@dataclass(frozen=True)
class Calibration:
    """Two-plane light-field camera geometry (all lengths in mm)."""

    gamma: float
    cam_spacing_x: float
    cam_spacing_y: float
    pixel_scale_u: float
    pixel_scale_v: float
    n_x: int
    n_y: int
    n_u: int
    n_v: int

    def __post_init__(self):
        for name in ("gamma", "cam_spacing_x", "cam_spacing_y", "pixel_scale_u", "pixel_scale_v"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be a positive finite number, got {value!r}")
        for name in ("n_x", "n_y", "n_u", "n_v"):
            value = getattr(self, name)
            if int(value) != value:
                raise ValueError(f"{name} must be an integer, got {value!r}")
            object.__setattr__(self, name, int(value))
        if self.n_x < 3 or self.n_y < 3:
            raise ValueError("angular grid must be at least 3x3 for central differences")
        if self.n_u < 1 or self.n_v < 1:
            raise ValueError("spatial grid dimensions must be >= 1")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return (self.n_x, self.n_y, self.n_u, self.n_v)

    @property
    def center_view(self) -> tuple[int, int]:
        """Index of the sub-aperture image used as the central view."""
        return (self.n_x // 2, self.n_y // 2)

    @property
    def aperture_x(self) -> float:
        """Extent of camera positions along x (mm)."""
        return (self.n_x - 1) * self.cam_spacing_x

    @property
    def aperture_y(self) -> float:
        return (self.n_y - 1) * self.cam_spacing_y

    def x_coords(self) -> np.ndarray:
        return (np.arange(self.n_x) - (self.n_x - 1) / 2.0) * self.cam_spacing_x

    def y_coords(self) -> np.ndarray:
        return (np.arange(self.n_y) - (self.n_y - 1) / 2.0) * self.cam_spacing_y

    def u_coords(self) -> np.ndarray:
        return (np.arange(self.n_u) - (self.n_u - 1) / 2.0) * self.pixel_scale_u

    def v_coords(self) -> np.ndarray:
        return (np.arange(self.n_v) - (self.n_v - 1) / 2.0) * self.pixel_scale_v

    def ray_grid(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Broadcastable continuous coordinates ``(x, y, u, v)`` of every grid ray."""
        return (
            self.x_coords()[:, None, None, None],
            self.y_coords()[None, :, None, None],
            self.u_coords()[None, None, :, None],
            self.v_coords()[None, None, None, :],
        )

    def index_to_ray(self, ix, iy, iu, iv) -> "RayCoord":
        return RayCoord(
            x=(ix - (self.n_x - 1) / 2.0) * self.cam_spacing_x,
            y=(iy - (self.n_y - 1) / 2.0) * self.cam_spacing_y,
            u=(iu - (self.n_u - 1) / 2.0) * self.pixel_scale_u,
            v=(iv - (self.n_v - 1) / 2.0) * self.pixel_scale_v,
            ix=ix, iy=iy, iu=iu, iv=iv,
        )

    def with_angular(self, n_x: int, n_y: int, spacing_x: float, spacing_y: float) -> "Calibration":
        return replace(self, n_x=n_x, n_y=n_y, cam_spacing_x=spacing_x, cam_spacing_y=spacing_y)


class RayCoord(NamedTuple):
    x: float
    y: float
    u: float
    v: float
    ix: int | None = None
    iy: int | None = None
    iu: int | None = None
    iv: int | None = None


class SceneRay(NamedTuple):
    X: float
    Y: float
    Z: float
    theta: float
    phi: float


class MotionVector(NamedTuple):
    """Scene motion in mm per frame interval."""

    V_X: float
    V_Y: float
    V_Z: float


def _check_finite(*values):
    for value in values:
        if not np.all(np.isfinite(value)):
            raise ValueError(f"non-finite input: {value!r}")


def scene_to_ray(s: SceneRay, calib: Calibration) -> RayCoord:
    """Camera-centric ``(x, y, u, v)`` of the ray leaving scene point ``s``."""
    _check_finite(s.X, s.Y, s.Z, s.theta, s.phi)
    if not 0.0 <= s.theta < math.pi / 2:
        raise ValueError("theta must lie in [0, pi/2)")
    t = math.tan(s.theta)
    dx, dy = t * math.cos(s.phi), t * math.sin(s.phi)
    return RayCoord(
        x=s.X - s.Z * dx,
        y=s.Y - s.Z * dy,
        u=calib.gamma * dx,
        v=calib.gamma * dy,
    )


def ray_to_scene(r: RayCoord, Z: float, calib: Calibration) -> SceneRay:
    """Scene point at depth ``Z`` on ray ``r`` plus the ray direction angles."""
    _check_finite(r.x, r.y, r.u, r.v, Z)
    g = calib.gamma
    dx, dy = r.u / g, r.v / g
    t = math.hypot(dx, dy)
    phi = math.atan2(dy, dx) if t > 0 else 0.0
    return SceneRay(X=r.x + Z * dx, Y=r.y + Z * dy, Z=Z, theta=math.atan(t), phi=phi)


@dataclass(frozen=True)
class LightField:
    """Radiance grid ``data[ix, iy, iu, iv]`` normalised to [0, 1]."""

    calib: Calibration
    data: np.ndarray
    timestamp: float | str = 0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.shape != self.calib.shape:
            raise ValueError(f"data shape {data.shape} does not match calibration {self.calib.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("light field contains non-finite values")
        data = data.view()
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @property
    def shape(self):
        return self.data.shape

    def central_view(self) -> np.ndarray:
        ix, iy = self.calib.center_view
        return self.data[ix, iy]

    def with_data(self, data: np.ndarray, calib: Calibration | None = None) -> "LightField":
        return LightField(calib or self.calib, data, self.timestamp)


@dataclass(frozen=True)
class RayGradients:
    """Per-ray coefficients of the ray flow equation ``L_X V_X + L_Y V_Y + L_Z V_Z + L_t = 0``."""

    calib: Calibration
    lx: np.ndarray
    ly: np.ndarray
    lz: np.ndarray
    lt: np.ndarray

    def stacked(self) -> np.ndarray:
        """``(..., 3)`` array of ``(L_X, L_Y, L_Z)``."""
        return np.stack([self.lx, self.ly, self.lz], axis=-1)

    def masked(self, mask: np.ndarray) -> "RayGradients":
        """Copy with all four fields zeroed where ``mask`` is False."""
        m = np.asarray(mask, dtype=bool)
        return RayGradients(
            self.calib,
            np.where(m, self.lx, 0.0),
            np.where(m, self.ly, 0.0),
            np.where(m, self.lz, 0.0),
            np.where(m, self.lt, 0.0),
        )


def prefilter(lf: LightField, sigma4: Sequence[float]) -> LightField:
    """Separable Gaussian blur along ``(x, y, u, v)``; sigmas in grid steps.

    A zero sigma leaves that axis untouched. Boundaries are reflected.
    """
    sigma4 = tuple(float(s) for s in sigma4)
    if len(sigma4) != 4 or any(s < 0 for s in sigma4):
        raise ValueError("sigma4 must be four non-negative bandwidths")
    out = np.array(lf.data, dtype=np.float64, copy=True)
    for axis, sigma in enumerate(sigma4):
        if sigma > 0:
            out = gaussian_filter1d(out, sigma, axis=axis, mode="reflect", truncate=4.0)
    return lf.with_data(out)


def ray_flow_coefficients(lx: np.ndarray, ly: np.ndarray, calib: Calibration) -> np.ndarray:
    """``L_Z = -(u / gamma) L_X - (v / gamma) L_Y`` on the full grid."""
    _, _, u, v = calib.ray_grid()
    return -(u / calib.gamma) * lx - (v / calib.gamma) * ly


def compute_gradients(lf0: LightField, lf1: LightField) -> RayGradients:
    """Ray flow coefficients from a light-field pair.

    ``L_X``/``L_Y`` are central differences across camera positions (one-sided
    at the grid edge) of the temporal average, in radiance per mm. ``L_t`` is
    the frame difference.
    """
    if lf0.calib != lf1.calib:
        raise ValueError("light fields must share a calibration")
    if lf0.shape != lf1.shape:
        raise ValueError("light field dimensions differ")
    calib = lf0.calib
    avg = 0.5 * (lf0.data + lf1.data)
    lx = np.gradient(avg, calib.cam_spacing_x, axis=0, edge_order=1)
    ly = np.gradient(avg, calib.cam_spacing_y, axis=1, edge_order=1)
    lz = ray_flow_coefficients(lx, ly, calib)
    lt = lf1.data - lf0.data
    return RayGradients(calib, lx, ly, lz, lt)


def interpolate(data: np.ndarray, coords: Sequence[np.ndarray], clamp: bool = True):
    """Multilinear interpolation of a 4D grid at continuous index coordinates.

    Integer-typed coordinate arrays are used as exact indices; floating arrays
    are interpolated linearly. Returns ``(values, inside)`` where ``inside``
    flags samples lying within the grid on every interpolated axis.
    """
    coords = [np.asarray(c) for c in coords]
    shape = np.broadcast_shapes(*(c.shape for c in coords))
    inside = np.ones(shape, dtype=bool)
    base = []
    frac = []
    for axis, c in enumerate(coords):
        n = data.shape[axis]
        if np.issubdtype(c.dtype, np.integer):
            base.append(c)
            frac.append(None)
            continue
        eps = 1e-9
        inside &= (c >= -eps) & (c <= n - 1 + eps)
        if n == 1:
            base.append(np.zeros(c.shape, dtype=np.intp))
            frac.append(None)
            continue
        cc = np.clip(c, 0.0, n - 1.0) if clamp else c
        i0 = np.clip(np.floor(cc).astype(np.intp), 0, n - 2)
        base.append(i0)
        frac.append(cc - i0)
    out = np.zeros(shape, dtype=np.float64)
    interp_axes = [a for a in range(len(coords)) if frac[a] is not None]
    for corner in range(1 << len(interp_axes)):
        idx = list(base)
        w = 1.0
        for bit, axis in enumerate(interp_axes):
            if corner >> bit & 1:
                idx[axis] = base[axis] + 1
                w = w * frac[axis]
            else:
                w = w * (1.0 - frac[axis])
        out += w * data[tuple(idx)]
    return out, inside


def _flow_components(flow, calib: Calibration):
    if isinstance(flow, (MotionVector, tuple, list)) or np.ndim(flow) == 1:
        vx, vy, vz = (float(c) for c in flow)
        _check_finite(vx, vy, vz)
        return vx, vy, vz
    arr = np.asarray(flow, dtype=np.float64)
    if arr.shape[-1] != 3:
        raise ValueError("per-ray flow must have a trailing axis of length 3")
    _check_finite(arr)
    return arr[..., 0], arr[..., 1], arr[..., 2]


def warp(lf: LightField, flow) -> tuple[LightField, np.ndarray]:
    """Resample ``lf`` at ``w(r, V) = (x + V_X - u V_Z / gamma, y + V_Y - v V_Z / gamma, u, v)``.

    ``flow`` is a constant motion triple or a per-ray ``(n_x, n_y, n_u, n_v, 3)``
    array. Interpolation is bilinear in ``(x, y)`` at fixed pixel ``(u, v)``.
    Returns the warped light field and a mask of rays whose warped position
    stays inside the camera grid.
    """
    calib = lf.calib
    vx, vy, vz = _flow_components(flow, calib)
    _, _, u, v = calib.ray_grid()
    ix = np.arange(calib.n_x, dtype=np.float64)[:, None, None, None]
    iy = np.arange(calib.n_y, dtype=np.float64)[None, :, None, None]
    fx = ix + (vx - u * vz / calib.gamma) / calib.cam_spacing_x
    fy = iy + (vy - v * vz / calib.gamma) / calib.cam_spacing_y
    fx, fy = np.broadcast_arrays(fx, fy)
    iu = np.arange(calib.n_u)[None, None, :, None]
    iv = np.arange(calib.n_v)[None, None, None, :]
    values, inside = interpolate(lf.data, (fx, fy, iu, iv))
    values = np.broadcast_to(values, calib.shape)
    inside = np.broadcast_to(inside, calib.shape).copy()
    return lf.with_data(values), inside


def _resample_axis(arr: np.ndarray, axis: int, n_from: int, ps_from: float, n_to: int, ps_to: float):
    """Linear resampling of one centred axis onto a new pixel pitch (edge-clamped)."""
    pos = (np.arange(n_to) - (n_to - 1) / 2.0) * ps_to / ps_from + (n_from - 1) / 2.0
    pos = np.clip(pos, 0.0, n_from - 1.0)
    if n_from == 1:
        return np.take(arr, np.zeros(n_to, dtype=np.intp), axis=axis)
    i0 = np.clip(np.floor(pos).astype(np.intp), 0, n_from - 2)
    t = pos - i0
    shape = [1] * arr.ndim
    shape[axis] = n_to
    t = t.reshape(shape)
    return np.take(arr, i0, axis=axis) * (1.0 - t) + np.take(arr, i0 + 1, axis=axis) * t


def resample_uv(arr: np.ndarray, src: Calibration, dst: Calibration, axes=(2, 3)) -> np.ndarray:
    """Resample a grid defined on ``src``'s ``(u, v)`` pixels onto ``dst``'s pixels.

    Values are not rescaled; only the sampling positions change. Used both to
    downsample light fields and to carry metric flow between pyramid levels.
    """
    au, av = axes
    out = _resample_axis(arr, au, src.n_u, src.pixel_scale_u, dst.n_u, dst.pixel_scale_u)
    return _resample_axis(out, av, src.n_v, src.pixel_scale_v, dst.n_v, dst.pixel_scale_v)


class Pyramid(list):
    """Finest-first list of light fields; ``truncated`` is set when levels were dropped."""

    truncated: bool = False


def pyramid_sigma(factor: float) -> float:
    """Anti-alias blur (in pixels of the finer level) for a downsampling ``factor``."""
    return 1.0 / math.sqrt(2.0 * factor)


def build_pyramid(lf: LightField, levels: int, factor: float = 0.5, min_size: int = 8) -> Pyramid:
    """Coarse-to-fine pyramid that shrinks only the ``(u, v)`` axes.

    Each level is blurred along ``(u, v)`` and linearly resampled; the pixel
    scale is divided by ``factor`` so continuous ray coordinates are preserved.
    Camera axes ``(x, y)`` are never decimated.
    """
    if levels < 1:
        raise ValueError("levels must be >= 1")
    if not 0.0 < factor < 1.0:
        raise ValueError("factor must lie in (0, 1)")
    pyr = Pyramid([lf])
    sigma = pyramid_sigma(factor)
    for _ in range(1, levels):
        prev = pyr[-1]
        c = prev.calib
        n_u = int(round(c.n_u * factor))
        n_v = int(round(c.n_v * factor))
        if n_u < min_size or n_v < min_size:
            pyr.truncated = True
            warnings.warn(
                f"pyramid truncated at {len(pyr)} levels: next level {n_u}x{n_v} below minimum {min_size}",
                RuntimeWarning,
                stacklevel=2,
            )
            break
        blurred = prefilter(prev, (0.0, 0.0, sigma, sigma)).data
        new = replace(c, n_u=n_u, n_v=n_v, pixel_scale_u=c.pixel_scale_u / factor,
                      pixel_scale_v=c.pixel_scale_v / factor)
        pyr.append(LightField(new, resample_uv(blurred, c, new), prev.timestamp))
    return pyr
