"""Analytic light-field renderer for textured planes with exact ground-truth motion.

Planes are rigid: at frame ``t`` a plane point ``q`` (given in the plane's
frame-0 coordinates) sits at ``pivot + R(t * angle) (q - pivot) + t * motion``.
Rays are intersected with every plane and the nearest hit wins.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .lfcore import Calibration, LightField

__all__ = [
    "Texture",
    "Plane",
    "SceneSpec",
    "NoiseModel",
    "GroundTruth",
    "default_calibration",
    "render",
    "render_pair",
    "add_noise",
    "single_plane_scene",
    "two_plane_scene",
    "parse_scene",
    "format_scene",
    "load_scene",
]

TEXTURE_KINDS = ("noise", "stripes", "checker", "edge", "constant", "image")


def default_calibration(**overrides) -> Calibration:
    """Desk-scale camera: 9x9 views of 96x96 pixels, 3.6 mm aperture, gamma = 100 mm."""
    params = dict(
        gamma=100.0,
        cam_spacing_x=0.45,
        cam_spacing_y=0.45,
        pixel_scale_u=0.5,
        pixel_scale_v=0.5,
        n_x=9,
        n_y=9,
        n_u=96,
        n_v=96,
    )
    params.update(overrides)
    return Calibration(**params)


@dataclass
class Texture:
    """Procedural or image texture addressed in plane-local millimetres."""

    kind: str = "noise"
    texel: float = 0.5
    sigma: float = 2.0
    seed: int = 0
    size: int = 512
    mean: float = 0.5
    contrast: float = 0.15
    period: float = 10.0
    edge_position: float = 0.0
    edge_width: float = 1.0
    orientation: str = "vertical"
    path: str | None = None

    def __post_init__(self):
        if self.kind not in TEXTURE_KINDS:
            raise ValueError(f"unknown texture kind {self.kind!r}; expected one of {TEXTURE_KINDS}")
        if self.texel <= 0:
            raise ValueError("texel must be positive")
        if self.kind == "image" and not self.path:
            raise ValueError("image texture needs a path")

    @cached_property
    def tile(self) -> np.ndarray:
        """Periodic texel grid used by the ``noise``, ``stripes`` and ``image`` kinds."""
        if self.kind == "image":
            from .lfio import read_gray_image

            img = read_gray_image(Path(self.path))
            return np.ascontiguousarray(img.T)  # index as [X, Y]
        rng = np.random.default_rng(self.seed)
        if self.kind == "stripes":
            line = gaussian_filter(rng.standard_normal(self.size), self.sigma, mode="wrap")
            line = (line - line.mean()) / line.std()
            tile = np.repeat(line[:, None], 2, axis=1)
        else:
            tile = gaussian_filter(rng.standard_normal((self.size, self.size)), self.sigma, mode="wrap")
            tile = (tile - tile.mean()) / tile.std()
        return np.clip(self.mean + self.contrast * tile, 0.0, 1.0)

    def sample(self, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
        """Texture value at plane-local coordinates (mm)."""
        X = np.asarray(X, dtype=np.float64)
        Y = np.asarray(Y, dtype=np.float64)
        if self.kind == "constant":
            return np.full(np.broadcast_shapes(X.shape, Y.shape), self.mean)
        if self.kind == "checker":
            cx = np.floor(X / self.period).astype(np.int64)
            cy = np.floor(Y / self.period).astype(np.int64)
            return self.mean + self.contrast * np.where((cx + cy) % 2 == 0, 1.0, -1.0)
        if self.kind == "edge":
            coord = X if self.orientation == "vertical" else Y
            step = np.tanh((coord - self.edge_position) / self.edge_width)
            return self.mean + self.contrast * step
        tile = self.tile
        fx = X / self.texel
        fy = Y / self.texel
        if self.kind == "stripes":
            fy = np.zeros_like(fy)
        nx, ny = tile.shape
        x0 = np.floor(fx)
        y0 = np.floor(fy)
        tx = fx - x0
        ty = fy - y0
        x0 = x0.astype(np.int64) % nx
        y0 = y0.astype(np.int64) % ny
        x1 = (x0 + 1) % nx
        y1 = (y0 + 1) % ny
        return (
            tile[x0, y0] * (1 - tx) * (1 - ty)
            + tile[x1, y0] * tx * (1 - ty)
            + tile[x0, y1] * (1 - tx) * ty
            + tile[x1, y1] * tx * ty
        )


def _rotation(axis, angle: float) -> np.ndarray:
    if axis is None or angle == 0.0:
        return np.eye(3)
    if isinstance(axis, str):
        axis = {"x": (1.0, 0.0, 0.0), "y": (0.0, 1.0, 0.0), "z": (0.0, 0.0, 1.0)}[axis.lower()]
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * K @ K


@dataclass
class Plane:
    """Fronto-parallel textured rectangle (or infinite plane) at frame 0.

    ``bounds`` is ``(xmin, xmax, ymin, ymax)`` in plane-local mm; ``None``
    makes the plane infinite (a background). ``motion`` is a translation per
    frame; ``rotation_angle`` (radians per frame) turns the plane about
    ``rotation_axis`` through ``pivot``.
    """

    depth: float
    texture: Texture = field(default_factory=Texture)
    bounds: tuple[float, float, float, float] | None = None
    albedo: float = 1.0
    motion: tuple[float, float, float] = (0.0, 0.0, 0.0)
    rotation_axis: str | tuple[float, float, float] | None = None
    rotation_angle: float = 0.0
    pivot: tuple[float, float, float] | None = None
    name: str = ""

    def __post_init__(self):
        if not (math.isfinite(self.depth) and self.depth > 0):
            raise ValueError("plane depth must be positive")
        self.motion = tuple(float(m) for m in self.motion)

    @property
    def pivot_point(self) -> np.ndarray:
        if self.pivot is not None:
            return np.asarray(self.pivot, dtype=np.float64)
        if self.bounds is not None and all(math.isfinite(b) for b in self.bounds):
            xmin, xmax, ymin, ymax = self.bounds
            return np.array([(xmin + xmax) / 2, (ymin + ymax) / 2, self.depth])
        return np.array([0.0, 0.0, self.depth])

    def pose(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        """Rotation and translation mapping frame-0 points to frame ``t``: ``p -> R p + c``."""
        R = _rotation(self.rotation_axis, self.rotation_angle * t)
        pivot = self.pivot_point
        c = pivot - R @ pivot + t * np.asarray(self.motion)
        return R, c

    def displacement(self, points: np.ndarray, t: float = 1.0) -> np.ndarray:
        """Rigid displacement of frame-0 surface points (``(..., 3)``) at frame ``t``."""
        R, c = self.pose(t)
        return points @ R.T + c - points

    def intersect(self, x, y, u, v, gamma: float, t: float):
        """Hit depth, plane-local ``(X, Y)`` and coverage mask for rays at frame ``t``."""
        R, c = self.pose(t)
        x, y, u, v = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (x, y, u, v)))
        dx = u / gamma
        dy = v / gamma
        if np.allclose(R, np.eye(3)):
            s = np.full(x.shape, self.depth + c[2])
            X = x + s * dx - c[0]
            Y = y + s * dy - c[1]
        else:
            n = R[:, 2]
            p0 = R @ np.array([0.0, 0.0, self.depth]) + c
            denom = n[0] * dx + n[1] * dy + n[2]
            with np.errstate(divide="ignore", invalid="ignore"):
                s = (n[0] * (p0[0] - x) + n[1] * (p0[1] - y) + n[2] * p0[2]) / denom
            px = x + s * dx - c[0]
            py = y + s * dy - c[1]
            pz = s - c[2]
            # inverse rotation: q = R^T (p - c)
            X = R[0, 0] * px + R[1, 0] * py + R[2, 0] * pz
            Y = R[0, 1] * px + R[1, 1] * py + R[2, 1] * pz
        hit = np.isfinite(s) & (s > 0)
        if self.bounds is not None:
            xmin, xmax, ymin, ymax = self.bounds
            hit &= (X >= xmin) & (X < xmax) & (Y >= ymin) & (Y < ymax)
        return s, X, Y, hit


@dataclass
class SceneSpec:
    """Planes plus the camera they are rendered with; at least one plane must be unbounded."""

    planes: list[Plane]
    calib: Calibration = field(default_factory=default_calibration)
    supersample: int = 2

    def __post_init__(self):
        if not self.planes:
            raise ValueError("scene needs at least one plane")
        if not any(p.bounds is None for p in self.planes):
            raise ValueError("scene needs an unbounded background plane")
        if self.supersample < 1:
            raise ValueError("supersample must be >= 1")


@dataclass(frozen=True)
class NoiseModel:
    """Affine sensor noise: variance = photon_gain * signal + read_sigma**2."""

    photon_gain: float = 0.0
    read_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.photon_gain < 0 or self.read_sigma < 0:
            raise ValueError("noise parameters must be non-negative")


@dataclass(frozen=True)
class GroundTruth:
    """Central-view motion (mm), disparity ``gamma / Z`` and validity masks."""

    flow: np.ndarray  # (n_u, n_v, 3)
    alpha: np.ndarray  # (n_u, n_v)
    valid: np.ndarray  # (n_u, n_v) central-view pixels with a single visible plane in both frames
    ray_valid: np.ndarray  # (n_x, n_y, n_u, n_v)
    plane_index: np.ndarray  # (n_u, n_v) index of the visible plane at frame 0


def _subsample_offsets(calib: Calibration, k: int):
    if k == 1:
        return [(0.0, 0.0)]
    off = (np.arange(k) + 0.5) / k - 0.5
    return [(a * calib.pixel_scale_u, b * calib.pixel_scale_v) for a in off for b in off]


def _trace(scene: SceneSpec, x, y, u, v, t: float):
    """Nearest-hit plane index, depth and radiance for every ray."""
    gamma = scene.calib.gamma
    shape = np.broadcast_shapes(np.shape(x), np.shape(y), np.shape(u), np.shape(v))
    best = np.full(shape, np.inf)
    index = np.full(shape, -1, dtype=np.int64)
    value = np.zeros(shape)
    for k, plane in enumerate(scene.planes):
        s, X, Y, hit = plane.intersect(x, y, u, v, gamma, t)
        s = np.broadcast_to(s, shape)
        closer = hit & (s < best)
        if not closer.any():
            continue
        val = plane.albedo * plane.texture.sample(np.broadcast_to(X, shape)[closer],
                                                  np.broadcast_to(Y, shape)[closer])
        best = np.where(closer, s, best)
        index = np.where(closer, k, index)
        value[closer] = val
    return index, best, value


def _render_with_index(scene: SceneSpec, t: float):
    calib = scene.calib
    x, y, u, v = calib.ray_grid()
    acc = np.zeros(calib.shape)
    first = None
    uniform = np.ones(calib.shape, dtype=bool)
    offsets = _subsample_offsets(calib, scene.supersample)
    for du, dv in offsets:
        index, _, value = _trace(scene, x, y, u + du, v + dv, t)
        acc += value
        if first is None:
            first = index
        else:
            uniform &= index == first
    return np.clip(acc / len(offsets), 0.0, 1.0), first, uniform


def render(scene: SceneSpec, t: float = 0) -> LightField:
    """Render frame ``t`` with ``supersample``x``supersample`` samples per ray."""
    data, _, _ = _render_with_index(scene, t)
    return LightField(scene.calib, data, timestamp=t)


def render_pair(scene: SceneSpec) -> tuple[LightField, LightField, GroundTruth]:
    """Frames 0 and 1 plus central-view ground truth."""
    calib = scene.calib
    d0, idx0, uni0 = _render_with_index(scene, 0)
    d1, idx1, uni1 = _render_with_index(scene, 1)
    ray_valid = uni0 & uni1 & (idx0 == idx1) & (idx0 >= 0)

    cx, cy = calib.center_view
    xc = calib.x_coords()[cx]
    yc = calib.y_coords()[cy]
    u = calib.u_coords()[:, None]
    v = calib.v_coords()[None, :]
    index, depth, _ = _trace(scene, xc, yc, u, v, 0)
    points = np.stack(np.broadcast_arrays(xc + depth * u / calib.gamma,
                                          yc + depth * v / calib.gamma, depth), axis=-1)
    flow = np.zeros(points.shape)
    for k, plane in enumerate(scene.planes):
        sel = index == k
        if sel.any():
            flow[sel] = plane.displacement(points[sel], 1.0)
    alpha = calib.gamma / depth
    valid = ray_valid[cx, cy].copy()
    return (
        LightField(calib, d0, timestamp=0),
        LightField(calib, d1, timestamp=1),
        GroundTruth(flow=flow, alpha=alpha, valid=valid, ray_valid=ray_valid, plane_index=index),
    )


def add_noise(lf: LightField, nm: NoiseModel) -> LightField:
    """Affine photon + read noise, clamped to [0, 1]; one RNG stream per view."""
    if nm.photon_gain == 0 and nm.read_sigma == 0:
        return lf.with_data(lf.data.copy())
    out = np.empty(lf.shape)
    calib = lf.calib
    for ix in range(calib.n_x):
        for iy in range(calib.n_y):
            rng = np.random.default_rng(np.random.SeedSequence([nm.seed, ix, iy]))
            view = lf.data[ix, iy]
            std = np.sqrt(nm.photon_gain * view + nm.read_sigma ** 2)
            out[ix, iy] = view + std * rng.standard_normal(view.shape)
    return lf.with_data(np.clip(out, 0.0, 1.0))


def single_plane_scene(motion=(0.0, 0.0, 0.0), depth: float = 300.0, texture: Texture | None = None,
                       calib: Calibration | None = None, **plane_kw) -> SceneSpec:
    """One infinite textured plane translating by ``motion`` per frame."""
    plane = Plane(depth=depth, texture=texture or Texture(), motion=motion, name="plane", **plane_kw)
    return SceneSpec([plane], calib or default_calibration())


def two_plane_scene(motion=(0.4, 0.0, 0.0), depths=(300.0, 400.0), calib: Calibration | None = None,
                    seeds=(1, 2)) -> SceneSpec:
    """Near half-plane (X < 0) and far background moving in opposite directions.

    In the central view the depth and motion boundary is the vertical line
    ``u = 0``.
    """
    inf = math.inf
    m = tuple(float(c) for c in motion)
    near = Plane(depth=depths[0], texture=Texture(seed=seeds[0]), bounds=(-inf, 0.0, -inf, inf),
                 motion=m, name="near")
    far = Plane(depth=depths[1], texture=Texture(seed=seeds[1]), motion=tuple(-c for c in m), name="far")
    return SceneSpec([near, far], calib or default_calibration())


# --- text serialisation -------------------------------------------------------------------------

_CALIB_KEYS = ("gamma", "cam_spacing_x", "cam_spacing_y", "pixel_scale_u", "pixel_scale_v",
               "n_x", "n_y", "n_u", "n_v")


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(p) for p in text.replace(",", " ").split())


def parse_scene(text: str, base_dir: Path | None = None) -> SceneSpec:
    """Parse the ``[camera]`` / ``[plane]`` section format.

    ``[plane]`` keys: ``name, depth, bounds, albedo, motion, rotation_axis,
    rotation_angle, pivot`` and ``texture`` plus ``texture.<field>`` for any
    :class:`Texture` field. ``[camera]`` keys are calibration fields plus
    ``supersample``.
    """
    sections: list[tuple[str, dict[str, str]]] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            sections.append((line[1:-1].strip().lower(), {}))
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        if not sections:
            raise ValueError(f"line {lineno}: entry outside of a section")
        key, value = (s.strip() for s in line.split("=", 1))
        sections[-1][1][key.lower()] = value

    calib_kw: dict[str, float] = {}
    supersample = 2
    planes = []
    for name, entries in sections:
        if name == "camera":
            for key, value in entries.items():
                if key == "supersample":
                    supersample = int(value)
                elif key in _CALIB_KEYS:
                    calib_kw[key] = int(value) if key.startswith("n_") else float(value)
                else:
                    raise ValueError(f"unknown camera key {key!r}")
        elif name == "plane":
            planes.append(_parse_plane(entries, base_dir))
        else:
            raise ValueError(f"unknown section [{name}]")
    return SceneSpec(planes, default_calibration(**calib_kw), supersample=supersample)


def _parse_plane(entries: dict[str, str], base_dir: Path | None) -> Plane:
    tex_kw: dict[str, object] = {}
    kw: dict[str, object] = {}
    for key, value in entries.items():
        if key == "texture":
            tex_kw["kind"] = value
        elif key.startswith("texture."):
            fname = key.split(".", 1)[1]
            if fname not in Texture.__dataclass_fields__:
                raise ValueError(f"unknown texture field {fname!r}")
            ftype = Texture.__dataclass_fields__[fname].type
            if fname == "path":
                path = Path(value)
                if base_dir is not None and not path.is_absolute():
                    path = base_dir / path
                tex_kw[fname] = str(path)
            elif fname in ("kind", "orientation"):
                tex_kw[fname] = value
            elif "int" in str(ftype):
                tex_kw[fname] = int(value)
            else:
                tex_kw[fname] = float(value)
        elif key == "depth" or key == "albedo" or key == "rotation_angle":
            kw[key] = float(value)
        elif key in ("motion", "pivot"):
            kw[key] = _floats(value)
        elif key == "bounds":
            kw[key] = None if value.lower() in ("none", "inf", "") else _floats(value)
        elif key == "rotation_axis":
            kw[key] = value if value.lower() in ("x", "y", "z") else _floats(value)
        elif key == "name":
            kw[key] = value
        else:
            raise ValueError(f"unknown plane key {key!r}")
    if "depth" not in kw:
        raise ValueError("plane section needs a depth")
    return Plane(texture=Texture(**tex_kw), **kw)


def format_scene(scene: SceneSpec) -> str:
    """Inverse of :func:`parse_scene`."""
    lines = ["[camera]"]
    for key in _CALIB_KEYS:
        lines.append(f"{key} = {getattr(scene.calib, key)!r}")
    lines.append(f"supersample = {scene.supersample}")
    default_tex = Texture()
    for plane in scene.planes:
        lines += ["", "[plane]"]
        if plane.name:
            lines.append(f"name = {plane.name}")
        lines.append(f"depth = {plane.depth!r}")
        if plane.bounds is not None:
            lines.append("bounds = " + ", ".join(repr(float(b)) for b in plane.bounds))
        lines.append(f"albedo = {plane.albedo!r}")
        lines.append("motion = " + ", ".join(repr(float(m)) for m in plane.motion))
        if plane.rotation_axis is not None:
            axis = plane.rotation_axis
            lines.append("rotation_axis = " + (axis if isinstance(axis, str) else ", ".join(map(repr, axis))))
            lines.append(f"rotation_angle = {plane.rotation_angle!r}")
        if plane.pivot is not None:
            lines.append("pivot = " + ", ".join(repr(float(p)) for p in plane.pivot))
        lines.append(f"texture = {plane.texture.kind}")
        for fname in Texture.__dataclass_fields__:
            if fname == "kind":
                continue
            value = getattr(plane.texture, fname)
            if value != getattr(default_tex, fname):
                lines.append(f"texture.{fname} = {value}")
    return "\n".join(lines) + "\n"


def load_scene(path) -> SceneSpec:
    path = Path(path)
    return parse_scene(path.read_text(encoding="utf-8"), base_dir=path.parent)
