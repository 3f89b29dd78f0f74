"""Colour coding of flow fields: optical-flow colour wheel for X/Y, diverging map for Z."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image
from PIL.PngImagePlugin import PngInfo

from .flowfield import FlowField

__all__ = [
    "color_wheel",
    "encode_xy",
    "decode_xy",
    "encode_z",
    "render_flow",
    "visualize",
    "Z_NEGATIVE",
    "Z_POSITIVE",
    "Z_ZERO",
]

# hue segment lengths of the standard optical-flow wheel: R-Y, Y-G, G-C, C-B, B-M, M-R
_SEGMENTS = (15, 6, 4, 11, 13, 6)
Z_ZERO = np.array([128.0, 128.0, 128.0])
Z_NEGATIVE = np.array([33.0, 102.0, 172.0])
Z_POSITIVE = np.array([178.0, 24.0, 43.0])


def color_wheel() -> np.ndarray:
    """The 55 fully saturated key colours, shape ``(55, 3)``, values in [0, 255]."""
    ry, yg, gc, cb, bm, mr = _SEGMENTS
    ramps = []

    def seg(n, fixed, rising, falling):
        c = np.zeros((n, 3))
        t = np.arange(n) / n
        if fixed is not None:
            c[:, fixed] = 255
        if rising is not None:
            c[:, rising] = np.floor(255 * t)
        if falling is not None:
            c[:, falling] = 255 - np.floor(255 * t)
        return c

    ramps.append(seg(ry, 0, 1, None))
    ramps.append(seg(yg, 1, None, 0))
    ramps.append(seg(gc, 1, 2, None))
    ramps.append(seg(cb, 2, None, 1))
    ramps.append(seg(bm, 2, 0, None))
    ramps.append(seg(mr, 0, None, 2))
    return np.concatenate(ramps)


def _hue(angle: np.ndarray) -> np.ndarray:
    """Saturated wheel colour (0..1) for flow direction ``atan2(-y, -x)``."""
    wheel = color_wheel() / 255.0
    n = len(wheel)
    fk = (angle / np.pi + 1.0) / 2.0 * (n - 1)
    k0 = np.floor(fk).astype(int) % n
    k1 = (k0 + 1) % n
    f = (fk - np.floor(fk))[..., None]
    return (1 - f) * wheel[k0] + f * wheel[k1]


def encode_xy(fx: np.ndarray, fy: np.ndarray, max_magnitude: float | None = None,
              valid: np.ndarray | None = None) -> tuple[np.ndarray, float]:
    """Colour-wheel image of a 2D flow.

    Hue encodes direction, saturation the magnitude relative to
    ``max_magnitude`` (default: the largest valid magnitude). Zero flow is
    white and invalid entries are black.

    Returns:
        ``(rgb uint8 image, max_magnitude used)``.
    """
    fx = np.asarray(fx, dtype=np.float64)
    fy = np.asarray(fy, dtype=np.float64)
    valid = np.ones(fx.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    mag = np.hypot(fx, fy)
    if max_magnitude is None:
        max_magnitude = float(mag[valid].max()) if valid.any() else 0.0
    scale = max_magnitude if max_magnitude > 0 else 1.0
    rad = np.clip(mag / scale, 0.0, 1.0)[..., None]
    col = 1.0 - rad * (1.0 - _hue(np.arctan2(-fy, -fx)))
    rgb = np.round(255.0 * col).astype(np.uint8)
    rgb[~valid] = 0
    return rgb, float(max_magnitude)


def decode_xy(rgb: np.ndarray, max_magnitude: float, samples: int = 7200) -> tuple[np.ndarray, np.ndarray]:
    """Invert :func:`encode_xy` up to 8-bit quantisation.

    Returns:
        ``(direction in radians, magnitude)`` with direction ``atan2(fy, fx)``.
    """
    col = np.asarray(rgb, dtype=np.float64) / 255.0
    drop = 1.0 - col
    rad = drop.max(axis=-1)  # every key colour has a full channel, so 1 - hue has a zero
    with np.errstate(divide="ignore", invalid="ignore"):
        hue = np.where(rad[..., None] > 0, 1.0 - drop / rad[..., None], 1.0)
    angles = np.linspace(-np.pi, np.pi, samples, endpoint=False)
    table = _hue(angles)
    d2 = ((hue.reshape(-1, 1, 3) - table[None]) ** 2).sum(axis=-1)
    wheel_angle = angles[np.argmin(d2, axis=1)].reshape(rad.shape)
    # the wheel angle is atan2(-fy, -fx), i.e. the flow direction rotated by pi
    direction = np.angle(np.exp(1j * (wheel_angle + np.pi)))
    return direction, rad * max_magnitude


def encode_z(fz: np.ndarray, max_abs: float | None = None, valid: np.ndarray | None = None) -> tuple[np.ndarray, float]:
    """Diverging blue / grey / red image of the Z flow; zero is mid-grey, invalid black."""
    fz = np.asarray(fz, dtype=np.float64)
    valid = np.ones(fz.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    if max_abs is None:
        max_abs = float(np.abs(fz[valid]).max()) if valid.any() else 0.0
    t = np.clip(fz / (max_abs if max_abs > 0 else 1.0), -1.0, 1.0)[..., None]
    end = np.where(t < 0, Z_NEGATIVE, Z_POSITIVE)
    rgb = np.round(Z_ZERO + np.abs(t) * (end - Z_ZERO)).astype(np.uint8)
    rgb[~valid] = 0
    return rgb, float(max_abs)


def render_flow(flow: FlowField) -> tuple[np.ndarray, np.ndarray, dict]:
    """XY and Z images of a flow field (central view for full-ray fields).

    Images are indexed ``[row = v, col = u]``.
    """
    cv = flow.central() if flow.layout.ndim == 4 else flow
    vec = cv.vectors.transpose(1, 0, 2)
    valid = cv.valid.T
    xy, max_xy = encode_xy(vec[..., 0], vec[..., 1], valid=valid)
    z, max_z = encode_z(vec[..., 2], valid=valid)
    return xy, z, {"max_xy_mm": max_xy, "max_abs_z_mm": max_z}


def visualize(flow: FlowField, prefix) -> tuple[Path, Path]:
    """Write ``<prefix>_xy.png`` and ``<prefix>_z.png``; the colour scales go into PNG text chunks."""
    xy, z, scales = render_flow(flow)
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    paths = (prefix.with_name(prefix.name + "_xy.png"), prefix.with_name(prefix.name + "_z.png"))
    for img, path, key in ((xy, paths[0], "max_xy_mm"), (z, paths[1], "max_abs_z_mm")):
        info = PngInfo()
        info.add_text(key, repr(scales[key]))
        Image.fromarray(img).save(path, pnginfo=info)
    return paths
