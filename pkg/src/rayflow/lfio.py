"""On-disk light fields: a directory of 16-bit sub-aperture images plus ``lf.meta``."""

from __future__ import annotations

import logging
import warnings
from pathlib import Path

import numpy as np
from PIL import Image

from .lfcore import Calibration, LightField

log = logging.getLogger(__name__)

__all__ = [
    "META_NAME",
    "META_KEYS",
    "MetadataError",
    "parse_meta",
    "format_meta",
    "read_meta",
    "view_name",
    "read_gray_image",
    "write_gray16",
    "read_lightfield",
    "write_lightfield",
]

META_NAME = "lf.meta"
META_KEYS = {
    "gamma_mm": ("gamma", float),
    "cam_spacing_x_mm": ("cam_spacing_x", float),
    "cam_spacing_y_mm": ("cam_spacing_y", float),
    "pixel_scale_u_mm": ("pixel_scale_u", float),
    "pixel_scale_v_mm": ("pixel_scale_v", float),
    "n_x": ("n_x", int),
    "n_y": ("n_y", int),
    "n_u": ("n_u", int),
    "n_v": ("n_v", int),
}
_REC601 = np.array([0.299, 0.587, 0.114])


class MetadataError(ValueError):
    """Malformed or incomplete ``lf.meta``; ``key`` names the offending entry."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


def parse_meta(text: str, source: str = META_NAME) -> Calibration:
    """Parse ``key = value`` lines (``#`` starts a comment).

    Unknown keys raise a warning, missing or malformed required keys raise
    :class:`MetadataError`.
    """
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise MetadataError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in META_KEYS:
            warnings.warn(f"{source}:{lineno}: unknown key {key!r} ignored", UserWarning, stacklevel=2)
            continue
        values[key] = value
    kwargs = {}
    for key, (field, conv) in META_KEYS.items():
        if key not in values:
            raise MetadataError(f"{source}: missing required key {key!r}", key)
        try:
            kwargs[field] = conv(values[key])
        except ValueError:
            raise MetadataError(f"{source}: bad value {values[key]!r} for key {key!r}", key) from None
    try:
        return Calibration(**kwargs)
    except ValueError as exc:
        raise MetadataError(f"{source}: {exc}") from None


def format_meta(calib: Calibration) -> str:
    lines = [f"{key} = {getattr(calib, field)!r}" for key, (field, _) in META_KEYS.items()]
    return "\n".join(lines) + "\n"


def read_meta(directory) -> Calibration:
    path = Path(directory) / META_NAME
    return parse_meta(path.read_text(encoding="utf-8"), str(path))


def view_name(ix: int, iy: int, ext: str = "png") -> str:
    return f"view_{ix:02}_{iy:02}.{ext}"


def read_gray_image(path) -> np.ndarray:
    """Image as float luminance in [0, 1], indexed ``[row, col]``.

    Colour images are reduced with Rec. 601 weights; integer images are
    scaled by their bit depth.
    """
    with Image.open(path) as img:
        mode = img.mode
        if mode in ("RGB", "RGBA"):
            arr = np.asarray(img.convert("RGB"), dtype=np.float64) @ _REC601 / 255.0
        elif mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(img, dtype=np.float64) / 65535.0
        elif mode == "L":
            arr = np.asarray(img, dtype=np.float64) / 255.0
        elif mode == "F":
            arr = np.asarray(img, dtype=np.float64)
        else:
            arr = np.asarray(img.convert("L"), dtype=np.float64) / 255.0
    return np.clip(arr, 0.0, 1.0)


def write_gray16(path, image: np.ndarray) -> None:
    """Store a [0, 1] image as 16-bit grayscale (PNG or PGM by extension)."""
    q = np.round(np.clip(image, 0.0, 1.0) * 65535.0).astype(np.uint16)
    Image.fromarray(q).save(path)


def _find_view(directory: Path, ix: int, iy: int) -> Path:
    for ext in ("png", "pgm"):
        p = directory / view_name(ix, iy, ext)
        if p.exists():
            return p
    raise FileNotFoundError(f"{directory}: missing sub-aperture image {view_name(ix, iy)}")


def read_lightfield(directory, timestamp=0) -> LightField:
    """Load ``lf.meta`` and every ``view_XX_YY`` image of a directory.

    Images are stored with ``u`` along columns and ``v`` along rows.
    """
    directory = Path(directory)
    calib = read_meta(directory)
    data = np.empty(calib.shape)
    for ix in range(calib.n_x):
        for iy in range(calib.n_y):
            img = read_gray_image(_find_view(directory, ix, iy))
            if img.shape != (calib.n_v, calib.n_u):
                raise ValueError(f"{directory}: view ({ix}, {iy}) is {img.shape[1]}x{img.shape[0]}, "
                                 f"expected {calib.n_u}x{calib.n_v}")
            data[ix, iy] = img.T
    return LightField(calib, data, timestamp)


def write_lightfield(directory, lf: LightField, ext: str = "png") -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / META_NAME).write_text(format_meta(lf.calib), encoding="utf-8")
    for ix in range(lf.calib.n_x):
        for iy in range(lf.calib.n_y):
            write_gray16(directory / view_name(ix, iy, ext), lf.data[ix, iy].T)
    return directory
