"""Flow field container and the binary ``.rflw`` file format.

File layout (little-endian)::

    magic    4 bytes  b"RFLW"
    version  u16      1
    layout   u8       0 = full ray grid (4 dims), 1 = central view (2 dims)
    dims     u32 x 4 or u32 x 2
    payload  per entry: float32 V_X, V_Y, V_Z then one validity byte (13 bytes)
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = ["Layout", "FlowField", "SolveStatus", "write_flow", "read_flow", "FlowFileError", "MAGIC", "VERSION"]

MAGIC = b"RFLW"
VERSION = 1
_ENTRY = np.dtype([("v", "<f4", (3,)), ("valid", "u1")])
assert _ENTRY.itemsize == 13


class FlowFileError(ValueError):
    pass


class Layout(enum.IntEnum):
    FULL_RAY = 0
    CENTRAL_VIEW = 1

    @property
    def ndim(self) -> int:
        return 4 if self is Layout.FULL_RAY else 2


@dataclass
class SolveStatus:
    """Convergence report of an iterative solver."""

    converged: bool = True
    sweeps: int = 0
    message: str = ""


@dataclass
class FlowField:
    """Motion vectors in mm with a validity mask and optional confidence.

    ``vectors`` has shape ``dims + (3,)``; invalid entries are kept but must
    be ignored by consumers.
    """

    vectors: np.ndarray
    valid: np.ndarray
    layout: Layout = Layout.CENTRAL_VIEW
    confidence: np.ndarray | None = None
    status: "SolveStatus | None" = None

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        self.layout = Layout(self.layout)
        if self.vectors.ndim != self.layout.ndim + 1 or self.vectors.shape[-1] != 3:
            raise ValueError(f"vectors of shape {self.vectors.shape} do not fit layout {self.layout.name}")
        if self.valid.shape != self.vectors.shape[:-1]:
            raise ValueError("validity mask shape does not match vectors")
        if not np.all(np.isfinite(self.vectors[self.valid])):
            raise ValueError("valid flow entries must be finite")

    @property
    def dims(self) -> tuple[int, ...]:
        return self.valid.shape

    def central(self, view: tuple[int, int] | None = None) -> "FlowField":
        """Central-view slice of a full-ray field (identity for central-view fields)."""
        if self.layout is Layout.CENTRAL_VIEW:
            return self
        ix, iy = view if view is not None else (self.dims[0] // 2, self.dims[1] // 2)
        conf = None if self.confidence is None else self.confidence[ix, iy]
        return FlowField(self.vectors[ix, iy].copy(), self.valid[ix, iy].copy(), Layout.CENTRAL_VIEW, conf,
                         self.status)

    @classmethod
    def constant(cls, dims, motion, layout=Layout.CENTRAL_VIEW) -> "FlowField":
        vec = np.broadcast_to(np.asarray(motion, dtype=np.float64), tuple(dims) + (3,)).copy()
        return cls(vec, np.ones(dims, dtype=bool), layout)


def write_flow(path, flow: FlowField) -> None:
    header = struct.pack("<4sHB", MAGIC, VERSION, int(flow.layout))
    header += struct.pack(f"<{flow.layout.ndim}I", *flow.dims)
    payload = np.empty(flow.dims, dtype=_ENTRY)
    payload["v"] = flow.vectors.astype("<f4")
    payload["valid"] = flow.valid.astype(np.uint8)
    Path(path).write_bytes(header + payload.tobytes(order="C"))


def read_flow(path) -> FlowField:
    raw = Path(path).read_bytes()
    if len(raw) < 7 or raw[:4] != MAGIC:
        raise FlowFileError(f"{path}: not a RFLW flow file")
    version, layout = struct.unpack_from("<HB", raw, 4)
    if version != VERSION:
        raise FlowFileError(f"{path}: unsupported flow file version {version}")
    try:
        layout = Layout(layout)
    except ValueError:
        raise FlowFileError(f"{path}: unknown layout tag {layout}") from None
    offset = 7 + 4 * layout.ndim
    if len(raw) < offset:
        raise FlowFileError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{layout.ndim}I", raw, 7)
    expected = int(np.prod(dims)) * _ENTRY.itemsize
    if len(raw) - offset != expected:
        raise FlowFileError(f"{path}: payload is {len(raw) - offset} bytes, expected {expected}")
    payload = np.frombuffer(raw, dtype=_ENTRY, offset=offset).reshape(dims)
    return FlowField(payload["v"].astype(np.float64), payload["valid"] != 0, layout)
