"""Cartesian parameter sweeps over freshly rendered synthetic pairs."""

from __future__ import annotations

import csv
import io
import itertools
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .flowfield import FlowField, Layout
from .methods import METHODS, MethodConfig, estimate_flow
from .metrics import mae_rmse, relative_error
from .structure_aware import DisparityMap
from .synth import NoiseModel, Texture, add_noise, default_calibration, render_pair, single_plane_scene, two_plane_scene

log = logging.getLogger(__name__)

__all__ = [
    "AXES",
    "ExperimentSpec",
    "parse_experiment",
    "load_experiment",
    "expand_cells",
    "run_cell",
    "run_sweep",
    "format_csv",
    "format_table",
    "worker_count",
]

# axis name -> converter; every axis may list several comma-separated values
AXES = {
    "method": str,
    "scene": str,
    "motion": float,
    "direction": str,
    "aperture": float,
    "angular": int,
    "depth": float,
    "noise": float,
    "photon_gain": float,
    "rotation": float,
    "disparity": str,
    "disparity_noise": float,
    "seed": int,
}
DEFAULTS = {
    "method": "lk",
    "scene": "single",
    "motion": 0.5,
    "direction": "x",
    "aperture": float("nan"),
    "angular": 0,
    "depth": 300.0,
    "noise": 0.0,
    "photon_gain": 0.0,
    "rotation": 0.0,
    "disparity": "sweep",
    "disparity_noise": 0.0,
    "seed": 0,
}
# single-valued settings
SETTINGS = {"n_u": int, "n_v": int, "texel": float, "supersample": int, "cam_spacing": float}
_NAMED_DIRECTIONS = {"x": (1, 0, 0), "y": (0, 1, 0), "z": (0, 0, 1), "xy": (1, 1, 0), "xz": (1, 0, 1),
                     "yz": (0, 1, 1), "xyz": (1, 1, 1)}
METRIC_COLUMNS = ("mae_x", "mae_y", "mae_z", "rmse_x", "rmse_y", "rmse_z", "rel_error", "epe", "n_valid",
                  "rel_error_all", "valid_fraction", "converged")


@dataclass
class ExperimentSpec:
    """Declared axes, fixed settings and solver overrides of a sweep."""

    axes: dict[str, list] = field(default_factory=dict)
    settings: dict[str, float] = field(default_factory=dict)
    overrides: list[tuple[str, str, str]] = field(default_factory=list)

    def config(self) -> MethodConfig:
        cfg = MethodConfig()
        for section, key, value in self.overrides:
            cfg.override(section, key, value)
        return cfg


def parse_experiment(text: str) -> ExperimentSpec:
    """Parse ``key = v1, v2, ...`` lines (``#`` comments).

    Axis keys are listed in :data:`AXES`; fixed settings are ``n_u, n_v,
    texel, supersample, cam_spacing``; ``lk.<field>``, ``global.<field>`` and
    ``sag.<field>`` override solver parameters.
    """
    spec = ExperimentSpec()
    cfg = MethodConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.lower()
        if "." in key:
            section, name = key.split(".", 1)
            try:
                cfg.override(section, name, value)
            except (KeyError, ValueError) as exc:
                raise ValueError(f"line {lineno}: {exc}") from None
            spec.overrides.append((section, name, value))
        elif key in AXES:
            try:
                values = [AXES[key](v.strip()) for v in value.split(",") if v.strip()]
            except ValueError:
                raise ValueError(f"line {lineno}: bad value list {value!r} for {key!r}") from None
            if not values:
                raise ValueError(f"line {lineno}: empty value list for {key!r}")
            spec.axes[key] = values
        elif key in SETTINGS:
            try:
                spec.settings[key] = SETTINGS[key](value)
            except ValueError:
                raise ValueError(f"line {lineno}: bad value {value!r} for {key!r}") from None
        else:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
    for m in spec.axes.get("method", []):
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}")
    for d in spec.axes.get("direction", []):
        _direction(d)
    return spec


def load_experiment(path) -> ExperimentSpec:
    return parse_experiment(Path(path).read_text(encoding="utf-8"))


def _direction(name: str) -> np.ndarray:
    if name in _NAMED_DIRECTIONS:
        vec = np.array(_NAMED_DIRECTIONS[name], dtype=np.float64)
    else:
        try:
            vec = np.array([float(p) for p in name.split(":")])
        except ValueError:
            raise ValueError(f"bad direction {name!r}; use x, y, z, xy, ... or a:b:c") from None
        if vec.shape != (3,):
            raise ValueError(f"bad direction {name!r}; need three components")
    n = np.linalg.norm(vec)
    if n == 0:
        raise ValueError("direction must be non-zero")
    return vec / n


def expand_cells(spec: ExperimentSpec) -> list[dict]:
    """All combinations in declaration order of :data:`AXES` (last axis varies fastest)."""
    names = [k for k in AXES if k in spec.axes]
    cells = []
    for combo in itertools.product(*(spec.axes[k] for k in names)):
        cell = dict(DEFAULTS)
        cell.update(zip(names, combo))
        cells.append(cell)
    return cells


def _calibration(cell: dict, settings: dict):
    kw = {k: settings[k] for k in ("n_u", "n_v") if k in settings}
    base = default_calibration(**kw)
    spacing = float(settings.get("cam_spacing", base.cam_spacing_x))
    n = int(cell["angular"])
    ap = float(cell["aperture"])
    if math.isfinite(ap) and n > 0:
        spacing = ap / (n - 1)
    elif math.isfinite(ap):
        n = int(round(ap / spacing)) + 1
    elif n <= 0:
        n = base.n_x
    if n < 3:
        raise ValueError(f"cell needs at least 3 views per side, got {n}")
    return base.with_angular(n, n, spacing, spacing)


def _scene(cell: dict, settings: dict):
    calib = _calibration(cell, settings)
    motion = tuple(float(c) for c in cell["motion"] * _direction(cell["direction"]))
    seed = int(cell["seed"])
    tex_kw = {"seed": seed}
    if "texel" in settings:
        tex_kw["texel"] = float(settings["texel"])
    if cell["scene"] == "single":
        rot = {}
        if cell["rotation"]:
            rot = dict(rotation_axis="y", rotation_angle=math.radians(cell["rotation"]))
        scene = single_plane_scene(motion, depth=cell["depth"], texture=Texture(**tex_kw), calib=calib, **rot)
    elif cell["scene"] == "two_plane":
        scene = two_plane_scene(motion, depths=(cell["depth"], cell["depth"] * 4.0 / 3.0), calib=calib,
                                seeds=(2 * seed + 1, 2 * seed + 2))
        if "texel" in settings:
            for p in scene.planes:
                p.texture = Texture(texel=float(settings["texel"]), seed=p.texture.seed)
    else:
        raise ValueError(f"unknown scene {cell['scene']!r}; expected single or two_plane")
    if "supersample" in settings:
        scene.supersample = int(settings["supersample"])
    return scene


def run_cell(cell: dict, settings: dict | None = None, config: MethodConfig | None = None) -> dict:
    """Render, estimate and score one cell; returns the axis values followed by the metrics."""
    settings = settings or {}
    scene = _scene(cell, settings)
    lf0, lf1, gt = render_pair(scene)
    if cell["noise"] > 0 or cell["photon_gain"] > 0:
        seed = int(cell["seed"])
        lf0 = add_noise(lf0, NoiseModel(cell["photon_gain"], cell["noise"], seed=2 * seed))
        lf1 = add_noise(lf1, NoiseModel(cell["photon_gain"], cell["noise"], seed=2 * seed + 1))
    dmap = None
    if cell["method"] == "sag" and cell["disparity"] == "exact":
        dmap = DisparityMap(gt.alpha)
        if cell["disparity_noise"] > 0:
            dmap = dmap.with_noise(cell["disparity_noise"], seed=int(cell["seed"]))
    est = estimate_flow(cell["method"], lf0, lf1, config, dmap=dmap)
    central = est.central() if est.layout == Layout.FULL_RAY else est
    truth = FlowField(gt.flow, gt.valid, Layout.CENTRAL_VIEW)
    row = dict(cell)
    row.update(mae_rmse(central, truth).as_row())
    row["rel_error_all"] = relative_error(central, truth)
    row["valid_fraction"] = float((central.valid & gt.valid).sum() / max(gt.valid.sum(), 1))
    row["converged"] = est.status is None or bool(est.status.converged)
    return row


def _run_indexed(args):
    cell, settings, overrides = args
    cfg = MethodConfig()
    for section, key, value in overrides:
        cfg.override(section, key, value)
    return run_cell(cell, settings, cfg)


def worker_count(n_cells: int) -> int:
    """Pool size: ``RAYFLOW_THREADS`` (if set) or the CPU count, never more than the cells."""
    env = os.environ.get("RAYFLOW_THREADS")
    try:
        cap = int(env) if env else (os.cpu_count() or 1)
    except ValueError:
        raise ValueError(f"RAYFLOW_THREADS must be an integer, got {env!r}") from None
    return max(1, min(cap, n_cells))


def run_sweep(spec: ExperimentSpec, workers: int | None = None) -> list[dict]:
    """Run every cell; rows come back in cell order whatever the completion order."""
    cells = expand_cells(spec)
    jobs = [(c, spec.settings, spec.overrides) for c in cells]
    n = worker_count(len(cells)) if workers is None else max(1, workers)
    log.info("sweep: %d cells on %d workers", len(cells), n)
    if n == 1:
        return [_run_indexed(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(_run_indexed, jobs))


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def format_csv(rows: list[dict], timestamp: datetime | None = None) -> str:
    """CSV text with a leading ``# generated`` line; everything after it is deterministic."""
    ts = (timestamp or datetime.now(timezone.utc)).isoformat(timespec="seconds")
    buf = io.StringIO()
    buf.write(f"# generated {ts}\n")
    columns = list(AXES) + list(METRIC_COLUMNS)
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row[c]) for c in columns])
    return buf.getvalue()


def format_table(rows: list[dict], spec: ExperimentSpec | None = None) -> str:
    """Aligned text table of the varied axes and the headline metrics."""
    varied = [k for k in AXES if spec is not None and len(spec.axes.get(k, [])) > 1] or ["method", "motion"]
    cols = varied + ["mae_x", "mae_y", "mae_z", "rel_error_all", "valid_fraction"]
    cells = [[f"{r[c]:.4g}" if isinstance(r[c], float) else str(r[c]) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) if cells else len(c) for i, c in enumerate(cols)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)
