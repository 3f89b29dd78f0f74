"""Single entry point over the three estimators, shared by the CLI and sweeps."""

from __future__ import annotations

from dataclasses import fields, replace

from .flowfield import FlowField
from .lfcore import LightField
from .local import LKParams, lk_pyramidal
from .structure_aware import DisparityMap, SAGWeights, sag_solve
from .variational import GlobalParams, hs_pyramidal

__all__ = ["METHODS", "MethodConfig", "estimate_flow"]

METHODS = ("lk", "hs", "sag")


class MethodConfig:
    """Parameter objects of all three solvers, overridable from flat ``section.key`` maps.

    Sections are ``lk`` (:class:`LKParams`), ``global`` (:class:`GlobalParams`,
    shared by HS and SAG) and ``sag`` (:class:`SAGWeights`).
    """

    _TYPES = {"lk": LKParams, "global": GlobalParams, "sag": SAGWeights}

    def __init__(self, lk: LKParams | None = None, glob: GlobalParams | None = None,
                 sag: SAGWeights | None = None):
        self.lk = lk or LKParams()
        self.glob = glob or GlobalParams()
        self.sag = sag or SAGWeights()

    def section(self, section: str):
        return {"lk": self.lk, "global": self.glob, "sag": self.sag}[section]

    def _set(self, section: str, obj):
        if section == "lk":
            self.lk = obj
        elif section == "global":
            self.glob = obj
        else:
            self.sag = obj

    def override(self, section: str, key: str, value: str) -> None:
        """Set one field from its text form; raises ``KeyError`` or ``ValueError`` on bad input."""
        if section not in self._TYPES:
            raise KeyError(f"unknown section [{section}]")
        obj = self.section(section)
        names = {f.name: f for f in fields(obj)}
        if key not in names:
            raise KeyError(f"unknown key {key!r} in [{section}]")
        self._set(section, replace(obj, **{key: _convert(getattr(obj, key), names[key].type, value)}))


def _convert(current, annotation, text: str):
    text = text.strip()
    ann = str(annotation)
    if text.lower() == "none":
        if "None" not in ann:
            raise ValueError(f"None is not allowed here ({ann})")
        return None
    if "tuple" in ann:
        parts = [p for p in text.replace(",", " ").split() if p]
        return tuple(None if p.lower() == "none" else float(p) if "float" in ann else int(p) for p in parts)
    if "bool" in ann:
        if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"expected a boolean, got {text!r}")
        return text.lower() in ("true", "1", "yes")
    if "int" in ann and "float" not in ann:
        return int(text)
    if "float" in ann:
        return float(text)
    return text


def estimate_flow(method: str, lf0: LightField, lf1: LightField, config: MethodConfig | None = None,
                  dmap: DisparityMap | None = None, alpha_sweep: dict | None = None) -> FlowField:
    """Run one estimator.

    Args:
        method: ``"lk"``, ``"hs"`` or ``"sag"``.
        lf0, lf1: Consecutive frames.
        config: Solver parameters (defaults when ``None``).
        dmap: Disparity for ``sag``; ``None`` runs the plane sweep.
        alpha_sweep: Plane-sweep keyword arguments for ``sag``.

    Returns:
        Full-ray flow for ``lk``/``hs``, central-view flow for ``sag``.
    """
    cfg = config or MethodConfig()
    if method == "lk":
        return lk_pyramidal(lf0, lf1, cfg.lk)
    if method == "hs":
        return hs_pyramidal(lf0, lf1, cfg.glob)
    if method == "sag":
        return sag_solve(lf0, lf1, dmap, cfg.sag, cfg.glob, alpha_sweep)
    raise ValueError(f"unknown method {method!r}; expected one of {', '.join(METHODS)}")
