"""``rayflow`` command line: render, estimate, analyze-tensor, evaluate, viz, sweep.

Exit status is 0 on success, 1 for usage or input errors and 2 when a
computation fails.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
from PIL import Image

from .flowfield import FlowField, FlowFileError, Layout, read_flow, write_flow
from .lfcore import compute_gradients, prefilter
from .lfio import MetadataError, read_lightfield, write_gray16, write_lightfield
from .methods import METHODS, MethodConfig, estimate_flow
from .metrics import mae_rmse
from .structure_aware import DisparityMap
from .sweep import format_csv, format_table, load_experiment, run_sweep
from .synth import NoiseModel, add_noise, load_scene, render_pair
from .tensor import DEFAULT_TAU, RankClass, tensor_maps
from .viz import visualize

log = logging.getLogger("rayflow")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    """Bad arguments or unreadable inputs (exit status 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def load_config(path, config: MethodConfig | None = None) -> MethodConfig:
    """Apply an INI file with ``[lk]``, ``[global]`` and ``[sag]`` sections."""
    cfg = config or MethodConfig()
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    for section in parser.sections():
        for key, value in parser.items(section):
            try:
                cfg.override(section.lower(), key, value)
            except (KeyError, ValueError) as exc:
                raise UsageError(f"{path}: {exc}") from None
    return cfg


def _load_input(loader, path, what: str):
    try:
        return loader(path)
    except MetadataError as exc:
        raise UsageError(str(exc)) from None
    except (OSError, ValueError, FlowFileError) as exc:
        raise UsageError(f"cannot read {what} {path}: {exc}") from None


def _parse_sweep(text: str) -> dict:
    try:
        lo, hi, steps = text.split(":")
        return {"alpha_range": (float(lo), float(hi)), "steps": int(steps)}
    except ValueError:
        raise UsageError(f"--alpha-sweep expects min:max:steps, got {text!r}") from None


def _load_alpha(path, calib) -> DisparityMap:
    arr = _load_input(lambda p: np.load(p, allow_pickle=False), path, "alpha file")
    if arr.shape != (calib.n_u, calib.n_v):
        raise UsageError(f"alpha file {path} has shape {arr.shape}, expected {(calib.n_u, calib.n_v)}")
    return DisparityMap(np.asarray(arr, dtype=np.float64))


# --- subcommands ---------------------------------------------------------------------------------


def cmd_render(args, cfg) -> int:
    scene = _load_input(load_scene, args.scene, "scene")
    lf0, lf1, gt = render_pair(scene)
    if args.photon_gain > 0 or args.read_sigma > 0:
        lf0 = add_noise(lf0, NoiseModel(args.photon_gain, args.read_sigma, seed=2 * args.seed))
        lf1 = add_noise(lf1, NoiseModel(args.photon_gain, args.read_sigma, seed=2 * args.seed + 1))
    out = Path(args.output)
    write_lightfield(out / "frame0", lf0)
    write_lightfield(out / "frame1", lf1)
    write_flow(out / "truth.rflw", FlowField(gt.flow, gt.valid, Layout.CENTRAL_VIEW))
    np.save(out / "alpha.npy", gt.alpha)
    print(f"wrote {out}/frame0, {out}/frame1, truth.rflw and alpha.npy")
    return EXIT_OK


def cmd_estimate(args, cfg) -> int:
    lf0 = _load_input(read_lightfield, args.dir0, "light field")
    lf1 = _load_input(read_lightfield, args.dir1, "light field")
    if lf0.calib != lf1.calib:
        raise UsageError("the two light fields have different calibrations")
    for key, value in (("penalty", args.penalty), ("lam", args.lam), ("lam_z", args.lam_z),
                       ("levels", args.levels), ("max_iters", args.max_iters)):
        if value is not None:
            cfg.override("global", key, str(value))
            if key == "levels":
                cfg.override("lk", key, str(value))
    dmap = None
    sweep = None
    if args.method == "sag":
        if args.alpha_file:
            dmap = _load_alpha(args.alpha_file, lf0.calib)
        elif args.alpha_sweep:
            sweep = _parse_sweep(args.alpha_sweep)
    elif args.alpha_file or args.alpha_sweep:
        raise UsageError("--alpha-file and --alpha-sweep only apply to --method sag")
    t0 = time.perf_counter()
    flow = estimate_flow(args.method, lf0, lf1, cfg, dmap=dmap, alpha_sweep=sweep)
    write_flow(args.output, flow)
    status = flow.status
    note = "" if status is None or status.converged else f" (not converged: {status.message})"
    print(f"{args.method}: {flow.layout.name} {flow.dims} in {time.perf_counter() - t0:.1f} s{note} -> {args.output}")
    return EXIT_OK


def cmd_analyze_tensor(args, cfg) -> int:
    lf0 = _load_input(read_lightfield, args.dir0, "light field")
    lf1 = _load_input(read_lightfield, args.dir1, "light field")
    sigma = cfg.lk.prefilter_sigma
    grads = compute_gradients(prefilter(lf0, sigma), prefilter(lf1, sigma))
    window = (None, None, args.window, args.window)
    vals, ranks, _ = tensor_maps(grads, window, tau=args.tau)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "eigenvalues.npy", vals)
    # 16-bit maps indexed [row = v, col = u]; eigenvalues share one linear scale
    scale = float(vals[..., 0].max())
    for k in range(3):
        q = vals[..., k] / scale if scale > 0 else np.zeros(ranks.shape)
        write_gray16(out / f"lambda{k + 1}.png", q.T)
    Image.fromarray(ranks.astype(np.uint16).T).save(out / "ranks.png")
    counts = {cls.name: int((ranks == cls).sum()) for cls in RankClass}
    lines = [f"window = {args.window}", f"tau = {args.tau}", f"lambda_scale = {scale!r}"]
    lines += [f"{k} = {v}" for k, v in counts.items()]
    (out / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(" ".join(f"{k}={v}" for k, v in counts.items()))
    return EXIT_OK


def cmd_evaluate(args, cfg) -> int:
    est = _load_input(read_flow, args.estimate, "flow")
    gt = _load_input(read_flow, args.truth, "flow")
    if est.layout == Layout.FULL_RAY and gt.layout == Layout.CENTRAL_VIEW:
        est = est.central()
    if est.layout != gt.layout or est.dims != gt.dims:
        raise UsageError(f"flow files do not match: {est.layout.name}{est.dims} vs {gt.layout.name}{gt.dims}")
    m = mae_rmse(est, gt)
    if args.json:
        print(json.dumps(m.as_row()))
    else:
        print("MAE  (mm): X {:.6f}  Y {:.6f}  Z {:.6f}".format(*m.mae))
        print("RMSE (mm): X {:.6f}  Y {:.6f}  Z {:.6f}".format(*m.rmse))
        print(f"relative error: {m.rel_error:.3f} %   endpoint error: {m.epe:.6f} mm   valid: {m.n_valid}")
    return EXIT_OK


def cmd_viz(args, cfg) -> int:
    flow = _load_input(read_flow, args.flow, "flow")
    xy, z = visualize(flow, args.output)
    print(f"wrote {xy} and {z}")
    return EXIT_OK


def cmd_sweep(args, cfg) -> int:
    spec = _load_input(load_experiment, args.spec, "experiment")
    spec.overrides = _config_overrides(cfg) + spec.overrides
    rows = run_sweep(spec, workers=args.workers)
    Path(args.output).write_text(format_csv(rows), encoding="utf-8")
    print(format_table(rows, spec))
    return EXIT_OK


def _config_overrides(cfg: MethodConfig) -> list[tuple[str, str, str]]:
    """Non-default fields of ``cfg`` as override triples, so sweep workers can rebuild it."""
    base = MethodConfig()
    out = []
    for section in ("lk", "global", "sag"):
        cur, ref = cfg.section(section), base.section(section)
        for name in cur.__dataclass_fields__:
            value = getattr(cur, name)
            if value != getattr(ref, name):
                text = " ".join("none" if v is None else str(v) for v in value) if isinstance(value, tuple) else str(value)
                out.append((section, name, text))
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rayflow", description="Dense 3D scene flow from pairs of 4D light fields.")
    parser.add_argument("--config", help="INI file with [lk], [global] and [sag] parameter sections")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("render", help="render a synthetic pair from a scene spec")
    p.add_argument("scene")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.add_argument("--photon-gain", type=float, default=0.0, help="affine noise: signal-dependent variance gain")
    p.add_argument("--read-sigma", type=float, default=0.0, help="affine noise: read noise standard deviation")
    p.add_argument("--seed", type=int, default=0, help="noise seed")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("estimate", help="estimate flow between two light-field directories")
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("dir0")
    p.add_argument("dir1")
    p.add_argument("-o", "--output", required=True, help="output .rflw file")
    p.add_argument("--penalty", choices=("quadratic", "charbonnier"))
    p.add_argument("--lambda", dest="lam", type=float, help="X/Y smoothness weight")
    p.add_argument("--lambda-z", dest="lam_z", type=float, help="Z smoothness weight")
    p.add_argument("--levels", type=int, help="pyramid levels")
    p.add_argument("--max-iters", type=int, help="SOR sweeps per linearisation")
    alpha = p.add_mutually_exclusive_group()
    alpha.add_argument("--alpha-file", help="central-view disparity as a .npy array (n_u, n_v)")
    alpha.add_argument("--alpha-sweep", help="plane-sweep range min:max:steps")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("analyze-tensor", help="structure-tensor eigenvalue and rank maps of the central view")
    p.add_argument("dir0")
    p.add_argument("dir1")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.add_argument("--window", type=int, default=9, help="(u, v) window size in pixels")
    p.add_argument("--tau", type=float, default=DEFAULT_TAU, help="relative eigenvalue threshold")
    p.set_defaults(func=cmd_analyze_tensor)

    p = sub.add_parser("evaluate", help="compare a flow file against ground truth")
    p.add_argument("estimate")
    p.add_argument("truth")
    p.add_argument("--json", action="store_true", help="print metrics as one JSON object")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("viz", help="colour-code a flow file as PNG images")
    p.add_argument("flow")
    p.add_argument("-o", "--output", required=True, help="output prefix (writes _xy.png and _z.png)")
    p.set_defaults(func=cmd_viz)

    p = sub.add_parser("sweep", help="run an experiment spec and write a CSV table")
    p.add_argument("spec")
    p.add_argument("-o", "--output", required=True, help="output CSV")
    p.add_argument("--workers", type=int, help="override RAYFLOW_THREADS / CPU count")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"rayflow: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config else MethodConfig()
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"rayflow: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - report any solver failure as a runtime error
        log.debug("failure", exc_info=True)
        print(f"rayflow: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
