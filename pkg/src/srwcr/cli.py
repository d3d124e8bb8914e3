"""``srwcr`` command-line entry point.

Metric results go to stdout as ``name value`` lines; logs go to stderr.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import replace

import numpy as np

from . import __version__
from .bspline import DisplacementField, invert_field
from .engine import EvalPlan
from .evaluation import (generate_synthetic, hausdorff, load_points, mean_tre, mhd, rmse_displacement,
                         transform_landmarks, PointSet)
from .gradcheck import gradcheck, random_case
from .metric import Orientation
from .pipeline import RegistrationConfig, load_config, register, warp_with_field
from .volume import VolumeFormatError, load_volume, read_header, read_payload, save_volume, write_payload

log = logging.getLogger("srwcr")


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # one-line diagnostics instead of usage dumps
    def error(self, message):
        self.exit(2, f"{self.prog}: error: {message}\n")


def _emit(name: str, value) -> None:
    if isinstance(value, float):
        value = repr(value)
    print(f"{name} {value}", flush=True)


def _load_field(path) -> DisplacementField:
    header = read_header(path)
    if header.components != 3:
        raise CliError(f"{path}: expected a displacement field (components=3), got components={header.components}")
    return DisplacementField(read_payload(path, header), header.spacing)


def _save_field(f: DisplacementField, path) -> None:
    write_payload(path, f.data, f.spacing, "float32")


def _triple(text: str, what: str):
    try:
        vals = [float(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise CliError(f"{what}: expected numbers, got {text!r}") from None
    if len(vals) == 1:
        vals *= 3
    if len(vals) != 3:
        raise CliError(f"{what}: expected one or three values, got {text!r}")
    return tuple(vals)


def cmd_register(args) -> None:
    cfg = load_config(args.config) if args.config else RegistrationConfig()
    overrides = {}
    if args.threads is not None:
        overrides["threads"] = args.threads
    if args.deterministic is not None:
        overrides["deterministic"] = args.deterministic == "on"
    if args.orientation:
        overrides["orientation"] = Orientation.parse(args.orientation)
    cfg = replace(cfg, **overrides)
    fixed, moving = load_volume(args.fixed), load_volume(args.moving)
    t0 = time.perf_counter()
    result = register(fixed, moving, cfg)
    _save_field(DisplacementField(result.field.data, fixed.spacing), args.out_field)
    if args.out_warped:
        save_volume(result.warped, args.out_warped)
    for trace in result.traces:
        _emit(f"level{trace.level}_iterations", trace.iterations)
        _emit(f"level{trace.level}_final_cost", float(trace.costs[-1]))
        _emit(f"level{trace.level}_reason", trace.reason)
    _emit("seconds", round(time.perf_counter() - t0, 3))


def cmd_synth(args) -> None:
    dims = tuple(int(v) for v in _triple(args.dims, "--dims"))
    pair = generate_synthetic(dims, args.amplitude, args.warp_spacing, args.seed)
    prefix = args.out_prefix
    save_volume(pair.original, f"{prefix}_original.mhd")
    save_volume(pair.warped, f"{prefix}_warped.mhd")
    gt_path = f"{prefix}_gt.mhd"
    _save_field(pair.ground_truth, gt_path)
    # score the stored (float32) field so eval-rmse reproduces the number
    _emit("initial_rmse", rmse_displacement(DisplacementField.zeros(dims), _load_field(gt_path)))


def cmd_warp(args) -> None:
    v = load_volume(args.input)
    f = _load_field(args.field)
    save_volume(warp_with_field(v, f), args.out, element_type=read_header(args.input).element_type)


def cmd_invert(args) -> None:
    f = _load_field(args.field)
    _save_field(invert_field(f, args.sigma), args.out)


def cmd_eval_rmse(args) -> None:
    _emit("rmse", rmse_displacement(_load_field(args.field), _load_field(args.gt)))


def cmd_eval_tre(args) -> None:
    f = _load_field(args.field)
    spacing = _triple(args.spacing, "--spacing") if args.spacing else f.spacing
    fixed = load_points(args.fixed_pts, args.unit)
    moving = load_points(args.moving_pts, args.unit)
    if args.unit == "mm":
        scale = np.asarray(spacing)
        fixed = PointSet(fixed.points / scale, "voxel")
        moving = PointSet(moving.points / scale, "voxel")
    _emit("mtre_mm", mean_tre(fixed, moving, f, spacing))


def cmd_eval_surface(args) -> None:
    a = load_points(args.pts_a)
    b = load_points(args.pts_b)
    if args.field:
        a = PointSet(transform_landmarks(a, _load_field(args.field)), a.unit)
    _emit("hausdorff", hausdorff(a, b))
    _emit("mhd", mhd(a, b))


def cmd_gradcheck(args) -> None:
    n = int(args.dims)
    fixed, moving, grid = random_case(n, args.grid_spacing, args.seed)
    orientations = ("A", "B") if args.orientation == "both" else (args.orientation,)
    kinds = ("bspline", "boxcar") if args.weight_kind == "both" else (args.weight_kind,)
    components = None
    if args.components:
        rng = np.random.default_rng(args.seed)
        components = np.sort(rng.choice(grid.displacements.size, min(args.components, grid.displacements.size),
                                        replace=False))
    worst_rel = worst_abs = 0.0
    failed = 0
    t0 = time.perf_counter()
    for mas in orientations:
        for kind in kinds:
            plan = EvalPlan(Orientation(mas), kind, workers=args.threads or 1,
                            deterministic=args.deterministic != "off")
            rep = gradcheck(plan, fixed, moving, grid, args.step, components)
            label = f"{mas}_{kind}"
            _emit(f"max_rel_error_{label}", rep.max_rel)
            _emit(f"max_abs_error_small_{label}", rep.max_abs_small)
            worst_rel = max(worst_rel, rep.max_rel)
            worst_abs = max(worst_abs, rep.max_abs_small)
            failed += len(rep.failures())
    _emit("max_rel_error", worst_rel)
    _emit("max_abs_error_small", worst_abs)
    _emit("failed_components", failed)
    _emit("seconds", round(time.perf_counter() - t0, 3))


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="srwcr", description="Deformable registration with spatially weighted correlation ratio")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging on stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    def common(sp):
        sp.add_argument("--threads", type=int, default=None, help="worker threads (default 1)")
        sp.add_argument("--deterministic", choices=("on", "off"), default=None,
                        help="bitwise-reproducible evaluation (default on)")

    sp = sub.add_parser("register", help="register a moving volume onto a fixed one")
    sp.add_argument("--fixed", required=True)
    sp.add_argument("--moving", required=True)
    sp.add_argument("--config")
    sp.add_argument("--orientation", help="e.g. M-as-A/O-as-M; overrides the config file")
    sp.add_argument("--out-field", required=True)
    sp.add_argument("--out-warped")
    common(sp)
    sp.set_defaults(func=cmd_register)

    sp = sub.add_parser("synth", help="write a synthetic grid pair and its ground-truth field")
    sp.add_argument("--dims", default="128")
    sp.add_argument("--amplitude", type=float, default=15.0)
    sp.add_argument("--warp-spacing", type=float, default=32.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out-prefix", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("warp", help="backward-warp a volume through a displacement field")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--field", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_warp)

    sp = sub.add_parser("invert", help="approximate inverse of a displacement field")
    sp.add_argument("--field", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--sigma", type=float, default=1.0)
    sp.set_defaults(func=cmd_invert)

    sp = sub.add_parser("eval-rmse", help="displacement RMSE against a ground-truth field")
    sp.add_argument("--field", required=True)
    sp.add_argument("--gt", required=True)
    sp.set_defaults(func=cmd_eval_rmse)

    sp = sub.add_parser("eval-tre", help="mean target registration error of landmark pairs")
    sp.add_argument("--fixed-pts", required=True)
    sp.add_argument("--moving-pts", required=True)
    sp.add_argument("--field", required=True)
    sp.add_argument("--spacing", help="voxel size in mm (default: the field's spacing)")
    sp.add_argument("--unit", choices=("voxel", "mm"), default="voxel")
    sp.set_defaults(func=cmd_eval_tre)

    sp = sub.add_parser("eval-surface", help="Hausdorff and mean surface distance of two point sets")
    sp.add_argument("--pts-a", required=True)
    sp.add_argument("--pts-b", required=True)
    sp.add_argument("--field", help="map --pts-a through this field first")
    sp.set_defaults(func=cmd_eval_surface)

    sp = sub.add_parser("gradcheck", help="analytic vs central-difference gradient on random pairs")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--dims", default="16")
    sp.add_argument("--grid-spacing", type=float, default=4.0)
    sp.add_argument("--step", type=float, default=0.01)
    sp.add_argument("--components", type=int, default=0, help="random subset size (0 = all)")
    sp.add_argument("--orientation", choices=("A", "B", "both"), default="both")
    sp.add_argument("--weight-kind", choices=("bspline", "boxcar", "both"), default="both")
    common(sp)
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (CliError, VolumeFormatError, ValueError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"srwcr {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
