"""Command-line entry point: ``p2orm {synth,gen-labels,derive,eval,refine}``.

Exit codes: 0 success, 1 usage error, 2 data error.  ``P2ORM_THREADS``
caps worker threads (0 or unset = one per CPU).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .derive import (DEFAULT_THRESHOLD, boundary_from_prob_relation, boundary_from_relation, nms_thin,
                     orientation_from_relation, threshold_boundary)
from .geometry import CameraIntrinsics, zdepth_to_raydist
from .losses import RefineLossConfig
from .metrics import (default_thresholds, depth_metrics, edge_metrics, format_report, format_table, opr_curve,
                      summarize)
from .refine import RefineConfig, directional_maps, refine_depth, relation_from_directional, thin_directional_maps
from .relation import DEFAULT_DELTA, compute_p2orm, estimate_normals
from .synth import CATALOG, SceneNotClosed, format_scene, make_scene, oracle_relation, parse_scene, render

log = logging.getLogger("p2orm")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ------------------------------------------------------------ shared options


def _add_camera(p, sized=False):
    g = p.add_argument_group("camera")
    g.add_argument("--intrinsics", help="key=value file with fx, fy, cx, cy, width, height")
    g.add_argument("--fx", type=float)
    g.add_argument("--fy", type=float)
    g.add_argument("--cx", type=float)
    g.add_argument("--cy", type=float)
    g.add_argument("--hfov", type=float, default=60.0, help="horizontal field of view (deg) when fx is not given")
    if sized:
        g.add_argument("--width", type=int, default=640)
        g.add_argument("--height", type=int, default=480)


def _camera(args, shape=None) -> CameraIntrinsics:
    if args.intrinsics:
        K = io.read_intrinsics(args.intrinsics)
    else:
        if shape is None:
            shape = (args.height, args.width)
        h, w = shape
        if args.fx is None:
            K = CameraIntrinsics.from_fov(w, h, args.hfov)
            if args.cx is not None or args.cy is not None:
                K = CameraIntrinsics(K.fx, K.fy, args.cx if args.cx is not None else K.cx,
                                     args.cy if args.cy is not None else K.cy, w, h)
        else:
            K = CameraIntrinsics(args.fx, args.fy if args.fy is not None else args.fx,
                                 args.cx if args.cx is not None else (w - 1) / 2,
                                 args.cy if args.cy is not None else (h - 1) / 2, w, h)
    if shape is not None and K.shape != tuple(shape):
        raise ValueError(f"intrinsics are for {K.width}x{K.height}, data is {shape[1]}x{shape[0]}")
    return K


def _load_relation(path, delta=None):
    """Hard relation (header prefix) or probabilistic raw file; returns (hard, prob)."""
    if io.is_hard_relation(path):
        return io.read_relation(path), None
    if Path(path).is_file():
        prob = io.read_prob_relation(path, delta)
        return prob.argmax(), prob
    raise FileNotFoundError(f"no relation found at {path} (expected {path}.txt or a raw probability file)")


def _load_normals(args, depth, K):
    if getattr(args, "normals", None):
        n = io.read_normals(args.normals)
        if n.shape[:2] != depth.shape:
            raise ValueError(f"normals are {n.shape[1]}x{n.shape[0]}, depth is {depth.shape[1]}x{depth.shape[0]}")
        return n
    if getattr(args, "estimate_normals", False):
        return estimate_normals(depth, K)
    return None


# ------------------------------------------------------------ subcommands


def cmd_synth(args):
    if args.list:
        for name, make in CATALOG.items():
            doc = (make.__doc__ or "").strip().splitlines()
            print(f"{name:16s} {doc[0] if doc else ''}")
        return EXIT_OK
    if bool(args.scene) == bool(args.scene_file):
        raise UsageError("give exactly one of a scene name or --scene-file")
    K = _camera(args)
    if args.scene_file:
        scene = parse_scene(Path(args.scene_file).read_text(), Path(args.scene_file).stem)
    else:
        params = {}
        for kv in args.param or ():
            if "=" not in kv:
                raise UsageError(f"--param expects key=value, got {kv!r}")
            k, v = kv.split("=", 1)
            vals = tuple(float(x) for x in v.split(","))
            params[k] = vals[0] if len(vals) == 1 else tuple(int(x) if x.is_integer() else x for x in vals)
        if args.scene not in CATALOG:
            raise UsageError(f"unknown scene {args.scene!r}; known: {', '.join(CATALOG)}")
        try:
            scene = make_scene(args.scene, K, **params)
        except TypeError as e:
            raise UsageError(str(e)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rend = render(scene, K)
    delta = args.delta if args.delta is not None else scene.delta
    rel = oracle_relation(scene, rend, K, delta, args.connectivity)
    io.write_depth(out / f"depth.{args.depth_format}", rend.depth, args.scale)
    io.write_normals(out / "normals.pfm", rend.normals)
    io.write_relation(out / "relation", rel)
    io.write_intrinsics(out / "intrinsics.txt", K)
    (out / "scene.txt").write_text(format_scene(scene))
    for incl in rel.inclinations:
        io.write_rgb(out / f"relation_{incl.value}_vis.png", io.relation_visualization(rel, incl))
    print(f"{scene.name}: {K.width}x{K.height}, {rel.count_nonzero()} occluding pairs -> {out}")
    return EXIT_OK


def cmd_gen_labels(args):
    depth = io.read_depth(args.depth, args.scale)
    K = _camera(args, depth.shape)
    if args.zdepth:
        depth = zdepth_to_raydist(depth, K)
    if args.order == 1 and not (args.normals or args.estimate_normals):
        raise UsageError("--order 1 needs --normals or --estimate-normals")
    normals = _load_normals(args, depth, K) if args.order == 1 else None
    rel = compute_p2orm(depth, normals, K, args.delta, args.connectivity, args.order)
    io.write_relation(args.out, rel)
    for incl in rel.inclinations:
        io.write_rgb(f"{args.out}_{incl.value}_vis.png", io.relation_visualization(rel, incl))
    print(f"{rel.count_nonzero()} occluding pairs -> {args.out}")
    return EXIT_OK


def cmd_derive(args):
    if not 0.0 <= args.threshold <= 1.0:
        raise UsageError("--threshold must lie in [0, 1]")
    hard, prob = _load_relation(args.relation)
    if prob is None:
        b = boundary_from_relation(hard)
        values = b.values
        orient = orientation_from_relation(hard)
    else:
        b = boundary_from_prob_relation(prob)
        if args.nms:
            b = nms_thin(b)
        values = b.values
        b = threshold_boundary(b, args.threshold)
        orient = orientation_from_relation(prob, args.orientation_mode)
    io.write_boundary_png(f"{args.out}_boundary.png", b.values)
    io.write_float_map(f"{args.out}_boundary.raw", values)
    io.write_float_map(f"{args.out}_orientation.raw", orient.theta)
    io.write_rgb(f"{args.out}_orientation.png", io.orientation_visualization(orient.theta, b.mask))
    print(f"{int(b.mask.sum())} boundary pixels -> {args.out}_boundary.png")
    return EXIT_OK


def _pairs(a, b, what):
    a, b = a or [], b or []
    if len(a) != len(b):
        raise UsageError(f"{what}: {len(a)} predicted vs {len(b)} ground-truth files")
    return list(zip(a, b))


def _thresholds(text):
    if text is None:
        return default_thresholds()
    if "," not in text:
        try:
            return default_thresholds(int(text))
        except ValueError:
            pass
    try:
        t = np.array([float(x) for x in text.split(",")])
    except ValueError:
        raise UsageError(f"bad --thresholds {text!r}") from None
    if ((t < 0) | (t > 1)).any():
        raise UsageError("thresholds must lie in [0, 1]")
    return t


def cmd_eval(args):
    bnd = _pairs(args.pred_boundary, args.gt_boundary, "boundaries")
    ori = _pairs(args.pred_orientation, args.gt_orientation, "orientations")
    dep = _pairs(args.pred_depth, args.gt_depth, "depths")
    if ori and len(ori) != len(bnd):
        raise UsageError("orientation files must accompany every boundary pair")
    if not bnd and not dep:
        raise UsageError("nothing to evaluate")
    thresholds = _thresholds(args.thresholds)
    report = {}
    if bnd:
        curves, accs, comps = [], [], []
        for k, (pf, gf) in enumerate(bnd):
            pb, gb = io.read_boundary(pf), io.read_boundary(gf)
            if pb.shape != gb.shape:
                raise ValueError(f"{pf} and {gf} differ in size")
            po = go = None
            if ori:
                po, go = io.read_float_map(ori[k][0]), io.read_float_map(ori[k][1])
                if po.shape != pb.shape or go.shape != gb.shape:
                    raise ValueError(f"orientation maps for image {k} differ in size from its boundaries")
            curves.append(opr_curve(pb, po, gb > 0, go, thresholds, args.tol))
            em = edge_metrics(pb >= DEFAULT_THRESHOLD, gb > 0, args.trunc)
            accs.append(em.eps_acc)
            comps.append(em.eps_comp)
        report.update(summarize(curves).report())
        report["eps_acc"] = float(np.mean(accs))
        report["eps_comp"] = float(np.mean(comps))
    if dep:
        ms = []
        for pf, gf in dep:
            pd, gd = io.read_depth(pf, args.scale), io.read_depth(gf, args.scale)
            ms.append(depth_metrics(pd, gd).report())
        for key in ms[0]:
            report[key] = float(np.mean([m[key] for m in ms]))
    sys.stdout.write(format_table(report))
    text = format_report(report)
    if args.report:
        Path(args.report).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_refine(args):
    depth = io.read_depth(args.depth, args.scale)
    fmt = io.depth_format(args.depth)
    out = Path(args.out) if args.out else Path(args.depth).with_name(Path(args.depth).stem + "_refined"
                                                                     + Path(args.depth).suffix)
    if io.depth_format(out) != fmt:
        raise UsageError(f"output must use the input's format ({fmt})")
    K = _camera(args, depth.shape)
    hard, prob = _load_relation(args.relation, args.delta)
    if hard.shape != depth.shape:
        raise ValueError(f"relation is {hard.shape[1]}x{hard.shape[0]}, depth is {depth.shape[1]}x{depth.shape[0]}")
    delta = args.delta if args.delta is not None else hard.delta
    if prob is not None:
        dm = thin_directional_maps(directional_maps(hard), prob, args.threshold)
        hard = relation_from_directional(dm, delta, hard.order)
    normals = _load_normals(args, depth, K)
    cfg = RefineConfig(RefineLossConfig(delta=delta, lam=args.lam), step=args.step,
                       max_iterations=args.iters, tol=args.tol)
    run = refine_depth(depth, normals, hard, K, cfg)
    io.write_depth(out, run.depth, args.scale)
    trace = Path(args.trace) if args.trace else out.with_suffix(".trace.csv")
    trace.write_text("\n".join(run.trace_lines()) + "\n")
    print(f"{run.iterations} iterations ({run.stop_reason}), loss {run.initial_loss:.6g} -> {run.final_loss:.6g}, "
          f"violations {run.violations_before} -> {run.violations_after} -> {out}")
    return EXIT_OK


# ------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="p2orm", description="Pixel-pair occlusion relationship maps: labels, boundaries, "
                                           "evaluation and depth refinement.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("synth", help="render a synthetic scene with its oracle relation map")
    p.add_argument("scene", nargs="?", help="catalog scene name (see --list)")
    p.add_argument("--list", action="store_true", help="print the scene catalog and exit")
    p.add_argument("--scene-file", help="scene description file")
    p.add_argument("--param", action="append", metavar="KEY=VALUE", help="catalog scene parameter (repeatable)")
    p.add_argument("--out", default="synth_out", help="output directory")
    p.add_argument("--delta", type=float)
    p.add_argument("--connectivity", type=int, choices=(4, 8), default=8)
    p.add_argument("--depth-format", choices=("pfm", "png"), default="pfm")
    p.add_argument("--scale", type=float, default=io.DEFAULT_PNG_SCALE, help="png16 meters per unit")
    _add_camera(p, sized=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gen-labels", help="relation map from depth (and normals)")
    p.add_argument("--depth", required=True, help="depth file (.png 16-bit or .pfm), ray distances")
    p.add_argument("--zdepth", action="store_true", help="input stores z-depth instead of ray distance")
    p.add_argument("--normals", help="normal map (.pfm, 3 channels)")
    p.add_argument("--estimate-normals", action="store_true", help="estimate normals from depth")
    p.add_argument("--out", required=True, help="output prefix")
    p.add_argument("--delta", type=float, default=DEFAULT_DELTA)
    p.add_argument("--connectivity", type=int, choices=(4, 8), default=8)
    p.add_argument("--order", type=int, choices=(0, 1), default=1)
    p.add_argument("--scale", type=float, default=io.DEFAULT_PNG_SCALE, help="png16 meters per unit")
    _add_camera(p)
    p.set_defaults(func=cmd_gen_labels)

    p = sub.add_parser("derive", help="boundary and orientation maps from a relation map")
    p.add_argument("--relation", required=True, help="hard relation prefix or probabilistic raw file")
    p.add_argument("--out", required=True, help="output prefix")
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--nms", action=argparse.BooleanOptionalAction, default=True,
                   help="thin probabilistic boundaries before thresholding")
    p.add_argument("--orientation-mode", choices=("argmax", "expected"), default="argmax")
    p.set_defaults(func=cmd_derive)

    p = sub.add_parser("eval", help="boundary, orientation, edge and depth metrics")
    p.add_argument("--pred-boundary", nargs="+")
    p.add_argument("--gt-boundary", nargs="+")
    p.add_argument("--pred-orientation", nargs="+")
    p.add_argument("--gt-orientation", nargs="+")
    p.add_argument("--pred-depth", nargs="+")
    p.add_argument("--gt-depth", nargs="+")
    p.add_argument("--tol", type=float, help="match tolerance in pixels (default 0.0075 x diagonal)")
    p.add_argument("--thresholds", help="count of uniform thresholds, or a comma-separated list")
    p.add_argument("--trunc", type=float, default=10.0, help="edge-metric truncation (pixels)")
    p.add_argument("--scale", type=float, default=io.DEFAULT_PNG_SCALE, help="png16 meters per unit")
    p.add_argument("--report", help="write name=value lines here (default: stdout)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("refine", help="sharpen a depth map against a relation map")
    p.add_argument("--depth", required=True)
    p.add_argument("--relation", required=True, help="hard relation prefix or probabilistic raw file")
    p.add_argument("--normals", help="normal map (.pfm)")
    p.add_argument("--estimate-normals", action="store_true")
    p.add_argument("--lambda", dest="lam", type=float, default=RefineLossConfig().lam)
    p.add_argument("--delta", type=float, help="default: the relation map's margin")
    p.add_argument("--iters", type=int, default=RefineConfig().max_iterations)
    p.add_argument("--step", type=float, default=RefineConfig().step)
    p.add_argument("--tol", type=float, default=RefineConfig().tol)
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD,
                   help="boundary threshold for thinning probabilistic relations")
    p.add_argument("--out", help="refined depth (same format as input)")
    p.add_argument("--trace", help="trace CSV (default: next to the output)")
    p.add_argument("--scale", type=float, default=io.DEFAULT_PNG_SCALE, help="png16 meters per unit")
    _add_camera(p)
    p.set_defaults(func=cmd_refine)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if not getattr(args, "func", None):
        ap.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as e:
        print(f"p2orm {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError, SceneNotClosed, FloatingPointError) as e:
        print(f"p2orm {args.command}: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
