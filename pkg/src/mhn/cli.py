"""Command line entry point: ``mhn {describe,analyze,anchors,infer,eval}``.

Exit codes: 0 success, 1 runtime error, 2 usage error.  ``MHN_LOG``
(quiet / info / debug) sets stderr verbosity.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import io as mio
from .anchors import CALTECH_RATIO, AnchorConfig, format_scale_table, make_anchor_set
from .archgraph import BRANCHES, branch_report, format_report, validate
from .builders import (
    ARCHITECTURES, HeadSpec, attach_heads, attach_rcnn_head, build, toy_backbone, vgg16_backbone,
)
from .errors import MHNError, ShapeMismatch

log = logging.getLogger("mhn")

LOG_LEVELS = {"quiet": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def _split(text):
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


BACKBONES = {"vgg16": vgg16_backbone, "toy": toy_backbone}


def _backbone(args):
    if getattr(args, "backbone_config", None):
        import json

        return mio.backbone_from_dict(json.loads(Path(args.backbone_config).read_text(encoding="utf-8")))
    return BACKBONES[args.backbone]()


def _add_backbone_flags(p, default):
    p.add_argument("--backbone", choices=sorted(BACKBONES), default=default,
                   help="built-in backbone preset (default: %(default)s)")
    p.add_argument("--backbone-config", help="JSON file with blocks/split_block_index; overrides --backbone")


def _display_aliases(g):
    """output name -> short map name (M4, M5, ...)."""
    out = {}
    for alias, target in g.aliases.items():
        if alias.startswith("M") and alias[1:].isdigit():
            out[target] = alias
    return out


def _add_anchor_flags(p):
    p.add_argument("--smin", type=float, default=30.0, help="smallest pedestrian height (default: %(default)s)")
    p.add_argument("--smax", type=float, default=480.0, help="largest pedestrian height (default: %(default)s)")
    p.add_argument("--n", type=int, default=9, help="number of anchor scales (default: %(default)s)")
    p.add_argument("--ratio", type=float, default=CALTECH_RATIO, help="anchor width/height (default: %(default)s)")
    p.add_argument("--split", type=_split, default=(3, 3, 3),
                   help="anchors per branch, smallest first (default: 3,3,3)")


def _anchor_cfg(args):
    return AnchorConfig(args.smin, args.smax, args.n, args.ratio, args.split)


def cmd_describe(args):
    g = build(args.arch, _backbone(args))
    if args.heads:
        g = attach_heads(g, HeadSpec(args.anchors_per_branch))
        if args.rcnn:
            g = attach_rcnn_head(g, (args.roi, args.roi), args.fc_width)
    text = mio.graph_to_text(g)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_analyze(args):
    g = build(args.arch, _backbone(args))
    report = validate(g)
    if not report.ok:
        raise MHNError("; ".join(report.violations))
    aliases = _display_aliases(g)
    rows = branch_report(g)
    print(f"# {args.arch}: declared outputs")
    print(format_report(rows, aliases))
    if tuple(g.outputs) != BRANCHES:
        print(f"# {args.arch}: pre-fusion branches")
        print(format_report(branch_report(g, BRANCHES)))
    print("strides=" + ",".join(str(r.stride) for r in rows))
    print("conv_depth=" + ",".join(str(r.conv_depth) for r in branch_report(g, BRANCHES)))
    return 0


def cmd_anchors(args):
    aset = make_anchor_set(_anchor_cfg(args))
    print(format_scale_table(aset))
    return 0


def _load_arch(args):
    from .builders import build_detector

    if args.arch in ARCHITECTURES:
        return build_detector(args.arch, _backbone(args), anchors_per_branch=max(args.split),
                              rcnn=not args.no_rcnn, fc_width=args.fc_width)
    path = Path(args.arch)
    if not path.exists():
        raise MHNError(f"--arch must be one of {ARCHITECTURES} or an architecture file")
    return mio.load_graph(path)


def cmd_infer(args):
    from .detect import DetectConfig, detect_pipeline
    from .tensor_engine import init_weights

    g = _load_arch(args)
    report = validate(g)
    if not report.ok:
        raise MHNError("; ".join(report.violations))
    weights = mio.load_weights(args.weights) if args.weights else init_weights(g, args.seed)
    images = mio.load_tensor(args.input)
    cfg = DetectConfig(args.lam, args.nms_iou, args.max_out, args.top_k)
    stem = args.image_id or Path(args.input).stem
    rows = []
    for k in range(images.shape[0]):
        image_id = stem if images.shape[0] == 1 else f"{stem}_{k}"
        dets = detect_pipeline(g, weights, images[k:k + 1], _anchor_cfg(args), cfg)
        log.info("%s: %d detections", image_id, len(dets))
        rows += [(image_id, d) for d in dets]
    mio.write_detections(args.out, rows)
    print(f"{len(rows)} detections written to {args.out}")
    return 0


def cmd_eval(args):
    from .detect import Detection  # noqa: F401
    from .evaluation import SUBSETS, ScoredBox, evaluate

    gts = mio.load_ground_truth(args.gt)
    dets = {}
    for image_id, d in mio.load_detections(args.dets):
        dets.setdefault(image_id, []).append(ScoredBox(d.box, d.s_f))
    for name in args.subset:
        if name not in SUBSETS:
            raise MHNError(f"unknown subset {name!r}; choose from {sorted(SUBSETS)}")
    rows = evaluate(dets, gts, args.metric, args.subset, args.iou, args.ap_points)
    key = args.metric.upper()
    print(f"{'subset':<12s} {'n_gt':>6s} {key:>10s}")
    for r in rows:
        value = r.ap if args.metric == "ap" else r.mr
        print(f"{r.subset:<12s} {r.n_gt:>6d} {value:>10.6f}")
    for r in rows:
        value = r.ap if args.metric == "ap" else r.mr
        suffix = "" if len(rows) == 1 else f"[{r.subset}]"
        print(f"{key}{suffix}={value:.6f}")
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mhn", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("describe", help="emit an architecture in the archgraph text format")
    p.add_argument("--arch", choices=ARCHITECTURES, required=True)
    _add_backbone_flags(p, "toy")
    p.add_argument("--heads", action="store_true", help="attach the per-branch prediction heads")
    p.add_argument("--rcnn", action="store_true", help="with --heads, also attach the Fast RCNN head")
    p.add_argument("--anchors-per-branch", type=int, default=3, help="(default: %(default)s)")
    p.add_argument("--roi", type=int, default=7, help="ROI pooling grid size (default: %(default)s)")
    p.add_argument("--fc-width", type=int, default=256, help="(default: %(default)s)")
    p.add_argument("--out", help="write to this file instead of stdout")
    p.set_defaults(func=cmd_describe)

    p = sub.add_parser("analyze", help="print the stride / receptive field / depth table")
    p.add_argument("--arch", choices=ARCHITECTURES, required=True)
    _add_backbone_flags(p, "vgg16")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("anchors", help="print the anchor scale table")
    _add_anchor_flags(p)
    p.set_defaults(func=cmd_anchors)

    p = sub.add_parser("infer", help="run detection on a T4F1 image tensor")
    p.add_argument("--arch", required=True, help=f"one of {', '.join(ARCHITECTURES)} or an archgraph file")
    _add_backbone_flags(p, "toy")
    p.add_argument("--weights", help="T4WS weight store (default: seeded Gaussian init)")
    p.add_argument("--input", required=True, help="T4F1 tensor of shape (n, C, H, W)")
    p.add_argument("--out", required=True, help="detection dump to write")
    p.add_argument("--lambda", dest="lam", type=float, default=0.5, help="first-stage score weight (default: %(default)s)")
    p.add_argument("--seed", type=int, default=17, help="weight-init seed (default: %(default)s)")
    p.add_argument("--nms-iou", type=float, default=0.5, help="(default: %(default)s)")
    p.add_argument("--max-out", type=int, default=100, help="(default: %(default)s)")
    p.add_argument("--top-k", type=int, default=200, help="proposals kept before NMS (default: %(default)s)")
    p.add_argument("--no-rcnn", action="store_true", help="single-stage detection (built-in archs only)")
    p.add_argument("--fc-width", type=int, default=256, help="(default: %(default)s)")
    p.add_argument("--image-id", help="image id in the dump (default: input file stem)")
    _add_anchor_flags(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score a detection dump against ground truth")
    p.add_argument("--dets", required=True, help="detection dump")
    p.add_argument("--gt", required=True, help="KITTI label directory or combined label file")
    p.add_argument("--metric", choices=("ap", "mr"), default="ap", help="(default: %(default)s)")
    p.add_argument("--subset", action="append", default=None,
                   help="all, reasonable, small, medium, large; repeatable (default: all)")
    p.add_argument("--iou", type=float, default=0.5, help="match threshold (default: %(default)s)")
    p.add_argument("--ap-points", type=int, default=11, help="recall points for AP (default: %(default)s)")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("MHN_LOG", "quiet").lower()
    logging.basicConfig(level=LOG_LEVELS.get(level, logging.ERROR), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    args = make_parser().parse_args(argv)
    if getattr(args, "subset", "x") is None:
        args.subset = ["all"]
    try:
        return args.func(args)
    except ShapeMismatch as exc:
        print(f"error: shape mismatch at node {exc.node_id}: {exc}", file=sys.stderr)
        return 1
    except (MHNError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
