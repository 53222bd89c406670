"""Batch command line: generate, filter, fit-camera, solve-pnp, eval, gradcheck, losses.

Exit status is 0 on success, 1 for usage errors, 2 for malformed or missing
input and 3 for numerical failures (degenerate geometry, solver not
converging, a gradient check above tolerance).
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import io
from .attention import CrParams, QueryMode, gradcheck
from .errors import DegenerateConfiguration, NotConverged
from .geometry import PerspectiveCamera, fit_weak_camera, matrix_to_axis_angle, weak_residual
from .hand_model import default_template, load_template
from .losses import heatmap_loss, hand_loss, mano_loss, masked_total_loss, object_loss
from .metrics import evaluate
from .object_pose import GridPrediction, conf_loss, grid_deltas, load_object_model, p2d_loss, recover_pose
from .pseudo_filter import FrameRecord, SequenceRecord, filter_sequence, summarize
from .synth import DEFAULT_MAGNITUDES, NOISE_MODES, NoiseMode, SynthConfig, generate_corpus

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
GRADCHECK_TOL = 1e-4


class UsageError(Exception):
    pass


class NumericalFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _read_config(path):
    if path is None:
        return {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise io.DataError(f"cannot read config ({exc.strerror})", path) from None
    return io.parse_kv_config(text, str(path))


def _template(args):
    return load_template(args.template) if args.template else default_template()


def _echo(text, quiet=False):
    if not quiet:
        print(text)


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

GENERATE_KEYS = {"sequences", "n_frames", "keyframe_count", "seed", "noise_rate"} | \
    {f"{m}_rate" for m in NOISE_MODES} | {f"{m}_magnitude" for m in NOISE_MODES}


def _synth_settings(args):
    values = _read_config(args.config)
    for key in values:
        if key not in GENERATE_KEYS:
            raise UsageError(f"unknown generate setting {key!r}")
    for key in ("sequences", "n_frames", "keyframe_count", "seed", "noise_rate"):
        val = getattr(args, key)
        if val is not None:
            values[key] = val
    for spec in args.rate or []:
        mode, _, rate = spec.partition("=")
        if mode not in NOISE_MODES or not rate:
            raise UsageError(f"--rate expects MODE=VALUE with MODE in {', '.join(NOISE_MODES)}")
        values[f"{mode}_rate"] = rate
    try:
        ints = {k: int(values.get(k, d)) for k, d in
                (("sequences", 1), ("n_frames", 100), ("keyframe_count", 5), ("seed", 0))}
        total = float(values.get("noise_rate", 0.0))
        noise = {}
        for m in NOISE_MODES:
            rate = float(values.get(f"{m}_rate", total / len(NOISE_MODES)))
            mag = float(values.get(f"{m}_magnitude", DEFAULT_MAGNITUDES[m]))
            noise[m] = NoiseMode(rate, mag)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if ints["sequences"] < 1:
        raise UsageError("sequences must be at least 1")
    try:
        cfg = SynthConfig(n_frames=ints["n_frames"], keyframe_count=ints["keyframe_count"], noise=noise,
                          seed=ints["seed"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return cfg, ints["sequences"]


def cmd_generate(args):
    cfg, n_seq = _synth_settings(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    label_rows = []
    for s in generate_corpus(cfg, _template(args), n_seq):
        sid = s.sequence.sequence_id
        io.write_sequence(out / f"{sid}.jsonl", s.sequence)
        truth = [FrameRecord(f.frame_index, g, f.gt_hand_box) for f, g in zip(s.sequence.frames, s.ground_truth)]
        io.write_sequence(out / f"{sid}.gt.jsonl", SequenceRecord(sid, tuple(truth)))
        label_rows += [{"sequence_id": sid, "frame_index": i, "label": lab} for i, lab in s.labels.items()]
    io.write_jsonl(out / "labels.jsonl", label_rows)
    _echo(f"wrote {n_seq} sequence(s) of {cfg.n_frames} frames to {out}", args.quiet)
    return EXIT_OK


# ---------------------------------------------------------------------------
# filter
# ---------------------------------------------------------------------------

def _filter_config(args):
    values = _read_config(args.config)
    for key in io.FILTER_KEYS:
        val = getattr(args, key)
        if val is not None:
            values[key] = val
    try:
        return io.filter_config_from_kv(values)
    except ValueError as exc:
        raise UsageError(f"invalid filter configuration: {exc}") from None


def cmd_filter(args):
    cfg = _filter_config(args)
    template = _template(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    all_decisions = []
    per_sequence = {}
    for path in args.inputs:
        seq = io.read_sequence(path)
        decisions = filter_sequence(seq, template, cfg)
        stem = Path(path).name.removesuffix(".jsonl")
        io.write_jsonl(out / f"{stem}.decisions.jsonl", [d.to_json() for d in decisions])
        per_sequence[seq.sequence_id or stem] = summarize(decisions)
        all_decisions += decisions
    summary = summarize(all_decisions)
    summary["sequences"] = per_sequence
    summary["config"] = {"iou_min": cfg.iou_min, "t_p": cfg.t_p, "bone_min": cfg.bone_min,
                         "angle_min": cfg.angle_range[0], "angle_max": cfg.angle_range[1],
                         "t_j": cfg.t_j, "t_theta": cfg.t_theta, "shape_sigma_mult": cfg.shape_sigma_mult}
    io.write_json(out / "summary.json", summary)
    table = _summary_table(summary)
    (out / "summary.txt").write_text(table + "\n")
    _echo(table, args.quiet)
    return EXIT_OK


def _summary_table(summary):
    rows = [("frames", str(summary["frames"])),
            ("accepted", f"{summary['accepted']} ({100 * summary['accepted_fraction']:.2f}%)"),
            ("rejected", str(summary["rejected"]))]
    rows += [(f"failed {name}", str(n)) for name, n in summary["failures"].items()]
    width = max(len(k) for k, _ in rows)
    return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


# ---------------------------------------------------------------------------
# fit-camera
# ---------------------------------------------------------------------------

def cmd_fit_camera(args):
    seq = io.read_sequence(args.input)
    rows = []
    for f in seq.frames:
        try:
            cam = fit_weak_camera(f.prediction.j3d, f.prediction.j2d)
        except DegenerateConfiguration as exc:
            raise NumericalFailure(f"frame {f.frame_index}: {exc}") from None
        rows.append({"frame_index": f.frame_index, "s": cam.s, "t": list(cam.t),
                     "residual": weak_residual(cam, f.prediction.j3d, f.prediction.j2d)})
    if args.out:
        io.write_jsonl(args.out, rows)
    else:
        for r in rows:
            print(json.dumps(r, separators=(",", ":")))
    return EXIT_OK


# ---------------------------------------------------------------------------
# solve-pnp
# ---------------------------------------------------------------------------

def _camera(args, doc):
    if args.camera:
        try:
            vals = [float(v) for v in args.camera.split(",")]
        except ValueError:
            vals = []
        if len(vals) != 4:
            raise UsageError("--camera expects fx,fy,cx,cy")
        return PerspectiveCamera(*vals)
    if "camera" not in doc:
        raise io.DataError("no camera given (use --camera or a 'camera' field)", args.points)
    c = doc["camera"]
    try:
        return PerspectiveCamera(c["fx"], c["fy"], c["cx"], c["cy"])
    except (KeyError, TypeError, ValueError) as exc:
        raise io.DataError(f"bad camera field ({exc})", args.points) from None


def cmd_solve_pnp(args):
    doc = io.read_json(args.points)
    try:
        model = load_object_model(args.object)
    except OSError as exc:
        raise io.DataError(f"cannot read object model ({exc.strerror})", args.object) from None
    except (ValueError, KeyError, TypeError) as exc:
        raise io.DataError(str(exc), args.object) from None
    if not isinstance(doc, dict) or "points2d" not in doc:
        raise io.DataError("expected a JSON object with a 'points2d' field", args.points)
    cam = _camera(args, doc)
    try:
        pts = np.asarray(doc["points2d"], dtype=np.float64)
        if pts.shape != model.control_points.shape[:1] + (2,):
            raise ValueError(f"points2d must be ({len(model.control_points)}, 2), got {pts.shape}")
        pose = recover_pose(pts, model, cam)
    except (NotConverged, DegenerateConfiguration) as exc:
        raise NumericalFailure(str(exc)) from None
    except (ValueError, TypeError) as exc:
        raise io.DataError(str(exc), args.points) from None
    proj = cam.K @ (pose.apply(model.control_points)).T
    residual = float(np.sqrt(np.mean(np.sum((proj[:2].T / proj[2][:, None] - pts) ** 2, axis=1))))
    result = {"rotation": pose.rotation.tolist(), "axis_angle": matrix_to_axis_angle(pose.rotation).tolist(),
              "translation": pose.translation.tolist(), "rms_reprojection_px": residual}
    if args.out:
        io.write_json(args.out, result)
    else:
        print(json.dumps(result, indent=2, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def cmd_eval(args):
    pred = {f.frame_index: f.prediction for f in io.read_sequence(args.pred).frames}
    gt = {f.frame_index: f.prediction for f in io.read_sequence(args.gt).frames}
    keys = sorted(pred)
    if args.decisions:
        accepted = {r.get("frame_index") for r in io.read_jsonl(args.decisions) if r.get("accepted")}
        keys = [k for k in keys if k in accepted]
    missing = [k for k in keys if k not in gt]
    if missing:
        raise io.DataError(f"frames missing from ground truth: {missing[:5]}", args.gt)
    if not keys:
        raise io.DataError("no frames to evaluate", args.pred)
    try:
        report = evaluate([pred[k].j3d for k in keys], [gt[k].j3d for k in keys],
                          [pred[k].vertices for k in keys], [gt[k].vertices for k in keys])
    except DegenerateConfiguration as exc:
        raise NumericalFailure(str(exc)) from None
    if args.out:
        io.write_json(args.out, report.to_json())
    _echo(report.table(), args.quiet)
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

def cmd_gradcheck(args):
    mode = QueryMode.parse(args.mode)
    rng = np.random.default_rng(args.seed)
    roles = ("hand", "object")
    if args.checkpoint:
        doc = io.read_json(args.checkpoint)
        try:
            if mode is QueryMode.BOTH:
                params = {r: CrParams.from_named_tensors(doc, f"{r}.") for r in roles}
            else:
                params = CrParams.from_named_tensors(doc)
        except (KeyError, TypeError, ValueError) as exc:
            raise io.DataError(f"bad checkpoint ({exc})", args.checkpoint) from None
    elif mode is QueryMode.BOTH:
        params = {r: CrParams.init(args.channels, rng) for r in roles}
    else:
        params = CrParams.init(args.channels, rng)
    C = (params["hand"] if mode is QueryMode.BOTH else params).channels
    shape = (args.height, args.width, C)
    ctx = rng.normal(size=shape)
    if mode is QueryMode.BOTH:
        query = {r: rng.normal(size=shape) for r in roles}
    else:
        query = rng.normal(size=shape)
    if args.save_checkpoint:
        if mode is QueryMode.BOTH:
            doc = {**params["hand"].to_named_tensors("hand."), **params["object"].to_named_tensors("object.")}
        else:
            doc = params.to_named_tensors()
        io.write_json(args.save_checkpoint, doc)
    report = gradcheck(params, query, ctx, mode, rng=rng)
    worst = max(report.values())
    result = {"mode": mode.value, "seed": args.seed, "shape": list(shape), "max_relative_error": worst,
              "per_tensor": report, "passed": worst < args.tol}
    if args.out:
        io.write_json(args.out, result)
    _echo(f"mode {mode.value}  max relative error {worst:.3e}  ({'pass' if worst < args.tol else 'FAIL'})",
          args.quiet)
    if worst >= args.tol:
        raise NumericalFailure(f"max relative error {worst:.3e} is not below {args.tol:g}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _field(doc, key, path):
    if key not in doc:
        raise io.DataError(f"missing field {key!r}", path)
    a = np.asarray(doc[key], dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise io.DataError(f"{key} contains non-finite numbers", path)
    return a


def compute_losses(pred, gt, has_object_labels, pred_path="<pred>", gt_path="<gt>"):
    """Every loss term for one sample given prediction and target documents."""
    out = {"heatmap": heatmap_loss(_field(pred, "heatmaps", pred_path), _field(gt, "heatmaps", gt_path)),
           "mano": mano_loss({k: _field(pred, k, pred_path) for k in ("theta", "beta", "j3d", "vertices")},
                             {k: _field(gt, k, gt_path) for k in ("theta", "beta", "j3d", "vertices")})}
    out["hand"] = hand_loss(out["heatmap"], out["mano"])
    if has_object_labels:
        grid = GridPrediction(_field(pred, "grid_offsets", pred_path), _field(pred, "grid_confidences", pred_path))
        target = _field(gt, "control_points2d", gt_path)
        out["p2d"] = p2d_loss(grid, target)
        out["conf"] = conf_loss(grid.confidences, grid_deltas(grid, target))
        out["object"] = object_loss(out["p2d"], out["conf"])
    else:
        out["object"] = 0.0
    out["total"] = masked_total_loss(out["hand"], out["object"], has_object_labels)
    out["has_object_labels"] = bool(has_object_labels)
    return out


def cmd_losses(args):
    pred = io.read_json(args.pred)
    gt = io.read_json(args.gt)
    if not isinstance(pred, dict) or not isinstance(gt, dict):
        raise io.DataError("loss fixtures must be JSON objects", args.pred)
    flag = args.has_object_labels
    if flag is None:
        flag = gt.get("has_object_labels", False)
        if not isinstance(flag, bool):
            raise io.DataError("has_object_labels must be true or false", args.gt)
    try:
        result = compute_losses(pred, gt, flag, args.pred, args.gt)
    except (ValueError, TypeError) as exc:
        if isinstance(exc, io.DataError):
            raise
        raise io.DataError(str(exc), args.pred) from None
    if args.out:
        io.write_json(args.out, result)
    else:
        print(json.dumps(result, indent=2, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------

def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return v


def _finite_float(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not math.isfinite(v):
        raise argparse.ArgumentTypeError("must be finite")
    return v


def build_parser():
    p = _Parser(prog="handobj", description=__doc__.splitlines()[0])
    p.add_argument("--template", help="hand template JSON (default: bundled MANO-lite)")
    p.add_argument("-q", "--quiet", action="store_true", help="suppress the printed report")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write synthetic sequences, ground truth and corruption labels")
    g.add_argument("--out-dir", required=True)
    g.add_argument("--config", help="key=value file")
    g.add_argument("--sequences", type=_positive_int)
    g.add_argument("--n-frames", dest="n_frames", type=_positive_int)
    g.add_argument("--keyframe-count", dest="keyframe_count", type=_positive_int)
    g.add_argument("--seed", type=int)
    g.add_argument("--noise-rate", dest="noise_rate", type=_finite_float,
                   help="total corruption rate spread evenly over the five modes")
    g.add_argument("--rate", action="append", metavar="MODE=VALUE", help="per-mode corruption rate")
    g.set_defaults(func=cmd_generate)

    f = sub.add_parser("filter", help="run the pseudo-label filter over sequence files")
    f.add_argument("inputs", nargs="+")
    f.add_argument("--out-dir", required=True)
    f.add_argument("--config", help="key=value file; flags below override it")
    for key in io.FILTER_KEYS:
        f.add_argument("--" + key.replace("_", "-"), dest=key, type=_finite_float)
    f.set_defaults(func=cmd_filter)

    c = sub.add_parser("fit-camera", help="per-frame weak-perspective camera fit")
    c.add_argument("input")
    c.add_argument("--out")
    c.set_defaults(func=cmd_fit_camera)

    s = sub.add_parser("solve-pnp", help="object pose from 2D control points")
    s.add_argument("--points", required=True, help="JSON with 'points2d' (21x2) and optionally 'camera'")
    s.add_argument("--object", required=True, help="object model JSON")
    s.add_argument("--camera", help="fx,fy,cx,cy")
    s.add_argument("--out")
    s.set_defaults(func=cmd_solve_pnp)

    e = sub.add_parser("eval", help="aligned errors, F-scores and AUCs against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--decisions", help="restrict to frames accepted in this decisions file")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    k = sub.add_parser("gradcheck", help="finite-difference check of the attention block gradients")
    k.add_argument("--checkpoint", help="named-tensor JSON (prefixes hand./object. for h+o+)")
    k.add_argument("--save-checkpoint", help="write the parameters used")
    k.add_argument("--mode", default="o+", choices=[m.value for m in QueryMode])
    k.add_argument("--seed", type=int, default=0)
    k.add_argument("--height", type=_positive_int, default=4)
    k.add_argument("--width", type=_positive_int, default=4)
    k.add_argument("--channels", type=_positive_int, default=8)
    k.add_argument("--tol", type=_finite_float, default=GRADCHECK_TOL)
    k.add_argument("--out")
    k.set_defaults(func=cmd_gradcheck)

    lo = sub.add_parser("losses", help="evaluate every training loss on a prediction/target pair")
    lo.add_argument("pred")
    lo.add_argument("gt")
    flag = lo.add_mutually_exclusive_group()
    flag.add_argument("--has-object-labels", dest="has_object_labels", action="store_true", default=None)
    flag.add_argument("--no-object-labels", dest="has_object_labels", action="store_false")
    lo.add_argument("--out")
    lo.set_defaults(func=cmd_losses)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"handobj: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except io.DataError as exc:
        print(f"handobj: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"handobj: data error: {exc.filename}: no such file", file=sys.stderr)
        return EXIT_DATA
    except (NumericalFailure, NotConverged, DegenerateConfiguration) as exc:
        print(f"handobj: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
