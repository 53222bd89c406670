"""Spatial-temporal pseudo-label selection for hand predictions on video.

Stages run in a fixed order per sequence:

1. spatial: weak-perspective camera fit, mesh-box IoU against the given hand
   box, 2D/3D re-projection agreement, bone-length and flexion-angle limits;
2. temporal: 2D-joint and pose-parameter smoothness, a frame needing one
   smooth consecutive pair (with the frame before or after it);
3. shape: drop survivors whose shape vector lies more than
   ``shape_sigma_mult`` standard deviations from the sequence mean.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .errors import DegenerateConfiguration, EmptyEnsemble
from .geometry import Box2, bbox_of_points, fit_weak_camera, iou, project_weak
from .hand_model import HandParams, HandTemplate, bone_lengths, joint_flexion_angles


class Constraint(str, enum.Enum):
    IOU = "IoU"
    REPROJECTION = "Reprojection"
    BONE_LENGTH = "BoneLength"
    JOINT_ANGLE = "JointAngle"
    SMOOTHNESS_2D = "Smoothness2D"
    SMOOTHNESS_THETA = "SmoothnessTheta"
    SHAPE_DEVIATION = "ShapeDeviation"


@dataclass(frozen=True, eq=False)
class HandPrediction:
    j2d: np.ndarray  # (21, 2) px
    j3d: np.ndarray  # (21, 3) mm, root-relative
    vertices: np.ndarray  # (V, 3) mm
    params: HandParams

    def __post_init__(self):
        for name, shape in (("j2d", (21, 2)), ("j3d", (21, 3))):
            a = np.asarray(getattr(self, name), dtype=np.float64)
            if a.shape != shape:
                raise ValueError(f"{name} must have shape {shape}, got {a.shape}")
            if not np.all(np.isfinite(a)):
                raise ValueError(f"{name} is not finite")
            object.__setattr__(self, name, a)
        v = np.asarray(self.vertices, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 3 or not np.all(np.isfinite(v)):
            raise ValueError("vertices must be a finite (V, 3) array")
        object.__setattr__(self, "vertices", v)


@dataclass(frozen=True)
class FrameRecord:
    frame_index: int
    prediction: HandPrediction
    gt_hand_box: Box2


@dataclass(frozen=True)
class SequenceRecord:
    sequence_id: str
    frames: tuple

    def __post_init__(self):
        frames = tuple(self.frames)
        if not frames:
            raise ValueError("a sequence needs at least one frame")
        idx = [f.frame_index for f in frames]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError("frame indices must be strictly increasing")
        object.__setattr__(self, "frames", frames)


@dataclass(frozen=True)
class FilterConfig:
    iou_min: float = 0.6
    t_p: float = 0.65
    bone_min: float = 0.1
    angle_range: tuple = (0.0, 90.0)
    t_j: float = 0.5
    t_theta: float = 0.01
    shape_sigma_mult: float = 2.0

    def __post_init__(self):
        lo, hi = (float(a) for a in self.angle_range)
        object.__setattr__(self, "angle_range", (lo, hi))
        for f in fields(self):
            if f.name == "angle_range":
                continue
            val = float(getattr(self, f.name))
            if not (np.isfinite(val) and val > 0):
                raise ValueError(f"{f.name} must be positive, got {val}")
            object.__setattr__(self, f.name, val)
        if not lo < hi:
            raise ValueError(f"angle_range must be ordered, got {self.angle_range}")

    def with_overrides(self, **kw):
        return replace(self, **{k: v for k, v in kw.items() if v is not None})


@dataclass
class FilterDecision:
    frame_index: int
    failed_constraints: list = field(default_factory=list)

    @property
    def accepted(self):
        return not self.failed_constraints

    def to_json(self):
        return {"frame_index": self.frame_index, "accepted": self.accepted,
                "failed_constraints": [c.value for c in self.failed_constraints]}


# ---------------------------------------------------------------------------

def ensemble_average(predictions):
    """Component-wise mean of test-time augmentation predictions."""
    predictions = list(predictions)
    if not predictions:
        raise EmptyEnsemble("cannot average an empty ensemble")
    counts = {len(p.vertices) for p in predictions}
    if len(counts) != 1:
        raise ValueError(f"ensemble members disagree on vertex count: {sorted(counts)}")
    mean = lambda key: np.mean([key(p) for p in predictions], axis=0)  # noqa: E731
    return HandPrediction(
        j2d=mean(lambda p: p.j2d),
        j3d=mean(lambda p: p.j3d),
        vertices=mean(lambda p: p.vertices),
        params=HandParams(mean(lambda p: p.params.theta), mean(lambda p: p.params.beta)),
    )


def normalize_joints(j2d):
    """Root-relative 2D joints divided by the diagonal of their bounding box."""
    j2d = np.asarray(j2d, dtype=np.float64)
    diag = np.linalg.norm(j2d.max(axis=0) - j2d.min(axis=0))
    if diag < 1e-9:
        raise DegenerateConfiguration("2D joints collapse to a point")
    return (j2d - j2d[0]) / diag


def mean_joint_distance(a, b):
    return float(np.mean(np.linalg.norm(a - b, axis=1)))


@dataclass(frozen=True)
class FrameMeasures:
    """Threshold-independent quantities behind every per-frame constraint.

    Degenerate geometry is encoded with infinities so it fails any threshold.
    """

    frame_index: int
    iou: float
    reprojection: float
    min_bone: float
    min_angle: float
    max_angle: float
    beta: np.ndarray


@dataclass(frozen=True)
class PairMeasures:
    """Change between two consecutive frames."""

    joints2d: float
    theta: float


@dataclass(frozen=True)
class SequenceMeasures:
    frames: tuple
    pairs: tuple  # pairs[i] joins frames[i] and frames[i + 1]


def measure_frame(frame: FrameRecord, template: HandTemplate | None = None) -> FrameMeasures:
    pred = frame.prediction
    kw = {} if template is None else {"parents": template.parents}
    try:
        cam = fit_weak_camera(pred.j3d, pred.j2d)
        box_iou = iou(frame.gt_hand_box, bbox_of_points(project_weak(cam, pred.vertices)))
        reproj = mean_joint_distance(normalize_joints(project_weak(cam, pred.j3d)), normalize_joints(pred.j2d))
    except DegenerateConfiguration:
        box_iou, reproj = -np.inf, np.inf
    try:
        min_bone = float(bone_lengths(pred.j3d, normalized=True, **kw).min())
    except DegenerateConfiguration:
        min_bone = -np.inf
    try:
        angles = joint_flexion_angles(pred.j3d, **kw)
        lo, hi = float(angles.min()), float(angles.max())
    except DegenerateConfiguration:
        lo, hi = -np.inf, np.inf
    return FrameMeasures(frame.frame_index, box_iou, reproj, min_bone, lo, hi, pred.params.beta)


def measure_pair(a: FrameRecord, b: FrameRecord) -> PairMeasures:
    try:
        d2 = mean_joint_distance(normalize_joints(a.prediction.j2d), normalize_joints(b.prediction.j2d))
    except DegenerateConfiguration:
        d2 = np.inf
    return PairMeasures(d2, float(np.linalg.norm(a.prediction.params.theta - b.prediction.params.theta)))


def measure_sequence(seq: SequenceRecord, template: HandTemplate | None = None) -> SequenceMeasures:
    frames = seq.frames
    return SequenceMeasures(tuple(measure_frame(f, template) for f in frames),
                            tuple(measure_pair(a, b) for a, b in zip(frames, frames[1:])))


def spatial_failures(m: FrameMeasures, cfg: FilterConfig):
    failed = []
    if m.iou < cfg.iou_min:
        failed.append(Constraint.IOU)
    if m.reprojection > cfg.t_p:
        failed.append(Constraint.REPROJECTION)
    if m.min_bone < cfg.bone_min:
        failed.append(Constraint.BONE_LENGTH)
    lo, hi = cfg.angle_range
    if m.min_angle <= lo or m.max_angle >= hi:
        failed.append(Constraint.JOINT_ANGLE)
    return failed


def pair_failures(m: PairMeasures, cfg: FilterConfig):
    failed = []
    if m.joints2d > cfg.t_j:
        failed.append(Constraint.SMOOTHNESS_2D)
    if m.theta > cfg.t_theta:
        failed.append(Constraint.SMOOTHNESS_THETA)
    return failed


def spatial_check(frame: FrameRecord, template: HandTemplate | None, cfg: FilterConfig):
    """Return the list of failed spatial constraints (empty if the frame passes)."""
    return spatial_failures(measure_frame(frame, template), cfg)


def pair_smoothness(a: FrameRecord, b: FrameRecord, cfg: FilterConfig):
    """Constraints violated between two consecutive frames."""
    return pair_failures(measure_pair(a, b), cfg)


def _temporal(indices, pairs, spatial_pass, cfg):
    fails = [pair_failures(p, cfg) for p in pairs]
    flags = {}
    for i, idx in enumerate(indices):
        if idx not in spatial_pass:
            continue
        around = ([fails[i - 1]] if i > 0 else []) + ([fails[i]] if i < len(fails) else [])
        if not around or any(not f for f in around):
            flags[idx] = []
        else:
            flags[idx] = list(around[0])
    return flags


def temporal_check(seq: SequenceRecord, spatial_pass, cfg: FilterConfig):
    """Smoothness failures per frame index, for frames in ``spatial_pass``.

    Frame ``t`` passes when at least one of its consecutive pairs,
    ``(t-1, t)`` or ``(t, t+1)``, meets both bounds. Neighbours are the raw
    adjacent frames, so the outcome never depends on other thresholds and a
    single bad frame does not take its clean neighbours down with it. A
    failing frame reports the violations of its previous pair (or the next
    pair at the start of a sequence). A one-frame sequence passes.
    """
    frames = seq.frames
    pairs = [measure_pair(a, b) for a, b in zip(frames, frames[1:])]
    return _temporal([f.frame_index for f in frames], pairs, spatial_pass, cfg)


def _shape_keep(indices, betas, cfg):
    if not len(indices):
        return set()
    betas = np.asarray(betas)
    dev = np.linalg.norm(betas - betas.mean(axis=0), axis=1)
    sigma = np.sqrt(np.mean(dev**2))
    return {i for i, d in zip(indices, dev) if d <= cfg.shape_sigma_mult * sigma}


def shape_check(frames, cfg: FilterConfig):
    """Indices of frames whose shape deviation is within ``shape_sigma_mult`` sigma.

    Single pass: mean and spread are computed once over all given frames.
    """
    frames = list(frames)
    return _shape_keep([f.frame_index for f in frames], [f.prediction.params.beta for f in frames], cfg)


def decide(measures: SequenceMeasures, cfg: FilterConfig | None = None):
    """Spatial, then temporal, then shape decisions from precomputed measures."""
    cfg = cfg or FilterConfig()
    indices = [m.frame_index for m in measures.frames]
    decisions = {m.frame_index: FilterDecision(m.frame_index, spatial_failures(m, cfg)) for m in measures.frames}
    spatial_pass = {i for i, d in decisions.items() if d.accepted}
    for i, failed in _temporal(indices, measures.pairs, spatial_pass, cfg).items():
        decisions[i].failed_constraints += failed
    candidates = [m for m in measures.frames if decisions[m.frame_index].accepted]
    kept = _shape_keep([m.frame_index for m in candidates], [m.beta for m in candidates], cfg)
    for m in candidates:
        if m.frame_index not in kept:
            decisions[m.frame_index].failed_constraints.append(Constraint.SHAPE_DEVIATION)
    return [decisions[i] for i in indices]


def filter_sequence(seq: SequenceRecord, template: HandTemplate | None, cfg: FilterConfig | None = None):
    """Spatial, then temporal, then shape filtering; one decision per frame."""
    return decide(measure_sequence(seq, template), cfg)


def summarize(decisions):
    """Counts per constraint plus totals, over any iterable of decisions."""
    decisions = list(decisions)
    counts = {c.value: 0 for c in Constraint}
    for d in decisions:
        for c in d.failed_constraints:
            counts[c.value] += 1
    accepted = sum(d.accepted for d in decisions)
    return {
        "frames": len(decisions),
        "accepted": accepted,
        "rejected": len(decisions) - accepted,
        "accepted_fraction": accepted / len(decisions) if decisions else 0.0,
        "failures": counts,
    }
