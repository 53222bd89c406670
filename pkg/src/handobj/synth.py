"""Deterministic synthetic hand sequences with labelled corruptions.

Clean frames are exactly self-consistent (2D joints are the weak-perspective
projection of the 3D joints, the hand box is the projected mesh box, flexion
stays inside (5, 85) degrees and pose changes stay well under the smoothness
threshold), so any rejection of a clean frame is the filter's doing.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import PchipInterpolator

from .geometry import WeakPerspectiveCamera, bbox_of_points, project_weak
from .hand_model import HandParams, HandTemplate, forward
from .pseudo_filter import FrameRecord, HandPrediction, SequenceRecord

CLEAN = "clean"
NOISE_MODES = ("jitter2d", "theta_jump", "angle_violation", "shape_drift", "box_shift")
IMAGE_SIZE = 512
PALM_NORMAL = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class NoiseMode:
    rate: float = 0.0
    magnitude: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError(f"noise rate must be in [0, 1], got {self.rate}")
        if self.magnitude < 0:
            raise ValueError("noise magnitude must be non-negative")


# magnitudes: px sigma, rad, degrees, beta-norm, px
DEFAULT_MAGNITUDES = {
    "jitter2d": 120.0,
    "theta_jump": 0.05,
    "angle_violation": 120.0,
    "shape_drift": 3.0,
    "box_shift": 150.0,
}


def _default_noise():
    return {m: NoiseMode(0.0, DEFAULT_MAGNITUDES[m]) for m in NOISE_MODES}


@dataclass(frozen=True)
class SynthConfig:
    n_frames: int = 100
    keyframe_count: int = 5
    noise: dict = field(default_factory=_default_noise)
    seed: int = 0
    cam_scale: float = 1.2  # px per mm
    flex_range: tuple = (5.0, 85.0)
    max_theta_step: float = 0.005  # half the default smoothness threshold

    def __post_init__(self):
        if self.n_frames < 1 or self.keyframe_count < 2:
            raise ValueError("need at least one frame and two keyframes")
        noise = _default_noise()
        for k, v in dict(self.noise).items():
            if k not in noise:
                raise ValueError(f"unknown noise mode {k!r}")
            noise[k] = v if isinstance(v, NoiseMode) else NoiseMode(*v)
        if sum(m.rate for m in noise.values()) > 1.0:
            raise ValueError("noise rates sum above 1")
        object.__setattr__(self, "noise", noise)

    @classmethod
    def uniform(cls, total_rate, **kw):
        """Spread ``total_rate`` evenly over all five noise modes."""
        noise = {m: NoiseMode(total_rate / len(NOISE_MODES), DEFAULT_MAGNITUDES[m]) for m in NOISE_MODES}
        return cls(noise=noise, **kw)


@dataclass
class SyntheticSequence:
    sequence: SequenceRecord
    labels: dict  # frame_index -> "clean" or noise mode
    ground_truth: list  # clean HandPrediction per frame
    camera: WeakPerspectiveCamera


def flexion_axes(template: HandTemplate):
    """Hinge axis per articulated non-root joint: bone direction x palm normal."""
    axes = []
    for j in template.articulated[1:]:
        (c,) = template.children(j)
        d = template.rest_joints[c] - template.rest_joints[j]
        a = np.cross(d, PALM_NORMAL)
        axes.append(a / np.linalg.norm(a))
    return np.array(axes)


def pose_from_flexion(template, global_aa, flex_deg):
    axes = flexion_axes(template)
    theta = np.concatenate([global_aa, (np.radians(flex_deg)[:, None] * axes).reshape(-1)])
    return theta


def _trajectory(cfg: SynthConfig, template, rng):
    """Smooth (global axis-angle, flexion) tracks through random keyframes."""
    n_flex = len(template.articulated) - 1
    lo, hi = cfg.flex_range
    base_flex = rng.uniform(lo + 15.0, hi - 15.0, size=n_flex)
    spin = rng.uniform(-np.pi, np.pi)
    tilt = rng.uniform(-0.4, 0.4, size=2)
    base_global = np.array([tilt[0], tilt[1], spin])
    key_t = np.linspace(0, cfg.n_frames - 1, cfg.keyframe_count)
    dev_flex = rng.uniform(-10.0, 10.0, size=(cfg.keyframe_count, n_flex))
    dev_global = rng.uniform(-0.1, 0.1, size=(cfg.keyframe_count, 3))
    t = np.arange(cfg.n_frames)
    if cfg.n_frames > 1:
        flex_dev = PchipInterpolator(key_t, dev_flex, axis=0)(t)
        glob_dev = PchipInterpolator(key_t, dev_global, axis=0)(t)
    else:
        flex_dev = dev_flex[:1]
        glob_dev = dev_global[:1]

    # PCHIP is homogeneous in the data, so rescaling the deviations rescales
    # every per-frame step by the same factor.
    thetas = np.array([pose_from_flexion(template, base_global + g, base_flex + f)
                       for g, f in zip(glob_dev, flex_dev)])
    steps = np.linalg.norm(np.diff(thetas, axis=0), axis=1) if cfg.n_frames > 1 else np.zeros(1)
    if steps.max() > cfg.max_theta_step:
        k = cfg.max_theta_step / steps.max()
        flex_dev = flex_dev * k
        glob_dev = glob_dev * k
    flex = np.clip(base_flex + flex_dev, lo, hi)
    return base_global + glob_dev, flex


def _predict(template, theta, beta, cam):
    out = forward(template, HandParams(theta, beta))
    return HandPrediction(project_weak(cam, out.joints3d), out.joints3d, out.vertices, HandParams(theta, beta))


def generate_synthetic(cfg: SynthConfig, template: HandTemplate, sequence_id="seq0000", rng=None):
    """One synthetic sequence with exact corruption labels."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    beta = rng.normal(scale=0.5, size=10)
    glob, flex = _trajectory(cfg, template, rng)

    first = forward(template, HandParams(pose_from_flexion(template, glob[0], flex[0]), beta))
    center = first.joints3d[:, :2].mean(axis=0)
    cam = WeakPerspectiveCamera(cfg.cam_scale, np.full(2, IMAGE_SIZE / 2) - cfg.cam_scale * center)

    # disjoint corruption assignment
    order = rng.permutation(cfg.n_frames)
    labels = np.full(cfg.n_frames, CLEAN, dtype=object)
    start = 0
    for mode in NOISE_MODES:
        count = int(round(cfg.noise[mode].rate * cfg.n_frames))
        labels[order[start:start + count]] = mode
        start += count

    frames, truth = [], []
    n_flex = flex.shape[1]
    for i in range(cfg.n_frames):
        theta = pose_from_flexion(template, glob[i], flex[i])
        clean = _predict(template, theta, beta, cam)
        box = bbox_of_points(project_weak(cam, clean.vertices))
        truth.append(clean)
        mode = labels[i]
        mag = cfg.noise[mode].magnitude if mode != CLEAN else 0.0
        pred = clean
        if mode == "jitter2d":
            pred = HandPrediction(clean.j2d + rng.normal(scale=mag, size=(21, 2)), clean.j3d,
                                  clean.vertices, clean.params)
        elif mode == "theta_jump":
            direction = rng.normal(size=theta.shape)
            pred = _predict(template, theta + mag * direction / np.linalg.norm(direction), beta, cam)
        elif mode == "angle_violation":
            bent = flex[i].copy()
            bent[rng.integers(n_flex)] = mag
            pred = _predict(template, pose_from_flexion(template, glob[i], bent), beta, cam)
        elif mode == "shape_drift":
            direction = rng.normal(size=10)
            pred = _predict(template, theta, beta + mag * direction / np.linalg.norm(direction), cam)
        elif mode == "box_shift":
            angle = rng.uniform(0, 2 * np.pi)
            box = box.translated(mag * np.cos(angle), mag * np.sin(angle))
        frames.append(FrameRecord(i, pred, box))

    seq = SequenceRecord(sequence_id, tuple(frames))
    return SyntheticSequence(seq, {i: str(labels[i]) for i in range(cfg.n_frames)}, truth, cam)


def generate_corpus(cfg: SynthConfig, template: HandTemplate, n_sequences):
    """Independent sequences with child seeds spawned from ``cfg.seed``."""
    children = np.random.SeedSequence(cfg.seed).spawn(n_sequences)
    return [generate_synthetic(cfg, template, f"seq{k:04d}", np.random.default_rng(s))
            for k, s in enumerate(children)]
