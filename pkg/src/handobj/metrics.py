"""Hand evaluation metrics: Procrustes-aligned errors, F-scores and PCK/PCV AUC."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .geometry import points3, procrustes_align

PCK_MAX_MM = 50.0
PCK_STEPS = 100
# aligned errors of identical inputs are ~1e-13 mm, not exactly zero
DIST_TOL = 1e-9


def aligned_distances(pred, gt):
    aligned, _ = procrustes_align(pred, gt)
    return np.linalg.norm(aligned - points3(gt, "gt"), axis=1)


def aligned_error(pred, gt):
    """Mean per-point distance after similarity alignment of ``pred`` onto ``gt``."""
    return float(aligned_distances(pred, gt).mean())


def f_score(pred, gt, threshold_mm, tol=DIST_TOL):
    """Harmonic mean of nearest-neighbour precision and recall after alignment."""
    aligned, _ = procrustes_align(pred, gt)
    d = cdist(aligned, points3(gt, "gt"))
    precision = float(np.mean(d.min(axis=1) <= threshold_mm + tol))
    recall = float(np.mean(d.min(axis=0) <= threshold_mm + tol))
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def pck_curve(errors, max_threshold_mm=PCK_MAX_MM, steps=PCK_STEPS, tol=DIST_TOL):
    """Fraction of errors within each of ``steps`` thresholds spanning ``[0, max]``."""
    errors = np.asarray(errors, dtype=np.float64).reshape(-1)
    thresholds = np.linspace(0.0, max_threshold_mm, steps)
    fractions = np.mean(errors[None, :] <= thresholds[:, None] + tol, axis=1)
    return thresholds, fractions


def pck_auc(errors, max_threshold_mm=PCK_MAX_MM, steps=PCK_STEPS, tol=DIST_TOL):
    """Trapezoidal area under the PCK curve, normalised to [0, 1]."""
    thresholds, fractions = pck_curve(errors, max_threshold_mm, steps, tol)
    return float(np.trapezoid(fractions, thresholds) / max_threshold_mm)


@dataclass
class EvalReport:
    frames: int
    mean_joint_err_mm: float
    mean_mesh_err_mm: float
    f_at_5: float
    f_at_15: float
    pck_auc: float
    pcv_auc: float

    def to_json(self):
        return asdict(self)

    def table(self):
        rows = [
            ("frames", f"{self.frames}"),
            ("mean joint error (mm, PA)", f"{self.mean_joint_err_mm:.6f}"),
            ("mean mesh error (mm, PA)", f"{self.mean_mesh_err_mm:.6f}"),
            ("F@5mm", f"{self.f_at_5:.4f}"),
            ("F@15mm", f"{self.f_at_15:.4f}"),
            ("PCK AUC (0-50mm)", f"{self.pck_auc:.4f}"),
            ("PCV AUC (0-50mm)", f"{self.pcv_auc:.4f}"),
        ]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


def evaluate(pred_joints, gt_joints, pred_verts, gt_verts):
    """Per-frame metrics averaged over frames; PCK/PCV pool all per-point errors."""
    if not (len(pred_joints) == len(gt_joints) == len(pred_verts) == len(gt_verts)):
        raise ValueError("prediction and ground-truth frame counts differ")
    if len(pred_joints) == 0:
        raise ValueError("nothing to evaluate")
    jd = [aligned_distances(p, g) for p, g in zip(pred_joints, gt_joints)]
    vd = [aligned_distances(p, g) for p, g in zip(pred_verts, gt_verts)]
    return EvalReport(
        frames=len(jd),
        mean_joint_err_mm=float(np.mean([d.mean() for d in jd])),
        mean_mesh_err_mm=float(np.mean([d.mean() for d in vd])),
        f_at_5=float(np.mean([f_score(p, g, 5.0) for p, g in zip(pred_verts, gt_verts)])),
        f_at_15=float(np.mean([f_score(p, g, 15.0) for p, g in zip(pred_verts, gt_verts)])),
        pck_auc=pck_auc(np.concatenate(jd)),
        pcv_auc=pck_auc(np.concatenate(vd)),
    )
