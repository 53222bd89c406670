"""Grid-based object control-point decoding and 6-DoF recovery.

Every cell ``g`` of a 32x32 grid predicts, for each of the 21 control points,
an offset from the cell centre plus a confidence. The most confident
proposals per control point are averaged and the 21 resulting 2D points are
handed to PnP against the object's canonical control points.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist

from .errors import DimensionMismatch
from .geometry import PerspectiveCamera, Pose6Dof, points2, points3, project_perspective, solve_pnp

NUM_CONTROL = 21
GRID_SIZE = 32
STRIDE = 16.0  # 512 px crop / 32 cells
TOP_K = 10
OBJECT_FORMAT = "handobj.object_model"
OBJECT_VERSION = 1

# corners indexed by bits (x, y, z); edges join corners differing in one bit
CORNER_SIGNS = np.array(list(itertools.product([-1.0, 1.0], repeat=3)))
BOX_EDGES = [(a, b) for a, b in itertools.combinations(range(8), 2)
             if np.sum(CORNER_SIGNS[a] != CORNER_SIGNS[b]) == 1]


def control_points_from_corners(corners):
    """8 corners, then 12 edge midpoints, then the centre."""
    corners = points3(corners, "corners")
    if corners.shape != (8, 3):
        raise DimensionMismatch("need exactly 8 box corners")
    mids = np.array([(corners[a] + corners[b]) / 2 for a, b in BOX_EDGES])
    return np.vstack([corners, mids, corners.mean(axis=0, keepdims=True)])


def box_surface_points(extents, center=(0.0, 0.0, 0.0), per_edge=5):
    """Regular samples on the surface of an axis-aligned box."""
    half = np.asarray(extents, dtype=np.float64) / 2
    lin = np.linspace(-1.0, 1.0, per_edge)
    pts = set()
    for axis in range(3):
        others = [a for a in range(3) if a != axis]
        for side in (-1.0, 1.0):
            for u, v in itertools.product(lin, lin):
                p = [0.0, 0.0, 0.0]
                p[axis] = side
                p[others[0]] = u
                p[others[1]] = v
                pts.add(tuple(p))
    return np.array(sorted(pts)) * half + np.asarray(center, dtype=np.float64)


@dataclass(frozen=True, eq=False)
class ObjectModel:
    control_points: np.ndarray
    mesh_vertices: np.ndarray
    diameter: float

    def __post_init__(self):
        cp = points3(self.control_points, "control_points")
        mesh = points3(self.mesh_vertices, "mesh_vertices")
        if cp.shape != (NUM_CONTROL, 3):
            raise DimensionMismatch(f"need 21 control points, got {len(cp)}")
        expected = control_points_from_corners(cp[:8])
        scale = max(1.0, np.abs(cp).max())
        if np.abs(expected - cp).max() > 1e-9 * scale:
            raise ValueError("control points are not 8 corners + 12 edge midpoints + centre")
        if not self.diameter > 0:
            raise ValueError("object diameter must be positive")
        object.__setattr__(self, "control_points", cp)
        object.__setattr__(self, "mesh_vertices", mesh)
        object.__setattr__(self, "diameter", float(self.diameter))

    @classmethod
    def from_corners(cls, corners, mesh_vertices=None):
        cp = control_points_from_corners(corners)
        mesh = cp if mesh_vertices is None else points3(mesh_vertices, "mesh_vertices")
        return cls(cp, mesh, float(pdist(mesh).max()))

    @classmethod
    def from_extents(cls, extents, center=(0.0, 0.0, 0.0), mesh_vertices=None):
        ext = np.asarray(extents, dtype=np.float64).reshape(3)
        if np.any(ext <= 0):
            raise ValueError("box extents must be positive")
        corners = CORNER_SIGNS * ext / 2 + np.asarray(center, dtype=np.float64)
        if mesh_vertices is None:
            mesh_vertices = box_surface_points(ext, center)
        return cls.from_corners(corners, mesh_vertices)

    def to_json(self):
        return {
            "format": OBJECT_FORMAT,
            "version": OBJECT_VERSION,
            "corners": self.control_points[:8].tolist(),
            "mesh_vertices": self.mesh_vertices.tolist(),
        }

    @classmethod
    def from_json(cls, doc):
        if doc.get("format", OBJECT_FORMAT) != OBJECT_FORMAT:
            raise ValueError(f"not an object model document: {doc.get('format')!r}")
        if doc.get("version", OBJECT_VERSION) != OBJECT_VERSION:
            raise ValueError(f"unsupported object model version {doc.get('version')!r}")
        mesh = doc.get("mesh_vertices")
        if "corners" in doc:
            return cls.from_corners(np.array(doc["corners"]), None if mesh is None else np.array(mesh))
        if "extents" in doc:
            return cls.from_extents(doc["extents"], doc.get("center", (0.0, 0.0, 0.0)),
                                    None if mesh is None else np.array(mesh))
        raise ValueError("object model needs either 'corners' or 'extents'")


def load_object_model(path):
    with open(path) as fh:
        return ObjectModel.from_json(json.load(fh))


@dataclass(frozen=True, eq=False)
class GridPrediction:
    offsets: np.ndarray  # (R, C, 21, 2) pixels
    confidences: np.ndarray  # (R, C, 21) in (0, 1)

    def __post_init__(self):
        off = np.asarray(self.offsets, dtype=np.float64)
        conf = np.asarray(self.confidences, dtype=np.float64)
        if off.ndim != 4 or off.shape[2:] != (NUM_CONTROL, 2):
            raise DimensionMismatch(f"offsets must be (R, C, 21, 2), got {off.shape}")
        if conf.shape != off.shape[:3]:
            raise DimensionMismatch(f"confidences must be {off.shape[:3]}, got {conf.shape}")
        if not (np.all(np.isfinite(off)) and np.all(np.isfinite(conf))):
            raise ValueError("grid prediction must be finite")
        if np.any(conf <= 0) or np.any(conf >= 1):
            raise ValueError("confidences must lie in (0, 1)")
        object.__setattr__(self, "offsets", off)
        object.__setattr__(self, "confidences", conf)

    @classmethod
    def from_logits(cls, offsets, logits):
        return cls(offsets, 1.0 / (1.0 + np.exp(-np.asarray(logits, dtype=np.float64))))


@dataclass(frozen=True)
class ControlPointProposal:
    point2d: tuple
    confidence: float
    grid_index: tuple
    control_index: int


@dataclass(frozen=True, eq=False)
class Proposals:
    """All grid proposals, arrays indexed ``[control point, cell]`` with cells row-major."""

    points: np.ndarray  # (21, N, 2)
    confidences: np.ndarray  # (21, N)
    rows: np.ndarray  # (N,)
    cols: np.ndarray  # (N,)

    def for_point(self, i):
        return [ControlPointProposal(tuple(self.points[i, n]), float(self.confidences[i, n]),
                                     (int(self.rows[n]), int(self.cols[n])), i)
                for n in range(self.points.shape[1])]


def cell_centers(rows, cols, stride=STRIDE):
    """``(rows, cols, 2)`` pixel centres as (x, y)."""
    r, c = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    return np.stack([stride / 2 + stride * c, stride / 2 + stride * r], axis=-1).astype(np.float64)


def decode_proposals(grid: GridPrediction, stride=STRIDE) -> Proposals:
    R, C = grid.offsets.shape[:2]
    pts = cell_centers(R, C, stride)[:, :, None, :] + grid.offsets
    rows, cols = np.meshgrid(np.arange(R), np.arange(C), indexing="ij")
    return Proposals(
        points=pts.reshape(R * C, NUM_CONTROL, 2).transpose(1, 0, 2),
        confidences=grid.confidences.reshape(R * C, NUM_CONTROL).T,
        rows=rows.reshape(-1),
        cols=cols.reshape(-1),
    )


def select_topk(proposals: Proposals, k=TOP_K):
    """Confidence-weighted mean of the ``k`` most confident proposals per control point.

    Ties are broken by (row, col) ascending.
    """
    n_points, n_cells = proposals.confidences.shape
    if n_cells < k:
        raise ValueError(f"need at least {k} proposals per control point, got {n_cells}")
    out = np.empty((n_points, 2))
    for i in range(n_points):
        conf = proposals.confidences[i]
        order = np.lexsort((proposals.cols, proposals.rows, -conf))[:k]
        w = conf[order]
        out[i] = (w[:, None] * proposals.points[i, order]).sum(axis=0) / w.sum()
    return out


def conf_target(delta):
    """Confidence target ``exp(-||delta||_2)`` over the last axis."""
    d = np.asarray(delta, dtype=np.float64)
    return np.exp(-np.linalg.norm(d, axis=-1))


def grid_deltas(grid: GridPrediction, gt_points, stride=STRIDE):
    """Residual from every cell's prediction to the true 2D control points."""
    gt = points2(gt_points, "gt_points")
    if gt.shape != (NUM_CONTROL, 2):
        raise DimensionMismatch("need 21 ground-truth control points")
    R, C = grid.offsets.shape[:2]
    return cell_centers(R, C, stride)[:, :, None, :] + grid.offsets - gt


def p2d_loss(grid: GridPrediction, gt_points, stride=STRIDE):
    return float(np.abs(grid_deltas(grid, gt_points, stride)).sum())


def conf_loss(pred_conf, gt_deltas):
    pred = np.asarray(pred_conf, dtype=np.float64)
    target = conf_target(gt_deltas)
    if pred.shape != target.shape:
        raise DimensionMismatch(f"confidences {pred.shape} vs deltas {target.shape}")
    return float(np.sum((pred - target) ** 2))


def recover_pose(points2d, model: ObjectModel, cam: PerspectiveCamera, prior=None):
    return solve_pnp(model.control_points, points2d, cam, prior=prior)


def decode_pose(grid: GridPrediction, model: ObjectModel, cam: PerspectiveCamera, stride=STRIDE, k=TOP_K):
    """decode -> top-k aggregate -> PnP."""
    return recover_pose(select_topk(decode_proposals(grid, stride), k), model, cam)


def render_grid(pose: Pose6Dof, model: ObjectModel, cam: PerspectiveCamera, rng,
                size=GRID_SIZE, stride=STRIDE, offset_noise=0.0):
    """Synthetic grid whose every cell points exactly at the projected control points."""
    target = project_perspective(cam, pose, model.control_points)
    centers = cell_centers(size, size, stride)
    offsets = target[None, None] - centers[:, :, None, :]
    if offset_noise:
        offsets = offsets + rng.normal(scale=offset_noise, size=offsets.shape)
    conf = rng.uniform(0.01, 0.99, size=(size, size, NUM_CONTROL))
    return GridPrediction(offsets, conf)


def add_metric(pred: Pose6Dof, gt: Pose6Dof, model: ObjectModel):
    """Mean vertex distance between the two poses and whether it is under 10% of the diameter."""
    err = np.linalg.norm(pred.apply(model.mesh_vertices) - gt.apply(model.mesh_vertices), axis=1)
    mean = float(err.mean())
    return mean, mean < 0.1 * model.diameter
