"""Rotations, cameras, similarity alignment, boxes and a DLT + Gauss-Newton PnP solver.

Conventions: 3D points are ``(N, 3)`` arrays in millimetres, image points are
``(N, 2)`` arrays in pixels. Rotations are stored as ``3x3`` matrices.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import DegenerateConfiguration, DimensionMismatch, NotConverged

ROTATION_TOL = 1e-9


def _finite(a, name):
    a = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    return a


def points3(pts, name="points"):
    pts = _finite(pts, name)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise DimensionMismatch(f"{name} must have shape (N, 3), got {pts.shape}")
    return pts


def points2(pts, name="points"):
    pts = _finite(pts, name)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise DimensionMismatch(f"{name} must have shape (N, 2), got {pts.shape}")
    return pts


# ---------------------------------------------------------------------------
# Rotations
# ---------------------------------------------------------------------------

def skew(v):
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def axis_angle_to_matrix(aa):
    """Rodrigues formula. Accepts a single 3-vector."""
    aa = np.asarray(aa, dtype=np.float64)
    angle = np.linalg.norm(aa)
    if angle < 1e-12:
        # second-order expansion keeps tiny rotations orthonormal to ~1e-24
        k = skew(aa)
        return np.eye(3) + k + 0.5 * k @ k
    k = skew(aa / angle)
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def axis_angles_to_matrices(aa):
    """Vectorised Rodrigues for an ``(N, 3)`` array; returns ``(N, 3, 3)``."""
    aa = np.asarray(aa, dtype=np.float64).reshape(-1, 3)
    return np.stack([axis_angle_to_matrix(v) for v in aa])


def matrix_to_axis_angle(R):
    """Inverse Rodrigues, well defined up to and including angle pi."""
    return Rotation.from_matrix(np.asarray(R, dtype=np.float64)).as_rotvec()


def nearest_rotation(M):
    """Project a 3x3 matrix onto SO(3) in the Frobenius sense."""
    U, _, Vt = np.linalg.svd(M)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def check_rotation(R, tol=ROTATION_TOL):
    R = _finite(R, "rotation")
    if R.shape != (3, 3):
        raise DimensionMismatch(f"rotation must be 3x3, got {R.shape}")
    if np.abs(R @ R.T - np.eye(3)).max() > tol or abs(np.linalg.det(R) - 1.0) > tol:
        raise ValueError("matrix is not a proper rotation")
    return R


def rotation_angle_between(Ra, Rb):
    """Geodesic distance in radians between two rotations."""
    return float(np.linalg.norm(matrix_to_axis_angle(np.asarray(Ra).T @ np.asarray(Rb))))


# ---------------------------------------------------------------------------
# Value types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WeakPerspectiveCamera:
    s: float
    t: tuple

    def __post_init__(self):
        if not np.isfinite(self.s) or self.s <= 0:
            raise ValueError(f"weak-perspective scale must be positive, got {self.s}")
        t = tuple(float(v) for v in _finite(self.t, "translation").reshape(2))
        object.__setattr__(self, "s", float(self.s))
        object.__setattr__(self, "t", t)


@dataclass(frozen=True)
class PerspectiveCamera:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not np.all(np.isfinite([self.fx, self.fy, self.cx, self.cy])):
            raise ValueError("camera intrinsics must be finite")

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class Pose6Dof:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", check_rotation(self.rotation))
        t = _finite(self.translation, "translation").reshape(3)
        object.__setattr__(self, "translation", t)

    @classmethod
    def from_axis_angle(cls, aa, translation):
        return cls(axis_angle_to_matrix(aa), translation)

    def apply(self, pts):
        return points3(pts) @ self.rotation.T + self.translation


@dataclass(frozen=True)
class Box2:
    min: tuple
    max: tuple

    def __post_init__(self):
        lo = _finite(self.min, "box min").reshape(2)
        hi = _finite(self.max, "box max").reshape(2)
        if np.any(lo > hi):
            raise ValueError(f"box min {lo} exceeds max {hi}")
        object.__setattr__(self, "min", (float(lo[0]), float(lo[1])))
        object.__setattr__(self, "max", (float(hi[0]), float(hi[1])))

    @classmethod
    def from_xyxy(cls, xyxy):
        x0, y0, x1, y1 = xyxy
        return cls((x0, y0), (x1, y1))

    def to_xyxy(self):
        return [self.min[0], self.min[1], self.max[0], self.max[1]]

    @property
    def area(self):
        return (self.max[0] - self.min[0]) * (self.max[1] - self.min[1])

    def translated(self, dx, dy):
        return Box2((self.min[0] + dx, self.min[1] + dy), (self.max[0] + dx, self.max[1] + dy))


@dataclass(frozen=True, eq=False)
class SimilarityTransform:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def apply(self, pts):
        return self.scale * (np.asarray(pts, dtype=np.float64) @ self.rotation.T) + self.translation


# ---------------------------------------------------------------------------
# Weak perspective
# ---------------------------------------------------------------------------

def project_weak(cam: WeakPerspectiveCamera, pts):
    pts = points3(pts)
    if len(pts) == 0:
        raise ValueError("no points to project")
    return cam.s * pts[:, :2] + np.asarray(cam.t)


def fit_weak_camera(j3d, j2d, min_scale=1e-8):
    """Closed-form least-squares scale and translation mapping ``j3d`` xy onto ``j2d``."""
    xy = points3(j3d, "j3d")[:, :2]
    uv = points2(j2d, "j2d")
    if len(xy) != len(uv):
        raise DimensionMismatch("j3d and j2d must have the same number of joints")
    xy_mean = xy.mean(axis=0)
    uv_mean = uv.mean(axis=0)
    xc = xy - xy_mean
    var = np.mean(np.sum(xc**2, axis=1))
    if var < 1e-12:
        raise DegenerateConfiguration("3D joints have no spread in the image plane")
    cov = np.mean(np.sum(xc * (uv - uv_mean), axis=1))
    s = max(cov / var, min_scale)
    return WeakPerspectiveCamera(s, uv_mean - s * xy_mean)


def weak_residual(cam, j3d, j2d):
    """Sum of squared reprojection errors."""
    return float(np.sum((project_weak(cam, j3d) - points2(j2d)) ** 2))


# ---------------------------------------------------------------------------
# Perspective projection and PnP
# ---------------------------------------------------------------------------

def project_perspective(cam: PerspectiveCamera, pose: Pose6Dof, pts):
    pc = pose.apply(pts)
    if np.any(pc[:, 2] <= 0):
        raise DegenerateConfiguration("point behind the camera")
    return np.column_stack([cam.fx * pc[:, 0] / pc[:, 2] + cam.cx, cam.fy * pc[:, 1] / pc[:, 2] + cam.cy])


def _reprojection(cam, R, t, X, x):
    pc = X @ R.T + t
    z = pc[:, 2]
    u = cam.fx * pc[:, 0] / z + cam.cx
    v = cam.fy * pc[:, 1] / z + cam.cy
    r = np.column_stack([u, v]) - x
    return r, pc


def _dlt(X, x, cam):
    """Linear pose estimate from >= 6 non-coplanar correspondences."""
    centered = X - X.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[0] < 1e-12 or sv[-1] / sv[0] < 1e-6:
        raise DegenerateConfiguration("3D points are coplanar or collinear; DLT needs a 3D spread")

    # normalise both sides for conditioning
    c = X.mean(axis=0)
    sigma = np.sqrt(np.mean(np.sum((X - c) ** 2, axis=1)))
    Xn = (X - c) / sigma
    xn = np.column_stack([(x[:, 0] - cam.cx) / cam.fx, (x[:, 1] - cam.cy) / cam.fy])

    n = len(X)
    A = np.zeros((2 * n, 12))
    Xh = np.column_stack([Xn, np.ones(n)])
    A[0::2, 0:4] = Xh
    A[0::2, 8:12] = -xn[:, :1] * Xh
    A[1::2, 4:8] = Xh
    A[1::2, 8:12] = -xn[:, 1:] * Xh
    _, s, Vt = np.linalg.svd(A)
    if s[-2] < 1e-12 * s[0]:
        raise DegenerateConfiguration("DLT system is rank deficient")
    P = Vt[-1].reshape(3, 4)

    # undo the 3D normalisation: x ~ P [ (X - c)/sigma ; 1 ]
    T = np.eye(4)
    T[:3, :3] /= sigma
    T[:3, 3] = -c / sigma
    M = P @ T
    if np.linalg.det(M[:, :3]) < 0:
        M = -M
    U, S, Vt = np.linalg.svd(M[:, :3])
    R = U @ Vt
    lam = S.mean()
    t = M[:, 3] / lam
    return R, t


def refine_pnp(pts3d, pts2d, cam: PerspectiveCamera, pose: Pose6Dof, max_iter=100, tol=1e-10):
    """Gauss-Newton refinement of the total squared reprojection error.

    Rotation updates are applied on the left as ``exp([w]) R``. A step that
    does not lower the error is halved until it does; if no halving helps the
    current pose is a local minimum and iteration stops.

    Returns ``(pose, history)`` where ``history`` holds the error after every
    accepted step, starting with the initial error.
    """
    X = points3(pts3d, "pts3d")
    x = points2(pts2d, "pts2d")
    if len(X) != len(x):
        raise DimensionMismatch("pts3d and pts2d differ in length")
    if len(X) < 4:
        raise DegenerateConfiguration("refinement needs at least 4 correspondences")
    R, t = pose.rotation.copy(), pose.translation.copy()
    r, pc = _reprojection(cam, R, t, X, x)
    err = float(np.sum(r**2))
    history = [err]
    converged = False
    for _ in range(max_iter):
        z = pc[:, 2]
        n = len(X)
        # d(u,v)/d(camera point)
        Jp = np.zeros((n, 2, 3))
        Jp[:, 0, 0] = cam.fx / z
        Jp[:, 0, 2] = -cam.fx * pc[:, 0] / z**2
        Jp[:, 1, 1] = cam.fy / z
        Jp[:, 1, 2] = -cam.fy * pc[:, 1] / z**2
        RX = X @ R.T
        dw = np.stack([-skew(p) for p in RX])  # d(pc)/dw for left perturbation
        J = np.concatenate([Jp @ dw, Jp], axis=2).reshape(2 * n, 6)
        delta, *_ = np.linalg.lstsq(J, -r.reshape(-1), rcond=None)

        step = 1.0
        improved = False
        for _ in range(30):
            R_new = axis_angle_to_matrix(step * delta[:3]) @ R
            t_new = t + step * delta[3:]
            r_new, pc_new = _reprojection(cam, R_new, t_new, X, x)
            err_new = float(np.sum(r_new**2))
            if np.isfinite(err_new) and err_new <= err and np.all(pc_new[:, 2] > 0):
                improved = True
                break
            step *= 0.5
        if not improved:
            converged = True
            break
        decrease = err - err_new
        R, t, r, pc, err = R_new, t_new, r_new, pc_new, err_new
        history.append(err)
        if decrease < tol:
            converged = True
            break

    best = Pose6Dof(nearest_rotation(R), t)
    if not converged:
        raise NotConverged(f"PnP refinement did not converge in {max_iter} iterations", best, err)
    return best, history


def solve_pnp(pts3d, pts2d, cam: PerspectiveCamera, prior: Pose6Dof | None = None, return_history=False):
    """Pose of the object frame in the camera frame from 2D-3D correspondences.

    Without ``prior`` a DLT estimate (>= 6 non-coplanar points) seeds the
    refinement; with ``prior`` only the refinement runs (>= 4 points).
    """
    X = points3(pts3d, "pts3d")
    x = points2(pts2d, "pts2d")
    if len(X) != len(x):
        raise DimensionMismatch("pts3d and pts2d differ in length")
    if prior is None:
        if len(X) < 6:
            raise DegenerateConfiguration("DLT initialisation needs at least 6 correspondences")
        R0, t0 = _dlt(X, x, cam)
        prior = Pose6Dof(nearest_rotation(R0), t0)
    pose, history = refine_pnp(X, x, cam, prior)
    return (pose, history) if return_history else pose


# ---------------------------------------------------------------------------
# Similarity alignment
# ---------------------------------------------------------------------------

def procrustes_align(pred, gt):
    """Similarity transform ``T`` minimising ``sum ||T(pred_i) - gt_i||^2`` (Umeyama)."""
    pred = points3(pred, "pred")
    gt = points3(gt, "gt")
    if pred.shape != gt.shape:
        raise DimensionMismatch(f"pred {pred.shape} and gt {gt.shape} differ")
    if len(pred) < 3:
        raise DegenerateConfiguration("alignment needs at least 3 points")
    mu_p = pred.mean(axis=0)
    mu_g = gt.mean(axis=0)
    P = pred - mu_p
    G = gt - mu_g
    var_p = np.mean(np.sum(P**2, axis=1))
    var_g = np.mean(np.sum(G**2, axis=1))
    if var_p < 1e-12 or var_g < 1e-12:
        raise DegenerateConfiguration("point set has zero variance")
    cov = G.T @ P / len(pred)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    scale = np.trace(np.diag(D) @ S) / var_p
    t = mu_g - scale * R @ mu_p
    tf = SimilarityTransform(float(scale), R, t)
    return tf.apply(pred), tf


# ---------------------------------------------------------------------------
# Boxes
# ---------------------------------------------------------------------------

def iou(a: Box2, b: Box2):
    iw = min(a.max[0], b.max[0]) - max(a.min[0], b.min[0])
    ih = min(a.max[1], b.max[1]) - max(a.min[1], b.min[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


def bbox_of_points(pts):
    pts = points2(pts)
    if len(pts) == 0:
        raise ValueError("cannot bound an empty point set")
    return Box2(tuple(pts.min(axis=0)), tuple(pts.max(axis=0)))
