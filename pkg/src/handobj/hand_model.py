"""MANO-lite: a self-contained 21-joint parametric hand.

Takes the usual ``theta`` (48 = 16 joints x axis-angle, root first) and
``beta`` (10 shape coefficients) and produces 21 joints plus a low-poly skinned
mesh through forward kinematics and linear blend skinning.

Joint order is wrist, then thumb (CMC, MCP, IP, tip), index, middle, ring and
pinky (MCP, PIP, DIP, tip each). Every finger chain lies on a ray from the
wrist at rest, so rest flexion angles are exactly zero and all shape
directions (linear maps of the rest geometry) keep them that way.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .errors import DegenerateConfiguration, DimensionMismatch
from .geometry import axis_angle_to_matrix, points3

NUM_JOINTS = 21
NUM_POSE_JOINTS = 16
NUM_BETAS = 10
TEMPLATE_FORMAT = "handobj.hand_template"
TEMPLATE_VERSION = 1

PARENTS = np.array([-1, 0, 1, 2, 3, 0, 5, 6, 7, 0, 9, 10, 11, 0, 13, 14, 15, 0, 17, 18, 19])
# joints carrying a rotation, in theta order
ARTICULATED = np.array([0, 1, 2, 3, 5, 6, 7, 9, 10, 11, 13, 14, 15, 17, 18, 19])
FINGER_BASES = (1, 5, 9, 13, 17)
NORMALIZER_EDGE = (0, 9)  # wrist -> middle MCP


@dataclass(frozen=True)
class HandParams:
    theta: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=np.float64).reshape(-1)
        beta = np.asarray(self.beta, dtype=np.float64).reshape(-1)
        if theta.shape != (3 * NUM_POSE_JOINTS,):
            raise DimensionMismatch(f"theta must have 48 values, got {theta.size}")
        if beta.shape != (NUM_BETAS,):
            raise DimensionMismatch(f"beta must have 10 values, got {beta.size}")
        if not (np.all(np.isfinite(theta)) and np.all(np.isfinite(beta))):
            raise ValueError("hand parameters must be finite")
        if np.any(np.linalg.norm(theta.reshape(-1, 3), axis=1) >= 2 * np.pi):
            raise ValueError("per-joint axis-angle magnitude must be below 2*pi")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "beta", beta)

    @classmethod
    def zeros(cls):
        return cls(np.zeros(48), np.zeros(10))


@dataclass(frozen=True, eq=False)
class HandTemplate:
    rest_joints: np.ndarray  # (21, 3)
    parents: np.ndarray  # (21,)
    articulated: np.ndarray  # (16,)
    shape_dirs: np.ndarray  # (21, 10, 3)
    mesh_rest: np.ndarray  # (V, 3)
    skin_weights: np.ndarray  # (V, 21)
    mesh_shape_dirs: np.ndarray  # (V, 10, 3)

    def __post_init__(self):
        rest = points3(self.rest_joints, "rest_joints")
        parents = np.asarray(self.parents, dtype=int)
        art = np.asarray(self.articulated, dtype=int)
        sdirs = np.asarray(self.shape_dirs, dtype=np.float64)
        mesh = points3(self.mesh_rest, "mesh_rest")
        w = np.asarray(self.skin_weights, dtype=np.float64)
        msdirs = np.asarray(self.mesh_shape_dirs, dtype=np.float64)
        V = len(mesh)
        if rest.shape != (NUM_JOINTS, 3) or parents.shape != (NUM_JOINTS,):
            raise DimensionMismatch("template must have 21 joints")
        if art.shape != (NUM_POSE_JOINTS,) or art[0] != 0:
            raise DimensionMismatch("articulated map must list 16 joints starting with the root")
        if sdirs.shape != (NUM_JOINTS, NUM_BETAS, 3):
            raise DimensionMismatch(f"shape_dirs must be (21, 10, 3), got {sdirs.shape}")
        if w.shape != (V, NUM_JOINTS) or msdirs.shape != (V, NUM_BETAS, 3):
            raise DimensionMismatch("skin weights / mesh shape dirs do not match the vertex count")
        # topological order implies acyclic
        if parents[0] != -1 or np.any(parents[1:] < 0) or np.any(parents[1:] >= np.arange(1, NUM_JOINTS)):
            raise ValueError("parent indices must form a tree rooted at joint 0 in topological order")
        if np.any(w < 0) or np.abs(w.sum(axis=1) - 1.0).max() > 1e-9:
            raise ValueError("skin weights must be non-negative and sum to one per vertex")
        bones = np.linalg.norm(rest[1:] - rest[parents[1:]], axis=1)
        if np.any(bones <= 0):
            raise ValueError("rest bone lengths must be positive")
        for name, val in [("rest_joints", rest), ("parents", parents), ("articulated", art),
                          ("shape_dirs", sdirs), ("mesh_rest", mesh), ("skin_weights", w),
                          ("mesh_shape_dirs", msdirs)]:
            object.__setattr__(self, name, val)

    @property
    def num_vertices(self):
        return len(self.mesh_rest)

    def children(self, j):
        return [int(c) for c in np.flatnonzero(self.parents == j)]

    def rest_bone_lengths(self):
        return bone_lengths(self.rest_joints, self.parents)

    def to_json(self):
        return {
            "format": TEMPLATE_FORMAT,
            "version": TEMPLATE_VERSION,
            "num_vertices": self.num_vertices,
            "rest_joints": self.rest_joints.tolist(),
            "parents": self.parents.tolist(),
            "articulated": self.articulated.tolist(),
            "shape_dirs": self.shape_dirs.tolist(),
            "mesh_rest": self.mesh_rest.tolist(),
            "skin_weights": self.skin_weights.tolist(),
            "mesh_shape_dirs": self.mesh_shape_dirs.tolist(),
        }

    @classmethod
    def from_json(cls, doc):
        if doc.get("format") != TEMPLATE_FORMAT:
            raise ValueError(f"not a hand template document: format={doc.get('format')!r}")
        if doc.get("version") != TEMPLATE_VERSION:
            raise ValueError(f"unsupported hand template version {doc.get('version')!r}")
        return cls(
            np.array(doc["rest_joints"]), np.array(doc["parents"]), np.array(doc["articulated"]),
            np.array(doc["shape_dirs"]), np.array(doc["mesh_rest"]), np.array(doc["skin_weights"]),
            np.array(doc["mesh_shape_dirs"]),
        )


@dataclass(frozen=True, eq=False)
class HandOutput:
    joints3d: np.ndarray
    vertices: np.ndarray


# ---------------------------------------------------------------------------
# Default template
# ---------------------------------------------------------------------------

# (direction from +y in degrees, radial distance of chain base, bone lengths beyond it)
_FINGERS = {
    "thumb": (50.0, 30.0, (40.0, 32.0, 28.0)),
    "index": (12.0, 88.0, (40.0, 24.0, 20.0)),
    "middle": (0.0, 90.0, (45.0, 28.0, 22.0)),
    "ring": (-11.0, 85.0, (42.0, 27.0, 21.0)),
    "pinky": (-22.0, 78.0, (33.0, 20.0, 18.0)),
}
_BONE_RADIUS = {"thumb": 9.0, "palm": 12.0, "finger": 8.0}


def _rest_joints():
    joints = np.zeros((NUM_JOINTS, 3))
    for base, (phi, r0, lengths) in zip(FINGER_BASES, _FINGERS.values()):
        d = np.array([np.sin(np.radians(phi)), np.cos(np.radians(phi)), 0.0])
        radii = np.cumsum((r0,) + lengths)
        for k, r in enumerate(radii):
            joints[base + k] = r * d
    return joints


def _joint_shape_dirs(rest):
    """Linear shape basis; each column is a linear map of the rest geometry."""
    dirs = np.zeros((NUM_JOINTS, NUM_BETAS, 3))
    for f, base in enumerate(FINGER_BASES):
        for j in range(base + 1, base + 4):
            dirs[j, f] = 0.1 * (rest[j] - rest[base])
    dirs[:, 5] = 0.05 * rest * [1.0, 0.0, 0.0]
    dirs[:, 6] = 0.05 * rest * [0.0, 1.0, 0.0]
    dirs[:, 7] = 0.05 * rest * [0.0, 0.0, 1.0]
    dirs[1:5, 8] = 0.05 * rest[1:5] * [1.0, 0.0, 0.0]
    dirs[:, 9] = 0.05 * rest
    return dirs


def build_default_template(verts_per_bone=6):
    """Build the MANO-lite template: 20 bones x ``verts_per_bone`` vertices."""
    if verts_per_bone < 4 or verts_per_bone % 2:
        raise ValueError("verts_per_bone must be an even number >= 4")
    rest = _rest_joints()
    jdirs = _joint_shape_dirs(rest)
    per_ring = verts_per_bone // 2
    z = np.array([0.0, 0.0, 1.0])
    finger_of = {}
    for name, base in zip(_FINGERS, FINGER_BASES):
        for j in range(base, base + 4):
            finger_of[j] = name

    verts, weights, mdirs = [], [], []
    for c in range(1, NUM_JOINTS):
        p = PARENTS[c]
        d = rest[c] - rest[p]
        e1 = np.cross(d, z)
        e1 /= np.linalg.norm(e1)
        if p == 0:
            radius = _BONE_RADIUS["thumb" if c == 1 else "palm"]
        else:
            radius = _BONE_RADIUS["thumb" if finger_of[c] == "thumb" else "finger"]
        for ring, t in enumerate((0.25, 0.75)):
            for m in range(per_ring):
                a = 2 * np.pi * m / per_ring + ring * np.pi / per_ring
                offset = radius * (np.cos(a) * e1 + np.sin(a) * z)
                v = rest[p] + t * d + offset
                w = np.zeros(NUM_JOINTS)
                w[p] = 1.0 - 0.3 * t
                w[c] = 0.3 * t
                sd = (1.0 - t) * jdirs[p] + t * jdirs[c]
                # global linear maps act on the whole vertex, offset included
                sd[5:] = np.stack([
                    0.05 * v * [1.0, 0.0, 0.0],
                    0.05 * v * [0.0, 1.0, 0.0],
                    0.05 * v * [0.0, 0.0, 1.0],
                    0.05 * v * [1.0, 0.0, 0.0] if 1 <= c <= 4 else np.zeros(3),
                    0.05 * v,
                ])
                verts.append(v)
                weights.append(w)
                mdirs.append(sd)
    return HandTemplate(rest, PARENTS.copy(), ARTICULATED.copy(), jdirs,
                        np.array(verts), np.array(weights), np.array(mdirs))


def load_template(path):
    with open(path) as fh:
        return HandTemplate.from_json(json.load(fh))


def save_template(template, path):
    with open(path, "w") as fh:
        json.dump(template.to_json(), fh)


_DEFAULT = None


def default_template():
    """The shipped template asset (``data/mano_lite_v1.json``)."""
    global _DEFAULT
    if _DEFAULT is None:
        text = resources.files("handobj.data").joinpath("mano_lite_v1.json").read_text()
        _DEFAULT = HandTemplate.from_json(json.loads(text))
    return _DEFAULT


# ---------------------------------------------------------------------------
# Forward kinematics and skinning
# ---------------------------------------------------------------------------

def shaped_rest(template: HandTemplate, beta):
    beta = np.asarray(beta, dtype=np.float64)
    joints = template.rest_joints + np.einsum("jkc,k->jc", template.shape_dirs, beta)
    verts = template.mesh_rest + np.einsum("vkc,k->vc", template.mesh_shape_dirs, beta)
    return joints, verts


def joint_rotations(template: HandTemplate, theta):
    """Per-joint local rotations (21, 3, 3); joints outside the articulated map get identity."""
    rots = np.tile(np.eye(3), (NUM_JOINTS, 1, 1))
    aa = np.asarray(theta, dtype=np.float64).reshape(NUM_POSE_JOINTS, 3)
    for k, j in enumerate(template.articulated):
        rots[j] = axis_angle_to_matrix(aa[k])
    return rots


def forward(template: HandTemplate, params: HandParams) -> HandOutput:
    """Pose the hand. Rotations act about the (shaped) rest joint positions."""
    J, verts = shaped_rest(template, params.beta)
    local = joint_rotations(template, params.theta)
    world_R = np.empty((NUM_JOINTS, 3, 3))
    world_t = np.empty((NUM_JOINTS, 3))
    world_R[0] = local[0]
    world_t[0] = J[0]
    for j in range(1, NUM_JOINTS):
        p = template.parents[j]
        world_R[j] = world_R[p] @ local[j]
        world_t[j] = world_R[p] @ (J[j] - J[p]) + world_t[p]
    # skinning transforms map shaped rest space to posed space
    skin_t = world_t - np.einsum("jab,jb->ja", world_R, J)
    per_joint = np.einsum("jab,vb->vja", world_R, verts) + skin_t[None]
    posed = np.einsum("vj,vja->va", template.skin_weights, per_joint)
    return HandOutput(world_t.copy(), posed)


# ---------------------------------------------------------------------------
# Biomedical measurements
# ---------------------------------------------------------------------------

def bone_lengths(joints3d, parents=PARENTS, normalized=False):
    """Lengths of the 20 parent-child edges, optionally divided by wrist->middle-MCP."""
    J = points3(joints3d, "joints3d")
    parents = np.asarray(parents)
    lengths = np.linalg.norm(J[1:] - J[parents[1:]], axis=1)
    if normalized:
        norm = np.linalg.norm(J[NORMALIZER_EDGE[1]] - J[NORMALIZER_EDGE[0]])
        if norm < 1e-9:
            raise DegenerateConfiguration("wrist to middle-MCP distance is zero")
        lengths = lengths / norm
    return lengths


def flexion_joints(parents=PARENTS):
    """Non-root joints with exactly one child, in index order."""
    parents = np.asarray(parents)
    counts = np.bincount(parents[1:], minlength=len(parents))
    return np.array([j for j in range(1, len(parents)) if counts[j] == 1])


def joint_flexion_angles(joints3d, parents=PARENTS):
    """Hinge angle in degrees between parent->joint and joint->child at each flexion joint."""
    J = points3(joints3d, "joints3d")
    parents = np.asarray(parents)
    joints = flexion_joints(parents)
    child = {int(parents[c]): c for c in range(1, len(parents))}
    a = J[joints] - J[parents[joints]]
    b = J[[child[int(j)] for j in joints]] - J[joints]
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if np.any(na < 1e-12) or np.any(nb < 1e-12):
        raise DegenerateConfiguration("zero-length bone")
    cross = np.linalg.norm(np.cross(a, b), axis=1)
    return np.degrees(np.arctan2(cross, np.sum(a * b, axis=1)))
