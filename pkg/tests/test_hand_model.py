import json

import numpy as np
import pytest
from oracles import angle_between_deg, fk_homogeneous

from handobj.errors import DimensionMismatch
from handobj.geometry import axis_angle_to_matrix
from handobj.hand_model import (
    ARTICULATED,
    PARENTS,
    HandParams,
    HandTemplate,
    bone_lengths,
    build_default_template,
    flexion_joints,
    forward,
    joint_flexion_angles,
    load_template,
    save_template,
)


def random_params(rng, pose_scale=0.4):
    return HandParams(rng.normal(scale=pose_scale, size=48), rng.normal(scale=1.0, size=10))


def test_rest_pose_identity(template):
    out = forward(template, HandParams.zeros())
    np.testing.assert_array_equal(out.joints3d, template.rest_joints)
    np.testing.assert_allclose(out.vertices, template.mesh_rest, atol=1e-12)


def test_global_rotation_is_rigid(template, rng):
    aa = rng.normal(size=3)
    theta = np.zeros(48)
    theta[:3] = aa
    out = forward(template, HandParams(theta, np.zeros(10)))
    R = axis_angle_to_matrix(aa)
    np.testing.assert_allclose(out.joints3d, template.rest_joints @ R.T, atol=1e-12)
    np.testing.assert_allclose(out.vertices, template.mesh_rest @ R.T, atol=1e-12)


def test_forward_matches_homogeneous_oracle(template, rng):
    for _ in range(20):
        p = random_params(rng)
        out = forward(template, p)
        joints, verts = fk_homogeneous(template, p.theta, p.beta)
        assert np.abs(out.joints3d - joints).max() < 1e-9
        assert np.abs(out.vertices - verts).max() < 1e-9


def test_shape_space_is_affine(template, rng):
    theta = rng.normal(scale=0.3, size=48)
    b0, d = rng.normal(size=10), rng.normal(size=10)
    h = 0.5
    f = [forward(template, HandParams(theta, b0 + k * h * d)) for k in (-1, 0, 1)]
    second = (f[2].vertices - 2 * f[1].vertices + f[0].vertices) / h**2
    assert np.abs(second).max() <= 1e-7


def test_rest_flexion_is_straight(template):
    np.testing.assert_allclose(joint_flexion_angles(template.rest_joints), 0.0, atol=1e-9)


def test_skin_weights_convex(template):
    w = template.skin_weights
    assert np.all(w >= 0)
    assert np.abs(w.sum(axis=1) - 1).max() < 1e-9


def test_parents_and_articulation():
    assert len(PARENTS) == 21 and PARENTS[0] == -1
    assert len(ARTICULATED) == 16
    assert list(flexion_joints()) == [j for j in range(1, 21) if j % 4 != 0]


def test_params_validation():
    with pytest.raises(DimensionMismatch):
        HandParams(np.zeros(47), np.zeros(10))
    with pytest.raises(DimensionMismatch):
        HandParams(np.zeros(48), np.zeros(9))
    with pytest.raises(ValueError):
        HandParams(np.full(48, np.nan), np.zeros(10))
    theta = np.zeros(48)
    theta[0] = 7.0
    with pytest.raises(ValueError):
        HandParams(theta, np.zeros(10))


def test_template_rejects_bad_weights(template):
    doc = template.to_json()
    w = np.array(doc["skin_weights"])
    w[0, 0] += 0.5
    doc["skin_weights"] = w.tolist()
    with pytest.raises(ValueError):
        HandTemplate.from_json(doc)


def test_template_rejects_cycle(template):
    doc = template.to_json()
    doc["parents"][3] = 5
    with pytest.raises(ValueError):
        HandTemplate.from_json(doc)


def test_template_round_trip(tmp_path, template):
    path = tmp_path / "t.json"
    save_template(template, path)
    loaded = load_template(path)
    np.testing.assert_array_equal(loaded.rest_joints, template.rest_joints)
    np.testing.assert_array_equal(loaded.skin_weights, template.skin_weights)
    assert json.loads(path.read_text())["version"] == 1


def test_bundled_template_matches_builder(template):
    built = build_default_template()
    np.testing.assert_allclose(built.mesh_rest, template.mesh_rest, atol=1e-12)
    np.testing.assert_allclose(built.shape_dirs, template.shape_dirs, atol=1e-12)


def test_bone_lengths_rest(template):
    np.testing.assert_allclose(bone_lengths(template.rest_joints), template.rest_bone_lengths())


def test_bone_lengths_scale_invariant(template, rng):
    J = forward(template, random_params(rng)).joints3d
    np.testing.assert_allclose(bone_lengths(3.7 * J, normalized=True), bone_lengths(J, normalized=True),
                               rtol=1e-12)


def test_bone_lengths_loop_oracle(template, rng):
    J = forward(template, random_params(rng)).joints3d
    expected = [np.sqrt(sum((J[c][i] - J[PARENTS[c]][i]) ** 2 for i in range(3))) for c in range(1, 21)]
    np.testing.assert_allclose(bone_lengths(J), expected, rtol=1e-12)


def _chain(points):
    J = np.zeros((21, 3))
    J[1:4] = points
    for f, base in enumerate((5, 9, 13, 17)):
        J[base:base + 4] = [[f + 1.0, k + 1.0, 0.0] for k in range(4)]
    J[4] = points[-1] + (points[-1] - points[-2])
    return J


def test_flexion_right_angle():
    J = _chain(np.array([[0, 1.0, 0], [0, 2.0, 0], [1.0, 2.0, 0]]))
    # joint 2: parent 1 -> 2 along y, child 3 along x
    assert joint_flexion_angles(J)[1] == pytest.approx(90.0, abs=1e-12)
    assert joint_flexion_angles(J)[0] == pytest.approx(0.0, abs=1e-12)


def test_flexion_dot_product_oracle(template, rng):
    J = forward(template, random_params(rng)).joints3d
    joints = flexion_joints()
    child = {int(PARENTS[c]): c for c in range(1, 21)}
    expected = [angle_between_deg(J[j] - J[PARENTS[j]], J[child[j]] - J[j]) for j in joints]
    np.testing.assert_allclose(joint_flexion_angles(J), expected, atol=1e-6)


def test_normalized_bones_rigid_invariant(template, rng):
    J = forward(template, random_params(rng)).joints3d
    R = axis_angle_to_matrix(rng.normal(size=3))
    moved = 2.5 * J @ R.T + rng.normal(size=3) * 100
    np.testing.assert_allclose(bone_lengths(moved, normalized=True), bone_lengths(J, normalized=True), rtol=1e-12)
