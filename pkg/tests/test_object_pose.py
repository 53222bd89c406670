import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from handobj.errors import DimensionMismatch
from handobj.geometry import PerspectiveCamera, Pose6Dof, rotation_angle_between
from handobj.object_pose import (
    BOX_EDGES,
    GRID_SIZE,
    GridPrediction,
    ObjectModel,
    Proposals,
    add_metric,
    cell_centers,
    conf_loss,
    conf_target,
    decode_pose,
    decode_proposals,
    grid_deltas,
    p2d_loss,
    render_grid,
    select_topk,
)

CAM = PerspectiveCamera(600.0, 600.0, 256.0, 256.0)


def _grid(offsets, conf=None):
    conf = np.full(offsets.shape[:3], 0.5) if conf is None else conf
    return GridPrediction(offsets, conf)


def test_control_points_layout():
    m = ObjectModel.from_extents([2.0, 4.0, 6.0])
    cp = m.control_points
    assert cp.shape == (21, 3)
    assert len(BOX_EDGES) == 12
    np.testing.assert_array_equal(cp[20], 0.0)
    assert set(map(tuple, np.abs(cp[:8]))) == {(1.0, 2.0, 3.0)}
    # every midpoint lies on exactly one zero coordinate plane's edge
    assert all(np.sum(np.abs(p) == 0) == 1 for p in cp[8:20])
    assert m.diameter == pytest.approx(np.sqrt(4 + 16 + 36))


def test_object_model_json_round_trip():
    m = ObjectModel.from_extents([10.0, 20.0, 30.0], center=(1, 2, 3))
    m2 = ObjectModel.from_json(m.to_json())
    np.testing.assert_array_equal(m.control_points, m2.control_points)
    assert ObjectModel.from_json({"extents": [10, 20, 30], "center": [1, 2, 3]}).diameter == m.diameter
    with pytest.raises(ValueError):
        ObjectModel.from_json({"format": "other"})


def test_object_model_rejects_bad_control_points():
    m = ObjectModel.from_extents([1.0, 1.0, 1.0])
    cp = m.control_points.copy()
    cp[10] += 0.1
    with pytest.raises(ValueError):
        ObjectModel(cp, m.mesh_vertices, m.diameter)


def test_decode_zero_offsets():
    p = decode_proposals(_grid(np.zeros((32, 32, 21, 2))))
    r, c = p.rows, p.cols
    np.testing.assert_array_equal(p.points[5], np.column_stack([8 + 16 * c, 8 + 16 * r]))


def test_decode_single_offset():
    off = np.zeros((32, 32, 21, 2))
    off[0, 0, 0] = (3.0, -2.0)
    p = decode_proposals(_grid(off))
    assert tuple(p.points[0, 0]) == (11.0, 6.0)
    prop = p.for_point(0)[0]
    assert prop.grid_index == (0, 0) and prop.point2d == (11.0, 6.0)


def test_decode_loop_oracle(rng):
    off = rng.normal(size=(4, 5, 21, 2))
    p = decode_proposals(_grid(off), stride=16)
    for i in range(21):
        n = 0
        for r in range(4):
            for c in range(5):
                assert tuple(p.points[i, n]) == pytest.approx((8 + 16 * c + off[r, c, i, 0], 8 + 16 * r + off[r, c, i, 1]))
                n += 1


def test_topk_dominant_weight(rng):
    off = rng.normal(size=(4, 4, 21, 2)) * 10
    conf = np.full((4, 4, 21), 1e-12)
    conf[2, 3, :] = 1.0 - 1e-12
    p = decode_proposals(GridPrediction(off, conf))
    out = select_topk(p)
    np.testing.assert_allclose(out, p.points[:, 2 * 4 + 3], atol=1e-6)


def test_topk_ties_take_first_ten_in_row_major_order(rng):
    off = rng.normal(size=(4, 4, 21, 2))
    p = decode_proposals(_grid(off))
    np.testing.assert_allclose(select_topk(p), p.points[:, :10].mean(axis=1), atol=1e-12)


def test_topk_sort_oracle(rng):
    off = rng.normal(size=(6, 6, 21, 2))
    conf = rng.uniform(0.01, 0.99, size=(6, 6, 21))
    p = decode_proposals(GridPrediction(off, conf))
    out = select_topk(p, k=10)
    for i in range(21):
        order = sorted(range(36), key=lambda n: (-p.confidences[i, n], p.rows[n], p.cols[n]))[:10]
        w = p.confidences[i, order]
        expected = (w[:, None] * p.points[i, order]).sum(0) / w.sum()
        np.testing.assert_allclose(out[i], expected, atol=1e-12)


def test_topk_needs_enough_cells():
    p = decode_proposals(_grid(np.zeros((2, 2, 21, 2))))
    with pytest.raises(ValueError):
        select_topk(p, k=10)


def test_conf_target():
    assert conf_target((0.0, 0.0)) == 1.0
    assert conf_target((3.0, 4.0)) == pytest.approx(np.exp(-5.0), abs=1e-15)
    d = np.linspace(0, 10, 50)
    vals = conf_target(np.column_stack([d, np.zeros_like(d)]))
    assert np.all(np.diff(vals) < 0)


def test_p2d_loss_cases(rng):
    gt = rng.uniform(0, 512, size=(21, 2))
    perfect = gt[None, None] - cell_centers(4, 4)[:, :, None, :]
    assert p2d_loss(_grid(perfect), gt) == pytest.approx(0.0, abs=1e-9)
    off = perfect.copy()
    off[1, 2, 7] += (1.0, 1.0)
    assert p2d_loss(_grid(off), gt) == pytest.approx(2.0, abs=1e-9)
    off = rng.normal(size=(3, 3, 21, 2))
    g = _grid(off)
    total = 0.0
    for r in range(3):
        for c in range(3):
            for i in range(21):
                centre = np.array([8 + 16 * c, 8 + 16 * r])
                total += np.abs(centre + off[r, c, i] - gt[i]).sum()
    assert p2d_loss(g, gt) == pytest.approx(total, rel=1e-12)


def test_conf_loss_cases(rng):
    deltas = rng.normal(size=(3, 3, 21, 2))
    target = conf_target(deltas)
    assert conf_loss(target, deltas) == 0.0
    pred = target.copy()
    pred[0, 1, 2] += 0.5
    assert conf_loss(pred, deltas) == pytest.approx(0.25, abs=1e-12)
    pred = rng.random((3, 3, 21))
    expected = sum((pred[idx] - np.exp(-np.hypot(*deltas[idx]))) ** 2 for idx in np.ndindex(3, 3, 21))
    assert conf_loss(pred, deltas) == pytest.approx(expected, rel=1e-12)
    with pytest.raises(DimensionMismatch):
        conf_loss(pred[:2], deltas)


def test_grid_prediction_validation():
    with pytest.raises(ValueError):
        GridPrediction(np.zeros((2, 2, 21, 2)), np.ones((2, 2, 21)))
    with pytest.raises(DimensionMismatch):
        GridPrediction(np.zeros((2, 2, 20, 2)), np.full((2, 2, 20), 0.5))
    g = GridPrediction.from_logits(np.zeros((2, 2, 21, 2)), np.zeros((2, 2, 21)))
    assert np.all(g.confidences == 0.5)


def test_decode_pose_round_trip(rng):
    model = ObjectModel.from_extents([100.0, 100.0, 100.0])
    gt = Pose6Dof(Rotation.random(random_state=rng).as_matrix(), [10.0, -20.0, 500.0])
    grid = render_grid(gt, model, CAM, rng, offset_noise=0.3)
    assert grid.offsets.shape[:2] == (GRID_SIZE, GRID_SIZE)
    pose = decode_pose(grid, model, CAM)
    assert rotation_angle_between(pose.rotation, gt.rotation) < 1e-2
    assert np.linalg.norm(pose.translation - gt.translation) < 5.0
    mean, ok = add_metric(pose, gt, model)
    assert ok and mean < 0.1 * model.diameter


def test_grid_deltas_perfect(rng):
    model = ObjectModel.from_extents([100.0, 100.0, 100.0])
    gt = Pose6Dof(np.eye(3), [0, 0, 500.0])
    from handobj.geometry import project_perspective

    grid = render_grid(gt, model, CAM, rng)
    assert np.abs(grid_deltas(grid, project_perspective(CAM, gt, model.control_points))).max() < 1e-9


def test_add_metric_cases(rng):
    model = ObjectModel.from_extents([50.0, 60.0, 70.0])
    gt = Pose6Dof(Rotation.random(random_state=rng).as_matrix(), [0, 0, 400.0])
    assert add_metric(gt, gt, model) == (0.0, True)
    moved = Pose6Dof(gt.rotation, gt.translation + [3.0, 4.0, 0.0])
    mean, _ = add_metric(moved, gt, model)
    assert mean == pytest.approx(5.0, abs=1e-12)
    other = Pose6Dof(Rotation.random(random_state=rng).as_matrix(), [1.0, 2.0, 390.0])
    expected = np.mean([np.linalg.norm(other.apply(v[None])[0] - gt.apply(v[None])[0])
                        for v in model.mesh_vertices])
    mean, ok = add_metric(other, gt, model)
    assert mean == pytest.approx(expected, rel=1e-12)
    assert ok == (expected < 0.1 * model.diameter)


def test_proposals_is_row_major():
    p = decode_proposals(_grid(np.zeros((2, 3, 21, 2))))
    assert isinstance(p, Proposals)
    assert list(zip(p.rows, p.cols)) == [(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)]


def test_noiseless_grid_recovers_pose(rng):
    model = ObjectModel.from_extents([100.0, 100.0, 100.0])
    for _ in range(5):
        gt = Pose6Dof(Rotation.random(random_state=rng).as_matrix(), [rng.uniform(-30, 30), 0.0, 500.0])
        pose = decode_pose(render_grid(gt, model, CAM, rng), model, CAM)
        assert rotation_angle_between(pose.rotation, gt.rotation) < 1e-4
        assert np.linalg.norm(pose.translation - gt.translation) < 0.1


def test_grid_losses_permutation_invariant(rng):
    off = rng.normal(size=(4, 4, 21, 2))
    conf = rng.uniform(0.01, 0.99, size=(4, 4, 21))
    gt = rng.uniform(0, 64, size=(21, 2))
    grid = GridPrediction(off, conf)
    deltas = grid_deltas(grid, gt)
    perm = rng.permutation(16)
    d2 = deltas.reshape(16, 21, 2)[perm].reshape(deltas.shape)
    c2 = conf.reshape(16, 21)[perm].reshape(conf.shape)
    assert conf_loss(c2, d2) == pytest.approx(conf_loss(conf, deltas), rel=1e-12)
    assert np.abs(d2).sum() == pytest.approx(p2d_loss(grid, gt), rel=1e-12)


def test_add_symmetric_under_translation(rng):
    model = ObjectModel.from_extents([50.0, 60.0, 70.0])
    a = Pose6Dof(Rotation.random(random_state=rng).as_matrix(), [0, 0, 400.0])
    b = Pose6Dof(a.rotation, a.translation + rng.normal(size=3) * 4)
    assert add_metric(a, b, model) == add_metric(b, a, model)
