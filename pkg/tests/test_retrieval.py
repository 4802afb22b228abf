import math

import numpy as np
import pytest

from stucco.geometry import Circle, Polygon, build_sdf, transform_points
from stucco.retrieval import (IcpEstimate, ModelPoints, RetrievalError, choose_estimate,
                              estimate_object, grasp_check, icp, position_variance, rigid_align,
                              select_target, symmetry_period, yaw_error)
from stucco.sim import EnvState, ObjectSpec

BOX = Polygon.box(0.08, 0.05)
MODEL = ModelPoints.from_shape(BOX, 0.002)
GRIPPER = Polygon.box(0.03, 0.03)
GRID = build_sdf(GRIPPER, 0.001)


def test_model_spacing_limit():
    with pytest.raises(ValueError):
        ModelPoints.from_shape(BOX, 0.01)


def test_rigid_align_exact():
    rng = np.random.default_rng(0)
    model = rng.normal(size=(30, 2))
    pose = np.array([0.3, -0.1, 2.0])
    est = rigid_align(model, transform_points(pose, model))
    np.testing.assert_allclose(est, pose, atol=1e-9)


def test_icp_identity():
    est = icp(MODEL.points, MODEL, np.zeros(3))
    np.testing.assert_allclose(est.pose, 0, atol=1e-12)
    assert est.error == pytest.approx(0, abs=1e-20)
    assert est.converged


def test_icp_recovers_offset():
    truth = np.array([0.02, 0.01, math.radians(10)])
    src = transform_points(truth, MODEL.points)
    est = icp(src, MODEL, truth + [0.004, -0.003, math.radians(4)], max_iters=50)
    assert np.hypot(*(est.pose[:2] - truth[:2])) < 1e-4
    assert abs(est.pose[2] - truth[2]) < 1e-3
    assert all(b <= a + 1e-15 for a, b in zip(est.history, est.history[1:]))


def test_icp_degenerate_and_errors():
    two = np.array([[-0.02, -0.025], [0.02, -0.025]])
    est = icp(two, MODEL, [0.01, 0, 0])
    assert est.error < 1e-12
    same = icp(np.array([[0.0, 0.0], [0.0, 0.0]]), MODEL)
    assert not same.converged
    with pytest.raises(ValueError):
        icp(two[:1], MODEL)
    with pytest.raises(ValueError):
        icp(two, MODEL, max_iters=0)


def _block_sets():
    # two adjacent sides of a square block vs a short stretch of one side
    block = ModelPoints.from_shape(Polygon.box(0.08, 0.08), 0.002)
    s = block.points
    bottom = np.abs(s[:, 1] + 0.04) < 1e-9
    return block, s[bottom | (np.abs(s[:, 0] - 0.04) < 1e-9)], s[bottom & (np.abs(s[:, 0]) <= 0.015)]


@pytest.mark.parametrize("seed", range(5))
def test_estimate_object_variance_in_basin(seed):
    # restarts seeded inside the points' bounding box
    block, corner, one_side = _block_sets()
    good = estimate_object(corner, block, 30, seed=seed, inflate=0.0)
    bad = estimate_object(one_side, block, 30, seed=seed, inflate=0.0)
    assert len(good) == 30
    assert math.sqrt(position_variance(good)) < 0.01
    assert math.sqrt(position_variance(bad)) >= 3 * math.sqrt(position_variance(good))
    assert len(estimate_object(corner, block, 1)) == 1


@pytest.mark.parametrize("seed", range(5))
def test_estimate_object_variance_default_is_directional(seed):
    block, corner, one_side = _block_sets()
    good = position_variance(estimate_object(corner, block, 30, seed=seed))
    bad = position_variance(estimate_object(one_side, block, 30, seed=seed))
    assert bad > good


def test_choose_estimate_tie_break():
    ests = [IcpEstimate(np.zeros(3), 0.002, True), IcpEstimate(np.zeros(3), 0.001, True)]
    assert choose_estimate(ests, [0.0, 0.0]) == 1
    assert choose_estimate(ests, [0.0, 0.1]) == 0


def test_select_target_prefers_constrained_segment():
    s = MODEL.points
    box_pts = transform_points([0.2, 0.0, 0.0],
                               s[(np.abs(s[:, 1] + 0.025) < 1e-9) | (np.abs(s[:, 0] + 0.04) < 1e-9)])
    a = np.linspace(-2.0, -1.2, 12)
    can_pts = np.c_[np.cos(a), np.sin(a)] * 0.035 + [-0.2, 0.0]
    rep = select_target([can_pts, box_pts], MODEL, [0, -0.3, 0], GRID, restarts=30, seed=0)
    assert rep.chosen == 1
    assert np.hypot(*(rep.pose[:2] - [0.2, 0.0])) < 0.01
    rev = select_target([box_pts, can_pts], MODEL, [0, -0.3, 0], GRID, restarts=30, seed=0)
    assert rev.chosen == 0
    np.testing.assert_array_equal(rev.pose, rep.pose)
    single = select_target([box_pts], MODEL, [0, -0.3, 0], GRID, restarts=5)
    assert single.chosen == 0
    with pytest.raises(RetrievalError):
        select_target([box_pts[:1]], MODEL, [0, -0.3, 0], GRID)


def _env(shape, pose):
    o = ObjectSpec(0, "t", shape, np.asarray(pose, float))
    return EnvState([o], o.pose[None].copy(), GRIPPER, np.zeros(3), 0)


def test_grasp_check():
    env = _env(BOX, [0.1, 0.2, 0.3])
    assert grasp_check([0.1, 0.2, 0.3], env)
    assert grasp_check([0.1, 0.2, 0.3 + math.pi], env)
    assert not grasp_check([0.15, 0.2, 0.3], env)
    assert not grasp_check([0.1, 0.2, 0.3 + math.radians(20)], env)
    can = _env(Circle(0.035), [0, 0, 0])
    assert grasp_check([0.01, 0.0, 2.0], can)


def test_symmetry_period():
    assert symmetry_period(Circle(1.0)) == 0.0
    assert symmetry_period(Polygon.box(1, 1)) == pytest.approx(math.pi / 2)
    assert symmetry_period(BOX) == pytest.approx(math.pi)
    assert yaw_error(0.1, 0.1 + 2 * math.pi, 2 * math.pi) == pytest.approx(0, abs=1e-12)
