import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stucco.geometry import Polygon, build_sdf, penetration_cx
from stucco.tracker import (Belief, ContactObservation, Particle, SoftTracker, TrackerParams,
                            belief_record, connection_probability, dynamics_translate,
                            importance_resample, map_index, map_particle, penetration_matrix,
                            replace_bad, segment, step_contact, step_free, systematic_resample)

GRIPPER = Polygon.box(0.03, 0.03)
GRID = build_sdf(GRIPPER, 0.001)
PARAMS = TrackerParams()


def obs(p, x, dx):
    return ContactObservation(np.asarray(p, float), np.asarray(x, float), np.asarray(dx, float))


def union_find_labels(pts, cutoff):
    parent = list(range(len(pts)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(len(pts)):
        for j in range(i + 1, len(pts)):
            if math.dist(pts[i], pts[j]) < cutoff:
                parent[find(i)] = find(j)
    roots = [find(i) for i in range(len(pts))]
    first = {}
    return np.array([first.setdefault(r, len(first)) for r in roots])


def test_params_validation():
    with pytest.raises(ValueError):
        TrackerParams(n_particles=0)
    with pytest.raises(ValueError):
        TrackerParams(connection_threshold=1.0)
    with pytest.raises(ValueError):
        TrackerParams(length_scale=0)
    assert PARAMS.connection_distance == pytest.approx(0.1354, abs=1e-4)


def test_observation_validation():
    with pytest.raises(ValueError):
        obs([0, 0], [0, 0, 0], [0.2, 0, 0])
    with pytest.raises(ValueError):
        obs([0, np.nan], [0, 0, 0], [0, 0, 0])


def test_dynamics_translate_examples():
    p = np.array([[0.0, 0.0], [0.3, -0.1]])
    x = np.array([[0.0, 0.0, 0.0], [0.1, 0.2, 0.5]])
    p1, x1 = dynamics_translate(p, x, np.zeros(3))
    np.testing.assert_array_equal(p1, p)
    np.testing.assert_array_equal(x1, x)
    p2, x2 = dynamics_translate(p[:1], x[:1], [0.01, 0, 0])
    np.testing.assert_allclose(p2, [[0.01, 0]])
    np.testing.assert_allclose(x2, [[0.01, 0, 0]])
    p3, x3 = dynamics_translate(p, x, [0, 0, 0.1])
    np.testing.assert_array_equal(p3, p)
    np.testing.assert_allclose(x3[:, 2], x[:, 2] + 0.1)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1))
def test_connection_probability_decreasing(a, b):
    assert connection_probability(0.0, 0.02) == 1.0
    lo, hi = sorted((a, b))
    if lo < hi:
        assert connection_probability(lo, 0.02) >= connection_probability(hi, 0.02)
        if hi < 0.5 and hi - lo > 1e-6:
            assert connection_probability(lo, 0.02) > connection_probability(hi, 0.02)


def test_step_contact_empty_belief():
    b = Belief(TrackerParams(n_particles=10), GRID, seed=0)
    step_contact(b, [obs([0.0, 0.015], [0, 0, 0], [0, 0.002, 0])])
    assert b.points.shape == (10, 1, 2)
    np.testing.assert_allclose(b.points[:, 0], [[0, 0.017]] * 10)
    np.testing.assert_allclose(b.poses[:, 0], [[0, 0.002, 0]] * 10)
    assert np.all(b.log_weight == 0)


def test_step_contact_coincident_point_always_moves():
    b = Belief(TrackerParams(n_particles=50), GRID, seed=3)
    c = obs([0.0, 0.015], [0, 0, 0], [0, 0.002, 0])
    step_contact(b, [c])
    step_contact(b, [obs(b.points[0, 0], [0, 0.002, 0], [0.002, 0, 0])])
    np.testing.assert_allclose(b.points[:, 0], [[0.002, 0.017]] * 50)


def test_step_contact_connection_rate():
    n = 10_000
    b = Belief(TrackerParams(n_particles=n), GRID, seed=11)
    b.points = np.tile([[0.1, 0.0]], (n, 1, 1))
    b.poses = np.tile([[0.1, -0.5, 0.0]], (n, 1, 1))
    b.log_weight = np.zeros(n)
    b.consistent = np.ones(n, bool)
    step_contact(b, [obs([0, 0], [0, -0.02, 0], [0.01, 0, 0])])
    moved = np.isclose(b.points[:, 0, 0], 0.11)
    assert moved.mean() == pytest.approx(math.exp(-0.5), abs=0.015)


def _two_slot_belief(points, poses):
    b = Belief(TrackerParams(n_particles=len(points)), GRID, seed=0)
    b.points = np.asarray(points, float)
    b.poses = np.asarray(poses, float)
    b.log_weight = np.zeros(len(points))
    b.consistent = np.ones(len(points), bool)
    return b


def test_step_free_far_is_uniform():
    b = _two_slot_belief([[[0, 0]], [[0.5, 0]]], [[[0, -0.5, 0]], [[0.5, -0.5, 0]]])
    step_free(b, [5, 5, 0])
    np.testing.assert_array_equal(b.parents, [0, 1])
    assert np.all(b.log_weight == 0)


def test_step_free_penetration_weight():
    # slot 0 holds a point 5 mm inside the gripper at x_t, plus a far point
    inside = [0.0, 0.010]
    b = _two_slot_belief([[inside, [0.4, 0]], [[0.2, 0], [0.4, 0]]],
                         [[[0, 0.5, 0], [0.4, -0.5, 0]], [[0.2, -0.5, 0], [0.4, -0.5, 0]]])
    pen = penetration_cx(np.zeros(3), inside, GRID)
    assert pen == pytest.approx(0.005, abs=GRID.resolution)
    lw_expected = -(pen ** 2) / PARAMS.penetration_scale
    step_free(b, np.zeros(3))
    assert sorted(b.log_weight[b.parents == 0].tolist() + b.log_weight[b.parents == 1].tolist()) \
        == sorted([lw_expected if p == 0 else 0.0 for p in b.parents])
    assert math.exp(lw_expected) == pytest.approx(math.exp(-0.0125), abs=0.004)
    # replaced points no longer penetrate x_t
    assert np.all(penetration_cx(np.zeros(3), b.points, GRID) == 0)


def test_systematic_resample_equal_weights_is_identity():
    rng = np.random.default_rng(0)
    np.testing.assert_array_equal(systematic_resample(np.ones(7), rng), np.arange(7))


def test_importance_resample_examples():
    b = _two_slot_belief([[[0, 0]], [[1, 0]]], [[[0, -1, 0]], [[1, -1, 0]]])
    importance_resample(b, np.array([0.0, -np.inf]))
    np.testing.assert_array_equal(b.points[:, 0, 0], [0, 0])
    assert np.all(b.log_weight == 0)
    np.testing.assert_array_equal(b.parents, [0, 0])


def test_importance_resample_frequency():
    rng = np.random.default_rng(5)
    w = np.array([0.75, 0.25])
    counts = sum(np.bincount(systematic_resample(w, rng), minlength=2) for _ in range(10_000))
    assert counts[0] / counts.sum() == pytest.approx(0.75, abs=0.02)


def test_importance_resample_all_zero_keeps_set(caplog):
    b = _two_slot_belief([[[0, 0]], [[1, 0]]], [[[0, -1, 0]], [[1, -1, 0]]])
    importance_resample(b, np.array([-np.inf, -np.inf]))
    np.testing.assert_array_equal(b.points[:, 0, 0], [0, 1])
    assert "all particle weights are zero" in caplog.text


def test_replace_bad_no_penetration():
    part = Particle(np.array([[0, 0.0], [0.5, 0]]), np.array([[0, -0.5, 0], [0.5, -0.5, 0]]))
    out = replace_bad(part, GRID, PARAMS)
    np.testing.assert_array_equal(out.points, part.points)
    assert out.log_weight == 0


def test_replace_bad_copies_nearest_consistent():
    # point 2 lies inside the robot at point 1's pose
    pts = np.array([[0.0, 0.016], [0.0, 0.005], [0.3, 0.0]])
    poses = np.array([[0, 0, 0], [0, -0.5, 0], [0.3, -0.5, 0]], float)
    out = replace_bad(Particle(pts, poses), GRID, PARAMS)
    np.testing.assert_array_equal(out.points[1], pts[0])
    np.testing.assert_array_equal(out.poses[1], poses[0])
    np.testing.assert_array_equal(out.points[[0, 2]], pts[[0, 2]])


def test_replace_bad_all_inconsistent():
    pts = np.array([[0.0, 0.0], [0.3, 0.0]])
    poses = np.array([[0.3, 0, 0], [0, 0, 0]], float)
    out = replace_bad(Particle(pts, poses), GRID, PARAMS)
    assert out.log_weight == -math.inf
    np.testing.assert_array_equal(out.points, pts)


def test_map_particle():
    b = Belief(TrackerParams(n_particles=3), GRID)
    step_contact(b, [obs([0, 0.015], [0, 0, 0], [0, 0.001, 0])])
    assert map_index(b) == 0
    b.log_weight = np.log([0.1, 0.9, 0.3])
    assert map_index(b) == 1
    np.testing.assert_array_equal(map_particle(b).points, b.points[1])


def test_segment_examples():
    assert segment(np.array([[0, 0], [0.01, 0]]), PARAMS).tolist() == [0, 0]
    assert segment(np.array([[0, 0], [0.30, 0]]), PARAMS).tolist() == [0, 1]
    chain = np.c_[np.arange(101) * 0.01, np.zeros(101)]
    assert set(segment(chain, PARAMS).tolist()) == {0}
    assert segment(np.zeros((0, 2)), PARAMS).tolist() == []


def test_segment_matches_union_find():
    rng = np.random.default_rng(2)
    for _ in range(200):
        pts = rng.uniform(-0.4, 0.4, (rng.integers(1, 40), 2))
        np.testing.assert_array_equal(segment(pts, PARAMS),
                                      union_find_labels(pts, PARAMS.connection_distance))


def _random_contacts(rng, k):
    out = []
    for _ in range(k):
        x = np.r_[rng.uniform(-0.2, 0.2, 2), 0.0]
        side = rng.integers(4)
        e = rng.uniform(-0.015, 0.015)
        p = x[:2] + [(e, -0.015), (0.015, e), (e, 0.015), (-0.015, e)][side]
        dx = np.r_[rng.uniform(-0.003, 0.003, 2), 0.0]
        out.append(obs(p, x, dx))
    return out


def test_step_invariants():
    rng = np.random.default_rng(9)
    b = Belief(TrackerParams(n_particles=30), GRID, seed=4)
    for t in range(60):
        if rng.random() < 0.6:
            step_contact(b, _random_contacts(rng, rng.integers(1, 3)))
        else:
            step_free(b, np.r_[rng.uniform(-0.2, 0.2, 2), 0.0])
        assert b.n_particles == 30
        for n in np.nonzero(b.consistent)[0]:
            assert penetration_matrix(b.poses[n], b.points[n], GRID).sum() == 0


def test_new_contact_moves_with_dx_before_repair():
    b = Belief(TrackerParams(n_particles=20), GRID, seed=0)
    c = obs([0.1, 0.015], [0.1, 0, 0], [0.0, 0.002, 0])
    step_contact(b, [c])
    np.testing.assert_allclose(b.points[:, -1], np.tile(c.p + c.dx[:2], (20, 1)))


def _drive(workers):
    rng = np.random.default_rng(1)
    tr = SoftTracker(TrackerParams(n_particles=40), GRID, seed=7, workers=workers)
    for t in range(40):
        if rng.random() < 0.6:
            tr.update(_random_contacts(rng, 1), None)
        else:
            tr.update([], np.r_[rng.uniform(-0.2, 0.2, 2), 0.0])
    out = (tr.belief.points.copy(), tr.belief.poses.copy(), tr.belief.log_weight.copy())
    tr.close()
    return out


def test_deterministic_across_workers():
    a = _drive(1)
    b = _drive(4)
    for u, v in zip(a, b):
        assert u.tobytes() == v.tobytes()


def test_belief_record_fields():
    b = Belief(TrackerParams(n_particles=4), GRID)
    step_contact(b, [obs([0, 0.015], [0, 0, 0], [0, 0.001, 0])])
    rec = belief_record(b)
    assert set(rec) == {"step", "contact", "map_index", "weights", "map_points", "map_poses",
                        "labels"}
    assert rec["step"] == 1 and rec["contact"] is True
    full = belief_record(b, full=True)
    assert np.array(full["points"]).shape == (4, 1, 2)


def test_all_degenerate_belief_recovers(caplog):
    # one stored point that the gripper then moves onto leaves no donor
    b = Belief(TrackerParams(n_particles=10), GRID, seed=0)
    b = step_contact(b, [obs([0.03, 0.0], [0.0, 0.0, 0.0], [0.01, 0.0, 0.0])])
    b = step_free(b, [0.03, 0.0, 0.0])
    assert not np.isfinite(b.log_weight).any()
    b = step_contact(b, [obs([0.1, 0.0], [0.07, 0.0, 0.0], [0.01, 0.0, 0.0])])
    assert "degenerate" in caplog.text
    assert b.consistent.all() and np.isfinite(b.log_weight).all()
    b = step_free(b, [0.07, 0.0, 0.0])
    assert np.isfinite(b.log_weight).all()
