import numpy as np
import pytest
from dataclasses import replace
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from deft import checks
from deft.constraints import (ConstraintSettings, OrientationTracker, attachment_correction, enforce,
                              inextensibility_correction, junction_gap, junction_orientation_correction,
                              orientation_change, orientation_residual, pair_weights, update_edge_orientation)
from deft.rotations import compose_rotvec
from deft.topology import pad_layout

vec = arrays(float, 3, elements=st.floats(-1.0, 1.0))


# orientation bookkeeping ----------------------------------------------------


def test_orientation_change_examples():
    a, b = np.zeros(3), np.array([1.0, 0, 0])
    np.testing.assert_array_equal(orientation_change(a, b, np.zeros(3), np.zeros(3)), 0.0)
    np.testing.assert_allclose(orientation_change(a, b, np.array([-0.1, 0, 0]), np.array([0.2, 0, 0])), 0.0)
    # endpoint moved so the edge turns from +x to +y
    np.testing.assert_allclose(orientation_change(a, b, np.zeros(3), np.array([-1.0, 1.0, 0])), [0, 0, 1])


def test_update_edge_orientation_examples():
    om = np.array([0.1, -0.2, 0.3])
    np.testing.assert_array_equal(update_edge_orientation(om, np.zeros(3)), om)
    axis = np.array([0.0, 0.0, 1.0])
    np.testing.assert_allclose(update_edge_orientation(0.2 * axis, 0.5 * axis), 0.7 * axis, atol=1e-15)
    with pytest.raises(ValueError):
        update_edge_orientation(om, np.array([np.nan, 0, 0]))


@settings(max_examples=100, deadline=None)
@given(vec)
def test_update_then_inverse_is_identity(v):
    np.testing.assert_allclose(update_edge_orientation(update_edge_orientation(np.zeros(3), v), -v), 0, atol=1e-12)


def test_tracker_commits_once_per_sync():
    x = np.array([[[0.0, 0, 0], [1, 0, 0], [2, 0, 0]]])
    tr = OrientationTracker.start(x)
    y = np.array([[[0.0, 0, 0], [0, 1, 0], [1, 1, 0]]])
    np.testing.assert_allclose(tr.current(y, 0, 0), [0, 0, 1])
    np.testing.assert_array_equal(tr.omega, 0.0)  # current() does not commit
    tr.sync(y)
    np.testing.assert_allclose(tr.omega[0, 0], [0, 0, 1])
    np.testing.assert_allclose(tr.omega[0, 1], [0, 0, 0], atol=1e-15)


def test_junction_gap_picks_nearest_representative():
    axis = np.array([1.0, 0, 0])
    p, c = (np.pi - 0.01) * axis, -(np.pi - 0.01) * axis  # nearly the same rotation
    np.testing.assert_allclose(np.linalg.norm(junction_gap(p, c)), 0.02, atol=1e-12)
    np.testing.assert_allclose(junction_gap(0.1 * axis, 0.3 * axis), 0.2 * axis)


# closed-form corrections ----------------------------------------------------


def test_inextensibility_examples():
    a, b = np.zeros(3), np.array([1.1, 0, 0])
    np.testing.assert_array_equal(inextensibility_correction(a, b, 1.0, 1.0, 1.1), [np.zeros(3), np.zeros(3)])
    da, db = inextensibility_correction(a, b, 1.0, 1.0, 1.0)
    np.testing.assert_allclose(da, [0.05, 0, 0])
    np.testing.assert_allclose(db, [-0.05, 0, 0])
    da, db = inextensibility_correction(a, b, 0.0, 1.0, 1.0)
    np.testing.assert_array_equal(da, 0.0)
    np.testing.assert_allclose(db, [-0.1, 0, 0])
    np.testing.assert_allclose(np.linalg.norm(b + db - a - da), 1.0)


def test_inextensibility_zero_length_edge():
    with pytest.raises(ValueError):
        inextensibility_correction(np.ones(3), np.ones(3), 1.0, 1.0, 1.0)


def test_attachment_examples():
    p = np.array([0.0, 0, 0])
    np.testing.assert_array_equal(attachment_correction(p, p, 1.0, 1.0), [np.zeros(3), np.zeros(3)])
    c = np.array([0.0, 0.04, 0.02])
    dp, dc = attachment_correction(p, c, 1.0, 1.0)
    np.testing.assert_allclose(dp, c / 2)
    np.testing.assert_allclose(p + dp, c + dc)
    dp, dc = attachment_correction(p, c, 1e-6, 1.0)
    assert np.linalg.norm(dc + c) < 1e-5 and np.linalg.norm(dp) < 1e-6


def test_orientation_examples():
    edge_p = (np.zeros(3), np.array([1.0, 0, 0]))
    edge_c = (np.array([1.0, 0, 0]), np.array([1.0, -1, 0]))
    axis = np.array([0.0, 0, 1])
    eye = np.eye(3)
    for om_c in (0.25 * axis, 0.5 * axis):  # equal, and exactly eps apart
        dx, dom = junction_orientation_correction(edge_p, edge_c, 0.25 * axis, om_c, eye, eye, 0.25)
        assert not np.any(dx) and not np.any(dom)
    eps = 0.1
    dx, (d_p, d_c) = junction_orientation_correction(edge_p, edge_c, np.zeros(3), 2 * eps * axis, eye, eye, eps)
    np.testing.assert_allclose(d_p, eps / 2 * axis)
    np.testing.assert_allclose(d_c, -eps / 2 * axis)
    gap = compose_rotvec(d_c, 2 * eps * axis) - compose_rotvec(d_p, np.zeros(3))
    assert orientation_residual(np.zeros(3), gap, eps) == pytest.approx(0.0, abs=1e-12)
    # rotation about the midpoint keeps the midpoint and the length
    np.testing.assert_allclose(dx[0] + dx[1], 0.0, atol=1e-15)
    new = (edge_p[0] + dx[0], edge_p[1] + dx[1])
    assert np.linalg.norm(new[1] - new[0]) == pytest.approx(1.0)


def test_pair_weights_matrix_and_scalar_agree():
    k = pair_weights(2.0, 3.0)
    np.testing.assert_allclose(k[0], 0.4 * np.eye(3))
    np.testing.assert_allclose(pair_weights(2.0 * np.eye(3), 3.0 * np.eye(3))[1], k[1])
    np.testing.assert_array_equal(pair_weights(0.0, 0.0)[0], 0.0)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_momentum_balance_random_spd(seed):
    rng = np.random.default_rng(seed)
    m_a, m_b = checks.random_spd3(rng), checks.random_spd3(rng)
    x_a, x_b = rng.normal(size=(2, 3))
    for da, db in (inextensibility_correction(x_a, x_b, np.linalg.inv(m_a), np.linalg.inv(m_b), 0.5),
                   attachment_correction(x_a, x_b, np.linalg.inv(m_a), np.linalg.inv(m_b))):
        assert np.max(np.abs(m_a @ da + m_b @ db)) <= 1e-12


def test_conservation_suite_small():
    worst = checks.conservation_suite(500, seed=3)
    assert max(worst.values()) <= 1e-12


def test_batched_corrections_match_single():
    rng = np.random.default_rng(0)
    xa, xb = rng.normal(size=(2, 5, 3))
    w = np.linalg.inv(np.array([checks.random_spd3(rng) for _ in range(5)]))
    rest = rng.uniform(0.5, 1.5, 5)
    da, db = inextensibility_correction(xa, xb, w, 1.0, rest)
    for k in range(5):
        one = inextensibility_correction(xa[k], xb[k], w[k], 1.0, rest[k])
        np.testing.assert_allclose(da[k], one[0], atol=1e-15)
        np.testing.assert_allclose(db[k], one[1], atol=1e-15)


# enforcement ----------------------------------------------------------------


def test_feasible_state_is_a_fixed_point():
    from deft import dynamics as dy
    from deft.scenarios import comb

    topo = comb(12, 5, 2)
    model = dy.Bdlo.from_rest(topo, dy.rest_shape(topo))
    system = dy.Simulator(model).system
    tracker = OrientationTracker.start(model.x_rest, model.edge_mask)
    x = model.x_rest.copy()
    for engine in ("compiled", "python"):
        y, _, rep = enforce(x.copy(), system, tracker.copy(), ConstraintSettings(kappa=1e-12, engine=engine))
        assert rep.sweeps_used == 0 and rep.converged
        np.testing.assert_array_equal(y, x)


def test_overstretched_segment_converges():
    from deft import dynamics as dy
    from deft.topology import single_rod

    topo = single_rod(6)
    model = dy.Bdlo.from_rest(topo, dy.rest_shape(topo))
    sim = dy.Simulator(model)
    x = model.x_rest.copy()
    x[0, 3:] += np.array([0.02, 0, 0])
    tracker = OrientationTracker.start(model.x_rest, model.edge_mask)
    y, tr, rep = enforce(x, sim.system, tracker, ConstraintSettings(kappa=0.02))
    assert rep.converged and rep.sweeps_used <= 3
    y, tr, rep = enforce(x.copy(), sim.system, tracker, ConstraintSettings(kappa=1e-12))
    assert rep.converged
    np.testing.assert_allclose(np.linalg.norm(np.diff(y[0], axis=0), axis=-1), 0.05, atol=1e-6)


def test_detached_child_is_reattached():
    rng = np.random.default_rng(2)
    system, tracker, x = checks.perturbed_comb(rng, noise=0.0, detach=0.05)
    s = ConstraintSettings(kappa=1e-6, kappa_orient=4e-3)
    y, tracker, rep = enforce(x, system, tracker, s)
    assert rep.converged
    for i, row, *_ in system.junctions:
        assert np.linalg.norm(y[0, i] - y[row, 0]) ** 2 <= 1e-6


def test_exit_implies_residuals_within_threshold():
    ok, sweeps, ratio = checks.convergence_suite(trials=20, seed=5)
    assert ok == 20 and sweeps <= 50 and ratio <= 1.0


def test_non_convergence_is_reported_not_raised():
    rng = np.random.default_rng(3)
    system, tracker, x = checks.perturbed_comb(rng, noise=0.02)
    _, _, rep = enforce(x, system, tracker, ConstraintSettings(kappa=1e-30, max_sweeps=3))
    assert not rep.converged and rep.sweeps_used == 3


def test_min_sweeps_floor():
    rng = np.random.default_rng(4)
    system, tracker, x = checks.perturbed_comb(rng)
    _, _, rep = enforce(x, system, tracker, ConstraintSettings(min_sweeps=7))
    assert rep.converged and rep.sweeps_used == 7


def test_momentum_of_a_whole_sweep_is_balanced():
    """Free comb with uniform masses: the projection moves no net mass."""
    rng = np.random.default_rng(6)
    system, tracker, x = checks.perturbed_comb(rng, noise=0.01, detach=0.02)
    mask = pad_layout(system.topo).mask
    y, _, _ = enforce(x.copy(), system, tracker, ConstraintSettings(kappa=1e-10, kappa_orient=4e-3))
    # default masses are equal per vertex, so momentum balance means the centroid stays put
    np.testing.assert_allclose(y[mask].mean(axis=0), x[mask].mean(axis=0), atol=1e-12)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_compiled_engine_matches_python_reference(seed):
    rng = np.random.default_rng(seed)
    system, tracker, x = checks.perturbed_comb(rng, noise=0.01, detach=0.02)
    s = ConstraintSettings(kappa=1e-8, kappa_orient=4e-3)
    y1, t1, r1 = enforce(x.copy(), system, tracker.copy(), s)
    y2, t2, r2 = enforce(x.copy(), system, tracker.copy(), replace(s, engine="python"))
    assert r1.sweeps_used == r2.sweeps_used
    np.testing.assert_allclose(y1, y2, atol=1e-12)
