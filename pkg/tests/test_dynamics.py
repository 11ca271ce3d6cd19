import numpy as np
import pytest
from dataclasses import replace

from deft import dynamics as dy
from deft.bench import sway_inputs
from deft.scenarios import DESK_CONFIG, held_model, two_hand_script
from deft.topology import BranchSpec, build_topology, single_rod

TOPO = build_topology([BranchSpec("parent", 10), BranchSpec("a", 4, "child", 3), BranchSpec("b", 5, "child", 6)])
NO_GRAVITY = replace(DESK_CONFIG, gravity=(0.0, 0.0, 0.0))


def swaying(cfg=DESK_CONFIG, steps=40, topo=TOPO):
    model, grasp, state = held_model(topo)
    script = two_hand_script(topo, amplitude=((0.03, 0, 0.02, 0.5, 0, 0), (-0.03, 0.02, 0, -0.4, 0.2, 0)))
    inputs = script.inputs(dy.hold_poses(state, grasp), steps, cfg.dt)[1:].reshape(steps, -1)
    return dy.Simulator(model, grasp, cfg), state, inputs


# integrate -------------------------------------------------------------------


def test_ballistic_and_gravity_increments():
    x = np.zeros((1, 2, 3))
    v = np.array([[[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]]])
    inv_m = np.tile(np.eye(3), (1, 2, 1, 1))
    xn, vn = dy.integrate(x, v, np.zeros_like(x), inv_m, 0.01)
    np.testing.assert_allclose(xn, 0.01 * v)
    g = np.array([0.0, 0.0, -9.81])
    xn, vn = dy.integrate(x, np.zeros_like(x), np.zeros_like(x), inv_m, 0.01, g)
    np.testing.assert_allclose(xn[0, 0], 0.01**2 * g)
    np.testing.assert_allclose(vn[0, 0], 0.01 * g)


def test_zero_residual_equals_no_residual():
    rng = np.random.default_rng(0)
    x, v, f = rng.normal(size=(3, 2, 4, 3))
    inv_m = np.tile(np.eye(3), (2, 4, 1, 1))
    a = dy.integrate(x, v, f, inv_m, 0.01, (0, 0, -9.81))
    b = dy.integrate(x, v, f, inv_m, 0.01, (0, 0, -9.81), residual=np.zeros_like(x))
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


def test_kinematic_vertices_do_not_move():
    x = np.zeros((1, 3, 3))
    kin = np.array([[True, False, False]])
    inv_m = np.tile(np.eye(3), (1, 3, 1, 1))
    xn, vn = dy.integrate(x, np.ones_like(x), np.ones_like(x), inv_m, 0.1, (0, 0, -1), np.ones_like(x), kin)
    np.testing.assert_array_equal(xn[0, 0], 0.0)
    np.testing.assert_array_equal(vn[0, 0], 0.0)


def test_non_finite_force_raises():
    x = np.zeros((1, 3, 3))
    f = np.zeros_like(x)
    f[0, 1, 2] = np.nan
    with pytest.raises(dy.SimulationError) as err:
        dy.integrate(x, x, f, np.tile(np.eye(3), (1, 3, 1, 1)), 0.01)
    assert err.value.vertex == (0, 1)


# stepping ---------------------------------------------------------------------


def test_rest_state_held_without_gravity_is_fixed():
    model, grasp, state = held_model(TOPO)
    sim = dy.Simulator(model, grasp, NO_GRAVITY)
    new = sim.step(state).state
    assert np.max(np.abs(new.x - state.x)) < 1e-8
    states = sim.rollout(state, [dy.hold_poses(state, grasp)] * 200)
    assert max(np.max(np.abs(s.x - state.x)) for s in states) < 1e-6


def test_zero_step_rollout_returns_initial_state():
    model, grasp, state = held_model(TOPO)
    states = dy.Simulator(model, grasp).rollout(state, [])
    assert len(states) == 1 and states[0] is state


def test_moved_pin_is_exactly_at_target():
    model, grasp, state = held_model(TOPO, hold_edge=False)
    u = dy.hold_poses(state, grasp).reshape(2, 6)
    u[0, :3] += [0.01, 0, 0]
    new = dy.Simulator(model, grasp, DESK_CONFIG).step(state, u.ravel()).state
    np.testing.assert_array_equal(new.x[0, 0], u[0, :3])
    np.testing.assert_array_equal(new.x[0, -1], state.x[0, -1])


def test_mid_branch_pin_is_held():
    topo = single_rod(13)
    model = dy.Bdlo.from_rest(topo, dy.rest_shape(topo))
    state = model.rest_state()
    grasp = dy.GraspSpec.attach(model, state, [dy.Pin(0, 6)])
    states = dy.Simulator(model, grasp, DESK_CONFIG).rollout(state, [dy.hold_poses(state, grasp)] * 20)
    for s in states:
        np.testing.assert_array_equal(s.x[0, 6], state.x[0, 6])
    assert states[-1].x[0, 0, 2] < state.x[0, 0, 2]  # the free ends sag


def test_pin_outside_topology_rejected():
    model, _, state = held_model(TOPO)
    with pytest.raises(ValueError):
        dy.GraspSpec.attach(model, state, [dy.Pin(1, 4)])


def test_grasped_vertices_track_targets_every_step():
    sim, state, inputs = swaying()
    states = sim.rollout(state, inputs)
    for s, u in zip(states[1:], inputs):
        verts, _ = sim.grasp.targets(u)
        for r, k, pos in verts:
            np.testing.assert_array_equal(s.x[r, k], pos)


def test_segment_lengths_within_tolerance():
    sim, state, inputs = swaying()
    kappa = sim.cfg.constraints.threshold("inext")
    rest = sim.model.params.rest_lengths
    for s in sim.rollout(state, inputs)[1:]:
        lengths = np.linalg.norm(np.diff(s.x, axis=1), axis=-1)
        dev = np.where(sim.edge_mask, lengths - rest, 0.0)
        assert np.max(dev**2) <= kappa * (1 + 1e-9)


def test_batched_matches_sequential():
    sim, state, inputs = swaying(steps=25)
    seq = dy.Simulator(sim.model, sim.grasp, replace(sim.cfg, batched=False))
    a = sim.rollout(state, inputs)
    b = seq.rollout(state, inputs)
    for sa, sb in zip(a, b):
        np.testing.assert_allclose(sa.x, sb.x, atol=1e-12, rtol=0)
        np.testing.assert_allclose(sa.theta, sb.theta, atol=1e-12, rtol=0)


def test_rollout_is_deterministic():
    sim, state, inputs = swaying(steps=15)
    a = sim.rollout(state, inputs)
    b = sim.rollout(state, inputs)
    for sa, sb in zip(a, b):
        np.testing.assert_array_equal(sa.x, sb.x)


def test_free_functions_match_simulator():
    sim, state, inputs = swaying(steps=3)
    s1 = dy.deft_step(state, inputs[0], sim.model, sim.grasp, sim.cfg)
    np.testing.assert_array_equal(s1.x, sim.step(state, inputs[0]).state.x)
    traj = dy.rollout(state, inputs, sim.model, sim.grasp, sim.cfg)
    np.testing.assert_array_equal(traj[-1].x, sim.rollout(state, inputs)[-1].x)


def test_hanging_rod_settles():
    topo = single_rod(6)
    model = dy.Bdlo.from_rest(topo, dy.rest_shape(topo))
    state = model.rest_state()
    grasp = dy.GraspSpec.attach(model, state, [dy.Pin(0, 0)])
    # a loose length tolerance lets gravity re-stretch the rod every step and leaves a kinetic floor
    cfg = replace(DESK_CONFIG, damping=0.9, constraints=replace(DESK_CONFIG.constraints, kappa=1e-10))
    states = dy.Simulator(model, grasp, cfg).rollout(state, [dy.hold_poses(state, grasp)] * 300)
    v = states[-1].v[0]
    kinetic = 0.5 * np.einsum("ni,nij,nj->", v, model.params.mass[0], v)
    assert kinetic < 1e-8
    assert states[-1].x[0, -1, 2] < -0.2  # hangs down from the pin


def test_replayed_frames_reproduce_orientation():
    sim, state, inputs = swaying(steps=30)
    states = sim.rollout(state, inputs)
    frames = [s.x for s in states]
    all_inputs = [dy.hold_poses(state, sim.grasp)] + list(inputs)
    for t, rs in dy.replay_states(sim, frames, all_inputs, start=10, stop=30):
        np.testing.assert_allclose(rs.tracker.omega, states[t].tracker.omega, atol=1e-12)
        np.testing.assert_allclose(rs.x, states[t].x, atol=0)


def test_state_from_frames_velocity():
    model, _, state = held_model(TOPO)
    x1 = state.x + 0.001
    s = dy.state_from_frames(model, x1, state.x, dt=0.01)
    np.testing.assert_allclose(s.v[model.layout.mask], 0.1)
    with pytest.raises(ValueError):
        dy.state_from_frames(model, [np.zeros((3, 3))] * 3)


def test_sway_inputs_shape():
    model, grasp, state = held_model(TOPO)
    u = sway_inputs(dy.hold_poses(state, grasp), 7, 0.01)
    assert np.shape(u) == (7, 12)
