import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from deft import data, dynamics as dy, scenarios as S, sysid
from deft.topology import BranchSpec, build_topology

BRANCHES = ("parent", "a", "b")
TOPO = build_topology([BranchSpec("parent", 10), BranchSpec("a", 4, "child", 3), BranchSpec("b", 4, "child", 6)])


@pytest.fixture(scope="module")
def short():
    """The identification scenario cut to 40 steps, two 20-step windows."""
    sc = S.identification_benchmark(steps=40)
    layout = sysid.ParamVector(BRANCHES)
    return sc, layout, sysid.make_problem(sc.dataset, sc.initial, layout, sc.cfg, horizon=20, starts=(0, 20))


# parameter packing --------------------------------------------------------------


def test_pack_unpack_round_trip():
    mats = S.anisotropic_materials(TOPO)
    for layout in (sysid.ParamVector(BRANCHES), sysid.ParamVector(BRANCHES, free=sysid.FIELDS)):
        back = layout.unpack(layout.pack(mats), mats)
        for b in BRANCHES:
            for f in layout.free:
                np.testing.assert_allclose(back[b][f], mats[b][f], rtol=1e-14)


def test_names_and_sizes():
    lay = sysid.ParamVector(BRANCHES)
    assert lay.names()[:3] == ["parent.bend1", "parent.bend2", "parent.twist"]
    assert len(lay.names()) == 9
    shared = sysid.ParamVector(BRANCHES, sharing="shared")
    assert shared.names() == ["*.bend1", "*.bend2", "*.twist"]
    with pytest.raises(ValueError):
        sysid.ParamVector(BRANCHES, free=("colour",))
    with pytest.raises(ValueError):
        lay.unpack(np.zeros(3), sysid.default_materials(S.comb(6, 3, 2)))


@settings(max_examples=50, deadline=None)
@given(arrays(float, 9, elements=st.floats(-30, 30)))
def test_unpack_always_positive(z):
    base = {b: {"mass": 0.01, "bend": [0.01, 0.01], "twist": 0.01, "inertia_scale": 1.0} for b in BRANCHES}
    out = sysid.ParamVector(BRANCHES).unpack(z, base)
    for m in out.values():
        assert min(m["bend"]) > 0 and m["twist"] > 0


def test_params_file_round_trip(tmp_path):
    mats = sysid.default_materials(S.comb(6, 3, 2), bend=(0.002, 0.004))
    sysid.save_params(mats, tmp_path / "p.json")
    assert sysid.load_params(tmp_path / "p.json") == mats
    mats["c1"]["twist"] = -1.0
    sysid.save_params(mats, tmp_path / "bad.json")
    with pytest.raises(ValueError):
        sysid.load_params(tmp_path / "bad.json")


# rollout loss -------------------------------------------------------------------


def test_loss_vanishes_at_ground_truth(short):
    sc, layout, prob = short
    assert sysid.rollout_loss(prob, layout.pack(sc.truth)) < 1e-9
    assert sysid.rollout_loss(prob, layout.pack(sc.initial)) > 1e-4


def test_horizon_one_is_one_step_error(short):
    sc, layout, _ = short
    prob = sysid.make_problem(sc.dataset, sc.initial, layout, sc.cfg, horizon=1, starts=(5,))
    sim = prob.simulator(sc.initial)
    pred = sim.step(prob.init_states[0], sc.dataset.inputs[6].ravel()).state.x
    err = (pred - sc.dataset.frames[6])[prob.mask]
    assert sysid.rollout_loss(prob, layout.pack(sc.initial)) == pytest.approx(np.sqrt(np.mean(np.sum(err**2, -1))))


def test_doubling_twist_stiffness_increases_loss(short):
    sc, layout, prob = short
    at = sysid.rollout_loss(prob, layout.pack(sc.truth))
    doubled = S.scaled(sc.truth, 2.0, fields=("twist",))
    assert sysid.rollout_loss(prob, layout.pack(doubled)) > at


def test_windows_must_fit(short):
    sc, layout, _ = short
    with pytest.raises(ValueError):
        sysid.make_problem(sc.dataset, sc.initial, layout, sc.cfg, horizon=20, starts=(30,))


def test_window_rmse_matches_rollout_loss(short):
    sc, layout, prob = short
    r = sysid.window_rmse(sc.dataset, sc.initial, sc.cfg, horizon=20, split="train", starts=(0, 20))
    assert r == pytest.approx(sysid.rollout_loss(prob, layout.pack(sc.initial)), rel=1e-12)


def test_fd_jacobian_matches_loss_slope(short):
    sc, layout, prob = short
    z = layout.pack(sc.initial)
    jac = sysid.fd_jacobian(prob, z)
    assert jac.shape == (prob.size, 9)
    r = prob.residuals(z)
    d = np.zeros(9)
    d[2] = 1e-4
    slope = (np.sum(prob.residuals(z + d) ** 2) - np.sum(prob.residuals(z - d) ** 2)) / 2e-4
    assert 2 * r @ jac[:, 2] == pytest.approx(slope, rel=1e-3)


def test_inner_gradient_check(short):
    sc, layout, prob = short
    assert sysid.inner_gradient_check(prob, layout.pack(sc.initial)) < 1e-6


# identification ---------------------------------------------------------------


def test_identify_at_ground_truth_returns_immediately(short):
    sc, layout, _ = short
    prob = sysid.make_problem(sc.dataset, sc.truth, layout, sc.cfg, horizon=20, starts=(0,))
    mats, rep = sysid.identify(prob)
    assert rep.iterations <= 1 and rep.final_loss <= rep.initial_loss < 1e-9
    for b in BRANCHES:
        np.testing.assert_allclose(mats[b]["bend"], sc.truth[b]["bend"], rtol=1e-6)


def test_identify_shared_twist(short):
    """Recover one shared twist stiffness (all branches equal in the data) from a x2 start."""
    sc, _, _ = short
    truth = {b: dict(m, twist=0.006) for b, m in sc.truth.items()}
    model = sysid.build_model(sc.topo, dy.rest_shape(sc.topo), truth)
    ds = data.generate_synthetic(model, sc.script, 40, sc.cfg)
    layout = sysid.ParamVector(BRANCHES, free=("twist",), sharing="shared")
    start = S.scaled(truth, 2.0, fields=("twist",))
    prob = sysid.make_problem(ds, start, layout, sc.cfg, horizon=20, starts=(0, 20))
    mats, rep = sysid.identify(prob)
    assert mats["a"]["twist"] == pytest.approx(0.006, rel=0.02)
    assert rep.final_loss < rep.initial_loss / 10
    losses = [h[1] for h in rep.history]
    assert all(b <= a for a, b in zip(losses, losses[1:]))
    assert max(rep.inner_grad_check) < 1e-6
