import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deft import data, dynamics as dy
from deft.scenarios import DESK_CONFIG, comb, two_hand_script
from deft.topology import BranchSpec, build_topology, pad_layout

TOPO = build_topology([BranchSpec("parent", 6), BranchSpec("a", 3, "child", 2)])


def small_dataset(steps=10, noise=0.0, seed=0):
    model = dy.Bdlo.from_rest(TOPO, dy.rest_shape(TOPO))
    script = two_hand_script(TOPO, amplitude=((0.02, 0, 0.01, 0.2, 0, 0), (-0.02, 0.01, 0, -0.1, 0, 0)))
    return data.generate_synthetic(model, script, steps, DESK_CONFIG, noise=noise, seed=seed,
                                   params_record={"note": "x"}).with_split(0.7)


# file round trip ---------------------------------------------------------------


def test_dataset_round_trip_is_bit_exact(tmp_path):
    ds = small_dataset(noise=1e-3)
    data.save_dataset(ds, tmp_path / "ds")
    back = data.load_dataset(tmp_path / "ds")
    np.testing.assert_array_equal(back.frames, ds.frames)
    np.testing.assert_array_equal(back.inputs, ds.inputs)
    np.testing.assert_array_equal(back.split, ds.split)
    assert back.dt == ds.dt and back.pins == ds.pins and back.params == ds.params
    assert back.topo.digest() == ds.topo.digest()


@pytest.mark.parametrize("steps", [49, 499])
def test_short_and_long_datasets_accepted(tmp_path, steps):
    model = dy.Bdlo.from_rest(TOPO, dy.rest_shape(TOPO))
    frames = np.repeat(model.x_rest[None], steps + 1, axis=0)
    ds = data.TrajectoryDataset(0.01, TOPO, frames, np.zeros((steps + 1, 0, 6)))
    data.save_dataset(ds, tmp_path)
    assert len(data.load_dataset(tmp_path)) == steps + 1


def test_wrong_vertex_count_is_rejected(tmp_path):
    ds = small_dataset(steps=3)
    data.save_dataset(ds, tmp_path)
    path = tmp_path / "trajectory.txt"
    lines = path.read_text().splitlines()
    # drop one vertex of frame 1 and one of frame 2 so the total stays a multiple but frames misalign
    header = 4
    per = TOPO.total_vertices
    del lines[header + per + 2]
    del lines[header + 2 * per + 1]
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(data.DatasetError, match="trajectory.txt"):
        data.load_dataset(tmp_path)
    del lines[-1]
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(data.DatasetError, match="whole number of frames"):
        data.load_dataset(tmp_path)


def test_topology_hash_mismatch_is_rejected(tmp_path):
    ds = small_dataset(steps=2)
    data.save_dataset(ds, tmp_path)
    path = tmp_path / "trajectory.txt"
    path.write_text(path.read_text().replace(TOPO.digest(), "000000000000"))
    with pytest.raises(data.DatasetError, match="topology hash"):
        data.load_dataset(tmp_path)


def test_bad_header_and_missing_topology(tmp_path):
    ds = small_dataset(steps=2)
    data.save_dataset(ds, tmp_path)
    path = tmp_path / "inputs.txt"
    path.write_text(path.read_text().replace("# deft-inputs 1", "# something else"))
    with pytest.raises(data.DatasetError, match="inputs.txt:1"):
        data.load_dataset(tmp_path)
    with pytest.raises(data.DatasetError, match="topology.json"):
        data.load_dataset(tmp_path / "nowhere")


def test_frames_must_match_topology():
    with pytest.raises(data.DatasetError):
        data.TrajectoryDataset(0.01, TOPO, np.zeros((3, 1, 6, 3)), np.zeros((3, 0, 6)))
    layout = pad_layout(TOPO)
    with pytest.raises(data.DatasetError):
        data.TrajectoryDataset(0.01, TOPO, np.zeros((3, layout.batch_count, layout.padded_n, 3)), np.zeros((2, 0, 6)))


def test_split_indices():
    ds = small_dataset(steps=9)
    assert list(ds.indices("train")) == list(range(7))
    assert list(ds.indices("eval")) == [7, 8, 9]


# noise --------------------------------------------------------------------------


def test_counter_noise_is_deterministic_per_frame():
    a = data.counter_noise(7, 3, (4, 3), 0.1)
    np.testing.assert_array_equal(a, data.counter_noise(7, 3, (4, 3), 0.1))
    assert not np.array_equal(a, data.counter_noise(7, 4, (4, 3), 0.1))
    assert not np.array_equal(a, data.counter_noise(8, 3, (4, 3), 0.1))


def test_noisy_generation_reproducible_and_padding_clean():
    a, b = small_dataset(noise=1e-3, seed=5), small_dataset(noise=1e-3, seed=5)
    np.testing.assert_array_equal(a.frames, b.frames)
    mask = pad_layout(TOPO).mask
    clean = small_dataset()
    np.testing.assert_array_equal(a.frames[:, ~mask], clean.frames[:, ~mask])
    assert 5e-4 < np.std(a.frames[:, mask] - clean.frames[:, mask]) < 2e-3


# RMSE ---------------------------------------------------------------------------


def test_rmse_examples():
    truth = np.zeros((4, 5, 3))
    assert data.rmse(truth + [0.01, 0, 0], truth) == pytest.approx(1e-2)
    pred = truth.copy()
    pred[2, 3] = [0.0, 0.3, 0.4]  # one vertex off by 0.5 at one step
    assert data.rmse(pred, truth) == pytest.approx(0.5 / np.sqrt(20))
    assert data.rmse(pred, truth, horizon=2) == 0.0
    with pytest.raises(ValueError, match="misaligned"):
        data.rmse(pred[:3], truth)


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-6, 1.0), st.integers(1, 6), st.integers(1, 6))
def test_rmse_of_constant_offset(e, t, n):
    truth = np.zeros((t, n, 3))
    assert data.rmse(truth + [0, 0, e], truth) == pytest.approx(e)


def test_rmse_mask_ignores_padding():
    truth = np.zeros((2, 2, 4, 3))
    pred = truth.copy()
    mask = np.array([[True] * 4, [True, True, False, False]])
    pred[:, 1, 3] = 100.0
    assert data.rmse(pred, truth, mask) == 0.0


# motion scripts -----------------------------------------------------------------


def test_motion_script_round_trip():
    topo = comb(8, 3, 1)
    d = {"format": "deft-motion", "version": 1, "pins": [
        {"branch": "parent", "vertex": 0, "hold_edge": True, "mode": "sway",
         "amplitude": [0.1, 0, 0, 0.5, 0, 0], "period": 1.5},
        {"branch": "parent", "vertex": 7, "hold_edge": False, "mode": "smooth",
         "waypoints": [[0, 0, 0, 0, 0, 0, 0], [1, 0, 0.1, 0, 0, 0, 0]]},
    ]}
    script = data.MotionScript.from_dict(d, topo)
    assert script.to_dict(topo) == d


def test_sway_starts_at_rest_and_keeps_sign():
    m = data.PinMotion(dy.Pin(0, 0), "sway", amplitude=np.array([0.1, -0.2, 0, 0, 0, 0.3]), period=2.0)
    np.testing.assert_array_equal(m.offset(0.0), 0.0)
    np.testing.assert_allclose(m.offset(1.0), [0.1, -0.2, 0, 0, 0, 0.3])
    for t in np.linspace(0, 5, 51):
        o = m.offset(t)
        assert o[0] >= 0 and o[1] <= 0


def test_waypoint_interpolation():
    w = np.array([[0, 0, 0, 0, 0, 0, 0], [1, 1, 0, 0, 0, 0, 0]], dtype=float)
    lin = data.PinMotion(dy.Pin(0, 0), "linear", waypoints=w)
    smooth = data.PinMotion(dy.Pin(0, 0), "smooth", waypoints=w)
    assert lin.offset(0.25)[0] == pytest.approx(0.25)
    assert smooth.offset(0.5)[0] == pytest.approx(0.5)
    assert smooth.offset(0.25)[0] < 0.25
    assert lin.offset(3.0)[0] == 1.0


def test_bad_motion_scripts_rejected():
    topo = comb(8, 3, 1)
    with pytest.raises(ValueError):
        data.MotionScript.from_dict({"format": "other", "pins": []}, topo)
    base = {"format": "deft-motion", "pins": [{"branch": "parent", "vertex": 0}]}
    for bad in ({"mode": "wiggle"}, {"mode": "sine", "amplitude": [1, 2]},
                {"mode": "linear", "waypoints": [[1, 0, 0, 0, 0, 0, 0], [0, 0, 0, 0, 0, 0, 0]]}):
        d = {**base, "pins": [{**base["pins"][0], **bad}]}
        with pytest.raises(ValueError):
            data.MotionScript.from_dict(d, topo)


def test_script_inputs_start_at_u0():
    u0 = np.array([[0.0, 0, 0, 0.1, 0, 0], [1.0, 0, 0, 0, 0, 0]])
    script = two_hand_script(comb(8, 3, 1))
    u = script.inputs(u0, 10, 0.01)
    assert u.shape == (11, 2, 6)
    np.testing.assert_allclose(u[0], u0, atol=1e-15)
