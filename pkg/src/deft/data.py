"""Trajectory datasets, motion scripts, synthetic generation and the RMSE metric.

A dataset is a directory::

    topology.json    branch layout (see deft.topology)
    trajectory.txt   one record per (frame, branch, vertex)
    inputs.txt       one record per frame: gripper poses and split tag
    params.json      optional ground-truth material parameters

trajectory.txt::

    # deft-trajectory 1
    # dt 0.01
    # topology 3f2a9c01b6de
    # columns frame t branch vertex x y z
    0 0 parent 0 0 0 0
    ...

inputs.txt::

    # deft-inputs 1
    # dt 0.01
    # pins parent:0:hold parent:12:hold
    # columns frame t split x y z rx ry rz [x y z rx ry rz ...]
    0 0 train 0 0 0 0 0 0 0.6 0 0 0 0 0

Floats are written with 17 significant digits, so a save/load round trip
is bit-exact. ``inputs[t]`` is the gripper pose at frame ``t``; the step
from frame ``t`` to ``t+1`` is driven by ``inputs[t+1]``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dynamics import Bdlo, GraspSpec, Pin, Simulator, StepConfig, hold_poses
from .rotations import compose_rotvec
from .topology import BdloTopology, load_topology, pad_layout, save_topology

TRAJ_MAGIC = "# deft-trajectory 1"
INPUT_MAGIC = "# deft-inputs 1"
MOTION_FORMAT = "deft-motion"


class DatasetError(ValueError):
    """Schema violation; the message names the file and line or frame."""


@dataclass(frozen=True, eq=False)
class TrajectoryDataset:
    dt: float
    topo: BdloTopology
    frames: np.ndarray  # (T, B, N, 3) padded
    inputs: np.ndarray  # (T, P, 6)
    pins: tuple = ()
    split: np.ndarray = field(default=None)  # (T,) "train" / "eval"
    params: dict | None = None  # ground truth, if known

    def __post_init__(self):
        layout = pad_layout(self.topo)
        if self.dt <= 0:
            raise DatasetError("dt must be positive")
        if self.frames.shape[1:] != (layout.batch_count, layout.padded_n, 3):
            raise DatasetError(f"frames have shape {self.frames.shape[1:]}, topology needs "
                               f"{(layout.batch_count, layout.padded_n, 3)}")
        if len(self.inputs) != len(self.frames):
            raise DatasetError(f"{len(self.inputs)} input rows for {len(self.frames)} frames")
        if self.split is None:
            object.__setattr__(self, "split", np.array(["train"] * len(self.frames)))

    def __len__(self):
        return len(self.frames)

    @property
    def times(self):
        return self.dt * np.arange(len(self.frames))

    def grasp(self, model: Bdlo) -> GraspSpec:
        state = model.rest_state()
        state.x = self.frames[0].copy()
        return GraspSpec.attach(model, state, self.pins, self.inputs[0] if self.pins else None)

    def with_split(self, train_fraction=0.75) -> "TrajectoryDataset":
        cut = int(round(train_fraction * len(self)))
        tags = np.array(["train"] * cut + ["eval"] * (len(self) - cut))
        return replace(self, split=tags)

    def indices(self, tag):
        return np.flatnonzero(self.split == tag)


# ----------------------------------------------------------------------------
# text formats


def _fmt(v) -> str:
    return format(float(v), ".17g")


def _pin_token(topo, pin: Pin) -> str:
    return f"{topo.branches[pin.branch].id}:{pin.vertex}" + (":hold" if pin.hold_edge else "")


def _parse_pin(topo, token, where) -> Pin:
    parts = token.split(":")
    try:
        return Pin(topo.branch_index(parts[0]), int(parts[1]), len(parts) > 2 and parts[2] == "hold")
    except (IndexError, ValueError) as err:
        raise DatasetError(f"{where}: bad pin {token!r}") from err


def save_dataset(ds: TrajectoryDataset, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    save_topology(ds.topo, path / "topology.json")
    topo = ds.topo
    lines = [TRAJ_MAGIC, f"# dt {_fmt(ds.dt)}", f"# topology {topo.digest()}",
             "# columns frame t branch vertex x y z"]
    for f, frame in enumerate(ds.frames):
        t = _fmt(f * ds.dt)
        for k, b in enumerate(topo.branches):
            for i in range(b.n):
                x, y, z = frame[k, i]
                lines.append(f"{f} {t} {b.id} {i} {_fmt(x)} {_fmt(y)} {_fmt(z)}")
    (path / "trajectory.txt").write_text("\n".join(lines) + "\n")
    lines = [INPUT_MAGIC, f"# dt {_fmt(ds.dt)}", "# pins " + " ".join(_pin_token(topo, p) for p in ds.pins),
             "# columns frame t split " + " ".join(["x y z rx ry rz"] * len(ds.pins))]
    for f, (u, tag) in enumerate(zip(ds.inputs, ds.split)):
        lines.append(" ".join([str(f), _fmt(f * ds.dt), str(tag), *(_fmt(v) for v in np.ravel(u))]))
    (path / "inputs.txt").write_text("\n".join(lines) + "\n")
    if ds.params is not None:
        (path / "params.json").write_text(json.dumps(ds.params, indent=2) + "\n")


def _header(lines, magic, name):
    if not lines or lines[0].strip() != magic:
        raise DatasetError(f"{name}:1: expected header {magic!r}")
    meta = {}
    n = 1
    while n < len(lines) and lines[n].startswith("#"):
        key, _, value = lines[n][1:].strip().partition(" ")
        meta[key] = value
        n += 1
    for key in ("dt", "columns"):
        if key not in meta:
            raise DatasetError(f"{name}: header lacks '# {key}'")
    return meta, n


def load_dataset(path) -> TrajectoryDataset:
    path = Path(path)
    try:
        topo = load_topology(path / "topology.json")
    except FileNotFoundError as err:
        raise DatasetError(f"{path}: missing topology.json") from err
    layout = pad_layout(topo)
    name = "trajectory.txt"
    lines = (path / name).read_text().splitlines()
    meta, start = _header(lines, TRAJ_MAGIC, name)
    dt = float(meta["dt"])
    if "topology" in meta and meta["topology"] != topo.digest():
        raise DatasetError(f"{name}: topology hash {meta['topology']} does not match topology.json "
                           f"({topo.digest()})")
    per_frame = topo.total_vertices
    body = lines[start:]
    if len(body) % per_frame:
        raise DatasetError(f"{name}: {len(body)} records is not a whole number of frames "
                           f"of {per_frame} vertices")
    n_frames = len(body) // per_frame
    frames = np.zeros((n_frames, layout.batch_count, layout.padded_n, 3))
    expected = [(k, b.id, i) for k, b in enumerate(topo.branches) for i in range(b.n)]
    for j, line in enumerate(body):
        f, slot = divmod(j, per_frame)
        k, bid, i = expected[slot]
        parts = line.split()
        lineno = start + j + 1
        if len(parts) != 7:
            raise DatasetError(f"{name}:{lineno}: expected 7 columns, got {len(parts)}")
        if int(parts[0]) != f:
            raise DatasetError(f"{name}:{lineno}: frame {parts[0]} has the wrong vertex count "
                               f"(expected {per_frame} records for frame {f})")
        if parts[2] != bid or int(parts[3]) != i:
            raise DatasetError(f"{name}:{lineno}: frame {f} expected branch {bid} vertex {i}, "
                               f"got {parts[2]} {parts[3]}")
        frames[f, k, i] = [float(v) for v in parts[4:]]
    name = "inputs.txt"
    lines = (path / name).read_text().splitlines()
    imeta, start = _header(lines, INPUT_MAGIC, name)
    if float(imeta["dt"]) != dt:
        raise DatasetError(f"{name}: dt {imeta['dt']} differs from the trajectory's {dt}")
    pins = tuple(_parse_pin(topo, tok, name) for tok in imeta.get("pins", "").split())
    body = lines[start:]
    if len(body) != n_frames:
        raise DatasetError(f"{name}: {len(body)} input rows for {n_frames} frames")
    inputs = np.zeros((n_frames, len(pins), 6))
    split = []
    for f, line in enumerate(body):
        parts = line.split()
        if len(parts) != 3 + 6 * len(pins) or int(parts[0]) != f:
            raise DatasetError(f"{name}:{start + f + 1}: malformed input record for frame {f}")
        split.append(parts[2])
        inputs[f] = np.array([float(v) for v in parts[3:]]).reshape(len(pins), 6)
    params = None
    if (path / "params.json").exists():
        params = json.loads((path / "params.json").read_text())
    return TrajectoryDataset(dt, topo, frames, inputs, pins, np.array(split), params)


# ----------------------------------------------------------------------------
# motion scripts


@dataclass(frozen=True)
class PinMotion:
    """Motion of one gripper relative to its starting pose.

    ``mode`` is ``linear`` or ``smooth`` (cosine-eased) interpolation between
    ``waypoints`` rows ``[t, dx, dy, dz, drx, dry, drz]``, ``sine`` with
    ``amplitude`` (6 values) and ``period`` seconds, or ``sway``, the offset
    ``amplitude (1 - cos(2 pi t / period)) / 2`` that starts at rest and
    never changes sign.
    """

    pin: Pin
    mode: str = "linear"
    waypoints: np.ndarray | None = None
    amplitude: np.ndarray | None = None
    period: float = 1.0

    def offset(self, t: float) -> np.ndarray:
        if self.mode == "sine":
            return np.asarray(self.amplitude, dtype=float) * np.sin(2.0 * np.pi * t / self.period)
        if self.mode == "sway":
            return np.asarray(self.amplitude, dtype=float) * 0.5 * (1.0 - np.cos(2.0 * np.pi * t / self.period))
        w = np.asarray(self.waypoints, dtype=float)
        if t <= w[0, 0]:
            return w[0, 1:].copy()
        if t >= w[-1, 0]:
            return w[-1, 1:].copy()
        j = int(np.searchsorted(w[:, 0], t, side="right")) - 1
        s = (t - w[j, 0]) / (w[j + 1, 0] - w[j, 0])
        if self.mode == "smooth":
            s = 0.5 - 0.5 * np.cos(np.pi * s)
        return (1.0 - s) * w[j, 1:] + s * w[j + 1, 1:]


@dataclass(frozen=True)
class MotionScript:
    pins: tuple  # PinMotion per gripper

    @classmethod
    def from_dict(cls, data: dict, topo: BdloTopology) -> "MotionScript":
        if data.get("format") != MOTION_FORMAT:
            raise ValueError(f"not a motion script (format={data.get('format')!r})")
        out = []
        for j, spec in enumerate(data["pins"]):
            pin = Pin(topo.branch_index(spec["branch"]), int(spec["vertex"]), bool(spec.get("hold_edge", False)))
            mode = spec.get("mode", "linear")
            if mode in ("sine", "sway"):
                amp = np.asarray(spec["amplitude"], dtype=float)
                if amp.shape != (6,):
                    raise ValueError(f"pin {j}: {mode} amplitude needs 6 values")
                out.append(PinMotion(pin, mode, amplitude=amp, period=float(spec.get("period", 1.0))))
            elif mode in ("linear", "smooth"):
                w = np.asarray(spec.get("waypoints", [[0, 0, 0, 0, 0, 0, 0]]), dtype=float)
                if w.ndim != 2 or w.shape[1] != 7 or np.any(np.diff(w[:, 0]) <= 0):
                    raise ValueError(f"pin {j}: waypoints must be rows [t dx dy dz drx dry drz] with increasing t")
                out.append(PinMotion(pin, mode, waypoints=w))
            else:
                raise ValueError(f"pin {j}: unknown interpolation mode {mode!r}")
        return cls(tuple(out))

    @classmethod
    def load(cls, path, topo) -> "MotionScript":
        return cls.from_dict(json.loads(Path(path).read_text()), topo)

    def to_dict(self, topo) -> dict:
        pins = []
        for m in self.pins:
            d = {"branch": topo.branches[m.pin.branch].id, "vertex": m.pin.vertex,
                 "hold_edge": m.pin.hold_edge, "mode": m.mode}
            if m.mode in ("sine", "sway"):
                d.update(amplitude=np.asarray(m.amplitude).tolist(), period=m.period)
            else:
                d["waypoints"] = np.asarray(m.waypoints).tolist()
            pins.append(d)
        return {"format": MOTION_FORMAT, "version": 1, "pins": pins}

    @property
    def grasp_pins(self):
        return tuple(m.pin for m in self.pins)

    def inputs(self, u0, steps: int, dt: float) -> np.ndarray:
        """Gripper poses for frames ``0..steps``; ``u0`` rows are the starting poses."""
        u0 = np.asarray(u0, dtype=float).reshape(len(self.pins), 6)
        out = np.zeros((steps + 1, len(self.pins), 6))
        for f in range(steps + 1):
            for j, m in enumerate(self.pins):
                d = m.offset(f * dt)
                out[f, j, :3] = u0[j, :3] + d[:3]
                out[f, j, 3:] = compose_rotvec(d[3:], u0[j, 3:])
        return out


# ----------------------------------------------------------------------------
# generation and metrics


def counter_noise(seed: int, frame: int, shape, sigma: float) -> np.ndarray:
    """Gaussian noise for one frame from a counter-based stream keyed by ``seed``."""
    gen = np.random.Generator(np.random.Philox(key=seed, counter=[0, 0, 0, frame]))
    return sigma * gen.standard_normal(shape)


def generate_synthetic(model: Bdlo, script: MotionScript, steps: int, cfg: StepConfig = StepConfig(),
                       noise: float = 0.0, seed: int = 0, residual=None, params_record=None,
                       state0=None, keep_reports=False):
    """Roll the simulator out from rest under ``script`` and record every frame.

    ``residual`` (optional) is a true ``(x, v) -> velocity`` term the data
    should contain; ``params_record`` is stored as the dataset's ground truth.
    With ``keep_reports`` the per-step constraint reports are returned too.
    """
    state = model.rest_state() if state0 is None else state0
    grasp = GraspSpec.attach(model, state, script.grasp_pins)
    u = script.inputs(grasp.u0, steps, cfg.dt) if script.pins else np.zeros((steps + 1, 0, 6))
    if residual is not None:
        cfg = replace(cfg, use_residual=True)
    sim = Simulator(model, grasp, cfg, residual)
    states, reports = sim.rollout(state, [row.ravel() for row in u[1:]], keep_reports=True)
    frames = np.stack([s.x for s in states])
    if noise > 0:
        mask = model.layout.mask[..., None]
        frames = np.stack([f + np.where(mask, counter_noise(seed, t, f.shape, noise), 0.0)
                           for t, f in enumerate(frames)])
    ds = TrajectoryDataset(cfg.dt, model.topo, frames, u, script.grasp_pins, None, params_record)
    return (ds, reports) if keep_reports else ds


def rmse(pred, truth, mask=None, horizon=None) -> float:
    """Root mean square of per-vertex Euclidean errors over all vertices and steps."""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if horizon is not None:
        pred, truth = pred[:horizon], truth[:horizon]
    if pred.shape != truth.shape:
        raise ValueError(f"trajectories are misaligned: {pred.shape} vs {truth.shape}")
    err = np.sum((pred - truth) ** 2, axis=-1)
    if mask is not None:
        err = err[..., np.asarray(mask, dtype=bool)]
    return float(np.sqrt(np.mean(err)))
