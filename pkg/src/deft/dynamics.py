"""Time stepping of a branched rod under gripper inputs.

One step: pin grasped vertices to their commanded poses, rebuild frames,
relax the twist angles, integrate with semi-implicit Euler (plus an optional
learned velocity residual), project onto the constraint set and recover the
velocity from the position change.

All state arrays use the padded layout of :func:`deft.topology.pad_layout`:
positions ``(B, N, 3)`` with the parent in row 0.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import rod
from .constraints import ConstraintReport, ConstraintSettings, ConstraintSystem, OrientationTracker, enforce
from .rotations import compose_rotvec, rotate, twist_angle
from .topology import BdloTopology, pad_layout

log = logging.getLogger(__name__)


class SimulationError(RuntimeError):
    def __init__(self, message, step=None, vertex=None):
        super().__init__(message)
        self.step = step
        self.vertex = vertex


# ----------------------------------------------------------------------------
# material model


def _per_branch(value, topo: BdloTopology, name: str):
    if isinstance(value, dict):
        missing = [b.id for b in topo.branches if b.id not in value]
        if missing:
            raise KeyError(f"{name} missing for branches {missing}")
        return [value[b.id] for b in topo.branches]
    return [value] * topo.branch_count


def _as_bend(b):
    b = np.asarray(b, dtype=float)
    if b.ndim == 0:
        return b * np.eye(2)
    if b.shape == (2,):
        return np.diag(b)
    return b


@dataclass(frozen=True, eq=False)
class Bdlo:
    """Static description of one branched rod: topology, rest shape, materials."""

    topo: BdloTopology
    x_rest: np.ndarray  # (B, N, 3) padded
    params: rod.MaterialParams
    seed_tangent: np.ndarray  # (B, 3) first-edge reference tangent
    seed_axis: np.ndarray  # (B, 3) first-edge reference Bishop axis

    @property
    def layout(self):
        return pad_layout(self.topo)

    @property
    def edge_mask(self):
        return self.layout.edge_mask

    @classmethod
    def from_rest(cls, topo: BdloTopology, x_rest, mass=0.01, bend=0.01, twist=0.01,
                  inertia_scale=1.0) -> "Bdlo":
        """Build from a rest configuration.

        ``x_rest`` is either a padded ``(B, N, 3)`` array or a list with one
        ``(n_k, 3)`` array per branch. ``mass`` (per vertex, kg), ``bend``
        (scalar, principal pair or 2x2) and ``twist`` may be given per branch id
        as a dict. Edge inertia follows the uniform-rod estimate
        ``m_edge l^2 / 12`` scaled by ``inertia_scale``.
        """
        layout = pad_layout(topo)
        x = _pad_positions(topo, x_rest)
        B, N = layout.batch_count, layout.padded_n
        em = layout.edge_mask
        seed_t = np.zeros((B, 3))
        seed_b = np.zeros((B, 3))
        for k in range(B):
            e0 = x[k, 1] - x[k, 0]
            seed_t[k] = e0 / np.linalg.norm(e0)
            seed_b[k] = rod.default_seed(seed_t[k])
        params = material_params(topo, x, seed_b, mass, bend, twist, inertia_scale)
        return cls(topo, x, params, seed_t, seed_b)

    def with_params(self, params: rod.MaterialParams) -> "Bdlo":
        return replace(self, params=params)

    def seed(self, x):
        """First-edge Bishop axes for positions x."""
        t0 = x[:, 1] - x[:, 0]
        t0 = t0 / np.linalg.norm(t0, axis=-1, keepdims=True)
        return rod.transport_seed(self.seed_axis, self.seed_tangent, t0)

    def unpad(self, x):
        return [x[k, :b.n].copy() for k, b in enumerate(self.topo.branches)]

    def rest_state(self) -> "BdloState":
        x = self.x_rest.copy()
        theta = np.zeros(x.shape[:2])[:, :-1]
        return BdloState(x, np.zeros_like(x), theta, OrientationTracker.start(x, self.edge_mask))


def material_params(topo, x, seed_axis, mass, bend, twist, inertia_scale=1.0) -> rod.MaterialParams:
    layout = pad_layout(topo)
    B, N = layout.batch_count, layout.padded_n
    em = layout.edge_mask
    mass_m = np.zeros((B, N, 3, 3))
    bend_m = np.zeros((B, N, 2, 2))
    twist_v = np.zeros((B, N - 1))
    for k, (m, b, tw) in enumerate(zip(_per_branch(mass, topo, "mass"), _per_branch(bend, topo, "bend"),
                                       _per_branch(twist, topo, "twist"))):
        n = layout.lengths[k]
        m = np.asarray(m, dtype=float)
        mass_m[k, :n] = m * np.eye(3) if m.ndim == 0 else m
        bend_m[k, :n] = _as_bend(b)
        twist_v[k, :n - 1] = tw
    # padded slots keep a unit mass so inverses stay finite; nothing reads them
    mass_m[~layout.mask] = np.eye(3)
    bend_m[~layout.mask] = np.eye(2)
    e = rod._masked_edges(x, em)
    rest_lengths = np.where(em, np.linalg.norm(e, axis=-1), 0.0)
    m_edge = 0.5 * (np.trace(mass_m[:, :-1], axis1=-2, axis2=-1)
                    + np.trace(mass_m[:, 1:], axis1=-2, axis2=-1)) / 3.0
    scale = np.array(_per_branch(inertia_scale, topo, "inertia_scale"), dtype=float)[:, None]
    inertia = (scale * m_edge * np.where(em, rest_lengths, 1.0) ** 2 / 12.0)[..., None, None] * np.eye(3)
    omega_bar = rod.rest_curvature(x, seed_axis, em)
    return rod.MaterialParams(mass_m, inertia, bend_m, twist_v, omega_bar, rest_lengths)


def _pad_positions(topo, x):
    layout = pad_layout(topo)
    if isinstance(x, np.ndarray) and x.ndim == 3:
        if x.shape[:2] != (layout.batch_count, layout.padded_n):
            raise ValueError(f"padded positions must have shape {(layout.batch_count, layout.padded_n, 3)}")
        out = np.where(layout.mask[..., None], x, 0.0)
        return out.astype(float)
    out = np.zeros((layout.batch_count, layout.padded_n, 3))
    if len(x) != layout.batch_count:
        raise ValueError("one position array per branch expected")
    for k, (b, xk) in enumerate(zip(topo.branches, x)):
        xk = np.asarray(xk, dtype=float)
        if xk.shape != (b.n, 3):
            raise ValueError(f"branch {b.id!r}: expected {(b.n, 3)} positions, got {xk.shape}")
        out[k, :b.n] = xk
    return out


def rest_shape(topo: BdloTopology, segment=0.05, child_direction=(0.0, -1.0, 0.0), origin=(0.0, 0.0, 0.0)):
    """Straight parent along +x with straight children leaving each junction.

    Child vertex 0 coincides with its parent junction vertex.
    """
    direction = np.asarray(child_direction, dtype=float)
    direction = direction / np.linalg.norm(direction)
    out = []
    parent = np.asarray(origin, dtype=float) + segment * np.arange(topo.parent.n)[:, None] * np.array([1.0, 0.0, 0.0])
    out.append(parent)
    for c in topo.children:
        base = parent[c.junction_parent_vertex]
        out.append(base + segment * np.arange(c.n)[:, None] * direction)
    return out


# ----------------------------------------------------------------------------
# state, grasp and configuration


@dataclass
class BdloState:
    x: np.ndarray
    v: np.ndarray
    theta: np.ndarray
    tracker: OrientationTracker

    def copy(self) -> "BdloState":
        return BdloState(self.x.copy(), self.v.copy(), self.theta.copy(), self.tracker.copy())


@dataclass(frozen=True)
class Pin:
    """A grasped vertex; ``hold_edge`` also fixes the adjacent edge's direction and twist."""

    branch: int
    vertex: int
    hold_edge: bool = False


@dataclass(frozen=True, eq=False)
class GraspSpec:
    """Gripper bindings. An input ``u`` holds one pose row ``[x y z rx ry rz]``
    per pin (position plus angle-axis orientation), so two pins give the usual
    12 scalars.
    """

    pins: tuple
    u0: np.ndarray  # (P, 6) poses at attachment time
    offsets: np.ndarray  # (P, 3) held neighbour in gripper coordinates
    theta0: np.ndarray  # (P,) twist of the held edge at attachment
    held: tuple = ()  # (neighbour vertex, edge) per pin, None when not holding

    @classmethod
    def attach(cls, model: Bdlo, state: BdloState, pins, u0=None) -> "GraspSpec":
        pins = tuple(pins)
        layout = model.layout
        for p in pins:
            if not (0 <= p.branch < layout.batch_count and 0 <= p.vertex < layout.lengths[p.branch]):
                raise ValueError(f"pin references nonexistent vertex {p}")
        if u0 is None:
            u0 = np.array([[*state.x[p.branch, p.vertex], 0.0, 0.0, 0.0] for p in pins]).reshape(len(pins), 6)
        u0 = np.asarray(u0, dtype=float).reshape(len(pins), 6)
        offsets = np.zeros((len(pins), 3))
        theta0 = np.zeros(len(pins))
        held = []
        for j, p in enumerate(pins):
            if p.hold_edge:
                nb, edge = _held(p, layout.lengths[p.branch])
                world = state.x[p.branch, nb] - state.x[p.branch, p.vertex]
                offsets[j] = rotate(-u0[j, 3:], world)
                theta0[j] = state.theta[p.branch, edge]
                held.append((nb, edge))
            else:
                held.append(None)
        return cls(pins, u0, offsets, theta0, tuple(held))

    def decode(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if u.size != 6 * len(self.pins):
            raise ValueError(f"input must hold {6 * len(self.pins)} scalars, got {u.size}")
        return u.reshape(len(self.pins), 6)

    def targets(self, u):
        """Kinematic vertex targets ``[(row, vertex, position)]`` and clamped twists ``[(row, edge, theta)]``."""
        poses = self.decode(u)
        verts, twists = [], []
        for j, p in enumerate(self.pins):
            verts.append((p.branch, p.vertex, poses[j, :3]))
            if self.held[j] is not None:
                nb, edge = self.held[j]
                nb_pos = poses[j, :3] + rotate(poses[j, 3:], self.offsets[j])
                verts.append((p.branch, nb, nb_pos))
                rel = compose_rotvec(poses[j, 3:], -self.u0[j, 3:])
                axis = nb_pos - poses[j, :3] if nb > p.vertex else poses[j, :3] - nb_pos
                axis = axis / np.linalg.norm(axis)
                twists.append((p.branch, edge, self.theta0[j] + float(twist_angle(rel, axis))))
        return verts, twists

    def kinematic_mask(self, shape):
        mask = np.zeros(shape, dtype=bool)
        for p, h in zip(self.pins, self.held):
            mask[p.branch, p.vertex] = True
            if h is not None:
                mask[p.branch, h[0]] = True
        return mask


def _held(pin: Pin, n):
    """Neighbour vertex and edge index held together with a pinned vertex."""
    if pin.vertex == n - 1:
        return pin.vertex - 1, pin.vertex - 1
    return pin.vertex + 1, pin.vertex


def no_grasp(model: Bdlo) -> GraspSpec:
    return GraspSpec((), np.zeros((0, 6)), np.zeros((0, 3)), np.zeros(0))


def hold_poses(state: BdloState, grasp: GraspSpec) -> np.ndarray:
    """Input that keeps every pin exactly where it is now."""
    return np.concatenate([np.r_[state.x[p.branch, p.vertex], grasp.u0[j, 3:]]
                           for j, p in enumerate(grasp.pins)]) if grasp.pins else np.zeros(0)


@dataclass(frozen=True)
class StepConfig:
    dt: float = 0.01
    gravity: tuple = (0.0, 0.0, -9.81)
    use_residual: bool = False
    constraints: ConstraintSettings = field(default_factory=ConstraintSettings)
    damping: float = 1.0
    theta_tol: float = 1e-8
    theta_max_iters: int = 100
    batched: bool = True
    raise_on_nonconvergence: bool = False

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("time step must be positive")
        if self.constraints.kappa <= 0:
            raise ValueError("constraint tolerance must be positive")
        if self.constraints.eps < 0:
            raise ValueError("orientation slack must be non-negative")
        if not 0 <= self.constraints.min_sweeps <= self.constraints.max_sweeps:
            raise ValueError("need 0 <= min_sweeps <= max_sweeps")


# ----------------------------------------------------------------------------
# stepping


def integrate(x, v, force, inv_mass, dt, gravity=(0.0, 0.0, 0.0), residual=None, kinematic=None):
    """Semi-implicit Euler: velocity from forces first, positions from the new velocity.

    ``residual`` is an extra velocity added inside the position update only.
    Returns ``(x_next, v_next)``; kinematic vertices keep their position and
    get zero velocity.
    """
    force = np.asarray(force, dtype=float)
    bad = ~np.isfinite(force).all(axis=-1)
    if np.any(bad):
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise SimulationError(f"non-finite force at vertex {idx}", vertex=idx)
    acc = np.einsum("...ij,...j->...i", inv_mass, force) + np.asarray(gravity, dtype=float)
    v_next = v + dt * acc
    if kinematic is not None:
        v_next = np.where(kinematic[..., None], 0.0, v_next)
    step_v = v_next if residual is None else v_next + residual
    if kinematic is not None:
        step_v = np.where(kinematic[..., None], 0.0, step_v)
    return x + dt * step_v, v_next


@dataclass
class StepResult:
    state: BdloState
    report: ConstraintReport
    theta_iters: int


class Simulator:
    """Bound model + grasp + configuration; advances :class:`BdloState`."""

    def __init__(self, model: Bdlo, grasp: GraspSpec | None = None, cfg: StepConfig = StepConfig(),
                 residual=None):
        self.model = model
        self.grasp = grasp if grasp is not None else no_grasp(model)
        self.cfg = cfg
        self.residual = residual
        layout = model.layout
        self.layout = layout
        self.edge_mask = layout.edge_mask
        self.kinematic = self.grasp.kinematic_mask(layout.mask.shape)
        p = model.params
        inv_mass = np.linalg.inv(p.mass)
        inv_mass[self.kinematic] = 0.0
        inv_mass[~layout.mask] = 0.0
        inv_inertia = np.linalg.inv(p.inertia)
        frozen_edge = self.kinematic[:, :-1] | self.kinematic[:, 1:] | ~self.edge_mask
        inv_inertia[frozen_edge] = 0.0
        self.inv_mass = inv_mass
        self.inv_inertia = inv_inertia
        self.system = ConstraintSystem.build(model.topo, layout, inv_mass, inv_inertia, p.rest_lengths)
        self.gravity = np.where(layout.mask[..., None] & ~self.kinematic[..., None],
                                np.asarray(cfg.gravity, dtype=float), 0.0)
        free = self.edge_mask.copy()
        free[:, 0] = False  # twist gauge on each branch's first edge
        self.free_base = free

    # -- pieces of one step ---------------------------------------------------

    def apply_grasp(self, state: BdloState, u):
        x = state.x.copy()
        theta = state.theta.copy()
        free = self.free_base.copy()
        if self.grasp.pins:
            verts, twists = self.grasp.targets(u)
            for r, k, pos in verts:
                x[r, k] = pos
            for r, e, th in twists:
                theta[r, e] = th
                free[r, e] = False
        return x, theta, free

    def _relax_and_force(self, x, theta, free):
        model, cfg = self.model, self.cfg
        seed = model.seed(x)
        if cfg.batched:
            em = self.edge_mask
            bishop = rod.bishop_frames(x, seed, em)
            theta, iters = rod.optimize_theta(x, theta, model.params, free=free, edge_mask=em, bishop=bishop,
                                              tol=cfg.theta_tol, max_iters=cfg.theta_max_iters)
            ev = rod.evaluate(x, theta, edge_mask=em, bishop=bishop)
            grad = rod.energy_position_gradient(ev, model.params, model.seed_tangent)
            return theta, grad, iters
        grad = np.zeros_like(x)
        theta = theta.copy()
        iters = 0
        for k, b in enumerate(model.topo.branches):
            n = b.n
            pk = model.params.branch(k, n)
            xk = x[k, :n]
            bishop = rod.bishop_frames(xk, seed[k])
            th, it = rod.optimize_theta(xk, theta[k, :n - 1], pk, free=free[k, :n - 1], bishop=bishop,
                                        tol=cfg.theta_tol, max_iters=cfg.theta_max_iters)
            ev = rod.evaluate(xk, th, bishop=bishop)
            grad[k, :n] = rod.energy_position_gradient(ev, pk, model.seed_tangent[k])
            theta[k, :n - 1] = th
            iters = max(iters, it)
        return theta, grad, iters

    def step(self, state: BdloState, u=None, use_residual: bool | None = None) -> StepResult:
        cfg = self.cfg
        use_residual = cfg.use_residual if use_residual is None else use_residual
        if u is None:
            u = hold_poses(state, self.grasp)
        x, theta, free = self.apply_grasp(state, u)
        theta, grad, iters = self._relax_and_force(x, theta, free)
        residual = None
        if use_residual and self.residual is not None:
            residual = self.residual(state.x, state.v)
            residual = np.where(self.layout.mask[..., None], residual, 0.0)
        x_new, _ = integrate(x, state.v, -grad, self.inv_mass, cfg.dt, self.gravity, residual, self.kinematic)
        x_new = np.where(self.layout.mask[..., None], x_new, 0.0)
        tracker = state.tracker.copy()
        x_new, tracker, report = enforce(x_new, self.system, tracker, cfg.constraints)
        tracker.sync(x_new, self.edge_mask)
        if not report.converged:
            msg = f"constraint projection did not converge after {report.sweeps_used} sweeps"
            if cfg.raise_on_nonconvergence:
                raise SimulationError(msg)
            log.debug(msg)
        v_new = cfg.damping * (x_new - state.x) / cfg.dt
        v_new = np.where(self.layout.mask[..., None], v_new, 0.0)
        if not np.all(np.isfinite(x_new)):
            raise SimulationError("simulation produced non-finite positions")
        return StepResult(BdloState(x_new, v_new, theta, tracker), report, iters)

    def rollout(self, state0: BdloState, inputs, keep_reports=False):
        """Recursive prediction over ``len(inputs)`` steps; returns every state."""
        states = [state0]
        reports = []
        state = state0
        for t, u in enumerate(inputs):
            try:
                res = self.step(state, u)
            except (SimulationError, rod.GeometryError, rod.ConvergenceError, FloatingPointError) as err:
                raise SimulationError(f"step {t}: {err}", step=t) from err
            state = res.state
            states.append(state)
            reports.append(res.report)
        return (states, reports) if keep_reports else states


def state_from_frames(model: Bdlo, x_now, x_prev=None, dt=0.01, theta=None, tracker=None) -> BdloState:
    """Simulator state at a recorded frame; velocity by backward difference (zero without a previous frame)."""
    x_now = _pad_positions(model.topo, x_now)
    v = np.zeros_like(x_now) if x_prev is None else (x_now - _pad_positions(model.topo, x_prev)) / dt
    if theta is None:
        theta = np.zeros(x_now.shape[:2])[:, :-1]
    if tracker is None:
        tracker = OrientationTracker.start(model.x_rest, model.edge_mask)
    tracker = tracker.copy()
    tracker.sync(x_now, model.edge_mask)
    return BdloState(x_now, v, np.array(theta, dtype=float), tracker)


def replay_states(sim: Simulator, frames, inputs=None, start=0, stop=None):
    """Yield ``(t, state)`` reconstructed from recorded frames ``start..stop-1``.

    The orientation tracker is carried from the rest shape through every
    earlier frame. Twist angles are relaxed at each frame with the grippers
    at ``inputs[t]`` (the pose at frame t) and carried forward as the next
    warm start, so twist histories follow the same branch of solutions as a
    continuous rollout.
    """
    stop = len(frames) if stop is None else stop
    tracker = OrientationTracker.start(sim.model.x_rest, sim.edge_mask)
    theta = None
    for t in range(stop):
        prev = frames[t - 1] if t > 0 else None
        state = state_from_frames(sim.model, frames[t], prev, sim.cfg.dt, theta, tracker)
        tracker = state.tracker
        if t > 0:
            u = hold_poses(state, sim.grasp) if inputs is None else np.ravel(inputs[t])
            x, th, free = sim.apply_grasp(state, u)
            theta, _, _ = sim._relax_and_force(x, th, free)
            state.theta = theta
        if t >= start:
            yield t, state


def deft_step(state: BdloState, u, model: Bdlo, grasp: GraspSpec, cfg: StepConfig = StepConfig(),
              residual=None) -> BdloState:
    return Simulator(model, grasp, cfg, residual).step(state, u).state


def rollout(state0: BdloState, inputs, model: Bdlo, grasp: GraspSpec, cfg: StepConfig = StepConfig(),
            residual=None):
    return Simulator(model, grasp, cfg, residual).rollout(state0, inputs)


def positions(states) -> np.ndarray:
    return np.stack([s.x for s in states])
