"""Material identification from trajectories.

The outer problem fits per-branch material scalars to recorded frames by
minimising the RMSE of recursive rollouts over training windows. Each step
of those rollouts solves the inner twist problem with the analytic
gradient. The outer Jacobian is taken by central differences in log space,
and the trust-region least-squares solver of scipy drives the descent.

Parameter file (JSON)::

    {"format": "deft-params", "version": 1,
     "branches": {"parent": {"mass": 0.01, "bend": [0.005, 0.02],
                             "twist": 0.004, "inertia_scale": 1.0}, ...}}
"""

from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from multiprocessing import get_context
from pathlib import Path

import numpy as np
from scipy.optimize import least_squares

from . import rod
from .dynamics import Bdlo, Simulator, SimulationError, StepConfig, replay_states
from .topology import BdloTopology

log = logging.getLogger(__name__)

PARAMS_FORMAT = "deft-params"
FIELDS = ("mass", "bend", "twist", "inertia_scale")
_WIDTH = {"mass": 1, "bend": 2, "twist": 1, "inertia_scale": 1}


def default_materials(topo: BdloTopology, mass=0.01, bend=(0.005, 0.005), twist=0.005, inertia_scale=1.0) -> dict:
    return {b.id: {"mass": float(mass), "bend": [float(v) for v in np.broadcast_to(bend, 2)],
                   "twist": float(twist), "inertia_scale": float(inertia_scale)} for b in topo.branches}


def build_model(topo: BdloTopology, x_rest, materials: dict) -> Bdlo:
    """Model with one set of material scalars per branch."""
    pick = {f: {bid: m[f] for bid, m in materials.items()} for f in FIELDS}
    return Bdlo.from_rest(topo, x_rest, mass=pick["mass"], bend=pick["bend"], twist=pick["twist"],
                          inertia_scale=pick["inertia_scale"])


def save_params(materials: dict, path) -> None:
    Path(path).write_text(json.dumps({"format": PARAMS_FORMAT, "version": 1, "branches": materials}, indent=2) + "\n")


def load_params(path) -> dict:
    data = json.loads(Path(path).read_text())
    if data.get("format") != PARAMS_FORMAT:
        raise ValueError(f"{path}: not a parameter file (format={data.get('format')!r})")
    out = {}
    for bid, m in data["branches"].items():
        missing = [f for f in FIELDS if f not in m]
        if missing:
            raise ValueError(f"{path}: branch {bid!r} lacks {missing}")
        bend = [float(v) for v in np.broadcast_to(m["bend"], 2)]
        vals = [m["mass"], *bend, m["twist"], m["inertia_scale"]]
        if not all(np.isfinite(v) and v > 0 for v in vals):
            raise ValueError(f"{path}: branch {bid!r} has non-positive parameters")
        out[bid] = {"mass": float(m["mass"]), "bend": bend, "twist": float(m["twist"]),
                    "inertia_scale": float(m["inertia_scale"])}
    return out


@dataclass(frozen=True)
class ParamVector:
    """Packing of the free material scalars into a log-space vector.

    ``sharing="branch"`` gives every branch its own values, ``"shared"``
    ties each quantity across branches. Quantities not listed in ``free``
    stay at their base values.
    """

    branch_ids: tuple
    free: tuple = ("bend", "twist")
    sharing: str = "branch"

    def __post_init__(self):
        bad = [f for f in self.free if f not in FIELDS]
        if bad:
            raise ValueError(f"unknown parameter {bad[0]!r}")
        if self.sharing not in ("branch", "shared"):
            raise ValueError(f"unknown sharing mode {self.sharing!r}")

    def _groups(self):
        return [self.branch_ids] if self.sharing == "shared" else [(b,) for b in self.branch_ids]

    def names(self) -> list:
        out = []
        for group in self._groups():
            tag = "*" if self.sharing == "shared" else group[0]
            for f in self.free:
                out += [f"{tag}.{f}"] if _WIDTH[f] == 1 else [f"{tag}.{f}{j + 1}" for j in range(_WIDTH[f])]
        return out

    def pack(self, materials: dict) -> np.ndarray:
        out = []
        for group in self._groups():
            m = materials[group[0]]
            for f in self.free:
                out += list(np.log(np.atleast_1d(np.asarray(m[f], dtype=float))))
        return np.array(out)

    def unpack(self, z, base: dict) -> dict:
        z = np.asarray(z, dtype=float)
        missing = set(self.branch_ids) - set(base)
        if missing:
            raise ValueError(f"base materials lack branches {sorted(missing)}")
        out = {bid: {f: (list(v) if isinstance(v, (list, tuple, np.ndarray)) else v) for f, v in m.items()}
               for bid, m in base.items()}
        pos = 0
        for group in self._groups():
            for f in self.free:
                w = _WIDTH[f]
                vals = np.exp(z[pos:pos + w])
                pos += w
                if vals.size < w:
                    break
                for bid in group:
                    out[bid][f] = [float(v) for v in vals] if w > 1 else float(vals[0])
        if pos != z.size:
            raise ValueError(f"parameter vector has {z.size} entries, layout needs {pos}")
        return out


@dataclass
class FitReport:
    initial_loss: float
    final_loss: float
    history: list  # (evaluation index, loss, materials) for every new best
    iterations: int
    evaluations: int
    converged: bool
    relative_change: dict
    inner_grad_check: list = field(default_factory=list)
    seconds: float = 0.0

    def as_dict(self) -> dict:
        return {"initial_loss": self.initial_loss, "final_loss": self.final_loss, "iterations": self.iterations,
                "evaluations": self.evaluations, "converged": self.converged,
                "relative_change": self.relative_change, "inner_grad_check": self.inner_grad_check,
                "seconds": self.seconds,
                "history": [{"evaluation": i, "loss": l, "params": m} for i, l, m in self.history]}


# ----------------------------------------------------------------------------
# rollout loss


@dataclass(frozen=True, eq=False)
class Problem:
    """Everything needed to score one parameter vector; picklable for worker processes."""

    topo: BdloTopology
    x_rest: np.ndarray
    base: dict
    layout: ParamVector
    cfg: StepConfig
    pins: tuple
    u0: np.ndarray
    frames: np.ndarray
    inputs: np.ndarray
    starts: tuple
    horizon: int
    init_states: tuple
    mask: np.ndarray
    net: object = None  # optional ResidualNet applied inside every rollout

    def simulator(self, materials) -> Simulator:
        from .dynamics import GraspSpec

        model = build_model(self.topo, self.x_rest, materials)
        state = model.rest_state()
        state.x = self.frames[0].copy()
        grasp = GraspSpec.attach(model, state, self.pins, self.u0 if self.pins else None)
        if self.net is None:
            return Simulator(model, grasp, self.cfg)
        from .residual import ResidualField

        return Simulator(model, grasp, replace(self.cfg, use_residual=True),
                         ResidualField(self.net, self.topo, model.params))

    def residuals(self, z, fail_value=1e3) -> np.ndarray:
        """Per-vertex position errors over every window, scaled so that
        ``sqrt(mean(r**2) * 3)`` is the rollout RMSE. A failed rollout
        fills the vector with ``fail_value``."""
        sim = self.simulator(self.layout.unpack(z, self.base))
        out = []
        for s, state in zip(self.starts, self.init_states):
            inputs = [self.inputs[t].ravel() for t in range(s + 1, s + self.horizon + 1)]
            try:
                states = sim.rollout(state, inputs)
            except SimulationError as err:
                log.debug("rollout failed at window %d: %s", s, err)
                return np.full(self.size, fail_value)
            pred = np.stack([st.x for st in states[1:]])
            out.append((pred - self.frames[s + 1:s + self.horizon + 1])[:, self.mask])
        return np.concatenate([o.ravel() for o in out])

    @property
    def size(self) -> int:
        return len(self.starts) * self.horizon * int(self.mask.sum()) * 3


def _residuals(args):
    problem, z = args
    return problem.residuals(z)


def make_problem(dataset, base: dict, layout: ParamVector, cfg: StepConfig = StepConfig(), horizon=100,
                 starts=None, split="train", net=None) -> Problem:
    """Cut ``split`` frames into windows of ``horizon`` steps and seed their initial states."""
    idx = dataset.indices(split)
    if starts is None:
        lo, hi = int(idx.min()), int(idx.max())
        starts = tuple(range(lo, hi - horizon + 1, horizon))
    starts = tuple(int(s) for s in starts)
    if not starts:
        raise ValueError(f"no {horizon}-step window fits in the {split} split")
    for s in starts:
        if s + horizon >= len(dataset):
            raise ValueError(f"window starting at {s} runs past the last frame")
    x_rest = dataset.frames[0]
    model = build_model(dataset.topo, x_rest, base)
    from .dynamics import GraspSpec

    state = model.rest_state()
    state.x = x_rest.copy()
    grasp = GraspSpec.attach(model, state, dataset.pins, dataset.inputs[0] if dataset.pins else None)
    sim = Simulator(model, grasp, cfg)
    wanted = set(starts)
    init = {t: st for t, st in replay_states(sim, dataset.frames, dataset.inputs, start=min(starts), stop=max(starts) + 1)
            if t in wanted}
    return Problem(dataset.topo, x_rest, base, layout, cfg, tuple(dataset.pins), grasp.u0, dataset.frames,
                   dataset.inputs, starts, int(horizon), tuple(init[s] for s in starts), model.layout.mask, net)


def rollout_loss(problem: Problem, z) -> float:
    """RMSE (m) of the recursive rollouts over all windows."""
    r = problem.residuals(z)
    return float(np.sqrt(3.0 * np.mean(r**2)))


def window_rmse(dataset, materials: dict, cfg: StepConfig = StepConfig(), horizon=100, split="eval",
                starts=None, net=None) -> float:
    """Rollout RMSE (m) of fixed materials over ``split`` windows; ``inf`` if a rollout fails."""
    layout = ParamVector(tuple(materials), free=())
    problem = make_problem(dataset, materials, layout, cfg, horizon, starts, split, net)
    r = problem.residuals(np.zeros(0), fail_value=np.inf)
    return float(np.sqrt(3.0 * np.mean(r**2)))


def _workers(workers):
    if workers is None:
        workers = int(os.environ.get("DEFT_WORKERS", "1"))
    return max(1, workers)


def fd_jacobian(problem: Problem, z, step=1e-3, workers=None):
    """Central-difference Jacobian of the residual vector in log-parameter space."""
    z = np.asarray(z, dtype=float)
    probes = []
    for j in range(z.size):
        for sgn in (1.0, -1.0):
            zz = z.copy()
            zz[j] += sgn * step
            probes.append((problem, zz))
    n = _workers(workers)
    if n > 1:
        with ProcessPoolExecutor(n, mp_context=get_context("fork")) as pool:
            outs = list(pool.map(_residuals, probes))
    else:
        outs = [_residuals(p) for p in probes]
    cols = [(outs[2 * j] - outs[2 * j + 1]) / (2.0 * step) for j in range(z.size)]
    return np.stack(cols, axis=1)


def inner_gradient_check(problem: Problem, z) -> float:
    """Max relative gap between analytic and numeric twist gradients at the first window state."""
    sim = problem.simulator(problem.layout.unpack(z, problem.base))
    state = problem.init_states[0]
    x = state.x
    em = sim.edge_mask
    bishop = rod.bishop_frames(x, sim.model.seed(x), em)
    rng = np.random.default_rng(0)
    theta = np.where(em, 0.1 * rng.standard_normal(em.shape), 0.0)
    ev = rod.evaluate(x, theta, edge_mask=em, bishop=bishop)
    a = rod.theta_gradient(ev, theta, sim.model.params)
    n = rod.numeric_theta_gradient(x, theta, sim.model.params, bishop, em)
    return float(np.max(np.abs(a - n)) / max(np.max(np.abs(n)), 1e-300))


def identify(problem: Problem, z0=None, tol=1e-6, patience=10, max_iters=50, fd_step=1e-3,
             workers=None):
    """Fit the free parameters; returns ``(materials, FitReport)`` with the best materials seen."""
    t_start = time.perf_counter()
    z0 = problem.layout.pack(problem.base) if z0 is None else np.asarray(z0, dtype=float)
    best = {"loss": np.inf, "z": z0.copy()}
    history = []
    evals = [0]
    checks = []
    stall = [0]

    def fun(z):
        r = problem.residuals(z)
        evals[0] += 1
        loss = float(np.sqrt(3.0 * np.mean(r**2)))
        if loss < best["loss"]:
            improved = best["loss"] - loss > tol * best["loss"] if np.isfinite(best["loss"]) else True
            stall[0] = 0 if improved else stall[0] + 1
            best.update(loss=loss, z=np.array(z, copy=True))
            history.append((evals[0], loss, problem.layout.unpack(z, problem.base)))
        else:
            stall[0] += 1
        if stall[0] >= patience:
            raise _Stalled
        return r

    def jac(z):
        checks.append(inner_gradient_check(problem, z))
        return fd_jacobian(problem, z, fd_step, workers)

    initial = rollout_loss(problem, z0)
    converged = True
    iterations = 0
    try:
        # solve for the offset from z0: the trust region then starts at radius 1, a factor e per parameter,
        # instead of |z0|, which for log-parameters near -5 lets the first steps fly off by e^10
        res = least_squares(lambda d: fun(z0 + d), np.zeros_like(z0), jac=lambda d: jac(z0 + d), method="trf",
                            ftol=tol, xtol=1e-8, gtol=1e-10, max_nfev=max_iters, x_scale=1.0)
        converged = bool(res.status > 0)
        iterations = int(res.njev)
    except _Stalled:
        converged = False
        iterations = len(checks)
    final = best["loss"] if np.isfinite(best["loss"]) else initial
    z_best = best["z"] if final <= initial else z0
    materials = problem.layout.unpack(z_best, problem.base)
    change = {name: float(np.exp(a - b) - 1.0)
              for name, a, b in zip(problem.layout.names(), z_best, z0)}
    report = FitReport(initial, min(final, initial), history, iterations, evals[0], converged, change, checks,
                       time.perf_counter() - t_start)
    return materials, report


class _Stalled(Exception):
    pass
