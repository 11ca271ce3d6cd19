"""Reusable synthetic scenarios for tests, demos, benchmarks and the CLI.

Every scenario is a small desk-scale BDLO (5 cm segments, gram masses) in
its horizontal rest shape: parent along +x, children along -y, gravity -z.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import data, dynamics as dy, sysid
from .constraints import ConstraintSettings
from .topology import BdloTopology, BranchSpec, build_topology

# kappa tuned to desk scale: 1e-6 m^2 is 1 mm of stretch, 4e-3 rad^2 about 3.6 deg of junction slack
DESK_CONSTRAINTS = ConstraintSettings(kappa=1e-6, kappa_orient=4e-3)
DESK_CONFIG = dy.StepConfig(constraints=DESK_CONSTRAINTS)
# identification: a sweep floor above the ~25 these motions need keeps the rollout loss smooth
# in the parameters, so finite-difference Jacobians see no sweep-count kinks
SMOOTH_CONFIG = dy.StepConfig(constraints=replace(DESK_CONSTRAINTS, min_sweeps=30))

GROUND_TRUTH = {
    "parent": (0.004, 0.012, 0.003),
    "a": (0.003, 0.009, 0.002),
    "b": (0.005, 0.010, 0.004),
}


def comb(parent_n=20, child_n=6, children=2) -> BdloTopology:
    """Parent with ``children`` evenly spaced children named c1, c2, ..."""
    if children > parent_n - 2:
        raise ValueError(f"a parent with {parent_n} vertices has room for {parent_n - 2} children")
    slots = np.linspace(1, parent_n - 2, children + 2)[1:-1] if children else []
    at = sorted({int(round(s)) for s in slots})
    if len(at) != children:
        raise ValueError(f"cannot place {children} children on {parent_n} vertices")
    specs = [BranchSpec("parent", parent_n)]
    specs += [BranchSpec(f"c{k + 1}", child_n, "child", v) for k, v in enumerate(at)]
    return build_topology(specs)


def anisotropic_materials(topo: BdloTopology) -> dict:
    """Ground-truth materials with unequal principal bending stiffnesses (twist is identifiable)."""
    out = sysid.default_materials(topo)
    for bid, (b1, b2, tw) in GROUND_TRUTH.items():
        if bid in out:
            out[bid].update(bend=[b1, b2], twist=tw)
    return out


def scaled(materials: dict, factor=2.0, fields=("bend", "twist")) -> dict:
    """Copy of ``materials`` with the listed fields multiplied by ``factor``."""
    out = {}
    for bid, m in materials.items():
        m = dict(m)
        for f in fields:
            m[f] = [factor * v for v in m[f]] if isinstance(m[f], list) else factor * m[f]
        out[bid] = m
    return out


def two_hand_script(topo: BdloTopology, amplitude=((0.10, 0, 0.06, 1.2, 0, 0), (-0.10, 0.05, 0, -0.8, 0.3, 0)),
                    period=(1.3, 0.9)) -> data.MotionScript:
    """Both parent ends gripped (edge held) and swayed, twist included.

    The rest shape is straight, so the grippers only ever move toward each
    other (positive x amplitude on the first, negative on the last);
    pulling a taut rod apart would make inextensibility infeasible.
    """
    last = topo.parent.n - 1
    return data.MotionScript.from_dict({"format": data.MOTION_FORMAT, "pins": [
        {"branch": topo.parent.id, "vertex": 0, "hold_edge": True, "mode": "sway",
         "amplitude": list(amplitude[0]), "period": period[0]},
        {"branch": topo.parent.id, "vertex": last, "hold_edge": True, "mode": "sway",
         "amplitude": list(amplitude[1]), "period": period[1]}]}, topo)


class LinearDrag:
    """A velocity residual ``-c v`` standing in for unmodelled air and internal damping."""

    def __init__(self, c):
        self.c = float(c)

    def __call__(self, x, v):
        return -self.c * v


@dataclass
class Scenario:
    topo: BdloTopology
    truth: dict  # ground-truth materials
    initial: dict  # perturbed starting guess
    cfg: dy.StepConfig
    script: data.MotionScript
    dataset: data.TrajectoryDataset


def identification_benchmark(steps=200) -> Scenario:
    """Parent of 10 with two 4-vertex children, both ends swept; data from the physics alone."""
    topo = build_topology([BranchSpec("parent", 10), BranchSpec("a", 4, "child", 3), BranchSpec("b", 4, "child", 6)])
    truth = anisotropic_materials(topo)
    model = sysid.build_model(topo, dy.rest_shape(topo), truth)
    script = two_hand_script(topo)
    ds = data.generate_synthetic(model, script, steps, SMOOTH_CONFIG, params_record=truth)
    return Scenario(topo, truth, scaled(truth), SMOOTH_CONFIG, script, ds)


def junction_benchmark(steps=500, drag=0.2, noise=0.0, seed=0) -> Scenario:
    """Two cantilevered children on a swaying parent, recorded with a planted drag residual.

    The children stick out sideways, so they stay up only through the
    junction constraints: without orientation they hinge down, without
    attachment they fall, without inextensibility everything stretches.
    Split 75/25 into train/eval.
    """
    topo = build_topology([BranchSpec("parent", 12), BranchSpec("a", 5, "child", 4), BranchSpec("b", 5, "child", 8)])
    truth = anisotropic_materials(topo)
    model = sysid.build_model(topo, dy.rest_shape(topo), truth)
    script = two_hand_script(topo, amplitude=((0.06, 0, 0.04, 0.6, 0, 0), (-0.06, 0.03, 0, -0.4, 0.2, 0)),
                             period=(1.7, 1.1))
    ds = data.generate_synthetic(model, script, steps, DESK_CONFIG, noise=noise, seed=seed,
                                 residual=LinearDrag(drag) if drag else None, params_record=truth)
    return Scenario(topo, truth, scaled(truth), DESK_CONFIG, script, ds.with_split(0.75))


ABLATIONS = ("no-residual", "no-sysid", "no-orient", "no-attach", "no-inext")


def ablated(cfg: dy.StepConfig, name: str) -> dy.StepConfig:
    """Step configuration with one constraint class switched off (others pass through)."""
    flag = {"no-orient": "orientation", "no-attach": "attachment", "no-inext": "inextensibility"}.get(name)
    if flag is None:
        return cfg
    return replace(cfg, constraints=replace(cfg.constraints, **{flag: False}))


def held_model(topo: BdloTopology, materials=None, hold_edge=True):
    """Model in its rest shape with both parent ends gripped; returns ``(model, grasp, state0)``."""
    materials = sysid.default_materials(topo) if materials is None else materials
    model = sysid.build_model(topo, dy.rest_shape(topo), materials)
    state = model.rest_state()
    last = topo.parent.n - 1
    grasp = dy.GraspSpec.attach(model, state, [dy.Pin(0, 0, hold_edge), dy.Pin(0, last, hold_edge)])
    return model, grasp, state


class ConstantBias:
    """A velocity residual equal to the same vector ``b`` at every real vertex."""

    def __init__(self, b, mask):
        self.b = np.asarray(b, dtype=float)
        self.mask = mask

    def __call__(self, x, v):
        return np.where(self.mask[..., None], self.b, 0.0)


def planted_bias(steps=100, bias=(0.02, -0.01, 0.015)):
    """Free-falling two-child BDLO whose recorded motion carries a constant velocity bias.

    Returns ``(simulator, dataset, b)``; the simulator is the pure-physics
    model the residual is trained against.
    """
    topo = build_topology([BranchSpec("parent", 10), BranchSpec("a", 4, "child", 3), BranchSpec("b", 4, "child", 6)])
    model = sysid.build_model(topo, dy.rest_shape(topo), anisotropic_materials(topo))
    script = data.MotionScript(())
    b = np.asarray(bias, dtype=float)
    ds = data.generate_synthetic(model, script, steps, DESK_CONFIG, residual=ConstantBias(b, model.layout.mask))
    return dy.Simulator(model, None, DESK_CONFIG), ds, b
