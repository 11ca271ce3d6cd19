"""Timing benchmarks: per-step latency, batched vs sequential branches, inner gradient.

Results are rows ``(benchmark, size, variant, median_ms, samples)`` and are
written as CSV with exactly that header.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, replace

import numpy as np

from . import dynamics as dy, rod
from .scenarios import DESK_CONFIG, comb, held_model

CSV_FIELDS = ("benchmark", "size", "variant", "median_ms", "samples")


@dataclass(frozen=True)
class BenchRow:
    benchmark: str
    size: int
    variant: str
    median_ms: float
    samples: int


def sway_inputs(u0, steps, dt=0.01, reach=0.1):
    """Grippers ease toward each other and lift, so the rod bends out of its rest shape."""
    u0 = np.asarray(u0, dtype=float).reshape(-1, 6)
    out = []
    for t in range(1, steps + 1):
        u = u0.copy()
        f = min(t * dt / 0.5, 1.0)
        u[0, 0] += reach * f
        u[-1, 0] -= reach * f
        u[:, 2] += 0.5 * reach * np.sin(2 * np.pi * t * dt)
        out.append(u.ravel())
    return out


def _step_times(sim, state, inputs, warmup):
    times = []
    for k, u in enumerate(inputs):
        a = time.perf_counter()
        state = sim.step(state, u).state
        if k >= warmup:
            times.append(time.perf_counter() - a)
    return times


def step_latency(parent_n=20, child_n=6, children=2, steps=100, warmup=5, cfg=DESK_CONFIG, batched=True):
    """Median wall time (ms) of one step of a two-handed sway, and the sample count."""
    model, grasp, state = held_model(comb(parent_n, child_n, children))
    sim = dy.Simulator(model, grasp, replace(cfg, batched=batched))
    times = _step_times(sim, state, sway_inputs(grasp.u0, steps + warmup, cfg.dt), warmup)
    return 1e3 * float(np.median(times)), len(times)


def branch_scaling(children=range(1, 9), parent_n=20, child_n=6, steps=60, warmup=5, cfg=DESK_CONFIG):
    """Sequential vs batched step time for growing child counts."""
    rows = []
    for c in children:
        for variant, batched in (("sequential", False), ("batched", True)):
            ms, n = step_latency(parent_n, child_n, c, steps, warmup, cfg, batched)
            rows.append(BenchRow("branches", int(c), variant, ms, n))
    return rows


def twisted_states(children=2, parent_n=20, child_n=6, steps=40, cfg=DESK_CONFIG):
    """Positions, free masks and gauge-respecting start angles for inner-solve timing."""
    model, grasp, state = held_model(comb(parent_n, child_n, children))
    sim = dy.Simulator(model, grasp, cfg)
    rng = np.random.default_rng(0)
    out = []
    for u in sway_inputs(grasp.u0, steps, cfg.dt):
        state = sim.step(state, u).state
        x, theta, free = sim.apply_grasp(state, u)
        theta0 = np.where(free, theta + 0.3 * rng.standard_normal(theta.shape), theta)
        out.append((x, theta0, free))
    return sim, out


def inner_gradient(children=2, parent_n=20, child_n=6, steps=40, repeats=3):
    """Median time of the twist solve with the analytic vs the finite-difference gradient."""
    sim, states = twisted_states(children, parent_n, child_n, steps)
    model, em = sim.model, sim.edge_mask
    rows = []
    for variant in ("analytic", "numeric"):
        times = []
        for x, theta0, free in states:
            bishop = rod.bishop_frames(x, model.seed(x), em)
            best = np.inf
            for _ in range(repeats):
                a = time.perf_counter()
                rod.optimize_theta(x, theta0, model.params, free=free, edge_mask=em, bishop=bishop,
                                   gradient=variant, max_iters=200)
                best = min(best, time.perf_counter() - a)
            times.append(best)
        rows.append(BenchRow("inner-gradient", children, variant, 1e3 * float(np.median(times)), len(times)))
    return rows


def ratio(rows, benchmark, num, den):
    """``{size: num_ms / den_ms}`` for one benchmark."""
    table = {(r.size, r.variant): r.median_ms for r in rows if r.benchmark == benchmark}
    sizes = sorted({s for s, _ in table})
    return {s: table[s, num] / table[s, den] for s in sizes if (s, num) in table and (s, den) in table}


def write_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_FIELDS)
        for r in rows:
            w.writerow([r.benchmark, r.size, r.variant, f"{r.median_ms:.6g}", r.samples])


def read_csv(path) -> list:
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if tuple(rd.fieldnames or ()) != CSV_FIELDS:
            raise ValueError(f"{path}: expected columns {','.join(CSV_FIELDS)}")
        return [BenchRow(r["benchmark"], int(r["size"]), r["variant"], float(r["median_ms"]), int(r["samples"]))
                for r in rd]
