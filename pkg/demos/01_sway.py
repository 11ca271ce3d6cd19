"""Sway a two-child comb with both grippers and report how well the constraints hold.

    python3 demos/01_sway.py
"""

import numpy as np

from deft import dynamics as dy
from deft.scenarios import DESK_CONFIG, comb, held_model, two_hand_script

topo = comb(parent_n=20, child_n=6, children=2)
model, grasp, state = held_model(topo)
script = two_hand_script(topo)
steps = 300
inputs = script.inputs(grasp.u0, steps, DESK_CONFIG.dt)[1:].reshape(steps, -1)
sim = dy.Simulator(model, grasp, DESK_CONFIG)
states, reports = sim.rollout(state, inputs, keep_reports=True)

rest = model.params.rest_lengths
stretch = max(np.max(np.abs(np.where(sim.edge_mask, np.linalg.norm(np.diff(s.x, axis=1), axis=-1) - rest, 0)))
              for s in states)
gaps = max(np.linalg.norm(s.x[0, i] - s.x[row, 0]) for s in states for i, row, *_ in sim.system.junctions)
print(f"{steps} steps of {topo.total_vertices} vertices")
print(f"worst segment length error {1e3 * stretch:.3f} mm, worst junction gap {1e3 * gaps:.3f} mm")
print(f"sweeps per step: median {np.median([r.sweeps_used for r in reports]):.0f}, "
      f"max {max(r.sweeps_used for r in reports)}; unconverged steps {sum(not r.converged for r in reports)}")
tip = states[-1].x[1, topo.branches[1].n - 1]
print(f"tip of child a ends at {np.round(tip, 4)} m")
