"""Train the residual on drag-contaminated junction data, then switch constraint classes off.

The recorded motion carries a linear drag the physics does not model; the
residual network learns it from one-step velocity errors. Rollout RMSE is
measured on the held-out last quarter over 100-step windows.

    python3 demos/03_junction_ablations.py
"""

import numpy as np

from deft import dynamics as dy, residual as R, scenarios as S, sysid

sc = S.junction_benchmark()
ds = sc.dataset
model = sysid.build_model(sc.topo, ds.frames[0], sc.truth)
sim = dy.Simulator(model, ds.grasp(model), sc.cfg)
last = int(ds.indices("train").max()) + 1
feats, targets = R.one_step_targets(sim, ds.frames[:last], ds.inputs[:last])
net = R.ResidualNet.create(sc.topo)
rep = R.train(net, feats, targets, epochs=300, lr=1e-2)
print(f"residual: one-step velocity MSE {rep.baseline_loss:.3e} -> {rep.final_loss:.3e}")

full = None
print(f"{'model':12s} {'RMSE (m)':>10s} {'x full':>8s}")
for name in ("full",) + S.ABLATIONS:
    mats = sc.initial if name == "no-sysid" else sc.truth
    value = sysid.window_rmse(ds, mats, S.ablated(sc.cfg, name), horizon=100, split="eval",
                              net=None if name == "no-residual" else net)
    full = value if full is None else full
    shown = f"{value:10.3e}" if np.isfinite(value) else f"{'diverged':>10s}"
    print(f"{name:12s} {shown} {value / full:8.1f}")
