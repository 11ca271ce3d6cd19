"""Recover per-branch bending and twisting stiffness from synthetic sway data.

Starts from every stiffness doubled and fits the 9 log-parameters by
trust-region least squares on 100-step rollout windows. The full run
takes several minutes on one core; pass ``--quick`` for a 40-step version.

    python3 demos/02_identify.py [--quick]
"""

import sys

from deft import scenarios as S, sysid

quick = "--quick" in sys.argv
sc = S.identification_benchmark(steps=40 if quick else 200)
horizon, starts = (20, (0, 20)) if quick else (100, (0, 100))
layout = sysid.ParamVector(tuple(b.id for b in sc.topo.branches))
problem = sysid.make_problem(sc.dataset, sc.initial, layout, sc.cfg, horizon=horizon, starts=starts)
fitted, rep = sysid.identify(problem)

print(f"rollout RMSE {rep.initial_loss:.3e} m -> {rep.final_loss:.3e} m in {rep.iterations} iterations "
      f"({rep.seconds:.0f} s)")
print(f"{'parameter':16s} {'truth':>10s} {'start':>10s} {'fitted':>10s}")
for b in sc.truth:
    for name, get in (("bend1", lambda m: m["bend"][0]), ("bend2", lambda m: m["bend"][1]),
                      ("twist", lambda m: m["twist"])):
        print(f"{b + '.' + name:16s} {get(sc.truth[b]):10.5f} {get(sc.initial[b]):10.5f} {get(fitted[b]):10.5f}")
