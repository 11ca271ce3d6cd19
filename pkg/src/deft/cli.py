"""Command line: ``deft simulate | identify | train-residual | evaluate | gradcheck | bench``.

Exit codes::

    0  success
    1  gradcheck found a derivative outside tolerance
    2  configuration or input-file error
    3  numeric failure (non-finite state, singular geometry, diverging training)
    4  non-convergence (constraint projection or identification)

Run configuration (INI, used by ``simulate`` and optionally by the others
for their ``[step]`` section). Relative paths resolve against the config
file's directory::

    [model]
    topology = topo.json        ; required
    params = params.json        ; optional, default materials otherwise
    segment = 0.05              ; rest-shape edge length (m)

    [motion]
    script = motion.json        ; optional deft-motion script
    pins = parent:0:hold parent:12:hold   ; pins held still when no script

    [step]
    dt = 0.01
    gravity = 0 0 -9.81
    kappa = 0.02                ; kappa_inext / kappa_attach / kappa_orient override per class
    eps = 0.1
    max_sweeps = 50
    min_sweeps = 0              ; sweeps run even when within tolerance
    damping = 1.0
    residual = net.json         ; optional residual checkpoint, switches the residual on

    [run]
    steps = 500
    noise = 0.0
    seed = 0
    split = 0.75
    drag = 0.0                  ; planted unmodelled drag -c v in the recorded data
    out = run                   ; dataset directory to write

``DEFT_WORKERS`` sets the number of worker processes for the finite
difference probes of ``identify`` (default 1).
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bench, checks, data, dynamics as dy, residual as res, rod, sysid
from .constraints import ConstraintSettings
from .topology import TopologyError, load_topology

log = logging.getLogger("deft")

OK, GRADCHECK_FAILED, CONFIG_ERROR, NUMERIC_ERROR, NOT_CONVERGED = 0, 1, 2, 3, 4


class ConfigError(Exception):
    pass


# ----------------------------------------------------------------------------
# configuration


def read_config(path) -> tuple[configparser.ConfigParser, Path]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        cp.read(path)
    except configparser.Error as err:
        raise ConfigError(f"{path}: {err}") from err
    return cp, path.resolve().parent


def _path(base: Path, value: str) -> Path:
    p = Path(value)
    p = p if p.is_absolute() else base / p
    if not p.exists():
        raise ConfigError(f"referenced file {p} does not exist")
    return p


def _floats(text, n, name):
    vals = [float(v) for v in text.replace(",", " ").split()]
    if len(vals) != n:
        raise ConfigError(f"{name} needs {n} numbers, got {len(vals)}")
    return tuple(vals)


def step_config(cp: configparser.ConfigParser | None, base: Path | None = None, residual_ok=True):
    """StepConfig plus an optional residual checkpoint path from a ``[step]`` section."""
    if cp is None or not cp.has_section("step"):
        return dy.StepConfig(), None
    s = cp["step"]
    try:
        opt = {k: (float(s[k]) if k in s and s[k].strip() else None)
               for k in ("kappa_inext", "kappa_attach", "kappa_orient")}
        cs = ConstraintSettings(kappa=s.getfloat("kappa", 0.02), eps=s.getfloat("eps", 0.1),
                                max_sweeps=s.getint("max_sweeps", 50),
                                min_sweeps=s.getint("min_sweeps", 0), **opt)
        cfg = dy.StepConfig(dt=s.getfloat("dt", 0.01), gravity=_floats(s.get("gravity", "0 0 -9.81"), 3, "gravity"),
                            constraints=cs, damping=s.getfloat("damping", 1.0))
    except ValueError as err:
        raise ConfigError(f"[step]: {err}") from err
    ckpt = None
    if residual_ok and s.get("residual", "").strip():
        ckpt = _path(base, s["residual"].strip())
        cfg = replace(cfg, use_residual=True)
    return cfg, ckpt


def _step_from(args, dataset_dir=None):
    """[step] settings from --config, else from the dataset's saved step.cfg, else defaults."""
    src = args.config or (Path(dataset_dir) / "step.cfg" if dataset_dir else None)
    if src is None or (not args.config and not Path(src).is_file()):
        return dy.StepConfig()
    cp, base = read_config(src)
    cfg, _ = step_config(cp, base, residual_ok=False)
    return cfg


def write_step_config(cfg: dy.StepConfig, path) -> None:
    cs = cfg.constraints
    cp = configparser.ConfigParser()
    cp["step"] = {"dt": repr(cfg.dt), "gravity": " ".join(repr(float(g)) for g in cfg.gravity),
                  "kappa": repr(cs.kappa), "eps": repr(cs.eps), "max_sweeps": str(cs.max_sweeps),
                  "min_sweeps": str(cs.min_sweeps), "damping": repr(cfg.damping)}
    for k in ("kappa_inext", "kappa_attach", "kappa_orient"):
        if getattr(cs, k) is not None:
            cp["step"][k] = repr(getattr(cs, k))
    with open(path, "w") as fh:
        cp.write(fh)


def _held_script(topo, text) -> data.MotionScript:
    pins = []
    for tok in text.split():
        parts = tok.split(":")
        try:
            pins.append({"branch": parts[0], "vertex": int(parts[1]), "hold_edge": len(parts) > 2 and parts[2] == "hold"})
        except (IndexError, ValueError) as err:
            raise ConfigError(f"bad pin {tok!r} (use branch:vertex[:hold])") from err
    return data.MotionScript.from_dict({"format": data.MOTION_FORMAT, "pins": pins}, topo)


# ----------------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> int:
    cp, base = read_config(args.config)
    if not cp.has_option("model", "topology"):
        raise ConfigError("[model] topology is required")
    topo = load_topology(_path(base, cp["model"]["topology"]))
    materials = sysid.default_materials(topo)
    if cp.get("model", "params", fallback="").strip():
        materials = sysid.load_params(_path(base, cp["model"]["params"]))
    x_rest = dy.rest_shape(topo, segment=cp.getfloat("model", "segment", fallback=0.05))
    model = sysid.build_model(topo, x_rest, materials)
    if cp.get("motion", "script", fallback="").strip():
        script = data.MotionScript.load(_path(base, cp["motion"]["script"]), topo)
    else:
        script = _held_script(topo, cp.get("motion", "pins", fallback=""))
    cfg, ckpt = step_config(cp, base)
    run = cp["run"] if cp.has_section("run") else {}
    residual = None
    if ckpt is not None:
        residual = res.ResidualField(res.ResidualNet.load(ckpt), topo, model.params)
    drag = float(run.get("drag", 0.0))
    if drag:
        if residual is not None:
            raise ConfigError("[run] drag and [step] residual are mutually exclusive")
        from .scenarios import LinearDrag

        residual = LinearDrag(drag)
    steps = int(run.get("steps", 500))
    if steps < 1:
        raise ConfigError("[run] steps must be at least 1")
    out = Path(args.out or (base / run.get("out", "run")))
    ds, reports = data.generate_synthetic(model, script, steps, cfg, noise=float(run.get("noise", 0.0)),
                                          seed=int(run.get("seed", 0)), residual=residual,
                                          params_record=materials, keep_reports=True)
    ds = ds.with_split(float(run.get("split", 0.75)))
    data.save_dataset(ds, out)
    write_step_config(replace(cfg, use_residual=False), out / "step.cfg")
    with open(out / "reports.jsonl", "w") as fh:
        for t, r in enumerate(reports):
            fh.write(json.dumps({"step": t + 1, **r.as_dict()}) + "\n")
    bad = sum(not r.converged for r in reports)
    print(f"wrote {len(ds)} frames to {out}; projection unconverged in {bad} of {len(reports)} steps")
    return NOT_CONVERGED if bad else OK


def cmd_identify(args) -> int:
    ds = data.load_dataset(args.dataset)
    cfg = _step_from(args, args.dataset)
    base = sysid.load_params(args.init) if args.init else sysid.default_materials(ds.topo)
    layout = sysid.ParamVector(tuple(b.id for b in ds.topo.branches), tuple(args.free.split(",")), args.sharing)
    problem = sysid.make_problem(ds, base, layout, cfg, horizon=args.horizon, split=args.split)
    materials, report = sysid.identify(problem, tol=args.tol, patience=args.patience, max_iters=args.max_iters)
    sysid.save_params(materials, args.out)
    if args.report:
        Path(args.report).write_text(json.dumps(report.as_dict(), indent=2) + "\n")
    print(f"rollout RMSE {report.initial_loss:.6g} m -> {report.final_loss:.6g} m "
          f"in {report.iterations} iterations ({report.seconds:.1f} s); wrote {args.out}")
    for name, change in report.relative_change.items():
        print(f"  {name:24s} {100 * change:+8.2f} %")
    return OK if report.converged else NOT_CONVERGED


def cmd_train_residual(args) -> int:
    ds = data.load_dataset(args.dataset)
    cfg = _step_from(args, args.dataset)
    materials = sysid.load_params(args.params) if args.params else sysid.default_materials(ds.topo)
    model = sysid.build_model(ds.topo, ds.frames[0], materials)
    sim = dy.Simulator(model, ds.grasp(model), cfg)
    last = int(ds.indices("train").max()) + 1
    feats, targets = res.one_step_targets(sim, ds.frames[:last], ds.inputs[:last])
    net = res.ResidualNet.create(ds.topo, hidden=tuple(args.hidden), seed=args.seed)
    report = res.train(net, feats, targets, epochs=args.epochs, lr=args.lr, seed=args.seed)
    net.save(args.out)
    print(f"one-step velocity MSE {report.baseline_loss:.6g} (no residual) -> {report.final_loss:.6g}; "
          f"wrote {args.out}")
    return OK


def cmd_evaluate(args) -> int:
    ds = data.load_dataset(args.dataset)
    cfg = _step_from(args, args.dataset)
    materials = sysid.load_params(args.params) if args.params else sysid.default_materials(ds.topo)
    baseline = sysid.load_params(args.baseline_params) if args.baseline_params else sysid.default_materials(ds.topo)
    net = res.ResidualNet.load(args.residual) if args.residual else None
    wanted = [a for a in ("no-residual", "no-sysid", "no-orient", "no-attach", "no-inext")
              if args.all or getattr(args, a.replace("-", "_"))]
    rows = [("full", materials, cfg, net)]
    for name in wanted:
        if name == "no-residual":
            rows.append((name, materials, cfg, None))
        elif name == "no-sysid":
            rows.append((name, baseline, cfg, net))
        else:
            from .scenarios import ablated

            rows.append((name, materials, ablated(cfg, name), net))
    table = []
    print(f"{'model':12s} {'RMSE (m)':>14s} {'x full':>10s}")
    for name, m, c, n in rows:
        value = sysid.window_rmse(ds, m, c, horizon=args.horizon, split=args.split, net=n)
        table.append({"model": name, "rmse": value})
        ratio = value / table[0]["rmse"] if table[0]["rmse"] > 0 else float("inf")
        shown = "diverged" if not np.isfinite(value) else f"{value:.6g}"
        print(f"{name:12s} {shown:>14s} {ratio:10.3g}")
    if args.json:
        Path(args.json).write_text(json.dumps(table, indent=2) + "\n")
    return OK


def cmd_gradcheck(args) -> int:
    t0 = time.perf_counter()
    theta_err, force_err = checks.gradient_suite(args.trials, args.seed)
    net_err = checks.residual_network_check(args.seed)
    rows = [("theta gradient", theta_err, 1e-6), ("vertex forces", force_err, 1e-4),
            ("residual weights", net_err, 1e-4)]
    ok = True
    for name, err, tol in rows:
        passed = err < tol
        ok &= passed
        print(f"{name:18s} max rel err {err:.3e} (tol {tol:.0e}) {'PASS' if passed else 'FAIL'}")
    print(f"{args.trials} random rods in {time.perf_counter() - t0:.1f} s")
    return OK if ok else GRADCHECK_FAILED


def _children(text):
    if ".." in text:
        lo, hi = text.split("..")
        return list(range(int(lo), int(hi) + 1))
    return [int(v) for v in text.split(",")]


def cmd_bench(args) -> int:
    try:
        children = _children(args.children)
    except ValueError as err:
        raise ConfigError(f"--children: {err}") from err
    rows = bench.branch_scaling(children, args.parent_n, args.child_n, args.steps)
    rows += bench.inner_gradient(2, args.parent_n, args.child_n)
    print(f"{'benchmark':16s} {'size':>4s} {'variant':12s} {'median ms':>10s}")
    for r in rows:
        print(f"{r.benchmark:16s} {r.size:4d} {r.variant:12s} {r.median_ms:10.3f}")
    for c, q in bench.ratio(rows, "branches", "sequential", "batched").items():
        print(f"children {c}: sequential / batched = {q:.2f}")
    for c, q in bench.ratio(rows, "inner-gradient", "numeric", "analytic").items():
        print(f"inner solve: numeric / analytic = {q:.2f}")
    if args.out:
        bench.write_csv(rows, args.out)
    return OK


# ----------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deft", description="Branched elastic rod simulation and identification.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="roll out a configured scenario and write a dataset")
    s.add_argument("--config", required=True)
    s.add_argument("--out", help="dataset directory (overrides [run] out)")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("identify", help="fit material parameters to a dataset")
    s.add_argument("--dataset", required=True)
    s.add_argument("--init", help="starting parameter file (default materials otherwise)")
    s.add_argument("--out", required=True, help="fitted parameter file")
    s.add_argument("--report", help="write the fit report as JSON")
    s.add_argument("--config", help="INI file whose [step] section sets the simulator")
    s.add_argument("--free", default="bend,twist", help="comma list from mass,bend,twist,inertia_scale")
    s.add_argument("--sharing", default="branch", choices=("branch", "shared"))
    s.add_argument("--horizon", type=int, default=100)
    s.add_argument("--split", default="train")
    s.add_argument("--tol", type=float, default=1e-6)
    s.add_argument("--patience", type=int, default=10)
    s.add_argument("--max-iters", type=int, default=50)
    s.set_defaults(func=cmd_identify)

    s = sub.add_parser("train-residual", help="fit the residual network on the training split")
    s.add_argument("--dataset", required=True)
    s.add_argument("--params", help="material parameter file")
    s.add_argument("--out", required=True, help="checkpoint file")
    s.add_argument("--config")
    s.add_argument("--epochs", type=int, default=300)
    s.add_argument("--lr", type=float, default=1e-2)
    s.add_argument("--hidden", type=int, nargs="+", default=[32])
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_train_residual)

    s = sub.add_parser("evaluate", help="rollout RMSE of the full model and its ablations")
    s.add_argument("--dataset", required=True)
    s.add_argument("--params", help="identified parameter file")
    s.add_argument("--baseline-params", help="parameters used by the --no-sysid row")
    s.add_argument("--residual", help="residual checkpoint")
    s.add_argument("--config")
    s.add_argument("--horizon", type=int, default=100)
    s.add_argument("--split", default="eval")
    for flag in ("no-inext", "no-attach", "no-orient", "no-residual", "no-sysid"):
        s.add_argument(f"--{flag}", action="store_true", help=f"add the {flag} ablation row")
    s.add_argument("--all", action="store_true", help="add every ablation row")
    s.add_argument("--json", help="write the table as JSON")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("gradcheck", help="finite-difference check of every analytic derivative")
    s.add_argument("--trials", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("bench", help="time batched vs sequential branches and the inner gradient")
    s.add_argument("--children", default="1..8", help="range a..b or comma list")
    s.add_argument("--parent-n", type=int, default=20)
    s.add_argument("--child-n", type=int, default=6)
    s.add_argument("--steps", type=int, default=60)
    s.add_argument("--out", help="CSV file")
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    # geometry errors subclass ValueError, so numeric failures are matched first
    except (dy.SimulationError, res.TrainingError, rod.GeometryError, FloatingPointError) as err:
        print(f"deft: numeric failure: {err}", file=sys.stderr)
        return NUMERIC_ERROR
    except (ConfigError, TopologyError, data.DatasetError, FileNotFoundError, json.JSONDecodeError,
            KeyError, ValueError) as err:
        print(f"deft: error: {err}", file=sys.stderr)
        return CONFIG_ERROR
    except rod.ConvergenceError as err:
        print(f"deft: did not converge: {err}", file=sys.stderr)
        return NOT_CONVERGED


if __name__ == "__main__":
    sys.exit(main())
