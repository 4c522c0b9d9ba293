"""Command-line entry point.

Every command resolves a flat config of dotted keys (built-in defaults, then a
JSON ``--config`` file, then ``--set key=value`` overrides), runs, and writes
its artifacts plus a ``manifest.json`` echoing the resolved config into
``--out``. Exit status: 0 ok, 1 runtime error or failed verification, 2 usage.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np

import metantk
from metantk import experiments, maml, nas
from metantk.kernels import AnalyticNTK, EmpiricalNTK, assemble_train_kernel, kernel_to_csv, save_kernel
from metantk.linalg import Continuous, Discrete, LinalgError
from metantk.net import NetworkSpec, init_params
from metantk.predictor import emit_predictions, kernel_regression_predict
from metantk.regions import count_linear_regions, sample_probes
from metantk.report import atomic_write_text, emit_report
from metantk.tasks import TaskBatchConfig, TaskFileError, gen_tasks, load_tasks, save_tasks

VERIFY_CHECKS = ("equivalence", "rate", "stability", "kernel-convergence")


class UsageError(Exception):
    """Bad configuration keys or values; reported with exit status 2."""


# --- flat dotted configs ------------------------------------------------------------------------


def _plain(value):
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    return value


def _field_default(f):
    if f.default is not dataclasses.MISSING:
        return f.default
    return f.default_factory()


def _flatten(prefix: str, cls, skip=()) -> dict:
    """Declared field defaults of ``cls`` (before any post-init expansion) under ``prefix``."""
    return {f"{prefix}.{f.name}": _plain(_field_default(f)) for f in dataclasses.fields(cls) if f.name not in skip}


def _deep_tuple(value):
    return tuple(_deep_tuple(v) for v in value) if isinstance(value, list) else value


def _build(cls, prefix: str, cfg: dict, **extra):
    kwargs = {f.name: _deep_tuple(cfg[f"{prefix}.{f.name}"]) for f in dataclasses.fields(cls) if f"{prefix}.{f.name}" in cfg}
    return cls(**kwargs, **extra)


def _coerce(key: str, default, value):
    try:
        if isinstance(default, bool):
            if isinstance(value, str) and value.lower() in ("true", "false"):
                return value.lower() == "true"
            if not isinstance(value, bool):
                raise ValueError
            return value
        if isinstance(default, int):
            if isinstance(value, bool) or float(value) != int(float(value)):
                raise ValueError
            return int(float(value))
        if isinstance(default, float):
            if isinstance(value, bool):
                raise ValueError
            return float(value)
        if isinstance(default, str):
            if not isinstance(value, str):
                raise ValueError
            return value
        if isinstance(default, list) and not isinstance(value, list):
            raise ValueError
        return value
    except (TypeError, ValueError):
        raise UsageError(f"config key {key!r}: cannot use {value!r} (default is {default!r})") from None


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


NET_DEFAULTS = {
    "net.width": 256,
    "net.depth": 2,
    "net.activation": "relu",
    "net.sigma_w": math.sqrt(2.0),
    "net.sigma_b": 0.1,
    "net.parameterization": "standard",
}
KERNEL_DEFAULTS = {
    "kernel.source": "empirical",
    "kernel.kind": "metantk",
    "kernel.mode": "continuous",
    "kernel.lam_tau": 1.0,
    "kernel.lam": 0.5,
    "kernel.tau": 1,
    "kernel.ridge": 1e-3,
}


def _defaults(command: str, check: str | None = None) -> dict:
    tasks = _flatten("tasks", TaskBatchConfig, skip=("seed",))
    if command == "gen-tasks":
        return tasks
    if command == "kernel":
        return {**NET_DEFAULTS, **KERNEL_DEFAULTS, "kernel.csv": True}
    if command == "train-maml":
        return {**NET_DEFAULTS, "train.eta0": 0.05, "train.lam0": 0.5, "train.tau": 1, "train.steps": 100,
                "train.kernel_interval": 10, "train.log_kernel": False, "train.readout_only": False,
                "train.max_halvings": 0}
    if command == "predict":
        return {**NET_DEFAULTS, **KERNEL_DEFAULTS, "predict.outer_time": math.inf, "predict.center": True}
    if command == "verify":
        if check in ("equivalence", "rate"):
            return _flatten("run", experiments.EquivalenceConfig, skip=("seed",))
        if check == "stability":
            return _flatten("run", experiments.StabilityConfig)
        return _flatten("run", experiments.ConvergenceConfig)
    if command == "regions":
        return {**NET_DEFAULTS, "net.input_dim": 2, "probes.count": 512, "probes.generation": "cube",
                "regions.seeds": [0, 1, 2]}
    if command == "nas-search":
        return {
            **{**tasks, "tasks.d": 2},
            **_flatten("supernet", nas.SuperNetConfig, skip=("input_dim", "output_dim")),
            **_flatten("kernel", nas.KernelConfig),
            **_flatten("search", nas.SearchConfig, skip=("kernel",)),
        }
    raise UsageError(f"unknown command {command!r}")


def shipped_config(name: str) -> Path:
    """Path of a config file bundled with the package (e.g. ``"nas.json"``)."""
    return Path(str(resources.files("metantk") / "configs" / name))


def resolve_config(command: str, check: str | None, config_path, overrides) -> dict:
    """Defaults, then the JSON file, then ``key=value`` overrides; unknown keys are usage errors."""
    cfg = _defaults(command, check)
    layers = []
    if config_path is not None:
        try:
            data = json.loads(Path(config_path).read_text())
        except FileNotFoundError:
            raise FileNotFoundError(f"config file not found: {config_path}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"{config_path}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise UsageError(f"{config_path}: expected an object of dotted keys")
        layers.append(data)
    sets = {}
    for item in overrides or []:
        key, sep, text = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        sets[key.strip()] = _parse_value(text)
    layers.append(sets)
    for layer in layers:
        for key, value in layer.items():
            if key not in cfg:
                raise UsageError(f"unknown config key {key!r} for {command}")
            cfg[key] = _coerce(key, cfg[key], value)
    return cfg


# --- commands --------------------------------------------------------------------------------


def _net(cfg: dict, d: int, k: int) -> NetworkSpec:
    return NetworkSpec(d, (cfg["net.width"],) * cfg["net.depth"], k, cfg["net.activation"], cfg["net.sigma_w"],
                       cfg["net.sigma_b"], cfg["net.parameterization"])


def _base(cfg: dict, spec: NetworkSpec, seed: int):
    source = cfg["kernel.source"]
    if source == "empirical":
        return EmpiricalNTK(spec, init_params(spec, seed))
    if source == "analytic":
        return AnalyticNTK(spec)
    raise UsageError(f"kernel.source must be empirical or analytic, got {source!r}")


def _inner_mode(cfg: dict):
    if cfg["kernel.mode"] == "continuous":
        return Continuous(cfg["kernel.lam_tau"])
    if cfg["kernel.mode"] == "discrete":
        return Discrete(cfg["kernel.lam"], cfg["kernel.tau"])
    raise UsageError(f"kernel.mode must be continuous or discrete, got {cfg['kernel.mode']!r}")


def _task_shape(tasks) -> tuple[int, int]:
    if not tasks:
        raise ValueError("task file holds no tasks")
    return tasks[0].d, tasks[0].k


def cmd_gen_tasks(cfg, args, out: Path) -> dict:
    tc = _build(TaskBatchConfig, "tasks", cfg, seed=args.seed)
    tasks = gen_tasks(tc)
    out.mkdir(parents=True, exist_ok=True)
    save_tasks(tasks, out / "tasks.txt", tc.family, args.seed)
    return {"artifacts": ["tasks.txt"]}


def cmd_kernel(cfg, args, out: Path) -> dict:
    tasks = load_tasks(args.tasks)
    spec = _net(cfg, *_task_shape(tasks))
    km = assemble_train_kernel(tasks, _base(cfg, spec, args.seed), _inner_mode(cfg), cfg["kernel.ridge"],
                               cfg["kernel.kind"])
    out.mkdir(parents=True, exist_ok=True)
    save_kernel(km, out / "kernel.bin")
    artifacts = ["kernel.bin"]
    if cfg["kernel.csv"]:
        kernel_to_csv(km, out / "kernel.csv")
        artifacts.append("kernel.csv")
    ev = np.linalg.eigvalsh(km.matrix)
    print(f"{km.kind} kernel {km.shape[0]}x{km.shape[1]}: lambda_min={ev[0]:.6g} lambda_max={ev[-1]:.6g}")
    return {"artifacts": artifacts, "inputs": {"tasks": str(args.tasks)}}


def cmd_train_maml(cfg, args, out: Path) -> dict:
    tasks = load_tasks(args.tasks)
    probes = load_tasks(args.probes) if args.probes else None
    spec = _net(cfg, *_task_shape(tasks))
    l = spec.kernel_scale
    tc = maml.TrainConfig(eta=cfg["train.eta0"] / l, lam=cfg["train.lam0"] / l, tau=cfg["train.tau"],
                          steps=cfg["train.steps"], seed=args.seed, kernel_interval=cfg["train.kernel_interval"],
                          readout_only=cfg["train.readout_only"], max_halvings=cfg["train.max_halvings"])
    traj, _ = maml.train(spec, init_params(spec, args.seed), tasks, tc, probes=probes,
                         log_kernel=cfg["train.log_kernel"])
    out.mkdir(parents=True, exist_ok=True)
    traj.to_csv(out / "trajectory.csv")
    print(f"meta-loss {traj.loss[0]:.6g} -> {traj.loss[-1]:.6g} over {len(traj) - 1} steps")
    inputs = {"tasks": str(args.tasks)} | ({"probes": str(args.probes)} if args.probes else {})
    return {"artifacts": ["trajectory.csv"], "inputs": inputs}


def cmd_predict(cfg, args, out: Path) -> dict:
    tasks = load_tasks(args.tasks)
    tests = load_tasks(args.test)
    spec = _net(cfg, *_task_shape(tasks))
    base = _base(cfg, spec, args.seed)
    center = cfg["predict.center"] and cfg["kernel.source"] == "empirical"
    preds = [
        kernel_regression_predict(tasks, base, t, _inner_mode(cfg), Continuous(cfg["predict.outer_time"]),
                                  cfg["kernel.ridge"], cfg["kernel.kind"], center)
        for t in tests
    ]
    mse = float(np.mean([np.mean((p - t.Y.ravel()) ** 2) for p, t in zip(preds, tests)]))
    out.mkdir(parents=True, exist_ok=True)
    emit_predictions(out / "predictions.csv", preds, spec.output_dim)
    print(f"query MSE over {len(tests)} test tasks: {mse:.6g}")
    return {"artifacts": ["predictions.csv"], "inputs": {"tasks": str(args.tasks), "test": str(args.test)},
            "metrics": {"mse": mse}}


def cmd_verify(cfg, args, out: Path) -> dict:
    check = args.check
    if check in ("equivalence", "rate"):
        res = experiments.equivalence_run(_build(experiments.EquivalenceConfig, "run", cfg, seed=args.seed))
        out.mkdir(parents=True, exist_ok=True)
        res.trajectory.to_csv(out / "trajectory.csv")
        if check == "equivalence":
            emit_report(out / "equivalence.csv", ["t", "rel_rmse"], res.equivalence_rows())
            passed, summary = res.equivalence_passed, ", ".join(f"t={t}: {v:.3g}" for t, v in sorted(res.rel_rmse.items()))
        else:
            emit_report(out / "rate.csv", ["quantity", "value"], res.rate_rows())
            passed = res.rate_passed
            summary = f"R2={res.r2:.4f} factor={res.empirical_factor:.8f} bound={res.bound_factor:.8f}"
        artifacts = [f"{check}.csv", "trajectory.csv"]
    elif check == "stability":
        res = experiments.kernel_stability(_build(experiments.StabilityConfig, "run", cfg))
        out.mkdir(parents=True, exist_ok=True)
        emit_report(out / "stability.csv", res.header, res.rows())
        passed, summary = res.passed, res.detail
        artifacts = ["stability.csv"]
    else:
        conv = _build(experiments.ConvergenceConfig, "run", cfg)
        rows, passed, parts = [], True, []
        for name, fn in (("direct_vs_composite", experiments.direct_vs_composite),
                         ("analytic", experiments.analytic_convergence)):
            res = fn(conv)
            rows += [[name, *r] for r in res.rows()]
            passed &= res.passed
            parts.append(f"{name}: {' > '.join(f'{m:.4g}' for m in res.means)} ({'ok' if res.passed else 'FAIL'})")
        out.mkdir(parents=True, exist_ok=True)
        emit_report(out / "convergence.csv", ["check", *experiments.WidthSweep.header], rows)
        summary = "; ".join(parts)
        artifacts = ["convergence.csv"]
    print(f"{'PASS' if passed else 'FAIL'} verify {check}: {summary}")
    return {"artifacts": artifacts, "passed": bool(passed)}


def cmd_regions(cfg, args, out: Path) -> dict:
    spec = _net(cfg, cfg["net.input_dim"], 1)
    probes = sample_probes(cfg["net.input_dim"], cfg["probes.count"], cfg["probes.generation"], args.seed)
    rows = [[s, count_linear_regions(spec, init_params(spec, s), probes)] for s in cfg["regions.seeds"]]
    out.mkdir(parents=True, exist_ok=True)
    emit_report(out / "regions.csv", ["seed", "regions"], rows)
    print(f"mean linear regions over {len(rows)} nets: {np.mean([r[1] for r in rows]):.6g}")
    return {"artifacts": ["regions.csv"]}


def cmd_nas_search(cfg, args, out: Path) -> dict:
    if args.tasks:
        tasks = load_tasks(args.tasks)
        inputs = {"tasks": str(args.tasks)}
    else:
        tasks = gen_tasks(_build(TaskBatchConfig, "tasks", cfg, seed=args.seed))
        inputs = {}
    d, k = _task_shape(tasks)
    supernet = nas.build_supernet(_build(nas.SuperNetConfig, "supernet", cfg, input_dim=d, output_dim=k))
    search = _build(nas.SearchConfig, "search", cfg, kernel=_build(nas.KernelConfig, "kernel", cfg))
    arch, audit = nas.search(supernet, tasks, search)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "architecture.txt", arch.to_text())
    nas.write_audit(out / "audit.csv", audit)
    rounds = max((r[0] for r in audit), default=0)
    print(f"single-path architecture after {rounds} rounds")
    return {"artifacts": ["architecture.txt", "audit.csv"], "inputs": inputs, "rounds": rounds}


COMMANDS = {
    "gen-tasks": cmd_gen_tasks,
    "kernel": cmd_kernel,
    "train-maml": cmd_train_maml,
    "predict": cmd_predict,
    "verify": cmd_verify,
    "regions": cmd_regions,
    "nas-search": cmd_nas_search,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON object of dotted config keys")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--seed", type=int, default=0, help="seed for tasks, initialization and probes")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    common.add_argument("--threads", type=int, default=None, help="XLA CPU worker threads")

    parser = argparse.ArgumentParser(prog="metantk", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {metantk.__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-tasks", parents=[common], help="generate a synthetic task file")
    p = sub.add_parser("kernel", parents=[common], help="assemble a training kernel")
    p.add_argument("--tasks", type=Path, required=True)
    p = sub.add_parser("train-maml", parents=[common], help="train MAML and log the trajectory")
    p.add_argument("--tasks", type=Path, required=True)
    p.add_argument("--probes", type=Path, help="task file whose meta-outputs are logged each step")
    p = sub.add_parser("predict", parents=[common], help="kernel-regression predictions on test tasks")
    p.add_argument("--tasks", type=Path, required=True)
    p.add_argument("--test", type=Path, required=True)
    p = sub.add_parser("verify", parents=[common], help="run one verification experiment")
    p.add_argument("check", choices=VERIFY_CHECKS)
    sub.add_parser("regions", parents=[common], help="count linear regions of random networks")
    p = sub.add_parser("nas-search", parents=[common], help="rank-sum pruning search")
    p.add_argument("--tasks", type=Path, help="task file (default: generate from tasks.* keys)")
    return parser


def _configure_threads(threads):
    if threads is None:
        return
    if threads < 1:
        raise UsageError("--threads must be positive")
    flags = os.environ.get("XLA_FLAGS", "")
    flags += f" --xla_cpu_multi_thread_eigen={'true' if threads > 1 else 'false'}"
    flags += f" intra_op_parallelism_threads={threads}"
    os.environ["XLA_FLAGS"] = flags.strip()


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _configure_threads(args.threads)
        config_path = args.config
        if config_path is None and args.command == "nas-search":
            config_path = shipped_config("nas.json")
        cfg = resolve_config(args.command, getattr(args, "check", None), config_path, args.set)
    except UsageError as exc:
        parser.error(str(exc))
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    try:
        info = COMMANDS[args.command](cfg, args, args.out)
    except UsageError as exc:
        parser.error(str(exc))
    except (OSError, ValueError, LinalgError, TaskFileError, maml.DivergenceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    manifest = {
        "command": args.command if args.command != "verify" else f"verify {args.check}",
        "version": metantk.__version__,
        "seed": args.seed,
        "threads": args.threads,
        "config_file": None if config_path is None else str(config_path),
        "config": cfg,
        **info,
    }
    atomic_write_text(args.out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    if info.get("passed") is False:
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
