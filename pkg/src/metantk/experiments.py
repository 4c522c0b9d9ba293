"""Seeded experiment harness shared by the ``verify`` commands and the acceptance suite.

Every experiment takes a frozen config, returns a result object holding the
raw measurements plus a ``passed`` verdict, and can render itself as CSV rows.
Learning rates follow the ``eta = eta0 / l`` convention: configs carry
kernel-unit rates (``eta0``, ``lam0``) and the raw parameter-space steps are
derived per width.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from metantk import maml, nas
from metantk.kernels import (
    AnalyticNTK,
    EmpiricalNTK,
    anil_block,
    assemble_train_kernel,
    metantk_block,
    metantk_direct,
)
from metantk.linalg import Continuous, Discrete
from metantk.net import NetworkSpec, init_params
from metantk.predictor import closed_form_meta_output, empirical_state, empirical_test_inputs
from metantk.tasks import TaskBatchConfig, gen_tasks


def dense_spec(width: int, depth: int = 2, d: int = 1, k: int = 1, activation: str = "relu",
               sigma_w: float = math.sqrt(2.0), sigma_b: float = 0.1, parameterization: str = "standard"):
    return NetworkSpec(d, (width,) * depth, k, activation, sigma_w, sigma_b, parameterization)


def _rel(A, B) -> float:
    return float(np.linalg.norm(A - B) / np.linalg.norm(B))


@dataclass
class CheckResult:
    """A scalar measurement against a threshold."""

    name: str
    value: float
    threshold: float
    passed: bool
    detail: str = ""

    def rows(self):
        return [[self.name, self.value, self.threshold, int(self.passed)]]

    header = ["check", "value", "threshold", "passed"]


@dataclass
class WidthSweep:
    """Per-width seed means of a relative distance."""

    widths: tuple
    per_seed: np.ndarray  # (widths, seeds)
    passed: bool = False
    detail: str = ""

    @property
    def means(self) -> np.ndarray:
        return self.per_seed.mean(axis=1)

    @property
    def ratios(self) -> np.ndarray:
        return self.means[1:] / self.means[:-1]

    header = ["width", "mean", "std", "n_seeds"]

    def rows(self):
        for w, row in zip(self.widths, self.per_seed):
            yield [w, row.mean(), row.std(ddof=1) if row.size > 1 else 0.0, row.size]


# --- gradient oracle -------------------------------------------------------------------------


@dataclass(frozen=True)
class GradientCheckConfig:
    width: int = 16
    depth: int = 2
    d: int = 2
    N: int = 2
    n: int = 4
    m: int = 4
    lam: float = 0.1
    tau: int = 2
    step: float = 1e-4
    tolerance: float = 1e-5
    seed: int = 4
    activation: str = "erf"
    parameterization: str = "ntk"


def gradient_check(cfg: GradientCheckConfig = GradientCheckConfig()) -> CheckResult:
    """Autodiff outer gradient against central finite differences of the meta-loss."""
    spec = dense_spec(cfg.width, cfg.depth, cfg.d, activation=cfg.activation, sigma_w=1.5,
                      parameterization=cfg.parameterization)
    p = init_params(spec, cfg.seed)
    tasks = gen_tasks(TaskBatchConfig(N=cfg.N, n=cfg.n, m=cfg.m, d=cfg.d, seed=cfg.seed))
    g = maml.outer_grad(spec, p, tasks, cfg.lam, cfg.tau)
    fd = np.empty_like(p)
    for i in range(p.size):
        e = np.zeros_like(p)
        e[i] = cfg.step
        up = maml.meta_loss(spec, p + e, tasks, cfg.lam, cfg.tau)
        down = maml.meta_loss(spec, p - e, tasks, cfg.lam, cfg.tau)
        fd[i] = (up - down) / (2 * cfg.step)
    gap = float(np.max(np.abs(g - fd)))
    return CheckResult("outer_grad_fd_gap", gap, cfg.tolerance, gap < cfg.tolerance, f"{p.size} parameters")


# --- kernel identities ------------------------------------------------------------------------


def kernel_reduction(width: int = 64, seeds: Sequence[int] = range(5), tolerance: float = 1e-12) -> CheckResult:
    """With zero inner time the MetaNTK and ANIL blocks equal the NTK block."""
    worst = 0.0
    for seed in seeds:
        spec = dense_spec(width, d=2)
        base = EmpiricalNTK(spec, init_params(spec, seed))
        ti, tj = gen_tasks(TaskBatchConfig(N=2, n=4, m=4, d=2, seed=seed))
        for a, b in ((ti, ti), (ti, tj)):
            ntk = base.features(a.X) @ base.features(b.X).T / base.scale
            for blk in (metantk_block(base, a, b, Continuous(0.0)), anil_block(base, base.nngp(), a, b, Continuous(0.0))):
                worst = max(worst, float(np.max(np.abs(blk - ntk))))
    return CheckResult("zero_time_block_gap", worst, tolerance, worst <= tolerance)


@dataclass(frozen=True)
class ConvergenceConfig:
    """Width sweep for kernel convergence checks; ``lam0`` is in kernel units."""

    widths: tuple = (64, 256, 1024)
    seeds: tuple = tuple(range(10))
    N: int = 2
    n: int = 5
    m: int = 5
    lam0: float = 0.5
    tau: int = 2
    depth: int = 2


def _sweep(cfg: ConvergenceConfig, measure) -> np.ndarray:
    out = np.empty((len(cfg.widths), len(cfg.seeds)))
    for i, width in enumerate(cfg.widths):
        for j, seed in enumerate(cfg.seeds):
            spec = dense_spec(width, cfg.depth)
            params = init_params(spec, seed)
            tasks = gen_tasks(TaskBatchConfig(N=cfg.N, n=cfg.n, m=cfg.m, seed=seed))
            direct = metantk_direct(spec, params, tasks, cfg.lam0 / spec.kernel_scale, cfg.tau).matrix
            out[i, j] = measure(spec, params, tasks, direct)
    return out


def direct_vs_composite(cfg: ConvergenceConfig = ConvergenceConfig(), final_max: float = 0.15) -> WidthSweep:
    """Distance between the unrolled-map kernel and the composite built from the empirical NTK."""
    mode = Discrete(cfg.lam0, cfg.tau)

    def measure(spec, params, tasks, direct):
        comp = assemble_train_kernel(tasks, EmpiricalNTK(spec, params), mode, 0.0).matrix
        return _rel(direct, comp)

    res = WidthSweep(cfg.widths, _sweep(cfg, measure))
    means = res.means
    res.passed = bool(np.all(np.diff(means) < 0) and means[-1] < final_max)
    res.detail = f"strictly decreasing and final < {final_max}"
    return res


def analytic_convergence(cfg: ConvergenceConfig = ConvergenceConfig(), max_ratio: float = 0.8) -> WidthSweep:
    """Distance between the finite-width MetaNTK and its infinite-width composite."""
    mode = Discrete(cfg.lam0, cfg.tau)

    def measure(spec, params, tasks, direct):
        return _rel(direct, assemble_train_kernel(tasks, AnalyticNTK(spec), mode, 0.0).matrix)

    res = WidthSweep(cfg.widths, _sweep(cfg, measure))
    res.passed = bool(np.all(np.diff(res.means) < 0) and np.all(res.ratios <= max_ratio))
    res.detail = f"decreasing with consecutive ratios <= {max_ratio}"
    return res


# --- training versus closed form ---------------------------------------------------------------


@dataclass(frozen=True)
class EquivalenceConfig:
    """Training run compared against the closed-form linearized predictor.

    ``eta0`` and ``lam0`` are in kernel units; the raw steps are ``eta0 / l`` and
    ``lam0 / l``.
    """

    width: int = 1024
    depth: int = 2
    N: int = 4
    n: int = 5
    m: int = 5
    probe_tasks: int = 2
    eta0: float = 5e-4
    lam0: float = 0.5
    tau: int = 1
    steps: int = 200
    check_times: tuple = (10, 50, 200)
    seed: int = 0
    rmse_max: float = 0.05
    r2_min: float = 0.98
    rate_slack: float = 0.10


@dataclass
class EquivalenceResult:
    config: EquivalenceConfig
    losses: np.ndarray
    rel_rmse: dict
    r2: float
    slope: float
    lambda_min: float
    lambda_max: float
    trajectory: maml.Trajectory = field(repr=False, default=None)

    @property
    def empirical_factor(self) -> float:
        """Fitted per-step loss factor ``exp(slope)``."""
        return math.exp(self.slope)

    @property
    def bound_factor(self) -> float:
        return (1.0 - self.config.eta0 * self.lambda_min / 3.0) ** 2

    @property
    def equivalence_passed(self) -> bool:
        return all(v < self.config.rmse_max for v in self.rel_rmse.values())

    @property
    def rate_passed(self) -> bool:
        # factor form, and the same statement in rate form so it is not vacuous
        # when both factors are within rounding of 1
        slack = self.config.rate_slack
        factor_ok = self.empirical_factor <= self.bound_factor * (1 + slack)
        rate_ok = -self.slope >= (1 - slack) * -math.log(self.bound_factor)
        return bool(self.r2 > self.config.r2_min and factor_ok and rate_ok)

    def equivalence_rows(self):
        return [[t, v] for t, v in sorted(self.rel_rmse.items())]

    def rate_rows(self):
        return [["r2", self.r2], ["slope", self.slope], ["empirical_factor", self.empirical_factor],
                ["bound_factor", self.bound_factor], ["lambda_min", self.lambda_min], ["lambda_max", self.lambda_max]]


def equivalence_run(cfg: EquivalenceConfig = EquivalenceConfig()) -> EquivalenceResult:
    """Train MAML and compare probe outputs with the closed form at ``check_times``."""
    spec = dense_spec(cfg.width, cfg.depth)
    l = spec.kernel_scale
    params = init_params(spec, cfg.seed)
    tasks = gen_tasks(TaskBatchConfig(N=cfg.N, n=cfg.n, m=cfg.m, seed=cfg.seed))
    probes = gen_tasks(TaskBatchConfig(N=cfg.probe_tasks, n=cfg.n, m=cfg.m, seed=cfg.seed + 10_000))
    lam, eta = cfg.lam0 / l, cfg.eta0 / l

    state = empirical_state(spec, params, tasks, lam, cfg.tau, eta)
    strips = [empirical_test_inputs(spec, params, p, tasks, lam, cfg.tau) for p in probes]
    traj, _ = maml.train(spec, params, tasks, maml.TrainConfig(eta=eta, lam=lam, tau=cfg.tau, steps=cfg.steps),
                         probes=probes)
    rel = {}
    for t in cfg.check_times:
        closed = np.concatenate([closed_form_meta_output(state, s, f0, t) for s, f0 in strips])
        rel[t] = float(np.sqrt(np.mean((traj.probe_outputs[t] - closed) ** 2)) / np.sqrt(np.mean(closed**2)))

    losses = np.asarray(traj.loss)
    ts = np.asarray(traj.t, dtype=float)
    logs = np.log(losses)
    slope, icept = np.polyfit(ts, logs, 1)
    resid = logs - (slope * ts + icept)
    r2 = 1.0 - float(np.sum(resid**2) / np.sum((logs - logs.mean()) ** 2))
    ev = np.linalg.eigvalsh(state.G_train.matrix)
    return EquivalenceResult(cfg, losses, rel, r2, float(slope), float(ev[0]), float(ev[-1]), traj)


# --- kernel stability --------------------------------------------------------------------------


@dataclass(frozen=True)
class StabilityConfig:
    widths: tuple = (256, 1024)
    seeds: tuple = tuple(range(5))
    N: int = 4
    n: int = 5
    m: int = 5
    eta0: float = 0.05
    lam0: float = 0.5
    tau: int = 1
    steps: int = 40
    kernel_interval: int = 20
    max_ratio: float = 0.6  # 0.5 with 20% slack


def kernel_stability(cfg: StabilityConfig = StabilityConfig()) -> WidthSweep:
    """Maximum relative MetaNTK drift during training, per width and seed."""
    out = np.empty((len(cfg.widths), len(cfg.seeds)))
    for i, width in enumerate(cfg.widths):
        for j, seed in enumerate(cfg.seeds):
            spec = dense_spec(width)
            l = spec.kernel_scale
            tasks = gen_tasks(TaskBatchConfig(N=cfg.N, n=cfg.n, m=cfg.m, seed=seed))
            tc = maml.TrainConfig(eta=cfg.eta0 / l, lam=cfg.lam0 / l, tau=cfg.tau, steps=cfg.steps,
                                  kernel_interval=cfg.kernel_interval)
            traj, _ = maml.train(spec, init_params(spec, seed), tasks, tc, log_kernel=True)
            out[i, j] = max(d for d in traj.kernel_drift if d is not None)
    res = WidthSweep(cfg.widths, out)
    res.passed = bool(res.ratios[-1] < cfg.max_ratio)
    res.detail = f"drift ratio {res.ratios[-1]:.4g} < {cfg.max_ratio}"
    return res


# --- PSD sweep ---------------------------------------------------------------------------------


def psd_sweep(seeds: Sequence[int] = range(3), tolerance: float = 1e-8):
    """Smallest ``lambda_min / lambda_max`` over every kind, base, time mode and activation.

    Returns:
        ``(CheckResult, rows)`` with one row per assembled kernel.
    """
    modes = [Continuous(0.0), Continuous(0.5), Continuous(math.inf), Discrete(0.5, 3)]
    rows, worst = [], math.inf
    for activation in ("relu", "erf"):
        for k in (1, 2):
            spec = dense_spec(64, 2, d=2, k=k, activation=activation)
            for seed in seeds:
                tasks = gen_tasks(TaskBatchConfig(N=3, n=4, m=4, d=2, k=k, seed=seed,
                                                  family="sinusoid" if k == 1 else "blobs"))
                bases = {"empirical": EmpiricalNTK(spec, init_params(spec, seed)), "analytic": AnalyticNTK(spec)}
                for base_name, base in bases.items():
                    for kind in ("ntk", "metantk", "anil"):
                        for mode in modes:
                            ev = np.linalg.eigvalsh(assemble_train_kernel(tasks, base, mode, 1e-9, kind).matrix)
                            ratio = ev[0] / ev[-1]
                            worst = min(worst, ratio)
                            rows.append([activation, k, seed, base_name, kind, repr(mode), ev[0], ev[-1]])
    check = CheckResult("min_eig_ratio", float(worst), -tolerance, worst >= -tolerance, f"{len(rows)} kernels")
    return check, rows


PSD_HEADER = ["activation", "k", "seed", "base", "kind", "mode", "lambda_min", "lambda_max"]


# --- NAS --------------------------------------------------------------------------------------


def pathology_supernet(width: int = 16, d: int = 2) -> nas.SuperNet:
    """One cell where node 2 is fed only by an edge holding {dense, dense_relu, zero}.

    If zero were the last operator on that edge, every later node would be
    constant and the kernel would collapse to the readout bias.
    """
    cfg = nas.SuperNetConfig(
        input_dim=d,
        width=width,
        num_cells=1,
        nodes=3,
        template=((0, 2), (2, 3), (2, 4), (3, 4)),
        edge_ops=((0, ("dense", "dense_relu", "zero")),),
    )
    return nas.build_supernet(cfg)


@dataclass
class DiscriminationResult:
    pruned_round: list  # per seed: round in which zero left the pathological edge (None: it survived)
    final_round: int
    required: int

    @property
    def hits(self) -> int:
        return sum(r is not None and r < self.final_round for r in self.pruned_round)

    @property
    def first_round_hits(self) -> int:
        return sum(r == 1 for r in self.pruned_round)

    @property
    def passed(self) -> bool:
        return self.hits >= self.required

    header = ["seed", "zero_pruned_round"]

    def rows(self):
        return [[s, "" if r is None else r] for s, r in enumerate(self.pruned_round)]


def nas_discrimination(seeds: Sequence[int] = range(20), required: int = 18) -> DiscriminationResult:
    """Run the search on the planted supernet once per seed."""
    supernet = pathology_supernet()
    zero = int(nas.OperatorKind.ZERO)
    rounds, final = [], 0
    for seed in seeds:
        tasks = gen_tasks(TaskBatchConfig(N=4, n=5, m=5, d=2, seed=seed))
        config = nas.SearchConfig(kernel=nas.KernelConfig(seeds=(3 * seed, 3 * seed + 1, 3 * seed + 2)),
                                  probe_seed=seed)
        _, audit = nas.search(supernet, tasks, config)
        final = max(final, max(r[0] for r in audit))
        hit = [r[0] for r in audit if r[1] == 0 and r[5] == nas.OperatorKind(zero).label and r[-1] == "yes"]
        rounds.append(hit[0] if hit else None)
    return DiscriminationResult(rounds, final, required)
