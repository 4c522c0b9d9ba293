"""Acceptance criteria C1-C12, each at its stated tolerance and runtime budget.

Every test prints exactly one ``C<k> PASS|FAIL ...`` line, whether or not it
passes, and then asserts the verdict.
"""

import json
import math
import time

import numpy as np
import pytest

from metantk import experiments, nas
from metantk.cli import main
from metantk.net import NetworkSpec, init_params
from metantk.regions import ProbeSet, count_linear_regions, sample_probes
from metantk.tasks import TaskBatchConfig, gen_tasks


@pytest.fixture
def verdict(capsys):
    def report(cid: str, passed: bool, detail: str, elapsed: float, budget: float = math.inf):
        within = elapsed < budget
        ok = bool(passed and within)
        limit = "" if math.isinf(budget) else f" (budget {budget:.0f}s)"
        with capsys.disabled():
            print(f"\n{cid} {'PASS' if ok else 'FAIL'} {detail} [{elapsed:.1f}s{limit}]")
        assert passed, detail
        assert within, f"{cid} took {elapsed:.1f}s, budget {budget:.0f}s"

    return report


@pytest.fixture(scope="module")
def equivalence():
    start = time.perf_counter()
    res = experiments.equivalence_run()
    return res, time.perf_counter() - start


def test_c1_gradient_oracle(verdict):
    start = time.perf_counter()
    res = experiments.gradient_check()
    verdict("C1", res.passed, f"max |autodiff - FD| = {res.value:.3g} < 1e-5 ({res.detail})",
            time.perf_counter() - start, 10)


def test_c2_zero_inner_time_reduces_to_ntk(verdict):
    start = time.perf_counter()
    res = experiments.kernel_reduction(width=64, seeds=range(5))
    verdict("C2", res.passed, f"max entrywise gap MetaNTK/ANIL vs NTK = {res.value:.3g} <= 1e-12",
            time.perf_counter() - start, 30)


def test_c3_direct_kernel_matches_composite(verdict):
    start = time.perf_counter()
    res = experiments.direct_vs_composite()
    means = " > ".join(f"{m:.4g}" for m in res.means)
    verdict("C3", res.passed, f"rel. Frobenius distance over widths {res.widths}: {means}; final < 0.15",
            time.perf_counter() - start, 300)


def test_c4_empirical_kernel_converges_to_analytic(verdict):
    start = time.perf_counter()
    res = experiments.analytic_convergence()
    means = " > ".join(f"{m:.4g}" for m in res.means)
    ratios = ", ".join(f"{r:.3f}" for r in res.ratios)
    verdict("C4", res.passed, f"rel. distance {means}; consecutive ratios {ratios} <= 0.8",
            time.perf_counter() - start, 300)


def test_c5_training_matches_closed_form(verdict, equivalence):
    res, elapsed = equivalence
    detail = ", ".join(f"t={t}: {v:.3%}" for t, v in sorted(res.rel_rmse.items()))
    verdict("C5", res.equivalence_passed, f"relative RMSE {detail} (all < 5%)", elapsed, 300)


def test_c6_linear_rate(verdict, equivalence):
    res, elapsed = equivalence
    detail = (f"R2 = {res.r2:.4f} > 0.98; per-step factor {res.empirical_factor:.8f} <= bound "
              f"{res.bound_factor:.10f} x 1.1; rate {-res.slope:.3g} >= 0.9 x bound rate "
              f"{-math.log(res.bound_factor):.3g}")
    verdict("C6", res.rate_passed, detail, elapsed)


def test_c7_kernel_stability(verdict):
    start = time.perf_counter()
    res = experiments.kernel_stability()
    means = ", ".join(f"l={w}: {m:.4g}" for w, m in zip(res.widths, res.means))
    verdict("C7", res.passed, f"max relative drift {means}; ratio {res.ratios[-1]:.3f} < 0.6",
            time.perf_counter() - start, 300)


def test_c8_assembled_kernels_are_psd(verdict):
    start = time.perf_counter()
    res, rows = experiments.psd_sweep()
    verdict("C8", res.passed, f"min lambda_min / lambda_max = {res.value:.3g} >= -1e-8 over {len(rows)} kernels",
            time.perf_counter() - start)


def test_c9_nas_mechanics(verdict, tmp_path):
    start = time.perf_counter()
    supernet = nas.build_supernet(nas.SuperNetConfig(input_dim=2, width=8, num_cells=1, nodes=2))
    tasks = gen_tasks(TaskBatchConfig(N=2, n=3, m=3, d=2, seed=0))
    config = nas.SearchConfig(kernel=nas.KernelConfig(seeds=(0, 1)), probe_count=64)
    audits = []
    for run in range(2):
        arch, audit = nas.search(supernet, tasks, config)
        audits.append(nas.write_audit(tmp_path / f"audit{run}.csv", audit).read_bytes())
    rounds = max(r[0] for r in audit)

    ranked = nas.importance_ranks([nas.ScoreRecord((0, j), c, r) for j, (c, r) in enumerate(zip([5, 1, 3], [2, 9, 4]))])
    fixture = nas.build_supernet(
        nas.SuperNetConfig(input_dim=2, num_cells=1, nodes=1, template=((0, 2),), ops=("skip", "zero", "dense"))
    )
    _, pruned = nas.prune_round(fixture, ranked)

    passed = rounds == 5 and arch.supernet.is_single_path and audits[0] == audits[1] and pruned == [(0, 0)]
    detail = (f"{rounds} rounds (want 5); audit identical across runs: {audits[0] == audits[1]}; "
              f"fixture s = {[r.s for r in ranked]}, pruned o{pruned[0][1] + 1}")
    verdict("C9", passed, detail, time.perf_counter() - start)


def test_c10_nas_prunes_planted_zero(verdict):
    start = time.perf_counter()
    res = experiments.nas_discrimination(range(20), required=18)
    detail = (f"zero pruned before final round {res.final_round} in {res.hits}/20 runs (need 18); "
              f"in round 1 in {res.first_round_hits}/20")
    verdict("C10", res.passed, detail, time.perf_counter() - start, 600)


def test_c11_shipped_nas_defaults(verdict, tmp_path):
    start = time.perf_counter()
    out = tmp_path / "nas"
    argv = ["nas-search", "--out", str(out), "--set", "supernet.num_cells=1", "--set", "supernet.nodes=1",
            "--set", "supernet.width=8", "--set", "search.probe_count=16", "--set", "kernel.seeds=[0]"]
    status = main(argv)
    cfg = json.loads((out / "manifest.json").read_text())["config"]
    passed = status == 0 and cfg["kernel.ridge"] == 0.001 and cfg["kernel.lam_tau"] == math.inf
    verdict("C11", passed, f"manifest ridge = {cfg['kernel.ridge']}, lam_tau = {cfg['kernel.lam_tau']}",
            time.perf_counter() - start)


def test_c12_linear_regions(verdict):
    start = time.perf_counter()
    affine = NetworkSpec(3, (), 2)
    r_affine = count_linear_regions(affine, init_params(affine, 0), sample_probes(3, 256))

    single = NetworkSpec(1, (1,), 1)
    p = np.zeros(single.n_params)
    p[single.layout["W1"].slice] = 1.0
    p[single.layout["W2"].slice] = 1.0
    r_single = count_linear_regions(single, p, ProbeSet(np.linspace(-1, 1, 9)[:, None]))

    monotone = 0
    for seed in range(20):
        spec = NetworkSpec(2, (8, 8), 1, sigma_w=math.sqrt(2), sigma_b=0.3)
        params = init_params(spec, seed)
        probes = sample_probes(2, 400, seed=seed).inputs
        counts = [count_linear_regions(spec, params, probes[:P]) for P in (25, 50, 100, 200, 400)]
        monotone += counts == sorted(counts)
    passed = r_affine == 1 and r_single == 2 and monotone == 20
    verdict("C12", passed, f"affine R = {r_affine}; single ReLU R = {r_single}; monotone on {monotone}/20 nets",
            time.perf_counter() - start)
