import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metantk.nas import (
    PROTECTED,
    Architecture,
    KernelConfig,
    OperatorKind,
    ScoreRecord,
    SearchConfig,
    SuperNetConfig,
    build_supernet,
    delta_scores,
    importance_ranks,
    materialize,
    prune_round,
    score_network,
    search,
)
from metantk.net import NetworkSpec, forward
from metantk.regions import sample_probes
from metantk.tasks import TaskBatchConfig, gen_tasks

SMALL = SuperNetConfig(input_dim=2, width=8, num_cells=1, nodes=2)


@pytest.fixture(scope="module")
def tasks():
    return gen_tasks(TaskBatchConfig(N=2, n=3, m=3, d=2, seed=0))


def _records(dC, dR, edge=0):
    return [ScoreRecord((edge, j), c, r) for j, (c, r) in enumerate(zip(dC, dR))]


def test_default_template_edge_count():
    net = build_supernet(SuperNetConfig())
    assert len(net.edges) == 2 * 3 * (3 + 3) // 2 == 18
    assert net.n_alive == 18 * 6
    assert build_supernet(SuperNetConfig()) == net


def test_cyclic_template_rejected():
    with pytest.raises(ValueError, match="cyclic"):
        SuperNetConfig(nodes=2, template=((0, 2), (3, 2)))
    with pytest.raises(ValueError):
        SuperNetConfig(nodes=2, template=((0, 7),))


def test_all_zero_path_outputs_constant():
    sn = build_supernet(SMALL)
    zero = type(sn)(sn.topology, tuple((OperatorKind.ZERO,) for _ in sn.alive))
    net, params = materialize(Architecture(zero), 0)
    X = sample_probes(2, 10).inputs
    out = forward(net, params, X)[0]
    np.testing.assert_allclose(out, np.broadcast_to(params[net.layout["readout.b"].slice], out.shape))


def test_skip_path_is_affine_in_input():
    sn = build_supernet(SMALL)
    skip = type(sn)(sn.topology, tuple((OperatorKind.SKIP,) for _ in sn.alive))
    net, params = materialize(skip, 1)
    X = sample_probes(2, 6).inputs
    out = forward(net, params, X)[0]
    A = np.hstack([X, np.ones((6, 1))])
    coef, *_ = np.linalg.lstsq(A, out, rcond=None)
    np.testing.assert_allclose(A @ coef, out, atol=1e-12)


def test_single_dense_relu_edge_matches_plain_network():
    cfg = SuperNetConfig(input_dim=3, width=5, num_cells=1, nodes=1, template=((0, 2),), ops=("dense_relu",),
                         sigma_b=0.0)
    net, params = materialize(build_supernet(cfg), 2)
    p = net.layout.unflatten(params)
    X = np.random.default_rng(0).normal(size=(4, 3))
    stem = X @ p["stem.W"] + p["stem.b"]
    hidden = np.maximum(stem @ p["e0.dense_relu.W"] + p["e0.dense_relu.b"], 0.0)
    expected = hidden @ p["readout.W"] + p["readout.b"]
    np.testing.assert_allclose(forward(net, params, X)[0], expected, rtol=1e-12, atol=1e-12)

    # the same map written as a plain dense ReLU net acting on stem features
    spec = NetworkSpec(5, (5,), 1, use_bias=True)
    flat = np.concatenate([p["e0.dense_relu.W"].ravel(), p["e0.dense_relu.b"], p["readout.W"].ravel(), p["readout.b"]])
    np.testing.assert_allclose(forward(spec, flat, stem)[0], expected, rtol=1e-12, atol=1e-12)


def test_pure_linear_net_has_one_region_and_scores_are_deterministic(tasks):
    sn = build_supernet(SMALL)
    linear = type(sn)(sn.topology, tuple((OperatorKind.DENSE,) for _ in sn.alive))
    kernel = KernelConfig(seeds=(0, 1))
    probes = sample_probes(2, 64)
    C, R = score_network(linear, tasks, kernel, probes)
    assert R == 1.0
    assert C >= 1.0
    assert score_network(linear, tasks, kernel, probes) == (C, R)


def test_removing_zero_next_to_skip_changes_nothing(tasks):
    cfg = SuperNetConfig(input_dim=2, width=8, num_cells=1, nodes=2, ops=("skip", "zero", "dense_relu"))
    sn = build_supernet(cfg)
    dC, dR = delta_scores(sn, 0, "zero", tasks, KernelConfig(seeds=(0,)), sample_probes(2, 64))
    assert dC == 0.0 and dR == 0.0


def test_sole_operator_is_protected(tasks):
    sn = build_supernet(SuperNetConfig(input_dim=2, width=8, num_cells=1, nodes=1, ops=("dense",)))
    assert delta_scores(sn, 0, "dense", tasks, KernelConfig(seeds=(0,)), sample_probes(2, 8)) == PROTECTED


def test_hand_traced_rank_fixture():
    ranked = importance_ranks(_records([5, 1, 3], [2, 9, 4]))
    assert [r.s_C for r in ranked] == [0, 2, 1]
    assert [r.s_R for r in ranked] == [0, 2, 1]
    assert [r.s for r in ranked] == [0, 4, 2]
    sn = build_supernet(SuperNetConfig(input_dim=2, num_cells=1, nodes=1, template=((0, 2),),
                                       ops=("skip", "zero", "dense")))
    pruned_net, pruned = prune_round(sn, ranked)
    assert pruned == [(0, 0)]
    assert pruned_net.alive[0] == (OperatorKind.ZERO, OperatorKind.DENSE)


def test_equal_deltas_fall_back_to_id_order():
    ranked = importance_ranks(_records([1.0] * 4, [2.0] * 4))
    assert [r.s for r in ranked] == [0, 2, 4, 6]


def test_non_finite_delta_rejected():
    with pytest.raises(ValueError):
        importance_ranks(_records([math.nan], [0.0]))


@settings(max_examples=50, deadline=None)
@given(
    dC=st.lists(st.integers(-100, 100), min_size=2, max_size=8),
    dR=st.lists(st.integers(-100, 100), min_size=8, max_size=8),
    shift=st.integers(-1000, 1000),
)
def test_ranks_invariant_under_monotone_transforms(dC, dR, shift):
    dR = dR[: len(dC)]
    base = importance_ranks(_records(dC, dR))
    moved = importance_ranks(_records([3 * c + shift for c in dC], [r**3 for r in dR]))
    assert [(r.s_C, r.s_R, r.s) for r in base] == [(r.s_C, r.s_R, r.s) for r in moved]


def test_prune_round_leaves_single_op_edges_alone():
    cfg = SuperNetConfig(input_dim=2, num_cells=1, nodes=2, edge_ops=((0, ("dense",)),))
    sn = build_supernet(cfg)
    records = [ScoreRecord((e, int(op)), 0.0, 0.0) for e, ops in enumerate(sn.alive) for op in ops if len(ops) > 1]
    pruned_net, pruned = prune_round(sn, importance_ranks(records))
    assert pruned_net.alive[0] == sn.alive[0]
    assert pruned_net.n_alive == sn.n_alive - (len(sn.edges) - 1)
    assert all(e != 0 for e, _ in pruned)


def test_single_op_supernet_returns_input(tasks):
    sn = build_supernet(SuperNetConfig(input_dim=2, width=8, num_cells=1, nodes=2, ops=("dense_relu",)))
    arch, audit = search(sn, tasks, SearchConfig(kernel=KernelConfig(seeds=(0,)), probe_count=16))
    assert arch.supernet == sn and audit == []


def test_architecture_text_round_trip():
    sn = build_supernet(SuperNetConfig())
    choice = type(sn)(sn.topology, tuple((ops[i % len(ops)],) for i, ops in enumerate(sn.alive)))
    arch = Architecture(choice)
    assert Architecture.from_text(arch.to_text(), sn) == arch
    with pytest.raises(ValueError):
        Architecture(sn)
    with pytest.raises(ValueError):
        Architecture.from_text("cell 0\n  0 -> 2: conv\n", sn)


@pytest.mark.slow
def test_full_search_rounds_and_shrinkage(tasks):
    sn = build_supernet(SMALL)
    arch, audit = search(sn, tasks, SearchConfig(kernel=KernelConfig(seeds=(0,)), probe_count=64))
    assert max(r[0] for r in audit) == 5
    alive = [sum(1 for r in audit if r[0] == k) for k in range(1, 6)]
    assert alive == [sn.n_alive - k * len(sn.edges) for k in range(5)]
    assert arch.supernet.is_single_path
