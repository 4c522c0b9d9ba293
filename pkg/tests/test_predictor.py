import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metantk.kernels import AnalyticNTK, EmpiricalNTK, KernelMatrix, assemble_test_train, assemble_train_kernel
from metantk.linalg import Continuous, Discrete, LinalgError
from metantk.net import NetworkSpec, init_params
from metantk.predictor import (
    PredictorState,
    closed_form_meta_output,
    emit_predictions,
    empirical_state,
    empirical_test_inputs,
    g_predictor,
    kernel_regression_predict,
)
from metantk.tasks import Task, TaskBatchConfig, gen_tasks

SPEC = NetworkSpec(1, (32, 32), 1, sigma_w=math.sqrt(2), sigma_b=0.1)


class FixedKernel:
    """Scalar kernel given by an explicit matrix over enumerated points."""

    def __init__(self, points, K):
        self.points = np.asarray(points, dtype=float)
        self.K = np.asarray(K, dtype=float)

    def _index(self, X):
        return [int(np.flatnonzero(np.all(self.points == x, axis=1))[0]) for x in np.atleast_2d(X)]

    def gram(self, X1, X2):
        return self.K[np.ix_(self._index(X1), self._index(X2))]

    def nngp(self):
        return self


def _analytic_tasks(seed, N=3):
    return gen_tasks(TaskBatchConfig(N=N, n=4, m=4, seed=seed))


def _analytic_state(tasks, eta=1.0, ridge=0.0, mode_inner=Continuous(0.5)):
    base = AnalyticNTK(SPEC)
    G = assemble_train_kernel(tasks, base, mode_inner, ridge)
    F0 = np.concatenate([g_predictor(base, t, mode_inner, ridge) for t in tasks])
    Y = np.concatenate([t.Y.ravel() for t in tasks])
    return base, PredictorState(G, F0, Y, eta, 1.0, ridge)


def test_t_zero_returns_initial_outputs():
    tasks = _analytic_tasks(0)
    base, state = _analytic_state(tasks)
    strip = assemble_test_train(tasks[0], tasks, base, Continuous(0.5), 0.0)
    F0 = np.arange(4.0)
    out = closed_form_meta_output(state, strip, F0, 0)
    assert np.array_equal(out, F0) and out is not F0


def test_converged_outputs_interpolate_training_tasks():
    tasks = _analytic_tasks(1)
    base, state = _analytic_state(tasks)
    for i, task in enumerate(tasks):
        strip = assemble_test_train(task, tasks, base, Continuous(0.5), 0.0)
        out = closed_form_meta_output(state, strip, state.F0_train[4 * i : 4 * i + 4], math.inf)
        np.testing.assert_allclose(out, task.Y.ravel(), atol=1e-6)


def test_singular_kernel_at_infinite_time_raises():
    G = KernelMatrix(np.zeros((2, 2)), "metantk")
    state = PredictorState(G, np.zeros(2), np.ones(2))
    with pytest.raises(LinalgError):
        closed_form_meta_output(state, np.zeros((1, 2)), np.zeros(1), math.inf)


def test_state_validation():
    G = KernelMatrix(np.eye(2), "metantk")
    with pytest.raises(ValueError):
        PredictorState(G, np.zeros(3), np.zeros(2))
    with pytest.raises(ValueError):
        PredictorState(KernelMatrix(np.array([[1.0, 2.0], [0.0, 1.0]]), "metantk"), np.zeros(2), np.zeros(2))
    with pytest.raises(ValueError):
        PredictorState(G, np.zeros(2), np.zeros(2), eta=0.0)
    with pytest.raises(ValueError):
        PredictorState(G, np.zeros(2), np.zeros(2), outer="euler").time_mode(1.0)


def test_discrete_outer_mode_matches_linearized_steps():
    rng = np.random.default_rng(3)
    A = rng.normal(size=(3, 3))
    G = A @ A.T
    Y, F0 = rng.normal(size=3), rng.normal(size=3)
    state = PredictorState(KernelMatrix(G, "metantk"), F0, Y, eta=0.05, outer="discrete")
    F = F0.copy()
    for _ in range(7):
        F = F - 0.05 * G @ (F - Y)
    np.testing.assert_allclose(closed_form_meta_output(state, G, F0, 7), F, rtol=1e-12)


def test_monotone_interpolation_on_training_tasks():
    tasks = _analytic_tasks(2)
    base, state = _analytic_state(tasks, ridge=1e-6)
    strip = state.G_train
    dists = [
        np.linalg.norm(closed_form_meta_output(state, strip, state.F0_train, t) - state.Y_train)
        for t in (0, 0.1, 1, 10, 100, math.inf)
    ]
    assert all(b <= a + 1e-9 for a, b in zip(dists, dists[1:]))


def test_g_predictor_hand_examples():
    base = FixedKernel([[0.0], [1.0]], [[1.0, 1.0], [1.0, 1.0]])
    task = Task(X=[[0.0]], Y=[[0.0]], X_support=[[1.0]], Y_support=[[5.0]])
    assert g_predictor(base, task, Continuous(math.inf)) == pytest.approx([5.0])
    assert np.array_equal(g_predictor(base, task, Continuous(0.0)), [0.0])
    zero = Task(X=[[0.0]], Y=[[0.0]], X_support=[[1.0]], Y_support=[[0.0]])
    assert np.array_equal(g_predictor(base, zero, Continuous(math.inf)), [0.0])


def test_g_predictor_ridge_posterior_mean():
    task = _analytic_tasks(4, N=1)[0]
    base = AnalyticNTK(SPEC)
    K = base.gram(np.vstack([task.X, task.X_support]), np.vstack([task.X, task.X_support]))
    expected = K[:4, 4:] @ np.linalg.solve(K[4:, 4:] + 0.1 * np.eye(4), task.Y_support.ravel())
    np.testing.assert_allclose(g_predictor(base, task, Continuous(math.inf), ridge=0.1), expected, rtol=1e-10)


@settings(max_examples=10, deadline=None)
@given(scale=st.floats(-3.0, 3.0), seed=st.integers(0, 50))
def test_predictions_are_linear_in_labels(scale, seed):
    tasks = _analytic_tasks(seed)
    test = _analytic_tasks(seed + 100, N=1)[0]

    def scaled(t):
        return Task(t.X, scale * t.Y, t.X_support, scale * t.Y_support)

    base = AnalyticNTK(SPEC)
    args = (Continuous(0.7), Continuous(2.0), 1e-4)
    ref = kernel_regression_predict(tasks, base, test, *args)
    out = kernel_regression_predict([scaled(t) for t in tasks], base, scaled(test), *args)
    np.testing.assert_allclose(out, scale * ref, rtol=1e-9, atol=1e-9)


def test_kernel_regression_limits():
    tasks = _analytic_tasks(5)
    base = AnalyticNTK(SPEC)
    inner = Continuous(0.5)
    held_out = _analytic_tasks(6, N=1)[0]
    g = g_predictor(base, held_out, inner)
    np.testing.assert_array_equal(kernel_regression_predict(tasks, base, held_out, inner, Continuous(0.0)), g)
    for task in tasks:
        out = kernel_regression_predict(tasks, base, task, inner, Continuous(math.inf))
        np.testing.assert_allclose(out, task.Y.ravel(), atol=1e-6)


def test_anil_kernel_regression_interpolates():
    tasks = _analytic_tasks(7)
    base = AnalyticNTK(SPEC)
    for task in tasks:
        out = kernel_regression_predict(tasks, base, task, Continuous(1.0), Continuous(math.inf), kind="anil")
        np.testing.assert_allclose(out, task.Y.ravel(), atol=1e-6)


def test_meta_training_term_beats_support_fit_alone():
    # tasks share a common sinusoid shape, which only the meta-training term can learn
    family = dict(amplitude=(1.0, 2.0), phase=(0.0, 0.5))
    inner, ridge = Continuous(1.0), 1e-3
    base = AnalyticNTK(SPEC)
    gains = []
    for seed in range(10):
        tasks = gen_tasks(TaskBatchConfig(N=10, n=5, m=5, seed=seed, **family))
        held = gen_tasks(TaskBatchConfig(N=5, n=5, m=5, seed=1000 + seed, **family))
        kr = g_only = 0.0
        for task in held:
            y = task.Y.ravel()
            kr += np.mean((kernel_regression_predict(tasks, base, task, inner, Continuous(math.inf), ridge) - y) ** 2)
            g_only += np.mean((g_predictor(base, task, inner, ridge) - y) ** 2)
        gains.append(g_only - kr)
    assert np.mean(gains) > 0


def test_empirical_closed_form_tracks_centered_kernel_regression():
    tasks = gen_tasks(TaskBatchConfig(N=2, n=3, m=3, seed=8))
    test = gen_tasks(TaskBatchConfig(N=1, n=3, m=3, seed=9))[0]
    gaps = []
    for width in (64, 1024):
        spec = NetworkSpec(1, (width, width), 1, sigma_w=math.sqrt(2), sigma_b=0.1)
        params = init_params(spec, 0)
        lam, eta = 0.5 / width, 0.1 / width
        state = empirical_state(spec, params, tasks, lam, 1, eta)
        strip, F0 = empirical_test_inputs(spec, params, test, tasks, lam, 1)
        closed = closed_form_meta_output(state, strip, F0, 20)
        kr = kernel_regression_predict(tasks, EmpiricalNTK(spec, params), test, Discrete(0.5, 1), Continuous(0.1 * 20))
        gaps.append(np.linalg.norm(closed - kr) / np.linalg.norm(closed))
    assert gaps[1] < gaps[0]
    assert gaps[1] < 0.05


def test_emit_predictions(tmp_path):
    path = emit_predictions(tmp_path / "pred.csv", [np.array([1.0, 2.0, 3.0, 4.0])], k=2)
    lines = path.read_text().splitlines()
    assert lines[0] == "task,query,output,value"
    assert lines[1:] == ["0,0,0,1", "0,0,1,2", "0,1,0,3", "0,1,1,4"]
