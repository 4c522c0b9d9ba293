"""Closed-form MAML outputs: linearized training dynamics and kernel regression.

Under outer gradient flow with rate ``eta`` on the linearized meta-output, the
outputs at time ``t`` are

    F_t(test) = F_0(test) + G(test, train) T(G(train, train)) (Y - F_0(train))

with ``T = t_tilde(., Continuous(eta * scale * t))``. Here ``scale`` converts
the raw rate into the ``1 / l``-normalized kernel units. ``t = inf`` gives the
converged predictor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from metantk import maml
from metantk.kernels import (
    KernelMatrix,
    _adapt_source,
    _gram,
    assemble_test_train,
    assemble_train_kernel,
    metantk_direct,
)
from metantk.linalg import Continuous, Discrete, TimeMode, as_sym, t_tilde
from metantk.net import forward
from metantk.report import emit_report
from metantk.tasks import Task


@dataclass(frozen=True)
class PredictorState:
    """Everything the closed form needs about the training set at initialization.

    Args:
        G_train: training meta-kernel at initialization.
        F0_train: flattened meta-outputs at initialization, ``(N n k,)``.
        Y_train: flattened query targets, ``(N n k,)``.
        eta: outer learning rate.
        kernel_scale: factor turning ``eta`` into kernel units (``l`` for a
            standard-parameterized network, 1 otherwise).
        ridge: diagonal shift applied before any inversion.
        outer: ``"continuous"`` (gradient flow) or ``"discrete"`` (``t``
            gradient-descent steps on the linearized model).
    """

    G_train: KernelMatrix
    F0_train: np.ndarray
    Y_train: np.ndarray
    eta: float = 1.0
    kernel_scale: float = 1.0
    ridge: float = 0.0
    outer: str = "continuous"

    def __post_init__(self):
        G = self.G_train.matrix
        size = G.shape[0]
        if G.shape != (size, size):
            raise ValueError("training kernel must be square")
        as_sym(G)
        for name in ("F0_train", "Y_train"):
            v = np.asarray(getattr(self, name), dtype=np.float64).ravel()
            if v.shape != (size,):
                raise ValueError(f"{name} has {v.size} entries, kernel has {size} rows")
            object.__setattr__(self, name, v)
        if not self.eta > 0 or not self.kernel_scale > 0 or self.ridge < 0:
            raise ValueError("eta and kernel_scale must be positive, ridge nonnegative")
        if self.outer not in ("continuous", "discrete"):
            raise ValueError(f"unknown outer mode {self.outer!r}")

    def time_mode(self, t: float) -> TimeMode:
        rate = self.eta * self.kernel_scale
        if self.outer == "discrete":
            if t != int(t) or math.isinf(t):
                raise ValueError("discrete outer mode needs a finite integer t")
            return Discrete(rate, int(t))
        return Continuous(math.inf if math.isinf(t) else rate * t)


def closed_form_meta_output(state: PredictorState, test_strip, F0_test, t: float) -> np.ndarray:
    """Meta-outputs on a test task after outer training time ``t``.

    Raises:
        LinalgError: ``t = inf`` with a singular kernel and ``ridge = 0``.
    """
    if t < 0:
        raise ValueError(f"t must be nonnegative, got {t}")
    strip = test_strip.matrix if isinstance(test_strip, KernelMatrix) else np.asarray(test_strip, dtype=float)
    F0_test = np.asarray(F0_test, dtype=np.float64).ravel()
    if strip.shape != (F0_test.size, state.Y_train.size):
        raise ValueError(f"test strip has shape {strip.shape}, expected ({F0_test.size}, {state.Y_train.size})")
    if t == 0:
        return F0_test.copy()
    T = t_tilde(state.G_train.matrix, state.time_mode(t), state.ridge)
    return F0_test + strip @ (T @ (state.Y_train - state.F0_train))


def empirical_state(
    net,
    params,
    tasks: Sequence[Task],
    lam: float,
    tau: int,
    eta: float,
    ridge: float = 0.0,
    readout_only: bool = False,
    outer: str = "continuous",
) -> PredictorState:
    """State built from the exact Jacobian kernel of the meta-output map at ``params``."""
    G = metantk_direct(net, params, tasks, lam, tau, readout_only=readout_only)
    F0 = np.concatenate([maml.meta_output(net, params, t, lam, tau, readout_only).ravel() for t in tasks])
    Y = np.concatenate([t.Y.ravel() for t in tasks])
    return PredictorState(G, F0, Y, eta, net.kernel_scale, ridge, outer)


def empirical_test_inputs(net, params, test_task: Task, tasks: Sequence[Task], lam: float, tau: int,
                          readout_only: bool = False) -> tuple[KernelMatrix, np.ndarray]:
    """``(test strip, F0_test)`` for :func:`closed_form_meta_output`."""
    strip = metantk_direct(net, params, [test_task], lam, tau, col_tasks=tasks, readout_only=readout_only)
    return strip, maml.meta_output(net, params, test_task, lam, tau, readout_only).ravel()


def _is_empirical(base) -> bool:
    return hasattr(base, "net") and hasattr(base, "params")


def g_predictor(base, task: Task, mode: TimeMode, ridge: float = 0.0, center: Optional[bool] = None) -> np.ndarray:
    """Kernel-regression fit of the support set evaluated on the queries.

    Without centering this is ``Theta(X, X') T(Theta(X', X')) Y'``. With
    ``center`` (default for empirical bases) the initial network ``f_0`` is
    subtracted from the support targets and added back on the queries. That
    makes the result the linearized meta-output at initialization.
    """
    if center is None:
        center = _is_empirical(base)
    K = _gram(base, np.vstack([task.X, task.X_support]))
    q = task.n * task.k
    Ys = task.Y_support.ravel()
    f0_query = np.zeros(q)
    if center:
        if not _is_empirical(base):
            raise ValueError("centering needs an empirical base with a network")
        f0_query = forward(base.net, base.params, task.X)[0].ravel()
        Ys = Ys - forward(base.net, base.params, task.X_support)[0].ravel()
    return f0_query + K[:q, q:] @ (t_tilde(K[q:, q:], mode, ridge) @ Ys)


def kernel_regression_predict(
    tasks: Sequence[Task],
    base,
    test_task: Task,
    mode_inner: TimeMode,
    mode_outer: TimeMode,
    ridge: float = 0.0,
    kind: str = "metantk",
    center: Optional[bool] = None,
) -> np.ndarray:
    """``G(test) + K(test, train) T_outer(K(train, train)) (Y - G(train))``.

    ``mode_outer`` carries the outer time in kernel units, e.g.
    ``Continuous(eta * t)``. For ``kind="anil"`` the support fits use the NNGP.
    """
    adapt = _adapt_source(base, kind)
    gbase = adapt if adapt is not None else base
    G = assemble_train_kernel(tasks, base, mode_inner, ridge, kind).matrix
    S = assemble_test_train(test_task, tasks, base, mode_inner, ridge, kind).matrix
    g_test = g_predictor(gbase, test_task, mode_inner if adapt is not None else Continuous(0.0), ridge, center)
    g_train = np.concatenate(
        [g_predictor(gbase, t, mode_inner if adapt is not None else Continuous(0.0), ridge, center) for t in tasks]
    )
    Y = np.concatenate([t.Y.ravel() for t in tasks])
    if isinstance(mode_outer, Continuous) and mode_outer.lam_tau == 0:
        return g_test
    return g_test + S @ (t_tilde(G, mode_outer, ridge) @ (Y - g_train))


def emit_predictions(path, predictions: Sequence[np.ndarray], k: int):
    """CSV rows ``(task, query, output, value)``; row ``s * k + o`` of each vector."""
    rows = []
    for task_id, vec in enumerate(predictions):
        for idx, value in enumerate(np.asarray(vec).ravel()):
            rows.append([task_id, idx // k, idx % k, float(value)])
    return emit_report(path, ["task", "query", "output", "value"], rows)
