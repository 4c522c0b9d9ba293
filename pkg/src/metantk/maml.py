"""MAML with a square loss: inner adaptation, meta-outputs and exact outer gradients.

Outer gradients differentiate straight through the unrolled inner loop, so the
second-order ``(I - lam * Hessian)`` factors are included automatically.
Per-task terms are summed in the fixed task order, so results do not depend on
scheduling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import partial
from typing import Optional, Sequence

import jax
import jax.numpy as jnp
import numpy as np

from metantk.report import emit_report
from metantk.tasks import Task

DIVERGENCE_FACTOR = 1e6


class DivergenceError(RuntimeError):
    """Training produced a non-finite or exploding loss."""

    def __init__(self, step: int, loss: float):
        super().__init__(f"meta-loss diverged at step {step} (loss={loss!r}); reduce eta")
        self.step = step
        self.loss = loss


@dataclass(frozen=True)
class TrainConfig:
    """Full-batch outer gradient descent settings.

    Args:
        eta: outer learning rate (raw parameter-space step).
        lam: inner learning rate (raw parameter-space step).
        tau: number of inner gradient steps.
        steps: number of outer updates.
        seed: recorded for provenance; initialization is drawn by the caller.
        kernel_interval: log the meta-kernel drift every this many steps.
        readout_only: adapt only the readout layer in the inner loop (ANIL).
        max_halvings: if positive, halve the step (up to this many times) until
            the loss strictly decreases; training stops when no halving helps.
    """

    eta: float
    lam: float
    tau: int = 1
    steps: int = 100
    seed: int = 0
    kernel_interval: int = 10
    readout_only: bool = False
    max_halvings: int = 0

    def __post_init__(self):
        if not (self.eta > 0 and self.lam > 0):
            raise ValueError("eta and lam must be positive")
        if self.tau < 1:
            raise ValueError("tau must be at least 1")
        if self.steps < 0 or self.kernel_interval < 1 or self.max_halvings < 0:
            raise ValueError("steps, kernel_interval and max_halvings must be nonnegative (interval >= 1)")


@dataclass
class Trajectory:
    """Per-step training records; ``probe_outputs[i]`` stacks the flattened
    meta-outputs of all probe tasks at step ``t[i]``."""

    t: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    param_dist: list = field(default_factory=list)
    kernel_drift: list = field(default_factory=list)
    probe_outputs: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.t)

    def header(self) -> list[str]:
        n_probe = len(self.probe_outputs[0]) if self.probe_outputs else 0
        return ["t", "loss", "param_dist", "kernel_drift"] + [f"probe_{j}" for j in range(n_probe)]

    def rows(self):
        for i, t in enumerate(self.t):
            drift = self.kernel_drift[i]
            yield [t, self.loss[i], self.param_dist[i], "" if drift is None else drift, *self.probe_outputs[i]]

    def to_csv(self, path):
        return emit_report(path, self.header(), self.rows())


def _support_loss(net, params, Xs, Ys):
    r = net.apply(params, Xs) - Ys
    return 0.5 * jnp.sum(r * r)


def _adapt(net, params, Xs, Ys, lam, tau, readout_only):
    mask = None
    if readout_only:
        mask = jnp.zeros(params.shape[0], dtype=params.dtype).at[net.readout_slice].set(1.0)
    for _ in range(tau):
        g = jax.grad(_support_loss, argnums=1)(net, params, Xs, Ys)
        if mask is not None:
            g = g * mask
        params = params - lam * g
    return params


def _output(net, params, X, Xs, Ys, lam, tau, readout_only):
    return net.apply(_adapt(net, params, Xs, Ys, lam, tau, readout_only), X)


def _loss(net, params, batch, lam, tau, readout_only):
    total = 0.0
    for X, Y, Xs, Ys in batch:
        r = _output(net, params, X, Xs, Ys, lam, tau, readout_only) - Y
        total = total + 0.5 * jnp.sum(r * r)
    return total


_STATIC = ("tau", "readout_only")
_adapt_jit = partial(jax.jit, static_argnames=_STATIC)(_adapt)
_output_jit = partial(jax.jit, static_argnames=_STATIC)(_output)
_loss_jit = partial(jax.jit, static_argnames=_STATIC)(_loss)
_loss_and_grad = partial(jax.jit, static_argnames=_STATIC)(jax.value_and_grad(_loss, argnums=1))


@partial(jax.jit, static_argnames=_STATIC)
def _output_jacobian(net, params, X, Xs, Ys, lam, tau, readout_only):
    return jax.jacrev(lambda p: _output(net, p, X, Xs, Ys, lam, tau, readout_only).reshape(-1))(params)


def _check(lam, tau):
    if lam < 0 or tau < 0 or int(tau) != tau:
        raise ValueError(f"need lam >= 0 and integer tau >= 0, got lam={lam}, tau={tau}")
    return float(lam), int(tau)


def _params(net, params):
    params = jnp.asarray(np.asarray(params, dtype=np.float64))
    if params.shape != (net.layout.size,):
        raise ValueError(f"parameter vector has shape {params.shape}, expected ({net.layout.size},)")
    return params


def _task_arrays(task: Task):
    return tuple(jnp.asarray(a) for a in (task.X, task.Y, task.X_support, task.Y_support))


def inner_adapt(net, params, support, lam: float, tau: int, readout_only: bool = False) -> np.ndarray:
    """``tau`` gradient steps of size ``lam`` on ``0.5 * ||f(X') - Y'||^2``.

    Args:
        support: ``(X_support, Y_support)`` pair.
    """
    lam, tau = _check(lam, tau)
    Xs, Ys = (jnp.asarray(np.asarray(a, dtype=np.float64)) for a in support)
    return np.asarray(_adapt_jit(net, _params(net, params), Xs, Ys, lam, tau=tau, readout_only=readout_only))


def meta_output(net, params, task: Task, lam: float, tau: int, readout_only: bool = False) -> np.ndarray:
    """Query outputs ``(n, k)`` of the network adapted on the task's support set."""
    lam, tau = _check(lam, tau)
    X, _, Xs, Ys = _task_arrays(task)
    return np.asarray(_output_jit(net, _params(net, params), X, Xs, Ys, lam, tau=tau, readout_only=readout_only))


def meta_loss(net, params, tasks: Sequence[Task], lam: float, tau: int, readout_only: bool = False) -> float:
    """``0.5 * sum_i ||F_i - Y_i||^2`` over tasks in order."""
    lam, tau = _check(lam, tau)
    batch = tuple(_task_arrays(t) for t in tasks)
    return float(_loss_jit(net, _params(net, params), batch, lam, tau=tau, readout_only=readout_only))


def outer_grad(net, params, tasks: Sequence[Task], lam: float, tau: int, readout_only: bool = False) -> np.ndarray:
    """Exact gradient of :func:`meta_loss` through the unrolled inner loop."""
    lam, tau = _check(lam, tau)
    batch = tuple(_task_arrays(t) for t in tasks)
    _, g = _loss_and_grad(net, _params(net, params), batch, lam, tau=tau, readout_only=readout_only)
    return np.asarray(g)


def meta_output_jacobian(net, params, task: Task, lam: float, tau: int, readout_only: bool = False) -> np.ndarray:
    """Jacobian ``(n k, D)`` of the flattened meta-output; row ``s * k + o``."""
    lam, tau = _check(lam, tau)
    X, _, Xs, Ys = _task_arrays(task)
    return np.asarray(
        _output_jacobian(net, _params(net, params), X, Xs, Ys, lam, tau=tau, readout_only=readout_only)
    )


def meta_kernel(
    net,
    params,
    tasks: Sequence[Task],
    lam: float,
    tau: int,
    readout_only: bool = False,
    col_tasks: Optional[Sequence[Task]] = None,
) -> np.ndarray:
    """``(1 / scale) * dF dF^T`` over the stacked meta-outputs of ``tasks``.

    Jacobians are built one task at a time to bound peak memory.
    """
    rows = np.vstack([meta_output_jacobian(net, params, t, lam, tau, readout_only) for t in tasks])
    if col_tasks is None:
        G = rows @ rows.T
        G = 0.5 * (G + G.T)
    else:
        cols = np.vstack([meta_output_jacobian(net, params, t, lam, tau, readout_only) for t in col_tasks])
        G = rows @ cols.T
    return G / net.kernel_scale


def train(
    net,
    params0,
    tasks: Sequence[Task],
    config: TrainConfig,
    probes: Optional[Sequence[Task]] = None,
    log_kernel: bool = False,
):
    """Full-batch gradient descent on the meta-loss.

    The loss is recorded before each update, so ``steps=0`` yields a single
    record. Relative kernel drift ``||G_t - G_0||_F / ||G_0||_F`` is logged every
    ``config.kernel_interval`` steps and at the last step.

    Returns:
        ``(trajectory, final_params)``.

    Raises:
        DivergenceError: the loss became non-finite or exceeded
            ``DIVERGENCE_FACTOR`` times its initial value.
    """
    lam, tau, ro = config.lam, config.tau, config.readout_only
    params = _params(net, params0)
    start = params
    batch = tuple(_task_arrays(t) for t in tasks)
    probe_arrays = [_task_arrays(p) for p in probes or []]
    G0 = meta_kernel(net, params, tasks, lam, tau, ro) if log_kernel else None
    G0_norm = float(np.linalg.norm(G0)) if log_kernel else 1.0
    traj = Trajectory()
    loss, grad = _loss_and_grad(net, params, batch, lam, tau=tau, readout_only=ro)
    initial = float(loss)
    if not math.isfinite(initial):
        raise DivergenceError(0, initial)

    for t in range(config.steps + 1):
        loss = float(loss)
        if not math.isfinite(loss) or loss > DIVERGENCE_FACTOR * max(initial, np.finfo(float).tiny):
            raise DivergenceError(t, loss)
        drift = None
        if G0 is not None and (t % config.kernel_interval == 0 or t == config.steps):
            drift = float(np.linalg.norm(meta_kernel(net, params, tasks, lam, tau, ro) - G0)) / G0_norm
        outs = [np.asarray(_output_jit(net, params, X, Xs, Ys, lam, tau=tau, readout_only=ro)).ravel()
                for X, _, Xs, Ys in probe_arrays]
        traj.t.append(t)
        traj.loss.append(loss)
        traj.param_dist.append(float(jnp.linalg.norm(params - start)))
        traj.kernel_drift.append(drift)
        traj.probe_outputs.append(np.concatenate(outs) if outs else np.zeros(0))
        if t == config.steps:
            break

        step = config.eta
        new = params - step * grad
        new_loss, new_grad = _loss_and_grad(net, new, batch, lam, tau=tau, readout_only=ro)
        halvings = 0
        while config.max_halvings and not float(new_loss) < loss:
            if halvings == config.max_halvings:
                return traj, np.asarray(params)
            halvings += 1
            step /= 2
            new = params - step * grad
            new_loss, new_grad = _loss_and_grad(net, new, batch, lam, tau=tau, readout_only=ro)
        params, loss, grad = new, new_loss, new_grad
    return traj, np.asarray(params)
