"""NTK, NNGP and meta-learning kernels.

Every composite kernel is assembled as a congruence ``P K P^T``. Here ``K`` is
the base kernel Gram over all query and support points of the tasks involved.
Task ``i`` owns the rows of ``P`` that hold ``+I`` at its query columns and
``-A_i`` at its support columns, with the adaptation map

* MAML: ``A_i = Theta(X_i, X'_i) T_i``, ``T_i = t_tilde(Theta(X'_i, X'_i))``;
* ANIL: the same with the NNGP kernel in place of ``Theta``.

Expanding ``P K P^T`` block by block gives exactly the four-term composite
``Theta(X_i, X_j) + A_i Theta(X'_i, X'_j) A_j^T - Theta(X_i, X'_j) A_j^T
- A_i Theta(X'_i, X_j)``. The congruence keeps square assemblies PSD
by construction.

Multi-output kernels use row ``s * k + o`` for output ``o`` of sample ``s``. The
analytic kernels are a scalar kernel tensored with ``I_k``.

Infinite-width recursion
------------------------
Write ``Sigma`` for the pre-activation covariance and ``E[.]`` for the
expectation over ``(u, v) ~ N(0, [[q1, c], [c, q2]])``:

* ReLU: ``E[phi(u) phi(v)] = sqrt(q1 q2) / (2 pi) * (sin t + (pi - t) cos t)`` and
  ``E[phi'(u) phi'(v)] = (pi - t) / (2 pi)`` with ``cos t = c / sqrt(q1 q2)``.
* Erf: ``E[phi(u) phi(v)] = 2 / pi * arcsin(2 c / sqrt((1 + 2 q1)(1 + 2 q2)))`` and
  ``E[phi'(u) phi'(v)] = 4 / pi / sqrt((1 + 2 q1)(1 + 2 q2) - 4 c^2)``.

Under the ``"ntk"`` parameterization
``Sigma^1 = sigma_w^2 <x, x'> / d + sigma_b^2`` and ``Theta^1 = Sigma^1``. Each hidden
layer then applies ``Sigma^{h+1} = sigma_w^2 E[phi phi] + sigma_b^2`` and
``Theta^{h+1} = Sigma^{h+1} + sigma_w^2 E[phi' phi'] Theta^h``.

Under the ``"standard"`` parameterization the ``1 / l``-normalized empirical
NTK converges to a different limit. Input-layer and bias gradients vanish
after normalization, which leaves ``Theta^(1) = E_1[phi phi]`` and
``Theta^(h) = E_h[phi phi] + sigma_w^2 E_h[phi' phi'] Theta^(h-1)``. The forward
covariances are the same as above. With no hidden layer the kernel is exactly
``<x, x'> (+1 with a bias)``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import jax
import jax.numpy as jnp
import numpy as np

from metantk import maml
from metantk.linalg import Continuous, TimeMode, t_tilde
from metantk.net import NetworkSpec, _as_inputs, _as_params, per_sample_jacobian
from metantk.report import atomic_write_bytes, emit_report
from metantk.tasks import Task

KINDS = ("ntk", "nngp", "metantk", "anil")
MAGIC = b"METANTK1"


@dataclass(frozen=True, eq=False)
class EmpiricalNTK:
    """Finite-width NTK ``(1 / scale) J J^T`` of a network at fixed parameters."""

    net: object
    params: np.ndarray

    def features(self, X) -> np.ndarray:
        return per_sample_jacobian(self.net, self.params, X)

    @property
    def scale(self) -> float:
        return self.net.kernel_scale

    @property
    def output_dim(self) -> int:
        return self.net.output_dim

    def nngp(self) -> "EmpiricalNNGP":
        return EmpiricalNNGP(self.net, self.params)


@dataclass(frozen=True, eq=False)
class EmpiricalNNGP:
    """Readout-restricted NTK: the kernel of training only the last layer."""

    net: object
    params: np.ndarray

    def features(self, X) -> np.ndarray:
        return _readout_jacobian(self.net, _as_params(self.net, self.params), _as_inputs(self.net, X))

    @property
    def scale(self) -> float:
        return self.net.kernel_scale

    @property
    def output_dim(self) -> int:
        return self.net.output_dim

    def nngp(self) -> "EmpiricalNNGP":
        return self


@dataclass(frozen=True)
class AnalyticNTK:
    """Infinite-width NTK of a dense spec (widths only need to be equal)."""

    spec: NetworkSpec

    def __post_init__(self):
        _check_analytic(self.spec)

    def gram(self, X1, X2) -> np.ndarray:
        return np.kron(_analytic(self.spec, X1, X2)[0], np.eye(self.spec.output_dim))

    @property
    def output_dim(self) -> int:
        return self.spec.output_dim

    def nngp(self) -> "AnalyticNNGP":
        return AnalyticNNGP(self.spec)


@dataclass(frozen=True)
class AnalyticNNGP:
    """Infinite-width readout kernel of a dense spec."""

    spec: NetworkSpec

    def __post_init__(self):
        _check_analytic(self.spec)

    def gram(self, X1, X2) -> np.ndarray:
        return np.kron(_analytic(self.spec, X1, X2)[1], np.eye(self.spec.output_dim))

    @property
    def output_dim(self) -> int:
        return self.spec.output_dim

    def nngp(self) -> "AnalyticNNGP":
        return self


BaseKernelSource = Union[EmpiricalNTK, EmpiricalNNGP, AnalyticNTK, AnalyticNNGP]


@dataclass(frozen=True)
class KernelMatrix:
    """A dense kernel with its task block layout.

    Attributes:
        matrix: ``(rows, cols)`` float64 array.
        kind: one of ``"ntk"``, ``"nngp"``, ``"metantk"``, ``"anil"``.
        block_rows: ``(task id, block size)`` pairs covering the rows.
        block_cols: same for the columns.
    """

    matrix: np.ndarray
    kind: str
    block_rows: tuple = ()
    block_cols: tuple = ()

    def __post_init__(self):
        M = np.asarray(self.matrix, dtype=np.float64)
        if M.ndim != 2:
            raise ValueError("kernel matrix must be 2-d")
        if self.kind not in KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        rows = tuple((int(i), int(s)) for i, s in self.block_rows) or ((0, M.shape[0]),)
        cols = tuple((int(i), int(s)) for i, s in self.block_cols) or ((0, M.shape[1]),)
        if sum(s for _, s in rows) != M.shape[0] or sum(s for _, s in cols) != M.shape[1]:
            raise ValueError("block layout does not match matrix shape")
        M.setflags(write=False)
        object.__setattr__(self, "matrix", M)
        object.__setattr__(self, "block_rows", rows)
        object.__setattr__(self, "block_cols", cols)

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    def block(self, i: int, j: int) -> np.ndarray:
        r = sum(s for _, s in self.block_rows[:i])
        c = sum(s for _, s in self.block_cols[:j])
        return self.matrix[r : r + self.block_rows[i][1], c : c + self.block_cols[j][1]]


@jax.jit
def _readout_jacobian(net, params, X):
    sl = net.readout_slice

    def f(readout):
        return net.apply(params.at[sl].set(readout), X).reshape(-1)

    return jax.jacrev(f)(params[sl])


def _check_analytic(spec):
    if not isinstance(spec, NetworkSpec):
        raise TypeError("analytic kernels need a NetworkSpec")
    if spec.activation not in ("relu", "erf"):
        raise ValueError(f"analytic kernel unsupported for activation {spec.activation!r}; use relu or erf")
    if len(set(spec.hidden_widths)) > 1:
        raise ValueError("analytic kernel needs equal hidden widths")


def _relu_moments(q1, q2, c):
    s = np.sqrt(q1 * q2)
    safe = np.where(s > 0, s, 1.0)
    theta = np.arccos(np.clip(c / safe, -1.0, 1.0))
    E = np.where(s > 0, s / (2 * np.pi) * (np.sin(theta) + (np.pi - theta) * np.cos(theta)), 0.0)
    # with a degenerate input the derivative pattern is deterministic (all off)
    Ed = np.where(s > 0, (np.pi - theta) / (2 * np.pi), 0.0)
    return E, Ed


def _erf_moments(q1, q2, c):
    ab = (1 + 2 * q1) * (1 + 2 * q2)
    E = 2 / np.pi * np.arcsin(np.clip(2 * c / np.sqrt(ab), -1.0, 1.0))
    Ed = 4 / np.pi / np.sqrt(np.maximum(ab - 4 * c * c, np.finfo(float).tiny))
    return E, Ed


def _analytic(spec: NetworkSpec, X1, X2) -> tuple[np.ndarray, np.ndarray]:
    """Scalar ``(NTK, NNGP)`` limits between two input batches."""
    X1 = np.asarray(_as_inputs(spec, X1))
    X2 = np.asarray(_as_inputs(spec, X2))
    moments = _relu_moments if spec.activation == "relu" else _erf_moments
    sw2 = spec.sigma_w**2
    sb2 = spec.sigma_b**2 if spec.use_bias else 0.0
    L = spec.depth
    if spec.parameterization == "standard" and L == 0:
        K = X1 @ X2.T + (1.0 if spec.use_bias else 0.0)
        return K, K
    d = spec.input_dim
    S = sw2 * (X1 @ X2.T) / d + sb2
    q1 = sw2 * np.sum(X1 * X1, axis=1) / d + sb2
    q2 = sw2 * np.sum(X2 * X2, axis=1) / d + sb2
    ntk = S.copy() if spec.parameterization == "ntk" else None
    nngp = S
    for _ in range(L):
        E, Ed = moments(q1[:, None], q2[None, :], S)
        if spec.parameterization == "ntk":
            S = sw2 * E + sb2
            ntk = S + sw2 * Ed * ntk
            nngp = S
        else:
            ntk = E if ntk is None else E + sw2 * Ed * ntk
            nngp = E
            S = sw2 * E + sb2
        q1 = sw2 * moments(q1, q1, q1)[0] + sb2
        q2 = sw2 * moments(q2, q2, q2)[0] + sb2
    return ntk, nngp


def _gram(base, Z1, Z2=None) -> np.ndarray:
    # sources either expose an explicit gram(X1, X2) or Jacobian features
    if hasattr(base, "gram"):
        return base.gram(Z1, Z1 if Z2 is None else Z2)
    F1 = base.features(Z1)
    if Z2 is None:
        G = F1 @ F1.T
        return 0.5 * (G + G.T) / base.scale
    return F1 @ base.features(Z2).T / base.scale


def empirical_ntk(src: EmpiricalNTK, X1, X2=None) -> KernelMatrix:
    """``(1 / l) J(X1) J(X2)^T``; ``X2=None`` gives the exactly symmetric Gram of ``X1``."""
    return KernelMatrix(_gram(src, X1, X2), "ntk")


def empirical_nngp(src, X1, X2=None) -> KernelMatrix:
    """Readout-layer kernel ``(1 / l) J_r(X1) J_r(X2)^T`` (features plus bias, tensored with ``I_k``)."""
    if isinstance(src, EmpiricalNTK):
        src = src.nngp()
    return KernelMatrix(_gram(src, X1, X2), "nngp")


def analytic_ntk(spec: NetworkSpec, X1, X2=None) -> KernelMatrix:
    """Infinite-width NTK (see the module docstring for the recursion)."""
    X2 = X1 if X2 is None else X2
    return KernelMatrix(AnalyticNTK(spec).gram(X1, X2), "ntk")


def analytic_nngp(spec: NetworkSpec, X1, X2=None) -> KernelMatrix:
    X2 = X1 if X2 is None else X2
    return KernelMatrix(AnalyticNNGP(spec).gram(X1, X2), "nngp")


def _check_uniform(tasks: Sequence[Task]) -> None:
    shapes = {t.shape for t in tasks}
    if len(shapes) > 1:
        raise ValueError(f"tasks have heterogeneous shapes {sorted(shapes)}")


def _composite(
    row_tasks: Sequence[Task],
    col_tasks: Sequence[Task],
    base,
    adapt,
    mode: TimeMode,
    ridge: float,
    symmetric: bool,
) -> np.ndarray:
    """``P_rows K P_cols^T`` over the union of the tasks' points."""
    tasks = list(row_tasks) if symmetric else list(row_tasks) + list(col_tasks)
    if not tasks:
        raise ValueError("need at least one task")
    if len({t.k for t in tasks}) > 1:
        raise ValueError("tasks must share the output dimension k")
    k = tasks[0].k
    Z = np.vstack([np.vstack([t.X, t.X_support]) for t in tasks])
    K = _gram(base, Z)
    Ka = K if adapt is None or adapt is base else _gram(adapt, Z)

    P = np.zeros((sum(t.n for t in tasks) * k, Z.shape[0] * k))
    row = col = 0
    for t in tasks:
        q = slice(col, col + t.n * k)
        s = slice(col + t.n * k, col + (t.n + t.m) * k)
        r = slice(row, row + t.n * k)
        P[r, q] = np.eye(t.n * k)
        if adapt is not None:
            P[r, s] = -Ka[q, s] @ t_tilde(Ka[s, s], mode, ridge)
        row += t.n * k
        col += (t.n + t.m) * k
    if symmetric:
        G = P @ K @ P.T
        return 0.5 * (G + G.T)
    split = sum(t.n for t in row_tasks) * k
    return P[:split] @ K @ P[split:].T


def _adapt_source(base, kind: str, nngp=None):
    if kind == "ntk":
        return None
    if kind == "metantk":
        return base
    if kind == "anil":
        return nngp if nngp is not None else base.nngp()
    raise ValueError(f"unknown composite kind {kind!r}; expected ntk, metantk or anil")


def metantk_block(base, task_i: Task, task_j: Task, mode: TimeMode, ridge: float = 0.0) -> np.ndarray:
    """One ``(n_i k, n_j k)`` block of the composite MetaNTK."""
    if task_i is task_j:
        return _composite([task_i], [task_i], base, base, mode, ridge, symmetric=True)
    return _composite([task_i], [task_j], base, base, mode, ridge, symmetric=False)


def anil_block(base_ntk, base_nngp, task_i: Task, task_j: Task, mode: TimeMode, ridge: float = 0.0) -> np.ndarray:
    """Composite block with NNGP kernels on the adaptation path."""
    if task_i is task_j:
        return _composite([task_i], [task_i], base_ntk, base_nngp, mode, ridge, symmetric=True)
    return _composite([task_i], [task_j], base_ntk, base_nngp, mode, ridge, symmetric=False)


def _layout(tasks: Sequence[Task]) -> tuple:
    return tuple((i, t.n * t.k) for i, t in enumerate(tasks))


def assemble_train_kernel(
    tasks: Sequence[Task],
    base,
    mode: TimeMode = Continuous(math.inf),
    ridge: float = 1e-3,
    kind: str = "metantk",
    nngp=None,
) -> KernelMatrix:
    """Full ``(N n k)``-square training kernel; exactly symmetric.

    Args:
        kind: ``"metantk"``, ``"anil"`` or ``"ntk"`` (no adaptation).
        nngp: adaptation kernel for ``"anil"``; defaults to ``base.nngp()``.
    """
    tasks = list(tasks)
    _check_uniform(tasks)
    G = _composite(tasks, tasks, base, _adapt_source(base, kind, nngp), mode, ridge, symmetric=True)
    return KernelMatrix(G, kind, _layout(tasks), _layout(tasks))


def assemble_test_train(
    test_task: Task,
    tasks: Sequence[Task],
    base,
    mode: TimeMode = Continuous(math.inf),
    ridge: float = 1e-3,
    kind: str = "metantk",
    nngp=None,
) -> KernelMatrix:
    """Rectangular strip ``(n k, N n k)`` between a test task and the training tasks."""
    tasks = list(tasks)
    _check_uniform(tasks)
    G = _composite([test_task], tasks, base, _adapt_source(base, kind, nngp), mode, ridge, symmetric=False)
    return KernelMatrix(G, kind, ((0, test_task.n * test_task.k),), _layout(tasks))


def metantk_direct(
    net,
    params,
    tasks: Sequence[Task],
    lam: float,
    tau: int,
    col_tasks: Optional[Sequence[Task]] = None,
    readout_only: bool = False,
) -> KernelMatrix:
    """Kernel of the unrolled meta-output map: ``(1 / l) dF dF^T``.

    ``lam`` is the raw parameter-space inner step. The matching composite uses
    the kernel-normalized rate, ``Discrete(lam * net.kernel_scale, tau)``.
    With ``readout_only`` the inner loop adapts only the readout layer.
    """
    tasks = list(tasks)
    G = maml.meta_kernel(net, params, tasks, lam, tau, readout_only, col_tasks=col_tasks)
    cols = _layout(tasks if col_tasks is None else list(col_tasks))
    return KernelMatrix(G, "anil" if readout_only else "metantk", _layout(tasks), cols)


def save_kernel(km: KernelMatrix, path) -> None:
    """Binary container: ``MAGIC``, little-endian uint32 header length, JSON
    header, then the row-major little-endian float64 payload."""
    header = json.dumps(
        {
            "kind": km.kind,
            "rows": km.shape[0],
            "cols": km.shape[1],
            "block_rows": [list(b) for b in km.block_rows],
            "block_cols": [list(b) for b in km.block_cols],
        },
        sort_keys=True,
    ).encode()
    payload = np.ascontiguousarray(km.matrix, dtype="<f8").tobytes()
    atomic_write_bytes(path, MAGIC + struct.pack("<I", len(header)) + header + payload)


def load_kernel(path) -> KernelMatrix:
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a kernel container")
    off = len(MAGIC)
    (hlen,) = struct.unpack("<I", data[off : off + 4])
    header = json.loads(data[off + 4 : off + 4 + hlen])
    payload = data[off + 4 + hlen :]
    rows, cols = header["rows"], header["cols"]
    if len(payload) != 8 * rows * cols:
        raise ValueError(f"{path}: payload has {len(payload)} bytes, expected {8 * rows * cols}")
    M = np.frombuffer(payload, dtype="<f8").reshape(rows, cols).astype(np.float64)
    return KernelMatrix(M, header["kind"], tuple(map(tuple, header["block_rows"])), tuple(map(tuple, header["block_cols"])))


def kernel_to_csv(km: KernelMatrix, path) -> None:
    """Dense grid: a ``row`` column followed by one column per kernel column."""
    header = ["row"] + [f"c{j}" for j in range(km.shape[1])]
    emit_report(path, header, ([i, *row] for i, row in enumerate(km.matrix)))
