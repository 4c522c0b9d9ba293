"""Fully-connected Gaussian-initialized networks.

Layers follow ``h^{i+1} = z^i W^{i+1} + b^{i+1}``, ``z^{i+1} = phi(h^{i+1})``.
Two parameterizations are supported:

* ``"standard"``: weights drawn from ``N(0, sigma_w^2 / fan_in)`` and biases from
  ``N(0, sigma_b^2)``, used as-is. Kernels are normalized by ``1 / l`` with ``l``
  the (smallest) hidden width.
* ``"ntk"``: all raw parameters drawn from ``N(0, 1)`` and rescaled in the
  forward pass by ``sigma_w / sqrt(fan_in)`` and ``sigma_b``. Kernels need no
  width normalization.

Parameters live in a single flat float64 vector; :class:`ParamLayout` maps
(layer, weight/bias) to slices of it.

Any object exposing ``layout``, ``kernel_scale``, ``readout_slice``,
``init(seed)``, ``apply(params, X)`` and ``hidden_preactivations(params, X)``
(and registered as a JAX pytree) can be used wherever a network is expected;
:class:`NetworkSpec` is the fully-connected implementation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Protocol

import jax
import jax.numpy as jnp
import numpy as np
from jax.scipy.special import erf

ACTIVATIONS = ("relu", "erf", "identity")
PARAMETERIZATIONS = ("standard", "ntk")


@dataclass(frozen=True)
class ParamBlock:
    name: str
    start: int
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    @property
    def slice(self) -> slice:
        return slice(self.start, self.start + self.size)


@dataclass(frozen=True)
class ParamLayout:
    blocks: tuple[ParamBlock, ...]

    @classmethod
    def from_shapes(cls, named_shapes) -> "ParamLayout":
        blocks, start = [], 0
        for name, shape in named_shapes:
            block = ParamBlock(name, start, tuple(int(s) for s in shape))
            blocks.append(block)
            start += block.size
        return cls(tuple(blocks))

    @property
    def size(self) -> int:
        return self.blocks[-1].start + self.blocks[-1].size if self.blocks else 0

    def __getitem__(self, name: str) -> ParamBlock:
        for block in self.blocks:
            if block.name == name:
                return block
        raise KeyError(name)

    def unflatten(self, flat) -> dict:
        return {b.name: flat[b.slice].reshape(b.shape) for b in self.blocks}


class Network(Protocol):
    layout: ParamLayout

    @property
    def kernel_scale(self) -> float: ...

    @property
    def readout_slice(self) -> slice: ...

    def init(self, seed: int) -> np.ndarray: ...

    def apply(self, params, X): ...

    def hidden_preactivations(self, params, X): ...


def _relu(h):
    # strict inequality: the derivative at an exactly-zero pre-activation is 0
    return jnp.where(h > 0, h, 0.0)


def activation_fn(name: str):
    if name == "relu":
        return _relu
    if name == "erf":
        return erf
    if name == "identity":
        return lambda h: h
    raise ValueError(f"unknown activation {name!r}; expected one of {ACTIVATIONS}")


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture and initialization hyper-parameters of a dense network.

    Args:
        input_dim: input dimension ``d``.
        hidden_widths: widths of the hidden layers (may be empty for a linear model).
        output_dim: number of outputs ``k``.
        activation: one of ``"relu"``, ``"erf"``, ``"identity"``.
        sigma_w: weight scale; weight variance is ``sigma_w**2 / fan_in``.
        sigma_b: bias standard deviation.
        parameterization: ``"standard"`` or ``"ntk"``.
        use_bias: when False every layer is bias-free.
    """

    input_dim: int
    hidden_widths: tuple[int, ...]
    output_dim: int = 1
    activation: str = "relu"
    sigma_w: float = 1.0
    sigma_b: float = 0.0
    parameterization: str = "standard"
    use_bias: bool = True
    layout: ParamLayout = field(init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input_dim and output_dim must be positive")
        if any(w < 1 for w in self.hidden_widths):
            raise ValueError(f"hidden widths must be positive, got {self.hidden_widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; expected one of {ACTIVATIONS}")
        if self.parameterization not in PARAMETERIZATIONS:
            raise ValueError(f"unknown parameterization {self.parameterization!r}")
        if self.sigma_w < 0 or self.sigma_b < 0:
            raise ValueError("sigma_w and sigma_b must be nonnegative")
        shapes = []
        for i, (fan_in, fan_out) in enumerate(zip(self.dims[:-1], self.dims[1:]), start=1):
            shapes.append((f"W{i}", (fan_in, fan_out)))
            if self.use_bias:
                shapes.append((f"b{i}", (fan_out,)))
        object.__setattr__(self, "layout", ParamLayout.from_shapes(shapes))

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_widths, self.output_dim)

    @property
    def depth(self) -> int:
        return len(self.hidden_widths)

    @property
    def width(self) -> int:
        """Hidden width ``l`` used for kernel normalization (1 with no hidden layer)."""
        return min(self.hidden_widths) if self.hidden_widths else 1

    @property
    def kernel_scale(self) -> float:
        return float(self.width) if self.parameterization == "standard" else 1.0

    @property
    def n_params(self) -> int:
        return self.layout.size

    @property
    def readout_slice(self) -> slice:
        last = self.depth + 1
        start = self.layout[f"W{last}"].start
        stop = self.layout.size
        return slice(start, stop)

    def _multipliers(self, fan_in: int) -> tuple[float, float]:
        if self.parameterization == "ntk":
            return self.sigma_w / math.sqrt(fan_in), self.sigma_b
        return 1.0, 1.0

    def init(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        flat = np.empty(self.layout.size)
        for block in self.layout.blocks:
            if self.parameterization == "ntk":
                std = 1.0
            elif block.name.startswith("W"):
                std = self.sigma_w / math.sqrt(block.shape[0])
            else:
                std = self.sigma_b
            flat[block.slice] = std * rng.standard_normal(block.size)
        return flat

    def _layers(self, params, X):
        phi = activation_fn(self.activation)
        p = self.layout.unflatten(params)
        z = X
        preacts = []
        for i, fan_in in enumerate(self.dims[:-1], start=1):
            wm, bm = self._multipliers(fan_in)
            h = wm * (z @ p[f"W{i}"])
            if self.use_bias:
                h = h + bm * p[f"b{i}"]
            if i == self.depth + 1:
                return h, preacts
            preacts.append(h)
            z = phi(h)

    def apply(self, params, X):
        return self._layers(params, X)[0]

    def hidden_preactivations(self, params, X):
        """Hidden pre-activations ``(n, sum(widths))`` and a mask of counted units."""
        _, preacts = self._layers(params, X)
        n = X.shape[0]
        H = jnp.concatenate(preacts, axis=1) if preacts else jnp.zeros((n, 0))
        return H, jnp.ones(H.shape[1], dtype=bool)


jax.tree_util.register_pytree_node(NetworkSpec, lambda s: ((), s), lambda aux, _: aux)


@jax.jit
def _apply(net, params, X):
    return net.apply(params, X)


@jax.jit
def _apply_with_patterns(net, params, X):
    H, alive = net.hidden_preactivations(params, X)
    return net.apply(params, X), (H > 0) & alive


@jax.jit
def _jacobian(net, params, X):
    return jax.jacrev(lambda p: net.apply(p, X).reshape(-1))(params)


@jax.jit
def _shifted_outputs(net, params, X, idx, h):
    basis = jax.nn.one_hot(idx, params.shape[0], dtype=params.dtype) * h
    f = jax.vmap(lambda p: net.apply(p, X).reshape(-1))
    return (f(params + basis) - f(params - basis)) / (2 * h)


def _as_inputs(net, X) -> jnp.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    d = getattr(net, "input_dim", None)
    if d is not None and X.shape[1] != d:
        raise ValueError(f"input dimension mismatch: network expects {d}, got {X.shape[1]}")
    return jnp.asarray(X)


def _as_params(net, params) -> jnp.ndarray:
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (net.layout.size,):
        raise ValueError(f"parameter vector has shape {params.shape}, expected ({net.layout.size},)")
    return jnp.asarray(params)


def init_params(net, seed: int) -> np.ndarray:
    """Draw a deterministic Gaussian initialization for ``net``."""
    return net.init(seed)


def forward(net, params, X, capture_patterns: bool = False):
    """Evaluate the network on a batch.

    Returns:
        ``(outputs, patterns)`` where ``outputs`` has shape ``(n, k)`` and
        ``patterns`` is a boolean ``(n, units)`` array of hidden pre-activation
        signs (``h > 0``) when ``capture_patterns`` is set, else ``None``.
    """
    X = _as_inputs(net, X)
    params = _as_params(net, params)
    if capture_patterns:
        out, patterns = _apply_with_patterns(net, params, X)
        return np.asarray(out), np.asarray(patterns)
    return np.asarray(_apply(net, params, X)), None


def per_sample_jacobian(net, params, X) -> np.ndarray:
    """Dense Jacobian of all outputs; row ``s * k + o`` is ``d f_o(x_s) / d theta``."""
    return np.asarray(_jacobian(net, _as_params(net, params), _as_inputs(net, X)))


def finite_diff_jacobian(net, params, X, step: float = 1e-4, chunk: Optional[int] = None) -> np.ndarray:
    """Central-difference Jacobian, one parameter coordinate at a time."""
    if not step > 0:
        raise ValueError(f"step must be positive, got {step}")
    X = _as_inputs(net, X)
    params = _as_params(net, params)
    D = params.shape[0]
    chunk = chunk or max(1, min(256, (1 << 22) // max(D, 1)))
    cols = []
    for start in range(0, D, chunk):
        idx = jnp.arange(start, min(start + chunk, D))
        if idx.shape[0] < chunk:
            idx = jnp.concatenate([idx, jnp.full(chunk - idx.shape[0], idx[-1])])
        block = np.asarray(_shifted_outputs(net, params, X, idx, step))
        cols.append(block[: min(chunk, D - start)])
    return np.concatenate(cols, axis=0).T
