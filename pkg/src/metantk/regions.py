"""Linear-region counting: distinct ReLU sign patterns over sampled probe inputs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from metantk.net import forward

GENERATIONS = ("cube", "sphere")


@dataclass(frozen=True, eq=False)
class ProbeSet:
    """Probe inputs ``(P, d)`` and how they were drawn."""

    inputs: np.ndarray
    seed: int = 0
    generation: str = "cube"

    def __post_init__(self):
        X = np.asarray(self.inputs, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] < 1:
            raise ValueError("probe set needs a non-empty (P, d) array")
        if not np.all(np.isfinite(X)):
            raise ValueError("probe inputs must be finite")
        X.setflags(write=False)
        object.__setattr__(self, "inputs", X)

    def __len__(self) -> int:
        return self.inputs.shape[0]


def sample_probes(d: int, P: int = 512, generation: str = "cube", seed: int = 0) -> ProbeSet:
    """Uniform samples on ``[-1, 1]^d`` or on the unit sphere."""
    if d < 1 or P < 1:
        raise ValueError("need d >= 1 and P >= 1")
    rng = np.random.default_rng(seed)
    if generation == "cube":
        X = rng.uniform(-1.0, 1.0, (P, d))
    elif generation == "sphere":
        X = rng.standard_normal((P, d))
        X /= np.linalg.norm(X, axis=1, keepdims=True)
    else:
        raise ValueError(f"unknown probe generation {generation!r}; expected one of {GENERATIONS}")
    return ProbeSet(X, seed, generation)


def count_linear_regions(net, params, probes) -> int:
    """Number of distinct activation patterns among the probes (``1 <= R <= P``).

    Only ReLU units contribute. Networks whose hidden activation is not ReLU
    have no well-defined linear regions and raise ``ValueError``.
    """
    act = getattr(net, "activation", "relu")
    if act != "relu":
        raise ValueError(f"regions undefined for activation {act!r}; need relu")
    X = probes.inputs if isinstance(probes, ProbeSet) else np.asarray(probes, dtype=np.float64)
    _, patterns = forward(net, params, X, capture_patterns=True)
    if patterns.shape[1] == 0:
        return 1
    return int(np.unique(np.packbits(patterns, axis=1), axis=0).shape[0])
