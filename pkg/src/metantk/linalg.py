"""Dense symmetric matrix functions.

Every matrix function here goes through a symmetric eigendecomposition: the
inputs are Gram matrices (PSD up to roundoff), for which the eigen route is
both the cleanest and the cheapest at the sizes we handle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

SYMMETRY_RTOL = 1e-10
PSD_RTOL = 1e-8
SINGULAR_RTOL = 1e-12


class LinalgError(ValueError):
    """Raised when a matrix violates the preconditions of an operation."""


@dataclass(frozen=True)
class EigenPair:
    """Ascending eigenvalues with orthonormal eigenvectors as columns."""

    values: np.ndarray
    vectors: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.vectors * self.values) @ self.vectors.T


@dataclass(frozen=True)
class Continuous:
    """Gradient-flow time: the product of learning rate and training time.

    ``lam_tau`` may be ``math.inf`` for the converged limit.
    """

    lam_tau: float

    def __post_init__(self):
        if not (self.lam_tau >= 0):
            raise LinalgError(f"lam_tau must be nonnegative, got {self.lam_tau}")


@dataclass(frozen=True)
class Discrete:
    """``tau`` gradient-descent steps with step size ``lam``."""

    lam: float
    tau: int

    def __post_init__(self):
        if not (self.lam > 0 and math.isfinite(self.lam)):
            raise LinalgError(f"lam must be positive and finite, got {self.lam}")
        if int(self.tau) != self.tau or self.tau < 1:
            raise LinalgError(f"tau must be a positive integer, got {self.tau}")


TimeMode = Union[Continuous, Discrete]


def as_sym(M) -> np.ndarray:
    """Validate a square finite matrix as symmetric and return ``(M + M.T) / 2``."""
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise LinalgError(f"expected a square matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise LinalgError("matrix has non-finite entries")
    scale = np.max(np.abs(M)) if M.size else 0.0
    asym = np.max(np.abs(M - M.T)) if M.size else 0.0
    if asym > SYMMETRY_RTOL * max(scale, np.finfo(float).tiny):
        raise LinalgError(f"matrix is not symmetric (max asymmetry {asym:.3e}, scale {scale:.3e})")
    return 0.5 * (M + M.T)


def eig_sym(M) -> EigenPair:
    """Symmetric eigendecomposition with a deterministic eigenvector sign.

    Each eigenvector is flipped so that its largest-magnitude entry is positive.
    """
    A = as_sym(M)
    try:
        w, V = np.linalg.eigh(A)
    except np.linalg.LinAlgError as exc:  # LAPACK does not report its iteration count
        raise LinalgError(f"eigendecomposition failed to converge for a {A.shape[0]}x{A.shape[0]} matrix: {exc}") from exc
    if V.size:
        pivot = np.argmax(np.abs(V), axis=0)
        signs = np.sign(V[pivot, np.arange(V.shape[1])])
        signs[signs == 0] = 1.0
        V = V * signs
    return EigenPair(values=w, vectors=V)


def _apply_spectral(eig: EigenPair, fvals: np.ndarray) -> np.ndarray:
    out = (eig.vectors * fvals) @ eig.vectors.T
    return 0.5 * (out + out.T)


def exp_neg(M, s: float) -> np.ndarray:
    """Return ``exp(-s M)`` for symmetric ``M`` and ``s >= 0`` (``s`` may be inf)."""
    if not (s >= 0):
        raise LinalgError(f"time s must be nonnegative, got {s}")
    eig = eig_sym(M)
    if math.isinf(s):
        if eig.values.size and eig.values[0] <= 0:
            raise LinalgError("exponent limit undefined: matrix has a nonpositive eigenvalue")
        return np.zeros_like(eig.vectors)
    if s == 0:
        return np.eye(eig.values.size)
    return _apply_spectral(eig, np.exp(-s * eig.values))


def _check_psd(eig: EigenPair) -> None:
    if not eig.values.size:
        return
    top = max(abs(eig.values[-1]), abs(eig.values[0]))
    if eig.values[0] < -PSD_RTOL * top:
        raise LinalgError(f"matrix is not PSD: smallest eigenvalue {eig.values[0]:.3e}, largest {eig.values[-1]:.3e}")


def _discrete_factor(w: np.ndarray, lam: float, tau: int) -> np.ndarray:
    # (1 - (1 - lam w)^tau) / w, with the w -> 0 limit lam * tau.
    out = np.empty_like(w)
    lw = lam * w
    small = np.abs(lw) < 0.5
    ws = w[small]
    with np.errstate(divide="ignore", invalid="ignore"):
        num = -np.expm1(tau * np.log1p(-lw[small]))
        out[small] = np.where(ws == 0, lam * tau, num / np.where(ws == 0, 1.0, ws))
    big = ~small
    out[big] = (1.0 - (1.0 - lw[big]) ** tau) / w[big]
    return out


def _continuous_factor(w: np.ndarray, c: float) -> np.ndarray:
    # (1 - exp(-c w)) / w, with the w -> 0 limit c.
    with np.errstate(divide="ignore", invalid="ignore"):
        out = -np.expm1(-c * w) / np.where(w == 0, 1.0, w)
    return np.where(w == 0, c, out)


def t_tilde(K, mode: TimeMode, ridge: float = 0.0) -> np.ndarray:
    """Finite-time solution operator of kernel gradient descent.

    With ``A = K + ridge I``:

    * ``Continuous(c)``: ``A^{-1} (I - exp(-c A))``; ``Continuous(inf)`` gives ``A^{-1}``.
    * ``Discrete(lam, tau)``: ``A^{-1} (I - (I - lam A)^tau)``, the exact
      counterpart of ``tau`` discrete gradient steps.
    """
    if ridge < 0:
        raise LinalgError(f"ridge must be nonnegative, got {ridge}")
    K = as_sym(K)
    _check_psd(eig_sym(K))
    A = K + ridge * np.eye(K.shape[0])
    eig = eig_sym(A)
    w = eig.values
    if isinstance(mode, Continuous):
        if math.isinf(mode.lam_tau):
            if w.size and w[0] <= SINGULAR_RTOL * max(abs(w[-1]), np.finfo(float).tiny):
                raise LinalgError("singular kernel, set ridge")
            fvals = 1.0 / w
        else:
            fvals = _continuous_factor(w, mode.lam_tau)
    elif isinstance(mode, Discrete):
        fvals = _discrete_factor(w, mode.lam, int(mode.tau))
    else:
        raise LinalgError(f"unknown time mode {mode!r}")
    return _apply_spectral(eig, fvals)


def condition_number(K, ridge: float = 0.0) -> float:
    """Ratio of the largest to the smallest eigenvalue of ``K + ridge I``."""
    K = as_sym(K)
    w = np.linalg.eigvalsh(K + ridge * np.eye(K.shape[0]))
    if w[0] <= 0:
        raise LinalgError(f"kernel is not positive definite after ridge {ridge}: smallest eigenvalue {w[0]:.3e}")
    return float(w[-1] / w[0])
