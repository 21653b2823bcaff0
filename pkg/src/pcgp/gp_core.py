#!/usr/bin/env python3
"""Exact Gaussian process machinery on arbitrary feature vectors.

The kernel is the exponential-of-distance form k(a, b) = exp(-|a - b| / l).
Passing ``squared=True`` switches to exp(-|a - b|^2 / l). Every matrix the
module builds is kept in float64, and every solve goes through the lower
Cholesky factor stored in a GramWorkspace; no dense inverse is formed.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.spatial import distance

from pcgp import common as rc

JITTER_START = 1e-8
JITTER_GROWTH = 10.0
JITTER_CAP = 1e-2

_factorizations = 0


def factorization_count() -> int:
    """Number of Gram matrices factorized since the last reset."""
    return _factorizations


def reset_factorization_count() -> None:
    global _factorizations
    _factorizations = 0


def _freeze(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class GramWorkspace:
    """Kernel matrix, noise, jitter and the Cholesky factor of K + (sigma2 + jitter) I."""

    K: np.ndarray
    sigma2: float
    jitter: float
    chol: np.ndarray

    @property
    def n(self) -> int:
        return self.K.shape[0]

    def matrix(self) -> np.ndarray:
        return self.K + (self.sigma2 + self.jitter) * np.eye(self.n)

    def solve(self, b: np.ndarray) -> np.ndarray:
        return linalg.cho_solve((self.chol, True), b)

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.chol))))


@dataclass(frozen=True, eq=False)
class PosteriorResult:
    mean: np.ndarray | None = None
    cov: np.ndarray | None = None


def as_features(X, name: str = "X") -> np.ndarray:
    """Convert a list of feature vectors into a finite (n, d) float64 array."""
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise rc.InputError(f"{name} must be a list of feature vectors, got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise rc.InputError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise rc.InputError(f"{name} contains non-finite entries")
    return arr


def _check_length_scale(l: float) -> None:
    if not l > 0 or not math.isfinite(l):
        raise rc.InputError(f"length-scale must be positive and finite, got {l}")


def se_kernel(a, b, l: float, squared: bool = False) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_length_scale(l)
    if a.shape != b.shape or a.ndim != 1:
        raise rc.InputError(f"feature dimension mismatch: {a.shape} vs {b.shape}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise rc.InputError("feature vectors contain non-finite entries")
    r = float(np.linalg.norm(a - b))
    return math.exp(-(r * r if squared else r) / l)


def cross_kernel(A, B, l: float, squared: bool = False) -> np.ndarray:
    """Kernel block K(A, B) with one row per point of A."""
    A = as_features(A, "A")
    B = as_features(B, "B")
    _check_length_scale(l)
    if A.shape[1] != B.shape[1]:
        raise rc.InputError(f"feature dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    metric = "sqeuclidean" if squared else "euclidean"
    return np.exp(-distance.cdist(A, B, metric=metric) / l)


def gram_matrix(
    X, l: float, sigma2: float = 0.0, jitter: float = JITTER_START, squared: bool = False
) -> GramWorkspace:
    """Build K(X, X) and factorize it, escalating the jitter on failure.

    A zero starting jitter escalates to JITTER_START first, then grows by
    JITTER_GROWTH per failed attempt until JITTER_CAP.
    """
    global _factorizations
    X = as_features(X)
    if sigma2 < 0 or jitter < 0:
        raise rc.InputError(f"sigma2 and jitter must be non-negative, got {sigma2}, {jitter}")
    K = cross_kernel(X, X, l, squared)
    eye = np.eye(K.shape[0])
    tried = jitter
    while True:
        try:
            chol = linalg.cholesky(K + (sigma2 + tried) * eye, lower=True)
            break
        except linalg.LinAlgError:
            step = JITTER_START if tried == 0.0 else tried * JITTER_GROWTH
            if step > JITTER_CAP * (1.0 + 1e-9):
                raise rc.NumericalError(
                    f"Cholesky factorization failed with jitter up to {tried:g}", jitter=tried
                ) from None
            rc.debug(f"Cholesky failed with jitter {tried:g}; retrying with {step:g}")
            tried = step
    _factorizations += 1
    return GramWorkspace(K=_freeze(K), sigma2=float(sigma2), jitter=float(tried), chol=_freeze(chol))


def _check_targets(ws: GramWorkspace, y) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.ndim not in (1, 2) or y.shape[0] != ws.n:
        raise rc.InputError(f"targets have shape {y.shape}, expected leading dimension {ws.n}")
    return y


def log_marginal_nll(ws: GramWorkspace, y) -> float:
    """y^T (K + sigma2 I)^-1 y + log det(K + sigma2 I); smaller is better."""
    y = _check_targets(ws, y)
    if y.ndim != 1:
        raise rc.InputError("log_marginal_nll expects a single target vector")
    return float(y @ ws.solve(y)) + ws.logdet()


def _check_train(ws: GramWorkspace, Xtrain, Xquery) -> tuple[np.ndarray, np.ndarray]:
    Xtrain = as_features(Xtrain, "Xtrain")
    Xquery = as_features(Xquery, "Xquery")
    if Xtrain.shape[0] != ws.n:
        raise rc.InputError(f"workspace holds {ws.n} points but Xtrain has {Xtrain.shape[0]}")
    return Xtrain, Xquery


def posterior_weights(ws: GramWorkspace, y) -> np.ndarray:
    """(K + sigma2 I)^-1 y through the two triangular solves."""
    y = _check_targets(ws, y)
    half = linalg.solve_triangular(ws.chol, y, lower=True)
    return linalg.solve_triangular(ws.chol.T, half, lower=False)


def posterior_mean(ws: GramWorkspace, Xtrain, Xquery, y, l: float, squared: bool = False) -> PosteriorResult:
    """Posterior mean K(X*, X) (K + sigma2 I)^-1 y.

    ``y`` may be a matrix with one column per output entry; all columns share
    the factorization held by ``ws``.
    """
    Xtrain, Xquery = _check_train(ws, Xtrain, Xquery)
    Ks = cross_kernel(Xquery, Xtrain, l, squared)
    return PosteriorResult(mean=Ks @ posterior_weights(ws, y))


def posterior_cov(ws: GramWorkspace, Xtrain, Xquery, l: float, squared: bool = False) -> PosteriorResult:
    Xtrain, Xquery = _check_train(ws, Xtrain, Xquery)
    Ks = cross_kernel(Xquery, Xtrain, l, squared)
    Kss = cross_kernel(Xquery, Xquery, l, squared)
    V = linalg.solve_triangular(ws.chol, Ks.T, lower=True)
    cov = Kss - V.T @ V
    cov = 0.5 * (cov + cov.T)
    np.fill_diagonal(cov, np.maximum(np.diag(cov), 0.0))
    return PosteriorResult(cov=cov)


def posterior_variance(ws: GramWorkspace, Xtrain, Xquery, l: float, squared: bool = False) -> np.ndarray:
    """Diagonal of the posterior covariance, clipped at zero."""
    Xtrain, Xquery = _check_train(ws, Xtrain, Xquery)
    Ks = cross_kernel(Xquery, Xtrain, l, squared)
    V = linalg.solve_triangular(ws.chol, Ks.T, lower=True)
    return np.maximum(1.0 - np.sum(V * V, axis=0), 0.0)


def kernel_matrix_adjoint(Z: np.ndarray, Gbar: np.ndarray, l: float, squared: bool = False) -> np.ndarray:
    """Pull the gradient w.r.t. every entry of K(Z, Z) back onto Z.

    Gbar[a, b] is dLoss/dK[a, b] with all n^2 entries treated as independent.
    Pairs at zero distance contribute nothing (the kernel's subgradient there).
    """
    Z = as_features(Z, "Z")
    if Gbar.shape != (Z.shape[0], Z.shape[0]):
        raise rc.InputError(f"adjoint has shape {Gbar.shape}, expected {(Z.shape[0],) * 2}")
    S = Gbar + Gbar.T
    if squared:
        K = np.exp(-distance.cdist(Z, Z, metric="sqeuclidean") / l)
        C = S * K * (-2.0 / l)
    else:
        r = distance.cdist(Z, Z, metric="euclidean")
        K = np.exp(-r / l)
        safe = np.where(r > 0.0, r, 1.0)
        C = np.where(r > 0.0, S * K * (-1.0 / l) / safe, 0.0)
    np.fill_diagonal(C, 0.0)
    return C.sum(axis=1)[:, None] * Z - C @ Z
