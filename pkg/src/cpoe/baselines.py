"""Reference models: exact GP, global sparse GP (FITC), independent PoEs.

These share the kernel and expert-graph machinery with the correlated model so
that comparisons isolate the aggregation/inference method.  The sparse GP uses
fixed inducing inputs (a random data subset in the experiment harness) and the
FITC likelihood, matching the limiting case of the correlated model with full
correlation degree.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .expert_graph import ExpertGraph
from .kernels import Kernel, NoiseSpec, jittered_cholesky, kernel_grad, kernel_grad_diag
from .prediction import aggregation_weights

__all__ = [
    "FullGp",
    "SparseGp",
    "LocalExpertFit",
    "fit_local_experts",
    "poe_predict",
    "poe_lml",
    "full_gp_fit_predict",
    "sgp_fit_predict",
]

DENSE_CAP = 8192  # default guard for dense factorization


class FullGp:
    """Exact GP regression with dense Cholesky; guarded by a size cap."""

    def __init__(self, kernel: Kernel, noise: NoiseSpec, cap: int = DENSE_CAP):
        self.kernel = kernel
        self.noise = noise
        self.cap = cap
        self.X = self.y = self._chol = self._alpha = None

    def fit(self, X, y) -> "FullGp":
        X = np.atleast_2d(np.asarray(X, dtype=float))
        y = np.asarray(y, dtype=float).ravel()
        if X.shape[0] > self.cap:
            raise ValueError(f"N={X.shape[0]} exceeds the dense cap {self.cap}")
        self.X, self.y = X, y
        K = self.kernel(X) + self.noise.variance * np.eye(X.shape[0])
        self._chol = np.linalg.cholesky(K)
        self._alpha = cho_solve((self._chol, True), y)
        return self

    def predict(self, Xs, add_noise: bool = False):
        Xs = np.atleast_2d(np.asarray(Xs, dtype=float))
        Ks = self.kernel(Xs, self.X)
        mean = Ks @ self._alpha
        W = solve_triangular(self._chol, Ks.T, lower=True)
        var = self.kernel.diag(Xs) - np.einsum("ij,ij->j", W, W)
        if add_noise:
            var = var + self.noise.variance
        return mean, var

    def lml(self) -> float:
        n = self.y.size
        logdet = 2.0 * float(np.sum(np.log(np.diag(self._chol))))
        return float(-0.5 * (self.y @ self._alpha + logdet + n * np.log(2 * np.pi)))

    def lml_gradient(self) -> np.ndarray:
        """Dense trace formulas over kernel parameters plus the noise slot."""
        n = self.y.size
        Kinv = cho_solve((self._chol, True), np.eye(n))
        A = np.outer(self._alpha, self._alpha) - Kinv
        grad = np.empty(self.kernel.n_params + 1)
        for i in range(self.kernel.n_params):
            dK = kernel_grad(self.kernel, self.X, self.X, i)
            grad[i] = 0.5 * float(np.sum(A * dK))
        grad[-1] = 0.5 * self.noise.variance * float(np.trace(A))
        return grad


class SparseGp:
    """FITC with fixed global inducing inputs; low-rank algebra throughout."""

    def __init__(self, kernel: Kernel, noise: NoiseSpec, inducing: np.ndarray):
        self.kernel = kernel
        self.noise = noise
        self.inducing = np.atleast_2d(np.asarray(inducing, dtype=float))
        self.X = self.y = None

    def fit(self, X, y) -> "SparseGp":
        X = np.atleast_2d(np.asarray(X, dtype=float))
        y = np.asarray(y, dtype=float).ravel()
        if self.inducing.shape[0] > X.shape[0]:
            raise ValueError("more inducing points than data points")
        self.X, self.y = X, y
        A = self.inducing
        M = A.shape[0]
        self._Lu, _ = jittered_cholesky(self.kernel(A))
        Kuf = self.kernel(A, X)
        W = solve_triangular(self._Lu, Kuf, lower=True)          # whitened cross-covariance
        qff = np.einsum("ij,ij->j", W, W)
        self._d = self.kernel.diag(X) - qff + self.noise.variance
        self._W = W
        self._Wd = W / self._d
        B = np.eye(M) + self._Wd @ W.T
        self._LB = np.linalg.cholesky(B)
        self._c = solve_triangular(self._LB, self._Wd @ y, lower=True)
        return self

    def predict(self, Xs, add_noise: bool = False):
        Xs = np.atleast_2d(np.asarray(Xs, dtype=float))
        Kus = self.kernel(self.inducing, Xs)
        ws = solve_triangular(self._Lu, Kus, lower=True)
        t = solve_triangular(self._LB, ws, lower=True)
        mean = t.T @ self._c
        var = (self.kernel.diag(Xs) - np.einsum("ij,ij->j", ws, ws)
               + np.einsum("ij,ij->j", t, t))
        if add_noise:
            var = var + self.noise.variance
        return mean, var

    def lml(self) -> float:
        n = self.y.size
        quad = float(self.y @ (self.y / self._d)) - float(self._c @ self._c)
        logdet = float(np.sum(np.log(self._d))) + 2.0 * float(np.sum(np.log(np.diag(self._LB))))
        return -0.5 * (quad + logdet + n * np.log(2 * np.pi))

    def _alpha(self) -> np.ndarray:
        """(Qff + Lambda)^{-1} y via the low-rank identity."""
        t = solve_triangular(self._LB.T, self._c, lower=False)
        return self.y / self._d - self._Wd.T @ t

    def lml_gradient(self) -> np.ndarray:
        """Analytic FITC gradient in O(N M) per parameter."""
        X, A, y = self.X, self.inducing, self.y
        n, M = y.size, A.shape[0]
        alpha = self._alpha()
        H = solve_triangular(self._Lu.T, self._W, lower=False)       # Kuu^{-1} Kuf
        Ha = H @ alpha
        Binv_Wd = cho_solve((self._LB, True), self._Wd)
        R = solve_triangular(self._Lu.T, Binv_Wd, lower=False)       # H Ktilde^{-1}
        HKH = solve_triangular(
            self._Lu.T, solve_triangular(
                self._Lu.T, np.eye(M) - cho_solve((self._LB, True), np.eye(M)),
                lower=False).T, lower=False)                          # H Ktilde^{-1} H^T
        diag_Kinv = 1.0 / self._d - np.einsum("ij,ij->j", self._Wd, Binv_Wd)

        grad = np.empty(self.kernel.n_params + 1)
        for i in range(self.kernel.n_params + 1):
            if i == self.kernel.n_params:
                dd = np.full(n, self.noise.variance)
                quad = float(alpha @ (dd * alpha))
                tr = float(diag_Kinv @ dd)
            else:
                dKuu = kernel_grad(self.kernel, A, A, i)
                dKuf = kernel_grad(self.kernel, A, X, i)
                dqff = (2.0 * np.einsum("ij,ij->j", dKuf, H)
                        - np.einsum("ij,ij->j", dKuu @ H, H))
                dd = kernel_grad_diag(self.kernel, X, i) - dqff
                quad = (2.0 * float((dKuf @ alpha) @ Ha) - float(Ha @ dKuu @ Ha)
                        + float(alpha @ (dd * alpha)))
                tr = (2.0 * float(np.sum(R * dKuf)) - float(np.sum(HKH * dKuu))
                      + float(diag_Kinv @ dd))
            grad[i] = 0.5 * (quad - tr)
        return grad


@dataclass
class LocalExpertFit:
    """One independently fitted local GP (the PoE building block)."""

    index: int
    rows: np.ndarray
    X: np.ndarray
    y: np.ndarray
    chol: np.ndarray
    alpha: np.ndarray

    def lml(self) -> float:
        n = self.y.size
        logdet = 2.0 * float(np.sum(np.log(np.diag(self.chol))))
        return float(-0.5 * (self.y @ self.alpha + logdet + n * np.log(2 * np.pi)))


def fit_local_experts(graph: ExpertGraph, kernel: Kernel, noise: NoiseSpec,
                      y: np.ndarray) -> list[LocalExpertFit]:
    """Fit each expert exactly on its own rows, independently of the others."""
    y = np.asarray(y, dtype=float).ravel()
    fits = []
    for j in range(graph.J):
        rows = graph.row_indices[j]
        X_j = graph.X[rows]
        K = kernel(X_j) + noise.variance * np.eye(rows.size)
        chol = np.linalg.cholesky(K)
        fits.append(LocalExpertFit(index=j, rows=rows, X=X_j, y=y[rows], chol=chol,
                                   alpha=cho_solve((chol, True), y[rows])))
    return fits


def poe_lml(experts: list[LocalExpertFit]) -> float:
    """Objective of the independent-experts family: sum of local marginals."""
    return float(sum(e.lml() for e in experts))


def poe_predict(experts: list[LocalExpertFit], kernel: Kernel, Xs,
                mode: str = "gpoe", add_noise: bool = False,
                noise: NoiseSpec | None = None):
    """Aggregate independent local predictions.

    Modes: ``minvar`` takes the lowest-variance expert pointwise (ties to the
    lowest expert index); ``gpoe`` uses normalized entropy-difference weights;
    ``gpoe_z1`` uses the shared clamped-weight pipeline with sharpening
    exponent 1 (identical to ``gpoe`` whenever some expert is informative).
    """
    Xs = np.atleast_2d(np.asarray(Xs, dtype=float))
    n = Xs.shape[0]
    E = len(experts)
    means = np.empty((E, n))
    variances = np.empty((E, n))
    for row, e in enumerate(experts):
        Ks = kernel(Xs, e.X)
        means[row] = Ks @ e.alpha
        W = solve_triangular(e.chol, Ks.T, lower=True)
        variances[row] = kernel.diag(Xs) - np.einsum("ij,ij->j", W, W)
    v0 = kernel.diag(Xs)

    if mode == "minvar":
        pick = np.argmin(variances, axis=0)  # first minimum: lowest expert index
        mean = means[pick, np.arange(n)]
        var = variances[pick, np.arange(n)]
    elif mode == "gpoe":
        beta = 0.5 * np.log(v0[None, :] / variances)
        total = beta.sum(axis=0)
        w = np.where(total > 0, beta / np.where(total > 0, total, 1.0), 1.0 / E)
        inv_v = np.sum(w / variances, axis=0)
        var = 1.0 / inv_v
        mean = var * np.sum(w * means / variances, axis=0)
    elif mode == "gpoe_z1":
        w = aggregation_weights(v0[None, :], variances, N=1, C=1, exponent=1.0)
        inv_v = np.sum(w / variances, axis=0)
        var = 1.0 / inv_v
        mean = var * np.sum(w * means / variances, axis=0)
    else:
        raise ValueError(f"unknown aggregation mode {mode!r}")

    if add_noise:
        if noise is None:
            raise ValueError("add_noise requires the noise spec")
        var = var + noise.variance
    return mean, var


def full_gp_fit_predict(X, y, kernel: Kernel, noise: NoiseSpec, Xs,
                        add_noise: bool = False, cap: int = DENSE_CAP):
    """Convenience wrapper: fit an exact GP and predict; returns (mean, var, lml)."""
    model = FullGp(kernel, noise, cap=cap).fit(X, y)
    mean, var = model.predict(Xs, add_noise=add_noise)
    return mean, var, model.lml()


def sgp_fit_predict(X, y, inducing, kernel: Kernel, noise: NoiseSpec, Xs,
                    add_noise: bool = False):
    """Convenience wrapper for the FITC baseline; returns (mean, var, lml)."""
    model = SparseGp(kernel, noise, inducing).fit(X, y)
    mean, var = model.predict(Xs, add_noise=add_noise)
    return mean, var, model.lml()
