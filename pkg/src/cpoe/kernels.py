"""Covariance functions with log-parametrized hyperparameters and analytic derivatives.

Every positive hyperparameter (amplitude, lengthscale, period, spectral weight,
...) is stored as an unconstrained real and mapped through ``exp``.  Gradients
are always taken with respect to the unconstrained values, with the chain rule
through the transform already applied.

A model's full parameter vector is the kernel's unconstrained parameters
followed by one reserved slot for the log observation-noise variance
(:class:`NoiseSpec`).  ``kernel_grad`` accepts that reserved index and returns
a zero matrix for it, since the noise never enters the kernel itself.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Kernel",
    "SquaredExponential",
    "Periodic",
    "SpectralMixture",
    "SumKernel",
    "NoiseSpec",
    "eval_kernel",
    "eval_kernel_diag",
    "kernel_grad",
    "jittered_cholesky",
    "JitterError",
]

# Jitter added to the diagonal before any Cholesky of a kernel matrix,
# relative to the mean diagonal (= the amplitude for stationary kernels).
JITTER_START = 1e-8
JITTER_MAX = 1e-4


class JitterError(np.linalg.LinAlgError):
    """Cholesky kept failing after escalating the jitter up to the cap."""


def jittered_cholesky(K: np.ndarray, scale: float | None = None) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``K + jitter*I`` with escalating jitter.

    The exact matrix is tried first; on failure the jitter starts at
    ``1e-8 * scale`` and multiplies by 10 up to ``1e-4 * scale``, where
    ``scale`` defaults to the mean diagonal (the amplitude, for stationary
    kernel matrices).  Conditional-covariance callers pass the originating
    kernel amplitude instead, since a nearly deterministic conditional has a
    vanishing diagonal of its own.  Returns the factor and the jitter used;
    raises :class:`JitterError` at the cap.  Unconditional jitter would bias
    exact structural identities (e.g. the prior-precision trace) at first
    order, so it is applied only when needed.
    """
    K = np.asarray(K, dtype=float)
    if K.size == 0:
        return np.zeros((0, 0)), 0.0
    try:
        return np.linalg.cholesky(K), 0.0
    except np.linalg.LinAlgError:
        pass
    if scale is None:
        scale = float(np.mean(np.diag(K)))
    if scale <= 0.0:
        scale = 1.0
    jitter = JITTER_START * scale
    eye = np.eye(K.shape[0])
    while True:
        try:
            return np.linalg.cholesky(K + jitter * eye), jitter
        except np.linalg.LinAlgError:
            jitter *= 10.0
            if jitter > JITTER_MAX * scale * (1.0 + 1e-12):
                raise JitterError(
                    f"matrix of size {K.shape[0]} not positive definite even "
                    f"with jitter {JITTER_MAX * scale:g}"
                )


def _select_dims(X: np.ndarray, active_dims) -> np.ndarray:
    if active_dims is None:
        return X
    return X[:, np.asarray(active_dims, dtype=int)]


@dataclass(frozen=True)
class Kernel:
    """Base class: immutable spec, pure evaluation, per-parameter gradients."""

    @property
    def n_params(self) -> int:
        raise NotImplementedError

    @property
    def param_names(self) -> list[str]:
        raise NotImplementedError

    def get_params(self) -> np.ndarray:
        """Unconstrained (log-space) parameter vector."""
        raise NotImplementedError

    def with_params(self, params: np.ndarray) -> "Kernel":
        """New spec with the given unconstrained parameter vector."""
        raise NotImplementedError

    def __call__(self, X1: np.ndarray, X2: np.ndarray | None = None) -> np.ndarray:
        raise NotImplementedError

    def diag(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def grad(self, X1: np.ndarray, X2: np.ndarray | None, index: int) -> np.ndarray:
        """d k(X1, X2) / d params[index] (unconstrained space)."""
        raise NotImplementedError

    def grad_stack(self, X1: np.ndarray, X2: np.ndarray | None = None) -> np.ndarray:
        """All parameter gradients at once, shape (n_params, n1, n2).

        Subclasses override this to share the base evaluation across
        parameters; the fallback just stacks :meth:`grad` calls.
        """
        X1c, X2c = _check_pair(X1, X2)
        out = np.empty((self.n_params, X1c.shape[0], X2c.shape[0]))
        for i in range(self.n_params):
            out[i] = self.grad(X1c, X2c, i)
        return out

    def __add__(self, other: "Kernel") -> "SumKernel":
        left = list(self.terms) if isinstance(self, SumKernel) else [self]
        right = list(other.terms) if isinstance(other, SumKernel) else [other]
        return SumKernel(tuple(left + right))


def _as2d(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise ValueError(f"inputs must be (n, d) matrices, got shape {X.shape}")
    return X


def _check_pair(X1, X2):
    X1 = _as2d(X1)
    X2 = X1 if X2 is None else _as2d(X2)
    if X1.shape[1] != X2.shape[1]:
        raise ValueError(
            f"input dimension mismatch: {X1.shape[1]} vs {X2.shape[1]} columns"
        )
    return X1, X2


@dataclass(frozen=True)
class SquaredExponential(Kernel):
    """SE kernel with one lengthscale per (active) input dimension.

    k(x, x') = variance * exp(-0.5 * sum_d (x_d - x'_d)^2 / lengthscale_d^2)
    """

    log_variance: float = 0.0
    log_lengthscales: np.ndarray = field(default_factory=lambda: np.zeros(1))
    active_dims: tuple[int, ...] | None = None

    def __post_init__(self):
        object.__setattr__(
            self, "log_lengthscales", np.atleast_1d(np.asarray(self.log_lengthscales, dtype=float))
        )

    @classmethod
    def create(cls, variance: float = 1.0, lengthscales=1.0, input_dim: int | None = None,
               active_dims=None) -> "SquaredExponential":
        ls = np.atleast_1d(np.asarray(lengthscales, dtype=float))
        if input_dim is not None and ls.size == 1:
            ls = np.full(input_dim, ls[0])
        return cls(np.log(variance), np.log(ls),
                   None if active_dims is None else tuple(active_dims))

    @property
    def variance(self) -> float:
        return float(np.exp(self.log_variance))

    @property
    def lengthscales(self) -> np.ndarray:
        return np.exp(self.log_lengthscales)

    @property
    def n_params(self) -> int:
        return 1 + self.log_lengthscales.size

    @property
    def param_names(self) -> list[str]:
        return ["log_variance"] + [f"log_lengthscale_{d}" for d in range(self.log_lengthscales.size)]

    def get_params(self) -> np.ndarray:
        return np.concatenate([[self.log_variance], self.log_lengthscales])

    def with_params(self, params) -> "SquaredExponential":
        params = np.asarray(params, dtype=float)
        if params.size != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {params.size}")
        return dataclasses.replace(self, log_variance=float(params[0]),
                                   log_lengthscales=params[1:].copy())

    def _scaled_sq_dists(self, X1, X2):
        # per-dimension squared distances, scaled by 1/l_d^2; kept separate for grads
        Z1 = _select_dims(X1, self.active_dims) / self.lengthscales
        Z2 = _select_dims(X2, self.active_dims) / self.lengthscales
        return (Z1[:, None, :] - Z2[None, :, :]) ** 2

    def __call__(self, X1, X2=None):
        X1, X2 = _check_pair(X1, X2)
        sq = self._scaled_sq_dists(X1, X2)
        return self.variance * np.exp(-0.5 * sq.sum(axis=-1))

    def diag(self, X):
        X = _as2d(X)
        return np.full(X.shape[0], self.variance)

    def grad(self, X1, X2, index):
        X1, X2 = _check_pair(X1, X2)
        if not 0 <= index < self.n_params:
            raise IndexError(f"parameter index {index} out of range")
        sq = self._scaled_sq_dists(X1, X2)
        K = self.variance * np.exp(-0.5 * sq.sum(axis=-1))
        if index == 0:
            return K  # K is proportional to exp(log_variance)
        return K * sq[:, :, index - 1]

    def grad_stack(self, X1, X2=None):
        X1, X2 = _check_pair(X1, X2)
        sq = self._scaled_sq_dists(X1, X2)
        K = self.variance * np.exp(-0.5 * sq.sum(axis=-1))
        out = np.empty((self.n_params, X1.shape[0], X2.shape[0]))
        out[0] = K
        for d in range(self.log_lengthscales.size):
            out[1 + d] = K * sq[:, :, d]
        return out


@dataclass(frozen=True)
class Periodic(Kernel):
    """Exp-sine-squared kernel on the (single) active dimension.

    k(t, t') = variance * exp(-2 sin^2(pi (t - t') / period) / lengthscale^2)
    """

    log_variance: float = 0.0
    log_lengthscale: float = 0.0
    log_period: float = 0.0
    active_dims: tuple[int, ...] | None = None

    @classmethod
    def create(cls, variance=1.0, lengthscale=1.0, period=1.0, active_dims=None) -> "Periodic":
        return cls(np.log(variance), np.log(lengthscale), np.log(period),
                   None if active_dims is None else tuple(active_dims))

    @property
    def variance(self) -> float:
        return float(np.exp(self.log_variance))

    @property
    def lengthscale(self) -> float:
        return float(np.exp(self.log_lengthscale))

    @property
    def period(self) -> float:
        return float(np.exp(self.log_period))

    @property
    def n_params(self) -> int:
        return 3

    @property
    def param_names(self) -> list[str]:
        return ["log_variance", "log_lengthscale", "log_period"]

    def get_params(self) -> np.ndarray:
        return np.array([self.log_variance, self.log_lengthscale, self.log_period])

    def with_params(self, params) -> "Periodic":
        params = np.asarray(params, dtype=float)
        if params.size != 3:
            raise ValueError(f"expected 3 parameters, got {params.size}")
        return dataclasses.replace(self, log_variance=float(params[0]),
                                   log_lengthscale=float(params[1]),
                                   log_period=float(params[2]))

    def _diffs(self, X1, X2):
        t1 = _select_dims(X1, self.active_dims)
        t2 = _select_dims(X2, self.active_dims)
        if t1.shape[1] != 1:
            raise ValueError("periodic kernel needs exactly one active dimension")
        return t1[:, 0][:, None] - t2[:, 0][None, :]

    def __call__(self, X1, X2=None):
        X1, X2 = _check_pair(X1, X2)
        r = self._diffs(X1, X2)
        s = np.sin(np.pi * r / self.period)
        return self.variance * np.exp(-2.0 * s * s / self.lengthscale**2)

    def diag(self, X):
        X = _as2d(X)
        return np.full(X.shape[0], self.variance)

    def grad(self, X1, X2, index):
        X1, X2 = _check_pair(X1, X2)
        if not 0 <= index < 3:
            raise IndexError(f"parameter index {index} out of range")
        r = self._diffs(X1, X2)
        ell2 = self.lengthscale**2
        arg = np.pi * r / self.period
        s = np.sin(arg)
        K = self.variance * np.exp(-2.0 * s * s / ell2)
        if index == 0:
            return K
        if index == 1:
            return K * 4.0 * s * s / ell2
        # d/d log(period): d(arg)/d log p = -arg, so d(-2 sin^2(arg)/l^2) = 2 sin(2 arg) arg / l^2
        return K * 2.0 * np.sin(2.0 * arg) * arg / ell2

    def grad_stack(self, X1, X2=None):
        X1, X2 = _check_pair(X1, X2)
        r = self._diffs(X1, X2)
        ell2 = self.lengthscale**2
        arg = np.pi * r / self.period
        s = np.sin(arg)
        K = self.variance * np.exp(-2.0 * s * s / ell2)
        return np.stack([K, K * 4.0 * s * s / ell2,
                         K * 2.0 * np.sin(2.0 * arg) * arg / ell2])


@dataclass(frozen=True)
class SpectralMixture(Kernel):
    """Gaussian spectral-mixture kernel on the (single) active dimension.

    k(t, t') = sum_q w_q exp(-2 pi^2 tau^2 v_q) cos(2 pi tau mu_q),  tau = t - t'

    with weights w_q, spectral means mu_q and spectral variances v_q, all
    positive.  The number of components is a configuration choice.
    """

    log_weights: np.ndarray = field(default_factory=lambda: np.zeros(1))
    log_means: np.ndarray = field(default_factory=lambda: np.zeros(1))
    log_variances: np.ndarray = field(default_factory=lambda: np.zeros(1))
    active_dims: tuple[int, ...] | None = None

    def __post_init__(self):
        for name in ("log_weights", "log_means", "log_variances"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))
        if not (self.log_weights.size == self.log_means.size == self.log_variances.size):
            raise ValueError("weights, means and variances must have one entry per component")

    @classmethod
    def create(cls, weights, means, variances, active_dims=None) -> "SpectralMixture":
        return cls(np.log(np.atleast_1d(weights)), np.log(np.atleast_1d(means)),
                   np.log(np.atleast_1d(variances)),
                   None if active_dims is None else tuple(active_dims))

    @property
    def n_components(self) -> int:
        return self.log_weights.size

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    @property
    def means(self) -> np.ndarray:
        return np.exp(self.log_means)

    @property
    def variances(self) -> np.ndarray:
        return np.exp(self.log_variances)

    @property
    def n_params(self) -> int:
        return 3 * self.n_components

    @property
    def param_names(self) -> list[str]:
        q = range(self.n_components)
        return ([f"log_weight_{i}" for i in q] + [f"log_mean_{i}" for i in q]
                + [f"log_variance_{i}" for i in q])

    def get_params(self) -> np.ndarray:
        return np.concatenate([self.log_weights, self.log_means, self.log_variances])

    def with_params(self, params) -> "SpectralMixture":
        params = np.asarray(params, dtype=float)
        if params.size != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {params.size}")
        q = self.n_components
        return dataclasses.replace(self, log_weights=params[:q].copy(),
                                   log_means=params[q:2 * q].copy(),
                                   log_variances=params[2 * q:].copy())

    def _taus(self, X1, X2):
        t1 = _select_dims(X1, self.active_dims)
        t2 = _select_dims(X2, self.active_dims)
        if t1.shape[1] != 1:
            raise ValueError("spectral-mixture kernel needs exactly one active dimension")
        return t1[:, 0][:, None] - t2[:, 0][None, :]

    def _component(self, tau, q):
        decay = np.exp(-2.0 * np.pi**2 * tau**2 * self.variances[q])
        return decay, np.cos(2.0 * np.pi * tau * self.means[q])

    def __call__(self, X1, X2=None):
        X1, X2 = _check_pair(X1, X2)
        tau = self._taus(X1, X2)
        K = np.zeros_like(tau)
        for q in range(self.n_components):
            decay, cosine = self._component(tau, q)
            K += self.weights[q] * decay * cosine
        return K

    def diag(self, X):
        X = _as2d(X)
        return np.full(X.shape[0], float(self.weights.sum()))

    def grad(self, X1, X2, index):
        X1, X2 = _check_pair(X1, X2)
        if not 0 <= index < self.n_params:
            raise IndexError(f"parameter index {index} out of range")
        tau = self._taus(X1, X2)
        kind, q = divmod(index, self.n_components)
        decay, cosine = self._component(tau, q)
        w, mu, v = self.weights[q], self.means[q], self.variances[q]
        if kind == 0:  # log weight
            return w * decay * cosine
        if kind == 1:  # log spectral mean
            return -w * decay * np.sin(2.0 * np.pi * tau * mu) * 2.0 * np.pi * tau * mu
        # log spectral variance
        return w * decay * cosine * (-2.0 * np.pi**2 * tau**2 * v)

    def grad_stack(self, X1, X2=None):
        X1, X2 = _check_pair(X1, X2)
        tau = self._taus(X1, X2)
        nq = self.n_components
        out = np.empty((self.n_params, tau.shape[0], tau.shape[1]))
        for q in range(nq):
            decay, cosine = self._component(tau, q)
            w, mu, v = self.weights[q], self.means[q], self.variances[q]
            out[q] = w * decay * cosine
            out[nq + q] = -w * decay * np.sin(2 * np.pi * tau * mu) * 2 * np.pi * tau * mu
            out[2 * nq + q] = w * decay * cosine * (-2.0 * np.pi**2 * tau**2 * v)
        return out


@dataclass(frozen=True)
class SumKernel(Kernel):
    """Sum of kernels; the parameter vector concatenates the summands'."""

    terms: tuple[Kernel, ...] = ()

    def __post_init__(self):
        if not self.terms:
            raise ValueError("sum kernel needs at least one term")
        object.__setattr__(self, "terms", tuple(self.terms))

    @property
    def n_params(self) -> int:
        return sum(t.n_params for t in self.terms)

    @property
    def param_names(self) -> list[str]:
        return [f"term{i}.{name}" for i, t in enumerate(self.terms) for name in t.param_names]

    def get_params(self) -> np.ndarray:
        return np.concatenate([t.get_params() for t in self.terms])

    def with_params(self, params) -> "SumKernel":
        params = np.asarray(params, dtype=float)
        if params.size != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {params.size}")
        new_terms, offset = [], 0
        for t in self.terms:
            new_terms.append(t.with_params(params[offset:offset + t.n_params]))
            offset += t.n_params
        return SumKernel(tuple(new_terms))

    def __call__(self, X1, X2=None):
        X1, X2 = _check_pair(X1, X2)
        K = self.terms[0](X1, X2)
        for t in self.terms[1:]:
            K = K + t(X1, X2)
        return K

    def diag(self, X):
        d = self.terms[0].diag(X)
        for t in self.terms[1:]:
            d = d + t.diag(X)
        return d

    def grad(self, X1, X2, index):
        X1, X2 = _check_pair(X1, X2)
        if not 0 <= index < self.n_params:
            raise IndexError(f"parameter index {index} out of range")
        offset = 0
        for t in self.terms:
            if index < offset + t.n_params:
                # parameters of other summands do not appear in this term
                return t.grad(X1, X2, index - offset)
            offset += t.n_params
        raise IndexError(index)  # unreachable

    def grad_stack(self, X1, X2=None):
        X1, X2 = _check_pair(X1, X2)
        out = np.zeros((self.n_params, X1.shape[0], X2.shape[0]))
        offset = 0
        for t in self.terms:
            out[offset:offset + t.n_params] = t.grad_stack(X1, X2)
            offset += t.n_params
        return out


@dataclass(frozen=True)
class NoiseSpec:
    """Observation-noise variance, log-parametrized."""

    log_variance: float = np.log(0.1)

    @classmethod
    def create(cls, variance: float) -> "NoiseSpec":
        if variance <= 0:
            raise ValueError("noise variance must be positive")
        return cls(float(np.log(variance)))

    @property
    def variance(self) -> float:
        return float(np.exp(self.log_variance))

    def with_params(self, log_variance: float) -> "NoiseSpec":
        return NoiseSpec(float(log_variance))


def eval_kernel(spec: Kernel, X1, X2=None) -> np.ndarray:
    """Kernel matrix with entries k(X1_i, X2_j)."""
    return spec(X1, X2)


def eval_kernel_diag(spec: Kernel, X) -> np.ndarray:
    """Diagonal of ``eval_kernel(spec, X, X)`` without forming the matrix."""
    return spec.diag(X)


def kernel_grad(spec: Kernel, X1, X2, param_index: int) -> np.ndarray:
    """Derivative of the kernel matrix w.r.t. one unconstrained parameter.

    ``param_index == spec.n_params`` is the reserved noise slot and yields a
    zero matrix; the noise variance never enters the kernel.
    """
    if param_index == spec.n_params:
        X1, X2 = _check_pair(X1, X2)
        return np.zeros((X1.shape[0], X2.shape[0]))
    return spec.grad(X1, X2, param_index)


def kernel_grad_diag(spec: Kernel, X, param_index: int) -> np.ndarray:
    """Derivative of ``diag(k(X, X))`` w.r.t. one unconstrained parameter.

    For the stationary kernels here only amplitude-like parameters move the
    diagonal, so this avoids forming the full gradient matrix.
    """
    X = _as2d(X)
    n = X.shape[0]
    if param_index == spec.n_params:
        return np.zeros(n)
    if isinstance(spec, SumKernel):
        offset = 0
        for t in spec.terms:
            if param_index < offset + t.n_params:
                return kernel_grad_diag(t, X, param_index - offset)
            offset += t.n_params
        raise IndexError(param_index)
    if isinstance(spec, (SquaredExponential, Periodic)):
        if param_index == 0:
            return np.full(n, spec.variance)
        return np.zeros(n)
    if isinstance(spec, SpectralMixture):
        kind, q = divmod(param_index, spec.n_components)
        if kind == 0:
            return np.full(n, spec.weights[q])
        return np.zeros(n)  # at tau = 0 the mean/variance factors are flat
    return np.diag(spec.grad(X, X, param_index)).copy()


def kernel_grad_stack(spec: Kernel, X1, X2=None) -> np.ndarray:
    """All kernel-parameter gradients stacked, shape (n_params, n1, n2)."""
    return spec.grad_stack(X1, X2)


def kernel_grad_diag_stack(spec: Kernel, X) -> np.ndarray:
    """Diagonal gradients for every kernel parameter, shape (n_params, n)."""
    X = _as2d(X)
    return np.stack([kernel_grad_diag(spec, X, i) for i in range(spec.n_params)])


def full_params(kernel: Kernel, noise: NoiseSpec) -> np.ndarray:
    """Model parameter vector: kernel parameters then the reserved noise slot."""
    return np.concatenate([kernel.get_params(), [noise.log_variance]])


def split_params(kernel: Kernel, theta: np.ndarray) -> tuple[Kernel, NoiseSpec]:
    """Inverse of :func:`full_params` against a template kernel."""
    theta = np.asarray(theta, dtype=float)
    if theta.size != kernel.n_params + 1:
        raise ValueError(f"expected {kernel.n_params + 1} parameters, got {theta.size}")
    return kernel.with_params(theta[:-1]), NoiseSpec(float(theta[-1]))
