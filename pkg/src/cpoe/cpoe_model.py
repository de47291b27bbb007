"""Correlated product-of-experts model: factors, precision, likelihood, gradients.

Per expert j the conditional factors are

    F_j = K(A_j, A_pred)  K(A_pred, A_pred)^{-1}          (prior transition)
    Q_j = K(A_j, A_j) - K(A_j, A_pred) K(...)^{-1} K(A_pred, A_j)
    H_j = K(X_j, A_corr) K(A_corr, A_corr)^{-1}           (projection)
    D_j = K(X_j, X_j) - K(X_j, A_corr) K(...)^{-1} K(A_corr, X_j)

with ``A_pred`` / ``A_corr`` the stacked inducing inputs over the expert's
predecessor / correlation sets, ``F_1 = 0`` and ``Q_1 = K(A_1, A_1)``.  The
residual covariance and the objective correction depend on the likelihood
variant (FITC keeps the diagonal of D_j, PITC the full block, VFE/DTC drop it,
PEP scales it by alpha).

The prior precision is assembled as a sum of local contributions
``Ft_j^T Q_j^{-1} Ft_j`` with ``Ft_j = [-F_j, I]`` scattered over the
predecessor-plus-self block index sets.  Adding the projection precision
``H^T V^{-1} H`` (same scatter over correlation sets) gives the posterior
precision, which keeps the prior's block pattern and is factorized once per
hyperparameter setting; the symbolic analysis is reused across refits.
"""

from __future__ import annotations

import concurrent.futures
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve

from .block_sparse import (
    BlockSparseMatrix,
    FactorizationError,
    SymbolicFactor,
    block_cholesky,
    partial_inverse,
    symbolic_factor,
)
from .expert_graph import ExpertGraph
from .kernels import (
    Kernel,
    NoiseSpec,
    full_params,
    jittered_cholesky,
    kernel_grad,
    kernel_grad_diag,
    kernel_grad_diag_stack,
    kernel_grad_stack,
    split_params,
)

__all__ = [
    "VariantSpec",
    "LocalFactors",
    "CpoePosterior",
    "CpoeModel",
    "build_local_factors",
    "assemble_prior_precision",
    "assemble_posterior",
    "log_marginal_likelihood",
    "lml_gradient",
    "stochastic_lml_term",
    "prior_kl_difference",
]

_VARIANTS = ("fitc", "dtc", "pitc", "vfe", "pep", "pep_b")


@dataclass(frozen=True)
class VariantSpec:
    """Likelihood variant: residual covariance shape and objective correction."""

    name: str = "fitc"
    alpha_pep: float = 1.0

    def __post_init__(self):
        if self.name not in _VARIANTS:
            raise ValueError(f"unknown variant {self.name!r}, expected one of {_VARIANTS}")
        if self.name in ("pep", "pep_b") and not 0.0 < self.alpha_pep <= 1.0:
            raise ValueError(f"alpha_pep must be in (0, 1], got {self.alpha_pep}")

    @property
    def full_residual(self) -> bool:
        """Whether the residual covariance is a full block rather than diagonal."""
        return self.name in ("pitc", "pep_b")


@dataclass
class ExpertFactor:
    """All per-expert matrices needed for assembly, gradients and prediction."""

    index: int
    rows: np.ndarray
    psi: np.ndarray
    pred: np.ndarray
    pred_plus: np.ndarray
    A_self: np.ndarray
    A_pred: np.ndarray
    A_psi: np.ndarray
    X: np.ndarray
    # projection side
    K_xpsi: np.ndarray
    chol_psi: np.ndarray
    H: np.ndarray
    d_diag: np.ndarray                  # diagonal of D_j
    D_full: np.ndarray | None           # only for full-residual variants
    vbar_diag: np.ndarray | None        # diagonal residual + variant scaling
    vbar_full: np.ndarray | None
    lam: float
    # prior side
    K_aa: np.ndarray
    K_api: np.ndarray | None
    K_pipi: np.ndarray | None
    chol_pipi: np.ndarray | None
    F: np.ndarray | None
    Q: np.ndarray                       # effective (jitter included)
    chol_Q: np.ndarray
    logdet_Q: float

    def Qinv(self) -> np.ndarray:
        return cho_solve((self.chol_Q, True), np.eye(self.Q.shape[0]))

    def Ft(self) -> np.ndarray:
        """[-F_j, I], columns ordered like the sorted predecessor-plus-self set."""
        L = self.A_self.shape[0]
        if self.F is None:
            return np.eye(L)
        return np.hstack([-self.F, np.eye(L)])


@dataclass
class LocalFactors:
    graph: ExpertGraph
    kernel: Kernel
    noise: NoiseSpec
    variant: VariantSpec
    experts: list[ExpertFactor]

    @property
    def lam_total(self) -> float:
        return float(sum(e.lam for e in self.experts))

    def v_diag(self, j: int) -> np.ndarray:
        """Diagonal of V_j = vbar_j + noise variance (diagonal variants)."""
        return self.experts[j].vbar_diag + self.noise.variance

    def v_full(self, j: int) -> np.ndarray:
        e = self.experts[j]
        return e.vbar_full + self.noise.variance * np.eye(e.X.shape[0])


def _n_threads() -> int:
    try:
        return max(int(os.environ.get("CPOE_THREADS", "1")), 1)
    except ValueError:
        return 1


def _residual(variant: VariantSpec, d_diag: np.ndarray, D_full: np.ndarray | None,
              noise_var: float):
    """(vbar_diag, vbar_full, lambda) for one expert under the given variant."""
    a = variant.alpha_pep
    if variant.name == "fitc":
        return d_diag, None, 0.0
    if variant.name == "dtc":
        return np.zeros_like(d_diag), None, 0.0
    if variant.name == "vfe":
        return np.zeros_like(d_diag), None, float(np.sum(d_diag)) / (2.0 * noise_var)
    if variant.name == "pep":
        lam = (1.0 - a) / (2.0 * a) * float(np.sum(np.log1p(a * d_diag / noise_var)))
        return a * d_diag, None, lam
    if variant.name == "pitc":
        return None, D_full, 0.0
    # pep_b
    M = np.eye(D_full.shape[0]) + (a / noise_var) * D_full
    lam = (1.0 - a) / (2.0 * a) * float(np.linalg.slogdet(M)[1])
    return None, a * D_full, lam


def _build_expert(j: int, graph: ExpertGraph, kernel: Kernel, noise: NoiseSpec,
                  variant: VariantSpec) -> ExpertFactor:
    rows = graph.row_indices[j]
    X_j = graph.X[rows]
    psi = graph.correlation[j]
    pred = graph.predecessors[j]
    pred_plus = graph.pred_plus(j)
    A_self = graph.inducing_inputs[j]
    A_psi = np.vstack([graph.inducing_inputs[p] for p in psi])
    A_pred = (np.vstack([graph.inducing_inputs[p] for p in pred])
              if pred.size else np.zeros((0, graph.D)))

    # projection factors on the correlation region
    K_psipsi = kernel(A_psi)
    chol_psi, _ = jittered_cholesky(K_psipsi)
    K_xpsi = kernel(X_j, A_psi)
    H = cho_solve((chol_psi, True), K_xpsi.T).T
    d_diag = kernel.diag(X_j) - np.einsum("ij,ij->i", K_xpsi, H)
    D_full = None
    if variant.full_residual:
        D_full = kernel(X_j) - K_xpsi @ H.T
        D_full = 0.5 * (D_full + D_full.T)
    vbar_diag, vbar_full, lam = _residual(variant, d_diag, D_full, noise.variance)

    # prior transition factors on the predecessor set
    K_aa = kernel(A_self)
    if pred.size:
        K_pipi = kernel(A_pred)
        chol_pipi, _ = jittered_cholesky(K_pipi)
        K_api = kernel(A_self, A_pred)
        F = cho_solve((chol_pipi, True), K_api.T).T
        Q = K_aa - K_api @ F.T
        Q = 0.5 * (Q + Q.T)
    else:
        K_pipi = chol_pipi = K_api = F = None
        Q = K_aa
    # jitter scale: the kernel amplitude, not Q's own (possibly tiny) diagonal
    chol_Q, q_jitter = jittered_cholesky(Q, scale=float(np.mean(np.diag(K_aa))))
    Q_eff = Q + q_jitter * np.eye(Q.shape[0])
    logdet_Q = 2.0 * float(np.sum(np.log(np.diag(chol_Q))))

    return ExpertFactor(index=j, rows=rows, psi=psi, pred=pred, pred_plus=pred_plus,
                        A_self=A_self, A_pred=A_pred, A_psi=A_psi, X=X_j,
                        K_xpsi=K_xpsi, chol_psi=chol_psi, H=H, d_diag=d_diag,
                        D_full=D_full, vbar_diag=vbar_diag, vbar_full=vbar_full,
                        lam=lam, K_aa=K_aa, K_api=K_api, K_pipi=K_pipi,
                        chol_pipi=chol_pipi, F=F, Q=Q_eff, chol_Q=chol_Q,
                        logdet_Q=logdet_Q)


def build_local_factors(graph: ExpertGraph, kernel: Kernel, noise: NoiseSpec,
                        variant: VariantSpec = VariantSpec()) -> LocalFactors:
    """Build every expert's factors; embarrassingly parallel over experts."""
    threads = _n_threads()
    if threads > 1 and graph.J > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
            experts = list(pool.map(
                lambda j: _build_expert(j, graph, kernel, noise, variant), range(graph.J)))
    else:
        experts = [_build_expert(j, graph, kernel, noise, variant) for j in range(graph.J)]
    return LocalFactors(graph=graph, kernel=kernel, noise=noise, variant=variant,
                        experts=experts)


def _scatter_symmetric(target: BlockSparseMatrix, idx: np.ndarray, local: np.ndarray,
                       bs: int) -> None:
    for a, i in enumerate(idx):
        for b, j in enumerate(idx):
            target.add_to_block(int(i), int(j), local[a * bs:(a + 1) * bs, b * bs:(b + 1) * bs])


def assemble_prior_precision(factors: LocalFactors) -> BlockSparseMatrix:
    """Prior precision: sum of local ``Ft^T Q^{-1} Ft`` over predecessor-plus-self sets."""
    graph = factors.graph
    L = graph.L
    S = BlockSparseMatrix(graph.J, row_block=L)
    for e in factors.experts:
        Ft = e.Ft()
        local = Ft.T @ cho_solve((e.chol_Q, True), Ft)
        local = 0.5 * (local + local.T)
        _scatter_symmetric(S, e.pred_plus, local, L)
    return S


@dataclass
class CpoePosterior:
    """Assembled posterior: precision, mean, factor, partial inverse, and the
    cached scalars entering the marginal likelihood."""

    factors: LocalFactors
    y: np.ndarray
    S: BlockSparseMatrix
    precision: BlockSparseMatrix
    b: np.ndarray
    mu: np.ndarray
    chol: "object"
    zbar: "object"
    symbolic: SymbolicFactor
    logdet_precision: float
    logdet_V: float
    logdet_Q: float
    yT_Vinv_y: float
    # per-expert caches for gradients / prediction
    vinv_y: list[np.ndarray] = field(repr=False, default=None)
    vinv_H: list[np.ndarray] = field(repr=False, default=None)

    @property
    def graph(self) -> ExpertGraph:
        return self.factors.graph

    @property
    def N(self) -> int:
        return self.y.size

    def mu_at(self, idx: np.ndarray) -> np.ndarray:
        L = self.graph.L
        return np.concatenate([self.mu[int(i) * L:(int(i) + 1) * L] for i in idx])

    def sigma_at(self, idx: np.ndarray) -> np.ndarray:
        """Posterior covariance over a block index set, from the partial inverse."""
        return self.zbar.gather(np.asarray(idx, dtype=int))

    @property
    def log_marginal_likelihood_uncorrected(self) -> float:
        val = -0.5 * (self.yT_Vinv_y - float(self.b @ self.mu) + self.logdet_precision
                      + self.logdet_V + self.logdet_Q + self.N * np.log(2.0 * np.pi))
        if not np.isfinite(val):
            raise ArithmeticError("non-finite log marginal likelihood")
        # the marginal covariance dominates the noise, bounding any valid value;
        # exceeding it means the sparse log-determinant cancellation collapsed
        bound = -0.5 * self.N * np.log(2.0 * np.pi * self.factors.noise.variance)
        if val > bound + 1e-6 * max(abs(bound), 1.0) + 1e-9:
            raise ArithmeticError(
                "inconsistent log marginal likelihood (ill-conditioned region)")
        return float(val)

    @property
    def log_marginal_likelihood(self) -> float:
        return self.log_marginal_likelihood_uncorrected - self.factors.lam_total


def assemble_posterior(factors: LocalFactors, S: BlockSparseMatrix, y: np.ndarray,
                       symbolic: SymbolicFactor | None = None) -> CpoePosterior:
    """Add the projection precision to the prior, factorize, solve, invert.

    Passing a previously computed ``symbolic`` skips the fill analysis; the
    pattern only depends on the graph, not on the hyperparameters.
    """
    graph = factors.graph
    noise = factors.noise
    L = graph.L
    y = np.asarray(y, dtype=float).ravel()
    if y.size != graph.N:
        raise ValueError(f"y has {y.size} entries, expected {graph.N}")

    precision = BlockSparseMatrix(graph.J, row_block=L)
    for (i, j) in S.pattern():
        precision.set_block(i, j, S.get_block(i, j).copy())

    b = np.zeros(graph.M)
    yT_Vinv_y = 0.0
    logdet_V = 0.0
    vinv_y_list: list[np.ndarray] = []
    vinv_H_list: list[np.ndarray] = []
    for e in factors.experts:
        y_j = y[e.rows]
        if e.vbar_full is None:
            v = e.vbar_diag + noise.variance
            vinv_y = y_j / v
            vinv_H = e.H / v[:, None]
            logdet_V += float(np.sum(np.log(v)))
        else:
            V = e.vbar_full + noise.variance * np.eye(y_j.size)
            cv = np.linalg.cholesky(V)
            vinv_y = cho_solve((cv, True), y_j)
            vinv_H = cho_solve((cv, True), e.H)
            logdet_V += 2.0 * float(np.sum(np.log(np.diag(cv))))
        yT_Vinv_y += float(y_j @ vinv_y)
        local_T = e.H.T @ vinv_H
        local_T = 0.5 * (local_T + local_T.T)
        _scatter_symmetric(precision, e.psi, local_T, L)
        local_b = e.H.T @ vinv_y
        for a, i in enumerate(e.psi):
            b[int(i) * L:(int(i) + 1) * L] += local_b[a * L:(a + 1) * L]
        vinv_y_list.append(vinv_y)
        vinv_H_list.append(vinv_H)

    if symbolic is None:
        symbolic = symbolic_factor(precision.pattern(), graph.J)
    # jitter on factorization failure is the caller's job: the assembled
    # precision is PSD in exact arithmetic but accumulated rounding from
    # near-singular transition noise can make a pivot fail far from good
    # hyperparameter regions
    try:
        chol = block_cholesky(precision, symbolic=symbolic)
    except FactorizationError:
        scale = float(np.mean([np.mean(np.diag(precision.get_block(i, i)))
                               for i in range(graph.J)]))
        chol = None
        applied = 0.0
        for delta in (1e-10, 1e-9, 1e-8, 1e-7, 1e-6):
            bump = (delta - applied) * scale * np.eye(L)
            for i in range(graph.J):
                precision.add_to_block(i, i, bump)
            applied = delta
            try:
                chol = block_cholesky(precision, symbolic=symbolic)
                break
            except FactorizationError:
                continue
        if chol is None:
            raise
    mu = chol.solve(b)
    zbar = partial_inverse(chol)
    logdet_Q = float(sum(e.logdet_Q for e in factors.experts))
    return CpoePosterior(factors=factors, y=y, S=S, precision=precision, b=b, mu=mu,
                         chol=chol, zbar=zbar, symbolic=symbolic,
                         logdet_precision=chol.logdet(), logdet_V=logdet_V,
                         logdet_Q=logdet_Q, yT_Vinv_y=yT_Vinv_y,
                         vinv_y=vinv_y_list, vinv_H=vinv_H_list)


def log_marginal_likelihood(posterior: CpoePosterior, y: np.ndarray | None = None,
                            corrected: bool = True) -> float:
    """Sparse-form log marginal likelihood; ``corrected`` subtracts the variant term."""
    if y is not None and not np.array_equal(np.asarray(y).ravel(), posterior.y):
        raise ValueError("posterior was assembled for a different target vector")
    if corrected:
        return posterior.log_marginal_likelihood
    return posterior.log_marginal_likelihood_uncorrected


def _variant_dvbar(variant: VariantSpec, ddiag: np.ndarray, dD_full: np.ndarray | None):
    """Residual-covariance derivative under the variant (kernel parameters)."""
    a = variant.alpha_pep
    if variant.name == "fitc":
        return ddiag, None
    if variant.name in ("dtc", "vfe"):
        return np.zeros_like(ddiag), None
    if variant.name == "pep":
        return a * ddiag, None
    if variant.name == "pitc":
        return None, dD_full
    return None, a * dD_full  # pep_b


def _dlam(variant: VariantSpec, e: ExpertFactor, noise_var: float,
          ddiag: np.ndarray | None, dD_full: np.ndarray | None, is_noise: bool) -> float:
    a = variant.alpha_pep
    if variant.name in ("fitc", "dtc", "pitc"):
        return 0.0
    if variant.name == "vfe":
        if is_noise:
            return -float(np.sum(e.d_diag)) / (2.0 * noise_var)
        return float(np.sum(ddiag)) / (2.0 * noise_var)
    if variant.name == "pep":
        w = 1.0 / (1.0 + a * e.d_diag / noise_var)
        c = (1.0 - a) / (2.0 * a)
        if is_noise:
            return c * float(np.sum(w * (-a * e.d_diag / noise_var)))
        return c * float(np.sum(w * a * ddiag / noise_var))
    # pep_b
    M = np.eye(e.D_full.shape[0]) + (a / noise_var) * e.D_full
    Minv = np.linalg.inv(M)
    c = (1.0 - a) / (2.0 * a)
    if is_noise:
        return c * float(np.sum(Minv * ((-a / noise_var) * e.D_full).T))
    return c * float(np.sum(Minv * ((a / noise_var) * dD_full).T))


def lml_gradient(posterior: CpoePosterior, y: np.ndarray | None = None) -> np.ndarray:
    """Analytic gradient of the (variant-corrected) objective over all parameters.

    Vector layout: kernel parameters in spec order, then the log noise
    variance.  The trace against the posterior covariance only touches blocks
    inside the precision pattern, which is exactly what the partial inverse
    provides.  Diagonal-residual variants take a batched path that shares the
    kernel evaluations across parameters; the rarely-optimized full-residual
    variants keep the straightforward per-parameter loop.
    """
    if y is not None and not np.array_equal(np.asarray(y).ravel(), posterior.y):
        raise ValueError("posterior was assembled for a different target vector")
    if not posterior.factors.variant.full_residual:
        return _lml_gradient_batched(posterior)
    return _lml_gradient_loop(posterior)


def _lml_gradient_batched(posterior: CpoePosterior) -> np.ndarray:
    """Gradient for diagonal-residual variants with stacked kernel derivatives."""
    factors = posterior.factors
    kernel, noise, variant = factors.kernel, factors.noise, factors.variant
    graph = factors.graph
    L = graph.L
    n_kernel = kernel.n_params
    grad = np.zeros(n_kernel + 1)
    sigma2 = noise.variance
    a = variant.alpha_pep

    for j, e in enumerate(factors.experts):
        mu_psi = posterior.mu_at(e.psi)
        mu_pp = posterior.mu_at(e.pred_plus)
        W_T = posterior.sigma_at(e.psi) + np.outer(mu_psi, mu_psi)
        W_S = posterior.sigma_at(e.pred_plus) + np.outer(mu_pp, mu_pp)
        QinvFt = cho_solve((e.chol_Q, True), e.Ft())
        Qinv = cho_solve((e.chol_Q, True), np.eye(e.Q.shape[0]))
        a_j = posterior.vinv_y[j]
        VinvH = posterior.vinv_H[j]
        y_j = posterior.y[e.rows]
        v = factors.v_diag(j)
        B = y_j.size
        LC = e.H.shape[1]

        # stacked kernel derivatives for this expert
        dKpsi = kernel_grad_stack(kernel, e.A_psi)                  # (P, LC, LC)
        dKxpsi = kernel_grad_stack(kernel, e.X, e.A_psi)            # (P, B, LC)
        ddiag = (kernel_grad_diag_stack(kernel, e.X)
                 - 2.0 * np.einsum("pbl,bl->pb", dKxpsi, e.H)
                 + np.einsum("bl,plm,bm->pb", e.H, dKpsi, e.H, optimize=True))
        # dH = (dKxpsi - H dKpsi) Kpsi^{-1}, batched over parameters
        rhs = dKxpsi - np.einsum("bl,plm->pbm", e.H, dKpsi)
        flat = rhs.reshape(n_kernel * B, LC).T
        dH = cho_solve((e.chol_psi, True), flat).T.reshape(n_kernel, B, LC)

        if variant.name == "fitc":
            dv = ddiag
        elif variant.name == "pep":
            dv = a * ddiag
        else:  # dtc, vfe: deterministic projection
            dv = None

        dKaa = kernel_grad_stack(kernel, e.A_self)                  # (P, L, L)
        if e.pred.size:
            LI = e.F.shape[1]
            dKapi = kernel_grad_stack(kernel, e.A_self, e.A_pred)   # (P, L, LI)
            dKpipi = kernel_grad_stack(kernel, e.A_pred)            # (P, LI, LI)
            rhs = dKapi - np.einsum("li,pim->plm", e.F, dKpipi)
            flat = rhs.reshape(n_kernel * L, LI).T
            dF = cho_solve((e.chol_pipi, True), flat).T.reshape(n_kernel, L, LI)
            dQ = (dKaa - np.einsum("pli,mi->plm", dKapi, e.F)
                  - np.einsum("li,pmi->plm", e.F, dKapi)
                  + np.einsum("li,pim,nm->pln", e.F, dKpipi, e.F, optimize=True))
        else:
            dF, dQ = None, dKaa

        # prior side: -1/2 sum(W_S o dS) - 1/2 sum(Qinv o dQ)
        G_S = QinvFt @ W_S                                           # (L, LCp)
        M_S = G_S @ QinvFt.T                                         # (L, L)
        if dF is not None:
            grad[:n_kernel] += np.einsum("pli,li->p", dF, G_S[:, :dF.shape[2]])
        grad[:n_kernel] += 0.5 * np.einsum("plm,lm->p", dQ, M_S)
        grad[:n_kernel] -= 0.5 * np.einsum("plm,lm->p", dQ, Qinv)

        # projection side: -1/2 sum(W_T o dT) + db' mu
        G_T = VinvH @ W_T                                            # (B, LC)
        grad[:n_kernel] -= np.einsum("pbl,bl->p", dH, G_T)
        grad[:n_kernel] += np.einsum("pbl,bl->p", dH, np.outer(a_j, mu_psi))
        w_t = np.einsum("bl,bl->b", G_T, VinvH)                      # diag(VinvH W VinvH')
        u = VinvH @ mu_psi
        # the four V-derivative terms: data fit, log|V|, trace of dT, db' mu
        v_terms = 0.5 * a_j * a_j - 0.5 / v + 0.5 * w_t - u * a_j
        if dv is not None:
            grad[:n_kernel] += np.einsum("pb,b->p", dv, v_terms)
        grad[n_kernel] += sigma2 * float(np.sum(v_terms))  # noise column: dv = sigma2

        # variant corrections
        if variant.name == "vfe":
            grad[:n_kernel] -= np.sum(ddiag, axis=1) / (2.0 * sigma2)
            grad[n_kernel] += float(np.sum(e.d_diag)) / (2.0 * sigma2)
        elif variant.name == "pep":
            c = (1.0 - a) / (2.0 * a)
            w = 1.0 / (1.0 + a * e.d_diag / sigma2)
            grad[:n_kernel] -= c * np.einsum("pb,b->p", ddiag, w * a / sigma2)
            grad[n_kernel] += c * float(np.sum(w * a * e.d_diag / sigma2))
    return grad


def _lml_gradient_loop(posterior: CpoePosterior) -> np.ndarray:
    factors = posterior.factors
    kernel, noise, variant = factors.kernel, factors.noise, factors.variant
    graph = factors.graph
    L = graph.L
    n_kernel = kernel.n_params
    n_params = n_kernel + 1
    grad = np.zeros(n_params)
    sigma2 = noise.variance

    # parameter-independent per-expert pieces
    cache = []
    for j, e in enumerate(factors.experts):
        mu_psi = posterior.mu_at(e.psi)
        mu_pp = posterior.mu_at(e.pred_plus)
        W_T = posterior.sigma_at(e.psi) + np.outer(mu_psi, mu_psi)
        W_S = posterior.sigma_at(e.pred_plus) + np.outer(mu_pp, mu_pp)
        QinvFt = cho_solve((e.chol_Q, True), e.Ft())
        Qinv = cho_solve((e.chol_Q, True), np.eye(e.Q.shape[0]))
        cache.append((mu_psi, W_T, W_S, QinvFt, Qinv))

    for i in range(n_params):
        is_noise = i == n_kernel
        g = 0.0
        for j, e in enumerate(factors.experts):
            mu_psi, W_T, W_S, QinvFt, Qinv = cache[j]
            a_j = posterior.vinv_y[j]
            VinvH = posterior.vinv_H[j]
            y_j = posterior.y[e.rows]

            if is_noise:
                dH = None
                dv_diag = np.full(y_j.size, sigma2) if e.vbar_full is None else None
                dV_full = sigma2 * np.eye(y_j.size) if e.vbar_full is not None else None
                dQ = None
                dFt = None
                ddiag = None
                dD_full = None
            else:
                dKpsi = kernel_grad(kernel, e.A_psi, e.A_psi, i)
                dKxpsi = kernel_grad(kernel, e.X, e.A_psi, i)
                dH = cho_solve((e.chol_psi, True), (dKxpsi - e.H @ dKpsi).T).T
                ddiag = (kernel_grad_diag(kernel, e.X, i)
                         - 2.0 * np.einsum("ij,ij->i", dKxpsi, e.H)
                         + np.einsum("ij,ij->i", e.H @ dKpsi, e.H))
                dD_full = None
                if variant.full_residual:
                    dKxx = kernel_grad(kernel, e.X, e.X, i)
                    dD_full = dKxx - dKxpsi @ e.H.T - e.H @ dKxpsi.T + e.H @ dKpsi @ e.H.T
                dv_diag, dV_full = _variant_dvbar(variant, ddiag, dD_full)
                dKaa = kernel_grad(kernel, e.A_self, e.A_self, i)
                if e.pred.size:
                    dKapi = kernel_grad(kernel, e.A_self, e.A_pred, i)
                    dKpipi = kernel_grad(kernel, e.A_pred, e.A_pred, i)
                    dF = cho_solve((e.chol_pipi, True), (dKapi - e.F @ dKpipi).T).T
                    dQ = dKaa - dKapi @ e.F.T - e.F @ dKapi.T + e.F @ dKpipi @ e.F.T
                    dFt = np.hstack([-dF, np.zeros((L, L))])
                else:
                    dQ = dKaa
                    dFt = np.zeros((L, L))

            # data-fit and log|V| terms
            if e.vbar_full is None:
                dv = dv_diag
                if dv is not None and np.any(dv):
                    v = factors.v_diag(j)
                    g += 0.5 * float((a_j * a_j) @ dv)            # y' V^-1 y term
                    g -= 0.5 * float(np.sum(dv / v))               # log|V| term
                    dV_aj = dv * a_j
                else:
                    dV_aj = None
            else:
                dV = dV_full
                if dV is not None and np.any(dV):
                    V = factors.v_full(j)
                    cv = np.linalg.cholesky(V)
                    Vinv = cho_solve((cv, True), np.eye(V.shape[0]))
                    g += 0.5 * float(a_j @ dV @ a_j)
                    g -= 0.5 * float(np.sum(Vinv * dV.T))
                    dV_aj = dV @ a_j
                else:
                    dV_aj = None

            # prior-precision contribution: -1/2 sum(W_S o dS)
            if not is_noise:
                dS = dFt.T @ QinvFt + QinvFt.T @ dFt - QinvFt.T @ dQ @ QinvFt
                g -= 0.5 * float(np.sum(W_S * dS))
                g -= 0.5 * float(np.sum(Qinv * dQ.T))              # log|Q| term

            # projection-precision contribution: -1/2 sum(W_T o dT) and db' mu
            dT = np.zeros((L * e.psi.size,) * 2)
            db = np.zeros(L * e.psi.size)
            if dH is not None and np.any(dH):
                dT += dH.T @ VinvH + VinvH.T @ dH
                db += dH.T @ a_j
            if dV_aj is not None:
                if e.vbar_full is None:
                    dT -= VinvH.T @ (dv[:, None] * VinvH)
                else:
                    dT -= VinvH.T @ dV @ VinvH
                db -= VinvH.T @ dV_aj
            if np.any(dT):
                g -= 0.5 * float(np.sum(W_T * dT))
            if np.any(db):
                g += float(db @ mu_psi)

            g -= _dlam(variant, e, sigma2, ddiag, dD_full, is_noise)
        grad[i] = g
    return grad


def stochastic_lml_term(graph: ExpertGraph, kernel: Kernel, noise: NoiseSpec, j: int,
                        y_j: np.ndarray, variant: VariantSpec = VariantSpec(),
                        with_grad: bool = True):
    """One term of the independently factorized marginal likelihood.

    Expert j's marginal uses only its own data and inducing points: the
    projection conditions on ``A_j`` alone, so the term is computable without
    any other expert.  Summing the terms and subtracting ``N/2 log(2 pi)``
    gives the factorized objective used for stochastic optimization; exact
    inference is still done with the full posterior afterwards.
    """
    rows = graph.row_indices[j]
    X_j = graph.X[rows]
    y_j = np.asarray(y_j, dtype=float).ravel()
    if y_j.size != rows.size:
        raise ValueError(f"expert {j} holds {rows.size} rows, y_j has {y_j.size}")
    A = graph.inducing_inputs[j]
    sigma2 = noise.variance

    K_aa = kernel(A)
    chol_aa, _ = jittered_cholesky(K_aa)
    K_xa = kernel(X_j, A)
    H = cho_solve((chol_aa, True), K_xa.T).T
    d_diag = kernel.diag(X_j) - np.einsum("ij,ij->i", K_xa, H)
    D_full = None
    if variant.full_residual:
        D_full = kernel(X_j) - K_xa @ H.T
        D_full = 0.5 * (D_full + D_full.T)
    vbar_diag, vbar_full, lam = _residual(variant, d_diag, D_full, sigma2)

    P = K_xa @ H.T
    if vbar_full is None:
        P = P + np.diag(vbar_diag)
    else:
        P = P + vbar_full
    P = 0.5 * (P + P.T) + sigma2 * np.eye(y_j.size)
    cp = np.linalg.cholesky(P)
    alpha = cho_solve((cp, True), y_j)
    logdet_P = 2.0 * float(np.sum(np.log(np.diag(cp))))
    value = -0.5 * (float(y_j @ alpha) + logdet_P) - lam
    if not np.isfinite(value):
        raise ArithmeticError(f"non-finite stochastic term for expert {j}")
    if not with_grad:
        return value, None

    n_kernel = kernel.n_params
    grad = np.zeros(n_kernel + 1)
    Pinv = cho_solve((cp, True), np.eye(y_j.size))
    G = np.outer(alpha, alpha) - Pinv  # d l / d P = G / 2
    fake = ExpertFactor(index=j, rows=rows, psi=None, pred=None, pred_plus=None,
                        A_self=A, A_pred=None, A_psi=None, X=X_j, K_xpsi=K_xa,
                        chol_psi=chol_aa, H=H, d_diag=d_diag, D_full=D_full,
                        vbar_diag=vbar_diag, vbar_full=vbar_full, lam=lam,
                        K_aa=K_aa, K_api=None, K_pipi=None, chol_pipi=None, F=None,
                        Q=K_aa, chol_Q=chol_aa, logdet_Q=0.0)
    for i in range(n_kernel + 1):
        is_noise = i == n_kernel
        if is_noise:
            dP = sigma2 * np.eye(y_j.size)
            ddiag = dD_full = None
        else:
            dKaa = kernel_grad(kernel, A, A, i)
            dKxa = kernel_grad(kernel, X_j, A, i)
            dQff = dKxa @ H.T + H @ dKxa.T - H @ dKaa @ H.T
            ddiag = (kernel_grad_diag(kernel, X_j, i)
                     - 2.0 * np.einsum("ij,ij->i", dKxa, H)
                     + np.einsum("ij,ij->i", H @ dKaa, H))
            dD_full = None
            if variant.full_residual:
                dKxx = kernel_grad(kernel, X_j, X_j, i)
                dD_full = dKxx - dQff
            dvbar_diag, dvbar_full = _variant_dvbar(variant, ddiag, dD_full)
            dP = dQff + (np.diag(dvbar_diag) if dvbar_full is None else dvbar_full)
        grad[i] = 0.5 * float(np.sum(G * dP.T))
        grad[i] -= _dlam(variant, fake, sigma2, ddiag, dD_full, is_noise)
    return value, grad


def _check_shared_graph(m1: "CpoeModel", m2: "CpoeModel") -> None:
    g1, g2 = m1.graph, m2.graph
    if g1.J != g2.J or g1.gamma != g2.gamma or g1.L != g2.L:
        raise ValueError("models must share partition, gamma and inducing counts")
    if not all(np.array_equal(a, b) for a, b in zip(g1.inducing_inputs, g2.inducing_inputs)):
        raise ValueError("models must share inducing inputs")
    if not np.allclose(full_params(m1.kernel, m1.noise), full_params(m2.kernel, m2.noise)):
        raise ValueError("models must share hyperparameters")
    for j in range(g1.J):
        if not set(g1.predecessors[j]).issubset(set(g2.predecessors[j])):
            raise ValueError(f"predecessor sets are not nested at expert {j}")


def prior_kl_difference(model_C: "CpoeModel", model_C2: "CpoeModel"):
    """Stepwise prior-quality gain when raising the correlation degree.

    Returns ``(D_prior, D_projection)``; both are non-negative (up to numerical
    zero) for nested predecessor structures.  The prior component is half the
    difference of the transition-noise log determinants; the projection
    component depends on the residual shape: log-determinant ratio for the
    FITC/PEP/PITC families and a trace difference for the deterministic
    projections (VFE/DTC).
    """
    if model_C.graph.C > model_C2.graph.C:
        raise ValueError("expected C <= C2")
    _check_shared_graph(model_C, model_C2)
    f1, f2 = model_C.factors, model_C2.factors
    d_prior = 0.5 * (sum(e.logdet_Q for e in f1.experts)
                     - sum(e.logdet_Q for e in f2.experts))

    variant = f1.variant
    sigma2 = f1.noise.variance
    if variant.name in ("vfe", "dtc"):
        tr1 = sum(float(np.sum(e.d_diag)) for e in f1.experts)
        tr2 = sum(float(np.sum(e.d_diag)) for e in f2.experts)
        d_proj = (tr1 - tr2) / (2.0 * sigma2)
    elif variant.full_residual:
        floor = 1e-12 * float(np.mean(f1.kernel.diag(model_C.graph.X)))
        d_proj = 0.0
        for e1, e2 in zip(f1.experts, f2.experts):
            eye = np.eye(e1.vbar_full.shape[0])
            d_proj += 0.5 * (np.linalg.slogdet(e1.vbar_full + floor * eye)[1]
                             - np.linalg.slogdet(e2.vbar_full + floor * eye)[1])
    else:
        # diagonal residual; entries below the floor are deterministic in both
        # models (e.g. gamma = 1) and contribute nothing
        floor = 1e-12 * float(np.mean(f1.kernel.diag(model_C.graph.X)))
        d_proj = 0.0
        for e1, e2 in zip(f1.experts, f2.experts):
            v1 = np.maximum(e1.vbar_diag, floor)
            v2 = np.maximum(e2.vbar_diag, floor)
            d_proj += 0.5 * float(np.sum(np.log(v1) - np.log(v2)))
    return float(d_prior), float(d_proj)


class CpoeModel:
    """User-facing wrapper tying graph, factors and posterior together.

    A fitted model is immutable for prediction purposes; refitting with new
    hyperparameters reuses the graph and the symbolic factorization.
    """

    def __init__(self, kernel: Kernel, noise: NoiseSpec, J: int, C: int,
                 gamma: float = 1.0, variant: VariantSpec = VariantSpec(),
                 seed: int = 0):
        self.kernel = kernel
        self.noise = noise
        self.J = J
        self.C = min(C, J)
        self.gamma = gamma
        self.variant = variant
        self.seed = seed
        self.graph: ExpertGraph | None = None
        self.factors: LocalFactors | None = None
        self.posterior: CpoePosterior | None = None
        self._symbolic: SymbolicFactor | None = None
        self.y: np.ndarray | None = None

    # -- fitting ---------------------------------------------------------------

    def fit(self, X: np.ndarray, y: np.ndarray, graph: ExpertGraph | None = None) -> "CpoeModel":
        if graph is None:
            graph = ExpertGraph.build(X, self.J, self.C, self.gamma, seed=self.seed)
        self.graph = graph
        self.y = np.asarray(y, dtype=float).ravel()
        self._refit()
        return self

    def _refit(self) -> None:
        self.factors = build_local_factors(self.graph, self.kernel, self.noise, self.variant)
        S = assemble_prior_precision(self.factors)
        self.posterior = assemble_posterior(self.factors, S, self.y, symbolic=self._symbolic)
        self._symbolic = self.posterior.symbolic

    def get_params(self) -> np.ndarray:
        return full_params(self.kernel, self.noise)

    def set_params(self, theta: np.ndarray) -> "CpoeModel":
        """Refit at new hyperparameters, reusing graph and symbolic analysis."""
        self.kernel, self.noise = split_params(self.kernel, theta)
        if self.graph is not None:
            self._refit()
        return self

    # -- quantities --------------------------------------------------------------

    def log_marginal_likelihood(self, corrected: bool = True) -> float:
        return log_marginal_likelihood(self.posterior, corrected=corrected)

    def lml_gradient(self) -> np.ndarray:
        return lml_gradient(self.posterior)

    def predict(self, Xs: np.ndarray, add_noise: bool = False,
                weight_exponent: float | None = None):
        """Aggregated predictive means and variances; see the prediction module."""
        from .prediction import predict_arrays

        return predict_arrays(self, Xs, add_noise=add_noise,
                              weight_exponent=weight_exponent)

    # -- persistence -------------------------------------------------------------

    def save(self, path: str) -> None:
        """Dump hyperparameters and the graph's defining indices.

        Together with the original data this reproduces the model bit for bit;
        the kernel structure itself must be rebuilt by the caller (it is part
        of the experiment configuration).
        """
        if self.graph is None:
            raise ValueError("fit the model before saving")
        np.savez(
            path,
            theta=self.get_params(),
            J=self.J, C=self.C, gamma=self.gamma, seed=self.seed,
            variant=self.variant.name, alpha_pep=self.variant.alpha_pep,
            ordering=self.graph.ordering,
            assignment=self.graph.assignment,
            inducing_index=np.stack(self.graph.inducing_index),
        )

    @classmethod
    def load(cls, path: str, X: np.ndarray, y: np.ndarray, kernel: Kernel) -> "CpoeModel":
        with np.load(path, allow_pickle=False) as blob:
            theta = blob["theta"]
            J, C = int(blob["J"]), int(blob["C"])
            gamma, seed = float(blob["gamma"]), int(blob["seed"])
            variant = VariantSpec(str(blob["variant"]), float(blob["alpha_pep"]))
            ordering = blob["ordering"]
            assignment = blob["assignment"]
            inducing_index = blob["inducing_index"]
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        kernel2, noise = split_params(kernel, theta)
        row_indices = [np.flatnonzero(assignment == j) for j in range(J)]
        inducing_idx = [inducing_index[j] for j in range(J)]
        inducing_inputs = [X[row_indices[j]][inducing_idx[j]] for j in range(J)]
        centers = np.stack([A.mean(axis=0) for A in inducing_inputs])
        from .expert_graph import build_predecessors, correlation_sets

        preds = build_predecessors(centers, np.arange(J), C)
        corr = correlation_sets(preds, C)
        graph = ExpertGraph(X=X, J=J, C=C, gamma=gamma, seed=seed, ordering=ordering,
                            assignment=assignment, row_indices=row_indices,
                            inducing_index=inducing_idx, inducing_inputs=inducing_inputs,
                            centers=centers, predecessors=preds, correlation=corr)
        model = cls(kernel2, noise, J=J, C=C, gamma=gamma, variant=variant, seed=seed)
        model.fit(X, y, graph=graph)
        return model
