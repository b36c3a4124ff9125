"""Variance component estimation: ML/REML iterations, Fisher information, MINQE."""
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Tuple
import logging
import warnings

import numpy as np
from scipy import linalg

from scripts.lmm_errors import ConvergenceWarning, VarianceComponentError
from scripts.lmm_mme import PINV_RCOND, MmeSolution, absorbed_z_gram, solve_mme
from scripts.lmm_model import LmmSpec, VarComponents

logger = logging.getLogger(__name__)

# stopping rule on the sup-norm of successive iterates
DEFAULT_EPS: float = 1e-8
DEFAULT_MAX_ITER: int = 500

# iterates are clamped to VARIANCE_FLOOR_FRACTION * Var(y)
VARIANCE_FLOOR_FRACTION: float = 1e-10
# estimates below BOUNDARY_FRACTION * Var(y) are reported as boundary values
BOUNDARY_FRACTION: float = 1e-6

# Fisher matrices with min/max eigenvalue ratio below this are not inverted
IDENTIFIABILITY_RCOND: float = 1e-12


class EstimationMethod(str, Enum):
    ML = "ml"
    REML = "reml"
    MINQE_I = "minqe-i"
    MINQE_UI = "minqe-ui"

    @property
    def restricted(self) -> bool:
        return self in (EstimationMethod.REML, EstimationMethod.MINQE_UI)

    @property
    def iterative(self) -> bool:
        return self in (EstimationMethod.ML, EstimationMethod.REML)


@dataclass(frozen=True)
class VcOptions:
    """Settings of the iterative estimators."""

    start: Optional[VarComponents] = None
    eps: float = DEFAULT_EPS
    max_iter: int = DEFAULT_MAX_ITER


@dataclass(frozen=True, eq=False)
class VcEstimate:
    """Result of a variance component fit."""

    method: EstimationMethod
    sigma2_hat: VarComponents
    # I_ML or I_REML at sigma2_hat; the MINQE matrix H = 2 I(prior) for MINQE
    fisher: np.ndarray
    sigma_cov_hat: Optional[np.ndarray]
    loglik: Optional[float]
    iterations: int
    converged: bool
    solution: MmeSolution
    boundary: Tuple[bool, ...]
    identifiable: bool = True
    history: Tuple[np.ndarray, ...] = field(default=())
    # MINQE only
    raw_sigma2: Optional[np.ndarray] = None
    unique: bool = True

    @property
    def information(self) -> np.ndarray:
        """Fisher information whose inverse is sigma_cov_hat."""
        return self.fisher if self.method.iterative else 0.5 * self.fisher


def response_variance(y: np.ndarray) -> float:
    return float(np.var(y, ddof=1))


def default_start(spec: LmmSpec) -> VarComponents:
    """Var(y)/(s+1) for every component."""
    var_y = response_variance(spec.y)
    if var_y <= 0.0:
        raise VarianceComponentError("response is constant; no default start exists")
    return VarComponents(np.full(spec.s + 1, var_y / (spec.s + 1)))


def _shrinkage(spec: LmmSpec, vc: VarComponents, gram: np.ndarray) -> np.ndarray:
    """sigma2_e (sigma2_e I + gram G)^-1 for gram = Z'Z (W) or M (T)."""
    g = vc.g_diag(spec.r_sizes)
    sigma_e = vc.error
    A = sigma_e * np.eye(spec.r) + gram * g[None, :]
    return linalg.solve(A, sigma_e * np.eye(spec.r))


def w_matrix(spec: LmmSpec, vc: VarComponents) -> np.ndarray:
    """W = sigma2_e (sigma2_e I + Z'Z G)^-1."""
    return _shrinkage(spec, vc, spec.Z.T @ spec.Z)


def t_matrix(spec: LmmSpec, vc: VarComponents) -> np.ndarray:
    """T = sigma2_e (sigma2_e I + M G)^-1 with X absorbed into M."""
    return _shrinkage(spec, vc, absorbed_z_gram(spec))


def _fisher_from_blocks(
    spec: LmmSpec, vc: VarComponents, S: np.ndarray, n_eff: int
) -> np.ndarray:
    s = spec.s
    sig = vc.sigma2
    F = np.zeros((s + 1, s + 1))
    S2 = S @ S
    for i in range(s):
        si = spec.u_slice(i)
        for j in range(i, s):
            sj = spec.u_slice(j)
            value = np.sum(S[si, sj] * S[sj, si].T)
            if i == j:
                value += spec.r_sizes[i] - 2.0 * np.trace(S[si, si])
            F[i, j] = F[j, i] = value / (sig[i] * sig[j])
        F[i, s] = F[s, i] = (np.trace(S[si, si]) - np.trace(S2[si, si])) / (sig[i] * sig[s])
    F[s, s] = (n_eff - spec.r + np.trace(S2)) / sig[s] ** 2
    return 0.5 * F


def fisher_ml(spec: LmmSpec, vc: VarComponents) -> np.ndarray:
    """Fisher information of the ML estimator, built from the blocks of W.

    Args:
        spec (LmmSpec): Model.
        vc (VarComponents): Point of evaluation.

    Returns:
        np.ndarray: Symmetric (s+1) x (s+1) matrix.
    """
    return _fisher_from_blocks(spec, vc, w_matrix(spec, vc), spec.n)


def fisher_reml(spec: LmmSpec, vc: VarComponents) -> np.ndarray:
    """Fisher information of the REML estimator, built from the blocks of T."""
    return _fisher_from_blocks(spec, vc, t_matrix(spec, vc), spec.n - spec.rank_x)


def _logdet_shrinkage(spec: LmmSpec, vc: VarComponents, gram: np.ndarray) -> float:
    """log|I + G^1/2 gram G^1/2 / sigma2_e|, which equals -log|W| or -log|T|."""
    root = np.sqrt(vc.g_diag(spec.r_sizes))
    A = np.eye(spec.r) + root[:, None] * gram * root[None, :] / vc.error
    return 2.0 * float(np.sum(np.log(np.diag(linalg.cholesky(A)))))


def _quadratic(sol: MmeSolution) -> float:
    """(y - Xb)'V^-1(y - Xb) = (y - Xb)'(y - Xb - Zu) / sigma2_e."""
    spec = sol.spec
    centred = spec.y - spec.X @ sol.b_tilde
    return float(centred @ sol.residual) / sol.sigma2_used.error


def loglik_ml(spec: LmmSpec, vc: VarComponents, y: Optional[np.ndarray] = None) -> float:
    """Gaussian log-likelihood at (b(vc), V(vc))."""
    if y is not None:
        spec = spec.with_response(y)
    sol = solve_mme(spec, vc)
    logdet = _logdet_shrinkage(spec, vc, spec.Z.T @ spec.Z)
    return -0.5 * (spec.n * np.log(2.0 * np.pi * vc.error) + logdet + _quadratic(sol))


def loglik_reml(spec: LmmSpec, vc: VarComponents, y: Optional[np.ndarray] = None) -> float:
    """Log-likelihood of the error contrasts B'y, B'B = I, BB' = I - P_X."""
    if y is not None:
        spec = spec.with_response(y)
    sol = solve_mme(spec, vc)
    n_eff = spec.n - spec.rank_x
    logdet = _logdet_shrinkage(spec, vc, absorbed_z_gram(spec))
    return -0.5 * (n_eff * np.log(2.0 * np.pi * vc.error) + logdet + _quadratic(sol))


def update_step(
    spec: LmmSpec, vc: VarComponents, method: EstimationMethod, sol: Optional[MmeSolution] = None
) -> np.ndarray:
    """One ML or REML fixed-point update, unclamped.

    Args:
        spec (LmmSpec): Model.
        vc (VarComponents): Current iterate.
        method (EstimationMethod): ML or REML.
        sol (MmeSolution | None): MME solution at vc, solved if missing.

    Returns:
        np.ndarray: Next iterate.
    """
    if sol is None:
        sol = solve_mme(spec, vc)
    if method.restricted:
        S = t_matrix(spec, vc)
        n_eff = spec.n - spec.rank_x
    else:
        S = w_matrix(spec, vc)
        n_eff = spec.n
    new = np.empty(spec.s + 1)
    for i in range(spec.s):
        u_i = sol.u_block(i)
        denom = spec.r_sizes[i] - np.trace(S[spec.u_slice(i), spec.u_slice(i)])
        new[i] = float(u_i @ u_i) / max(denom, np.finfo(float).tiny)
    new[-1] = float(spec.y @ sol.residual) / n_eff
    return new


def sigma_cov_from_fisher(fisher: np.ndarray) -> Optional[np.ndarray]:
    """Inverse of a Fisher matrix, or None when it is numerically singular."""
    w = linalg.eigvalsh(fisher)
    if w[0] <= IDENTIFIABILITY_RCOND * max(w[-1], 0.0) or w[-1] <= 0.0:
        return None
    inv = linalg.inv(fisher)
    return 0.5 * (inv + inv.T)


def _summarize(
    spec: LmmSpec, method: EstimationMethod, fisher: np.ndarray
) -> Tuple[Optional[np.ndarray], bool]:
    sigma_cov = sigma_cov_from_fisher(fisher)
    if sigma_cov is None:
        logger.warning(
            "%s Fisher information is singular: variance components are not identifiable",
            method.value,
        )
    return sigma_cov, sigma_cov is not None


def _iterate(
    spec: LmmSpec, method: EstimationMethod, opts: VcOptions
) -> VcEstimate:
    start = opts.start if opts.start is not None else default_start(spec)
    if start.s != spec.s:
        raise VarianceComponentError(
            f"start has {start.s} random components, model has {spec.s}"
        )
    var_y = response_variance(spec.y)
    floor = VARIANCE_FLOOR_FRACTION * var_y

    current = start
    history: List[np.ndarray] = [start.sigma2]
    clamped = np.zeros(spec.s + 1, dtype=bool)
    converged = False
    iterations = 0
    for iterations in range(1, opts.max_iter + 1):
        # solve and update
        sol = solve_mme(spec, current)
        new = update_step(spec, current, method, sol)
        clamped = new < floor
        new = np.where(clamped, floor, new)

        diff = float(np.max(np.abs(new - current.sigma2)))
        logger.debug("%s iteration %d: sigma2=%s diff=%.3e", method.value, iterations, new, diff)
        current = VarComponents(new)
        history.append(current.sigma2)
        if diff < opts.eps:
            converged = True
            break

    if not converged:
        message = f"{method.value} did not converge in {opts.max_iter} iterations"
        logger.warning(message)
        warnings.warn(message, ConvergenceWarning)

    boundary = tuple(
        bool(c or v <= BOUNDARY_FRACTION * var_y) for c, v in zip(clamped, current.sigma2)
    )
    if any(boundary):
        logger.warning("%s estimate on the boundary for components %s", method.value,
                       [i for i, b in enumerate(boundary) if b])

    if method.restricted:
        fisher = fisher_reml(spec, current)
        loglik = loglik_reml(spec, current)
    else:
        fisher = fisher_ml(spec, current)
        loglik = loglik_ml(spec, current)
    sigma_cov, identifiable = _summarize(spec, method, fisher)
    logger.info(
        "%s fit: sigma2=%s iterations=%d converged=%s",
        method.value, current.as_list(), iterations, converged,
    )
    return VcEstimate(
        method=method,
        sigma2_hat=current,
        fisher=fisher,
        sigma_cov_hat=sigma_cov,
        loglik=loglik,
        iterations=iterations,
        converged=converged,
        solution=solve_mme(spec, current),
        boundary=boundary,
        identifiable=identifiable,
        history=tuple(history),
    )


def estimate_ml(
    spec: LmmSpec, y: Optional[np.ndarray] = None, opts: VcOptions = VcOptions()
) -> VcEstimate:
    """Maximum likelihood estimates by the Searle fixed-point iteration."""
    if y is not None:
        spec = spec.with_response(y)
    return _iterate(spec, EstimationMethod.ML, opts)


def estimate_reml(
    spec: LmmSpec, y: Optional[np.ndarray] = None, opts: VcOptions = VcOptions()
) -> VcEstimate:
    """Restricted maximum likelihood estimates by the Searle fixed-point iteration."""
    if y is not None:
        spec = spec.with_response(y)
    return _iterate(spec, EstimationMethod.REML, opts)


def quadratic_forms(spec: LmmSpec, prior: VarComponents, Y: Optional[np.ndarray] = None) -> np.ndarray:
    """MINQE right-hand side q for one response or for each column of Y.

    Args:
        spec (LmmSpec): Model.
        prior (VarComponents): Prior value of the variance components.
        Y (np.ndarray | None): Response vector, or n x N matrix of responses.

    Returns:
        np.ndarray: Vector of length s+1, or (s+1) x N matrix.
    """
    Y = spec.y if Y is None else np.asarray(Y, dtype=float)
    single = Y.ndim == 1
    Y2 = Y.reshape(-1, 1) if single else Y
    sol = solve_mme(spec, prior)
    stacked = sol.batch(Y2)
    U = stacked[spec.p :]
    E = Y2 - spec.XZ @ stacked
    q = np.empty((spec.s + 1, Y2.shape[1]))
    for i in range(spec.s):
        q[i] = np.sum(U[spec.u_slice(i)] ** 2, axis=0) / prior.sigma2[i] ** 2
    q[-1] = np.sum(E**2, axis=0) / prior.error**2
    return q[:, 0] if single else q


def minqe_matrix(spec: LmmSpec, prior: VarComponents, method: EstimationMethod) -> np.ndarray:
    """H_(I) = 2 I_ML(prior) or H_(UI) = 2 I_REML(prior)."""
    if method.restricted:
        return 2.0 * fisher_reml(spec, prior)
    return 2.0 * fisher_ml(spec, prior)


def minqe(
    spec: LmmSpec,
    y: Optional[np.ndarray] = None,
    prior: Optional[VarComponents] = None,
    kind: EstimationMethod = EstimationMethod.MINQE_UI,
) -> VcEstimate:
    """One-shot MINQE(I) or MINQE(U,I) estimate at a prior value.

    The minimum norm solution H^+ q is returned when H is singular and the
    estimate is flagged as not unique. Nonpositive components are clamped to
    the variance floor; the unclamped solution is kept in ``raw_sigma2``.
    """
    if kind.iterative:
        raise ValueError(f"{kind.value} is not a MINQE variant")
    if y is not None:
        spec = spec.with_response(y)
    prior = prior if prior is not None else default_start(spec)

    H = minqe_matrix(spec, prior, kind)
    q = quadratic_forms(spec, prior)
    H_inv, rank = linalg.pinvh(H, atol=0.0, rtol=PINV_RCOND, return_rank=True)
    raw = H_inv @ q
    unique = int(rank) == spec.s + 1
    if not unique:
        logger.warning("%s matrix is singular: minimum norm solution reported", kind.value)

    floor = VARIANCE_FLOOR_FRACTION * response_variance(spec.y)
    clamped = raw <= floor
    estimate = VarComponents(np.where(clamped, floor, raw))
    if np.any(clamped):
        logger.warning("%s estimate clamped to the floor for components %s", kind.value,
                       [i for i, c in enumerate(clamped) if c])

    sigma_cov, identifiable = _summarize(spec, kind, 0.5 * H)
    logger.info("%s estimate: sigma2=%s", kind.value, estimate.as_list())
    return VcEstimate(
        method=kind,
        sigma2_hat=estimate,
        fisher=H,
        sigma_cov_hat=sigma_cov,
        loglik=None,
        iterations=1,
        converged=True,
        solution=solve_mme(spec, estimate),
        boundary=tuple(bool(c) for c in clamped),
        identifiable=identifiable,
        history=(prior.sigma2, estimate.sigma2),
        raw_sigma2=raw,
        unique=unique,
    )


def estimate(
    spec: LmmSpec,
    method: EstimationMethod,
    opts: VcOptions = VcOptions(),
    prior: Optional[VarComponents] = None,
) -> VcEstimate:
    """Dispatch to the estimator named by ``method``."""
    if method is EstimationMethod.ML:
        return estimate_ml(spec, opts=opts)
    if method is EstimationMethod.REML:
        return estimate_reml(spec, opts=opts)
    return minqe(spec, prior=prior if prior is not None else opts.start, kind=method)
