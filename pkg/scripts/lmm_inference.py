"""Small-sample inference on w = K'b + L'u.

Satterthwaite and Fai-Cornelius use the plug-in MSE Lambda' C Lambda; the
Kenward-Roger variants use the bias-adjusted MSE matrix.
"""
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Tuple
import logging
import math

import numpy as np
from scipy import linalg, stats

from scripts.lmm_derivatives import DerivBundle, mse_bundle
from scripts.lmm_errors import (
    ContrastShapeError,
    DfUndefinedError,
    NonPsdMseError,
    RouteDisagreementError,
    SingularMseError,
    ZeroVarianceOfVarianceError,
)
from scripts.lmm_mme import MmeSolution, blup, mse_blup
from scripts.lmm_model import ContrastSet

logger = logging.getLogger(__name__)

# |q * rho - 1| at or below this gives infinite denominator df
INFINITE_DF_TOL: float = 1e-12
# g' Sigma g below this fraction of 2 M^2 is treated as zero
ZERO_VARIANCE_TOL: float = 1e-14
# eigenvalues of the adjusted MSE in (-PSD_REPAIR_TOL, 0) are clipped
PSD_REPAIR_TOL: float = 1e-8
# agreement of the explicit adjusted MSE with M + 2 * correction
ADJUSTED_RTOL: float = 1e-9
# smallest reported Satterthwaite df
SATTERTHWAITE_FLOOR: float = 1.0

DEFAULT_LEVEL: float = 0.95


class InferenceMethod(str, Enum):
    SATTERTHWAITE = "satterthwaite"
    FAI_CORNELIUS = "fai-cornelius"
    KR = "kr"
    KR_MODIFIED = "kr-modified"
    EXACT_CHISQ = "exact-chisq"


class KrVariant(str, Enum):
    PLAIN = "plain"
    MODIFIED = "modified"


@dataclass(frozen=True, eq=False)
class EllipsoidRegion:
    """{w : (w - center)' shape^-1 (w - center) <= radius2}."""

    center: np.ndarray
    shape: np.ndarray
    radius2: float

    def contains(self, w: np.ndarray) -> bool:
        d = np.atleast_1d(np.asarray(w, dtype=float)) - self.center
        return bool(d @ linalg.solve(self.shape, d, assume_a="pos") <= self.radius2)

    def interval(self) -> Tuple[float, float]:
        """Endpoints of a one-dimensional region."""
        if self.center.size != 1:
            raise ContrastShapeError("interval is defined for one-dimensional regions only")
        half = math.sqrt(self.radius2 * float(self.shape[0, 0]))
        c = float(self.center[0])
        return (c - half, c + half)


@dataclass(frozen=True, eq=False)
class InferenceResult:
    """Estimate, pivot, degrees of freedom and region for one contrast set."""

    method: InferenceMethod
    w_hat: np.ndarray
    mse_used: np.ndarray
    statistic: float
    df: float
    df_num: int
    kappa: float
    p_value: float
    level: float
    region: EllipsoidRegion
    interval: Optional[Tuple[float, float]] = None
    flags: Tuple[str, ...] = field(default=())


@dataclass(frozen=True)
class KrMoments:
    A1: float
    A2: float
    B: float
    E: float
    V: float
    rho: float
    # q * rho as a (numerator, denominator) pair
    ratio: Tuple[float, float]
    g: Optional[float] = None
    c: Optional[Tuple[float, float, float]] = None


def exact_chisq_pivot(
    sol: MmeSolution, contrast: ContrastSet, w0: Optional[np.ndarray] = None
) -> Tuple[float, float]:
    """Q = (w - w0)' (Lambda' C Lambda)^-1 (w - w0) and its chi-square tail.

    Args:
        sol (MmeSolution): Solution at known variance components.
        contrast (ContrastSet): Lambda.
        w0 (np.ndarray | None): Hypothesized value, zero by default.

    Returns:
        Tuple[float, float]: Q, upper tail probability of chi2_q.
    """
    w = blup(sol, contrast)
    M = mse_blup(sol, contrast)
    d = w - _null_value(w0, contrast.q)
    Q = _quadratic(M, d)
    return Q, float(stats.chi2.sf(Q, contrast.q))


def _null_value(w0: Optional[np.ndarray], q: int) -> np.ndarray:
    if w0 is None:
        return np.zeros(q)
    w0 = np.atleast_1d(np.asarray(w0, dtype=float))
    if w0.shape != (q,):
        raise ContrastShapeError(f"null value must have length {q}, got {w0.shape}")
    return w0


def _quadratic(M: np.ndarray, d: np.ndarray) -> float:
    try:
        factor = linalg.cho_factor(M)
    except linalg.LinAlgError as err:
        raise SingularMseError("MSE matrix is not positive definite") from err
    return float(d @ linalg.cho_solve(factor, d))


def _gradient_vector(bundle: DerivBundle) -> np.ndarray:
    if bundle.q != 1:
        raise ContrastShapeError(f"Satterthwaite df needs a single contrast, got q={bundle.q}")
    return np.array([float(g[0, 0]) for g in bundle.grad])


def satterthwaite_raw(bundle: DerivBundle, sigma_cov: np.ndarray) -> float:
    """2 M^2 / g' Sigma g without flooring."""
    g = _gradient_vector(bundle)
    numerator = 2.0 * float(bundle.M[0, 0]) ** 2
    denominator = float(g @ sigma_cov @ g)
    if denominator <= 0.0 or denominator <= ZERO_VARIANCE_TOL * numerator:
        raise ZeroVarianceOfVarianceError(
            f"variance of the MSE estimate is {denominator:.3e}; no df can be formed"
        )
    return numerator / denominator


def satterthwaite_df(bundle: DerivBundle, sigma_cov: np.ndarray, floor: bool = True) -> float:
    """Satterthwaite denominator df of a single contrast.

    Args:
        bundle (DerivBundle): Derivatives for a one-column Lambda.
        sigma_cov (np.ndarray): Estimated covariance of sigma2_hat.
        floor (bool): Raise values below one to one.

    Returns:
        float: Degrees of freedom.
    """
    nu = satterthwaite_raw(bundle, sigma_cov)
    if floor and nu < SATTERTHWAITE_FLOOR:
        logger.warning("Satterthwaite df %.4g floored at %.1f", nu, SATTERTHWAITE_FLOOR)
        return SATTERTHWAITE_FLOOR
    return nu


def spectral_contrasts(M: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (descending) and eigenvectors of M with positive leading entries."""
    w, U = linalg.eigh(M)
    order = np.argsort(-w, kind="stable")
    w, U = w[order], U[:, order]
    for k in range(U.shape[1]):
        nonzero = np.flatnonzero(np.abs(U[:, k]) > 1e-12)
        if nonzero.size and U[nonzero[0], k] < 0.0:
            U[:, k] = -U[:, k]
    return w, U


def fai_cornelius_components(
    sol: MmeSolution, contrast: ContrastSet, sigma_cov: np.ndarray
) -> np.ndarray:
    """Satterthwaite df of each spectral contrast Lambda U (inf when exact)."""
    _, U = spectral_contrasts(mse_blup(sol, contrast))
    rotated = contrast.transformed(U)
    nus = np.empty(contrast.q)
    for k in range(contrast.q):
        column = ContrastSet(rotated.K[:, [k]], rotated.L[:, [k]])
        try:
            nus[k] = satterthwaite_raw(mse_bundle(sol, column), sigma_cov)
        except ZeroVarianceOfVarianceError:
            nus[k] = np.inf
    logger.debug("Fai-Cornelius component df: %s", nus)
    return nus


def fai_cornelius_ddf(sol: MmeSolution, contrast: ContrastSet, sigma_cov: np.ndarray) -> float:
    """Denominator df 2E/(E - q) with E = sum nu_i/(nu_i - 2) over nu_i > 2."""
    nus = fai_cornelius_components(sol, contrast, sigma_cov)
    q = contrast.q
    if np.all(np.isinf(nus)):
        return math.inf
    kept = nus[nus > 2.0]
    if kept.size == 0:
        raise DfUndefinedError("all Fai-Cornelius component df are <= 2")
    E = float(np.sum(np.where(np.isinf(kept), 1.0, kept / (kept - 2.0))))
    if E <= q:
        raise DfUndefinedError(f"E = {E:.6g} <= q = {q}: denominator df would be nonpositive")
    return 2.0 * E / (E - q)


def _repair_psd(A: np.ndarray) -> np.ndarray:
    w, V = linalg.eigh(A)
    scale = max(1.0, float(np.max(np.abs(w))))
    if w[0] < -PSD_REPAIR_TOL * scale:
        raise NonPsdMseError(f"adjusted MSE has eigenvalue {w[0]:.3e}")
    if w[0] < 0.0:
        logger.warning("clipping adjusted MSE eigenvalue %.3e to zero", w[0])
        w = np.clip(w, 0.0, None)
        A = (V * w) @ V.T
    return 0.5 * (A + A.T)


def adjusted_mse(sol: MmeSolution, contrast: ContrastSet, sigma_cov: np.ndarray) -> np.ndarray:
    """Bias-corrected MSE matrix of the EBLUP, evaluated block by block.

    The result is checked against M + 2 * correction from mse_bundle.
    """
    bundle = mse_bundle(sol, contrast, sigma_cov)
    spec = sol.spec
    sig = sol.sigma2_used.sigma2
    s = spec.s
    lt = bundle.lambda_tilde
    H0lt = spec.gram @ lt
    blocks = [bundle.lambda_block(i) for i in range(s)]

    total = contrast.lam.T @ lt
    total = total + 2.0 * sigma_cov[s, s] / sig[s] ** 4 * (
        sig[s] * lt.T @ H0lt - H0lt.T @ sol.C @ H0lt
    )
    for i in range(s):
        Li = blocks[i]
        total = total + 2.0 * sigma_cov[i, i] / sig[i] ** 4 * (
            sig[i] * Li.T @ Li - Li.T @ sol.block(i, i) @ Li
        )
        cross = Li.T @ sol.row_block(i) @ H0lt
        total = total - 2.0 * sigma_cov[i, s] / (sig[i] * sig[s]) ** 2 * (cross + cross.T)
        for j in range(i + 1, s):
            cross = Li.T @ sol.block(i, j) @ blocks[j]
            total = total - 2.0 * sigma_cov[i, j] / (sig[i] * sig[j]) ** 2 * (cross + cross.T)
    total = 0.5 * (total + total.T)

    reference = bundle.M + 2.0 * bundle.correction(sigma_cov)
    gap = np.linalg.norm(total - reference)
    if gap > ADJUSTED_RTOL * (1.0 + np.linalg.norm(reference)):
        raise RouteDisagreementError(f"adjusted MSE routes disagree by {gap:.3e}")
    return _repair_psd(total)


def kr_moments(bundle: DerivBundle, sigma_cov: np.ndarray, variant: KrVariant) -> KrMoments:
    """A1, A2 and the moment quantities behind the KR scale and df."""
    q = bundle.q
    Minv = linalg.inv(bundle.M)
    P = [Minv @ g for g in bundle.grad]
    traces = np.array([np.trace(Pi) for Pi in P])
    A1 = float(traces @ sigma_cov @ traces)
    A2 = 0.0
    for i in range(len(P)):
        for j in range(len(P)):
            A2 += sigma_cov[i, j] * float(np.sum(P[i] * P[j].T))
    B = (A1 + 6.0 * A2) / (2.0 * q)

    if variant is KrVariant.PLAIN:
        E = 1.0 + A2 / q
        V = 2.0 / q * (1.0 + B)
        rho = V / (2.0 * E**2)
        return KrMoments(A1, A2, B, E, V, rho, (q * rho, 1.0))

    e = 1.0 - A2 / q
    E = 1.0 / e if e != 0.0 else math.inf
    if abs(A2) <= ZERO_VARIANCE_TOL:
        return KrMoments(A1, A2, B, E, 2.0 / q, 1.0 / q, (1.0, 1.0))
    g = ((q + 1) * A1 - (q + 4) * A2) / ((q + 2) * A2)
    d = 3.0 * q + 2.0 * (1.0 - g)
    if d == 0.0:
        raise DfUndefinedError("modified KR constants are undefined (3q + 2(1 - g) = 0)")
    c1, c2, c3 = g / d, (q - g) / d, (q - g + 2.0) / d
    # V has a pole where 1 - c2 B or 1 - c3 B vanishes; N / D stays usable there
    N = (1.0 + c1 * B) * e**2
    D = (1.0 - c2 * B) ** 2 * (1.0 - c3 * B)
    if D == 0.0:
        V = rho = math.inf
    else:
        V = 2.0 / q * (1.0 + c1 * B) / D
        rho = N / (q * D)
    return KrMoments(A1, A2, B, E, V, rho, (N, D), g, (c1, c2, c3))


def kr_scale_ddf(
    sol: MmeSolution,
    contrast: ContrastSet,
    sigma_cov: np.ndarray,
    variant: KrVariant = KrVariant.MODIFIED,
) -> Tuple[float, float]:
    """Scale kappa and denominator df nu of the generalized Kenward-Roger F test.

    With q rho = N / D the df is (4N + (q - 2)D) / (N - D) and the scale is
    (4N + (q - 2)D) / (E (2N + qD)), both finite where V has a pole.

    Args:
        sol (MmeSolution): Solution at the estimated variance components.
        contrast (ContrastSet): Lambda.
        sigma_cov (np.ndarray): Estimated covariance of sigma2_hat.
        variant (KrVariant): Plain or modified moment estimators.

    Returns:
        Tuple[float, float]: kappa, nu (``math.inf`` when q rho - 1 vanishes).
    """
    bundle = mse_bundle(sol, contrast)
    m = kr_moments(bundle, sigma_cov, variant)
    q = contrast.q
    if variant is KrVariant.MODIFIED and q == 1:
        # one contrast has A1 = A2, so g = -1 and the modified ratios reduce to kappa = 1, nu = 2 / A2
        if m.A2 <= ZERO_VARIANCE_TOL:
            return 1.0, math.inf
        return 1.0, 2.0 / m.A2
    if not 0.0 < m.E < math.inf:
        raise DfUndefinedError(f"E = {m.E:.6g} is not a positive finite value")
    N, D = m.ratio
    if abs(N - D) <= INFINITE_DF_TOL * abs(D):
        return 1.0 / m.E, math.inf
    top = 4.0 * N + (q - 2.0) * D
    nu = top / (N - D)
    if nu <= 2.0:
        # only reached with q rho < 1, where kappa would not be positive
        logger.warning("KR df %.3g <= 2 (q*rho = %.6g); reporting infinite df", nu, N / D)
        return 1.0 / m.E, math.inf
    return top / (m.E * (2.0 * N + q * D)), nu


def wald_f(
    w_hat: np.ndarray, w0: Optional[np.ndarray], mse: np.ndarray, kappa: float, nu: float
) -> Tuple[float, float]:
    """F = (w - w0)' mse^-1 (w - w0) / q with p-value from kappa F ~ F(q, nu)."""
    w_hat = np.atleast_1d(np.asarray(w_hat, dtype=float))
    q = w_hat.size
    d = w_hat - _null_value(w0, q)
    F = _quadratic(np.atleast_2d(mse), d) / q
    if math.isinf(nu):
        p = stats.chi2.sf(q * kappa * F, q)
    else:
        p = stats.f.sf(kappa * F, q, nu)
    return F, float(p)


def t_stat(
    w_hat: float, w0: float, mse_scalar: float, nu: float, level: float = DEFAULT_LEVEL
) -> Tuple[float, float, Tuple[float, float]]:
    """t statistic, two-sided p-value and interval at ``level``."""
    if mse_scalar <= 0.0:
        raise SingularMseError(f"MSE must be positive, got {mse_scalar}")
    se = math.sqrt(mse_scalar)
    t = (w_hat - w0) / se
    dist = stats.norm() if math.isinf(nu) else stats.t(nu)
    p = 2.0 * float(dist.sf(abs(t)))
    half = float(dist.ppf(0.5 + level / 2.0)) * se
    return t, min(p, 1.0), (w_hat - half, w_hat + half)


def prediction_region(
    w_hat: np.ndarray, mse: np.ndarray, kappa: float, nu: float, level: float = DEFAULT_LEVEL
) -> EllipsoidRegion:
    """Ellipsoid obtained by inverting kappa F ~ F(q, nu) at ``level``."""
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    w_hat = np.atleast_1d(np.asarray(w_hat, dtype=float))
    mse = np.atleast_2d(np.asarray(mse, dtype=float))
    q = w_hat.size
    if math.isinf(nu):
        radius2 = float(stats.chi2.ppf(level, q)) / kappa
    else:
        radius2 = q * float(stats.f.ppf(level, q, nu)) / kappa
    return EllipsoidRegion(center=w_hat, shape=mse, radius2=radius2)


def run_inference(
    sol: MmeSolution,
    contrast: ContrastSet,
    method: InferenceMethod,
    sigma_cov: Optional[np.ndarray] = None,
    w0: Optional[np.ndarray] = None,
    level: float = DEFAULT_LEVEL,
) -> InferenceResult:
    """Estimate, test and region for Lambda'(b, u) with the chosen method.

    Args:
        sol (MmeSolution): Solution at the (estimated) variance components.
        contrast (ContrastSet): Lambda.
        method (InferenceMethod): Inference method.
        sigma_cov (np.ndarray | None): Covariance of sigma2_hat; not needed
            for the exact chi-square pivot.
        w0 (np.ndarray | None): Null value, zero by default.
        level (float): Coverage of the interval or region.

    Returns:
        InferenceResult: Populated result.
    """
    q = contrast.q
    w_hat = blup(sol, contrast)
    null = _null_value(w0, q)
    plug_in = mse_blup(sol, contrast)
    flags: List[str] = []

    if method is InferenceMethod.EXACT_CHISQ:
        Q, p = exact_chisq_pivot(sol, contrast, null)
        region = prediction_region(w_hat, plug_in, 1.0, math.inf, level)
        return InferenceResult(
            method=method, w_hat=w_hat, mse_used=plug_in, statistic=Q, df=math.inf,
            df_num=q, kappa=1.0, p_value=p, level=level, region=region,
            interval=region.interval() if q == 1 else None,
        )

    if sigma_cov is None:
        raise DfUndefinedError(f"{method.value} needs the covariance of the variance estimates")

    if method is InferenceMethod.SATTERTHWAITE:
        nu = satterthwaite_raw(mse_bundle(sol, contrast), sigma_cov)
        if nu < SATTERTHWAITE_FLOOR:
            logger.warning("Satterthwaite df %.4g floored at %.1f", nu, SATTERTHWAITE_FLOOR)
            flags.append("df-floored")
            nu = SATTERTHWAITE_FLOOR
        t, p, interval = t_stat(float(w_hat[0]), float(null[0]), float(plug_in[0, 0]), nu, level)
        region = prediction_region(w_hat, plug_in, 1.0, nu, level)
        return InferenceResult(
            method=method, w_hat=w_hat, mse_used=plug_in, statistic=t, df=nu, df_num=1,
            kappa=1.0, p_value=p, level=level, region=region, interval=interval,
            flags=tuple(flags),
        )

    if method is InferenceMethod.FAI_CORNELIUS:
        mse, kappa = plug_in, 1.0
        nu = fai_cornelius_ddf(sol, contrast, sigma_cov)
    else:
        variant = KrVariant.PLAIN if method is InferenceMethod.KR else KrVariant.MODIFIED
        mse = adjusted_mse(sol, contrast, sigma_cov)
        kappa, nu = kr_scale_ddf(sol, contrast, sigma_cov, variant)
    if math.isinf(nu):
        flags.append("df-infinite")

    F, p = wald_f(w_hat, null, mse, kappa, nu)
    region = prediction_region(w_hat, mse, kappa, nu, level)
    return InferenceResult(
        method=method, w_hat=w_hat, mse_used=mse, statistic=F, df=nu, df_num=q,
        kappa=kappa, p_value=p, level=level, region=region,
        interval=region.interval() if q == 1 else None, flags=tuple(flags),
    )
