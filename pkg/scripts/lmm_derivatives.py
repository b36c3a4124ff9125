"""Derivatives of H, C and the BLUP MSE matrix with respect to the variance components.

Derivative tables are dictionaries keyed by sorted index tuples, e.g.
``(0,)`` for the first derivative with respect to sigma2_0 or ``(0, 2)``
for a mixed second derivative. Missing keys stand for zero matrices.
"""
from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from typing import Dict, Mapping, Optional, Sequence, Tuple
import logging

import numpy as np

from scripts.lmm_errors import ContrastShapeError, InconsistentInverseError, RouteDisagreementError
from scripts.lmm_mme import MmeSolution, require_estimable
from scripts.lmm_model import ContrastSet, LmmSpec, VarComponents

logger = logging.getLogger(__name__)

Index = Tuple[int, ...]
DerivTable = Dict[Index, np.ndarray]

# ||AB - I||_F / sqrt(dim) accepted by d_op
INVERSE_TOL: float = 1e-8

# relative agreement required between the two routes to the MSE correction
ROUTE_RTOL: float = 1e-9


def _key(index: Sequence[int]) -> Index:
    return tuple(sorted(index))


def _lookup(derivs: Mapping[Index, np.ndarray], index: Sequence[int], shape: Tuple[int, ...]) -> np.ndarray:
    value = derivs.get(_key(index))
    return np.zeros(shape) if value is None else value


def d_op(
    order: int,
    A: np.ndarray,
    B: np.ndarray,
    derivs: Mapping[Index, np.ndarray],
    index: Sequence[int],
) -> np.ndarray:
    """Derivative of A = B^-1 of order 1, 2 or 3 from the derivatives of B.

    Args:
        order (int): Derivative order.
        A (np.ndarray): Inverse of B.
        B (np.ndarray): Matrix being inverted.
        derivs (Mapping): Derivatives of B keyed by sorted index tuples.
        index (Sequence[int]): Differentiation indices, length ``order``.

    Returns:
        np.ndarray: The requested derivative of A.
    """
    if order not in (1, 2, 3) or len(index) != order:
        raise ValueError(f"order {order} needs exactly {order} indices, got {tuple(index)}")
    dim = A.shape[0]
    gap = np.linalg.norm(A @ B - np.eye(dim)) / np.sqrt(dim)
    if gap > INVERSE_TOL:
        raise InconsistentInverseError(f"A is not the inverse of B (||AB - I|| = {gap:.3e})")

    shape = B.shape
    if order == 1:
        (i,) = index
        return -A @ _lookup(derivs, (i,), shape) @ A

    if order == 2:
        i, j = index
        Bi = _lookup(derivs, (i,), shape)
        Bj = _lookup(derivs, (j,), shape)
        Bij = _lookup(derivs, (i, j), shape)
        return A @ (Bi @ A @ Bj + Bj @ A @ Bi - Bij) @ A

    i, j, k = index
    Bi = _lookup(derivs, (i,), shape)
    Bj = _lookup(derivs, (j,), shape)
    Bk = _lookup(derivs, (k,), shape)
    Bij = _lookup(derivs, (i, j), shape)
    Bik = _lookup(derivs, (i, k), shape)
    Bjk = _lookup(derivs, (j, k), shape)
    Bijk = _lookup(derivs, (i, j, k), shape)
    S = Bi @ A @ Bj + Bj @ A @ Bi - Bij
    ABkA = A @ Bk @ A
    inner = (
        Bik @ A @ Bj
        + Bi @ A @ Bjk
        + Bjk @ A @ Bi
        + Bj @ A @ Bik
        - Bi @ ABkA @ Bj
        - Bj @ ABkA @ Bi
        - Bijk
    )
    return -ABkA @ S @ A - A @ S @ ABkA + A @ inner @ A


def delta(spec: LmmSpec, i: int) -> np.ndarray:
    """Delta_i: identity on the u_i block for i < s, H0 for the error term."""
    if i == spec.s:
        return spec.gram
    D = np.zeros((spec.p + spec.r, spec.p + spec.r))
    idx = np.arange(spec.p + spec.r)[spec.hc_slice(i)]
    D[idx, idx] = 1.0
    return D


def h_derivs(spec: LmmSpec, vc: VarComponents) -> DerivTable:
    """First, second and third pure derivatives of H; mixed ones vanish."""
    table: DerivTable = {}
    for i, sigma in enumerate(vc.sigma2):
        D = delta(spec, i)
        table[(i,)] = -D / sigma**2
        table[(i, i)] = 2.0 * D / sigma**3
        table[(i, i, i)] = -6.0 * D / sigma**4
    return table


def c_derivs(sol: MmeSolution, orders: Sequence[int] = (1, 2)) -> DerivTable:
    """Derivatives of C in closed form (orders 1, 2) or through d_op (order 3).

    Args:
        sol (MmeSolution): Solution whose C is differentiated.
        orders (Sequence[int]): Orders to compute.

    Returns:
        DerivTable: C^(i), C^(i,j) and C^(i,j,k) for sorted indices.
    """
    spec, vc, C = sol.spec, sol.sigma2_used, sol.C
    sig = vc.sigma2
    components = range(spec.s + 1)
    CD = [C @ delta(spec, i) for i in components]
    table: DerivTable = {}
    if 1 in orders:
        for i in components:
            table[(i,)] = CD[i] @ C / sig[i] ** 2
    if 2 in orders:
        for i, j in combinations_with_replacement(components, 2):
            if i == j:
                table[(i, i)] = 2.0 / sig[i] ** 4 * (CD[i] @ CD[i] - sig[i] * CD[i]) @ C
            else:
                table[(i, j)] = (CD[i] @ CD[j] + CD[j] @ CD[i]) @ C / (sig[i] * sig[j]) ** 2
    if 3 in orders:
        hd = h_derivs(spec, vc)
        for index in combinations_with_replacement(components, 3):
            table[index] = d_op(3, C, sol.H, hd, index)
    return table


def chvc_blocks(sol: MmeSolution) -> np.ndarray:
    """C H_V C = blockdiag(C11, G - C22)."""
    p = sol.p
    K = np.zeros_like(sol.C)
    K[:p, :p] = sol.C11
    K[p:, p:] = np.diag(sol.g) - sol.C22
    return K


@dataclass(frozen=True, eq=False)
class DerivBundle:
    """MSE matrix of the BLUP with its derivatives and the EBLUP correction."""

    spec: LmmSpec
    lambda_tilde: np.ndarray
    M: np.ndarray
    grad: Tuple[np.ndarray, ...]
    hess: Dict[Tuple[int, int], np.ndarray]
    m_delta: np.ndarray
    cc: Dict[Tuple[int, int], np.ndarray] = field(default_factory=dict)

    @property
    def q(self) -> int:
        return self.M.shape[0]

    def lambda_block(self, i: int) -> np.ndarray:
        return self.lambda_tilde[self.spec.hc_slice(i)]

    def correction(self, sigma_cov: np.ndarray) -> np.ndarray:
        """Sum_ij Sigma_ij CC_ij for another Sigma."""
        total = np.zeros_like(self.M)
        for (i, j), block in self.cc.items():
            total += sigma_cov[i, j] * block
        return 0.5 * (total + total.T)


def _hessian(sol: MmeSolution, lt: np.ndarray) -> Dict[Tuple[int, int], np.ndarray]:
    spec, C = sol.spec, sol.C
    sig = sol.sigma2_used.sigma2
    s = spec.s
    H0 = spec.gram
    H0lt = H0 @ lt
    blocks = [lt[spec.hc_slice(i)] for i in range(s)]

    hess: Dict[Tuple[int, int], np.ndarray] = {}
    for i, j in combinations_with_replacement(range(s + 1), 2):
        if i == j < s:
            Li = blocks[i]
            value = 2.0 / sig[i] ** 4 * (Li.T @ sol.block(i, i) @ Li - sig[i] * Li.T @ Li)
        elif i == j == s:
            value = 2.0 / sig[s] ** 4 * (H0lt.T @ C @ H0lt - sig[s] * lt.T @ H0lt)
        elif j < s:
            cross = blocks[i].T @ sol.block(i, j) @ blocks[j]
            value = (cross + cross.T) / (sig[i] * sig[j]) ** 2
        else:
            cross = blocks[i].T @ sol.row_block(i) @ H0lt
            value = (cross + cross.T) / (sig[i] * sig[s]) ** 2
        value = 0.5 * (value + value.T)
        hess[(i, j)] = value
        hess[(j, i)] = value
    return hess


def _covariance_blocks(
    sol: MmeSolution, lt: np.ndarray, lam: np.ndarray
) -> Dict[Tuple[int, int], np.ndarray]:
    """CC_ij = a_i' (C H_V C) a_j / (sigma2_i sigma2_j)^2 with a_i = Delta_i lt - 1{i=e} sigma2_e lam."""
    spec = sol.spec
    sig = sol.sigma2_used.sigma2
    s = spec.s
    K = chvc_blocks(sol)
    a = [delta(spec, i) @ lt for i in range(s)]
    a.append(spec.gram @ lt - sig[s] * lam)
    Ka = [K @ a_j for a_j in a]
    cc: Dict[Tuple[int, int], np.ndarray] = {}
    for i in range(s + 1):
        for j in range(s + 1):
            cc[(i, j)] = a[i].T @ Ka[j] / (sig[i] * sig[j]) ** 2
    return cc


def mse_bundle(
    sol: MmeSolution, contrast: ContrastSet, sigma_cov: Optional[np.ndarray] = None
) -> DerivBundle:
    """Gradient, Hessian and first-order EBLUP correction of Lambda' C Lambda.

    The correction is evaluated from the covariance blocks CC_ij and
    cross-checked against -1/2 sum Sigma_ij M^(i,j).

    Args:
        sol (MmeSolution): Solution at the variance components of interest.
        contrast (ContrastSet): Lambda = (K', L')'.
        sigma_cov (np.ndarray | None): Covariance matrix of the variance
            component estimator; the correction is zero when omitted.

    Returns:
        DerivBundle: Derivative bundle.
    """
    spec = sol.spec
    contrast.check_shape(spec)
    require_estimable(spec, contrast.K)
    sig = sol.sigma2_used.sigma2
    s = spec.s
    lam = contrast.lam
    lt = sol.C @ lam
    M = lam.T @ lt
    M = 0.5 * (M + M.T)

    # gradient
    grad = []
    for i in range(s):
        Li = lt[spec.hc_slice(i)]
        grad.append(Li.T @ Li / sig[i] ** 2)
    ge = lt.T @ spec.gram @ lt / sig[s] ** 2
    grad.append(0.5 * (ge + ge.T))

    hess = _hessian(sol, lt)
    cc = _covariance_blocks(sol, lt, lam)

    q = lam.shape[1]
    if sigma_cov is None:
        m_delta = np.zeros((q, q))
    else:
        sigma_cov = np.asarray(sigma_cov, dtype=float)
        if sigma_cov.shape != (s + 1, s + 1):
            raise ContrastShapeError(f"Sigma must be {s + 1}x{s + 1}, got {sigma_cov.shape}")
        via_cc = np.zeros((q, q))
        via_hess = np.zeros((q, q))
        scale = 1.0
        for i in range(s + 1):
            for j in range(s + 1):
                via_cc += sigma_cov[i, j] * cc[(i, j)]
                via_hess -= 0.5 * sigma_cov[i, j] * hess[(i, j)]
                scale += abs(sigma_cov[i, j]) * np.linalg.norm(cc[(i, j)])
        via_cc = 0.5 * (via_cc + via_cc.T)
        scale += np.linalg.norm(via_cc)
        gap = np.linalg.norm(via_cc - via_hess)
        if gap > ROUTE_RTOL * scale:
            raise RouteDisagreementError(
                f"MSE correction routes disagree by {gap:.3e} (scale {scale:.3e})"
            )
        m_delta = via_cc

    return DerivBundle(
        spec=spec,
        lambda_tilde=lt,
        M=M,
        grad=tuple(grad),
        hess=hess,
        m_delta=m_delta,
        cc=cc,
    )


def cross_derivative_identity_check(
    sol: MmeSolution, contrast: ContrastSet, rtol: float = ROUTE_RTOL
) -> bool:
    """M^(i,i) = -2 CC_ii and M^(i,j) = -(CC_ij + CC_ji) on this instance."""
    bundle = mse_bundle(sol, contrast)
    s = sol.spec.s
    for i in range(s + 1):
        for j in range(i, s + 1):
            expected = -(bundle.cc[(i, j)] + bundle.cc[(j, i)])
            actual = bundle.hess[(i, j)]
            scale = 1.0 + np.linalg.norm(expected) + np.linalg.norm(actual)
            if np.linalg.norm(actual - expected) > rtol * scale:
                logger.debug("cross derivative identity fails at (%d, %d)", i, j)
                return False
    return True
