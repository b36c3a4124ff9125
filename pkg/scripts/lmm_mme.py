"""Henderson's mixed model equations for the simple linear mixed model."""
from dataclasses import dataclass
from functools import cached_property
import logging

import numpy as np
from scipy import linalg

from scripts.lmm_errors import (
    ContrastShapeError,
    DimensionMismatchError,
    NonEstimableContrastError,
    SingularSystemError,
)
from scripts.lmm_model import ContrastSet, LmmSpec, VarComponents, check_estimability

logger = logging.getLogger(__name__)

# eigenvalues below PINV_RCOND * max eigenvalue are treated as zero
PINV_RCOND: float = 1e-12

# accepted relative residual of the MME1 system
MME_RESIDUAL_TOL: float = 1e-8


def symmetric_ginverse(A: np.ndarray, rcond: float = PINV_RCOND) -> np.ndarray:
    """Moore-Penrose inverse of a symmetric matrix.

    Args:
        A (np.ndarray): Symmetric matrix.
        rcond (float): Relative eigenvalue cutoff.

    Returns:
        np.ndarray: Symmetric generalized inverse.
    """
    G = linalg.pinvh(A, atol=0.0, rtol=rcond)
    return 0.5 * (G + G.T)


def _check_components(spec: LmmSpec, vc: VarComponents) -> None:
    if vc.s != spec.s:
        raise DimensionMismatchError(
            f"model has {spec.s} random factors but {vc.s} random variances were given"
        )


def assemble_h(spec: LmmSpec, vc: VarComponents) -> np.ndarray:
    """Henderson's MME matrix H = (X,Z)'R^-1(X,Z) + blockdiag(0, G^-1)."""
    _check_components(spec, vc)
    H = spec.gram / vc.error
    idx = np.arange(spec.p, spec.p + spec.r)
    H[idx, idx] += 1.0 / vc.g_diag(spec.r_sizes)
    return H


def assemble_h0(spec: LmmSpec) -> np.ndarray:
    """Gram matrix H0 = (X,Z)'(X,Z); independent of the variance components."""
    return spec.gram.copy()


@dataclass(frozen=True, eq=False)
class MmeSolution:
    """BLUE/BLUP solution of the MMEs and the coefficient matrix C."""

    spec: LmmSpec
    b_tilde: np.ndarray
    u_tilde: np.ndarray
    C: np.ndarray
    sigma2_used: VarComponents

    @property
    def p(self) -> int:
        return self.spec.p

    @cached_property
    def g(self) -> np.ndarray:
        return self.sigma2_used.g_diag(self.spec.r_sizes)

    @cached_property
    def H(self) -> np.ndarray:
        return assemble_h(self.spec, self.sigma2_used)

    @property
    def C11(self) -> np.ndarray:
        return self.C[: self.p, : self.p]

    @property
    def C12(self) -> np.ndarray:
        return self.C[: self.p, self.p :]

    @property
    def C22(self) -> np.ndarray:
        return self.C[self.p :, self.p :]

    def block(self, i: int, j: int) -> np.ndarray:
        """Random block {C}_ij of size r_i x r_j."""
        return self.C[self.spec.hc_slice(i), self.spec.hc_slice(j)]

    def row_block(self, i: int) -> np.ndarray:
        """Row block {C}_i. of size r_i x (p+r)."""
        return self.C[self.spec.hc_slice(i), :]

    def u_block(self, i: int) -> np.ndarray:
        return self.u_tilde[self.spec.u_slice(i)]

    @property
    def stacked(self) -> np.ndarray:
        return np.concatenate([self.b_tilde, self.u_tilde])

    @cached_property
    def residual(self) -> np.ndarray:
        """y - X b - Z u."""
        return self.spec.y - self.spec.XZ @ self.stacked

    def batch(self, Y: np.ndarray) -> np.ndarray:
        """Stacked (b, u) solutions for each column of a response matrix Y."""
        return self.C @ (self.spec.XZ.T @ Y) / self.sigma2_used.error


def solve_mme(spec: LmmSpec, vc: VarComponents) -> MmeSolution:
    """Solve the G-stabilized equations for (b, v) and recover u = G v.

    Args:
        spec (LmmSpec): Validated model.
        vc (VarComponents): Variance components used in H.

    Returns:
        MmeSolution: Solutions and the coefficient matrix C.
    """
    _check_components(spec, vc)
    H = assemble_h(spec, vc)
    g = vc.g_diag(spec.r_sizes)
    rhs = spec.XZ.T @ spec.y / vc.error

    # MME2 matrix equals H diag(I, G)
    scale = np.concatenate([np.ones(spec.p), g])
    A = H * scale[None, :]
    solution, _, rank, _ = linalg.lstsq(A, rhs, lapack_driver="gelsd")
    b = solution[: spec.p]
    u = g * solution[spec.p :]

    stacked = np.concatenate([b, u])
    residual = np.linalg.norm(H @ stacked - rhs)
    bound = MME_RESIDUAL_TOL * max(np.linalg.norm(rhs), np.finfo(float).tiny)
    if residual > bound and residual > 0.0:
        raise SingularSystemError(
            f"MME residual {residual:.3e} exceeds {bound:.3e} (rank {rank} of {A.shape[0]})"
        )
    if rank < A.shape[0]:
        logger.debug("MME matrix is rank deficient: rank %d of %d", rank, A.shape[0])

    C = symmetric_ginverse(H)
    return MmeSolution(spec=spec, b_tilde=b, u_tilde=u, C=C, sigma2_used=vc)


def absorbed_z_gram(spec: LmmSpec) -> np.ndarray:
    """M = Z'Z - Z'X (X'X)^- X'Z, the random design with X absorbed."""
    X, Z = spec.X, spec.Z
    XtZ = X.T @ Z
    M = Z.T @ Z - XtZ.T @ symmetric_ginverse(X.T @ X) @ XtZ
    return 0.5 * (M + M.T)


def c22_fast(spec: LmmSpec, vc: VarComponents) -> np.ndarray:
    """C22 = sigma2_e G (sigma2_e I + M G)^-1 without inverting H."""
    _check_components(spec, vc)
    g = vc.g_diag(spec.r_sizes)
    sigma_e = vc.error
    A = sigma_e * np.eye(spec.r) + absorbed_z_gram(spec) * g[None, :]
    # X A = sigma_e G  <=>  A' X' = sigma_e G
    C22 = linalg.solve(A.T, sigma_e * np.diag(g)).T
    return 0.5 * (C22 + C22.T)


def require_estimable(spec: LmmSpec, K: np.ndarray) -> np.ndarray:
    K = np.asarray(K, dtype=float)
    if K.ndim == 1:
        K = K.reshape(-1, 1)
    if K.shape[0] != spec.p:
        raise ContrastShapeError(f"K has {K.shape[0]} rows, model has p={spec.p}")
    if not check_estimability(K, spec.X):
        raise NonEstimableContrastError("K'b is not estimable for this design")
    return K


def blue(sol: MmeSolution, K: np.ndarray) -> np.ndarray:
    """Best linear unbiased estimate K'b."""
    K = require_estimable(sol.spec, K)
    return K.T @ sol.b_tilde


def blup(sol: MmeSolution, contrast: ContrastSet) -> np.ndarray:
    """Best linear unbiased predictor K'b + L'u."""
    contrast.check_shape(sol.spec)
    require_estimable(sol.spec, contrast.K)
    return contrast.K.T @ sol.b_tilde + contrast.L.T @ sol.u_tilde


def mse_blup(sol: MmeSolution, contrast: ContrastSet) -> np.ndarray:
    """MSE matrix Lambda' C Lambda of the BLUP at known variances."""
    contrast.check_shape(sol.spec)
    require_estimable(sol.spec, contrast.K)
    lam = contrast.lam
    M = lam.T @ sol.C @ lam
    return 0.5 * (M + M.T)
