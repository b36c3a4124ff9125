"""Simple linear mixed model y = Xb + Z_1 u_1 + ... + Z_s u_s + e.

Variance components are indexed 0..s-1 for the random factors and s for the
error term, so ``sigma2[-1]`` is always the residual variance.
"""
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Any, Dict, Iterable, List, Mapping, Sequence, Tuple, Union
import logging

import numpy as np
import pandas as pd
from scipy import linalg

from scripts.lmm_errors import (
    ArtifactError,
    ContrastShapeError,
    DegenerateModelError,
    DimensionMismatchError,
    EmptyDesignError,
    MissingColumnError,
    NonNumericResponseError,
    RankDeficientContrastError,
    SingleLevelFactorError,
    VarianceComponentError,
)

logger = logging.getLogger(__name__)

# relative tolerance of the row space test in check_estimability
ESTIMABILITY_TOL: float = 1e-8

# name of the intercept term in model descriptions and column labels
INTERCEPT_TERM: str = "1"
INTERCEPT_LABEL: str = "(Intercept)"


@dataclass(frozen=True, eq=False)
class VarComponents:
    """Vector (sigma2_1, ..., sigma2_s, sigma2_e) of positive variances."""

    sigma2: np.ndarray

    def __post_init__(self) -> None:
        values = np.array(self.sigma2, dtype=float)
        if values.ndim != 1 or values.size < 2:
            raise VarianceComponentError(
                "variance components need at least one random and one error entry"
            )
        if not np.all(np.isfinite(values)) or np.any(values <= 0.0):
            raise VarianceComponentError(
                f"variance components must be finite and > 0, got {values.tolist()}"
            )
        values.setflags(write=False)
        object.__setattr__(self, "sigma2", values)

    @property
    def s(self) -> int:
        return self.sigma2.size - 1

    @property
    def error(self) -> float:
        return float(self.sigma2[-1])

    @property
    def random(self) -> np.ndarray:
        return self.sigma2[:-1]

    def g_diag(self, sizes: Sequence[int]) -> np.ndarray:
        """Diagonal of G = diag(sigma2_i I_{r_i}).

        Args:
            sizes (Sequence[int]): Number of levels r_i of each random factor.

        Returns:
            np.ndarray: Vector of length r.
        """
        return np.repeat(self.random, sizes)

    def perturbed(self, index: int, step: float) -> "VarComponents":
        values = self.sigma2.copy()
        values[index] += step
        return VarComponents(values)

    def scaled(self, factor: float) -> "VarComponents":
        return VarComponents(self.sigma2 * factor)

    def as_list(self) -> List[float]:
        return [float(v) for v in self.sigma2]


@dataclass(frozen=True, eq=False)
class LmmSpec:
    """Response, fixed design X and random design blocks Z_1..Z_s."""

    y: np.ndarray
    X: np.ndarray
    Z_blocks: Tuple[np.ndarray, ...]
    fixed_labels: Tuple[str, ...] = field(default=())
    random_labels: Tuple[str, ...] = field(default=())
    level_labels: Tuple[Tuple[str, ...], ...] = field(default=())

    def __post_init__(self) -> None:
        y = np.asarray(self.y, dtype=float).reshape(-1)
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        blocks = []
        for Z in self.Z_blocks:
            Z = np.asarray(Z, dtype=float)
            if Z.ndim == 1:
                Z = Z.reshape(-1, 1)
            blocks.append(Z)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Z_blocks", tuple(blocks))

        # default labels
        if not self.fixed_labels:
            object.__setattr__(
                self, "fixed_labels", tuple(f"x{j}" for j in range(X.shape[1]))
            )
        if not self.random_labels:
            object.__setattr__(
                self, "random_labels", tuple(f"Z{i + 1}" for i in range(len(blocks)))
            )
        if not self.level_labels:
            object.__setattr__(
                self,
                "level_labels",
                tuple(tuple(str(k + 1) for k in range(Z.shape[1])) for Z in blocks),
            )

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def s(self) -> int:
        return len(self.Z_blocks)

    @property
    def r_sizes(self) -> Tuple[int, ...]:
        return tuple(Z.shape[1] for Z in self.Z_blocks)

    @property
    def r(self) -> int:
        return sum(self.r_sizes)

    @cached_property
    def Z(self) -> np.ndarray:
        return np.hstack(self.Z_blocks)

    @cached_property
    def XZ(self) -> np.ndarray:
        return np.hstack([self.X, self.Z])

    @cached_property
    def gram(self) -> np.ndarray:
        """H0 = (X, Z)'(X, Z)."""
        return self.XZ.T @ self.XZ

    @cached_property
    def rank_x(self) -> int:
        return int(np.linalg.matrix_rank(self.X))

    @cached_property
    def offsets(self) -> Tuple[int, ...]:
        return tuple(int(v) for v in np.concatenate([[0], np.cumsum(self.r_sizes)]))

    def u_slice(self, i: int) -> slice:
        """Position of u_i inside u."""
        return slice(self.offsets[i], self.offsets[i + 1])

    def hc_slice(self, i: int) -> slice:
        """Position of u_i inside the stacked (b, u) vector."""
        return slice(self.p + self.offsets[i], self.p + self.offsets[i + 1])

    def with_response(self, y: np.ndarray) -> "LmmSpec":
        return replace(self, y=y)

    def column_labels(self) -> List[str]:
        """Labels of the columns of (X, Z): fixed terms then factor:level."""
        labels = list(self.fixed_labels)
        for factor, levels in zip(self.random_labels, self.level_labels):
            labels.extend(f"{factor}:{level}" for level in levels)
        return labels


@dataclass(frozen=True, eq=False)
class ContrastSet:
    """Lambda = (K', L')' selecting q linear functions K'b + L'u."""

    K: np.ndarray
    L: np.ndarray

    def __post_init__(self) -> None:
        K = np.asarray(self.K, dtype=float)
        L = np.asarray(self.L, dtype=float)
        if K.ndim == 1:
            K = K.reshape(-1, 1)
        if L.ndim == 1:
            L = L.reshape(-1, 1)
        if K.ndim != 2 or L.ndim != 2 or K.shape[1] != L.shape[1]:
            raise ContrastShapeError(
                f"K and L must have the same number of columns, got {K.shape} and {L.shape}"
            )
        if K.shape[1] < 1:
            raise ContrastShapeError("a contrast set needs at least one column")
        lam = np.vstack([K, L])
        if np.linalg.matrix_rank(lam) < lam.shape[1]:
            raise RankDeficientContrastError(
                f"Lambda ({lam.shape[0]}x{lam.shape[1]}) is not of full column rank"
            )
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "L", L)

    @property
    def q(self) -> int:
        return self.K.shape[1]

    @property
    def lam(self) -> np.ndarray:
        return np.vstack([self.K, self.L])

    @classmethod
    def from_lambda(cls, lam: np.ndarray, p: int) -> "ContrastSet":
        lam = np.asarray(lam, dtype=float)
        if lam.ndim == 1:
            lam = lam.reshape(-1, 1)
        return cls(lam[:p], lam[p:])

    @classmethod
    def fixed(cls, K: np.ndarray, r: int) -> "ContrastSet":
        """Contrast on fixed effects only (L = 0)."""
        K = np.asarray(K, dtype=float)
        if K.ndim == 1:
            K = K.reshape(-1, 1)
        return cls(K, np.zeros((r, K.shape[1])))

    def transformed(self, T: np.ndarray) -> "ContrastSet":
        """Recombined contrast Lambda T."""
        return ContrastSet(self.K @ T, self.L @ T)

    def check_shape(self, spec: LmmSpec) -> None:
        if self.K.shape[0] != spec.p or self.L.shape[0] != spec.r:
            raise ContrastShapeError(
                f"contrast rows ({self.K.shape[0]}, {self.L.shape[0]}) "
                f"do not match model sizes p={spec.p}, r={spec.r}"
            )


def validate_spec(spec: LmmSpec) -> LmmSpec:
    """Check every structural requirement of the model.

    Args:
        spec (LmmSpec): Model to check.

    Returns:
        LmmSpec: The same object, unchanged.
    """
    if spec.X.shape[1] == 0:
        raise EmptyDesignError("fixed design X has no columns")
    if spec.s == 0:
        raise EmptyDesignError("at least one random factor is required")
    if any(size == 0 for size in spec.r_sizes):
        raise EmptyDesignError("every random factor needs at least one level")

    n = spec.X.shape[0]
    if spec.y.shape[0] != n:
        raise DimensionMismatchError(
            f"response has {spec.y.shape[0]} rows but X has {n}"
        )
    for i, Z in enumerate(spec.Z_blocks):
        if Z.shape[0] != n:
            raise DimensionMismatchError(
                f"random block {spec.random_labels[i]!r} has {Z.shape[0]} rows but X has {n}"
            )
    if n < 2:
        raise DegenerateModelError(f"need at least 2 observations, got {n}")

    if not all(np.all(np.isfinite(a)) for a in (spec.y, spec.X, *spec.Z_blocks)):
        raise DegenerateModelError("model data contain non-finite values")
    if not np.any(spec.X != 0.0):
        raise DegenerateModelError("fixed design X has no nonzero column")
    for i, Z in enumerate(spec.Z_blocks):
        if not np.any(Z != 0.0):
            raise DegenerateModelError(
                f"random block {spec.random_labels[i]!r} is all zero"
            )
    if len(spec.fixed_labels) != spec.p or len(spec.random_labels) != spec.s:
        raise DimensionMismatchError("label counts do not match the design")
    return spec


def check_estimability(K: np.ndarray, X: np.ndarray, tol: float = ESTIMABILITY_TOL) -> bool:
    """Check that every column of K lies in the row space of X.

    Args:
        K (np.ndarray): Contrast matrix p x q (or a p-vector).
        X (np.ndarray): Fixed design n x p.
        tol (float): Relative tolerance, scaled by the Frobenius norm of K.

    Returns:
        bool: True when K'b is estimable.
    """
    K = np.asarray(K, dtype=float)
    if K.ndim == 1:
        K = K.reshape(-1, 1)
    null = linalg.null_space(np.asarray(X, dtype=float))
    if null.shape[1] == 0:
        return True
    residual = np.linalg.norm(null.T @ K, axis=0)
    return bool(np.all(residual <= tol * np.linalg.norm(K)))


@dataclass(frozen=True)
class ModelDescription:
    """Response column, fixed terms and random factor columns of a table."""

    response: str
    fixed: Tuple[str, ...] = (INTERCEPT_TERM,)
    random: Tuple[str, ...] = ()
    categorical: Tuple[str, ...] = ()

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ModelDescription":
        known = {"response", "fixed", "random", "categorical"}
        unknown = set(data) - known
        if unknown:
            raise ArtifactError(f"unknown model fields: {sorted(unknown)}")
        if "response" not in data or not isinstance(data["response"], str):
            raise ArtifactError("model description needs a string 'response'")
        return cls(
            response=data["response"],
            fixed=tuple(str(t) for t in data.get("fixed", [INTERCEPT_TERM])),
            random=tuple(str(t) for t in data.get("random", [])),
            categorical=tuple(str(t) for t in data.get("categorical", [])),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "response": self.response,
            "fixed": list(self.fixed),
            "random": list(self.random),
            "categorical": list(self.categorical),
        }

    def columns(self) -> List[str]:
        terms = [t for t in self.fixed if t != INTERCEPT_TERM]
        return [self.response, *terms, *self.random]


def _levels(column: pd.Series) -> Tuple[np.ndarray, Tuple[str, ...]]:
    """Integer codes and level names, levels ordered by first appearance."""
    values = column.astype(str).to_numpy()
    levels = pd.unique(values)
    codes = pd.Categorical(values, categories=levels).codes
    return codes, tuple(str(level) for level in levels)


def _indicators(codes: np.ndarray, n_levels: int) -> np.ndarray:
    return (codes[:, None] == np.arange(n_levels)[None, :]).astype(float)


def build_from_table(
    rows: Union[pd.DataFrame, Iterable[Mapping[str, Any]]], model: ModelDescription
) -> LmmSpec:
    """Build the model matrices from tabular records.

    Fixed categorical terms get the full indicator set, random factors one
    indicator column per observed level. Rows with missing values in any
    used column are dropped.

    Args:
        rows (pd.DataFrame | Iterable[Mapping]): Data records.
        model (ModelDescription): Column roles.

    Returns:
        LmmSpec: Validated model.
    """
    frame = rows if isinstance(rows, pd.DataFrame) else pd.DataFrame(list(rows))
    for column in model.columns():
        if column not in frame.columns:
            raise MissingColumnError(column)
    if not model.random:
        raise SingleLevelFactorError("model description names no random factor")

    frame = frame[model.columns()]
    complete = frame.notna().all(axis=1)
    if not complete.all():
        logger.warning("dropping %d rows with missing values", int((~complete).sum()))
        frame = frame[complete]
    frame = frame.reset_index(drop=True)

    try:
        y = pd.to_numeric(frame[model.response], errors="raise").to_numpy(dtype=float)
    except (ValueError, TypeError) as err:
        raise NonNumericResponseError(
            f"response column {model.response!r} is not numeric"
        ) from err

    # fixed effects
    columns: List[np.ndarray] = []
    labels: List[str] = []
    for term in model.fixed:
        if term == INTERCEPT_TERM:
            columns.append(np.ones((len(frame), 1)))
            labels.append(INTERCEPT_LABEL)
            continue
        series = frame[term]
        if term in model.categorical or not pd.api.types.is_numeric_dtype(series):
            codes, levels = _levels(series)
            columns.append(_indicators(codes, len(levels)))
            labels.extend(f"{term}:{level}" for level in levels)
        else:
            columns.append(series.to_numpy(dtype=float).reshape(-1, 1))
            labels.append(term)
    X = np.hstack(columns) if columns else np.zeros((len(frame), 0))

    # random effects
    blocks: List[np.ndarray] = []
    level_labels: List[Tuple[str, ...]] = []
    for factor in model.random:
        codes, levels = _levels(frame[factor])
        if len(levels) < 2:
            raise SingleLevelFactorError(
                f"random factor {factor!r} has a single level {levels!r}"
            )
        blocks.append(_indicators(codes, len(levels)))
        level_labels.append(levels)

    spec = LmmSpec(
        y=y,
        X=X,
        Z_blocks=tuple(blocks),
        fixed_labels=tuple(labels),
        random_labels=tuple(model.random),
        level_labels=tuple(level_labels),
    )
    logger.info(
        "built model n=%d p=%d r=%s from table", spec.n, spec.p, list(spec.r_sizes)
    )
    return validate_spec(spec)


def describe(spec: LmmSpec) -> Dict[str, Any]:
    """Short summary of the model sizes."""
    return {
        "n": spec.n,
        "p": spec.p,
        "s": spec.s,
        "r": list(spec.r_sizes),
        "rank_x": spec.rank_x,
    }

