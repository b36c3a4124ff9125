"""Files exchanged by the command line tool: fits, contrasts, reports, simulated data."""
from dataclasses import asdict, dataclass, fields
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union
import hashlib
import json
import logging
import math

import numpy as np
import pandas as pd

from scripts.lmm_errors import ArtifactError, SpecError
from scripts.lmm_inference import InferenceResult
from scripts.lmm_model import ContrastSet, LmmSpec, ModelDescription, VarComponents, describe
from scripts.lmm_varcomp import VcEstimate

logger = logging.getLogger(__name__)

# schema version of fit artifacts and reports
FORMAT_VERSION: str = "1"

# CSV float format, enough digits for an exact round-trip
CSV_FLOAT_FORMAT: str = "%.17g"

PathLike = Union[str, Path]


def file_sha256(path: PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _encode_number(value: Optional[float]) -> Any:
    """JSON has no infinity; encode it as a string."""
    if value is None:
        return None
    value = float(value)
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return value


def _decode_number(value: Any) -> Optional[float]:
    return None if value is None else float(value)


def _matrix(value: Optional[np.ndarray]) -> Optional[List[List[float]]]:
    if value is None:
        return None
    return [[float(v) for v in row] for row in np.atleast_2d(value)]


def _check_keys(data: Mapping[str, Any], expected: Sequence[str], what: str) -> None:
    if not isinstance(data, Mapping):
        raise ArtifactError(f"{what} must be a JSON object")
    unknown = set(data) - set(expected)
    if unknown:
        raise ArtifactError(f"unknown {what} fields: {sorted(unknown)}")
    missing = set(expected) - set(data)
    if missing:
        raise ArtifactError(f"missing {what} fields: {sorted(missing)}")
    if data["format_version"] != FORMAT_VERSION:
        raise ArtifactError(
            f"{what} format version {data['format_version']!r} is not {FORMAT_VERSION!r}"
        )


def read_table(path: PathLike, model: ModelDescription) -> pd.DataFrame:
    """Read a CSV data file; factor columns are kept as strings."""
    as_text = {column: str for column in (*model.random, *model.categorical)}
    return pd.read_csv(path, dtype=as_text, encoding="utf-8", float_precision="round_trip")


def read_model(path: PathLike) -> ModelDescription:
    with open(path, encoding="utf-8") as handle:
        try:
            data = json.load(handle)
        except json.JSONDecodeError as err:
            raise ArtifactError(f"model file {path} is not valid JSON: {err}") from err
    if not isinstance(data, Mapping):
        raise ArtifactError("model file must contain a JSON object")
    return ModelDescription.from_dict(data)


@dataclass
class FitArtifact:
    """Serializable record of a variance component fit."""

    format_version: str
    model: Dict[str, Any]
    summary: Dict[str, Any]
    fixed_labels: List[str]
    level_labels: Dict[str, List[str]]
    data_path: str
    data_sha256: str
    method: str
    sigma2_hat: List[float]
    sigma_cov_hat: Optional[List[List[float]]]
    fisher: List[List[float]]
    loglik: Optional[float]
    converged: bool
    iterations: int
    boundary: List[bool]
    identifiable: bool
    b_hat: Dict[str, float]
    u_hat: Dict[str, Dict[str, float]]
    timestamp: str

    @classmethod
    def from_estimate(
        cls, est: VcEstimate, model: ModelDescription, data_path: PathLike
    ) -> "FitArtifact":
        spec = est.solution.spec
        sol = est.solution
        u_hat = {
            factor: {level: float(v) for level, v in zip(levels, sol.u_block(i))}
            for i, (factor, levels) in enumerate(zip(spec.random_labels, spec.level_labels))
        }
        return cls(
            format_version=FORMAT_VERSION,
            model=model.to_dict(),
            summary=describe(spec),
            fixed_labels=list(spec.fixed_labels),
            level_labels={f: list(levels) for f, levels in zip(spec.random_labels, spec.level_labels)},
            data_path=str(Path(data_path).resolve()),
            data_sha256=file_sha256(data_path),
            method=est.method.value,
            sigma2_hat=est.sigma2_hat.as_list(),
            sigma_cov_hat=_matrix(est.sigma_cov_hat),
            fisher=_matrix(est.fisher),
            loglik=None if est.loglik is None else float(est.loglik),
            converged=bool(est.converged),
            iterations=int(est.iterations),
            boundary=[bool(b) for b in est.boundary],
            identifiable=bool(est.identifiable),
            b_hat={label: float(v) for label, v in zip(spec.fixed_labels, sol.b_tilde)},
            u_hat=u_hat,
            timestamp=datetime.now(timezone.utc).isoformat(),
        )

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "FitArtifact":
        _check_keys(data, [f.name for f in fields(cls)], "fit artifact")
        return cls(**dict(data))

    def write(self, path: PathLike) -> None:
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(self.to_dict(), handle, indent=2)
            handle.write("\n")

    @classmethod
    def read(cls, path: PathLike) -> "FitArtifact":
        with open(path, encoding="utf-8") as handle:
            try:
                data = json.load(handle)
            except json.JSONDecodeError as err:
                raise ArtifactError(f"fit artifact {path} is not valid JSON: {err}") from err
        return cls.from_dict(data)

    @property
    def model_description(self) -> ModelDescription:
        return ModelDescription.from_dict(self.model)

    @property
    def variance_components(self) -> VarComponents:
        return VarComponents(np.array(self.sigma2_hat))

    @property
    def sigma_cov(self) -> Optional[np.ndarray]:
        return None if self.sigma_cov_hat is None else np.array(self.sigma_cov_hat)

    def check_matches(self, spec: LmmSpec) -> None:
        """The re-built model must reproduce the recorded sizes and column maps."""
        sizes = describe(spec)
        if sizes != self.summary:
            raise ArtifactError(f"model sizes {sizes} differ from the fit artifact {self.summary}")
        if list(spec.fixed_labels) != self.fixed_labels:
            raise ArtifactError("fixed effect columns differ from the fit artifact")
        levels = {f: list(l) for f, l in zip(spec.random_labels, spec.level_labels)}
        if levels != self.level_labels:
            raise ArtifactError("random factor levels differ from the fit artifact")


def _row_vector(values: Any, size: int, what: str) -> np.ndarray:
    vector = np.asarray(values, dtype=float)
    if vector.shape != (size,):
        raise ArtifactError(f"{what} must have length {size}, got {vector.shape}")
    return vector


def _symbolic_vector(
    selectors: Mapping[str, Any], labels: Sequence[str], what: str
) -> np.ndarray:
    index = {label: k for k, label in enumerate(labels)}
    vector = np.zeros(len(labels))
    for label, coef in selectors.items():
        if label not in index:
            raise ArtifactError(f"unknown {what} selector {label!r}")
        vector[index[label]] = float(coef)
    return vector


def parse_contrast(
    data: Mapping[str, Any], spec: LmmSpec
) -> Tuple[ContrastSet, Optional[np.ndarray]]:
    """Contrast file to (Lambda, w0).

    Each row is either dense ``{"k": [...], "l": [...]}`` or symbolic
    ``{"fixed": {"(Intercept)": 1}, "random": {"group:g1": 1}}``; an optional
    ``"w0"`` gives the null value of the row.
    """
    if not isinstance(data, Mapping) or set(data) != {"rows"}:
        raise ArtifactError("contrast file must be an object with a single 'rows' list")
    rows = data["rows"]
    if not isinstance(rows, list) or not rows:
        raise ArtifactError("contrast file needs at least one row")

    random_labels = spec.column_labels()[spec.p :]
    k_columns, l_columns, nulls = [], [], []
    for row in rows:
        if not isinstance(row, Mapping):
            raise ArtifactError("contrast rows must be objects")
        keys = set(row) - {"w0"}
        if keys <= {"k", "l"} and keys:
            k = _row_vector(row.get("k", np.zeros(spec.p)), spec.p, "k")
            l = _row_vector(row.get("l", np.zeros(spec.r)), spec.r, "l")
        elif keys <= {"fixed", "random"} and keys:
            k = _symbolic_vector(row.get("fixed", {}), spec.fixed_labels, "fixed")
            l = _symbolic_vector(row.get("random", {}), random_labels, "random")
        else:
            raise ArtifactError(f"contrast row mixes or misses fields: {sorted(row)}")
        k_columns.append(k)
        l_columns.append(l)
        nulls.append(row.get("w0"))

    contrast = ContrastSet(np.column_stack(k_columns), np.column_stack(l_columns))
    if all(v is None for v in nulls):
        return contrast, None
    return contrast, np.array([0.0 if v is None else float(v) for v in nulls])


def read_contrast(path: PathLike, spec: LmmSpec) -> Tuple[ContrastSet, Optional[np.ndarray]]:
    with open(path, encoding="utf-8") as handle:
        try:
            data = json.load(handle)
        except json.JSONDecodeError as err:
            raise ArtifactError(f"contrast file {path} is not valid JSON: {err}") from err
    return parse_contrast(data, spec)


REPORT_FIELDS: Tuple[str, ...] = (
    "format_version", "status", "method", "message", "w_hat", "mse_used", "statistic",
    "df", "df_num", "kappa", "p_value", "level", "interval", "region", "flags",
)


def report_dict(result: InferenceResult) -> Dict[str, Any]:
    return {
        "format_version": FORMAT_VERSION,
        "status": "ok",
        "method": result.method.value,
        "message": None,
        "w_hat": [float(v) for v in result.w_hat],
        "mse_used": _matrix(result.mse_used),
        "statistic": float(result.statistic),
        "df": _encode_number(result.df),
        "df_num": int(result.df_num),
        "kappa": float(result.kappa),
        "p_value": float(result.p_value),
        "level": float(result.level),
        "interval": None if result.interval is None else [float(v) for v in result.interval],
        "region": {
            "center": [float(v) for v in result.region.center],
            "shape": _matrix(result.region.shape),
            "radius2": _encode_number(result.region.radius2),
        },
        "flags": list(result.flags),
    }


def partial_report_dict(
    method: str, w_hat: np.ndarray, mse: np.ndarray, level: float, message: str
) -> Dict[str, Any]:
    """Report written when the degrees of freedom cannot be formed."""
    return {
        "format_version": FORMAT_VERSION,
        "status": "df-undefined",
        "method": method,
        "message": message,
        "w_hat": [float(v) for v in w_hat],
        "mse_used": _matrix(mse),
        "statistic": None,
        "df": None,
        "df_num": int(np.atleast_1d(w_hat).size),
        "kappa": None,
        "p_value": None,
        "level": float(level),
        "interval": None,
        "region": None,
        "flags": ["df-undefined"],
    }


def write_report(report: Mapping[str, Any], path: PathLike) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(dict(report), handle, indent=2)
        handle.write("\n")


def read_report(path: PathLike) -> Dict[str, Any]:
    with open(path, encoding="utf-8") as handle:
        data = json.load(handle)
    _check_keys(data, REPORT_FIELDS, "report")
    data["df"] = _decode_number(data["df"])
    if data["region"] is not None:
        data["region"]["radius2"] = _decode_number(data["region"]["radius2"])
    return data


@dataclass(frozen=True)
class SimulationDesign:
    """Crossed random factors with replicated cells and an intercept."""

    factor_sizes: Tuple[int, ...]
    replicates: int
    sigma2: Tuple[float, ...]
    intercept: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.factor_sizes or any(size < 2 for size in self.factor_sizes):
            raise SpecError(f"every factor needs at least 2 levels, got {self.factor_sizes}")
        if self.replicates < 1:
            raise SpecError(f"replicates must be >= 1, got {self.replicates}")
        if len(self.sigma2) != len(self.factor_sizes) + 1:
            raise SpecError(
                f"need {len(self.factor_sizes) + 1} variances for "
                f"{len(self.factor_sizes)} factors, got {len(self.sigma2)}"
            )
        VarComponents(np.array(self.sigma2))

    @property
    def factors(self) -> List[str]:
        return [f"f{i + 1}" for i in range(len(self.factor_sizes))]

    def model(self) -> ModelDescription:
        return ModelDescription(response="y", fixed=("1",), random=tuple(self.factors))


def simulate(design: SimulationDesign) -> pd.DataFrame:
    """Draw y = b0 + sum_i Z_i u_i + e, deterministic in the seed."""
    rng = np.random.default_rng(design.seed)
    grids = np.meshgrid(*[np.arange(size) for size in design.factor_sizes], indexing="ij")
    cells = np.column_stack([g.reshape(-1) for g in grids])
    codes = np.repeat(cells, design.replicates, axis=0)
    n = codes.shape[0]

    y = np.full(n, float(design.intercept))
    frame: Dict[str, Any] = {}
    for i, (factor, size) in enumerate(zip(design.factors, design.factor_sizes)):
        u = rng.normal(0.0, math.sqrt(design.sigma2[i]), size=size)
        y += u[codes[:, i]]
        frame[factor] = [f"{factor}_{k + 1}" for k in codes[:, i]]
    y += rng.normal(0.0, math.sqrt(design.sigma2[-1]), size=n)
    return pd.DataFrame({"y": y, **frame})


def write_table(frame: pd.DataFrame, path: PathLike) -> None:
    frame.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT, encoding="utf-8")
