"""Mixed model command line: fit, infer, simulate"""

from typing import List, Optional, Sequence
import argparse
import json
import logging
import sys

import numpy as np

from scripts.lmm_artifact import (
    FitArtifact,
    SimulationDesign,
    file_sha256,
    partial_report_dict,
    read_contrast,
    read_model,
    read_table,
    report_dict,
    simulate,
    write_report,
    write_table,
)
from scripts.lmm_errors import ArtifactError, DfUndefinedError, LmmError
from scripts.lmm_inference import DEFAULT_LEVEL, InferenceMethod, InferenceResult, run_inference
from scripts.lmm_mme import blup, mse_blup, solve_mme
from scripts.lmm_model import VarComponents, build_from_table
from scripts.lmm_varcomp import DEFAULT_EPS, DEFAULT_MAX_ITER, EstimationMethod, VcOptions, estimate

logger = logging.getLogger(__name__)

# exit codes
EXIT_OK = 0
EXIT_INPUT = 1
EXIT_NOT_CONVERGED = 2
EXIT_DF_UNDEFINED = 3


def parse_floats(text: str) -> List[float]:
    """Comma separated list of numbers, e.g. ``1,0.5``."""
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError as err:
        raise argparse.ArgumentTypeError(f"not a list of numbers: {text!r}") from err


def parse_ints(text: str) -> List[int]:
    """Comma separated list of integers, e.g. ``3,2``."""
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError as err:
        raise argparse.ArgumentTypeError(f"not a list of integers: {text!r}") from err


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="main_lmm", description="Simple linear mixed models: fit, infer, simulate."
    )
    parser.add_argument("-v", "--verbose", action="count", default=0,
                        help="-v for progress, -vv for iteration traces")
    commands = parser.add_subparsers(dest="command", required=True)

    fit = commands.add_parser("fit", help="estimate variance components")
    fit.add_argument("--data", required=True, help="CSV data file")
    fit.add_argument("--model", required=True, help="JSON model description")
    fit.add_argument("--method", default=EstimationMethod.REML.value,
                     choices=[m.value for m in EstimationMethod])
    fit.add_argument("--out", required=True, help="fit artifact to write")
    fit.add_argument("--eps", type=float, default=DEFAULT_EPS)
    fit.add_argument("--max-iter", type=int, default=DEFAULT_MAX_ITER)
    fit.add_argument("--start", type=parse_floats, help="starting variances, e.g. 1,1")
    fit.add_argument("--prior", type=parse_floats, help="MINQE prior variances")
    fit.set_defaults(handler=cmd_fit)

    infer = commands.add_parser("infer", help="test and predict linear functions")
    infer.add_argument("--fit", required=True, help="fit artifact written by 'fit'")
    infer.add_argument("--contrast", required=True, help="JSON contrast file")
    infer.add_argument("--method", default=InferenceMethod.KR_MODIFIED.value,
                       choices=[m.value for m in InferenceMethod])
    infer.add_argument("--w0", type=parse_floats, help="null value, one number per row")
    infer.add_argument("--level", type=float, default=DEFAULT_LEVEL)
    infer.add_argument("--data", help="data file, defaults to the one recorded in the fit")
    infer.add_argument("--out", required=True, help="JSON report to write")
    infer.set_defaults(handler=cmd_infer)

    sim = commands.add_parser("simulate", help="draw data from a crossed random design")
    sim.add_argument("--sizes", type=parse_ints, required=True, help="levels per factor, e.g. 4,3")
    sim.add_argument("--replicates", type=int, default=1)
    sim.add_argument("--sigma2", type=parse_floats, required=True,
                     help="factor variances followed by the error variance")
    sim.add_argument("--intercept", type=float, default=0.0)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--out", required=True, help="CSV file to write")
    sim.add_argument("--model-out", help="also write the matching JSON model description")
    sim.set_defaults(handler=cmd_simulate)
    return parser


def _components(values: Optional[Sequence[float]]) -> Optional[VarComponents]:
    return None if values is None else VarComponents(np.array(values))


def cmd_fit(args: argparse.Namespace) -> int:
    """Fit variance components and write the artifact.

    Returns:
        int: 0 when converged, 2 when max_iter was reached.
    """
    model = read_model(args.model)
    spec = build_from_table(read_table(args.data, model), model)
    method = EstimationMethod(args.method)
    opts = VcOptions(start=_components(args.start), eps=args.eps, max_iter=args.max_iter)
    est = estimate(spec, method, opts, prior=_components(args.prior))

    artifact = FitArtifact.from_estimate(est, model, args.data)
    artifact.write(args.out)
    print(f"method      {method.value}")
    print(f"sigma2      {', '.join(f'{v:.6g}' for v in artifact.sigma2_hat)}")
    print(f"iterations  {est.iterations} (converged: {est.converged})")
    if est.loglik is not None:
        print(f"loglik      {est.loglik:.6f}")
    if not est.converged:
        logger.error("fit did not converge; artifact written with converged=false")
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def _print_result(result: InferenceResult) -> None:
    print(f"method      {result.method.value}")
    print(f"estimate    {', '.join(f'{v:.6g}' for v in result.w_hat)}")
    print(f"statistic   {result.statistic:.6g}")
    print(f"df          {result.df_num}, {result.df:.6g}")
    print(f"kappa       {result.kappa:.6g}")
    print(f"p-value     {result.p_value:.6g}")
    if result.interval is not None:
        low, high = result.interval
        print(f"interval    [{low:.6g}, {high:.6g}] at level {result.level}")


def cmd_infer(args: argparse.Namespace) -> int:
    """Run inference for a contrast file against a stored fit.

    Returns:
        int: 0 on success, 3 when the degrees of freedom are undefined.
    """
    artifact = FitArtifact.read(args.fit)
    model = artifact.model_description
    data_path = args.data or artifact.data_path
    if args.data is None and file_sha256(data_path) != artifact.data_sha256:
        raise ArtifactError(f"data file {data_path} changed since the fit")
    spec = build_from_table(read_table(data_path, model), model)
    artifact.check_matches(spec)

    sol = solve_mme(spec, artifact.variance_components)
    contrast, w0 = read_contrast(args.contrast, spec)
    if args.w0 is not None:
        w0 = np.array(args.w0)
    method = InferenceMethod(args.method)
    try:
        result = run_inference(sol, contrast, method, artifact.sigma_cov, w0, args.level)
    except DfUndefinedError as err:
        logger.error("degrees of freedom undefined: %s", err)
        report = partial_report_dict(
            method.value, blup(sol, contrast), mse_blup(sol, contrast), args.level, str(err)
        )
        write_report(report, args.out)
        return EXIT_DF_UNDEFINED

    write_report(report_dict(result), args.out)
    _print_result(result)
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace) -> int:
    """Write a seed-determined data set (and optionally its model file)."""
    design = SimulationDesign(
        factor_sizes=tuple(args.sizes),
        replicates=args.replicates,
        sigma2=tuple(args.sigma2),
        intercept=args.intercept,
        seed=args.seed,
    )
    frame = simulate(design)
    write_table(frame, args.out)
    if args.model_out:
        with open(args.model_out, "w", encoding="utf-8") as handle:
            json.dump(design.model().to_dict(), handle, indent=2)
            handle.write("\n")
    print(f"wrote {len(frame)} rows to {args.out}")
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=[logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)],
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    logging.captureWarnings(True)
    try:
        return args.handler(args)
    except (LmmError, OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
