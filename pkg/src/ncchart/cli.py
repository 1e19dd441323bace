"""Command line interface.

    ncchart verify --all
    ncchart verify --identity recursion:M --format latex
    ncchart hierarchy --eq kdv --order 2 --format json
    ncchart derive --link B1
    ncchart numcheck --identity moebius-full --dim 3 --grid 128 --seeds 10
    ncchart format

The checking commands write a report bundle on stdout and exit 0 only when
all checks pass.
"""

import argparse
import json
import logging
import sys
from collections.abc import Sequence

from .core.config import get_settings
from .core.exceptions import NcChartError
from .core.logging import configure_logging
from .models.schemas import (
    CheckKind,
    CheckStatus,
    FlowRecord,
    ReportBundle,
    VerificationReport,
)
from .services.chart import ChartService
from .services.numeval import export_residuals_csv
from .utils.printer import (
    expression_to_json,
    format_script,
    latex_expression,
    latex_report_table,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_ERROR = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ncchart", description="Verify the non-Abelian KdV chart.")
    parser.add_argument("--catalog", help="chart script to load instead of the configured one")
    parser.add_argument("--profile", choices=("standard", "alternative"))
    parser.add_argument("--log-level")
    parser.add_argument("--log-format", choices=("text", "json"))
    sub = parser.add_subparsers(dest="command", required=True)

    verify = sub.add_parser("verify", help="run symbolic and numeric checks")
    which = verify.add_mutually_exclusive_group(required=True)
    which.add_argument("--all", action="store_true")
    which.add_argument("--identity", action="append", metavar="NAME")
    verify.add_argument("--format", choices=("json", "latex"), default="json")
    verify.add_argument("--workers", type=int)
    verify.add_argument("--no-numeric", action="store_true", help="skip numeric cross-checks")
    verify.add_argument("--timings", action="store_true", help="keep timestamps and elapsed times")

    hierarchy = sub.add_parser("hierarchy", help="print a member of a hierarchy")
    hierarchy.add_argument("--eq", required=True)
    hierarchy.add_argument("--order", type=int, required=True)
    hierarchy.add_argument("--format", choices=("dsl", "json", "latex"), default="dsl")
    hierarchy.add_argument(
        "--nonlocal", dest="allow_nonlocal", action="store_true", help="allow unresolved integrals"
    )

    derive = sub.add_parser("derive", help="transport a recursion operator along a link")
    derive.add_argument("--link", required=True)
    derive.add_argument("--timings", action="store_true")

    numcheck = sub.add_parser("numcheck", help="numeric residuals on random matrix fields")
    numcheck.add_argument("--identity", required=True)
    numcheck.add_argument("--dim", type=int)
    numcheck.add_argument("--grid", type=int)
    numcheck.add_argument("--seeds", type=int)
    numcheck.add_argument("--tol", type=float)
    numcheck.add_argument("--csv", help="also write the residual samples here")
    numcheck.add_argument(
        "--amplitudes", type=float, nargs="+", help="fit the residual scaling over these amplitudes"
    )
    numcheck.add_argument("--timings", action="store_true")

    sub.add_parser("format", help="print the loaded chart script in normalized form")
    return parser


def _bundle(reports: list[VerificationReport], **extra) -> ReportBundle:
    return ReportBundle(catalog_version=get_settings().catalog_version, reports=reports, **extra)


def _emit(bundle: ReportBundle, fmt: str = "json", timings: bool = False) -> int:
    """Write the bundle on stdout and the failure list on stderr."""
    if fmt == "latex":
        sys.stdout.write(latex_report_table(bundle))
    else:
        exclude = None if timings else {"created_at": True, "reports": {"__all__": {"elapsed"}}}
        sys.stdout.write(bundle.model_dump_json(indent=2, exclude=exclude) + "\n")
    if bundle.all_passed:
        return EXIT_OK
    failures = [{"identity": r.identity, "status": r.status} for r in bundle.failures]
    sys.stderr.write(json.dumps({"failures": failures}) + "\n")
    return EXIT_FAILED


def cmd_verify(service: ChartService, args: argparse.Namespace) -> int:
    numeric = not args.no_numeric
    if args.all:
        reports = service.full_suite(include_numeric=numeric, max_workers=args.workers)
    else:
        checks = [service.check_named(name, include_numeric=numeric) for name in args.identity]
        reports = service.run(checks, args.workers)
    return _emit(_bundle(reports), args.format, args.timings)


def cmd_hierarchy(service: ChartService, args: argparse.Namespace) -> int:
    flow = service.hierarchy.flow(args.eq, args.order, allow_nonlocal=args.allow_nonlocal)
    if args.format == "dsl":
        sys.stdout.write(f"{flow.equation.unknown.name}_t{args.order} = {flow.rhs}\n")
        return EXIT_OK
    if args.format == "latex":
        sys.stdout.write(latex_expression(flow.rhs) + "\n")
        return EXIT_OK
    record = FlowRecord(
        equation=flow.equation.name,
        order=flow.order,
        rhs=str(flow.rhs),
        terms=len(flow.rhs.terms),
        local=flow.local,
        latex=latex_expression(flow.rhs),
        rhs_json=expression_to_json(flow.rhs),
    )
    sys.stdout.write(record.model_dump_json(indent=2) + "\n")
    return EXIT_OK


def cmd_format(service: ChartService, args: argparse.Namespace) -> int:
    sys.stdout.write(format_script(service.catalog.script))
    return EXIT_OK


def cmd_derive(service: ChartService, args: argparse.Namespace) -> int:
    link = service.catalog.link(args.link)
    report = service.recursion_report(link)
    return _emit(_bundle([report]), timings=args.timings)


def cmd_numcheck(service: ChartService, args: argparse.Namespace) -> int:
    settings = service.settings
    identity = args.identity
    seeds = list(range(args.seeds or settings.default_seeds))
    tolerance = args.tol
    if tolerance is None:
        tolerance = (
            settings.hereditary_tolerance if identity == "hereditary-symmetry" else settings.numeric_tolerance
        )

    records = service.numeric.batch(identity, seeds, args.dim, args.grid)
    if args.csv:
        export_residuals_csv(records, args.csv)
        logger.info(f"Wrote {len(records)} residuals to {args.csv}")

    reports = [
        VerificationReport(
            identity=f"numeric:{identity}[{r.seed}]",
            kind=CheckKind.NUMERIC,
            status=CheckStatus.PASS if r.residual <= tolerance else CheckStatus.FAIL,
            residual=r.residual,
            gauge=r.gauge,
            details={"dim": r.dim, "grid_points": r.grid_points},
        )
        for r in records
    ]

    if args.amplitudes:
        fit = service.numeric.scaling(identity, args.amplitudes, seeds[0], args.dim, args.grid)
        if fit.slope is None:
            message = "defect vanishes at every amplitude"
        elif fit.expected is None:
            message = f"residual ~ amplitude^{fit.slope:.2f}, no expected order"
        else:
            message = f"residual ~ amplitude^{fit.slope:.2f}, expected {fit.expected}"
        reports.append(
            VerificationReport(
                identity=f"numeric:{identity}:scaling",
                kind=CheckKind.NUMERIC,
                status=CheckStatus.PASS if fit.passed else CheckStatus.FAIL,
                witness=None if fit.passed else f"slope {fit.slope:.4f}",
                message=message,
                details={
                    "amplitudes": list(fit.amplitudes),
                    "residuals": list(fit.residuals),
                    "slope": fit.slope,
                    "expected": fit.expected,
                    "band": fit.band,
                },
            )
        )

    bundle = _bundle(reports, seeds=seeds, tolerances={identity: tolerance})
    return _emit(bundle, timings=args.timings)


COMMANDS = {
    "verify": cmd_verify,
    "hierarchy": cmd_hierarchy,
    "derive": cmd_derive,
    "numcheck": cmd_numcheck,
    "format": cmd_format,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    settings = get_settings()
    if args.profile:
        settings.assumption_profile = args.profile
    configure_logging(args.log_level, args.log_format)

    try:
        service = ChartService.load(args.catalog)
        return COMMANDS[args.command](service, args)
    except NcChartError as e:
        logger.error(f"{type(e).__name__}: {str(e)}")
        sys.stderr.write(json.dumps({"error": type(e).__name__, "message": str(e)}) + "\n")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
