"""
Командная строка: analyze, posterior, simulate, scan.

Пример использования:
```
snl analyze data/step_gag84.csv --target 2 --replacement-only \
    --methods lrt-2phase,perm-lrt,fisher --B 1000 --seed 7 --out out/step
snl posterior data/rv144_env169.csv --target 1 --grid 101 --out out/rv144
snl simulate --builtin --replicates 100 --seed 1 --roc --ps 0.15 --out out/grid
snl scan data/rv144_env169.csv --candidates "1" --out out/scan
```
"""

import argparse
import logging
import sys
from datetime import datetime, timezone
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path
from typing import List, Optional

from pydantic import ValidationError as PydanticValidationError

from .analyzer import ANALYSIS_METHODS, SieveAnalyzer
from .exceptions import EXIT_INPUT_ERROR, EXIT_OK, SieveError, exit_code_for
from .io import (
    load_scenarios,
    read_external_decisions,
    read_failure_table,
    write_decision_log,
    write_grid_csv,
    write_json,
    write_null_draws_csv,
    write_posterior_csv,
    write_roc_csv,
    write_scan_csv,
)
from .methods import METHODS
from .models import (
    EmptyCellRule,
    FitSettings,
    PermutationScheme,
    PriorSpec,
    RunManifest,
    RunnerSettings,
    TargetSpec,
)
from .simulation import builtin_scenarios, roc_panels, roc_report, run_grid
from .utils import setup_logging

logger = logging.getLogger(__name__)

DEFAULT_GRID_METHODS = "1phase,2phase,Fisher,BF1ph,BF2ph,MBS-BF"


def tool_version() -> str:
    """Версия установленного пакета."""
    try:
        return version("snl-sieve")
    except PackageNotFoundError:
        from . import __version__

        return __version__


# ==================== ARGUMENT TYPES ====================


def _index_list(text: str) -> List[int]:
    try:
        values = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated indices, got '{text}'")
    if not values:
        raise argparse.ArgumentTypeError("empty index list")
    return values


def _name_list(text: str) -> List[str]:
    return [part.strip() for part in text.split(",") if part.strip()]


def _float_list(text: str) -> List[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got '{text}'")


def _candidate_sets(text: str) -> List[List[int]]:
    return [_index_list(group) for group in text.split(";") if group.strip()]


# ==================== PARSER ====================


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="snl",
        description="Categorical sieve analysis of two-arm prevention trials.",
    )
    parser.add_argument(
        "--log-level",
        type=str.upper,
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        default="INFO",
        help="Logging level (default: INFO)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="Master seed")
    common.add_argument("--n-mc", type=int, default=1000, help="Monte Carlo draws")
    common.add_argument("--out", type=Path, default=Path("out"), help="Output directory")

    table_args = argparse.ArgumentParser(add_help=False)
    table_args.add_argument("table", type=Path, help="Failure table CSV (arm,cat0..catJ)")
    table_args.add_argument("--labels", type=Path, default=None, help="Category label JSON")
    table_args.add_argument(
        "--replacement-only", action="store_true", help="Fix the intervention efficacy at zero"
    )

    analyze = sub.add_parser("analyze", parents=[common, table_args], help="Test one table for a sieve effect")
    analyze.add_argument("--target", type=_index_list, required=True, help="Targeted types, e.g. 2 or 1,3")
    analyze.add_argument(
        "--methods",
        type=_name_list,
        default=list(ANALYSIS_METHODS),
        help=f"Comma-separated subset of {','.join(ANALYSIS_METHODS)}",
    )
    analyze.add_argument("--B", type=int, default=1000, help="Permutations for perm-lrt")
    analyze.add_argument(
        "--permute",
        choices=[s.value for s in PermutationScheme],
        default=PermutationScheme.FAILURES.value,
        help="What perm-lrt permutes: all subjects or failures only",
    )
    analyze.add_argument(
        "--empty-cells",
        choices=[r.value for r in EmptyCellRule],
        default=EmptyCellRule.VANISHING.value,
        help="Pseudocount rule when a placebo failure cell is empty",
    )
    analyze.add_argument(
        "--consistent-take",
        action="store_true",
        help="Plug-in p_t from the plug-in p_s and I_E",
    )

    posterior = sub.add_parser("posterior", parents=[common, table_args], help="Posterior curve of p_s")
    posterior.add_argument("--target", type=_index_list, required=True)
    posterior.add_argument("--grid", type=int, default=101, help="Number of grid points")
    posterior.add_argument("--fixed-ie", type=float, default=None, help="Fix I_E instead of the plug-in")

    simulate = sub.add_parser("simulate", parents=[common], help="Rejection-rate grid over scenarios")
    source = simulate.add_mutually_exclusive_group(required=True)
    source.add_argument("--builtin", action="store_true", help="Use the built-in study scenarios")
    source.add_argument("--config", type=Path, help="Scenario JSON (object or list)")
    simulate.add_argument("--replicates", type=int, default=None)
    simulate.add_argument(
        "--methods",
        type=_name_list,
        default=_name_list(DEFAULT_GRID_METHODS),
        help=f"Comma-separated subset of {','.join(METHODS)}",
    )
    simulate.add_argument("--B", type=int, default=100, help="Permutations for the -perm methods")
    simulate.add_argument("--alpha", type=float, default=0.05)
    simulate.add_argument("--workers", type=int, default=None, help="Worker processes")
    simulate.add_argument("--roc", action="store_true", help="Emit AUC per ROC panel")
    simulate.add_argument("--ps", type=float, default=0.15, help="p_s of the ROC effect scenarios")
    simulate.add_argument("--external", type=Path, default=None, help="External decisions CSV")
    simulate.add_argument("--external-name", default="GWJ")

    scan = sub.add_parser("scan", parents=[common, table_args], help="Posterior over target sets")
    scan.add_argument(
        "--candidates", type=_candidate_sets, default=None, help="Target sets, e.g. '1;2;1,3'"
    )
    scan.add_argument("--prior-odds", type=_float_list, default=None, help="Prior model weights")
    scan.add_argument("--no-null", action="store_true", help="Leave out the all-or-none model")
    return parser


# ==================== COMMANDS ====================


def _manifest(args, inputs: List[Path], config: dict, started_at: datetime) -> RunManifest:
    return RunManifest(
        command=args.command,
        inputs=[str(p) for p in inputs],
        config=config,
        seed=args.seed,
        tool_version=tool_version(),
        started_at=started_at,
    )


def _finish(manifest: RunManifest, out: Path, outputs: List[Path]) -> None:
    path = out / f"{manifest.command}_manifest.json"
    done = manifest.model_copy(
        update={
            "finished_at": datetime.now(timezone.utc),
            "outputs": [str(p) for p in outputs] + [str(path)],
        }
    )
    write_json(done, path)


def cmd_analyze(args) -> int:
    started_at = datetime.now(timezone.utc)
    table = read_failure_table(args.table, args.labels)
    target = TargetSpec.of(args.target, table.J)
    analyzer = SieveAnalyzer(
        fit_settings=FitSettings(empty_cells=EmptyCellRule(args.empty_cells)),
        priors=PriorSpec(empty_cells=EmptyCellRule(args.empty_cells)),
        n_mc=args.n_mc,
        B=args.B,
        seed=args.seed,
        permutation_scheme=PermutationScheme(args.permute),
        consistent_take=args.consistent_take,
    )
    report = analyzer.analyze(table, target, args.methods, replacement_only=args.replacement_only)

    args.out.mkdir(parents=True, exist_ok=True)
    outputs = [write_json(report, args.out / "analysis.json")]
    if "perm-lrt" in report.results:
        outputs.append(write_null_draws_csv(report.results["perm-lrt"], args.out / "perm_lrt_null.csv"))

    for name, result in report.results.items():
        parts = [f"statistic={result.statistic:.6g}"]
        if result.p_value is not None:
            parts.append(f"p={result.p_value:.4g}")
        if result.log10_bayes_factor is not None:
            parts.append(f"log10 BF={result.log10_bayes_factor:.4g}")
        print(f"{name}: {', '.join(parts)}")
    for name, message in report.errors.items():
        print(f"{name}: error: {message}")

    config = {
        "targets": target.targets,
        "methods": args.methods,
        "replacement_only": args.replacement_only,
        "B": args.B,
        "permute": args.permute,
        "consistent_take": args.consistent_take,
        "n_mc": args.n_mc,
        "fit": analyzer.fit_settings.model_dump(mode="json"),
        "priors": analyzer.priors.model_dump(mode="json"),
    }
    _finish(_manifest(args, [args.table], config, started_at), args.out, outputs)
    return EXIT_OK


def cmd_posterior(args) -> int:
    started_at = datetime.now(timezone.utc)
    table = read_failure_table(args.table, args.labels)
    target = TargetSpec.of(args.target, table.J)
    analyzer = SieveAnalyzer(n_mc=args.n_mc, seed=args.seed)
    curve = analyzer.posterior(
        table, target, grid=args.grid, replacement_only=args.replacement_only, fixed_I_E=args.fixed_ie
    )

    args.out.mkdir(parents=True, exist_ok=True)
    outputs = [
        write_posterior_csv(curve, args.out / "posterior.csv"),
        write_json(curve, args.out / "posterior.json"),
    ]
    print(f"argmax p_s = {curve.argmax:.4g} (I_E = {curve.I_E:.4g})")

    config = {
        "targets": target.targets,
        "grid": args.grid,
        "n_mc": args.n_mc,
        "replacement_only": args.replacement_only,
        "fixed_I_E": args.fixed_ie,
        "priors": analyzer.priors.model_dump(mode="json"),
    }
    _finish(_manifest(args, [args.table], config, started_at), args.out, outputs)
    return EXIT_OK


def cmd_simulate(args) -> int:
    started_at = datetime.now(timezone.utc)
    if args.builtin:
        scenarios = builtin_scenarios(replicates=args.replicates or 1000, seed=args.seed)
        inputs: List[Path] = []
    else:
        scenarios = load_scenarios(args.config)
        inputs = [args.config]
    external = read_external_decisions(args.external) if args.external else None

    settings = RunnerSettings(
        alpha=args.alpha,
        n_mc=args.n_mc,
        n_permutations=args.B,
        max_workers=args.workers,
        fit=FitSettings(empty_cells=EmptyCellRule.LAPLACE),
        priors=PriorSpec(empty_cells=EmptyCellRule.LAPLACE),
    )
    report = run_grid(scenarios, args.methods, args.replicates, args.seed, settings, args.workers)
    if external is not None:
        report = report.with_external_column(args.external_name, external)
        inputs.append(args.external)

    args.out.mkdir(parents=True, exist_ok=True)
    outputs = [
        write_grid_csv(report, args.out / "grid.csv"),
        write_decision_log(report, args.out / "scores.csv"),
        write_json(report, args.out / "grid.json"),
    ]
    if args.roc:
        positives, negatives = roc_panels(scenarios, args.ps)
        entries = roc_report(report, positives, negatives)
        if not entries:
            logger.warning("No Bayesian methods in the grid; ROC table is empty")
        outputs.append(write_roc_csv(entries, args.out / "roc.csv"))
        for e in entries:
            print(f"AUC {e.method}: {e.positive} vs {e.negative} = {e.auc:.3f}")

    for row, rates in zip(report.rows, report.rejection_rate):
        print(f"{row}: " + ", ".join(f"{c}={r:.3f}" for c, r in zip(report.cols, rates)))

    config = {
        "scenarios": [s.model_dump(mode="json") for s in scenarios],
        "methods": args.methods,
        "replicates": args.replicates,
        "runner": settings.model_dump(mode="json"),
        "roc": args.roc,
        "roc_p_s": args.ps,
    }
    _finish(_manifest(args, inputs, config, started_at), args.out, outputs)
    return EXIT_OK


def cmd_scan(args) -> int:
    started_at = datetime.now(timezone.utc)
    table = read_failure_table(args.table, args.labels)
    candidates = (
        [TargetSpec.of(c, table.J) for c in args.candidates] if args.candidates is not None else None
    )
    analyzer = SieveAnalyzer(n_mc=args.n_mc, seed=args.seed)
    result = analyzer.scan(
        table,
        candidates,
        args.prior_odds,
        replacement_only=args.replacement_only,
        include_null=not args.no_null,
    )

    args.out.mkdir(parents=True, exist_ok=True)
    outputs = [
        write_scan_csv(result, args.out / "scan.csv"),
        write_json(result, args.out / "scan.json"),
    ]
    for e in result.entries:
        print(f"{e.label}: posterior={e.posterior:.4g}" + (f" ({e.error})" if e.error else ""))

    config = {
        "candidates": args.candidates,
        "prior_odds": args.prior_odds,
        "include_null": not args.no_null,
        "n_mc": args.n_mc,
        "replacement_only": args.replacement_only,
        "priors": analyzer.priors.model_dump(mode="json"),
    }
    _finish(_manifest(args, [args.table], config, started_at), args.out, outputs)
    return EXIT_OK


COMMANDS = {
    "analyze": cmd_analyze,
    "posterior": cmd_posterior,
    "simulate": cmd_simulate,
    "scan": cmd_scan,
}


def main(argv: Optional[List[str]] = None) -> int:
    """
    Точка входа CLI.

    Returns:
        int: Код выхода (0 успех, 2 ошибка входных данных, 3 недопустимая
        модель, 4 нет сходимости)
    """
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_level)

    try:
        return COMMANDS[args.command](args)
    except SieveError as e:
        logger.error(f"{args.command} failed: {e.message}")
        print(f"error: {e.message}", file=sys.stderr)
        return exit_code_for(e)
    except PydanticValidationError as e:
        first = e.errors()[0]
        message = f"{'.'.join(str(p) for p in first['loc'])}: {first['msg']}"
        logger.error(f"{args.command} failed: {message}")
        print(f"error: {message}", file=sys.stderr)
        return EXIT_INPUT_ERROR


if __name__ == "__main__":
    sys.exit(main())
