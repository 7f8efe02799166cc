"""``twas`` command line: compute-ld, train, assoc, adjust, simulate, report.

Exit codes: 0 success, 1 usage error, 2 data error. Option values resolve
as command-line flag, then ``--config`` file (key=value), then the
TWAS_THREADS / TWAS_SEED environment variables, then built-in defaults.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import assoc, ingest, ld, mtp, report, sim, train

log = logging.getLogger("twas")

DEFAULTS = {
    "seed": 0,
    "threads": 1,
    "alpha": 0.05,
    "m": "auto",
    "method": "both",
    "per_tissue": True,
    "ld_shrink": ld.DEFAULT_LD_SHRINK,
    "folds": train.DEFAULT_FOLDS,
    "min_r2": train.DEFAULT_MIN_R2,
    "cis_window": train.DEFAULT_CIS_WINDOW,
    "replicates": 200,
    "scenarios": sim.LABELS,
    "threshold_m": mtp.GENOME_WIDE_M,
    "genes": 12,
}
CONVERTERS = {
    "seed": int, "threads": int, "alpha": float, "ld_shrink": float, "folds": int,
    "min_r2": float, "cis_window": int, "replicates": int, "threshold_m": int, "genes": int,
    "per_tissue": lambda v: str(v).lower() in ("1", "true", "yes"),
}
ENVIRONMENT = {"threads": "TWAS_THREADS", "seed": "TWAS_SEED"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _shared(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--out", required=out_required, help="output path, '-' for stdout")
    p.add_argument("--seed", type=int, help="RNG seed (env TWAS_SEED)")
    p.add_argument("--threads", type=int, help="worker threads (env TWAS_THREADS)")
    p.add_argument("--config", help="key=value file supplying option defaults")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="twas", description="Summary-statistics TWAS pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compute-ld", help="LD matrix from a reference genotype panel")
    p.add_argument("--genotypes", required=True)
    p.add_argument("--snp-info")
    _shared(p)

    p = sub.add_parser("train", help="cross-validated expression weights per gene")
    p.add_argument("--genotypes", required=True)
    p.add_argument("--snp-info", required=True)
    p.add_argument("--expression", required=True)
    p.add_argument("--log", help="training log TSV")
    p.add_argument("--folds", type=int)
    p.add_argument("--min-r2", type=float)
    p.add_argument("--cis-window", type=int, help="bp either side of the TSS")
    p.add_argument("--ld-shrink", type=float)
    _shared(p)

    p = sub.add_parser("assoc", help="gene-level TWAS z-scores")
    p.add_argument("--gwas", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--ld", required=True, help="LD TSV from compute-ld")
    p.add_argument("--ld-shrink", type=float)
    _shared(p)

    p = sub.add_parser("adjust", help="Bonferroni / Benjamini-Hochberg flags")
    p.add_argument("--results", required=True)
    p.add_argument("--method", choices=("bonferroni", "bh", "both"))
    p.add_argument("--alpha", type=float)
    p.add_argument("--m", help="'auto' or a fixed number of tests")
    p.add_argument("--per-tissue", action=argparse.BooleanOptionalAction, default=None)
    _shared(p)

    p = sub.add_parser("simulate", help="scenario suite, or a synthetic dataset")
    p.add_argument("--scenarios", help="scenario letters, e.g. ABCDEFGH")
    p.add_argument("--replicates", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--ld-shrink", type=float)
    p.add_argument("--dataset", help="write a multi-gene dataset to this directory instead")
    p.add_argument("--genes", type=int, help="genes in --dataset mode")
    _shared(p, out_required=False)

    p = sub.add_parser("report", help="sorted table, plot data, gene counts")
    p.add_argument("--results", required=True)
    p.add_argument("--plot-data")
    p.add_argument("--svg")
    p.add_argument("--alpha", type=float)
    p.add_argument("--threshold-m", type=int, help="m for the Bonferroni line")
    p.add_argument("--count", action="store_true",
                   help="print the number of distinct rejected genes")
    _shared(p, out_required=False)
    return parser


def _resolve(args: argparse.Namespace) -> argparse.Namespace:
    config = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise FileNotFoundError(f"--config: no such file {path}")
        config = {k.replace("-", "_"): v for k, v in
                  sim.parse_config(path.read_text(encoding="utf-8")).items()}
    args.scenario_config = config
    for key, default in DEFAULTS.items():
        if not hasattr(args, key) or getattr(args, key) is not None:
            continue
        if key in config:
            value = CONVERTERS.get(key, str)(config[key])
        elif key in ENVIRONMENT and os.environ.get(ENVIRONMENT[key]):
            value = int(os.environ[ENVIRONMENT[key]])
        else:
            value = default
        setattr(args, key, value)
    return args


def _require_files(*pairs) -> None:
    for flag, path in pairs:
        if path is not None and not Path(path).is_file():
            raise FileNotFoundError(f"{flag}: no such file {path}")


def _cmd_compute_ld(args) -> None:
    _require_files(("--genotypes", args.genotypes), ("--snp-info", args.snp_info))
    panel = ingest.parse_genotypes(args.genotypes, args.snp_info)
    std = ld.standardize_columns(panel)
    if std.excluded:
        log.warning("excluded %d zero-variance SNPs: %s", len(std.excluded),
                    ", ".join(std.excluded[:10]))
    ld.write_ld(ld.estimate_ld(std), args.out)


def _cmd_train(args) -> None:
    _require_files(("--genotypes", args.genotypes), ("--snp-info", args.snp_info),
                   ("--expression", args.expression))
    panel = ingest.parse_genotypes(args.genotypes, args.snp_info)
    samples, rows = ingest.parse_expression(args.expression)
    outcomes = train.train_panel(panel, samples, rows, k=args.folds, seed=args.seed,
                                 min_r2=args.min_r2, window=args.cis_window,
                                 lambda_ld=args.ld_shrink, threads=args.threads)
    kept = [o.result for o in outcomes if isinstance(o.result, ingest.GeneWeightSet)]
    for o in outcomes:
        if isinstance(o.result, train.Skipped):
            log.info("skipped %s/%s: %s", o.gene, o.tissue, o.result.reason)
    log.info("trained %d of %d gene-tissue pairs", len(kept), len(outcomes))
    ingest.write_weight_panel(kept, args.out)
    if args.log:
        lines = ["\t".join(train.LOG_COLUMNS)]
        lines += ["\t".join(r) for o in outcomes for r in o.log_rows()]
        ingest.emit("\n".join(lines) + "\n", args.log)


def _cmd_assoc(args) -> None:
    _require_files(("--gwas", args.gwas), ("--weights", args.weights), ("--ld", args.ld))
    gwas = ingest.parse_gwas(args.gwas)
    panel = ingest.parse_weight_panel(args.weights)
    ref = ld.shrink_ld(ld.read_ld(args.ld), args.ld_shrink)
    results = assoc.run_panel(panel, gwas, ref, threads=args.threads)
    counts = {}
    for r in results:
        counts[r.status] = counts.get(r.status, 0) + 1
    log.info("statuses: %s", counts)
    report.write_results_table(results, args.out)


def _cmd_adjust(args) -> None:
    _require_files(("--results", args.results))
    m = args.m
    if m != "auto":
        try:
            m = int(m)
        except ValueError:
            raise UsageError(f"--m must be 'auto' or an integer, got {m!r}") from None
    methods = (mtp.BONFERRONI, mtp.BH) if args.method == "both" else (args.method,)
    results = report.read_results_table(args.results)
    adjusted = mtp.adjust_per_tissue(results, methods, args.alpha, m, args.per_tissue)
    report.write_results_table(adjusted, args.out)


def _cmd_simulate(args) -> None:
    if args.dataset:
        paths = sim.write_dataset(args.dataset, n_genes=args.genes, seed=args.seed)
        for role, path in paths.items():
            log.info("%s: %s", role, path)
        return
    if not args.out:
        raise UsageError("simulate: --out is required unless --dataset is given")
    labels = [c for c in args.scenarios.upper() if c.strip() and c != ","]
    config = {k: v for k, v in args.scenario_config.items()
              if k not in ("threads", "out", "genes", "per_tissue", "m", "method",
                           "ld_shrink")}
    config["seed"] = str(args.seed)
    specs = [sim.spec_from_config(config, label) for label in labels]
    suite = sim.run_suite(specs, args.replicates, args.alpha, threads=args.threads,
                          lambda_ld=args.ld_shrink)
    sim.write_suite(suite, args.out)


def _cmd_report(args) -> None:
    _require_files(("--results", args.results))
    results = report.read_results_table(args.results)
    if args.out:
        report.write_results_table(results, args.out)
    if args.plot_data or args.svg:
        if args.plot_data:
            ingest.emit(report.position_plot_text(results, args.alpha, args.threshold_m),
                        args.plot_data)
        if args.svg:
            ingest.emit(report.position_svg(results, args.alpha, args.threshold_m), args.svg)
    if args.count:
        sys.stdout.write(f"{report.unique_gene_count(results, rejected_only=True)}\n")


COMMANDS = {
    "compute-ld": _cmd_compute_ld,
    "train": _cmd_train,
    "assoc": _cmd_assoc,
    "adjust": _cmd_adjust,
    "simulate": _cmd_simulate,
    "report": _cmd_report,
}


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(str(exc))
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="twas %(levelname)s: %(message)s", stream=sys.stderr)
    try:
        _resolve(args)
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        COMMANDS[args.command](args)
    except UsageError as exc:
        sys.stderr.write(f"twas {args.command}: error: {exc}\n")
        return 1
    except (ValueError, OSError, KeyError, RuntimeError, np.linalg.LinAlgError) as exc:
        sys.stderr.write(f"twas {args.command}: data error: {exc}\n")
        return 2
    return 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
