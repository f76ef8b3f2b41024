"""Command line entry point: ``truncmeta <subcommand> ...``.

Exit status is 0 on success, 1 for usage errors and 2 for bad data.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .imputation import DEFAULT_D, Method, truncated_moments
from .inference import build_null, meta_analyze_matrix
from .ingest import (
    DataError,
    ingest_csv,
    ingest_de_lists,
    read_full_pvalues,
    read_schema_config,
    read_threshold_config,
)
from .model import Schema, Transform
from .simharness import SimConfig, mc_null_oracle, run_d_robustness, run_power_study, run_type1_study, sup_distance
from .numerics import make_rng
from .store import StoreError, TruncatedStore, is_store_file, read_store, truncate_matrix, write_store

log = logging.getLogger("truncmeta")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
VALIDATE_TOLERANCE = {"mean": 0.005, "single": 0.005, "complete": 0.005, "available": 0.005, "multiple": 0.01}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _write_rows(rows: list[dict], out: str | None) -> None:
    buf = io.StringIO()
    if rows:
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(v) for k, v in row.items()})
    if out is None or out == "-":
        sys.stdout.write(buf.getvalue())
    else:
        Path(out).write_text(buf.getvalue(), encoding="utf-8")


def _id_sort_key(ids: Sequence[str]):
    if all(i.isdigit() for i in ids):
        return lambda i: (int(i), i)
    return lambda i: i


def _parse_de_list(text: str) -> tuple[str, str, float]:
    name, sep, rest = text.partition("=")
    path, sep2, alpha = rest.rpartition(":")
    if not (sep and sep2 and name and path):
        raise UsageError(f"--de-list expects NAME=PATH:ALPHA, got {text!r}")
    try:
        return name, path, float(alpha)
    except ValueError:
        raise UsageError(f"--de-list threshold {alpha!r} is not a number") from None


# ---------------------------------------------------------------------------
# subcommands

def cmd_combine(args) -> int:
    if args.d is not None and args.method != "multiple":
        raise UsageError("--d only applies to --method multiple")
    if args.de_list and not args.universe:
        raise UsageError("--de-list needs --universe")
    if args.input is None and not args.de_list:
        raise UsageError("give --input, or --universe with --de-list")
    matrix = None
    if args.input is not None:
        if is_store_file(args.input):
            matrix = read_store(args.input).to_matrix()
            if args.schema:
                declared = tuple(read_schema_config(args.schema).values())
                if declared != matrix.schema.thresholds:
                    raise DataError(f"{args.schema}: schema does not match the store's study descriptors")
        else:
            if not args.schema:
                raise UsageError("CSV input needs --schema")
            matrix = ingest_csv(args.input, args.schema)
    if args.de_list:
        matrix = ingest_de_lists(args.universe, [_parse_de_list(t) for t in args.de_list], matrix)
    d = DEFAULT_D if args.d is None else args.d
    results = meta_analyze_matrix(matrix, args.method, args.transform, d=d, seed=args.seed)
    key = _id_sort_key([r.feature_id for r in results])
    rows = []
    for r in sorted(results, key=lambda r: key(r.feature_id)):
        q = r.q_bh if args.fdr == "bh" else r.q_by
        rows.append(dict(feature_id=r.feature_id, method=r.method, transform=args.transform,
                         statistic=r.statistic, p_meta=r.p_meta, q_bh=r.q_bh, q_by=r.q_by,
                         discovery=int(q <= args.level)))
    _write_rows(rows, args.out)
    n_disc = sum(row["discovery"] for row in rows)
    print(f"{len(rows)} features, K={matrix.schema.k} (K1={matrix.schema.k1}, K2={matrix.schema.k2}); "
          f"{n_disc} discoveries at {args.fdr.upper()} {args.level}", file=sys.stderr)
    return EXIT_OK


def cmd_simulate(args) -> int:
    overrides = {k: v for k, v in (("reps", args.reps), ("seed", args.seed)) if v is not None}
    if args.config:
        config = SimConfig.from_file(args.config, **overrides)
    elif args.full_scale:
        config = SimConfig.full_scale(**overrides)
    else:
        config = SimConfig(**overrides)
    if args.study == "type1":
        rows = run_type1_study(config)
    elif args.study == "power":
        rows = run_power_study(config)
    else:
        d_values = [int(x) for x in args.d_values.split(",")] if args.d_values else (20, 30, 50, 100, 150, 200)
        rows = run_d_robustness(config, d_values)
    _write_rows(rows, args.out)
    if args.out not in (None, "-"):
        for row in rows:
            print("  ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
    return EXIT_OK


def cmd_truncate(args) -> int:
    studies, ids, p = read_full_pvalues(args.input)
    chosen = read_threshold_config(args.thresholds)
    unknown = [s for s in chosen if s not in studies]
    if unknown:
        raise DataError(f"{args.thresholds}: studies {unknown} are not columns of {args.input}")
    thresholds = [chosen.get(s) for s in studies]
    if args.renumber:
        numeric = list(range(len(ids)))
        id_map = Path(str(args.out) + ".ids.csv")
        _write_rows([dict(store_id=i, feature_id=f) for i, f in zip(numeric, ids)], str(id_map))
    else:
        bad = next((f for f in ids if not (f.isdigit() and int(f) < 2**64)), None)
        if bad is not None:
            raise DataError(f"{args.input}: feature id {bad!r} is not an unsigned 64-bit integer; use --renumber")
        numeric = [int(f) for f in ids]
    store, report = truncate_matrix(p, thresholds, numeric)
    write_store(store, args.out)
    print(f"{len(store)} records, K={store.schema.k} (K2={store.schema.k2}); {report.summary()}")
    return EXIT_OK


def cmd_validate(args) -> int:
    thresholds = [float(x) for x in args.thresholds.split(",")] if args.thresholds else []
    schema = Schema(tuple([None] * args.k1 + thresholds))
    if args.d is not None and args.method != "multiple":
        raise UsageError("--d only applies to --method multiple")
    d = DEFAULT_D if args.d is None else args.d
    method, transform = Method(args.method), Transform(args.transform)
    null = build_null(method, transform, schema.thresholds, d)
    oracle = mc_null_oracle(method, transform, args.k1, schema.groups(), d=d,
                            n_draws=args.draws, rng=make_rng(args.seed))
    dist = sup_distance(oracle, null)
    tol = VALIDATE_TOLERANCE[args.method]
    verdict = "PASS" if dist < tol else "FAIL"
    print(f"method={args.method} transform={args.transform} K1={args.k1} thresholds={thresholds} "
          f"draws={args.draws}")
    print(f"sup_distance={dist:.6f} tolerance={tol} {verdict}")
    return EXIT_OK


def cmd_moments(args) -> int:
    m = truncated_moments(Transform(args.transform), args.alpha)
    digits = args.digits
    for name, value in (("mu_W", m.mu_w), ("sigma2_W", m.var_w), ("mu_V", m.mu_v), ("sigma2_V", m.var_v)):
        print(f"{name}={value:.{digits}f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="truncmeta", description="Combine p-values when some studies report only p < alpha.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    methods = [m.value for m in Method]
    transforms = [t.value for t in Transform]

    p = sub.add_parser("combine", help="meta-analyse every feature of a matrix")
    p.add_argument("--input", help="CSV matrix or binary store")
    p.add_argument("--schema", help="study modes: 'name = observed' or 'name = censored:alpha'")
    p.add_argument("--universe", help="feature universe for --de-list studies, one id per line")
    p.add_argument("--de-list", action="append", default=[], metavar="NAME=PATH:ALPHA",
                   help="add a censored study from a list of significant ids (repeatable)")
    p.add_argument("--method", required=True, choices=methods)
    p.add_argument("--transform", required=True, choices=transforms)
    p.add_argument("--d", type=int, help=f"imputations for multiple imputation (default {DEFAULT_D})")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fdr", choices=["bh", "by"], default="bh")
    p.add_argument("--level", type=float, default=0.05, help="FDR level for the discovery column")
    p.add_argument("--out", help="output CSV (stdout if omitted)")
    p.set_defaults(func=cmd_combine)

    p = sub.add_parser("simulate", help="run a simulation study")
    p.add_argument("--config", help="key = value file of simulation settings")
    p.add_argument("--full-scale", action="store_true", help="use the full-size design")
    p.add_argument("--study", required=True, choices=["type1", "power", "drobust"])
    p.add_argument("--reps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--d-values", help="comma-separated D grid for drobust")
    p.add_argument("--out", help="output CSV (stdout if omitted)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("truncate", help="write a truncated binary store from complete p-values")
    p.add_argument("--input", required=True, help="CSV of complete p-values")
    p.add_argument("--thresholds", required=True, help="'study = alpha' lines; unlisted studies stay whole")
    p.add_argument("--out", required=True)
    p.add_argument("--renumber", action="store_true",
                   help="store row numbers as ids and write the mapping to OUT.ids.csv")
    p.set_defaults(func=cmd_truncate)

    p = sub.add_parser("validate", help="compare an analytic null CDF with Monte Carlo")
    p.add_argument("--method", required=True, choices=methods)
    p.add_argument("--transform", required=True, choices=transforms)
    p.add_argument("--k1", type=int, default=0)
    p.add_argument("--thresholds", default="", help="comma-separated censoring thresholds")
    p.add_argument("--d", type=int)
    p.add_argument("--draws", type=int, default=10**6)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("moments", help="print the truncated-interval moments")
    p.add_argument("--transform", required=True, choices=transforms)
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--digits", type=int, default=6)
    p.set_defaults(func=cmd_moments)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"truncmeta: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, StoreError, ValueError, OSError) as exc:
        print(f"truncmeta: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
