"""Command-line entry point: ``dilatedrnn {train,eval,analyze,verify-theory,ablate}``.

Exit codes: 0 success, 1 usage or configuration error, 2 verification
failure, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from fractions import Fraction
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigurationError, FormatError, NumericError
from .graph import (
    ArchKind,
    ArchSpec,
    analyze_architecture,
    build_cyclic_graph,
    clockwork_capacity_report,
    digit_path_length,
    mean_recurrent_length_closed_form,
    mean_recurrent_length_oracle,
    path_table,
    receptive_field,
    recurrent_edges_per_node,
    verify_optimality,
)
from .train import RunConfig, ablate, evaluate_checkpoint, load_config, train

EXIT_OK, EXIT_USAGE, EXIT_VERIFY, EXIT_NUMERIC = 0, 1, 2, 3

ARCH_KEYS = {"version", "kind", "layers", "base", "start_exponent", "dilations", "period"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# -- run configuration ------------------------------------------------------

OVERRIDES = (
    "seed",
    "out",
    "task",
    "layers",
    "base",
    "start_exponent",
    "hidden",
    "cell",
    "iterations",
    "T",
    "architecture",
    "init",
)


def _add_run_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="TOML run configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=str, help="output directory")
    p.add_argument("--task", choices=("copy_memory", "pixel_mnist", "noisy_mnist"))
    p.add_argument("--layers", type=int)
    p.add_argument("--base", type=int)
    p.add_argument("--start-exponent", dest="start_exponent", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--cell", choices=("vanilla", "lstm", "gru"))
    p.add_argument("--iterations", type=int)
    p.add_argument("--T", dest="T", type=int, help="copy-memory delay or noisy-MNIST length")
    p.add_argument("--architecture", choices=("dilated", "single", "stacked", "regular_skip"))
    p.add_argument("--init", choices=("standard_normal", "scaled_normal"), help="weight initialisation")


def run_config_from_args(args) -> RunConfig:
    overrides = {k: getattr(args, k) for k in OVERRIDES}
    if args.config is not None:
        return load_config(args.config, **overrides)
    if args.seed is None:
        raise ConfigurationError("--seed is mandatory when no --config is given")
    try:
        return RunConfig(**{k: v for k, v in overrides.items() if v is not None})
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc


def _print_record(record: dict):
    print(json.dumps(record, indent=2, sort_keys=True, default=str))


def cmd_train(args) -> int:
    cfg = run_config_from_args(args)
    res = train(cfg)
    _print_record({"out": str(res.out_dir), "best": res.summary["best"], "final": res.summary["final"]})
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = run_config_from_args(args)
    _print_record(evaluate_checkpoint(args.checkpoint, cfg))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = run_config_from_args(args)
    try:
        values = [int(v) for v in args.values.split(",")]
    except ValueError as exc:
        raise ConfigurationError(f"--values must be comma-separated integers: {exc}") from exc
    rows = ablate(cfg, args.sweep, values)
    for row in rows:
        print(",".join(str(row[k]) for k in row))
    return EXIT_OK


# -- analysis ---------------------------------------------------------------


def parse_arch_spec(text: str, source: str = "<arch>") -> ArchSpec:
    """Parse a TOML architecture description (``version = 1``, ``kind``, ``layers``, ...)."""
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        # tomllib messages end with "(at line L, column C)"
        raise ConfigurationError(f"{source}: parse error: {exc}") from exc
    unknown = sorted(set(data) - ARCH_KEYS)
    if unknown:
        raise ConfigurationError(f"{source}: unknown keys {unknown}")
    if data.get("version") != 1:
        raise ConfigurationError(f"{source}: expected version = 1")
    for key in ("kind", "layers"):
        if key not in data:
            raise ConfigurationError(f"{source}: missing {key!r}")
    try:
        return ArchSpec(
            ArchKind(data["kind"]),
            int(data["layers"]),
            int(data.get("base", 2)),
            int(data.get("start_exponent", 0)),
            tuple(data.get("dilations", ())),
            data.get("period"),
        )
    except ValueError as exc:
        raise ConfigurationError(f"{source}: {exc}") from exc


def cmd_analyze(args) -> int:
    path = Path(args.spec)
    if not path.exists():
        raise ConfigurationError(f"{path}: no such file")
    spec = parse_arch_spec(path.read_text(), str(path))
    report = analyze_architecture(spec)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "analysis.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("n", "max_d"))
        for n, d in report.rows:
            writer.writerow((n, "unreachable" if d is None else d))
    (out / "summary.json").write_text(json.dumps(report.summary, indent=2, sort_keys=True) + "\n")
    _print_record(report.summary)
    return EXIT_OK


# -- theory verification ----------------------------------------------------


class Checks:
    """Collects named pass/fail results and failure details."""

    def __init__(self):
        self.results: list[tuple[str, bool, str]] = []

    def add(self, name: str, ok: bool, detail: str = ""):
        self.results.append((name, bool(ok), detail))
        status = "PASS" if ok else "FAIL"
        print(f"[{status}] {name}" + (f": {detail}" if detail and not ok else ""))

    @property
    def failures(self):
        return [r for r in self.results if not r[1]]


def _fmt(x) -> str:
    return f"{float(x):.6f} ({x})" if isinstance(x, Fraction) else str(x)


def verify_theory(max_d: int = 8, bases=(2, 3), max_m: int = 512, wrong_ranking: bool = False) -> Checks:
    checks = Checks()
    discrepancy_rows = []
    for base in bases:
        for d in range(2, max_d + 1):
            m = base ** (d - 1)
            if m > max_m:
                break
            dil_spec = ArchSpec(ArchKind.DILATED_RNN, d, base)
            g = build_cyclic_graph(dil_spec)
            table = path_table(g)
            bad = [
                (i, n, table.d(i, n))
                for i in range(g.period)
                for n in range(1, m + 1)
                if table.d(i, n) != digit_path_length(n, dil_spec.layer_dilations)
            ]
            checks.add(f"digit-sum path lengths d={d} M={base}", not bad, f"first mismatch (i, n, d) = {bad[:3]}")

            nr = recurrent_edges_per_node(g)
            checks.add(f"recurrent edges per hidden node d={d} M={base}", nr.per_hidden == 1, f"got {nr.per_hidden}")

            oracle = mean_recurrent_length_oracle(g)
            if base == 2:
                closed = mean_recurrent_length_closed_form(dil_spec)
                diff = oracle - closed
                expected = Fraction(d - 1, 2 * m)
                checks.add(f"closed-form discrepancy d={d}", diff == expected, f"{diff} != {expected}")

                skip = ArchSpec(ArchKind.REGULAR_SKIP_RNN, d, base, period=m)
                sg = build_cyclic_graph(skip)
                so = mean_recurrent_length_oracle(sg)
                sc = mean_recurrent_length_closed_form(skip)
                checks.add(f"regular-skip mean length d={d}", so == sc, f"oracle {so} vs closed form {sc}")
                checks.add(
                    f"regular-skip recurrent edges per hidden node d={d}",
                    recurrent_edges_per_node(sg).per_hidden == 2,
                )

                cnn = build_cyclic_graph(ArchSpec(ArchKind.DILATED_CNN, d, base))
                rf = receptive_field(cnn)
                checks.add(f"dilated CNN receptive field d={d}", rf == 2**d, f"got {rf}")
                # informational: the CNN's mean length is smaller, by about half of log2 m
                discrepancy_rows.append((d, m, oracle, closed, diff, oracle - mean_recurrent_length_oracle(cnn)))

                cw = clockwork_capacity_report(d, base)
                checks.add(
                    f"clockwork mean length >= dilated d={d}",
                    cw.passed,
                    f"{cw.mean_clockwork} < {cw.mean_dilated}",
                )

            claimed = None
            if wrong_ranking:
                # deliberately claim a non-geometric schedule is optimal
                claimed = (1,) * (d - 1) + (m,)
            if d >= 3 or wrong_ranking:
                report = verify_optimality(d, base, claimed)
                detail = ""
                if not report.passed:
                    worst = report.counterexamples[0]
                    detail = (
                        f"claimed {report.claimed} is beaten or tied by {worst.schedule} "
                        f"(mean {worst.mean_length} vs best {report.best().mean_length})"
                    )
                checks.add(f"geometric schedule strictly optimal d={d} M={base} ({len(report.rows)} schedules)",
                           report.passed, detail)

    if discrepancy_rows:
        print()
        print(f"{'d':>3} {'m':>5} {'oracle':>24} {'closed form':>24} {'oracle - closed':>22} {'rnn - cnn':>20}")
        for d, m, o, c, diff, gap in discrepancy_rows:
            print(f"{d:>3} {m:>5} {_fmt(o):>24} {_fmt(c):>24} {_fmt(diff):>22} {_fmt(gap):>20}")
    return checks


def cmd_verify_theory(args) -> int:
    bases = tuple(int(b) for b in args.bases.split(","))
    if args.max_d < 2 or any(b < 2 for b in bases):
        raise ConfigurationError("need --max-d >= 2 and bases >= 2")
    checks = verify_theory(args.max_d, bases, args.max_m, args.inject_wrong_ranking)
    n_fail = len(checks.failures)
    print(f"\n{len(checks.results) - n_fail} passed, {n_fail} failed")
    if n_fail:
        for name, _, detail in checks.failures:
            print(json.dumps({"check": name, "detail": detail}), file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


# -- entry point ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dilatedrnn", description="Dilated recurrent networks: training and graph analysis")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model and write metrics.csv, best.npz, summary.json")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the seeded validation batch")
    _add_run_flags(p)
    p.add_argument("checkpoint", type=Path)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="path-length analysis of an architecture spec")
    p.add_argument("spec", help="TOML architecture file")
    p.add_argument("--out", type=str, help="output directory (default: current)")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("verify-theory", help="exhaustive checks of the path-length results")
    p.add_argument("--max-d", dest="max_d", type=int, default=8)
    p.add_argument("--bases", default="2,3", help="comma-separated dilation bases")
    p.add_argument("--max-m", dest="max_m", type=int, default=512)
    p.add_argument("--inject-wrong-ranking", action="store_true", help="negative self-test; must exit 2")
    p.set_defaults(func=cmd_verify_theory)

    p = sub.add_parser("ablate", help="sweep start exponent or depth; writes summary.csv")
    _add_run_flags(p)
    p.add_argument("--sweep", choices=("start_exponent", "layers"), required=True)
    p.add_argument("--values", required=True, help="comma-separated integers, e.g. 0,1,2")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
