"""``quann`` command line: gen, train, bench, verify, report.

Exit codes: 0 success, 1 usage error, 2 runtime error, 3 verification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from . import harness, synthgen, verify
from .models import FAMILIES

log = logging.getLogger("quann")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3


@dataclass(frozen=True)
class Profile:
    counts: tuple[int, int, int]
    epochs: int
    replicates: int


PROFILES = {
    "paper": Profile((20000, 2000, 3000), 20, 10),
    "desk": Profile((2000, 500, 500), 5, 5),
}
DEFAULT_BENCH_FAMILIES = ("quann1", "ablation1")
DEFAULT_BENCH_TASKS = ("row_max", "log_sum_exp", "variance")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits with 2 by default; usage errors are 1 here
        raise UsageError(f"{self.prog}: {message}")


def _csv_list(value: str) -> list[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


def _float_list(value: str) -> list[float]:
    try:
        return [float(v) for v in _csv_list(value)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {value!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--task", type=_csv_list, help="task kind(s), comma separated")
    common.add_argument("--family", type=_csv_list, help="model family or families, comma separated")
    common.add_argument("--profile", choices=sorted(PROFILES), default="desk")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--lr", type=_float_list, help="learning rate(s), comma separated")
    common.add_argument("--epochs", type=int)
    common.add_argument("--batch", type=int)
    common.add_argument("--latent", type=int)
    common.add_argument("--replicates", type=int)
    common.add_argument("--data", type=Path, help="dataset directory (one subdirectory per task for bench)")
    common.add_argument("--out", type=Path, help="output directory or file")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="quann", description="Kolmogorov-mean set aggregation laboratory")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    sub.add_parser("train", parents=[common], help="train one family on one task")
    sub.add_parser("bench", parents=[common], help="run the family x task x replicate x lr grid")
    p = sub.add_parser("verify", parents=[common], help="run the numerical property checks")
    p.add_argument("--tolerance", type=float, help="override the bound-violation tolerance")
    p = sub.add_parser("report", parents=[common], help="summarise a metrics CSV")
    p.add_argument("--metrics", type=Path, help="metrics CSV written by bench")
    return parser


def _train_config(args, profile: Profile) -> harness.TrainConfig:
    defaults = harness.TrainConfig()
    try:
        return harness.TrainConfig(
            learning_rates=tuple(args.lr) if args.lr else defaults.learning_rates,
            batch_size=args.batch or defaults.batch_size,
            epochs=args.epochs or profile.epochs,
            latent_dim=args.latent or defaults.latent_dim,
            seed=args.seed,
            replicates=args.replicates or profile.replicates,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _tasks(args, default: Sequence[str] | None = None) -> list[str]:
    tasks = args.task or (list(default) if default else None)
    if not tasks:
        raise UsageError(f"--task is required; valid kinds: {', '.join(synthgen.TASKS)}")
    bad = [t for t in tasks if t not in synthgen.TASKS]
    if bad:
        raise UsageError(f"unknown task {bad[0]!r}; valid kinds: {', '.join(synthgen.TASKS)}")
    return tasks


def _families(args, default: Sequence[str] | None = None) -> list[str]:
    fams = args.family or (list(default) if default else None)
    if not fams:
        raise UsageError(f"--family is required; valid families: {', '.join(FAMILIES)}")
    bad = [f for f in fams if f not in FAMILIES]
    if bad:
        raise UsageError(f"unknown family {bad[0]!r}; valid families: {', '.join(FAMILIES)}")
    return fams


def _load_or_generate(task: str, data_dir: Path | None, profile: Profile, seed: int) -> synthgen.Dataset:
    if data_dir is not None and (data_dir / "manifest.json").exists():
        ds = synthgen.read_dataset(data_dir)
        if ds.task.kind != task:
            raise UsageError(f"{data_dir} holds task {ds.task.kind!r}, not {task!r}")
        return ds
    log.info("generating %s with counts %s", task, profile.counts)
    ds = synthgen.generate_dataset(synthgen.default_task(task), profile.counts, seed)
    if data_dir is not None:
        synthgen.write_dataset(ds, data_dir)
    return ds


# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    tasks = _tasks(args)
    if len(tasks) != 1:
        raise UsageError("gen takes exactly one task")
    profile = PROFILES[args.profile]
    out = args.out or Path("data") / tasks[0]
    ds = synthgen.generate_dataset(synthgen.default_task(tasks[0]), profile.counts, args.seed)
    manifest = synthgen.write_dataset(ds, out)
    print(f"wrote {sum(ds.counts)} records to {out} (manifest {manifest.name})")
    return EXIT_OK


def cmd_train(args) -> int:
    tasks, families = _tasks(args), _families(args)
    if len(tasks) != 1 or len(families) != 1:
        raise UsageError("train takes exactly one task and one family")
    profile = PROFILES[args.profile]
    config = _train_config(args, profile)
    ds = _load_or_generate(tasks[0], args.data, profile, args.seed)
    cells = []
    for lr in config.learning_rates:
        cells.append((lr, *harness._train_cell(families[0], ds, config, 0, lr)))
    result = harness._finish_replicate(families[0], ds, config, 0, cells)
    out = args.out or Path("runs") / f"{families[0]}_{tasks[0]}"
    out.mkdir(parents=True, exist_ok=True)
    best = next(c for c in cells if c[0] == result.best_lr)
    best[1].save(out / "model.qnn")
    (out / "model_config.json").write_text(json.dumps(best[1].config.to_dict(), indent=2) + "\n")
    (out / "result.json").write_text(json.dumps(result.to_dict(), indent=2) + "\n")
    print(f"{families[0]} on {tasks[0]}: lr={result.best_lr:g} val_mse={result.val_mse:.6g} "
          f"test_mse={result.test_mse:.6g} -> {out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    tasks = _tasks(args, DEFAULT_BENCH_TASKS)
    families = _families(args, DEFAULT_BENCH_FAMILIES)
    profile = PROFILES[args.profile]
    config = _train_config(args, profile)
    datasets = {}
    for t in tasks:
        data_dir = args.data / t if args.data is not None else None
        datasets[t] = _load_or_generate(t, data_dir, profile, args.seed)
    bench = harness.run_bench(datasets, families, config)
    out = args.out or Path("bench")
    out.mkdir(parents=True, exist_ok=True)
    harness.write_metrics_csv(bench.results, out / "metrics.csv")
    report = harness.bench_report(bench)
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    print(format_summary(report_table(bench.results)))
    for pair in report["pairs"]:
        print(f"{pair['row']} vs {pair['column']}: {pair['wins']}/{pair['trials']} wins, "
              f"p={pair['p_value']:.4g}{pair['marker']}")
    if bench.failures:
        print(f"{len(bench.failures)} run(s) failed; see {out / 'report.json'}", file=sys.stderr)
    print(f"metrics: {out / 'metrics.csv'}  report: {out / 'report.json'}  ({bench.seconds:.1f} s)")
    return EXIT_OK


def cmd_verify(args) -> int:
    checks = verify.run_all(seed=args.seed, tolerance=args.tolerance)
    text = verify.report_json(checks)
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text + "\n")
    for c in checks:
        print(f"{'PASS' if c.passed else 'FAIL'} {c.name} (max violation {c.observed_max_violation:.3g})")
    failed = [c.name for c in checks if not c.passed]
    if failed:
        print(f"failing checks: {', '.join(failed)}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def report_table(results: Sequence[harness.RunResult]) -> list[dict]:
    """Per (family, task) mean and population std with rank and significance markers.

    ``rank`` is 1 for the lowest mean in a task and 2 for the runner-up.
    ``flag`` compares each family with the best other family of its task.
    """
    summary = harness.summarize(results)
    rows = []
    tasks = sorted({t for _, t in summary})
    for task in tasks:
        cells = sorted(((s["mean"], f, s) for (f, t), s in summary.items() if t == task))
        for rank, (mean, fam, s) in enumerate(cells, 1):
            others = [c for c in cells if c[1] != fam]
            flag = "tie"
            if others:
                _, _, o = others[0]
                flag = harness.significance_flag(s["mean"], s["std"], o["mean"], o["std"])
            rows.append({"task": task, "family": fam, "mean": s["mean"], "std": s["std"], "n": s["n"],
                         "rank": rank, "flag": flag})
    return rows


def format_summary(rows: Sequence[dict]) -> str:
    marks = {1: "[best]", 2: "[2nd]"}
    lines = [f"{'task':<16} {'family':<18} {'test MSE (mean +- std)':<28} marker  vs-best-other"]
    for r in rows:
        cell = f"{r['mean']:.6g} +- {r['std']:.3g}"
        lines.append(f"{r['task']:<16} {r['family']:<18} {cell:<28} {marks.get(r['rank'], ''):<7} {r['flag']}")
    return "\n".join(lines)


def cmd_report(args) -> int:
    path = args.metrics or args.data
    if path is None:
        raise UsageError("report needs --metrics PATH")
    results = harness.read_metrics_csv(path)
    rows = report_table(results)
    text = format_summary(rows)
    print(text)
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(json.dumps(rows, indent=2) + "\n")
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "bench": cmd_bench, "verify": cmd_verify, "report": cmd_report}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"quann {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        log.debug("command failed", exc_info=True)
        print(f"quann {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
