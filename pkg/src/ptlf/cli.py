"""Command line entry point: ``ptlf run | analyze-correlation | report``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import reports as rp
from .config import ConfigError, RunConfig, load_config, serialize_config
from .continual import OutputLock, run_stream, write_artifacts
from .data import DataFormatError

log = logging.getLogger("ptlf")

MODES = {"one-shot": "one_shot", "per-epoch": "per_epoch"}
SELECTIONS = {"task-correlated": "task_correlated", "ascending": "ascending_index"}


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="run configuration file")
    p.add_argument("--seed", type=int, help="u64 seed (overrides the config)")
    p.add_argument("--objective", choices=("simsiam", "barlow_twins", "supervised_ce"))
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--epochs", type=int, help="epochs per task")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ptlf", description="Progressive task-correlated layer freezing")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train the task stream and write all artifacts")
    _add_common(run)
    run.add_argument("--freeze-ratio", type=float, help="final freeze ratio k_f")
    run.add_argument("--mode", choices=tuple(MODES))
    run.add_argument("--selection", choices=tuple(SELECTIONS))
    run.add_argument("--repeat", type=int, default=1, help="run N consecutive seeds")

    corr = sub.add_parser("analyze-correlation", help="task-correlation pass at each task boundary, no freezing")
    _add_common(corr)

    rep = sub.add_parser("report", help="render a run directory's CSVs as a text summary")
    rep.add_argument("directory", type=Path)
    return parser


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config is not None else RunConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.objective is not None:
        overrides["objective"] = args.objective
    if args.out is not None:
        overrides["out"] = str(args.out)
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if getattr(args, "freeze_ratio", None) is not None:
        overrides["k_f"] = args.freeze_ratio
    if getattr(args, "mode", None) is not None:
        overrides["mode"] = MODES[args.mode]
    if getattr(args, "selection", None) is not None:
        overrides["selection"] = SELECTIONS[args.selection]
    return cfg.with_overrides(**overrides).validate()


def _thread_limit():
    raw = os.environ.get("PTLF_THREADS")
    if not raw:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(raw))


def cmd_run(args) -> int:
    cfg = _resolve_config(args)
    if args.repeat < 1:
        raise ConfigError("--repeat must be >= 1")
    for i in range(args.repeat):
        seed = cfg.seed + i
        run_cfg = cfg.with_overrides(seed=seed)
        out = Path(cfg.out) if args.repeat == 1 else Path(cfg.out) / f"seed_{seed}"
        run_cfg.out = str(out)
        report = run_stream(run_cfg, out)
        fgt = "" if report.forgetting is None else f", forgetting {report.forgetting:.2f}"
        print(f"seed {seed}: accuracy {report.final_accuracy:.2f}{fgt} -> {out}")
    return 0


def correlation_summary(task_reports) -> str:
    lines = ["task,mean_r,var_r,ascending_fraction"]
    for rep in task_reports:
        if rep.correlation is None:
            continue
        r = np.array([c.ratio for c in rep.correlation.layers])
        asc = float(np.mean(np.diff(r) >= 0)) if r.size > 1 else 1.0
        lines.append(f"{rep.task_id},{float(r.mean())!r},{float(r.var())!r},{asc!r}")
    return "\n".join(lines) + "\n"


def cmd_analyze(args) -> int:
    cfg = _resolve_config(args)
    report = run_stream(cfg, None, evaluate=False, freeze=False)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    with OutputLock(out):
        (out / rp.CONFIG_ECHO).write_text(serialize_config(cfg), encoding="utf-8")
        (out / rp.CORRELATION_CSV).write_text(
            rp.to_csv(rp.CORRELATION_HEADER, rp.correlation_rows(report.tasks)), encoding="utf-8"
        )
        (out / "correlation_summary.csv").write_text(correlation_summary(report.tasks), encoding="utf-8")
    print(correlation_summary(report.tasks), end="")
    return 0


def cmd_report(args) -> int:
    if not (args.directory / rp.METRICS_CSV).is_file():
        raise ConfigError(f"{args.directory}: no {rp.METRICS_CSV} found")
    print(rp.render_summary(args.directory), end="")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    handlers = {"run": cmd_run, "analyze-correlation": cmd_analyze, "report": cmd_report}
    try:
        with _thread_limit():
            return handlers[args.command](args)
    except (ConfigError, DataFormatError, FileNotFoundError, RuntimeError) as exc:
        print(f"ptlf: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
