"""``ddc`` command line: teachers, compression and transfer runs, baselines and reports.

Exit status is 0 on success, 1 on a runtime failure and 2 on a usage or
configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from .config import ConfigError, CompressionRunConfig, dumps_config, load_config, with_overrides

log = logging.getLogger("ddc")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _config(args) -> CompressionRunConfig:
    cfg = load_config(args.config)
    overrides = {
        "seed": getattr(args, "seed", None),
        "run_dir": getattr(args, "run_dir", None),
        "iterations": getattr(args, "iterations", None),
        "data.root": getattr(args, "data_root", None),
        "distill.mode": getattr(args, "mode", None),
        "prune.stage2_filters": getattr(args, "stage2_filters", None),
    }
    return with_overrides(cfg, **overrides)


def _dry(args, cfg: CompressionRunConfig, plan: str) -> int:
    print(f"[dry-run] {plan}")
    print(dumps_config(cfg), end="")
    return EXIT_OK


def cmd_validate_config(args) -> int:
    cfg = _config(args)
    from .pipeline import target_subset, teacher_architecture
    subset = target_subset(cfg)
    arch = teacher_architecture(cfg, subset.num_classes, (3, 32, 32))
    print(f"ok: teacher {cfg.teacher.arch_file or cfg.teacher.arch} with {arch.num_removable} removable layers, "
          f"subset {subset.name} ({subset.num_classes} classes)")
    if args.show:
        print(dumps_config(cfg), end="")
    return EXIT_OK


def cmd_train_teacher(args) -> int:
    cfg = _config(args)
    from .pipeline import teacher_paths, train_teacher
    weights, reference = teacher_paths(cfg)
    if args.dry_run:
        return _dry(args, cfg, f"would train teacher and write {weights} and {reference}")
    teacher = train_teacher(cfg)
    ref = teacher.reference
    print(f"teacher accuracy {ref.accuracy:.4f}, latency {1000 * ref.latency:.3f} ms, "
          f"parameters {ref.parameters}; wrote {reference}")
    return EXIT_OK


def _finish_run(cfg, task, result, stage2: int) -> None:
    from .pipeline import stage2_prune
    best = result.best
    if best is None:
        print(f"no students evaluated; run directory {cfg.run_dir}")
        return
    ratio = task.reference.parameters / best.parameters
    print(f"best reward {best.reward:.4g}: accuracy {best.accuracy:.4f}, parameters {best.parameters} "
          f"({ratio:.3g}x smaller), actions {list(best.actions)}")
    if stage2 > 0 and result.best_model is not None:
        rec, _ = stage2_prune(cfg, task, result.best_model, stage2, Path(cfg.run_dir))
        print(f"after filter pruning: accuracy {rec.accuracy:.4f}, parameters {rec.parameters}")
    print(f"run directory {cfg.run_dir}")


def cmd_compress(args) -> int:
    cfg = _config(args)
    if args.dry_run:
        return _dry(args, cfg, f"would run {cfg.iterations} iterations into {cfg.run_dir}")
    from .pipeline import prepare_task
    from .reinforce import run_compression
    task = prepare_task(cfg)
    result = run_compression(cfg, task=task)
    _finish_run(cfg, task, result, cfg.prune.stage2_filters)
    return EXIT_OK


def cmd_transfer(args) -> int:
    cfg = _config(args)
    if not (args.source or cfg.transfer.source):
        raise UsageError("no source checkpoint: pass --from or set transfer.source")
    source = Path(args.source or cfg.transfer.source)
    if not source.exists():
        raise UsageError(f"checkpoint {source} does not exist")
    budget = cfg.transfer.iterations if args.iterations is None else args.iterations
    if args.dry_run:
        return _dry(args, cfg, f"would warm-start from {source} for {budget} iterations into {cfg.run_dir}")
    from .pipeline import prepare_task
    from .reinforce import PolicyCheckpoint, transfer_policy
    checkpoint = PolicyCheckpoint.load(source)
    task = prepare_task(cfg)
    result = transfer_policy(checkpoint, cfg, task=task, iterations=budget)
    _finish_run(cfg, task, result, cfg.prune.stage2_filters)
    return EXIT_OK


def cmd_prune_baseline(args) -> int:
    cfg = _config(args)
    pc = cfg.prune
    rounds = pc.iterations if args.rounds is None else args.rounds
    filters = pc.filters_per_iteration if args.filters is None else args.filters
    epochs = pc.finetune_epochs if args.finetune_epochs is None else args.finetune_epochs
    if args.dry_run:
        return _dry(args, cfg, f"would run {rounds} rounds of {filters} filters, {epochs} fine-tune epochs, "
                               f"into {cfg.run_dir}/prune")
    from .pipeline import load_data, load_teacher, measure_reference
    from .prune import prune_baseline
    teacher = load_teacher(cfg)
    train, test = load_data(cfg)
    ref = measure_reference(teacher.model, teacher.arch, test, cfg, teacher.classes)
    lat = cfg.latency
    records, _ = prune_baseline(
        teacher.model, train, test, rounds, filters, epochs, finetune=cfg.distill, reference=ref,
        thresholds=cfg.thresholds, ranking_examples=pc.ranking_examples,
        latency=dict(warmup=lat.warmup, samples=lat.samples, batch_size=lat.batch_size, device=lat.device),
        seed=cfg.seed, out_dir=cfg.run_dir)
    for k, rec in enumerate(records):
        print(f"round {k}: accuracy {rec.accuracy:.4f}, parameters {rec.parameters}, reward {rec.reward:.4g}")
    return EXIT_OK


def cmd_train_student(args) -> int:
    """Distil a hand-designed student (the plain knowledge-distillation baseline)."""
    cfg = _config(args)
    arch_file = Path(args.arch_file)
    if not arch_file.exists():
        raise UsageError(f"architecture file {arch_file} does not exist")
    out = Path(args.out or Path(cfg.run_dir) / "kd_baseline")
    if args.dry_run:
        return _dry(args, cfg, f"would distil {arch_file} for {cfg.student_epochs} epochs into {out}")
    from .arch import arch_to_dict, check, load_arch
    from .pipeline import prepare_task
    from .reinforce import write_best, make_record
    task = prepare_task(cfg)
    arch = check(load_arch(arch_file).with_num_classes(task.num_classes))
    outcome = task.evaluator(arch, cfg.seed)
    rec = make_record(None, outcome.accuracy, outcome.latency, outcome.parameters, task.reference,
                      cfg.thresholds, outcome.train_epochs, arch=arch_to_dict(arch),
                      loss_curve=list(outcome.loss_curve))
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.snapshot").write_text(dumps_config(with_overrides(cfg, name=f"{cfg.name}-kd")), encoding="utf-8")
    (out / "teacher.json").write_text(json.dumps(asdict(task.reference)) + "\n", encoding="utf-8")
    write_best(out, rec, outcome.model)
    print(f"student accuracy {rec.accuracy:.4f}, parameters {rec.parameters}, reward {rec.reward:.4g}; wrote {out}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .report import collect_rows, format_csv, format_text
    missing = [d for d in args.run_dirs if not Path(d).is_dir()]
    if missing:
        raise UsageError(f"not a run directory: {', '.join(missing)}")
    rows = collect_rows(args.run_dirs, include_teacher=not args.no_teacher)
    text, table_csv = format_text(rows), format_csv(rows)
    if args.csv and not args.dry_run:
        Path(args.csv).write_text(table_csv, encoding="utf-8")
    print(table_csv if args.format == "csv" else text, end="")
    return EXIT_OK


def cmd_make_synthetic(args) -> int:
    if args.dry_run:
        print(f"[dry-run] would write a synthetic {args.dataset} stand-in under {args.root}")
        return EXIT_OK
    from .data import write_synthetic_cifar
    folder = write_synthetic_cifar(args.root, args.dataset, args.train_per_class, args.test_per_class, args.seed)
    print(f"wrote {folder}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ddc", description="Layer-removal compression with a learned policy.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, fn, help_text, config=True, dry=True):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.set_defaults(fn=fn)
        if config:
            p.add_argument("--config", help="TOML run configuration (defaults when omitted)")
            p.add_argument("--seed", type=int)
            p.add_argument("--run-dir")
            p.add_argument("--data-root", help="overrides data.root")
        if dry:
            p.add_argument("--dry-run", action="store_true", help="print the effective plan, write nothing")
        return p

    p = command("validate-config", cmd_validate_config, "parse a config and check its teacher and subset", dry=False)
    p.add_argument("--show", action="store_true", help="print the effective configuration")

    command("train-teacher", cmd_train_teacher, "train the configured teacher and record its reference")

    for name, fn, text in (("compress", cmd_compress, "search for a compressed student"),
                           ("transfer", cmd_transfer, "warm-start a search from a policy checkpoint")):
        p = command(name, fn, text)
        p.add_argument("--iterations", type=int)
        p.add_argument("--mode", choices=("soft_and_hard", "hard_only"), help="student training targets")
        p.add_argument("--stage2-filters", type=int, help="filters to prune from the best student afterwards")
        if name == "transfer":
            p.add_argument("--from", dest="source", help="source policy checkpoint (default transfer.source)")

    p = command("prune-baseline", cmd_prune_baseline, "rank, prune and fine-tune the teacher repeatedly")
    p.add_argument("--rounds", type=int)
    p.add_argument("--filters", type=int, help="filters removed per round")
    p.add_argument("--finetune-epochs", type=int)

    p = command("train-student", cmd_train_student, "distil a hand-designed student architecture")
    p.add_argument("--arch-file", required=True, help="architecture JSON, e.g. configs/kd_student_7layer.json")
    p.add_argument("--mode", choices=("soft_and_hard", "hard_only"))
    p.add_argument("--out", help="output directory (default <run_dir>/kd_baseline)")

    p = command("report", cmd_report, "tabulate finished runs", config=False)
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--format", choices=("text", "csv"), default="text")
    p.add_argument("--csv", help="also write the comma-separated table here")
    p.add_argument("--no-teacher", action="store_true", help="omit teacher rows")

    p = command("make-synthetic", cmd_make_synthetic, "write a synthetic CIFAR-format dataset", config=False)
    p.add_argument("root")
    p.add_argument("--dataset", choices=("cifar10", "cifar100"), default="cifar10")
    p.add_argument("--train-per-class", type=int, default=500)
    p.add_argument("--test-per-class", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    from .data import DatasetNotFoundError
    from .pipeline import TeacherError
    from .reinforce import CheckpointMismatchError
    try:
        return args.fn(args)
    except (UsageError, ConfigError) as exc:
        print(f"ddc {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TeacherError, DatasetNotFoundError, CheckpointMismatchError, RuntimeError, ValueError, OSError) as exc:
        print(f"ddc {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
