"""Glue between configs, datasets, teachers and the search loop."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import torch

from .arch import (
    ArchitectureSpec, arch_from_dict, arch_to_dict, builtin_architecture, count_parameters, load_arch, save_arch,
)
from .config import CompressionRunConfig, ConfigError, resolve_data_root
from .data import Split, SubsetSpec, load_split, resolve_subset
from .distill import DistillConfig, evaluate_accuracy, measure_latency, train_student
from .model import ArchNet, load_model, save_weights
from .reinforce import CompressionTask, StudentOutcome
from .reward import TeacherReference


class TeacherError(RuntimeError):
    pass


@dataclass
class Teacher:
    arch: ArchitectureSpec
    model: ArchNet
    classes: tuple[str, ...]
    reference: TeacherReference | None = None


def target_subset(cfg: CompressionRunConfig) -> SubsetSpec:
    d = cfg.data
    try:
        return resolve_subset(d.subset, d.dataset, d.classes)
    except (KeyError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_data(cfg: CompressionRunConfig, subset: SubsetSpec | None = None) -> tuple[Split, Split]:
    subset = subset or target_subset(cfg)
    root = resolve_data_root(cfg)
    train = load_split(subset, "train", root, shuffle_seed=cfg.data.shuffle_seed)
    if cfg.data.max_train_examples > 0:
        train = train.take(cfg.data.max_train_examples)
    test = load_split(subset, "test", root)
    return train, test


def teacher_paths(cfg: CompressionRunConfig) -> tuple[Path, Path]:
    base = Path(cfg.run_dir) / "teacher"
    weights = Path(cfg.teacher.weights) if cfg.teacher.weights else base / "weights.pt"
    reference = Path(cfg.teacher.reference) if cfg.teacher.reference else base / "teacher.json"
    return weights, reference


def teacher_architecture(cfg: CompressionRunConfig, num_classes: int, input_shape) -> ArchitectureSpec:
    if cfg.teacher.arch_file:
        return load_arch(cfg.teacher.arch_file).with_num_classes(num_classes)
    try:
        return builtin_architecture(cfg.teacher.arch, num_classes, input_shape)
    except KeyError as exc:
        raise ConfigError(str(exc)) from exc


def measure_reference(model: ArchNet, arch: ArchitectureSpec, test: Split, cfg: CompressionRunConfig,
                      classes=None) -> TeacherReference:
    accuracy = evaluate_accuracy(model, test, classes)
    lat = cfg.latency
    latency = measure_latency(model, arch.input_shape, lat.warmup, lat.samples, lat.batch_size, lat.device)
    return TeacherReference(max(accuracy, 1e-6), latency.median_seconds, count_parameters(arch))


def train_teacher(cfg: CompressionRunConfig, write: bool = True) -> Teacher:
    """Train the configured teacher on the configured data with hard labels."""
    subset = target_subset(cfg)
    train, test = load_data(cfg, subset)
    arch = teacher_architecture(cfg, subset.num_classes, train.input_shape)
    tc = cfg.teacher
    dcfg = DistillConfig(epochs=tc.epochs, learning_rate=tc.learning_rate, momentum=tc.momentum,
                         mode="hard_only", batch_size=tc.batch_size, augment=tc.augment)
    model, losses = train_student(arch, None, train, dcfg, seed=cfg.seed)
    if losses and not all(torch.isfinite(torch.tensor(losses))):
        raise TeacherError("teacher training diverged")
    ref = measure_reference(model, arch, test, cfg)
    teacher = Teacher(arch, model, subset.classes, ref)
    if write:
        weights, reference = teacher_paths(cfg)
        weights.parent.mkdir(parents=True, exist_ok=True)
        reference.parent.mkdir(parents=True, exist_ok=True)
        save_weights(model, weights)
        reference.write_text(json.dumps({
            **asdict(ref),
            "dataset": subset.base_dataset,
            "subset": subset.name,
            "classes": list(subset.classes),
            "weights": str(weights),
            "loss_curve": losses,
            "arch": arch_to_dict(arch),
        }, indent=2) + "\n", encoding="utf-8")
    return teacher


def load_teacher(cfg: CompressionRunConfig) -> Teacher:
    weights, reference = teacher_paths(cfg)
    if not reference.exists():
        raise TeacherError(f"teacher reference {reference} not found; run train-teacher first")
    info = json.loads(reference.read_text(encoding="utf-8"))
    weights = Path(cfg.teacher.weights or info.get("weights") or weights)
    if not weights.exists():
        raise TeacherError(f"teacher weights {weights} not found")
    arch = arch_from_dict(info["arch"])
    ref = TeacherReference(info["accuracy"], info["latency"], info["parameters"])
    return Teacher(arch, load_model(arch, weights), tuple(info["classes"]), ref)


class DistillEvaluator:
    """Trains a student by distillation and measures accuracy, latency and size."""

    def __init__(self, teacher: Teacher, train: Split, test: Split, distill: DistillConfig,
                 cfg: CompressionRunConfig):
        self.teacher = teacher
        self.train = train
        self.test = test
        self.distill = distill
        self.latency = cfg.latency

    def __call__(self, arch: ArchitectureSpec, seed: int) -> StudentOutcome:
        model, losses = train_student(arch, self.teacher.model, self.train, self.distill, seed,
                                      teacher_classes=self.teacher.classes)
        acc = evaluate_accuracy(model, self.test)
        lat = self.latency
        m = measure_latency(model, arch.input_shape, lat.warmup, lat.samples, lat.batch_size, lat.device)
        return StudentOutcome(acc, m.median_seconds, count_parameters(arch), self.distill.epochs,
                              model, losses, m)


def prepare_task(cfg: CompressionRunConfig, teacher: Teacher | None = None,
                 data: tuple[Split, Split] | None = None) -> CompressionTask:
    """Load teacher and data, and re-measure the teacher reference on the target subset.

    Latency is measured again here so teacher and students are timed on the
    same machine in the same session.
    """
    teacher = teacher or load_teacher(cfg)
    subset = target_subset(cfg)
    missing = [c for c in subset.classes if c not in teacher.classes]
    if missing:
        raise TeacherError(f"teacher was not trained on classes {missing}")
    train, test = data or load_data(cfg, subset)
    ref = measure_reference(teacher.model, teacher.arch, test, cfg, teacher.classes)
    evaluator = DistillEvaluator(teacher, train, test, cfg.student_distill, cfg)
    return CompressionTask(teacher.arch, ref, evaluator, subset.num_classes)



def stage2_prune(cfg: CompressionRunConfig, task: CompressionTask, model: ArchNet, filters: int,
                 run_dir: Path | None = None):
    """Thin the filters of the search's best student and fine-tune it once.

    Returns the record of the pruned model; with ``run_dir`` it is written to
    ``best/stage2/``.
    """
    from .prune import prunable_filter_count, prune_filters, rank_filters
    from .reinforce import make_record

    evaluator = task.evaluator
    if not isinstance(evaluator, DistillEvaluator):
        raise TypeError("stage-2 pruning needs the distillation evaluator's data")
    count = min(filters, prunable_filter_count(model.arch))
    ranks = rank_filters(model, evaluator.train, max_examples=cfg.prune.ranking_examples)
    pruned, arch, _ = prune_filters(model, ranks, count)
    tune = replace(cfg.student_distill, epochs=cfg.prune.finetune_epochs)
    pruned, losses = train_student(arch, evaluator.teacher.model, evaluator.train, tune, cfg.seed,
                                   teacher_classes=evaluator.teacher.classes, model=pruned)
    acc = evaluate_accuracy(pruned, evaluator.test)
    lat = cfg.latency
    m = measure_latency(pruned, arch.input_shape, lat.warmup, lat.samples, lat.batch_size, lat.device)
    rec = make_record(None, acc, m.median_seconds, count_parameters(arch), task.reference, cfg.thresholds,
                      tune.epochs, arch=arch_to_dict(arch), loss_curve=losses)
    if run_dir is not None:
        out = Path(run_dir) / "best" / "stage2"
        out.mkdir(parents=True, exist_ok=True)
        save_arch(arch, out / "arch.json")
        save_weights(pruned, out / "model_weights")
        (out / "record.json").write_text(json.dumps(rec.to_dict()) + "\n", encoding="utf-8")
    return rec, pruned
