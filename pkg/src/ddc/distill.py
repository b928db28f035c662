"""Knowledge-distillation training of student architectures and their evaluation."""
from __future__ import annotations

import math
import statistics
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch
from torch import nn
import torch.nn.functional as F

from .arch import ArchitectureSpec
from .data import Split, restrict_teacher_logits
from .model import ArchNet, build_model

MODES = ("soft_and_hard", "hard_only")

# latency timings must not overlap with other work on the same device
DEVICE_LOCK = threading.Lock()


class StudentTrainingError(RuntimeError):
    """Training diverged; the caller should score the student as failed."""


@dataclass(frozen=True)
class DistillConfig:
    lambda_soft: float = 0.7
    epochs: int = 20
    learning_rate: float = 0.001
    momentum: float = 0.9
    mode: str = "soft_and_hard"
    temperature: float = 1.0
    batch_size: int = 128
    augment: bool = False
    cache_teacher_logits: bool = False

    def __post_init__(self):
        if not 0.0 <= self.lambda_soft <= 1.0:
            raise ValueError("lambda_soft must lie in [0, 1]")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.epochs < 0 or self.batch_size < 1 or self.temperature <= 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and temperature > 0 required")


def kd_loss(student_logits: torch.Tensor, teacher_logits: torch.Tensor | None,
            labels: torch.Tensor, cfg: DistillConfig = DistillConfig()) -> torch.Tensor:
    """``lambda * KL(student || teacher) + (1 - lambda) * CE(student, labels)``, batch-averaged.

    The student distribution is the first KL argument. ``hard_only`` mode (or a
    missing teacher) returns the cross-entropy term alone.
    """
    if not torch.isfinite(student_logits).all():
        raise ValueError("student logits contain non-finite values")
    hard = F.cross_entropy(student_logits, labels)
    if cfg.mode == "hard_only" or teacher_logits is None:
        return hard
    if teacher_logits.shape != student_logits.shape:
        raise ValueError(f"logit shapes differ: {tuple(student_logits.shape)} vs {tuple(teacher_logits.shape)}")
    if not torch.isfinite(teacher_logits).all():
        raise ValueError("teacher logits contain non-finite values")
    t = cfg.temperature
    log_s = F.log_softmax(student_logits / t, dim=-1)
    log_t = F.log_softmax(teacher_logits / t, dim=-1)
    soft = (log_s.exp() * (log_s - log_t)).sum(-1).mean() * (t * t)
    return cfg.lambda_soft * soft + (1.0 - cfg.lambda_soft) * hard


def _augment(x: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    n, _, h, w = x.shape
    flip = torch.rand(n, generator=gen) < 0.5
    x = torch.where(flip[:, None, None, None], x.flip(-1), x)
    padded = F.pad(x, (4, 4, 4, 4))
    dy = torch.randint(0, 9, (n,), generator=gen)
    dx = torch.randint(0, 9, (n,), generator=gen)
    return torch.stack([padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w] for i in range(n)])


def _teacher_logit_fn(teacher: nn.Module | None, split: Split,
                      teacher_classes: Sequence[str] | None) -> Callable | None:
    if teacher is None:
        return None
    teacher.eval()

    def fn(x: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            out = teacher(x)
        if teacher_classes is not None or out.shape[-1] != split.num_classes:
            out = restrict_teacher_logits(out, split.subset, teacher_classes)
        return out

    return fn


def train_student(arch: ArchitectureSpec, teacher: nn.Module | None, train: Split,
                  cfg: DistillConfig = DistillConfig(), seed: int = 0,
                  teacher_classes: Sequence[str] | None = None,
                  model: ArchNet | None = None) -> tuple[ArchNet, list[float]]:
    """Train a fresh model for ``arch`` (or continue ``model``) by distillation.

    Returns the model and its per-epoch mean training loss. With no teacher the
    objective is plain cross-entropy, which is how teachers themselves are
    trained and how pruned models are fine-tuned.
    """
    model = model if model is not None else build_model(arch, seed)
    if cfg.epochs == 0:
        return model, []
    teacher_fn = _teacher_logit_fn(teacher, train, teacher_classes)
    cached = None
    if teacher_fn is not None and cfg.cache_teacher_logits and not cfg.augment:
        cached = torch.cat([teacher_fn(train.images[i:i + 512]) for i in range(0, len(train), 512)])
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.SGD(model.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum)
    losses = []
    for _ in range(cfg.epochs):
        model.train()
        order = torch.randperm(len(train), generator=gen)
        total, count = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x, y = train.images[idx], train.labels[idx]
            if cfg.augment:
                x = _augment(x, gen)
            t_logits = None
            if teacher_fn is not None:
                t_logits = cached[idx] if cached is not None else teacher_fn(x)
            logits = model(x)
            if not torch.isfinite(logits).all():
                raise StudentTrainingError("student logits became non-finite")
            loss = kd_loss(logits, t_logits, y, cfg)
            if not torch.isfinite(loss):
                raise StudentTrainingError("training loss became non-finite")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        losses.append(total / count)
    model.eval()
    return model, losses


@torch.no_grad()
def predict_logits(model: nn.Module, split: Split, batch_size: int = 500) -> torch.Tensor:
    model.eval()
    return torch.cat([model(split.images[i:i + batch_size]) for i in range(0, len(split), batch_size)])


def evaluate_accuracy(model: nn.Module, split: Split, teacher_classes: Sequence[str] | None = None) -> float:
    """Top-1 accuracy over the whole split.

    ``teacher_classes`` restricts a wider classifier to the split's classes
    (used when a full-dataset teacher is scored on a subset).
    """
    if len(split) == 0:
        raise ValueError("cannot evaluate on an empty split")
    logits = predict_logits(model, split)
    if teacher_classes is not None or logits.shape[-1] != split.num_classes:
        logits = restrict_teacher_logits(logits, split.subset, teacher_classes)
    return float((logits.argmax(-1) == split.labels).double().mean())


# ---------------------------------------------------------------------------
# latency


@dataclass
class LatencyMeasurement:
    median_seconds: float
    samples: int
    warmup: int
    batch_size: int
    device_label: str
    timings: list[float] = field(default_factory=list, repr=False)


def median_seconds(timings: Sequence[float]) -> float:
    return float(statistics.median(timings))


def _sync(device: torch.device) -> None:
    if device.type == "cuda":
        torch.cuda.synchronize(device)


def measure_latency(model: nn.Module, input_shape: Sequence[int], warmup: int = 10, samples: int = 50,
                    batch_size: int = 1, device: str | torch.device = "cpu") -> LatencyMeasurement:
    """Median wall-clock time of a single forward pass on ``device``.

    The first ``warmup`` passes are discarded. The device is synchronized
    before starting and after stopping each timer, and the whole measurement
    holds :data:`DEVICE_LOCK`.
    """
    if warmup < 1 or samples < 5:
        raise ValueError("latency measurement needs warmup >= 1 and samples >= 5")
    device = torch.device(device)
    if device.type == "cuda" and not torch.cuda.is_available():
        raise RuntimeError("CUDA device requested but not available")
    model = model.to(device).eval()
    x = torch.randn(batch_size, *input_shape, device=device)
    timings = []
    with DEVICE_LOCK, torch.no_grad():
        for _ in range(warmup):
            model(x)
        for _ in range(samples):
            _sync(device)
            start = time.perf_counter()
            model(x)
            _sync(device)
            timings.append(time.perf_counter() - start)
    label = torch.cuda.get_device_name(device) if device.type == "cuda" else "cpu"
    med = median_seconds(timings)
    if not math.isfinite(med) or med <= 0:
        raise RuntimeError(f"implausible latency measurement {med}")
    return LatencyMeasurement(med, samples, warmup, batch_size, label, timings)
