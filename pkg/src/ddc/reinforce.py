"""REINFORCE search over layer-removal policies.

Each iteration samples student architectures from the policy, trains and
scores them, and takes one policy-gradient step on the baselined terminal
rewards. The baseline is an exponential moving average of past rewards.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .arch import (
    AllLayersRemovedError, ArchitectureSpec, InvalidArchitectureError, arch_from_dict,
    arch_to_dict, check, derive_student, encode_architecture, save_arch,
)
from .config import CompressionRunConfig, dumps_config
from .distill import LatencyMeasurement, StudentTrainingError
from .policy import PolicyNetwork, Trajectory, sample_trajectories
from .reward import RewardBreakdown, TeacherReference, Thresholds, combined_reward, failure_reward

log = logging.getLogger(__name__)


class CheckpointMismatchError(ValueError):
    """A policy checkpoint does not fit the teacher it is applied to."""


@dataclass(frozen=True)
class BaselineState:
    value: float = 0.0
    decay: float = 0.9
    initialized: bool = False

    def __post_init__(self):
        if not 0.0 < self.decay < 1.0:
            raise ValueError("baseline decay must lie in (0, 1)")


def update_baseline(state: BaselineState, rewards: Sequence[float]) -> BaselineState:
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.size == 0 or not np.isfinite(rewards).all():
        raise ValueError("baseline update needs a non-empty set of finite rewards")
    mean = float(rewards.mean())
    if not state.initialized:
        return replace(state, value=mean, initialized=True)
    return replace(state, value=state.decay * state.value + (1.0 - state.decay) * mean)


def policy_gradient_loss(log_probs: torch.Tensor | Sequence[Trajectory], rewards: Sequence[float],
                         baseline: BaselineState | float) -> torch.Tensor:
    """Surrogate ``-(1/N) sum_i (R_i - b) log pi(a_i)``.

    ``log_probs`` holds each trajectory's summed log-probability; pass the
    differentiable tensor from :meth:`PolicyNetwork.log_prob` to get the
    baselined REINFORCE gradient from ``backward()``.
    """
    if not isinstance(log_probs, torch.Tensor):
        log_probs = torch.tensor([t.log_prob for t in log_probs], dtype=torch.float64)
    r = torch.as_tensor(np.asarray(rewards, dtype=np.float64), dtype=log_probs.dtype)
    if r.numel() == 0 or r.numel() != log_probs.numel():
        raise ValueError("need one reward per trajectory and at least one trajectory")
    if not torch.isfinite(r).all():
        raise ValueError("rewards must be finite")
    b = baseline.value if isinstance(baseline, BaselineState) else float(baseline)
    return -((r - b) * log_probs).mean()


# ---------------------------------------------------------------------------
# records


@dataclass
class EvaluationRecord:
    actions: tuple[int, ...] | None
    accuracy: float
    latency: float
    parameters: int
    reward: float
    reward_components: tuple[float, float, float]
    train_epochs: int
    failed: bool = False
    error: str = ""
    arch: dict | None = None
    loss_curve: list[float] = field(default_factory=list)
    latency_detail: dict | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["actions"] = list(self.actions) if self.actions is not None else None
        d["reward_components"] = list(self.reward_components)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvaluationRecord":
        d = dict(d)
        d["actions"] = tuple(d["actions"]) if d.get("actions") is not None else None
        d["reward_components"] = tuple(d["reward_components"])
        return cls(**d)


def make_record(actions, accuracy: float, latency: float, parameters: int, ref: TeacherReference,
                th: Thresholds, train_epochs: int, **extra) -> EvaluationRecord:
    r = combined_reward(accuracy, latency, parameters, ref, th)
    return EvaluationRecord(None if actions is None else tuple(actions), float(accuracy), float(latency),
                            int(parameters), r.reward, r.components, train_epochs, **extra)


def failed_record(actions, ref: TeacherReference, th: Thresholds, error: str) -> EvaluationRecord:
    r: RewardBreakdown = failure_reward(ref, th)
    return EvaluationRecord(tuple(actions), 0.0, ref.latency, ref.parameters, r.reward, r.components,
                            0, failed=True, error=error)


@dataclass
class IterationLog:
    iteration: int
    records: list[EvaluationRecord]
    baseline_before: float | None
    baseline_after: float
    policy_loss: float

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "records": [r.to_dict() for r in self.records],
            "baseline_before": self.baseline_before,
            "baseline_after": self.baseline_after,
            "policy_loss": self.policy_loss,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "IterationLog":
        return cls(d["iteration"], [EvaluationRecord.from_dict(r) for r in d["records"]],
                   d["baseline_before"], d["baseline_after"], d["policy_loss"])

    @property
    def mean_reward(self) -> float:
        return float(np.mean([r.reward for r in self.records]))


def read_iterations(path: str | Path) -> list[IterationLog]:
    with open(path, encoding="utf-8") as fh:
        return [IterationLog.from_dict(json.loads(line)) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class PolicyCheckpoint:
    state_dict: dict[str, torch.Tensor]
    input_width: int
    hidden_width: int
    num_layers: int
    baseline: BaselineState
    iteration: int = 0
    metadata: dict = field(default_factory=dict)

    @classmethod
    def capture(cls, policy: PolicyNetwork, num_layers: int, baseline: BaselineState, iteration: int,
                **metadata) -> "PolicyCheckpoint":
        state = {k: v.detach().clone() for k, v in policy.state_dict().items()}
        return cls(state, policy.input_width, policy.hidden_width, num_layers, baseline, iteration, metadata)

    def build_policy(self) -> PolicyNetwork:
        dtype = next(iter(self.state_dict.values())).dtype
        policy = PolicyNetwork(self.input_width, self.hidden_width).to(dtype)
        policy.load_state_dict(self.state_dict)
        return policy

    def check_compatible(self, encoding: np.ndarray) -> None:
        if encoding.shape[1] != self.input_width:
            raise CheckpointMismatchError(
                f"checkpoint input width {self.input_width} != teacher encoding width {encoding.shape[1]}")
        if encoding.shape[0] != self.num_layers:
            raise CheckpointMismatchError(
                f"checkpoint was trained on {self.num_layers} removable layers, teacher has {encoding.shape[0]}")

    def save(self, path: str | Path) -> None:
        torch.save({
            "parameters": self.state_dict,
            "input_width": self.input_width,
            "hidden_width": self.hidden_width,
            "num_layers": self.num_layers,
            "baseline": asdict(self.baseline),
            "iteration": self.iteration,
            "metadata": self.metadata,
        }, path)

    @classmethod
    def load(cls, path: str | Path) -> "PolicyCheckpoint":
        d = torch.load(path, map_location="cpu", weights_only=True)
        return cls(d["parameters"], d["input_width"], d["hidden_width"], d["num_layers"],
                   BaselineState(**d["baseline"]), d["iteration"], d.get("metadata", {}))


# ---------------------------------------------------------------------------
# the search loop


@dataclass
class StudentOutcome:
    accuracy: float
    latency: float
    parameters: int
    train_epochs: int
    model: torch.nn.Module | None = None
    loss_curve: list[float] = field(default_factory=list)
    latency_detail: LatencyMeasurement | None = None


# (student architecture, training seed) -> measured outcome
Evaluator = Callable[[ArchitectureSpec, int], StudentOutcome]


@dataclass
class CompressionTask:
    """Everything the loop needs about the teacher, independent of data handling."""

    teacher_arch: ArchitectureSpec
    reference: TeacherReference
    evaluator: Evaluator
    num_classes: int | None = None


@dataclass
class CompressionResult:
    best: EvaluationRecord | None
    checkpoint: PolicyCheckpoint
    logs: list[IterationLog]
    best_model: torch.nn.Module | None = None


def _student_seed(seed: int, iteration: int, slot: int) -> int:
    return (seed * 1_000_003 + iteration * 1_009 + slot) % (2**31 - 1)


def _evaluate(task: CompressionTask, th: Thresholds, actions: tuple[int, ...],
              seed: int) -> tuple[EvaluationRecord, torch.nn.Module | None]:
    try:
        student = derive_student(task.teacher_arch, actions)
        if task.num_classes is not None and task.num_classes != student.num_classes:
            student = student.with_num_classes(task.num_classes)
        check(student)
        out = task.evaluator(student, seed)
    except (AllLayersRemovedError, InvalidArchitectureError, StudentTrainingError) as exc:
        return failed_record(actions, task.reference, th, f"{type(exc).__name__}: {exc}"), None
    detail = None
    if out.latency_detail is not None:
        detail = {k: v for k, v in asdict(out.latency_detail).items() if k != "timings"}
    rec = make_record(actions, out.accuracy, out.latency, out.parameters, task.reference, th,
                      out.train_epochs, arch=arch_to_dict(student), loss_curve=list(out.loss_curve),
                      latency_detail=detail)
    return rec, out.model


def run_compression(config: CompressionRunConfig, warm_start: PolicyCheckpoint | None = None, *,
                    task: CompressionTask, persist: bool = True) -> CompressionResult:
    """Search for a compressed student of ``task.teacher_arch``.

    With ``persist`` the run directory receives ``config.snapshot``,
    ``iterations.jsonl``, ``checkpoints/iter_<k>`` and ``best/``. A
    ``warm_start`` checkpoint supplies the initial policy and baseline.
    """
    encoding = encode_architecture(task.teacher_arch)
    pc = config.policy
    if warm_start is not None:
        warm_start.check_compatible(encoding)
        policy = warm_start.build_policy()
        baseline = warm_start.baseline
        start_iteration = warm_start.iteration
    else:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            policy = PolicyNetwork(encoding.shape[1], pc.hidden_width, pc.head_bias).double()
        baseline = BaselineState(decay=pc.baseline_decay)
        start_iteration = 0
    opt = torch.optim.SGD(policy.parameters(), lr=pc.learning_rate, momentum=pc.momentum)
    rng = np.random.default_rng(config.seed)
    th = config.thresholds

    run_dir = Path(config.run_dir)
    if persist:
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        (run_dir / "config.snapshot").write_text(dumps_config(config), encoding="utf-8")
        (run_dir / "iterations.jsonl").write_text("", encoding="utf-8")
        (run_dir / "teacher.json").write_text(json.dumps(asdict(task.reference)) + "\n", encoding="utf-8")

    def checkpoint(iteration: int) -> PolicyCheckpoint:
        return PolicyCheckpoint.capture(policy, encoding.shape[0], baseline, iteration,
                                        seed=config.seed, name=config.name)

    logs: list[IterationLog] = []
    best: EvaluationRecord | None = None
    best_model = None
    workers = max(1, config.parallel_workers)
    for k in range(config.iterations):
        trajectories = sample_trajectories(policy, encoding, config.students_per_iteration, rng)
        seeds = [_student_seed(config.seed, start_iteration + k, i) for i in range(len(trajectories))]
        jobs = [(t.actions, s) for t, s in zip(trajectories, seeds)]
        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                results = list(pool.map(lambda j: _evaluate(task, th, *j), jobs))
        else:
            results = [_evaluate(task, th, *j) for j in jobs]
        records = [r for r, _ in results]
        rewards = [r.reward for r in records]

        before = baseline.value if baseline.initialized else None
        if pc.baseline_update_before or not baseline.initialized:
            b = update_baseline(baseline, rewards).value
        else:
            b = baseline.value
        actions = np.array([t.actions for t in trajectories], dtype=np.float64)
        loss = policy_gradient_loss(policy.log_prob(encoding, actions), rewards, b)
        opt.zero_grad()
        loss.backward()
        opt.step()
        baseline = update_baseline(baseline, rewards)

        entry = IterationLog(start_iteration + k, records, before, baseline.value, loss.item())
        logs.append(entry)
        for rec, model in results:
            if best is None or rec.reward > best.reward:
                best, best_model = rec, model
                if persist and model is not None:
                    write_best(run_dir, rec, model)
        log.info("iteration %d: mean reward %.4g, best %.4g, baseline %.4g",
                 entry.iteration, entry.mean_reward, best.reward, baseline.value)
        if persist:
            with open(run_dir / "iterations.jsonl", "a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry.to_dict()) + "\n")
            checkpoint(start_iteration + k + 1).save(run_dir / "checkpoints" / f"iter_{start_iteration + k}")

    final = checkpoint(start_iteration + config.iterations)
    if persist:
        final.save(run_dir / "checkpoints" / "final")
    return CompressionResult(best, final, logs, best_model)


def write_best(run_dir: Path, record: EvaluationRecord, model: torch.nn.Module) -> None:
    best_dir = run_dir / "best"
    best_dir.mkdir(parents=True, exist_ok=True)
    save_arch(arch_from_dict(record.arch), best_dir / "arch.json")
    torch.save(model.state_dict(), best_dir / "model_weights")
    (best_dir / "record.json").write_text(json.dumps(record.to_dict()) + "\n", encoding="utf-8")


def transfer_policy(source: PolicyCheckpoint, target_config: CompressionRunConfig, *,
                    task: CompressionTask, iterations: int | None = None,
                    persist: bool = True) -> CompressionResult:
    """Warm-start a search on ``task`` (typically a class subset) from ``source``.

    The iteration budget defaults to ``target_config.transfer.iterations``.
    """
    budget = target_config.transfer.iterations if iterations is None else iterations
    return run_compression(replace(target_config, iterations=budget), source, task=task, persist=persist)

