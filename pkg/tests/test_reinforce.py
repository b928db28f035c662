from __future__ import annotations

import itertools
import json

import numpy as np
import pytest
import torch

from ddc.arch import count_parameters, desk_residual, desk_sequential, encode_architecture
from ddc.config import CompressionRunConfig, PolicyConfig
from ddc.policy import PolicyNetwork, Trajectory
from ddc.reinforce import (
    BaselineState, CheckpointMismatchError, CompressionTask, EvaluationRecord, IterationLog, PolicyCheckpoint,
    StudentOutcome, policy_gradient_loss, read_iterations, run_compression, transfer_policy, update_baseline,
)
from ddc.reward import TeacherReference, failure_reward


# ---------------------------------------------------------------------------
# loss and baseline arithmetic


def test_loss_zero_when_rewards_equal_baseline():
    theta = torch.tensor([0.3, -0.2], dtype=torch.float64, requires_grad=True)
    logp = torch.stack([theta.sum(), theta[0] - theta[1], -theta.sum()])
    loss = policy_gradient_loss(logp, [0.4, 0.4, 0.4], BaselineState(0.4, initialized=True))
    loss.backward()
    assert loss.item() == 0.0
    assert torch.count_nonzero(theta.grad) == 0


def test_loss_single_trajectory_value():
    assert policy_gradient_loss(torch.tensor([-2.0]), [1.0], 0.0).item() == pytest.approx(2.0)
    traj = Trajectory((1, 0), (-1.5, -0.5))
    assert policy_gradient_loss([traj], [1.0], 0.0).item() == pytest.approx(2.0)


@pytest.mark.parametrize("rewards", [[], [1.0, float("nan")], [float("inf"), 0.0]])
def test_loss_rejects_bad_rewards(rewards):
    with pytest.raises(ValueError):
        policy_gradient_loss(torch.zeros(len(rewards)), rewards, 0.0)


def test_baseline_updates():
    s = update_baseline(BaselineState(), [0.2, 0.4])
    assert s.initialized and s.value == pytest.approx(0.3)
    s = update_baseline(BaselineState(0.5, 0.9, True), [0.1])
    assert s.value == pytest.approx(0.46)
    s = BaselineState()
    for _ in range(500):
        s = update_baseline(s, [0.7, 0.7])
    assert s.value == pytest.approx(0.7, abs=1e-12)
    with pytest.raises(ValueError):
        update_baseline(s, [])
    with pytest.raises(ValueError):
        BaselineState(decay=1.0)


# ---------------------------------------------------------------------------
# unbiasedness on a two-layer bandit


REWARD_TABLE = {(0, 0): 0.05, (0, 1): 0.6, (1, 0): 0.2, (1, 1): 0.9}


@pytest.mark.parametrize("baseline", [0.0, 0.45], ids=["no_baseline", "baseline"])
def test_reinforce_gradient_matches_exact(baseline):
    torch.manual_seed(0)
    policy = PolicyNetwork(7, hidden_width=8, head_bias=0.3).double()
    enc = np.random.default_rng(0).normal(size=(2, 7))
    params = list(policy.parameters())

    def flat_grad(scalar):
        grads = torch.autograd.grad(scalar, params, allow_unused=True, retain_graph=True)
        return torch.cat([(g if g is not None else torch.zeros_like(p)).reshape(-1) for g, p in zip(grads, params)])

    outcomes = list(itertools.product((0, 1), repeat=2))
    logp = {a: policy.log_prob(enc, list(a)) for a in outcomes}
    exact = flat_grad(sum(logp[a].exp() * REWARD_TABLE[a] for a in outcomes))

    n = 10_000
    probs = torch.sigmoid(policy.logits(enc)).detach().numpy()
    rng = np.random.default_rng(1)
    actions = (rng.random((n, 2)) < probs).astype(np.float64)
    rewards = [REWARD_TABLE[tuple(int(v) for v in row)] for row in actions]
    loss = policy_gradient_loss(policy.log_prob(enc, actions), rewards, baseline)
    estimate = -flat_grad(loss)

    # per-sample terms take only four distinct values, one per outcome
    score = {a: flat_grad(logp[a]) for a in outcomes}
    keys = [tuple(int(v) for v in row) for row in actions]
    counts = {a: keys.count(a) for a in outcomes}
    directions = [exact / exact.norm()]
    gen = torch.Generator().manual_seed(2)
    directions += [d / d.norm() for d in torch.randn(2, exact.numel(), generator=gen, dtype=torch.float64)]
    for d in directions:
        terms = {a: float((REWARD_TABLE[a] - baseline) * score[a] @ d) for a in outcomes}
        mean = sum(counts[a] * terms[a] for a in outcomes) / n
        var = sum(counts[a] * (terms[a] - mean) ** 2 for a in outcomes) / (n - 1)
        se = (var / n) ** 0.5
        assert float(estimate @ d) == pytest.approx(mean, abs=1e-9)
        assert abs(mean - float(exact @ d)) < 3 * se


# ---------------------------------------------------------------------------
# the loop, with a cheap analytic evaluator


def stub_task(teacher=None, flaky=False):
    teacher = teacher or desk_sequential()
    ref = TeacherReference(0.9, 1e-3, count_parameters(teacher))

    def evaluator(arch, seed):
        convs = len(arch.conv_positions)
        if flaky and convs == 1:
            from ddc.distill import StudentTrainingError
            raise StudentTrainingError("diverged")
        params = count_parameters(arch)
        return StudentOutcome(0.9 - 0.02 * (4 - convs), 1e-3 * params / ref.parameters, params, 0)

    return CompressionTask(teacher, ref, evaluator, teacher.num_classes)


def cfg_for(tmp_path, **kw):
    kw.setdefault("policy", PolicyConfig(learning_rate=1.0, head_bias=1.0))
    return CompressionRunConfig(run_dir=str(tmp_path / "run"), iterations=kw.pop("iterations", 5),
                                students_per_iteration=kw.pop("students", 4), **kw)


def test_zero_iterations(tmp_path):
    result = run_compression(cfg_for(tmp_path, iterations=0), task=stub_task())
    assert result.best is None and result.logs == []
    assert result.checkpoint.iteration == 0
    assert read_iterations(tmp_path / "run" / "iterations.jsonl") == []


def test_seeded_runs_identical(tmp_path):
    a = run_compression(cfg_for(tmp_path / "a"), task=stub_task(), persist=False)
    b = run_compression(cfg_for(tmp_path / "b"), task=stub_task(), persist=False)
    assert [l.to_dict() for l in a.logs] == [l.to_dict() for l in b.logs]


def test_failures_are_penalized_not_fatal(tmp_path):
    task = stub_task(flaky=True)
    cfg = cfg_for(tmp_path, iterations=6, students=6, policy=PolicyConfig(head_bias=-1.0))
    result = run_compression(cfg, task=task, persist=False)
    failed = [r for l in result.logs for r in l.records if r.failed]
    assert failed
    penalty = failure_reward(task.reference).reward
    assert all(r.reward == penalty and r.error for r in failed)
    assert len(result.logs) == 6


def test_all_removed_is_penalized(tmp_path):
    cfg = cfg_for(tmp_path, iterations=3, students=8, policy=PolicyConfig(head_bias=-3.0))
    result = run_compression(cfg, task=stub_task(), persist=False)
    errors = [r.error for l in result.logs for r in l.records if r.failed]
    assert any("AllLayersRemovedError" in e for e in errors)


def test_stub_search_improves(tmp_path):
    result = run_compression(cfg_for(tmp_path, iterations=15, students=4), task=stub_task(), persist=False)
    means = [l.mean_reward for l in result.logs]
    assert np.mean(means[-3:]) > np.mean(means[:3])


def test_persisted_layout(tmp_path):
    cfg = cfg_for(tmp_path, iterations=3, students=2)
    task = stub_task(desk_residual())
    task.evaluator = _with_model(task.evaluator)
    result = run_compression(cfg, task=task)
    run = tmp_path / "run"
    logs = read_iterations(run / "iterations.jsonl")
    assert [l.iteration for l in logs] == [0, 1, 2]
    assert (run / "config.snapshot").exists() and (run / "teacher.json").exists()
    assert sorted(p.name for p in (run / "checkpoints").iterdir()) == ["final", "iter_0", "iter_1", "iter_2"]
    best = json.loads((run / "best" / "record.json").read_text())
    assert best["reward"] == pytest.approx(result.best.reward)
    assert (run / "best" / "arch.json").exists() and (run / "best" / "model_weights").exists()


def _with_model(evaluator):
    from ddc.model import build_model

    def fn(arch, seed):
        out = evaluator(arch, seed)
        out.model = build_model(arch, seed)
        return out

    return fn


def test_record_round_trip():
    rec = EvaluationRecord((1, 0), 0.5, 0.01, 100, 0.2, (0.5, 0.6, 0.7), 2, loss_curve=[1.0, 0.5])
    assert EvaluationRecord.from_dict(json.loads(json.dumps(rec.to_dict()))) == rec
    log = IterationLog(3, [rec], None, 0.2, -0.1)
    assert IterationLog.from_dict(json.loads(json.dumps(log.to_dict()))).to_dict() == log.to_dict()


def test_checkpoint_round_trip_and_transfer_noop(tmp_path):
    result = run_compression(cfg_for(tmp_path, iterations=2), task=stub_task(), persist=False)
    path = tmp_path / "ck"
    result.checkpoint.save(path)
    loaded = PolicyCheckpoint.load(path)
    assert loaded.baseline == result.checkpoint.baseline and loaded.iteration == 2
    again = transfer_policy(loaded, cfg_for(tmp_path), task=stub_task(), iterations=0, persist=False)
    for k, v in result.checkpoint.state_dict.items():
        assert torch.equal(v, again.checkpoint.state_dict[k])
    assert again.logs == []


def test_transfer_default_budget(tmp_path):
    source = run_compression(cfg_for(tmp_path, iterations=1), task=stub_task(), persist=False).checkpoint
    result = transfer_policy(source, cfg_for(tmp_path), task=stub_task())
    assert len(read_iterations(tmp_path / "run" / "iterations.jsonl")) == 20 == len(result.logs)
    assert result.logs[0].iteration == 1


def test_checkpoint_mismatch_detected_before_training(tmp_path):
    source = run_compression(cfg_for(tmp_path, iterations=1), task=stub_task(), persist=False).checkpoint
    calls = []
    task = stub_task(desk_residual())
    inner = task.evaluator
    task.evaluator = lambda arch, seed: calls.append(1) or inner(arch, seed)
    with pytest.raises(CheckpointMismatchError):
        transfer_policy(source, cfg_for(tmp_path), task=task, persist=False)
    assert calls == []
    bad = PolicyCheckpoint(source.state_dict, 5, source.hidden_width, source.num_layers, source.baseline)
    with pytest.raises(CheckpointMismatchError):
        bad.check_compatible(encode_architecture(desk_sequential()))
