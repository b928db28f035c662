from __future__ import annotations

import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from torch import nn

from ddc.arch import assemble, conv, desk_sequential, flatten, maxpool
from ddc.data import SubsetSpec, load_split
from ddc.distill import (
    DistillConfig, StudentTrainingError, evaluate_accuracy, kd_loss, measure_latency, train_student,
)
from ddc.model import build_model


def test_hand_computed_two_class_example():
    student = torch.log(torch.tensor([[0.5, 0.5]], dtype=torch.float64))
    teacher = torch.log(torch.tensor([[0.9, 0.1]], dtype=torch.float64))
    labels = torch.tensor([0])
    soft = 0.5 * math.log(0.5 / 0.9) + 0.5 * math.log(0.5 / 0.1)
    hard = -math.log(0.5)
    assert soft == pytest.approx(0.51083, abs=1e-5)
    total = kd_loss(student, teacher, labels, DistillConfig(lambda_soft=0.7)).item()
    assert total == pytest.approx(0.7 * soft + 0.3 * hard, abs=1e-12)
    assert total == pytest.approx(0.56553, abs=1e-5)


def test_limits_are_exact():
    gen = torch.Generator().manual_seed(0)
    s = torch.randn(6, 5, generator=gen, dtype=torch.float64)
    t = torch.randn(6, 5, generator=gen, dtype=torch.float64)
    y = torch.randint(0, 5, (6,), generator=gen)
    ce = F.cross_entropy(s, y)
    assert torch.equal(kd_loss(s, t, y, DistillConfig(lambda_soft=0.0)), ce)
    assert kd_loss(s, s.clone(), y, DistillConfig(lambda_soft=0.7)).item() == pytest.approx(0.3 * ce.item(), abs=1e-15)
    assert torch.equal(kd_loss(s, t, y, DistillConfig(mode="hard_only")), ce)
    assert torch.equal(kd_loss(s, None, y), ce)


def test_soft_term_is_student_first_kl():
    gen = torch.Generator().manual_seed(1)
    s = torch.randn(4, 3, generator=gen, dtype=torch.float64)
    t = torch.randn(4, 3, generator=gen, dtype=torch.float64)
    y = torch.zeros(4, dtype=torch.long)
    p, q = s.softmax(-1).numpy(), t.softmax(-1).numpy()
    kl = np.mean(np.sum(p * np.log(p / q), axis=1))
    got = kd_loss(s, t, y, DistillConfig(lambda_soft=1.0)).item()
    assert got == pytest.approx(kl, abs=1e-12)


def test_kd_loss_gradient_matches_finite_differences():
    gen = torch.Generator().manual_seed(2)
    s = torch.randn(3, 4, generator=gen, dtype=torch.float64, requires_grad=True)
    t = torch.randn(3, 4, generator=gen, dtype=torch.float64)
    y = torch.tensor([0, 2, 3])
    cfg = DistillConfig(temperature=2.0)
    kd_loss(s, t, y, cfg).backward()
    eps = 1e-6
    numeric = torch.zeros_like(s)
    with torch.no_grad():
        for idx in np.ndindex(*s.shape):
            base = s.detach().clone()
            base[idx] += eps
            up = kd_loss(base, t, y, cfg).item()
            base[idx] -= 2 * eps
            down = kd_loss(base, t, y, cfg).item()
            numeric[idx] = (up - down) / (2 * eps)
    rel = (s.grad - numeric).norm() / max(s.grad.norm(), numeric.norm())
    assert rel < 1e-3


def test_kd_loss_errors():
    s = torch.zeros(2, 3)
    with pytest.raises(ValueError):
        kd_loss(torch.full((2, 3), float("nan")), s, torch.zeros(2, dtype=torch.long))
    with pytest.raises(ValueError):
        kd_loss(s, torch.zeros(2, 4), torch.zeros(2, dtype=torch.long))
    with pytest.raises(ValueError):
        DistillConfig(lambda_soft=1.5)
    with pytest.raises(ValueError):
        DistillConfig(mode="soft_only")


def tiny_student():
    return assemble([conv(8), maxpool(4), conv(8), maxpool(8), flatten()], 2)


@pytest.fixture(scope="module")
def pair(synthetic_root):
    spec = SubsetSpec("cifar10", "pair", ("airplane", "automobile"))
    return load_split(spec, "train", synthetic_root, shuffle_seed=0), load_split(spec, "test", synthetic_root)


def test_zero_epochs_returns_initial_model(pair):
    train, _ = pair
    fresh = build_model(tiny_student(), seed=3)
    model, losses = train_student(tiny_student(), None, train, DistillConfig(epochs=0), seed=3)
    assert losses == []
    for a, b in zip(model.parameters(), fresh.parameters()):
        assert torch.equal(a, b)


def test_training_reduces_loss_and_is_deterministic(pair):
    train, _ = pair
    train = train.take(500)
    teacher = build_model(desk_sequential(), seed=0)
    cfg = DistillConfig(epochs=3, learning_rate=0.01, batch_size=32)
    _, l1 = train_student(tiny_student(), teacher, train, cfg, seed=5, teacher_classes=("airplane", "automobile"))
    _, l2 = train_student(tiny_student(), teacher, train, cfg, seed=5, teacher_classes=("airplane", "automobile"))
    assert l1 == l2
    assert l1[-1] < l1[0]


def test_divergence_raises(pair):
    train, _ = pair
    cfg = DistillConfig(epochs=2, learning_rate=1e30, batch_size=64)
    with pytest.raises(StudentTrainingError):
        train_student(tiny_student(), None, train.take(256), cfg, seed=0)
    broken = build_model(tiny_student(), seed=0)
    with torch.no_grad():
        broken.layers[0].weight.fill_(float("inf"))
    with pytest.raises(StudentTrainingError):
        train_student(tiny_student(), None, train.take(64), DistillConfig(epochs=1), model=broken)


class Constant(nn.Module):
    def __init__(self, k, cls):
        super().__init__()
        self.k, self.cls = k, cls

    def forward(self, x):
        out = torch.zeros(len(x), self.k)
        out[:, self.cls] = 1.0
        return out


class Oracle(nn.Module):
    def __init__(self, split):
        super().__init__()
        self.lookup = {x.numpy().tobytes(): int(y) for x, y in zip(split.images, split.labels)}
        self.k = split.num_classes

    def forward(self, x):
        return F.one_hot(torch.tensor([self.lookup[v.numpy().tobytes()] for v in x]), self.k).float()


def test_accuracy_stubs(synthetic_root):
    spec = SubsetSpec("cifar10", "all", ("airplane", "automobile", "bird", "cat", "deer", "dog", "frog",
                                         "horse", "ship", "truck"))
    test = load_split(spec, "test", synthetic_root)
    assert evaluate_accuracy(Constant(10, 4), test) == pytest.approx(0.1)
    assert evaluate_accuracy(Oracle(test), test) == 1.0
    with pytest.raises(ValueError):
        evaluate_accuracy(Constant(10, 0), test.take(0))


def test_latency_contract_and_ordering():
    small = assemble([conv(16), flatten()], 2, input_shape=(3, 16, 16))
    big = assemble([*(conv(16) for _ in range(11)), flatten()], 2, input_shape=(3, 16, 16))
    m = measure_latency(build_model(small, 0), small.input_shape, warmup=3, samples=5)
    assert m.samples == 5 and len(m.timings) == 5 and m.device_label == "cpu"
    a = measure_latency(build_model(small, 0), small.input_shape, warmup=5, samples=31)
    b = measure_latency(build_model(big, 0), big.input_shape, warmup=5, samples=31)
    assert a.median_seconds < b.median_seconds
    with pytest.raises(ValueError):
        measure_latency(build_model(small, 0), small.input_shape, samples=4)


def test_latency_repeatability():
    arch = desk_sequential()
    model = build_model(arch, 0)
    runs = sorted(measure_latency(model, arch.input_shape, warmup=10, samples=51).median_seconds for _ in range(3))
    # the two closest of three runs agree within 20%
    gaps = [runs[1] / runs[0], runs[2] / runs[1]]
    assert min(gaps) < 1.2


@pytest.mark.skipif(torch.cuda.is_available(), reason="needs a machine without CUDA")
def test_missing_device_rejected():
    with pytest.raises(RuntimeError):
        measure_latency(build_model(desk_sequential(), 0), (3, 32, 32), device="cuda")
