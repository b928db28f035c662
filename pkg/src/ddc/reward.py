"""Thresholded sigmoid rewards over accuracy, latency and parameter count.

Each component maps a student/teacher ratio through a logistic curve centred
on a user threshold, so the reward is 0.5 exactly at the threshold and
saturates on either side. The final reward is the product of the three.
"""
from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class Thresholds:
    a_th: float = 0.9
    t_th: float = 0.3
    c_th: float = 0.6
    steepness: float = 15.0

    def __post_init__(self):
        for name in ("a_th", "t_th", "c_th", "steepness"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be finite and > 0, got {value}")


@dataclass(frozen=True)
class TeacherReference:
    accuracy: float
    latency: float
    parameters: int

    def __post_init__(self):
        for name in ("accuracy", "latency", "parameters"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"teacher {name} must be finite and > 0, got {value}")


@dataclass(frozen=True)
class RewardBreakdown:
    reward: float
    accuracy: float
    latency: float
    size: float

    @property
    def components(self) -> tuple[float, float, float]:
        return (self.accuracy, self.latency, self.size)


DEFAULT_THRESHOLDS = Thresholds()


def _logistic_decreasing(z: float) -> float:
    """``1 / (1 + exp(z))`` without overflow for large ``|z|``."""
    if z >= 0:
        e = math.exp(-z)
        return e / (1.0 + e)
    return 1.0 / (1.0 + math.exp(z))


def _finite(name: str, value: float) -> float:
    value = float(value)
    if not math.isfinite(value):
        raise ValueError(f"{name} must be finite, got {value}")
    return value


def accuracy_reward(a: float, ref: TeacherReference, th: Thresholds = DEFAULT_THRESHOLDS) -> float:
    """``1 - 1 / (1 + exp(steepness * (a / A_teacher - a_th)))``; increasing in ``a``."""
    a = _finite("accuracy", a)
    if a < 0:
        raise ValueError("accuracy must be >= 0")
    # 1 - 1/(1+e^z) == 1/(1+e^-z)
    return _logistic_decreasing(-th.steepness * (a / ref.accuracy - th.a_th))


def latency_reward(t: float, ref: TeacherReference, th: Thresholds = DEFAULT_THRESHOLDS) -> float:
    t = _finite("latency", t)
    if t < 0:
        raise ValueError("latency must be >= 0")
    return _logistic_decreasing(th.steepness * (t / ref.latency - th.t_th))


def size_reward(c: float, ref: TeacherReference, th: Thresholds = DEFAULT_THRESHOLDS) -> float:
    c = _finite("parameter count", c)
    if c < 0:
        raise ValueError("parameter count must be >= 0")
    return _logistic_decreasing(th.steepness * (c / ref.parameters - th.c_th))


def combined_reward(a: float, t: float, c: float, ref: TeacherReference,
                    th: Thresholds = DEFAULT_THRESHOLDS) -> RewardBreakdown:
    r1 = accuracy_reward(a, ref, th)
    r2 = latency_reward(t, ref, th)
    r3 = size_reward(c, ref, th)
    return RewardBreakdown(r1 * r2 * r3, r1, r2, r3)


def failure_reward(ref: TeacherReference, th: Thresholds = DEFAULT_THRESHOLDS) -> RewardBreakdown:
    """Penalty for students that could not be built or trained.

    Scored as a zero-accuracy model with the teacher's latency and size, which
    keeps the reward strictly positive and continuous with real evaluations.
    """
    return combined_reward(0.0, ref.latency, ref.parameters, ref, th)
