"""Bidirectional LSTM policy over an encoded teacher architecture.

The network reads the per-layer feature rows in both directions and, for
every removable layer, combines the forward state, the backward state and
the raw layer features into one keep-logit. Actions are independent
Bernoulli draws given the encoding.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F


@dataclass(frozen=True)
class Trajectory:
    actions: tuple[int, ...]
    step_log_probs: tuple[float, ...]

    @property
    def log_prob(self) -> float:
        return float(sum(self.step_log_probs))


def standardize_features(x: torch.Tensor) -> torch.Tensor:
    """Z-score every feature column across layers; constant columns become 0.

    Features shared by all layers (kernel size 3 everywhere, say) would
    otherwise dominate the gradient and push every keep-probability the same
    way.
    """
    centered = x - x.mean(0, keepdim=True)
    std = centered.pow(2).mean(0, keepdim=True).sqrt()
    return centered / torch.where(std > 1e-12, std, torch.ones_like(std))


class PolicyNetwork(nn.Module):
    def __init__(self, input_width: int, hidden_width: int = 64, head_bias: float = 2.0):
        super().__init__()
        self.input_width = input_width
        self.hidden_width = hidden_width
        # nn.LSTM draws every weight from U(-1/sqrt(hidden), 1/sqrt(hidden))
        self.lstm = nn.LSTM(input_width, hidden_width, batch_first=True, bidirectional=True)
        self.head = nn.Linear(2 * hidden_width + input_width, 1)
        nn.init.constant_(self.head.bias, head_bias)

    @property
    def dtype(self) -> torch.dtype:
        return self.head.weight.dtype

    def as_tensor(self, encoding) -> torch.Tensor:
        x = torch.as_tensor(np.asarray(encoding), dtype=self.dtype)
        if x.ndim != 2 or x.shape[0] == 0:
            raise ValueError(f"encoding must be a non-empty (layers, features) matrix, got {tuple(x.shape)}")
        if x.shape[1] != self.input_width:
            raise ValueError(f"encoding width {x.shape[1]} != policy input width {self.input_width}")
        return x

    def logits(self, encoding) -> torch.Tensor:
        """Keep-logit per layer, shape ``(layers,)``."""
        x = standardize_features(self.as_tensor(encoding)).unsqueeze(0)
        states, _ = self.lstm(x)
        return self.head(torch.cat([states, x], dim=-1)).squeeze(0).squeeze(-1)

    def log_prob(self, encoding, actions) -> torch.Tensor:
        """Differentiable ``sum_t log pi(a_t)`` for each row of ``actions``.

        ``actions`` is ``(layers,)`` or ``(batch, layers)``; the result has the
        matching leading shape.
        """
        logit = self.logits(encoding)
        a = torch.as_tensor(np.asarray(actions), dtype=logit.dtype)
        if a.shape[-1] != logit.shape[0]:
            raise ValueError(f"{a.shape[-1]} actions for {logit.shape[0]} removable layers")
        steps = a * F.logsigmoid(logit) + (1 - a) * F.logsigmoid(-logit)
        return steps.sum(-1)


def action_probabilities(policy: PolicyNetwork, encoding) -> np.ndarray:
    with torch.no_grad():
        return torch.sigmoid(policy.logits(encoding)).double().numpy()


def sample_trajectories(policy: PolicyNetwork, encoding, n: int,
                        rng: np.random.Generator | int | None = None) -> list[Trajectory]:
    """Draw ``n`` keep/remove vectors; ``rng`` may be a Generator or a seed."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    with torch.no_grad():
        logit = policy.logits(encoding).double()
        log_keep = F.logsigmoid(logit).numpy()
        log_drop = F.logsigmoid(-logit).numpy()
        p_keep = torch.sigmoid(logit).numpy()
    draws = rng.random((n, len(p_keep))) < p_keep
    out = []
    for row in draws:
        steps = np.where(row, log_keep, log_drop)
        out.append(Trajectory(tuple(int(v) for v in row), tuple(float(v) for v in steps)))
    return out


def trajectory_log_prob(policy: PolicyNetwork, encoding, actions: Sequence[int]) -> float:
    with torch.no_grad():
        return float(policy.log_prob(encoding, list(actions)))
