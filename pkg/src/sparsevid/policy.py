"""Policy and value networks over MDP states, plus action selection.

Both networks share the FrameNet architecture (5 spatial conv layers, 3
FC layers); the policy head emits one logit per frame and the value head
a single scalar.  The final FC layer starts at zero so the untrained
policy is exactly uniform.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputRejected
from .nn import FrameNet


@dataclass(frozen=True)
class ActionDistribution:
    """Frame-selection probabilities for one state."""

    probs: np.ndarray

    def __post_init__(self):
        total = float(self.probs.sum())
        if abs(total - 1.0) > 1e-9 or (self.probs < 0).any():
            raise InputRejected("probabilities must be non-negative and sum to 1")


def build_policy(frames: int, height: int, width: int, channels: int,
                 rng: np.random.Generator) -> FrameNet:
    return FrameNet(frames, height, width, channels, frames, rng)


def build_value(frames: int, height: int, width: int, channels: int,
                rng: np.random.Generator) -> FrameNet:
    return FrameNet(frames, height, width, channels, 1, rng)


def action_probs(net: FrameNet, states: np.ndarray) -> np.ndarray:
    """Batch softmax over frame logits, shape (B, T)."""
    logits = net.forward(states)
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def policy_forward(net: FrameNet, state: np.ndarray) -> ActionDistribution:
    return ActionDistribution(action_probs(net, state)[0])


def state_values(net: FrameNet, states: np.ndarray) -> np.ndarray:
    """Batch scalar value estimates, shape (B,)."""
    return net.forward(states)[:, 0]


def sample_action(dist: ActionDistribution, rng: np.random.Generator) -> tuple[int, float]:
    """Draw a frame index from the distribution; returns (action, log-prob)."""
    cdf = np.cumsum(dist.probs)
    a = int(np.searchsorted(cdf, rng.random(), side="right"))
    a = min(a, len(dist.probs) - 1)
    return a, float(np.log(dist.probs[a]))


def greedy_action(dist: ActionDistribution) -> int:
    """Highest-probability frame; ties resolve to the lowest index."""
    return int(np.argmax(dist.probs))
