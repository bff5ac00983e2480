"""Key-frame selection environment.

States carry the masked difference between a clean video and a sample of
another class; actions delete one frame from the mask.  An episode ends
when a repeated frame is chosen (reward -1, no query) or when deleting a
frame breaks the adversarial condition (reward 0).  Surviving deletions
earn reward 1 during pretraining or the target-class probability during
fine-tuning.  States are immutable; every step returns a new one.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ContractViolation, InputRejected, InvalidStart
from .video import clamp01, frame_zero, hadamard

UNTARGETED = "untargeted"
TARGETED = "targeted"
PRETRAIN = "pretrain"
FINETUNE = "finetune"


def is_adversarial(label: int, mode: str, true_label: int, target_label: int | None) -> bool:
    if mode == UNTARGETED:
        return label != true_label
    return label == target_label


@dataclass(frozen=True)
class MdpState:
    diff: np.ndarray
    mask: np.ndarray
    deleted: tuple[int, ...]
    mode: str
    phase: str
    x: np.ndarray
    target_video: np.ndarray
    true_label: int
    target_label: int | None
    terminal: bool
    adv_mask: np.ndarray  # last mask whose perturbation was still adversarial

    @property
    def frames(self) -> int:
        return self.diff.shape[0]


@dataclass(frozen=True)
class StepResult:
    next_state: MdpState
    reward: float
    terminal: bool
    oracle_queries_used: int


def reset(
    oracle,
    x: np.ndarray,
    target_video: np.ndarray,
    spatial_mask: np.ndarray,
    mode: str,
    phase: str,
    true_label: int,
    target_label: int | None = None,
) -> MdpState:
    """Build the start state; costs one validation query.

    Raises InvalidStart when the masked difference is not adversarial
    (the caller should resample the paired video).
    """
    if mode not in (UNTARGETED, TARGETED):
        raise InputRejected(f"unknown mode {mode!r}")
    if phase not in (PRETRAIN, FINETUNE):
        raise InputRejected(f"unknown phase {phase!r}")
    if phase == FINETUNE and mode != TARGETED:
        raise InputRejected("fine-tuning rewards are defined for targeted mode only")
    if mode == TARGETED and target_label is None:
        raise InputRejected("targeted mode needs a target label")
    if x.shape != target_video.shape or x.shape != spatial_mask.shape:
        raise InputRejected("video / mask shapes do not match")

    diff = hadamard(target_video - x, spatial_mask)
    if not diff.any():
        raise InvalidStart("masked difference is zero; cannot be adversarial")
    verdict = oracle.query(clamp01(x + diff))
    if not is_adversarial(verdict.label, mode, true_label, target_label):
        raise InvalidStart("start state is terminal; resample the paired video")
    return MdpState(
        diff=diff, mask=spatial_mask, deleted=(), mode=mode, phase=phase,
        x=x, target_video=target_video, true_label=true_label,
        target_label=target_label, terminal=False, adv_mask=spatial_mask,
    )


def step(state: MdpState, action: int, oracle) -> StepResult:
    """Apply one frame deletion.  Duplicate actions terminate without a query."""
    if state.terminal:
        raise ContractViolation("step on a terminal state")
    if not 0 <= action < state.frames:
        raise InputRejected(f"action {action} out of range for T={state.frames}")

    if action in state.deleted:
        ended = replace(state, terminal=True)
        return StepResult(ended, -1.0, True, 0)

    new_mask = frame_zero(state.mask, action)
    new_diff = state.diff.copy()
    new_diff[action] = 0.0
    deleted = state.deleted + (action,)
    verdict = oracle.query(clamp01(state.x + new_diff))
    survived = is_adversarial(verdict.label, state.mode, state.true_label,
                              state.target_label)
    if survived:
        reward = 1.0 if state.phase == PRETRAIN else verdict.prob
        # Cap at T steps; by construction the T-th deletion is terminal anyway.
        terminal = len(deleted) >= state.frames
        nxt = replace(state, diff=new_diff, mask=new_mask, deleted=deleted,
                      terminal=terminal, adv_mask=new_mask)
        return StepResult(nxt, reward, terminal, 1)
    nxt = replace(state, diff=new_diff, mask=new_mask, deleted=deleted,
                  terminal=True)
    return StepResult(nxt, 0.0, True, 1)


def episode_mask(state: MdpState) -> np.ndarray:
    """The last mask whose masked perturbation was still adversarial."""
    if not state.terminal:
        raise ContractViolation("episode_mask on a non-terminal state")
    return state.adv_mask
