"""Policy optimization: GAE advantages, clipped surrogate, rollout training.

The trainer runs the standard loop: N actors collect fixed-length slices
of experience under the current (frozen) parameters, advantages come from
truncated GAE, and the clipped surrogate plus a value MSE are optimized
for K epochs of minibatches with Adam.  Everything is seeded and single
threaded, so two runs with the same config produce identical statistics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import env as mdp
from .errors import InputRejected, InvalidStart, TrainingDiverged
from .nn import Adam, FrameNet, save_checkpoint
from .policy import action_probs, sample_action, state_values, ActionDistribution
from .saliency import SpatialParams, init_spatial_mask


@dataclass(frozen=True)
class PpoConfig:
    iterations: int = 30
    actors: int = 2
    timesteps_per_actor: int = 32
    epochs: int = 3
    minibatch_size: int = 32
    clip_eps: float = 0.2
    gamma: float = 0.99
    lam: float = 0.95
    learning_rate: float = 3e-4
    normalize_advantages: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.clip_eps < 1.0:
            raise InputRejected("clip_eps must be in (0, 1)")
        if not 0.0 < self.gamma <= 1.0:
            raise InputRejected("gamma must be in (0, 1]")
        if not 0.0 <= self.lam <= 1.0:
            raise InputRejected("lam must be in [0, 1]")
        total = self.actors * self.timesteps_per_actor
        if self.minibatch_size <= 0 or total % self.minibatch_size != 0:
            raise InputRejected(
                f"minibatch size {self.minibatch_size} must evenly divide "
                f"actors*timesteps = {total} (padding is not allowed)")


@dataclass
class Trajectory:
    """One actor's slice of experience; the tail episode may be truncated."""

    states: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    log_probs: list = field(default_factory=list)
    terminals: list = field(default_factory=list)
    values: np.ndarray | None = None
    tail_state: np.ndarray | None = None  # state after the last step if truncated

    def __len__(self):
        return len(self.actions)

    @property
    def truncated(self) -> bool:
        return bool(self.terminals) and not self.terminals[-1]


def gae(rewards: np.ndarray, values: np.ndarray, terminals: np.ndarray,
        gamma: float, lam: float, bootstrap_value: float = 0.0) -> np.ndarray:
    """Truncated GAE advantages over one trajectory.

    ``terminals[t]`` marks that the episode ended at step t; the value of
    a terminal successor state is zero.  A non-terminal final step
    bootstraps from ``bootstrap_value``.
    """
    n = len(rewards)
    if not (len(values) == len(terminals) == n):
        raise InputRejected("rewards, values and terminals must align")
    adv = np.zeros(n)
    running = 0.0
    for t in range(n - 1, -1, -1):
        if terminals[t]:
            next_value = 0.0
            running = 0.0
        elif t == n - 1:
            next_value = bootstrap_value
        else:
            next_value = values[t + 1]
        delta = rewards[t] + gamma * next_value - values[t]
        running = delta + gamma * lam * running
        adv[t] = running
    return adv


def clipped_objective(log_probs_new: np.ndarray, log_probs_old: np.ndarray,
                      advantages: np.ndarray, eps: float) -> float:
    loss, _ = clipped_objective_with_grad(log_probs_new, log_probs_old,
                                          advantages, eps)
    return loss


def clipped_objective_with_grad(
    log_probs_new: np.ndarray,
    log_probs_old: np.ndarray,
    advantages: np.ndarray,
    eps: float,
) -> tuple[float, np.ndarray]:
    """Negated clipped surrogate and its gradient w.r.t. the new log-probs.

    The gradient flows only through samples where the unclipped ratio term
    wins the min; clipped winners contribute a constant.
    """
    if not (len(log_probs_new) == len(log_probs_old) == len(advantages)):
        raise InputRejected("batch vectors must align")
    with np.errstate(over="ignore"):
        ratio = np.exp(log_probs_new - log_probs_old)
    if not np.isfinite(ratio).all():
        raise InputRejected("non-finite probability ratio in batch")
    unclipped = ratio * advantages
    clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps) * advantages
    objective = np.minimum(unclipped, clipped)
    n = len(ratio)
    loss = -float(objective.mean())
    grad = np.where(unclipped <= clipped, unclipped, 0.0) / -n
    return loss, grad


def value_loss(values_pred: np.ndarray, returns: np.ndarray) -> float:
    loss, _ = value_loss_with_grad(values_pred, returns)
    return loss


def value_loss_with_grad(values_pred: np.ndarray,
                         returns: np.ndarray) -> tuple[float, np.ndarray]:
    if len(values_pred) != len(returns):
        raise InputRejected("predictions and returns must align")
    err = values_pred - returns
    return float(np.mean(err * err)), 2.0 * err / len(err)


@dataclass
class IterationStats:
    iteration: int
    mean_return: float
    mean_ep_len: float
    policy_loss: float
    value_loss: float
    queries_used: int
    truncated: int

    FIELDS = ("iteration", "mean_return", "mean_ep_len", "policy_loss",
              "value_loss", "queries_used", "truncated")

    def row(self) -> list:
        return [getattr(self, f) for f in self.FIELDS]


def _batched_values(net: FrameNet, states: np.ndarray, chunk: int = 16) -> np.ndarray:
    out = np.empty(len(states))
    for start in range(0, len(states), chunk):
        out[start:start + chunk] = state_values(net, states[start:start + chunk])
    return out


def _collect(env, policy: FrameNet, limit: int,
             rng: np.random.Generator) -> Trajectory:
    traj = Trajectory()
    steps = 0
    while steps < limit:
        state = env.reset(rng)
        terminal = False
        while not terminal and steps < limit:
            probs = action_probs(policy, state[None])[0]
            action, logp = sample_action(ActionDistribution(probs), rng)
            next_state, reward, terminal = env.step(action)
            traj.states.append(state)
            traj.actions.append(action)
            traj.rewards.append(reward)
            traj.log_probs.append(logp)
            traj.terminals.append(terminal)
            state = next_state
            steps += 1
        if not terminal:
            traj.tail_state = state
    return traj


def train(
    env_factory,
    policy: FrameNet,
    value: FrameNet,
    cfg: PpoConfig,
    diagnostics_dir=None,
) -> tuple[FrameNet, FrameNet, list[IterationStats]]:
    """Optimize the policy/value pair in place and return per-iteration stats.

    ``env_factory(actor_index)`` must build an independent environment with
    ``reset(rng) -> state``, ``step(action) -> (next_state, reward, terminal)``
    and a ``query_count`` property.
    """
    envs = [env_factory(i) for i in range(cfg.actors)]
    opt_policy = Adam(policy.params(), lr=cfg.learning_rate)
    opt_value = Adam(value.params(), lr=cfg.learning_rate)
    stats: list[IterationStats] = []

    for iteration in range(cfg.iterations):
        queries_before = sum(e.query_count for e in envs)
        trajs = []
        for actor, env in enumerate(envs):
            rng = np.random.default_rng(
                np.random.SeedSequence([cfg.seed, iteration, actor]))
            trajs.append(_collect(env, policy, cfg.timesteps_per_actor, rng))

        advantages, returns = [], []
        for traj in trajs:
            states = np.asarray(traj.states)
            traj.values = _batched_values(value, states)
            bootstrap = 0.0
            if traj.truncated:
                bootstrap = float(_batched_values(value, traj.tail_state[None])[0])
            adv = gae(np.asarray(traj.rewards), traj.values,
                      np.asarray(traj.terminals), cfg.gamma, cfg.lam, bootstrap)
            advantages.append(adv)
            returns.append(adv + traj.values)

        all_states = np.concatenate([np.asarray(t.states) for t in trajs])
        all_actions = np.concatenate([np.asarray(t.actions) for t in trajs])
        all_logp_old = np.concatenate([np.asarray(t.log_probs) for t in trajs])
        all_adv = np.concatenate(advantages)
        all_returns = np.concatenate(returns)
        if cfg.normalize_advantages:
            std = all_adv.std()
            all_adv = (all_adv - all_adv.mean()) / (std + 1e-8)

        shuffle_rng = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, iteration, 0xD1CE]))
        total = len(all_states)
        policy_losses, value_losses = [], []
        for _ in range(cfg.epochs):
            order = shuffle_rng.permutation(total)
            for start in range(0, total, cfg.minibatch_size):
                idx = order[start:start + cfg.minibatch_size]
                mb_states = all_states[idx]
                mb_actions = all_actions[idx]

                probs = action_probs(policy, mb_states)
                logp_new = np.log(probs[np.arange(len(idx)), mb_actions])
                p_loss, dlogp = clipped_objective_with_grad(
                    logp_new, all_logp_old[idx], all_adv[idx], cfg.clip_eps)
                onehot = np.zeros_like(probs)
                onehot[np.arange(len(idx)), mb_actions] = 1.0
                dlogits = dlogp[:, None] * (onehot - probs)
                opt_policy.step(policy.backward(dlogits))

                preds = state_values(value, mb_states)
                v_loss, dpred = value_loss_with_grad(preds, all_returns[idx])
                opt_value.step(value.backward(dpred[:, None]))

                if not (np.isfinite(p_loss) and np.isfinite(v_loss)):
                    if diagnostics_dir is not None:
                        save_checkpoint(f"{diagnostics_dir}/policy_diverged.bin", policy)
                        save_checkpoint(f"{diagnostics_dir}/value_diverged.bin", value)
                    raise TrainingDiverged(
                        f"non-finite loss at iteration {iteration}")
                policy_losses.append(p_loss)
                value_losses.append(v_loss)

        ep_returns, ep_lens = [], []
        truncated = 0
        for traj in trajs:
            acc, length = 0.0, 0
            for r, term in zip(traj.rewards, traj.terminals):
                acc += r
                length += 1
                if term:
                    ep_returns.append(acc)
                    ep_lens.append(length)
                    acc, length = 0.0, 0
            if length:
                truncated += 1
        queries_after = sum(e.query_count for e in envs)
        stats.append(IterationStats(
            iteration=iteration,
            mean_return=float(np.mean(ep_returns)) if ep_returns else 0.0,
            mean_ep_len=float(np.mean(ep_lens)) if ep_lens else 0.0,
            policy_loss=float(np.mean(policy_losses)),
            value_loss=float(np.mean(value_losses)),
            queries_used=queries_after - queries_before,
            truncated=truncated,
        ))
    return policy, value, stats


class FrameSelectionEnv:
    """Adapter exposing the frame-deletion MDP through the trainer protocol.

    Each reset samples a clean video and a paired video of a different
    class (or of the target class), builds the spatial mask, and retries
    until the start state is adversarial.  Saliency masks are cached per
    video index.
    """

    def __init__(self, oracle, videos: np.ndarray, labels: np.ndarray,
                 spatial: SpatialParams, mode: str, phase: str,
                 fixed_x: np.ndarray | None = None,
                 fixed_true_label: int | None = None,
                 target_label: int | None = None,
                 max_resets: int = 200):
        self.oracle = oracle
        self.videos = videos
        self.labels = np.asarray(labels)
        self.spatial = spatial
        self.mode = mode
        self.phase = phase
        self.fixed_x = fixed_x
        self.fixed_true_label = fixed_true_label
        self.target_label = target_label
        self.max_resets = max_resets
        self._mask_cache: dict = {}
        self._state: mdp.MdpState | None = None

    @property
    def query_count(self) -> int:
        return self.oracle.counter.count

    def _spatial_mask(self, x, x_key, mate, mate_key):
        if self.mode == mdp.UNTARGETED:
            if x_key not in self._mask_cache:
                self._mask_cache[x_key] = init_spatial_mask(x, None, self.spatial)
            return self._mask_cache[x_key]
        key = (x_key, mate_key)
        if key not in self._mask_cache:
            self._mask_cache[key] = init_spatial_mask(x, mate, self.spatial)
        return self._mask_cache[key]

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        for _ in range(self.max_resets):
            if self.fixed_x is not None:
                x, x_key, true_label = self.fixed_x, "x", self.fixed_true_label
            else:
                xi = int(rng.integers(len(self.videos)))
                x, x_key, true_label = self.videos[xi], xi, int(self.labels[xi])
            if self.mode == mdp.TARGETED:
                pool = np.flatnonzero(self.labels == self.target_label)
            else:
                pool = np.flatnonzero(self.labels != true_label)
            if len(pool) == 0:
                raise InvalidStart("no paired videos available for sampling")
            mi = int(pool[rng.integers(len(pool))])
            mate = self.videos[mi]
            mask = self._spatial_mask(x, x_key, mate, mi)
            try:
                self._state = mdp.reset(self.oracle, x, mate, mask, self.mode,
                                        self.phase, true_label, self.target_label)
                return self._state.diff
            except InvalidStart:
                continue
        raise InvalidStart(f"no adversarial start found in {self.max_resets} resets")

    def step(self, action: int):
        result = mdp.step(self._state, action, self.oracle)
        self._state = result.next_state
        return result.next_state.diff, result.reward, result.terminal
