"""Sparse zeroth-order attack: boundary-distance descent with sign probes.

The attack searches for the direction whose decision-boundary crossing is
closest to the clean video.  Boundary distances come from bisection on
oracle labels; descent uses single-query probes that reveal only whether
a perturbed direction crosses sooner or later.  Probe noise and updates
are confined to the active sparsity mask, so the final perturbation is
zero off-mask by construction.

Conventions: directions are unit vectors; a probe that satisfies the
attack condition at the current radius means the boundary moved closer,
i.e. the directional change of the distance is negative.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import env as mdp
from .env import TARGETED, UNTARGETED, is_adversarial
from .errors import (DirectionUnusable, InitializationFailure, InputRejected,
                     InvalidStart)
from .metrics import PIXEL_SCALE, map_score, sparsity_score
from .oracle import CountedOracle
from .policy import greedy_action, policy_forward
from .ppo import FrameSelectionEnv, PpoConfig, train
from .saliency import SpatialParams, init_spatial_mask
from .video import clamp01, l2_norm

MASK_RL = "rl"
MASK_SPATIAL = "spatial"
MASK_DENSE = "dense"


@dataclass(frozen=True)
class Direction:
    """A search direction with its cached Euclidean norm."""

    vec: np.ndarray
    norm: float = field(init=False)

    def __post_init__(self):
        n = l2_norm(self.vec)
        if n <= 0.0:
            raise InputRejected("direction must be nonzero")
        object.__setattr__(self, "norm", n)

    def unit(self) -> np.ndarray:
        return self.vec / self.norm


@dataclass(frozen=True)
class AttackConfig:
    mode: str = UNTARGETED
    num_candidates: int = 100
    max_iterations: int = 1000
    grad_samples: int = 20
    smoothing: float = 1e-3
    step_size: float = 0.2
    # Relative bisection tolerance.  Must sit well below the g-shift a
    # smoothing-sized probe produces, or probe signs drown in search slack.
    search_tol: float = 1e-4
    map_bound: float = 3.0
    query_budget: int = 50_000
    phi: float = 0.6
    scales: tuple[int, ...] = (1, 2, 4)
    mask_mode: str = MASK_RL
    select_by: str = "map"  # "map" (listing) or "distance" (prose variant)
    backtrack_halvings: int = 6
    bracket_growth: float = 1.5
    bracket_growth_limit: int = 40

    def __post_init__(self):
        if self.mode not in (UNTARGETED, TARGETED):
            raise InputRejected(f"unknown mode {self.mode!r}")
        if self.mask_mode not in (MASK_RL, MASK_SPATIAL, MASK_DENSE):
            raise InputRejected(f"unknown mask mode {self.mask_mode!r}")
        if self.select_by not in ("map", "distance"):
            raise InputRejected(f"unknown selection rule {self.select_by!r}")
        for name in ("num_candidates", "max_iterations", "grad_samples",
                     "smoothing", "step_size", "search_tol", "map_bound",
                     "query_budget"):
            if getattr(self, name) <= 0:
                raise InputRejected(f"{name} must be positive")

    def spatial_params(self) -> SpatialParams:
        return SpatialParams(self.phi, self.scales)


@dataclass
class AttackResult:
    x_adv: np.ndarray
    distance: float
    direction: np.ndarray | None
    mask: np.ndarray | None
    queries: int
    queries_finetune: int
    queries_init: int
    queries_descent: int
    queries_verify: int
    iterations: int
    success: bool
    map: float
    sparsity: float
    stop_reason: str
    trace: list[dict]


def boundary_distance(
    oracle,
    x: np.ndarray,
    direction: Direction,
    mode: str,
    true_label: int,
    target_label: int | None = None,
    tol: float = 1e-3,
    known_hi: float | None = None,
    seed: float | None = None,
    growth: float = 1.5,
    growth_limit: int = 40,
) -> tuple[float, int]:
    """Smallest adversarial step length along a direction, by bisection.

    ``known_hi`` is a step length already verified adversarial (no probe
    spent); ``seed`` is an unverified guess grown geometrically until the
    condition holds.  The result is the adversarial (upper) side of the
    final bracket; the bisection tolerance is relative to the bracket top.
    """
    unit = direction.unit()
    queries = 0

    def probe(lam: float) -> bool:
        nonlocal queries
        queries += 1
        verdict = oracle.query(clamp01(x + lam * unit))
        return is_adversarial(verdict.label, mode, true_label, target_label)

    if known_hi is not None:
        hi = known_hi
    else:
        if seed is None or seed <= 0.0:
            raise InputRejected("need a known adversarial step or a positive seed")
        lam = seed
        hi = None
        for _ in range(growth_limit):
            if probe(lam):
                hi = lam
                break
            lam *= growth
        if hi is None:
            raise DirectionUnusable(
                f"no boundary crossing within {growth_limit} growth probes")

    lo = 0.0
    tol_abs = tol * hi
    while hi - lo > tol_abs:
        mid = 0.5 * (lo + hi)
        if probe(mid):
            hi = mid
        else:
            lo = mid
    return hi, queries


def probe_sign(
    oracle,
    x: np.ndarray,
    direction: Direction,
    g_current: float,
    u: np.ndarray,
    eps_d: float,
    mode: str,
    true_label: int,
    target_label: int | None = None,
) -> int:
    """Single-query sign of the boundary-distance change along probe ``u``.

    Returns -1 when the perturbed direction crosses the boundary within
    the current radius (distance decreased), +1 otherwise.
    """
    perturbed = Direction(direction.vec + eps_d * u)
    point = clamp01(x + g_current * perturbed.unit())
    verdict = oracle.query(point)
    if is_adversarial(verdict.label, mode, true_label, target_label):
        return -1
    return 1


def estimate_gradient(
    oracle,
    x: np.ndarray,
    direction: Direction,
    g_current: float,
    cfg: AttackConfig,
    rng: np.random.Generator,
    true_label: int,
    target_label: int | None = None,
    mask: np.ndarray | None = None,
) -> tuple[np.ndarray, int]:
    """Average of sign-weighted Gaussian probes; spends exactly Q_d queries.

    Probes are zeroed outside the mask so the estimate (and therefore the
    descent trajectory) stays inside the sparse subspace.  The smoothing
    parameter is calibrated for unit-norm probes, so it is divided by the
    expected norm of a raw Gaussian probe (sqrt of the active dimension);
    otherwise the probe tilt would be dominated by renormalization and
    every sign would come out positive.
    """
    if mask is not None:
        active = float(mask.sum())
    else:
        active = float(direction.vec.size)
    eps_eff = cfg.smoothing / np.sqrt(max(active, 1.0))
    acc = np.zeros_like(direction.vec)
    for _ in range(cfg.grad_samples):
        u = rng.standard_normal(direction.vec.shape)
        if mask is not None:
            u = u * mask
        s = probe_sign(oracle, x, direction, g_current, u, eps_eff,
                       cfg.mode, true_label, target_label)
        acc += s * u
    return acc / cfg.grad_samples, cfg.grad_samples


def perturbation_map(x: np.ndarray, distance: float, unit_dir: np.ndarray) -> float:
    """MAP of the clamped perturbation at the given radius, on the 0-255 scale."""
    delta = clamp01(x + distance * unit_dir) - x
    return map_score(delta * PIXEL_SCALE)


def init_direction(
    oracle,
    x: np.ndarray,
    candidates: list[tuple[np.ndarray, np.ndarray]],
    mode: str,
    true_label: int,
    target_label: int | None = None,
    cfg: AttackConfig | None = None,
) -> tuple[Direction, np.ndarray, float, int]:
    """Pick the best starting direction among (paired video, mask) candidates.

    Each candidate whose masked difference already satisfies the attack
    condition is bisected to the boundary; the winner minimizes the MAP of
    its boundary-distance perturbation (or the raw distance, per config).
    """
    if not candidates:
        raise InitializationFailure("no candidates supplied")
    cfg = cfg or AttackConfig(mode=mode)
    queries = 0
    best = None
    for mate, mask in candidates:
        diff = (mate - x) * mask
        radius = l2_norm(diff)
        if radius == 0.0:
            continue
        queries += 1
        verdict = oracle.query(clamp01(x + diff))
        if not is_adversarial(verdict.label, mode, true_label, target_label):
            continue
        direction = Direction(diff)
        dist, used = boundary_distance(
            oracle, x, direction, mode, true_label, target_label,
            tol=cfg.search_tol, known_hi=radius,
            growth=cfg.bracket_growth, growth_limit=cfg.bracket_growth_limit)
        queries += used
        if cfg.select_by == "map":
            score = perturbation_map(x, dist, direction.unit())
        else:
            score = dist
        if best is None or score < best[0]:
            best = (score, direction, mask, dist)
    if best is None:
        raise InitializationFailure("no candidate satisfied the attack condition")
    _, direction, mask, dist = best
    return direction, mask, dist, queries


def _greedy_temporal_mask(oracle, x, mate, spatial_mask, mode, true_label,
                          target_label, policy) -> np.ndarray | None:
    """Roll the policy greedily to delete frames; None if the start is invalid."""
    try:
        state = mdp.reset(oracle, x, mate, spatial_mask, mode, mdp.PRETRAIN,
                          true_label, target_label)
    except InvalidStart:
        return None
    while not state.terminal:
        action = greedy_action(policy_forward(policy, state.diff))
        state = mdp.step(state, action, oracle).next_state
    return mdp.episode_mask(state)


def _failed_result(x: np.ndarray, counters: dict, reason: str) -> AttackResult:
    return AttackResult(
        x_adv=x.copy(), distance=math.inf, direction=None, mask=None,
        queries=sum(counters.values()), queries_finetune=counters["finetune"],
        queries_init=counters["init"], queries_descent=0, queries_verify=0,
        iterations=0, success=False, map=0.0, sparsity=0.0,
        stop_reason=reason, trace=[])


def attack(
    oracle,
    x: np.ndarray,
    pool: np.ndarray,
    cfg: AttackConfig,
    true_label: int,
    target_label: int | None = None,
    policy=None,
    value=None,
    finetune_cfg: PpoConfig | None = None,
    rng: np.random.Generator | None = None,
) -> AttackResult:
    """Full attack pipeline against one video.

    ``pool`` holds candidate paired videos (target class for targeted mode,
    any other class for untargeted).  The caller must have verified that
    the oracle classifies ``x`` as ``true_label``.
    """
    if cfg.mode == TARGETED and target_label is None:
        raise InputRejected("targeted attack needs a target label")
    if cfg.mask_mode == MASK_RL and policy is None:
        raise InputRejected("rl mask mode needs a policy network")
    rng = rng if rng is not None else np.random.default_rng(0)
    counted = CountedOracle(oracle)
    spatial = cfg.spatial_params()

    # Targeted runs tune the frame-selection policy on this video first.
    tuned_policy = policy
    mark = 0
    if (cfg.mode == TARGETED and cfg.mask_mode == MASK_RL
            and finetune_cfg is not None and len(pool) > 0):
        tuned_policy = policy.clone()
        tuned_value = value.clone() if value is not None else None
        labels = np.full(len(pool), target_label)
        try:
            def factory(_actor):
                return FrameSelectionEnv(
                    counted, pool, labels, spatial, TARGETED, mdp.FINETUNE,
                    fixed_x=x, fixed_true_label=true_label,
                    target_label=target_label)
            if tuned_value is None:
                raise InputRejected("fine-tuning needs a value network")
            train(factory, tuned_policy, tuned_value, finetune_cfg)
        except InvalidStart:
            tuned_policy = policy  # nothing adversarial to tune on; keep pretrained
    counters = {"finetune": counted.counter.count, "init": 0,
                "descent": 0, "verify": 0}

    if len(pool) == 0:
        return _failed_result(x, counters, "empty candidate pool")
    picks = rng.choice(len(pool), size=cfg.num_candidates,
                       replace=len(pool) < cfg.num_candidates)
    spatial_cache: dict = {}
    candidates = []
    for pick in picks:
        mate = pool[int(pick)]
        if cfg.mask_mode == MASK_DENSE:
            mask = np.ones_like(x)
        else:
            key = int(pick) if cfg.mode == TARGETED else "clean"
            if key not in spatial_cache:
                hat = mate if cfg.mode == TARGETED else None
                spatial_cache[key] = init_spatial_mask(x, hat, spatial)
            mask = spatial_cache[key]
            if cfg.mask_mode == MASK_RL:
                mask = _greedy_temporal_mask(counted, x, mate, mask, cfg.mode,
                                             true_label, target_label,
                                             tuned_policy)
                if mask is None:
                    continue
        candidates.append((mate, mask))

    mark = counted.counter.count
    try:
        direction, mask, dist, _ = init_direction(
            counted, x, candidates, cfg.mode, true_label, target_label, cfg)
    except InitializationFailure:
        counters["init"] = counted.counter.count - counters["finetune"]
        return _failed_result(x, counters, "initialization failure")
    counters["init"] = counted.counter.count - counters["finetune"]

    direction = Direction(direction.unit())
    current_map = perturbation_map(x, dist, direction.vec)
    trace = [{"iteration": 0, "distance": dist,
              "queries": counted.counter.count, "map": current_map}]
    stop_reason = "iterations"
    iterations = 0
    mark = counted.counter.count
    for it in range(1, cfg.max_iterations + 1):
        if current_map <= cfg.map_bound:
            stop_reason = "map_bound"
            break
        if counted.counter.count >= cfg.query_budget:
            stop_reason = "budget"
            break
        iterations = it
        ghat, _ = estimate_gradient(counted, x, direction, dist, cfg, rng,
                                    true_label, target_label, mask=mask)
        ghat_norm = l2_norm(ghat)
        if ghat_norm == 0.0:
            trace.append({"iteration": it, "distance": dist,
                          "queries": counted.counter.count, "map": current_map})
            continue
        # Scale the first trial to step_size * ||direction||; raw Gaussian
        # probe sums grow with sqrt(dim) and would dwarf the unit direction.
        eta = cfg.step_size * direction.norm / ghat_norm
        for _ in range(cfg.backtrack_halvings + 1):
            trial_vec = direction.vec - eta * ghat
            if not trial_vec.any():
                eta *= 0.5
                continue
            trial = Direction(Direction(trial_vec).unit())
            try:
                trial_dist, _ = boundary_distance(
                    counted, x, trial, cfg.mode, true_label, target_label,
                    tol=cfg.search_tol, seed=dist,
                    growth=cfg.bracket_growth,
                    growth_limit=cfg.bracket_growth_limit)
            except DirectionUnusable:
                trial_dist = math.inf
            if trial_dist < dist:
                direction, dist = trial, trial_dist
                break
            eta *= 0.5
            if counted.counter.count >= cfg.query_budget:
                break
        current_map = perturbation_map(x, dist, direction.vec)
        trace.append({"iteration": it, "distance": dist,
                      "queries": counted.counter.count, "map": current_map})
    else:
        stop_reason = "iterations"
    if current_map <= cfg.map_bound and stop_reason == "iterations":
        stop_reason = "map_bound"
    counters["descent"] = counted.counter.count - mark

    x_adv = clamp01(x + dist * direction.vec)
    verdict = counted.query(x_adv)
    counters["verify"] = 1
    success = is_adversarial(verdict.label, cfg.mode, true_label, target_label)

    return AttackResult(
        x_adv=x_adv, distance=dist, direction=direction.vec, mask=mask,
        queries=counted.counter.count,
        queries_finetune=counters["finetune"], queries_init=counters["init"],
        queries_descent=counters["descent"], queries_verify=counters["verify"],
        iterations=iterations, success=success,
        map=map_score((x_adv - x) * PIXEL_SCALE),
        sparsity=sparsity_score(mask),
        stop_reason=stop_reason, trace=trace)
