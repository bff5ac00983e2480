"""Experiment orchestration: configs, attack runs, grid searches, reports.

A run is described by a flat key=value config (every key overridable from
the CLI), executes one attack method over correctly-classified test
videos, and writes:

* ``attacks.csv``   - one deterministic row per attack (no wall time),
* ``summary.csv``   - the aggregate table row (includes wall time),
* ``reports/``      - full per-attack JSON including the descent trace,
* ``perturbations/``- the final perturbation of each attack as ``.vid``,
* ``resolved.cfg``  - the exact configuration the run used.

Reruns with the same config and seeds reproduce ``attacks.csv`` byte for
byte; wall-clock columns live only in ``summary.csv`` and the JSON.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import os
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace

import numpy as np

from .dataset import Dataset, load_dataset
from .env import TARGETED, UNTARGETED
from .errors import InputRejected
from .metrics import MetricsRecord, aggregate
from .nn import FrameNet, load_checkpoint
from .oracle import Oracle, load_oracle
from .policy import build_policy, build_value
from .ppo import FrameSelectionEnv, IterationStats, PpoConfig, train
from .saliency import SpatialParams
from .signopt import AttackConfig, AttackResult, attack
from .video import write_vid

METHODS = {
    "sparse-rl": "rl",
    "dense-signopt": "dense",
    "spatial-only": "spatial",
}

OUTPUT_ROOT_ENV = "SPARSEVID_OUT"


def default_output_root() -> str:
    return os.environ.get(OUTPUT_ROOT_ENV, "runs")


@dataclass
class ExperimentConfig:
    data_dir: str = ""
    oracle_path: str = ""
    policy_path: str = ""
    value_path: str = ""
    out_dir: str = ""
    method: str = "sparse-rl"
    mode: str = UNTARGETED
    target_class: int = -1  # -1: rotate per video to (label + 1) % K
    num_videos: int = 20
    seed: int = 0
    workers: int = 1
    num_candidates: int = 20
    max_iterations: int = 1000
    grad_samples: int = 20
    smoothing: float = 1e-3
    step_size: float = 0.2
    search_tol: float = 1e-3
    map_bound: float = -1.0  # -1: 3 for untargeted, 9 for targeted
    query_budget: int = 50_000
    phi: float = 0.6
    finetune_iterations: int = 3
    finetune_actors: int = 2
    finetune_timesteps: int = 16
    finetune_epochs: int = 2
    finetune_minibatch: int = 16
    finetune_lr: float = 3e-4

    def __post_init__(self):
        if self.method not in METHODS:
            raise InputRejected(f"unknown method {self.method!r}")
        if self.mode not in (UNTARGETED, TARGETED):
            raise InputRejected(f"unknown mode {self.mode!r}")

    def resolved_map_bound(self) -> float:
        if self.map_bound > 0:
            return self.map_bound
        return 3.0 if self.mode == UNTARGETED else 9.0

    def attack_config(self) -> AttackConfig:
        return AttackConfig(
            mode=self.mode, num_candidates=self.num_candidates,
            max_iterations=self.max_iterations, grad_samples=self.grad_samples,
            smoothing=self.smoothing, step_size=self.step_size,
            search_tol=self.search_tol, map_bound=self.resolved_map_bound(),
            query_budget=self.query_budget, phi=self.phi,
            mask_mode=METHODS[self.method])

    def finetune_config(self) -> PpoConfig:
        return PpoConfig(
            iterations=self.finetune_iterations, actors=self.finetune_actors,
            timesteps_per_actor=self.finetune_timesteps,
            epochs=self.finetune_epochs, minibatch_size=self.finetune_minibatch,
            learning_rate=self.finetune_lr, seed=self.seed)

    def to_text(self) -> str:
        lines = []
        for f in sorted(fields(self), key=lambda f: f.name):
            lines.append(f"{f.name}={getattr(self, f.name)}")
        return "\n".join(lines) + "\n"


def parse_overrides(cfg: ExperimentConfig, pairs: list[str]) -> ExperimentConfig:
    """Apply ``key=value`` strings on top of an existing config."""
    types = {f.name: f.type for f in fields(ExperimentConfig)}
    casts = {"int": int, "float": float, "str": str}
    updates = {}
    for pair in pairs:
        if "=" not in pair:
            raise InputRejected(f"override {pair!r} is not key=value")
        key, value = pair.split("=", 1)
        key = key.strip()
        if key not in types:
            raise InputRejected(f"unknown config key {key!r}")
        updates[key] = casts[types[key]](value.strip())
    return replace(cfg, **updates)


def load_config(path) -> ExperimentConfig:
    pairs = []
    with open(path) as fh:
        for raw in fh:
            line = raw.split("#", 1)[0].strip()
            if line:
                pairs.append(line)
    return parse_overrides(ExperimentConfig(), pairs)


def select_videos(oracle: Oracle, data: Dataset, num: int,
                  start: int = 0) -> tuple[list[tuple[int, np.ndarray, int]], int]:
    """First ``num`` correctly classified test videos (manifest order).

    Returns (index, video, label) triples plus the number of selection
    queries spent; those queries are protocol overhead, not attack cost.
    """
    picked = []
    queries = 0
    for idx in range(start, len(data.test_videos)):
        video = data.test_videos[idx].astype(np.float64)
        label = int(data.test_labels[idx])
        queries += 1
        if oracle.query(video).label == label:
            picked.append((idx, video, label))
            if len(picked) == num:
                break
    if len(picked) < num:
        raise InputRejected(
            f"only {len(picked)} correctly classified test videos available")
    return picked, queries


def candidate_pool(data: Dataset, mode: str, true_label: int,
                   target_label: int | None) -> np.ndarray:
    if mode == TARGETED:
        keep = data.train_labels == target_label
    else:
        keep = data.train_labels != true_label
    return data.train_videos[keep]


def run_attack_on_video(
    oracle: Oracle,
    data: Dataset,
    cfg: ExperimentConfig,
    idx: int,
    video: np.ndarray,
    label: int,
    policy: FrameNet | None,
    value: FrameNet | None,
) -> tuple[AttackResult, float, int]:
    """One seeded attack; returns (result, wall seconds, target label or -1)."""
    target_label = None
    if cfg.mode == TARGETED:
        target_label = cfg.target_class if cfg.target_class >= 0 \
            else (label + 1) % data.num_classes
    pool = candidate_pool(data, cfg.mode, label, target_label)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, idx]))
    attack_cfg = cfg.attack_config()
    finetune_cfg = cfg.finetune_config() if cfg.mode == TARGETED else None
    started = time.perf_counter()
    result = attack(oracle, video, pool, attack_cfg, label,
                    target_label=target_label, policy=policy, value=value,
                    finetune_cfg=finetune_cfg, rng=rng)
    wall = time.perf_counter() - started
    return result, wall, target_label if target_label is not None else -1


_WORKER: dict = {}


def _worker_init(data_dir: str, oracle_path: str, policy_path: str,
                 value_path: str) -> None:
    _WORKER["data"] = load_dataset(data_dir)
    _WORKER["oracle"] = load_oracle(oracle_path)
    _WORKER["policy"] = load_checkpoint(policy_path) if policy_path else None
    _WORKER["value"] = load_checkpoint(value_path) if value_path else None


def _worker_attack(args):
    cfg_dict, idx, label = args
    cfg = ExperimentConfig(**cfg_dict)
    data = _WORKER["data"]
    video = data.test_videos[idx].astype(np.float64)
    result, wall, target = run_attack_on_video(
        _WORKER["oracle"], data, cfg, idx, video, label,
        _WORKER["policy"], _WORKER["value"])
    return idx, label, target, result, wall


ATTACK_COLUMNS = (
    "video_index", "true_label", "target_label", "success", "queries",
    "queries_finetune", "queries_init", "queries_descent", "iterations",
    "map", "sparsity", "distance", "stop_reason")


def _attack_row(idx: int, label: int, target: int, r: AttackResult) -> list:
    return [idx, label, target, int(r.success), r.queries, r.queries_finetune,
            r.queries_init, r.queries_descent, r.iterations,
            f"{r.map:.6f}", f"{r.sparsity:.6f}", f"{r.distance:.6f}",
            r.stop_reason]


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Run the configured method over the test set and write all outputs."""
    for path, name in ((cfg.data_dir, "data_dir"), (cfg.oracle_path, "oracle_path")):
        if not path or not os.path.exists(path):
            raise InputRejected(f"{name} {path!r} does not exist")
    needs_policy = METHODS[cfg.method] == "rl"
    if needs_policy and (not cfg.policy_path or not os.path.exists(cfg.policy_path)):
        raise InputRejected(f"policy checkpoint {cfg.policy_path!r} does not exist")

    data = load_dataset(cfg.data_dir)
    oracle = load_oracle(cfg.oracle_path)
    policy = load_checkpoint(cfg.policy_path) if needs_policy else None
    value = None
    if needs_policy and cfg.value_path and os.path.exists(cfg.value_path):
        value = load_checkpoint(cfg.value_path)

    out_dir = cfg.out_dir or os.path.join(default_output_root(), "experiment")
    os.makedirs(out_dir, exist_ok=True)
    os.makedirs(os.path.join(out_dir, "reports"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "perturbations"), exist_ok=True)
    with open(os.path.join(out_dir, "resolved.cfg"), "w") as fh:
        fh.write(cfg.to_text())

    picked, selection_queries = select_videos(oracle, data, cfg.num_videos)

    outcomes = []
    if cfg.workers > 1:
        tasks = [(dataclasses.asdict(cfg), idx, label) for idx, _, label in picked]
        with ProcessPoolExecutor(
                max_workers=cfg.workers, initializer=_worker_init,
                initargs=(cfg.data_dir, cfg.oracle_path,
                          cfg.policy_path if needs_policy else "",
                          cfg.value_path)) as pool:
            outcomes = list(pool.map(_worker_attack, tasks))
    else:
        for idx, video, label in picked:
            result, wall, target = run_attack_on_video(
                oracle, data, cfg, idx, video, label, policy, value)
            outcomes.append((idx, label, target, result, wall))
    outcomes.sort(key=lambda item: item[0])

    records = []
    with open(os.path.join(out_dir, "attacks.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ATTACK_COLUMNS)
        for idx, label, target, result, wall in outcomes:
            writer.writerow(_attack_row(idx, label, target, result))
            records.append(MetricsRecord(
                fooled=result.success, queries=result.queries, map=result.map,
                sparsity=result.sparsity, wall_seconds=wall))
            report = {
                "video_index": idx, "true_label": label, "target_label": target,
                "method": cfg.method, "mode": cfg.mode, "seed": cfg.seed,
                "success": result.success, "queries": result.queries,
                "queries_finetune": result.queries_finetune,
                "queries_init": result.queries_init,
                "queries_descent": result.queries_descent,
                "queries_verify": result.queries_verify,
                "iterations": result.iterations, "map": result.map,
                "sparsity": result.sparsity, "distance": result.distance,
                "stop_reason": result.stop_reason, "wall_seconds": wall,
                "trace": result.trace,
            }
            with open(os.path.join(out_dir, "reports", f"attack_{idx:04d}.json"),
                      "w") as rf:
                json.dump(report, rf, indent=1)
            write_vid(os.path.join(out_dir, "perturbations", f"attack_{idx:04d}.vid"),
                      result.x_adv - data.test_videos[idx].astype(np.float64))

    summary = aggregate(records)
    with open(os.path.join(out_dir, "summary.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "mode", "videos", "fr_pct", "q_mean",
                         "map_mean", "s_pct_mean", "t_minutes_mean"])
        writer.writerow([cfg.method, cfg.mode, len(records),
                         f"{summary['fr']:.2f}", f"{summary['queries']:.1f}",
                         f"{summary['map']:.4f}", f"{summary['sparsity_pct']:.2f}",
                         f"{summary['wall_seconds'] / 60.0:.4f}"])
    summary["selection_queries"] = selection_queries
    summary["out_dir"] = out_dir
    summary["results"] = [(idx, label, target, result)
                          for idx, label, target, result, _ in outcomes]
    return summary


def phi_grid_search(values, cfg: ExperimentConfig, validation: int = 20) -> list[dict]:
    """Spatial-only attacks per area ratio over seeded training videos.

    Emits one row per ratio with the mean MAP / queries / sparsity used to
    pick the operating point.
    """
    data = load_dataset(cfg.data_dir)
    oracle = load_oracle(cfg.oracle_path)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x9121D]))
    order = rng.permutation(len(data.train_videos))
    picked = []
    for idx in order:
        video = data.train_videos[idx].astype(np.float64)
        label = int(data.train_labels[idx])
        if oracle.query(video).label == label:
            picked.append((int(idx), video, label))
            if len(picked) == validation:
                break

    rows = []
    for phi in values:
        if not 0.0 < phi <= 1.0:
            raise InputRejected(f"phi {phi} outside (0, 1]")
        phi_cfg = replace(cfg, method="spatial-only", phi=float(phi))
        attack_cfg = phi_cfg.attack_config()
        maps, queries, sparsities = [], [], []
        for idx, video, label in picked:
            pool_keep = data.train_labels != label
            pool = data.train_videos[pool_keep]
            arng = np.random.default_rng(
                np.random.SeedSequence([cfg.seed, idx, int(round(phi * 1000))]))
            result = attack(oracle, video, pool, attack_cfg, label, rng=arng)
            maps.append(result.map)
            queries.append(result.queries)
            sparsities.append(result.sparsity)
        rows.append({"phi": float(phi), "map_mean": float(np.mean(maps)),
                     "q_mean": float(np.mean(queries)),
                     "s_mean": float(np.mean(sparsities))})
    if cfg.out_dir:
        os.makedirs(cfg.out_dir, exist_ok=True)
        with open(os.path.join(cfg.out_dir, "phi_grid.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["phi", "map_mean", "q_mean", "s_mean"])
            for row in rows:
                writer.writerow([f"{row['phi']:.2f}", f"{row['map_mean']:.6f}",
                                 f"{row['q_mean']:.2f}", f"{row['s_mean']:.6f}"])
    return rows


def pair_runs(dir_a, dir_b, out_path=None) -> dict:
    """Join two runs' attacks.csv on video index for paired comparison."""

    def read_rows(path):
        with open(os.path.join(path, "attacks.csv"), newline="") as fh:
            return {int(row["video_index"]): row for row in csv.DictReader(fh)}

    rows_a, rows_b = read_rows(dir_a), read_rows(dir_b)
    shared = sorted(set(rows_a) & set(rows_b))
    if not shared:
        raise InputRejected("runs share no video indices")
    paired = []
    for idx in shared:
        paired.append({
            "video_index": idx,
            "q_a": int(rows_a[idx]["queries"]), "q_b": int(rows_b[idx]["queries"]),
            "map_a": float(rows_a[idx]["map"]), "map_b": float(rows_b[idx]["map"]),
            "s_a": float(rows_a[idx]["sparsity"]), "s_b": float(rows_b[idx]["sparsity"]),
        })
    if out_path:
        with open(out_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["video_index", "q_a", "q_b", "map_a", "map_b",
                             "s_a", "s_b"])
            for row in paired:
                writer.writerow([row["video_index"], row["q_a"], row["q_b"],
                                 f"{row['map_a']:.6f}", f"{row['map_b']:.6f}",
                                 f"{row['s_a']:.6f}", f"{row['s_b']:.6f}"])
    return {
        "pairs": paired,
        "median_q_a": statistics.median(r["q_a"] for r in paired),
        "median_q_b": statistics.median(r["q_b"] for r in paired),
        "mean_s_a": statistics.mean(r["s_a"] for r in paired),
        "mean_s_b": statistics.mean(r["s_b"] for r in paired),
    }


def pretrain_policy(
    data: Dataset,
    oracle: Oracle,
    cfg: PpoConfig,
    mode: str = UNTARGETED,
    phi: float = 0.6,
    target_label: int | None = None,
) -> tuple[FrameNet, FrameNet, list[IterationStats]]:
    """Train the frame-selection policy on the training split."""
    t, h, w, c = data.train_videos.shape[1:]
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x90]))
    policy = build_policy(t, h, w, c, rng)
    value = build_value(t, h, w, c, rng)
    spatial = SpatialParams(phi=phi)

    def factory(_actor):
        return FrameSelectionEnv(oracle, data.train_videos, data.train_labels,
                                 spatial, mode, "pretrain",
                                 target_label=target_label)

    return train(factory, policy, value, cfg)


def write_stats_csv(path, stats: list[IterationStats]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(IterationStats.FIELDS)
        for s in stats:
            writer.writerow(s.row())
