"""Command-line interface.

Subcommands cover the full workflow: synthesize data, train the oracle,
pretrain/fine-tune the frame-selection policy, run single attacks or full
experiments, sweep the salient-area ratio, and pair two runs for
comparison.  Every stochastic command takes ``--seed``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import harness
from .dataset import SyntheticDatasetSpec, gen_dataset, load_dataset
from .env import TARGETED, UNTARGETED
from .errors import InputRejected
from .nn import load_checkpoint, save_checkpoint
from .oracle import load_oracle, save_oracle, train_conv_oracle
from .ppo import FrameSelectionEnv, PpoConfig, train
from .saliency import SpatialParams, init_spatial_mask
from .signopt import attack
from .video import read_vid, write_vid


def _add_ppo_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--iterations", type=int, default=30)
    p.add_argument("--actors", type=int, default=2)
    p.add_argument("--timesteps", type=int, default=32)
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--minibatch", type=int, default=32)
    p.add_argument("--clip-eps", type=float, default=0.2)
    p.add_argument("--gamma", type=float, default=0.99)
    p.add_argument("--lam", type=float, default=0.95)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--no-normalize-advantages", action="store_true")
    p.add_argument("--seed", type=int, default=0)


def _ppo_config(args) -> PpoConfig:
    return PpoConfig(
        iterations=args.iterations, actors=args.actors,
        timesteps_per_actor=args.timesteps, epochs=args.epochs,
        minibatch_size=args.minibatch, clip_eps=args.clip_eps,
        gamma=args.gamma, lam=args.lam, learning_rate=args.lr,
        normalize_advantages=not args.no_normalize_advantages, seed=args.seed)


def _cmd_gen_data(args) -> int:
    spec = SyntheticDatasetSpec(
        num_classes=args.classes, samples_per_class=args.per_class,
        frames=args.frames, height=args.size, width=args.size,
        channels=args.channels, noise=args.noise, seed=args.seed)
    manifest = gen_dataset(spec, args.out)
    print(f"wrote {len(manifest['train'])} train / {len(manifest['test'])} "
          f"test videos to {args.out}")
    return 0


def _cmd_train_oracle(args) -> int:
    data = load_dataset(args.data)
    model = train_conv_oracle(
        data.train_videos, data.train_labels, data.test_videos,
        data.test_labels, data.num_classes, epochs=args.epochs,
        seed=args.seed, lr=args.lr, batch_size=args.batch_size)
    acc = model.accuracy(data.test_videos, data.test_labels)
    save_oracle(args.out, model)
    print(f"oracle saved to {args.out} (held-out accuracy {acc:.3f})")
    return 0


def _cmd_pretrain_policy(args) -> int:
    data = load_dataset(args.data)
    oracle = load_oracle(args.oracle)
    cfg = _ppo_config(args)
    policy, value, stats = harness.pretrain_policy(
        data, oracle, cfg, mode=args.mode, phi=args.phi,
        target_label=args.target_class if args.mode == TARGETED else None)
    save_checkpoint(args.policy_ckpt, policy)
    save_checkpoint(args.value_ckpt, value)
    if args.stats:
        harness.write_stats_csv(args.stats, stats)
    print(f"pretrained policy -> {args.policy_ckpt}; "
          f"final mean return {stats[-1].mean_return:.3f}" if stats else
          "no iterations run")
    return 0


def _cmd_finetune_policy(args) -> int:
    data = load_dataset(args.data)
    oracle = load_oracle(args.oracle)
    policy = load_checkpoint(args.policy_ckpt)
    value = load_checkpoint(args.value_ckpt)
    x = read_vid(args.video)
    true_label = oracle.query(x).label
    pool = data.train_videos[data.train_labels == args.target_class]
    labels = np.full(len(pool), args.target_class)
    cfg = _ppo_config(args)
    spatial = SpatialParams(phi=args.phi)

    def factory(_actor):
        return FrameSelectionEnv(oracle, pool, labels, spatial, TARGETED,
                                 "finetune", fixed_x=x,
                                 fixed_true_label=true_label,
                                 target_label=args.target_class)

    policy, value, stats = train(factory, policy, value, cfg)
    save_checkpoint(args.out_policy, policy)
    save_checkpoint(args.out_value, value)
    if args.stats:
        harness.write_stats_csv(args.stats, stats)
    print(f"fine-tuned policy -> {args.out_policy}")
    return 0


def _cmd_attack(args) -> int:
    oracle = load_oracle(args.oracle)
    data = load_dataset(args.data)
    x = read_vid(args.video)
    true_label = oracle.query(x).label
    target_label = args.target_class if args.mode == TARGETED else None
    pool = harness.candidate_pool(data, args.mode, true_label, target_label)
    policy = load_checkpoint(args.policy_ckpt) if args.policy_ckpt else None
    value = load_checkpoint(args.value_ckpt) if args.value_ckpt else None
    cfg = harness.ExperimentConfig(
        method=args.method, mode=args.mode,
        map_bound=args.map_bound if args.map_bound else -1.0,
        num_candidates=args.candidates, query_budget=args.query_budget,
        max_iterations=args.max_iterations, phi=args.phi, seed=args.seed)
    rng = np.random.default_rng(np.random.SeedSequence([args.seed]))
    result = attack(oracle, x, pool, cfg.attack_config(), true_label,
                    target_label=target_label, policy=policy, value=value,
                    finetune_cfg=cfg.finetune_config() if args.mode == TARGETED else None,
                    rng=rng)
    report = {k: v for k, v in dataclasses.asdict(result).items()
              if k not in ("x_adv", "direction", "mask")}
    with open(args.out, "w") as fh:
        json.dump(report, fh, indent=1)
    if args.pert_out:
        write_vid(args.pert_out, result.x_adv - x)
    print(f"success={result.success} queries={result.queries} "
          f"map={result.map:.4f} sparsity={result.sparsity:.4f}")
    return 0


def _experiment_config(args) -> harness.ExperimentConfig:
    cfg = harness.load_config(args.config) if args.config \
        else harness.ExperimentConfig()
    if args.set:
        cfg = harness.parse_overrides(cfg, args.set)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.out:
        cfg = dataclasses.replace(cfg, out_dir=args.out)
    return cfg


def _cmd_run_experiment(args) -> int:
    cfg = _experiment_config(args)
    summary = harness.run_experiment(cfg)
    print(f"FR={summary['fr']:.1f}% Q={summary['queries']:.1f} "
          f"MAP={summary['map']:.4f} S={summary['sparsity_pct']:.2f}% "
          f"-> {summary['out_dir']}")
    return 0


def _cmd_phi_grid(args) -> int:
    cfg = _experiment_config(args)
    values = [float(v) for v in args.values.split(",")]
    rows = harness.phi_grid_search(values, cfg, validation=args.validation)
    for row in rows:
        print(f"phi={row['phi']:.2f} map={row['map_mean']:.4f} "
              f"q={row['q_mean']:.1f} s={row['s_mean']:.4f}")
    return 0


def _cmd_report(args) -> int:
    paired = harness.pair_runs(args.run_a, args.run_b, args.out)
    print(f"median Q: {paired['median_q_a']:.1f} vs {paired['median_q_b']:.1f}; "
          f"mean S: {paired['mean_s_a']:.4f} vs {paired['mean_s_b']:.4f}")
    return 0


def _cmd_saliency_dump(args) -> int:
    x = read_vid(args.video)
    mate = read_vid(args.pair) if args.pair else None
    mask = init_spatial_mask(x, mate, SpatialParams(phi=args.phi))
    write_vid(args.out, mask)
    print(f"mask written to {args.out} "
          f"(ones ratio {mask.mean():.4f})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sparsevid",
        description="Sparse black-box adversarial attacks on video classifiers")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic video dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=250)
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--channels", type=int, default=3)
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train-oracle", help="train the conv threat model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=12)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--batch-size", type=int, default=32)
    p.set_defaults(func=_cmd_train_oracle)

    p = sub.add_parser("pretrain-policy", help="pretrain the frame-selection policy")
    p.add_argument("--data", required=True)
    p.add_argument("--oracle", required=True)
    p.add_argument("--policy-ckpt", required=True)
    p.add_argument("--value-ckpt", required=True)
    p.add_argument("--stats", default="")
    p.add_argument("--mode", choices=[UNTARGETED, TARGETED], default=UNTARGETED)
    p.add_argument("--target-class", type=int, default=0)
    p.add_argument("--phi", type=float, default=0.6)
    _add_ppo_args(p)
    p.set_defaults(func=_cmd_pretrain_policy)

    p = sub.add_parser("finetune-policy", help="fine-tune the policy for one video")
    p.add_argument("--data", required=True)
    p.add_argument("--oracle", required=True)
    p.add_argument("--policy-ckpt", required=True)
    p.add_argument("--value-ckpt", required=True)
    p.add_argument("--video", required=True)
    p.add_argument("--target-class", type=int, required=True)
    p.add_argument("--out-policy", required=True)
    p.add_argument("--out-value", required=True)
    p.add_argument("--stats", default="")
    p.add_argument("--phi", type=float, default=0.6)
    _add_ppo_args(p)
    p.set_defaults(func=_cmd_finetune_policy)

    p = sub.add_parser("attack", help="attack one video")
    p.add_argument("--oracle", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--video", required=True)
    p.add_argument("--mode", choices=[UNTARGETED, TARGETED], default=UNTARGETED)
    p.add_argument("--target-class", type=int, default=0)
    p.add_argument("--method", choices=sorted(harness.METHODS), default="sparse-rl")
    p.add_argument("--policy-ckpt", default="")
    p.add_argument("--value-ckpt", default="")
    p.add_argument("--map-bound", type=float, default=0.0)
    p.add_argument("--candidates", type=int, default=20)
    p.add_argument("--max-iterations", type=int, default=1000)
    p.add_argument("--query-budget", type=int, default=50_000)
    p.add_argument("--phi", type=float, default=0.6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--pert-out", default="")
    p.set_defaults(func=_cmd_attack)

    p = sub.add_parser("run-experiment", help="run one method over the test set")
    p.add_argument("--config", default="")
    p.add_argument("--set", action="append", default=[],
                   metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="")
    p.set_defaults(func=_cmd_run_experiment)

    p = sub.add_parser("phi-grid", help="sweep the salient-area ratio")
    p.add_argument("--config", default="")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--values", default="0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0")
    p.add_argument("--validation", type=int, default=20)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="")
    p.set_defaults(func=_cmd_phi_grid)

    p = sub.add_parser("report", help="pair two runs for comparison")
    p.add_argument("run_a")
    p.add_argument("run_b")
    p.add_argument("--out", default="")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("saliency", help="saliency utilities")
    ssub = p.add_subparsers(dest="saliency_command", required=True)
    d = ssub.add_parser("dump", help="write the spatial mask as a .vid file")
    d.add_argument("--video", required=True)
    d.add_argument("--pair", default="")
    d.add_argument("--phi", type=float, default=0.6)
    d.add_argument("--out", required=True)
    d.set_defaults(func=_cmd_saliency_dump)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InputRejected as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
