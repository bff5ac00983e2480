import dataclasses
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from sparsevid.dataset import SyntheticDatasetSpec, build_dataset, gen_dataset
from sparsevid.harness import ExperimentConfig, pretrain_policy
from sparsevid.nn import save_checkpoint
from sparsevid.oracle import save_oracle, train_conv_oracle
from sparsevid.ppo import PpoConfig

TINY_SPEC = SyntheticDatasetSpec(num_classes=2, samples_per_class=60,
                                 frames=6, height=16, width=16, seed=11)


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    """Small end-to-end workspace: dataset dir, oracle file, policy ckpts."""
    root = tmp_path_factory.mktemp("tiny_run")
    data_dir = root / "data"
    gen_dataset(TINY_SPEC, data_dir)
    data = build_dataset(TINY_SPEC)
    oracle = train_conv_oracle(
        data.train_videos, data.train_labels, data.test_videos,
        data.test_labels, data.num_classes, epochs=14, seed=11)
    oracle_path = root / "oracle.bin"
    save_oracle(oracle_path, oracle)
    cfg = PpoConfig(iterations=2, actors=1, timesteps_per_actor=8,
                    epochs=1, minibatch_size=8, seed=11)
    policy, value, _ = pretrain_policy(data, oracle, cfg, phi=0.6)
    policy_path = root / "policy.bin"
    value_path = root / "value.bin"
    save_checkpoint(policy_path, policy)
    save_checkpoint(value_path, value)
    return {
        "root": root,
        "data_dir": str(data_dir),
        "oracle_path": str(oracle_path),
        "policy_path": str(policy_path),
        "value_path": str(value_path),
        "data": data,
        "oracle": oracle,
    }


def tiny_experiment_config(tiny_run, out_dir, **overrides) -> ExperimentConfig:
    base = dict(
        data_dir=tiny_run["data_dir"], oracle_path=tiny_run["oracle_path"],
        policy_path=tiny_run["policy_path"], value_path=tiny_run["value_path"],
        out_dir=str(out_dir), method="sparse-rl", num_videos=4, seed=5,
        num_candidates=3, max_iterations=4, grad_samples=3, query_budget=1500,
        finetune_iterations=1, finetune_actors=1, finetune_timesteps=8,
        finetune_minibatch=8)
    base.update(overrides)
    return ExperimentConfig(**base)
