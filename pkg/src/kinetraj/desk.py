"""Desk-scale experiment recipe shared by the acceptance suite and scripts/.

All runs train on the same synthetic set with identical optimiser settings,
select their best epoch on a separate synthetic selection split, and are
scored on the bundled held-out fixtures.
"""
from __future__ import annotations

import dataclasses
from pathlib import Path

from .pipeline import TrainConfig, TrainResult, train
from .scenario import Scenario
from .synthetic import FAMILIES, GeneratorConfig, generate_synthetic

TRAIN_SEED = 0
SELECT_SEED = 1
NOISE_STD = 0.05
PER_FAMILY = 50

BASE = TrainConfig(epochs=50, batch_size=16, seed=0)

RUNS = {
    "HSS+CTRA": dict(regime="HSS"),
    "HMS+CTRA": dict(regime="HMS"),
    "WMM": dict(regime="HSS", motion_model="none"),
    # constraint ablation: no bounded head and no delta penalty
    "HSS+CTRA unbounded": dict(regime="HSS", bounded_head=False, lambda_delta=0.0),
}


def config(name: str, **overrides) -> TrainConfig:
    return dataclasses.replace(BASE, **{**RUNS[name], **overrides})


def train_set(per_family: int = PER_FAMILY) -> list[Scenario]:
    cfg = GeneratorConfig(counts={f: per_family for f in FAMILIES}, noise_std=NOISE_STD)
    return generate_synthetic(cfg, TRAIN_SEED)


def selection_set(per_family: int = 5) -> list[Scenario]:
    cfg = GeneratorConfig(counts={f: per_family for f in FAMILIES}, noise_std=NOISE_STD)
    return generate_synthetic(cfg, SELECT_SEED)


def train_runs(names, out_dir=None, **overrides) -> dict[str, TrainResult]:
    """Train each named run; checkpoints go to ``out_dir/<name>/`` when given."""
    data, select = train_set(), selection_set()
    results = {}
    for name in names:
        run_dir = None if out_dir is None else Path(out_dir) / name.replace(" ", "_").replace("+", "_")
        results[name] = train(config(name, **overrides), data, select, out_dir=run_dir)
    return results
