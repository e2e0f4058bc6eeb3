"""Regenerate the bundled test fixtures.

    python scripts/make_fixtures.py

Writes tests/fixtures/synthetic_val/*.json (noisy synthetic validation
scenarios used by the CV-baseline harness) and tests/fixtures/argoverse_sample.csv
(a small file in the Argoverse v1 forecasting layout).
"""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from kinetraj.scenario import save_scenario
from kinetraj.synthetic import FAMILIES, GeneratorConfig, generate_synthetic

ROOT = Path(__file__).resolve().parents[1] / "tests" / "fixtures"
VAL_SEED = 2024
VAL_NOISE = 0.05


def synthetic_val(out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for old in out.glob("*.json"):
        old.unlink()
    cfg = GeneratorConfig(counts={f: 10 for f in FAMILIES}, noise_std=VAL_NOISE)
    for s in generate_synthetic(cfg, VAL_SEED):
        save_scenario(s, out / f"{s.scenario_id}.json")


def argoverse_sample(path: Path) -> None:
    # AGENT curving left at 8 m/s, AV driving straight, one short-lived OTHERS track
    t0 = 315969000.0
    rows = []
    for k in range(50):
        t = k * 0.1
        yaw = 0.1 * t
        rows.append((t0 + t, "00000000-0000-0000-0000-000000000001", "AGENT",
                     100 + 80 * np.sin(yaw), 200 + 80 * (1 - np.cos(yaw))))
        rows.append((t0 + t, "00000000-0000-0000-0000-000000000000", "AV",
                     90 + 6 * t, 196.0))
        if 10 <= k < 35:
            rows.append((t0 + t, "00000000-0000-0000-0000-000000000002", "OTHERS",
                         120 - 3 * t, 205.0))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["TIMESTAMP", "TRACK_ID", "OBJECT_TYPE", "X", "Y", "CITY_NAME"])
        for r in rows:
            w.writerow([f"{r[0]:.6f}", r[1], r[2], f"{r[3]:.6f}", f"{r[4]:.6f}", "PIT"])


if __name__ == "__main__":
    synthetic_val(ROOT / "synthetic_val")
    argoverse_sample(ROOT / "argoverse_sample.csv")
    print(f"fixtures written to {ROOT}")
