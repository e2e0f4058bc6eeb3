"""Pin the [DERIVED] reference values used by the acceptance suite.

    python scripts/pin_reference.py            # CV baseline on the fixtures only
    python scripts/pin_reference.py --desk     # also train the desk runs (slow)

Writes tests/fixtures/reference_values.json. Run scripts/make_fixtures.py
first if the fixtures were regenerated.
"""
from __future__ import annotations

import argparse
import json
from pathlib import Path

import torch

from kinetraj import desk
from kinetraj.pipeline import cv_baseline_metrics, displacement_metrics, predict
from kinetraj.scenario import load_scenarios

FIXTURES = Path(__file__).resolve().parents[1] / "tests" / "fixtures"


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--desk", action="store_true", help="train and pin the desk runs")
    args = parser.parse_args()
    torch.set_num_threads(1)
    path = FIXTURES / "reference_values.json"
    ref = json.loads(path.read_text()) if path.exists() else {}
    val = load_scenarios(FIXTURES / "synthetic_val")
    a, f = cv_baseline_metrics(val)
    ref["cv_synthetic"] = {"ade": a, "fde": f, "scenarios": len(val)}
    print(f"CV  ADE {a:.4f} FDE {f:.4f}")
    if args.desk:
        ref["seed"] = desk.BASE.seed
        ref["data_seed"] = desk.TRAIN_SEED
        ref["desk"] = {}
        for name, res in desk.train_runs(desk.RUNS).items():
            a, f = displacement_metrics(predict(res.model, val, desk.config(name)), val)
            ref["desk"][name] = {"ade": a, "fde": f, "best_epoch": res.best_epoch}
            print(f"{name:20s} ADE {a:.4f} FDE {f:.4f}")
    path.write_text(json.dumps(ref, indent=2) + "\n")
    print(f"wrote {path}")


if __name__ == "__main__":
    main()
