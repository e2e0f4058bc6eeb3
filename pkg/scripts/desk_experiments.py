"""Train the desk-scale runs and write the comparison artefacts.

    python scripts/desk_experiments.py --out runs/desk [--epochs 50]

Produces one checkpoint directory per run, metrics.csv (CV baseline plus
every run, scored on the bundled held-out fixtures) and the four
histogram_{ax,ay}_{with,without}_delta.csv files comparing the constrained
HSS+CTRA run against its unbounded, penalty-free twin.
"""
from __future__ import annotations

import argparse
from pathlib import Path

import torch

from kinetraj import desk
from kinetraj.evaluation import MetricRow, accel_histogram, report
from kinetraj.pipeline import cv_baseline_metrics, displacement_metrics, predict
from kinetraj.scenario import load_scenarios

FIXTURES = Path(__file__).resolve().parents[1] / "tests" / "fixtures"


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", type=Path, default=Path("runs/desk"))
    parser.add_argument("--epochs", type=int, default=desk.BASE.epochs)
    parser.add_argument("--runs", nargs="*", default=list(desk.RUNS), choices=list(desk.RUNS))
    args = parser.parse_args()
    torch.set_num_threads(1)
    val = load_scenarios(FIXTURES / "synthetic_val")
    a, f = cv_baseline_metrics(val)
    rows = [MetricRow("CV", a, f, len(val), "", "CV")]
    preds = {}
    results = desk.train_runs(args.runs, out_dir=args.out, epochs=args.epochs)
    for name, res in results.items():
        cfg = desk.config(name, epochs=args.epochs)
        preds[name] = predict(res.model, val, cfg)
        a, f = displacement_metrics(preds[name], val)
        rows.append(MetricRow(name, a, f, len(val), cfg.regime, cfg.motion_model))
    bounds = desk.config("HSS+CTRA").bounds
    reports = {tag: accel_histogram(preds[name], 0.1, bounds) if name in preds else None
               for tag, name in (("with", "HSS+CTRA"), ("without", "HSS+CTRA unbounded"))}
    for path in report(args.out, rows, reports["with"], reports["without"]):
        print(path)
    for r in rows:
        print(f"{r.label:20s} ADE {r.ade:.3f} FDE {r.fde:.3f}")
    for tag, rep in reports.items():
        if rep is not None:
            print(f"{tag} delta: {rep.exceed_fraction(bounds):.1%} of scenarios exceed the bounds")


if __name__ == "__main__":
    main()
