"""``kinetraj`` command line: data generation, training, inference and reports.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np
import torch

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import __version__
from .evaluation import (EvaluationError, MetricRow, accel_histogram, audit, load_trajectory_file,
                         overlay_svg, write_histograms, write_metrics_table)
from .model import CheckpointError, load_checkpoint
from .motion import MotionModelError
from .objectives import BoundSpec, LossError
from .pipeline import (DivergenceError, TrainConfig, cv_baseline_metrics, displacement_metrics,
                       predict, train)
from .scenario import ScenarioError, load_scenario, load_scenarios, save_scenario
from .synthetic import GeneratorConfig, generate_synthetic

log = logging.getLogger("kinetraj")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
THREADS_ENV = "KINETRAJ_THREADS"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------- config

def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def load_config(path, section: str, overrides: list[str]) -> dict:
    """Keys of ``[section]`` (or top-level keys) from a TOML file, then
    ``key=value`` overrides. Dotted override keys set nested dict entries."""
    values: dict = {}
    if path:
        doc = tomllib.loads(Path(path).read_text())
        values = dict(doc.get(section, {k: v for k, v in doc.items() if not isinstance(v, dict)}))
    for item in overrides or []:
        if "=" not in item:
            raise UsageError(f"override {item!r} is not key=value")
        key, text = item.split("=", 1)
        key = key.strip()
        if key.startswith(section + "."):
            key = key[len(section) + 1:]
        parts = key.split(".")
        target = values
        for p in parts[:-1]:
            target = target.setdefault(p, {})
        target[parts[-1]] = _parse_value(text.strip())
    return values


def _dataclass_from(cls, values: dict):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    if hasattr(cls, "from_dict"):
        return cls.from_dict(values)
    return cls(**values)


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()


def write_manifest(out_dir: Path, args, config: dict, seed) -> None:
    manifest = {
        "command": args.command,
        "argv": args.argv,
        "config": config,
        "config_hash": config_hash(config),
        "seed": seed,
        "threads": torch.get_num_threads(),
        "versions": {"kinetraj": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "torch": torch.__version__},
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str))


def _threads(args) -> int:
    value = args.threads if args.threads is not None else os.environ.get(THREADS_ENV)
    if value is None:
        return os.cpu_count() or 1
    try:
        n = int(value)
    except ValueError as exc:
        raise UsageError(f"thread count {value!r} is not an integer") from exc
    if n < 1:
        raise UsageError("thread count must be >= 1")
    return n


def _load_data(path, fmt: str, map_path=None):
    path = Path(path)
    if path.is_dir():
        data = load_scenarios(path, fmt)
    else:
        data = [load_scenario(path, fmt, map_path)]
    if not data:
        raise ScenarioError(f"{path}: no scenarios found")
    return data


def _train_val(args, val_fraction: float):
    root = Path(args.data)
    if args.val:
        return _load_data(root, args.format), _load_data(args.val, args.format)
    if (root / "train").is_dir() and (root / "val").is_dir():
        return _load_data(root / "train", args.format), _load_data(root / "val", args.format)
    data = _load_data(root, args.format)
    n_val = max(1, int(round(len(data) * val_fraction)))
    if n_val >= len(data):
        raise ScenarioError("not enough scenarios to hold out a validation split")
    order = np.random.default_rng(0).permutation(len(data))
    val = [data[i] for i in sorted(order[:n_val])]
    train_set = [data[i] for i in sorted(order[n_val:])]
    return train_set, val


def _config_from_checkpoint(header_config: dict, regime: str | None) -> TrainConfig:
    cfg = TrainConfig.from_dict(header_config["train"])
    if regime:
        cfg = dataclasses.replace(cfg, regime=regime)
    return cfg


def parse_bounds(text: str, kind: str) -> BoundSpec:
    """``default`` or ``lo1,lo2:hi1,hi2``."""
    if text == "default":
        return BoundSpec.default(kind)
    try:
        lo, hi = text.split(":")
        return BoundSpec([float(v) for v in lo.split(",")], [float(v) for v in hi.split(",")])
    except ValueError as exc:
        raise UsageError(f"bounds {text!r} must be 'default' or 'lo1,lo2:hi1,hi2'") from exc


# ---------------------------------------------------------------- subcommands

def cmd_gen_data(args) -> dict:
    values = load_config(args.config, "generator", args.set)
    cfg = _dataclass_from(GeneratorConfig, values)
    try:
        cfg.validate()
    except ScenarioError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scenarios = generate_synthetic(cfg, args.seed)
    for s in scenarios:
        save_scenario(s, out / f"{s.scenario_id}.json")
    log.info("wrote %d scenarios to %s", len(scenarios), out)
    return {"config": dataclasses.asdict(cfg), "seed": args.seed}


def cmd_convert(args) -> dict:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = _load_data(args.input, args.format, args.map)
    for s in data:
        save_scenario(s, out / f"{s.scenario_id}.json")
    log.info("converted %d scenarios", len(data))
    return {"config": {"input": str(args.input), "format": args.format, "map": args.map},
            "seed": None}


def cmd_train(args) -> dict:
    values = load_config(args.config, "train", args.set)
    try:
        cfg = TrainConfig.from_dict(values)
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    train_set, val_set = _train_val(args, cfg.val_fraction)
    result = train(cfg, train_set, val_set, args.out, threads=torch.get_num_threads())
    log.info("best epoch %d, val ADE %.3f", result.best_epoch, result.best_val_ade)
    return {"config": cfg.to_dict(), "seed": cfg.seed}


def cmd_predict(args) -> dict:
    model, header_cfg = load_checkpoint(args.checkpoint)
    cfg = _config_from_checkpoint(header_cfg, args.regime)
    data = _load_data(args.data, args.format)
    preds = predict(model, data, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = [{"scenario_id": p.scenario_id, "track_ids": p.track_ids, "regime": p.regime,
            "motion_model": p.model_kind, "trajectory": p.world_trajectory.tolist(),
            "actions": None if p.actions is None else p.actions.tolist()} for p in preds]
    (out / "predictions.json").write_text(json.dumps(doc))
    return {"config": {"checkpoint": str(args.checkpoint), **cfg.to_dict()}, "seed": cfg.seed}


def _label(cfg: TrainConfig) -> str:
    if cfg.motion_model == "none":
        return "WMM"
    return f"{cfg.regime}+{cfg.motion_model}"


def cmd_evaluate(args) -> dict:
    data = _load_data(args.data, args.format)
    rows = []
    config = {"data": str(args.data), "baseline": args.baseline}
    seed = None
    if args.baseline == "cv":
        a, f = cv_baseline_metrics(data, args.cv_window)
        rows.append(MetricRow("CV", a, f, len(data), "", "CV"))
    if args.checkpoint:
        model, header_cfg = load_checkpoint(args.checkpoint)
        cfg = _config_from_checkpoint(header_cfg, args.regime)
        preds = predict(model, data, cfg)
        a, f = displacement_metrics(preds, data, all_agents=args.all_agents)
        rows.append(MetricRow(args.label or _label(cfg), a, f, len(data), cfg.regime,
                              cfg.motion_model))
        config.update(checkpoint=str(args.checkpoint), train=cfg.to_dict())
        seed = cfg.seed
    if not rows:
        raise UsageError("evaluate needs --checkpoint and/or --baseline cv")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_table(out / "metrics.csv", rows)
    for r in rows:
        log.info("%-10s ADE %.3f FDE %.3f (n=%d)", r.label, r.ade, r.fde, r.count)
    return {"config": config, "seed": seed}


def cmd_audit(args) -> dict:
    doc = load_trajectory_file(args.trajectories)
    kind = args.model_kind or doc["model_kind"]
    bounds = parse_bounds(args.bounds, kind)
    rep = audit(doc["trajectories"], doc["inits"], doc["dt"], bounds, doc["grids"], kind,
                doc["ids"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "feasibility.json").write_text(json.dumps(rep.to_dict(), indent=2))
    bad = int((~rep.feasible).sum())
    log.info("%d of %d trajectories infeasible", bad, len(rep))
    return {"config": {"trajectories": str(args.trajectories), "bounds": args.bounds,
                       "model_kind": kind}, "seed": None}


def cmd_plot(args) -> dict:
    data = _load_data(args.data, args.format)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config = {"data": str(args.data)}
    if args.checkpoint:
        model, header_cfg = load_checkpoint(args.checkpoint)
        cfg = _config_from_checkpoint(header_cfg, None)
        preds = predict(model, data[:args.limit], cfg)
        for s, p in zip(data, preds):
            k = p.world_trajectory.shape[1]
            overlay_svg(out / f"overlay_{s.scenario_id}.svg",
                        s.ego.positions[:s.split_index], p.world_trajectory[0],
                        s.ego.positions[s.split_index:s.split_index + k])
        config["checkpoint"] = str(args.checkpoint)
    reps = {}
    for tag, path in (("with", args.with_delta), ("without", args.without_delta)):
        if path:
            model, header_cfg = load_checkpoint(path)
            cfg = _config_from_checkpoint(header_cfg, None)
            preds = predict(model, data, cfg)
            reps[tag] = accel_histogram(preds, data[0].dt, cfg.bounds, args.source)
            config[f"{tag}_delta"] = str(path)
    if reps:
        write_histograms(out, reps.get("with"), reps.get("without"))
    if not args.checkpoint and not reps:
        raise UsageError("plot needs --checkpoint and/or --with-delta/--without-delta")
    return {"config": config, "seed": None}


COMMANDS = {"gen-data": cmd_gen_data, "convert": cmd_convert, "train": cmd_train,
            "predict": cmd_predict, "evaluate": cmd_evaluate, "audit": cmd_audit,
            "plot": cmd_plot}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kinetraj", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, default=None,
                        help=f"worker threads (default: ${THREADS_ENV} or all cores; 1 = deterministic)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, data=True):
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--format", default="neutral_json", choices=["neutral_json", "argoverse_csv"])
        if data:
            p.add_argument("--data", required=True, help="scenario file or directory")

    p = sub.add_parser("gen-data", help="generate synthetic scenarios")
    p.add_argument("--config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("convert", help="convert scenarios to the neutral JSON format")
    p.add_argument("--input", required=True)
    p.add_argument("--map", default=None, help="PGM drivable mask")
    p.add_argument("--out", required=True)
    p.add_argument("--format", default="argoverse_csv", choices=["neutral_json", "argoverse_csv"])

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--val", default=None, help="validation scenarios (default: held-out split)")
    p.add_argument("--config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")

    p = sub.add_parser("predict", help="predict trajectories")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--regime", choices=["HSS", "HMS"], default=None)

    p = sub.add_parser("evaluate", help="ADE/FDE table")
    common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--regime", choices=["HSS", "HMS"], default=None)
    p.add_argument("--baseline", choices=["cv", "none"], default="none")
    p.add_argument("--cv-window", type=int, default=3)
    p.add_argument("--label", default=None)
    p.add_argument("--all-agents", action="store_true")

    p = sub.add_parser("audit", help="feasibility audit of trajectories")
    p.add_argument("--trajectories", required=True)
    p.add_argument("--bounds", default="default")
    p.add_argument("--model-kind", choices=["CV", "CTRA"], default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("plot", help="trajectory overlays and acceleration histograms")
    common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--with-delta", default=None, help="checkpoint trained with the bound loss")
    p.add_argument("--without-delta", default=None, help="checkpoint trained without it")
    p.add_argument("--source", choices=["head", "rollout"], default="head")
    p.add_argument("--limit", type=int, default=5)
    return parser


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        args.argv = argv
        torch.set_num_threads(_threads(args))
        if args.verbose:
            logging.getLogger().setLevel(logging.DEBUG)
        info = COMMANDS[args.command](args)
        write_manifest(Path(args.out), args, info["config"], info["seed"])
        return EXIT_OK
    except UsageError as exc:
        print(f"kinetraj: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, MotionModelError, FloatingPointError) as exc:
        print(f"kinetraj: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ScenarioError, CheckpointError, EvaluationError, LossError, FileNotFoundError,
            json.JSONDecodeError, tomllib.TOMLDecodeError, KeyError, ValueError) as exc:
        print(f"kinetraj: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
