"""Command line entry point: ``mapdkit train | measure | heatmap | ingest``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from ..measure import MeasureConfig
from .config import ConfigError, ExperimentConfig, default_output_root, load_config, parse_config
from .heatmap import emit_heatmap
from .io import IngestError, ingest_offline, write_matrix
from .runner import measure_checkpoints, measure_offline, run_experiment


def _seed_list(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mapdkit", description="Policy distances and dynamic parameter sharing on spread tasks.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one method over one or more seeds")
    t.add_argument("--config", type=Path, help="TOML experiment file")
    t.add_argument("--scenario")
    t.add_argument("--method", help="NPS, FPS, FPS-id or MADPS")
    t.add_argument("--seeds", type=_seed_list)
    t.add_argument("--steps", type=int, help="environment steps per seed")
    t.add_argument("--out", type=Path)
    t.add_argument("--eps1", type=float, help="fusion threshold (division defaults to twice this)")
    t.add_argument("--period", type=int, help="steps between measurement rounds")
    t.add_argument("--budget", type=int, help="steps per measurement rollout")

    m = sub.add_parser("measure", help="distance matrices for trained checkpoints")
    m.add_argument("checkpoints", nargs="+", type=Path)
    m.add_argument("--mode", default="normal", help="normal or customized:<feature id>")
    m.add_argument("--scenario", help="refuse checkpoints trained on a different scenario")
    m.add_argument("--budget", type=int, default=100)
    m.add_argument("--rollouts", type=int, default=4)
    m.add_argument("--seeds", type=_seed_list, default=[0], help="measurement RNG seed")
    m.add_argument("--out", type=Path)

    h = sub.add_parser("heatmap", help="render a matrix CSV/JSON file as SVG")
    h.add_argument("matrix", type=Path)
    h.add_argument("--out", type=Path)

    i = sub.add_parser("ingest", help="measure policies from an offline JSONL decision log")
    i.add_argument("log", type=Path)
    i.add_argument("--out", type=Path)
    i.add_argument("--seeds", type=_seed_list, default=[0])
    return p


def _train(args) -> int:
    overrides = {"scenario": args.scenario, "method": args.method, "seeds": args.seeds, "steps": args.steps,
                 "out": None if args.out is None else str(args.out), "eps1": args.eps1, "period": args.period,
                 "budget": args.budget}
    exp = load_config(args.config, overrides) if args.config else parse_config("", "<flags>", overrides)
    out = run_experiment(exp)
    print(out)
    return 0


def _measure(args) -> int:
    cfg = MeasureConfig(rollouts=args.rollouts, budget=args.budget)
    out = args.out or default_output_root() / "measure"
    mats = measure_checkpoints(args.checkpoints, args.mode, cfg, out, seed=args.seeds[0], scenario=args.scenario)
    for dm in mats:
        print(f"{dm.meta.get('checkpoint')}: {dm.n}x{dm.n}, max {dm.values.max():.4g}")
    print(out)
    return 0


def _heatmap(args) -> int:
    out = args.out or args.matrix.with_suffix(".svg")
    print(emit_heatmap(args.matrix, out))
    return 0


def _ingest(args) -> int:
    samples = ingest_offline(args.log)
    dm = measure_offline(samples, MeasureConfig(), np.random.default_rng(args.seeds[0]))
    out = args.out or default_output_root() / "ingest"
    csv_path, _ = write_matrix(dm, Path(out) / args.log.stem)
    print(csv_path)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    handlers = {"train": _train, "measure": _measure, "heatmap": _heatmap, "ingest": _ingest}
    try:
        return handlers[args.command](args)
    except (ConfigError, IngestError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
