#!/usr/bin/env python3
"""One-axis hyperparameter sweeps for the full model.

    python3 scripts/sweep.py --axis gamma --out runs/sweep
    python3 scripts/sweep.py --axis all --seeds 0,1

Axes: gamma {1, 2, 4}, embedding_dim {4, 8, 16}, layers (depth 1..3),
gate_input {stop_gradient, backprop, none}.
"""
import argparse
import logging
from pathlib import Path

from pepnet.cli import load_config
from pepnet.datagen import generate, split_by_time
from pepnet.model import ModelConfig
from pepnet.trainer import run_sweep

ROOT = Path(__file__).resolve().parents[1]
GRID = {
    "gamma": [1.0, 2.0, 4.0],
    "embedding_dim": [4, 8, 16],
    "layers": [[64], [64, 32], [64, 32, 16]],
    "gate_input": ["stop_gradient", "backprop", "none"],
}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--axis", default="gamma", choices=[*GRID, "all"])
    ap.add_argument("--config", default=str(ROOT / "configs/default.json"))
    ap.add_argument("--seeds", default="0")
    ap.add_argument("--out", default="runs/sweep")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    cfg = load_config(args.config)
    gen = cfg.data
    tr, _, te = split_by_time(generate(gen), cfg.split.train, cfg.split.valid, cfg.split.test)
    base = ModelConfig(**{**cfg.model, "fields": gen.fields(), "num_tasks": len(gen.tasks),
                          "num_domains": len(gen.domains)})
    seeds = [int(s) for s in args.seeds.split(",")]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for axis in GRID if args.axis == "all" else [args.axis]:
        grid = run_sweep(tr, te, base, cfg.train, axis, GRID[axis], seeds=seeds,
                         domains=gen.domains, tasks=gen.tasks)
        text = grid.to_text(reference=f"{axis}={getattr(base, axis)}")
        (out / f"sweep_{axis}.txt").write_text(text)
        grid.to_csv(out / f"sweep_{axis}.csv")
        print(f"== {axis}\n{text}")


if __name__ == "__main__":
    main()
