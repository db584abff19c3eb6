"""``pepnet`` command line: generate, train, eval, ablate, syncsim.

Every command reads one JSON experiment config (``--config``; the schema is
:class:`ExperimentConfig`, any missing section takes its dataclass defaults)
and writes its outputs plus a ``manifest.json`` into ``--out``.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import subprocess
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .datagen import GenConfig, Log, generate, measured_overlap, positive_rates, read_log, split_by_time, write_log
from .evaluation import evaluate
from .model import VARIANTS, ModelConfig, PepNetModel, load_checkpoint, save_checkpoint
from .store import EmbeddingStore, StoreConfig, SyncPolicy
from .trainer import ABLATION_VARIANTS, TrainConfig, Trainer, run_ablation_grid, run_online_passes, train, write_history

log = logging.getLogger("pepnet")

LOG_LEVEL_ENV = "PEPNET_LOG_LEVEL"
EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class ConfigError(ValueError):
    pass


@dataclass
class SplitConfig:
    """Pass counts laid end to end: train first, then valid, then test."""
    train: int = 10
    valid: int = 1
    test: int = 1


@dataclass
class AblationConfig:
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    variants: list[str] = field(default_factory=lambda: list(ABLATION_VARIANTS))


@dataclass
class SyncSimConfig:
    dim: int = 8
    capacity: int = 4000
    n_fields: int = 2
    n_keys: int = 20_000
    passes: int = 8
    events_per_pass: int = 20_000
    distribution: str = "zipf"  # or "uniform"
    zipf_exponent: float = 1.1
    quotas: list[int] = field(default_factory=lambda: [100, 200, 400])
    min_update_count: int = 1
    pass_window: int = 1
    batch_size: int = 1024
    lr: float = 0.05
    seed: int = 0


@dataclass
class ExperimentConfig:
    data: GenConfig = field(default_factory=GenConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    # ModelConfig keyword arguments; fields/num_tasks/num_domains come from the data
    model: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    policy: SyncPolicy = field(default_factory=SyncPolicy)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    syncsim: SyncSimConfig = field(default_factory=SyncSimConfig)

    def to_dict(self) -> dict:
        return {"data": asdict(self.data), "split": asdict(self.split), "model": dict(self.model),
                "train": asdict(self.train), "policy": asdict(self.policy),
                "ablation": asdict(self.ablation), "syncsim": asdict(self.syncsim)}


_SECTIONS = {"data": GenConfig, "split": SplitConfig, "train": TrainConfig, "policy": SyncPolicy,
             "ablation": AblationConfig, "syncsim": SyncSimConfig}
_MODEL_KEYS = {f.name for f in fields(ModelConfig)} - {"fields", "num_tasks", "num_domains"}


def _section(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    extra = set(raw) - known
    if extra:
        raise ConfigError(f"{where}: unknown keys {sorted(extra)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{where}: {err}") from None


def load_config(path: str | os.PathLike | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"{path}: config file not found") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON at line {err.lineno}: {err.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    unknown = set(raw) - set(_SECTIONS) - {"model"}
    if unknown:
        raise ConfigError(f"{path}: unknown sections {sorted(unknown)}")
    cfg = ExperimentConfig()
    for name, cls in _SECTIONS.items():
        if name in raw:
            setattr(cfg, name, _section(cls, raw[name], f"{path}: [{name}]"))
    model = raw.get("model", {})
    if not isinstance(model, dict) or set(model) - _MODEL_KEYS:
        raise ConfigError(f"{path}: [model]: unknown keys {sorted(set(model) - _MODEL_KEYS)}")
    cfg.model = model
    return cfg


@dataclass
class RunManifest:
    command: str
    config_paths: list[str]
    seed: int | None
    build_id: str
    out_dir: str
    argv: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)

    def write(self, out_dir: Path) -> Path:
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def build_id() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).resolve().parent, capture_output=True, text=True,
                             timeout=5, check=True)
        return out.stdout.strip() or f"pepnet-{__version__}"
    except (OSError, subprocess.SubprocessError):
        return f"pepnet-{__version__}"


def _manifest(args, out: Path, seed, outputs: Sequence[str], argv: Sequence[str]) -> None:
    configs = [str(p) for p in (getattr(args, "config", None),) if p]
    RunManifest(args.command, configs, seed, build_id(), str(out), list(argv), sorted(outputs)).write(out)


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    """Fold command-line overrides into the config (the flags win)."""
    model = dict(cfg.model)
    for flag, key in (("variant", "variant"), ("gamma", "gamma"), ("embedding_dim", "embedding_dim"),
                      ("layers", "layers")):
        value = getattr(args, flag, None)
        if value is not None:
            model[key] = value
    train_kw = asdict(cfg.train)
    if getattr(args, "mode", None):
        train_kw["mode"] = args.mode
    if getattr(args, "epochs", None) is not None:
        train_kw["epochs"] = args.epochs
    seed = getattr(args, "seed", None)
    if seed is not None:
        cfg.data.seed = seed
        model["seed"] = seed
        train_kw["seed"] = seed
        cfg.syncsim.seed = seed
    cfg.model = model
    cfg.train = TrainConfig(**train_kw)
    return cfg


def _model_config(cfg: ExperimentConfig, dataset: dict) -> ModelConfig:
    gen = GenConfig(**dataset["data"])
    try:
        return ModelConfig(**{**cfg.model, "fields": gen.fields(), "num_tasks": len(gen.tasks),
                              "num_domains": len(gen.domains)})
    except (TypeError, ValueError) as err:
        raise ConfigError(f"[model]: {err}") from None


def _read_dataset(data_dir: Path) -> dict:
    path = data_dir / "dataset.json"
    if not path.exists():
        raise FileNotFoundError(f"{path}: no dataset description; run `pepnet generate` first")
    return json.loads(path.read_text(encoding="utf-8"))


def _read_split(data_dir: Path, name: str) -> Log:
    path = data_dir / f"{name}.log"
    if not path.exists():
        raise FileNotFoundError(f"{path}: log file not found")
    return read_log(path)


# -- commands ----------------------------------------------------------------------

def cmd_generate(args, cfg: ExperimentConfig, out: Path) -> list[str]:
    gen = cfg.data
    full = generate(gen)
    parts = split_by_time(full, cfg.split.train, cfg.split.valid, cfg.split.test)
    outputs = []
    for name, part in zip(("train", "valid", "test"), parts):
        write_log(out / f"{name}.log", part)
        outputs.append(f"{name}.log")
    dataset = {"data": asdict(gen), "split": asdict(cfg.split),
               "fields": [asdict(f) for f in gen.fields()]}
    (out / "dataset.json").write_text(json.dumps(dataset, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    rates = positive_rates(full, len(gen.domains))
    overlap = measured_overlap(full.features["user_id"], full.domain, len(gen.domains))
    with open(out / "stats.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "row", "col", "configured", "empirical"])
        for d, dn in enumerate(gen.domains):
            for t, tn in enumerate(gen.tasks):
                w.writerow(["rate", dn, tn, f"{gen.positive_rates[d][t]:.6f}", f"{rates[d, t]:.6f}"])
        for x, xn in enumerate(gen.domains):
            for y, yn in enumerate(gen.domains):
                w.writerow(["user_overlap", xn, yn, f"{gen.user_overlap[x][y]:.6f}", f"{overlap[x, y]:.6f}"])
    outputs += ["dataset.json", "stats.csv"]
    log.info("generated %d examples into %s", len(full), out)
    return outputs


def cmd_train(args, cfg: ExperimentConfig, out: Path) -> list[str]:
    data_dir = Path(args.data)
    dataset = _read_dataset(data_dir)
    gen = GenConfig(**dataset["data"])
    train_log = _read_split(data_dir, "train")
    valid_log = _read_split(data_dir, "valid")
    if args.resume:
        model, extra, meta = load_checkpoint(args.resume)
        trainer = Trainer(model, cfg.train)
        trainer.load_optimizer_state(extra)
    else:
        model = PepNetModel(_model_config(cfg, dataset))
        trainer = Trainer(model, cfg.train)
    outputs = ["model.ckpt", "metrics.csv"]
    if cfg.train.mode == "offline":
        _, history = train(model, train_log, cfg.train, valid=valid_log, domains=gen.domains,
                           tasks=gen.tasks, trainer=trainer)
        write_history(out / "metrics.csv", history)
    else:
        delta_dir = out / "deltas"
        delta_dir.mkdir(exist_ok=True)
        summaries = run_online_passes(model, None, train_log, cfg.train, cfg.policy,
                                      delta_dir=delta_dir, trainer=trainer)
        with open(out / "metrics.csv", "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["pass", "examples", "loss", "exported", "delta_bytes", "dnn_bytes", "evictions"])
            for s in summaries:
                w.writerow([s.pass_index, s.examples, "" if s.loss is None else repr(s.loss), s.exported,
                            s.delta_bytes, s.dnn_bytes, s.evictions])
        outputs += [f"deltas/{p.name}" for p in sorted(delta_dir.iterdir())]
    meta = {"domains": gen.domains, "tasks": gen.tasks, "train": asdict(cfg.train), "epochs_done": trainer.epoch}
    save_checkpoint(out / "model.ckpt", model, extra=trainer.optimizer_state(), meta=meta)
    return outputs


def cmd_eval(args, cfg: ExperimentConfig, out: Path) -> list[str]:
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise FileNotFoundError(f"{ckpt}: checkpoint not found")
    test = Path(args.test)
    if not test.exists():
        raise FileNotFoundError(f"{test}: test log not found")
    model, _, meta = load_checkpoint(ckpt)
    report = evaluate(model, read_log(test), meta.get("domains"), meta.get("tasks"))
    report.to_csv(out / "report.csv")
    (out / "report.txt").write_text(report.to_text(), encoding="utf-8")
    return ["report.csv", "report.txt"]


def cmd_ablate(args, cfg: ExperimentConfig, out: Path) -> list[str]:
    data_dir = Path(args.data)
    dataset = _read_dataset(data_dir)
    gen = GenConfig(**dataset["data"])
    seeds = args.seeds if args.seeds is not None else cfg.ablation.seeds
    grid = run_ablation_grid(_read_split(data_dir, "train"), _read_split(data_dir, "test"),
                             _model_config(cfg, dataset), cfg.train, seeds=seeds,
                             variants=cfg.ablation.variants, domains=gen.domains, tasks=gen.tasks)
    (out / "grid.txt").write_text(grid.to_text(reference="PEPNET"), encoding="utf-8")
    grid.to_csv(out / "grid.csv")
    with open(out / "runs.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", "variant", "seed", "mean_auc", "mean_gauc"])
        for r in grid.runs:
            w.writerow([r.label, r.variant, r.seed, repr(r.report.mean("auc")), repr(r.report.mean("gauc"))])
    return ["grid.txt", "grid.csv", "runs.csv"]


def synthetic_stream(sim: SyncSimConfig) -> Log:
    """Key-access stream: ``events_per_pass`` events per pass, one key per field."""
    rng = np.random.default_rng([sim.seed, 11])
    n = sim.passes * sim.events_per_pass
    if sim.distribution == "zipf":
        w = 1.0 / np.arange(1, sim.n_keys + 1) ** sim.zipf_exponent
        probs = w / w.sum()
        cols = {f"f{j}": rng.choice(sim.n_keys, size=n, p=probs) for j in range(sim.n_fields)}
    elif sim.distribution == "uniform":
        cols = {f"f{j}": rng.integers(0, sim.n_keys, size=n) for j in range(sim.n_fields)}
    else:
        raise ConfigError(f"[syncsim]: unknown distribution {sim.distribution!r}")
    ts = np.repeat(np.arange(sim.passes), sim.events_per_pass)
    return Log(np.zeros(n, dtype=np.int64), np.zeros((n, 1)), cols, ts)


def cmd_syncsim(args, cfg: ExperimentConfig, out: Path) -> list[str]:
    sim = cfg.syncsim
    stream = read_log(args.stream) if args.stream else synthetic_stream(sim)
    quotas = args.quota if args.quota is not None else sim.quotas
    tcfg = TrainConfig(batch_size=sim.batch_size, lr_embedding=sim.lr, seed=sim.seed, mode="online")
    outputs = ["syncsim.csv"]
    rows = []
    for q in quotas:
        policy = SyncPolicy(per_feature_quota=q, min_update_count=sim.min_update_count,
                            pass_window=sim.pass_window)
        store = EmbeddingStore(StoreConfig(dim=sim.dim, capacity=sim.capacity, seed=sim.seed))
        delta_dir = out / "deltas" / f"quota_{q}"
        delta_dir.mkdir(parents=True, exist_ok=True)
        for s in run_online_passes(None, store, stream, tcfg, policy, delta_dir=delta_dir):
            rows.append([q, s.pass_index, s.examples, s.exported, s.delta_bytes, s.evictions, s.resident, s.memory])
        outputs += [f"deltas/quota_{q}/{p.name}" for p in sorted(delta_dir.iterdir())]
    with open(out / "syncsim.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["quota", "pass", "examples", "exported", "delta_bytes", "evictions", "resident", "memory_bytes"])
        w.writerows(rows)
    return outputs


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval,
            "ablate": cmd_ablate, "syncsim": cmd_syncsim}


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pepnet", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"pepnet {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, model_flags=False):
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="overrides every seed in the config")
        if model_flags:
            p.add_argument("--variant", choices=VARIANTS)
            p.add_argument("--mode", choices=("offline", "online"))
            p.add_argument("--gamma", type=float)
            p.add_argument("--embedding-dim", type=int, dest="embedding_dim")
            p.add_argument("--layers", type=_int_list, help="tower widths, e.g. 64,32")
            p.add_argument("--epochs", type=int)

    p = sub.add_parser("generate", help="write train/valid/test logs and calibration stats")
    common(p)

    p = sub.add_parser("train", help="train one variant and write a checkpoint")
    common(p, model_flags=True)
    p.add_argument("--data", required=True, help="directory written by `generate`")
    p.add_argument("--resume", help="checkpoint to continue from (model, store and optimizer state)")

    p = sub.add_parser("eval", help="score a test log with a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test", required=True, help="log file to score")

    p = sub.add_parser("ablate", help="every variant under every seed on one dataset")
    common(p, model_flags=True)
    p.add_argument("--data", required=True)
    p.add_argument("--seeds", type=_int_list)

    p = sub.add_parser("syncsim", help="store-only replay reporting per-pass delta exports")
    common(p)
    p.add_argument("--stream", help="replay this log instead of the synthetic key stream")
    p.add_argument("--quota", type=_int_list, help="per-field export quotas, e.g. 100,200")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    level = os.environ.get(LOG_LEVEL_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on usage errors
    out = Path(args.out)
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        out.mkdir(parents=True, exist_ok=True)
        outputs = COMMANDS[args.command](args, cfg, out)
        _manifest(args, out, getattr(args, "seed", None), outputs, argv)
    except ConfigError as err:
        print(f"pepnet {args.command}: config error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as err:  # noqa: BLE001 - report, don't trace, at the command line
        log.debug("failure", exc_info=True)
        print(f"pepnet {args.command}: error: {err}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
