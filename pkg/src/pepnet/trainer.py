"""Multi-task BCE training with separate optimizers for embeddings and DNN.

Embedding rows live in the store and are updated there with sparse AdaGrad;
every dense tower/gate parameter is updated with Adam. Offline mode uses the
offline Adam rate (1e-3), online-pass mode the much smaller online rate
(5e-6); the embedding rate is 0.05 in both.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .datagen import Log, as_log
from .evaluation import Report, evaluate
from .model import ModelConfig, PepNetModel
from .numerics import Node
from .store import EmbeddingStore, SyncPolicy, delta_nbytes, write_delta

log = logging.getLogger(__name__)

OFFLINE_DNN_LR = 1e-3
ONLINE_DNN_LR = 5e-6
EMBEDDING_LR = 0.05
ABLATION_VARIANTS = ("PEPNET", "PEPNET_NO_EP", "PEPNET_NO_PP", "SHARED_BOTTOM", "MMOE")


@dataclass
class TrainConfig:
    batch_size: int = 1024
    epochs: int = 1
    lr_dnn: float | None = None
    lr_embedding: float = EMBEDDING_LR
    task_weights: list[float] | None = None
    seed: int = 0
    mode: str = "offline"

    def __post_init__(self):
        if self.mode not in ("offline", "online"):
            raise ValueError(f"mode must be 'offline' or 'online', got {self.mode!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if (self.lr_dnn is not None and self.lr_dnn < 0) or self.lr_embedding < 0:
            raise ValueError("learning rates must be non-negative")

    @property
    def dnn_lr(self) -> float:
        if self.lr_dnn is not None:
            return self.lr_dnn
        return OFFLINE_DNN_LR if self.mode == "offline" else ONLINE_DNN_LR


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def like(cls, param: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(param), np.zeros_like(param))


def adam_step(state: AdamState, param: np.ndarray, grad: np.ndarray, lr: float) -> None:
    """Bias-corrected Adam, updating ``param`` in place."""
    if param.shape != grad.shape:
        raise ValueError(f"grad shape {grad.shape} != param shape {param.shape}")
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient")
    state.step += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grad
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    param -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


def multi_task_loss(scores: Node, labels, weights: Sequence[float] | None = None) -> Node:
    """``sum_t w_t * BCE_t`` over ``[batch, T]`` scores and labels."""
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape != scores.shape:
        raise nx.DimensionError(f"scores {scores.shape} vs labels {labels.shape}")
    T = scores.shape[1]
    weights = [1.0] * T if weights is None else list(weights)
    if len(weights) != T:
        raise nx.DimensionError(f"{len(weights)} task weights for {T} tasks")
    total = None
    for t, col in enumerate(nx.split(scores, [1] * T)):
        term = nx.scale(nx.bce_loss(col, labels[:, t:t + 1]), weights[t])
        total = term if total is None else nx.add(total, term)
    return total


class Trainer:
    """Holds optimizer state so training can stop and resume bitwise."""

    def __init__(self, model: PepNetModel, cfg: TrainConfig):
        self.model = model
        self.cfg = cfg
        self.adam = {k: AdamState.like(v) for k, v in model.params.items()}
        self.epoch = 0

    def step(self, batch: Log, pass_index: int | None = None) -> float:
        model, cfg = self.model, self.cfg
        res = model.forward(batch, pass_index=pass_index, train=True)
        loss = multi_task_loss(res.scores, batch.labels, cfg.task_weights)
        value = float(loss.value)
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite loss {value}")
        nx.backward(loss)
        slots = np.concatenate([res.emb_slots[i] for i in sorted(res.emb_slots)])
        grads = np.concatenate([res.emb_leaves[i].grad for i in sorted(res.emb_leaves)])
        model.store.apply_slot_gradients(slots, grads, cfg.lr_embedding, pass_index)
        lr = cfg.dnn_lr
        for name, leaf in res.leaves.items():
            adam_step(self.adam[name], model.params[name], leaf.grad, lr)
            model.update_tags.setdefault(name, set()).add("adam")
        return value

    def run_epoch(self, data: Log, pass_index: int | None = None, shuffle: bool = True) -> float:
        cfg = self.cfg
        n = len(data)
        order = (np.random.default_rng([cfg.seed, self.epoch]).permutation(n) if shuffle
                 else np.arange(n))
        losses = []
        for b, lo in enumerate(range(0, n, cfg.batch_size)):
            batch = data.take(order[lo:lo + cfg.batch_size])
            try:
                losses.append(self.step(batch, pass_index))
            except FloatingPointError as err:
                raise FloatingPointError(f"epoch {self.epoch} batch {b}: {err}") from None
        self.epoch += 1
        return float(np.mean(losses)) if losses else float("nan")

    def optimizer_state(self) -> dict[str, np.ndarray]:
        out = {"trainer/epoch": np.array([self.epoch], dtype=np.float64)}
        for k, s in self.adam.items():
            out[f"adam/m/{k}"] = s.m
            out[f"adam/v/{k}"] = s.v
            out[f"adam/step/{k}"] = np.array([s.step], dtype=np.float64)
        return out

    def load_optimizer_state(self, arrays: dict[str, np.ndarray]) -> None:
        if "trainer/epoch" in arrays:
            self.epoch = int(arrays["trainer/epoch"][0])
        for k, s in self.adam.items():
            if f"adam/m/{k}" in arrays:
                s.m = arrays[f"adam/m/{k}"].copy()
                s.v = arrays[f"adam/v/{k}"].copy()
                s.step = int(arrays[f"adam/step/{k}"][0])


def history_rows(epoch: int, variant: str, train_loss: float, report: Report | None,
                 valid_losses: np.ndarray | None = None) -> list[dict]:
    rows = [{"epoch": epoch, "variant": variant, "domain": "*", "task": "*",
             "loss": train_loss, "auc": None, "gauc": None}]
    if report is not None:
        for c in report.cells:
            rows.append({"epoch": epoch, "variant": variant, "domain": report.domains[c.domain],
                         "task": report.tasks[c.task],
                         "loss": None if valid_losses is None else float(valid_losses[c.domain, c.task]),
                         "auc": c.auc, "gauc": c.gauc})
    return rows


def cell_losses(model: PepNetModel, data: Log) -> np.ndarray:
    """Mean BCE per (domain, task) cell on ``data``."""
    cfg = model.config
    p = np.clip(model.predict(data), nx.BCE_EPS, 1 - nx.BCE_EPS)
    y = data.labels.astype(np.float64)
    ll = -(y * np.log(p) + (1 - y) * np.log1p(-p))
    out = np.full((cfg.num_domains, cfg.num_tasks), np.nan)
    for d in range(cfg.num_domains):
        rows = data.domain == d
        if rows.any():
            out[d] = ll[rows].mean(axis=0)
    return out


def train(model: PepNetModel, data, cfg: TrainConfig, valid=None, domains=None, tasks=None,
          trainer: Trainer | None = None) -> tuple[PepNetModel, list[dict]]:
    """Train for ``cfg.epochs`` epochs; returns the model and a metrics history."""
    mcfg = model.config
    data = as_log(data, [f.name for f in mcfg.fields], mcfg.num_tasks)
    valid = None if valid is None else as_log(valid, [f.name for f in mcfg.fields], mcfg.num_tasks)
    trainer = trainer or Trainer(model, cfg)
    history: list[dict] = []
    for _ in range(cfg.epochs):
        epoch = trainer.epoch
        t0 = time.perf_counter()
        loss = trainer.run_epoch(data, pass_index=epoch)
        report = losses = None
        if valid is not None and len(valid):
            report = evaluate(model, valid, domains, tasks)
            losses = cell_losses(model, valid)
        log.info("epoch %d variant %s loss %.6f mean GAUC %s (%.1fs)", epoch, mcfg.variant, loss,
                 None if report is None else report.mean("gauc"), time.perf_counter() - t0)
        history.extend(history_rows(epoch, mcfg.variant, loss, report, losses))
    return model, history


def write_history(path, history: Sequence[dict]) -> None:
    cols = ["epoch", "variant", "domain", "task", "loss", "auc", "gauc"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in history:
            w.writerow(["" if row[c] is None else (repr(float(row[c])) if isinstance(row[c], (float, np.floating))
                                                   else row[c]) for c in cols])


# -- online passes ------------------------------------------------------------------

@dataclass
class PassSummary:
    pass_index: int
    examples: int
    exported: int
    delta_bytes: int
    dnn_bytes: int
    evictions: int
    resident: int
    memory: int
    loss: float | None = None


def _replay_step(store: EmbeddingStore, batch: Log, field_ids: Sequence[int], names: Sequence[str],
                 pass_index: int, rng: np.random.Generator, lr: float) -> None:
    req = [(f, batch.features[n]) for f, n in zip(field_ids, names)]
    slots = np.concatenate(store.lookup_slots(req, pass_index))
    grads = rng.normal(0.0, 1e-2, size=(len(slots), store.dim))
    store.apply_slot_gradients(slots, grads, lr, pass_index)


def run_online_passes(model: PepNetModel | None, store: EmbeddingStore | None, stream, cfg: TrainConfig,
                      policy: SyncPolicy, passes: Sequence[int] | None = None,
                      delta_dir=None, trainer: Trainer | None = None) -> list[PassSummary]:
    """Train pass by pass and export an embedding delta after each one.

    With ``model=None`` this is a store-only replay: every key in the stream is
    looked up and receives a small seeded pseudo-gradient, which exercises
    admission, eviction and sync without a network.
    """
    if model is not None:
        store = model.store
        names = [f.name for f in model.config.fields]
        stream = as_log(stream, names, model.config.num_tasks)
        trainer = trainer or Trainer(model, cfg)
        dnn_bytes = model.n_params() * 8
    else:
        if store is None:
            raise ValueError("store-only replay needs a store")
        stream = as_log(stream)
        names = stream.field_names
        trainer = None
        dnn_bytes = 0
    if passes is None:
        passes = range(int(stream.timestamp.min()), int(stream.timestamp.max()) + 1) if len(stream) else []
    rng = np.random.default_rng([cfg.seed, 7])
    out = []
    for p in passes:
        chunk = stream.take(np.flatnonzero(stream.timestamp == p))
        if p > store.pass_index:
            store.advance_pass(p)
        before = store.evictions
        loss = None
        if len(chunk):
            if trainer is not None:
                loss = trainer.run_epoch(chunk, pass_index=p)
            else:
                for lo in range(0, len(chunk), cfg.batch_size):
                    _replay_step(store, chunk.take(slice(lo, lo + cfg.batch_size)),
                                 range(len(names)), names, p, rng, cfg.lr_embedding)
        delta = store.export_delta(policy, p)
        if delta_dir is not None:
            nbytes = write_delta(Path(delta_dir) / f"delta_{p:05d}.bin", p, delta)
        else:
            nbytes = delta_nbytes(delta)
        out.append(PassSummary(p, len(chunk), len(delta), nbytes, dnn_bytes, store.evictions - before,
                               len(store), store.memory_usage(), loss))
    return out


# -- ablation and sweeps ----------------------------------------------------------------

@dataclass
class RunResult:
    variant: str
    seed: int
    label: str
    report: Report
    history: list[dict] = field(default_factory=list)
    seconds: float = 0.0


@dataclass
class GridReport:
    runs: list[RunResult]

    def labels(self) -> list[str]:
        seen = []
        for r in self.runs:
            if r.label not in seen:
                seen.append(r.label)
        return seen

    def _spread(self, label: str, metric: str) -> tuple[float, float]:
        vals = [r.report.mean(metric) for r in self.runs if r.label == label]
        vals = [v for v in vals if v is not None]
        if not vals:
            return float("nan"), float("nan")
        return float(np.mean(vals)), float(np.std(vals))

    def mean_gauc(self, label: str) -> tuple[float, float]:
        """Seed mean and std of the summary GAUC; NaN when no run has a summary cell."""
        return self._spread(label, "gauc")

    def mean_auc(self, label: str) -> tuple[float, float]:
        return self._spread(label, "auc")

    def cell_table(self, label: str, metric: str = "gauc") -> np.ndarray:
        """Seed-mean of one metric per (domain, task); NaN where undefined."""
        runs = [r for r in self.runs if r.label == label]
        D, T = len(runs[0].report.domains), len(runs[0].report.tasks)
        vals = np.array([[np.nan if getattr(r.report.cell(d, t), metric) is None
                          else getattr(r.report.cell(d, t), metric)
                          for d in range(D) for t in range(T)] for r in runs])
        return np.nanmean(vals, axis=0).reshape(D, T) if len(vals) else np.full((D, T), np.nan)

    def to_text(self, reference: str = "PEPNET") -> str:
        lines = [f"{'run':<28}{'mean AUC':>20}{'mean GAUC':>20}"]
        for label in self.labels():
            a, sa = self.mean_auc(label)
            g, sg = self.mean_gauc(label)
            flag = "  (reference)" if label == reference else ""
            lines.append(f"{label:<28}{a:>11.4f} ± {sa:.4f}{g:>11.4f} ± {sg:.4f}{flag}")
        return "\n".join(lines) + "\n"

    def to_csv(self, path=None) -> str:
        rows = ["label,variant,seed,domain,task,auc,gauc"]
        for r in self.runs:
            for c in r.report.cells:
                rows.append(",".join([r.label, r.variant, str(r.seed), r.report.domains[c.domain],
                                      r.report.tasks[c.task],
                                      "" if c.auc is None else repr(c.auc),
                                      "" if c.gauc is None else repr(c.gauc)]))
        text = "\n".join(rows) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text


def train_and_evaluate(model_cfg: ModelConfig, train_cfg: TrainConfig, train_data: Log, test_data: Log,
                       domains=None, tasks=None, label: str | None = None) -> RunResult:
    t0 = time.perf_counter()
    model = PepNetModel(model_cfg)
    _, history = train(model, train_data, train_cfg)
    report = evaluate(model, test_data, domains, tasks)
    return RunResult(model_cfg.variant, train_cfg.seed, label or model_cfg.variant, report, history,
                     time.perf_counter() - t0)


def run_ablation_grid(train_data: Log, test_data: Log, base_model: ModelConfig, base_train: TrainConfig,
                      seeds: Sequence[int] = (0, 1, 2, 3, 4), variants: Sequence[str] = ABLATION_VARIANTS,
                      domains=None, tasks=None) -> GridReport:
    """Every variant under every seed on identical data; the seed drives both init and batching."""
    runs = []
    for seed in seeds:
        for v in variants:
            mcfg = ModelConfig(**{**base_model.to_dict(), "variant": v, "seed": seed})
            tcfg = TrainConfig(**{**base_train.__dict__, "seed": seed})
            run = train_and_evaluate(mcfg, tcfg, train_data, test_data, domains, tasks)
            log.info("seed %d %s mean GAUC %s (%.1fs)", seed, v, run.report.mean("gauc"), run.seconds)
            runs.append(run)
    return GridReport(runs)


SWEEP_AXES = ("gamma", "embedding_dim", "layers", "gate_input")


def run_sweep(train_data: Log, test_data: Log, base_model: ModelConfig, base_train: TrainConfig,
              axis: str, values: Sequence, seeds: Sequence[int] = (0,), domains=None, tasks=None) -> GridReport:
    """One PEPNet run per (value, seed) along a single hyperparameter axis."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    runs = []
    for value in values:
        for seed in seeds:
            mcfg = ModelConfig(**{**base_model.to_dict(), axis: value, "variant": "PEPNET", "seed": seed})
            tcfg = TrainConfig(**{**base_train.__dict__, "seed": seed})
            runs.append(train_and_evaluate(mcfg, tcfg, train_data, test_data, domains, tasks,
                                           label=f"{axis}={value}"))
    return GridReport(runs)
