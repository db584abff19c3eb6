"""AUC, GAUC and the per-domain / per-task report.

Undefined metrics (a cell or user with a single class) are ``None``, never 0.5.
GAUC weights each user by their record count in the cell and skips users
with only one class.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from .datagen import Log, as_log


@dataclass(frozen=True)
class EvalRecord:
    user: int
    domain: int
    task: int
    score: float
    label: int


def auc(scores, labels) -> float | None:
    """Rank-sum AUC; ties between a positive and a negative count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    ranks = rankdata(scores)  # average ranks for ties
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass(frozen=True)
class GaucResult:
    value: float | None
    users: int
    skipped: int


def gauc(users, scores, labels) -> GaucResult:
    users = np.asarray(users)
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if len(users) == 0:
        return GaucResult(None, 0, 0)
    order = np.argsort(users, kind="stable")
    u, s, y = users[order], scores[order], labels[order]
    bounds = np.flatnonzero(np.diff(u)) + 1
    num = den = 0.0
    used = skipped = 0
    for lo, hi in zip(np.r_[0, bounds], np.r_[bounds, len(u)]):
        a = auc(s[lo:hi], y[lo:hi])
        if a is None:
            skipped += 1
            continue
        w = hi - lo
        num += w * a
        den += w
        used += 1
    return GaucResult(float(num / den) if used else None, used, skipped)


def records_auc(records: Iterable[EvalRecord]) -> float | None:
    records = list(records)
    return auc([r.score for r in records], [r.label for r in records])


def records_gauc(records: Iterable[EvalRecord]) -> GaucResult:
    records = list(records)
    return gauc([r.user for r in records], [r.score for r in records], [r.label for r in records])


@dataclass
class Cell:
    domain: int
    task: int
    n: int
    positives: int
    auc: float | None
    gauc: float | None
    gauc_users: int
    gauc_skipped: int


# Summary means skip cells where fewer users than this have both classes;
# a GAUC over a handful of users is mostly noise.
MIN_GAUC_USERS = 20


class Report:
    def __init__(self, cells: list[Cell], domains: Sequence[str], tasks: Sequence[str],
                 min_users: int = MIN_GAUC_USERS):
        self.cells = cells
        self.domains = list(domains)
        self.tasks = list(tasks)
        self.min_users = min_users

    def __len__(self) -> int:
        return len(self.cells)

    def cell(self, d: int, t: int) -> Cell:
        return self.cells[d * len(self.tasks) + t]

    def summary_cells(self) -> list[Cell]:
        return [c for c in self.cells if c.gauc is not None and c.gauc_users >= self.min_users]

    def mean(self, metric: str = "gauc", all_cells: bool = False) -> float | None:
        """Mean over summary cells (or every defined cell with ``all_cells``)."""
        cells = self.cells if all_cells else self.summary_cells()
        vals = [getattr(c, metric) for c in cells if getattr(c, metric) is not None]
        return float(np.mean(vals)) if vals else None

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["domain", "task", "n", "positives", "auc", "gauc", "gauc_users", "gauc_skipped"])
        for c in self.cells:
            w.writerow([self.domains[c.domain], self.tasks[c.task], c.n, c.positives,
                        _fmt(c.auc), _fmt(c.gauc), c.gauc_users, c.gauc_skipped])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        return text

    def to_text(self) -> str:
        """One row per domain, AUC block then GAUC block, ``-`` for undefined."""
        head = ["Domain"] + [f"{t}(AUC)" for t in self.tasks] + [f"{t}(GAUC)" for t in self.tasks]
        rows = []
        for d, name in enumerate(self.domains):
            aucs = [_fmt(self.cell(d, t).auc, "-") for t in range(len(self.tasks))]
            gaucs = [_fmt(self.cell(d, t).gauc, "-") for t in range(len(self.tasks))]
            rows.append([name] + aucs + gaucs)
        widths = [max(len(r[i]) for r in [head] + rows) for i in range(len(head))]
        lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in [head] + rows]
        return "\n".join(lines) + "\n"


def _fmt(v, missing: str = "") -> str:
    return missing if v is None else f"{v:.6f}"


def report_from_scores(domain, users, labels, scores, domains: Sequence[str], tasks: Sequence[str]) -> Report:
    domain = np.asarray(domain)
    labels = np.asarray(labels)
    cells = []
    for d in range(len(domains)):
        rows = domain == d
        for t in range(len(tasks)):
            y, s, u = labels[rows, t], scores[rows, t], users[rows]
            g = gauc(u, s, y)
            cells.append(Cell(d, t, int(rows.sum()), int(y.sum()), auc(s, y), g.value, g.users, g.skipped))
    return Report(cells, domains, tasks)


def evaluate(model, test, domains: Sequence[str] | None = None, tasks: Sequence[str] | None = None) -> Report:
    """Score every test record and fill the domain x task table."""
    cfg = model.config
    log = as_log(test, [f.name for f in cfg.fields], cfg.num_tasks)
    domains = domains or [str(d) for d in range(cfg.num_domains)]
    tasks = tasks or [str(t) for t in range(cfg.num_tasks)]
    scores = model.predict(log) if len(log) else np.zeros((0, cfg.num_tasks))
    return report_from_scores(log.domain, log.features["user_id"], log.labels, scores, domains, tasks)
