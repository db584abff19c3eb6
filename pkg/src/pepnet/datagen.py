"""Synthetic multi-domain, multi-task impression logs.

Sizes, positive rates and user/item overlaps default to a reference
three-domain, six-task production log, scaled down to desk size.

Each label is Bernoulli with logit

    bias[d, t] + user_bias[u, t] + item_bias[i, t] + hour_effect[t, h]
        + heterogeneity * signal_scale * task_weight[d, t, g]
          * sum_k dim_weight[d, g, k] * p[u, k] * q[i, k] / sqrt(K)

where ``g`` is the user's group, ``p``/``q`` are latent user/item vectors and
``bias[d, t]`` is solved by bisection to hit the configured positive rate.
The last term is the planted personalization: how much each latent dimension
matters depends on (domain, user group) and how strongly each task reacts
depends on (domain, task, user group). At ``heterogeneity=0`` it vanishes and
labels are additive in user, item and context effects, so one global
logistic model explains them.

Overlap matrices use ``overlap[x][y] = |X & Y| / |Y|``: the share of domain
``y``'s population that also appears in domain ``x``. This is the reading
under which the reference matrices agree with the reference domain sizes.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from scipy.optimize import nnls

SIDES = ("user", "item", "author", "context", "domain")

DOMAINS = ["A", "B", "C"]
TASKS = ["like", "follow", "forward", "hate", "click", "effview"]
REFERENCE_RATES = [
    [0.0368, 0.0048, 0.0021, 0.0020, 0.1466, 0.4557],
    [0.0291, 0.0033, 0.0021, 0.0006, 0.5838, 0.4458],
    [0.0282, 0.0035, 0.0028, 0.0008, 0.5733, 0.4848],
]
REFERENCE_USER_OVERLAP = [
    [1.0, 0.6364, 0.0682],
    [0.9211, 1.0, 0.0909],
    [0.0789, 0.0727, 1.0],
]
REFERENCE_ITEM_OVERLAP = [
    [1.0, 0.3854, 0.3826],
    [0.2117, 1.0, 0.4046],
    [0.2257, 0.4343, 1.0],
]
# users 76k/110k/88k, items 9474k/5205k/5588k, instances 48037k/68348k/78197k
REFERENCE_USERS = [76_000, 110_000, 88_000]
REFERENCE_ITEMS = [9_474_000, 5_205_000, 5_588_000]
REFERENCE_INSTANCES = [48_037, 68_348, 78_197]


@dataclass(frozen=True)
class FieldSpec:
    name: str
    side: str
    vocab: int

    def __post_init__(self):
        if self.side not in SIDES:
            raise ValueError(f"unknown side {self.side!r} for field {self.name}")


@dataclass
class Example:
    domain: int
    labels: tuple[int, ...]
    features: dict[str, int]
    timestamp: int = 0

    @property
    def user(self) -> int:
        return self.features["user_id"]

    @property
    def item(self) -> int:
        return self.features["item_id"]

    @property
    def author(self) -> int:
        return self.features["author_id"]


@dataclass
class GenConfig:
    domains: list[str] = field(default_factory=lambda: list(DOMAINS))
    tasks: list[str] = field(default_factory=lambda: list(TASKS))
    users_per_domain: list[int] = field(default_factory=lambda: [u // 400 for u in REFERENCE_USERS])
    items_per_domain: list[int] = field(default_factory=lambda: [i // 5000 for i in REFERENCE_ITEMS])
    instance_share: list[float] = field(default_factory=lambda: [float(x) for x in REFERENCE_INSTANCES])
    user_overlap: list[list[float]] = field(default_factory=lambda: [r[:] for r in REFERENCE_USER_OVERLAP])
    item_overlap: list[list[float]] = field(default_factory=lambda: [r[:] for r in REFERENCE_ITEM_OVERLAP])
    positive_rates: list[list[float]] = field(default_factory=lambda: [r[:] for r in REFERENCE_RATES])
    n_examples: int = 120_000
    n_passes: int = 12
    latent_dim: int = 8
    n_user_groups: int = 4
    n_categories: int = 24
    n_authors: int = 300
    n_hours: int = 6
    n_stat_buckets: int = 8
    heterogeneity: float = 1.0
    signal_scale: float = 2.0
    seed: int = 0

    def __post_init__(self):
        D, T = len(self.domains), len(self.tasks)
        if D < 1 or T < 1:
            raise ValueError("need at least one domain and one task")
        if len(self.positive_rates) != D or any(len(r) != T for r in self.positive_rates):
            raise ValueError("positive_rates must be a D x T matrix")
        for r in itertools.chain.from_iterable(self.positive_rates):
            if not 0.0 < r < 1.0:
                raise ValueError(f"infeasible positive rate {r}; rates must lie in (0, 1)")
        for name in ("user_overlap", "item_overlap"):
            m = np.asarray(getattr(self, name), dtype=float)
            if m.shape != (D, D) or np.any(m < 0) or np.any(m > 1):
                raise ValueError(f"{name} must be a D x D matrix of fractions in [0, 1]")
        if len(self.users_per_domain) != D or len(self.items_per_domain) != D or len(self.instance_share) != D:
            raise ValueError("per-domain lists must have one entry per domain")
        if self.heterogeneity < 0:
            raise ValueError("heterogeneity must be >= 0")

    @classmethod
    def from_json(cls, path) -> "GenConfig":
        return cls(**json.loads(Path(path).read_text()))

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n")

    def fields(self) -> list[FieldSpec]:
        return default_fields(self)


def default_fields(cfg: GenConfig) -> list[FieldSpec]:
    n_users = sum(cfg.users_per_domain)
    n_items = sum(cfg.items_per_domain)
    return [
        FieldSpec("user_id", "user", n_users),
        FieldSpec("user_group", "user", cfg.n_user_groups),
        FieldSpec("item_id", "item", n_items),
        FieldSpec("item_category", "item", cfg.n_categories),
        FieldSpec("author_id", "author", cfg.n_authors),
        FieldSpec("hour", "context", cfg.n_hours),
        FieldSpec("domain_id", "domain", len(cfg.domains)),
        FieldSpec("user_domain_activity", "domain", cfg.n_stat_buckets),
        FieldSpec("item_domain_exposure", "domain", cfg.n_stat_buckets),
    ]


class Log:
    """Column-oriented batch of examples; iterating yields :class:`Example`."""

    def __init__(self, domain, labels, features: dict[str, np.ndarray], timestamp):
        self.domain = np.asarray(domain, dtype=np.int64)
        labels = np.asarray(labels, dtype=np.int8)
        if labels.ndim != 2:
            labels = labels.reshape(len(self.domain), -1 if len(self.domain) else 0)
        self.labels = labels
        self.features = {k: np.asarray(v, dtype=np.int64) for k, v in features.items()}
        self.timestamp = np.asarray(timestamp, dtype=np.int64)
        self.truth: dict[str, np.ndarray] = {}

    @property
    def n_tasks(self) -> int:
        return self.labels.shape[1]

    @property
    def field_names(self) -> list[str]:
        return list(self.features)

    def __len__(self) -> int:
        return len(self.domain)

    def __iter__(self) -> Iterator[Example]:
        names = self.field_names
        cols = [self.features[n].tolist() for n in names]
        labels = self.labels.tolist()
        for i, (d, ts) in enumerate(zip(self.domain.tolist(), self.timestamp.tolist())):
            yield Example(d, tuple(labels[i]), {n: c[i] for n, c in zip(names, cols)}, ts)

    def take(self, idx) -> "Log":
        out = Log(self.domain[idx], self.labels[idx], {k: v[idx] for k, v in self.features.items()},
                  self.timestamp[idx])
        out.truth = {k: v[idx] for k, v in self.truth.items()}
        return out

    @classmethod
    def from_examples(cls, examples: Iterable[Example], field_names: Sequence[str] | None = None,
                      n_tasks: int | None = None) -> "Log":
        examples = list(examples)
        if field_names is None:
            field_names = list(examples[0].features) if examples else []
        if n_tasks is None:
            n_tasks = len(examples[0].labels) if examples else 0
        return cls([e.domain for e in examples],
                   np.array([e.labels for e in examples], dtype=np.int8).reshape(len(examples), n_tasks),
                   {n: [e.features[n] for e in examples] for n in field_names},
                   [e.timestamp for e in examples])

    def equals(self, other: "Log") -> bool:
        return (self.field_names == other.field_names
                and np.array_equal(self.domain, other.domain)
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.timestamp, other.timestamp)
                and all(np.array_equal(self.features[k], other.features[k]) for k in self.features))


def as_log(data, field_names: Sequence[str] | None = None, n_tasks: int | None = None) -> Log:
    return data if isinstance(data, Log) else Log.from_examples(data, field_names, n_tasks)


# -- population construction ------------------------------------------------

def venn_counts(sizes: Sequence[int], overlap: Sequence[Sequence[float]]) -> dict[tuple[int, ...], int]:
    """Integer size of every non-empty membership pattern matching sizes and pairwise overlaps."""
    D = len(sizes)
    regions = [r for k in range(1, D + 1) for r in itertools.combinations(range(D), k)]
    rows, rhs = [], []
    for x in range(D):
        rows.append([1.0 if x in r else 0.0 for r in regions])
        rhs.append(sizes[x])
    for x, y in itertools.combinations(range(D), 2):
        # average the two estimates of |X & Y|
        inter = 0.5 * (overlap[x][y] * sizes[y] + overlap[y][x] * sizes[x])
        rows.append([1.0 if (x in r and y in r) else 0.0 for r in regions])
        rhs.append(inter)
    sol, _ = nnls(np.array(rows), np.array(rhs))
    floor = np.floor(sol).astype(int)
    # largest remainder keeps the total equal to the rounded real total
    short = int(round(sol.sum())) - int(floor.sum())
    for j in np.argsort(-(sol - floor), kind="stable")[:max(short, 0)]:
        floor[j] += 1
    return {r: int(n) for r, n in zip(regions, floor) if n > 0}


def membership(sizes, overlap, rng: np.random.Generator) -> np.ndarray:
    """Boolean ``[population, D]`` matrix of which entities belong to which domain."""
    counts = venn_counts(sizes, overlap)
    total = sum(counts.values())
    member = np.zeros((total, len(sizes)), dtype=bool)
    order = rng.permutation(total)
    pos = 0
    for region, n in counts.items():
        member[np.ix_(order[pos:pos + n], list(region))] = True
        pos += n
    return member


def measured_overlap(entity: np.ndarray, domain: np.ndarray, n_domains: int) -> np.ndarray:
    """``out[x][y] = |X & Y| / |Y|`` over entities that actually appear per domain."""
    sets = [set(np.unique(entity[domain == d]).tolist()) for d in range(n_domains)]
    out = np.ones((n_domains, n_domains))
    for x in range(n_domains):
        for y in range(n_domains):
            if x != y:
                out[x, y] = len(sets[x] & sets[y]) / max(len(sets[y]), 1)
    return out


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def calibrate_bias(signal: np.ndarray, rate: float, tol: float = 1e-12) -> float:
    """Offset ``b`` with ``mean(sigmoid(signal + b)) == rate``, by bisection."""
    if not 0.0 < rate < 1.0:
        raise ValueError(f"infeasible rate {rate}")
    lo, hi = -60.0 - signal.max(), 60.0 - signal.min()
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if _sigmoid(signal + mid).mean() < rate:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol:
            break
    return 0.5 * (lo + hi)


def _bucket(counts: np.ndarray, n_buckets: int) -> np.ndarray:
    return np.minimum(np.floor(np.log2(1 + counts)).astype(np.int64), n_buckets - 1)


def _pair_counts(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """For each row, how many rows share its ``(a, b)`` pair."""
    key = a * (int(b.max()) + 1) + b
    _, inv, cnt = np.unique(key, return_inverse=True, return_counts=True)
    return cnt[inv]


def generate(cfg: GenConfig) -> Log:
    """Draw ``cfg.n_examples`` impressions spread evenly over ``cfg.n_passes`` passes."""
    rng = np.random.default_rng(cfg.seed)
    D, T, K, G = len(cfg.domains), len(cfg.tasks), cfg.latent_dim, cfg.n_user_groups
    h = cfg.heterogeneity

    user_member = membership(cfg.users_per_domain, cfg.user_overlap, rng)
    item_member = membership(cfg.items_per_domain, cfg.item_overlap, rng)
    n_users, n_items = len(user_member), len(item_member)

    user_group = rng.integers(0, G, n_users)
    user_latent = rng.normal(size=(n_users, K))
    user_activity = rng.lognormal(0.0, 0.5, n_users)
    user_bias = rng.normal(0.0, 0.3, size=(n_users, T))

    item_category = rng.integers(0, cfg.n_categories, n_items)
    item_author = rng.integers(0, cfg.n_authors, n_items)
    cat_latent = rng.normal(size=(cfg.n_categories, K))
    author_latent = rng.normal(size=(cfg.n_authors, K))
    item_latent = 0.7 * cat_latent[item_category] + 0.4 * author_latent[item_author] \
        + 0.5 * rng.normal(size=(n_items, K))
    item_popularity = rng.lognormal(0.0, 1.0, n_items)
    item_bias = rng.normal(0.0, 0.3, size=(n_items, T))

    dim_weight = 1.0 + rng.normal(size=(D, G, K))
    task_weight = 1.0 + rng.normal(0.0, 0.5, size=(D, T, G))
    hour_effect = rng.normal(0.0, 0.2, size=(T, cfg.n_hours))

    share = np.asarray(cfg.instance_share, dtype=float)
    domain = rng.choice(D, size=cfg.n_examples, p=share / share.sum())
    user = np.empty(cfg.n_examples, dtype=np.int64)
    item = np.empty(cfg.n_examples, dtype=np.int64)
    for d in range(D):
        rows = np.flatnonzero(domain == d)
        us = np.flatnonzero(user_member[:, d])
        its = np.flatnonzero(item_member[:, d])
        uw = user_activity[us] / user_activity[us].sum()
        iw = item_popularity[its] / item_popularity[its].sum()
        user[rows] = us[rng.choice(len(us), size=len(rows), p=uw)]
        item[rows] = its[rng.choice(len(its), size=len(rows), p=iw)]
    hour = rng.integers(0, cfg.n_hours, cfg.n_examples)

    g = user_group[user]
    prod = user_latent[user] * item_latent[item]
    interaction = (prod * dim_weight[domain, g]).sum(axis=1) / math.sqrt(K)
    logits = np.empty((cfg.n_examples, T))
    for t in range(T):
        logits[:, t] = (h * cfg.signal_scale * task_weight[domain, t, g] * interaction
                        + user_bias[user, t] + item_bias[item, t] + hour_effect[t, hour])
    for d in range(D):
        rows = domain == d
        for t in range(T):
            logits[rows, t] += calibrate_bias(logits[rows, t], cfg.positive_rates[d][t])
    labels = (rng.random((cfg.n_examples, T)) < _sigmoid(logits)).astype(np.int8)

    timestamp = (np.arange(cfg.n_examples) * cfg.n_passes) // cfg.n_examples
    features = {
        "user_id": user,
        "user_group": g,
        "item_id": item,
        "item_category": item_category[item],
        "author_id": item_author[item],
        "hour": hour,
        "domain_id": domain,
        "user_domain_activity": _bucket(_pair_counts(user, domain), cfg.n_stat_buckets),
        "item_domain_exposure": _bucket(_pair_counts(item, domain), cfg.n_stat_buckets),
    }
    log = Log(domain, labels, features, timestamp)
    log.truth = {"logits": logits, "interaction_terms": prod, "user_group": g}
    return log


def positive_rates(log: Log, n_domains: int) -> np.ndarray:
    return np.array([log.labels[log.domain == d].mean(axis=0) for d in range(n_domains)])


# -- log files ----------------------------------------------------------------

class LogParseError(ValueError):
    pass


def _format_line(domain: int, labels, names, values, ts: int) -> str:
    toks = [str(domain), *map(str, labels), *(f"{n}:{v}" for n, v in zip(names, values)), f"ts:{ts}"]
    return "\t".join(toks)


def write_log(path, examples) -> None:
    """Tab-separated: domain, T labels, ``field:value`` tokens, then ``ts:<pass>``."""
    log = as_log(examples)
    names = log.field_names
    cols = [log.features[n].tolist() for n in names]
    labels = log.labels.tolist()
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i, (d, ts) in enumerate(zip(log.domain.tolist(), log.timestamp.tolist())):
            fh.write(_format_line(d, labels[i], names, [c[i] for c in cols], ts))
            fh.write("\n")


def read_log(path) -> Log:
    domains, labels, stamps = [], [], []
    cols: dict[str, list[int]] = {}
    names: list[str] | None = None
    n_tasks = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            toks = line.split("\t")
            try:
                split_at = next(i for i, t in enumerate(toks) if ":" in t)
                head, tail = toks[:split_at], toks[split_at:]
                d, labs = int(head[0]), [int(x) for x in head[1:]]
                pairs = [t.split(":", 1) for t in tail]
                if pairs[-1][0] != "ts":
                    raise ValueError("missing trailing ts token")
                ts = int(pairs[-1][1])
                feats = [(k, int(v)) for k, v in pairs[:-1]]
            except (ValueError, IndexError, StopIteration) as err:
                raise LogParseError(f"{path}:{lineno}: malformed line ({err})") from None
            if any(x not in (0, 1) for x in labs):
                raise LogParseError(f"{path}:{lineno}: labels must be 0 or 1")
            if names is None:
                names = [k for k, _ in feats]
                n_tasks = len(labs)
                cols = {k: [] for k in names}
            if [k for k, _ in feats] != names or len(labs) != n_tasks:
                raise LogParseError(f"{path}:{lineno}: fields or label count differ from line 1")
            domains.append(d)
            labels.append(labs)
            stamps.append(ts)
            for k, v in feats:
                cols[k].append(v)
    if names is None:
        return Log(np.zeros(0, dtype=np.int64), np.zeros((0, 0), dtype=np.int8), {}, np.zeros(0, dtype=np.int64))
    return Log(domains, np.array(labels, dtype=np.int8), cols, stamps)


def split_by_time(examples, train_passes, valid_passes, test_passes):
    """Split by timestamp into train/valid/test.

    Each range is either a count (blocks laid end to end from pass 0) or a
    ``(start, stop)`` half-open pair. Input order is kept within each split.
    """
    ranges = []
    cursor = 0
    for r in (train_passes, valid_passes, test_passes):
        if isinstance(r, (int, np.integer)):
            ranges.append((cursor, cursor + int(r)))
            cursor += int(r)
        else:
            start, stop = (r.start, r.stop) if isinstance(r, range) else r
            ranges.append((int(start), int(stop)))
    for (a0, a1), (b0, b1) in itertools.combinations(ranges, 2):
        if max(a0, b0) < min(a1, b1):
            raise ValueError(f"overlapping pass ranges {ranges}")
    if isinstance(examples, Log):
        return tuple(examples.take(np.flatnonzero((examples.timestamp >= lo) & (examples.timestamp < hi)))
                     for lo, hi in ranges)
    examples = list(examples)
    return tuple([e for e in examples if lo <= e.timestamp < hi] for lo, hi in ranges)
