"""Capacity-bounded global shared embedding table (GSET) with delta export.

Entries are keyed exactly by ``(field, value_id)``; distinct keys never share a
slot. Each entry carries a feature score (touch count with per-pass decay)
that decides eviction when the table is full, an update counter and the pass
of its last gradient update (for delta export), and an AdaGrad accumulator.

Eviction order, lowest priority first: smaller score, then older
``last_update_pass``, then larger value id, then larger field id.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

DEFAULT_DECAY = 0.999
ADAGRAD_EPS = 1e-8
# score, update_count, last_update_pass (8 bytes each), field id (4), value id (8)
ENTRY_METADATA_BYTES = 36


class FeatureKey(NamedTuple):
    field: int
    value: int


@dataclass
class GsetEntry:
    vector: np.ndarray
    score: float
    update_count: int
    last_update_pass: int
    adagrad_accum: np.ndarray


@dataclass
class SyncPolicy:
    per_feature_quota: int = 1000
    min_update_count: int = 1
    pass_window: int = 1

    def __post_init__(self):
        if self.per_feature_quota < 0:
            raise ValueError("per_feature_quota must be >= 0")
        if self.min_update_count < 1:
            raise ValueError("min_update_count must be >= 1")
        if self.pass_window < 1:
            raise ValueError("pass_window must be >= 1")


@dataclass
class StoreConfig:
    dim: int
    capacity: int = 1_000_000
    memory_budget: int | None = None
    decay: float = DEFAULT_DECAY
    seed: int = 0


def feature_score_update(score: float, event: str, passes: int = 0,
                         decay: float = DEFAULT_DECAY) -> float:
    """``touch`` adds one; ``decay`` multiplies by ``decay ** passes``."""
    if event == "touch":
        return score + 1.0
    if event == "decay":
        return score * decay ** passes
    raise ValueError(f"unknown score event {event!r}")


def init_vector(seed: int, key: FeatureKey, dim: int) -> np.ndarray:
    # seeded by the key itself so a vector never depends on admission order
    rng = np.random.default_rng([seed, int(key.field), int(key.value)])
    limit = np.sqrt(6.0 / (2 * dim))
    return rng.uniform(-limit, limit, size=dim)


class EmbeddingStore:
    def __init__(self, config: StoreConfig):
        self.config = config
        if config.dim < 1:
            raise ValueError("embedding dim must be >= 1")
        cap = config.capacity
        if config.memory_budget is not None:
            cap = min(cap, config.memory_budget // self.entry_bytes(config.dim))
        if cap < 1:
            raise ValueError(f"store capacity must be >= 1, got {cap}")
        self.capacity = int(cap)
        self.dim = config.dim
        self.pass_index = 0
        self.evictions = 0
        self._slots: dict[tuple[int, int], int] = {}
        self._free: list[int] = []
        self._alloc(min(self.capacity, 1024))
        self.update_tags: set[str] = set()

    @staticmethod
    def entry_bytes(dim: int) -> int:
        return 2 * dim * 8 + ENTRY_METADATA_BYTES

    def _alloc(self, n: int) -> None:
        old = getattr(self, "vectors", None)
        size = 0 if old is None else old.shape[0]
        grow = n - size

        def ext(arr, shape, dtype):
            new = np.zeros(shape, dtype=dtype)
            return new if arr is None else np.concatenate([arr, new])

        self.vectors = ext(old, (grow, self.dim), np.float64)
        self.accum = ext(getattr(self, "accum", None), (grow, self.dim), np.float64)
        self.score = ext(getattr(self, "score", None), grow, np.float64)
        self.update_count = ext(getattr(self, "update_count", None), grow, np.int64)
        self.last_update_pass = ext(getattr(self, "last_update_pass", None), grow, np.int64)
        self.fields = ext(getattr(self, "fields", None), grow, np.uint32)
        self.values = ext(getattr(self, "values", None), grow, np.uint64)
        self.occupied = ext(getattr(self, "occupied", None), grow, bool)
        self._free.extend(range(n - 1, size - 1, -1))

    def __len__(self) -> int:
        return len(self._slots)

    def __contains__(self, key) -> bool:
        return (int(key[0]), int(key[1])) in self._slots

    def keys(self) -> list[FeatureKey]:
        return [FeatureKey(f, v) for f, v in self._slots]

    def entry(self, key) -> GsetEntry:
        s = self._slots[(int(key[0]), int(key[1]))]
        return GsetEntry(self.vectors[s].copy(), float(self.score[s]), int(self.update_count[s]),
                         int(self.last_update_pass[s]), self.accum[s].copy())

    # -- passes and scores -------------------------------------------------

    def advance_pass(self, pass_index: int) -> None:
        """Move the clock forward, decaying every resident score."""
        if pass_index < self.pass_index:
            raise ValueError(f"pass index went backwards: {pass_index} < {self.pass_index}")
        elapsed = pass_index - self.pass_index
        if elapsed:
            self.score[self.occupied] *= self.config.decay ** elapsed
        self.pass_index = pass_index

    # -- admission and eviction --------------------------------------------

    def _eviction_order(self, protect: set[int]) -> np.ndarray:
        idx = np.flatnonzero(self.occupied)
        order = np.lexsort((~self.fields[idx], ~self.values[idx],
                            self.last_update_pass[idx], self.score[idx]))
        ranked = idx[order]
        if protect:
            ranked = ranked[~np.isin(ranked, list(protect))]
        return ranked

    def _evict(self, n: int, protect: set[int]) -> None:
        victims = self._eviction_order(protect)[:n]
        if len(victims) < n:
            raise ValueError("not enough evictable entries to stay within capacity")
        for s in victims:
            del self._slots[(int(self.fields[s]), int(self.values[s]))]
            self.occupied[s] = False
            self._free.append(int(s))
        self.evictions += n

    def _admit(self, key: tuple[int, int], pass_index: int) -> int:
        if not self._free:
            self._alloc(min(self.capacity, 2 * self.vectors.shape[0]))
        s = self._free.pop()
        self._slots[key] = s
        self.vectors[s] = init_vector(self.config.seed, FeatureKey(*key), self.dim)
        self.accum[s] = 0.0
        self.score[s] = 0.0
        self.update_count[s] = 0
        self.last_update_pass[s] = pass_index
        self.fields[s] = key[0]
        self.values[s] = key[1]
        self.occupied[s] = True
        return s

    def lookup_or_admit(self, key, pass_index: int | None = None) -> np.ndarray:
        """Vector for ``key``, admitting it (and evicting if full) when absent."""
        slots = self.lookup_slots([(int(key[0]), np.array([key[1]], dtype=np.uint64))], pass_index)
        return self.vectors[slots[0][0]].copy()

    def lookup_slots(self, requests: Sequence[tuple[int, np.ndarray]],
                     pass_index: int | None = None) -> list[np.ndarray]:
        """Resolve many ``(field, value_ids)`` requests at once.

        Every occurrence counts as one touch. Keys named in this call are never
        evicted by it; the call fails if they cannot all fit.
        """
        p = self.pass_index if pass_index is None else pass_index
        if p != self.pass_index:
            self.advance_pass(p)
        pending = []
        for fid, values in requests:
            uniq, inverse, counts = np.unique(np.asarray(values, dtype=np.uint64),
                                              return_inverse=True, return_counts=True)
            slots = np.array([self._slots.get((int(fid), v), -1) for v in uniq.tolist()], dtype=np.int64)
            pending.append((int(fid), uniq, inverse, counts, slots))
        total = sum(len(u) for _, u, _, _, _ in pending)
        if total > self.capacity:
            raise ValueError(f"{total} distinct keys in one lookup exceed capacity {self.capacity}")
        protect = {int(s) for *_, slots in pending for s in slots if s >= 0}
        missing = {(fid, int(uniq[j])) for fid, uniq, _, _, slots in pending for j in np.flatnonzero(slots < 0)}
        # Protected entries only grow during the call and evictable scores do not
        # move, so one batched eviction picks the same victims as one-at-a-time.
        overflow = len(self._slots) + len(missing) - self.capacity
        if overflow > 0:
            self._evict(overflow, protect)
        resolved = []
        for fid, uniq, inverse, counts, slots in pending:
            for j in np.flatnonzero(slots < 0):
                key = (fid, int(uniq[j]))
                s = self._slots.get(key)
                slots[j] = self._admit(key, p) if s is None else s
            self.score[slots] += counts
            resolved.append(slots[inverse])
        return resolved

    # -- updates -----------------------------------------------------------

    def apply_gradient_adagrad(self, key, grad, lr: float = 0.05, pass_index: int | None = None) -> None:
        k = (int(key[0]), int(key[1]))
        if k not in self._slots:
            raise KeyError(f"feature {k} is not resident")
        g = np.asarray(grad, dtype=np.float64).reshape(1, self.dim)
        self.apply_slot_gradients(np.array([self._slots[k]]), g, lr, pass_index)

    def apply_slot_gradients(self, slots: np.ndarray, grads: np.ndarray, lr: float = 0.05,
                             pass_index: int | None = None) -> None:
        """Sparse AdaGrad: gradients for repeated slots are summed into one step."""
        if not np.all(np.isfinite(grads)):
            raise FloatingPointError("non-finite embedding gradient")
        p = self.pass_index if pass_index is None else pass_index
        uniq, inverse = np.unique(slots, return_inverse=True)
        g = np.zeros((len(uniq), self.dim))
        np.add.at(g, inverse, grads)
        self.accum[uniq] += g * g
        self.vectors[uniq] -= lr * g / (np.sqrt(self.accum[uniq]) + ADAGRAD_EPS)
        self.update_count[uniq] += 1
        self.last_update_pass[uniq] = p
        self.update_tags.add("adagrad")

    # -- sync --------------------------------------------------------------

    def qualifying(self, policy: SyncPolicy, pass_index: int) -> np.ndarray:
        return np.flatnonzero(self.occupied
                              & (self.update_count >= policy.min_update_count)
                              & (self.last_update_pass > pass_index - policy.pass_window))

    def export_delta(self, policy: SyncPolicy, pass_index: int) -> list[tuple[FeatureKey, np.ndarray]]:
        """Entries worth syncing this pass, at most ``per_feature_quota`` per field."""
        idx = self.qualifying(policy, pass_index)
        if len(idx) == 0:
            return []
        # field asc, then update_count desc, score desc, value id asc
        order = np.lexsort((self.values[idx], -self.score[idx], -self.update_count[idx], self.fields[idx]))
        idx = idx[order]
        chosen = []
        fields = self.fields[idx]
        for f in np.unique(fields):
            chosen.extend(idx[fields == f][:policy.per_feature_quota].tolist())
        out = [(FeatureKey(int(self.fields[s]), int(self.values[s])), self.vectors[s].copy()) for s in chosen]
        self.update_count[chosen] = 0
        return out

    def payload_bytes(self) -> int:
        return len(self) * 2 * self.dim * 8

    def memory_usage(self) -> int:
        return len(self) * self.entry_bytes(self.dim)

    # -- persistence ---------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        idx = np.array(sorted(self._slots.values()), dtype=np.int64)
        return {
            "vectors": self.vectors[idx], "accum": self.accum[idx], "score": self.score[idx],
            "update_count": self.update_count[idx].astype(np.float64),
            "last_update_pass": self.last_update_pass[idx].astype(np.float64),
            "fields": self.fields[idx].astype(np.float64),
            # 64-bit ids do not fit a float64 mantissa; keep their raw bits
            "values": self.values[idx].view(np.float64),
            "meta": np.array([self.pass_index, self.evictions], dtype=np.float64),
        }

    @classmethod
    def from_state(cls, config: StoreConfig, arrays: dict[str, np.ndarray]) -> "EmbeddingStore":
        store = cls(config)
        n = len(arrays["score"])
        if n > store.capacity:
            raise ValueError("checkpointed store exceeds capacity")
        if n > store.vectors.shape[0]:
            store._alloc(n)
        store._free = list(range(store.vectors.shape[0] - 1, n - 1, -1))
        store.vectors[:n] = arrays["vectors"]
        store.accum[:n] = arrays["accum"]
        store.score[:n] = arrays["score"]
        store.update_count[:n] = arrays["update_count"].astype(np.int64)
        store.last_update_pass[:n] = arrays["last_update_pass"].astype(np.int64)
        store.fields[:n] = arrays["fields"].astype(np.uint32)
        store.values[:n] = np.ascontiguousarray(arrays["values"]).view(np.uint64)
        store.occupied[:n] = True
        store._slots = {(int(f), int(v)): i for i, (f, v) in
                        enumerate(zip(store.fields[:n].tolist(), store.values[:n].tolist()))}
        store.pass_index, store.evictions = (int(x) for x in arrays["meta"])
        return store


_DELTA_HEADER = struct.Struct("<qI")
_DELTA_RECORD = struct.Struct("<IQH")


def write_delta(path_or_file, pass_index: int, delta: Iterable[tuple[FeatureKey, np.ndarray]]) -> int:
    """Binary delta file; returns bytes written.

    Layout (little-endian): int64 pass, uint32 distinct-field count, then per
    record uint32 field, uint64 value id, uint16 dim, dim x float64.
    """
    delta = list(delta)
    chunks = [_DELTA_HEADER.pack(pass_index, len({k.field for k, _ in delta}))]
    for key, vec in delta:
        vec = np.asarray(vec, dtype="<f8")
        chunks.append(_DELTA_RECORD.pack(int(key.field), int(key.value), vec.size))
        chunks.append(vec.tobytes())
    blob = b"".join(chunks)
    if hasattr(path_or_file, "write"):
        path_or_file.write(blob)
    else:
        Path(path_or_file).write_bytes(blob)
    return len(blob)


def delta_nbytes(delta: Sequence[tuple[FeatureKey, np.ndarray]]) -> int:
    return _DELTA_HEADER.size + sum(_DELTA_RECORD.size + 8 * np.size(v) for _, v in delta)


def read_delta(path_or_file) -> tuple[int, int, list[tuple[FeatureKey, np.ndarray]]]:
    """Inverse of :func:`write_delta`: ``(pass, field_count, records)``."""
    if hasattr(path_or_file, "read"):
        blob = path_or_file.read()
    else:
        blob = Path(path_or_file).read_bytes()
    if len(blob) < _DELTA_HEADER.size:
        raise ValueError("truncated delta header")
    pass_index, n_fields = _DELTA_HEADER.unpack_from(blob, 0)
    pos = _DELTA_HEADER.size
    records = []
    while pos < len(blob):
        if pos + _DELTA_RECORD.size > len(blob):
            raise ValueError(f"truncated delta record at byte {pos}")
        field, value, dim = _DELTA_RECORD.unpack_from(blob, pos)
        pos += _DELTA_RECORD.size
        end = pos + 8 * dim
        if end > len(blob):
            raise ValueError(f"truncated delta vector at byte {pos}")
        records.append((FeatureKey(field, value), np.frombuffer(blob[pos:end], dtype="<f8").astype(np.float64)))
        pos = end
    return pass_index, n_fields, records
