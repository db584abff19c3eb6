#!/usr/bin/env python3
"""Delta volume against per-field quota on a Zipf(1.1) key stream."""
import sys

from pepnet.cli import SyncSimConfig, synthetic_stream
from pepnet.store import EmbeddingStore, StoreConfig, SyncPolicy
from pepnet.trainer import TrainConfig, run_online_passes

quotas = [int(q) for q in (sys.argv[1] if len(sys.argv) > 1 else "0,50,100,200,400,800").split(",")]
sim = SyncSimConfig()
stream = synthetic_stream(sim)
print(f"{'quota':>6}{'exported':>10}{'bytes':>10}{'evictions':>11}")
for q in quotas:
    store = EmbeddingStore(StoreConfig(dim=sim.dim, capacity=sim.capacity, seed=sim.seed))
    rows = run_online_passes(None, store, stream, TrainConfig(batch_size=sim.batch_size, mode="online"),
                             SyncPolicy(per_feature_quota=q))
    print(f"{q:>6}{sum(r.exported for r in rows):>10}{sum(r.delta_bytes for r in rows):>10}"
          f"{sum(r.evictions for r in rows):>11}")
