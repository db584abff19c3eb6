#!/usr/bin/env python3
"""Configured vs empirical positive rates and user overlap at one million examples."""
import sys

import numpy as np

from pepnet.datagen import GenConfig, generate, measured_overlap, positive_rates

n = int(sys.argv[1]) if len(sys.argv) > 1 else 1_000_000
cfg = GenConfig(n_examples=n)
log = generate(cfg)
rates = positive_rates(log, len(cfg.domains))
print(f"{'cell':<14}{'target':>9}{'empirical':>11}")
for d, dn in enumerate(cfg.domains):
    for t, tn in enumerate(cfg.tasks):
        print(f"{tn + '@' + dn:<14}{cfg.positive_rates[d][t]:>9.4%}{rates[d, t]:>11.4%}")
ov = measured_overlap(log.features["user_id"], log.domain, len(cfg.domains))
print("user overlap (row x, col y: share of y also in x)")
print(np.round(ov, 4))
print(np.round(np.asarray(cfg.user_overlap), 4))
