"""One seed of the headline comparison.

Source-only fusion, a blended single-source MMD baseline, the full co-training
adaptation and supervised fine-tuning on target labels, each scored on the
held-out target test split.

Run:  python3 demos/04_compare_methods.py [seed]
"""
import sys
from collections import defaultdict

import numpy as np

from msda_lab import pipeline as P
from msda_lab.config import RunConfig

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
cfg = RunConfig(seed=seed)
rows = P.compare_methods(cfg)

acc = defaultdict(list)
for r in rows:
    acc[r["method"]].append(r["test_acc"])
    extra = f"  ({r['n_selected']} sources)" if "n_selected" in r else ""
    print(f"{r['target']} {r['method']:<15} {r['test_acc']:.3f}{extra}")
print()
for method, v in acc.items():
    print(f"{method:<15} mean {np.mean(v):.3f}")
