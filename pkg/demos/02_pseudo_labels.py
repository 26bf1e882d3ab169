"""Per-sample modality choice when labelling the target.

For each unlabelled target sample the more confident of the visual and
physiological heads provides the pseudo-label; samples whose winning
probability clears tau_pl join the confident set. Visual-reliable and
physio-reliable targets lean on different heads.

Run:  python3 demos/02_pseudo_labels.py [seed]
"""
import sys
from collections import Counter

import numpy as np

from msda_lab import pipeline as P
from msda_lab.config import RunConfig
from msda_lab.cotrain import generate_pseudo_labels

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
cfg = RunConfig(seed=seed)
prep = P.prepare(cfg)

for target in prep.targets:
    train = P.make_split(target, cfg).train
    reliable = "visual" if target.meta["visual_reliable"] else "physio"
    print(f"\ntarget {target.subject_id}: {reliable}-reliable, {len(train)} unlabelled train samples")
    for tau in (0.5, 0.8, 0.95):
        part = generate_pseudo_labels(prep.bundle.backbones, prep.bundle.heads, train, tau)
        n = len(part.confident)
        acc = float(np.mean(part.labels == train.y[part.confident])) if n else float("nan")
        wins = Counter(part.modality.tolist())
        print(f"  tau_pl={tau:<4} confident {n:3d}/{part.n_total}  label acc {acc:.3f}  "
              f"classes {sorted(part.confident_classes)}  heads {dict(wins)}")
