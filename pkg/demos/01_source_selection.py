"""Which sources does the target resemble?

Trains the shared encoders on every source subject, then scores each source
against one target by the cosine of mean embeddings, per modality. The two
score vectors are min-max normalised, merged by max and thresholded at tau_ss.

Run:  python3 demos/01_source_selection.py [seed]
"""
import sys

import numpy as np

from msda_lab import pipeline as P
from msda_lab.config import RunConfig

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
# a few distractor subjects from an unrelated group make the ranking worth looking at
cfg = RunConfig(seed=seed, benchmark={"n_distractors": 4})

prep = P.prepare(cfg)
print(f"source stage: train acc {prep.source_metrics.final['train_acc']:.3f} on {len(prep.sources)} subjects")

target = prep.targets[0]
split = P.make_split(target, cfg)
selected, table = P.choose_sources(prep.bundle, prep.sources, split, cfg)
by_id = {s.subject_id: s for s in prep.sources}
chosen = {s.subject_id for s in selected}

print(f"\ntarget {target.subject_id} (group {target.group})")
print(f"{'source':>6} {'group':>5} {'raw_v':>7} {'raw_p':>7} {'merged':>7}  selected")
for i, sid in enumerate(table.source_ids):
    s = by_id[sid]
    tag = "distractor" if s.meta["distractor"] else ""
    print(f"{sid:>6} {s.group:>5} {table.raw['visual'][i]:7.3f} {table.raw['physio'][i]:7.3f} "
          f"{table.merged[i]:7.2f}  {'yes' if sid in chosen else '-':>3} {tag}")

same = [s for s in selected if s.group == target.group]
print(f"\n{len(selected)} selected at tau_ss={cfg.tau_ss}; {len(same)} share the target's group, "
      f"{sum(s.meta['distractor'] for s in selected)} are distractors")
for tau in (0.0, 0.25, 0.55, 0.75, 1.0):
    n = int(np.sum(table.merged >= tau))
    print(f"  tau_ss={tau:<4} -> {n} sources")
