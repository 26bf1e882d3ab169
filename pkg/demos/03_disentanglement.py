"""Does the entropy loss strip subject identity from the embeddings?

Trains the source stage twice, with and without the disentanglement term,
and fits a fresh identity probe on each set of embeddings. Identity should
become harder to read off while expression accuracy holds.

Run:  python3 demos/03_disentanglement.py [seed]
"""
import sys

from msda_lab import pipeline as P
from msda_lab.config import LossWeights, RunConfig

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
cfg = RunConfig(seed=seed)
subjects = P.load_subjects(cfg)

print(f"{'lambda_d':>8} {'id probe v':>10} {'id probe p':>10} {'held-out expr':>13} {'target expr':>11}")
for lam in (0.0, 1.0):
    prep = P.prepare(cfg, subjects, LossWeights(disentangle=lam))
    probe = P.probe_disentanglement(prep.bundle, prep.sources, prep.held_out, seed)
    tgt = [P.evaluate(prep.bundle, P.make_split(t, cfg)) for t in prep.targets]
    print(f"{lam:8.1f} {probe['id_probe_v']:10.3f} {probe['id_probe_p']:10.3f} "
          f"{probe['expression_acc']:13.3f} {sum(tgt) / len(tgt):11.3f}")
