"""Co-training machinery: source-subject selection, target pseudo-labels, class-aware sampling."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .datagen import SubjectDataset
from .errors import PreconditionError
from .nets import MODALITIES, Backbone, MLP

log = logging.getLogger(__name__)

SELECTION_COLUMNS = ["subject_id", "raw_v", "norm_v", "raw_p", "norm_p", "merged", "selected"]


def subject_mean_embedding(backbone: Backbone, subject: SubjectDataset, modality: str) -> np.ndarray:
    x = subject.features(modality)
    if len(x) == 0:
        raise PreconditionError(f"subject {subject.subject_id} has no {modality} samples")
    with T.no_grad():
        return backbone(x).data.mean(axis=0)


def cosine_similarity(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise PreconditionError("cosine_similarity: zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def minmax(raw: np.ndarray) -> np.ndarray:
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        log.warning("similarity normalisation: all raw scores are identical; mapping them to 1.0")
        return np.ones_like(raw)
    return (raw - lo) / (hi - lo)


@dataclass
class SimilarityTable:
    source_ids: list[str]
    raw: dict[str, np.ndarray]
    norm: dict[str, np.ndarray] = field(init=False)
    merged: np.ndarray = field(init=False)

    def __post_init__(self):
        self.raw = {m: np.asarray(v, dtype=float) for m, v in self.raw.items()}
        self.norm = {m: minmax(v) for m, v in self.raw.items()}
        self.merged = np.max(np.stack(list(self.norm.values())), axis=0)

    def write_csv(self, path, selected: Sequence[str] = ()) -> None:
        chosen = set(selected)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SELECTION_COLUMNS)
            for i, sid in enumerate(self.source_ids):
                w.writerow([sid, repr(float(self.raw["visual"][i])), repr(float(self.norm["visual"][i])),
                            repr(float(self.raw["physio"][i])), repr(float(self.norm["physio"][i])),
                            repr(float(self.merged[i])), int(sid in chosen)])


def build_similarity_table(sources: Sequence[SubjectDataset], target: SubjectDataset,
                           backbones: Mapping[str, Backbone]) -> SimilarityTable:
    if len(sources) < 2:
        raise PreconditionError(f"build_similarity_table: need at least 2 sources, got {len(sources)}")
    missing = [m for m in MODALITIES if m not in backbones]
    if missing:
        raise PreconditionError(f"build_similarity_table: missing backbone for {missing}")
    ordered = sorted(sources, key=lambda s: s.subject_id)
    raw = {}
    for m in MODALITIES:
        t = subject_mean_embedding(backbones[m], target, m)
        raw[m] = np.array([cosine_similarity(subject_mean_embedding(backbones[m], s, m), t) for s in ordered])
    return SimilarityTable([s.subject_id for s in ordered], raw)


def select_sources(table: SimilarityTable, tau_ss: float) -> list[str]:
    """Sources whose merged score is >= tau_ss, most similar first."""
    if not 0.0 <= tau_ss <= 1.0:
        raise PreconditionError(f"select_sources: tau_ss must lie in [0, 1], got {tau_ss}")
    order = np.argsort(-table.merged, kind="stable")
    return [table.source_ids[i] for i in order if table.merged[i] >= tau_ss]


@dataclass
class PseudoLabelPartition:
    confident: np.ndarray      # target-train row indices in the confident set
    labels: np.ndarray         # pseudo-label per confident row
    modality: np.ndarray       # winning modality name per confident row
    confidence: np.ndarray     # winning probability per confident row
    non_confident: np.ndarray
    n_total: int

    @property
    def confident_classes(self) -> set[int]:
        return set(int(c) for c in np.unique(self.labels))

    def is_partition(self) -> bool:
        both = np.concatenate([self.confident, self.non_confident])
        return len(both) == self.n_total and np.array_equal(np.sort(both), np.arange(self.n_total))


def modality_probabilities(backbones: Mapping[str, Backbone], heads: Mapping[str, MLP],
                           subject: SubjectDataset) -> dict[str, np.ndarray]:
    with T.no_grad():
        return {m: T.softmax(heads[m](backbones[m](subject.features(m)))).data for m in MODALITIES}


def partition_from_probabilities(probs: Mapping[str, np.ndarray], tau_pl: float) -> PseudoLabelPartition:
    """Per row, the modality with the highest peak probability labels the sample if that peak >= tau_pl."""
    mods = list(probs)
    peaks = np.stack([probs[m].max(axis=1) for m in mods])       # (M, N)
    winner = np.argmax(peaks, axis=0)                             # ties go to the first modality
    n = peaks.shape[1]
    p_hat = peaks[winner, np.arange(n)]
    labels = np.array([np.argmax(probs[mods[w]][j]) for j, w in enumerate(winner)], dtype=np.int64)
    conf = np.flatnonzero(p_hat >= tau_pl)
    return PseudoLabelPartition(conf, labels[conf], np.array([mods[w] for w in winner[conf]], dtype=object),
                                p_hat[conf], np.flatnonzero(p_hat < tau_pl), n)


def generate_pseudo_labels(backbones: Mapping[str, Backbone], heads: Mapping[str, MLP],
                           target_train: SubjectDataset, tau_pl: float) -> PseudoLabelPartition:
    if len(target_train) == 0:
        raise PreconditionError("generate_pseudo_labels: empty target set")
    if not 0.0 <= tau_pl <= 1.0:
        raise PreconditionError(f"generate_pseudo_labels: tau_pl must lie in [0, 1], got {tau_pl}")
    return partition_from_probabilities(modality_probabilities(backbones, heads, target_train), tau_pl)


class _Pool:
    """Draws without replacement, reshuffling once exhausted."""

    def __init__(self, items: np.ndarray, rng: np.random.Generator):
        self.items, self.rng = np.asarray(items, dtype=np.int64), rng
        self.reset()

    def reset(self) -> None:
        self.queue = list(self.rng.permutation(self.items))

    def draw(self, k: int) -> np.ndarray:
        k = min(k, len(self.items))
        out = []
        while len(out) < k:
            if not self.queue:
                self.reset()
            out.append(self.queue.pop())
        return np.asarray(out, dtype=np.int64)


@dataclass
class ClassAwarePlan:
    sources: dict[str, dict[int, np.ndarray]]   # subject -> class -> row indices in that subject
    target: dict[int, np.ndarray]               # class -> target-train row indices

    def __len__(self) -> int:
        return sum(len(v) for d in self.sources.values() for v in d.values()) + sum(len(v) for v in self.target.values())


class ClassAwareSampler:
    """Per step: up to ``k`` rows of every confident class from every source and from the confident target."""

    def __init__(self, sources: Sequence[SubjectDataset], partition: PseudoLabelPartition, k: int,
                 rng: np.random.Generator):
        if not partition.confident_classes:
            raise PreconditionError("class-aware sampling: no confident classes")
        self.k, self.rng = k, rng
        self.classes = sorted(partition.confident_classes)
        self.src = {}
        for s in sources:
            pools = {c: _Pool(np.flatnonzero(s.y == c), rng) for c in self.classes if np.any(s.y == c)}
            self.src[s.subject_id] = pools
        self.tgt = {c: _Pool(partition.confident[partition.labels == c], rng) for c in self.classes}

    def new_epoch(self) -> None:
        for pools in list(self.src.values()) + [self.tgt]:
            for p in pools.values():
                p.reset()

    def sample(self) -> ClassAwarePlan:
        return ClassAwarePlan({sid: {c: p.draw(self.k) for c, p in pools.items()} for sid, pools in self.src.items()},
                              {c: p.draw(self.k) for c, p in self.tgt.items()})


def class_aware_sample(selected_sources: Sequence[SubjectDataset], partition: PseudoLabelPartition, k: int,
                       rng: np.random.Generator) -> ClassAwarePlan | None:
    """One class-aware batch plan, or ``None`` when there are no confident classes (skip the loss)."""
    if not partition.confident_classes:
        return None
    return ClassAwareSampler(selected_sources, partition, k, rng).sample()


def write_partition(partition: PseudoLabelPartition, path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "confident", "pseudo_label", "modality", "confidence"])
        rows = {int(i): (1, int(l), m, repr(float(p))) for i, l, m, p in
                zip(partition.confident, partition.labels, partition.modality, partition.confidence)}
        for i in range(partition.n_total):
            w.writerow([i, *rows.get(i, (0, "", "", ""))])
