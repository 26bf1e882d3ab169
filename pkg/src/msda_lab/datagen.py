"""Synthetic multimodal multi-subject benchmark and its directory/CSV format.

Every subject is a domain. Subjects belong to groups; a group shares a
perturbed copy of the global class prototypes and a group offset, and each
subject adds its own affine distortion, a constant identity direction and
per-modality noise whose scale decides whether the subject is visually or
physiologically reliable. Optional distractor sources come from an extra,
far-away group whose class layout is unrelated to everyone else's.

On disk a dataset is one directory per subject holding ``meta.json``
(``subject_id``, ``role``, ``identity``) and ``samples.csv`` with header
``y,ý,v_0..v_{dv-1},p_0..p_{dp-1}``.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ParseError, PreconditionError

log = logging.getLogger(__name__)

ID_COLUMN = "ý"


@dataclass
class BenchmarkSpec:
    n_classes: int = 4
    n_source_subjects: int = 12
    n_target_subjects: int = 3
    samples_per_subject: int = 200
    dim_visual: int = 24
    dim_physio: int = 12
    n_groups: int = 3
    n_distractors: int = 0
    class_sep: float = 3.0
    group_class_jitter: float = 1.0
    group_sep: float = 4.0
    distractor_sep: float = 6.0
    shift_strength: float = 0.6
    identity_leak: float = 1.5
    nuisance_fraction: float = 0.25
    noise_low: float = 0.6
    noise_high: float = 1.2
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.n_classes < 2:
            raise PreconditionError(f"BenchmarkSpec: n_classes must be >= 2, got {self.n_classes}")
        if self.n_source_subjects < 4:
            raise PreconditionError(f"BenchmarkSpec: n_source_subjects must be >= 4, got {self.n_source_subjects}")
        if self.samples_per_subject < 4 * self.n_classes:
            raise PreconditionError("BenchmarkSpec: samples_per_subject must be >= 4 * n_classes")
        if self.n_groups < 2:
            raise PreconditionError(f"BenchmarkSpec: n_groups must be >= 2, got {self.n_groups}")
        if not 0 <= self.n_distractors < self.n_source_subjects:
            raise PreconditionError("BenchmarkSpec: n_distractors must lie in [0, n_source_subjects)")
        if not 0.0 <= self.nuisance_fraction < 1.0:
            raise PreconditionError("BenchmarkSpec: nuisance_fraction must lie in [0, 1)")
        for name in ("class_sep", "group_class_jitter", "group_sep", "distractor_sep", "shift_strength",
                     "identity_leak", "noise_low", "noise_high"):
            if getattr(self, name) < 0:
                raise PreconditionError(f"BenchmarkSpec: {name} must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise PreconditionError(f"BenchmarkSpec: unknown keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SubjectDataset:
    subject_id: str
    role: str
    identity: int
    visual: np.ndarray
    physio: np.ndarray
    y: np.ndarray
    group: int = -1
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.role not in ("source", "target"):
            raise PreconditionError(f"subject {self.subject_id}: role must be 'source' or 'target'")
        n = len(self.y)
        if len(self.visual) != n or len(self.physio) != n:
            raise PreconditionError(f"subject {self.subject_id}: modality row counts differ from label count")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def ids(self) -> np.ndarray:
        return np.full(len(self.y), self.identity, dtype=np.int64)

    def features(self, modality: str) -> np.ndarray:
        return self.visual if modality == "visual" else self.physio

    def subset(self, idx, suffix: str = "") -> "SubjectDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return SubjectDataset(self.subject_id + suffix, self.role, self.identity, self.visual[idx],
                              self.physio[idx], self.y[idx], self.group, dict(self.meta))

    def equals(self, other: "SubjectDataset") -> bool:
        return (self.subject_id == other.subject_id and self.role == other.role and self.identity == other.identity
                and np.array_equal(self.visual, other.visual) and np.array_equal(self.physio, other.physio)
                and np.array_equal(self.y, other.y))


def _unit(rng, d, support=None):
    """Random unit vector in R^d, optionally restricted to the coordinates in ``support``."""
    v = rng.normal(size=d)
    if support is not None:
        mask = np.zeros(d, dtype=bool)
        mask[support] = True
        v[~mask] = 0.0
    return v / np.linalg.norm(v)


def _blocks(d: int, fraction: float):
    """(task, nuisance) coordinate blocks; the nuisance block is empty when ``fraction`` rounds to 0."""
    r = int(round(d * fraction))
    if r == 0:
        return np.arange(d), np.arange(d)
    return np.arange(d - r), np.arange(d - r, d)


def generate_benchmark(spec: BenchmarkSpec) -> list[SubjectDataset]:
    """Sources first (``S00``...), then targets (``T00``...); identity indices follow that order."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    C, N = spec.n_classes, spec.samples_per_subject
    n_regular = spec.n_source_subjects - spec.n_distractors
    groups_of_sources = [i % spec.n_groups for i in range(n_regular)]
    counts = np.bincount(groups_of_sources, minlength=spec.n_groups)
    eligible = [g for g in range(spec.n_groups) if counts[g] >= 3]
    if not eligible:
        raise PreconditionError("generate_benchmark: no group has the 3 sources a target needs")
    target_groups = [eligible[i % len(eligible)] for i in range(spec.n_target_subjects)]
    if spec.n_distractors == 0 and any(counts[g] == n_regular for g in target_groups):
        raise PreconditionError("generate_benchmark: every target needs at least one far-group source")

    dims = {"visual": spec.dim_visual, "physio": spec.dim_physio}
    protos, offsets = {}, {}
    task, nuisance = {}, {}
    for m, d in dims.items():
        task[m], nuisance[m] = _blocks(d, spec.nuisance_fraction)
        t = task[m]
        base = np.stack([_unit(rng, d, t) for _ in range(C)]) * spec.class_sep
        protos[m] = []
        for _ in range(spec.n_groups):
            jitter = np.zeros((C, d))
            jitter[:, t] = rng.normal(size=(C, len(t))) / np.sqrt(len(t))
            protos[m].append(base + spec.group_class_jitter * spec.class_sep * jitter)
        offsets[m] = [spec.group_sep * _unit(rng, d, t) for _ in range(spec.n_groups)]
        # distractor group: unrelated class layout, far offset
        protos[m].append(np.stack([_unit(rng, d, t) for _ in range(C)]) * spec.class_sep)
        offsets[m].append(spec.distractor_sep * _unit(rng, d, t))

    plan = [("source", g) for g in groups_of_sources] + [("source", spec.n_groups)] * spec.n_distractors
    plan += [("target", g) for g in target_groups]
    subjects = []
    n_src = 0
    for k, (role, g) in enumerate(plan):
        visual_reliable = k % 2 == 0
        noise = {"visual": spec.noise_low if visual_reliable else spec.noise_high,
                 "physio": spec.noise_high if visual_reliable else spec.noise_low}
        y = np.arange(N) % C
        rng.shuffle(y)
        feats = {}
        for m, d in dims.items():
            A = np.eye(d) + spec.shift_strength * rng.normal(size=(d, d)) / np.sqrt(d)
            b = spec.shift_strength * rng.normal(size=d)
            leak = spec.identity_leak * _unit(rng, d, nuisance[m])
            clean = protos[m][g][y] @ A.T + offsets[m][g] + b + leak
            feats[m] = clean + noise[m] * rng.normal(size=(N, d))
        if role == "source":
            sid, n_src = f"S{n_src:02d}", n_src + 1
        else:
            sid = f"T{k - spec.n_source_subjects:02d}"
        subjects.append(SubjectDataset(sid, role, k, feats["visual"], feats["physio"], y, g,
                                       {"visual_reliable": visual_reliable,
                                        "distractor": g == spec.n_groups}))
    return subjects


# -- splits ------------------------------------------------------------------

def _split_sizes(n: int, fractions) -> list[int]:
    raw = np.asarray(fractions, dtype=float) * n
    sizes = np.floor(raw).astype(int)
    rem = n - sizes.sum()
    for i in np.argsort(-(raw - sizes), kind="stable")[:rem]:
        sizes[i] += 1
    return sizes.tolist()


def stratified_order(y: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """A permutation whose every prefix is (within one sample per class) class-proportional."""
    y = np.asarray(y)
    keys = np.empty(len(y))
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        idx = rng.permutation(idx)
        keys[idx] = (np.arange(len(idx)) + 0.5) / len(idx)
    return np.lexsort((y, keys))


def split_indices(y: np.ndarray, fractions, seed: int) -> list[np.ndarray]:
    fractions = tuple(fractions)
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise PreconditionError(f"split: fractions must be non-negative and sum to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    y = np.asarray(y)
    _, per_class = np.unique(y, return_counts=True)
    if per_class.min() < 3:
        log.warning("split: a class has fewer than 3 samples; falling back to an unstratified split")
        order = rng.permutation(len(y))
    else:
        order = stratified_order(y, rng)
    sizes = _split_sizes(len(y), fractions)
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    return [np.sort(order[bounds[i]:bounds[i + 1]]) for i in range(len(sizes))]


def split_target(subject: SubjectDataset, fractions=(0.6, 0.2, 0.2), seed: int = 0):
    """Stratified (train, val, test) partition of one subject's samples."""
    parts = split_indices(subject.y, fractions, seed)
    return tuple(subject.subset(p) for p in parts)


# -- file format -------------------------------------------------------------

def _header(dv: int, dp: int) -> list[str]:
    return ["y", ID_COLUMN] + [f"v_{i}" for i in range(dv)] + [f"p_{i}" for i in range(dp)]


def write_dataset(subjects, root) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for s in subjects:
        d = root / s.subject_id
        d.mkdir(exist_ok=True)
        meta = {"subject_id": s.subject_id, "role": s.role, "identity": int(s.identity), "group": int(s.group)}
        meta.update(s.meta)
        (d / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
        with open(d / "samples.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(_header(s.visual.shape[1], s.physio.shape[1]))
            for i in range(len(s)):
                w.writerow([int(s.y[i]), int(s.identity)] + [repr(float(v)) for v in s.visual[i]]
                           + [repr(float(v)) for v in s.physio[i]])


def _read_subject(d: Path) -> SubjectDataset:
    try:
        meta = json.loads((d / "meta.json").read_text())
    except FileNotFoundError:
        raise ParseError(f"{d}: missing meta.json") from None
    except json.JSONDecodeError as exc:
        raise ParseError(f"{d / 'meta.json'}: invalid JSON ({exc})") from None
    for key in ("subject_id", "role", "identity"):
        if key not in meta:
            raise ParseError(f"{d / 'meta.json'}: missing field {key!r}")
    path = d / "samples.csv"
    if not path.exists():
        raise ParseError(f"{d}: missing samples.csv")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        for col in ("y", ID_COLUMN):
            if col not in header:
                raise ParseError(f"{path}: header is missing column {col!r}")
        # widths come from the layout: two label columns, the visual block, then the physio block
        first_p = next((i for i, h in enumerate(header) if h.startswith("p_")), None)
        if first_p is None:
            raise ParseError(f"{path}: header is missing column 'p_0'")
        dv, dp = first_p - 2, len(header) - first_p
        if dv < 1:
            raise ParseError(f"{path}: header is missing column 'v_0'")
        expected = _header(dv, dp)
        if header != expected:
            missing = [c for c in expected if c not in header]
            raise ParseError(f"{path}: header mismatch" + (f", missing column {missing[0]!r}" if missing else
                                                           f"; expected {','.join(expected[:4])},..."))
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ParseError(f"{path}: row {lineno} has {len(row)} fields, expected {len(header)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise ParseError(f"{path}: row {lineno}: {exc}") from None
    arr = np.asarray(rows, dtype=np.float64).reshape(-1, len(header))

    extra = {k: v for k, v in meta.items() if k not in ("subject_id", "role", "identity", "group")}
    return SubjectDataset(meta["subject_id"], meta["role"], int(meta["identity"]), arr[:, 2:2 + dv], arr[:, 2 + dv:],
                          arr[:, 0].astype(np.int64), int(meta.get("group", -1)), extra)


def read_dataset(root) -> list[SubjectDataset]:
    root = Path(root)
    if not root.is_dir():
        raise ParseError(f"{root}: dataset directory not found")
    subjects = [_read_subject(d) for d in sorted(p for p in root.iterdir() if p.is_dir())]
    if not subjects:
        raise ParseError(f"{root}: no subject directories")
    subjects.sort(key=lambda s: (s.role != "source", s.subject_id))
    return subjects
