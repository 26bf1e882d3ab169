"""Two-stage training (source stage, per-target adaptation), evaluation, baselines and ablations."""
from __future__ import annotations

import copy
import csv
import hashlib
import logging
import math
import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .config import LossWeights, RunConfig
from .cotrain import (ClassAwareSampler, PseudoLabelPartition, SimilarityTable, _Pool, build_similarity_table,
                      generate_pseudo_labels, select_sources)
from .datagen import SubjectDataset, generate_benchmark, read_dataset, split_indices, split_target
from .discrepancy import KernelSpec, agnostic_disc, class_aware_discrepancies, mmd2
from .disentangle import EntropyEstimator, disentangle_loss, estimator_fit_step
from .errors import PreconditionError
from .nets import (MODALITIES, Backbone, ExpressionHead, FusionHead, IdentityHead, accuracy, cross_entropy, fuse,
                   identity_probe_accuracy, load_params, save_params, train_identity_probe)
from .tensor import Tensor

log = logging.getLogger(__name__)

METRIC_COLUMNS = ["epoch", "loss_s", "loss_unsup", "loss_agn", "loss_aw", "n_confident", "val_acc", "test_acc",
                  "id_probe_v", "id_probe_p"]
BASELINES = ("lower_visual", "lower_physio", "lower_fusion", "blend_mmd_uda", "upper_finetune")
LOSS_COMPONENT_ROWS = {
    "s": (0.0, 0.0, 0.0),
    "s+t": (None, 0.0, 0.0),
    "s+t+agn": (None, None, 0.0),
    "s+t+aw": (None, 0.0, None),
    "s+t+agn+aw": (None, None, None),
}


def rng_for(seed: int, *keys) -> np.random.Generator:
    """Independent generator per (seed, purpose) so streams do not depend on call order."""
    return np.random.default_rng([seed] + [zlib.crc32(str(k).encode()) for k in keys])


# -- model bundle ------------------------------------------------------------

class ModelBundle:
    def __init__(self, dims: dict, n_classes: int, source_ids: Sequence[str], cfg: RunConfig,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.dims, self.n_classes, self.source_ids = dict(dims), n_classes, list(source_ids)
        self.arch = {k: getattr(cfg, k) for k in ("hidden_dim", "embed_dim", "n_mixture", "cond_hidden", "cond_layers")}
        h, e, k = cfg.hidden_dim, cfg.embed_dim, len(self.source_ids)
        self.backbones = {m: Backbone(m, dims[m], h, e, rng) for m in MODALITIES}
        self.heads = {m: ExpressionHead(e, h, n_classes, rng) for m in MODALITIES}
        self.id_heads = {m: IdentityHead(e, h, k, rng) for m in MODALITIES}
        self.estimators = {m: EntropyEstimator(e, k, cfg.n_mixture, cfg.cond_hidden, cfg.cond_layers, rng)
                           for m in MODALITIES}
        self.fusion = FusionHead(e, h, n_classes, rng)

    def identity_index(self, subject: SubjectDataset) -> int:
        return self.source_ids.index(subject.subject_id)

    def embed(self, x_by_mod: dict) -> dict[str, Tensor]:
        return {m: self.backbones[m](x_by_mod[m]) for m in MODALITIES}

    def logits(self, subject: SubjectDataset) -> dict[str, np.ndarray]:
        with T.no_grad():
            h = self.embed({m: subject.features(m) for m in MODALITIES})
            out = {m: self.heads[m](h[m]).data for m in MODALITIES}
            out["fusion"] = self.fusion(fuse(h["visual"], h["physio"])).data
        return out

    def trainable(self) -> list[Tensor]:
        ps = []
        for m in MODALITIES:
            ps += self.backbones[m].parameters()
        return ps + self.fusion.parameters()

    def state(self) -> dict[str, Tensor]:
        out = {}
        for m in MODALITIES:
            out.update(self.backbones[m].named_parameters(f"backbone.{m}."))
            out.update(self.heads[m].named_parameters(f"head.{m}."))
            out.update(self.id_heads[m].named_parameters(f"id_head.{m}."))
            out[f"id_head.{m}.shift"] = Tensor(self.id_heads[m].shift)
            out[f"id_head.{m}.scale"] = Tensor(self.id_heads[m].scale)
            out.update(self.estimators[m].named_parameters(f"estimator.{m}."))
        out.update(self.fusion.named_parameters("fusion."))
        return out

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, t in sorted(self.state().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def copy(self) -> "ModelBundle":
        return copy.deepcopy(self)

    def save(self, path) -> None:
        meta = {"dims": self.dims, "n_classes": self.n_classes, "source_ids": self.source_ids, "arch": self.arch,
                "estimators_initialized": {m: self.estimators[m].initialized for m in MODALITIES}}
        save_params(self.state(), path, meta)

    @classmethod
    def load(cls, path, cfg: RunConfig) -> "ModelBundle":
        params, meta = load_params(path)
        arch_cfg = copy.copy(cfg)
        for k, v in meta["arch"].items():
            setattr(arch_cfg, k, v)
        bundle = cls(meta["dims"], meta["n_classes"], meta["source_ids"], arch_cfg)
        state = bundle.state()
        missing = set(state) - set(params)
        if missing:
            raise PreconditionError(f"{path}: checkpoint lacks parameters {sorted(missing)[:3]}")
        for name, t in state.items():
            if t.shape != params[name].shape:
                raise PreconditionError(f"{path}: parameter {name} has shape {params[name].shape}, expected {t.shape}")
        _assign(bundle, params)
        for m, flag in meta.get("estimators_initialized", {}).items():
            bundle.estimators[m].initialized = bool(flag)
        return bundle


def _assign(bundle: ModelBundle, params: dict[str, np.ndarray]) -> None:
    for m in MODALITIES:
        for prefix, module in ((f"backbone.{m}.", bundle.backbones[m]), (f"head.{m}.", bundle.heads[m]),
                               (f"id_head.{m}.", bundle.id_heads[m])):
            for k in ("w1", "b1", "w2", "b2"):
                getattr(module, k).data = params[prefix + k].copy()
        bundle.id_heads[m].shift = params[f"id_head.{m}.shift"].copy()
        bundle.id_heads[m].scale = params[f"id_head.{m}.scale"].copy()
        for name, t in bundle.estimators[m].named_parameters(f"estimator.{m}.").items():
            t.data = params[name].copy()
    for k in ("w1", "b1", "w2", "b2"):
        getattr(bundle.fusion, k).data = params["fusion." + k].copy()


# -- metrics -----------------------------------------------------------------

@dataclass
class RunMetrics:
    epochs: list[dict] = field(default_factory=list)
    final: dict = field(default_factory=dict)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(METRIC_COLUMNS)
            for row in self.epochs:
                w.writerow([_fmt(row.get(c, "")) for c in METRIC_COLUMNS])


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


class TargetSplit:
    """Train/val/test split of one target subject; the test part is only reachable through ``test()``."""

    def __init__(self, subject: SubjectDataset, fractions=(0.6, 0.2, 0.2), seed: int = 0):
        self.subject_id = subject.subject_id
        self.subject = subject
        self.train, self.val, self._test = split_target(subject, fractions, seed)
        self.access_log: list[str] = []

    def test(self, reason: str) -> SubjectDataset:
        self.access_log.append(reason)
        return self._test


def evaluate(bundle: ModelBundle, target_test, head: str = "fusion") -> float:
    """Top-1 accuracy of the fusion head (or a per-modality head) on the target test split."""
    subject = target_test.test("evaluate") if isinstance(target_test, TargetSplit) else target_test
    if len(subject) == 0:
        raise PreconditionError("evaluate: empty test set")
    return accuracy(bundle.logits(subject)[head], subject.y)


# -- helpers -----------------------------------------------------------------

def _sgd(cfg: RunConfig, epochs: int, lr: float | None = None) -> T.SgdState:
    lr = cfg.base_lr if lr is None else lr
    return T.SgdState(learning_rate=lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay,
                      eta_min=min(cfg.eta_min, lr), total_epochs=epochs)


def _head_params(heads: dict) -> list[Tensor]:
    return [p for m in MODALITIES for p in heads[m].parameters()]


def _confusion_loss(head: IdentityHead, h: Tensor) -> Tensor:
    """Cross-entropy of a frozen identity head's prediction against the uniform distribution."""
    x = (h - head.shift) * (1.0 / head.scale)
    logits = T.relu(x @ head.w1.detach() + head.b1.detach()) @ head.w2.detach() + head.b2.detach()
    return -T.log_softmax(logits).mean()


class _Rows:
    """Collects row segments for one backbone pass per modality, then hands back per-segment embeddings."""

    def __init__(self):
        self.parts: dict[str, list[np.ndarray]] = {m: [] for m in MODALITIES}
        self.n = 0

    def add(self, subject: SubjectDataset, idx: np.ndarray) -> tuple[int, int]:
        idx = np.asarray(idx, dtype=np.int64)
        for m in MODALITIES:
            self.parts[m].append(subject.features(m)[idx])
        start = self.n
        self.n += len(idx)
        return start, self.n

    def embed(self, bundle: ModelBundle) -> dict[str, Tensor]:
        return bundle.embed({m: np.concatenate(self.parts[m], axis=0) for m in MODALITIES})


def _seg(H: Tensor, span: tuple[int, int]) -> Tensor:
    return H[span[0]:span[1]]


def split_sources(sources: Sequence[SubjectDataset], cfg: RunConfig):
    """(train, held-out) part of every source subject; held-out rows never reach training."""
    train, held = [], []
    for s in sources:
        tr, ho = split_indices(s.y, [1.0 - cfg.source_holdout, cfg.source_holdout], cfg.seed + 7919 * s.identity)
        train.append(s.subset(tr))
        held.append(s.subset(ho))
    return train, held


# -- source stage ------------------------------------------------------------

def train_source_stage(sources: Sequence[SubjectDataset], cfg: RunConfig,
                       weights: LossWeights | None = None) -> tuple[ModelBundle, RunMetrics]:
    """Per-modality CE + weighted disentanglement loss, fusion CE, identity heads on detached embeddings."""
    if not sources:
        raise PreconditionError("train_source_stage: no source subjects")
    weights = weights or cfg.weights
    lam = weights.disentangle
    dims = {m: sources[0].features(m).shape[1] for m in MODALITIES}
    n_classes = int(max(s.y.max() for s in sources)) + 1
    bundle = ModelBundle(dims, n_classes, [s.subject_id for s in sources], cfg, rng_for(cfg.seed, "init"))
    rng = rng_for(cfg.seed, "source-batches")
    X = {m: np.concatenate([s.features(m) for s in sources]) for m in MODALITIES}
    y = np.concatenate([s.y for s in sources])
    ids = np.concatenate([np.full(len(s), i) for i, s in enumerate(sources)])
    k = len(sources)
    main = [p for m in MODALITIES for p in bundle.backbones[m].parameters() + bundle.heads[m].parameters()]
    main += bundle.fusion.parameters()
    opt = _sgd(cfg, cfg.source_epochs)
    id_opt = _sgd(cfg, cfg.source_epochs)
    id_params = _head_params(bundle.id_heads)
    metrics = RunMetrics()
    n = len(y)
    for epoch in range(cfg.source_epochs):
        opt.set_epoch(epoch)
        id_opt.set_epoch(epoch)
        order = rng.permutation(n)
        tot = {"loss_s": 0.0, "loss_d": 0.0}
        correct = 0
        steps = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue
            yb, ib = y[idx], ids[idx]
            h = bundle.embed({m: X[m][idx] for m in MODALITIES})
            loss = Tensor(0.0)
            for m in MODALITIES:
                loss = loss + cross_entropy(bundle.heads[m](h[m]), yb)
            fused_logits = bundle.fusion(fuse(h["visual"], h["physio"]))
            loss = loss + cross_entropy(fused_logits, yb)
            tot["loss_s"] += loss.item()
            correct += int(np.sum(fused_logits.data.argmax(1) == yb))
            if lam > 0:
                onehot = T.one_hot(ib, k)
                for m in MODALITIES:
                    estimator_fit_step(bundle.estimators[m], h[m].detach(), ib, cfg.estimator_lr)
                ld = Tensor(0.0)
                for m in MODALITIES:
                    ld = ld + disentangle_loss(bundle.estimators[m], h[m], onehot, cfg.mi_variant)
                tot["loss_d"] += ld.item()
                loss = loss + lam * ld
            if cfg.identity_aux_loss:
                for m in MODALITIES:
                    loss = loss + _confusion_loss(bundle.id_heads[m], h[m])
            loss.backward()
            T.sgd_step(main, opt)
            id_loss = Tensor(0.0)
            for m in MODALITIES:
                id_loss = id_loss + cross_entropy(bundle.id_heads[m](h[m]), ib)
            id_loss.backward()
            T.sgd_step(id_params, id_opt)
            steps += 1
        metrics.epochs.append({"epoch": epoch, "loss_s": tot["loss_s"] / max(steps, 1),
                               "loss_d": tot["loss_d"] / max(steps, 1), "train_acc": correct / n})
    metrics.final = {"train_acc": metrics.epochs[-1]["train_acc"] if metrics.epochs else float("nan")}
    return bundle, metrics


def probe_disentanglement(bundle: ModelBundle, train: Sequence[SubjectDataset], held: Sequence[SubjectDataset],
                          seed: int = 0) -> dict[str, float]:
    """Fresh identity probes fit on training-row embeddings, scored on held-out rows, plus held-out fusion accuracy."""
    out = {}
    ids_tr = np.concatenate([np.full(len(s), bundle.identity_index(s)) for s in train])
    ids_ho = np.concatenate([np.full(len(s), bundle.identity_index(s)) for s in held])
    for m in MODALITIES:
        with T.no_grad():
            h_tr = np.concatenate([bundle.backbones[m](s.features(m)).data for s in train])
            h_ho = np.concatenate([bundle.backbones[m](s.features(m)).data for s in held])
        probe = train_identity_probe(h_tr, ids_tr, len(bundle.source_ids), rng_for(seed, "probe", m))
        out[f"id_probe_{m[0]}"] = identity_probe_accuracy(probe, h_ho, ids_ho)
    hits = sum(int(np.sum(bundle.logits(s)["fusion"].argmax(1) == s.y)) for s in held)
    out["expression_acc"] = hits / sum(len(s) for s in held)
    return out


# -- adaptation --------------------------------------------------------------

def _agnostic_rows(subject: SubjectDataset, classes: set[int]) -> np.ndarray:
    return np.flatnonzero(~np.isin(subject.y, sorted(classes)))


def adapt_stage(bundle: ModelBundle, selected_sources: Sequence[SubjectDataset], target, cfg: RunConfig,
                weights: LossWeights | None = None, tag: str = "") -> tuple[ModelBundle, RunMetrics]:
    """Co-training adaptation to one target: L = L_s + gamma L_unsup + alpha L_agn + beta L_aw.

    ``target`` is a ``TargetSplit`` (val/test metrics recorded each epoch) or the
    target train subject alone. The input bundle is not modified.
    """
    if not selected_sources:
        raise PreconditionError("adapt_stage: no selected sources")
    weights = weights or cfg.weights
    split = target if isinstance(target, TargetSplit) else None
    target_train = split.train if split else target
    bundle = bundle.copy()
    kernel = KernelSpec(sqrt=cfg.mmd_sqrt)
    key = (tag or (split.subject_id if split else target_train.subject_id))
    rngs = {name: rng_for(cfg.seed, "adapt", key, name) for name in ("src", "tgt", "aw", "agn", "agn_t")}
    opt = _sgd(cfg, cfg.epochs)
    head_opt = _sgd(cfg, cfg.epochs)
    id_opt = _sgd(cfg, cfg.epochs)
    params = bundle.trainable()
    ids_of = {s.subject_id: (bundle.identity_index(s) if s.subject_id in bundle.source_ids else -1)
              for s in selected_sources}
    src_pools = {s.subject_id: _Pool(np.arange(len(s)), rngs["src"]) for s in selected_sources}
    n_iter = math.ceil(len(target_train) / cfg.batch_size)
    metrics = RunMetrics()
    partition: PseudoLabelPartition | None = None
    for epoch in range(cfg.epochs):
        for o in (opt, head_opt, id_opt):
            o.set_epoch(epoch)
        if partition is None or epoch % cfg.pl_refresh_n == 0:
            partition = generate_pseudo_labels(bundle.backbones, bundle.heads, target_train, cfg.tau_pl)
            classes = partition.confident_classes
            conf_pool = _Pool(partition.confident, rngs["tgt"]) if len(partition.confident) else None
            sampler = (ClassAwareSampler(selected_sources, partition, cfg.k_per_class, rngs["aw"])
                       if classes and weights.beta > 0 else None)
            agn_src = {s.subject_id: _Pool(r, rngs["agn"]) for s in selected_sources
                       if len(r := _agnostic_rows(s, classes))}
            agn_tgt = _Pool(partition.non_confident, rngs["agn_t"]) if len(partition.non_confident) else None
            if conf_pool is None:
                log.warning("epoch %d: no confident target samples; only source and agnostic terms are active", epoch)
        elif sampler is not None:
            sampler.new_epoch()
        sums = {"loss_s": 0.0, "loss_unsup": 0.0, "loss_agn": 0.0, "loss_aw": 0.0}
        id_hits = {m: 0 for m in MODALITIES}
        id_count = 0
        for _ in range(n_iter):
            rows = _Rows()
            src_spans, src_y, src_ids = [], [], []
            for s in selected_sources:
                idx = src_pools[s.subject_id].draw(cfg.source_batch_per_subject)
                src_spans.append(rows.add(s, idx))
                src_y.append(s.y[idx])
                src_ids.append(np.full(len(idx), ids_of[s.subject_id]))
            src_span = (src_spans[0][0], src_spans[-1][1])
            src_y, src_ids = np.concatenate(src_y), np.concatenate(src_ids)
            tgt_span = None
            if weights.gamma > 0 and conf_pool is not None:
                tidx = conf_pool.draw(cfg.batch_size)
                pl = dict(zip(partition.confident, partition.labels))
                tgt_span, tgt_y = rows.add(target_train, tidx), np.array([pl[i] for i in tidx])
            aw_spans = None
            if sampler is not None:
                plan = sampler.sample()
                aw_spans = ({sid: {c: rows.add(subj, idx) for c, idx in plan.sources[sid].items() if len(idx)}
                             for sid, subj in ((s.subject_id, s) for s in selected_sources)},
                            {c: rows.add(target_train, idx) for c, idx in plan.target.items()})
            agn_spans = None
            if weights.alpha > 0 and agn_tgt is not None and agn_src:
                agn_spans = ({sid: rows.add(next(s for s in selected_sources if s.subject_id == sid),
                                            pool.draw(cfg.batch_size)) for sid, pool in agn_src.items()},
                             rows.add(target_train, agn_tgt.draw(cfg.batch_size)))
            H = rows.embed(bundle)

            hs = {m: _seg(H[m], src_span) for m in MODALITIES}
            loss_s = cross_entropy(bundle.fusion(fuse(hs["visual"], hs["physio"])), src_y)
            loss = loss_s
            sums["loss_s"] += loss_s.item()
            if tgt_span is not None:
                ht = {m: _seg(H[m], tgt_span) for m in MODALITIES}
                l_t = cross_entropy(bundle.fusion(fuse(ht["visual"], ht["physio"])), tgt_y)
                loss = loss + weights.gamma * l_t
                sums["loss_unsup"] += l_t.item()
            if aw_spans is not None:
                l_aw = Tensor(0.0)
                for m in MODALITIES:
                    src = {sid: {c: _seg(H[m], sp) for c, sp in d.items()} for sid, d in aw_spans[0].items()}
                    tgt = {c: _seg(H[m], sp) for c, sp in aw_spans[1].items()}
                    intra, inter = class_aware_discrepancies(src, tgt, kernel)
                    l_aw = l_aw + (intra - inter)
                loss = loss + weights.beta * l_aw
                sums["loss_aw"] += l_aw.item()
            if agn_spans is not None:
                l_agn = Tensor(0.0)
                for m in MODALITIES:
                    l_agn = l_agn + agnostic_disc({sid: _seg(H[m], sp) for sid, sp in agn_spans[0].items()},
                                                  _seg(H[m], agn_spans[1]), kernel)
                loss = loss + weights.alpha * l_agn
                sums["loss_agn"] += l_agn.item()
            loss.backward()
            T.sgd_step(params, opt)

            # expression and identity heads follow the moving embeddings without feeding gradients back
            aux = Tensor(0.0)
            for m in MODALITIES:
                hd = hs[m].detach()
                aux = aux + cross_entropy(bundle.heads[m](hd), src_y)
            aux.backward()
            T.sgd_step(_head_params(bundle.heads), head_opt)
            known = src_ids >= 0
            if np.any(known):
                id_loss = Tensor(0.0)
                for m in MODALITIES:
                    logits = bundle.id_heads[m](hs[m][np.flatnonzero(known)])
                    id_hits[m] += int(np.sum(logits.data.argmax(1) == src_ids[known]))
                    id_loss = id_loss + cross_entropy(logits, src_ids[known])
                id_loss.backward()
                T.sgd_step(_head_params(bundle.id_heads), id_opt)
                id_count += int(known.sum())
        row = {"epoch": epoch, **{k: v / n_iter for k, v in sums.items()},
               "n_confident": int(len(partition.confident)), "n_conf_classes": len(partition.confident_classes),
               "pl_accuracy": (float(np.mean(partition.labels == target_train.y[partition.confident]))
                               if len(partition.confident) else float("nan")),
               "id_probe_v": id_hits["visual"] / id_count if id_count else float("nan"),
               "id_probe_p": id_hits["physio"] / id_count if id_count else float("nan")}
        if split is not None:
            row["val_acc"] = accuracy(bundle.logits(split.val)["fusion"], split.val.y) if len(split.val) else float("nan")
            row["test_acc"] = evaluate(bundle, split)
        metrics.epochs.append(row)
    metrics.final = {k: metrics.epochs[-1].get(k) for k in ("test_acc", "val_acc", "n_confident")}
    return bundle, metrics


# -- baselines ---------------------------------------------------------------

def blend_mmd_uda(bundle: ModelBundle, sources: Sequence[SubjectDataset], target, cfg: RunConfig,
                  tag: str = "") -> tuple[ModelBundle, RunMetrics]:
    """All sources pooled into one domain; fusion CE plus one global MMD term per modality."""
    split = target if isinstance(target, TargetSplit) else None
    target_train = split.train if split else target
    bundle = bundle.copy()
    key = tag or target_train.subject_id
    rng = rng_for(cfg.seed, "blend", key)
    pooled = SubjectDataset("pooled", "source", -1, np.concatenate([s.visual for s in sources]),
                            np.concatenate([s.physio for s in sources]), np.concatenate([s.y for s in sources]))
    opt = _sgd(cfg, cfg.epochs)
    params = bundle.trainable()
    kernel = KernelSpec(sqrt=cfg.mmd_sqrt)
    src_pool, tgt_pool = _Pool(np.arange(len(pooled)), rng), _Pool(np.arange(len(target_train)), rng)
    n_iter = math.ceil(len(target_train) / cfg.batch_size)
    metrics = RunMetrics()
    for epoch in range(cfg.epochs):
        opt.set_epoch(epoch)
        sums = {"loss_s": 0.0, "loss_agn": 0.0}
        for _ in range(n_iter):
            rows = _Rows()
            sidx = src_pool.draw(cfg.batch_size)
            s_span = rows.add(pooled, sidx)
            t_span = rows.add(target_train, tgt_pool.draw(cfg.batch_size))
            H = rows.embed(bundle)
            hs = {m: _seg(H[m], s_span) for m in MODALITIES}
            loss_s = cross_entropy(bundle.fusion(fuse(hs["visual"], hs["physio"])), pooled.y[sidx])
            l_mmd = Tensor(0.0)
            for m in MODALITIES:
                l_mmd = l_mmd + mmd2(hs[m], _seg(H[m], t_span), kernel)
            loss = loss_s + cfg.blend_mmd_weight * l_mmd
            loss.backward()
            T.sgd_step(params, opt)
            sums["loss_s"] += loss_s.item()
            sums["loss_agn"] += l_mmd.item()
        row = {"epoch": epoch, **{k: v / n_iter for k, v in sums.items()}}
        if split is not None:
            row["test_acc"] = evaluate(bundle, split)
        metrics.epochs.append(row)
    metrics.final = {"test_acc": metrics.epochs[-1].get("test_acc")}
    return bundle, metrics


def upper_finetune(bundle: ModelBundle, target, cfg: RunConfig, tag: str = "") -> tuple[ModelBundle, RunMetrics]:
    """Supervised fine-tuning on the labelled target train split."""
    split = target if isinstance(target, TargetSplit) else None
    target_train = split.train if split else target
    bundle = bundle.copy()
    rng = rng_for(cfg.seed, "upper", tag or target_train.subject_id)
    params = bundle.trainable() + _head_params(bundle.heads)
    opt = _sgd(cfg, cfg.epochs)
    metrics = RunMetrics()
    n = len(target_train)
    for epoch in range(cfg.epochs):
        opt.set_epoch(epoch)
        total = 0.0
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            h = bundle.embed({m: target_train.features(m)[idx] for m in MODALITIES})
            yb = target_train.y[idx]
            loss = cross_entropy(bundle.fusion(fuse(h["visual"], h["physio"])), yb)
            for m in MODALITIES:
                loss = loss + cross_entropy(bundle.heads[m](h[m]), yb)
            loss.backward()
            T.sgd_step(params, opt)
            total += loss.item()
        row = {"epoch": epoch, "loss_s": total / math.ceil(n / cfg.batch_size)}
        if split is not None:
            row["test_acc"] = evaluate(bundle, split)
        metrics.epochs.append(row)
    metrics.final = {"test_acc": metrics.epochs[-1].get("test_acc")}
    return bundle, metrics


def run_baseline(kind: str, bundle: ModelBundle, sources: Sequence[SubjectDataset], split: TargetSplit,
                 cfg: RunConfig) -> RunMetrics:
    if kind not in BASELINES:
        raise PreconditionError(f"unknown baseline {kind!r}; expected one of {BASELINES}")
    if kind.startswith("lower_"):
        head = {"lower_visual": "visual", "lower_physio": "physio", "lower_fusion": "fusion"}[kind]
        return RunMetrics(final={"test_acc": evaluate(bundle, split, head)})
    if kind == "blend_mmd_uda":
        return blend_mmd_uda(bundle, sources, split, cfg)[1]
    return upper_finetune(bundle, split, cfg)[1]


# -- experiment orchestration -----------------------------------------------

def load_subjects(cfg: RunConfig) -> list[SubjectDataset]:
    if cfg.data_dir:
        return read_dataset(cfg.data_dir)
    return generate_benchmark(cfg.benchmark_spec())


def partition_roles(subjects: Sequence[SubjectDataset], cfg: RunConfig):
    sources = [s for s in subjects if s.role == "source"]
    targets = [s for s in subjects if s.role == "target"]
    if cfg.targets:
        unknown = set(cfg.targets) - {t.subject_id for t in targets}
        if unknown:
            raise PreconditionError(f"unknown target subjects {sorted(unknown)}")
        targets = [t for t in targets if t.subject_id in cfg.targets]
    return sources, targets


def make_split(target: SubjectDataset, cfg: RunConfig) -> TargetSplit:
    return TargetSplit(target, cfg.split, cfg.seed + 104729 * (target.identity + 1))


def choose_sources(bundle: ModelBundle, train_sources: Sequence[SubjectDataset], split: TargetSplit,
                   cfg: RunConfig, tau_ss: float | None = None) -> tuple[list[SubjectDataset], SimilarityTable]:
    table = build_similarity_table(train_sources, split.train, bundle.backbones)
    tau = cfg.tau_ss if tau_ss is None else tau_ss
    chosen = select_sources(table, tau) if cfg.select_sources else list(table.source_ids)
    by_id = {s.subject_id: s for s in train_sources}
    return [by_id[i] for i in chosen], table


def run_msaco(bundle: ModelBundle, train_sources, split: TargetSplit, cfg: RunConfig,
              weights: LossWeights | None = None, tau_ss: float | None = None):
    selected, table = choose_sources(bundle, train_sources, split, cfg, tau_ss)
    adapted, metrics = adapt_stage(bundle, selected, split, cfg, weights)
    metrics.final["n_selected"] = len(selected)
    return adapted, metrics, selected, table


@dataclass
class Prepared:
    sources: list[SubjectDataset]
    held_out: list[SubjectDataset]
    targets: list[SubjectDataset]
    bundle: ModelBundle
    source_metrics: RunMetrics


def prepare(cfg: RunConfig, subjects: Sequence[SubjectDataset] | None = None,
            weights: LossWeights | None = None) -> Prepared:
    subjects = load_subjects(cfg) if subjects is None else subjects
    sources, targets = partition_roles(subjects, cfg)
    train, held = split_sources(sources, cfg)
    bundle, sm = train_source_stage(train, cfg, weights)
    return Prepared(train, held, targets, bundle, sm)


def compare_methods(cfg: RunConfig, methods: Sequence[str] = ("lower_fusion", "blend_mmd_uda", "msaco",
                                                               "upper_finetune"),
                    prepared: Prepared | None = None) -> list[dict]:
    """One row per (method, target) with its test accuracy; mirrors the layout of a results table."""
    prepared = prepared or prepare(cfg)
    rows = []
    for target in prepared.targets:
        split = make_split(target, cfg)
        for method in methods:
            if method == "msaco":
                _, m, selected, _ = run_msaco(prepared.bundle, prepared.sources, split, cfg)
                extra = {"n_selected": len(selected)}
            else:
                m = run_baseline(method, prepared.bundle, prepared.sources, split, cfg)
                extra = {}
            rows.append({"method": method, "target": target.subject_id, "test_acc": m.final["test_acc"], **extra})
    return rows


def ablate(kind: str, grid: Sequence, cfg: RunConfig, prepared: Prepared | None = None) -> list[dict]:
    """Run the pipeline at every grid point; rows follow the grid order (duplicates kept)."""
    if not grid:
        raise PreconditionError("ablate: empty grid")
    prepared = prepared or prepare(cfg)
    splits = [make_split(t, cfg) for t in prepared.targets]
    rows = []
    for point in grid:
        row: dict = {"setting": _setting_name(kind, point)}
        accs, counts = [], {}
        for split in splits:
            if kind == "tau_ss_sweep":
                _, m, selected, _ = run_msaco(prepared.bundle, prepared.sources, split, cfg, tau_ss=float(point))
                counts[split.subject_id] = len(selected)
            elif kind == "tau_pl_sweep":
                c = copy.copy(cfg)
                c.tau_pl = float(point)
                _, m, _, _ = run_msaco(prepared.bundle, prepared.sources, split, c)
                counts[split.subject_id] = m.epochs[-1]["n_confident"]
                row.setdefault("pl_accuracy", []).append(m.epochs[0]["pl_accuracy"])
            elif kind == "loss_weights":
                w = LossWeights(**{**cfg.weights.__dict__, **dict(point)})
                _, m, _, _ = run_msaco(prepared.bundle, prepared.sources, split, cfg, weights=w)
            elif kind == "loss_components":
                if point not in LOSS_COMPONENT_ROWS:
                    raise PreconditionError(f"unknown loss-component row {point!r}; expected {list(LOSS_COMPONENT_ROWS)}")
                g, a, b = (d if d is not None else cur for d, cur in
                           zip(LOSS_COMPONENT_ROWS[point], (cfg.weights.gamma, cfg.weights.alpha, cfg.weights.beta)))
                w = LossWeights(gamma=g, alpha=a, beta=b, disentangle=cfg.weights.disentangle)
                _, m, _, _ = run_msaco(prepared.bundle, prepared.sources, split, cfg, weights=w)
            else:
                raise PreconditionError(f"unknown ablation kind {kind!r}")
            accs.append(m.final["test_acc"])
        if counts:
            row.update({f"n_{k}": v for k, v in counts.items()})
            row["avg_count"] = float(np.mean(list(counts.values())))
        if "pl_accuracy" in row:
            row["pl_accuracy"] = float(np.nanmean(row["pl_accuracy"]))
        row["accuracy"] = float(np.mean(accs))
        rows.append(row)
    return rows


def _setting_name(kind: str, point) -> str:
    if isinstance(point, dict):
        return ";".join(f"{k}={v}" for k, v in point.items())
    return str(point)


def default_grid(kind: str) -> list:
    return {
        "tau_ss_sweep": [0.0, 0.25, 0.5, 0.55, 0.75, 1.0],
        "tau_pl_sweep": [0.5, 0.6, 0.7, 0.8, 0.9, 0.95],
        "loss_weights": [{"gamma": g} for g in (0.1, 0.5, 1.0)] + [{"beta": b} for b in (0.01, 0.1, 1.0)]
                        + [{"alpha": a} for a in (0.1, 0.5, 1.0)],
        "loss_components": ["s", "s+t", "s+t+agn", "s+t+agn+aw"],
    }[kind]


def write_rows(rows: Sequence[dict], path) -> None:
    cols: list[str] = []
    for r in rows:
        for k in r:
            if k not in cols:
                cols.append(k)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in cols])


# -- embedding export --------------------------------------------------------

def embedding_columns(bundle: ModelBundle) -> list[str]:
    e = bundle.arch["embed_dim"]
    hidden = bundle.fusion.hidden
    return (["subject_id", "role", "label", "pseudo_label"] + [f"v_{i}" for i in range(e)]
            + [f"p_{i}" for i in range(e)] + [f"f_{i}" for i in range(hidden)])


def export_embeddings(bundle: ModelBundle, subjects: Sequence[SubjectDataset], path,
                      pseudo_labels: dict[str, dict[int, int]] | None = None) -> None:
    """CSV of per-sample visual/physio embeddings and the fusion head's hidden layer (``f_*``)."""
    pseudo_labels = pseudo_labels or {}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(embedding_columns(bundle))
        for s in subjects:
            with T.no_grad():
                h = bundle.embed({m: s.features(m) for m in MODALITIES})
                hf = T.relu(fuse(h["visual"], h["physio"]) @ bundle.fusion.w1 + bundle.fusion.b1).data
            pl = pseudo_labels.get(s.subject_id, {})
            for i in range(len(s)):
                w.writerow([s.subject_id, s.role, int(s.y[i]), pl.get(i, "")]
                           + [repr(float(v)) for v in h["visual"].data[i]]
                           + [repr(float(v)) for v in h["physio"].data[i]] + [repr(float(v)) for v in hf[i]])
