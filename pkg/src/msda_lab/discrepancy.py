"""Multi-scale Gaussian MMD and the class-aware / class-agnostic discrepancies.

``mmd2`` is the biased V-statistic (diagonal terms included) summed over a
set of bandwidths ``scale * sigma``. Unless a fixed bandwidth is given,
``sigma`` is the median pairwise distance of the pooled sample and is itself
differentiated through, so gradients match finite differences of the full
estimator.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tensor as T
from .errors import PreconditionError
from .tensor import Tensor

log = logging.getLogger(__name__)

DEFAULT_SCALES = (0.25, 0.5, 1.0, 2.0, 4.0)


@dataclass(frozen=True)
class KernelSpec:
    """Bandwidth multipliers around a base bandwidth (``None`` = median heuristic per call)."""

    base_bandwidth: float | None = None
    scales: tuple[float, ...] = DEFAULT_SCALES
    sqrt: bool = False

    def __post_init__(self):
        if self.base_bandwidth is not None and not self.base_bandwidth > 0:
            raise PreconditionError(f"KernelSpec: base_bandwidth must be > 0, got {self.base_bandwidth}")
        if not self.scales or any(s <= 0 for s in self.scales):
            raise PreconditionError(f"KernelSpec: scale multipliers must be positive, got {self.scales}")


def _median_select(d2: np.ndarray) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Median pairwise distance plus the (row, col, weight) entries that define it."""
    n = d2.shape[0]
    iu, ju = np.triu_indices(n, 1)
    dist = np.sqrt(d2[iu, ju])
    m = len(dist)
    order = np.argsort(dist, kind="stable")
    if m % 2:
        pick, w = order[[m // 2]], np.array([1.0])
    else:
        pick, w = order[[m // 2 - 1, m // 2]], np.array([0.5, 0.5])
    return float(np.dot(w, dist[pick])), iu[pick], ju[pick], w


def median_bandwidth(X, Y) -> float:
    """Median pairwise Euclidean distance over the pooled rows of X and Y (1.0 if that median is 0)."""
    P = np.concatenate([np.atleast_2d(np.asarray(X, float)), np.atleast_2d(np.asarray(Y, float))], axis=0)
    if len(P) < 2:
        raise PreconditionError(f"median_bandwidth: need at least 2 pooled rows, got {len(P)}")
    diff = P[:, None, :] - P[None, :, :]
    sigma = _median_select((diff * diff).sum(-1))[0]
    return sigma if sigma > 0 else 1.0


def _mmd2_core(d2: np.ndarray, n_a: int, kernel: KernelSpec):
    """MMD^2 of the pooled rows ``[A; B]`` from their squared distances, plus a d(value)/d(d2) closure."""
    n = d2.shape[0]
    n_b = n - n_a
    if kernel.base_bandwidth is None:
        sigma, pi, pj, pw = _median_select(d2)
        learn_sigma = sigma > 0
        if not learn_sigma:
            sigma = 1.0
    else:
        sigma, learn_sigma = kernel.base_bandwidth, False
    coefs = [1.0 / (2.0 * (s * sigma) ** 2) for s in kernel.scales]
    ks = [np.exp(-c * d2) for c in coefs]
    K = sum(ks)
    xx = K[:n_a, :n_a].mean()
    yy = K[n_a:, n_a:].mean()
    xy = 0.5 * (K[:n_a, n_a:].mean() + K[n_a:, :n_a].mean())
    value = xx + yy - 2.0 * xy

    def grad(g: float) -> np.ndarray:
        W = np.empty((n, n))
        W[:n_a, :n_a] = 1.0 / (n_a * n_a)
        W[n_a:, n_a:] = 1.0 / (n_b * n_b)
        W[:n_a, n_a:] = -1.0 / (n_a * n_b)
        W[n_a:, :n_a] = -1.0 / (n_a * n_b)
        dK = sum(-c * k for c, k in zip(coefs, ks))
        G = g * W * dK
        if learn_sigma:
            # d(c * d2)/d(sigma) = -2 c d2 / sigma
            dsigma = float(np.sum(W * sum(2.0 * c * k for c, k in zip(coefs, ks)) * d2)) / sigma
            dist = np.sqrt(d2[pi, pj])
            ok = dist > 0
            np.add.at(G, (pi[ok], pj[ok]), g * dsigma * pw[ok] / (2.0 * dist[ok]))
        return G

    return value, grad


def _finish(out: Tensor, kernel: KernelSpec) -> Tensor:
    return T.sqrt(out + 1e-12) if kernel.sqrt else out


def _pooled_mmd2(D2: Tensor, n_a: int, kernel: KernelSpec) -> Tensor:
    value, grad = _mmd2_core(D2.data, n_a, kernel)
    out = Tensor._from_op(np.asarray(value), (D2,), lambda g: (grad(float(g)),), "mmd2")
    return _finish(out, kernel)


def _check_pair(X: Tensor, Y: Tensor) -> None:
    if X.ndim != 2 or Y.ndim != 2:
        raise PreconditionError(f"mmd2: expected 2-D inputs, got {X.shape} and {Y.shape}")
    if len(X) == 0 or len(Y) == 0:
        raise PreconditionError("mmd2: empty sample set")
    if X.shape[1] != Y.shape[1]:
        raise PreconditionError(f"mmd2: width mismatch {X.shape[1]} vs {Y.shape[1]}")


def mmd2(X, Y, kernel: KernelSpec | None = None) -> Tensor:
    X, Y = T.as_tensor(X), T.as_tensor(Y)
    _check_pair(X, Y)
    kernel = kernel or KernelSpec()
    P = T.concat([X, Y], axis=0)
    return _pooled_mmd2(T.sqdist(P, P), len(X), kernel)


class _Blocks:
    """Many MMD evaluations between row blocks off one shared distance matrix, as a single graph node."""

    def __init__(self, blocks: list[Tensor], kernel: KernelSpec):
        self.kernel = kernel
        sizes = [len(b) for b in blocks]
        starts = np.concatenate([[0], np.cumsum(sizes)])
        self.index = [np.arange(starts[i], starts[i + 1]) for i in range(len(blocks))]
        H = T.concat(blocks, axis=0) if len(blocks) > 1 else blocks[0]
        self.D2 = T.sqdist(H, H, gram=True)

    def mmd2_many(self, pairs: list[tuple[int, int]]) -> Tensor:
        """Vector of MMD^2 values, one per (a, b) block pair."""
        d2 = self.D2.data
        subs, values, grads = [], [], []
        for a, b in pairs:
            idx = np.concatenate([self.index[a], self.index[b]])
            v, g = _mmd2_core(d2[np.ix_(idx, idx)], len(self.index[a]), self.kernel)
            subs.append(np.ix_(idx, idx))
            values.append(v)
            grads.append(g)

        def back(gvec):
            G = np.zeros(d2.shape)
            for sub, g, gk in zip(subs, grads, gvec):
                if gk != 0.0:
                    G[sub] += g(float(gk))
            return (G,)

        out = Tensor._from_op(np.asarray(values, dtype=np.float64), (self.D2,), back, "mmd2_many")
        return _finish(out, self.kernel)


SourceClassEmbeddings = Mapping[object, Mapping[int, Tensor]]


def _nonempty(t) -> bool:
    return t is not None and len(t) > 0


def class_aware_discrepancies(sources: SourceClassEmbeddings, target: Mapping[int, Tensor],
                              kernel: KernelSpec | None = None) -> tuple[Tensor, Tensor]:
    """(intra-class, inter-class) discrepancies sharing one distance computation.

    Intra averages MMD between source-a class-c and target class-c over every
    evaluable (a, c); inter averages MMD between source-a class-c and target
    class c' != c. Pairs missing on either side are skipped and the
    normaliser counts only evaluated pairs.
    """
    kernel = kernel or KernelSpec()
    target = {c: T.as_tensor(t) for c, t in target.items() if _nonempty(t)}
    blocks: list[Tensor] = []
    tid = {}
    for c in sorted(target):
        tid[c] = len(blocks)
        blocks.append(target[c])
    sid = {}
    for a in sorted(sources, key=str):
        for c in sorted(sources[a]):
            t = sources[a][c]
            if _nonempty(t) and c in target:
                sid[(a, c)] = len(blocks)
                blocks.append(T.as_tensor(t))
    zero = Tensor(0.0)
    if not sid:
        log.warning("class-aware discrepancy: no evaluable (source, class) pair")
        return zero, zero
    widths = {b.shape[1] for b in blocks}
    if len(widths) != 1:
        raise PreconditionError(f"class-aware discrepancy: embedding widths differ {sorted(widths)}")
    intra = [(i, tid[c]) for (a, c), i in sid.items()]
    inter = [(i, tid[c2]) for (a, c), i in sid.items() for c2 in tid if c2 != c]
    values = _Blocks(blocks, kernel).mmd2_many(intra + inter)
    if not inter:
        log.warning("inter-class discrepancy: fewer than 2 confident classes")
        return values.mean(), zero
    return values[:len(intra)].mean(), values[len(intra):].mean()


def intra_class_disc(sources: SourceClassEmbeddings, target: Mapping[int, Tensor],
                     kernel: KernelSpec | None = None) -> Tensor:
    return class_aware_discrepancies(sources, target, kernel)[0]


def inter_class_disc(sources: SourceClassEmbeddings, target: Mapping[int, Tensor],
                     kernel: KernelSpec | None = None) -> Tensor:
    return class_aware_discrepancies(sources, target, kernel)[1]


def agnostic_disc(sources: Mapping[object, Tensor], target_u, kernel: KernelSpec | None = None) -> Tensor:
    """Mean MMD between each source's non-confident-class samples and the non-confident target samples."""
    kernel = kernel or KernelSpec()
    if not _nonempty(target_u):
        return Tensor(0.0)
    subjects = [a for a in sorted(sources, key=str) if _nonempty(sources[a])]
    if not subjects:
        return Tensor(0.0)
    cache = _Blocks([T.as_tensor(target_u)] + [T.as_tensor(sources[a]) for a in subjects], kernel)
    return cache.mmd2_many([(i + 1, 0) for i in range(len(subjects))]).mean()


def class_aware_loss(intra: Mapping[str, Tensor], inter: Mapping[str, Tensor]) -> Tensor:
    """Sum over modalities of (intra - inter); unclamped, so it may be negative."""
    total = Tensor(0.0)
    for m in intra:
        total = total + (T.as_tensor(intra[m]) - T.as_tensor(inter[m]))
    return total


def class_agnostic_loss(agnostic: Mapping[str, Tensor]) -> Tensor:
    total = Tensor(0.0)
    for m in agnostic:
        total = total + T.as_tensor(agnostic[m])
    return total
