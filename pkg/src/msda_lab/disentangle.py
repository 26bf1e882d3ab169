"""Differentiable Gaussian-mixture entropy estimation for identity disentanglement.

The marginal density is a diagonal-covariance mixture. The identity
conditional density shares those base parameters and adds per-component
offsets (weight logits, means, log-scales) produced by a small network fed
with the one-hot identity; a zeroed network therefore reproduces the
marginal exactly.
"""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import DomainError, PreconditionError
from .tensor import Tensor

MIN_LOG_SCALE = -6.0
MAX_LOG_SCALE = 4.0


class EntropyEstimator:
    def __init__(self, dim: int, n_identities: int = 0, n_mixture: int = 10, cond_hidden: int = 512,
                 cond_layers: int = 3, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.dim, self.n_mixture, self.n_identities = dim, n_mixture, n_identities
        self.logits = Tensor(np.zeros(n_mixture), requires_grad=True)
        self.means = Tensor(rng.normal(size=(n_mixture, dim)), requires_grad=True)
        self.log_scales = Tensor(np.zeros((n_mixture, dim)), requires_grad=True)
        self.cond_net: list[tuple[Tensor, Tensor]] = []
        if n_identities:
            out = n_mixture * (1 + 2 * dim)
            widths = [n_identities] + [cond_hidden] * (cond_layers - 1) + [out]
            for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
                last = i == len(widths) - 2
                w = np.zeros((a, b)) if last else rng.normal(0.0, np.sqrt(2.0 / a), (a, b))
                self.cond_net.append((Tensor(w, requires_grad=True), Tensor(np.zeros(b), requires_grad=True)))
        self.initialized = False
        self._rng = rng
        self._frozen = None   # (parameter arrays, offset table) cache for the frozen conditional net

    def parameters(self) -> list[Tensor]:
        ps = [self.logits, self.means, self.log_scales]
        for w, b in self.cond_net:
            ps += [w, b]
        return ps

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {f"{prefix}logits": self.logits, f"{prefix}means": self.means, f"{prefix}log_scales": self.log_scales}
        for i, (w, b) in enumerate(self.cond_net):
            out[f"{prefix}cond{i}.w"] = w
            out[f"{prefix}cond{i}.b"] = b
        return out

    def init_from(self, h: np.ndarray) -> None:
        """Place component means on random data rows and scales at a KDE-style bandwidth."""
        h = np.asarray(h, dtype=np.float64)
        idx = self._rng.choice(len(h), size=self.n_mixture, replace=len(h) < self.n_mixture)
        self.means.data = h[idx].copy()
        sd = h.std(axis=0)
        factor = self.n_mixture ** (-1.0 / (self.dim + 4))
        with np.errstate(divide="ignore"):
            ls = np.log(sd * factor)
        self.log_scales.data = np.clip(np.broadcast_to(ls, (self.n_mixture, self.dim)), MIN_LOG_SCALE, MAX_LOG_SCALE).copy()
        self.initialized = True

    def _cond_table(self, frozen: bool) -> Tensor:
        """Conditioning-net output for every identity (one row each)."""
        arrays = tuple(t.data for pair in self.cond_net for t in pair)
        if frozen and self._frozen is not None and all(a is b for a, b in zip(self._frozen[0], arrays)):
            return self._frozen[1]
        x = Tensor(np.eye(self.n_identities))
        for i, (w, b) in enumerate(self.cond_net):
            if frozen:
                w, b = w.detach(), b.detach()
            x = x @ w + b
            if i < len(self.cond_net) - 1:
                x = T.relu(x)
        if frozen:
            self._frozen = (arrays, x.detach())
        return x

    def _cond_offsets(self, ids: np.ndarray, frozen: bool) -> tuple[Tensor, Tensor, Tensor]:
        rows = self._cond_table(frozen)[ids]
        k, d = self.n_mixture, self.dim
        dl = rows[:, :k]
        dmu = rows[:, k:k + k * d].reshape(len(ids), k, d)
        ds = rows[:, k + k * d:].reshape(len(ids), k, d)
        return dl, dmu, ds


def _check_h(est: EntropyEstimator, h: Tensor) -> None:
    if h.ndim != 2 or h.shape[1] != est.dim:
        raise PreconditionError(f"entropy estimator: expected width {est.dim}, got shape {h.shape}")
    if not np.all(np.isfinite(h.data)):
        raise DomainError("entropy estimator: non-finite embedding")


def _ids_from_onehot(est: EntropyEstimator, cond) -> np.ndarray:
    cond = np.asarray(cond.data if isinstance(cond, Tensor) else cond, dtype=np.float64)
    if cond.ndim != 2 or cond.shape[1] != est.n_identities:
        raise PreconditionError(f"conditional entropy: one-hot width must be {est.n_identities}, got shape {cond.shape}")
    if not (np.all((cond == 0) | (cond == 1)) and np.all(cond.sum(axis=1) == 1)):
        raise PreconditionError("conditional entropy: rows must be one-hot")
    return cond.argmax(axis=1)


def log_density(est: EntropyEstimator, h, cond=None, frozen: bool = False) -> Tensor:
    """Per-row log of the mixture density (conditional on one-hot ``cond`` when given)."""
    h = T.as_tensor(h)
    _check_h(est, h)
    logits, means, log_scales = est.logits, est.means, est.log_scales
    if frozen:
        logits, means, log_scales = logits.detach(), means.detach(), log_scales.detach()
    n, d = h.shape
    x = h.reshape(n, 1, d)
    if cond is not None:
        ids = _ids_from_onehot(est, cond)
        dl, dmu, ds = est._cond_offsets(ids, frozen)
        logw = T.log_softmax(logits + dl, axis=1)
        mu = means + dmu
        ls = T.clip(log_scales + ds, MIN_LOG_SCALE, MAX_LOG_SCALE)
    else:
        logw = T.log_softmax(logits, axis=0).reshape(1, est.n_mixture)
        mu = means
        ls = T.clip(log_scales, MIN_LOG_SCALE, MAX_LOG_SCALE)
    z = (x - mu) * T.exp(-ls)
    comp = -0.5 * (z * z).sum(axis=-1) - ls.sum(axis=-1) - 0.5 * d * math.log(2 * math.pi)
    return T.logsumexp(logw + comp, axis=1)


def marginal_entropy(est: EntropyEstimator, h, frozen: bool = False) -> Tensor:
    h = T.as_tensor(h)
    if len(h) < 2:
        raise PreconditionError(f"marginal_entropy: need a batch of at least 2, got {len(h)}")
    return -log_density(est, h, frozen=frozen).mean()


def conditional_entropy(est: EntropyEstimator, h, ids_onehot, frozen: bool = False) -> Tensor:
    return -log_density(est, h, ids_onehot, frozen=frozen).mean()


def estimator_fit_step(est: EntropyEstimator, h, ids=None, lr: float = 0.01) -> float:
    """One plain gradient step on the marginal (+ conditional) NLL of detached ``h``; returns post-step NLL."""
    h = T.as_tensor(h).detach()
    _check_h(est, h)
    if not est.initialized:
        est.init_from(h.data)
    onehot = T.one_hot(ids, est.n_identities) if (ids is not None and est.n_identities) else None

    def nll() -> Tensor:
        loss = -log_density(est, h).mean()
        if onehot is not None:
            loss = loss - log_density(est, h, onehot).mean()
        return loss

    loss = nll()
    loss.backward()
    for p in est.parameters():
        if p.grad is not None:
            p.data = p.data - lr * p.grad
            p.grad = None
    est.log_scales.data = np.clip(est.log_scales.data, MIN_LOG_SCALE, MAX_LOG_SCALE)
    with T.no_grad():
        post = -log_density(est, h, frozen=True).mean()
        if onehot is not None:
            post = post - log_density(est, h, onehot, frozen=True).mean()
        return post.item()


def disentangle_loss(est: EntropyEstimator, h, ids_onehot, mi_variant: bool = False) -> Tensor:
    """H(h) + H(h | identity) with the estimator held fixed; gradient reaches ``h`` only.

    ``mi_variant`` uses H(h) - H(h | identity) (a mutual-information estimate) instead.
    """
    h_marg = marginal_entropy(est, h, frozen=True)
    h_cond = conditional_entropy(est, h, ids_onehot, frozen=True)
    return h_marg - h_cond if mi_variant else h_marg + h_cond
