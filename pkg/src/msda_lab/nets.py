"""Per-modality encoders, expression/identity heads and the fusion head.

All networks are two-layer perceptrons over feature vectors. Checkpoints are
JSON files mapping parameter names to ``{"shape": [...], "data": [...]}``;
floats are written with ``repr`` precision so a save/load round trip is
bit-exact.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ParseError, PreconditionError
from .tensor import Tensor

CHECKPOINT_FORMAT = "msda-lab-checkpoint/1"
MODALITIES = ("visual", "physio")


class MLP:
    """``in_dim -> hidden -> out_dim`` with a ReLU between the two affine maps."""

    kind = "mlp"

    def __init__(self, in_dim: int, hidden: int, out_dim: int, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_dim, self.hidden, self.out_dim = in_dim, hidden, out_dim
        self.w1 = Tensor(rng.normal(0.0, np.sqrt(2.0 / in_dim), (in_dim, hidden)), requires_grad=True)
        self.b1 = Tensor(np.zeros(hidden), requires_grad=True)
        self.w2 = Tensor(rng.normal(0.0, np.sqrt(1.0 / hidden), (hidden, out_dim)), requires_grad=True)
        self.b2 = Tensor(np.zeros(out_dim), requires_grad=True)

    def __call__(self, x) -> Tensor:
        x = T.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise PreconditionError(f"{self.kind}: expected input of width {self.in_dim}, got shape {x.shape}")
        return T.relu(x @ self.w1 + self.b1) @ self.w2 + self.b2

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {f"{prefix}{k}": getattr(self, k) for k in ("w1", "b1", "w2", "b2")}

    def zero_(self) -> "MLP":
        for p in self.parameters():
            p.data = np.zeros_like(p.data)
        return self


class Backbone(MLP):
    kind = "backbone"

    def __init__(self, modality: str, input_dim: int, hidden_dim: int = 64, embed_dim: int = 32, rng=None):
        if modality not in MODALITIES:
            raise PreconditionError(f"unknown modality {modality!r}")
        super().__init__(input_dim, hidden_dim, embed_dim, rng)
        self.modality = modality

    @property
    def embed_dim(self) -> int:
        return self.out_dim


class ExpressionHead(MLP):
    kind = "expression_head"


class FusionHead(MLP):
    kind = "fusion_head"

    def __init__(self, embed_dim: int, hidden: int, n_classes: int, rng=None):
        super().__init__(2 * embed_dim, hidden, n_classes, rng)


class IdentityHead(MLP):
    """Identity classifier over stop-gradient embeddings.

    ``shift``/``scale`` standardise inputs; they are fixed when the probe is
    fitted so accuracy does not depend on the embedding scale.
    """

    kind = "identity_head"

    def __init__(self, embed_dim: int, hidden: int, n_identities: int, rng=None):
        super().__init__(embed_dim, hidden, n_identities, rng)
        self.shift = np.zeros(embed_dim)
        self.scale = np.ones(embed_dim)

    def __call__(self, x) -> Tensor:
        x = T.as_tensor(x).detach()
        return super().__call__((x.data - self.shift) / self.scale)


def embed(backbone: Backbone, x) -> Tensor:
    return backbone(x)


def classify(head: MLP, h) -> Tensor:
    return head(h)


def fuse(h_v, h_p) -> Tensor:
    h_v, h_p = T.as_tensor(h_v), T.as_tensor(h_p)
    if h_v.shape[0] != h_p.shape[0]:
        raise PreconditionError(f"fuse: row counts differ ({h_v.shape[0]} vs {h_p.shape[0]})")
    return T.concat([h_v, h_p], axis=-1)


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    logits = T.as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise PreconditionError(f"cross_entropy: {labels.shape[0]} labels for {n} rows")
    if n == 0:
        raise PreconditionError("cross_entropy: empty batch")
    if labels.min() < 0 or labels.max() >= c:
        raise PreconditionError(f"cross_entropy: labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    picked = T.log_softmax(logits)[np.arange(n), labels]
    return -picked.mean()


def accuracy(logits, labels) -> float:
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise PreconditionError("accuracy: empty batch")
    return float(np.mean(np.argmax(data, axis=1) == labels))


def fit_head(head: MLP, h: np.ndarray, labels: np.ndarray, rng: np.random.Generator,
             epochs: int = 60, batch: int = 64, lr: float = 0.05) -> MLP:
    """Train ``head`` alone with cross-entropy on fixed inputs ``h``."""
    state = T.SgdState(learning_rate=lr, momentum=0.9, weight_decay=5e-4, eta_min=lr * 0.01, total_epochs=epochs)
    n = len(h)
    for epoch in range(epochs):
        state.set_epoch(epoch)
        order = rng.permutation(n)
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            loss = cross_entropy(head(h[idx]), labels[idx])
            loss.backward()
            T.sgd_step(head.parameters(), state)
    return head


def train_identity_probe(h: np.ndarray, ids: np.ndarray, n_identities: int, rng: np.random.Generator,
                         hidden: int = 64, epochs: int = 60) -> IdentityHead:
    h = np.asarray(h, dtype=np.float64)
    head = IdentityHead(h.shape[1], hidden, n_identities, rng)
    head.shift = h.mean(axis=0)
    sd = h.std(axis=0)
    head.scale = np.where(sd > 1e-12, sd, 1.0)
    return fit_head(head, h, np.asarray(ids), rng, epochs=epochs)


def identity_probe_accuracy(head: IdentityHead, h, ids) -> float:
    with T.no_grad():
        return accuracy(head(h), ids)


# -- checkpoints -------------------------------------------------------------

def save_params(params: dict[str, Tensor], path, meta: dict | None = None) -> None:
    record = {
        "format": CHECKPOINT_FORMAT,
        "meta": meta or {},
        "params": {k: {"shape": list(v.shape), "data": v.data.reshape(-1).tolist()} for k, v in params.items()},
    }
    Path(path).write_text(json.dumps(record))


def load_params(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        record = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc})") from None
    if record.get("format") != CHECKPOINT_FORMAT:
        raise ParseError(f"{path}: unknown checkpoint format {record.get('format')!r}")
    out = {}
    for name, entry in record["params"].items():
        data = np.asarray(entry["data"], dtype=np.float64)
        shape = tuple(entry["shape"])
        if data.size != int(np.prod(shape)):
            raise ParseError(f"{path}: parameter {name!r} has {data.size} values for shape {shape}")
        out[name] = data.reshape(shape)
    return out, record.get("meta", {})
