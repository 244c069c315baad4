"""Keyless observer: n-gram features and a from-scratch softmax regression.

Features are raw unigram (and optionally bigram) counts over generated
tokens, L2-normalized. Bigram ``(a, b)`` lives at index ``V + a * V + b``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import _kernels
from .errors import BadK, EmptyOutput, EmptyTestSet, InsufficientPool, MissingClass, NonFiniteLoss
from .toylm import TokenSeq


@dataclass(frozen=True)
class FeatureConfig:
    vocab_size: int = 512
    use_bigrams: bool = True

    @property
    def dim(self) -> int:
        v = self.vocab_size
        return v + v * v if self.use_bigrams else v


@dataclass(frozen=True)
class FeatureVector:
    indices: np.ndarray
    values: np.ndarray
    dim: int

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.dim)
        out[self.indices] = self.values
        return out


@dataclass
class LabeledDataset:
    """CSR feature matrix with integer labels."""

    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    labels: np.ndarray
    n_classes: int
    dim: int

    def __len__(self) -> int:
        return len(self.labels)

    def row(self, i: int) -> FeatureVector:
        lo, hi = self.indptr[i], self.indptr[i + 1]
        return FeatureVector(self.indices[lo:hi], self.data[lo:hi], self.dim)

    def subset(self, rows: np.ndarray) -> "LabeledDataset":
        rows = np.asarray(rows, dtype=np.int64)
        lens = self.indptr[rows + 1] - self.indptr[rows]
        indptr = np.zeros(len(rows) + 1, dtype=np.int64)
        np.cumsum(lens, out=indptr[1:])
        take = np.concatenate([np.arange(self.indptr[r], self.indptr[r + 1]) for r in rows]) \
            if len(rows) else np.empty(0, dtype=np.int64)
        return LabeledDataset(indptr, self.indices[take], self.data[take], self.labels[rows],
                              self.n_classes, self.dim)

    def to_dense(self) -> np.ndarray:
        out = np.zeros((len(self), self.dim))
        for i in range(len(self)):
            lo, hi = self.indptr[i], self.indptr[i + 1]
            out[i, self.indices[lo:hi]] = self.data[lo:hi]
        return out

    @classmethod
    def from_dense(cls, x: np.ndarray, labels: Sequence[int], n_classes: int) -> "LabeledDataset":
        x = np.asarray(x, dtype=np.float64)
        rows, cols = np.nonzero(x)
        indptr = np.zeros(x.shape[0] + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=x.shape[0]), out=indptr[1:])
        return cls(indptr, cols.astype(np.int64), x[rows, cols], np.asarray(labels, dtype=np.int64),
                   n_classes, x.shape[1])


def _feature_ids(tokens: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    """Feature index of every n-gram occurrence, one row per sequence."""
    v = cfg.vocab_size
    if not cfg.use_bigrams or tokens.shape[1] < 2:
        return tokens
    bigrams = v + tokens[:, :-1] * v + tokens[:, 1:]
    return np.concatenate([tokens, bigrams], axis=1)


def featurize_batch(tokens: np.ndarray, labels: Sequence[int] | None, cfg: FeatureConfig,
                    n_classes: int | None = None) -> LabeledDataset:
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    if tokens.shape[1] == 0:
        raise EmptyOutput("cannot featurize empty outputs")
    ids = np.sort(_feature_ids(tokens, cfg), axis=1)
    n, width = ids.shape
    new = np.ones_like(ids, dtype=bool)
    new[:, 1:] = ids[:, 1:] != ids[:, :-1]
    flat_ids = ids[new]
    # run lengths: distance between consecutive run starts, row by row
    starts = np.flatnonzero(new.ravel())
    ends = np.append(starts[1:], n * width)
    row_of = starts // width
    ends = np.minimum(ends, (row_of + 1) * width)
    counts = (ends - starts).astype(np.float64)
    per_row = new.sum(axis=1)
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(per_row, out=indptr[1:])
    norms = np.sqrt(np.add.reduceat(counts * counts, indptr[:-1]))
    data = counts / np.repeat(norms, per_row)
    labels = np.zeros(n, dtype=np.int64) if labels is None else np.asarray(labels, dtype=np.int64)
    if n_classes is None:
        n_classes = int(labels.max()) + 1 if n else 0
    return LabeledDataset(indptr, flat_ids.astype(np.int64), data, labels, n_classes, cfg.dim)


def featurize(x: TokenSeq | Sequence[int], cfg: FeatureConfig) -> FeatureVector:
    tokens = np.asarray(getattr(x, "tokens", x), dtype=np.int64)
    if tokens.size == 0:
        raise EmptyOutput("cannot featurize an empty output")
    return featurize_batch(tokens[None, :], None, cfg, n_classes=1).row(0)


@dataclass(frozen=True)
class TrainHyper:
    learning_rate: float = 1.0
    epochs: int = 10
    batch_size: int = 16
    l2_penalty: float = 1e-6
    seed: int = 0


@dataclass
class Classifier:
    """Softmax regression; ``w`` is stored feature-major, shape ``(dim, n_classes)``."""

    w: np.ndarray
    bias: np.ndarray
    hyper: TrainHyper = field(default_factory=TrainHyper)

    @property
    def weights(self) -> np.ndarray:
        """``(n_classes, dim)`` view."""
        return self.w.T

    @property
    def n_classes(self) -> int:
        return self.bias.shape[0]

    @classmethod
    def zeros(cls, n_classes: int, dim: int, hyper: TrainHyper | None = None) -> "Classifier":
        return cls(np.zeros((dim, n_classes)), np.zeros(n_classes), hyper or TrainHyper())

    def logits(self, data: LabeledDataset) -> np.ndarray:
        return _kernels.sparse_logits(data.indptr, data.indices, data.data, self.w, self.bias)

    def predict_proba(self, data: LabeledDataset) -> np.ndarray:
        return softmax(self.logits(data))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def objective(clf: Classifier, data: LabeledDataset) -> float:
    """Mean cross-entropy plus ``(l2 / 2) * ||W||^2`` (dense; for small problems)."""
    logits = data.to_dense() @ clf.w + clf.bias
    m = logits.max(axis=1, keepdims=True)
    lse = (m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True)))[:, 0]
    ce = np.mean(lse - logits[np.arange(len(data)), data.labels])
    return float(ce + 0.5 * clf.hyper.l2_penalty * np.sum(clf.w * clf.w))


def gradient(clf: Classifier, data: LabeledDataset) -> tuple[np.ndarray, np.ndarray]:
    """Full-batch gradient of ``objective`` w.r.t. ``(w, bias)``, via the training kernel."""
    n = len(data)
    rows = np.arange(n, dtype=np.int64)
    res = np.empty((n, clf.n_classes))
    _kernels.residuals(data.indptr, data.indices, data.data, data.labels, rows,
                       clf.w, clf.bias, 1.0, res)
    gw = np.zeros_like(clf.w)
    row_ids = np.repeat(rows, np.diff(data.indptr))
    np.add.at(gw, data.indices, data.data[:, None] * res[row_ids])
    gw = gw / n + clf.hyper.l2_penalty * clf.w
    return gw, res.mean(axis=0)


def train(data: LabeledDataset, hyper: TrainHyper = TrainHyper()) -> Classifier:
    """Mini-batch gradient descent on cross-entropy + L2, from zero weights.

    Example order is reshuffled each epoch from ``hyper.seed``.
    """
    present = np.bincount(data.labels, minlength=data.n_classes)
    if data.n_classes < 2 or (present == 0).any():
        raise MissingClass(f"every class needs an example; counts {present.tolist()}")
    clf = Classifier.zeros(data.n_classes, data.dim, hyper)
    if hyper.epochs == 0:
        return clf
    rng = np.random.default_rng(hyper.seed)
    perms = np.stack([rng.permutation(len(data)) for _ in range(hyper.epochs)]).astype(np.int64)
    status, last = _kernels.train_epochs(data.indptr, data.indices, data.data, data.labels, perms,
                                         clf.w, clf.bias, float(hyper.learning_rate),
                                         float(hyper.l2_penalty), int(hyper.batch_size))
    if status != 0 or not np.isfinite(clf.w).all():
        raise NonFiniteLoss(f"training diverged (last batch loss {last})")
    return clf


def topk_from_proba(proba: np.ndarray, k: int) -> np.ndarray:
    """Rank classes by probability; ties go to the lower class id."""
    order = np.argsort(-proba, axis=-1, kind="stable")
    return order[..., :k]


def predict_topk(clf: Classifier, fv: FeatureVector, k: int) -> list[int]:
    if not 1 <= k <= clf.n_classes:
        raise BadK(f"k must lie in [1, {clf.n_classes}], got {k}")
    logits = clf.bias + fv.values @ clf.w[fv.indices]
    return topk_from_proba(softmax(logits), k).tolist()


def evaluate(clf: Classifier, test: LabeledDataset) -> dict[str, float]:
    if len(test) == 0:
        raise EmptyTestSet("empty test set")
    ranked = topk_from_proba(clf.predict_proba(test), min(3, clf.n_classes))
    hit = ranked == test.labels[:, None]
    return {"top1": float(hit[:, 0].mean()), "top3": float(hit.any(axis=1).mean())}


@dataclass
class LearningCurve:
    n_entities: int
    points: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"n_entities": self.n_entities, "points": [dict(p) for p in self.points]}


def learning_curve(pool: LabeledDataset, pool_order: Sequence[np.ndarray], test: LabeledDataset,
                   sample_counts: Sequence[int], hyper: TrainHyper = TrainHyper()) -> LearningCurve:
    """Train on the first ``c`` pool samples of every entity for each count ``c``.

    ``pool_order[e]`` lists entity ``e``'s pool rows in their fixed order.
    """
    counts = [int(c) for c in sample_counts]
    if any(b <= a for a, b in zip(counts, counts[1:])) or not counts or counts[0] < 1:
        raise ValueError(f"sample_counts must be positive and strictly increasing: {counts}")
    smallest = min(len(r) for r in pool_order)
    if smallest < counts[-1]:
        raise InsufficientPool(f"pool has {smallest} samples per entity, need {counts[-1]}")
    curve = LearningCurve(n_entities=pool.n_classes)
    for c in counts:
        rows = np.concatenate([np.asarray(r[:c]) for r in pool_order])
        clf = train(pool.subset(rows), hyper)
        curve.points.append({"samples_per_entity": c, **evaluate(clf, test)})
    return curve


def binomial_sigma(p: float, n: int) -> float:
    return math.sqrt(p * (1.0 - p) / n)


def hyper_from_dict(d: dict) -> TrainHyper:
    return TrainHyper(**d)


def hyper_to_dict(h: TrainHyper) -> dict:
    return asdict(h)
