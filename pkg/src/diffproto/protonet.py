"""Vanilla prototypes and the distance-softmax classifier.

A query is assigned class probabilities by a softmax over negated distances
to the class prototypes. Squared Euclidean distance is the default;
cosine similarity with a temperature is available as a variant. Both the
plain-array evaluation path and the Tensor path (for gradients) live here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .data import Episode
from .numerics import Tensor

VANILLA = "vanilla"
OVERFIT = "overfit"
DIFFUSED = "diffused"


@dataclass
class Metric:
    """Distance used by the classifier; temperature applies to cosine only."""

    variant: str = "sqeuclidean"
    temperature: float = 10.0

    def __post_init__(self):
        if self.variant not in ("sqeuclidean", "cosine"):
            raise ValueError(f"unknown metric variant {self.variant!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")


@dataclass
class PrototypeSet:
    """N class prototypes; row c corresponds to episode label c.

    ``samples`` optionally carries the individual members of a Monte Carlo
    ensemble as an [M, N, D] stack (``vectors`` is then their mean).
    """

    vectors: np.ndarray  # [N, D]
    kind: str = VANILLA
    samples: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors)
        if self.vectors.ndim != 2:
            raise nm.ShapeError(f"prototypes must be [N, D], got {list(self.vectors.shape)}")
        if not np.isfinite(self.vectors).all():
            raise nm.NumericsError("prototypes contain non-finite entries")

    @property
    def n_way(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def vanilla_prototypes(support) -> PrototypeSet:
    """Arithmetic mean of each class's support embeddings.

    ``support`` is an Episode or an [N, K, D] array, K >= 1.
    """
    arr = support.support if isinstance(support, Episode) else np.asarray(support)
    if arr.ndim != 3:
        raise nm.ShapeError(f"support must be [N, K, D], got {list(arr.shape)}")
    if arr.shape[1] == 0:
        raise ValueError("empty class: K must be >= 1")
    return PrototypeSet(arr.mean(axis=1), kind=VANILLA)


def prototype_logits(query: Tensor, protos: Tensor, metric: Metric) -> Tensor:
    """Classifier logits (higher = closer) as a differentiable Tensor [Q, N]."""
    if metric.variant == "sqeuclidean":
        return nm.neg(nm.pairwise_sqdist(query, protos))
    scores = nm.matmul(nm.normalize_rows(query), nm.transpose(nm.normalize_rows(protos), (1, 0)))
    return nm.mul(scores, float(metric.temperature))


def _logits_array(query: np.ndarray, vectors: np.ndarray, metric: Metric) -> np.ndarray:
    return prototype_logits(Tensor(query), Tensor(vectors), metric).data


def _stable_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def classify(query, protos, metric: Metric | None = None) -> np.ndarray:
    """Class probabilities for one query vector [D] or a batch [Q, D].

    With a Monte Carlo prototype set, probabilities are averaged over the
    ensemble members.
    """
    metric = metric or Metric()
    q = np.asarray(query)
    single = q.ndim == 1
    if single:
        q = q[None, :]
    if isinstance(protos, PrototypeSet) and protos.samples is not None:
        probs = np.mean(
            [_stable_softmax(_logits_array(q, member, metric)) for member in protos.samples],
            axis=0,
        )
    else:
        vectors = protos.vectors if isinstance(protos, PrototypeSet) else np.asarray(protos)
        probs = _stable_softmax(_logits_array(q, vectors, metric))
    return probs[0] if single else probs


def cross_entropy(logits, label: int) -> float:
    """-log p(label), evaluated from logits in fused log-sum-exp form."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1:
        raise nm.ShapeError(f"cross_entropy wants one logit row, got shape {list(logits.shape)}")
    if not 0 <= label < logits.shape[0]:
        raise nm.ShapeError(f"label {label} out of range for {logits.shape[0]} classes")
    m = logits.max()
    return float(np.log(np.exp(logits - m).sum()) + m - logits[label])


def episode_logits(episode_queries: np.ndarray, protos, metric: Metric | None = None) -> np.ndarray:
    metric = metric or Metric()
    vectors = protos.vectors if isinstance(protos, PrototypeSet) else np.asarray(protos)
    return _logits_array(np.asarray(episode_queries), vectors, metric)


def evaluate_accuracy(episode: Episode, protos, metric: Metric | None = None) -> float:
    """Fraction of query points whose argmax class matches the label.

    np.argmax resolves ties toward the lowest class index.
    """
    metric = metric or Metric()
    queries, labels = episode.query_flat()
    probs = classify(queries, protos, metric)
    predictions = probs.argmax(axis=1)
    return float((predictions == labels).mean())


def query_cross_entropy(episode: Episode, protos, metric: Metric | None = None, reduction: str = "sum") -> float:
    """Episode query-set cross entropy under the given prototypes."""
    metric = metric or Metric()
    queries, labels = episode.query_flat()
    vectors = protos.vectors if isinstance(protos, PrototypeSet) else np.asarray(protos)
    logits = _logits_array(queries, vectors, metric)
    loss = nm.cross_entropy_with_logits(Tensor(logits), labels, reduction=reduction)
    return loss.item()
