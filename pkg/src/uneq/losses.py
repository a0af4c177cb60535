"""Relational objectives. None of these look at data; every target is
another batch, another network's output, or the batch itself."""
from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .tensor import Tensor

L2_EPS = 1e-12


class DistanceKind(str, enum.Enum):
    L1 = "l1"
    L2 = "l2"
    COSINE = "cosine"


class DiscriminatorMode(str, enum.Enum):
    CLASSIFIER = "classifier"
    DIAMETRIC = "diametric"


class GeneratorObjective(str, enum.Enum):
    SWAP_CLASSIFICATION = "swap_classification"
    EMBEDDING_PROXIMITY = "embedding_proximity"


@dataclass(frozen=True)
class LossArrangement:
    discriminator_mode: DiscriminatorMode = DiscriminatorMode.CLASSIFIER
    generator_objective: GeneratorObjective = GeneratorObjective.SWAP_CLASSIFICATION
    distance_g1: DistanceKind = DistanceKind.L2
    distance_g2: DistanceKind = DistanceKind.L2
    diversity_weight: float = 1.0
    diversity_margin: float = 0.1
    diversity_measure: str = "mean_color_l1"

    def __post_init__(self):
        # accept plain strings from config files
        object.__setattr__(self, "discriminator_mode", DiscriminatorMode(self.discriminator_mode))
        object.__setattr__(self, "generator_objective", GeneratorObjective(self.generator_objective))
        object.__setattr__(self, "distance_g1", DistanceKind(self.distance_g1))
        object.__setattr__(self, "distance_g2", DistanceKind(self.distance_g2))
        for name in ("diversity_weight", "diversity_margin"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        if self.diversity_measure not in DIVERSITY_MEASURES:
            raise ValueError(f"unknown diversity measure {self.diversity_measure!r}")

    def distance_for(self, generator: int) -> DistanceKind:
        return self.distance_g1 if generator == 1 else self.distance_g2


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def distance(a, b, kind: DistanceKind | str) -> Tensor:
    """Distance along the last axis; leading axes are kept.

    L1 is the mean absolute difference, L2 the root mean squared difference
    (the 1e-12 floor only enters its derivative, so d(v, v) is exactly 0),
    COSINE is 1 - cos(a, b).
    """
    a, b = _wrap(a), _wrap(b)
    if a.shape != b.shape:
        raise ValueError(f"distance: shape mismatch {a.shape} vs {b.shape}")
    kind = DistanceKind(kind)
    if kind is DistanceKind.L1:
        return T.mean(T.abs(a - b), axis=-1)
    if kind is DistanceKind.L2:
        return T.floored_sqrt(T.mean(T.square(a - b), axis=-1), L2_EPS)
    na = np.sqrt((a.data * a.data).sum(axis=-1))
    nb = np.sqrt((b.data * b.data).sum(axis=-1))
    if (na == 0).any() or (nb == 0).any():
        raise ValueError("cosine distance is undefined for zero vectors")
    dot = T.sum(a * b, axis=-1)
    norms = T.sqrt(T.sum(T.square(a), axis=-1)) * T.sqrt(T.sum(T.square(b), axis=-1))
    # rounding can push cos slightly above 1
    return T.relu(1.0 - dot / norms)


@lru_cache(maxsize=None)
def _pair_matrix(n: int, dtype_str: str) -> np.ndarray:
    i, j = np.triu_indices(n, k=1)
    P = np.zeros((len(i), n), dtype=dtype_str)
    P[np.arange(len(i)), i] = 1.0
    P[np.arange(len(i)), j] = -1.0
    P.flags.writeable = False
    return P


def color_diversity(batch) -> Tensor:
    """Mean over unordered image pairs of the L1 gap between mean colours."""
    batch = _wrap(batch)
    if batch.ndim != 4 or batch.shape[0] < 2:
        raise ValueError(f"color_diversity needs a [b>=2, c, h, w] batch, got {batch.shape}")
    colors = T.mean(batch, axis=(2, 3))
    P = Tensor(_pair_matrix(batch.shape[0], batch.dtype.str))
    return T.mean(T.abs(T.matmul(P, colors)))


DIVERSITY_MEASURES = {"mean_color_l1": color_diversity}


def diversity_competition_loss(self_batch, other_batch, margin: float = 0.1,
                               measure: str = "mean_color_l1") -> Tensor:
    """Hinge pushing this batch's diversity above the other's by ``margin``.

    The other batch is treated as a constant.
    """
    fn = DIVERSITY_MEASURES[measure]
    other = fn(T.detach(_wrap(other_batch)))
    return T.relu(margin + other - fn(self_batch))


def _bce_with_logits(logits: Tensor, label: int) -> Tensor:
    # -log sigmoid(x) = softplus(-x); -log(1 - sigmoid(x)) = softplus(x)
    return T.softplus(-logits) if label == 1 else T.softplus(logits)


GENERATOR_LABEL = {1: 0, 2: 1}


def swap_classification_loss(logits: Tensor, generator: int) -> Tensor:
    """BCE of a generator's logits against the *other* generator's label."""
    if generator not in GENERATOR_LABEL:
        raise ValueError(f"generator must be 1 or 2, got {generator}")
    target = GENERATOR_LABEL[3 - generator]
    return T.mean(_bce_with_logits(logits, target))


def embedding_proximity_loss(self_emb: Tensor, other_emb, kind: DistanceKind | str) -> Tensor:
    """Mean distance from each embedding to the other batch's centroid."""
    other = T.detach(_wrap(other_emb))
    centroid = T.mean(other, axis=0, keepdims=True)
    return T.mean(distance(self_emb, T.expand(centroid, self_emb.shape), kind))


def discriminator_classifier_loss(logits_g1: Tensor, logits_g2: Tensor) -> Tensor:
    """Mean BCE over both batches; G1 images carry label 0, G2 images label 1."""
    total = T.sum(_bce_with_logits(logits_g1, GENERATOR_LABEL[1])) + T.sum(
        _bce_with_logits(logits_g2, GENERATOR_LABEL[2])
    )
    return total / float(logits_g1.size + logits_g2.size)


def diametric_pair(logits: Tensor) -> tuple[Tensor, Tensor]:
    """Two exactly opposed critic losses on the same logits.

    Propagating both on one batch cancels to zero gradient, so callers feed
    them different batches.
    """
    pos = T.mean(logits)
    return pos, -pos
