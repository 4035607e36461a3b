"""Training objectives. All entropies and log-likelihoods use base 2.

Includes the information-maximization objective used to adapt the
classifier on unlabeled data, the examiner's binary cross-entropy over
triplet orderings, the two cross-network consistency terms
(correlation-matrix and attention), their weighted combination, and
plain supervised cross-entropy for source pre-training.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    Tensor,
    ShapeError,
    add,
    frobenius_norm_diff,
    log2,
    mean,
    mul,
    scale,
    softmax,
    sqrt,
    sub,
    tsum,
)

__all__ = [
    "LossWeights",
    "im_loss",
    "examiner_bce_loss",
    "cmc_loss",
    "ac_loss",
    "total_loss",
    "source_ce_loss",
]


@dataclass
class LossWeights:
    """Weights of the two consistency terms in the combined loss."""

    lambda1: float = 10.0  # correlation-matrix consistency
    lambda2: float = 10.0  # attention consistency

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError(
                f"LossWeights must be non-negative, got ({self.lambda1}, {self.lambda2})"
            )


def im_loss(logits: Tensor) -> Tensor:
    """Information maximization over a mini-batch of class logits [M,K].

    Mean per-sample softmax entropy (confidence term) plus the negative
    entropy of the batch-mean prediction (diversity term). Minimized by
    confident predictions spread evenly across classes; the lower bound
    is -log2(K).
    """
    if logits.ndim != 2:
        raise ShapeError(f"im_loss: expected [M,K] logits, got {logits.shape}")
    if logits.shape[0] < 2:
        raise ValueError(
            f"im_loss: needs a batch of at least 2 samples for the diversity term, "
            f"got M={logits.shape[0]}"
        )
    probs = softmax(logits, axis=1)
    entropy = scale(mean(tsum(mul(probs, log2(probs)), axis=1)), -1.0)
    batch_mean = mean(probs, axis=0)
    diversity = tsum(mul(batch_mean, log2(batch_mean)))
    return add(entropy, diversity)


def _check_one_hot(q: np.ndarray) -> None:
    if q.ndim != 2:
        raise ShapeError(f"labels: expected a 2-D one-hot matrix, got {q.shape}")
    ok = np.isin(q, (0.0, 1.0)).all(axis=1) & (q.sum(axis=1) == 1.0)
    if not ok.all():
        bad = int(np.argmin(ok))
        raise ValueError(f"labels: row {bad} is not one-hot: {q[bad].tolist()}")


def examiner_bce_loss(logits: Tensor, labels) -> Tensor:
    """Binary cross-entropy (in bits) of ordering logits [T,2] against
    one-hot labels [T,2]."""
    q = labels.data if isinstance(labels, Tensor) else np.asarray(labels, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[1] != 2:
        raise ShapeError(f"examiner_bce_loss: expected [T,2] logits, got {logits.shape}")
    if q.shape != logits.shape:
        raise ShapeError(
            f"examiner_bce_loss: labels {q.shape} do not match logits {logits.shape}"
        )
    _check_one_hot(q)
    probs = softmax(logits, axis=1)
    q_const = Tensor(np.asarray(q, dtype=logits.dtype))
    return scale(mean(tsum(mul(q_const, log2(probs)), axis=1)), -1.0)


def cmc_loss(corr_examiner, corr_base) -> Tensor:
    """Entry-wise L2 (Frobenius) distance between the two correlation
    matrices. Accepts Tensors or CorrelationMatrix records."""
    a = corr_examiner.tensor if hasattr(corr_examiner, "tensor") else corr_examiner
    b = corr_base.tensor if hasattr(corr_base, "tensor") else corr_base
    if a.shape != b.shape:
        raise ShapeError(f"cmc_loss: shapes {a.shape} and {b.shape} differ")
    return frobenius_norm_diff(a, b)


def ac_loss(att_examiner: Tensor, att_base: Tensor) -> Tensor:
    """Per-image L2 distance between the two attention vectors [M,C],
    averaged over the batch so the weight is batch-size independent."""
    if att_examiner.shape != att_base.shape:
        raise ShapeError(
            f"ac_loss: shapes {att_examiner.shape} and {att_base.shape} differ"
        )
    diff = sub(att_examiner, att_base)
    per_image = sqrt(tsum(mul(diff, diff), axis=1))
    return mean(per_image)


def total_loss(im: Tensor, cmc: Tensor, ac: Tensor, weights: LossWeights) -> Tensor:
    """im + lambda1 * cmc + lambda2 * ac, with finiteness checks."""
    for name, term in (("im", im), ("cmc", cmc), ("ac", ac)):
        if not np.isfinite(term.data).all():
            raise ValueError(f"total_loss: non-finite {name} component")
    return add(add(im, scale(cmc, weights.lambda1)), scale(ac, weights.lambda2))


def source_ce_loss(logits: Tensor, labels) -> Tensor:
    """Supervised cross-entropy in bits for class-id labels."""
    y = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeError(f"source_ce_loss: expected [N,K] logits, got {logits.shape}")
    n, k = logits.shape
    if y.shape != (n,):
        raise ShapeError(f"source_ce_loss: labels shape {y.shape} != ({n},)")
    if y.size and (y.min() < 0 or y.max() >= k):
        bad = int(np.argmax((y < 0) | (y >= k)))
        raise ValueError(f"source_ce_loss: label {int(y[bad])} at row {bad} out of range [0,{k})")
    one_hot = np.zeros((n, k), dtype=logits.dtype)
    one_hot[np.arange(n), y] = 1.0
    probs = softmax(logits, axis=1)
    return scale(mean(tsum(mul(Tensor(one_hot), log2(probs)), axis=1)), -1.0)
