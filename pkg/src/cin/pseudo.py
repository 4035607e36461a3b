"""Confidence scoring, curriculum sampling, triplet construction, and
the two correlation matrices that couple the networks.

The examiner has no labels of its own: pseudo labels come from the
adapted classifier, samples are admitted into its training pool from
the most confident (lowest entropy) half upward, and each training
triplet carries a label derived purely from those pseudo labels.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .tensor import (
    Tensor,
    add,
    concat,
    div,
    gather_rows,
    matmul,
    mul,
    reshape,
    scale,
    softmax,
    sqrt,
    transpose,
    tsum,
)

__all__ = [
    "ConfidenceRecord",
    "Triplet",
    "TripletSet",
    "CorrelationMatrix",
    "entropy_bits",
    "curriculum_fraction",
    "curriculum_select",
    "assign_pseudo_labels",
    "construct_triplets",
    "triplet_label",
    "correlation_matrix_base",
    "correlation_matrix_examiner",
    "examiner_correlation_from_features",
    "augment",
    "augment_batch",
]

_LOG_EPS = 1e-12
_NORM_EPS = 1e-12


@dataclass
class ConfidenceRecord:
    """Per-sample prediction confidence: entropy in bits plus the
    pseudo label, keyed by the sample's index in the dataset."""

    sample_index: int
    entropy: float
    pseudo_label: int


@dataclass(frozen=True)
class Triplet:
    a: int  # anchor index
    b: int
    c: int
    label: int  # 0: b shares the anchor's class, 1 depends on the rule set


@dataclass
class TripletSet:
    triplets: list[Triplet] = field(default_factory=list)
    eq4_literal: bool = False

    def __len__(self):
        return len(self.triplets)

    def __iter__(self):
        return iter(self.triplets)

    def to_csv(self, path) -> None:
        """Audit export with columns (a, b, c, label)."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["a", "b", "c", "label"])
            for t in self.triplets:
                writer.writerow([t.a, t.b, t.c, t.label])


@dataclass
class CorrelationMatrix:
    """Pairwise similarity record for one mini-batch.

    ``tensor`` stays wired into the autodiff graph for the consistency
    loss; ``values`` is a clipped snapshot for reporting.
    """

    tensor: Tensor
    source_network: str  # "base" | "examiner"

    @property
    def values(self) -> np.ndarray:
        return np.clip(self.tensor.data, 0.0, 1.0)


def entropy_bits(softmax_row) -> float:
    """Entropy in bits of one softmax output row."""
    row = softmax_row.data if isinstance(softmax_row, Tensor) else np.asarray(softmax_row)
    row = np.asarray(row, dtype=np.float64).reshape(-1)
    if (row < 0).any() or abs(float(row.sum()) - 1.0) > 1e-6:
        raise ValueError(
            f"entropy_bits: row is not a distribution (sum={float(row.sum()):.8f})"
        )
    return float(-(row * np.log2(np.maximum(row, _LOG_EPS))).sum())


def curriculum_fraction(stage: int, total_stages: int) -> float:
    """Fraction of the target pool admitted at ``stage``: one half at
    stage 0, growing linearly to the full set at the final stage."""
    if total_stages < 1:
        raise ValueError(f"curriculum_fraction: total_stages must be >= 1, got {total_stages}")
    if not 0 <= stage < total_stages:
        raise ValueError(
            f"curriculum_fraction: stage {stage} outside [0, {total_stages})"
        )
    return 0.5 + 0.5 * stage / max(total_stages - 1, 1)


def curriculum_select(
    records: list[ConfidenceRecord], stage: int, total_stages: int
) -> np.ndarray:
    """Indices of the lowest-entropy fraction of samples at this stage.

    Ties break by sample index ascending; the stage-0 pool is exactly
    ceil(N/2) and the final stage admits everything, so pools are
    nested as the stage grows.
    """
    if not records:
        raise ValueError("curriculum_select: no confidence records")
    frac = curriculum_fraction(stage, total_stages)
    count = math.ceil(frac * len(records))
    order = sorted(records, key=lambda r: (r.entropy, r.sample_index))
    return np.array([r.sample_index for r in order[:count]], dtype=np.intp)


def assign_pseudo_labels(logits) -> np.ndarray:
    """Row-wise argmax class ids; ties go to the lowest class id."""
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise ValueError(f"assign_pseudo_labels: expected [N,K] logits, got {arr.shape}")
    return arr.argmax(axis=1).astype(np.intp)


def triplet_label(anchor_cls: int, b_cls: int, c_cls: int, eq4_literal: bool = False) -> int | None:
    """Label of a candidate triplet under the active rule set, or None
    when the combination is not a training case.

    Default rules: 0 when b shares the anchor's class and c does not;
    1 when c shares it and b does not. The ``eq4_literal`` variant
    instead assigns 1 when both candidates share the anchor's class
    (kept selectable for comparison; it ignores c's dissimilarity).
    """
    b_same = b_cls == anchor_cls
    c_same = c_cls == anchor_cls
    if eq4_literal:
        if b_same and not c_same:
            return 0
        if b_same and c_same:
            return 1
        return None
    if b_same and not c_same:
        return 0
    if c_same and not b_same:
        return 1
    return None


def construct_triplets(
    selected,
    pseudo_labels,
    count: int,
    rng: np.random.Generator,
    eq4_literal: bool = False,
) -> TripletSet:
    """Draw ``count`` labeled triplets from the selected sample pool.

    Labels alternate 0/1 for class balance. All three indices are
    distinct, and every emitted triplet satisfies the active labeling
    rule under the pseudo labels supplied here.
    """
    selected = np.asarray(selected, dtype=np.intp)
    pseudo_labels = np.asarray(pseudo_labels)
    if count < 1:
        raise ValueError(f"construct_triplets: count must be >= 1, got {count}")

    by_class: dict[int, np.ndarray] = {}
    for cls in np.unique(pseudo_labels[selected]):
        by_class[int(cls)] = selected[pseudo_labels[selected] == cls]
    histogram = {cls: len(idx) for cls, idx in sorted(by_class.items())}

    pair_classes = [cls for cls, idx in by_class.items() if len(idx) >= 2]
    trio_classes = [cls for cls, idx in by_class.items() if len(idx) >= 3]
    if len(by_class) < 2 or not pair_classes:
        raise ValueError(
            "construct_triplets: need at least 2 classes and one class with >= 2 "
            f"members in the selected pool; class histogram: {histogram}"
        )
    if eq4_literal and not trio_classes:
        raise ValueError(
            "construct_triplets: literal rule needs a class with >= 3 members; "
            f"class histogram: {histogram}"
        )

    classes = sorted(by_class)
    triplets: list[Triplet] = []
    while len(triplets) < count:
        want = len(triplets) % 2  # alternate labels for balance
        if want == 1 and eq4_literal:
            cls = int(rng.choice(trio_classes))
            a, b, c = rng.choice(by_class[cls], size=3, replace=False)
        else:
            cls = int(rng.choice(pair_classes))
            others = [o for o in classes if o != cls and len(by_class[o]) >= 1]
            other = int(rng.choice(others))
            a, same = rng.choice(by_class[cls], size=2, replace=False)
            diff = int(rng.choice(by_class[other]))
            b, c = (same, diff) if want == 0 else (diff, same)
        label = triplet_label(
            int(pseudo_labels[a]), int(pseudo_labels[b]), int(pseudo_labels[c]), eq4_literal
        )
        assert label == want, "triplet construction violated its own rule"
        triplets.append(Triplet(int(a), int(b), int(c), label))
    return TripletSet(triplets, eq4_literal=eq4_literal)


def correlation_matrix_base(features: Tensor, rescale_cosine: bool = True) -> CorrelationMatrix:
    """Pairwise cosine similarity of feature rows [M,d].

    With ``rescale_cosine`` the entries map through (1+cos)/2 onto
    [0,1], the range of the examiner's probabilities.
    """
    m = features.shape[0]
    sumsq = tsum(mul(features, features), axis=1)
    norms = add(sqrt(sumsq), Tensor(np.full(m, _NORM_EPS, dtype=features.dtype)))
    unit = div(features, reshape(norms, (m, 1)))
    corr = matmul(unit, transpose(unit))
    if rescale_cosine:
        corr = scale(add(corr, Tensor(np.ones((m, m), dtype=features.dtype))), 0.5)
    return CorrelationMatrix(corr, "base")


def examiner_correlation_from_features(
    net, feats: Tensor, aug_feats: Tensor, symmetrize: bool = False
) -> Tensor:
    """[M,M] matrix of P(image b closer to image a than a's augmentation),
    built from one encoding of the batch and one of its augmentation.

    The M*M fused triplet rows share those encodings through row
    gathers, so gradients reach the encoder without M*M encoder passes.
    """
    m = feats.shape[0]
    anchor_idx = np.repeat(np.arange(m), m)
    cand_idx = np.tile(np.arange(m), m)
    fused = concat(
        [
            gather_rows(feats, anchor_idx),
            gather_rows(feats, cand_idx),
            gather_rows(aug_feats, anchor_idx),
        ],
        axis=1,
    )
    probs = softmax(net.head(fused), axis=1)
    first_col = Tensor(np.array([[1.0], [0.0]], dtype=probs.dtype))
    corr = reshape(matmul(probs, first_col), (m, m))
    if symmetrize:
        corr = scale(add(corr, transpose(corr)), 0.5)
    return corr


def correlation_matrix_examiner(
    net,
    batch: np.ndarray,
    rng: np.random.Generator,
    *,
    rotation_deg: float = 15.0,
    noise_sigma: float = 0.05,
    symmetrize: bool = False,
) -> CorrelationMatrix:
    """Examiner-derived similarity for a batch of M images.

    Entry [a,b] is the probability the examiner assigns to "image b is
    closer to image a than a's own augmentation is".
    """
    m = batch.shape[0]
    if m < 2:
        raise ValueError(f"correlation_matrix_examiner: batch size {m} < 2")
    augmented = augment_batch(batch, rng, rotation_deg=rotation_deg, noise_sigma=noise_sigma)
    feats, _ = net.encode(Tensor(batch))
    aug_feats, _ = net.encode(Tensor(augmented))
    corr = examiner_correlation_from_features(net, feats, aug_feats, symmetrize=symmetrize)
    return CorrelationMatrix(corr, "examiner")


def augment(
    image: np.ndarray,
    rng: np.random.Generator,
    *,
    rotation_deg: float = 15.0,
    noise_sigma: float = 0.05,
) -> np.ndarray:
    """Mild augmentation: nearest-neighbor rotation drawn uniformly from
    [-rotation_deg, +rotation_deg] plus additive Gaussian noise, clipped
    back to [0,1]. Both knobs at zero return the input unchanged."""
    img = np.asarray(image)
    if img.ndim != 3:
        raise ValueError(f"augment: expected a [C,H,W] image, got {img.shape}")
    out = img
    if rotation_deg > 0:
        theta = float(rng.uniform(-rotation_deg, rotation_deg))
        out = np.stack(
            [
                ndimage.rotate(ch, theta, reshape=False, order=0, mode="constant", cval=0.0)
                for ch in out
            ]
        )
    if noise_sigma > 0:
        out = out + rng.normal(0.0, noise_sigma, size=out.shape)
    if rotation_deg > 0 or noise_sigma > 0:
        out = np.clip(out, 0.0, 1.0).astype(img.dtype)
    return out


def augment_batch(
    batch: np.ndarray,
    rng: np.random.Generator,
    *,
    rotation_deg: float = 15.0,
    noise_sigma: float = 0.05,
) -> np.ndarray:
    """Apply :func:`augment` to each image of a [M,C,H,W] batch."""
    return np.stack(
        [
            augment(img, rng, rotation_deg=rotation_deg, noise_sigma=noise_sigma)
            for img in batch
        ]
    )
