"""Training protocol: source pre-training, baseline adaptation, and the
collaborative adaptation of classifier plus examiner, with evaluation,
the ablation grid, and the feature-projection export.

Adaptation never reads target labels. Accuracy/purity reporting happens
through the dataset's audited evaluation accessor, outside the training
loop, so the audit counter proves the protocol: an adaptation run with
reporting disabled performs zero label reads.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data import DomainDataset
from .losses import (
    LossWeights,
    ac_loss,
    cmc_loss,
    examiner_bce_loss,
    im_loss,
    source_ce_loss,
    total_loss,
)
from .nets import BaseNetwork, ExaminerNetwork
from .pseudo import (
    ConfidenceRecord,
    augment_batch,
    construct_triplets,
    correlation_matrix_base,
    curriculum_select,
    examiner_correlation_from_features,
)
from .seeding import derive_rng
from .tensor import Tensor, no_grad

__all__ = [
    "VARIANTS",
    "AdaptationConfig",
    "RunReport",
    "EvalResult",
    "SGD",
    "cosine_lr",
    "pretrain_source",
    "pretrain_examiner_source",
    "train_examiner",
    "ExaminerStageStats",
    "adapt_shot",
    "adapt_cin",
    "run_adaptation",
    "evaluate",
    "ablation_run",
    "AblationResult",
    "export_feature_projection",
]

logger = logging.getLogger(__name__)

VARIANTS = ("source_only", "shot", "cin", "cin_pretrained")


class SGD:
    """Stochastic gradient descent with classical momentum."""

    def __init__(self, params, lr: float, momentum: float = 0.9):
        self.params = list(params)
        self.base_lr = float(lr)
        self.momentum = float(momentum)
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        lr = self.base_lr if lr is None else lr
        for p, v in zip(self.params, self._velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.data = p.data - lr * v


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """Cosine decay from base_lr toward 0 over the run."""
    if total_steps <= 1:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class AdaptationConfig:
    """Everything a run needs; flags mirror the CLI one-to-one."""

    variant: str = "cin"
    seed: int = 0
    batch_size: int = 32
    epochs_source: int = 15
    epochs_adapt: int = 6
    warmup_epochs: int = 2  # plain-baseline epochs before the networks couple
    lr_source: float = 0.03
    lr_adapt: float = 0.001
    lr_examiner: float = 0.03  # the examiner trains from scratch
    momentum: float = 0.9
    lambda1: float = 10.0
    lambda2: float = 10.0
    curriculum_stages: int = 0  # 0 -> collaborative epoch count
    triplets_per_batch: int = 0  # 0 -> batch_size
    examiner_epochs: int = 1  # refresh passes per curriculum stage
    examiner_init_steps: int = 500  # from-scratch steps at the first stage
    examiner_epochs_source: int = 8  # cin_pretrained pre-training passes
    examiner_guidance_scale: float = 0.1  # examiner lr factor for consistency updates
    enable_cmc: bool = True
    enable_ac: bool = True
    stop_grad_examiner: bool = False
    eq4_literal: bool = False
    rescale_cosine: bool = True
    symmetrize_examiner_corr: bool = False
    augment_rotation_deg: float = 15.0
    augment_noise_sigma: float = 0.05
    track_accuracy: bool = False  # per-epoch target evaluation (reporting only)

    def weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2)

    @property
    def collaborative_epochs(self) -> int:
        return max(self.epochs_adapt - self.warmup_epochs, 0)

    @property
    def stages(self) -> int:
        return self.curriculum_stages or max(self.collaborative_epochs, 1)

    @property
    def triplets(self) -> int:
        return self.triplets_per_batch or self.batch_size

    def consistency_switches(self) -> tuple[bool, bool]:
        """(use_cmc, use_ac); both forced off outside the cin variants."""
        if self.variant in ("source_only", "shot"):
            return False, False
        return self.enable_cmc, self.enable_ac

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.triplets_per_batch < 0 or self.triplets < 1:
            raise ValueError(f"triplets_per_batch must be >= 1, got {self.triplets_per_batch}")
        if self.epochs_source < 0 or self.epochs_adapt < 0 or self.warmup_epochs < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.curriculum_stages < 0:
            raise ValueError(f"curriculum_stages must be >= 0, got {self.curriculum_stages}")
        if self.variant in ("cin", "cin_pretrained") and self.epochs_adapt > 0:
            if self.collaborative_epochs < 1:
                raise ValueError(
                    f"variant {self.variant!r} needs at least one collaborative epoch: "
                    f"warmup_epochs={self.warmup_epochs} >= epochs_adapt={self.epochs_adapt}"
                )
        self.weights()  # raises on negative lambdas


@dataclass
class RunReport:
    """Numeric record of one run; serializes to JSON for the artifacts dir."""

    variant: str
    losses: dict[str, list[float]] = field(default_factory=dict)
    accuracy_trajectory: list[float] = field(default_factory=list)
    final_accuracy: float | None = None
    source_accuracy: float | None = None
    purity_per_stage: list[float] = field(default_factory=list)
    wall_time_s: float = 0.0
    config: dict = field(default_factory=dict)
    stage_selections: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "losses": self.losses,
            "accuracy_trajectory": self.accuracy_trajectory,
            "final_accuracy": self.final_accuracy,
            "source_accuracy": self.source_accuracy,
            "purity_per_stage": self.purity_per_stage,
            "wall_time_s": self.wall_time_s,
            "config": self.config,
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)


@dataclass
class EvalResult:
    accuracy: float
    per_class_accuracy: np.ndarray
    confusion: np.ndarray  # rows: true class, cols: predicted


@dataclass
class ExaminerStageStats:
    stage: int
    selected_count: int
    triplet_count: int
    mean_loss: float
    skipped: bool = False


def _batches(rng: np.random.Generator, n: int, m: int):
    """Shuffled index batches of exactly m (partial tail dropped)."""
    perm = rng.permutation(n)
    for i in range(n // m):
        yield perm[i * m : (i + 1) * m]


def _forward_all(net, images: np.ndarray, batch_size: int = 256):
    """Features and logits for a whole dataset, graph-free."""
    feats, logits = [], []
    with no_grad():
        for start in range(0, images.shape[0], batch_size):
            f, lg, _ = net.forward(Tensor(images[start : start + batch_size]))
            feats.append(f.data)
            logits.append(lg.data)
    return np.concatenate(feats), np.concatenate(logits)


def _softmax_np(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=1, keepdims=True)


def confidence_records(net: BaseNetwork, images: np.ndarray) -> tuple[list[ConfidenceRecord], np.ndarray]:
    """Entropy-in-bits confidence plus pseudo label for every sample."""
    _, logits = _forward_all(net, images)
    probs = _softmax_np(logits.astype(np.float64))
    entropy = -(probs * np.log2(np.maximum(probs, 1e-12))).sum(axis=1)
    pseudo = logits.argmax(axis=1).astype(np.intp)
    records = [
        ConfidenceRecord(i, float(entropy[i]), int(pseudo[i])) for i in range(len(pseudo))
    ]
    return records, pseudo


# -- phase 1: source pre-training -----------------------------------------


def pretrain_source(net: BaseNetwork, source: DomainDataset, cfg: AdaptationConfig):
    """Supervised training on labeled source data.

    A fixed tenth of the samples (every index = 9 mod 10) is held out;
    returns (net, held-out accuracy).
    """
    cfg.validate()
    labels = source.labels  # raises if someone passes a gated dataset
    n = len(source)
    test_mask = np.arange(n) % 10 == 9
    train_idx = np.flatnonzero(~test_mask)
    net.frozen_head = False
    for p in net.parameters().values():
        p.requires_grad = True

    opt = SGD(net.trainable_parameters(), cfg.lr_source, cfg.momentum)
    rng = derive_rng(cfg.seed, "pretrain-batches")
    steps_per_epoch = len(train_idx) // cfg.batch_size
    total_steps = max(cfg.epochs_source * steps_per_epoch, 1)
    step = 0
    for epoch in range(cfg.epochs_source):
        for batch in _batches(rng, len(train_idx), cfg.batch_size):
            idx = train_idx[batch]
            _, logits, _ = net.forward(Tensor(source.images[idx]))
            loss = source_ce_loss(logits, labels[idx])
            if not np.isfinite(loss.data):
                raise RuntimeError(f"pretrain_source diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step(cosine_lr(cfg.lr_source, step, total_steps))
            step += 1

    test_idx = np.flatnonzero(test_mask)
    _, logits = _forward_all(net, source.images[test_idx])
    accuracy = float((logits.argmax(axis=1) == labels[test_idx]).mean())
    return net, accuracy


def pretrain_examiner_source(
    examiner: ExaminerNetwork, source: DomainDataset, cfg: AdaptationConfig
) -> ExaminerNetwork:
    """Train the examiner on true source labels before transfer."""
    labels = source.labels
    rng = derive_rng(cfg.seed, "examiner-source")
    opt = SGD(examiner.trainable_parameters(), cfg.lr_source, cfg.momentum)
    all_idx = np.arange(len(source), dtype=np.intp)
    steps_per_epoch = max(len(source) // cfg.batch_size, 1)
    total = max(cfg.examiner_epochs_source * steps_per_epoch, 1)
    step = 0
    for _ in range(cfg.examiner_epochs_source):
        triplets = construct_triplets(
            all_idx, labels, cfg.triplets * steps_per_epoch, rng, cfg.eq4_literal
        )
        for start in range(0, len(triplets), cfg.triplets):
            chunk = triplets.triplets[start : start + cfg.triplets]
            loss = _examiner_step(examiner, source.images, chunk, opt,
                                  cosine_lr(cfg.lr_source, step, total))
            step += 1
    return examiner


def _one_hot_pairs(labels_01: np.ndarray) -> np.ndarray:
    q = np.zeros((len(labels_01), 2), dtype=np.float32)
    q[np.arange(len(labels_01)), labels_01] = 1.0
    return q


def _examiner_step(examiner, images, triplet_chunk, opt, lr) -> float:
    anchors = Tensor(images[[t.a for t in triplet_chunk]])
    bs = Tensor(images[[t.b for t in triplet_chunk]])
    cs = Tensor(images[[t.c for t in triplet_chunk]])
    logits, _ = examiner.forward_triplets(anchors, bs, cs)
    q = _one_hot_pairs(np.array([t.label for t in triplet_chunk]))
    loss = examiner_bce_loss(logits, q)
    opt.zero_grad()
    loss.backward()
    opt.step(lr)
    return float(loss.data)


# -- phase 2/3: adaptation -------------------------------------------------


def train_examiner(
    examiner: ExaminerNetwork,
    base: BaseNetwork,
    target: DomainDataset,
    cfg: AdaptationConfig,
    stage: int,
    *,
    steps: int | None = None,
    optimizer: SGD | None = None,
    rng: np.random.Generator | None = None,
    report: RunReport | None = None,
) -> ExaminerStageStats:
    """One curriculum stage of examiner training on pseudo labels.

    The confident half (growing with the stage) of the target pool is
    pseudo-labeled by the base network; the examiner minimizes the
    ordering cross-entropy over fresh triplets drawn from that pool.
    ``steps`` overrides the optimizer-step budget (default: one pass
    worth of batches per ``examiner_epochs``). When the pool lacks
    class diversity the stage is skipped with a warning.
    """
    rng = rng if rng is not None else derive_rng(cfg.seed, "examiner-stage", stage)
    optimizer = optimizer or SGD(examiner.trainable_parameters(), cfg.lr_examiner, cfg.momentum)

    records, pseudo = confidence_records(base, target.images)
    selected = curriculum_select(records, stage, cfg.stages)
    if report is not None:
        report.stage_selections.append((selected.copy(), pseudo[selected].copy()))

    if steps is None:
        steps = max(len(selected) // cfg.batch_size, 1) * cfg.examiner_epochs
    try:
        triplets = construct_triplets(selected, pseudo, cfg.triplets * steps, rng, cfg.eq4_literal)
    except ValueError as exc:
        logger.warning("examiner stage %d skipped: %s", stage, exc)
        return ExaminerStageStats(stage, len(selected), 0, float("nan"), skipped=True)

    losses = []
    for start in range(0, len(triplets), cfg.triplets):
        chunk = triplets.triplets[start : start + cfg.triplets]
        losses.append(
            _examiner_step(examiner, target.images, chunk, optimizer, cfg.lr_examiner)
        )
    return ExaminerStageStats(stage, len(selected), len(triplets), float(np.mean(losses)))


def adapt_cin(
    base: BaseNetwork,
    examiner: ExaminerNetwork | None,
    target: DomainDataset,
    cfg: AdaptationConfig,
) -> tuple[BaseNetwork, ExaminerNetwork | None, RunReport]:
    """Collaborative adaptation on unlabeled target data.

    The first ``warmup_epochs`` adapt the base alone (information
    maximization, head fixed), so the pseudo labels the examiner will
    consume come from an at least partially adapted classifier. Each
    collaborative epoch then (i) trains the examiner for one curriculum
    stage on pseudo-labeled triplets and (ii) per mini-batch minimizes
    the combined objective, whose consistency terms flow into both
    networks (one-sided if ``stop_grad_examiner``). The class head
    never moves. With both consistency switches off every epoch is a
    warmup epoch and the loop is the baseline: same batches, same
    arithmetic, bit-identical trajectory.
    """
    cfg.validate()
    use_cmc, use_ac = cfg.consistency_switches()
    use_examiner = examiner is not None and (use_cmc or use_ac)
    weights = cfg.weights()

    base.frozen_head = True
    base.head_w.requires_grad = False  # values still feed the graph
    base.head_b.requires_grad = False
    head_before = base.head_snapshot()

    opt_base = SGD(base.trainable_parameters(), cfg.lr_adapt, cfg.momentum)
    # separate momentum state for the ordering anchor and for guidance,
    # so consistency gradients cannot bleed into the anchor's velocity
    opt_exam_anchor = opt_exam_guide = None
    if use_examiner:
        opt_exam_anchor = SGD(examiner.trainable_parameters(), cfg.lr_examiner, cfg.momentum)
        opt_exam_guide = SGD(examiner.trainable_parameters(), cfg.lr_adapt, cfg.momentum)

    n, m = len(target), cfg.batch_size
    steps_per_epoch = n // m
    if steps_per_epoch < 1:
        raise ValueError(f"target size {n} smaller than one batch of {m}")
    total_steps = cfg.epochs_adapt * steps_per_epoch

    batch_rng = derive_rng(cfg.seed, "adapt-batches")
    augment_rng = derive_rng(cfg.seed, "adapt-augment")

    report = RunReport(variant=cfg.variant, config=asdict(cfg))
    series: dict[str, list[float]] = {k: [] for k in ("im", "en", "cmc", "ac", "total")}

    warmup = min(cfg.warmup_epochs, cfg.epochs_adapt) if use_examiner else cfg.epochs_adapt

    started = time.perf_counter()
    step = 0
    for epoch in range(cfg.epochs_adapt):
        collaborating = use_examiner and epoch >= warmup
        en_mean = 0.0
        if collaborating:
            stage = min(epoch - warmup, cfg.stages - 1)
            # a fresh examiner needs a long first stage to leave the
            # symmetric 50/50 plateau; a pre-trained one only refreshes
            init = epoch == warmup and cfg.variant != "cin_pretrained"
            stats = train_examiner(
                examiner,
                base,
                target,
                cfg,
                stage,
                steps=cfg.examiner_init_steps if init else None,
                optimizer=opt_exam_anchor,
                report=report,
            )
            en_mean = 0.0 if stats.skipped else stats.mean_loss

        epoch_terms = {k: [] for k in ("im", "cmc", "ac", "total")}
        for batch in _batches(batch_rng, n, m):
            images = target.images[batch]
            x = Tensor(images)
            feats, logits, att_phi = base.forward(x)
            im = im_loss(logits)

            if collaborating:
                feats_gam, att_gam = examiner.encode(x)
                zero = Tensor(np.zeros((), dtype=im.dtype))
                cmc = zero
                ac = zero
                if use_cmc:
                    augmented = augment_batch(
                        images,
                        augment_rng,
                        rotation_deg=cfg.augment_rotation_deg,
                        noise_sigma=cfg.augment_noise_sigma,
                    )
                    aug_feats, _ = examiner.encode(Tensor(augmented))
                    corr_gam = examiner_correlation_from_features(
                        examiner, feats_gam, aug_feats,
                        symmetrize=cfg.symmetrize_examiner_corr,
                    )
                    corr_phi = correlation_matrix_base(feats, cfg.rescale_cosine)
                    if cfg.stop_grad_examiner:
                        corr_gam = corr_gam.detach()
                    cmc = cmc_loss(corr_gam, corr_phi)
                if use_ac:
                    gam_side = att_gam.detach() if cfg.stop_grad_examiner else att_gam
                    ac = ac_loss(gam_side, att_phi)
                loss = total_loss(im, cmc, ac, weights)
                epoch_terms["cmc"].append(float(cmc.data))
                epoch_terms["ac"].append(float(ac.data))
            else:
                loss = im
                epoch_terms["cmc"].append(0.0)
                epoch_terms["ac"].append(0.0)

            if not np.isfinite(loss.data):
                raise RuntimeError(
                    f"adaptation diverged at epoch {epoch}: "
                    f"im={float(im.data):.4g} "
                    f"cmc={epoch_terms['cmc'][-1]:.4g} ac={epoch_terms['ac'][-1]:.4g}"
                )

            lr = cosine_lr(cfg.lr_adapt, step, total_steps)
            opt_base.zero_grad()
            if opt_exam_guide is not None:
                opt_exam_guide.zero_grad()
            loss.backward()
            opt_base.step(lr)
            if opt_exam_guide is not None and not cfg.stop_grad_examiner:
                # damped so the per-epoch ordering anchor outweighs drift
                opt_exam_guide.step(lr * cfg.examiner_guidance_scale)
            step += 1

            epoch_terms["im"].append(float(im.data))
            epoch_terms["total"].append(float(loss.data))

        for key in ("im", "cmc", "ac", "total"):
            series[key].append(float(np.mean(epoch_terms[key])))
        series["en"].append(en_mean)

        _check_head_frozen(base, head_before, f"epoch {epoch}")
        if cfg.track_accuracy:
            report.accuracy_trajectory.append(evaluate(base, target).accuracy)

    report.losses = series
    report.wall_time_s = time.perf_counter() - started
    _check_head_frozen(base, head_before, "end of run")
    return base, examiner, report


def _check_head_frozen(base: BaseNetwork, snapshot: dict[str, np.ndarray], where: str) -> None:
    current = base.head_snapshot()
    for name, before in snapshot.items():
        if not np.array_equal(before, current[name]):
            raise RuntimeError(f"frozen-head violation detected at {where}: {name} changed")


def adapt_shot(
    base: BaseNetwork, target: DomainDataset, cfg: AdaptationConfig
) -> tuple[BaseNetwork, RunReport]:
    """Baseline adaptation: information maximization only, head fixed.

    Implemented as the degenerate collaborative loop (no examiner, no
    consistency terms), so the two paths cannot drift apart.
    """
    shot_cfg = replace(cfg, variant="shot", enable_cmc=False, enable_ac=False)
    base, _, report = adapt_cin(base, None, target, shot_cfg)
    return base, report


def run_adaptation(
    base: BaseNetwork,
    target: DomainDataset,
    cfg: AdaptationConfig,
    *,
    examiner: ExaminerNetwork | None = None,
    source: DomainDataset | None = None,
) -> tuple[BaseNetwork, ExaminerNetwork | None, RunReport]:
    """Dispatch a full adaptation for any variant and fill the report.

    Evaluation metrics (final accuracy, per-stage pseudo-label purity)
    are computed after training through the audited accessor.
    """
    cfg.validate()
    if cfg.variant == "source_only":
        report = RunReport(variant=cfg.variant, config=asdict(cfg))
        report.final_accuracy = evaluate(base, target).accuracy
        return base, None, report

    if cfg.variant == "shot":
        base, report = adapt_shot(base, target, cfg)
        examiner = None
    else:
        if examiner is None:
            examiner = ExaminerNetwork.from_config(
                {**base.arch_config(), "hidden_dim": 256}, seed=cfg.seed, dtype=base.dtype
            )
        if cfg.variant == "cin_pretrained":
            if source is None:
                raise ValueError("cin_pretrained needs the labeled source dataset")
            pretrain_examiner_source(examiner, source, cfg)
        base, examiner, report = adapt_cin(base, examiner, target, cfg)

    report.final_accuracy = evaluate(base, target).accuracy
    if report.stage_selections:
        truth = target.eval_labels()
        report.purity_per_stage = [
            float((pseudo == truth[idx]).mean()) for idx, pseudo in report.stage_selections
        ]
    return base, examiner, report


# -- evaluation and exports -------------------------------------------------


def evaluate(net: BaseNetwork, ds: DomainDataset, batch_size: int = 256) -> EvalResult:
    """Accuracy, per-class accuracy, and confusion matrix (rows: truth)."""
    labels = ds.eval_labels()
    _, logits = _forward_all(net, ds.images, batch_size)
    preds = logits.argmax(axis=1)
    k = ds.num_classes
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (labels, preds), 1)
    row_sums = confusion.sum(axis=1)
    per_class = np.divide(
        np.diag(confusion), row_sums, out=np.zeros(k, dtype=np.float64), where=row_sums > 0
    )
    return EvalResult(float((preds == labels).mean()), per_class, confusion)


def export_feature_projection(net: BaseNetwork, ds: DomainDataset, path) -> np.ndarray:
    """Top-2 principal components of the features, as a CSV for plotting.

    Sign convention: the largest-magnitude loading of each component is
    positive, so repeated exports are identical.
    """
    feats, _ = _forward_all(net, ds.images)
    centered = (feats - feats.mean(axis=0)).astype(np.float64)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    components = vt[:2].copy()
    for row in components:
        j = int(np.argmax(np.abs(row)))
        if row[j] < 0:
            row *= -1.0
    coords = centered @ components.T
    labels = ds.eval_labels()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "pc1", "pc2", "label"])
        for i in range(coords.shape[0]):
            writer.writerow([i, f"{coords[i, 0]:.8g}", f"{coords[i, 1]:.8g}", int(labels[i])])
    return coords


# -- ablation grid ----------------------------------------------------------

_ABLATION_VARIANTS = (
    ("full", {"variant": "cin", "enable_cmc": True, "enable_ac": True}),
    ("wo_ac", {"variant": "cin", "enable_cmc": True, "enable_ac": False}),
    ("wo_cmc", {"variant": "cin", "enable_cmc": False, "enable_ac": True}),
    ("baseline", {"variant": "shot", "enable_cmc": False, "enable_ac": False}),
)


@dataclass
class AblationResult:
    rows: list[dict]  # one per variant: name, mean, std, per-seed accuracies
    source_only: dict[int, float]  # per-seed target accuracy before adaptation
    source_test: dict[int, float]  # per-seed held-out source accuracy
    seeds: list[int]

    def accuracies(self, name: str) -> list[float]:
        for row in self.rows:
            if row["name"] == name:
                return row["per_seed"]
        raise KeyError(name)

    def mean(self, name: str) -> float:
        for row in self.rows:
            if row["name"] == name:
                return row["mean"]
        raise KeyError(name)

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["method", "mean_accuracy", "std_accuracy", "n_seeds"])
            for row in self.rows:
                writer.writerow(
                    [row["name"], f"{row['mean']:.6f}", f"{row['std']:.6f}", len(row["per_seed"])]
                )

    def save_json(self, path) -> None:
        payload = {
            "rows": self.rows,
            "source_only": {str(k): v for k, v in self.source_only.items()},
            "source_test": {str(k): v for k, v in self.source_test.items()},
            "seeds": self.seeds,
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)


def ablation_run(
    source: DomainDataset,
    target: DomainDataset,
    cfg: AdaptationConfig,
    seeds,
    out_dir=None,
) -> AblationResult:
    """Component-contribution grid: full / w/o AC / w/o CMC / baseline.

    All variants of one seed start from the same pre-trained classifier,
    so comparisons are paired. Writes ``ablation.csv`` (the four-row
    summary) and ``ablation.json`` (per-seed detail) when ``out_dir``
    is given.
    """
    seeds = list(seeds)
    if len(seeds) < 3:
        raise ValueError(f"ablation needs at least 3 seeds, got {len(seeds)}")

    per_variant: dict[str, list[float]] = {name: [] for name, _ in _ABLATION_VARIANTS}
    source_only: dict[int, float] = {}
    source_test: dict[int, float] = {}

    for seed in seeds:
        seed_cfg = replace(cfg, seed=seed)
        base = BaseNetwork(source.num_classes, seed=seed)
        base, src_acc = pretrain_source(base, source, seed_cfg)
        source_test[seed] = src_acc
        source_only[seed] = evaluate(base, target).accuracy
        pretrained = base.state_dict()

        for name, overrides in _ABLATION_VARIANTS:
            variant_cfg = replace(seed_cfg, **overrides)
            net = BaseNetwork(source.num_classes, seed=seed)
            net.load_state_dict(pretrained)
            _, _, report = run_adaptation(net, target, variant_cfg)
            per_variant[name].append(report.final_accuracy)
            logger.info(
                "ablation seed=%d %s: accuracy=%.4f", seed, name, report.final_accuracy
            )

    rows = [
        {
            "name": name,
            "mean": float(np.mean(accs)),
            "std": float(np.std(accs)),
            "per_seed": [float(a) for a in accs],
        }
        for name, accs in per_variant.items()
    ]
    result = AblationResult(rows, source_only, source_test, seeds)
    if out_dir is not None:
        import os

        os.makedirs(out_dir, exist_ok=True)
        result.save_csv(os.path.join(out_dir, "ablation.csv"))
        result.save_json(os.path.join(out_dir, "ablation.json"))
    return result
