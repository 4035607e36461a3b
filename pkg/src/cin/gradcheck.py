"""Finite-difference verification of every differentiable operation and
every loss, at seeded random points in float64.

Used by the ``grad-check`` CLI command and the acceptance suite. Inputs
are kept away from non-differentiable kinks (relu at 0, the log clamp,
sqrt at 0) so central differences are trustworthy.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import losses, tensor
from .losses import LossWeights
from .nets import BaseNetwork, ExaminerNetwork
from .pseudo import correlation_matrix_base, examiner_correlation_from_features
from .tensor import Tensor, grad_check

__all__ = ["gradient_suite", "DEFAULT_POINTS", "TOLERANCE"]

DEFAULT_POINTS = 10
TOLERANCE = 1e-4
END_TO_END_TOLERANCE = 1e-3


def _away_from_zero(rng, shape, margin=0.2):
    x = rng.standard_normal(shape)
    return np.sign(x) * (margin + np.abs(x))


def _positive(rng, shape, margin=0.3):
    return margin + np.abs(rng.standard_normal(shape))


def _projector(rng, shape):
    r = Tensor(rng.standard_normal(shape))

    def scalarize(t):
        return tensor.tsum(tensor.mul(t, r))

    return scalarize


def _op_cases(rng) -> dict[str, tuple[Callable, np.ndarray]]:
    """One (f, x0) pair per differentiable input of each op."""
    cases: dict[str, tuple[Callable, np.ndarray]] = {}

    a0 = rng.standard_normal((2, 3))
    b0 = rng.standard_normal((3, 4))
    pm = _projector(rng, (2, 4))
    cases["matmul/a"] = (lambda x: pm(tensor.matmul(x, Tensor(b0))), a0)
    cases["matmul/b"] = (lambda x: pm(tensor.matmul(Tensor(a0), x)), b0)

    e0 = rng.standard_normal((3, 4))
    e1 = rng.standard_normal((3, 4))
    pe = _projector(rng, (3, 4))
    cases["add"] = (lambda x: pe(tensor.add(x, Tensor(e1))), e0)
    cases["add/broadcast"] = (
        lambda x: pe(tensor.add(Tensor(e0), tensor.reshape(x, (1, 4)))),
        rng.standard_normal(4),
    )
    cases["sub"] = (lambda x: pe(tensor.sub(x, Tensor(e1))), e0)
    cases["mul"] = (lambda x: pe(tensor.mul(x, Tensor(e1))), e0)
    cases["div"] = (
        lambda x: pe(tensor.div(Tensor(e0), x)),
        _away_from_zero(rng, (3, 4), margin=0.5),
    )
    cases["scale"] = (lambda x: pe(tensor.scale(x, -2.5)), e0)

    cases["relu"] = (lambda x: pe(tensor.relu(x)), _away_from_zero(rng, (3, 4)))
    cases["sigmoid"] = (lambda x: pe(tensor.sigmoid(x)), e0)
    cases["softmax"] = (lambda x: pe(tensor.softmax(x, axis=1)), e0)
    cases["log2"] = (lambda x: pe(tensor.log2(x)), _positive(rng, (3, 4)))
    cases["sqrt"] = (lambda x: pe(tensor.sqrt(x)), _positive(rng, (3, 4)))

    cases["sum/all"] = (lambda x: tensor.tsum(x), e0)
    p3 = _projector(rng, (3,))
    cases["sum/axis"] = (lambda x: p3(tensor.tsum(x, axis=1)), e0)
    cases["mean/all"] = (lambda x: tensor.mean(x), e0)
    p4 = _projector(rng, (4,))
    cases["mean/axis"] = (lambda x: p4(tensor.mean(x, axis=0)), e0)
    cases["l2_norm"] = (lambda x: tensor.l2_norm(x), _away_from_zero(rng, (3, 4)))
    cases["frobenius_norm_diff"] = (
        lambda x: tensor.frobenius_norm_diff(x, Tensor(e1)),
        e0 + 1.0,
    )

    pt = _projector(rng, (4, 3))
    cases["transpose"] = (lambda x: pt(tensor.transpose(x)), e0)
    pr = _projector(rng, (12,))
    cases["reshape"] = (lambda x: pr(tensor.reshape(x, (12,))), e0)
    pc = _projector(rng, (3, 8))
    cases["concat"] = (
        lambda x: pc(tensor.concat([x, Tensor(e1)], axis=1)),
        e0,
    )
    idx = rng.integers(0, 3, size=6)
    pg = _projector(rng, (6, 4))
    cases["gather_rows"] = (lambda x: pg(tensor.gather_rows(x, idx)), e0)

    x4 = rng.standard_normal((2, 2, 5, 5))
    w4 = rng.standard_normal((3, 2, 3, 3)) * 0.5
    pcv = _projector(rng, (2, 3, 3, 3))
    cases["conv2d/x"] = (lambda x: pcv(tensor.conv2d(x, Tensor(w4), stride=2, pad=1)), x4)
    cases["conv2d/w"] = (lambda x: pcv(tensor.conv2d(Tensor(x4), x, stride=2, pad=1)), w4)
    pgap = _projector(rng, (2, 2))
    cases["global_avg_pool"] = (lambda x: pgap(tensor.global_avg_pool(x)), x4)

    d0 = rng.standard_normal((3, 6))
    k0 = rng.standard_normal(3)
    pcd = _projector(rng, (3, 6))
    cases["conv1d_channels/x"] = (lambda x: pcd(tensor.conv1d_channels(x, Tensor(k0))), d0)
    cases["conv1d_channels/w"] = (lambda x: pcd(tensor.conv1d_channels(Tensor(d0), x)), k0)

    return cases


def _loss_cases(rng) -> dict[str, tuple[Callable, np.ndarray]]:
    cases: dict[str, tuple[Callable, np.ndarray]] = {}

    cases["im_loss"] = (lambda x: losses.im_loss(x), rng.standard_normal((4, 3)))

    q = np.zeros((5, 2))
    q[np.arange(5), rng.integers(0, 2, size=5)] = 1.0
    cases["examiner_bce_loss"] = (
        lambda x: losses.examiner_bce_loss(x, q),
        rng.standard_normal((5, 2)),
    )

    c1 = rng.random((4, 4))
    cases["cmc_loss"] = (lambda x: losses.cmc_loss(x, Tensor(c1)), rng.random((4, 4)) + 0.05)

    a1 = rng.random((4, 6))
    cases["ac_loss"] = (lambda x: losses.ac_loss(x, Tensor(a1)), rng.random((4, 6)) + 0.05)

    w = LossWeights(10.0, 10.0)
    masks = [Tensor(np.eye(3)[i]) for i in range(3)]

    def total_from_vec(x):
        im, cmc, ac = (tensor.tsum(tensor.mul(x, m)) for m in masks)
        return losses.total_loss(im, cmc, ac, w)

    cases["total_loss"] = (total_from_vec, rng.random(3) + 0.1)

    y = rng.integers(0, 3, size=4)
    cases["source_ce_loss"] = (
        lambda x: losses.source_ce_loss(x, y),
        rng.standard_normal((4, 3)),
    )

    pcorr = _projector(rng, (4, 4))
    cases["correlation_matrix_base"] = (
        lambda x: pcorr(correlation_matrix_base(x).tensor),
        rng.standard_normal((4, 5)) + 0.5,
    )
    return cases


def _end_to_end_cases(rng) -> dict[str, tuple[Callable, np.ndarray]]:
    """Combined objective through tiny float64 networks, one case per
    representative parameter."""
    base = BaseNetwork(
        3, conv_channels=(2, 3), feature_dim=4, eca_k=3, seed=7, dtype=np.float64
    )
    examiner = ExaminerNetwork(
        conv_channels=(2, 3), feature_dim=4, eca_k=3, hidden_dim=8, seed=7, dtype=np.float64
    )
    batch = rng.random((3, 1, 8, 8))
    augmented = np.clip(batch + rng.normal(0, 0.05, size=batch.shape), 0, 1)
    weights = LossWeights(10.0, 10.0)

    def combined() -> Tensor:
        x = Tensor(batch)
        feats, logits, att_phi = base.forward(x)
        feats_gam, att_gam = examiner.encode(x)
        aug_feats, _ = examiner.encode(Tensor(augmented))
        corr_gam = examiner_correlation_from_features(examiner, feats_gam, aug_feats)
        corr_phi = correlation_matrix_base(feats)
        return losses.total_loss(
            losses.im_loss(logits),
            losses.cmc_loss(corr_gam, corr_phi),
            losses.ac_loss(att_gam, att_phi),
            weights,
        )

    def wrt(param_holder, attr):
        original = getattr(param_holder, attr)

        def f(x):
            prev = getattr(param_holder, attr)
            setattr(param_holder, attr, x)
            try:
                return combined()
            finally:
                setattr(param_holder, attr, prev)

        return f, original.data.copy()

    cases = {}
    cases["combined/base.conv1_w"] = wrt(base.encoder, "conv1_w")
    cases["combined/base.eca_w"] = wrt(base.encoder.eca, "weight")
    cases["combined/examiner.eca_w"] = wrt(examiner.encoder.eca, "weight")
    cases["combined/examiner.head2_w"] = wrt(examiner, "head2_w")
    return cases


def gradient_suite(points: int = DEFAULT_POINTS, eps: float = 1e-5, seed: int = 1234) -> dict:
    """Max relative gradient error per op/loss over ``points`` random draws.

    Returns {name: {"max_error": float, "tolerance": float}}.
    """
    results: dict[str, dict] = {}

    def run(name: str, case_builder, tolerance: float, n_points: int):
        worst = 0.0
        for p in range(n_points):
            rng = np.random.default_rng([seed, p])
            f, x0 = case_builder(rng)[name]
            worst = max(worst, grad_check(f, Tensor(x0), eps))
        results[name] = {"max_error": worst, "tolerance": tolerance}

    rng0 = np.random.default_rng([seed, 0])
    for name in _op_cases(rng0):
        run(name, _op_cases, TOLERANCE, points)
    for name in _loss_cases(rng0):
        run(name, _loss_cases, TOLERANCE, points)
    # end-to-end composites are heavier; 2 draws keep the suite under a minute
    for name in _end_to_end_cases(rng0):
        run(name, _end_to_end_cases, END_TO_END_TOLERANCE, min(points, 2))
    return results
