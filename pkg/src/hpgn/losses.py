"""Training losses: label-smoothed softmax, batch-hard triplet, weighted total."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import autodiff as ad
from .layers import ForwardContext, Module


class BatchCompositionError(ValueError):
    """Mini-batch cannot support triplet mining."""


@dataclass
class LossConfig:
    alpha: float = 2.0    # LSRS weight, averaged-GAP branch
    beta: float = 1.0     # triplet weight, averaged-GAP branch
    rho: float = 2.0      # LSRS weight, GMP branch
    lam: float = 1.0      # triplet weight, GMP branch
    epsilon: float = 0.1  # label smoothing degree, in [0, 1)
    margin: float = 1.2   # triplet margin tau

    def __post_init__(self):
        if min(self.alpha, self.beta, self.rho, self.lam) < 0:
            raise ValueError("loss weights must be nonnegative")
        if not 0.0 <= self.epsilon < 1.0:
            raise ValueError("epsilon must be in [0, 1)")
        if self.margin < 0:
            raise ValueError("margin must be nonnegative")


class ClassifierHead(Module):
    """Bias-free linear classifier over embeddings."""

    _params = ("weight",)

    def __init__(self, embed_dim: int, num_classes: int, rng: np.random.Generator):
        std = np.sqrt(1.0 / embed_dim)
        self.weight = rng.normal(0.0, std, (embed_dim, num_classes)).astype(np.float32)
        self.num_classes = num_classes


def smoothed_target(label: int, j: int, num_classes: int, epsilon: float) -> float:
    """Target probability for class j under label smoothing."""
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    if not (0 <= label < num_classes and 0 <= j < num_classes):
        raise ValueError("class index out of range")
    base = epsilon / num_classes
    if j != label:
        return base
    # correctly rounded 1 - (K-1)*base (== 1 - eps + eps/K) keeps the K
    # targets within half an ulp of summing to one, so a compensated sum
    # (math.fsum) recovers exactly 1.0
    return float(1 - (num_classes - 1) * Fraction(base))


def lsrs_loss(ctx: ForwardContext, features: ad.Tensor, head: ClassifierHead,
              labels: np.ndarray, epsilon: float = 0.1) -> ad.Tensor:
    """Label-smoothing-regularized softmax loss on classifier logits."""
    logits = ad.matmul(features, ctx.p(head.weight))
    return ad.softmax_cross_entropy(logits, labels, epsilon)


def lsrs_from_logits(logits: ad.Tensor, labels: np.ndarray, epsilon: float = 0.1) -> ad.Tensor:
    return ad.softmax_cross_entropy(logits, labels, epsilon)


def _mine(dist: np.ndarray, labels: np.ndarray):
    """Batch-hard indices: per anchor the farthest positive and nearest negative.

    Ties resolve to the lowest index (argmax/argmin first occurrence).
    Anchors without any positive are skipped.
    """
    b = len(labels)
    same = labels[:, None] == labels[None, :]
    pos_mask = same.copy()
    np.fill_diagonal(pos_mask, False)
    neg_mask = ~same
    anchors, pos_idx, neg_idx = [], [], []
    for a in range(b):
        if not pos_mask[a].any() or not neg_mask[a].any():
            continue
        dp = np.where(pos_mask[a], dist[a], -np.inf)
        dn = np.where(neg_mask[a], dist[a], np.inf)
        anchors.append(a)
        pos_idx.append(int(dp.argmax()))
        neg_idx.append(int(dn.argmin()))
        if pos_mask[a].sum() > 1:
            top = np.sort(dp[pos_mask[a]])[-2:]
            ad._note_kink(top[1] - top[0])
        if neg_mask[a].sum() > 1:
            low = np.sort(dn[neg_mask[a]])[:2]
            ad._note_kink(low[1] - low[0])
    return np.array(anchors), np.array(pos_idx), np.array(neg_idx)


def batch_hard_triplet(features: ad.Tensor, labels: np.ndarray, margin: float = 1.2) -> ad.Tensor:
    """Hinge triplet loss with in-batch hard mining, averaged over anchors.

    Requires at least two distinct labels and at least one label appearing
    twice; anchors without a valid positive are excluded from the mean.
    """
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise BatchCompositionError("triplet loss needs at least 2 distinct labels")
    dist = ad.pairwise_euclidean(features)
    anchors, pos_idx, neg_idx = _mine(dist.data, labels)
    if len(anchors) == 0:
        raise BatchCompositionError("no anchor has both a positive and a negative")
    dp = ad.select_pairs(dist, anchors, pos_idx)
    dn = ad.select_pairs(dist, anchors, neg_idx)
    hinge = ad.relu(ad.add(ad.sub(dp, dn), float(margin)))
    return ad.mean_all(hinge)


def total_loss(output, labels: np.ndarray, cfg: LossConfig):
    """Weighted sum over both heads; absent heads contribute zero.

    Returns (scalar tensor, components dict of floats for logging).
    """
    terms = []
    components = {}
    pieces = [
        ("lsrs1", cfg.alpha, output.logits1, "ce"),
        ("triplet1", cfg.beta, output.embed1, "trip"),
        ("lsrs2", cfg.rho, output.logits2, "ce"),
        ("triplet2", cfg.lam, output.embed2, "trip"),
    ]
    total = None
    for name, weight, tensor, kind in pieces:
        if tensor is None:
            components[name] = 0.0
            continue
        if kind == "ce":
            term = lsrs_from_logits(tensor, labels, cfg.epsilon)
        else:
            term = batch_hard_triplet(tensor, labels, cfg.margin)
        components[name] = float(term.data)
        weighted = ad.scale(term, weight)
        total = weighted if total is None else ad.add(total, weighted)
    if total is None:
        raise ValueError("model produced no supervised outputs")
    components["total"] = float(total.data)
    return total, components
