"""Loss values against direct-summation and exhaustive-enumeration oracles."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hpgn import autodiff as ad
from hpgn.layers import ForwardContext
from hpgn.losses import (BatchCompositionError, ClassifierHead, LossConfig,
                         batch_hard_triplet, lsrs_from_logits, lsrs_loss,
                         smoothed_target, total_loss)
from hpgn.model import ForwardOutput


def tensor(a):
    return ad.Tape(np.float64).parameter(np.asarray(a, dtype=np.float64))


def log_softmax_ref(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def ce_ref(logits, labels):
    """Plain cross-entropy, independent evaluation."""
    lp = log_softmax_ref(np.asarray(logits, dtype=np.float64))
    return -lp[np.arange(len(labels)), labels].mean()


class TestSmoothedTarget:
    def test_ten_class_values(self):
        assert smoothed_target(3, 3, 10, 0.1) == 0.91
        assert smoothed_target(3, 7, 10, 0.1) == 0.01

    def test_zero_epsilon_one_hot(self):
        assert smoothed_target(1, 1, 4, 0.0) == 1.0
        assert smoothed_target(1, 2, 4, 0.0) == 0.0

    @settings(max_examples=100, deadline=None)
    @given(st.integers(2, 50), st.floats(0.0, 0.999))
    def test_targets_sum_to_one_exactly(self, k, eps):
        label = k // 2
        assert math.fsum(smoothed_target(label, j, k, eps) for j in range(k)) == 1.0

    def test_errors(self):
        with pytest.raises(ValueError):
            smoothed_target(0, 0, 1, 0.1)
        with pytest.raises(ValueError):
            smoothed_target(5, 0, 4, 0.1)
        with pytest.raises(ValueError):
            smoothed_target(0, 4, 4, 0.1)


class TestLSRS:
    def test_two_class_equal_logits_is_ln2(self):
        logits = tensor([[0.3, 0.3], [1.7, 1.7]])
        for eps in (0.0, 0.1, 0.5):
            loss = lsrs_from_logits(logits, np.array([0, 1]), eps)
            assert abs(float(loss.data) - math.log(2.0)) < 1e-12

    def test_zero_epsilon_matches_plain_ce(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            b, k = rng.integers(1, 9), rng.integers(2, 12)
            logits = rng.normal(0, 3, (b, k))
            labels = rng.integers(0, k, b)
            got = float(lsrs_from_logits(tensor(logits), labels, 0.0).data)
            assert abs(got - ce_ref(logits, labels)) < 1e-10

    def test_single_row_direct_sum(self):
        # b=1, K=3, logits (1,0,0), label 0, eps=0.1: sum the smoothed
        # targets against explicit log-probabilities
        logits = np.array([[1.0, 0.0, 0.0]])
        z = math.log(math.e + 2.0)  # log(e^1 + e^0 + e^0)
        lp = [1.0 - z, -z, -z]
        expect = -sum(smoothed_target(0, j, 3, 0.1) * lp[j] for j in range(3))
        got = float(lsrs_from_logits(tensor(logits), np.array([0]), 0.1).data)
        assert abs(got - expect) < 1e-12

    def test_mixture_identity(self):
        rng = np.random.default_rng(1)
        for eps in (0.05, 0.1, 0.3, 0.7):
            logits = rng.normal(0, 2, (6, 5))
            labels = rng.integers(0, 5, 6)
            smoothed = float(lsrs_from_logits(tensor(logits), labels, eps).data)
            ce_hot = ce_ref(logits, labels)
            ce_uniform = -log_softmax_ref(logits).mean(axis=1).mean()
            assert abs(smoothed - ((1 - eps) * ce_hot + eps * ce_uniform)) < 1e-10

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10**6), st.floats(0.0, 0.99))
    def test_nonnegative(self, seed, eps):
        rng = np.random.default_rng(seed)
        logits = rng.normal(0, 5, (4, 6))
        labels = rng.integers(0, 6, 4)
        assert float(lsrs_from_logits(tensor(logits), labels, eps).data) >= 0.0

    def test_head_path_matches_logit_path(self):
        rng = np.random.default_rng(2)
        head = ClassifierHead(4, 3, rng)
        feats = rng.normal(0, 1, (5, 4))
        labels = np.array([0, 1, 2, 0, 1])
        ctx = ForwardContext(ad.Tape(np.float64), mode="bn-bypass")
        via_head = lsrs_loss(ctx, ctx.tape.parameter(feats), head, labels, 0.1)
        direct = lsrs_from_logits(tensor(feats @ head.weight.astype(np.float64)), labels, 0.1)
        assert abs(float(via_head.data) - float(direct.data)) < 1e-10


def triplet_oracle(features, labels, margin):
    """Exhaustive batch-hard enumeration with independent distances."""
    d = np.linalg.norm(features[:, None, :] - features[None, :, :], axis=2)
    hinges = []
    for a in range(len(labels)):
        pos = [j for j in range(len(labels)) if j != a and labels[j] == labels[a]]
        neg = [j for j in range(len(labels)) if labels[j] != labels[a]]
        if not pos or not neg:
            continue
        hardest_pos = max(d[a, j] for j in pos)
        hardest_neg = min(d[a, j] for j in neg)
        hinges.append(max(hardest_pos - hardest_neg + margin, 0.0))
    return sum(hinges) / len(hinges)


class TestTriplet:
    def test_zero_features_give_margin(self):
        feats = tensor(np.zeros((6, 3)))
        loss = batch_hard_triplet(feats, np.array([0, 0, 1, 1, 2, 2]), margin=1.2)
        assert float(loss.data) == 1.2

    def test_identical_features_give_margin(self):
        feats = tensor(np.tile([1.0, -2.0, 0.5], (4, 1)))
        loss = batch_hard_triplet(feats, np.array([0, 0, 1, 1]), margin=0.7)
        assert abs(float(loss.data) - 0.7) < 1e-6

    def test_separated_clusters_give_zero(self):
        feats = np.array([[0.0], [0.1], [100.0], [100.1]])
        loss = batch_hard_triplet(tensor(feats), np.array([0, 0, 1, 1]), margin=1.2)
        assert float(loss.data) == 0.0

    def test_four_point_line(self):
        feats = np.array([[0.0], [0.1], [1.0], [1.1]])
        labels = np.array([0, 0, 1, 1])
        got = float(batch_hard_triplet(tensor(feats), labels, margin=1.2).data)
        # hardest positive is 0.1 away for every anchor; nearest negative is
        # 1.0 away for the outer points and 0.9 for the inner ones
        outer = 0.1 - 1.0 + 1.2
        inner = 0.1 - 0.9 + 1.2
        assert abs(got - (2 * outer + 2 * inner) / 4) < 1e-12
        assert abs(got - triplet_oracle(feats, labels, 1.2)) < 1e-12

    def test_random_batches_match_exhaustive_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            n_ids = rng.integers(2, 7)
            counts = rng.integers(2, 4, n_ids)
            while counts.sum() > 12:
                counts[counts.argmax()] -= 1
            labels = np.repeat(np.arange(n_ids), counts)
            feats = rng.normal(0, 1, (len(labels), rng.integers(1, 6)))
            margin = float(rng.uniform(0, 2))
            got = float(batch_hard_triplet(tensor(feats), labels, margin).data)
            assert abs(got - triplet_oracle(feats, labels, margin)) < 1e-12

    def test_permutation_invariant(self):
        rng = np.random.default_rng(8)
        feats = rng.normal(0, 1, (8, 3))
        labels = np.array([0, 0, 1, 1, 2, 2, 3, 3])
        base = float(batch_hard_triplet(tensor(feats), labels, 1.2).data)
        for _ in range(5):
            perm = rng.permutation(8)
            got = float(batch_hard_triplet(tensor(feats[perm]), labels[perm], 1.2).data)
            assert abs(got - base) < 1e-12

    def test_translation_invariant(self):
        rng = np.random.default_rng(9)
        feats = rng.normal(0, 1, (6, 4))
        labels = np.array([0, 0, 0, 1, 1, 1])
        base = float(batch_hard_triplet(tensor(feats), labels, 1.2).data)
        shifted = float(batch_hard_triplet(tensor(feats + 17.5), labels, 1.2).data)
        assert abs(base - shifted) < 1e-9

    def test_scaling_scales_distances(self):
        feats = np.array([[0.0], [0.2], [1.0], [1.3]])
        labels = np.array([0, 0, 1, 1])
        s = 3.0
        got = float(batch_hard_triplet(tensor(s * feats), labels, 1.2).data)
        assert abs(got - triplet_oracle(s * feats, labels, 1.2)) < 1e-12

    def test_batch_composition_errors(self):
        with pytest.raises(BatchCompositionError):
            batch_hard_triplet(tensor(np.zeros((3, 2))), np.array([0, 0, 0]), 1.2)
        with pytest.raises(BatchCompositionError):
            batch_hard_triplet(tensor(np.zeros((3, 2))), np.array([0, 1, 2]), 1.2)


class TestTotalLoss:
    def setup_method(self):
        rng = np.random.default_rng(3)
        self.labels = np.array([0, 0, 1, 1])
        tape = ad.Tape(np.float64)
        self.output = ForwardOutput(
            embed1=tape.parameter(rng.normal(0, 1, (4, 6))),
            embed2=tape.parameter(rng.normal(0, 1, (4, 6))),
            logits1=tape.parameter(rng.normal(0, 1, (4, 2))),
            logits2=tape.parameter(rng.normal(0, 1, (4, 2))),
            branch_pooled=[])

    def test_zero_weights_give_zero(self):
        cfg = LossConfig(alpha=0, beta=0, rho=0, lam=0)
        loss, comps = total_loss(self.output, self.labels, cfg)
        assert float(loss.data) == 0.0
        assert comps["total"] == 0.0

    def test_default_weights(self):
        cfg = LossConfig()
        assert (cfg.alpha, cfg.beta, cfg.rho, cfg.lam) == (2.0, 1.0, 2.0, 1.0)
        assert cfg.epsilon == 0.1 and cfg.margin == 1.2

    def test_matches_hand_weighted_sum(self):
        cfg = LossConfig(alpha=1.5, beta=0.25, rho=3.0, lam=0.5)
        loss, comps = total_loss(self.output, self.labels, cfg)
        by_hand = (
            cfg.alpha * float(lsrs_from_logits(self.output.logits1, self.labels, cfg.epsilon).data)
            + cfg.beta * float(batch_hard_triplet(self.output.embed1, self.labels, cfg.margin).data)
            + cfg.rho * float(lsrs_from_logits(self.output.logits2, self.labels, cfg.epsilon).data)
            + cfg.lam * float(batch_hard_triplet(self.output.embed2, self.labels, cfg.margin).data))
        assert abs(float(loss.data) - by_hand) < 1e-12

    def test_missing_first_head_contributes_zero(self):
        self.output.embed1 = None
        self.output.logits1 = None
        cfg = LossConfig()
        loss, comps = total_loss(self.output, self.labels, cfg)
        assert comps["lsrs1"] == 0.0 and comps["triplet1"] == 0.0
        by_hand = (2.0 * float(lsrs_from_logits(self.output.logits2, self.labels, 0.1).data)
                   + 1.0 * float(batch_hard_triplet(self.output.embed2, self.labels, 1.2).data))
        assert abs(float(loss.data) - by_hand) < 1e-12

    def test_config_validation(self):
        with pytest.raises(ValueError):
            LossConfig(alpha=-1)
        with pytest.raises(ValueError):
            LossConfig(epsilon=1.0)
        with pytest.raises(ValueError):
            LossConfig(margin=-0.1)
