"""Encoders, attention fusion, and prediction heads."""

import numpy as np
import pytest

from mmncd import tensor as T
from mmncd.data import MultiModalSample
from mmncd.errors import ShapeError
from mmncd.model import (AttentionFuser, FusionNetwork, ModalityEncoder,
                         split_feature_groups)
from mmncd.seeding import substream


def make_sample(sid, vectors):
    return MultiModalSample(sid, vectors)


def dense_attention_oracle(tokens, wq, wk, wv, key_dim):
    """Direct numpy evaluation of scaled dot-product attention for one head."""
    q, k, v = tokens @ wq, tokens @ wk, tokens @ wv
    scores = q @ k.T / np.sqrt(key_dim)
    scores = scores - scores.max(axis=-1, keepdims=True)
    weights = np.exp(scores) / np.exp(scores).sum(axis=-1, keepdims=True)
    return weights @ v, weights


class TestEncoder:
    def test_zero_weights_give_zero_output(self):
        enc = ModalityEncoder(0, 3, 4, substream(0, "init"))
        for p in enc.parameters():
            p.data[...] = 0.0
        out = enc.encode(T.constant(np.ones((2, 3))))
        assert np.array_equal(out.data, np.zeros((2, 4)))

    def test_deterministic(self):
        enc = ModalityEncoder(0, 3, 4, substream(5, "init"))
        x = T.constant(np.arange(6.0).reshape(2, 3))
        assert np.array_equal(enc.encode(x).data, enc.encode(x).data)

    def test_wrong_dimension_rejected(self):
        enc = ModalityEncoder(0, 3, 4, substream(0, "init"))
        with pytest.raises(ShapeError, match="modality 0"):
            enc.encode(T.constant(np.ones((2, 5))))


class TestMissingModalities:
    def test_missing_modality_encodes_to_exact_zero(self):
        net = FusionNetwork((3, 4), num_classes=3, feature_dim=8, heads=2, seed=0)
        samples = [make_sample(0, {0: np.ones(3), 1: None}),
                   make_sample(1, {0: np.ones(3), 1: np.ones(4)})]
        features = net.encode_batch(samples)
        assert np.array_equal(features[1].data[0], np.zeros(8))
        assert not np.array_equal(features[1].data[1], np.zeros(8))

    def test_all_samples_missing_one_modality(self):
        net = FusionNetwork((3, 4), num_classes=3, feature_dim=8, heads=2, seed=0)
        samples = [make_sample(i, {0: np.ones(3), 1: None}) for i in range(3)]
        features = net.encode_batch(samples)
        assert np.array_equal(features[1].data, np.zeros((3, 8)))

    def test_single_present_modality_still_finite(self):
        net = FusionNetwork((3, 4, 5), num_classes=4, feature_dim=8, heads=2, seed=1)
        sample = make_sample(0, {0: None, 1: np.ones(4), 2: None})
        result = net.forward([sample])
        assert np.all(np.isfinite(result.action.data))
        assert np.all(np.isfinite(result.probs.data))
        assert result.probs.data.sum() == pytest.approx(1.0, abs=1e-12)

    def test_single_present_modality_gives_finite_losses(self):
        from mmncd import losses as L
        net = FusionNetwork((3, 4), num_classes=3, feature_dim=8, heads=2, seed=2)
        batch = [make_sample(0, {0: None, 1: np.ones(4)}),
                 make_sample(1, {0: np.ones(3), 1: np.ones(4) * 2})]
        result = net.forward(batch)
        breakdown = L.total_loss(
            L.td_loss(result.value, [1, 0]),
            L.ce_loss(result.probs, [0, 2]),
            L.contrastive_loss(result.view_a, result.view_b))
        assert all(np.isfinite(v) for v in breakdown.as_floats().values())


class TestGrouping:
    def _features(self, count, n=2, d=4):
        return [T.constant(np.full((n, d), float(i + 1))) for i in range(count)]

    def test_even_count_no_padding(self):
        a, b = split_feature_groups(self._features(4))
        assert len(a) == 2 and len(b) == 2
        assert a[0].data[0, 0] == 1.0 and a[1].data[0, 0] == 3.0
        assert b[0].data[0, 0] == 2.0 and b[1].data[0, 0] == 4.0

    def test_odd_count_appends_zero_token(self):
        a, b = split_feature_groups(self._features(3))
        assert len(a) == 2 and len(b) == 2
        assert np.array_equal(b[1].data, np.zeros((2, 4)))

    def test_single_feature(self):
        a, b = split_feature_groups(self._features(1))
        assert len(a) == 1 and len(b) == 1
        assert a[0].data[0, 0] == 1.0
        assert np.array_equal(b[0].data, np.zeros((2, 4)))

    def test_empty_rejected(self):
        with pytest.raises(ShapeError):
            split_feature_groups([])


class TestAttention:
    def _identity_value_fuser(self, d=6, heads=2, seed=3):
        """Fuser whose per-head value projections concatenate to the identity."""
        fuser = AttentionFuser("t", d, heads, substream(seed, "init"))
        dk = d // heads
        for h, (_, _, wv) in enumerate(fuser.projections):
            wv.data[...] = np.eye(d)[:, h * dk:(h + 1) * dk]
        return fuser

    def test_single_token_identity_projections(self):
        # one token attends only to itself; with identity values the fused
        # token is the token, so the output is its affine projection
        fuser = self._identity_value_fuser()
        token = T.constant(np.arange(6.0))
        out = fuser.fuse([token])
        expected = fuser.out(T.reshape(token, (1, -1)))
        assert np.allclose(out.data, expected.data[0], atol=1e-12)

    def test_identical_tokens_attend_half_half(self):
        fuser = AttentionFuser("t", 6, 2, substream(0, "init"))
        token = np.arange(6.0)
        stacked = T.constant(np.stack([[token, token]]))
        _, weights = fuser.attend(stacked)
        for w in weights:
            assert np.array_equal(w.data, np.full((1, 2, 2), 0.5))

    def test_three_token_case_matches_dense_oracle(self):
        rng = np.random.default_rng(4)
        fuser = AttentionFuser("t", 8, 2, substream(7, "init"))
        tokens = rng.normal(size=(3, 8))
        fused, weights = fuser.attend(T.constant(tokens[None]))
        for h, (wq, wk, wv) in enumerate(fuser.projections):
            expected_out, expected_w = dense_attention_oracle(
                tokens, wq.data, wk.data, wv.data, fuser.key_dim)
            assert np.max(np.abs(weights[h].data[0] - expected_w)) <= 1e-10
            assert np.max(np.abs(fused.data[0, :, h * 4:(h + 1) * 4] - expected_out)) <= 1e-10

    def test_final_fusion_of_equal_views_is_symmetric(self):
        fuser = self._identity_value_fuser()
        view = T.constant(np.linspace(-1.0, 1.0, 6))
        out = fuser.fuse([view, view])
        expected = fuser.out(T.reshape(view, (1, -1)))
        assert np.allclose(out.data, expected.data[0], atol=1e-12)

    def test_gradient_reaches_both_fusion_inputs(self):
        fuser = AttentionFuser("t", 6, 2, substream(9, "init"))
        a = T.Parameter("a", np.random.default_rng(1).normal(size=6))
        b = T.Parameter("b", np.random.default_rng(2).normal(size=6))

        def f():
            fused = fuser.fuse([a, b])
            return T.power(fused, 2.0).sum()

        assert T.finite_difference_check(f, [a, b]) <= 1e-5

    def test_batched_equals_per_sample(self):
        rng = np.random.default_rng(6)
        fuser = AttentionFuser("t", 8, 4, substream(3, "init"))
        rows_a, rows_b = rng.normal(size=(2, 8)), rng.normal(size=(2, 8))
        batched = fuser.fuse([T.constant(rows_a), T.constant(rows_b)])
        for i in range(2):
            single = fuser.fuse([T.constant(rows_a[i]), T.constant(rows_b[i])])
            assert np.allclose(batched.data[i], single.data, atol=1e-12)


class TestHeads:
    def test_zero_weights_give_uniform_distribution(self):
        net = FusionNetwork((3,), num_classes=4, feature_dim=8, heads=2, seed=0)
        for p in net.heads_out.class_head.parameters():
            p.data[...] = 0.0
        probs = net.heads_out.classify(T.constant(np.ones((2, 8))))
        assert np.allclose(probs.data, 0.25, atol=1e-15)

    def test_probabilities_sum_to_one(self):
        net = FusionNetwork((3,), num_classes=5, feature_dim=8, heads=2, seed=2)
        probs = net.heads_out.classify(T.constant(np.random.default_rng(0).normal(size=(4, 8))))
        assert np.max(np.abs(probs.data.sum(axis=1) - 1.0)) <= 1e-12

    def test_argmax_invariant_under_constant_logit_shift(self):
        net = FusionNetwork((3,), num_classes=5, feature_dim=8, heads=2, seed=2)
        x = np.random.default_rng(3).normal(size=(4, 8))
        before = np.argmax(net.heads_out.classify(T.constant(x)).data, axis=1)
        net.heads_out.class_head.bias.data += 7.5
        after = np.argmax(net.heads_out.classify(T.constant(x)).data, axis=1)
        assert np.array_equal(before, after)

    def test_value_head_zero_weights_give_half(self):
        net = FusionNetwork((3,), num_classes=4, feature_dim=8, heads=2, seed=0)
        for p in net.heads_out.value_head.parameters():
            p.data[...] = 0.0
        value = net.heads_out.value(T.constant(np.ones((3, 8))))
        assert np.allclose(value.data, 0.5, atol=1e-15)

    def test_value_strictly_inside_unit_interval(self):
        net = FusionNetwork((3,), num_classes=4, feature_dim=8, heads=2, seed=1)
        value = net.heads_out.value(T.constant(np.random.default_rng(1).normal(size=(10, 8)) * 5))
        assert np.all(value.data > 0.0) and np.all(value.data < 1.0)


class TestFullNetwork:
    def test_every_parameter_receives_gradient(self):
        # no dead subnetwork at init: one backward pass on a random batch
        # must touch every parameter
        rng = np.random.default_rng(0)
        net = FusionNetwork((5, 6, 7), num_classes=6, feature_dim=16, heads=4, seed=0)
        samples = [make_sample(i, {0: rng.normal(size=5), 1: rng.normal(size=6),
                                   2: rng.normal(size=7)}) for i in range(32)]
        result = net.forward(samples)
        loss = T.add(T.add(-T.log(T.clamp(result.probs, 1e-12, 1)).mean(),
                           T.power(result.value, 2.0).mean()),
                     T.power(result.action, 2.0).mean())
        T.zero_gradients(net.parameters())
        T.backward(loss)
        dead = [p.name for p in net.parameters() if not np.any(p.grad != 0.0)]
        assert not dead, f"parameters with zero gradient: {dead}"

    def test_forward_is_deterministic(self):
        rng = np.random.default_rng(5)
        net = FusionNetwork((4, 4), num_classes=3, feature_dim=8, heads=2, seed=3)
        samples = [make_sample(0, {0: rng.normal(size=4), 1: rng.normal(size=4)})]
        first = net.forward(samples)
        second = net.forward(samples)
        assert np.array_equal(first.action.data, second.action.data)
        assert np.array_equal(first.probs.data, second.probs.data)

    def test_infer_actions_matches_forward(self):
        rng = np.random.default_rng(8)
        net = FusionNetwork((4, 4), num_classes=3, feature_dim=8, heads=2, seed=3)
        samples = [make_sample(i, {0: rng.normal(size=4), 1: rng.normal(size=4)})
                   for i in range(5)]
        assert np.array_equal(net.infer_actions(samples), net.forward(samples).action.data)
