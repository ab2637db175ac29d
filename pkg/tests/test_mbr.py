import math
from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tmbr.autodiff import Tape, Tensor, backward, ops, precision
from tmbr.autodiff.gradcheck import grad_check_params
from tmbr.beam_search import FusionConfig, Hypothesis, beam_search_nbest
from tmbr.mbr import (
    MbrConfig,
    NBestSpace,
    batch_mbr_loss,
    edit_distance,
    expected_risk,
    mbr_coefficients,
    mbr_gradient,
    mbr_loss,
    mbr_utterance_loss,
    regularized_loss,
    risk,
    sequence_log_probs,
)
from tmbr.model import RNNT, tiny_config
from tmbr.transducer_loss import transducer_nll


def hyp(seq, step_lps):
    return Hypothesis(tuple(seq), tuple(step_lps), float(sum(step_lps)))


def space_from_f(f, risks):
    hyps = [hyp([0] * (i + 1), [math.log(p)]) for i, p in enumerate(f)]
    return NBestSpace.build(hyps, (), risks=risks)


def dp_oracle(a, b):
    # Plain recursive definition with memoisation.
    @lru_cache(maxsize=None)
    def d(i, j):
        if i == 0 or j == 0:
            return i + j
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (a[i - 1] != b[j - 1]))

    return d(len(a), len(b))


class TestEditDistance:
    def test_examples(self):
        assert edit_distance("kitten", "sitting") == 3
        assert edit_distance([1, 2, 3], [1, 2, 3]) == 0
        assert edit_distance([4, 5], []) == 2
        assert edit_distance([], [4, 5, 6]) == 3

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(1, 4), max_size=8), st.lists(st.integers(1, 4), max_size=8))
    def test_matches_recursive_oracle(self, a, b):
        assert edit_distance(a, b) == dp_oracle(tuple(a), tuple(b))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(1, 3), max_size=6), st.lists(st.integers(1, 3), max_size=6))
    def test_symmetric_and_bounded(self, a, b):
        d = edit_distance(a, b)
        assert d == edit_distance(b, a)
        assert abs(len(a) - len(b)) <= d <= max(len(a), len(b))


class TestRisk:
    def test_exact_match_is_zero(self):
        assert risk([0, 3, 0, 4, 0], [3, 4]) == 0

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(1, 4), max_size=6), st.lists(st.integers(0, 3), max_size=8), st.integers(0, 1000))
    def test_blank_placement_is_irrelevant(self, labels, blanks_at, seed):
        seq = list(labels)
        for pos in blanks_at:
            seq.insert(min(pos, len(seq)), 0)
        ref = list(np.random.default_rng(seed).integers(1, 5, size=3))
        assert risk(seq, ref) == edit_distance(labels, ref)

    def test_hypothesis_object(self):
        assert risk(hyp([1, 0, 2, 0], [-1, -1, -1, -1]), [1, 3]) == 1


class TestLoss:
    def test_two_hypothesis_example(self):
        assert mbr_loss(space_from_f([0.6, 0.2], [0, 2])) == pytest.approx(0.5, abs=1e-12)

    def test_equal_risks_give_that_risk(self):
        assert mbr_loss(space_from_f([0.1, 0.5, 0.05], [3, 3, 3])) == pytest.approx(3.0, abs=1e-12)

    def test_single_hypothesis(self):
        assert mbr_loss(space_from_f([0.3], [4])) == pytest.approx(4.0)

    def test_batch_loss_sums(self):
        a, b = space_from_f([0.6, 0.2], [0, 2]), space_from_f([0.4], [1])
        assert batch_mbr_loss([a, b]) == pytest.approx(1.5)

    def test_empty_space(self):
        with pytest.raises(ValueError, match="empty"):
            NBestSpace.build([], [1])

    def test_non_finite_score(self):
        with pytest.raises(ValueError, match="non-finite"):
            NBestSpace.build([hyp([0], [-math.inf])], [])

    def test_risks_from_reference(self):
        space = NBestSpace.build([hyp([1, 0], [-0.1, -0.2]), hyp([2, 0], [-1.0, -0.2])], [1])
        assert list(space.risks) == [0, 1]

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-30, 0), min_size=1, max_size=6), st.integers(0, 10_000))
    def test_space_invariants(self, log_f, seed):
        risks = np.random.default_rng(seed).integers(0, 5, size=len(log_f))
        hyps = [hyp([0] * (i + 1), [lf]) for i, lf in enumerate(log_f)]
        s = NBestSpace.build(hyps, (), risks=risks)
        assert abs(s.gamma.sum() - 1) <= 1e-6 and np.all(s.gamma >= 0)
        assert abs(s.avg_risk - s.gamma @ s.risks) <= 1e-6
        assert s.risks.min() - 1e-9 <= s.avg_risk <= s.risks.max() + 1e-9

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(-10, 0), min_size=2, max_size=5), st.floats(-20, 20), st.integers(0, 1000))
    def test_common_scale_invariance(self, log_f, shift, seed):
        risks = np.random.default_rng(seed).integers(0, 4, size=len(log_f))
        a = NBestSpace.build([hyp([0] * (i + 1), [lf]) for i, lf in enumerate(log_f)], (), risks=risks)
        b = NBestSpace.build([hyp([0] * (i + 1), [lf + shift]) for i, lf in enumerate(log_f)], (), risks=risks)
        np.testing.assert_allclose(a.gamma, b.gamma, atol=1e-6)
        assert mbr_loss(a) == pytest.approx(mbr_loss(b), abs=1e-6)
        np.testing.assert_allclose(mbr_coefficients(a), mbr_coefficients(b), atol=1e-6)


class TestRegularized:
    def test_examples(self):
        assert regularized_loss(2.0, 3.0, 1.0) == 5.0
        assert regularized_loss(2.0, 3.0, 0.0) == 2.0
        assert regularized_loss(2.0, 3.0) == 5.0

    def test_negative_weight(self):
        with pytest.raises(ValueError):
            regularized_loss(1.0, 1.0, -1.0)
        with pytest.raises(ValueError):
            MbrConfig(reg_lambda=-0.5)

    def test_config_defaults(self):
        cfg = MbrConfig()
        assert cfg.nbest_size == 2 and cfg.reg_lambda == 1.0 and not cfg.use_nnlm_in_search


class TestGradient:
    def test_equal_risks_give_exact_zero(self):
        s = space_from_f([0.6, 0.3, 0.1], [2, 2, 2])
        assert s.degenerate
        for g in mbr_gradient(s):
            assert np.all(g == 0.0)

    def test_coefficients_are_zero_sum(self):
        s = space_from_f([0.5, 0.25, 0.1, 0.15], [0, 3, 1, 2])
        assert abs(mbr_coefficients(s).sum()) <= 1e-12

    def test_sign_structure_in_two_best(self):
        c = mbr_coefficients(space_from_f([0.3, 0.6], [1, 4]))
        assert c[0] <= 0 <= c[1]

    def test_per_step_values(self):
        s = NBestSpace.build([hyp([1, 0, 0], [-0.2, -0.1, -0.3]), hyp([2, 0, 0], [-1.0, -0.5, -0.1])], [1])
        grads = mbr_gradient(s)
        c = mbr_coefficients(s)
        assert [g.shape for g in grads] == [(3,), (3,)]
        assert np.all(grads[0] == c[0]) and np.all(grads[1] == c[1])

    def test_inconsistent_score_rejected(self):
        s = space_from_f([0.6, 0.2], [0, 2])
        s.log_f = s.log_f + 0.5
        with pytest.raises(ValueError, match="disagree"):
            mbr_gradient(s)

    def test_tape_node_matches_coefficients_and_finite_differences(self):
        rng = np.random.default_rng(0)
        log_f = rng.normal(size=4) - 3
        risks = np.array([0, 2, 1, 3])
        with precision(np.float64):
            t = Tensor(log_f, requires_grad=True)
            with Tape() as tape:
                out = expected_risk(t, risks)
            backward(tape, out)
        s = NBestSpace.build([hyp([0] * (i + 1), [v]) for i, v in enumerate(log_f)], (), risks=risks)
        np.testing.assert_allclose(t.grad, mbr_coefficients(s), atol=1e-12)
        eps = 1e-6
        for i in range(4):
            up, dn = log_f.copy(), log_f.copy()
            up[i] += eps
            dn[i] -= eps
            with precision(np.float64):
                num = (expected_risk(Tensor(up), risks).item() - expected_risk(Tensor(dn), risks).item()) / (2 * eps)
            assert num == pytest.approx(t.grad[i], abs=1e-8)

    def test_gradient_step_on_frozen_logits_decreases_loss(self):
        rng = np.random.default_rng(1)
        logits = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        risks = [3, 0, 1]
        choices = [rng.integers(0, 3, size=4) for _ in range(3)]

        def loss():
            # Each hypothesis picks one entry per step from a shared 3-way softmax.
            lp = ops.log_softmax(logits, axis=0)
            picks = [ops.reduce_sum(ops.gather(lp, (c, np.arange(4)))) for c in choices]
            return expected_risk(ops.concat(*[ops.reshape(p, (1,)) for p in picks], axis=0), risks)

        with Tape() as tape:
            before = loss()
        backward(tape, before)
        logits.data -= 1e-2 * logits.grad
        assert loss().item() < before.item()


class TestThroughNetwork:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_finite_differences_through_tiny_transducer(self, seed):
        model = RNNT(tiny_config(vocab_size=3, stride=1, seed=seed))
        rng = np.random.default_rng(seed)
        feats = rng.normal(size=(3, 3))
        hyps = beam_search_nbest(model, feats, 3, FusionConfig(beta=1.0))
        risks = rng.permutation(len(hyps)).astype(float)

        def loss():
            log_f, _ = sequence_log_probs(model, model.encode(feats), hyps)
            return expected_risk(log_f, risks)

        assert grad_check_params(loss, model.params, 1e-4) <= 1e-3

    def test_rescored_steps_equal_search_steps(self):
        model = RNNT(tiny_config(vocab_size=3, stride=1, seed=4))
        feats = np.random.default_rng(4).normal(size=(4, 3))
        hyps = beam_search_nbest(model, feats, 3, FusionConfig(beta=0.8))
        log_f, steps = sequence_log_probs(model, model.encode(feats), hyps)
        for h, lf, st_ in zip(hyps, log_f.data, steps):
            assert lf == pytest.approx(h.log_prob, abs=1e-5)
            np.testing.assert_allclose(st_.data, h.step_log_probs, atol=1e-5)

    def test_degenerate_space_contributes_only_regularizer(self):
        model = RNNT(tiny_config(vocab_size=3, stride=1, seed=5))
        feats = np.random.default_rng(5).normal(size=(4, 3))
        hyps = beam_search_nbest(model, feats, 2, FusionConfig(beta=1.0))[:1]
        ref = list(hyps[0].labels) or [1]
        terms = mbr_utterance_loss(model, feats, ref, hyps, reg_lambda=0.5)
        enc = model.encode(feats)
        nll = transducer_nll(model.lattice_log_probs(enc, model.predict_all(ref)), ref).item()
        assert terms.space.degenerate
        assert terms.loss.item() == pytest.approx(0.5 * nll, rel=1e-6)

    def test_utterance_loss_value(self):
        model = RNNT(tiny_config(vocab_size=3, stride=1, seed=6))
        feats = np.random.default_rng(6).normal(size=(4, 3))
        hyps = beam_search_nbest(model, feats, 3, FusionConfig(beta=1.0))
        ref = [1, 2]
        terms = mbr_utterance_loss(model, feats, ref, hyps, reg_lambda=1.0)
        expected = regularized_loss(mbr_loss(terms.space), terms.rnnt, 1.0)
        assert terms.loss.item() == pytest.approx(expected, rel=1e-5)
