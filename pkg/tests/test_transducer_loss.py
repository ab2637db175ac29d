import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tmbr.autodiff import ShapeError, Tape, Tensor, backward, ops
from tmbr.transducer_loss import (
    Lattice,
    brute_force_loss,
    forward_backward,
    forward_backward_loss,
    iter_alignments,
    num_alignments,
    transducer_nll,
)


def random_lattice(rng, T, U, V):
    logits = rng.normal(size=(T, U + 1, V + 1)) * 2
    lp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
    ref = rng.integers(1, V + 1, size=U)
    return Lattice(lp, ref)


def fd_grad(lp, ref, eps=1e-6):
    g = np.zeros_like(lp)
    for idx in np.ndindex(lp.shape):
        up, dn = lp.copy(), lp.copy()
        up[idx] += eps
        dn[idx] -= eps
        g[idx] = (forward_backward(up, ref)[0] - forward_backward(dn, ref)[0]) / (2 * eps)
    return g


class TestExamples:
    def test_single_frame_empty_reference(self):
        lp = np.log(np.array([[[0.7, 0.2, 0.1]]]))
        nll, _ = forward_backward_loss(Lattice(lp, []))
        assert nll == pytest.approx(-math.log(0.7), abs=1e-12)

    def test_two_frames_one_label_sums_both_paths(self):
        rng = np.random.default_rng(0)
        p = rng.dirichlet(np.ones(3), size=(2, 2))
        y = 2
        # 0-based grid: p[t, u]. Emit-first path and blank-first path.
        expected = -math.log(p[0, 0, y] * p[0, 1, 0] * p[1, 1, 0] + p[0, 0, 0] * p[1, 0, y] * p[1, 1, 0])
        nll, _ = forward_backward_loss(Lattice(np.log(p), [y]))
        assert nll == pytest.approx(expected, abs=1e-12)

    def test_uniform_single_label(self):
        lp = np.full((1, 2, 2), math.log(0.5))
        # The only alignment emits the label then the final blank.
        assert brute_force_loss(Lattice(lp, [1])) == pytest.approx(2 * math.log(2), abs=1e-12)
        assert forward_backward_loss(Lattice(lp, [1]))[0] == pytest.approx(2 * math.log(2), abs=1e-12)


class TestAlignments:
    @pytest.mark.parametrize("T,U", [(1, 0), (1, 3), (2, 1), (3, 2), (4, 3)])
    def test_count_matches_enumeration(self, T, U):
        assert sum(1 for _ in iter_alignments(T, U)) == num_alignments(T, U) == math.comb(T + U - 1, U)

    def test_three_frames_two_labels(self):
        # The final blank is fixed, so six orderings remain of the other four steps.
        assert num_alignments(3, 2) == 6

    def test_enumeration_limit(self):
        lat = random_lattice(np.random.default_rng(0), 6, 5, 2)
        with pytest.raises(ValueError, match="limit"):
            brute_force_loss(lat, limit=10)


class TestAgainstOracle:
    def test_hundred_random_small_lattices(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            lat = random_lattice(rng, int(rng.integers(1, 5)), int(rng.integers(0, 4)), int(rng.integers(1, 5)))
            assert abs(forward_backward_loss(lat)[0] - brute_force_loss(lat)) <= 1e-5

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            lat = random_lattice(rng, 3, 2, 3)
            _, g = forward_backward_loss(lat)
            num = fd_grad(lat.log_probs, lat.reference)
            assert np.abs(g - num).max() / max(np.abs(num).max(), 1e-12) <= 1e-3

    def test_gradient_zero_on_unused_symbols(self):
        lat = random_lattice(np.random.default_rng(1), 3, 1, 4)
        _, g = forward_backward_loss(lat)
        used = {0, int(lat.reference[0])}
        for v in range(5):
            if v not in used:
                assert np.all(g[:, :, v] == 0)

    def test_blank_occupancy_sums_to_frames(self):
        # Every alignment emits exactly T blanks and U labels.
        lat = random_lattice(np.random.default_rng(2), 4, 3, 3)
        _, g = forward_backward_loss(lat)
        assert -g[:, :, 0].sum() == pytest.approx(4, abs=1e-9)
        assert -(g.sum() - g[:, :, 0].sum()) == pytest.approx(3, abs=1e-9)


class TestProperties:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 4), st.integers(0, 3), st.integers(1, 4), st.integers(0, 10_000))
    def test_nll_non_negative(self, T, U, V, seed):
        lat = random_lattice(np.random.default_rng(seed), T, U, V)
        assert forward_backward_loss(lat)[0] >= 0

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_permuting_non_reference_columns(self, seed):
        rng = np.random.default_rng(seed)
        lat = random_lattice(rng, 3, 1, 4)
        others = [v for v in range(1, 5) if v != lat.reference[0]]
        perm = list(range(5))
        shuffled = list(rng.permutation(others))
        for a, b in zip(others, shuffled):
            perm[a] = b
        again = Lattice(lat.log_probs[:, :, perm], lat.reference)
        assert forward_backward_loss(again)[0] == pytest.approx(forward_backward_loss(lat)[0], abs=1e-12)

    def test_gradient_descent_on_free_logits_is_monotone(self):
        rng = np.random.default_rng(0)
        logits = Tensor(rng.normal(size=(3, 3, 4)), requires_grad=True)
        ref = [2, 1]
        history = []
        for _ in range(50):
            logits.grad = None
            with Tape() as tape:
                loss = transducer_nll(ops.log_softmax(logits), ref)
            backward(tape, loss)
            history.append(loss.item())
            logits.data -= 0.1 * logits.grad
        assert all(b <= a + 1e-12 for a, b in zip(history, history[1:]))
        assert history[-1] < history[0]

    def test_tape_node_gradient_is_lattice_gradient(self):
        lat = random_lattice(np.random.default_rng(5), 2, 2, 2)
        t = Tensor(lat.log_probs, requires_grad=True)
        with Tape() as tape:
            loss = transducer_nll(t, lat.reference)
        backward(tape, loss)
        np.testing.assert_allclose(t.grad, forward_backward_loss(lat)[1], atol=1e-12)


class TestErrors:
    def test_labels_with_zero_frames(self):
        with pytest.raises((ValueError, ShapeError)):
            forward_backward(np.zeros((0, 2, 3)), [1])

    def test_reference_with_blank(self):
        with pytest.raises(ValueError, match="blank"):
            forward_backward(np.log(np.full((2, 2, 3), 1 / 3)), [0])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            forward_backward(np.zeros((2, 3, 3)), [1])

    def test_symbol_outside_vocabulary(self):
        with pytest.raises(ValueError, match="vocabulary"):
            forward_backward(np.log(np.full((2, 2, 3), 1 / 3)), [5])

    def test_lattice_normalization_check(self):
        lat = random_lattice(np.random.default_rng(0), 2, 1, 2)
        assert lat.is_normalized()
        assert not Lattice(lat.log_probs + 0.1, lat.reference).is_normalized()
