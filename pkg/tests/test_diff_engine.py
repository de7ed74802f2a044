"""Tape autodiff: forward values, gradient checks, Adam and seeding."""

import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from caps import diff_engine as de
from caps.diff_engine import Tensor


def leaf(a):
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True)


def grad_of(fn, *inputs):
    with de.Tape() as tape:
        loss = fn(*inputs)
    de.backward(tape, loss)
    return [x.grad for x in inputs]


def check_gradients(build, params, tol=1e-4):
    """Analytic gradients of ``build()`` against central differences."""
    with de.Tape() as tape:
        loss = build()
    de.backward(tape, loss)
    analytic = [p.grad.copy() for p in params]
    numeric = de.finite_diff_grad(lambda: build().item(), params)
    worst = max(de.max_relative_error(a, n) for a, n in zip(analytic, numeric))
    assert worst <= tol, worst
    return worst


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.eye(2))
        b = Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(de.matmul(a, b).data, b.data)

    def test_manual_product(self):
        c = de.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
        np.testing.assert_array_equal(c.data, [[19.0, 22.0], [43.0, 50.0]])

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(de.DimensionError, match=r"\(2, 3\).*\(4, 2\)"):
            de.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))

    def test_batched_with_shared_weight(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((3, 4, 5))
        w = rng.standard_normal((5, 2))
        out = de.matmul(Tensor(a), Tensor(w)).data
        np.testing.assert_allclose(out, np.einsum("bik,kj->bij", a, w), atol=1e-12)


class TestSoftmax:
    def test_closed_form(self):
        out = de.row_softmax(Tensor([[0.0, math.log(2.0)]])).data
        np.testing.assert_allclose(out, [[1 / 3, 2 / 3]], atol=1e-15)

    def test_constant_row(self):
        out = de.row_softmax(Tensor([[5.0, 5.0, 5.0]])).data
        np.testing.assert_allclose(out, [[1 / 3] * 3], atol=1e-15)

    def test_large_logits_match_extended_precision(self):
        out = de.row_softmax(Tensor([[1000.0, 0.0]])).data
        mpmath.mp.dps = 50
        z = mpmath.exp(1000) + 1
        oracle = [float(mpmath.exp(1000) / z), float(1 / z)]
        assert np.all(np.isfinite(out))
        assert out[0, 0] == oracle[0]
        assert out[0, 1] == pytest.approx(oracle[1], rel=1e-12, abs=0)

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)), st.floats(-100, 100))
    def test_rows_sum_to_one_and_shift_invariant(self, x, c):
        p = de.row_softmax(Tensor(x)).data
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
        np.testing.assert_allclose(de.row_softmax(Tensor(x + c)).data, p, atol=1e-12)


class TestLayerNorm:
    def test_zero_variance_row(self):
        out = de.layer_norm(Tensor([[2.5, 2.5]]), Tensor([1.0, 1.0]), Tensor([0.0, 0.0]))
        np.testing.assert_array_equal(out.data, [[0.0, 0.0]])

    def test_hand_computed(self):
        out = de.layer_norm(Tensor([[1.0, 3.0]]), Tensor([1.0, 1.0]), Tensor([0.0, 0.0]))
        np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-4)

    def test_zero_gain_gives_bias(self):
        out = de.layer_norm(Tensor([[1.0, 7.0, -2.0]]), Tensor(np.zeros(3)), Tensor([0.3, 0.3, 0.3]))
        np.testing.assert_array_equal(out.data, [[0.3, 0.3, 0.3]])

    def test_needs_two_columns(self):
        with pytest.raises(de.ContractError):
            de.layer_norm(Tensor([[1.0]]), Tensor([1.0]), Tensor([0.0]))


class TestElementwise:
    def test_relu(self):
        np.testing.assert_array_equal(de.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])
        np.testing.assert_array_equal(de.relu(Tensor([-3.0, -0.5])).data, [0.0, 0.0])

    def test_relu_subgradient_at_zero(self):
        (g,) = grad_of(lambda x: de.sum_all(de.relu(x)), leaf([0.0, 1.0]))
        np.testing.assert_array_equal(g, [0.0, 1.0])

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, (4,), elements=st.floats(-1e6, 1e6)))
    def test_relu_idempotent(self, x):
        once = de.relu(Tensor(x))
        np.testing.assert_array_equal(de.relu(once).data, once.data)

    def test_clip_exact(self):
        assert de.clip(Tensor([1.5]), 0.8, 1.2).data[0] == 1.2


class TestLookupAndCrossEntropy:
    def test_lookup(self):
        table = Tensor(np.arange(12.0).reshape(4, 3))
        np.testing.assert_array_equal(de.lookup_rows(table, [0]).data, [[0.0, 1.0, 2.0]])
        np.testing.assert_array_equal(de.lookup_rows(table, [2, 2]).data, [[6.0, 7.0, 8.0]] * 2)

    def test_lookup_out_of_range_names_id(self):
        with pytest.raises(IndexError, match="4"):
            de.lookup_rows(Tensor(np.zeros((4, 3))), [1, 4])

    def test_lookup_scatters_duplicates(self):
        table = leaf(np.zeros((3, 2)))
        (g,) = grad_of(lambda t: de.sum_all(de.lookup_rows(t, [2, 2, 0])), table)
        np.testing.assert_array_equal(g, [[1.0, 1.0], [0.0, 0.0], [2.0, 2.0]])

    def test_uniform_logits(self):
        loss = de.cross_entropy_logits(Tensor(np.zeros((3, 4))), [0, 1, 3])
        assert loss.item() == pytest.approx(math.log(4.0), abs=1e-12)

    def test_peaked_logits(self):
        loss = de.cross_entropy_logits(Tensor([[10.0, -10.0]]), [0]).item()
        assert loss == pytest.approx(math.log1p(math.exp(-20.0)), rel=1e-9)
        assert loss < 1e-6

    def test_invalid_target(self):
        with pytest.raises(IndexError):
            de.cross_entropy_logits(Tensor(np.zeros((1, 3))), [3])

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (2, 5), elements=st.floats(-300, 300)), st.integers(0, 4))
    def test_nonnegative(self, logits, t):
        assert de.cross_entropy_logits(Tensor(logits), [t, 4 - t]).item() >= 0.0


class TestBackward:
    def test_sum_gives_ones(self):
        (g,) = grad_of(de.sum_all, leaf([1.0, -2.0, 3.0]))
        np.testing.assert_array_equal(g, [1.0, 1.0, 1.0])

    def test_scalar_product(self):
        gx, gy = grad_of(lambda x, y: de.sum_all(de.mul(x, y)), leaf([3.0]), leaf([-2.0]))
        assert gx[0] == -2.0 and gy[0] == 3.0

    def test_fan_out_accumulates_exactly(self):
        (g,) = grad_of(lambda x: de.add(de.sum_all(x), de.sum_all(x)), leaf([0.1, 0.7]))
        np.testing.assert_array_equal(g, [2.0, 2.0])

    def test_non_scalar_loss_rejected(self):
        x = leaf([1.0, 2.0])
        with de.Tape() as tape:
            y = de.scale(x, 2.0)
        with pytest.raises(de.ContractError):
            de.backward(tape, y)

    def test_replay_is_bitwise_identical(self):
        rng = np.random.default_rng(3)
        a, b = leaf(rng.standard_normal((3, 4))), leaf(rng.standard_normal((4, 2)))
        with de.Tape() as tape:
            h = de.row_softmax(de.matmul(a, b))
            loss = de.mean_all(de.square(de.add(h, de.matmul(a, b))))
        de.backward(tape, loss)
        first = (a.grad.copy(), b.grad.copy())
        de.backward(tape, loss)
        np.testing.assert_array_equal(a.grad, first[0])
        np.testing.assert_array_equal(b.grad, first[1])

    def test_no_tape_records_nothing(self):
        x = leaf([1.0])
        with de.Tape() as tape:
            pass
        de.scale(x, 2.0)
        assert len(tape) == 0


def away_from(x, points, gap=0.05):
    """Nudge entries off the kinks of piecewise ops so differences stay smooth."""
    for c in points:
        close = np.abs(x - c) < gap
        x[close] += 2 * gap
    return x


def op_cases(rng):
    """(name, params, forward) triples covering every differentiable op."""
    x = leaf(rng.standard_normal((3, 4)))
    y = leaf(rng.standard_normal((3, 4)))
    kinked = leaf(away_from(rng.standard_normal((3, 4)), [0.0, -0.5, 0.5]))
    y_far = leaf(kinked.data + np.where(rng.random((3, 4)) < 0.5, 0.3, -0.3))
    w2 = leaf(rng.standard_normal((4, 2)))
    a3 = leaf(rng.standard_normal((2, 3, 4)))
    b3 = leaf(rng.standard_normal((2, 4, 5)))
    gain, bias = leaf(rng.standard_normal(4)), leaf(rng.standard_normal(4))
    table = leaf(rng.standard_normal((5, 3)))
    bvec = leaf(rng.standard_normal(4))
    return [
        ("add", [x, bvec], lambda: de.add(x, bvec)),
        ("sub", [x, y], lambda: de.sub(x, y)),
        ("mul", [x, y], lambda: de.mul(x, y)),
        ("scale", [x], lambda: de.scale(x, -1.7)),
        ("exp", [x], lambda: de.exp(x)),
        ("square", [x], lambda: de.square(x)),
        ("relu", [kinked], lambda: de.relu(kinked)),
        ("clip", [kinked], lambda: de.clip(kinked, -0.5, 0.5)),
        ("minimum", [kinked, y_far], lambda: de.minimum(kinked, y_far)),
        ("reshape", [x], lambda: de.reshape(x, (4, 3))),
        ("transpose", [a3], lambda: de.transpose(a3, (0, 2, 1))),
        ("broadcast_to", [bvec], lambda: de.broadcast_to(bvec, (3, 4))),
        ("mean_all", [x], lambda: de.mean_all(de.square(x))),
        ("sum_last", [x], lambda: de.sum_last(x)),
        ("index_last", [x], lambda: de.index_last(x, 2)),
        ("matmul", [x, w2], lambda: de.matmul(x, w2)),
        ("matmul_batched", [a3, b3], lambda: de.matmul(a3, b3)),
        ("matmul_shared_weight", [a3, w2], lambda: de.matmul(a3, w2)),
        ("row_softmax", [a3], lambda: de.row_softmax(de.scale(a3, 2.0))),
        ("layer_norm", [a3, gain, bias], lambda: de.layer_norm(a3, gain, bias)),
        ("lookup_rows", [table], lambda: de.lookup_rows(table, [4, 0, 4, 2])),
        ("cross_entropy", [x], lambda: de.cross_entropy_logits(x, [3, 0, 1])),
    ]


CASE_NAMES = [name for name, _, _ in op_cases(np.random.default_rng(0))]


class TestGradientSuite:
    """Analytic gradients vs central differences (h=1e-5) on 10 seeded inputs."""

    @pytest.mark.parametrize("name", CASE_NAMES)
    def test_operation(self, name):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            _, params, fwd = next(c for c in op_cases(rng) if c[0] == name)
            w_rng = np.random.default_rng(100 + seed)
            probe = fwd()
            w = Tensor(w_rng.standard_normal(probe.shape)) if probe.size > 1 else None
            build = (lambda: de.sum_all(de.mul(fwd(), w))) if w is not None else fwd
            check_gradients(build, params)

    def test_three_layer_net(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.standard_normal((6, 4)))
        ws = [leaf(rng.standard_normal(s) * 0.7) for s in [(4, 8), (8, 8), (8, 3)]]

        def build():
            h = de.layer_norm(de.matmul(x, ws[0]), de.ones(8), de.zeros(8))
            h = de.exp(de.scale(de.matmul(h, ws[1]), 0.3))
            return de.cross_entropy_logits(de.matmul(h, ws[2]), [0, 1, 2, 2, 1, 0])

        check_gradients(build, ws)


class TestFiniteDiff:
    def test_square(self):
        p = leaf([3.0])
        (g,) = de.finite_diff_grad(lambda: p.data[0] ** 2, [p])
        assert g[0] == pytest.approx(6.0, abs=1e-8)

    def test_constant(self):
        p = leaf([1.0, 2.0])
        (g,) = de.finite_diff_grad(lambda: 4.2, [p])
        np.testing.assert_array_equal(g, [0.0, 0.0])

    def test_restores_parameters(self):
        p = leaf([0.1, 0.2])
        de.finite_diff_grad(lambda: float(p.data.sum()), [p])
        np.testing.assert_array_equal(p.data, [0.1, 0.2])


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = leaf([1.0, -2.0])
        state = de.AdamState.for_params([p])
        de.adam_step([p], [np.zeros(2)], state, lr=0.1)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])
        assert state.step_count == 1

    def test_first_step_by_hand(self):
        p = leaf([0.0])
        state = de.AdamState.for_params([p])
        de.adam_step([p], [np.array([1.0])], state, lr=0.1)
        m_hat = (0.1 * 1.0) / (1 - 0.9)
        v_hat = (0.001 * 1.0) / (1 - 0.999)
        assert p.data[0] == pytest.approx(-0.1 * m_hat / (math.sqrt(v_hat) + 1e-8), rel=1e-12)
        assert p.data[0] == pytest.approx(-0.1, abs=1e-8)

    def test_shape_mismatch(self):
        p = leaf([0.0, 0.0])
        with pytest.raises(de.DimensionError):
            de.adam_step([p], [np.zeros(3)], de.AdamState.for_params([p]), lr=0.1)

    def test_deterministic(self):
        def run():
            rng = de.seeded_rng(9)
            p = leaf(rng.standard_normal(5))
            state = de.AdamState.for_params([p])
            for _ in range(20):
                de.adam_step([p], [rng.standard_normal(5)], state, lr=0.01)
            return p.data

        assert run().tobytes() == run().tobytes()


class TestSeeding:
    def test_same_seed_same_stream(self):
        assert de.seeded_rng(42).integers(0, 2**62, 8).tolist() == de.seeded_rng(42).integers(0, 2**62, 8).tolist()

    def test_derive_seed_matches_hashlib(self):
        import hashlib

        want = int.from_bytes(hashlib.sha256(b"7:codec").digest()[:8], "big")
        assert de.derive_seed(7, "codec") == want
        assert de.derive_seed(7, "codec") != de.derive_seed(7, "search")

    def test_glorot_range(self):
        t = de.glorot(de.seeded_rng(0), 10, 6)
        assert np.abs(t.data).max() <= math.sqrt(6.0 / 16)
