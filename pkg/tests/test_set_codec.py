"""Set codec: attention blocks, invariance, decoding, loss, training and checkpoints."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from caps import diff_engine as de
from caps import set_codec as sc
from caps.diff_engine import Tensor


def tiny_config(**kw):
    base = dict(n_features=9, d=8, heads=2, n_inducing=4, max_len=6, seed=0)
    base.update(kw)
    return sc.CodecConfig(**base)


@pytest.fixture(scope="module")
def small():
    return sc.init_params(sc.CodecConfig(n_features=20, d=16, heads=4, n_inducing=4, seed=3))


def rows(a):
    return Tensor(np.asarray(a, dtype=np.float64)[None])


class TestConfig:
    def test_defaults(self):
        cfg = sc.CodecConfig(n_features=20)
        assert (cfg.d, cfg.heads, cfg.n_inducing, cfg.max_len, cfg.rff_hidden) == (128, 4, 32, 20, 256)
        assert cfg.pad_id == 20 and cfg.vocab == 21

    def test_heads_must_divide_width(self):
        with pytest.raises(de.ContractError):
            sc.CodecConfig(n_features=5, d=10, heads=4)

    @pytest.mark.parametrize("kw", [dict(check_every=0), dict(warmup_steps=-1), dict(n_inducing=0)])
    def test_invalid_fields(self, kw):
        with pytest.raises(de.ContractError):
            sc.CodecConfig(n_features=5, **kw)

    def test_parameter_shapes(self):
        p = sc.init_params(tiny_config())
        assert p["token_table"].shape == (10, 8)
        assert p["enc0.I"].shape == (4, 8) and p["enc1.I"].shape == (4, 8)
        assert p["dec.S"].shape == (6, 8)
        assert p["dec.head.w"].shape == (8, 10)
        assert p["enc1.mab0.ff.w1"].shape == (8, 16)


class TestMab:
    def test_single_row_shape(self, small):
        rng = np.random.default_rng(0)
        out = sc.mab(rows(rng.standard_normal((1, 16))), rows(rng.standard_normal((1, 16))),
                     rows(rng.standard_normal((1, 16))), small, "enc0.mab0")
        assert out.shape == (1, 1, 16) and np.all(np.isfinite(out.data))

    def test_key_value_order_irrelevant(self, small):
        rng = np.random.default_rng(1)
        q, kv = rng.standard_normal((3, 16)), rng.standard_normal((7, 16))
        perm = rng.permutation(7)
        a = sc.mab(rows(q), rows(kv), rows(kv), small, "enc0.mab1").data
        b = sc.mab(rows(q), rows(kv[perm]), rows(kv[perm]), small, "enc0.mab1").data
        np.testing.assert_allclose(a, b, atol=1e-9, rtol=0)

    def test_query_rows_independent(self, small):
        rng = np.random.default_rng(2)
        q, kv = rng.standard_normal((4, 16)), rng.standard_normal((5, 16))
        a = sc.mab(rows(q), rows(kv), rows(kv), small, "dec.self").data
        q2 = q.copy()
        q2[2] += 3.0
        b = sc.mab(rows(q2), rows(kv), rows(kv), small, "dec.self").data
        np.testing.assert_array_equal(a[0, [0, 1, 3]], b[0, [0, 1, 3]])
        assert not np.allclose(a[0, 2], b[0, 2])

    def test_width_mismatch(self, small):
        with pytest.raises(de.DimensionError):
            sc.mab(rows(np.zeros((2, 8))), rows(np.zeros((2, 16))), rows(np.zeros((2, 16))), small, "dec.self")


class TestInvariance:
    def test_isab_equivariant(self, small):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((9, 16))
        perm = rng.permutation(9)
        a = sc.isab(rows(x), small, 0).data[0]
        b = sc.isab(rows(x[perm]), small, 0).data[0]
        assert a.shape == x.shape
        np.testing.assert_allclose(b, a[perm], atol=1e-8, rtol=0)

    def test_encode_rows_follow_tokens(self, small):
        a = sc.encode([1, 2, 3], small).rows
        b = sc.encode([3, 1, 2], small).rows
        np.testing.assert_allclose(b, a[[2, 0, 1]], atol=1e-8, rtol=0)

    def test_singleton_and_duplicates(self, small):
        assert sc.encode([4], small).rows.shape == (1, 16)
        dup = sc.encode([2, 2], small).rows
        np.testing.assert_allclose(dup[0], dup[1], atol=1e-9, rtol=0)

    def test_encode_errors(self, small):
        with pytest.raises(de.ContractError):
            sc.encode([], small)
        with pytest.raises(IndexError):
            sc.encode([0, 20], small)

    def test_pma_single_input_row(self, small):
        e = np.random.default_rng(5).standard_normal((1, 16))
        assert sc.pma(rows(e), small).shape == (1, 20, 16)

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.integers(0, 19), min_size=1, max_size=20, unique=True), st.randoms(use_true_random=False))
    def test_decoder_invariant(self, small, subset, rnd):
        order = list(subset)
        rnd.shuffle(order)
        e1 = sc.encode(subset, small)
        e2 = sc.encode(order, small)
        l1, l2 = sc.decode_logits(e1, small), sc.decode_logits(e2, small)
        assert l1.shape == (20, 21)
        np.testing.assert_allclose(l1, l2, atol=1e-8, rtol=0)
        p1 = sc.pma(rows(e1.rows), small).data
        p2 = sc.pma(rows(e2.rows), small).data
        np.testing.assert_allclose(p1, p2, atol=1e-8, rtol=0)
        target = sc.make_target(subset, 20, 20)
        assert sc.reconstruction_loss(l1, target).item() == pytest.approx(
            sc.reconstruction_loss(l2, target).item(), abs=1e-8)
        try:
            d1 = sc.logits_to_subset(l1, 20)
        except sc.EmptyDecode:
            d1 = None
        try:
            d2 = sc.logits_to_subset(l2, 20)
        except sc.EmptyDecode:
            d2 = None
        assert d1 == d2


class TestComplexity:
    @staticmethod
    def macs(fn):
        with sc.count_attention_macs() as counter:
            fn()
        return counter.total

    def test_isab_linear_and_mab_quadratic(self):
        p = sc.init_params(sc.CodecConfig(n_features=70, d=16, heads=2, n_inducing=8, max_len=64))
        rng = np.random.default_rng(0)
        x32, x64 = rows(rng.standard_normal((32, 16))), rows(rng.standard_normal((64, 16)))
        isab_ratio = self.macs(lambda: sc.isab(x64, p, 0)) / self.macs(lambda: sc.isab(x32, p, 0))
        mab_ratio = (self.macs(lambda: sc.mab(x64, x64, x64, p, "dec.self"))
                     / self.macs(lambda: sc.mab(x32, x32, x32, p, "dec.self")))
        assert isab_ratio == pytest.approx(2.0, abs=1e-12)
        assert mab_ratio == pytest.approx(4.0, abs=1e-12)

    def test_counter_formula(self):
        p = sc.init_params(tiny_config())
        x = rows(np.zeros((5, 8)))
        # two attention products per head: scores and weighted values
        assert self.macs(lambda: sc.mab(x, x, x, p, "dec.self")) == 2 * 2 * 5 * 5 * 4


class TestDecoding:
    def test_examples(self):
        def onehot(ids, V=9):
            z = np.zeros((len(ids), V))
            z[np.arange(len(ids)), ids] = 1.0
            return z

        assert sc.logits_to_subset(onehot([5, 2, 8, 8]), 8) == [2, 5]
        assert sc.logits_to_subset(onehot([7, 7, 8]), 8) == [7]
        with pytest.raises(sc.EmptyDecode):
            sc.logits_to_subset(onehot([8, 8, 8]), 8)

    def test_ties_go_to_lowest_id(self):
        assert sc.logits_to_subset(np.array([[0.0, 1.0, 1.0, 0.5]]), 3) == [1]

    def test_make_target(self):
        assert sc.make_target([3, 1], 4, 9) == [1, 3, 9, 9]
        assert sc.make_target([2, 0, 1], 3, 5) == [0, 1, 2]
        with pytest.raises(de.ContractError):
            sc.make_target([0, 1, 2, 3], 3, 9)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(0, 14), min_size=1, max_size=15, unique=True))
    def test_round_trip(self, subset):
        target = sc.make_target(subset, 15, 15)
        assert all(a < b for a, b in zip(target, target[1:]) if b != 15)
        logits = np.full((15, 16), -1.0)
        logits[np.arange(15), target] = 1.0
        assert sc.logits_to_subset(logits, 15) == sorted(subset)


class TestLoss:
    def test_peaked(self):
        target = sc.make_target([0, 4], 5, 6)
        logits = np.full((5, 7), -20.0)
        logits[np.arange(5), target] = 20.0
        loss = sc.reconstruction_loss(logits, target).item()
        assert loss == pytest.approx(math.log1p(6 * math.exp(-40.0)), rel=1e-6)
        assert loss < 1e-3

    def test_uniform(self):
        assert sc.reconstruction_loss(np.zeros((5, 10)), [1, 2, 9, 9, 9]).item() == pytest.approx(math.log(10))

    def test_seed_gradient_nonzero_and_checked(self):
        p = sc.init_params(tiny_config())
        e = sc.encode([1, 4, 7], p).rows

        def build():
            return de.mean_all(sc.decode_logits_batch(rows(e), p))

        with de.Tape() as tape:
            loss = build()
        de.backward(tape, loss)
        analytic = p["dec.S"].grad.copy()
        (numeric,) = de.finite_diff_grad(lambda: build().item(), [p["dec.S"]])
        assert np.abs(analytic).max() > 1e-8
        assert de.max_relative_error(analytic, numeric) <= 1e-4


def codec_gradient_error(seed):
    """Worst relative error of the full codec loss gradient on the tiny config."""
    cfg = tiny_config(seed=seed)
    p = sc.init_params(cfg)
    rng = np.random.default_rng(seed)
    ids = np.array([rng.permutation(9)[:4] for _ in range(2)])
    targets = np.array([sc.make_target(s, 6, 9) for s in ids])

    def build():
        return sc.codec_loss(ids, targets, p)

    with de.Tape() as tape:
        loss = build()
    de.backward(tape, loss)
    analytic = {k: t.grad.copy() for k, t in p.tensors.items()}
    numeric = de.finite_diff_grad(lambda: build().item(), p.values())
    return {k: de.max_relative_error(analytic[k], n) for k, n in zip(p.tensors, numeric)}


class TestGradient:
    def test_every_parameter_group(self):
        errors = codec_gradient_error(0)
        groups = {"token_table", "enc0.I", "enc1.I", "dec.S", "dec.head.w", "dec.pma.wq", "dec.self.ln2_g"}
        assert groups <= set(errors)
        worst = max(errors, key=errors.get)
        assert errors[worst] <= 1e-4, (worst, errors[worst])


def toy_corpus(subsets, copies, max_len, pad, seed=0):
    rng = np.random.default_rng(seed)
    return [(tuple(rng.permutation(s)), sc.make_target(s, max_len, pad)) for s in subsets for _ in range(copies)]


class TestTraining:
    def test_initial_loss_near_uniform(self):
        cfg = sc.CodecConfig(n_features=20, d=32, heads=4, n_inducing=8, seed=1)
        p = sc.init_params(cfg)
        rng = np.random.default_rng(0)
        ids = np.array([rng.permutation(20)[:6] for _ in range(64)])
        targets = np.array([sc.make_target(s, 20, 20) for s in ids])
        loss = sc.codec_loss(ids, targets, p).item()
        assert abs(loss / math.log(21) - 1.0) <= 0.15

    def test_overfits_single_record(self):
        cfg = tiny_config(epochs=200, seed=2)
        res = sc.train_codec(toy_corpus([[2, 5, 7]], 1, 6, 9), cfg)
        assert len(res.loss_curve) == 200
        assert sc.reconstruct_subsets([[7, 2, 5]], res.params) == [[2, 5, 7]]
        assert res.loss_curve[-1] < res.loss_curve[0]

    def test_deterministic(self):
        corpus = toy_corpus([[0, 1], [3, 4, 8], [6]], 3, 6, 9)
        a = sc.train_codec(corpus, tiny_config(epochs=3, batch_size=4))
        b = sc.train_codec(corpus, tiny_config(epochs=3, batch_size=4))
        for k in a.params.tensors:
            assert a.params[k].data.tobytes() == b.params[k].data.tobytes()
        assert a.loss_curve == b.loss_curve

    def test_early_stop(self):
        cfg = tiny_config(epochs=400, seed=2, target_accuracy=1.0, check_every=10)
        res = sc.train_codec(toy_corpus([[2, 5, 7]], 1, 6, 9), cfg)
        assert res.params.trained_epochs < 400
        assert res.accuracy_curve[-1][1] == 1.0

    def test_rejects_bad_corpus(self):
        with pytest.raises(de.ContractError):
            sc.train_codec([], tiny_config())
        with pytest.raises(de.ContractError):
            sc.train_codec([((0, 1, 2, 3, 4, 5, 6), [9] * 6)], tiny_config())


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        p = sc.init_params(tiny_config(seed=4))
        p.trained_epochs = 7
        sc.save_checkpoint(tmp_path / "c.json", p)
        q = sc.load_checkpoint(tmp_path / "c.json")
        assert q.config == p.config and q.trained_epochs == 7
        for k in p.tensors:
            assert q[k].data.tobytes() == p[k].data.tobytes()

    def test_shape_mismatch_rejected(self, tmp_path):
        import json

        p = sc.init_params(tiny_config())
        sc.save_checkpoint(tmp_path / "c.json", p)
        blob = json.loads((tmp_path / "c.json").read_text())
        blob["params"]["dec.S"]["shape"] = [5, 8]
        (tmp_path / "c.json").write_text(json.dumps(blob))
        with pytest.raises(ValueError, match="dec.S"):
            sc.load_checkpoint(tmp_path / "c.json")
