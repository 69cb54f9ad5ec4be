from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from corematch import numerics as nx
from corematch.errors import DegenerateMatrix, InvalidParam, SequenceOverflow, ShapeError, VocabError
from corematch.model import (
    TOY_CONFIG,
    ModelConfig,
    Prompt,
    forward_dense,
    init_synthetic,
    orthogonality_deviation,
    qk_deviation,
)

GOLDEN = Path(__file__).parent / "golden"
GOLDEN_PROMPT = [3, 141, 59, 26, 53, 58, 97, 93, 23, 84, 62, 64]


class TestConfig:
    @pytest.mark.parametrize("kw", [
        dict(d_model=30),            # not divisible by heads
        dict(d_ffn=16),              # narrower than d_model
        dict(n_layers=0),
        dict(activation="gelu"),
        dict(dtype="float16"),
    ])
    def test_rejects(self, kw):
        with pytest.raises(InvalidParam):
            replace(TOY_CONFIG, **kw)

    def test_dict_roundtrip(self):
        assert ModelConfig.from_dict(TOY_CONFIG.to_dict()) == TOY_CONFIG
        assert TOY_CONFIG.d_head == 8


class TestSynthetic:
    def test_deterministic(self):
        a, b = init_synthetic(TOY_CONFIG, 3), init_synthetic(TOY_CONFIG, 3)
        for (na, ta), (nb, tb) in zip(a.named_tensors(), b.named_tensors()):
            assert na == nb
            np.testing.assert_array_equal(ta, tb)

    def test_seed_matters(self):
        assert not np.array_equal(init_synthetic(TOY_CONFIG, 1).embed, init_synthetic(TOY_CONFIG, 2).embed)

    @pytest.mark.parametrize("kw", [dict(orthogonality_mix=1.5), dict(orthogonality_mix=-0.1), dict(scale=0.0), dict(theta=-1.0)])
    def test_invalid(self, kw):
        with pytest.raises(InvalidParam):
            init_synthetic(TOY_CONFIG, 0, **kw)

    @pytest.mark.parametrize("theta", [1.0, 2.5])
    def test_orthogonal_premise_exact(self, theta):
        w = init_synthetic(TOY_CONFIG, 11, orthogonality_mix=1.0, scale=1.7, theta=theta)
        for lw in w.layers:
            for m in (lw.wv, lw.wd, lw.wo):
                assert orthogonality_deviation(m) <= 1e-10
            dev, theta_hat = qk_deviation(lw.wq, lw.wk)
            assert dev <= 1e-10
            assert theta_hat == pytest.approx(theta * 1.7**2, rel=1e-12)

    def test_gaussian_breaks_premise(self):
        w = init_synthetic(TOY_CONFIG, 11, orthogonality_mix=0.0)
        assert all(orthogonality_deviation(lw.wd) > 0.1 for lw in w.layers)

    def test_mix_is_monotone_on_average(self):
        devs = [
            np.mean([orthogonality_deviation(lw.wd) for lw in init_synthetic(TOY_CONFIG, 5, orthogonality_mix=m).layers])
            for m in (0.0, 0.5, 0.9, 1.0)
        ]
        assert devs == sorted(devs, reverse=True)

    def test_astype(self, toy_weights):
        w32 = toy_weights.astype("float32")
        assert w32.embed.dtype == np.float32 and w32.config.dtype == "float32"
        logits, _ = forward_dense(w32, [1, 2, 3])
        assert logits.dtype == np.float32


class TestOrthogonalityDeviation:
    def test_scaled_orthogonal(self):
        q = nx.random_orthogonal(np.random.default_rng(0), 6, 6)
        assert orthogonality_deviation(3.0 * q) <= 1e-12

    def test_rank_one_rows(self):
        assert orthogonality_deviation(np.array([[1.0, 0.0], [1.0, 0.0]])) == pytest.approx(1.0)

    def test_identity(self):
        assert orthogonality_deviation(np.eye(5)) == 0.0

    def test_tall_matrix_sides(self):
        q = nx.random_orthogonal(np.random.default_rng(0), 12, 4)
        assert orthogonality_deviation(q) <= 1e-12  # 4x4 Gram on the short side
        assert orthogonality_deviation(q, side="rows") > 0.5  # rank-4 12x12 Gram

    def test_errors(self):
        with pytest.raises(DegenerateMatrix):
            orthogonality_deviation(np.zeros((3, 3)))
        with pytest.raises(InvalidParam):
            orthogonality_deviation(np.eye(3), side="diag")

    def test_qk_non_positive_trace_is_infinite(self):
        dev, theta = qk_deviation(np.eye(3), -np.eye(3))
        assert dev == np.inf and theta == -1.0


class TestPrompt:
    def test_layout(self):
        img = np.zeros((3, TOY_CONFIG.d_model))
        p = Prompt((5, 6, 7), image=img, image_at=1)
        assert len(p) == 6 and p.image_span == (1, 4) and p.n_image == 3

    def test_bad_image(self):
        with pytest.raises(ShapeError):
            Prompt((1,), image=np.zeros(4))
        with pytest.raises(InvalidParam):
            Prompt((1,), image=np.zeros((1, 4)), image_at=5)


class TestForward:
    def test_single_token(self, toy_weights):
        _, tr = forward_dense(toy_weights, [17])
        for lt in tr.layers:
            np.testing.assert_array_equal(lt.alpha, np.ones((TOY_CONFIG.n_heads, 1, 1)))
            np.testing.assert_allclose(lt.attn_out[0], lt.v[0], rtol=0, atol=0)

    def test_attention_rows_sum_to_one(self, toy_weights):
        _, tr = forward_dense(toy_weights, GOLDEN_PROMPT)
        for lt in tr.layers:
            np.testing.assert_allclose(lt.alpha.sum(axis=-1), 1.0, atol=1e-9)
            assert np.all(np.triu(lt.alpha[0], 1) == 0.0)

    def test_trace_self_consistent(self, toy_weights):
        _, tr = forward_dense(toy_weights, GOLDEN_PROMPT)
        for i, lt in enumerate(tr.layers):
            np.testing.assert_allclose(lt.act @ toy_weights.layers[i].wd, lt.ffn_out, atol=1e-9)
            assert np.all(lt.act >= 0)  # recorded after ReLU
            assert lt.act.shape == (len(GOLDEN_PROMPT), TOY_CONFIG.d_ffn)

    def test_deterministic(self, toy_weights):
        a, ta = forward_dense(toy_weights, GOLDEN_PROMPT)
        b, tb = forward_dense(toy_weights, GOLDEN_PROMPT)
        np.testing.assert_array_equal(a, b)
        for la, lb in zip(ta.layers, tb.layers):
            np.testing.assert_array_equal(la.act, lb.act)

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.integers(0, 255), min_size=2, max_size=16), st.integers(0, 15), st.randoms())
    def test_future_tokens_do_not_leak(self, ids, cut, rnd):
        cut = cut % (len(ids) - 1)
        w = init_synthetic(TOY_CONFIG, 7)
        tail = ids[cut + 1:]
        rnd.shuffle(tail)
        a, _ = forward_dense(w, ids)
        b, _ = forward_dense(w, ids[:cut + 1] + tail)
        np.testing.assert_allclose(a[: cut + 1], b[: cut + 1], rtol=0, atol=1e-12)

    def test_errors(self, toy_weights):
        with pytest.raises(VocabError):
            forward_dense(toy_weights, [1, 256])
        with pytest.raises(SequenceOverflow):
            forward_dense(toy_weights, [1] * (TOY_CONFIG.max_seq_len + 1))
        with pytest.raises(InvalidParam):
            forward_dense(toy_weights, [])
        with pytest.raises(InvalidParam):
            forward_dense(toy_weights, [1, 2])[1][2 + TOY_CONFIG.n_layers]

    def test_golden_logits(self, toy_weights):
        logits, _ = forward_dense(toy_weights, GOLDEN_PROMPT)
        np.testing.assert_allclose(logits, np.load(GOLDEN / "toy_logits.npy"), rtol=0, atol=1e-12)
