import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dycast.config import ConfigError, RunConfig
from dycast.model import (
    InsufficientLengthError,
    ModelParams,
    build_model,
    channel_attention_apply,
    dycast_block_forward,
    model_forward,
    predict,
    sparse_causal_attention,
)
from dycast.tensor import add, conv1d_depthwise_causal, layernorm, mul_along, relu, rmsnorm, transpose


def dense_attention(F, q, k, v, o, heads):
    """Plain multi-head causal attention written out head by head."""
    T, N = F.shape
    dh = N // heads
    Q, K, V = F @ q, F @ k, F @ v
    out = np.zeros((T, N))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        s = Q[:, sl] @ K[:, sl].T / math.sqrt(dh)
        for t in range(T):
            row = s[t, : t + 1]
            e = np.exp(row - row.max())
            out[t, sl] = (e / e.sum()) @ V[: t + 1, sl]
    return out @ o


def random_params(seed, n=3, profile="table3", heads=None, tau=0.01):
    cfg = RunConfig(profile=profile, heads=heads, tau_sparse=tau)
    rng = np.random.default_rng(seed + 10_000)
    p = build_model(cfg, n, seed)
    return p.map_arrays(lambda _, a: np.asarray(a) + rng.normal(0, 0.5, np.shape(a)))


class TestChannelAttention:
    def test_uniform_halves(self):
        out, w = channel_attention_apply(np.array([[2.0, 2], [4, 4]]), np.zeros(2))
        np.testing.assert_allclose(w, [0.5, 0.5])
        np.testing.assert_allclose(out.data, [[1, 1], [2, 2]])

    def test_saturated_one_hot(self):
        X = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
        out, w = channel_attention_apply(X, np.array([0.0, 40.0, 0.0]))
        np.testing.assert_allclose(out.data[1], X[1], rtol=1e-15)
        assert np.all(np.abs(out.data[[0, 2]]) < 1e-15 * np.abs(X[[0, 2]]))

    def test_single_channel(self):
        X = np.array([[1.5, -2.0]])
        out, w = channel_attention_apply(X, np.array([3.3]))
        assert w.tolist() == [1.0]
        np.testing.assert_array_equal(out.data, X)


class TestSparseAttention:
    def test_single_token(self):
        rng = np.random.default_rng(1)
        F = rng.normal(size=(1, 4))
        q, k, v, o = (rng.normal(size=(4, 4)) for _ in range(4))
        out, A = sparse_causal_attention(F, q, k, v, o, heads=2, tau=0.01)
        assert A.shape == (2, 1, 1) and np.all(A == 1.0)
        np.testing.assert_allclose(out.data, F @ v @ o, atol=1e-14)

    @pytest.mark.parametrize("heads", [1, 2, 4])
    def test_zero_threshold_is_dense(self, heads):
        rng = np.random.default_rng(heads)
        F = rng.normal(size=(17, 4))
        q, k, v, o = (rng.normal(size=(4, 4)) for _ in range(4))
        out, _ = sparse_causal_attention(F, q, k, v, o, heads=heads, tau=0.0)
        np.testing.assert_allclose(out.data, dense_attention(F, q, k, v, o, heads), atol=1e-12, rtol=0)

    def test_hand_evaluated_pair(self):
        eye = np.eye(2)
        F = np.ones((2, 2))
        _, A = sparse_causal_attention(F, eye, eye, eye, eye, heads=1, tau=0.0)
        np.testing.assert_allclose(A[0, 1], [0.5, 0.5])
        out, A = sparse_causal_attention(F, eye, eye, eye, eye, heads=1, tau=0.6)
        np.testing.assert_array_equal(A[0, 1], [0.0, 0.0])
        np.testing.assert_array_equal(out.data[1], [0.0, 0.0])

    @pytest.mark.parametrize("tau", [-0.1, 1.0, 1.5])
    def test_threshold_range(self, tau):
        with pytest.raises(ConfigError):
            sparse_causal_attention(np.ones((2, 2)), *(np.eye(2),) * 4, heads=1, tau=tau)

    def test_heads_must_divide(self):
        with pytest.raises(ConfigError):
            sparse_causal_attention(np.ones((2, 3)), *(np.eye(3),) * 4, heads=2, tau=0.0)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**31), T=st.integers(1, 24), heads=st.sampled_from([1, 3]))
    def test_mask_and_row_mass(self, seed, T, heads):
        rng = np.random.default_rng(seed)
        F = rng.normal(size=(T, 3))
        projs = [rng.normal(size=(3, 3)) for _ in range(4)]
        counts = []
        for tau in (0.0, 0.01, 0.05, 0.2):
            _, A = sparse_causal_attention(F, *projs, heads=heads, tau=tau)
            assert np.all(np.triu(A, 1) == 0.0)
            sums = A.sum(axis=-1)
            assert np.all(sums <= 1 + 1e-12)
            if tau == 0.0:
                np.testing.assert_allclose(sums, 1.0, atol=1e-12)
            counts.append(int(np.count_nonzero(A)))
        assert counts == sorted(counts, reverse=True)


class TestBlock:
    def test_zero_parameters_are_identity(self):
        p = random_params(3).blocks[0]
        p.kernels = np.zeros_like(p.kernels)
        p.attn_proj_o = np.zeros_like(p.attn_proj_o)
        x = np.random.default_rng(0).normal(size=(3, 12))
        y, _ = dycast_block_forward(x, p)
        np.testing.assert_array_equal(y.data, x)

    @pytest.mark.parametrize("index", [0, 2])
    def test_composition_of_public_ops(self, index):
        p = random_params(5).blocks[index]
        x = np.random.default_rng(1).normal(size=(3, 15))
        c = conv1d_depthwise_causal(x, p.kernels, p.dilation)
        if p.norm_kind == "layernorm":
            h = layernorm(transpose(c), p.norm_gain, p.norm_bias, p.norm_eps)
        else:
            h = rmsnorm(transpose(c), p.norm_gain, p.norm_eps)
        if p.layerscale_gamma is not None:
            h = mul_along(h, p.layerscale_gamma, 1)
        a, mats = sparse_causal_attention(
            relu(h), p.attn_proj_q, p.attn_proj_k, p.attn_proj_v, p.attn_proj_o, p.heads, p.sparsity_threshold
        )
        expected = add(x, c, transpose(a)).data
        y, rec = dycast_block_forward(x, p, index)
        np.testing.assert_array_equal(y.data, expected)
        np.testing.assert_array_equal(rec.matrices, mats)
        assert rec.block == index


class TestForward:
    def test_zero_head_predicts_bias(self):
        p = build_model(RunConfig(), 3, 0)
        p.head_bias = np.array([0.25])
        out = predict(np.random.default_rng(0).normal(size=(3, 20)), p)
        assert out.shape == (19,)
        np.testing.assert_array_equal(out, np.full(19, 0.25))

    def test_too_short(self):
        with pytest.raises(InsufficientLengthError):
            model_forward(np.ones((3, 1)), build_model(RunConfig(), 3, 0))

    def test_repeatable(self):
        p = random_params(2)
        X = np.random.default_rng(2).normal(size=(3, 40))
        assert predict(X, p).tobytes() == predict(X, p).tobytes()

    def test_attention_records(self):
        res = model_forward(np.random.default_rng(0).normal(size=(3, 10)), random_params(0))
        assert [r.block for r in res.attention] == [0, 1, 2]
        assert all(r.matrices.shape == (3, 9, 9) for r in res.attention)
        assert res.channel_weights.sum() == pytest.approx(1.0)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2**31), T=st.integers(3, 30), data=st.data())
    def test_end_to_end_causality(self, seed, T, data):
        t = data.draw(st.integers(0, T - 3))  # prediction index t uses inputs up to t
        p = random_params(seed % 1000)
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(3, T))
        X2 = X.copy()
        X2[:, t + 1 :] = rng.normal(size=(3, T - t - 1))
        a, b = predict(X, p), predict(X2, p)
        assert np.array_equal(a[: t + 1], b[: t + 1])


class TestBuildModel:
    def test_deterministic(self):
        a = build_model(RunConfig(), 4, 1111)
        b = build_model(RunConfig(), 4, 1111)
        assert a.to_json() == b.to_json()
        assert build_model(RunConfig(), 4, 1112).to_json() != a.to_json()

    def test_uniform_channel_weights(self):
        _, w = channel_attention_apply(np.ones((5, 2)), build_model(RunConfig(), 5, 0).channel_alpha)
        np.testing.assert_allclose(w, 0.2, rtol=1e-15)

    def test_default_profile_layout(self):
        p = build_model(RunConfig(), 5, 0)
        assert [b.dilation for b in p.blocks] == [1, 2, 4]
        assert [b.norm_kind for b in p.blocks] == ["layernorm", "layernorm", "rmsnorm"]
        assert [b.layerscale_gamma is not None for b in p.blocks] == [False, False, True]
        np.testing.assert_array_equal(p.blocks[2].layerscale_gamma, np.full(5, 1e-4))
        assert all(b.kernel_size == 4 and b.heads == 5 and b.sparsity_threshold == 0.01 for b in p.blocks)
        assert p.receptive_field() == 21

    def test_alternative_profile(self):
        p = build_model(RunConfig(profile="table2"), 4, 0)
        assert [b.dilation for b in p.blocks] == [1, 4]
        assert [b.kernel_size for b in p.blocks] == [6, 6]
        assert p.receptive_field() == 25

    def test_init_ranges(self):
        p = build_model(RunConfig(), 4, 9)
        for b in p.blocks:
            assert np.all(np.abs(b.kernels) <= math.sqrt(1 / 4))
            for m in (b.attn_proj_q, b.attn_proj_k, b.attn_proj_v, b.attn_proj_o):
                assert np.all(np.abs(m) <= math.sqrt(1 / 4))
        assert not np.any(p.channel_alpha) and not np.any(p.head_weights)

    def test_needs_two_series(self):
        with pytest.raises(ConfigError):
            build_model(RunConfig(), 1, 0)

    def test_heads_must_divide(self):
        with pytest.raises(ConfigError):
            build_model(RunConfig(heads=2), 5, 0)


class TestSerialisation:
    def test_round_trip(self):
        p = random_params(4)
        q = ModelParams.from_json(p.to_json())
        assert q.to_json() == p.to_json()
        X = np.random.default_rng(0).normal(size=(3, 25))
        np.testing.assert_array_equal(predict(X, p), predict(X, q))

    def test_versioned(self):
        d = json.loads(build_model(RunConfig(), 2, 0).to_json())
        assert d["format"] == "dycast-model" and d["version"] == 1
        d["version"] = 99
        with pytest.raises(ValueError):
            ModelParams.from_dict(d)
