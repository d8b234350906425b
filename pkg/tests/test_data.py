import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dycast.data import (
    DataError,
    Dataset,
    SynthEdge,
    SynthSpec,
    dataset_to_csv,
    generate_synthetic,
    load_csv,
    lowpass_filter,
    parse_csv,
    preprocess,
    zscore_normalize,
)


class TestZScore:
    def test_three_values(self):
        out, mean, std = zscore_normalize(np.array([[1.0, 2.0, 3.0]]))
        np.testing.assert_allclose(out, [[-1.224745, 0.0, 1.224745]], atol=1e-6)
        assert mean[0] == 2.0 and std[0] == pytest.approx(np.sqrt(2 / 3))

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**31), n=st.integers(1, 4), T=st.integers(2, 50))
    def test_idempotent_and_standard(self, seed, n, T):
        X = np.random.default_rng(seed).normal(3.0, 2.0, size=(n, T))
        once, _, _ = zscore_normalize(X)
        twice, _, _ = zscore_normalize(once)
        np.testing.assert_allclose(once.mean(axis=1), 0.0, atol=1e-12)
        np.testing.assert_allclose(once.std(axis=1), 1.0, rtol=1e-12)
        np.testing.assert_allclose(twice, once, atol=1e-12)

    def test_constant_series_is_named(self):
        X = np.array([[1.0, 2.0], [5.0, 5.0]])
        with pytest.raises(DataError, match="flat"):
            zscore_normalize(X, ["a", "flat"])


class TestLowpass:
    def test_window_one_is_identity(self):
        X = np.array([[1.0, -4.0, 2.5]])
        np.testing.assert_array_equal(lowpass_filter(X, 1), X)

    def test_alternating_signal(self):
        out = lowpass_filter(np.array([[0.0, 3.0, 0.0, 3.0, 0.0, 3.0]]), 3)
        # warm-up steps average what is available; afterwards 1 and 2 alternate
        np.testing.assert_allclose(out, [[0.0, 1.5, 1.0, 2.0, 1.0, 2.0]])

    def test_constant_unchanged(self):
        X = np.full((2, 9), 4.2)
        np.testing.assert_allclose(lowpass_filter(X, 5), X, rtol=1e-15)

    def test_causal(self):
        X = np.random.default_rng(0).normal(size=(1, 20))
        Y = X.copy()
        Y[0, 10:] = 0.0
        np.testing.assert_array_equal(lowpass_filter(X, 5)[:, :10], lowpass_filter(Y, 5)[:, :10])

    @pytest.mark.parametrize("w", [0, 2, -1])
    def test_window_must_be_positive_odd(self, w):
        with pytest.raises(DataError):
            lowpass_filter(np.ones((1, 5)), w)

    def test_preprocess_order(self):
        ds = Dataset(["a"], np.array([[0.0, 3.0, 0.0, 3.0, 0.0, 3.0]]))
        out = preprocess(ds, zscore=True, lowpass_window=3)
        expected, _, _ = zscore_normalize(lowpass_filter(ds.values, 3))
        np.testing.assert_array_equal(out.values, expected)
        np.testing.assert_array_equal(preprocess(ds, zscore=False).values, ds.values)


class TestCsv:
    def test_shape_and_names(self):
        ds = parse_csv("a,b,c\n1,2,3\n4,5,6\n7,8,9\n")
        assert ds.names == ["a", "b", "c"]
        assert ds.values.shape == (3, 3)
        np.testing.assert_array_equal(ds.values[1], [2, 5, 8])

    def test_trailing_blank_lines(self):
        assert parse_csv("a,b\n1,2\n3,4\n\n\n").length == 2

    def test_non_numeric_cell_located(self):
        text = "a,b,c\n1,2,3\n1,2,3\n4,abc,6\n"
        with pytest.raises(DataError, match=r"'abc'.*row 4, col 2"):
            parse_csv(text)

    def test_non_finite_cell(self):
        with pytest.raises(DataError, match="non-finite"):
            parse_csv("a,b\n1,2\nnan,3\n")

    def test_ragged_row(self):
        with pytest.raises(DataError, match="row 3"):
            parse_csv("a,b\n1,2\n3\n")

    def test_duplicate_header(self):
        with pytest.raises(DataError, match="duplicate"):
            parse_csv("a,a\n1,2\n3,4\n")

    def test_needs_two_steps(self):
        with pytest.raises(DataError, match="at least 2"):
            parse_csv("a,b\n1,2\n")
        with pytest.raises(DataError, match="empty"):
            parse_csv("\n")

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="cannot read"):
            load_csv(tmp_path / "nope.csv")

    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(5)
        ds = Dataset(["x", "y z"], rng.normal(size=(2, 30)) * 1e3)
        path = tmp_path / "d.csv"
        path.write_text(dataset_to_csv(ds))
        back = load_csv(path)
        assert back.names == ds.names
        np.testing.assert_allclose(back.values, ds.values, rtol=1e-15)


def chain_spec(**kw):
    base = dict(n=2, t=1000, edges=[SynthEdge(0, 1, 0.9, 2)], noise_std=0.01, seed=3)
    base.update(kw)
    return SynthSpec(**base)


class TestSynthetic:
    def test_no_edges_gives_empty_truth(self):
        ds = generate_synthetic(SynthSpec(n=3, t=50, seed=1))
        assert ds.truth is not None and ds.truth.edges == []
        assert ds.names == ["X1", "X2", "X3"]

    def test_lagged_copy(self):
        ds = generate_synthetic(chain_spec())
        x1, x2 = ds.values
        # both series carry the same noise level, so the population
        # correlation is beta / sqrt(beta^2 + 1) regardless of noise_std
        expected = 0.9 / np.sqrt(0.81 + 1.0)
        assert np.corrcoef(x2[2:], x1[:-2])[0, 1] == pytest.approx(expected, abs=0.05)
        resid = x2[2:] - 0.9 * x1[:-2]
        assert resid.std() == pytest.approx(0.01, rel=0.1)
        (edge,) = ds.truth.edges
        assert (edge.cause, edge.effect, edge.delay) == ("X1", "X2", 2)

    def test_tanh_applied_to_drive(self):
        spec = chain_spec(edges=[SynthEdge(0, 1, 0.9, 1)], nonlinearity="tanh", t=20)
        X = generate_synthetic(spec).values
        noise = generate_synthetic(SynthSpec(n=2, t=20, noise_std=0.01, seed=3)).values
        np.testing.assert_allclose(X[1, 1:], noise[1, 1:] + np.tanh(0.9 * X[0, :-1]), rtol=1e-14)

    def test_deterministic_per_seed(self):
        a = generate_synthetic(chain_spec()).values
        assert np.array_equal(a, generate_synthetic(chain_spec()).values)
        assert not np.array_equal(a, generate_synthetic(chain_spec(seed=4)).values)

    def test_bounded_on_long_runs(self):
        spec = SynthSpec(
            n=3,
            t=10_000,
            edges=[SynthEdge(0, 1, 0.6, 1), SynthEdge(1, 2, -0.3, 3), SynthEdge(2, 0, 0.9, 2)],
            noise_std=0.1,
            seed=8,
        )
        assert np.all(generate_synthetic(spec).values.std(axis=1) < 100 * spec.noise_std)

    def test_inflow_guard(self):
        with pytest.raises(DataError, match="0.95"):
            SynthSpec(n=3, t=10, edges=[SynthEdge(0, 2, 0.5, 1), SynthEdge(1, 2, -0.5, 1)])

    @pytest.mark.parametrize(
        "edge",
        [SynthEdge(0, 5, 0.1, 1), SynthEdge(0, 1, 0.1, 0)],
    )
    def test_bad_edges(self, edge):
        with pytest.raises(DataError):
            SynthSpec(n=2, t=10, edges=[edge])

    def test_spec_round_trip(self, tmp_path):
        spec = chain_spec(names=["cause", "effect"])
        path = tmp_path / "s.json"
        path.write_text(json.dumps(spec.to_dict()))
        back = SynthSpec.load(path)
        assert back == spec
        assert generate_synthetic(back).names == ["cause", "effect"]

    def test_bad_spec_file(self, tmp_path):
        path = tmp_path / "s.json"
        path.write_text('{"n": 2}')
        with pytest.raises(DataError, match="s.json"):
            SynthSpec.load(path)
