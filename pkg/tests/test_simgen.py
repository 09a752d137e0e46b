import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmbeddings.metrics import auc_b_pipeline
from mmbeddings.simgen import (
    SimConfig,
    SimConfigError,
    f_true,
    gen_codes,
    gen_downstream_binary,
    gen_embeddings,
    gen_features,
    gen_group_sizes,
    gen_response,
    load_dataset,
    save_dataset,
    sidecar_path,
    simulate,
    simulate_test,
)

from oracles import scalar_f


class TestFeatures:
    def test_support(self):
        X = gen_features(1000, 10, np.random.default_rng(0))
        assert X.shape == (1000, 10)
        assert X.min() > -1.0 and X.max() < 1.0

    def test_mean(self):
        X = gen_features(100_000, 1, np.random.default_rng(1))
        assert abs(X.mean()) < 0.01

    def test_seeded(self):
        a = gen_features(5, 3, np.random.default_rng(2))
        b = gen_features(5, 3, np.random.default_rng(2))
        np.testing.assert_array_equal(a, b)


class TestGroups:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 5000), st.integers(1, 300), st.integers(0, 2**31))
    def test_sum(self, n, q, seed):
        counts = gen_group_sizes(n, q, np.random.default_rng(seed))
        assert counts.sum() == n and counts.shape == (q,) and counts.min() >= 0

    def test_single_level(self):
        assert gen_group_sizes(37, 1, np.random.default_rng(0)).tolist() == [37]

    def test_mean_size(self):
        rng = np.random.default_rng(1)
        draws = np.stack([gen_group_sizes(1000, 10, rng) for _ in range(2000)])
        # each n_j ~ Binomial(1000, 0.1): sd 9.49, sd of the mean over 2000 draws ~ 0.21
        np.testing.assert_allclose(draws.mean(axis=0), 100.0, atol=1.0)

    def test_codes_match_counts(self):
        rng = np.random.default_rng(3)
        codes = gen_codes(500, 7, rng)
        counts = gen_group_sizes(500, 7, np.random.default_rng(3))
        np.testing.assert_array_equal(np.bincount(codes, minlength=7), counts)


class TestFTrue:
    def test_zero_inputs(self):
        assert f_true(np.zeros((1, 10)), np.zeros((1, 10)), [0])[0] == 1.1

    def test_clip_ceiling(self):
        X = np.zeros((1, 10))
        X[0, 1] = 1.0
        B = np.zeros((1, 10))
        B[0, 1] = 99.0
        # 0.1 + clip(100) + cos(0) = 0.1 + 5 + 1
        assert f_true(X, B, [0])[0] == pytest.approx(6.1, abs=1e-15)

    def test_scalar_oracle(self):
        rng = np.random.default_rng(4)
        q = 50
        X = rng.uniform(-1, 1, (10_000, 10))
        B = rng.normal(0, 1, (q, 10))
        codes = rng.integers(0, q, 10_000)
        f = f_true(X, B, codes)
        expect = np.array([scalar_f(X[i], B[codes[i]]) for i in range(10_000)])
        np.testing.assert_allclose(f, expect, rtol=0, atol=1e-12)

    def test_features_add(self):
        rng = np.random.default_rng(5)
        X = rng.uniform(-1, 1, (20, 10))
        B1, B2 = rng.normal(size=(4, 10)), rng.normal(size=(3, 10))
        codes = np.column_stack([rng.integers(0, 4, 20), rng.integers(0, 3, 20)])
        f = f_true(X, [B1, B2], codes)
        expect = [scalar_f(X[i], B1[codes[i, 0]] + B2[codes[i, 1]]) for i in range(20)]
        np.testing.assert_allclose(f, expect, atol=1e-12)

    def test_wrong_width(self):
        with pytest.raises(SimConfigError):
            f_true(np.zeros((1, 5)), np.zeros((1, 10)), [0])

    def test_config_rejects_other_widths(self):
        with pytest.raises(SimConfigError):
            SimConfig(q=10, p=5)
        with pytest.raises(SimConfigError):
            SimConfig(q=10, d=4)


class TestResponse:
    def test_noiseless(self):
        f = np.random.default_rng(0).normal(size=50)
        y, thr = gen_response(f, 0.0, "regression", np.random.default_rng(1))
        np.testing.assert_array_equal(y, f)
        assert thr is None

    def test_balanced_classes(self):
        for n in (999, 1000):
            f = np.random.default_rng(n).normal(size=n)
            y, _ = gen_response(f, 1.0, "classification", np.random.default_rng(2))
            assert abs(y.mean() - 0.5) <= 1.0 / n

    def test_residual_variance(self):
        n = 100_000
        y, _ = gen_response(np.zeros(n), 2.0, "regression", np.random.default_rng(3))
        # sd of the sample variance of normals: sigma^2 sqrt(2 / (n - 1))
        assert abs(y.var(ddof=1) - 2.0) < 3 * 2.0 * math.sqrt(2.0 / (n - 1))


class TestDownstream:
    def test_zero_weights_coin_flips(self):
        B = np.random.default_rng(0).normal(size=(10_000, 10))
        w, labels = gen_downstream_binary(B, np.random.default_rng(1), weight_scale=0.0)
        assert not w.any()
        assert abs(labels.mean() - 0.5) < 3 * 0.5 / math.sqrt(10_000)

    def test_large_weights_saturate(self):
        B = np.random.default_rng(2).normal(size=(2000, 10))
        w, labels = gen_downstream_binary(B, np.random.default_rng(3), weight_scale=1e4)
        agree = np.mean(labels == (B @ w > 0))
        assert agree > 0.999

    def test_true_embeddings_recover_labels(self):
        B = gen_embeddings(1000, 10, 1.0, np.random.default_rng(4))
        assert auc_b_pipeline(B, B, np.random.default_rng(5)) > 0.9


class TestSimulate:
    def test_shapes_and_defaults(self):
        ds = simulate(SimConfig(q=100, seed=0))
        assert ds.X.shape == (1000, 10) and ds.codes.shape == (1000, 1)
        assert ds.B_true[0].shape == (100, 10)
        assert ds.codes.min() >= 0 and ds.codes.max() < 100

    def test_deterministic(self):
        a, b = simulate(SimConfig(q=50, seed=7)), simulate(SimConfig(q=50, seed=7))
        for attr in ("X", "codes", "y", "f_values"):
            np.testing.assert_array_equal(getattr(a, attr), getattr(b, attr))
        c = simulate(SimConfig(q=50, seed=8))
        assert not np.array_equal(a.X, c.X)

    def test_tasks_share_draws(self):
        reg = simulate(SimConfig(q=50, seed=3))
        cls = simulate(SimConfig(q=50, seed=3, task="classification"))
        np.testing.assert_array_equal(reg.X, cls.X)
        np.testing.assert_array_equal(reg.codes, cls.codes)
        np.testing.assert_array_equal(reg.B_true[0], cls.B_true[0])
        np.testing.assert_array_equal(cls.y, (reg.y > cls.threshold).astype(float))
        assert cls.threshold == np.median(reg.y)

    def test_embedding_variance(self):
        ds = simulate(SimConfig(q=1000, sigma2_b=2.0, seed=1))
        assert abs(ds.B_true[0].var() / 2.0 - 1.0) < 0.05

    def test_test_set_shares_embeddings(self):
        ds = simulate(SimConfig(q=40, seed=2, task="classification"))
        test = simulate_test(ds, 500)
        assert test.B_true[0] is ds.B_true[0]
        assert test.threshold == ds.threshold
        assert not np.array_equal(test.X[:10], ds.X[:10])

    def test_multi_feature(self):
        ds = simulate(SimConfig(q=[30, 20], n=400, seed=4))
        assert ds.codes.shape == (400, 2) and ds.cardinalities == [30, 20]
        np.testing.assert_array_equal(ds.f_values, f_true(ds.X, ds.B_true, ds.codes))

    def test_config_validation(self):
        for bad in ({"q": 0}, {"sigma2_b": 0.0}, {"task": "ranking"}, {"n": 0}):
            with pytest.raises(SimConfigError):
                SimConfig(**bad)
        with pytest.raises(SimConfigError, match="unknown"):
            SimConfig.from_dict({"q": 10, "qq": 3})


class TestSerialization:
    def test_round_trip(self, tmp_path):
        ds = simulate(SimConfig(q=20, n=200, seed=5, task="classification"))
        path = str(tmp_path / "d.csv")
        save_dataset(ds, path)
        back = load_dataset(path)
        np.testing.assert_array_equal(back.X, ds.X)
        np.testing.assert_array_equal(back.codes, ds.codes)
        np.testing.assert_array_equal(back.y, ds.y)
        np.testing.assert_array_equal(back.B_true[0], ds.B_true[0])
        np.testing.assert_array_equal(back.w, ds.w)
        np.testing.assert_array_equal(back.labels_b, ds.labels_b)
        assert back.threshold == ds.threshold
        assert back.config == ds.config

    def test_sidecar_contents(self, tmp_path):
        ds = simulate(SimConfig(q=5, n=30, seed=6))
        path = str(tmp_path / "d.csv")
        save_dataset(ds, path)
        side = json.loads(open(sidecar_path(path)).read())
        assert side["config"]["seed"] == 6 and len(side["w"]) == 10
        header = open(path).readline().strip().split(",")
        assert header == [f"x{i}" for i in range(1, 11)] + ["code1", "y"]

    def test_byte_identical(self, tmp_path):
        for name in ("a", "b"):
            save_dataset(simulate(SimConfig(q=10, n=50, seed=9)), str(tmp_path / f"{name}.csv"))
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
        assert not list(tmp_path.glob("*.tmp"))
