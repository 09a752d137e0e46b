import json

import numpy as np
import pytest

from mmbeddings.baselines import IgnoreModel, make_model
from mmbeddings.simgen import SimConfig, simulate
from mmbeddings.trainer import (
    EmbeddingMatrices,
    TabularDataset,
    TrainConfig,
    TrainingDiverged,
    extract_embeddings,
    fine_tune_decoder,
    fit,
    load_checkpoint,
    predict,
    save_checkpoint,
    split_validation,
    train,
)
from mmbeddings.variational import CatFeatureSpec, MMbeddings, ModelConfig


def small_cfg(q=30, task="regression", **kw):
    kw.setdefault("encoder_hidden", (32, 32))
    return ModelConfig(p=10, features=[CatFeatureSpec(q, 10)], task=task, **kw)


@pytest.fixture(scope="module")
def data():
    return simulate(SimConfig(q=30, n=400, seed=1))


class TestSplit:
    def test_disjoint_and_complete(self):
        codes = np.random.default_rng(0).integers(0, 20, 300)
        tr, va = split_validation(codes, 0.1, np.random.default_rng(1))
        assert np.intersect1d(tr, va).size == 0
        assert np.union1d(tr, va).size == 300
        assert abs(va.size - 30) <= 20

    def test_levels_keep_a_training_row(self):
        codes = np.repeat(np.arange(50), 2)
        tr, va = split_validation(codes, 0.5, np.random.default_rng(2))
        assert set(codes[tr]) == set(range(50))


class _ScriptedVal(IgnoreModel):
    """Ignore model whose validation losses follow a fixed script."""

    def __init__(self, config, script, **kw):
        super().__init__(config, **kw)
        self.script = list(script)
        self.snaps = []

    def validation_loss(self, X, y, codes, embeddings):
        self.snaps.append(self.params.snapshot())
        return self.script[len(self.snaps) - 1]


class TestTrain:
    def test_patience_one(self, data):
        model = _ScriptedVal(small_cfg(), [3.0, 4.0, 5.0, 6.0])
        report = train(model, data, TrainConfig(patience=1, max_epochs=10))
        assert report.val_loss == [3.0, 4.0]
        assert report.best_epoch == 0
        for n, v in model.snaps[0].items():
            np.testing.assert_array_equal(model.params[n], v)

    def test_patience_counts_non_improving_epochs(self, data):
        model = _ScriptedVal(small_cfg(), [5.0, 4.0, 4.0, 4.5, 3.0, 9.0, 9.0, 9.0])
        report = train(model, data, TrainConfig(patience=3, max_epochs=20))
        assert report.val_loss == [5.0, 4.0, 4.0, 4.5, 3.0, 9.0, 9.0, 9.0]
        assert report.best_epoch == 4

    def test_keep_last(self, data):
        model = _ScriptedVal(small_cfg(), [3.0, 4.0])
        train(model, data, TrainConfig(patience=1), keep_last=True)
        assert not np.array_equal(model.params["dec.0.W"], model.snaps[0]["dec.0.W"])

    def test_restores_best_weights(self, data):
        model = MMbeddings(small_cfg(), 0)
        report = train(model, data, TrainConfig(max_epochs=15, patience=3, seed=2))
        tr, va = report.train_idx, report.val_idx
        emb = model.inference_embeddings(data.X[tr], data.y[tr], data.codes[tr])
        again = model.validation_loss(data.X[va], data.y[va], data.codes[va], emb)
        assert again == report.best_val_loss == min(report.val_loss)

    @pytest.mark.parametrize("method", ["mmbed", "embed", "ignore", "rebed", "mean_enc", "embed_l2"])
    def test_loss_decreases_early(self, data, method):
        model = make_model(method, small_cfg(), 0)
        report = train(model, data, TrainConfig(max_epochs=5, patience=10, seed=0))
        assert report.train_loss[-1] < report.train_loss[0]

    def test_deterministic(self, data):
        runs = []
        for _ in range(2):
            model = MMbeddings(small_cfg(), 5)
            runs.append(train(model, data, TrainConfig(max_epochs=4, seed=3)))
        assert runs[0].val_loss == runs[1].val_loss
        assert runs[0].train_loss == runs[1].train_loss

    def test_divergence(self, data):
        class Broken(IgnoreModel):
            def loss_and_grad(self, X, y, codes, rng=None, noise=None):
                return float("nan")

        with pytest.raises(TrainingDiverged) as info:
            train(Broken(small_cfg()), data, TrainConfig(max_epochs=3))
        assert info.value.epoch == 0

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(patience=0)
        with pytest.raises(ValueError):
            TrainConfig.from_dict({"epochs": 3})


class TestExtract:
    def test_single_observation_level(self):
        cfg = small_cfg(q=5)
        model = MMbeddings(cfg, 0)
        rng = np.random.default_rng(0)
        X, y = rng.uniform(-1, 1, (7, 10)), rng.normal(size=7)
        codes = np.array([0, 0, 1, 1, 1, 2, 0])
        emb = extract_embeddings(model, X, y, codes)
        mus, _, _ = model.encode(X, y)
        np.testing.assert_array_equal(emb.matrices[0][2], mus[0][5])
        assert not emb.matrices[0][3:].any()
        np.testing.assert_array_equal(emb.counts[0], [3, 3, 1, 0, 0])

    def test_naive_loop_and_idempotent(self):
        model = MMbeddings(small_cfg(q=12, shrinkage="heuristic"), 1)
        rng = np.random.default_rng(1)
        X, y, codes = rng.uniform(-1, 1, (60, 10)), rng.normal(size=60), rng.integers(0, 12, 60)
        a = extract_embeddings(model, X, y, codes)
        b = extract_embeddings(model, X, y, codes)
        np.testing.assert_array_equal(a.matrices[0], b.matrices[0])
        mus, _, _ = model.encode(X, y)
        for j in range(12):
            rows = [mus[0][i] for i in range(60) if codes[i] == j]
            if rows:
                expect = sum(rows) / len(rows) * (len(rows) / (len(rows) + 1))
                np.testing.assert_allclose(a.matrices[0][j], expect, rtol=1e-13, atol=1e-15)

    def test_chunking_invariant(self):
        model = MMbeddings(small_cfg(q=8), 2)
        rng = np.random.default_rng(2)
        X, y, codes = rng.uniform(-1, 1, (50, 10)), rng.normal(size=50), rng.integers(0, 8, (50, 1))
        whole = model.inference_embeddings(X, y, codes)
        chunked = model.inference_embeddings(X, y, codes, chunk=7)
        np.testing.assert_allclose(whole[0], chunked[0], rtol=1e-13, atol=1e-15)


class TestFineTune:
    def test_zero_epochs_no_change(self, data):
        model = MMbeddings(small_cfg(), 0)
        emb = extract_embeddings(model, data.X, data.y, data.codes)
        before = model.params.snapshot()
        fine_tune_decoder(model, emb, data, TrainConfig(fine_tune_epochs=0))
        for n, v in before.items():
            np.testing.assert_array_equal(model.params[n], v)

    def test_only_decoder_moves(self, data):
        model = MMbeddings(small_cfg(), 0)
        emb = extract_embeddings(model, data.X, data.y, data.codes)
        frozen = [m.copy() for m in emb.matrices]
        before = model.params.snapshot()
        cfg = TrainConfig(fine_tune_epochs=5, seed=1)
        tr, va = split_validation(data.codes, 0.1, np.random.default_rng(0))
        start = model.validation_loss(data.X[va], data.y[va], data.codes[va], emb.matrices)
        report = fine_tune_decoder(model, emb, data, cfg, tr, va)
        for n, v in before.items():
            if n.startswith("enc."):
                np.testing.assert_array_equal(model.params[n], v)
        assert any(not np.array_equal(model.params[n], before[n]) for n in model.decoder_names())
        np.testing.assert_array_equal(emb.matrices[0], frozen[0])
        end = model.validation_loss(data.X[va], data.y[va], data.codes[va], emb.matrices)
        assert end <= start
        assert len(report.val_loss) <= 5


class TestPredict:
    def setup_method(self):
        self.model = MMbeddings(small_cfg(q=6), 3)
        rng = np.random.default_rng(3)
        self.X = rng.uniform(-1, 1, (10, 10))
        self.emb = EmbeddingMatrices([rng.normal(size=(6, 10))], [np.ones(6, dtype=int)])

    def test_loop_oracle(self):
        codes = np.random.default_rng(4).integers(0, 6, 10)
        batch = predict(self.model, self.emb, self.X, codes)
        single = [predict(self.model, self.emb, self.X[i : i + 1], codes[i : i + 1])[0] for i in range(10)]
        np.testing.assert_allclose(batch, single, rtol=1e-13, atol=1e-14)

    def test_duplicates(self):
        X = np.tile(self.X[:1], (3, 1))
        out = predict(self.model, self.emb, X, [2, 2, 2])
        assert out[0] == out[1] == out[2]

    def test_unseen_level_is_zero_embedding(self):
        emb = EmbeddingMatrices([self.emb.matrices[0].copy()], [np.array([1, 1, 1, 1, 1, 0])])
        emb.matrices[0][5] = 0.0
        zero = EmbeddingMatrices([np.zeros((6, 10))], emb.counts)
        np.testing.assert_array_equal(
            predict(self.model, emb, self.X[:2], [5, 5]), predict(self.model, zero, self.X[:2], [0, 0])
        )

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            predict(self.model, self.emb, self.X[:1], [6])

    def test_classification_probabilities(self):
        model = MMbeddings(small_cfg(q=6, task="classification"), 3)
        out = predict(model, self.emb, self.X, np.arange(10) % 6)
        assert np.all((out > 0) & (out < 1))


class TestFitAndCheckpoint:
    @pytest.mark.parametrize("method", ["mmbed", "embed", "mean_enc", "ignore", "rebed"])
    def test_round_trip(self, data, tmp_path, method):
        res = fit(method, small_cfg(), data, TrainConfig(max_epochs=3, fine_tune_epochs=2, seed=4))
        path = str(tmp_path / "m.json")
        save_checkpoint(path, res.model, res.embeddings, {"note": 1})
        model, emb, extra = load_checkpoint(path)
        assert extra == {"note": 1}
        for n in res.model.params:
            np.testing.assert_array_equal(model.params[n], res.model.params[n])
        np.testing.assert_array_equal(
            predict(model, emb, data.X, data.codes), predict(res.model, res.embeddings, data.X, data.codes)
        )
        assert not list(tmp_path.glob("*.tmp*"))

    def test_interrupted_write_leaves_old_file(self, data, tmp_path, monkeypatch):
        res = fit("ignore", small_cfg(), data, TrainConfig(max_epochs=2))
        path = str(tmp_path / "m.json")
        save_checkpoint(path, res.model, res.embeddings)
        original = open(path).read()

        def boom(*args, **kwargs):
            raise KeyboardInterrupt

        monkeypatch.setattr(json, "dump", boom)
        with pytest.raises(KeyboardInterrupt):
            save_checkpoint(path, res.model, res.embeddings)
        assert open(path).read() == original
        assert not list(tmp_path.glob("*.tmp*"))

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "x.json"
        path.write_text('{"format": "other"}')
        with pytest.raises(ValueError):
            load_checkpoint(str(path))

    def test_tabular_dataset(self):
        ds = TabularDataset(np.zeros((3, 10)), [0, 1, 2], [1, 2, 3])
        res = fit("ignore", small_cfg(q=3), ds, TrainConfig(max_epochs=1, val_frac=0.34))
        assert res.report.n_params["total"] == 231
