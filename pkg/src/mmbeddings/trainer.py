"""Minibatch training with early stopping, embedding extraction and prediction."""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .baselines import make_model
from .nn import Adam, NumericError, make_optimizer
from .variational import BaseModel, ModelConfig, as_codes


class TrainingDiverged(NumericError):
    def __init__(self, epoch: int, detail: str = ""):
        super().__init__(f"non-finite loss at epoch {epoch}" + (f": {detail}" if detail else ""))
        self.epoch = epoch


@dataclass
class TabularDataset:
    X: np.ndarray
    codes: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.codes = as_codes(self.codes)
        self.y = np.asarray(self.y, dtype=np.float64)


@dataclass
class TrainConfig:
    max_epochs: int = 1000
    batch_size: int | None = None  # None -> cardinality of the first feature
    patience: int = 10
    val_frac: float = 0.10
    lr: float = 1e-3
    optimizer: str = "adam"
    fine_tune_epochs: int = 20
    fine_tune_patience: int = 5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.val_frac < 1.0:
            raise ValueError("val_frac must be in (0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**data)


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    best_epoch: int = -1
    n_params: dict = field(default_factory=dict)
    train_idx: np.ndarray | None = None
    val_idx: np.ndarray | None = None

    @property
    def best_val_loss(self) -> float:
        return self.val_loss[self.best_epoch]


@dataclass
class EmbeddingMatrices:
    matrices: list[np.ndarray]
    counts: list[np.ndarray]


def split_validation(codes, val_frac: float, rng: np.random.Generator):
    """Random split; a level with >= 2 rows never loses all of them to validation."""
    codes = as_codes(codes)
    n = codes.shape[0]
    perm = rng.permutation(n)
    n_val = int(round(val_frac * n))
    in_val = np.zeros(n, dtype=bool)
    in_val[perm[:n_val]] = True
    for k in range(codes.shape[1]):
        c = codes[:, k]
        q = int(c.max()) + 1 if n else 0
        total = np.bincount(c, minlength=q)
        in_train = np.bincount(c[~in_val], minlength=q)
        for level in np.flatnonzero((total >= 2) & (in_train == 0)):
            rows = np.flatnonzero((c == level) & in_val)
            in_val[rows[0]] = False
    return np.flatnonzero(~in_val), np.flatnonzero(in_val)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for s in range(0, n, batch_size):
        yield perm[s : s + batch_size]


def train(model: BaseModel, data, config: TrainConfig, keep_last: bool = False) -> TrainReport:
    """Fit ``model`` with early stopping on a held-out validation share.

    The model ends at the parameters of its best validation epoch.
    """
    streams = np.random.SeedSequence(config.seed).spawn(3)
    split_rng, batch_rng, noise_rng = (np.random.default_rng(s) for s in streams)
    X, y, codes = data.X, np.asarray(data.y, dtype=np.float64), as_codes(data.codes)
    tr, va = split_validation(codes, config.val_frac, split_rng)
    if tr.size == 0:
        raise ValueError("empty training split")
    Xtr, ytr, ctr = X[tr], y[tr], codes[tr]
    Xva, yva, cva = X[va], y[va], codes[va]
    model.prepare(Xtr, ytr, ctr)
    batch_size = config.batch_size or model.config.features[0].q
    opt = make_optimizer(config.optimizer, model.params, config.lr)
    report = TrainReport(train_idx=tr, val_idx=va, n_params=model.count_parameters())
    best, best_snap, since = math.inf, model.params.snapshot(), 0
    for epoch in range(config.max_epochs):
        t0 = time.perf_counter()
        total, count = 0.0, 0
        for idx in _batches(tr.size, batch_size, batch_rng):
            model.params.zero_grad()
            loss = model.loss_and_grad(Xtr[idx], ytr[idx], ctr[idx], rng=noise_rng)
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch)
            try:
                opt.step()
            except NumericError as exc:
                raise TrainingDiverged(epoch, str(exc)) from exc
            total += loss
            count += idx.size
        emb = model.inference_embeddings(Xtr, ytr, ctr)
        vl = model.validation_loss(Xva, yva, cva, emb) if va.size else total / count
        if not math.isfinite(vl):
            raise TrainingDiverged(epoch, "validation loss")
        report.train_loss.append(total / count)
        report.val_loss.append(vl)
        report.epoch_seconds.append(time.perf_counter() - t0)
        if vl < best:
            best, best_snap, since = vl, model.params.snapshot(), 0
            report.best_epoch = epoch
        else:
            since += 1
            if since >= config.patience:
                break
    if not keep_last:
        model.params.restore(best_snap)
    return report


def extract_embeddings(model: BaseModel, X, y, codes) -> EmbeddingMatrices:
    codes = as_codes(codes, model.n_features)
    mats = model.inference_embeddings(X, y, codes)
    counts = [np.bincount(codes[:, k], minlength=f.q) for k, f in enumerate(model.config.features)]
    return EmbeddingMatrices(mats, counts)


def fine_tune_decoder(model: BaseModel, embeddings: EmbeddingMatrices, data, config: TrainConfig,
                      train_idx=None, val_idx=None) -> TrainReport:
    """Train only the decoder against frozen embedding matrices.

    The pre-fine-tune state counts as epoch -1, so the decoder never ends
    worse on validation than it started.
    """
    report = TrainReport(train_idx=train_idx, val_idx=val_idx)
    if config.fine_tune_epochs <= 0:
        return report
    streams = np.random.SeedSequence([config.seed, 7]).spawn(2)
    split_rng, batch_rng = (np.random.default_rng(s) for s in streams)
    X, y, codes = data.X, np.asarray(data.y, dtype=np.float64), as_codes(data.codes)
    if train_idx is None:
        train_idx, val_idx = split_validation(codes, config.val_frac, split_rng)
        report.train_idx, report.val_idx = train_idx, val_idx
    mats = embeddings.matrices
    names = model.decoder_names() + model.params.names(prefix="prior.log_noise_var")
    opt = Adam(model.params, lr=config.lr, names=names)
    batch_size = config.batch_size or model.config.features[0].q
    Xtr, ytr, ctr = X[train_idx], y[train_idx], codes[train_idx]
    Xva, yva, cva = X[val_idx], y[val_idx], codes[val_idx]
    best = model.validation_loss(Xva, yva, cva, mats)
    best_snap, since = model.params.snapshot(), 0
    for epoch in range(config.fine_tune_epochs):
        t0 = time.perf_counter()
        total = 0.0
        for idx in _batches(train_idx.size, batch_size, batch_rng):
            model.params.zero_grad()
            total += model.decoder_loss_and_grad(Xtr[idx], ytr[idx], ctr[idx], mats)
            opt.step()
        model.params.zero_grad()
        vl = model.validation_loss(Xva, yva, cva, mats)
        report.train_loss.append(total / train_idx.size)
        report.val_loss.append(vl)
        report.epoch_seconds.append(time.perf_counter() - t0)
        if vl < best:
            best, best_snap, since = vl, model.params.snapshot(), 0
            report.best_epoch = epoch
        else:
            since += 1
            if since >= config.fine_tune_patience:
                break
    model.params.restore(best_snap)
    return report


def predict(model: BaseModel, embeddings: EmbeddingMatrices | list, X, codes) -> np.ndarray:
    mats = embeddings.matrices if isinstance(embeddings, EmbeddingMatrices) else embeddings
    return model.predict(X, codes, mats)


@dataclass
class FitResult:
    model: BaseModel
    embeddings: EmbeddingMatrices
    report: TrainReport
    fine_tune: TrainReport | None = None


def fit(method: str, model_config: ModelConfig, data, config: TrainConfig) -> FitResult:
    """Build, train, extract embeddings and (for MMbeddings) fine-tune the decoder."""
    model = make_model(method, model_config, np.random.default_rng([config.seed, 11]))
    report = train(model, data, config)
    tr = report.train_idx
    emb = extract_embeddings(model, data.X[tr], np.asarray(data.y)[tr], as_codes(data.codes)[tr])
    ft = None
    if method == "mmbed" and config.fine_tune_epochs > 0:
        ft = fine_tune_decoder(model, emb, data, config, report.train_idx, report.val_idx)
    return FitResult(model, emb, report, ft)


# checkpoints ---------------------------------------------------------------

CHECKPOINT_FORMAT = "mmbeddings-checkpoint"


def save_checkpoint(path: str, model: BaseModel, embeddings: EmbeddingMatrices, extra: dict | None = None) -> None:
    """Write a JSON checkpoint via write-then-rename.

    Floats go through ``repr`` so float64 values round-trip exactly.
    """
    P = model.params
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "method": model.method,
        "model_config": model.config.to_dict(),
        "decoder_spec": asdict(model.decoder_spec),
        "params": {
            n: {"shape": list(P[n].shape), "trainable": P.entry(n).trainable, "values": P[n].ravel().tolist()}
            for n in P
        },
        "priors": {"noise_var": model.noise_var},
        "embeddings": [
            {"matrix": m.tolist(), "counts": c.tolist()} for m, c in zip(embeddings.matrices, embeddings.counts)
        ],
        "encodings": [e.tolist() for e in getattr(model, "encodings", [])],
        "extra": extra or {},
    }
    tmp = f"{path}.tmp{os.getpid()}"
    try:
        with open(tmp, "w") as fh:
            json.dump(doc, fh, allow_nan=False)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def load_checkpoint(path: str):
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a checkpoint")
    cfg = ModelConfig.from_dict(doc["model_config"])
    model = make_model(doc["method"], cfg, 0)
    for name, entry in doc["params"].items():
        model.params.set(name, np.array(entry["values"], dtype=np.float64).reshape(entry["shape"]))
    if doc.get("encodings"):
        model.encodings = [np.array(e, dtype=np.float64) for e in doc["encodings"]]
    emb = EmbeddingMatrices(
        [np.array(e["matrix"], dtype=np.float64).reshape(len(e["counts"]), -1) for e in doc["embeddings"]],
        [np.array(e["counts"], dtype=np.int64) for e in doc["embeddings"]],
    )
    return model, emb, doc.get("extra", {})
