"""Comparator encoders plugged into the same decoder and trainer."""

from __future__ import annotations

import math

import numpy as np

from .variational import (
    BaseModel,
    MMbeddings,
    ModelConfig,
    as_codes,
    check_codes,
    decode,
    kl_term,
    scatter_sum,
)

EMBED_INIT_STD = 0.1
METHODS = ("mmbed", "embed", "embed_l2", "rebed", "mean_enc", "ignore")


def embed_lookup(table: np.ndarray, codes) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    check_codes(codes, table.shape[0])
    return table[codes]


def l2_penalty(table: np.ndarray, lam: float) -> float:
    if lam < 0:
        raise ValueError("L2 weight must be nonnegative")
    return float(lam * np.sum(table * table))


def rebeddings_forward(mu_table, log_var_table, codes, rng=None, prior_var=1.0, beta_v=1.0, noise=None):
    """Sampled rows ``mu + tau z`` per observation and the table-wide KL.

    One draw is taken per level and shared by every observation of that level.
    """
    codes = np.asarray(codes, dtype=np.int64)
    check_codes(codes, mu_table.shape[0])
    if noise is None:
        noise = rng.standard_normal(mu_table.shape)
    levels = mu_table + np.exp(0.5 * log_var_table) * noise
    kl = beta_v * float(np.sum(kl_term(mu_table, np.exp(log_var_table), prior_var)))
    return levels[codes], kl


def mean_encode(y, codes, q: int, smoothing: float = 10.0) -> np.ndarray:
    """Smoothed per-level target mean; empty levels get the global mean."""
    if smoothing < 0:
        raise ValueError("smoothing must be nonnegative")
    y = np.asarray(y, dtype=np.float64)
    codes = np.asarray(codes, dtype=np.int64)
    check_codes(codes, q)
    glob = float(y.mean())
    sums = np.bincount(codes, weights=y, minlength=q)
    counts = np.bincount(codes, minlength=q).astype(np.float64)
    denom = counts + smoothing
    out = np.full(q, glob)
    ok = denom > 0
    out[ok] = (sums[ok] + smoothing * glob) / denom[ok]
    return out


def ignore_encoder(x):
    return x


class IgnoreModel(BaseModel):
    method = "ignore"

    def embedding_width(self) -> int:
        return 0

    def _widths(self):
        return []

    def gather(self, embeddings, codes):
        return []

    def loss_and_grad(self, X, y, codes, rng=None, noise=None) -> float:
        y = np.asarray(y, dtype=np.float64)
        f, cache = decode(ignore_encoder(X), [], self.params, self.decoder_spec)
        loss, df, d_lognoise = self._recon_grad(y, f)
        self._decoder_backward(cache, df)
        if "prior.log_noise_var" in self.params:
            self.params.grad("prior.log_noise_var")[0] += d_lognoise
        return loss

    def inference_embeddings(self, X, y, codes):
        return []


class EmbeddingsModel(BaseModel):
    """Standard trainable lookup tables, optionally L2-penalized."""

    method = "embed"

    def __init__(self, config: ModelConfig, rng=0, l2: float = 0.0):
        self.l2 = l2
        super().__init__(config, rng)

    def _build(self, rng):
        for k, f in enumerate(self.config.features):
            self.params.add(f"emb.{k}", rng.normal(0.0, EMBED_INIT_STD, size=(f.q, f.d)))

    def tables(self):
        return [self.params[f"emb.{k}"] for k in range(self.n_features)]

    def loss_and_grad(self, X, y, codes, rng=None, noise=None) -> float:
        y = np.asarray(y, dtype=np.float64)
        codes = as_codes(codes, self.n_features)
        tables = self.tables()
        rows = [embed_lookup(T, codes[:, k]) for k, T in enumerate(tables)]
        f, cache = decode(X, rows, self.params, self.decoder_spec)
        loss, df, d_lognoise = self._recon_grad(y, f)
        d_rows = self._split_embedding_grads(self._decoder_backward(cache, df))
        for k, T in enumerate(tables):
            g = self.params.grad(f"emb.{k}")
            g += scatter_sum(d_rows[k], codes[:, k], T.shape[0])
            if self.l2:
                loss += l2_penalty(T, self.l2)
                g += 2.0 * self.l2 * T
        if "prior.log_noise_var" in self.params:
            self.params.grad("prior.log_noise_var")[0] += d_lognoise
        return loss

    def inference_embeddings(self, X, y, codes):
        return [T.copy() for T in self.tables()]

    def _encoder_counts(self):
        return {"embeddings": self.params.count(self.params.names(prefix="emb."))}


class REbeddingsModel(BaseModel):
    """Separate trainable tables for posterior means and log-variances."""

    method = "rebed"

    def _build(self, rng):
        for k, f in enumerate(self.config.features):
            self.params.add(f"rebed.mu.{k}", rng.normal(0.0, EMBED_INIT_STD, size=(f.q, f.d)))
            self.params.add(f"rebed.logvar.{k}", np.full((f.q, f.d), 2.0 * math.log(EMBED_INIT_STD)))

    def loss_and_grad(self, X, y, codes, rng=None, noise=None) -> float:
        cfg = self.config
        P = self.params
        y = np.asarray(y, dtype=np.float64)
        codes = as_codes(codes, self.n_features)
        if noise is None:
            noise = [rng.standard_normal((f.q, f.d)) for f in cfg.features]
        rows, kl_total = [], 0.0
        for k in range(self.n_features):
            r, kl = rebeddings_forward(
                P[f"rebed.mu.{k}"], P[f"rebed.logvar.{k}"], codes[:, k],
                prior_var=cfg.prior_var, beta_v=cfg.beta_v, noise=noise[k],
            )
            rows.append(r)
            kl_total += kl
        f, cache = decode(X, rows, P, self.decoder_spec)
        loss, df, d_lognoise = self._recon_grad(y, f)
        d_rows = self._split_embedding_grads(self._decoder_backward(cache, df))
        for k, feat in enumerate(cfg.features):
            mu, lv = P[f"rebed.mu.{k}"], P[f"rebed.logvar.{k}"]
            tau = np.exp(0.5 * lv)
            db = scatter_sum(d_rows[k], codes[:, k], feat.q)
            P.grad(f"rebed.mu.{k}")[...] += db + cfg.beta_v * mu / cfg.prior_var
            P.grad(f"rebed.logvar.{k}")[...] += (
                db * noise[k] * 0.5 * tau + 0.5 * cfg.beta_v * (-1.0 + tau**2 / cfg.prior_var)
            )
        if "prior.log_noise_var" in P:
            P.grad("prior.log_noise_var")[0] += d_lognoise
        return loss + kl_total

    def inference_embeddings(self, X, y, codes):
        return [self.params[f"rebed.mu.{k}"].copy() for k in range(self.n_features)]

    def _encoder_counts(self):
        return {"embeddings": self.params.count(self.params.names(prefix="rebed."))}


class MeanEncodingModel(BaseModel):
    """Each feature replaced by its smoothed training-target mean."""

    method = "mean_enc"

    def _build(self, rng):
        self.encodings = [np.zeros(f.q) for f in self.config.features]

    def embedding_width(self) -> int:
        return len(self.config.features)

    def _widths(self):
        return [1] * self.n_features

    def prepare(self, X, y, codes):
        codes = as_codes(codes, self.n_features)
        self.encodings = [
            mean_encode(y, codes[:, k], f.q, self.config.smoothing)
            for k, f in enumerate(self.config.features)
        ]

    def loss_and_grad(self, X, y, codes, rng=None, noise=None) -> float:
        return self.decoder_loss_and_grad(X, y, codes, self.inference_embeddings(X, y, codes))

    def inference_embeddings(self, X, y, codes):
        return [e[:, None].copy() for e in self.encodings]


def make_model(method: str, config: ModelConfig, rng=0) -> BaseModel:
    if method == "mmbed":
        return MMbeddings(config, rng)
    if method == "embed":
        return EmbeddingsModel(config, rng, l2=0.0)
    if method == "embed_l2":
        m = EmbeddingsModel(config, rng, l2=config.l2)
        m.method = "embed_l2"
        return m
    if method == "rebed":
        return REbeddingsModel(config, rng)
    if method == "mean_enc":
        return MeanEncodingModel(config, rng)
    if method == "ignore":
        return IgnoreModel(config, rng)
    raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
