"""Categorical embeddings as random effects inside a variational autoencoder.

The encoder sees ``[x_i, y_i]`` and emits a posterior mean and log-variance
per categorical feature. Encoder outputs are pooled per level inside each
minibatch, a level embedding is sampled with the reparameterization trick,
and the decoder predicts ``y`` from ``x`` plus the gathered embeddings.
The per-level pooling is what keeps the parameter count independent of
the cardinality.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .nn import (
    MlpSpec,
    NumericError,
    ParamSet,
    ShapeError,
    affine_forward,
    as_float,
    backward,
    glorot_uniform,
    init_mlp,
    mlp_forward,
    sigmoid,
    softplus,
)

LOG_VAR_CLAMP = 10.0
TASKS = ("regression", "classification")
SHRINKAGE_MODES = ("none", "heuristic", "learned")


@dataclass(frozen=True)
class CatFeatureSpec:
    q: int
    d: int

    def __post_init__(self):
        if self.q < 1 or self.d < 1:
            raise ValueError(f"need q >= 1 and d >= 1, got q={self.q}, d={self.d}")


@dataclass
class ModelConfig:
    p: int
    features: tuple[CatFeatureSpec, ...]
    encoder_hidden: tuple[int, ...] = (100, 100)
    decoder_hidden: tuple[int, ...] = (10, 10)
    task: str = "regression"
    beta_v: float = 0.001
    noise_var: float = 1.0
    prior_var: float = 1.0
    train_noise_var: bool = False
    train_prior_var: bool = False
    shrinkage: str = "none"
    l2: float = 1e-4
    smoothing: float = 10.0

    def __post_init__(self):
        self.features = tuple(
            f if isinstance(f, CatFeatureSpec) else CatFeatureSpec(**f) for f in self.features
        )
        self.encoder_hidden = tuple(self.encoder_hidden)
        self.decoder_hidden = tuple(self.decoder_hidden)
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.shrinkage not in SHRINKAGE_MODES:
            raise ValueError(f"shrinkage must be one of {SHRINKAGE_MODES}")
        if self.beta_v < 0:
            raise ValueError("beta_v must be nonnegative")
        if self.noise_var <= 0 or self.prior_var <= 0:
            raise ValueError("prior variances must be positive")

    @property
    def cardinalities(self) -> list[int]:
        return [f.q for f in self.features]

    def to_dict(self) -> dict:
        out = asdict(self)
        out["features"] = [asdict(f) for f in self.features]
        out["encoder_hidden"] = list(self.encoder_hidden)
        out["decoder_hidden"] = list(self.decoder_hidden)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(**data)


@dataclass
class PriorConfig:
    noise_var: float
    prior_var: list[np.ndarray]


@dataclass
class PosteriorBatch:
    mu: list[np.ndarray]
    log_var: list[np.ndarray]
    codes: np.ndarray


@dataclass
class ClusterPosterior:
    mu: list[np.ndarray]
    log_var: list[np.ndarray]
    counts: list[np.ndarray]


@dataclass
class SampledEmbeddings:
    levels: list[np.ndarray]
    gathered: list[np.ndarray] = field(default_factory=list)


def as_codes(codes, n_features: int | None = None) -> np.ndarray:
    codes = np.asarray(codes)
    if codes.ndim == 1:
        codes = codes[:, None]
    if n_features is not None and codes.shape[1] != n_features:
        raise ShapeError(f"expected {n_features} code columns, got {codes.shape[1]}")
    return codes.astype(np.int64, copy=False)


def check_codes(codes: np.ndarray, q: int) -> None:
    if codes.size and (codes.min() < 0 or codes.max() >= q):
        raise IndexError(f"categorical code out of range [0, {q})")


def _scalar(x):
    x = np.sum(x)
    return complex(x) if np.iscomplexobj(x) else float(x)


def clamp_log_var(raw: np.ndarray) -> np.ndarray:
    if not np.iscomplexobj(raw):
        return np.clip(raw, -LOG_VAR_CLAMP, LOG_VAR_CLAMP)
    return np.where(np.abs(raw.real) <= LOG_VAR_CLAMP, raw, np.sign(raw.real) * LOG_VAR_CLAMP)


def scatter_sum(values: np.ndarray, codes: np.ndarray, q: int) -> np.ndarray:
    out = np.zeros((q,) + values.shape[1:], dtype=np.result_type(values.dtype, np.float64))
    np.add.at(out, codes, values)
    return out


def scatter_average(values, codes, q: int) -> np.ndarray:
    """Per-level mean of ``values`` rows; zero rows for absent levels."""
    values = as_float(values)
    codes = np.asarray(codes, dtype=np.int64)
    check_codes(codes, q)
    sums = scatter_sum(values, codes, q)
    counts = np.bincount(codes, minlength=q)
    present = counts > 0
    sums[present] /= counts[present, None]
    return sums


def _average_one(mu, log_var, codes, q):
    check_codes(codes, q)
    counts = np.bincount(codes, minlength=q)
    present = counts > 0
    mu_j = scatter_sum(mu, codes, q)
    mu_j[present] /= counts[present, None]
    var_sum = scatter_sum(np.exp(log_var), codes, q)
    lv_j = np.zeros_like(var_sum)
    # variance of the mean of independent draws, not the mean variance
    lv_j[present] = np.log(var_sum[present]) - 2.0 * np.log(counts[present, None])
    return mu_j, lv_j, counts, var_sum


def average_posterior_params(batch: PosteriorBatch, cardinalities: Sequence[int]) -> ClusterPosterior:
    codes = as_codes(batch.codes, len(cardinalities))
    mus, lvs, counts = [], [], []
    for k, q in enumerate(cardinalities):
        mu_j, lv_j, cnt, _ = _average_one(batch.mu[k], batch.log_var[k], codes[:, k], q)
        mus.append(mu_j)
        lvs.append(lv_j)
        counts.append(cnt)
    return ClusterPosterior(mus, lvs, counts)


def shrinkage_factors(counts: np.ndarray, mode: str, learned: np.ndarray | None = None) -> np.ndarray:
    if mode == "none":
        return np.ones(counts.shape[0])
    if mode == "heuristic":
        return counts / (counts + 1.0)
    if mode == "learned":
        if learned is None:
            raise ValueError("learned shrinkage needs per-level factors")
        return as_float(learned)
    raise ValueError(f"unknown shrinkage mode {mode!r}")


def apply_shrinkage(
    cluster: ClusterPosterior, mode: str = "none", learned: Sequence[np.ndarray] | None = None
) -> ClusterPosterior:
    if mode == "none":
        return cluster
    mus = []
    for k, (mu, cnt) in enumerate(zip(cluster.mu, cluster.counts)):
        c = shrinkage_factors(cnt, mode, None if learned is None else learned[k])
        mus.append(mu * c[:, None])
    return ClusterPosterior(mus, cluster.log_var, cluster.counts)


def draw_noise(cardinalities, dims, rng: np.random.Generator) -> list[np.ndarray]:
    return [rng.standard_normal((q, d)) for q, d in zip(cardinalities, dims)]


def reparameterize(
    cluster: ClusterPosterior,
    rng: np.random.Generator | None = None,
    codes=None,
    noise: Sequence[np.ndarray] | None = None,
) -> SampledEmbeddings:
    """Sample ``b = mu + tau * z`` per level; absent levels stay zero.

    Pass ``noise`` to freeze the standard-normal draws.
    """
    if noise is None:
        if rng is None:
            raise ValueError("need an rng or explicit noise")
        noise = draw_noise([m.shape[0] for m in cluster.mu], [m.shape[1] for m in cluster.mu], rng)
    levels = []
    for mu, lv, cnt, z in zip(cluster.mu, cluster.log_var, cluster.counts, noise):
        b = mu + np.exp(0.5 * lv) * z
        b[cnt == 0] = 0.0
        levels.append(b)
    gathered = []
    if codes is not None:
        codes = as_codes(codes, len(levels))
        gathered = [b[codes[:, k]] for k, b in enumerate(levels)]
    return SampledEmbeddings(levels, gathered)


def kl_term(mu, tau2, sigma2):
    """KL( N(mu, tau2) || N(0, sigma2) ), elementwise."""
    mu, tau2, sigma2 = as_float(mu), as_float(tau2), as_float(sigma2)
    if np.any(tau2.real <= 0) or np.any(sigma2.real <= 0):
        raise ValueError("variances must be positive")
    return 0.5 * (-1.0 - np.log(tau2) + np.log(sigma2) + mu**2 / sigma2 + tau2 / sigma2)


def decoder_input(X: np.ndarray, embeddings: Sequence[np.ndarray]) -> np.ndarray:
    X = as_float(X)
    if not embeddings:
        return X
    return np.concatenate([X, *embeddings], axis=1)


def decode(X, embeddings, params: ParamSet, spec: MlpSpec, prefix: str = "dec."):
    """Decoder output per row (a logit for classification) plus the forward cache."""
    out, cache = mlp_forward(spec, params, decoder_input(X, embeddings), prefix)
    return out[:, 0], cache


def reconstruction_terms(y, f, task: str, noise_var: float = 1.0) -> dict[str, float]:
    y = np.asarray(y, dtype=np.float64)
    f = as_float(f)
    if task == "regression":
        n = y.shape[0]
        return {
            "log_normalizer": _scalar(0.5 * n * np.log(2.0 * math.pi * noise_var)),
            "squared_error": _scalar((y - f) ** 2) / (2.0 * noise_var),
        }
    # Bernoulli NLL with a logit: softplus(f) - y f
    return {"bernoulli_nll": _scalar(softplus(f) - y * f)}


def negative_elbo(
    y,
    predictions,
    cluster: ClusterPosterior,
    priors: PriorConfig,
    beta_v: float,
    task: str = "regression",
    return_terms: bool = False,
):
    terms = reconstruction_terms(y, predictions, task, priors.noise_var)
    kl = 0.0
    for mu, lv, s2 in zip(cluster.mu, cluster.log_var, priors.prior_var):
        kl += _scalar(kl_term(mu, np.exp(lv), s2))
    terms["kl"] = beta_v * kl
    for name, value in terms.items():
        if not np.isfinite(value):
            raise NumericError(f"non-finite loss term {name!r}")
    total = sum(terms.values())
    return (total, terms) if return_terms else total


def lmm_posterior_oracle(residual, n_j, sigma2: float, sigma2_b: float):
    """Closed-form random-intercept posterior given a cluster's mean residual."""
    if sigma2 <= 0 or sigma2_b <= 0:
        raise ValueError("variances must be positive")
    n_j = np.asarray(n_j, dtype=np.float64)
    if np.any(n_j < 1):
        raise ValueError("cluster size must be at least 1")
    mean = sigma2_b / (sigma2 / n_j + sigma2_b) * np.asarray(residual, dtype=np.float64)
    var = 1.0 / (n_j / sigma2 + 1.0 / sigma2_b)
    return mean, var


def count_parameters(model) -> dict[str, int]:
    return model.count_parameters()


class BaseModel:
    """Shared decoder, reconstruction loss and prediction for every encoder."""

    method = "base"

    def __init__(self, config: ModelConfig, rng: np.random.Generator | int = 0):
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        self.config = config
        self.params = ParamSet()
        self.decoder_spec = MlpSpec(
            config.p + self.embedding_width(), config.decoder_hidden, 1
        )
        self._build(rng)
        init_mlp(self.decoder_spec, self.params, rng, "dec.")
        if config.train_noise_var:
            self.params.add("prior.log_noise_var", [math.log(config.noise_var)])

    # hooks
    def _build(self, rng: np.random.Generator) -> None:
        pass

    def embedding_width(self) -> int:
        return sum(f.d for f in self.config.features)

    def prepare(self, X, y, codes) -> None:
        """Fit any data-derived state from the training split."""

    @property
    def n_features(self) -> int:
        return len(self.config.features)

    @property
    def noise_var(self) -> float:
        if "prior.log_noise_var" in self.params:
            v = np.exp(self.params["prior.log_noise_var"][0])
            return complex(v) if np.iscomplexobj(v) else float(v)
        return self.config.noise_var

    def decoder_names(self) -> list[str]:
        return self.params.names(trainable_only=True, prefix="dec.")

    def gather(self, embeddings: Sequence[np.ndarray], codes) -> list[np.ndarray]:
        codes = as_codes(codes, len(embeddings)) if embeddings else codes
        out = []
        for k, E in enumerate(embeddings):
            check_codes(codes[:, k], E.shape[0])
            out.append(E[codes[:, k]])
        return out

    def _recon_grad(self, y, f):
        """Loss, dLoss/df and dLoss/dlog(noise var) of the reconstruction term."""
        if self.config.task == "regression":
            s2 = self.noise_var
            r = f - y
            loss = 0.5 * y.shape[0] * math.log(2 * math.pi * s2) + float(r @ r) / (2 * s2)
            d_lognoise = 0.5 * y.shape[0] - float(r @ r) / (2 * s2)
            return loss, r / s2, d_lognoise
        loss = float(np.sum(np.logaddexp(0.0, f) - y * f))
        return loss, sigmoid(f) - y, 0.0

    def _decoder_backward(self, cache, df) -> np.ndarray:
        return backward(self.decoder_spec, self.params, cache, df[:, None])

    def _split_embedding_grads(self, dinput: np.ndarray) -> list[np.ndarray]:
        out, start = [], self.config.p
        for w in self._widths():
            out.append(dinput[:, start : start + w])
            start += w
        return out

    def _widths(self) -> list[int]:
        return [f.d for f in self.config.features]

    def decoder_loss_and_grad(self, X, y, codes, embeddings) -> float:
        """Reconstruction loss with frozen embeddings; grads reach the decoder only."""
        y = np.asarray(y, dtype=np.float64)
        f, cache = decode(X, self.gather(embeddings, codes), self.params, self.decoder_spec)
        loss, df, d_lognoise = self._recon_grad(y, f)
        self._decoder_backward(cache, df)
        if "prior.log_noise_var" in self.params:
            self.params.grad("prior.log_noise_var")[0] += d_lognoise
        return loss

    def decode_embeddings(self, X, codes, embeddings) -> np.ndarray:
        f, _ = decode(X, self.gather(embeddings, codes), self.params, self.decoder_spec)
        return f

    def predict(self, X, codes, embeddings) -> np.ndarray:
        f = self.decode_embeddings(X, codes, embeddings)
        return sigmoid(f) if self.config.task == "classification" else f

    def validation_loss(self, X, y, codes, embeddings) -> float:
        """MSE for regression, mean log-loss for classification."""
        y = np.asarray(y, dtype=np.float64)
        f = self.decode_embeddings(X, codes, embeddings)
        if self.config.task == "regression":
            return float(np.mean((y - f) ** 2))
        return float(np.mean(np.logaddexp(0.0, f) - y * f))

    def inference_embeddings(self, X, y, codes) -> list[np.ndarray]:
        raise NotImplementedError

    def loss_and_grad(self, X, y, codes, rng=None, noise=None) -> float:
        raise NotImplementedError

    def count_parameters(self) -> dict[str, int]:
        P = self.params
        counts = {
            "decoder": P.count(P.names(prefix="dec.")),
            "priors": P.count(P.names(prefix="prior.")),
        }
        counts.update(self._encoder_counts())
        counts["total"] = sum(counts.values())
        return counts

    def _encoder_counts(self) -> dict[str, int]:
        return {}


class MMbeddings(BaseModel):
    method = "mmbed"

    def _build(self, rng):
        cfg = self.config
        width = cfg.encoder_hidden[-1] if cfg.encoder_hidden else cfg.p + 1
        if cfg.encoder_hidden:
            self.trunk_spec = MlpSpec(
                cfg.p + 1,
                cfg.encoder_hidden[:-1],
                cfg.encoder_hidden[-1],
                ("relu",) * len(cfg.encoder_hidden),
            )
            init_mlp(self.trunk_spec, self.params, rng, "enc.trunk.")
        else:
            self.trunk_spec = None
        for k, f in enumerate(cfg.features):
            self.params.add(f"enc.mu.{k}.W", glorot_uniform(width, f.d, rng))
            self.params.add(f"enc.mu.{k}.b", np.zeros(f.d))
            self.params.add(f"enc.logvar.{k}.W", glorot_uniform(width, f.d, rng))
            self.params.add(f"enc.logvar.{k}.b", np.zeros(f.d))
            if cfg.train_prior_var:
                self.params.add(f"prior.log_prior_var.{k}", np.full(f.d, math.log(cfg.prior_var)))
            if cfg.shrinkage == "learned":
                self.params.add(f"shrink.c.{k}", np.ones(f.q))

    def priors(self) -> PriorConfig:
        pv = []
        for k, f in enumerate(self.config.features):
            name = f"prior.log_prior_var.{k}"
            pv.append(np.exp(self.params[name]) if name in self.params else np.full(f.d, self.config.prior_var))
        return PriorConfig(self.noise_var, pv)

    def _trunk(self, X, y):
        Xy = np.column_stack([as_float(X), np.asarray(y, dtype=np.float64)])
        if self.trunk_spec is None:
            return Xy, None
        return mlp_forward(self.trunk_spec, self.params, Xy, "enc.trunk.")

    def encode(self, X, y):
        """Per-observation posterior means and clamped log-variances."""
        h, cache = self._trunk(X, y)
        P = self.params
        mus, lvs, raws = [], [], []
        for k in range(self.n_features):
            mus.append(affine_forward(P[f"enc.mu.{k}.W"], P[f"enc.mu.{k}.b"], h))
            raw = affine_forward(P[f"enc.logvar.{k}.W"], P[f"enc.logvar.{k}.b"], h)
            raws.append(raw)
            lvs.append(clamp_log_var(raw))
        return mus, lvs, (h, cache, raws)

    def _shrink_params(self):
        if self.config.shrinkage != "learned":
            return None
        return [self.params[f"shrink.c.{k}"] for k in range(self.n_features)]

    def forward(self, X, y, codes, rng=None, noise=None):
        codes = as_codes(codes, self.n_features)
        mus, lvs, enc_cache = self.encode(X, y)
        cluster = average_posterior_params(PosteriorBatch(mus, lvs, codes), self.config.cardinalities)
        shrunk = apply_shrinkage(cluster, self.config.shrinkage, self._shrink_params())
        sampled = reparameterize(shrunk, rng=rng, codes=codes, noise=noise)
        f, dec_cache = decode(X, sampled.gathered, self.params, self.decoder_spec)
        return f, (codes, mus, lvs, enc_cache, cluster, shrunk, sampled, dec_cache)

    def loss(self, X, y, codes, rng=None, noise=None) -> float:
        f, state = self.forward(X, y, codes, rng, noise)
        return negative_elbo(y, f, state[5], self.priors(), self.config.beta_v, self.config.task)

    def loss_and_grad(self, X, y, codes, rng=None, noise=None) -> float:
        cfg = self.config
        P = self.params
        y = np.asarray(y, dtype=np.float64)
        if noise is None:
            if rng is None:
                raise ValueError("need an rng or explicit noise")
            noise = draw_noise(cfg.cardinalities, self._widths(), rng)
        f, (codes, mus, lvs, (h, trunk_cache, raws), cluster, shrunk, sampled, dec_cache) = (
            self.forward(X, y, codes, noise=noise)
        )
        priors = self.priors()
        loss = negative_elbo(y, f, shrunk, priors, cfg.beta_v, cfg.task)

        _, df, d_lognoise = self._recon_grad(y, f)
        d_in = self._decoder_backward(dec_cache, df)
        d_gathered = self._split_embedding_grads(d_in)
        if "prior.log_noise_var" in P:
            P.grad("prior.log_noise_var")[0] += d_lognoise

        dh = np.zeros_like(h)
        for k in range(self.n_features):
            q = cfg.features[k].q
            c_codes = codes[:, k]
            cnt = cluster.counts[k]
            present = (cnt > 0)[:, None]
            mu_s, lv = shrunk.mu[k], shrunk.log_var[k]
            s2 = priors.prior_var[k]
            tau = np.exp(0.5 * lv)

            db = scatter_sum(d_gathered[k], c_codes, q)
            # b = mu + tau z on present levels; absent rows are constants
            d_mu_s = np.where(present, db + cfg.beta_v * mu_s / s2, 0.0)
            d_lv = np.where(
                present, db * noise[k] * 0.5 * tau + 0.5 * cfg.beta_v * (-1.0 + tau**2 / s2), 0.0
            )
            name = f"prior.log_prior_var.{k}"
            if name in P:
                P.grad(name)[...] += 0.5 * cfg.beta_v * np.sum(1.0 - (mu_s**2 + tau**2) / s2, axis=0)

            c = shrinkage_factors(cnt, cfg.shrinkage, None if cfg.shrinkage != "learned" else P[f"shrink.c.{k}"])
            if cfg.shrinkage == "learned":
                P.grad(f"shrink.c.{k}")[...] += np.sum(d_mu_s * cluster.mu[k], axis=1)
            d_mu_j = d_mu_s * c[:, None]

            n_i = cnt[c_codes][:, None]
            d_mu_i = d_mu_j[c_codes] / n_i
            var_i = np.exp(lvs[k])
            var_sum = scatter_sum(var_i, c_codes, q)
            d_lv_i = d_lv[c_codes] * var_i / var_sum[c_codes]
            d_raw = d_lv_i * (np.abs(raws[k]) <= LOG_VAR_CLAMP)

            P.grad(f"enc.mu.{k}.W")[...] += h.T @ d_mu_i
            P.grad(f"enc.mu.{k}.b")[...] += d_mu_i.sum(axis=0)
            P.grad(f"enc.logvar.{k}.W")[...] += h.T @ d_raw
            P.grad(f"enc.logvar.{k}.b")[...] += d_raw.sum(axis=0)
            dh += d_mu_i @ P[f"enc.mu.{k}.W"].T + d_raw @ P[f"enc.logvar.{k}.W"].T
        if self.trunk_spec is not None:
            backward(self.trunk_spec, P, trunk_cache, dh)
        return loss

    def inference_embeddings(self, X, y, codes, chunk: int = 50_000) -> list[np.ndarray]:
        """Posterior-mean level matrices from a pass over (X, y); no sampling."""
        codes = as_codes(codes, self.n_features)
        n = codes.shape[0]
        sums = [np.zeros((f.q, f.d)) for f in self.config.features]
        for start in range(0, n, chunk):
            sl = slice(start, start + chunk)
            mus, _, _ = self.encode(np.asarray(X)[sl], np.asarray(y)[sl])
            for k, f in enumerate(self.config.features):
                check_codes(codes[sl, k], f.q)
                sums[k] += scatter_sum(mus[k], codes[sl, k], f.q)
        out = []
        for k, f in enumerate(self.config.features):
            cnt = np.bincount(codes[:, k], minlength=f.q)
            present = cnt > 0
            sums[k][present] /= cnt[present, None]
            if self.config.shrinkage != "none":
                c = shrinkage_factors(cnt, self.config.shrinkage, self._shrink_params()[k] if self.config.shrinkage == "learned" else None)
                sums[k] *= c[:, None]
            out.append(sums[k])
        return out

    def _encoder_counts(self):
        P = self.params
        heads = P.names(prefix="enc.mu.") + P.names(prefix="enc.logvar.")
        return {
            "encoder_trunk": P.count(P.names(prefix="enc.trunk.")),
            "encoder_heads": P.count(heads),
            "shrinkage": P.count(P.names(prefix="shrink.")),
        }
