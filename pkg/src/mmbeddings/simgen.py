"""Synthetic nonlinear mixed-model data with known level embeddings.

Each observation has ``p = 10`` uniform covariates and one code per
categorical feature. Level embeddings are Gaussian, and the response comes
from a fixed 10-term nonlinear function in which embedding dimension ``m``
perturbs the coefficient of covariate ``m``.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .nn import sigmoid

# independent streams per component so task variants share every draw
_STREAMS = ("features", "groups", "embeddings", "noise", "downstream")


class SimConfigError(ValueError):
    pass


@dataclass
class SimConfig:
    q: int | list[int] = 100
    p: int = 10
    d: int = 10
    sigma2_b: float = 1.0
    sigma2: float = 1.0
    n: int | None = None
    task: str = "regression"
    seed: int = 0

    def __post_init__(self):
        qs = self.q if isinstance(self.q, (list, tuple)) else [self.q]
        if not qs or any(int(q) < 1 for q in qs):
            raise SimConfigError("q: every cardinality must be >= 1")
        self.q = [int(q) for q in qs] if isinstance(self.q, (list, tuple)) else int(self.q)
        if self.sigma2_b <= 0:
            raise SimConfigError("sigma2_b: must be positive")
        if self.sigma2 < 0:
            raise SimConfigError("sigma2: must be nonnegative")
        if self.task not in ("regression", "classification"):
            raise SimConfigError("task: must be 'regression' or 'classification'")
        if self.n is not None and int(self.n) < 1:
            raise SimConfigError("n: must be >= 1")
        if self.p != 10 or self.d != 10:
            raise SimConfigError("p, d: the nonlinear generator needs p = d = 10")

    @property
    def cardinalities(self) -> list[int]:
        return list(self.q) if isinstance(self.q, list) else [self.q]

    @property
    def n_obs(self) -> int:
        return int(self.n) if self.n is not None else 10 * max(self.cardinalities)

    @classmethod
    def from_dict(cls, data: dict) -> "SimConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise SimConfigError(f"unknown config fields: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise SimConfigError(str(exc)) from exc


@dataclass
class SimDataset:
    X: np.ndarray
    codes: np.ndarray
    B_true: list[np.ndarray]
    y: np.ndarray
    f_values: np.ndarray
    config: SimConfig
    threshold: float | None = None
    w: np.ndarray | None = None
    labels_b: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def cardinalities(self) -> list[int]:
        return [B.shape[0] for B in self.B_true]


def _streams(seed: int, salt: int = 0) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence([int(seed), int(salt)]).spawn(len(_STREAMS))
    return {name: np.random.default_rng(s) for name, s in zip(_STREAMS, children)}


def gen_features(n: int, p: int, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size=(n, p))


def gen_group_sizes(n: int, q: int, rng: np.random.Generator) -> np.ndarray:
    return rng.multinomial(n, np.full(q, 1.0 / q))


def gen_codes(n: int, q: int, rng: np.random.Generator) -> np.ndarray:
    counts = gen_group_sizes(n, q, rng)
    return rng.permutation(np.repeat(np.arange(q), counts))


def gen_embeddings(q: int, d: int, sigma2_b: float, rng: np.random.Generator) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(sigma2_b), size=(q, d))


def f_true(X, B_true, codes) -> np.ndarray:
    """Evaluate the nonlinear mean function.

    With several features the level effects add per dimension:
    ``beta_m = 1 + sum_k B_k[code_k, m]``.
    """
    X = np.asarray(X, dtype=np.float64)
    if isinstance(B_true, np.ndarray):
        B_true = [B_true]
    codes = np.asarray(codes)
    if codes.ndim == 1:
        codes = codes[:, None]
    if X.shape[1] != 10 or any(B.shape[1] != 10 for B in B_true):
        raise SimConfigError("the nonlinear generator needs p = d = 10")
    beta = np.ones((X.shape[0], 10))
    for k, B in enumerate(B_true):
        beta += B[codes[:, k]]
    x = X.T
    b = beta.T
    return (
        0.1 * np.exp(-b[0] * x[0] ** 2)
        + np.clip(b[1] * x[1] / (1.0 + b[2] * x[2] ** 2), -5.0, 5.0)
        + np.sin(b[3] * x[3])
        + b[4] * x[4]
        + b[5] * x[5] / (1.0 + np.exp(-b[6] * x[6]))
        + np.arctan(b[7] * x[7])
        + b[8] * np.cos(x[8])
        + b[9] * np.log1p(x[9] ** 2)
    )


def gen_response(f, sigma2: float, task: str, rng: np.random.Generator, threshold: float | None = None):
    """Return ``(y, threshold)``; classification splits ``f + eps`` at its median."""
    f = np.asarray(f, dtype=np.float64)
    eps = math.sqrt(sigma2) * rng.standard_normal(f.shape[0])
    y = f + eps
    if task == "regression":
        return y, None
    if threshold is None:
        threshold = float(np.median(y))
    return (y > threshold).astype(np.float64), threshold


def gen_downstream_binary(B_true: np.ndarray, rng: np.random.Generator, weight_scale: float = 1.0):
    """Linear-logistic labels per level from the true embeddings."""
    w = weight_scale * rng.standard_normal(B_true.shape[1])
    labels = (rng.random(B_true.shape[0]) < sigmoid(B_true @ w)).astype(np.int64)
    return w, labels


def simulate(config: SimConfig) -> SimDataset:
    s = _streams(config.seed)
    n = config.n_obs
    X = gen_features(n, config.p, s["features"])
    codes = np.column_stack([gen_codes(n, q, s["groups"]) for q in config.cardinalities])
    B = [gen_embeddings(q, config.d, config.sigma2_b, s["embeddings"]) for q in config.cardinalities]
    f = f_true(X, B, codes)
    y, thr = gen_response(f, config.sigma2, config.task, s["noise"])
    w, labels_b = gen_downstream_binary(B[0], s["downstream"])
    meta = {"kind": "train", "seed": config.seed}
    if config.task == "classification":
        meta["binarization"] = "y = 1{f + eps > median(f + eps)} on the training draw"
    meta["downstream"] = "w ~ N(0, I); y_B ~ Bernoulli(sigmoid(B_true[0] @ w))"
    return SimDataset(X, codes, B, y, f, config, thr, w, labels_b, meta)


def simulate_test(train: SimDataset, n_test: int, seed: int | None = None) -> SimDataset:
    """Fresh observations drawn from the same level embeddings as ``train``."""
    cfg = train.config
    s = _streams(cfg.seed if seed is None else seed, salt=1)
    X = gen_features(n_test, cfg.p, s["features"])
    codes = np.column_stack([gen_codes(n_test, q, s["groups"]) for q in train.cardinalities])
    f = f_true(X, train.B_true, codes)
    y, thr = gen_response(f, cfg.sigma2, cfg.task, s["noise"], threshold=train.threshold)
    meta = dict(train.meta, kind="test")
    return SimDataset(X, codes, train.B_true, y, f, cfg, thr, train.w, train.labels_b, meta)


def default_test_size(n: int) -> int:
    return min(10 * n, 100_000)


def _fmt(v: float) -> str:
    return "%.17g" % v


def sidecar_path(csv_path: str) -> str:
    root, _ = os.path.splitext(csv_path)
    return root + ".json"


def save_dataset(ds: SimDataset, csv_path: str) -> None:
    """Columnar CSV plus a JSON sidecar with the embeddings and config."""
    p = ds.X.shape[1]
    K = ds.codes.shape[1]
    header = [f"x{i + 1}" for i in range(p)] + [f"code{k + 1}" for k in range(K)] + ["y"]
    lines = [",".join(header)]
    for i in range(ds.n):
        row = [_fmt(v) for v in ds.X[i]] + [str(int(c)) for c in ds.codes[i]] + [_fmt(ds.y[i])]
        lines.append(",".join(row))
    _atomic_write(csv_path, "\n".join(lines) + "\n")
    side = {
        "format": "mmbeddings-dataset",
        "config": asdict(ds.config),
        "cardinalities": ds.cardinalities,
        "B_true": [B.tolist() for B in ds.B_true],
        "w": None if ds.w is None else ds.w.tolist(),
        "labels_b": None if ds.labels_b is None else ds.labels_b.tolist(),
        "threshold": ds.threshold,
        "meta": ds.meta,
    }
    _atomic_write(sidecar_path(csv_path), json.dumps(side, indent=1) + "\n")


def load_dataset(csv_path: str) -> SimDataset:
    with open(sidecar_path(csv_path)) as fh:
        side = json.load(fh)
    with open(csv_path) as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
    xcols = [i for i, h in enumerate(header) if h.startswith("x")]
    ccols = [i for i, h in enumerate(header) if h.startswith("code")]
    X = data[:, xcols]
    codes = data[:, ccols].astype(np.int64)
    y = data[:, header.index("y")]
    B = [np.array(b, dtype=np.float64) for b in side["B_true"]]
    config = SimConfig.from_dict(side["config"])
    return SimDataset(
        X, codes, B, y, f_true(X, B, codes), config, side.get("threshold"),
        None if side.get("w") is None else np.array(side["w"]),
        None if side.get("labels_b") is None else np.array(side["labels_b"], dtype=np.int64),
        side.get("meta", {}),
    )


def _atomic_write(path: str, text: str) -> None:
    tmp = path + ".tmp"
    try:
        with open(tmp, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise
