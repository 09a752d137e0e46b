"""Predictive and embedding-quality metrics."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist
from scipy.stats import rankdata

from .nn import sigmoid
from .simgen import gen_downstream_binary

FULL_PAIRS_MAX_Q = 2000
SAMPLED_PAIRS = 2_000_000
EXACT_RANGE_MAX_Q = 20_000


class UndefinedMetricError(ValueError):
    pass


def mse(y, y_hat) -> float:
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape or y.size == 0:
        raise ValueError(f"need equal non-empty lengths, got {y.shape} and {y_hat.shape}")
    return float(np.mean((y - y_hat) ** 2))


def auc(scores, labels) -> float:
    """ROC AUC via the Mann-Whitney U statistic; tied pairs count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both classes present")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _sample_pairs(q: int, n_pairs: int, rng: np.random.Generator):
    i = rng.integers(0, q, size=n_pairs)
    j = rng.integers(0, q - 1, size=n_pairs)
    j = j + (j >= i)  # uniform over j != i
    return np.minimum(i, j), np.maximum(i, j)


def _pair_distances(B, i, j, chunk=200_000):
    out = np.empty(i.shape[0])
    for s in range(0, i.shape[0], chunk):
        diff = B[i[s : s + chunk]] - B[j[s : s + chunk]]
        out[s : s + chunk] = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    return out


def _distance_range(B, rows_per_block=512):
    lo, hi = math.inf, 0.0
    sq = np.einsum("ij,ij->i", B, B)
    q = B.shape[0]
    for s in range(0, q, rows_per_block):
        blk = B[s : s + rows_per_block]
        d2 = sq[s : s + rows_per_block, None] + sq[None, :] - 2.0 * blk @ B.T
        idx = np.arange(s, min(s + rows_per_block, q))
        mask = np.arange(q)[None, :] > idx[:, None]
        if not mask.any():
            continue
        vals = np.sqrt(np.maximum(d2[mask], 0.0))
        lo = min(lo, vals.min())
        hi = max(hi, vals.max())
    return lo, hi


def rmse_d(B_true, B_est, method: str = "auto", n_pairs: int = SAMPLED_PAIRS, seed: int = 0) -> float:
    """Normalized RMSE between the pairwise Euclidean distances of two embeddings.

    ``method="auto"`` uses every pair for q <= 2000 and a seeded sample of
    ``n_pairs`` pairs above that.
    """
    B_true = np.asarray(B_true, dtype=np.float64)
    B_est = np.asarray(B_est, dtype=np.float64)
    if B_true.shape[0] != B_est.shape[0]:
        raise ValueError("embeddings must share the number of levels")
    q = B_true.shape[0]
    if q < 2:
        raise ValueError("need at least two levels")
    if method == "auto":
        method = "full" if q <= FULL_PAIRS_MAX_Q else "sample"
    if method == "full":
        d_true, d_est = pdist(B_true), pdist(B_est)
        lo, hi = d_true.min(), d_true.max()
    elif method == "sample":
        i, j = _sample_pairs(q, n_pairs, np.random.default_rng(seed))
        d_true, d_est = _pair_distances(B_true, i, j), _pair_distances(B_est, i, j)
        if q <= EXACT_RANGE_MAX_Q:
            lo, hi = _distance_range(B_true)
        else:
            lo, hi = d_true.min(), d_true.max()
    else:
        raise ValueError(f"unknown method {method!r}")
    if not hi > lo:
        raise ValueError("true distances are degenerate (max == min)")
    return float(np.sqrt(np.mean((d_true - d_est) ** 2)) / (hi - lo))


@dataclass
class LogisticFit:
    weights: np.ndarray
    intercept: float
    converged: bool
    n_iter: int
    nll_path: list[float]

    def decision(self, F) -> np.ndarray:
        return np.asarray(F, dtype=np.float64) @ self.weights + self.intercept

    def predict_proba(self, F) -> np.ndarray:
        return sigmoid(self.decision(F))


def logistic_objective(F, labels, w, b, ridge):
    z = F @ w + b
    return float(np.mean(np.logaddexp(0.0, z) - labels * z) + ridge * (w @ w))


def fit_logistic(F, labels, ridge: float = 1e-3, tol: float = 1e-6, max_iter: int = 5000) -> LogisticFit:
    """Ridge logistic regression by full-batch gradient descent.

    Minimizes mean Bernoulli NLL + ``ridge * ||w||^2`` (intercept unpenalized)
    with a fixed 1/L step, which makes the objective non-increasing.
    """
    F = np.asarray(F, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if labels.min() == labels.max():
        raise UndefinedMetricError("logistic regression needs both classes present")
    n, d = F.shape
    A = np.column_stack([F, np.ones(n)])
    lipschitz = 0.25 * np.linalg.norm(A, 2) ** 2 / n + 2.0 * ridge
    step = 1.0 / lipschitz
    w = np.zeros(d)
    b = 0.0
    path = [logistic_objective(F, labels, w, b, ridge)]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        r = sigmoid(F @ w + b) - labels
        gw = F.T @ r / n + 2.0 * ridge * w
        gb = float(r.mean())
        if math.sqrt(gw @ gw + gb * gb) < tol:
            converged = True
            it -= 1
            break
        w = w - step * gw
        b = b - step * gb
        path.append(logistic_objective(F, labels, w, b, ridge))
    if not converged:
        warnings.warn("fit_logistic did not reach the gradient tolerance", RuntimeWarning)
    return LogisticFit(w, b, converged, it, path)


def auc_b_pipeline(
    B_true, B_est, rng: np.random.Generator, train_frac: float = 0.7, ridge: float = 1e-3,
    weight_scale: float = 1.0, labels=None,
) -> float:
    """Downstream probe: logistic regression on estimated embeddings predicting
    labels generated from the true ones, scored on held-out levels."""
    B_true = np.asarray(B_true, dtype=np.float64)
    B_est = np.asarray(B_est, dtype=np.float64)
    if B_true.shape[0] != B_est.shape[0]:
        raise ValueError("embeddings must share the number of levels")
    if labels is None:
        _, labels = gen_downstream_binary(B_true, rng, weight_scale)
    q = B_true.shape[0]
    perm = rng.permutation(q)
    n_tr = int(round(train_frac * q))
    tr, te = perm[:n_tr], perm[n_tr:]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        fit = fit_logistic(B_est[tr], labels[tr], ridge=ridge)
    return auc(fit.decision(B_est[te]), labels[te])


def _pearson_matrix(A, B):
    A = A - A.mean(axis=0)
    B = B - B.mean(axis=0)
    na = np.sqrt((A * A).sum(axis=0))
    nb = np.sqrt((B * B).sum(axis=0))
    with np.errstate(invalid="ignore", divide="ignore"):
        r = (A.T @ B) / np.outer(na, nb)
    r[~np.isfinite(r)] = 0.0
    return r


def match_components(B_true, B_est) -> list[tuple[int, float]]:
    """For each true column, the estimated column with largest |Pearson r|."""
    B_true = np.asarray(B_true, dtype=np.float64)
    B_est = np.asarray(B_est, dtype=np.float64)
    if B_true.shape[0] != B_est.shape[0]:
        raise ValueError("embeddings must share the number of levels")
    r = _pearson_matrix(B_true, B_est)
    best = np.argmax(np.abs(r), axis=1)
    return [(int(j), float(r[m, j])) for m, j in enumerate(best)]


METRIC_ROW_HEADER = "method,q,rep,metric_task,mse_or_auc_y,rmse_d,auc_b,n_params,seed"


@dataclass
class MetricRow:
    method: str
    q: int
    rep: int
    metric_task: str  # "mse_y" or "auc_y"
    mse_or_auc_y: float
    rmse_d: float | None
    auc_b: float | None
    n_params: int
    seed: int

    def to_csv(self) -> str:
        def f(v):
            return "" if v is None else repr(float(v))

        return ",".join(
            [self.method, str(self.q), str(self.rep), self.metric_task, f(self.mse_or_auc_y),
             f(self.rmse_d), f(self.auc_b), str(self.n_params), str(self.seed)]
        )

    @classmethod
    def from_csv(cls, line: str) -> "MetricRow":
        m, q, rep, task, y, rd, ab, npar, seed = line.strip().split(",")
        opt = lambda v: None if v == "" else float(v)  # noqa: E731
        return cls(m, int(q), int(rep), task, float(y), opt(rd), opt(ab), int(npar), int(seed))
