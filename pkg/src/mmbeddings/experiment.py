"""Seeded simulate -> train -> evaluate runs and their aggregation."""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import ttest_rel

from .baselines import METHODS
from .metrics import METRIC_ROW_HEADER, MetricRow, auc, auc_b_pipeline, mse, rmse_d
from .simgen import SimConfig, SimDataset, default_test_size, simulate, simulate_test
from .trainer import FitResult, TrainConfig, fit, predict
from .variational import CatFeatureSpec, ModelConfig

log = logging.getLogger(__name__)

ALPHA = 0.05
# methods whose embeddings live in the same space as the true ones
EMBEDDING_METHODS = ("mmbed", "embed", "embed_l2", "rebed")


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def model_config_for(ds: SimDataset, overrides: dict | None = None) -> ModelConfig:
    base = {
        "p": ds.X.shape[1],
        "features": [CatFeatureSpec(q, ds.config.d) for q in ds.cardinalities],
        "task": ds.config.task,
    }
    base.update(overrides or {})
    return ModelConfig(**base)


def evaluate_fit(method: str, model, embeddings, test: SimDataset, rep: int, seed: int) -> MetricRow:
    mats = embeddings.matrices if hasattr(embeddings, "matrices") else embeddings
    y_hat = predict(model, mats, test.X, test.codes)
    task = test.config.task
    if task == "regression":
        metric_task, score = "mse_y", mse(test.y, y_hat)
    else:
        metric_task, score = "auc_y", auc(y_hat, test.y)
    rd = ab = None
    if method in EMBEDDING_METHODS:
        rd = float(np.mean([rmse_d(B, M) for B, M in zip(test.B_true, mats)]))
        ab = auc_b_pipeline(
            test.B_true[0], mats[0], np.random.default_rng(derive_seed(seed, 3)), labels=test.labels_b
        )
    q = test.cardinalities[0]
    return MetricRow(method, q, rep, metric_task, score, rd, ab, model.count_parameters()["total"], seed)


@dataclass
class ExperimentConfig:
    sim: dict = field(default_factory=dict)
    q_grid: list[int] = field(default_factory=lambda: [100])
    methods: list[str] = field(default_factory=lambda: ["mmbed", "embed", "ignore"])
    train: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    replications: int = 10
    n_test: int | None = None
    output_dir: str | None = None

    def __post_init__(self):
        if not self.methods:
            raise ValueError("methods: need at least one method")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ValueError(f"methods: unknown {bad}; choose from {list(METHODS)}")
        if self.replications < 1:
            raise ValueError("replications: must be >= 1")
        if not self.q_grid:
            raise ValueError("q_grid: need at least one cardinality")
        for key in ("q", "seed"):
            if key in self.sim:
                raise ValueError(f"sim.{key}: set through q_grid / --seed instead")
        SimConfig(**self.sim)  # validate early
        TrainConfig.from_dict(self.train)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown experiment fields: {sorted(unknown)}")
        return cls(**data)


@dataclass
class RunRecord:
    row: MetricRow | None
    val_loss: list[float]
    epoch_seconds: list[float]
    error: str | None = None


def run_replication(cfg: ExperimentConfig, q: int, rep: int, seed: int) -> dict[str, RunRecord]:
    """One dataset, every method; methods share data and training seed."""
    data_seed = derive_seed(seed, q, rep)
    ds = simulate(SimConfig(q=q, seed=data_seed, **cfg.sim))
    test = simulate_test(ds, cfg.n_test or default_test_size(ds.n))
    out = {}
    for method in cfg.methods:
        tcfg = TrainConfig.from_dict({**cfg.train, "seed": data_seed})
        try:
            res: FitResult = fit(method, model_config_for(ds, cfg.model), ds, tcfg)
            row = evaluate_fit(method, res.model, res.embeddings, test, rep, data_seed)
            out[method] = RunRecord(row, res.report.val_loss, res.report.epoch_seconds)
        except Exception as exc:  # recorded; the sweep keeps going
            log.warning("q=%d rep=%d method=%s failed: %s", q, rep, method, exc)
            out[method] = RunRecord(None, [], [], f"{type(exc).__name__}: {exc}")
    return out


@dataclass
class SweepResult:
    rows: list[MetricRow]
    records: dict  # (q, method, rep) -> RunRecord
    summary: list[dict]
    failures: list[tuple]

    @property
    def partial(self) -> bool:
        return bool(self.failures)


def paired_p_value(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    diff = a - b
    if diff.size == 0 or np.all(diff == 0):
        return 1.0
    if diff.size < 2:
        return math.nan  # no test possible; only the best method is bolded
    if np.allclose(diff, diff[0]):
        return 0.0  # constant nonzero offset: no spread, t is unbounded
    p = ttest_rel(a, b).pvalue
    return 1.0 if not math.isfinite(p) else float(p)


def _metric_columns(rows: list[MetricRow]):
    task = rows[0].metric_task
    return [
        (task, lambda r: r.mse_or_auc_y, task == "mse_y"),
        ("rmse_d", lambda r: r.rmse_d, True),
        ("auc_b", lambda r: r.auc_b, False),
    ]


def aggregate(rows: list[MetricRow], methods: list[str], alpha: float = ALPHA) -> list[dict]:
    """Means, standard errors and the non-inferiority flag per (q, metric, method)."""
    summary = []
    for q in sorted({r.q for r in rows}):
        at_q = [r for r in rows if r.q == q]
        for metric, get, lower_better in _metric_columns(at_q):
            cols = {}
            for m in methods:
                vals = {r.rep: get(r) for r in at_q if r.method == m and get(r) is not None}
                if vals:
                    cols[m] = vals
            if not cols:
                continue
            means = {m: float(np.mean(list(v.values()))) for m, v in cols.items()}
            best = (min if lower_better else max)(means, key=means.get)
            for m in methods:
                if m not in cols:
                    continue
                vals = np.array(list(cols[m].values()))
                se = float(vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else 0.0
                shared = sorted(set(cols[m]) & set(cols[best]))
                p = 1.0 if m == best else paired_p_value(
                    [cols[m][r] for r in shared], [cols[best][r] for r in shared]
                )
                summary.append({
                    "q": q, "metric": metric, "method": m, "mean": means[m], "se": se,
                    "n": int(vals.size), "best": best, "p_vs_best": p, "bold": m == best or p >= alpha,
                })
    return summary


def run_sweep(cfg: ExperimentConfig, seed: int, jobs: int = 1) -> SweepResult:
    tasks = [(q, rep) for q in cfg.q_grid for rep in range(cfg.replications)]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            futures = [pool.submit(run_replication, cfg, q, rep, seed) for q, rep in tasks]
            results = [f.result() for f in futures]
    else:
        results = [run_replication(cfg, q, rep, seed) for q, rep in tasks]
    rows, records, failures = [], {}, []
    # ordered reduction by (q, method, rep)
    by_key = {(q, m, rep): res[m] for (q, rep), res in zip(tasks, results) for m in cfg.methods}
    for q in cfg.q_grid:
        for m in cfg.methods:
            for rep in range(cfg.replications):
                rec = by_key[(q, m, rep)]
                records[(q, m, rep)] = rec
                if rec.row is None:
                    failures.append((q, m, rep, rec.error))
                else:
                    rows.append(rec.row)
    summary = aggregate(rows, cfg.methods) if rows else []
    return SweepResult(rows, records, summary, failures)


# output writers ------------------------------------------------------------

def _fmt_se(mean: float, se: float) -> str:
    se_txt = f"{se:.2f}"
    if se_txt.startswith("0"):
        se_txt = se_txt[1:]
    return f"{mean:.2f} ({se_txt})"


METRIC_LABELS = {"mse_y": "MSE_Y", "auc_y": "AUC_Y", "rmse_d": "RMSE_D", "auc_b": "AUC_B"}


def markdown_table(summary: list[dict], methods: list[str]) -> str:
    lines = ["| q | Metric | " + " | ".join(methods) + " |", "|---|---|" + "---|" * len(methods)]
    seen = []
    for s in summary:
        if (s["q"], s["metric"]) not in seen:
            seen.append((s["q"], s["metric"]))
    for q, metric in seen:
        cells = []
        for m in methods:
            hit = [s for s in summary if s["q"] == q and s["metric"] == metric and s["method"] == m]
            if not hit:
                cells.append("--")
                continue
            txt = _fmt_se(hit[0]["mean"], hit[0]["se"])
            cells.append(f"**{txt}**" if hit[0]["bold"] else txt)
        lines.append(f"| {q} | {METRIC_LABELS[metric]} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


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


def write_sweep(result: SweepResult, cfg: ExperimentConfig, out_dir: str) -> dict[str, str]:
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "metrics": os.path.join(out_dir, "metrics.csv"),
        "summary": os.path.join(out_dir, "summary.csv"),
        "table": os.path.join(out_dir, "summary.md"),
        "val_curves": os.path.join(out_dir, "val_curves.csv"),
        "runtime": os.path.join(out_dir, "runtime.csv"),
    }
    _atomic_write(paths["metrics"], "\n".join([METRIC_ROW_HEADER] + [r.to_csv() for r in result.rows]) + "\n")
    lines = ["q,metric,method,mean,se,n,best,p_vs_best,bold"]
    for s in result.summary:
        lines.append(
            f"{s['q']},{s['metric']},{s['method']},{s['mean']!r},{s['se']!r},{s['n']},"
            f"{s['best']},{s['p_vs_best']!r},{int(s['bold'])}"
        )
    _atomic_write(paths["summary"], "\n".join(lines) + "\n")
    _atomic_write(paths["table"], markdown_table(result.summary, cfg.methods))
    curves = ["q,method,rep,epoch,val_loss,normalized"]
    runtime = ["q,method,mean_seconds_per_epoch,se"]
    for q in cfg.q_grid:
        for m in cfg.methods:
            per_rep = []
            for rep in range(cfg.replications):
                rec = result.records[(q, m, rep)]
                if rec.val_loss:
                    lo = min(rec.val_loss)
                    for e, v in enumerate(rec.val_loss):
                        curves.append(f"{q},{m},{rep},{e},{v!r},{v / lo!r}")
                if rec.epoch_seconds:
                    per_rep.append(float(np.mean(rec.epoch_seconds)))
            if per_rep:
                se = float(np.std(per_rep, ddof=1) / math.sqrt(len(per_rep))) if len(per_rep) > 1 else 0.0
                runtime.append(f"{q},{m},{float(np.mean(per_rep))!r},{se!r}")
    _atomic_write(paths["val_curves"], "\n".join(curves) + "\n")
    # wall-clock data: the only output that is not reproducible from (config, seed)
    _atomic_write(paths["runtime"], "\n".join(runtime) + "\n")
    if result.failures:
        fails = ["q,method,rep,error"] + [f"{q},{m},{rep},\"{err}\"" for q, m, rep, err in result.failures]
        _atomic_write(os.path.join(out_dir, "failures.csv"), "\n".join(fails) + "\n")
    return paths
