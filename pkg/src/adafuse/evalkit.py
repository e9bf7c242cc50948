"""Metrics, fold orchestration, a paired t-test and diagnostic exports."""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .alignment import mean_pairwise_cosine
from .datamodel import DataError, DatasetManifest, Fold, FoldPlan, normalize_meta
from .encoder import temporal_attention
from .fusion import save_checkpoint
from .trainer import HISTORY_COLUMNS, TrainConfig, Trainer, param_hash


# -- metrics -------------------------------------------------------------------

def _pair(y, yhat):
    y, yhat = np.asarray(y, dtype=float), np.asarray(yhat, dtype=float)
    if y.shape != yhat.shape:
        raise ValueError(f"length mismatch: {y.shape} vs {yhat.shape}")
    if y.size == 0:
        raise ValueError("metric of an empty set")
    return y, yhat


def mse(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    return float(np.mean((y - yhat) ** 2))


def accuracy(y, yhat, threshold: float = 0.5) -> float:
    """Fraction correct with ``yhat >= threshold`` read as class 1."""
    y, yhat = _pair(y, yhat)
    return float(np.mean((yhat >= threshold).astype(float) == y))


def task_metric(y, yhat, task) -> float:
    return mse(y, yhat) if task == "IPP" else accuracy(y, yhat)


def mse_decrease(ours: float, baseline: float) -> float:
    """``1 - ours / baseline``."""
    if baseline <= 0:
        raise ValueError("baseline MSE must be positive")
    return 1.0 - ours / baseline


# -- Student t -------------------------------------------------------------------

def _betacf(a, b, x, max_iter=500, tol=1e-16):
    # modified Lentz evaluation of the continued fraction for I_x(a, b)
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, 1.0 - x) / b


def t_cdf(t: float, df: float) -> float:
    """P(T <= t) for Student's t with ``df`` degrees of freedom."""
    if df <= 0:
        raise ValueError("df must be positive")
    if math.isinf(t):
        return 1.0 if t > 0 else 0.0
    tail = 0.5 * betainc(df / 2.0, 0.5, df / (df + t * t))
    return 1.0 - tail if t > 0 else tail


@dataclass(frozen=True)
class TTest:
    t: float
    p: float
    df: int
    mean_diff: float


def paired_t_test(a, b) -> TTest:
    """Two-sided paired t-test of ``a - b``."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-D and of equal length")
    n = a.size
    if n < 2:
        raise ValueError("paired t-test needs at least 2 pairs")
    d = a - b
    sd = d.std(ddof=1)
    if sd == 0.0 or not math.isfinite(sd):
        raise ValueError("degenerate: zero variance")
    t = float(d.mean() / (sd / math.sqrt(n)))
    p = betainc((n - 1) / 2.0, 0.5, (n - 1) / (n - 1 + t * t))
    return TTest(t, float(p), n - 1, float(d.mean()))


# -- folds -----------------------------------------------------------------------

def prepare_fold(manifest: DatasetManifest, fold: Fold):
    """Train / val / test clips of a fold, meta scaled with training-set ranges only."""
    train = manifest.clips_in(fold.train_episodes)
    val = manifest.clips_in(fold.val_episodes)
    test = manifest.clips_in(fold.test_episodes)
    if not train or not val or not test:
        raise DataError(f"fold {fold.test_episodes}: train, val and test must all be non-empty")
    return normalize_meta(train, train), normalize_meta(train, val), normalize_meta(train, test)


@dataclass
class FoldResult:
    fold_id: int
    test_episodes: tuple
    metric: float
    n_test: int
    predictions: list  # (clip_id, y_true, y_pred) in label space
    weights: tuple
    history: object
    attention: dict  # clip_id -> modality -> per-timestep attention mass
    mean_cosine: float | None  # mean pairwise cosine of shared projections on test clips
    theta_hash: str = ""


@dataclass
class FoldReport:
    task: str
    folds: list = field(default_factory=list)

    def __len__(self):
        return len(self.folds)

    @property
    def metrics(self):
        return [f.metric for f in self.folds]

    @property
    def mean(self) -> float:
        """Arithmetic mean of the per-fold metrics."""
        return float(np.mean(self.metrics))


def run_fold(manifest: DatasetManifest, fold: Fold, config: TrainConfig, fold_id: int = 0):
    """Returns (FoldResult, trained model, final modality weights)."""
    train, val, test = prepare_fold(manifest, fold)
    trainer = Trainer(config, train, val, manifest.dims)
    trainer.run()
    pred, batch, out = trainer.predict(test)
    y = [c.label for c in test]
    attn = {}
    records = trainer.model.attention_records(batch, out)
    for i, c in enumerate(test):
        attn[c.clip_id] = {m: temporal_attention(records[m][i]).tolist() for m in records}
    cos = mean_pairwise_cosine(out.projected) if out.projected else None
    result = FoldResult(fold_id, tuple(fold.test_episodes), task_metric(y, pred, config.task), len(test),
                        [(c.clip_id, float(t), float(p)) for c, t, p in zip(test, y, pred)],
                        tuple(trainer.weights.w.tolist()), trainer.history, attn, cos,
                        param_hash(trainer.model.parameters()))
    return result, trainer.model, trainer.weights


def run_folds(manifest: DatasetManifest, plan: FoldPlan, config: TrainConfig, out_dir=None,
              checkpoints: bool = True, workers: int = 1) -> FoldReport:
    """Train and test every fold of ``plan``; with ``out_dir`` also write the
    report, diagnostics and per-fold checkpoints there.

    Folds are independent, so ``workers > 1`` runs them in separate
    processes; results are identical to a sequential run.
    """
    if len(plan) == 0:
        raise DataError("fold plan is empty")
    if config.task != manifest.task:
        config = replace(config, task=manifest.task)
    jobs = [(manifest, fold, config, i) for i, fold in enumerate(plan.folds)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(_run_fold_job, jobs))
    else:
        outputs = [run_fold(*job) for job in jobs]
    report = FoldReport(manifest.task)
    for i, (result, model, weights) in enumerate(outputs):
        report.folds.append(result)
        if out_dir is not None and checkpoints:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            save_checkpoint(Path(out_dir) / f"fold{i}.ckpt", model, weights,
                            {"fold": i, "train_config": config.to_dict()})
    if out_dir is not None:
        export_diagnostics(report, out_dir, config)
    return report


def _run_fold_job(job):
    return run_fold(*job)


# -- exports ---------------------------------------------------------------------

def _write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def export_diagnostics(report: FoldReport, out_dir, config: TrainConfig | None = None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metric = "mse" if report.task == "IPP" else "accuracy"
    _write_csv(out / "report.csv", ["fold", "test_episodes", metric, "n_test"],
               [[f.fold_id, " ".join(f.test_episodes), f.metric, f.n_test] for f in report.folds]
               + [["mean", "", report.mean, sum(f.n_test for f in report.folds)]])
    _write_csv(out / "weights.csv", ["fold", "w_A", "w_V", "w_L"],
               [[f.fold_id, *f.weights] for f in report.folds])
    hist_rows = []
    for f in report.folds:
        hist_rows += [[f.fold_id, *row] for row in f.history.rows()]
    _write_csv(out / "history.csv", ["fold"] + HISTORY_COLUMNS, hist_rows)
    _write_csv(out / "predictions.csv", ["fold", "clip_id", "y_true", "y_pred"],
               [[f.fold_id, *p] for f in report.folds for p in f.predictions])
    attention = {str(f.fold_id): f.attention for f in report.folds}
    (out / "attention.json").write_text(json.dumps(attention), encoding="utf-8")
    if config is not None:
        (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True),
                                         encoding="utf-8")


def metrics_from_predictions(path, task) -> dict:
    """Per-fold metric recomputed from an exported predictions.csv."""
    by_fold: dict = {}
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            by_fold.setdefault(int(row["fold"]), []).append((float(row["y_true"]), float(row["y_pred"])))
    return {k: task_metric([a for a, _ in v], [b for _, b in v], task) for k, v in by_fold.items()}


# -- leakage audit ---------------------------------------------------------------

def _without_test(manifest: DatasetManifest, fold: Fold, corrupt: bool):
    test = set(fold.test_episodes)
    clips = []
    for c in manifest.clips:
        if c.episode_id not in test:
            clips.append(c)
        elif corrupt:
            clips.append(replace(c, acoustic=c.acoustic * -3.0 + 5.0, visual=c.visual[::-1] * 7.0,
                                 language=c.language + 11.0, meta=c.meta * 1000.0 + 1.0,
                                 label=-c.label if manifest.task == "IPP" else 1.0 - c.label))
    return replace(manifest, clips=tuple(clips))


def leakage_audit(manifest: DatasetManifest, plan: FoldPlan, config: TrainConfig, fold_index=0):
    """Train one fold three times: as given, with the test clips removed and
    with the test clips scrambled. Returns (passed, hashes); passing means the
    trained parameters and modality weights are bit-identical."""
    fold = plan.folds[fold_index]
    hashes = {}
    for label, man in (("full", manifest), ("dropped", _without_test(manifest, fold, False)),
                       ("scrambled", _without_test(manifest, fold, True))):
        train = man.clips_in(fold.train_episodes)
        val = man.clips_in(fold.val_episodes)
        trainer = Trainer(config, normalize_meta(train, train), normalize_meta(train, val), man.dims)
        trainer.run()
        hashes[label] = param_hash(trainer.model.all_parameters()) + trainer.weights.w.tobytes().hex()
    return len(set(hashes.values())) == 1, hashes
