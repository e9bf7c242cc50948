"""Master/slave interactive training, grid search and sensitivity sweeps."""
from __future__ import annotations

import csv
import hashlib
import io
import math
from dataclasses import asdict, dataclass, field, fields, replace
from itertools import product

import numpy as np

from .datamodel import MODALITIES
from .fusion import (
    Ablation,
    M2P2Model,
    ModelConfig,
    collate,
    persuasion_loss,
    total_loss,
    unit_to_label,
)
from .heterogeneity import (
    ModalityWeights,
    compute_target_weights,
    mse,
    reference_loss,
    update_weights,
)
from .optim import Adam
from .tensorcore import Context, backward


class DivergenceError(RuntimeError):
    def __init__(self, epoch, what="loss"):
        super().__init__(f"non-finite {what} at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-5
    epochs: int = 200  # N, master epochs
    slave_epochs: int = 10  # n
    gamma: float = 0.1
    alpha: float = 0.5
    beta: float = 50.0
    batch_size: int = 32
    seed: int = 0
    task: str = "IPP"
    ablation: str = "full"
    ref_train_on: str = "val"
    dropout: float = 0.4
    positional: bool = True
    patience: int | None = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.epochs < 0 or self.slave_epochs < 0:
            raise ValueError("epochs and slave_epochs must be >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.weight_decay < 0 or self.gamma < 0:
            raise ValueError("weight_decay and gamma must be >= 0")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.task not in ("IPP", "DOP"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.ref_train_on not in ("train", "val"):
            raise ValueError("ref_train_on must be 'train' or 'val'")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if self.patience is not None and self.patience < 1:
            raise ValueError("patience must be >= 1")
        Ablation.parse(self.ablation)

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**obj)

    def to_dict(self):
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    L_final: float
    L_pers: float
    L_align: float
    val_metric: float
    w: tuple  # weights after this epoch's update
    ref_losses: tuple | None  # validation losses of the reference models
    target: tuple | None  # softmax target computed from ref_losses


HISTORY_COLUMNS = ["epoch", "L_final", "L_pers", "L_align", "val_metric", "w_A", "w_V", "w_L",
                   "ref_A", "ref_V", "ref_L"]


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def column(self, name):
        return [getattr(r, name) for r in self.records]

    def weight_trajectory(self):
        return np.array([r.w for r in self.records]).reshape(-1, 3)

    def rows(self):
        for r in self.records:
            refs = r.ref_losses if r.ref_losses is not None else ("",) * 3
            yield [r.epoch, r.L_final, r.L_pers, r.L_align, r.val_metric, *r.w, *refs]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for row in self.rows():
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])
        return buf.getvalue()

    def __eq__(self, other):
        return isinstance(other, TrainHistory) and self.to_csv() == other.to_csv()


def param_hash(params: dict) -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(params[k].data.tobytes())
    return h.hexdigest()


def minibatches(n: int, batch_size: int, rng) -> list[np.ndarray]:
    """Shuffled index batches. A trailing single item is merged into the
    previous batch, since the covariance term needs two samples."""
    order = rng.permutation(n)
    batches = [order[i: i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


def evaluate_metric(y_true, y_pred, task) -> float:
    """MSE in label space for IPP, accuracy (ties to class 1) for DOP."""
    y_true, y_pred = np.asarray(y_true, float), np.asarray(y_pred, float)
    if task == "IPP":
        return float(np.mean((y_true - y_pred) ** 2))
    return float(np.mean((y_pred >= 0.5).astype(float) == y_true))


def better(a, b, task) -> bool:
    return a < b if task == "IPP" else a > b


@dataclass
class TrainResult:
    model: M2P2Model
    weights: ModalityWeights
    history: TrainHistory
    config: TrainConfig


class Trainer:
    """Holds the state of one training run; ``run`` executes the whole schedule.

    Each master epoch: update theta over shuffled minibatches; embed the
    reference and validation clips with the encoders in eval mode (no
    gradient reaches theta); run ``slave_epochs`` epochs per reference model;
    score each reference model on the validation set; move the modality
    weights towards the softmax target.
    """

    def __init__(self, config: TrainConfig, train_clips, val_clips, dims: dict):
        if not train_clips:
            raise ValueError("empty training set")
        if not val_clips:
            raise ValueError("empty validation set")
        if len(train_clips) < 2:
            raise ValueError("training set needs at least 2 clips")
        self.config = config
        self.train_clips = list(train_clips)
        self.val_clips = list(val_clips)
        self.ablation = Ablation.parse(config.ablation)
        s = config.seed
        self.model = M2P2Model(
            ModelConfig(dict(dims), config.task, self.ablation, config.dropout, config.positional),
            np.random.default_rng([s, 0]))
        self.shuffle_rng = np.random.default_rng([s, 1])
        self.master_ctx = Context("train", np.random.default_rng([s, 2]))
        self.slave_rng = np.random.default_rng([s, 3])
        self.slave_ctx = Context("train", np.random.default_rng([s, 4]))
        self.eval_ctx = Context("eval")
        self.opt = Adam(self.model.parameters(), config.lr, weight_decay=config.weight_decay)
        self.ref_opts = {m: Adam(self.model.refs[m].parameters(), config.lr,
                                 weight_decay=config.weight_decay) for m in MODALITIES}
        self.weights = ModalityWeights(alpha=config.alpha, beta=config.beta)
        self.history = TrainHistory()
        self.epoch = 0
        self._val_batch = collate(self.val_clips, config.task)
        ref_clips = self.val_clips if config.ref_train_on == "val" else self.train_clips
        self._ref_batch = collate(ref_clips, config.task)

    # -- master ---------------------------------------------------------------
    def master_epoch(self):
        cfg = self.config
        totals = np.zeros(3)
        n_seen = 0
        for idx in minibatches(len(self.train_clips), cfg.batch_size, self.shuffle_rng):
            batch = collate([self.train_clips[i] for i in idx], cfg.task)
            out = self.model(batch, self.weights, self.master_ctx)
            l_pers = persuasion_loss(out.pred, batch.y, cfg.task)
            l_align = out.alignment.loss if out.alignment is not None else None
            no_align = self.ablation.no_alignment or l_align is None
            loss = total_loss(l_pers, l_align, cfg.gamma, no_alignment=no_align)
            if not math.isfinite(loss.item()):
                raise DivergenceError(self.epoch)
            grads = backward(loss, self.model.parameters())
            self.opt.step(grads)
            la = 0.0 if no_align else l_align.item()
            totals += len(idx) * np.array([loss.item(), l_pers.item(), la])
            n_seen += len(idx)
        return totals / n_seen

    # -- slave ----------------------------------------------------------------
    def latents(self, batch):
        """Encoder outputs in eval mode, as plain arrays (stop-gradient)."""
        lat, _ = self.model.encode(batch, self.eval_ctx, MODALITIES)
        return {m: t.data.copy() for m, t in lat.items()}

    def slave_phase(self):
        """Train each reference model for ``slave_epochs`` epochs on frozen latents."""
        cfg = self.config
        ref_lat = self.latents(self._ref_batch)
        for m in MODALITIES:
            ref = self.model.refs[m]
            params = ref.parameters()
            for _ in range(cfg.slave_epochs):
                for idx in minibatches(len(self._ref_batch), cfg.batch_size, self.slave_rng):
                    loss = mse(ref(ref_lat[m][idx], self.slave_ctx), self._ref_batch.y[idx])
                    if not math.isfinite(loss.item()):
                        raise DivergenceError(self.epoch, f"reference loss ({m})")
                    self.ref_opts[m].step(backward(loss, params))
        val_lat = self.latents(self._val_batch)
        return tuple(reference_loss(self.model.refs[m], val_lat[m], self._val_batch.y, self.eval_ctx)
                     for m in MODALITIES)

    def weight_update(self, ref_losses):
        target = compute_target_weights(ref_losses, self.config.beta)
        self.weights = update_weights(self.weights, target, ref_losses)
        return target

    # -- evaluation -------------------------------------------------------------
    def predict(self, clips, ctx=None):
        """Predictions in label space for ``clips`` (eval mode)."""
        batch = collate(clips, self.config.task)
        out = self.model(batch, self.weights, ctx or self.eval_ctx)
        return unit_to_label(out.pred.data, self.config.task), batch, out

    def val_metric(self):
        pred, _, _ = self.predict(self.val_clips)
        return evaluate_metric([c.label for c in self.val_clips], pred, self.config.task)

    def step(self):
        l_final, l_pers, l_align = self.master_epoch()
        ref_losses = target = None
        if self.ablation.uses_weights:
            ref_losses = self.slave_phase()
            target = tuple(self.weight_update(ref_losses).tolist())
        metric = self.val_metric()
        if not math.isfinite(metric):
            raise DivergenceError(self.epoch, "validation metric")
        self.history.records.append(EpochRecord(
            self.epoch, float(l_final), float(l_pers), float(l_align), metric,
            tuple(self.weights.w.tolist()), ref_losses, target))
        self.epoch += 1

    def run(self) -> TrainResult:
        cfg = self.config
        best, best_state, since = None, None, 0
        for _ in range(cfg.epochs):
            self.step()
            if cfg.patience is None:
                continue
            metric = self.history[-1].val_metric
            if best is None or better(metric, best, cfg.task):
                best, since = metric, 0
                best_state = self._snapshot()
            else:
                since += 1
                if since >= cfg.patience:
                    self._restore(best_state)
                    break
        return TrainResult(self.model, self.weights, self.history, cfg)

    def _snapshot(self):
        return ({k: p.data.copy() for k, p in self.model.all_parameters().items()},
                {k: b.copy() for k, b in self.model.buffers().items()}, self.weights)

    def _restore(self, state):
        params, buffers, weights = state
        for k, p in self.model.all_parameters().items():
            p.data[...] = params[k]
        for k, b in self.model.buffers().items():
            b[...] = buffers[k]
        self.weights = weights


def train(config: TrainConfig, train_clips, val_clips, dims=None) -> TrainResult:
    if dims is None:
        c = (list(train_clips) or list(val_clips))[0]
        dims = {m: c.sequence(m).shape[1] for m in MODALITIES}
    return Trainer(config, train_clips, val_clips, dims).run()


def replay_weights(history: TrainHistory, alpha: float, beta: float) -> np.ndarray:
    """Recompute the weight trajectory from the logged reference losses alone."""
    w = np.full(3, 1.0 / 3.0)
    out = []
    for r in history.records:
        if r.ref_losses is not None:
            w = alpha * w + (1.0 - alpha) * compute_target_weights(r.ref_losses, beta)
        out.append(w.copy())
    return np.array(out).reshape(-1, 3)


# -- hyper-parameter search ----------------------------------------------------

GRID_KEYS = ("lr", "gamma", "alpha", "beta")


@dataclass
class GridResult:
    best: TrainConfig
    table: list  # dicts: lr, gamma, alpha, beta, fold, val_metric ... plus mean rows


def _fold_val_metric(config, manifest, fold):
    from .evalkit import prepare_fold

    train_clips, val_clips, _ = prepare_fold(manifest, fold)
    trainer = Trainer(config, train_clips, val_clips, manifest.dims)
    trainer.run()
    return trainer.val_metric()


def grid_search(template: TrainConfig, grid: dict, manifest, plan, evaluate=None) -> GridResult:
    """Train every grid point on every fold and keep the best mean validation
    metric (lowest MSE for IPP, highest accuracy for DOP). Ties go to the
    lexicographically smallest (lr, gamma, alpha, beta)."""
    unknown = set(grid) - set(GRID_KEYS)
    if unknown:
        raise ValueError(f"grid keys must be among {GRID_KEYS}, got {sorted(unknown)}")
    axes = {k: list(grid.get(k, [getattr(template, k)])) for k in GRID_KEYS}
    if any(len(v) == 0 for v in axes.values()):
        raise ValueError("empty grid")
    evaluate = evaluate or _fold_val_metric
    table, scored = [], []
    for point in product(*(axes[k] for k in GRID_KEYS)):
        cfg = replace(template, **dict(zip(GRID_KEYS, point)))
        vals = []
        for i, fold in enumerate(plan.folds):
            v = float(evaluate(cfg, manifest, fold))
            vals.append(v)
            table.append({**dict(zip(GRID_KEYS, point)), "fold": i, "val_metric": v})
        mean = float(np.mean(vals))
        table.append({**dict(zip(GRID_KEYS, point)), "fold": "mean", "val_metric": mean})
        score = mean if template.task == "IPP" else -mean
        scored.append(((score, *point), cfg))
    scored.sort(key=lambda s: s[0])
    return GridResult(scored[0][1], table)


@dataclass
class SensitivityRow:
    param: str
    sign: str
    value: float
    metric: float
    baseline: float
    rel_change: float


def _default_sweep_metric(config, manifest, plan):
    from .evalkit import run_folds

    return run_folds(manifest, plan, config).mean


def sensitivity_sweep(best: TrainConfig, manifest, plan, params=("alpha", "beta", "gamma"),
                      delta=0.05, evaluate=None, baseline=None) -> list[SensitivityRow]:
    """Perturb each parameter by +-delta (relative), others fixed, and report
    the relative change of the metric against the unperturbed run."""
    evaluate = evaluate or _default_sweep_metric
    if baseline is None:
        baseline = float(evaluate(best, manifest, plan))
    rows = []
    for name in params:
        for sign, factor in (("+", 1.0 + delta), ("-", 1.0 - delta)):
            value = getattr(best, name) * factor
            metric = float(evaluate(replace(best, **{name: value}), manifest, plan))
            rel = (metric - baseline) / baseline if baseline != 0 else metric - baseline
            rows.append(SensitivityRow(name, sign, value, metric, baseline, rel))
    return rows
