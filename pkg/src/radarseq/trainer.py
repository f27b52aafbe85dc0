"""Training with gradient accumulation, AUC early stopping and evaluation reports."""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field, asdict
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import metrics as M
from .model import RadarSeqModel

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "tn", "fp", "fn", "tp", "precision", "recall", "f1", "auc", "mcc", "accuracy")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    physical_batch: int = 64          # windows per micro-batch
    accumulation_steps: int = 4       # micro-batches per optimizer step
    max_epochs: int = 20
    early_stop_patience: int = 5
    seed: int = 0
    threshold: float = 0.5
    pos_weight: float = 1.0
    eval_test_each_epoch: bool = True
    restore_best: bool = True         # False keeps the final parameters (memorization checks)
    grad_clip: float = 0.0            # max global gradient norm per step; 0 disables

    def __post_init__(self):
        if min(self.learning_rate, self.physical_batch, self.accumulation_steps,
               self.max_epochs, self.early_stop_patience) <= 0:
            raise ValueError("training settings must be positive")
        if self.grad_clip < 0:
            raise ValueError("grad_clip must be nonnegative")
        if self.early_stop_patience >= self.max_epochs and self.max_epochs > 1:
            raise ValueError("early_stop_patience must be smaller than max_epochs")

    @property
    def logical_batch(self) -> int:
        return self.physical_batch * self.accumulation_steps


@dataclass
class EvalReport:
    split: str
    epoch: int
    tn: int
    fp: int
    fn: int
    tp: int
    precision: float
    recall: float
    f1: float
    auc: float | None
    mcc: float
    accuracy: float
    loss: float | None = None
    courier: dict | None = None

    @property
    def n(self) -> int:
        return self.tn + self.fp + self.fn + self.tp

    def percentages(self) -> dict:
        n = self.n or 1
        return {k: 100.0 * getattr(self, k) / n for k in ("tn", "fp", "fn", "tp")}

    def row(self) -> dict:
        return {k: getattr(self, k) for k in METRIC_COLUMNS}


def report_from_scores(scores, labels, split="test", epoch=0, threshold=0.5, loss=None) -> EvalReport:
    tn, fp, fn, tp = M.confusion(scores, labels, threshold)
    try:
        auc = M.roc_auc(scores, labels)
    except M.UndefinedMetric:
        warnings.warn(f"{split}: only one class present, ROC-AUC undefined")
        auc = None
    return EvalReport(split, epoch, tn, fp, fn, tp, **M.summarize(tn, fp, fn, tp), auc=auc, loss=loss)


def evaluate(model: RadarSeqModel, dataset, threshold: float = 0.5, split: str | None = None,
             epoch: int = 0, scores=None) -> EvalReport:
    """Per-window report with a per-courier (max over windows) report attached."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    split = split or (str(dataset.splits[0]) if len(dataset.splits) else "test")
    p = model.predict_proba(dataset) if scores is None else np.asarray(scores)
    y = dataset.labels.astype(int)
    loss = float(-np.mean(y * np.log(np.clip(p, ad.BCE_EPS, 1)) + (1 - y) * np.log(np.clip(1 - p, ad.BCE_EPS, 1))))
    rep = report_from_scores(p, y, split, epoch, threshold, loss)
    ids, inv = np.unique(dataset.courier_ids.astype(str), return_inverse=True)
    cp = np.full(len(ids), -np.inf)
    np.maximum.at(cp, inv, p)
    cy = np.zeros(len(ids), dtype=int)
    np.maximum.at(cy, inv, y)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        crep = report_from_scores(cp, cy, split, epoch, threshold)
    rep.courier = {k: v for k, v in asdict(crep).items() if k not in ("split", "epoch", "loss", "courier")}
    return rep


def track_confusion_over_epochs(history) -> dict[str, list[float]]:
    """Per-epoch TN/FP/FN/TP percentage series."""
    out = {"epoch": [], "tn": [], "fp": [], "fn": [], "tp": []}
    for rep in history:
        out["epoch"].append(rep.epoch)
        for k, v in rep.percentages().items():
            out[k].append(v)
    return out


class EarlyStopping:
    """Stop once ``patience`` epochs pass without a strictly greater monitor value."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ValueError("patience must be positive")
        self.patience = patience
        self.best_value = -np.inf
        self.best_epoch = 0
        self.last_epoch = 0

    def update(self, epoch: int, value) -> bool:
        """Record ``value`` for ``epoch``; returns True when training should stop."""
        self.last_epoch = epoch
        v = -np.inf if value is None or not np.isfinite(value) else float(value)
        if self.best_epoch == 0 or v > self.best_value:
            self.best_value, self.best_epoch = v, epoch
        return epoch - self.best_epoch >= self.patience


def stop_epoch(values, patience: int) -> tuple[int, int]:
    """(stop epoch, best epoch) for a monitor sequence, 1-based."""
    es = EarlyStopping(patience)
    for e, v in enumerate(values, start=1):
        if es.update(e, v):
            return e, es.best_epoch
    return len(values), es.best_epoch


class TrainingDiverged(ad.NumericError):
    def __init__(self, msg, state=None, epoch=0):
        super().__init__(msg)
        self.state = state
        self.epoch = epoch


@dataclass
class TrainResult:
    best_state: dict
    best_epoch: int
    best_auc: float | None
    stopped_epoch: int
    history: list = field(default_factory=list)        # validation reports
    test_history: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)


def courier_batches(dataset, batch_size: int, rng) -> list[np.ndarray]:
    """Window indices grouped by courier (shuffled courier order), cut into micro-batches.

    Keeping a courier's overlapping windows together lets a batch encode each
    shared frame once.
    """
    ids = dataset.courier_ids.astype(str)
    uniq, inv = np.unique(ids, return_inverse=True)
    order = rng.permutation(len(uniq))
    rank = np.empty(len(uniq), dtype=np.int64)
    rank[order] = np.arange(len(uniq))
    windows = np.lexsort((np.arange(len(ids)), rank[inv]))
    return [windows[i:i + batch_size] for i in range(0, len(windows), batch_size)]


def _loss_fn(model, table, dataset, pos_weight):
    def f(batch):
        probs = model.probabilities(table, dataset.index[batch])
        return ad.bce_loss(probs, dataset.labels[batch].astype(probs.dtype), pos_weight=pos_weight)
    return f


def train(model: RadarSeqModel, train_set, val_set, config: TrainConfig, test_set=None,
          monitor: Callable | None = None, on_epoch: Callable | None = None) -> TrainResult:
    """Fit ``model`` in place and load the best-validation-AUC parameters at the end.

    ``monitor(epoch, model, report)`` may replace the validation AUC as the
    early-stopping signal (used to test the stopping logic in isolation).
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("train and validation sets must be non-empty")
    rng = np.random.default_rng([config.seed, 7])
    state = ad.AdamState(lr=config.learning_rate)
    stopper = EarlyStopping(config.early_stop_patience)
    table = model.input_table(train_set)
    loss_fn = _loss_fn(model, table, train_set, config.pos_weight)
    result = TrainResult(model.state_dict(), 0, None, 0)
    last_good = model.state_dict()

    for epoch in range(1, config.max_epochs + 1):
        model.training = True
        batches = courier_batches(train_set, config.physical_batch, rng)
        losses = []
        for i in range(0, len(batches), config.accumulation_steps):
            group = batches[i:i + config.accumulation_steps]
            grads, loss = ad.accumulate_gradients(model.params, loss_fn, group)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} at epoch {epoch}", last_good, epoch)
            if config.grad_clip > 0:
                ad.clip_grad_norm(grads, config.grad_clip)
            try:
                ad.adam_step(model.params, grads, state)
            except ad.NumericError as exc:
                raise TrainingDiverged(str(exc), last_good, epoch) from None
            losses.append(loss)
        model.training = False
        last_good = model.state_dict()
        result.train_loss.append(float(np.mean(losses)))

        rep = evaluate(model, val_set, config.threshold, "val", epoch)
        result.history.append(rep)
        if test_set is not None and config.eval_test_each_epoch and len(test_set):
            result.test_history.append(evaluate(model, test_set, config.threshold, "test", epoch))
        value = monitor(epoch, model, rep) if monitor is not None else rep.auc
        prev_best = stopper.best_epoch
        stop = stopper.update(epoch, value)
        if stopper.best_epoch != prev_best:
            result.best_state, result.best_epoch, result.best_auc = model.state_dict(), epoch, rep.auc
        log.info("epoch %d loss %.4f val_auc %s", epoch, result.train_loss[-1], rep.auc)
        if on_epoch is not None:
            on_epoch(epoch, model, rep)
        result.stopped_epoch = epoch
        if stop:
            break
    if config.restore_best:
        model.load_state_dict(result.best_state)
    return result


# ---------------------------------------------------------------- outputs

def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(round(v, 10))
    return str(v)


def write_metrics_csv(path, reports) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for rep in reports:
            w.writerow([_fmt(v) for v in rep.row().values()])


def write_history_csv(path, result: TrainResult) -> None:
    test_by_epoch = {r.epoch: r for r in result.test_history}
    cols = ["epoch", "train_loss", "val_loss", "val_auc", "val_accuracy", "test_auc", "test_accuracy",
            "val_tn_pct", "val_fp_pct", "val_fn_pct", "val_tp_pct"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for loss, rep in zip(result.train_loss, result.history):
            t = test_by_epoch.get(rep.epoch)
            pct = rep.percentages()
            w.writerow([_fmt(x) for x in (
                rep.epoch, loss, rep.loss, rep.auc, rep.accuracy,
                t.auc if t else None, t.accuracy if t else None,
                pct["tn"], pct["fp"], pct["fn"], pct["tp"])])


def write_predictions_csv(path, dataset, scores) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["courier_id", "end_date", "label", "score"])
        for cid, d, y, s in zip(dataset.courier_ids, dataset.end_dates, dataset.labels, scores):
            w.writerow([cid, str(d), int(y), _fmt(float(s))])


# ---------------------------------------------------------------- ablation

ABLATION_COLUMNS = ("model", "F1", "Precision", "Recall", "ROC-AUC", "MCC")


@dataclass
class AblationRun:
    kind: str
    seed: int
    test: EvalReport
    result: TrainResult


def run_ablation(dataset, model_config, train_config: TrainConfig, seeds=(0,), kinds=None,
                 on_run: Callable | None = None) -> list[AblationRun]:
    """Train every model kind on the same splits for each seed; test-set reports."""
    from .model import KINDS, RadarSeqModel
    from dataclasses import replace

    train_set, val_set, test_set = (dataset.subset(s) for s in ("train", "val", "test"))
    runs = []
    for seed in seeds:
        for kind in (kinds or KINDS):
            model = RadarSeqModel(replace(model_config, kind=kind, seed=seed))
            res = train(model, train_set, val_set, replace(train_config, seed=seed, eval_test_each_epoch=False))
            run = AblationRun(kind, seed, evaluate(model, test_set, train_config.threshold, "test",
                                                   res.best_epoch), res)
            runs.append(run)
            if on_run is not None:
                on_run(run)
    return runs


def ablation_table(runs) -> list[dict]:
    """One row per model kind: median over seeds of each test metric."""
    from .model import KINDS, LABELS
    rows = []
    for kind in KINDS:
        reps = [r.test for r in runs if r.kind == kind]
        if not reps:
            continue
        med = lambda xs: float(np.median([x for x in xs if x is not None])) if any(
            x is not None for x in xs) else None
        rows.append({"model": LABELS[kind], "F1": med([r.f1 for r in reps]),
                     "Precision": med([r.precision for r in reps]), "Recall": med([r.recall for r in reps]),
                     "ROC-AUC": med([r.auc for r in reps]), "MCC": med([r.mcc for r in reps])})
    return rows


def write_ablation_csv(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ABLATION_COLUMNS)
        for r in rows:
            w.writerow([r["model"]] + [_fmt(r[c]) for c in ABLATION_COLUMNS[1:]])
