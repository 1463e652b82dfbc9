"""Loss, Adam, the training loop with early stopping, and evaluation metrics."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np

from .errors import CheckpointError, LabelError, ShapeError
from .io_utils import atomic_write_text
from .model import CLASS_NAMES, Model


def sparse_ce_loss(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of integer labels, and its gradient w.r.t. ``logits``."""
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match {n} logits rows")
    if labels.size and (labels.min() < 0 or labels.max() >= k or
                        not np.issubdtype(labels.dtype, np.integer)):
        raise LabelError(f"labels must be integers in [0, {k}), got {labels.tolist()}")
    z = logits.astype(np.float64) - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(lse - z[rows, labels]))
    grad = np.exp(z - lse[:, None])
    grad[rows, labels] -= 1.0
    return loss, (grad / n).astype(logits.dtype)


class Adam:
    """Bias-corrected Adam keyed by parameter name."""

    def __init__(self, lr=1e-4, beta1=0.9, beta2=0.999, epsilon=1e-7):
        self.lr, self.beta1, self.beta2, self.epsilon = lr, beta1, beta2, epsilon
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def config(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
                "epsilon": self.epsilon}

    def step(self, params: Iterable[tuple[str, np.ndarray, np.ndarray]]):
        """Update every (name, param, grad) in place."""
        params = list(params)
        for name, p, g in params:
            if p.shape != g.shape:
                raise ShapeError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for name, p, g in params:
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.epsilon)).astype(p.dtype)


def adam_step(state: Adam, params):
    state.step(params)


# ---------------------------------------------------------------- training loop


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


class EarlyStopping:
    """Stop once ``patience`` epochs pass without a strictly lower monitored value."""

    def __init__(self, patience=8):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = 0
        self.wait = 0

    def update(self, epoch, value) -> bool:
        """Record ``value``; True when it is a new best."""
        if value < self.best:
            self.best, self.best_epoch, self.wait = value, epoch, 0
            return True
        self.wait += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.wait >= self.patience


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = float("inf")
    stopped_early: bool = False

    COLUMNS = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc")

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for r in self.records:
            w.writerow([r.epoch] + [repr(float(getattr(r, c))) for c in self.COLUMNS[1:]])
        return buf.getvalue()

    def to_csv(self, path):
        atomic_write_text(path, self.to_csv_text())


def run_epoch(model: Model, batches, optimizer: Optional[Adam] = None):
    """One pass over ``batches``. Trains when ``optimizer`` is given, else
    evaluates in inference mode. Returns (mean loss, accuracy)."""
    total_loss, correct, seen = 0.0, 0, 0
    for x, y in batches:
        training = optimizer is not None
        if training:
            model.zero_grad()
        logits = model.forward(x, training=training)
        loss, grad = sparse_ce_loss(logits, y)
        if training:
            model.backward(grad)
            optimizer.step(model.parameters())
        total_loss += loss * len(y)
        correct += int((logits.argmax(axis=1) == y).sum())
        seen += len(y)
    if seen == 0:
        raise ValueError("no batches to iterate")
    return total_loss / seen, correct / seen


def train(model: Model, train_batches: Callable[[int], Iterable],
          val_batches: Callable[[], Iterable], epochs=40, patience=8,
          checkpoint_path=None, optimizer: Optional[Adam] = None,
          on_epoch: Optional[Callable[[EpochRecord], None]] = None) -> TrainLog:
    """Fit ``model`` with early stopping on validation loss.

    ``train_batches(epoch)`` yields the (augmented, shuffled) batches for one
    epoch; ``val_batches()`` the validation batches. The best weights are
    written to ``checkpoint_path`` on each improvement and restored into the
    model when training ends.
    """
    from .weights import save_weights

    optimizer = optimizer or Adam()
    stopper = EarlyStopping(patience)
    log = TrainLog()
    best_state = None
    for epoch in range(1, epochs + 1):
        tr_loss, tr_acc = run_epoch(model, train_batches(epoch - 1), optimizer)
        va_loss, va_acc = run_epoch(model, val_batches())
        rec = EpochRecord(epoch, tr_loss, tr_acc, va_loss, va_acc)
        log.records.append(rec)
        if stopper.update(epoch, va_loss):
            best_state = model.get_state()
            log.best_epoch, log.best_val_loss = epoch, va_loss
            if checkpoint_path is not None:
                try:
                    save_weights(model, checkpoint_path)
                except OSError as exc:
                    raise CheckpointError(f"checkpoint write to {checkpoint_path} failed: {exc}",
                                          log) from exc
        if on_epoch is not None:
            on_epoch(rec)
        if stopper.should_stop:
            log.stopped_early = True
            break
    if best_state is not None:
        model.set_state(best_state)
    return log


# ---------------------------------------------------------------- evaluation


@dataclass
class ConfusionMatrix:
    counts: np.ndarray

    @classmethod
    def from_labels(cls, y_true, y_pred, num_classes) -> "ConfusionMatrix":
        m = np.zeros((num_classes, num_classes), dtype=np.int64)
        np.add.at(m, (np.asarray(y_true), np.asarray(y_pred)), 1)
        return cls(m)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_csv_text(self, class_names=None) -> str:
        k = len(self.counts)
        names = list(class_names or range(k))
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["true\\pred"] + names)
        for name, row in zip(names, self.counts):
            w.writerow([name] + row.tolist())
        return buf.getvalue()


def _safe_div(num, den):
    zero = den == 0
    return np.where(zero, 0.0, num / np.where(zero, 1, den)), zero


@dataclass
class ClassificationReport:
    class_names: tuple
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    confusion: ConfusionMatrix
    precision_undefined: np.ndarray
    recall_undefined: np.ndarray

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.confusion.counts) / self.confusion.total)

    def macro(self) -> dict:
        return {k: float(np.mean(getattr(self, k))) for k in ("precision", "recall", "f1")}

    def weighted(self) -> dict:
        w = self.support / self.support.sum()
        return {k: float(np.sum(getattr(self, k) * w)) for k in ("precision", "recall", "f1")}

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "samples": self.confusion.total,
            "classes": [{"name": n, "precision": float(p), "recall": float(r), "f1": float(f),
                         "support": int(s), "precision_undefined": bool(pu),
                         "recall_undefined": bool(ru)}
                        for n, p, r, f, s, pu, ru in zip(
                            self.class_names, self.precision, self.recall, self.f1,
                            self.support, self.precision_undefined, self.recall_undefined)],
            "macro_avg": self.macro(),
            "weighted_avg": self.weighted(),
            "confusion_matrix": self.confusion.counts.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_text(self, subset="test set") -> str:
        n = self.confusion.total
        lines = [f"Classification report on {subset} ({n} samples)",
                 f"{'Class':<24}{'Precision':>10}{'Recall':>10}{'F1-Score':>10}{'Support':>9}"]
        for name, p, r, f, s, pu, ru in zip(self.class_names, self.precision, self.recall,
                                            self.f1, self.support, self.precision_undefined,
                                            self.recall_undefined):
            flag = " *" if pu or ru else ""
            lines.append(f"{name:<24}{p:>10.4f}{r:>10.4f}{f:>10.4f}{s:>9d}{flag}")
        lines.append(f"{'Accuracy':<24}{'':>10}{'':>10}{self.accuracy:>10.4f}{n:>9d}")
        for label, avg in (("Macro Average", self.macro()), ("Weighted Average", self.weighted())):
            lines.append(f"{label:<24}{avg['precision']:>10.4f}{avg['recall']:>10.4f}"
                         f"{avg['f1']:>10.4f}{n:>9d}")
        if self.precision_undefined.any() or self.recall_undefined.any():
            lines.append("* precision or recall undefined (zero denominator), reported as 0")
        return "\n".join(lines) + "\n"


def classification_report(y_true, y_pred, num_classes=4, class_names=None) -> ClassificationReport:
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    if y_true.size == 0:
        raise ValueError("cannot report on an empty set")
    cm = ConfusionMatrix.from_labels(y_true, y_pred, num_classes)
    tp = np.diag(cm.counts).astype(np.float64)
    predicted = cm.counts.sum(axis=0)
    support = cm.counts.sum(axis=1)
    precision, p_undef = _safe_div(tp, predicted)
    recall, r_undef = _safe_div(tp, support)
    f1, _ = _safe_div(2 * precision * recall, precision + recall)
    names = tuple(class_names or (CLASS_NAMES if num_classes == len(CLASS_NAMES)
                                  else [str(i) for i in range(num_classes)]))
    return ClassificationReport(names, precision, recall, f1, support, cm, p_undef, r_undef)


def predict_labels(model: Model, batches) -> tuple[np.ndarray, np.ndarray]:
    ys, ps = [], []
    for x, y in batches:
        ps.append(model.forward(x, training=False).argmax(axis=1))
        ys.append(np.asarray(y))
    if not ys:
        raise ValueError("no batches to evaluate")
    return np.concatenate(ys), np.concatenate(ps)


def evaluate(model: Model, batches, class_names=None) -> ClassificationReport:
    y_true, y_pred = predict_labels(model, batches)
    return classification_report(y_true, y_pred, model.config.num_classes, class_names)
