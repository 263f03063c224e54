"""Adam, early-stopped k-fold training, learning curves and per-class metrics."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import Model, ModelConfig, load_checkpoint, save_checkpoint
from .tensor import Tensor, cross_entropy, softmax

log = logging.getLogger(__name__)

CURVE_FIELDS = ("epoch", "fold", "train_acc", "val_acc", "train_loss", "val_loss")


@dataclass
class TrainConfig:
    batch_size: int = 15
    learning_rate: float = 1e-4
    max_epochs: int = 50
    patience: int = 10
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")


class Adam:
    def __init__(self, params: list[Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.beta1
            m += (1 - self.beta1) * p.grad
            v *= self.beta2
            v += (1 - self.beta2) * p.grad**2
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class Metrics:
    """Confusion matrix (rows = truth, columns = prediction) and one-vs-rest
    per-class scores. Undefined ratios (0/0) are reported as 0 and listed in
    ``undefined``."""

    confusion: np.ndarray
    undefined: list = field(default_factory=list)

    def __post_init__(self):
        self.confusion = np.asarray(self.confusion, dtype=np.int64)
        k = self.confusion.shape[0]
        tp = np.diag(self.confusion)
        support = self.confusion.sum(axis=1)
        predicted = self.confusion.sum(axis=0)
        self.undefined = [f"recall[{c}]" for c in range(k) if support[c] == 0]
        self.undefined += [f"precision[{c}]" for c in range(k) if predicted[c] == 0]

    @classmethod
    def from_predictions(cls, labels, predictions, num_classes: int = 4) -> "Metrics":
        cm = np.zeros((num_classes, num_classes), dtype=np.int64)
        np.add.at(cm, (np.asarray(labels, dtype=np.int64), np.asarray(predictions, dtype=np.int64)), 1)
        return cls(cm)

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.confusion) / self.total) if self.total else 0.0

    @property
    def per_class_accuracy(self) -> np.ndarray:
        """(TP + TN) / total for each class against the rest."""
        if not self.total:
            return np.zeros(len(self.confusion))
        tp = np.diag(self.confusion)
        fp = self.confusion.sum(axis=0) - tp
        fn = self.confusion.sum(axis=1) - tp
        return (self.total - fp - fn) / self.total

    @property
    def precision(self) -> np.ndarray:
        return _ratio(np.diag(self.confusion), self.confusion.sum(axis=0))

    @property
    def recall(self) -> np.ndarray:
        return _ratio(np.diag(self.confusion), self.confusion.sum(axis=1))

    def to_dict(self) -> dict:
        return {
            "confusion": self.confusion.tolist(),
            "accuracy": self.accuracy,
            "per_class_accuracy": self.per_class_accuracy.tolist(),
            "precision": self.precision.tolist(),
            "recall": self.recall.tolist(),
            "undefined": list(self.undefined),
        }


def _ratio(num, den) -> np.ndarray:
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def _stack(samples):
    return np.stack([s.input for s in samples]), np.array([s.label for s in samples], dtype=np.int64)


def evaluate_model(model: Model, samples, batch_size: int = 16) -> tuple[Metrics, float, np.ndarray]:
    """Eval-mode metrics, mean cross-entropy and class probabilities."""
    if not samples:
        raise ValueError("no samples to evaluate")
    x, y = _stack(samples)
    expect = (model.config.in_channels, *model.config.input_shape)
    if x.shape[1:] != expect:
        raise ValueError(f"samples of shape {x.shape[1:]} do not fit a model expecting {expect}")
    logits = np.concatenate([model.forward(x[i : i + batch_size])[0].data for i in range(0, len(x), batch_size)])
    loss = float(cross_entropy(Tensor(logits), y).data)
    probs = softmax(logits)
    return Metrics.from_predictions(y, probs.argmax(axis=1), model.config.num_classes), loss, probs


def evaluate(checkpoint, samples, batch_size: int = 16) -> Metrics:
    model = load_checkpoint(checkpoint)[0] if isinstance(checkpoint, (str, Path)) else checkpoint
    return evaluate_model(model, samples, batch_size)[0]


@dataclass
class FoldResult:
    fold: int
    model: Model
    curve: list[dict]
    metrics: Metrics | None
    best_epoch: int
    stopped_epoch: int
    checkpoint: Path | None = None


def train_fold(model: Model, train_samples, val_samples, cfg: TrainConfig, fold: int = 0) -> FoldResult:
    """Adam on shuffled minibatches; keeps the weights of the best validation
    loss and stops after ``patience`` epochs without improvement.

    Without validation samples the training loss drives early stopping.
    """
    if not train_samples:
        raise ValueError(f"fold {fold}: empty training set")
    x, y = _stack(train_samples)
    shuffle_rng = np.random.default_rng([cfg.seed, fold, 1])
    drop_rng = np.random.default_rng([cfg.seed, fold, 2])
    opt = Adam(model.parameters(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    curve = []
    best, best_state, best_epoch, wait = np.inf, model.state(), 0, 0
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = shuffle_rng.permutation(len(x))
        losses, correct = 0.0, 0
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            model.zero_grad()
            logits, _ = model.forward(x[idx], training=True, rng=drop_rng)
            loss = cross_entropy(logits, y[idx])
            loss.backward()
            opt.step()
            losses += float(loss.data) * len(idx)
            correct += int(np.sum(logits.data.argmax(axis=1) == y[idx]))
        row = {"epoch": epoch, "fold": fold, "train_acc": correct / len(x), "train_loss": losses / len(x)}
        if val_samples:
            m, vloss, _ = evaluate_model(model, val_samples, cfg.batch_size)
            row.update(val_acc=m.accuracy, val_loss=vloss)
        else:
            row.update(val_acc=float("nan"), val_loss=float("nan"))
        curve.append(row)
        monitor = row["val_loss"] if val_samples else row["train_loss"]
        log.info("fold %d epoch %d: %s", fold, epoch, {k: round(v, 4) for k, v in row.items()})
        if monitor < best:
            best, best_state, best_epoch, wait = monitor, model.state(), epoch, 0
        else:
            wait += 1
            if wait >= cfg.patience:
                break
    model.load_state(best_state)
    metrics = evaluate_model(model, val_samples, cfg.batch_size)[0] if val_samples else None
    return FoldResult(fold, model, curve, metrics, best_epoch, epoch)


def write_curves(curves: list[dict], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=CURVE_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in curves:
            w.writerow({k: (repr(float(row[k])) if k not in ("epoch", "fold") else row[k]) for k in CURVE_FIELDS})


def train(model_config: ModelConfig, folds, cfg: TrainConfig, out_dir=None) -> list[FoldResult]:
    """Train one fresh model per ``(train_samples, val_samples)`` fold.

    With ``out_dir`` the best checkpoint of each fold goes to
    ``fold<k>.ckpt`` and all learning curves to ``curves.csv``.
    """
    if not folds:
        raise ValueError("no folds to train")
    results = []
    for k, (tr, va) in enumerate(folds):
        model = Model(model_config, seed=int(np.random.default_rng([cfg.seed, k, 0]).integers(2**31)))
        res = train_fold(model, tr, va, cfg, fold=k)
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            res.checkpoint = out / f"fold{k}.ckpt"
            save_checkpoint(model, res.checkpoint, {"fold": k, "best_epoch": res.best_epoch})
        results.append(res)
    if out_dir is not None:
        write_curves([row for r in results for row in r.curve], Path(out_dir) / "curves.csv")
    return results
