"""Training loop, evaluation metrics and the on-disk training outputs."""
import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from . import data
from .checkpoint import save_checkpoint
from .exceptions import ConfigError, DivergenceError, InputError
from .graph import cross_entropy
from .model import CLASS_NAMES, ArchitectureConfig, build
from .optim import Adam, AdamHyper

logger = logging.getLogger(__name__)

METRICS_HEADER = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc", "seconds")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_loss: float = float("nan")
    val_accuracy: float = float("nan")
    wall_time: float = 0.0

    def as_row(self):
        return [self.epoch, repr(self.train_loss), repr(self.train_accuracy),
                repr(self.val_loss), repr(self.val_accuracy), f"{self.wall_time:.3f}"]


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)

    def __len__(self):
        return len(self.epochs)


@dataclass
class TrainConfig:
    dataset_root: Optional[str] = None
    out_dir: str = "runs/weednet"
    profile: str = "paper"
    epochs: int = 15
    batch_size: int = 2
    learning_rate: float = 1e-4
    seed_init: int = 0
    seed_split: int = 101
    seed_shuffle: int = 0
    train_fraction: float = 0.7
    max_steps: Optional[int] = None
    record_time: bool = True
    workers: int = 1

    def __post_init__(self):
        for name in ("epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning rate must be positive, got {self.learning_rate}")


class ConfusionMatrix(np.ndarray):
    """Integer grid with rows = true class and columns = predicted class."""

    def __new__(cls, counts):
        return np.asarray(counts, dtype=np.int64).view(cls)

    @property
    def total(self):
        return int(np.asarray(self).sum())

    @property
    def accuracy(self):
        total = self.total
        return float(np.trace(np.asarray(self)) / total) if total else float("nan")

    def to_text(self, class_names=CLASS_NAMES):
        width = max(8, *(len(n) for n in class_names), *(len(str(v)) for v in np.asarray(self).ravel()))
        lines = ["true\\pred".ljust(width) + "".join(n.rjust(width + 1) for n in class_names)]
        for name, row in zip(class_names, np.asarray(self)):
            lines.append(name.ljust(width) + "".join(str(v).rjust(width + 1) for v in row))
        return "\n".join(lines) + "\n"


def confusion_matrix(predicted, true, n_classes=len(CLASS_NAMES)):
    predicted = np.asarray(predicted, dtype=np.int64)
    true = np.asarray(true, dtype=np.int64)
    if predicted.shape != true.shape or predicted.ndim != 1:
        raise InputError(f"prediction and label sequences differ: {predicted.shape} vs {true.shape}")
    for name, arr in (("predicted", predicted), ("true", true)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise InputError(f"{name} classes must lie in 0..{n_classes - 1}")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (true, predicted), 1)
    return ConfusionMatrix(counts)


class EvalResult(NamedTuple):
    loss: float
    accuracy: float
    confusion: ConfusionMatrix


def predict_proba(graph, images, batch_size=16):
    out = []
    for start in range(0, len(images), batch_size):
        out.append(graph.forward(np.asarray(images[start:start + batch_size])))
    graph.clear_cache()
    return np.concatenate(out) if out else np.zeros((0, graph.nodes[-1].output_shape[0]), graph.dtype)


def evaluate(graph, part, batch_size=16, load=None):
    """Loss, accuracy and confusion matrix over ``part`` (Samples, or items for ``load``).

    Predictions are the argmax of the softmax output; ties go to the lowest
    class index.
    """
    part = list(part)
    if not part:
        raise InputError("cannot evaluate an empty split")
    losses, preds, trues = [], [], []
    for images, onehot in data.batches(part, batch_size, load=load, shuffle=False):
        probs = graph.forward(images)
        losses.append(cross_entropy(probs, onehot) * len(images))
        preds.append(probs.argmax(axis=1))
        trues.append(onehot.argmax(axis=1))
    graph.clear_cache()
    cm = confusion_matrix(np.concatenate(preds), np.concatenate(trues), graph.nodes[-1].output_shape[0])
    return EvalResult(float(sum(losses) / len(part)), cm.accuracy, cm)


def run_epochs(graph, optimizer, train_part, val_part=None, *, epochs, batch_size=2, shuffle_seed=0,
               load=None, max_steps=None, record_time=True, on_epoch=None, first_epoch=0):
    """Mini-batch Adam training on mean cross-entropy.

    After each epoch the running train loss/accuracy and, when ``val_part`` is
    given, the validation metrics are recorded; ``on_epoch(record, history)``
    is then called. Stops early only when ``max_steps`` is reached.
    """
    train_part = list(train_part)
    if not train_part:
        raise ConfigError("training split is empty")
    history = TrainHistory()
    step = optimizer.state.t
    start_step = step
    for epoch in range(first_epoch, first_epoch + epochs):
        tic = time.perf_counter()
        loss_sum, correct, seen = 0.0, 0, 0
        for images, onehot in data.batches(train_part, batch_size, shuffle_seed, epoch, load=load):
            try:
                probs = graph.forward(images)
            except FloatingPointError:
                raise DivergenceError(epoch, step, float("nan")) from None
            loss = cross_entropy(probs, onehot)
            if not math.isfinite(loss):
                raise DivergenceError(epoch, step, loss)
            graph.backward(onehot)
            optimizer.step()
            step += 1
            history.step_losses.append(loss)
            loss_sum += loss * len(images)
            correct += int((probs.argmax(axis=1) == onehot.argmax(axis=1)).sum())
            seen += len(images)
            if max_steps is not None and step - start_step >= max_steps:
                break
        graph.clear_cache()
        record = EpochRecord(epoch, loss_sum / seen, correct / seen)
        if val_part:
            val = evaluate(graph, val_part, load=load)
            record.val_loss, record.val_accuracy = val.loss, val.accuracy
        record.wall_time = time.perf_counter() - tic if record_time else 0.0
        history.epochs.append(record)
        logger.info("epoch %d: loss %.4f acc %.4f val_loss %.4f val_acc %.4f (%.1fs)", record.epoch,
                    record.train_loss, record.train_accuracy, record.val_loss, record.val_accuracy, record.wall_time)
        if on_epoch is not None:
            on_epoch(record, history)
        if max_steps is not None and step - start_step >= max_steps:
            break
    return history


def write_metrics_csv(path, records):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for record in records:
            writer.writerow(record.as_row())


def read_metrics_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != METRICS_HEADER:
            raise InputError(f"{path}: unexpected header {header}")
        return [EpochRecord(int(r[0]), *(float(v) for v in r[1:])) for r in reader]


def train(config, train_part=None, test_part=None):
    """Train from a dataset root (or explicit sample lists) and write run outputs.

    Writes ``metrics.csv`` after every epoch, ``last.wdnt`` every epoch,
    ``best.wdnt`` whenever validation accuracy improves, and ``confusion.txt``
    for the final model on the test split. Returns ``(graph, history)``.
    """
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    arch = ArchitectureConfig.from_profile(config.profile)
    load = None
    if train_part is None:
        if config.dataset_root is None:
            raise ConfigError("either dataset_root or explicit samples are required")
        scan = data.scan_dataset(config.dataset_root)
        split = data.split_dataset(scan.files, config.train_fraction, config.seed_split)
        data.write_manifest(split, scan.root, out_dir / "split.tsv")
        train_part, test_part = split.train, split.test
        load = _Loader(arch.input_extent)
    if not train_part:
        raise ConfigError("training split is empty")

    graph = build(arch, config.seed_init)
    hyper = AdamHyper(learning_rate=config.learning_rate)
    optimizer = Adam(graph, hyper)
    best = {"acc": -1.0}

    def on_epoch(record, history):
        write_metrics_csv(out_dir / "metrics.csv", history.epochs)
        save_checkpoint(graph, out_dir / "last.wdnt", optimizer.state, hyper)
        if test_part and record.val_accuracy > best["acc"]:
            best["acc"] = record.val_accuracy
            save_checkpoint(graph, out_dir / "best.wdnt", optimizer.state, hyper)

    history = run_epochs(graph, optimizer, train_part, test_part, epochs=config.epochs,
                         batch_size=config.batch_size, shuffle_seed=config.seed_shuffle, load=load,
                         max_steps=config.max_steps, record_time=config.record_time, on_epoch=on_epoch)
    if test_part:
        result = evaluate(graph, test_part, load=load)
        (out_dir / "confusion.txt").write_text(result.confusion.to_text(), encoding="utf-8")
    return graph, history


class _Loader:
    """Picklable ``LabeledFile -> Sample`` loader at a fixed extent."""

    def __init__(self, extent):
        self.extent = extent

    def __call__(self, item):
        return data.load_sample(item, self.extent)


def predict(graph, image_path):
    """Classify one image file; returns ``(class_name, probabilities)``."""
    extent = graph.input_shape[0]
    image = data.prepare_image(image_path, extent)
    probs = graph.forward(image[None])[0]
    graph.clear_cache()
    return CLASS_NAMES[int(np.argmax(probs))], probs
