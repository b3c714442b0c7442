"""Head training loop: Adam, cross-entropy, plateau decay, best-accuracy checkpoints.

Batch order, augmentation and dropout are all derived from ``(seed, epoch)``
so a run is bitwise repeatable on CPU and can resume from any finished epoch.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .ingest import DatasetManifest, ImageRecord
from .metrics import ConfusionMatrix, accuracy, confusion, prf_macro
from .models import Classifier, load_checkpoint, save_checkpoint, trainable_params
from .transforms import TransformConfig, augment, eval_preprocess, load_rgb

logger = logging.getLogger(__name__)

MONITORS = ("val_loss", "val_accuracy")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 1e-5
    patience: int = 3
    factor: float = 0.5
    min_lr: float = 1e-7
    monitor: str = "val_loss"
    threshold: float = 1e-4
    seed: int = 0
    checkpoint_dir: str = "checkpoints"
    eval_batch_size: int = 64

    def __post_init__(self):
        if not 0 < self.factor < 1:
            raise ValueError("factor must lie in (0, 1)")
        if self.patience < 0:
            raise ValueError("patience must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.monitor not in MONITORS:
            raise ValueError(f"monitor must be one of {MONITORS}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    @property
    def mode(self) -> str:
        return "min" if self.monitor == "val_loss" else "max"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochMetrics:
    epoch: int
    split: str
    loss: float
    accuracy: float
    precision_macro: float
    recall_macro: float
    f1_macro: float
    lr: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class PlateauState:
    best: float
    bad_epochs: int
    lr: float

    @classmethod
    def initial(cls, cfg: TrainConfig) -> "PlateauState":
        return cls(math.inf if cfg.mode == "min" else -math.inf, 0, cfg.lr)


def plateau_step(state: PlateauState, monitored: float, cfg: TrainConfig) -> PlateauState:
    """One epoch of plateau-triggered decay.

    Improvement means beating ``best`` by more than ``threshold`` in the
    monitor's direction. After more than ``patience`` consecutive
    non-improving epochs the rate is multiplied by ``factor`` (floored at
    ``min_lr``) and the counter restarts.
    """
    if not math.isfinite(monitored):
        raise ValueError(f"monitored value must be finite, got {monitored}")
    if cfg.mode == "min":
        improved = monitored < state.best - cfg.threshold
    else:
        improved = monitored > state.best + cfg.threshold
    if improved:
        return PlateauState(monitored, 0, state.lr)
    bad = state.bad_epochs + 1
    if bad > cfg.patience:
        return PlateauState(state.best, 0, max(state.lr * cfg.factor, cfg.min_lr))
    return PlateauState(state.best, bad, state.lr)


def cross_entropy(logits, labels):
    """Mean ``-log softmax(logits)[label]`` via a stable log-sum-exp.

    Tensors in, tensor out (differentiable); arrays in, float out.
    """
    if isinstance(logits, torch.Tensor):
        labels = torch.as_tensor(labels, dtype=torch.long)
        if logits.ndim != 2 or logits.shape[0] == 0:
            raise ValueError("cross_entropy needs a non-empty B x C batch")
        return F.cross_entropy(logits, labels)
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if z.shape[0] == 0:
        raise ValueError("cross_entropy needs a non-empty batch")
    if y.shape[0] != z.shape[0]:
        raise ValueError("logits and labels disagree in batch size")
    if y.min() < 0 or y.max() >= z.shape[1]:
        raise ValueError("labels out of range")
    m = z.max(axis=1, keepdims=True)
    lse = (m + np.log(np.exp(z - m).sum(axis=1, keepdims=True)))[:, 0]
    return float(np.mean(lse - z[np.arange(len(y)), y]))


class ImageSet:
    """Labelled images held in memory as uint8 arrays."""

    def __init__(self, images: Sequence[np.ndarray], labels: Sequence[int], paths: Sequence[str] | None = None):
        if len(images) != len(labels):
            raise ValueError("images and labels differ in length")
        self.images = list(images)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.paths = list(paths) if paths is not None else [str(i) for i in range(len(self.images))]

    @classmethod
    def from_records(cls, manifest: DatasetManifest, records: Sequence[ImageRecord]) -> "ImageSet":
        images = [load_rgb(manifest.resolve(r)) for r in records]
        return cls(images, [r.label for r in records], [r.path for r in records])

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, split: str) -> "ImageSet":
        return cls.from_records(manifest, manifest.subset(split))

    def __len__(self):
        return len(self.images)


def _epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([abs(int(seed)), int(epoch)]).generate_state(1)[0])


def _metrics(epoch: int, split: str, loss: float, preds, labels, lr: float) -> tuple[EpochMetrics, ConfusionMatrix]:
    cm = confusion(preds, labels)
    p, r, f = prf_macro(cm)
    return EpochMetrics(epoch, split, float(loss), accuracy(cm), p, r, f, float(lr)), cm


def predict_logits(model: Classifier, data: ImageSet, tcfg: TransformConfig | None = None,
                   batch_size: int = 64) -> torch.Tensor:
    tcfg = tcfg or TransformConfig()
    model.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(data), batch_size):
            batch = torch.stack([eval_preprocess(im, tcfg) for im in data.images[start : start + batch_size]])
            out.append(model(batch))
    return torch.cat(out) if out else torch.zeros((0, 2))


def evaluate(model: Classifier, data: ImageSet, tcfg: TransformConfig | None = None, split: str = "test",
             epoch: int = 0, lr: float = float("nan"), batch_size: int = 64) -> tuple[EpochMetrics, ConfusionMatrix]:
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    logits = predict_logits(model, data, tcfg, batch_size)
    loss = cross_entropy(logits, torch.as_tensor(data.labels)).item()
    return _metrics(epoch, split, loss, logits.argmax(1).numpy(), data.labels, lr)


def checkpoint_epochs(val_accuracies: Sequence[float]) -> list[int]:
    """1-based epochs at which a best-accuracy checkpoint is written."""
    best, out = -math.inf, []
    for epoch, acc in enumerate(val_accuracies, start=1):
        if acc > best:
            best = acc
            out.append(epoch)
    return out


def _make_optimizer(model: Classifier, cfg: TrainConfig) -> torch.optim.Optimizer:
    # Adam with the classic coupled L2 term
    return torch.optim.Adam(trainable_params(model), lr=cfg.lr, weight_decay=cfg.weight_decay)


def _append_jsonl(path: Path, rows: Sequence[EpochMetrics]):
    with path.open("a") as fh:
        for row in rows:
            fh.write(json.dumps(row.to_dict()) + "\n")


def read_metrics(path) -> list[EpochMetrics]:
    path = Path(path)
    if not path.is_file():
        return []
    return [EpochMetrics(**json.loads(line)) for line in path.read_text().splitlines() if line.strip()]


@dataclass
class FitResult:
    history: list[EpochMetrics]
    best_checkpoint: Path
    checkpoint_writes: list[int] = field(default_factory=list)

    def __iter__(self):
        return iter((self.history, self.best_checkpoint))


def fit(model: Classifier, train_data: ImageSet, val_data: ImageSet, cfg: TrainConfig,
        tcfg: TransformConfig | None = None, log_path=None, resume: bool = False) -> FitResult:
    """Train the trainable parameters of ``model`` for ``cfg.epochs`` epochs.

    Writes ``best/`` (best validation accuracy) and ``latest/`` (resume state)
    under ``cfg.checkpoint_dir`` and one JSON line per :class:`EpochMetrics`
    to ``log_path`` (default ``<checkpoint_dir>/metrics.jsonl``).
    """
    if len(train_data) == 0 or len(val_data) == 0:
        raise ValueError("train and val sets must be non-empty")
    tcfg = tcfg or TransformConfig()
    ckpt_dir = Path(cfg.checkpoint_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    log_path = Path(log_path) if log_path else ckpt_dir / "metrics.jsonl"
    best_dir, latest_dir = ckpt_dir / "best", ckpt_dir / "latest"

    optimizer = _make_optimizer(model, cfg)
    state = PlateauState.initial(cfg)
    best_acc = -math.inf
    start_epoch = 1
    history: list[EpochMetrics] = []
    writes: list[int] = []

    if resume and (latest_dir / "train_state.pt").is_file():
        restored, _ = load_checkpoint(latest_dir, model.spec)
        model.load_state_dict(restored.state_dict())
        blob = torch.load(latest_dir / "train_state.pt", map_location="cpu", weights_only=False)
        optimizer.load_state_dict(blob["optimizer"])
        state = PlateauState(**blob["plateau"])
        best_acc = blob["best_acc"]
        writes = list(blob.get("writes", []))
        start_epoch = blob["epoch"] + 1
        history = read_metrics(log_path)[: 2 * blob["epoch"]]
        logger.info("resuming at epoch %d", start_epoch)
    # rewrite the log so it holds exactly the completed epochs
    log_path.parent.mkdir(parents=True, exist_ok=True)
    log_path.write_text("")
    _append_jsonl(log_path, history)

    n = len(train_data)
    for epoch in range(start_epoch, cfg.epochs + 1):
        eseed = _epoch_seed(cfg.seed, epoch)
        torch.manual_seed(eseed)
        order = np.random.default_rng(eseed).permutation(n)
        lr_now = optimizer.param_groups[0]["lr"]
        model.train()
        total_loss, preds, labels = 0.0, [], []
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            batch = torch.stack([
                augment(train_data.images[i], tcfg, np.random.default_rng([eseed, int(i)])) for i in idx
            ])
            y = torch.as_tensor(train_data.labels[idx])
            logits = model(batch)
            loss = cross_entropy(logits, y)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            total_loss += loss.item() * len(idx)
            preds.append(logits.detach().argmax(1).numpy())
            labels.append(y.numpy())
        train_m, _ = _metrics(epoch, "train", total_loss / n, np.concatenate(preds), np.concatenate(labels), lr_now)
        val_m, _ = evaluate(model, val_data, tcfg, "val", epoch, lr_now, cfg.eval_batch_size)

        monitored = val_m.loss if cfg.monitor == "val_loss" else val_m.accuracy
        state = plateau_step(state, monitored, cfg)
        for group in optimizer.param_groups:
            group["lr"] = state.lr

        if val_m.accuracy > best_acc:
            best_acc = val_m.accuracy
            save_checkpoint(model, best_dir, epoch, best_acc, cfg.seed)
            writes.append(epoch)
        save_checkpoint(model, latest_dir, epoch, best_acc, cfg.seed)
        torch.save({"optimizer": optimizer.state_dict(), "plateau": asdict(state), "best_acc": best_acc,
                    "epoch": epoch, "writes": writes}, latest_dir / "train_state.pt")

        history += [train_m, val_m]
        _append_jsonl(log_path, [train_m, val_m])
        logger.info("epoch %d: train loss %.4f acc %.3f | val loss %.4f acc %.3f | lr %.2e",
                    epoch, train_m.loss, train_m.accuracy, val_m.loss, val_m.accuracy, lr_now)
    return FitResult(history, best_dir, writes)
