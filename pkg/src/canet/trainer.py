"""Training, adaptation, fine-tuning baseline and evaluation loops."""
from __future__ import annotations

import csv
import os
import io
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .metrics import Metrics
from .model import ABLATIONS, SCOPES, CANetModel, apply_ablation
from .netpbm import write_pgm
from .optim import sgd_step
from .synthdata import ChangeDataset
from .tensor import Tape, Tensor

__all__ = [
    "TrainConfig",
    "RunRecord",
    "TrainingDivergedError",
    "CSV_COLUMNS",
    "train",
    "adapt",
    "online_finetune_baseline",
    "evaluate",
    "evaluate_with_loss",
    "predict_maps",
    "write_maps",
    "apply_ablation",
    "adapt_variant",
]

CSV_COLUMNS = ("epoch", "split", "dataset_id", "loss", "f1", "precision", "recall", "iou", "seconds")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 8
    epochs: int = 30
    seed: int = 0
    augment_hflip: bool = True
    scope: str = "full"
    ablation: str = "none"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.scope not in SCOPES:
            raise ValueError(f"scope must be one of {SCOPES}, got {self.scope!r}")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunRecord:
    """Rows of (epoch, split, dataset_id, loss, f1, precision, recall, iou, seconds)."""

    rows: List[dict] = field(default_factory=list)
    updated_params: int = 0
    total_params: int = 0
    wall_time: float = 0.0

    @property
    def epoch_losses(self) -> List[float]:
        return [r["loss"] for r in self.rows if r["split"] == "train"]

    @property
    def epochs(self) -> int:
        return len(self.epoch_losses)

    def add(self, epoch: int, split: str, dataset_id: str, loss: float, metrics: Metrics, seconds: float) -> dict:
        row = {"epoch": epoch, "split": split, "dataset_id": dataset_id, "loss": float(loss), **metrics.as_dict(), "seconds": seconds}
        self.rows.append(row)
        return row

    def final(self, split: str, dataset_id: Optional[str] = None) -> Optional[dict]:
        for row in reversed(self.rows):
            if row["split"] == split and (dataset_id is None or row["dataset_id"] == dataset_id):
                return row
        return None

    def extend(self, other: "RunRecord") -> None:
        self.rows.extend(other.rows)
        self.wall_time += other.wall_time

    def to_csv(self, path=None, include_seconds: bool = True) -> str:
        cols = CSV_COLUMNS if include_seconds else CSV_COLUMNS[:-1]
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(cols)
        for row in self.rows:
            writer.writerow([format_value(row[c]) for c in cols])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as f:
                f.write(text)
        return text


def format_value(v) -> str:
    # repr keeps the full precision of a float so CSV rows compare bitwise
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _batch(data: ChangeDataset, idx: np.ndarray, flip: Optional[np.ndarray] = None):
    x1, x2, y = data.x1[idx], data.x2[idx], data.label[idx]
    if flip is not None and flip.any():
        # the flip is applied jointly to both acquisitions and the label
        x1, x2, y = x1.copy(), x2.copy(), y.copy()
        x1[flip] = x1[flip, ..., ::-1]
        x2[flip] = x2[flip, ..., ::-1]
        y[flip] = y[flip, ..., ::-1]
    return x1, x2, y


def _check_data(data: ChangeDataset) -> None:
    if len(data) == 0:
        raise ValueError("dataset is empty")


def train(
    model: CANetModel,
    data: ChangeDataset,
    config: Optional[TrainConfig] = None,
    dataset_id: Optional[str] = None,
    eval_sets: Sequence[Tuple[str, str, ChangeDataset]] = (),
) -> RunRecord:
    """Train ``model`` on ``data`` routed through ``dataset_id``.

    Only ``model.trainable_set(dataset_id, config.scope)`` changes. Each
    epoch appends a ``train`` row (epoch-mean loss, metrics of the training
    predictions); ``eval_sets`` of (split, dataset_id, data) are evaluated
    once after the last epoch.
    """
    config = config or TrainConfig()
    _check_data(data)
    ds = data.name if dataset_id is None else dataset_id
    if config.ablation != model.ablation:
        if model.ablation != "none":
            raise ValueError(f"config ablation {config.ablation!r} does not match model ablation {model.ablation!r}")
        apply_ablation(model, config.ablation, copy_model=False)
    params = model.trainable_set(ds, config.scope)
    for p in params:
        p.momentum_buffer[...] = 0
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x5EED]))
    record = RunRecord(updated_params=sum(p.size for p in params), total_params=model.param_partition(ds).total)
    start = time.perf_counter()
    n = len(data)
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        perm = rng.permutation(n)
        flips = rng.random(n) < 0.5 if config.augment_hflip else None
        loss_sum = 0.0
        counts = Metrics()
        for s in range(0, n, config.batch_size):
            idx = perm[s : s + config.batch_size]
            x1, x2, y = _batch(data, idx, None if flips is None else flips[s : s + config.batch_size])
            with Tape() as tape:
                logits, _ = model.forward(Tensor(x1), Tensor(x2), ds, "train")
                loss = ops.softmax_cross_entropy(logits, y)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite loss {value} at epoch {epoch}, batch {s // config.batch_size + 1} "
                    f"(dataset {ds!r}, lr {config.lr}); lower the learning rate"
                )
            tape.backward(loss, params)
            sgd_step(params, config.lr, config.momentum, config.weight_decay)
            loss_sum += value * len(idx)
            pred = logits.data[:, 1] > logits.data[:, 0]
            counts = counts + Metrics.from_maps(pred, y)
        record.add(epoch, "train", ds, loss_sum / n, counts, time.perf_counter() - t0)
    for split, eval_ds, eval_data in eval_sets:
        t0 = time.perf_counter()
        loss, metrics = evaluate_with_loss(model, eval_ds, eval_data)
        record.add(config.epochs, split, eval_ds, loss, metrics, time.perf_counter() - t0)
    model.set_trainable(False)
    record.wall_time = time.perf_counter() - start
    return record


def adapt(
    model: CANetModel,
    new_dataset_id: str,
    data: ChangeDataset,
    config: Optional[TrainConfig] = None,
    init_from: Optional[str] = "auto",
    eval_sets: Sequence[Tuple[str, str, ChangeDataset]] = (),
) -> RunRecord:
    """Register ``new_dataset_id`` and train only its adapter and BN entries.

    ``init_from="auto"`` starts the new adapter and BN entries from the
    first registered (historical) dataset; ``None`` uses a fresh adapter.
    """
    if not model.dataset_ids:
        raise ValueError("adapt needs a model with at least one historical dataset")
    if init_from == "auto":
        init_from = model.dataset_ids[0]
    config = config or TrainConfig()
    if config.scope != "adapter_only":
        config = TrainConfig(**{**config.to_dict(), "scope": "adapter_only"})
    model.add_dataset(new_dataset_id, init_from=init_from)
    return train(model, data, config, new_dataset_id, eval_sets)


def online_finetune_baseline(
    model: CANetModel,
    data: ChangeDataset,
    config: Optional[TrainConfig] = None,
    dataset_id: Optional[str] = None,
    eval_sets: Sequence[Tuple[str, str, ChangeDataset]] = (),
) -> RunRecord:
    """Fine-tune every parameter on new data through the historical bank.

    The historical dataset's adapter and BN entries are reused and
    overwritten, which is the forgetting-prone baseline.
    """
    if not model.dataset_ids:
        raise ValueError("online fine-tuning needs a pretrained model")
    ds = model.dataset_ids[0] if dataset_id is None else dataset_id
    config = config or TrainConfig()
    if config.scope != "full":
        config = TrainConfig(**{**config.to_dict(), "scope": "full"})
    return train(model, data, config, ds, eval_sets)


def predict_maps(model: CANetModel, dataset_id: str, data: ChangeDataset, batch_size: int = 16) -> np.ndarray:
    _check_data(data)
    out = np.empty(data.label.shape, np.uint8)
    for s in range(0, len(data), batch_size):
        sl = slice(s, s + batch_size)
        out[sl] = model.predict(Tensor(data.x1[sl]), Tensor(data.x2[sl]), dataset_id)
    return out


def evaluate_with_loss(model: CANetModel, dataset_id: str, data: ChangeDataset, batch_size: int = 16) -> Tuple[float, Metrics]:
    """Eval-mode mean pixel loss and confusion metrics accumulated over all pairs."""
    _check_data(data)
    counts = Metrics()
    loss_sum = 0.0
    for s in range(0, len(data), batch_size):
        sl = slice(s, s + batch_size)
        logits, _ = model.forward(Tensor(data.x1[sl]), Tensor(data.x2[sl]), dataset_id, "eval")
        y = data.label[sl]
        loss_sum += float(ops.softmax_cross_entropy(logits, y).data) * len(y)
        counts = counts + Metrics.from_maps(logits.data[:, 1] > logits.data[:, 0], y)
    return loss_sum / len(data), counts


def evaluate(model: CANetModel, dataset_id: str, data: ChangeDataset, batch_size: int = 16) -> Metrics:
    _check_data(data)
    counts = Metrics()
    for s in range(0, len(data), batch_size):
        sl = slice(s, s + batch_size)
        pred = model.predict(Tensor(data.x1[sl]), Tensor(data.x2[sl]), dataset_id)
        counts = counts + Metrics.from_maps(pred, data.label[sl])
    return counts


def write_maps(maps: np.ndarray, directory) -> List[str]:
    """Write each (h, w) map as a P5 PGM, 0 = unchanged, 255 = changed."""
    os.makedirs(directory, exist_ok=True)
    paths = []
    for i, m in enumerate(maps):
        path = os.path.join(directory, f"{i:05d}.pgm")
        write_pgm(path, (np.asarray(m) > 0).astype(np.uint8) * 255)
        paths.append(path)
    return paths


def adapt_variant(
    pretrained: CANetModel,
    ablation: str,
    new_dataset_id: str,
    data: ChangeDataset,
    config: Optional[TrainConfig] = None,
    hist_data: Optional[ChangeDataset] = None,
) -> CANetModel:
    """Adapt a copy of ``pretrained`` to new data under an ablation.

    ``shared_icm`` and ``shared_bn`` rewire the pretrained model. ``no_icm``
    changes the historical model as well, so with ``hist_data`` it is
    retrained from scratch without ICM; otherwise the ICMs are simply
    dropped from the pretrained model.
    """
    config = config or TrainConfig()
    config = replace(config, ablation=ablation)
    hist_id = pretrained.dataset_ids[0]
    if ablation == "no_icm" and hist_data is not None:
        model = CANetModel(replace(pretrained.config, ablation="no_icm"), [hist_id])
        train(model, hist_data, replace(config, scope="full"), hist_id)
    else:
        model = apply_ablation(pretrained, ablation)
    adapt(model, new_dataset_id, data, config)
    return model
