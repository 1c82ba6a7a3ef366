"""Training loop, losses, and evaluation metrics (accuracy, part IoU, mIoU)."""
from __future__ import annotations

import contextlib
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .model import ModelConfig, ParameterStore, forward_full, make_pyramid
from .optim import OptimizerState, adam_step
from .pointcloud import AugmentConfig, PointCloud, augment
from .tensor import ContractError, backward, cross_entropy, scale

log = logging.getLogger(__name__)


class DivergenceError(ArithmeticError):
    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch}")
        self.epoch, self.batch, self.loss = epoch, batch, loss


@dataclass
class TrainConfig:
    epochs: int = 250
    batch_size: int = 32
    base_lr: float = 3e-4
    lr_step_size: int = 20
    lr_gamma: float = 0.7
    seed: int = 0
    augment: bool = True
    augmentation: AugmentConfig = field(default_factory=lambda: AugmentConfig(dropout_prob=0.1))
    precision: str = "f32"
    deterministic: bool = True

    def validate(self) -> None:
        if self.epochs < 1:
            raise ContractError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.base_lr >= 0:
            raise ContractError(f"base_lr must be >= 0, got {self.base_lr}")
        if self.precision not in ("f32", "f64"):
            raise ContractError(f"precision must be f32 or f64, got {self.precision!r}")
        self.augmentation.validate()


@dataclass
class MetricReport:
    overall_accuracy: Optional[float] = None
    per_class_iou: list = field(default_factory=list)
    instance_miou: Optional[float] = None
    loss_curve: list = field(default_factory=list)

    def to_kv(self) -> str:
        lines = []
        if self.overall_accuracy is not None:
            lines.append(f"overall_accuracy={self.overall_accuracy!r}")
        if self.instance_miou is not None:
            lines.append(f"instance_miou={self.instance_miou!r}")
        for i, v in enumerate(self.per_class_iou):
            lines.append(f"class_iou.{i}={v!r}")
        for i, v in enumerate(self.loss_curve):
            lines.append(f"loss.epoch{i}={v!r}")
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        rows = [("metric", "value")]
        if self.overall_accuracy is not None:
            rows.append(("overall accuracy", f"{self.overall_accuracy:.4f}"))
        if self.instance_miou is not None:
            rows.append(("instance mIoU", f"{self.instance_miou:.4f}"))
        for i, v in enumerate(self.per_class_iou):
            rows.append((f"category {i} IoU", f"{v:.4f}"))
        if self.loss_curve:
            rows.append(("first epoch loss", f"{self.loss_curve[0]:.6f}"))
            rows.append(("last epoch loss", f"{self.loss_curve[-1]:.6f}"))
            rows.append(("epochs", str(len(self.loss_curve))))
        w = max(len(r[0]) for r in rows)
        return "\n".join(f"{a:<{w}}  {b}" for a, b in rows) + "\n"


@contextlib.contextmanager
def thread_limit(deterministic: bool):
    """Cap BLAS threads: MLMSPT_THREADS (0 = auto), or one thread in deterministic mode."""
    n = int(os.environ.get("MLMSPT_THREADS", "0") or 0)
    if deterministic:
        n = 1
    if n <= 0:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


def sample_loss(cloud: PointCloud, cfg: ModelConfig, params: ParameterStore, pyramid=None):
    logits = forward_full(cloud, cfg, params, pyramid)
    if cfg.task == "cls":
        if cloud.shape_label is None:
            raise ContractError("classification sample has no shape label")
        return cross_entropy(logits, [cloud.shape_label])
    if cloud.point_labels is None:
        raise ContractError("segmentation sample has no point labels")
    return cross_entropy(logits, cloud.point_labels)


def train(cfg: ModelConfig, params: ParameterStore, dataset: Sequence[PointCloud], tcfg: TrainConfig,
          parts: Optional[dict] = None,
          on_epoch: Optional[Callable[[int, ParameterStore, float], bool]] = None):
    """Train ``params`` in place; returns (params, MetricReport).

    ``on_epoch(epoch, params, mean_loss)`` runs after every epoch; a truthy
    return ends training there.
    """
    if not dataset:
        raise ContractError("training set is empty")
    tcfg.validate()
    state = OptimizerState(base_lr=tcfg.base_lr, step_size=tcfg.lr_step_size, gamma=tcfg.lr_gamma)
    report = MetricReport()
    fixed_pyramids = None if tcfg.augment else [make_pyramid(c, cfg) for c in dataset]
    with thread_limit(tcfg.deterministic):
        for epoch in range(tcfg.epochs):
            lr = state.lr_at(epoch)
            order = np.random.default_rng([tcfg.seed, epoch]).permutation(len(dataset))
            epoch_loss = 0.0
            for b, start in enumerate(range(0, len(order), tcfg.batch_size)):
                batch = order[start:start + tcfg.batch_size]
                params.zero_grad()
                batch_loss = 0.0
                for idx in batch:
                    cloud = dataset[idx]
                    pyr = None
                    if tcfg.augment:
                        cloud = augment(cloud, [tcfg.seed, epoch, int(idx)], tcfg.augmentation)
                    else:
                        pyr = fixed_pyramids[idx]
                    loss = sample_loss(cloud, cfg, params, pyr)
                    value = loss.item()
                    if not math.isfinite(value):
                        raise DivergenceError(epoch, b, value)
                    batch_loss += value
                    backward(scale(loss, 1.0 / len(batch)))
                epoch_loss += batch_loss
                adam_step(params, state, lr)
            mean_loss = epoch_loss / len(dataset)
            report.loss_curve.append(mean_loss)
            log.info("epoch %d lr %.3g loss %.6f", epoch, lr, mean_loss)
            if on_epoch is not None and on_epoch(epoch, params, mean_loss):
                break
        params.zero_grad()
        final = evaluate(cfg, params, dataset, parts)
    final.loss_curve = report.loss_curve
    return params, final


# metrics

def predict_class(cloud: PointCloud, cfg: ModelConfig, params: ParameterStore) -> int:
    logits = forward_full(cloud, cfg, params).data[0]
    return int(np.argmax(logits))  # first maximum wins ties


def predict_parts(cloud: PointCloud, cfg: ModelConfig, params: ParameterStore, part_set=None) -> np.ndarray:
    """Per-point argmax, restricted to ``part_set`` when given."""
    logits = forward_full(cloud, cfg, params).data
    if part_set is None:
        return logits.argmax(axis=1)
    part_set = np.asarray(sorted(part_set))
    return part_set[logits[:, part_set].argmax(axis=1)]


def accuracy(pred: Sequence[int], gt: Sequence[int]) -> float:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ContractError(f"{len(pred)} predictions for {len(gt)} labels")
    return float((pred == gt).sum()) / len(gt) if len(gt) else 0.0


def evaluate_classification(cfg: ModelConfig, params: ParameterStore, dataset: Sequence[PointCloud]) -> float:
    pred = [predict_class(c, cfg, params) for c in dataset]
    return accuracy(pred, [c.shape_label for c in dataset])


def iou_scores(pred_labels, gt_labels, parts_of_category):
    """Per-part IoU (absent from both => 1) and their mean, the shape IoU."""
    pred = np.asarray(pred_labels)
    gt = np.asarray(gt_labels)
    parts = list(parts_of_category)
    if pred.shape != gt.shape:
        raise ContractError(f"prediction length {pred.shape} != ground truth length {gt.shape}")
    allowed = set(parts)
    for name, arr in (("prediction", pred), ("ground truth", gt)):
        extra = set(np.unique(arr).tolist()) - allowed
        if extra:
            raise ContractError(f"{name} labels {sorted(extra)} outside part set {sorted(allowed)}")
    ious = []
    for p in parts:
        inter = np.count_nonzero((pred == p) & (gt == p))
        union = np.count_nonzero((pred == p) | (gt == p))
        ious.append(1.0 if union == 0 else inter / union)
    return ious, float(np.mean(ious))


def instance_miou(shape_ious: Sequence[float]) -> float:
    return float(np.mean(shape_ious))


def evaluate_segmentation(cfg: ModelConfig, params: ParameterStore, dataset: Sequence[PointCloud], parts: dict):
    """Returns (instance mIoU, per-category IoU list, per-shape IoUs)."""
    shape_ious, cats = [], []
    for c in dataset:
        part_set = parts[c.shape_label]
        pred = predict_parts(c, cfg, params, part_set)
        shape_ious.append(iou_scores(pred, c.point_labels, part_set)[1])
        cats.append(c.shape_label)
    cats = np.asarray(cats)
    per_cat = [float(np.mean(np.asarray(shape_ious)[cats == k])) for k in sorted(set(cats.tolist()))]
    return instance_miou(shape_ious), per_cat, shape_ious


def evaluate(cfg: ModelConfig, params: ParameterStore, dataset: Sequence[PointCloud], parts=None) -> MetricReport:
    if cfg.task == "cls":
        return MetricReport(overall_accuracy=evaluate_classification(cfg, params, dataset))
    if parts is None:
        parts = {c.shape_label: sorted(range(cfg.num_classes)) for c in dataset}
    miou, per_cat, _ = evaluate_segmentation(cfg, params, dataset, parts)
    return MetricReport(instance_miou=miou, per_class_iou=per_cat)
