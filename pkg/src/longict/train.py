"""Losses and training loops: restoration pretraining plus both finetunes.

The restoration objective is an equal-weight sum of the full-image MSE and a
patch term, the MSE of the mask-multiplied images; both means run over all
pixels (a per-masked-pixel variant is available behind ``patch_norm``).
Pretraining early-stops on the validation loss; finetunes run a fixed epoch
budget and keep the best validation-metric epoch.
"""

from __future__ import annotations

import copy
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import augment
from .core import LongitudinalSlicePair, SEG_CONS, SEG_GGO
from .model import (
    Checkpoint,
    FcDenseNet,
    HEAD_CLASSIFICATION,
    HEAD_RESTORATION,
    HEAD_SEGMENTATION,
    MODE_ENCODER_ONLY,
    MODE_FULL_TRUNK,
    ModelConfig,
    build_network,
    checkpoint_from_network,
    transfer_weights,
)

TASK_PRETEXT_BLACK = "pretext_black"
TASK_PRETEXT_DISORDER = "pretext_disorder"
TASK_SEG = "seg"
TASK_CLS = "cls"
PRETEXT_TASKS = (TASK_PRETEXT_BLACK, TASK_PRETEXT_DISORDER)
ALL_TASKS = PRETEXT_TASKS + (TASK_SEG, TASK_CLS)

DEFAULT_EPOCHS = {TASK_PRETEXT_BLACK: 100, TASK_PRETEXT_DISORDER: 100, TASK_SEG: 30, TASK_CLS: 30}
_VAL_AUG_STREAM = 813057  # fixed sub-seed so validation corruption repeats across epochs


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def restoration_loss(
    pred: torch.Tensor, truth: torch.Tensor, mask: torch.Tensor, patch_norm: str = "all"
) -> torch.Tensor:
    """0.5 * MSE(pred, truth) + 0.5 * MSE(mask * pred, mask * truth)."""
    if pred.shape != truth.shape or pred.shape != mask.shape:
        raise ValueError(
            f"shape mismatch: pred {tuple(pred.shape)}, truth {tuple(truth.shape)}, mask {tuple(mask.shape)}"
        )
    diff = pred - truth
    l_mse = (diff * diff).mean()
    masked = mask * diff
    if patch_norm == "all":
        l_patch = (masked * masked).mean()
    elif patch_norm == "masked":
        l_patch = (masked * masked).sum() / mask.sum().clamp(min=1.0)
    else:
        raise ValueError(f"patch_norm must be 'all' or 'masked', got {patch_norm!r}")
    return 0.5 * l_mse + 0.5 * l_patch


def dice_loss(logits: torch.Tensor, labels: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Soft Dice on softmax probabilities, pooled over the whole batch per class."""
    if logits.dim() != 4 or logits.shape[1] != 4:
        raise ValueError(f"logits must have shape (N, 4, H, W), got {tuple(logits.shape)}")
    if labels.min() < 0 or labels.max() > 3:
        raise ValueError(f"labels must lie in {{0..3}}, got range [{labels.min()}, {labels.max()}]")
    probs = torch.softmax(logits, dim=1)
    onehot = torch.nn.functional.one_hot(labels.long(), num_classes=4)
    onehot = onehot.permute(0, 3, 1, 2).to(probs.dtype)
    inter = (probs * onehot).sum(dim=(0, 2, 3))
    denom = probs.sum(dim=(0, 2, 3)) + onehot.sum(dim=(0, 2, 3))
    dice = (2.0 * inter + eps) / (denom + eps)
    return (1.0 - dice).mean()


def bce_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean sigmoid cross-entropy over batch and both labels, numerically stable."""
    if not torch.isfinite(logits).all():
        raise ValueError("logits must be finite")
    return torch.nn.functional.binary_cross_entropy_with_logits(logits, targets.to(logits.dtype))


# ---------------------------------------------------------------------------
# Config, log, early stopping
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    task: str
    longitudinal: bool = True
    max_epochs: Optional[int] = None
    batch_size: int = 4
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    patience: int = 5
    seed: int = 0
    model: Optional[ModelConfig] = None
    count_range: tuple[int, int] = augment.DEFAULT_COUNT_RANGE
    side_range: Optional[tuple[int, int]] = None
    patch_norm: str = "all"
    max_steps: Optional[int] = None  # optional hard cap, for sanity runs

    def __post_init__(self):
        if self.task not in ALL_TASKS:
            raise ValueError(f"task must be one of {ALL_TASKS}, got {self.task!r}")
        if self.max_epochs is None:
            self.max_epochs = DEFAULT_EPOCHS[self.task]
        if min(self.max_epochs, self.batch_size, self.patience) < 1 or self.lr <= 0:
            raise ValueError("max_epochs, batch_size, patience and lr must be positive")
        if self.task in PRETEXT_TASKS and self.patience >= self.max_epochs:
            raise ValueError(f"patience {self.patience} must be < max_epochs {self.max_epochs}")

    def resolved_model(self) -> ModelConfig:
        base = self.model or ModelConfig()
        head = {
            TASK_PRETEXT_BLACK: HEAD_RESTORATION,
            TASK_PRETEXT_DISORDER: HEAD_RESTORATION,
            TASK_SEG: HEAD_SEGMENTATION,
            TASK_CLS: HEAD_CLASSIFICATION,
        }[self.task]
        return replace(base, in_channels=2 if self.longitudinal else 1, head=head)

    def pretext_kind(self) -> str:
        return {TASK_PRETEXT_BLACK: augment.TASK_BLACK, TASK_PRETEXT_DISORDER: augment.TASK_DISORDER}[
            self.task
        ]

    def to_json(self) -> dict:
        d = {
            "task": self.task,
            "longitudinal": self.longitudinal,
            "max_epochs": self.max_epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "betas": list(self.betas),
            "patience": self.patience,
            "seed": self.seed,
            "count_range": list(self.count_range),
            "side_range": None if self.side_range is None else list(self.side_range),
            "patch_norm": self.patch_norm,
            "max_steps": self.max_steps,
            "model": self.resolved_model().to_json(),
        }
        return d


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)
    selected_epoch: int = 0
    wall_time_s: float = 0.0
    config: dict = field(default_factory=dict)


def save_train_log(log: TrainLog, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        for rec in log.records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
        f.write(
            json.dumps(
                {
                    "summary": {
                        "selected_epoch": log.selected_epoch,
                        "wall_time_s": log.wall_time_s,
                        "config": log.config,
                    }
                },
                sort_keys=True,
            )
            + "\n"
        )


class EarlyStopper:
    """Stop after ``patience`` consecutive epochs without strict improvement."""

    def __init__(self, patience: int, mode: str = "min"):
        assert mode in ("min", "max")
        self.patience = patience
        self.mode = mode
        self.best_value: Optional[float] = None
        self.best_epoch = 0
        self.stale = 0
        self.epoch = 0

    def update(self, value: float) -> bool:
        """Record one epoch value; returns True when training should stop."""
        self.epoch += 1
        better = self.best_value is None or (
            value < self.best_value if self.mode == "min" else value > self.best_value
        )
        if better:
            self.best_value = value
            self.best_epoch = self.epoch
            self.stale = 0
        else:
            self.stale += 1
        return self.stale >= self.patience


# ---------------------------------------------------------------------------
# Batch assembly
# ---------------------------------------------------------------------------


def _input_tensor(pairs: Sequence[LongitudinalSlicePair], longitudinal: bool, targets=None) -> torch.Tensor:
    rows = []
    for k, p in enumerate(pairs):
        tar = p.target if targets is None else targets[k]
        chans = [p.reference, tar] if longitudinal else [tar]
        rows.append(np.stack(chans))
    return torch.from_numpy(np.stack(rows).astype(np.float32))


def _pretext_batch(pairs, kind, longitudinal, rng, count_range, side_range):
    aug_targets, masks, truths = [], [], []
    for p in pairs:
        aug_pair, mask = augment.augment_pair(p, kind, rng, count_range, side_range)
        aug_targets.append(aug_pair.target)
        masks.append(mask.astype(np.float32))
        truths.append(p.target)
    x = _input_tensor(pairs, longitudinal, targets=aug_targets)
    truth = torch.from_numpy(np.stack(truths).astype(np.float32)).unsqueeze(1)
    mask = torch.from_numpy(np.stack(masks)).unsqueeze(1)
    return x, truth, mask


def _seg_batch(pairs, longitudinal):
    x = _input_tensor(pairs, longitudinal)
    labels = torch.from_numpy(np.stack([p.target_seg for p in pairs]).astype(np.int64))
    return x, labels


def _cls_batch(pairs, longitudinal):
    x = _input_tensor(pairs, longitudinal)
    labels = torch.tensor(
        [[float(p.target_labels.ggo_present), float(p.target_labels.cons_present)] for p in pairs]
    )
    return x, labels


def _batches(items, batch_size, order):
    for start in range(0, len(order), batch_size):
        yield [items[k] for k in order[start : start + batch_size]]


# ---------------------------------------------------------------------------
# Validation metrics
# ---------------------------------------------------------------------------


def _val_restoration(net, slices, config, longitudinal) -> float:
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, _VAL_AUG_STREAM]))
    kind = config.pretext_kind()
    net.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for batch in _batches(slices, config.batch_size, list(range(len(slices)))):
            x, truth, mask = _pretext_batch(
                batch, kind, longitudinal, rng, config.count_range, config.side_range
            )
            loss = restoration_loss(net(x), truth, mask, config.patch_norm)
            total += float(loss) * len(batch)
            count += len(batch)
    return total / max(count, 1)


def _val_seg_dice(net, slices, config, longitudinal) -> float:
    """Mean Dice over the three lung classes, pooled over the whole split."""
    net.eval()
    inter = np.zeros(4, dtype=np.int64)
    pred_count = np.zeros(4, dtype=np.int64)
    truth_count = np.zeros(4, dtype=np.int64)
    with torch.no_grad():
        for batch in _batches(slices, config.batch_size, list(range(len(slices)))):
            x, labels = _seg_batch(batch, longitudinal)
            pred = net(x).argmax(dim=1)
            for c in range(4):
                p = pred == c
                g = labels == c
                inter[c] += int((p & g).sum())
                pred_count[c] += int(p.sum())
                truth_count[c] += int(g.sum())
    dices = []
    for c in (1, 2, 3):
        denom = pred_count[c] + truth_count[c]
        dices.append(1.0 if denom == 0 else 2.0 * inter[c] / denom)
    return float(np.mean(dices))


def _val_cls_accuracy(net, slices, config, longitudinal) -> float:
    """Mean of the two per-class accuracies at threshold 0.5."""
    net.eval()
    scores, labels = [], []
    with torch.no_grad():
        for batch in _batches(slices, config.batch_size, list(range(len(slices)))):
            x, y = _cls_batch(batch, longitudinal)
            scores.append(torch.sigmoid(net(x)).numpy())
            labels.append(y.numpy())
    scores = np.concatenate(scores)
    labels = np.concatenate(labels)
    per_class = ((scores >= 0.5) == (labels >= 0.5)).mean(axis=0)
    return float(per_class.mean())


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------


def _require_slices(name, slices):
    if not slices:
        raise ValueError(f"{name} split is empty")


def pretrain(
    config: TrainConfig,
    train_slices: Sequence[LongitudinalSlicePair],
    val_slices: Sequence[LongitudinalSlicePair],
) -> tuple[Checkpoint, TrainLog]:
    """Restoration pretraining with early stopping on the validation loss."""
    if config.task not in PRETEXT_TASKS:
        raise ValueError(f"pretrain requires a pretext task, got {config.task!r}")
    _require_slices("train", train_slices)
    _require_slices("val", val_slices)

    torch.manual_seed(config.seed)
    model_cfg = config.resolved_model()
    net = build_network(model_cfg, seed=config.seed)
    opt = torch.optim.Adam(net.parameters(), lr=config.lr, betas=config.betas)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    kind = config.pretext_kind()
    stopper = EarlyStopper(config.patience, mode="min")
    log = TrainLog(config=config.to_json())
    best_state = None
    t0 = time.monotonic()
    steps = 0
    for epoch in range(1, config.max_epochs + 1):
        net.train()
        order = rng.permutation(len(train_slices)).tolist()
        train_total, train_count = 0.0, 0
        for batch in _batches(train_slices, config.batch_size, order):
            x, truth, mask = _pretext_batch(
                batch, kind, config.longitudinal, rng, config.count_range, config.side_range
            )
            opt.zero_grad()
            loss = restoration_loss(net(x), truth, mask, config.patch_norm)
            loss.backward()
            opt.step()
            train_total += float(loss) * len(batch)
            train_count += len(batch)
            steps += 1
            if config.max_steps is not None and steps >= config.max_steps:
                break
        val_loss = _val_restoration(net, val_slices, config, config.longitudinal)
        stop = stopper.update(val_loss)
        if stopper.best_epoch == epoch:
            best_state = copy.deepcopy(net.state_dict())
        log.records.append(
            {
                "epoch": epoch,
                "train_loss": train_total / max(train_count, 1),
                "val_loss": val_loss,
            }
        )
        if stop or (config.max_steps is not None and steps >= config.max_steps):
            break
    net.load_state_dict(best_state)
    log.selected_epoch = stopper.best_epoch
    log.wall_time_s = time.monotonic() - t0
    ckpt = checkpoint_from_network(
        net,
        metadata={
            "task": config.task,
            "pretext": kind,
            "longitudinal": config.longitudinal,
            "epoch": stopper.best_epoch,
            "val_metric": stopper.best_value,
            "seed": config.seed,
        },
    )
    return ckpt, log


def _finetune(config, train_slices, val_slices, init, mode, batch_fn, loss_fn, val_fn, extra_meta):
    _require_slices("train", train_slices)
    _require_slices("val", val_slices)
    torch.manual_seed(config.seed)
    model_cfg = config.resolved_model()
    net = build_network(model_cfg, seed=config.seed)
    init_pretext = "none"
    if init is not None:
        transfer_weights(init, net, mode)
        init_pretext = init.metadata.get("pretext", "unknown")
    opt = torch.optim.Adam(net.parameters(), lr=config.lr, betas=config.betas)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    log = TrainLog(config=config.to_json())
    best_metric, best_epoch, best_state = -np.inf, 0, None
    t0 = time.monotonic()
    steps = 0
    for epoch in range(1, config.max_epochs + 1):
        net.train()
        order = rng.permutation(len(train_slices)).tolist()
        train_total, train_count = 0.0, 0
        for batch in _batches(train_slices, config.batch_size, order):
            x, y = batch_fn(batch, config.longitudinal)
            opt.zero_grad()
            loss = loss_fn(net(x), y)
            loss.backward()
            opt.step()
            train_total += float(loss) * len(batch)
            train_count += len(batch)
            steps += 1
            if config.max_steps is not None and steps >= config.max_steps:
                break
        val_metric = val_fn(net, val_slices, config, config.longitudinal)
        if val_metric > best_metric:
            best_metric, best_epoch = val_metric, epoch
            best_state = copy.deepcopy(net.state_dict())
        log.records.append(
            {
                "epoch": epoch,
                "train_loss": train_total / max(train_count, 1),
                "val_metric": val_metric,
            }
        )
        if config.max_steps is not None and steps >= config.max_steps:
            break
    net.load_state_dict(best_state)
    log.selected_epoch = best_epoch
    log.wall_time_s = time.monotonic() - t0
    meta = {
        "longitudinal": config.longitudinal,
        "pretext": init_pretext,
        "epoch": best_epoch,
        "val_metric": best_metric,
        "seed": config.seed,
    }
    meta.update(extra_meta)
    return checkpoint_from_network(net, metadata=meta), log


def finetune_segmentation(
    config: TrainConfig,
    train_slices: Sequence[LongitudinalSlicePair],
    val_slices: Sequence[LongitudinalSlicePair],
    init: Optional[Checkpoint] = None,
) -> tuple[Checkpoint, TrainLog]:
    """Dice-loss training; keeps the epoch with the highest validation mean Dice."""
    if config.task != TASK_SEG:
        raise ValueError(f"finetune_segmentation requires task '{TASK_SEG}', got {config.task!r}")
    for p in train_slices:
        if p.target_seg is None:
            raise ValueError(f"slice {p.patient_id}/{p.slice_index} lacks a segmentation mask")
    return _finetune(
        config, train_slices, val_slices, init, MODE_FULL_TRUNK,
        _seg_batch, dice_loss, _val_seg_dice, {"task": TASK_SEG},
    )


def finetune_classification(
    config: TrainConfig,
    train_slices: Sequence[LongitudinalSlicePair],
    val_slices: Sequence[LongitudinalSlicePair],
    init: Optional[Checkpoint] = None,
) -> tuple[Checkpoint, TrainLog]:
    """BCE training of the encoder + linear head on slice-level presence labels."""
    if config.task != TASK_CLS:
        raise ValueError(f"finetune_classification requires task '{TASK_CLS}', got {config.task!r}")
    for p in train_slices:
        if p.target_labels is None:
            raise ValueError(f"slice {p.patient_id}/{p.slice_index} lacks presence labels")
    return _finetune(
        config, train_slices, val_slices, init, MODE_ENCODER_ONLY,
        _cls_batch, bce_loss, _val_cls_accuracy, {"task": TASK_CLS},
    )


def derive_presence_labels(seg_slice: np.ndarray) -> tuple[bool, bool]:
    """Slice-level labels: class present iff at least one voxel carries it."""
    return bool((seg_slice == SEG_GGO).any()), bool((seg_slice == SEG_CONS).any())
