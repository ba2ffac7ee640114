"""Two-stage training: class-specialised teachers, then a distilled student."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import astuple, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .arch import TeacherConfig
from .data import SegBatch, SegSample, augment
from .errors import ConfigurationError
from .losses import PRESETS, LossWeights, PredictionBundle, total_loss_terms, weight_balance_terms
from .metrics import MetricsReport, batch_metrics, mean_report
from .models import GraphNet, NetworkHandle, build_teacher

log = logging.getLogger(__name__)

TEACHER_MODES = ("frozen", "cofinetune")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 5e-4
    batch_size: int = 8
    epochs: int = 20
    plateau_patience: int = 3
    plateau_factor: float = 0.1
    plateau_threshold: float = 1e-4
    min_lr: float = 1e-6
    seed: int = 0
    teacher_mode: str = "frozen"
    temperature: float = 1.0
    augment: bool = False
    max_steps: int | None = None

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigurationError(f"lr must be positive, got {self.lr}")
        if not 0 < self.plateau_factor < 1:
            raise ConfigurationError(f"plateau_factor must be in (0, 1), got {self.plateau_factor}")
        if self.batch_size < 1 or self.epochs < 1 or self.plateau_patience < 1:
            raise ConfigurationError("batch_size, epochs and plateau_patience must be >= 1")
        if self.teacher_mode not in TEACHER_MODES:
            raise ConfigurationError(f"teacher_mode must be one of {TEACHER_MODES}")
        if not self.temperature > 0:
            raise ConfigurationError(f"temperature must be positive, got {self.temperature}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigurationError("max_steps must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    total: float
    wb: float
    kl_benign: float
    kl_malignant: float
    lr: float
    dice: float = math.nan
    miou: float = math.nan


HISTORY_COLUMNS = tuple(f.name for f in fields(EpochRecord))


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, rec: EpochRecord) -> None:
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise ValueError("epochs must be strictly increasing")
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.records]

    @property
    def lrs(self) -> list[float]:
        return self.column("lr")

    @property
    def totals(self) -> list[float]:
        return self.column("total")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for r in self.records:
            w.writerow([repr(v) for v in astuple(r)])
        return buf.getvalue()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())


def lr_plateau_step(tail: Sequence[float], current_lr: float, patience: int, factor: float,
                    threshold: float = 1e-4, floor: float = 1e-6) -> float:
    """Learning rate after looking at the losses since the last change.

    ``tail[0]`` is the reference epoch. An epoch is stagnant unless it beats
    the best loss so far by a relative margin of ``threshold``; ``patience``
    consecutive stagnant epochs multiply the rate by ``factor`` (never below
    ``floor``, and never upwards when the rate already sits under it).
    """
    if patience < 1:
        raise ConfigurationError("patience must be >= 1")
    if not tail:
        return current_lr
    best, bad = tail[0], 0
    for v in tail[1:]:
        if v < best * (1 - threshold):
            best, bad = v, 0
        else:
            bad += 1
    if bad >= patience:
        return max(current_lr * factor, min(floor, current_lr))
    return current_lr


class PlateauSchedule:
    """Stateful wrapper that restarts the stagnation window after every drop."""

    def __init__(self, lr: float, patience: int, factor: float, threshold: float = 1e-4,
                 floor: float = 1e-6):
        self.lr = lr
        self.patience, self.factor = patience, factor
        self.threshold, self.floor = threshold, floor
        self.tail: list[float] = []

    def step(self, loss: float) -> float:
        self.tail.append(loss)
        new = lr_plateau_step(self.tail, self.lr, self.patience, self.factor, self.threshold, self.floor)
        if new != self.lr:
            self.tail = [min(self.tail)]
            self.lr = new
        return self.lr


def make_optimizer(net: nn.Module, config: TrainConfig) -> torch.optim.Adam:
    """Adam with weight decay on conv weights and biases only (norm parameters excluded)."""
    decay, no_decay = [], []
    for m in net.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            decay += list(m.parameters(recurse=False))
        elif isinstance(m, nn.BatchNorm2d):
            no_decay += list(m.parameters(recurse=False))
    groups = [{"params": decay, "weight_decay": config.weight_decay},
              {"params": no_decay, "weight_decay": 0.0}]
    return torch.optim.Adam([g for g in groups if g["params"]], lr=config.lr)


def _set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for g in opt.param_groups:
        g["lr"] = lr


LossFn = Callable[[GraphNet, SegBatch], dict]
EpochCallback = Callable[[TrainHistory], bool]


def _fit(handle: NetworkHandle, samples: Sequence[SegSample], config: TrainConfig, loss_fn: LossFn,
         after_step: Callable[[SegBatch], None] | None = None, val: Sequence[SegSample] | None = None,
         device: str = "cpu", callback: EpochCallback | None = None) -> TrainHistory:
    net = handle.net.to(device)
    opt = make_optimizer(net, config)
    sched = PlateauSchedule(config.lr, config.plateau_patience, config.plateau_factor,
                            config.plateau_threshold, config.min_lr)
    rng = np.random.default_rng(config.seed)
    history = TrainHistory()
    steps = 0
    for epoch in range(config.epochs):
        net.train()
        sums = dict.fromkeys(("total", "wb", "kl_benign", "kl_malignant"), 0.0)
        seen = 0
        order = rng.permutation(len(samples))
        for start in range(0, len(order), config.batch_size):
            chunk = [samples[i] for i in order[start:start + config.batch_size]]
            if config.augment:
                chunk = [augment(s, seed=int(rng.integers(2 ** 31))) for s in chunk]
            batch = SegBatch.from_samples(chunk)
            batch.images, batch.masks = batch.images.to(device), batch.masks.to(device)
            opt.zero_grad()
            terms = loss_fn(net, batch)
            terms["total"].backward()
            opt.step()
            if after_step is not None:
                after_step(batch)
            for k in sums:
                sums[k] += float(terms[k].detach()) * len(batch)
            seen += len(batch)
            steps += 1
            if config.max_steps and steps >= config.max_steps:
                break
        means = {k: v / seen for k, v in sums.items()}
        dice = miou = math.nan
        if val:
            report = evaluate(net, val, device=device)
            dice, miou = report.dice, report.miou
        history.append(EpochRecord(epoch, means["total"], means["wb"], means["kl_benign"],
                                   means["kl_malignant"], sched.lr, dice, miou))
        log.info("%s epoch %d total=%.5f lr=%.1e", handle.role, epoch, means["total"], sched.lr)
        _set_lr(opt, sched.step(means["total"]))
        if config.max_steps and steps >= config.max_steps:
            break
        if callback is not None and callback(history):
            break
    handle.epoch += len(history)
    return history


def _hard_loss(net: GraphNet, batch: SegBatch) -> dict:
    terms = weight_balance_terms(torch.sigmoid(net(batch.images)), batch.masks)
    zero = terms["wb"].new_zeros(())
    return {**terms, "total": terms["wb"], "kl_benign": zero, "kl_malignant": zero}


def train_teacher(role: str, samples: Sequence[SegSample], config: TrainConfig,
                  teacher_config: TeacherConfig | None = None, val: Sequence[SegSample] | None = None,
                  device: str = "cpu", callback: EpochCallback | None = None,
                  handle: NetworkHandle | None = None) -> tuple[NetworkHandle, TrainHistory]:
    """Train a teacher from scratch on the weight-balance loss over its own class."""
    if role not in ("benign", "malignant"):
        raise ConfigurationError(f"teacher role must be benign or malignant, got {role!r}")
    own = [s for s in samples if s.class_label == role]
    if not own:
        raise ConfigurationError(f"no {role} samples to train the {role} teacher")
    if handle is None:
        handle = build_teacher(teacher_config, seed=config.seed, role=f"{role}_teacher")
    history = _fit(handle, own, config, _hard_loss, val=val, device=device, callback=callback)
    return handle, history


def train_supervised(net: NetworkHandle, samples: Sequence[SegSample], config: TrainConfig,
                     val: Sequence[SegSample] | None = None, device: str = "cpu",
                     callback: EpochCallback | None = None) -> tuple[NetworkHandle, TrainHistory]:
    """Ground-truth-only training (no teachers)."""
    return distill_student(net, samples, PRESETS["supervised"], config, val=val, device=device,
                           callback=callback)


def _teacher_probs(teacher: NetworkHandle, images: torch.Tensor) -> torch.Tensor:
    teacher.net.eval()
    with torch.no_grad():
        return torch.sigmoid(teacher.net(images))


def distill_student(student: NetworkHandle, samples: Sequence[SegSample], weights: LossWeights,
                    config: TrainConfig, benign_teacher: NetworkHandle | None = None,
                    malignant_teacher: NetworkHandle | None = None,
                    val: Sequence[SegSample] | None = None, device: str = "cpu",
                    callback: EpochCallback | None = None) -> tuple[NetworkHandle, TrainHistory]:
    """Optimise the student on hard loss plus KL to each teacher's soft map.

    In ``cofinetune`` mode each teacher also takes an Adam step on its own hard
    loss over the batch items of its class; in ``frozen`` mode teachers are
    only run in inference mode and are left untouched.
    """
    if weights.benign > 0 and benign_teacher is None:
        raise ConfigurationError("loss weights need a benign teacher, none given")
    if weights.malignant > 0 and malignant_teacher is None:
        raise ConfigurationError("loss weights need a malignant teacher, none given")
    if not samples:
        raise ConfigurationError("no training samples")
    teachers = {"benign": benign_teacher, "malignant": malignant_teacher}
    for t in teachers.values():
        if t is not None:
            t.net.to(device)

    def loss_fn(net: GraphNet, batch: SegBatch) -> dict:
        s = torch.sigmoid(net(batch.images))
        b = _teacher_probs(benign_teacher, batch.images) if weights.benign > 0 else None
        m = _teacher_probs(malignant_teacher, batch.images) if weights.malignant > 0 else None
        return total_loss_terms(PredictionBundle(s, batch.masks, b, m), weights, config.temperature)

    after_step = None
    if config.teacher_mode == "cofinetune":
        optimizers = {k: make_optimizer(t.net, config) for k, t in teachers.items() if t is not None}

        def after_step(batch: SegBatch) -> None:
            for cls, opt in optimizers.items():
                idx = [i for i, lab in enumerate(batch.labels) if lab == cls]
                if not idx:
                    continue
                net = teachers[cls].net
                net.train()
                opt.zero_grad()
                own = SegBatch(batch.images[idx], batch.masks[idx], [cls] * len(idx))
                _hard_loss(net, own)["total"].backward()
                opt.step()
                net.eval()

    history = _fit(student, samples, config, loss_fn, after_step, val=val, device=device,
                   callback=callback)
    student.meta["loss_weights"] = list(weights.as_tuple())
    return student, history


def evaluate(net, samples: Sequence[SegSample], resolution: int | None = None, batch_size: int = 8,
             threshold: float = 0.5, device: str = "cpu") -> MetricsReport:
    """Inference-mode per-image metrics, averaged without weighting."""
    if not samples:
        raise ConfigurationError("cannot evaluate on an empty set")
    module = net.net if isinstance(net, NetworkHandle) else net
    was_training = module.training
    module.eval()
    reports = []
    try:
        with torch.no_grad():
            for start in range(0, len(samples), batch_size):
                batch = SegBatch.from_samples(samples[start:start + batch_size])
                images, masks = batch.images, batch.masks
                if resolution is not None and images.shape[-1] != resolution:
                    images = F.interpolate(images, size=(resolution, resolution), mode="bilinear",
                                           align_corners=False)
                    masks = F.interpolate(masks, size=(resolution, resolution), mode="nearest")
                probs = torch.sigmoid(module(images.to(device))).cpu()
                reports += batch_metrics(probs, masks, threshold)
    finally:
        module.train(was_training)
    return mean_report(reports)
