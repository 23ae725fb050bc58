"""Search stage (fit the mixer against a frozen teacher) and task stage
(train a fresh classifier on mixed batches), plus evaluation."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn

from mixforge import baselines
from mixforge.data import Dataset, ImageBatch
from mixforge.errors import ConfigError, DivergenceError, InputError
from mixforge.mixer import (
    MixedBatch,
    MixerConfig,
    MixingModule,
    MixStrategy,
    MixStreams,
    build_mixer,
    mix_batch,
    save_mixer,
)
from mixforge.models import ArchSpec, CAMNet, build_model, metrics_digest, save_checkpoint
from mixforge.saliency import TeacherHandle
from mixforge.seeding import derived_seed, substream

LOGGER = logging.getLogger(__name__)

SIMPLEX_TOL = 1e-6
DIVERGENCE_PATIENCE = 3
METRICS_SCHEMA = "mixforge.metrics/1"
METRICS_COLUMNS = ("epoch", "train_loss", "top1", "top5", "seconds", "tau", "lr")

BASELINE_STRATEGIES = ("simple", "mixup", "cutmix")
MIXER_STRATEGIES = {
    "transformmix": MixStrategy.FULL,
    "full": MixStrategy.FULL,
    "stn_only": MixStrategy.STN_ONLY,
    "mpn_only": MixStrategy.MPN_ONLY,
    "softmax_cam": MixStrategy.SOFTMAX_CAM,
}
# column order of the ablation table
ABLATION_STRATEGIES = ("simple", "mixup", "softmax_cam", "stn_only", "mpn_only", "transformmix")
STRATEGIES = BASELINE_STRATEGIES + tuple(MIXER_STRATEGIES)


@dataclass
class SearchConfig:
    lr: float = 5e-4
    weight_decay: float = 1e-2
    epochs: int = 100
    batch_size: int = 128
    alpha: float = 1.0
    k: int = 2
    optimizer: str = "sgd"
    momentum: float = 0.0
    strategy: str = "full"
    seed: int = 0
    cam_class: str = "label"
    steps_per_epoch: int | None = None

    def __post_init__(self):
        if self.optimizer != "sgd":
            raise ConfigError(f"only plain SGD is supported for the search stage, got {self.optimizer!r}")
        if self.batch_size < self.k:
            raise ConfigError("search batch size must be at least k")
        MixStrategy(self.strategy)


@dataclass
class TaskConfig:
    arch: str = "resnet-18"
    epochs: int = 200
    lr: float = 0.1
    decay_epochs: tuple[int, ...] = (100, 150)
    decay_factor: float = 0.1
    batch_size: int = 128
    seed: int = 0
    strategy: str = "simple"
    momentum: float = 0.9
    weight_decay: float = 5e-4
    alpha: float = 1.0
    k: int = 2
    augment: bool = True
    mix_prob: float = 1.0
    cam_class: str = "label"

    def __post_init__(self):
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise ConfigError(f"decay epochs must be strictly increasing, got {self.decay_epochs}")
        if self.decay_epochs and self.decay_epochs[-1] >= self.epochs:
            raise ConfigError(f"decay epochs must be < total epochs ({self.epochs}), got {self.decay_epochs}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; known: {', '.join(STRATEGIES)}")
        if not 0.0 <= self.mix_prob <= 1.0:
            raise ConfigError("mix_prob must lie in [0, 1]")


@dataclass
class RunMetrics:
    rows: list[dict] = field(default_factory=list)

    def add(self, **row) -> dict:
        top1, top5 = row.get("top1"), row.get("top5")
        if top1 is not None and top5 is not None and top5 < top1:
            raise InputError(f"top-5 ({top5}) below top-1 ({top1})")
        self.rows.append({c: row.get(c) for c in METRICS_COLUMNS})
        return self.rows[-1]

    @property
    def final(self) -> dict:
        return self.rows[-1] if self.rows else {}

    @property
    def final_tau(self) -> float | None:
        return self.final.get("tau")

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=METRICS_COLUMNS)
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: "" if v is None else v for k, v in row.items()})
        return path

    def summary(self) -> dict:
        return {
            "schema": METRICS_SCHEMA,
            "epochs": len(self.rows),
            "final": self.final,
            "final_tau": self.final_tau,
            "digest": metrics_digest([{k: v for k, v in r.items() if k != "seconds"} for r in self.rows]),
        }


def soft_cross_entropy(logits: torch.Tensor, soft_labels: torch.Tensor, check: bool = True) -> torch.Tensor:
    """Batch mean of -sum_c y_c log softmax(logits)_c."""
    if soft_labels.shape != logits.shape:
        raise InputError(f"labels {tuple(soft_labels.shape)} do not match logits {tuple(logits.shape)}")
    if check:
        with torch.no_grad():
            if (soft_labels.sum(dim=1) - 1).abs().max() > SIMPLEX_TOL or soft_labels.min() < -SIMPLEX_TOL:
                raise InputError("soft labels must lie on the probability simplex")
    return -(soft_labels.to(logits.dtype) * torch.log_softmax(logits, dim=1)).sum(dim=1).mean()


def search_loss(mixed: MixedBatch, teacher: TeacherHandle) -> torch.Tensor:
    return soft_cross_entropy(teacher.logits(mixed.images), mixed.labels)


def trainable_parameters(mixer: MixingModule, strategy: MixStrategy) -> list[nn.Parameter]:
    params = [mixer.log_tau]
    if strategy.learns_transforms:
        params += list(mixer.transform_net.parameters())
    if strategy.learns_masks:
        params += list(mixer.mask_net.parameters())
    return params


def make_search_optimizer(mixer: MixingModule, config: SearchConfig) -> torch.optim.Optimizer:
    return torch.optim.SGD(
        trainable_parameters(mixer, MixStrategy(config.strategy)),
        lr=config.lr,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )


@dataclass
class StepOutput:
    loss: float
    mixed: MixedBatch


def search_step(
    batch: ImageBatch,
    teacher: TeacherHandle,
    mixer: MixingModule,
    optimizer: torch.optim.Optimizer,
    alpha: float = 1.0,
    rng=None,
    strategy: MixStrategy | str = MixStrategy.FULL,
    cam_class: str = "label",
) -> StepOutput:
    """One update of the mixer against the frozen teacher.

    The update is skipped when the loss is not finite; the caller decides
    when to give up (see :class:`DivergenceGuard`).
    """
    mixer.train()
    mixed = mix_batch(batch, teacher, mixer, strategy, alpha, mixer.k, rng,
                      num_classes=teacher.num_classes, cam_class=cam_class)
    loss = search_loss(mixed, teacher)
    optimizer.zero_grad()
    if torch.isfinite(loss):
        loss.backward()
        optimizer.step()
    return StepOutput(float(loss.detach()), mixed)


MixingFn = Callable[[ImageBatch], MixedBatch]


def task_step(batch: ImageBatch, model: nn.Module, optimizer: torch.optim.Optimizer, mixing: MixingFn) -> StepOutput:
    """One update of the task network on a mixed batch; the mixer is not touched."""
    with torch.no_grad():
        mixed = mixing(batch)
    model.train()
    loss = soft_cross_entropy(model(mixed.images.detach()), mixed.labels.detach())
    optimizer.zero_grad()
    if torch.isfinite(loss):
        loss.backward()
        optimizer.step()
    return StepOutput(float(loss.detach()), mixed)


def make_mixing(
    strategy: str,
    num_classes: int,
    seed: int,
    alpha: float = 1.0,
    teacher: TeacherHandle | None = None,
    mixer: MixingModule | None = None,
    mix_prob: float = 1.0,
    cam_class: str = "label",
) -> MixingFn:
    """Batch -> MixedBatch for any task-stage strategy, with its own RNG streams."""
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}")
    gate = substream(seed, "mix/gate")
    base_rng = substream(seed, "mix/baseline")
    streams = MixStreams.from_seed(seed)

    def plain(batch: ImageBatch) -> MixedBatch:
        return MixedBatch(images=batch.images, labels=batch.one_hot(num_classes))

    if strategy == "simple":
        return plain
    if strategy in MIXER_STRATEGIES:
        if teacher is None or mixer is None:
            raise ConfigError(f"strategy {strategy!r} needs a teacher and a trained mixer")
        mixer.eval()
        for p in mixer.parameters():
            p.requires_grad_(False)
        mode = MIXER_STRATEGIES[strategy]

        def mixed(batch):
            return mix_batch(batch, teacher, mixer, mode, alpha, mixer.k, streams,
                             num_classes=num_classes, cam_class=cam_class)
    elif strategy == "mixup":
        def mixed(batch):
            return baselines.mixup(batch, alpha, base_rng, num_classes)
    else:
        def mixed(batch):
            return baselines.cutmix(batch, alpha, base_rng, num_classes)

    def fn(batch: ImageBatch) -> MixedBatch:
        if mix_prob < 1.0 and gate.random() >= mix_prob:
            return plain(batch)
        return mixed(batch)

    return fn


class DivergenceGuard:
    """Raise after ``patience`` consecutive non-finite losses, dumping diagnostics."""

    def __init__(self, patience: int = DIVERGENCE_PATIENCE, dump_dir=None, stage: str = "train"):
        self.patience = patience
        self.dump_dir = Path(dump_dir) if dump_dir else None
        self.stage = stage
        self.bad = 0

    def update(self, out: StepOutput, step: int, **context) -> None:
        if math.isfinite(out.loss):
            self.bad = 0
            return
        self.bad += 1
        LOGGER.warning("%s step %d: non-finite loss (%d in a row)", self.stage, step, self.bad)
        if self.bad < self.patience:
            return
        diag = {"stage": self.stage, "step": step, "loss": repr(out.loss), **context}
        if self.dump_dir is not None:
            self.dump_dir.mkdir(parents=True, exist_ok=True)
            torch.save({"images": out.mixed.images.detach(), "labels": out.mixed.labels.detach()},
                       self.dump_dir / "divergence_batch.pt")
            try:
                from mixforge.plotting import image_grid

                image_grid(out.mixed.images.detach()[:16], self.dump_dir / "divergence_grid.png")
            except Exception as exc:  # diagnostics must not mask the real error
                LOGGER.warning("could not render divergence grid: %s", exc)
            (self.dump_dir / "divergence.json").write_text(json.dumps(diag, indent=2, default=str))
            diag["dump_dir"] = str(self.dump_dir)
        raise DivergenceError(f"{self.stage}: loss non-finite for {self.patience} consecutive steps", diag)


def train_mixer(
    dataset: Dataset,
    teacher: TeacherHandle,
    config: SearchConfig,
    mixer_config: MixerConfig | None = None,
    mixer: MixingModule | None = None,
    out_dir=None,
    extra_meta: dict | None = None,
) -> tuple[MixingModule, RunMetrics]:
    """Run the search stage; writes ``mixer.pt``/``mixer.json``/``metrics.csv`` when ``out_dir`` is set."""
    if mixer is None:
        mixer_config = mixer_config or MixerConfig(k=config.k, image_size=dataset.image_size)
        if mixer_config.k != config.k:
            raise ConfigError(f"mixer k={mixer_config.k} does not match search k={config.k}")
        mixer = build_mixer(mixer_config, derived_seed(config.seed, "init/mixer"))
    strategy = MixStrategy(config.strategy)
    optimizer = make_search_optimizer(mixer, config)
    shuffle = substream(config.seed, "search/shuffle")
    streams = MixStreams.from_seed(config.seed, "search")
    guard = DivergenceGuard(dump_dir=Path(out_dir) / "diagnostics" if out_dir else None, stage="search")
    metrics = RunMetrics()
    step = 0
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        losses = []
        for i, batch in enumerate(dataset.batches(config.batch_size, shuffle, min_size=config.k)):
            if config.steps_per_epoch is not None and i >= config.steps_per_epoch:
                break
            out = search_step(batch, teacher, mixer, optimizer, config.alpha, streams, strategy, config.cam_class)
            step += 1
            guard.update(out, step, epoch=epoch, tau=float(mixer.tau.detach()))
            losses.append(out.loss)
        row = metrics.add(epoch=epoch, train_loss=float(np.mean(losses)) if losses else None,
                          seconds=time.perf_counter() - start, tau=float(mixer.tau.detach()), lr=config.lr)
        LOGGER.info("search epoch %d loss %.4f tau %.4f", epoch, row["train_loss"] or float("nan"), row["tau"])

    if out_dir is not None:
        out_dir = Path(out_dir)
        meta = {"alpha": config.alpha, "strategy": strategy.value, "source_dataset": dataset.spec.name,
                "teacher": teacher.name, "image_size": list(mixer.config.image_size),
                "search": asdict(config), "metrics_digest": metrics.summary()["digest"]}
        meta.update(extra_meta or {})
        save_mixer(mixer, out_dir / "mixer.pt", **meta)
        metrics.write_csv(out_dir / "metrics.csv")
    return mixer, metrics


def evaluate(model: nn.Module, dataset: Dataset, batch_size: int = 256, top5: bool | None = None) -> dict:
    """Top-1 (and top-5) accuracy in percent. Ties rank the lower class index first."""
    want5 = dataset.num_classes >= 5 if top5 is None else top5
    if want5 and dataset.num_classes < 5:
        raise ConfigError(f"top-5 accuracy needs at least 5 classes, dataset has {dataset.num_classes}")
    model.eval()
    hit1 = hit5 = total = 0
    with torch.no_grad():
        for batch in dataset.batches(batch_size):
            logits = model(batch.images)
            ranked = torch.sort(logits, dim=1, descending=True, stable=True).indices
            target = batch.labels[:, None]
            hit1 += int((ranked[:, :1] == target).any(dim=1).sum())
            if want5:
                hit5 += int((ranked[:, :5] == target).any(dim=1).sum())
            total += len(batch)
    if total == 0:
        raise InputError("cannot evaluate on an empty dataset")
    return {"top1": 100.0 * hit1 / total, "top5": 100.0 * hit5 / total if want5 else None}


def make_task_optimizer(model: nn.Module, config: TaskConfig):
    opt = torch.optim.SGD(model.parameters(), lr=config.lr, momentum=config.momentum,
                          weight_decay=config.weight_decay)
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones=list(config.decay_epochs),
                                                 gamma=config.decay_factor)
    return opt, sched


def train_task(
    train_set: Dataset,
    test_set: Dataset | None,
    config: TaskConfig,
    teacher: TeacherHandle | None = None,
    mixer: MixingModule | None = None,
    model: CAMNet | None = None,
    out_dir=None,
    extra_meta: dict | None = None,
) -> tuple[CAMNet, RunMetrics]:
    """Train a fresh classifier with the configured mixing strategy."""
    if mixer is not None and mixer.k != config.k:
        raise ConfigError(f"mixer checkpoint has k={mixer.k}, task config asks for k={config.k}")
    if model is None:
        spec = ArchSpec(config.arch, train_set.channels, train_set.image_size, train_set.num_classes)
        model = build_model(spec, derived_seed(config.seed, "init/task"))
    elif model.fc.out_features != train_set.num_classes:
        raise ConfigError("model head does not match the dataset's class count")
    mixing = make_mixing(config.strategy, train_set.num_classes, config.seed, config.alpha, teacher, mixer,
                         config.mix_prob, config.cam_class)
    optimizer, scheduler = make_task_optimizer(model, config)
    shuffle = substream(config.seed, "task/shuffle")
    guard = DivergenceGuard(dump_dir=Path(out_dir) / "diagnostics" if out_dir else None, stage="task")
    metrics = RunMetrics()
    step = 0
    min_size = config.k if config.strategy != "simple" else 1
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        lr = optimizer.param_groups[0]["lr"]
        losses = []
        for batch in train_set.batches(config.batch_size, shuffle, augment=config.augment, min_size=min_size):
            out = task_step(batch, model, optimizer, mixing)
            step += 1
            guard.update(out, step, epoch=epoch)
            losses.append(out.loss)
        scheduler.step()
        acc = evaluate(model, test_set) if test_set is not None else {"top1": None, "top5": None}
        row = metrics.add(epoch=epoch, train_loss=float(np.mean(losses)) if losses else None,
                          top1=acc["top1"], top5=acc["top5"], seconds=time.perf_counter() - start,
                          tau=float(mixer.tau.detach()) if mixer is not None else None, lr=lr)
        LOGGER.info("task[%s] epoch %d loss %.4f top1 %s", config.strategy, epoch,
                    row["train_loss"] or float("nan"), row["top1"])

    if out_dir is not None:
        out_dir = Path(out_dir)
        meta = {"dataset": train_set.spec.name, "seed": config.seed, "epoch": config.epochs,
                "strategy": config.strategy, "metrics_digest": metrics.summary()["digest"]}
        meta.update(extra_meta or {})
        save_checkpoint(model, out_dir / "model.pt", meta)
        metrics.write_csv(out_dir / "metrics.csv")
    return model, metrics
