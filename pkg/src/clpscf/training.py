"""Two-stage training: ID-balanced contrastive pretraining, then ArcFace
fine-tuning of the whole network, both with cosine-annealed Adam."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .dataio import LabelSpace
from .losses import ArcFaceParams, arcface_loss, cl_meta_loss
from .model import ModelCheckpoint, ModelConfig, clip_tensors, config_hash, init_model

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PretrainConfig:
    per_id: int = 6
    learning_rate: float = 0.0005
    epochs: int = 100
    tau: float = 0.05
    seed: int = 0
    optimizer: str = "adam"
    lr_schedule: str = "cosine_annealing"

    def __post_init__(self):
        if self.per_id < 2:
            raise ValueError("per_id must be >= 2 so every anchor has a positive")
        if self.epochs < 0 or self.learning_rate <= 0 or self.tau <= 0:
            raise ValueError("invalid pretraining hyperparameters")
        if self.optimizer != "adam" or self.lr_schedule != "cosine_annealing":
            raise ValueError("only adam with cosine_annealing is supported")


@dataclass(frozen=True)
class FinetuneConfig:
    batch_size: int = 128
    learning_rate: float = 0.0001
    epochs: int = 300
    margin: float = 1.0
    scale: float = 30.0
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0 or self.learning_rate <= 0:
            raise ValueError("invalid fine-tuning hyperparameters")
        if not 0.0 <= self.margin < math.pi or self.scale <= 0:
            raise ValueError("invalid ArcFace margin/scale")


class TrainingDiverged(RuntimeError):
    pass


def set_deterministic(enabled: bool = True) -> None:
    torch.use_deterministic_algorithms(enabled)


def cosine_annealing_lr(step: int, total_steps: int, lr_max: float, lr_min: float = 0.0) -> float:
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step == 0:
        return lr_max
    if step == total_steps:
        return lr_min
    lr = lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))
    return min(max(lr, lr_min), lr_max)


def sample_per_id_batch(index: dict, per_id: int, rng: np.random.Generator) -> list:
    """Draw ``per_id`` items from every class and shuffle.

    Classes with fewer than ``per_id`` items are sampled with replacement.
    Returns a list of ``(item, class)`` pairs of length ``len(index) * per_id``.
    """
    if not index:
        raise ValueError("no classes to sample from")
    if per_id < 2:
        raise ValueError("per_id must be >= 2")
    batch = []
    for cls in sorted(index):
        items = index[cls]
        if len(items) == 0:
            raise ValueError(f"class {cls} has no items")
        picks = rng.choice(len(items), size=per_id, replace=len(items) < per_id)
        batch.extend((items[i], cls) for i in picks)
    order = rng.permutation(len(batch))
    return [batch[i] for i in order]


class _StepLogger:
    def __init__(self, path):
        self.records = []
        self._fh = None
        if path is not None:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(path, "a")

    def __call__(self, **rec):
        self.records.append(rec)
        if self._fh is not None:
            self._fh.write(json.dumps(rec) + "\n")

    def close(self):
        if self._fh is not None:
            self._fh.close()


def _check_train_clips(clips, label_space: LabelSpace):
    if not clips:
        raise ValueError("no training clips")
    for c in clips:
        if c.condition != "normal":
            raise ValueError(f"training clip {c.ref} is not normal")
    present = {label_space.class_of(c) for c in clips}
    missing = set(range(len(label_space))) - present
    if missing:
        raise ValueError(f"classes without training clips: {sorted(missing)}")


def _hparams_hash(*cfgs) -> str:
    return config_hash([dataclasses.asdict(c) for c in cfgs])


def pretrain(train_clips, label_space: LabelSpace, model_cfg: ModelConfig, cfg: PretrainConfig,
             *, log_path=None, checkpoint_dir=None, checkpoint_every: int = 0,
             workers: int = 1, feature_cache=None, run_config: dict | None = None
             ) -> ModelCheckpoint:
    """Stage 1: contrastive pretraining of backbone + projector.

    Each step draws ``per_id`` clips of every machine and minimises the
    contrastive loss at temperature ``cfg.tau``. There are
    ``ceil(len(train_clips) / (C * per_id))`` steps per epoch.
    """
    _check_train_clips(train_clips, label_space)
    if len(label_space) != model_cfg.num_classes:
        raise ValueError("model num_classes does not match the label space")
    torch.manual_seed(cfg.seed)
    model = init_model(model_cfg, cfg.seed)
    wave, mel = clip_tensors(train_clips, model_cfg.feature_cfg, workers, feature_cache)
    index: dict[int, list[int]] = {}
    for k, clip in enumerate(train_clips):
        index.setdefault(label_space.class_of(clip), []).append(k)

    batch_size = len(label_space) * cfg.per_id
    steps_per_epoch = math.ceil(len(train_clips) / batch_size)
    total = cfg.epochs * steps_per_epoch
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=(0.9, 0.999), eps=1e-8)
    rng = np.random.default_rng(cfg.seed)
    logger = _StepLogger(log_path)
    hp_hash = _hparams_hash(model_cfg, cfg)
    model.train()
    step = 0
    try:
        for epoch in range(cfg.epochs):
            for _ in range(steps_per_epoch):
                lr = cosine_annealing_lr(step, total, cfg.learning_rate)
                for group in opt.param_groups:
                    group["lr"] = lr
                batch = sample_per_id_batch(index, cfg.per_id, rng)
                idx = torch.tensor([i for i, _ in batch])
                labels = torch.tensor([c for _, c in batch])
                z = model.embed(wave[idx], mel[idx])
                loss = cl_meta_loss(z, labels, cfg.tau)
                if not torch.isfinite(loss):
                    raise TrainingDiverged(
                        f"non-finite pretraining loss at step {step} (lr={lr:.3g}); "
                        f"batch classes={sorted(set(labels.tolist()))}, size={len(batch)}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                logger(step=step, epoch=epoch, stage="pretrain", lr=lr, loss=loss.item())
                step += 1
            if checkpoint_dir and checkpoint_every and (epoch + 1) % checkpoint_every == 0:
                ModelCheckpoint.from_model(model, "pretrained", label_space, hp_hash,
                                           run_config).save(
                    Path(checkpoint_dir) / f"pretrained_epoch{epoch + 1:04d}.ckpt")
    finally:
        logger.close()
    model.eval()
    return ModelCheckpoint.from_model(model, "pretrained", label_space, hp_hash, run_config,
                                      logger.records)


def finetune(checkpoint: ModelCheckpoint, train_clips, cfg: FinetuneConfig, *,
             label_space: LabelSpace | None = None, log_path=None, checkpoint_dir=None,
             checkpoint_every: int = 0, workers: int = 1, feature_cache=None,
             run_config: dict | None = None) -> ModelCheckpoint:
    """Stage 2: attach classifier + ArcFace weights and train every parameter.

    Batches are uniform shuffles of ``cfg.batch_size`` clips; labels are the
    clips' machine classes in the checkpoint's label space.
    """
    if checkpoint.stage != "pretrained":
        raise ValueError(f"finetune expects a pretrained checkpoint, got stage {checkpoint.stage!r}")
    if label_space is not None and label_space != checkpoint.label_space:
        raise ValueError(f"label space mismatch: checkpoint has {len(checkpoint.label_space)} "
                         f"classes, data has {len(label_space)}")
    label_space = checkpoint.label_space
    _check_train_clips(train_clips, label_space)
    torch.manual_seed(cfg.seed)
    model = checkpoint.build_model()
    model.attach_classifier(cfg.seed)
    wave, mel = clip_tensors(train_clips, model.cfg.feature_cfg, workers, feature_cache)
    labels_all = torch.tensor([label_space.class_of(c) for c in train_clips])

    n = len(train_clips)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=(0.9, 0.999), eps=1e-8)
    rng = np.random.default_rng(cfg.seed)
    logger = _StepLogger(log_path)
    hp_hash = config_hash([checkpoint.training_config_hash, dataclasses.asdict(cfg)])
    model.train()
    step = 0
    try:
        for epoch in range(cfg.epochs):
            perm = torch.from_numpy(rng.permutation(n))
            for b in range(steps_per_epoch):
                lr = cosine_annealing_lr(step, total, cfg.learning_rate)
                for group in opt.param_groups:
                    group["lr"] = lr
                idx = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                _, h = model.latent(wave[idx], mel[idx])
                params = ArcFaceParams(model.arcface.weight, cfg.margin, cfg.scale)
                loss = arcface_loss(h, labels_all[idx], params)
                if not torch.isfinite(loss):
                    raise TrainingDiverged(f"non-finite fine-tuning loss at step {step} (lr={lr:.3g})")
                opt.zero_grad()
                loss.backward()
                opt.step()
                logger(step=step, epoch=epoch, stage="finetune", lr=lr, loss=loss.item())
                step += 1
            if checkpoint_dir and checkpoint_every and (epoch + 1) % checkpoint_every == 0:
                ModelCheckpoint.from_model(model, "finetuned", label_space, hp_hash,
                                           run_config).save(
                    Path(checkpoint_dir) / f"finetuned_epoch{epoch + 1:04d}.ckpt")
    finally:
        logger.close()
    model.eval()
    return ModelCheckpoint.from_model(model, "finetuned", label_space, hp_hash, run_config,
                                      logger.records)


def training_accuracy(checkpoint: ModelCheckpoint, clips) -> float:
    """Fraction of clips whose argmax plain-cosine class is their own machine."""
    from .losses import cosine_logits

    model = checkpoint.build_model()
    wave, mel = clip_tensors(clips, model.cfg.feature_cfg)
    with torch.no_grad():
        _, h = model.latent(wave, mel)
        pred = cosine_logits(h, model.arcface.weight).argmax(dim=1)
    truth = torch.tensor([checkpoint.label_space.class_of(c) for c in clips])
    return float((pred == truth).float().mean())
