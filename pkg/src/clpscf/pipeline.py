"""Glue between the run config, data on disk and the two training stages."""

from __future__ import annotations

import dataclasses

from .config import RunConfig
from .dataio import build_label_space, scan_dataset
from .model import ModelConfig
from .scoring import evaluate
from .training import finetune, pretrain, set_deterministic


def model_config(cfg: RunConfig, num_classes: int) -> ModelConfig:
    return ModelConfig(embed_dim=cfg.model.embed_dim,
                       projector_hidden=cfg.model.projector_hidden or None,
                       latent_dim=cfg.model.latent_dim, num_classes=num_classes,
                       backbone_variant=cfg.model.backbone_variant, feature_cfg=cfg.features)


def load_splits(root, cfg: RunConfig):
    clips = scan_dataset(root, sample_rate=cfg.features.sample_rate,
                         duration=cfg.data.clip_seconds)
    train = [c for c in clips if c.split == "train"]
    test = [c for c in clips if c.split == "test"]
    return train, test


def run_two_stage(train, test, cfg: RunConfig, *, pretrained: bool = True, workers: int = 1,
                  log_dir=None):
    """Pretrain (or skip to a random init), fine-tune, evaluate.

    Returns ``(finetuned_checkpoint, report, records, pretrained_checkpoint)``.
    """
    set_deterministic(True)
    labels = build_label_space(train)
    mcfg = model_config(cfg, len(labels))
    pre_cfg = cfg.pretrain if pretrained else dataclasses.replace(cfg.pretrain, epochs=0)
    run = cfg.to_dict()
    pre = pretrain(train, labels, mcfg, pre_cfg, workers=workers, run_config=run,
                   log_path=None if log_dir is None else f"{log_dir}/pretrain.jsonl")
    fin = finetune(pre, train, cfg.finetune, label_space=labels, workers=workers, run_config=run,
                   log_path=None if log_dir is None else f"{log_dir}/finetune.jsonl")
    margin = cfg.finetune.margin if cfg.eval.score_with_margin else None
    report, records = evaluate(fin, test, labels, cfg.eval.p, scale=cfg.finetune.scale,
                               margin=margin, config_hash=cfg.hash)
    return fin, report, records, pre
