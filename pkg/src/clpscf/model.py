"""Backbone, projector and classifier head; checkpoints for both stages.

Stage 1 (pretraining) uses backbone + projector and emits embeddings ``z``.
Stage 2 (fine-tuning) adds a classifier trunk producing latent features ``h``
and an ArcFace class-weight matrix.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from ._container import read_container, write_container
from .dataio import LabelSpace
from .features import FeatureConfig, batch_log_mel, num_frames

CHECKPOINT_FORMAT = "checkpoint-v1"
STAGES = ("pretrained", "finetuned")
BACKBONES = ("stgram_mfn", "toy_cnn")
FEATURE_WIDTH = {"stgram_mfn": 128, "toy_cnn": 64}


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 128
    projector_hidden: int | None = None  # None: backbone feature width
    latent_dim: int = 128
    num_classes: int = 41
    backbone_variant: str = "stgram_mfn"
    feature_cfg: FeatureConfig = field(default_factory=FeatureConfig)

    def __post_init__(self):
        if self.embed_dim < 2 or self.latent_dim < 2:
            raise ValueError("embed_dim and latent_dim must be >= 2")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.backbone_variant not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone_variant!r}")
        if isinstance(self.feature_cfg, dict):
            object.__setattr__(self, "feature_cfg", FeatureConfig(**self.feature_cfg))

    @property
    def feature_width(self) -> int:
        return FEATURE_WIDTH[self.backbone_variant]

    @property
    def hidden(self) -> int:
        return self.projector_hidden or self.feature_width

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# --------------------------------------------------------------------------- backbone parts

class TGramNet(nn.Module):
    """Learned temporal feature: strided conv over the waveform, then 3
    shape-preserving conv blocks. Output (N, mel_bins, frames) matches log-Mel."""

    def __init__(self, cfg: FeatureConfig, num_blocks: int = 3):
        super().__init__()
        m = cfg.mel_bins
        self.frontend = nn.Conv1d(1, m, kernel_size=cfg.n_fft, stride=cfg.hop, bias=False)
        self.blocks = nn.Sequential(*[
            nn.Sequential(nn.Conv1d(m, m, 3, padding=1, bias=False),
                          nn.GroupNorm(1, m),
                          nn.LeakyReLU(0.2))
            for _ in range(num_blocks)
        ])

    def forward(self, wave):
        return self.blocks(self.frontend(wave.unsqueeze(1)))


def _conv_bn(cin, cout, k=3, s=1, groups=1, act=True):
    layers = [nn.Conv2d(cin, cout, k, s, padding=k // 2, groups=groups, bias=False),
              nn.BatchNorm2d(cout)]
    if act:
        layers.append(nn.PReLU(cout))
    return nn.Sequential(*layers)


class Bottleneck(nn.Module):
    def __init__(self, cin, cout, stride, expansion):
        super().__init__()
        hidden = cin * expansion
        self.residual = stride == 1 and cin == cout
        self.body = nn.Sequential(
            _conv_bn(cin, hidden, 1),
            _conv_bn(hidden, hidden, 3, stride, groups=hidden),
            _conv_bn(hidden, cout, 1, act=False),
        )

    def forward(self, x):
        out = self.body(x)
        return x + out if self.residual else out


class MobileFaceNet(nn.Module):
    # (expansion, out_channels, repeats, first stride)
    SETTINGS = ((2, 64, 3, 2), (4, 128, 1, 2), (2, 128, 4, 1), (4, 128, 1, 2), (2, 128, 2, 1))

    def __init__(self, in_channels=2, out_dim=128):
        super().__init__()
        layers = [_conv_bn(in_channels, 64, 3, 2), _conv_bn(64, 64, 3, 1, groups=64)]
        cin = 64
        for t, c, n, s in self.SETTINGS:
            for i in range(n):
                layers.append(Bottleneck(cin, c, s if i == 0 else 1, t))
                cin = c
        layers.append(_conv_bn(cin, 512, 1))
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.embed = nn.Sequential(nn.Linear(512, out_dim, bias=False), nn.BatchNorm1d(out_dim))

    def forward(self, x):
        return self.embed(self.pool(self.features(x)).flatten(1))


class ToyCNN(nn.Module):
    """Four conv layers over the 2-channel input, global average pool to 64."""

    CHANNELS = (16, 32, 64, 64)
    STRIDES = (2, 2, 2, 1)

    def __init__(self, in_channels=2):
        super().__init__()
        layers = []
        cin = in_channels
        for cout, s in zip(self.CHANNELS, self.STRIDES):
            layers += [nn.Conv2d(cin, cout, 3, s, padding=1, bias=False),
                       nn.BatchNorm2d(cout), nn.ReLU()]
            cin = cout
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)

    def forward(self, x):
        return self.pool(self.features(x)).flatten(1)


class Backbone(nn.Module):
    """Stacks log-Mel and the learned temporal map as 2 channels, then encodes."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.tgram = TGramNet(cfg.feature_cfg)
        if cfg.backbone_variant == "stgram_mfn":
            self.encoder = MobileFaceNet(2, cfg.feature_width)
        else:
            self.encoder = ToyCNN(2)

    def forward(self, wave, logmel):
        x = torch.stack([logmel, self.tgram(wave)], dim=1)
        return self.encoder(x)


class ArcFaceHead(nn.Module):
    def __init__(self, num_classes, latent_dim):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(num_classes, latent_dim))


class CLPSCFNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(cfg)
        self.projector = nn.Sequential(nn.Linear(cfg.feature_width, cfg.hidden), nn.ReLU(),
                                       nn.Linear(cfg.hidden, cfg.embed_dim))
        self.classifier = None
        self.arcface = None

    @property
    def has_classifier(self) -> bool:
        return self.classifier is not None

    def attach_classifier(self, seed: int) -> None:
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        try:
            self.classifier = nn.Sequential(nn.Linear(self.cfg.embed_dim, self.cfg.latent_dim),
                                            nn.LeakyReLU(0.2))
            self.arcface = ArcFaceHead(self.cfg.num_classes, self.cfg.latent_dim)
        finally:
            torch.random.set_rng_state(gen_state)

    def embed(self, wave, logmel):
        return self.projector(self.backbone(wave, logmel))

    def latent(self, wave, logmel):
        if not self.has_classifier:
            raise RuntimeError("classifier head missing: model is a stage-1 (pretrained) model")
        z = self.embed(wave, logmel)
        return z, self.classifier(z)


def init_model(cfg: ModelConfig, seed: int) -> CLPSCFNet:
    """Stage-1 model (backbone + projector), deterministic in ``seed``."""
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        return CLPSCFNet(cfg)
    finally:
        torch.random.set_rng_state(gen_state)


def parameter_groups(model: nn.Module) -> dict[str, int]:
    groups: dict[str, int] = {}
    for name, p in model.named_parameters():
        top = name.split(".", 1)[0]
        groups[top] = groups.get(top, 0) + p.numel()
    return groups


# --------------------------------------------------------------------------- forward helpers

def clip_tensors(clips, cfg: FeatureConfig, workers: int = 1, cache=None):
    """(wave, logmel) float32 tensors for a batch of equal-length clips."""
    if not clips:
        raise ValueError("empty clip batch")
    lengths = {len(c.samples) for c in clips}
    if len(lengths) != 1:
        raise ValueError(f"clips in a batch must share one length, got {sorted(lengths)}")
    num_frames(lengths.pop(), cfg)
    wave = torch.from_numpy(np.stack([c.samples for c in clips]).astype(np.float32))
    mel = torch.from_numpy(batch_log_mel(clips, cfg, workers, cache).astype(np.float32))
    return wave, mel


def _check_finite(model: nn.Module) -> None:
    for name, p in model.named_parameters():
        if not torch.isfinite(p).all():
            raise ValueError(f"non-finite values in parameter {name}")


@torch.no_grad()
def forward_embed(model: CLPSCFNet, clips) -> np.ndarray:
    """Eval-mode projector outputs ``z`` for ``clips``, shape (N, embed_dim)."""
    _check_finite(model)
    wave, mel = clip_tensors(clips, model.cfg.feature_cfg)
    model.eval()
    return model.embed(wave, mel).numpy()


@torch.no_grad()
def forward_latent(model: CLPSCFNet, clips) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode ``(z, h)`` for ``clips``; requires a stage-2 model."""
    if not model.has_classifier:
        raise RuntimeError("classifier head missing: model is a stage-1 (pretrained) model")
    _check_finite(model)
    wave, mel = clip_tensors(clips, model.cfg.feature_cfg)
    model.eval()
    z, h = model.latent(wave, mel)
    return z.numpy(), h.numpy()


# --------------------------------------------------------------------------- checkpoints

@dataclass
class ModelCheckpoint:
    stage: str
    state: dict[str, np.ndarray]
    model_config: ModelConfig
    label_space: LabelSpace
    training_config_hash: str = ""
    run_config: dict = field(default_factory=dict)
    # per-step training log; not serialized
    history: list = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if len(self.label_space) != self.model_config.num_classes:
            raise ValueError("label space size does not match num_classes")
        has_head = any(k.startswith("arcface.") for k in self.state)
        if self.stage == "finetuned" and not has_head:
            raise ValueError("finetuned checkpoint lacks classifier parameters")

    @classmethod
    def from_model(cls, model: CLPSCFNet, stage: str, label_space: LabelSpace,
                   training_config_hash: str = "", run_config: dict | None = None,
                   history=None) -> "ModelCheckpoint":
        state = {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}
        return cls(stage, state, model.cfg, label_space, training_config_hash,
                   dict(run_config or {}), list(history or []))

    def build_model(self) -> CLPSCFNet:
        model = CLPSCFNet(self.model_config)
        if self.stage == "finetuned":
            model.attach_classifier(0)
        model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in self.state.items()})
        model.eval()
        return model

    def groups(self) -> set[str]:
        return {k.split(".", 1)[0] for k in self.state}

    def digest(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.state):
            h.update(k.encode())
            h.update(self.state[k].tobytes())
        return h.hexdigest()

    def save(self, path) -> Path:
        meta = {"stage": self.stage, "model_config": self.model_config.to_dict(),
                "label_space": self.label_space.to_json(),
                "training_config_hash": self.training_config_hash,
                "run_config": self.run_config}
        write_container(path, CHECKPOINT_FORMAT, meta, self.state)
        return Path(path)

    @classmethod
    def load(cls, path) -> "ModelCheckpoint":
        meta, arrays = read_container(path, CHECKPOINT_FORMAT)
        return cls(meta["stage"], arrays, ModelConfig(**meta["model_config"]),
                   LabelSpace.from_json(meta["label_space"]),
                   meta.get("training_config_hash", ""), meta.get("run_config", {}))


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
