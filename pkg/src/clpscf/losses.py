"""Cosine similarity, machine-ID contrastive loss and ArcFace loss (torch)."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

_SIN_EPS = 1e-14


@dataclass
class ArcFaceParams:
    weight: torch.Tensor  # (num_classes, latent_dim)
    margin: float = 1.0
    scale: float = 30.0

    def __post_init__(self):
        if not 0.0 <= self.margin < math.pi:
            raise ValueError(f"margin must lie in [0, pi), got {self.margin}")
        if self.scale <= 0:
            raise ValueError("scale must be positive")


def _as_tensor(x):
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x, dtype=np.float64))


def _as_labels(labels):
    return labels if isinstance(labels, torch.Tensor) else torch.as_tensor(np.asarray(labels))


def _normalize_rows(x: torch.Tensor, what: str) -> torch.Tensor:
    norms = x.norm(dim=-1, keepdim=True)
    if (norms == 0).any():
        raise ValueError(f"zero-norm row in {what}")
    return x / norms


def cosine_similarity(z_i, z_j) -> float:
    """Cosine of the angle between two vectors, clamped to [-1, 1]."""
    a = np.asarray(z_i, dtype=np.float64)
    b = np.asarray(z_j, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity is undefined for a zero-norm vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def similarity_matrix(z: torch.Tensor) -> torch.Tensor:
    zn = _normalize_rows(z, "embeddings")
    return (zn @ zn.T).clamp(-1.0, 1.0)


def cl_meta_loss(z, labels, tau: float = 0.05) -> torch.Tensor:
    """Contrastive loss over machine IDs.

    For every anchor ``i`` the positives are the other rows with the same label.
    Each positive's log-softmax is taken over all ``j != i`` (positives
    included), averaged over positives, then over anchors. Anchors without
    positives are dropped from the average with a warning.

    Args:
        z: (N, D) embeddings, not necessarily normalized.
        labels: (N,) integer class indices.
        tau: temperature dividing the cosine similarities.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    z = _as_tensor(z)
    labels = _as_labels(labels)
    n = z.shape[0]
    if n < 2:
        raise ValueError("contrastive loss needs at least 2 samples")
    logits = similarity_matrix(z) / tau
    self_mask = torch.eye(n, dtype=torch.bool, device=z.device)
    logits = logits.masked_fill(self_mask, float("-inf"))
    log_prob = logits - torch.logsumexp(logits, dim=1, keepdim=True)
    pos = (labels[:, None] == labels[None, :]) & ~self_mask
    n_pos = pos.sum(dim=1)
    has_pos = n_pos > 0
    if not has_pos.any():
        raise ValueError("no positive pairs in batch")
    if not has_pos.all():
        warnings.warn(f"{int((~has_pos).sum())} anchors have no positives and are skipped")
    pos_sum = torch.where(pos, log_prob, torch.zeros_like(log_prob)).sum(dim=1)
    per_anchor = pos_sum[has_pos] / n_pos[has_pos]
    return -per_anchor.mean()


def cosine_logits(h, weight) -> torch.Tensor:
    """(N, C) cosines between normalized latent rows and class-weight rows."""
    hn = _normalize_rows(_as_tensor(h), "latent features")
    wn = _normalize_rows(_as_tensor(weight), "ArcFace weight")
    return (hn @ wn.T).clamp(-1.0, 1.0)


def arcface_logits(h, labels, params: ArcFaceParams) -> torch.Tensor:
    """Scaled logits with the additive angular margin on the target class.

    Past ``theta + m > pi`` the target logit falls back to ``cos(theta) - m sin(m)``.
    """
    cos = cosine_logits(h, params.weight)
    labels = _as_labels(labels)
    m = params.margin
    sin = torch.sqrt((1.0 - cos * cos).clamp_min(_SIN_EPS))
    phi = cos * math.cos(m) - sin * math.sin(m)
    phi = torch.where(cos > math.cos(math.pi - m), phi, cos - m * math.sin(m))
    target = F.one_hot(labels.long(), cos.shape[1]).bool()
    return params.scale * torch.where(target, phi, cos)


def arcface_loss(h, labels, params: ArcFaceParams) -> torch.Tensor:
    labels_t = _as_labels(labels)
    return F.cross_entropy(arcface_logits(h, labels_t, params), labels_t.long())
