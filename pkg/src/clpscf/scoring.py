"""Anomaly scoring from a fine-tuned model, AUC / pAUC / mAUC evaluation, and
latent-feature export for t-SNE plots."""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch

from .losses import ArcFaceParams, arcface_logits, cosine_logits
from .model import ModelCheckpoint, clip_tensors

log = logging.getLogger(__name__)

SCORE_COLUMNS = ("clip", "machine_type", "machine_id", "truth", "score", "predicted_id")


@dataclass(frozen=True)
class AnomalyRecord:
    clip_ref: str
    machine_type: str
    machine_id: int
    score: float
    truth: str
    predicted_id: int = -1

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError(f"non-finite score for {self.clip_ref}")
        if self.truth not in ("normal", "anomalous"):
            raise ValueError(f"truth must be normal or anomalous, got {self.truth!r}")


@dataclass
class EvalReport:
    per_id_auc: dict
    per_id_pauc: dict
    per_type: dict  # type -> {"auc", "pauc", "mauc"}
    averages: dict  # {"auc", "pauc", "mauc"}
    p: float
    config_hash: str = ""
    excluded: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "p": self.p,
            "config_hash": self.config_hash,
            "per_id_auc": {f"{t}/id_{i:02d}": v for (t, i), v in sorted(self.per_id_auc.items())},
            "per_id_pauc": {f"{t}/id_{i:02d}": v for (t, i), v in sorted(self.per_id_pauc.items())},
            "per_type": self.per_type,
            "averages": self.averages,
            "excluded": [f"{t}/id_{i:02d}" for t, i in self.excluded],
        }

    def table(self) -> str:
        types = sorted(self.per_type)
        width = max([len("Average")] + [len(t) for t in types]) + 2
        lines = [f"{'':{width}}{'AUC (%)':>10}{'pAUC (%)':>10}{'mAUC (%)':>10}"]
        for t in types + ["Average"]:
            row = self.averages if t == "Average" else self.per_type[t]
            lines.append(f"{t:{width}}{100 * row['auc']:10.2f}{100 * row['pauc']:10.2f}"
                         f"{100 * row['mauc']:10.2f}")
        return "\n".join(lines)


# --------------------------------------------------------------------------- metrics

def _split(records):
    normal = [r.score for r in records if r.truth == "normal"]
    anomalous = [r.score for r in records if r.truth == "anomalous"]
    if not normal or not anomalous:
        raise ValueError("AUC undefined: need at least one normal and one anomalous record")
    return np.asarray(normal, dtype=np.float64), np.asarray(anomalous, dtype=np.float64)


def _roc_counts(normal: np.ndarray, anomalous: np.ndarray):
    """Integer (false positive, true positive) counts at each distinct
    threshold, highest first, starting from (0, 0)."""
    scores = np.concatenate([normal, anomalous])
    is_anom = np.concatenate([np.zeros(len(normal), bool), np.ones(len(anomalous), bool)])
    order = np.argsort(-scores, kind="mergesort")
    scores, is_anom = scores[order], is_anom[order]
    tp = np.cumsum(is_anom)
    fp = np.cumsum(~is_anom)
    last = np.r_[scores[1:] != scores[:-1], True]
    return np.r_[0, fp[last]].astype(int), np.r_[0, tp[last]].astype(int)


def auc(records) -> float:
    """Mann-Whitney AUC; a tied (anomalous, normal) pair counts one half."""
    normal, anomalous = _split(records)
    fp, tp = _roc_counts(normal, anomalous)
    # twice the trapezoid area in count units: sum dfp * (tp0 + tp1)
    twice = int(np.sum(np.diff(fp) * (tp[:-1] + tp[1:])))
    return twice / (2 * len(normal) * len(anomalous))


def pauc(records, p: float = 0.1) -> float:
    """ROC area over FPR in [0, p], divided by p.

    The ROC polyline is integrated exactly in rational arithmetic and
    interpolated linearly at FPR = p, so ``pauc(records, 1) == auc(records)``.
    """
    if not 0.0 < p <= 1.0:
        raise ValueError(f"p must lie in (0, 1], got {p}")
    normal, anomalous = _split(records)
    fp, tp = _roc_counts(normal, anomalous)
    nn, na = len(normal), len(anomalous)
    limit = Fraction(p) * nn  # FPR = p in false-positive count units
    area = Fraction(0)
    for x0, y0, x1, y1 in zip(fp[:-1], tp[:-1], fp[1:], tp[1:]):
        if x0 >= limit:
            break
        x0, y0, x1, y1 = int(x0), int(y0), int(x1), int(y1)
        if x1 > limit:
            y1 = y0 + (y1 - y0) * (limit - x0) / (x1 - x0)
            x1 = limit
        area += (x1 - x0) * Fraction(y0 + y1, 2)
    return float(area / (nn * na) / Fraction(p))


# --------------------------------------------------------------------------- scoring

def _require_finetuned(checkpoint: ModelCheckpoint):
    if checkpoint.stage != "finetuned":
        raise ValueError(f"expected a finetuned checkpoint, got stage {checkpoint.stage!r}")


def score_logits(model, h: torch.Tensor, claimed: torch.Tensor, scale: float,
                 margin: float | None = None) -> torch.Tensor:
    """(N, C) logits used for scoring: scaled plain cosines unless a margin is given."""
    h, weight = h.double(), model.arcface.weight.double()
    if margin is None:
        return scale * cosine_logits(h, weight)
    return arcface_logits(h, claimed, ArcFaceParams(weight, margin, scale))


def nll_scores(logits: torch.Tensor, claimed: torch.Tensor) -> torch.Tensor:
    """-log softmax(logits)[claimed] per row.

    When the claimed class has the largest logit the value is computed with
    log1p so confident normals keep distinct tiny scores instead of rounding to 0.
    """
    logits = logits.double()
    d = logits - logits.gather(1, claimed[:, None])
    others = d.scatter(1, claimed[:, None], float("-inf"))
    top = d.max(dim=1).values
    tail = torch.log1p(torch.exp(others).sum(dim=1))
    general = top + torch.log(torch.exp(d - top[:, None]).sum(dim=1))
    return torch.where(top <= 0, tail, general)


@torch.no_grad()
def score_clips(checkpoint: ModelCheckpoint, clips, claimed_classes=None, *, scale: float = 30.0,
                margin: float | None = None, batch_size: int = 64, model=None):
    """Anomaly scores and argmax classes for ``clips``.

    ``claimed_classes`` defaults to each clip's own machine class.
    """
    _require_finetuned(checkpoint)
    model = model or checkpoint.build_model()
    model.eval()
    if claimed_classes is None:
        claimed_classes = [checkpoint.label_space.class_of(c) for c in clips]
    claimed_all = torch.as_tensor(np.asarray(claimed_classes, dtype=np.int64))
    if ((claimed_all < 0) | (claimed_all >= len(checkpoint.label_space))).any():
        raise ValueError("claimed class outside the label space")
    scores, preds = [], []
    for s in range(0, len(clips), batch_size):
        chunk = clips[s:s + batch_size]
        claimed = claimed_all[s:s + batch_size]
        wave, mel = clip_tensors(chunk, model.cfg.feature_cfg)
        _, h = model.latent(wave, mel)
        logits = score_logits(model, h, claimed, scale, margin)
        scores.append(nll_scores(logits, claimed))
        preds.append(logits.argmax(dim=1))
    return torch.cat(scores).numpy(), torch.cat(preds).numpy()


def anomaly_score(checkpoint: ModelCheckpoint, clip, claimed_class: int, *, scale: float = 30.0,
                  margin: float | None = None) -> float:
    """Negative log-probability of ``claimed_class`` for one clip."""
    scores, _ = score_clips(checkpoint, [clip], [claimed_class], scale=scale, margin=margin)
    return float(scores[0])


def evaluate(checkpoint: ModelCheckpoint, test_clips, label_space=None, p: float = 0.1, *,
             scale: float = 30.0, margin: float | None = None, config_hash: str = ""):
    """Score every test clip against its own machine and aggregate metrics.

    Returns ``(report, records)``.
    """
    label_space = label_space or checkpoint.label_space
    if label_space != checkpoint.label_space:
        raise ValueError("label space does not match the checkpoint")
    for c in test_clips:
        label_space.class_of(c)
        if c.condition not in ("normal", "anomalous"):
            raise ValueError(f"test clip {c.ref} has no ground truth")
    scores, preds = score_clips(checkpoint, test_clips, scale=scale, margin=margin)
    records = [AnomalyRecord(c.ref, c.machine_type, c.machine_id, float(s), c.condition, int(k))
               for c, s, k in zip(test_clips, scores, preds)]
    return aggregate(records, p, config_hash=config_hash), records


def aggregate(records, p: float = 0.1, config_hash: str = "") -> EvalReport:
    """Per-ID AUC/pAUC, per-type mean and minimum, then means over types."""
    by_id = defaultdict(list)
    for r in records:
        by_id[(r.machine_type, r.machine_id)].append(r)
    per_id_auc, per_id_pauc, excluded = {}, {}, []
    for machine, recs in sorted(by_id.items()):
        truths = {r.truth for r in recs}
        if len(truths) < 2:
            warnings.warn(f"machine {machine} has only {truths} records; excluded from metrics")
            excluded.append(machine)
            continue
        per_id_auc[machine] = auc(recs)
        per_id_pauc[machine] = pauc(recs, p)
    if not per_id_auc:
        raise ValueError("no machine has both normal and anomalous test records")
    per_type = {}
    for t in sorted({t for t, _ in per_id_auc}):
        aucs = [v for (tt, _), v in sorted(per_id_auc.items()) if tt == t]
        paucs = [v for (tt, _), v in sorted(per_id_pauc.items()) if tt == t]
        per_type[t] = {"auc": float(np.mean(aucs)), "pauc": float(np.mean(paucs)),
                       "mauc": float(min(aucs))}
    averages = {k: float(np.mean([v[k] for v in per_type.values()])) for k in ("auc", "pauc", "mauc")}
    return EvalReport(per_id_auc, per_id_pauc, per_type, averages, p, config_hash, excluded)


# --------------------------------------------------------------------------- artifacts

def write_scores_csv(records, path, label_space=None) -> Path:
    """Score dump. ``predicted_id`` is the argmax class index; ``id_mismatch``
    flags clips whose argmax class is not their own machine."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SCORE_COLUMNS + ("id_mismatch",))
        for r in records:
            mismatch = ""
            if label_space is not None:
                mismatch = int(r.predicted_id != label_space.index_of(r.machine_type, r.machine_id))
            w.writerow([r.clip_ref, r.machine_type, r.machine_id, r.truth, repr(r.score),
                        r.predicted_id, mismatch])
    return path


def read_scores_csv(path) -> list[AnomalyRecord]:
    with open(path, newline="") as fh:
        return [AnomalyRecord(row["clip"], row["machine_type"], int(row["machine_id"]),
                              float(row["score"]), row["truth"], int(row["predicted_id"]))
                for row in csv.DictReader(fh)]


def write_report(report: EvalReport, json_path, table_path=None) -> None:
    json_path = Path(json_path)
    json_path.parent.mkdir(parents=True, exist_ok=True)
    json_path.write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
    if table_path is not None:
        Path(table_path).write_text(report.table() + "\n")


# --------------------------------------------------------------------------- latents / t-SNE

@dataclass
class LatentTable:
    clip_refs: list
    machine_types: list
    machine_ids: list
    truths: list
    latents: np.ndarray  # (N, latent_dim)

    def __len__(self):
        return len(self.clip_refs)

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["clip", "machine_type", "machine_id", "truth"]
                       + [f"h{k}" for k in range(self.latents.shape[1])])
            for k in range(len(self)):
                w.writerow([self.clip_refs[k], self.machine_types[k], self.machine_ids[k],
                            self.truths[k]] + [repr(float(v)) for v in self.latents[k]])
        return path


@torch.no_grad()
def export_latents(checkpoint: ModelCheckpoint, clips, batch_size: int = 64) -> LatentTable:
    _require_finetuned(checkpoint)
    model = checkpoint.build_model()
    rows = []
    for s in range(0, len(clips), batch_size):
        wave, mel = clip_tensors(clips[s:s + batch_size], model.cfg.feature_cfg)
        rows.append(model.latent(wave, mel)[1].numpy())
    return LatentTable([c.ref for c in clips], [c.machine_type for c in clips],
                       [c.machine_id for c in clips], [c.condition for c in clips],
                       np.concatenate(rows))


def tsne_project(latents: np.ndarray, perplexity: float = 30.0, seed: int = 0) -> np.ndarray:
    from sklearn.manifold import TSNE

    n = len(latents)
    if n < 2:
        raise ValueError("t-SNE needs at least 2 points")
    # sklearn requires perplexity < n_samples
    perplexity = min(perplexity, max(1.0, (n - 1) / 3))
    tsne = TSNE(n_components=2, perplexity=perplexity, random_state=seed, init="pca")
    return tsne.fit_transform(np.asarray(latents, dtype=np.float64))


def plot_tsne(table: LatentTable, out_dir, perplexity: float = 30.0, seed: int = 0) -> list[Path]:
    """One SVG per machine type: normal as dots, anomalous as crosses, coloured by ID."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    types = np.asarray(table.machine_types)
    for t in sorted(set(table.machine_types)):
        sel = np.flatnonzero(types == t)
        coords = tsne_project(table.latents[sel], perplexity, seed)
        fig, ax = plt.subplots(figsize=(6, 5))
        ids = sorted({table.machine_ids[k] for k in sel})
        cmap = plt.get_cmap("tab10")
        for n, mid in enumerate(ids):
            for truth, marker in (("normal", "o"), ("anomalous", "x")):
                pick = [j for j, k in enumerate(sel)
                        if table.machine_ids[k] == mid and table.truths[k] == truth]
                if pick:
                    ax.scatter(coords[pick, 0], coords[pick, 1], marker=marker, s=14,
                               color=cmap(n % 10), label=f"ID {mid:02d} {truth}")
        ax.set_title(f"t-SNE of latent features: {t}")
        ax.legend(fontsize=7, loc="best")
        path = out_dir / f"tsne_{t}.svg"
        fig.savefig(path, format="svg")
        plt.close(fig)
        written.append(path)
    return written
