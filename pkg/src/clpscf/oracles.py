"""Scalar brute-force reference implementations.

Plain Python loops over the defining formulas, with no shared code path with
the vectorised implementations they are used to check.
"""

import math
from fractions import Fraction


def _dot(a, b):
    return sum(x * y for x, y in zip(a, b))


def _norm(a):
    return math.sqrt(_dot(a, a))


def cosine(a, b):
    return _dot(a, b) / (_norm(a) * _norm(b))


def cl_meta_loss(z, labels, tau):
    n = len(z)
    total, anchors = 0.0, 0
    for i in range(n):
        positives = [k for k in range(n) if k != i and labels[k] == labels[i]]
        if not positives:
            continue
        denom = 0.0
        for j in range(n):
            if j != i:
                denom += math.exp(cosine(z[i], z[j]) / tau)
        acc = 0.0
        for k in positives:
            acc += math.log(math.exp(cosine(z[i], z[k]) / tau) / denom)
        total += acc / len(positives)
        anchors += 1
    return -total / anchors


def arcface_loss(h, labels, weight, margin, scale):
    total = 0.0
    for row, y in zip(h, labels):
        logits = []
        for c, w in enumerate(weight):
            cos = cosine(row, w)
            if c == y:
                theta = math.acos(max(-1.0, min(1.0, cos)))
                if theta + margin <= math.pi:
                    logits.append(scale * math.cos(theta + margin))
                else:
                    logits.append(scale * (cos - margin * math.sin(margin)))
            else:
                logits.append(scale * cos)
        total += -math.log(math.exp(logits[y]) / sum(math.exp(v) for v in logits))
    return total / len(h)


def softmax_nll(logits, target):
    return -math.log(math.exp(logits[target]) / sum(math.exp(v) for v in logits))


def pairwise_auc(normal_scores, anomalous_scores) -> Fraction:
    """Exact Mann-Whitney AUC by enumerating every (anomalous, normal) pair."""
    wins = Fraction(0)
    for a in anomalous_scores:
        for n in normal_scores:
            if a > n:
                wins += 1
            elif a == n:
                wins += Fraction(1, 2)
    return wins / (len(anomalous_scores) * len(normal_scores))


def threshold_pauc(normal_scores, anomalous_scores, p):
    """Partial AUC over FPR in [0, p] divided by p.

    Enumerates every distinct score as a threshold (flag anomalous when
    score >= t), counts FPR/TPR directly at each, and integrates the resulting
    ROC polyline with trapezoids, interpolating linearly at FPR = p.
    """
    thresholds = sorted(set(normal_scores) | set(anomalous_scores), reverse=True)
    nn, na = len(normal_scores), len(anomalous_scores)
    points = [(0.0, 0.0)]
    for t in thresholds:
        fpr = sum(1 for s in normal_scores if s >= t) / nn
        tpr = sum(1 for s in anomalous_scores if s >= t) / na
        points.append((fpr, tpr))
    area = 0.0
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        if x0 >= p:
            break
        if x1 > p:
            y1 = y0 + (y1 - y0) * (p - x0) / (x1 - x0)
            x1 = p
        area += (x1 - x0) * (y0 + y1) / 2
    return area / p
