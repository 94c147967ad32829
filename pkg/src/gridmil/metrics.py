"""Classification metrics: accuracy/recall/F1, tie-aware AUC, the KNN
embedding probe, attention-skew statistics, and the rank-percentile transform.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class MetricError(ValueError):
    pass


@dataclass
class MetricsReport:
    accuracy: float
    auc: float
    recall: dict[int, float]
    f1: dict[int, float]
    n_samples: int
    mean_loss: float | None = None

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "auc": self.auc,
            "recall": {str(k): v for k, v in self.recall.items()},
            "f1": {str(k): v for k, v in self.f1.items()},
            "n_samples": self.n_samples,
            "mean_loss": self.mean_loss,
        }


def accuracy_recall_f1(preds, labels, positive_class: int = 1) -> dict:
    """Standard confusion-matrix metrics for one positive class.
    F1 is defined as 0 when precision + recall is 0."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.size == 0 or preds.shape != labels.shape:
        raise MetricError("need equal-length, non-empty predictions and labels")
    tp = int(np.sum((preds == positive_class) & (labels == positive_class)))
    fp = int(np.sum((preds == positive_class) & (labels != positive_class)))
    fn = int(np.sum((preds != positive_class) & (labels == positive_class)))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {
        "accuracy": float(np.mean(preds == labels)),
        "precision": precision,
        "recall": recall,
        "f1": f1,
    }


def auc_binary(scores, labels) -> float:
    """Mann-Whitney statistic: (concordant + 0.5 * tied) / (pos * neg).

    Computed from integer pair counts over sorted score groups, so it matches
    brute-force O(n^2) pair counting exactly, ties included.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos_total = int(np.sum(labels == 1))
    neg_total = int(np.sum(labels == 0))
    if pos_total == 0 or neg_total == 0:
        raise MetricError("AUC undefined: need both classes present")
    order = np.argsort(scores, kind="stable")
    concordant = 0
    tied = 0
    neg_below = 0
    i = 0
    s = scores[order]
    lab = labels[order]
    n = len(s)
    while i < n:
        j = i
        while j < n and s[j] == s[i]:
            j += 1
        group_pos = int(np.sum(lab[i:j] == 1))
        group_neg = (j - i) - group_pos
        concordant += group_pos * neg_below
        tied += group_pos * group_neg
        neg_below += group_neg
        i = j
    return (concordant + 0.5 * tied) / (pos_total * neg_total)


def auc_macro(score_matrix, labels) -> float:
    """Unweighted mean of one-vs-rest binary AUCs."""
    scores = np.asarray(score_matrix, dtype=np.float64)
    labels = np.asarray(labels)
    num_classes = scores.shape[1]
    present = set(int(c) for c in np.unique(labels))
    if present != set(range(num_classes)):
        raise MetricError(f"macro AUC needs every class present, got {sorted(present)}")
    aucs = [auc_binary(scores[:, c], (labels == c).astype(int)) for c in range(num_classes)]
    return float(np.mean(aucs))


def auc_from_probs(probs: np.ndarray, labels) -> float:
    """Binary AUC from class-1 probabilities, macro AUC for more classes."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape[1] == 2:
        return auc_binary(probs[:, 1], labels)
    return auc_macro(probs, labels)


def knn_predict(train_x, train_y, test_x, k: int = 5) -> np.ndarray:
    """Euclidean top-k majority vote. Vote ties go to the smaller class index;
    distance ties to the lower training-sample index (stable sort)."""
    train_x = np.asarray(train_x, dtype=np.float64)
    test_x = np.asarray(test_x, dtype=np.float64)
    train_y = np.asarray(train_y)
    if k > train_x.shape[0]:
        raise MetricError(f"k={k} exceeds training size {train_x.shape[0]}")
    if not (np.all(np.isfinite(train_x)) and np.all(np.isfinite(test_x))):
        raise MetricError("non-finite embeddings")
    preds = np.empty(test_x.shape[0], dtype=train_y.dtype)
    for i in range(test_x.shape[0]):
        d2 = np.sum((train_x - test_x[i]) ** 2, axis=1)
        nearest = np.argsort(d2, kind="stable")[:k]
        votes = np.bincount(train_y[nearest].astype(int))
        preds[i] = int(np.argmax(votes))  # argmax takes the smaller index on ties
    return preds


def knn_probe(train_x, train_y, test_x, test_y, k: int = 5, positive_class: int = 1) -> dict:
    """Training-free instance probe: fit nothing, vote among the k nearest
    reference embeddings, report accuracy/recall/F1 for the positive class."""
    preds = knn_predict(train_x, train_y, test_x, k=k)
    return accuracy_recall_f1(preds, np.asarray(test_y).astype(int), positive_class=positive_class)


@dataclass
class AttentionStats:
    maxima: np.ndarray  # per-bag maximum attention weight
    threshold: float
    share_above: float  # fraction of bags whose max reaches the threshold
    hist_counts: np.ndarray
    hist_edges: np.ndarray
    alignment: dict | None = None  # optional instance-label agreement columns


def attention_stats(
    attention_vectors: list[np.ndarray],
    threshold: float = 0.5,
    bins: int = 20,
    instance_labels: list[np.ndarray] | None = None,
) -> AttentionStats:
    """Per-bag attention maxima, thresholded share, and a histogram over (0, 1].

    Every vector must lie on the simplex. When instance labels are supplied,
    alignment columns report how often the top-1 / top-5 / highly attended
    instances are truly positive (positive bags only).
    """
    maxima = []
    for v in attention_vectors:
        v = np.asarray(v, dtype=np.float64)
        if abs(v.sum() - 1.0) > 1e-6:
            raise MetricError(f"attention vector sums to {v.sum():.8f}, not 1")
        maxima.append(float(v.max()))
    maxima = np.array(maxima)
    counts, edges = np.histogram(maxima, bins=bins, range=(0.0, 1.0))
    share = float(np.mean(maxima >= threshold)) if maxima.size else 0.0

    alignment = None
    if instance_labels is not None:
        top1_hits, top5_hits, high_hits, high_total, bags = 0, 0, 0, 0, 0
        for v, labs in zip(attention_vectors, instance_labels):
            labs = np.asarray(labs, dtype=bool)
            if not labs.any():
                continue  # negative bags carry no positive instances to align with
            v = np.asarray(v, dtype=np.float64)[: labs.size]
            order = np.argsort(-v, kind="stable")
            bags += 1
            top1_hits += int(labs[order[0]])
            top5_hits += int(labs[order[:5]].any())
            high = v >= threshold
            high_hits += int(np.sum(labs & high))
            high_total += int(np.sum(high))
        alignment = {
            "positive_bags": bags,
            "top1_alignment": top1_hits / bags if bags else 0.0,
            "top5_alignment": top5_hits / bags if bags else 0.0,
            "high_attention_alignment": high_hits / high_total if high_total else 0.0,
        }
    return AttentionStats(
        maxima=maxima,
        threshold=threshold,
        share_above=share,
        hist_counts=counts,
        hist_edges=edges,
        alignment=alignment,
    )


def percentile_transform(scores) -> np.ndarray:
    """Rank-based rescaling to [0, 100]: average ascending rank / n * 100.

    Provided to demonstrate how rank transforms uniformize any score
    distribution; diagnostics elsewhere always use raw weights.
    """
    s = np.asarray(scores, dtype=np.float64)
    n = s.size
    if n == 0:
        raise MetricError("need at least one score")
    order = np.argsort(s, kind="stable")
    ranks = np.empty(n)
    i = 0
    while i < n:
        j = i
        while j < n and s[order[j]] == s[order[i]]:
            j += 1
        avg_rank = (i + 1 + j) / 2.0  # mean of 1-based ranks i+1 .. j
        ranks[order[i:j]] = avg_rank
        i = j
    return ranks / n * 100.0
