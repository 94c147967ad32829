"""Node masking and the three-term training objective.

Masking draws a fixed-count subset of patch nodes uniformly without
replacement (each node has equal marginal probability), substitutes the shared
learnable mask token, and the reconstruction loss compares original and
reconstructed features at masked positions with cosine distance, which is
invariant to per-row scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .data import DataError, PatchGraph
from .tensor import Tensor, cross_entropy, gather_rows

DEGENERATE_NORM = 1e-12


@dataclass(frozen=True)
class MaskPlan:
    masked_indices: np.ndarray  # sorted unique patch indices
    ratio: float

    def __post_init__(self):
        idx = np.asarray(self.masked_indices, dtype=np.int64)
        object.__setattr__(self, "masked_indices", idx)
        if idx.size and (np.any(np.diff(idx) <= 0) or idx[0] < 0):
            raise DataError("mask indices must be sorted, unique, and non-negative")

    @property
    def count(self) -> int:
        return int(self.masked_indices.size)


@dataclass(frozen=True)
class LossWeights:
    recon: float = 1.8
    comp: float = 0.1
    corr: float = 0.1

    def __post_init__(self):
        for name, v in (("recon", self.recon), ("comp", self.comp), ("corr", self.corr)):
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {name} must be finite and non-negative, got {v}")


@dataclass
class LossBreakdown:
    recon: float
    comp: float
    corr: float
    total: float


def sample_mask(n: int, ratio: float, rng: np.random.Generator) -> MaskPlan:
    """Exactly round(ratio * n) indices, drawn uniformly without replacement.

    round is half-up, so n=1 with ratio 0.7 masks the single node.
    """
    if n < 1:
        raise ValueError("need at least one node")
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"mask ratio must lie in [0, 1], got {ratio}")
    k = int(math.floor(ratio * n + 0.5))
    idx = np.sort(rng.choice(n, size=k, replace=False)) if k else np.empty(0, dtype=np.int64)
    return MaskPlan(masked_indices=idx, ratio=ratio)


def apply_mask(graph: PatchGraph, plan: MaskPlan, mask_token: np.ndarray) -> PatchGraph:
    """Masked copy: feature rows at masked indices become the mask token.
    Coordinates, edges, and labels are untouched; the input is not modified."""
    n = graph.bag.num_patches
    if plan.masked_indices.size and plan.masked_indices[-1] >= n:
        raise DataError("mask plan references a node outside the patch range")
    features = np.array(graph.bag.features, copy=True)
    features[plan.masked_indices] = np.asarray(mask_token, dtype=np.float64)
    bag = replace(graph.bag, features=features)
    return replace(graph, bag=bag)


def recon_loss(original: np.ndarray, reconstructed: Tensor, plan: MaskPlan) -> Tensor:
    """Mean cosine distance over masked rows; empty plan contributes 0.

    Rows where either side has (near-)zero norm contribute a constant 1 with
    no gradient, matching the scalar cosine-distance convention.
    """
    if original.shape != reconstructed.shape:
        raise ValueError(f"shape mismatch {original.shape} vs {reconstructed.shape}")
    if plan.count == 0:
        return Tensor(0.0)
    idx = plan.masked_indices
    orig = np.asarray(original, dtype=np.float64)[idx]
    orig_norm = np.linalg.norm(orig, axis=1)
    rec_norm = np.linalg.norm(reconstructed.data[idx], axis=1)
    good = (orig_norm >= DEGENERATE_NORM) & (rec_norm >= DEGENERATE_NORM)
    n_bad = int((~good).sum())
    if not good.any():
        return Tensor(float(n_bad) / plan.count)

    rec = gather_rows(reconstructed, idx[good])
    o = Tensor(orig[good])
    dots = (o * rec).sum(axis=1)
    norms = (rec * rec).sum(axis=1).sqrt() * Tensor(orig_norm[good])
    cos = dots / norms
    distances = (1.0 - cos).sum()
    return (distances + float(n_bad)) * (1.0 / plan.count)


def classification_loss(logits: Tensor, label: int) -> Tensor:
    """Cross entropy; used for both the complete and the corrupted view."""
    return cross_entropy(logits, label)


def joint_loss(
    recon: Tensor | None, comp: Tensor | None, corr: Tensor | None, weights: LossWeights
) -> tuple[Tensor, LossBreakdown]:
    """Weighted total; disabled streams (None) contribute exactly zero."""
    terms = []
    values = {}
    for name, term, lam in (("recon", recon, weights.recon), ("comp", comp, weights.comp),
                            ("corr", corr, weights.corr)):
        values[name] = 0.0 if term is None else float(term.data)
        if not math.isfinite(values[name]):
            raise FloatingPointError(f"non-finite {name} loss: {values[name]}")
        if term is not None and lam != 0.0:
            terms.append(term * lam)
    if terms:
        total = terms[0]
        for t in terms[1:]:
            total = total + t
    else:
        total = Tensor(0.0)
    breakdown = LossBreakdown(
        recon=values["recon"], comp=values["comp"], corr=values["corr"], total=float(total.data)
    )
    return total, breakdown
