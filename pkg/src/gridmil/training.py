"""Optimization loop: AdamW with decoupled decay, cosine annealing, the
per-bag training step (batch size is one variable-size graph), and the fit
loop with best-validation-checkpoint selection.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .data import PatchBag, build_graph
from .losses import LossBreakdown, LossWeights, classification_loss, joint_loss, recon_loss, sample_mask
from .metrics import auc_from_probs
from .model import ModelDims, ModelState, abmil_forward, classify, decode, encode, init_params
from .seeding import substream
from .tensor import Tensor


class TrainingAbort(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-5
    epochs: int = 100
    eta_min: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    loss_weights: LossWeights = field(default_factory=LossWeights)
    mask_ratio: float = 0.7
    seed: int = 0
    checkpoint_metric: str = "val_auc"  # or "val_loss"

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ValueError("mask_ratio must lie in [0, 1]")
        if self.checkpoint_metric not in ("val_auc", "val_loss"):
            raise ValueError(f"unknown checkpoint metric {self.checkpoint_metric!r}")


@dataclass
class TrainLog:
    entries: list[dict] = field(default_factory=list)
    best_epoch: int = -1

    def to_jsonl(self, path) -> None:
        import json

        with open(path, "w") as fh:
            for e in self.entries:
                row = {k: v for k, v in e.items() if k != "seconds"}  # wall time is not reproducible
                fh.write(json.dumps(row) + "\n")
            fh.write(json.dumps({"best_epoch": self.best_epoch}) + "\n")


# -- optimizer ---------------------------------------------------------------

_NO_DECAY_LEAVES = {"b", "b1", "b2", "ln_gain", "ln_bias", "mask_token"}


def _decays(name: str) -> bool:
    return name.rsplit(".", 1)[-1] not in _NO_DECAY_LEAVES


class AdamW:
    """Decoupled weight decay; biases, layer-norm affines, and the mask token
    are exempt from decay."""

    def __init__(self, params: dict[str, Tensor], betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = params
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float) -> None:
        b1, b2 = self.betas
        self.t += 1
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            g = np.asarray(g, dtype=np.float64)
            if not np.all(np.isfinite(g)):
                raise TrainingAbort(f"non-finite gradient for parameter {name!r}")
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            update = m_hat / (np.sqrt(v_hat) + self.eps)
            if self.weight_decay and _decays(name):
                update = update + self.weight_decay * p.data
            p.data = p.data - lr * update


def cosine_lr(epoch: int, total_epochs: int, lr_max: float, eta_min: float = 0.0) -> float:
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    return eta_min + 0.5 * (lr_max - eta_min) * (1.0 + math.cos(math.pi * epoch / total_epochs))


# -- training steps ----------------------------------------------------------


def train_step(graph, state: ModelState, optimizer: AdamW, cfg: TrainConfig, lr: float,
               rng_mask: np.random.Generator) -> LossBreakdown:
    """One optimization step on one bag-graph.

    Order: sample mask, encode the masked view once, decode for reconstruction,
    classify the masked latent for the corrupted-view loss, then a separate
    complete-view encode for the supervised loss. Streams with zero weight are
    skipped entirely (a comp-only configuration is a plain supervised step and
    consumes no mask randomness).
    """
    w = cfg.loss_weights
    label = graph.bag.bag_label
    recon_t = comp_t = corr_t = None

    if w.recon > 0.0 or w.corr > 0.0:
        plan = sample_mask(graph.bag.num_patches, cfg.mask_ratio, rng_mask)
        masked_enc = encode(graph, state, masked_indices=plan.masked_indices)
        if w.recon > 0.0:
            reconstructed = decode(masked_enc, state)
            recon_t = recon_loss(graph.bag.features, reconstructed, plan)
        if w.corr > 0.0:
            corr_t = classification_loss(classify(masked_enc, state), label)
    if w.comp > 0.0:
        comp_t = classification_loss(classify(encode(graph, state), state), label)

    try:
        total, breakdown = joint_loss(recon_t, comp_t, corr_t, w)
    except FloatingPointError as exc:
        raise TrainingAbort(f"bag {graph.bag.bag_id!r}: {exc}") from exc
    if not total.requires_grad:
        raise TrainingAbort("all loss streams disabled; nothing to optimize")
    optimizer.zero_grad()
    total.backward()
    optimizer.step(lr)
    return breakdown


def predict_proba(graph, state: ModelState) -> tuple[np.ndarray, float]:
    """Complete-view forward: class probabilities and the supervised loss.
    The evaluation path never samples masks and never runs the decoder."""
    logits = classify(encode(graph, state), state)
    loss = float(classification_loss(logits, graph.bag.bag_label).data)
    z = logits.data - logits.data.max()
    p = np.exp(z)
    return p / p.sum(), loss


def evaluate(graphs: list, state: ModelState) -> dict:
    probs = []
    labels = []
    losses = []
    for g in graphs:
        p, loss = predict_proba(g, state)
        probs.append(p)
        labels.append(g.bag.bag_label)
        losses.append(loss)
    probs = np.array(probs)
    labels = np.array(labels)
    preds = probs.argmax(axis=1)
    return {
        "accuracy": float(np.mean(preds == labels)),
        "auc": auc_from_probs(probs, labels),
        "loss": float(np.mean(losses)),
    }


def fit(
    train_bags: list[PatchBag],
    val_bags: list[PatchBag],
    cfg: TrainConfig,
    dims: ModelDims,
    state: ModelState | None = None,
) -> tuple[ModelState, TrainLog]:
    """Train with seeded per-epoch shuffling; validate after every epoch on the
    complete view only; return the snapshot with the best validation metric
    (AUC, ties broken by lower validation loss)."""
    if not train_bags or not val_bags:
        raise ValueError("train and validation splits must be non-empty")
    train_graphs = [build_graph(b) for b in train_bags]
    val_graphs = [build_graph(b) for b in val_bags]
    if state is None:
        state = init_params(dims, cfg.seed)
    optimizer = AdamW(state.params, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay)
    rng_mask = substream(cfg.seed, "mask")
    rng_shuffle = substream(cfg.seed, "shuffle")

    log = TrainLog()
    best_key = None
    best_arrays = None
    for epoch in range(cfg.epochs):
        started = time.perf_counter()
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr, cfg.eta_min)
        sums = np.zeros(4)
        for idx in rng_shuffle.permutation(len(train_graphs)):
            b = train_step(train_graphs[idx], state, optimizer, cfg, lr, rng_mask)
            sums += (b.recon, b.comp, b.corr, b.total)
        means = sums / len(train_graphs)
        val = evaluate(val_graphs, state)
        if cfg.checkpoint_metric == "val_auc":
            key = (val["auc"], -val["loss"])
        else:
            key = (-val["loss"],)
        if best_key is None or key > best_key:
            best_key = key
            best_arrays = state.clone_arrays()
            log.best_epoch = epoch
        log.entries.append(
            {
                "epoch": epoch,
                "lr": lr,
                "train_recon": means[0],
                "train_comp": means[1],
                "train_corr": means[2],
                "train_total": means[3],
                "val_accuracy": val["accuracy"],
                "val_auc": val["auc"],
                "val_loss": val["loss"],
                "seconds": time.perf_counter() - started,
            }
        )
    best_state = init_params(dims, cfg.seed)
    best_state.load_arrays(best_arrays)
    return best_state, log


# -- baseline trainer --------------------------------------------------------


def fit_abmil(
    train_bags: list[PatchBag],
    val_bags: list[PatchBag],
    state: ModelState,
    cfg: TrainConfig,
) -> tuple[ModelState, TrainLog]:
    """Plain supervised training of the attention-pooling baseline with the
    same optimizer, schedule, and checkpoint rule."""
    if not train_bags or not val_bags:
        raise ValueError("train and validation splits must be non-empty")
    optimizer = AdamW(state.params, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay)
    rng_shuffle = substream(cfg.seed, "shuffle-abmil")

    def val_metrics():
        probs, labels, losses = [], [], []
        for bag in val_bags:
            logits, _ = abmil_forward(bag.features, state)
            z = logits.data - logits.data.max()
            p = np.exp(z)
            probs.append(p / p.sum())
            labels.append(bag.bag_label)
            losses.append(float(classification_loss(logits, bag.bag_label).data))
        probs = np.array(probs)
        labels = np.array(labels)
        return {
            "accuracy": float(np.mean(probs.argmax(axis=1) == labels)),
            "auc": auc_from_probs(probs, labels),
            "loss": float(np.mean(losses)),
        }

    log = TrainLog()
    best_key = None
    best_arrays = None
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr, cfg.eta_min)
        total = 0.0
        for idx in rng_shuffle.permutation(len(train_bags)):
            bag = train_bags[idx]
            logits, _ = abmil_forward(bag.features, state)
            loss = classification_loss(logits, bag.bag_label)
            if not math.isfinite(float(loss.data)):
                raise TrainingAbort(f"bag {bag.bag_id!r}: non-finite baseline loss")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step(lr)
            total += float(loss.data)
        val = val_metrics()
        key = (val["auc"], -val["loss"])
        if best_key is None or key > best_key:
            best_key = key
            best_arrays = state.clone_arrays()
            log.best_epoch = epoch
        log.entries.append(
            {"epoch": epoch, "lr": lr, "train_loss": total / len(train_bags), **{f"val_{k}": v for k, v in val.items()}}
        )
    state.load_arrays(best_arrays)
    return state, log
