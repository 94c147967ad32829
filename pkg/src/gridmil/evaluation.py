"""Analysis runners: embedding extraction, the three-way KNN probe, attention
skew collection, the loss-combination ablation grid, and the mask-ratio sweep.
Reports are emitted as plain dicts, serializable to JSON and CSV.
"""

from __future__ import annotations

import csv
import json

import numpy as np

from .data import PatchBag, build_graph
from .losses import LossWeights
from .metrics import attention_stats, knn_probe
from .model import ModelState, abmil_embed, abmil_forward, encode, global_attention
from .seeding import substream
from .training import TrainConfig, evaluate, fit

# the all-off row is untrainable and excluded
ABLATION_COMBOS = (
    ("comp",),
    ("comp", "corr"),
    ("comp", "recon"),
    ("recon", "corr"),
    ("comp", "recon", "corr"),
)


def weights_for_combo(combo: tuple[str, ...], base: LossWeights) -> LossWeights:
    return LossWeights(
        recon=base.recon if "recon" in combo else 0.0,
        comp=base.comp if "comp" in combo else 0.0,
        corr=base.corr if "corr" in combo else 0.0,
    )


# -- embeddings and attention ------------------------------------------------


def encoder_embeddings(bags: list[PatchBag], state: ModelState) -> tuple[np.ndarray, np.ndarray]:
    """Final-layer encoder states of all patch nodes (complete view), with
    instance labels. Bags without instance labels are rejected."""
    rows, labels = [], []
    for bag in bags:
        if bag.instance_labels is None:
            raise ValueError(f"bag {bag.bag_id!r} lacks instance labels")
        enc = encode(build_graph(bag), state)
        rows.append(enc.node_states.data[: bag.num_patches])
        labels.append(bag.instance_labels.astype(int))
    return np.concatenate(rows), np.concatenate(labels)


def baseline_embeddings(bags: list[PatchBag], state: ModelState) -> tuple[np.ndarray, np.ndarray]:
    rows, labels = [], []
    for bag in bags:
        if bag.instance_labels is None:
            raise ValueError(f"bag {bag.bag_id!r} lacks instance labels")
        rows.append(abmil_embed(bag.features, state))
        labels.append(bag.instance_labels.astype(int))
    return np.concatenate(rows), np.concatenate(labels)


def raw_features(bags: list[PatchBag]) -> tuple[np.ndarray, np.ndarray]:
    rows = [bag.features for bag in bags]
    labels = [bag.instance_labels.astype(int) for bag in bags]
    return np.concatenate(rows), np.concatenate(labels)


def model_attention_vectors(bags: list[PatchBag], state: ModelState) -> list[np.ndarray]:
    """Last encoder layer's global-node attention segment per bag, averaged
    over heads (the self-loop entry included; the segment is one softmax)."""
    return [global_attention(encode(build_graph(bag), state)) for bag in bags]


def baseline_attention_vectors(bags: list[PatchBag], state: ModelState) -> list[np.ndarray]:
    out = []
    for bag in bags:
        _, attn = abmil_forward(bag.features, state)
        out.append(np.array(attn.data))
    return out


def probe_comparison(
    train_bags: list[PatchBag],
    test_bags: list[PatchBag],
    model_state: ModelState,
    baseline_state: ModelState | None = None,
    k: int = 5,
    train_limit: int | None = 4000,
    test_limit: int | None = 2000,
    seed: int = 0,
) -> list[dict]:
    """Instance-level KNN probe on three representations: raw features, the
    baseline's instance embeddings, and the encoder's final-layer states.

    Instances are subsampled (seeded, identically across representations) to
    keep the all-pairs distance computation desk-scale.
    """
    rows = []
    sources = [("raw", raw_features(train_bags), raw_features(test_bags))]
    if baseline_state is not None:
        sources.append(
            (
                "abmil",
                baseline_embeddings(train_bags, baseline_state),
                baseline_embeddings(test_bags, baseline_state),
            )
        )
    sources.append(
        ("encoder", encoder_embeddings(train_bags, model_state), encoder_embeddings(test_bags, model_state))
    )
    rng = substream(seed, "probe")
    n_train = sources[0][1][0].shape[0]
    n_test = sources[0][2][0].shape[0]
    train_idx = (
        np.sort(rng.choice(n_train, size=train_limit, replace=False))
        if train_limit is not None and n_train > train_limit
        else np.arange(n_train)
    )
    test_idx = (
        np.sort(rng.choice(n_test, size=test_limit, replace=False))
        if test_limit is not None and n_test > test_limit
        else np.arange(n_test)
    )
    for name, (tr_x, tr_y), (te_x, te_y) in sources:
        rows.append(
            {
                "representation": name,
                **knn_probe(tr_x[train_idx], tr_y[train_idx], te_x[test_idx], te_y[test_idx], k=k),
            }
        )
    return rows


def attention_report(
    bags: list[PatchBag],
    model_state: ModelState | None = None,
    baseline_state: ModelState | None = None,
    threshold: float = 0.5,
) -> dict:
    """Attention-skew diagnostics for either or both models."""
    inst = [bag.instance_labels for bag in bags] if all(b.instance_labels is not None for b in bags) else None
    out = {}
    if model_state is not None:
        vecs = model_attention_vectors(bags, model_state)
        # alignment uses patch entries only; the global self-loop entry is appended last
        out["model"] = attention_stats(vecs, threshold=threshold, instance_labels=inst)
    if baseline_state is not None:
        vecs = baseline_attention_vectors(bags, baseline_state)
        out["baseline"] = attention_stats(vecs, threshold=threshold, instance_labels=inst)
    return out


# -- ablation and sweep runners ----------------------------------------------


def _train_and_test(train_bags, val_bags, test_bags, dims, cfg: TrainConfig) -> dict:
    state, log = fit(train_bags, val_bags, cfg, dims)
    test = evaluate([build_graph(b) for b in test_bags], state)
    return {"accuracy": test["accuracy"], "auc": test["auc"], "best_epoch": log.best_epoch}


def run_ablation(
    train_bags, val_bags, test_bags, dims, base_cfg: TrainConfig, seeds: list[int]
) -> list[dict]:
    """Train one model per loss combination and seed; report mean (min, max)
    test accuracy and AUC per combination."""
    rows = []
    for combo in ABLATION_COMBOS:
        accs, aucs = [], []
        for seed in seeds:
            cfg = TrainConfig(
                lr=base_cfg.lr,
                weight_decay=base_cfg.weight_decay,
                epochs=base_cfg.epochs,
                eta_min=base_cfg.eta_min,
                betas=base_cfg.betas,
                eps=base_cfg.eps,
                loss_weights=weights_for_combo(combo, base_cfg.loss_weights),
                mask_ratio=base_cfg.mask_ratio,
                seed=seed,
                checkpoint_metric=base_cfg.checkpoint_metric,
            )
            r = _train_and_test(train_bags, val_bags, test_bags, dims, cfg)
            accs.append(r["accuracy"])
            aucs.append(r["auc"])
        rows.append(
            {
                "combo": "+".join(combo),
                "acc_mean": float(np.mean(accs)),
                "acc_min": float(np.min(accs)),
                "acc_max": float(np.max(accs)),
                "auc_mean": float(np.mean(aucs)),
                "auc_min": float(np.min(aucs)),
                "auc_max": float(np.max(aucs)),
                "acc_per_seed": accs,
                "auc_per_seed": aucs,
            }
        )
    return rows


def run_mask_sweep(
    train_bags, val_bags, test_bags, dims, base_cfg: TrainConfig, ratios: list[float],
    seeds: list[int]
) -> list[dict]:
    """Train the full objective at each mask ratio; ratios of 1 or more would
    leave no visible nodes and are rejected."""
    rows = []
    for ratio in ratios:
        if not 0.0 <= ratio <= 0.95:
            raise ValueError(f"mask ratio {ratio} outside [0, 0.95]")
        accs, aucs = [], []
        for seed in seeds:
            cfg = TrainConfig(
                lr=base_cfg.lr,
                weight_decay=base_cfg.weight_decay,
                epochs=base_cfg.epochs,
                eta_min=base_cfg.eta_min,
                betas=base_cfg.betas,
                eps=base_cfg.eps,
                loss_weights=base_cfg.loss_weights,
                mask_ratio=ratio,
                seed=seed,
                checkpoint_metric=base_cfg.checkpoint_metric,
            )
            r = _train_and_test(train_bags, val_bags, test_bags, dims, cfg)
            accs.append(r["accuracy"])
            aucs.append(r["auc"])
        rows.append(
            {
                "ratio": ratio,
                "acc_mean": float(np.mean(accs)),
                "auc_mean": float(np.mean(aucs)),
                "acc_per_seed": accs,
                "auc_per_seed": aucs,
            }
        )
    return rows


# -- report serialization ----------------------------------------------------


def write_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, default=_jsonable)
        fh.write("\n")


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    raise TypeError(f"not JSON-serializable: {type(x)}")


def write_csv(rows: list[dict], path, drop: tuple[str, ...] = ("acc_per_seed", "auc_per_seed")) -> None:
    if not rows:
        raise ValueError("no rows to write")
    fields = [k for k in rows[0] if k not in drop]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in fields})


def write_histogram_csv(stats, path) -> None:
    """Histogram bins as CSV for external plotting."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_lo", "bin_hi", "count"])
        for lo, hi, c in zip(stats.hist_edges[:-1], stats.hist_edges[1:], stats.hist_counts):
            writer.writerow([f"{lo:.6f}", f"{hi:.6f}", int(c)])
