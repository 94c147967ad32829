"""Strict key=value run configuration.

Sections in square brackets, one ``key = value`` per line, ``#`` comments.
Unknown sections or keys are errors, so a resolved config fully determines a
run; every command writes the resolved config next to its outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .data import SynthConfig
from .losses import LossWeights
from .model import ModelDims
from .training import TrainConfig


class ConfigError(ValueError):
    pass


_SCHEMA = {
    "data": {
        "dataset_dir": str,
        "num_bags": int,
        "grid_extent": int,
        "nodes_per_bag": int,
        "feature_dim": int,
        "positive_ratio": float,
        "num_classes": int,
        "class_shift": float,
        "noise_scale": float,
        "size_jitter": float,
    },
    "model": {
        "hidden_dim": int,
        "num_heads": int,
        "num_layers": int,
        "classifier_hidden": int,
    },
    "train": {
        "lr": float,
        "weight_decay": float,
        "epochs": int,
        "eta_min": float,
        "mask_ratio": float,
        "seed": int,
        "checkpoint_metric": str,
    },
    "loss": {
        "recon": float,
        "comp": float,
        "corr": float,
    },
}


def parse_sections(text: str) -> dict[str, dict[str, str]]:
    sections: dict[str, dict[str, str]] = {}
    current = None
    for line_no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current not in _SCHEMA:
                raise ConfigError(f"line {line_no}: unknown section [{current}]")
            sections.setdefault(current, {})
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_no}: expected key = value, got {raw!r}")
        if current is None:
            raise ConfigError(f"line {line_no}: key outside any section")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _SCHEMA[current]:
            raise ConfigError(f"line {line_no}: unknown key {key!r} in section [{current}]")
        if key in sections[current]:
            raise ConfigError(f"line {line_no}: duplicate key {key!r}")
        sections[current][key] = value
    return sections


@dataclass
class RunConfig:
    synth: SynthConfig
    dims: ModelDims
    train: TrainConfig
    dataset_dir: str | None = None

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text)

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        sections = parse_sections(text)
        typed: dict[str, dict] = {}
        for sec, values in sections.items():
            typed[sec] = {}
            for key, raw in values.items():
                want = _SCHEMA[sec][key]
                try:
                    typed[sec][key] = want(raw)
                except ValueError as exc:
                    raise ConfigError(f"[{sec}] {key}: cannot parse {raw!r} as {want.__name__}") from exc

        data = dict(typed.get("data", {}))
        dataset_dir = data.pop("dataset_dir", None)
        try:
            synth = SynthConfig(**data)
            dims = ModelDims(feature_dim=synth.feature_dim, **typed.get("model", {}))
            loss = LossWeights(**typed.get("loss", {}))
            train = TrainConfig(loss_weights=loss, **typed.get("train", {}))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return cls(synth=synth, dims=dims, train=train, dataset_dir=dataset_dir)

    def resolved_text(self) -> str:
        """Full configuration with every default filled in."""
        lines = ["[data]"]
        if self.dataset_dir is not None:
            lines.append(f"dataset_dir = {self.dataset_dir}")
        s = self.synth
        lines += [
            f"num_bags = {s.num_bags}",
            f"grid_extent = {s.grid_extent}",
            f"nodes_per_bag = {s.nodes_per_bag}",
            f"feature_dim = {s.feature_dim}",
            f"positive_ratio = {s.positive_ratio!r}",
            f"num_classes = {s.num_classes}",
            f"class_shift = {s.class_shift!r}",
            f"noise_scale = {s.noise_scale!r}",
            f"size_jitter = {s.size_jitter!r}",
            "",
            "[model]",
            f"hidden_dim = {self.dims.hidden_dim}",
            f"num_heads = {self.dims.num_heads}",
            f"num_layers = {self.dims.num_layers}",
        ]
        if self.dims.classifier_hidden is not None:
            lines.append(f"classifier_hidden = {self.dims.classifier_hidden}")
        t = self.train
        lines += [
            "",
            "[train]",
            f"lr = {t.lr!r}",
            f"weight_decay = {t.weight_decay!r}",
            f"epochs = {t.epochs}",
            f"eta_min = {t.eta_min!r}",
            f"mask_ratio = {t.mask_ratio!r}",
            f"seed = {t.seed}",
            f"checkpoint_metric = {t.checkpoint_metric}",
            "",
            "[loss]",
            f"recon = {t.loss_weights.recon!r}",
            f"comp = {t.loss_weights.comp!r}",
            f"corr = {t.loss_weights.corr!r}",
            "",
        ]
        return "\n".join(lines)

    def write_resolved(self, path) -> None:
        Path(path).write_text(self.resolved_text())
