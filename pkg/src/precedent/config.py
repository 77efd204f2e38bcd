"""Run configuration: flat dotted keys with defaults, a JSON file, then flag overrides."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

# key -> (default, help).  Order is the order shown by ``--help``.
KEYS: dict[str, tuple[Any, str]] = {
    "seed": (0, "master seed; every component derives its own sub-seed"),
    "task": ("B", "A (violation) or B (allegation)"),
    "out": ("runs/default", "artifact directory"),
    "corpus.source": ("synthetic", "'synthetic' or a path to a JSONL case file"),
    "corpus.cases": (2000, "synthetic corpus size"),
    "corpus.labels": (10, "number of labels (articles)"),
    "corpus.vocab": (500, "synthetic vocabulary size"),
    "corpus.max_vocab": (20000, "vocabulary cap when ingesting JSONL"),
    "corpus.fractions": ([0.8, 0.1, 0.1], "chronological train/validation/test fractions"),
    "encoder.max_tokens_per_paragraph": (128, "paragraph truncation (tokens)"),
    "encoder.max_paragraphs": (64, "case truncation (paragraphs)"),
    "encoder.embedding_dim": (64, "case / paragraph embedding width"),
    "encoder.contextualizer_layers": (2, "transformer layers over paragraphs"),
    "encoder.attention_heads": (4, "heads per contextualizer layer"),
    "encoder.ffn_dim": (128, "contextualizer feed-forward width"),
    "retriever.regime": ("lor", "self, binary or lor"),
    "retriever.epochs": (3, "retriever training epochs"),
    "retriever.batch_size": (64, "pairs per retriever step"),
    "retriever.lr": (1e-3, "retriever peak learning rate"),
    "retriever.warmup_steps": (50, "retriever warmup steps"),
    "retriever.pairs": (None, "training pairs (default scales with the training split)"),
    "fusion.variant": ("stacked", "mean, cross or stacked"),
    "fusion.layers": (4, "layers of the stacked variant"),
    "train.regime": ("train-both-kld", "baseline, inference-only, frozen-fusion, train-ljp-only, train-both, train-both-kld"),
    "train.baseline_epochs": (30, "epochs for the baseline encoder + head"),
    "train.epochs": (30, "epochs for fusion regimes"),
    "train.batch_size": (32, "cases per step"),
    "train.lr": (1e-3, "peak learning rate"),
    "train.warmup_steps": (100, "linear warmup steps"),
    "train.k": (7, "precedents retrieved per case for fusion"),
    "train.kld_weight": (1.0, "weight of the retriever distillation term"),
    "train.refresh_every_epochs": (1, "datastore refresh period when the retriever trains"),
    "sweep.k_grid": ([8, 16, 32, 64, 128, 256], "neighbour counts tried by the sweep"),
    "sweep.lambda_grid": ([round(0.1 * i, 1) for i in range(11)], "mixing weights tried by the sweep"),
    "sweep.tau_grid": ([0.1, 1.0, 10.0], "temperatures tried by the sweep"),
    "interp.k": (None, "fixed k for inference-only eval (default: sweep best)"),
    "interp.lambda": (None, "fixed lambda for inference-only eval (default: sweep best)"),
    "interp.tau": (None, "fixed tau for inference-only eval (default: sweep best)"),
}


class ConfigError(ValueError):
    pass


def _flatten(obj: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in obj.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(key: str, value: Any) -> Any:
    default = KEYS[key][0]
    if value is None:
        return None
    try:
        if isinstance(default, bool):
            return bool(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, list):
            if isinstance(value, str):
                value = [v for v in value.split(",") if v.strip()]
            kind = type(default[0])
            return [kind(v) for v in value]
        if default is None and key in ("retriever.pairs", "interp.k"):
            return int(value)
        if default is None:
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value for {key}: {value!r}") from None


@dataclass
class RunConfig:
    values: dict[str, Any] = field(default_factory=lambda: {k: v for k, (v, _) in KEYS.items()})

    @classmethod
    def resolve(cls, path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
        cfg = cls()
        if path is not None:
            try:
                raw = json.loads(Path(path).read_text())
            except FileNotFoundError:
                raise ConfigError(f"config file not found: {path}") from None
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
            if not isinstance(raw, dict):
                raise ConfigError(f"config file {path} must hold an object")
            cfg.update(_flatten(raw))
        cfg.update({k: v for k, v in (overrides or {}).items() if v is not None})
        cfg.validate()
        return cfg

    def update(self, items: dict[str, Any]) -> None:
        for k, v in items.items():
            if k not in KEYS:
                raise ConfigError(f"unknown config key {k!r}")
            self.values[k] = _coerce(k, v)

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def validate(self) -> None:
        from .jointtrain import REGIMES

        v = self.values
        if v["task"] not in ("A", "B"):
            raise ConfigError(f"task must be A or B, got {v['task']!r}")
        if v["retriever.regime"] not in ("self", "binary", "lor"):
            raise ConfigError(f"retriever.regime must be self, binary or lor, got {v['retriever.regime']!r}")
        if v["fusion.variant"] not in ("mean", "cross", "stacked"):
            raise ConfigError(f"fusion.variant must be mean, cross or stacked, got {v['fusion.variant']!r}")
        if v["train.regime"] not in REGIMES:
            raise ConfigError(f"train.regime must be one of {REGIMES}, got {v['train.regime']!r}")
        if v["encoder.embedding_dim"] % v["encoder.attention_heads"]:
            raise ConfigError("encoder.embedding_dim must be divisible by encoder.attention_heads")
        fr = v["corpus.fractions"]
        if len(fr) != 3 or any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
            raise ConfigError("corpus.fractions must be three non-negative numbers summing to 1")
        if any(not 0.0 <= lam <= 1.0 for lam in v["sweep.lambda_grid"]):
            raise ConfigError("sweep.lambda_grid values must lie in [0, 1]")
        if any(t <= 0 for t in v["sweep.tau_grid"]) or any(k < 1 for k in v["sweep.k_grid"]):
            raise ConfigError("sweep grids need tau > 0 and k >= 1")
        for key in ("train.k", "train.epochs", "train.baseline_epochs", "train.batch_size", "retriever.epochs"):
            if v[key] < 1:
                raise ConfigError(f"{key} must be >= 1")
        if v["interp.lambda"] is not None and not 0.0 <= v["interp.lambda"] <= 1.0:
            raise ConfigError("interp.lambda must lie in [0, 1]")
        if v["interp.tau"] is not None and v["interp.tau"] <= 0:
            raise ConfigError("interp.tau must be > 0")
        if v["interp.k"] is not None and v["interp.k"] < 1:
            raise ConfigError("interp.k must be >= 1")

    def to_json(self) -> str:
        return json.dumps(self.values, indent=2, sort_keys=True)

    # typed views ---------------------------------------------------------

    def encoder(self):
        from .encoder import EncoderConfig

        v = self.values
        return EncoderConfig(
            max_tokens_per_paragraph=v["encoder.max_tokens_per_paragraph"],
            max_paragraphs=v["encoder.max_paragraphs"],
            embedding_dim=v["encoder.embedding_dim"],
            contextualizer_layers=v["encoder.contextualizer_layers"],
            attention_heads=v["encoder.attention_heads"],
            ffn_dim=v["encoder.ffn_dim"],
        )

    def retriever_train(self):
        from .retriever import RetrieverTrainConfig

        v = self.values
        return RetrieverTrainConfig(epochs=v["retriever.epochs"], batch_size=v["retriever.batch_size"],
                                    lr=v["retriever.lr"], warmup_steps=v["retriever.warmup_steps"],
                                    n_pairs=v["retriever.pairs"])

    def experiment(self):
        from .jointtrain import ExperimentConfig

        v = self.values
        return ExperimentConfig(
            enc=self.encoder(), retriever_train=self.retriever_train(),
            baseline_epochs=v["train.baseline_epochs"], fusion_epochs=v["train.epochs"], k_train=v["train.k"],
            batch_size=v["train.batch_size"], lr=v["train.lr"], warmup_steps=v["train.warmup_steps"],
            kld_weight=v["train.kld_weight"], refresh_every_epochs=v["train.refresh_every_epochs"],
            fusion_layers=v["fusion.layers"], retriever_regime=v["retriever.regime"],
            fusion_variant=v["fusion.variant"],
        )


def describe_keys() -> str:
    """One line per key with its default, for ``--help``."""
    width = max(len(k) for k in KEYS)
    lines = []
    for k, (default, text) in KEYS.items():
        shown = json.dumps(default)
        lines.append(f"  {k:<{width}}  default {shown}: {text}")
    return "\n".join(lines)
