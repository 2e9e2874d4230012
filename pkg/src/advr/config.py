"""Run configuration: sectioned key-value text with a canonical digest.

Files look like INI without interpolation:

    [dataset]
    kind = synthetic
    seed = 7

Sections and keys are fixed; unknown ones are errors. `canonical_text`
re-serializes every setting (defaults included) in a fixed order, and the
sha256 of that text identifies the configuration in reports and checkpoints.
Output locations are deliberately not part of the config, so moving artifacts
never changes the digest.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

from .attack import AttackConfig
from .defense import FilterSpec, TrainConfig
from .errors import ConfigError
from .features import FeatureConfig
from .models import ModelSpec

_SECTIONS = ("dataset", "model", "features", "attack", "filters", "training")

_DEFAULTS: dict[str, dict[str, str]] = {
    "dataset": {
        "kind": "synthetic",        # synthetic | protocol
        "seed": "1",
        "n_train": "24",            # per class
        "n_dev": "8",               # per class
        "eval_split": "train",      # score on the training split by default
        "protocol_train": "-",
        "protocol_dev": "-",
        "audio_dir": "-",
    },
    "model": {
        "kind": "vgg_like",
        "width_multiplier": "1.0",
        "seed": "0",
        "se_reduction": "16",
    },
    "features": {
        "sample_rate": "16000",
        "n_fft": "512",
        "hop_seconds": "0.001",
        "frames": "600",
        "log_floor": "1e-10",
    },
    "attack": {
        "epsilon": "5.0",
        "alpha": "0.5",
        "iterations": "10",
        "mode": "descend",
    },
    "filters": {
        "window": "3",
        "sigma": "1.0",
    },
    "training": {
        "t1": "10",
        "t2": "5",
        "batch_size": "8",
        "learning_rate": "0.001",
        "optimizer": "momentum",
        "momentum": "0.9",
        "seed": "0",
        "convergence_tol": "0.001",
        "mix_clean": "0.0",
    },
}


@dataclass(frozen=True)
class RunConfig:
    values: tuple[tuple[str, tuple[tuple[str, str], ...]], ...]

    def get(self, section: str, key: str) -> str:
        for sec, pairs in self.values:
            if sec == section:
                for k, v in pairs:
                    if k == key:
                        return v
        raise ConfigError(f"unknown config key [{section}] {key}")

    def _int(self, section: str, key: str) -> int:
        raw = self.get(section, key)
        try:
            return int(raw)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key} must be an integer, got {raw!r}") from exc

    def _float(self, section: str, key: str) -> float:
        raw = self.get(section, key)
        try:
            return float(raw)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key} must be a number, got {raw!r}") from exc

    # typed views -----------------------------------------------------------

    def feature_config(self) -> FeatureConfig:
        return FeatureConfig(
            sample_rate=self._int("features", "sample_rate"),
            n_fft=self._int("features", "n_fft"),
            hop_seconds=self._float("features", "hop_seconds"),
            frames=self._int("features", "frames"),
            log_floor=self._float("features", "log_floor"),
        )

    def model_spec(self) -> ModelSpec:
        feats = self.feature_config()
        return ModelSpec(
            kind=self.get("model", "kind"),
            input_shape=(1, feats.frames, feats.bins),
            width_multiplier=self._float("model", "width_multiplier"),
            seed=self._int("model", "seed"),
            se_reduction=self._int("model", "se_reduction"),
        )

    def attack_config(self) -> AttackConfig:
        return AttackConfig(
            epsilon=self._float("attack", "epsilon"),
            alpha=self._float("attack", "alpha"),
            iterations=self._int("attack", "iterations"),
            mode=self.get("attack", "mode"),
        )

    def filter_specs(self) -> dict[str, FilterSpec]:
        window = self._int("filters", "window")
        sigma = self._float("filters", "sigma")
        return {
            "median": FilterSpec("median", window),
            "mean": FilterSpec("mean", window),
            "gaussian": FilterSpec("gaussian", window, sigma),
        }

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            t1=self._int("training", "t1"),
            t2=self._int("training", "t2"),
            batch_size=self._int("training", "batch_size"),
            learning_rate=self._float("training", "learning_rate"),
            optimizer=self.get("training", "optimizer"),
            momentum=self._float("training", "momentum"),
            attack=self.attack_config(),
            seed=self._int("training", "seed"),
            convergence_tol=self._float("training", "convergence_tol"),
            mix_clean=self._float("training", "mix_clean"),
        )


def parse_config_text(text: str) -> RunConfig:
    overrides: dict[str, dict[str, str]] = {s: {} for s in _SECTIONS}
    section: str | None = None
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in _SECTIONS:
                raise ConfigError(f"line {ln}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected key = value, got {line!r}")
        if section is None:
            raise ConfigError(f"line {ln}: key outside any [section]")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _DEFAULTS[section]:
            raise ConfigError(f"line {ln}: unknown key '{key}' in section [{section}]")
        overrides[section][key] = value
    merged = tuple(
        (sec, tuple((k, overrides[sec].get(k, default))
                    for k, default in sorted(_DEFAULTS[sec].items())))
        for sec in _SECTIONS
    )
    return RunConfig(values=merged)


def load_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_config_text(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def canonical_text(cfg: RunConfig) -> str:
    lines = []
    for sec, pairs in cfg.values:
        lines.append(f"[{sec}]")
        for k, v in pairs:
            lines.append(f"{k} = {v}")
        lines.append("")
    return "\n".join(lines)


def config_digest(cfg: RunConfig) -> str:
    return hashlib.sha256(canonical_text(cfg).encode("utf-8")).hexdigest()
