"""Flat key=value run configuration.

A config file holds one ``key = value`` pair per line; ``#`` starts a
comment.  Unknown keys are rejected so typos fail loudly.  Every key has
a default, listed in ``DEFAULTS`` and printed by ``ctpe --help-config``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError
from .preprocess import HuWindow
from .trainer import TrainConfig

DEFAULTS: dict[str, str] = {
    "window.lo": "-1000",
    "window.hi": "130",
    "input.dims": "128x128x64",
    "model.widths": "64,64,128,256",
    "model.dense": "512",
    "model.dropout": "0.3",
    "train.batch": "2",
    "train.epochs": "100",
    "train.patience": "15",
    "train.lr": "1e-4",
    "seeds.init": "1",
    "seeds.shuffle": "2",
    "seeds.dropout": "3",
    "seeds.folds": "4",
    "paths.out": "runs",
    "augment.enabled": "true",
    "eval.threshold": "0.5",
}

KEY_HELP: dict[str, str] = {
    "window.lo": "lower HU bound of the normalization window",
    "window.hi": "upper HU bound of the normalization window",
    "input.dims": "uniform volume size fed to the model, XxYxZ",
    "model.widths": "conv block channel widths, comma separated",
    "model.dense": "units in the hidden dense layer",
    "model.dropout": "dropout probability before the output layer",
    "train.batch": "training batch size",
    "train.epochs": "maximum training epochs per fold",
    "train.patience": "early-stopping patience, in epochs without improvement",
    "train.lr": "Adam learning rate",
    "seeds.init": "seed for weight initialization",
    "seeds.shuffle": "seed for per-epoch sample shuffling",
    "seeds.dropout": "seed for dropout masks",
    "seeds.folds": "seed for the cross-validation split",
    "paths.out": "default output directory for train/evaluate artifacts",
    "augment.enabled": "train on the six rotated copies in addition to originals",
    "eval.threshold": "score threshold for positive predictions",
}


def _parse_bool(key: str, raw: str) -> bool:
    low = raw.lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {raw!r}")


def _parse_dims(key: str, raw: str) -> tuple[int, int, int]:
    parts = raw.lower().replace(",", "x").split("x")
    if len(parts) != 3:
        raise ConfigError(f"{key}: expected XxYxZ, got {raw!r}")
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"{key}: expected integers, got {raw!r}") from exc
    if min(dims) < 1:
        raise ConfigError(f"{key}: dims must be positive, got {raw!r}")
    return dims


@dataclass(frozen=True)
class RunConfig:
    values: dict[str, str]

    @classmethod
    def from_file(cls, path=None, overrides: dict[str, str] | None = None) -> "RunConfig":
        values = dict(DEFAULTS)
        if path is not None:
            text = Path(path).read_text(encoding="utf-8")
            for lineno, line in enumerate(text.splitlines(), start=1):
                stripped = line.split("#", 1)[0].strip()
                if not stripped:
                    continue
                if "=" not in stripped:
                    raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
                key, _, raw = stripped.partition("=")
                key = key.strip()
                if key not in DEFAULTS:
                    raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
                values[key] = raw.strip()
        for key, raw in (overrides or {}).items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = raw
        cfg = cls(values=values)
        cfg.to_train_config()  # validate eagerly
        return cfg

    def _float(self, key: str) -> float:
        try:
            return float(self.values[key])
        except ValueError as exc:
            raise ConfigError(f"{key}: expected a number, got {self.values[key]!r}") from exc

    def _int(self, key: str) -> int:
        try:
            return int(self.values[key])
        except ValueError as exc:
            raise ConfigError(f"{key}: expected an integer, got {self.values[key]!r}") from exc

    def window(self) -> HuWindow:
        try:
            return HuWindow(self._float("window.lo"), self._float("window.hi"))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def to_train_config(self) -> TrainConfig:
        widths_raw = self.values["model.widths"]
        try:
            widths = tuple(int(w) for w in widths_raw.split(","))
        except ValueError as exc:
            raise ConfigError(f"model.widths: expected comma-separated integers, got {widths_raw!r}") from exc
        return TrainConfig(
            window=self.window(),
            input_dims=_parse_dims("input.dims", self.values["input.dims"]),
            batch_size=self._int("train.batch"),
            max_epochs=self._int("train.epochs"),
            patience=self._int("train.patience"),
            seed_init=self._int("seeds.init"),
            seed_shuffle=self._int("seeds.shuffle"),
            seed_dropout=self._int("seeds.dropout"),
            seed_folds=self._int("seeds.folds"),
            augment=_parse_bool("augment.enabled", self.values["augment.enabled"]),
            widths=widths,
            dense_units=self._int("model.dense"),
            dropout_p=self._float("model.dropout"),
            learning_rate=self._float("train.lr"),
            eval_threshold=self._float("eval.threshold"),
        )

    def out_dir(self) -> Path:
        return Path(self.values["paths.out"])

    def canonical(self) -> str:
        return "\n".join(f"{k} = {self.values[k]}" for k in sorted(self.values)) + "\n"

    def hash_hex(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]
