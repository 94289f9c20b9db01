"""Manifest handling, stratified 5-fold cross-validation, and the training loop.

Reproducibility contract: every random choice is keyed off the config
seeds through the counter RNG — model init by (seed_init, fold), shuffle
order by (seed_shuffle, fold, epoch), dropout masks by (seed_dropout,
fold, epoch, step) — so a rerun with the same config and data is
bit-identical, and restoring a checkpoint resumes the exact trajectory.

Augmentation (the six fixed rotations) is applied to training folds
only, inside the fold loop, so every augmented sample inherits its
source case's fold assignment and validation metrics stay honest.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, NumericError
from .manifest import ManifestRecord, read_manifest
from .nifti import read_nifti
from .nn import Adam, Architecture, Cnn3d, bce_loss, load_model, save_model
from .nn.model import DEFAULT_DENSE_UNITS, DEFAULT_WIDTHS
from .preprocess import DEFAULT_AUGMENTATION, HuWindow, augment_six
from .rng import Stream, derive
from .volume import Unit, Volume

K_FOLDS = 5


@dataclass(frozen=True)
class DatasetManifest:
    """Validated case list with paths resolved against ``root``."""

    records: tuple[ManifestRecord, ...]
    root: Path

    def __post_init__(self):
        paths = [r.path for r in self.records]
        if len(set(paths)) != len(paths):
            raise ConfigError("manifest contains duplicate paths")
        tv_labels = {r.label for r in self.trainval}
        if tv_labels != {0, 1}:
            raise ConfigError("trainval group must contain at least one case of each class")

    @property
    def trainval(self) -> tuple[ManifestRecord, ...]:
        return tuple(r for r in self.records if r.group == "trainval")

    @property
    def test(self) -> tuple[ManifestRecord, ...]:
        return tuple(r for r in self.records if r.group == "test")

    def resolve(self, record: ManifestRecord) -> Path:
        return self.root / record.path

    @classmethod
    def load(cls, manifest_path) -> "DatasetManifest":
        manifest_path = Path(manifest_path)
        return cls(records=tuple(read_manifest(manifest_path)), root=manifest_path.parent)


@dataclass(frozen=True)
class FoldPlan:
    """Stratified assignment of every trainval case to one of k folds."""

    k: int
    seed: int
    assignments: dict[str, int]

    def fold_of(self, record: ManifestRecord) -> int:
        return self.assignments[record.path]

    def sizes(self) -> list[int]:
        counts = [0] * self.k
        for f in self.assignments.values():
            counts[f] += 1
        return counts


def make_folds(manifest: DatasetManifest, seed: int, k: int = K_FOLDS) -> FoldPlan:
    """Deterministic stratified k-fold split of the trainval group.

    Within each class the cases are shuffled and dealt round-robin; the
    starting fold rotates by each class's remainder so total fold sizes
    also differ by at most one.
    """
    trainval = manifest.trainval
    assignments: dict[str, int] = {}
    offset = 0
    for label in (0, 1):
        cases = [r for r in trainval if r.label == label]
        if len(cases) < k:
            raise ConfigError(f"class {label} has {len(cases)} trainval cases; need at least {k} for {k}-fold CV")
        perm = Stream(derive(seed, label)).permutation(len(cases))
        for pos, idx in enumerate(perm):
            assignments[cases[int(idx)].path] = (offset + pos) % k
        offset = (offset + len(cases)) % k
    return FoldPlan(k=k, seed=seed, assignments=assignments)


@dataclass(frozen=True)
class TrainConfig:
    window: HuWindow = HuWindow(-1000.0, 130.0)
    input_dims: tuple[int, int, int] = (128, 128, 64)
    batch_size: int = 2
    max_epochs: int = 100
    patience: int = 15
    seed_init: int = 1
    seed_shuffle: int = 2
    seed_dropout: int = 3
    seed_folds: int = 4
    augment: bool = True
    widths: tuple[int, ...] = DEFAULT_WIDTHS
    dense_units: int = DEFAULT_DENSE_UNITS
    dropout_p: float = 0.3
    bn_momentum: float = 0.99
    learning_rate: float = 1e-4
    eval_threshold: float = 0.5

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if not 1 <= self.patience <= self.max_epochs:
            raise ConfigError(f"patience must be in [1, max_epochs={self.max_epochs}], got {self.patience}")

    def architecture(self) -> Architecture:
        return Architecture(
            widths=tuple(self.widths),
            dense_units=self.dense_units,
            dropout_p=self.dropout_p,
            input_dims=tuple(self.input_dims),
            bn_momentum=self.bn_momentum,
        )


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


@dataclass(frozen=True)
class FoldResult:
    fold: int
    history: tuple[EpochStats, ...]
    best_epoch: int
    checkpoint: bytes
    val_paths: tuple[str, ...]
    val_labels: tuple[int, ...]
    val_scores: tuple[float, ...]  # at the best epoch
    train_samples_per_epoch: int

    @property
    def best(self) -> EpochStats:
        return self.history[self.best_epoch]


def format_history(history) -> str:
    """Plain-text epoch table: epoch, train_loss, train_acc, val_loss, val_acc."""
    lines = [f"{'epoch':>5s} {'train_loss':>10s} {'train_acc':>9s} {'val_loss':>10s} {'val_acc':>9s}"]
    for h in history:
        lines.append(
            f"{h.epoch:5d} {h.train_loss:10.4f} {h.train_acc:9.4f} {h.val_loss:10.4f} {h.val_acc:9.4f}"
        )
    return "\n".join(lines) + "\n"


def _load_input(path: Path, config: TrainConfig) -> Volume:
    vol = read_nifti(path)
    if vol.unit is not Unit.NORMALIZED:
        raise ConfigError(f"{path}: training inputs must be preprocessed (normalized); found Hounsfield data")
    if vol.dims != tuple(config.input_dims):
        raise ConfigError(f"{path}: volume dims {vol.dims} do not match configured input dims {tuple(config.input_dims)}")
    return vol


def training_samples(train_paths: list[str], augment: bool) -> list[tuple[str, int]]:
    """(case path, variant) pairs; variant 0 is the original, 1..6 the rotations."""
    variants = 1 + (len(DEFAULT_AUGMENTATION.angles_degrees) if augment else 0)
    return [(path, v) for path in train_paths for v in range(variants)]


def train_fold(
    manifest: DatasetManifest,
    plan: FoldPlan,
    fold: int,
    config: TrainConfig,
    *,
    volume_cache: dict[str, Volume] | None = None,
) -> FoldResult:
    """Train on the k-1 complementary folds, validating on ``fold``.

    Early stopping tracks validation accuracy (ties broken by lower
    validation loss, then by the earlier epoch); the returned checkpoint
    is the best epoch's full state.
    """
    if not 0 <= fold < plan.k:
        raise ConfigError(f"fold index {fold} outside [0, {plan.k})")
    trainval = manifest.trainval
    train_records = [r for r in trainval if plan.fold_of(r) != fold]
    val_records = [r for r in trainval if plan.fold_of(r) == fold]
    if not train_records or not val_records:
        raise ConfigError(f"fold {fold} leaves an empty training or validation set")
    assert not {r.path for r in train_records} & {r.path for r in val_records}

    cache = volume_cache if volume_cache is not None else {}

    def volume_of(record: ManifestRecord) -> Volume:
        if record.path not in cache:
            cache[record.path] = _load_input(manifest.resolve(record), config)
        return cache[record.path]

    labels_by_path = {r.path: r.label for r in trainval}
    arrays: dict[tuple[str, int], np.ndarray] = {}
    for r in train_records:
        vol = volume_of(r)
        arrays[(r.path, 0)] = vol.data[None, None]
        if config.augment:
            for v, rotated in enumerate(augment_six(vol), start=1):
                arrays[(r.path, v)] = rotated.data[None, None]
    val_arrays = [volume_of(r).data[None, None] for r in val_records]
    val_labels = np.array([r.label for r in val_records], dtype=np.float32)

    samples = training_samples([r.path for r in train_records], config.augment)
    model = Cnn3d(config.architecture(), init_seed=derive(config.seed_init, fold))
    optimizer = Adam(learning_rate=config.learning_rate)
    params = model.parameters()

    history: list[EpochStats] = []
    best_epoch = -1
    best_key: tuple[float, float] | None = None
    best_checkpoint = b""
    best_scores: tuple[float, ...] = ()

    for epoch in range(config.max_epochs):
        order = Stream(derive(config.seed_shuffle, fold, epoch)).permutation(len(samples))
        epoch_loss = 0.0
        epoch_correct = 0
        for step, start in enumerate(range(0, len(samples), config.batch_size)):
            batch = [samples[int(i)] for i in order[start : start + config.batch_size]]
            x = np.concatenate([arrays[key] for key in batch], axis=0)
            y = np.array([labels_by_path[path] for path, _ in batch], dtype=np.float32)
            loss, probs, grads = model.backward(x, y, dropout_seed=derive(config.seed_dropout, fold, epoch, step))
            if not math.isfinite(loss):
                raise NumericError(f"non-finite training loss at fold {fold} epoch {epoch} step {step}")
            optimizer.step(params, grads)
            epoch_loss += loss * len(batch)
            epoch_correct += int(np.sum((probs >= config.eval_threshold) == (y == 1)))

        val_scores = _predict(model, val_arrays, config.batch_size)
        val_loss, _ = bce_loss(val_scores, val_labels)
        val_acc = float(np.mean((val_scores >= config.eval_threshold) == (val_labels == 1)))
        history.append(
            EpochStats(
                epoch=epoch,
                train_loss=epoch_loss / len(samples),
                train_acc=epoch_correct / len(samples),
                val_loss=val_loss,
                val_acc=val_acc,
            )
        )

        key = (val_acc, -val_loss)
        if best_key is None or key > best_key:
            best_key = key
            best_epoch = epoch
            buf = io.BytesIO()
            save_model(buf, model, optimizer, counters={"epoch": epoch, "fold": fold})
            best_checkpoint = buf.getvalue()
            best_scores = tuple(float(s) for s in val_scores)
        elif epoch - best_epoch >= config.patience:
            break

    return FoldResult(
        fold=fold,
        history=tuple(history),
        best_epoch=best_epoch,
        checkpoint=best_checkpoint,
        val_paths=tuple(r.path for r in val_records),
        val_labels=tuple(int(r.label) for r in val_records),
        val_scores=best_scores,
        train_samples_per_epoch=len(samples),
    )


def _predict(model: Cnn3d, arrays: list[np.ndarray], batch_size: int) -> np.ndarray:
    scores = []
    for start in range(0, len(arrays), batch_size):
        x = np.concatenate(arrays[start : start + batch_size], axis=0)
        scores.append(model.forward(x, train=False))
    return np.concatenate(scores)


@dataclass(frozen=True)
class CvSummary:
    folds: tuple[FoldResult, ...]
    mean_val_accuracy: float
    mean_val_loss: float


def run_cv(manifest: DatasetManifest, config: TrainConfig) -> CvSummary:
    """Train all k folds; deterministic given the config seeds."""
    plan = make_folds(manifest, config.seed_folds)
    cache: dict[str, Volume] = {}
    results = [train_fold(manifest, plan, fold, config, volume_cache=cache) for fold in range(plan.k)]
    return CvSummary(
        folds=tuple(results),
        mean_val_accuracy=float(np.mean([r.best.val_acc for r in results])),
        mean_val_loss=float(np.mean([r.best.val_loss for r in results])),
    )


def evaluate_test(checkpoint, manifest: DatasetManifest, config: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    """Inference-mode scores for the fixed test group, paired with labels."""
    test_records = manifest.test
    if not test_records:
        raise ConfigError("manifest has no test group; mark cases with group=test")
    model = Cnn3d(config.architecture())
    source = io.BytesIO(checkpoint) if isinstance(checkpoint, (bytes, bytearray)) else checkpoint
    load_model(source, model)
    arrays = [_load_input(manifest.resolve(r), config).data[None, None] for r in test_records]
    scores = _predict(model, arrays, config.batch_size)
    labels = np.array([r.label for r in test_records], dtype=np.int64)
    return scores, labels
