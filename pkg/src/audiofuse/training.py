"""Training protocol and evaluation metrics.

Weighted binary cross-entropy, AdamW with decoupled weight decay, early stopping on
validation accuracy and the four reported metrics with multi-seed aggregation.
"""

import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import partial
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from src.audiofuse import autodiff as ad
from src.audiofuse.autodiff import Parameter, Tensor
from src.audiofuse.dsp import MelConfig, StftConfig, featurize_batch, read_spectrogram, write_spectrogram
from src.audiofuse.errors import (
    ConfigError,
    EmptySplitError,
    FormatError,
    NumericError,
    ParameterError,
)
from src.audiofuse.model import AudioFuseModel
from src.audiofuse.signal_io import (
    CANONICAL_LENGTH,
    ManifestEntry,
    PathLike,
    Waveform,
    load_canonical,
    pad_or_truncate,
    resolve_entry_path,
)
from src.utils.app_logger import AppLogger

log = AppLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8
PROB_FLOOR = 1e-7
THRESHOLD = 0.5
HISTORY_COLUMNS = ["epoch", "train_loss", "val_loss", "val_acc", "val_auc"]
TRAINABLE = ("all", "head")

ClassWeights = Union[str, Tuple[float, float]]


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-4
    weight_decay: float = 1e-4
    max_epochs: int = 200
    patience: int = 30
    batch_size: int = 32
    seed: int = 0
    class_weights: ClassWeights = "auto"
    trainable: str = "all"

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ConfigError("max_epochs and batch_size must be at least 1")
        if not 0 < self.patience <= self.max_epochs:
            raise ConfigError(
                f"patience must lie in [1, max_epochs={self.max_epochs}], got {self.patience}"
            )
        if self.trainable not in TRAINABLE:
            raise ConfigError(f"trainable must be one of {TRAINABLE}, got {self.trainable!r}")
        if self.class_weights != "auto":
            weights = tuple(float(w) for w in self.class_weights)
            if len(weights) != 2 or min(weights) <= 0:
                raise ConfigError(f"class_weights must be 'auto' or two positive reals, got {self.class_weights}")
            object.__setattr__(self, "class_weights", weights)

    def to_dict(self) -> dict:
        values = asdict(self)
        if values["class_weights"] != "auto":
            values["class_weights"] = list(values["class_weights"])
        return values


# Loss


def auto_class_weights(labels: Sequence[int]) -> Tuple[float, float]:
    """w_c = N / (2 * N_c) over the training labels."""
    labels = np.asarray(labels)
    n = len(labels)
    counts = [int(np.sum(labels == c)) for c in (0, 1)]
    if n == 0 or min(counts) == 0:
        raise ParameterError(f"automatic class weights need both classes, got counts {counts}")
    return n / (2.0 * counts[0]), n / (2.0 * counts[1])


def resolve_class_weights(cfg: TrainConfig, labels: Sequence[int]) -> Tuple[float, float]:
    return auto_class_weights(labels) if cfg.class_weights == "auto" else cfg.class_weights


def weighted_bce(prob: Tensor, label, weights: Tuple[float, float]) -> Tensor:
    """
    Class-weighted binary cross-entropy, averaged over the batch
    :param prob: (batch,) probabilities of the positive class
    :param label: (batch,) labels in {0, 1}
    :param weights: (w0, w1)
    :return: Scalar tensor
    """
    label = np.asarray(label)
    if prob.size == 0 or label.size == 0:
        raise ParameterError("weighted_bce on an empty batch")
    if prob.shape != label.shape:
        raise ParameterError(f"probabilities {prob.shape} and labels {label.shape} differ in shape")
    y = label.astype(prob.dtype)
    w = np.where(label == 1, weights[1], weights[0]).astype(prob.dtype)
    p = ad.clip(prob, PROB_FLOOR, 1.0 - PROB_FLOOR)
    per_example = ad.log(p) * y + ad.log(1.0 - p) * (1.0 - y)
    return -(per_example * w).mean()


def bce_value(prob: np.ndarray, label: np.ndarray, weights: Tuple[float, float]) -> float:
    p = np.clip(np.asarray(prob, dtype=np.float64), PROB_FLOOR, 1.0 - PROB_FLOOR)
    y = np.asarray(label, dtype=np.float64)
    w = np.where(y == 1, weights[1], weights[0])
    return float(np.mean(-w * (y * np.log(p) + (1.0 - y) * np.log(1.0 - p))))


# Optimizer


@dataclass
class OptimState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    t: int = 0

    @classmethod
    def for_parameters(cls, params: Sequence[Parameter]) -> "OptimState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adamw_step(
    params: Sequence[Parameter],
    grads: Sequence[Optional[np.ndarray]],
    state: OptimState,
    cfg: TrainConfig,
) -> None:
    """
    One AdamW update in place; parameters without a gradient are left untouched
    Decay is decoupled and skipped for parameters flagged `decay=False`.
    """
    state.t += 1
    correction1 = 1.0 - BETA1**state.t
    correction2 = 1.0 - BETA2**state.t
    for index, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        m = state.m[index]
        v = state.v[index]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        step = (m / correction1) / (np.sqrt(v / correction2) + ADAM_EPS)
        if getattr(p, "decay", True):
            step = step + cfg.weight_decay * p.data
        p.data = (p.data - cfg.lr * step).astype(p.dtype, copy=False)


class AdamW:
    def __init__(self, params: Sequence[Parameter], cfg: TrainConfig):
        self.params = list(params)
        self.cfg = cfg
        self.state = OptimState.for_parameters(self.params)

    def step(self) -> None:
        adamw_step(self.params, [p.grad for p in self.params], self.state, self.cfg)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


# Metrics


@dataclass
class EvalReport:
    """Threshold metrics plus confusion counts; roc_auc and mcc are None when undefined."""

    accuracy: float
    f1: float
    roc_auc: Optional[float]
    mcc: Optional[float]
    tp: int
    fp: int
    tn: int
    fn: int
    n: int
    threshold: float = THRESHOLD

    def to_dict(self) -> dict:
        return asdict(self)


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    sorted_values = values[order]
    ranks = np.empty(len(values), dtype=np.float64)
    start = 0
    while start < len(values):
        stop = start
        while stop + 1 < len(values) and sorted_values[stop + 1] == sorted_values[start]:
            stop += 1
        ranks[order[start : stop + 1]] = 0.5 * (start + stop) + 1.0
        start = stop + 1
    return ranks


def rank_auc(probs, labels) -> Optional[float]:
    """Fraction of (positive, negative) pairs ordered correctly, ties counting one half."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = _average_ranks(probs)
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def trapezoid_auc(probs, labels) -> Optional[float]:
    """Area under the ROC curve by trapezoidal integration over distinct thresholds."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(-probs, kind="mergesort")
    sorted_probs = probs[order]
    sorted_labels = labels[order]
    # last index of each run of tied scores
    distinct = np.flatnonzero(np.diff(sorted_probs)) if len(probs) > 1 else np.array([], dtype=int)
    cuts = np.concatenate([distinct, [len(probs) - 1]])
    tps = np.cumsum(sorted_labels)[cuts]
    fps = (cuts + 1) - tps
    tpr = np.concatenate([[0.0], tps / n_pos])
    fpr = np.concatenate([[0.0], fps / n_neg])
    return float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))


def metrics(probs, labels, threshold: float = THRESHOLD) -> EvalReport:
    """
    Accuracy, F1, ROC-AUC and MCC at a fixed decision threshold
    :param probs: Positive-class probabilities
    :param labels: Ground truth in {0, 1}
    :return: EvalReport
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    if probs.shape != labels.shape:
        raise ParameterError(f"{len(probs)} probabilities for {len(labels)} labels")
    if labels.size == 0:
        raise ParameterError("metrics on an empty set")
    predicted = (probs >= threshold).astype(int)
    tp = int(np.sum((predicted == 1) & (labels == 1)))
    fp = int(np.sum((predicted == 1) & (labels == 0)))
    tn = int(np.sum((predicted == 0) & (labels == 0)))
    fn = int(np.sum((predicted == 0) & (labels == 1)))
    n = len(labels)
    f1_denominator = 2 * tp + fp + fn
    single_class = tp + fn == 0 or tn + fp == 0
    if single_class:
        mcc = None
    else:
        denominator = math.sqrt((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn))
        mcc = (tp * tn - fp * fn) / denominator if denominator > 0 else 0.0
    return EvalReport(
        accuracy=(tp + tn) / n,
        f1=2 * tp / f1_denominator if f1_denominator else 0.0,
        roc_auc=rank_auc(probs, labels),
        mcc=mcc,
        tp=tp,
        fp=fp,
        tn=tn,
        fn=fn,
        n=n,
        threshold=threshold,
    )


@dataclass
class AggregateReport:
    seeds: List[int]
    reports: List[EvalReport]
    mean: Dict[str, Optional[float]] = field(default_factory=dict)
    std: Dict[str, Optional[float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "n": len(self.seeds),
            "seeds": list(self.seeds),
            "per_seed": [r.to_dict() for r in self.reports],
            "mean": dict(self.mean),
            "std": dict(self.std),
        }


SUMMARY_METRICS = ("accuracy", "f1", "roc_auc", "mcc")


def aggregate(seeds: Sequence[int], reports: Sequence[EvalReport]) -> AggregateReport:
    """Mean and sample standard deviation per metric; undefined values are left out."""
    result = AggregateReport(list(seeds), list(reports))
    for name in SUMMARY_METRICS:
        values = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        if not values:
            result.mean[name] = result.std[name] = None
            continue
        mean_value = math.fsum(values) / len(values)
        result.mean[name] = mean_value
        result.std[name] = (
            math.sqrt(math.fsum((v - mean_value) ** 2 for v in values) / (len(values) - 1))
            if len(values) > 1
            else None
        )
    return result


def multi_seed_eval(
    run_fn: Callable[[int], EvalReport], seeds: Sequence[int], workers: int = 1
) -> AggregateReport:
    """
    Run an experiment once per seed and aggregate the reports
    :param run_fn: Seed -> EvalReport; must be picklable when workers > 1
    :param workers: Number of worker processes
    :return: AggregateReport
    """
    seeds = list(seeds)
    if len(seeds) < 2:
        raise ParameterError(f"multi-seed evaluation needs at least 2 seeds, got {len(seeds)}")
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(run_fn, seeds))
    else:
        reports = [run_fn(seed) for seed in seeds]
    result = aggregate(seeds, reports)
    log.info("[EVAL] Multi-seed evaluation completed", {"seeds": seeds, "mean": result.mean})
    return result


def compare_architectures(
    run_fn: Callable[[str, int], EvalReport],
    arch_flags: Sequence[str],
    seeds: Sequence[int],
    workers: int = 1,
) -> Dict[str, AggregateReport]:
    """
    Multi-seed evaluation of several architectures on the same splits
    :param run_fn: (arch flag, seed) -> EvalReport
    :param arch_flags: Architectures in reporting order, each listed once
    :return: Arch flag -> AggregateReport, in the order given
    """
    arch_flags = list(arch_flags)
    if not arch_flags or len(set(arch_flags)) != len(arch_flags):
        raise ParameterError(f"expected distinct architectures, got {arch_flags}")
    results = {}
    for flag in arch_flags:
        log.info("[EVAL] Benchmarking architecture", {"arch": flag, "seeds": list(seeds)})
        results[flag] = multi_seed_eval(partial(run_fn, flag), seeds, workers)
    return results


def _mean_std(mean: Optional[float], std: Optional[float]) -> str:
    if mean is None:
        return "n/a"
    if std is None:
        return f"{mean:.4f}"
    return f"{mean:.4f} ± {std:.4f}"


def format_comparison(results: Dict[str, AggregateReport]) -> str:
    """One row per architecture, mean ± sample std per metric."""
    width = max([len("arch")] + [len(flag) for flag in results])
    lines = [f"{'arch':<{width}}" + "".join(f"  {name:>17}" for name in SUMMARY_METRICS)]
    for flag, result in results.items():
        cells = (_mean_std(result.mean[name], result.std[name]) for name in SUMMARY_METRICS)
        lines.append(f"{flag:<{width}}" + "".join(f"  {cell:>17}" for cell in cells))
    return "\n".join(lines)


# Data


@dataclass(eq=False)
class FeatureSet:
    """Model inputs for one split: log-Mel images and/or canonical waveforms."""

    labels: np.ndarray
    spectrograms: Optional[np.ndarray] = None
    waveforms: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, index: np.ndarray) -> "FeatureSet":
        return FeatureSet(
            self.labels[index],
            None if self.spectrograms is None else self.spectrograms[index],
            None if self.waveforms is None else self.waveforms[index],
        )


def spectrogram_cache_key(path: Path, stft_cfg: StftConfig, mel_cfg: MelConfig) -> str:
    """Content address of one clip's image: source file identity plus every featurization setting."""
    stat = path.stat()
    document = {
        "path": str(path.resolve()),
        "size": stat.st_size,
        "mtime_ns": stat.st_mtime_ns,
        "stft": asdict(stft_cfg),
        "mel": asdict(mel_cfg),
    }
    return hashlib.sha1(json.dumps(document, sort_keys=True).encode("utf-8")).hexdigest()


def _cached_spectrograms(
    entries: Sequence[ManifestEntry],
    waves: Sequence[Waveform],
    manifest_dir: Path,
    stft_cfg: StftConfig,
    mel_cfg: MelConfig,
    workers: int,
    cache_dir: Path,
) -> np.ndarray:
    cache_dir.mkdir(parents=True, exist_ok=True)
    size = mel_cfg.image_size
    batch = np.zeros((len(entries), size, size, 1), dtype=np.float32)
    missing = []
    files = []
    for index, entry in enumerate(entries):
        cached = cache_dir / f"{spectrogram_cache_key(resolve_entry_path(entry, manifest_dir), stft_cfg, mel_cfg)}.afsp"
        files.append(cached)
        if not cached.is_file():
            missing.append(index)
            continue
        try:
            image = read_spectrogram(cached)
        except FormatError as e:
            log.warning("[TRAIN] Ignoring unreadable cache entry", {"file": str(cached), "error": str(e)})
            missing.append(index)
            continue
        if image.shape != (size, size):
            missing.append(index)
            continue
        batch[index, :, :, 0] = image
    if missing:
        fresh = featurize_batch([waves[i] for i in missing], stft_cfg, mel_cfg, workers)
        for offset, index in enumerate(missing):
            batch[index] = fresh[offset]
            write_spectrogram(files[index], fresh[offset, :, :, 0])
    log.debug(
        "[TRAIN] Spectrogram cache consulted",
        {"cache_dir": str(cache_dir), "hits": len(entries) - len(missing), "misses": len(missing)},
    )
    return batch


def build_feature_set(
    entries: Sequence[ManifestEntry],
    manifest_dir,
    need_spectrograms: bool = True,
    need_waveforms: bool = True,
    stft_cfg: StftConfig = StftConfig(),
    mel_cfg: MelConfig = MelConfig(),
    workers: int = 1,
    split: str = "",
    wave_len: int = CANONICAL_LENGTH,
    cache_dir: Optional[PathLike] = None,
) -> FeatureSet:
    """
    Load, canonicalize and featurize the clips of one split
    :param entries: Manifest rows of the split
    :param manifest_dir: Directory relative paths are resolved against
    :param wave_len: Length of the waveform input; images are always computed from the
        full canonical clip
    :param cache_dir: Optional directory of AFSP image files reused across runs
    :return: FeatureSet in manifest order
    """
    if not entries:
        raise EmptySplitError(f"split {split or '?'} has no rows")
    waves = [load_canonical(entry, Path(manifest_dir)) for entry in entries]
    labels = np.array([entry.label for entry in entries], dtype=np.int64)
    spectrograms = None
    if need_spectrograms and cache_dir:
        spectrograms = _cached_spectrograms(
            entries, waves, Path(manifest_dir), stft_cfg, mel_cfg, workers, Path(cache_dir)
        )
    elif need_spectrograms:
        spectrograms = featurize_batch(waves, stft_cfg, mel_cfg, workers)
    waveforms = None
    if need_waveforms:
        waveforms = np.stack([pad_or_truncate(w, wave_len).samples for w in waves]).astype(np.float32)
    log.info("[TRAIN] Split featurized", {"split": split, "clips": len(entries)})
    return FeatureSet(labels, spectrograms, waveforms)


def select_split(entries: Sequence[ManifestEntry], split: str) -> List[ManifestEntry]:
    rows = [e for e in entries if e.split == split]
    if not rows:
        raise EmptySplitError(f"manifest has no rows in split {split!r}")
    return rows


# Training loop


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float
    val_auc: Optional[float]


class EarlyStopping:
    """Track the best validation accuracy; ties keep the earlier epoch."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_epoch = 0
        self.best_value = -math.inf
        self.stale = 0

    def update(self, epoch: int, value: float) -> bool:
        if value > self.best_value:
            self.best_value = value
            self.best_epoch = epoch
            self.stale = 0
            return True
        self.stale += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.stale >= self.patience


@dataclass
class TrainResult:
    best_epoch: int
    best_val_acc: float
    best_state: Dict[str, np.ndarray]
    history: List[EpochRecord]
    class_weights: Tuple[float, float]


def history_frame(history: Sequence[EpochRecord]) -> pd.DataFrame:
    return pd.DataFrame([asdict(r) for r in history], columns=HISTORY_COLUMNS)


def write_history(history: Sequence[EpochRecord], path) -> None:
    history_frame(history).to_csv(path, index=False, float_format="%.8f", lineterminator="\n")


def evaluate(model: AudioFuseModel, data: FeatureSet, batch_size: int = 32) -> Tuple[np.ndarray, EvalReport]:
    probs = model.predict(data.spectrograms, data.waveforms, batch_size)
    return probs, metrics(probs, data.labels)


def _trainable_parameters(model: AudioFuseModel, trainable: str) -> List[Parameter]:
    return model.head_parameters() if trainable == "head" else model.parameters()


def _set_train_mode(model: AudioFuseModel, trainable: str) -> None:
    model.train()
    if trainable == "head":
        for branch in model.branch_modules():
            branch.eval()


def train(
    model: AudioFuseModel,
    train_set: FeatureSet,
    val_set: FeatureSet,
    cfg: TrainConfig,
) -> TrainResult:
    """
    Fit with early stopping on validation accuracy and restore the best epoch's weights
    :param model: Freshly built or pre-trained model
    :param train_set: Training inputs
    :param val_set: Validation inputs
    :param cfg: Optimizer and loop settings
    :return: TrainResult with the per-epoch history
    """
    if len(train_set) == 0:
        raise EmptySplitError("training split is empty")
    if len(val_set) == 0:
        raise EmptySplitError("validation split is empty")

    weights = resolve_class_weights(cfg, train_set.labels)
    params = _trainable_parameters(model, cfg.trainable)
    frozen = [p for p in model.parameters() if all(p is not q for q in params)]
    for p in frozen:
        p.requires_grad = False
    optimizer = AdamW(params, cfg)
    order_rng = np.random.default_rng([cfg.seed, 0x5EED])
    stopper = EarlyStopping(cfg.patience)
    best_state = {name: value.copy() for name, value in model.state_dict().items()}
    history: List[EpochRecord] = []
    log.info(
        "[TRAIN] Starting training",
        {
            "arch": model.cfg.arch_flag,
            "train_clips": len(train_set),
            "val_clips": len(val_set),
            "class_weights": list(weights),
            "trainable": cfg.trainable,
            "parameters": sum(p.size for p in params),
        },
    )
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            _set_train_mode(model, cfg.trainable)
            order = order_rng.permutation(len(train_set))
            total_loss = 0.0
            for batch_index, start in enumerate(range(0, len(order), cfg.batch_size)):
                batch = train_set.take(order[start : start + cfg.batch_size])
                probs = model(batch.spectrograms, batch.waveforms)
                loss = weighted_bce(probs, batch.labels, weights)
                if not np.isfinite(loss.item()):
                    raise NumericError(
                        f"non-finite loss {loss.item()} at epoch {epoch}, batch {batch_index}"
                    )
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                total_loss += loss.item() * len(batch)

            val_probs, report = evaluate(model, val_set, cfg.batch_size)
            record = EpochRecord(
                epoch=epoch,
                train_loss=total_loss / len(train_set),
                val_loss=bce_value(val_probs, val_set.labels, weights),
                val_acc=report.accuracy,
                val_auc=report.roc_auc,
            )
            history.append(record)
            if stopper.update(epoch, report.accuracy):
                best_state = {name: value.copy() for name, value in model.state_dict().items()}
            log.debug("[TRAIN] Epoch completed", asdict(record))
            if stopper.should_stop:
                log.info(
                    "[TRAIN] Early stopping",
                    {"epoch": epoch, "best_epoch": stopper.best_epoch, "patience": cfg.patience},
                )
                break
    finally:
        for p in frozen:
            p.requires_grad = True

    model.load_state_dict(best_state)
    model.eval()
    log.info(
        "[TRAIN] Training finished",
        {"epochs": len(history), "best_epoch": stopper.best_epoch, "best_val_acc": stopper.best_value},
    )
    return TrainResult(stopper.best_epoch, stopper.best_value, best_state, history, weights)
