"""Audio ingestion, canonical waveform format, dataset manifests and synthetic PCG clips."""

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
import soundfile as sf

from src.audiofuse.errors import (
    DataNotFoundError,
    EmptySignalError,
    FormatError,
    InsufficientDataError,
    LeakageError,
    ManifestParseError,
    ParameterError,
    RefusalError,
    UnsupportedEncodingError,
)
from src.utils.app_logger import AppLogger

log = AppLogger(__name__)

CANONICAL_RATE = 22050
CANONICAL_LENGTH = 110250
SYNTH_RATE = 2000
SYNTH_SECONDS = 5.0

MANIFEST_COLUMNS = ["path", "label", "patient_id", "split"]
SPLITS = ("train", "validation", "test")
CUE_MODES = ("spectral_only", "temporal_only", "both", "split")

PathLike = Union[str, os.PathLike]


@dataclass(frozen=True, eq=False)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if samples.size == 0:
            raise EmptySignalError("waveform has no samples")
        if int(self.sample_rate) <= 0:
            raise ParameterError(f"sample rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return int(self.samples.size)

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: int
    patient_id: str
    split: Optional[str] = None
    cue: Optional[str] = None


@dataclass(frozen=True)
class SynthSpec:
    n_per_class: int
    rng_seed: int
    heart_rate_range: Tuple[float, float] = (60.0, 100.0)
    murmur_band: Tuple[float, float] = (150.0, 400.0)
    cue_mode: str = "both"
    sample_rate: int = SYNTH_RATE
    duration: float = SYNTH_SECONDS
    snr_db: float = 20.0

    def __post_init__(self):
        low, high = self.heart_rate_range
        if not 40.0 <= low <= high <= 200.0:
            raise ParameterError(
                f"heart_rate_range must lie within [40, 200] bpm, got {self.heart_rate_range}"
            )
        band_low, band_high = self.murmur_band
        if not 0.0 < band_low < band_high < self.sample_rate / 2:
            raise ParameterError(
                f"murmur_band {self.murmur_band} must lie below Nyquist ({self.sample_rate / 2} Hz)"
            )
        if self.cue_mode not in CUE_MODES:
            raise ParameterError(f"unknown cue_mode {self.cue_mode!r}, expected one of {CUE_MODES}")
        if self.n_per_class < 1:
            raise ParameterError("n_per_class must be at least 1")


# WAV container


def read_wav(path: PathLike) -> Waveform:
    """
    Read a RIFF/WAVE file as a mono waveform scaled to [-1, 1]
    :param path: WAV file location
    :return: Waveform at the file's native sample rate
    """
    path = Path(path)
    if not path.is_file():
        raise DataNotFoundError(f"audio file not found: {path}")
    try:
        info = sf.info(str(path))
    except RuntimeError as err:
        raise FormatError(f"malformed WAV header in {path}: {err}") from err
    if info.format not in ("WAV", "WAVEX"):
        raise FormatError(f"{path} is a {info.format} container, expected RIFF/WAVE")
    if info.subtype not in ("PCM_16", "FLOAT"):
        raise UnsupportedEncodingError(
            f"{path} uses {info.subtype}; only 16-bit integer and 32-bit float PCM are supported"
        )
    if info.frames == 0:
        raise EmptySignalError(f"{path} has an empty sample payload")
    data, rate = sf.read(str(path), dtype="float64", always_2d=True)
    return Waveform(data.mean(axis=1), rate)


def write_wav(w: Waveform, path: PathLike, subtype: str = "PCM_16") -> None:
    if subtype not in ("PCM_16", "FLOAT"):
        raise UnsupportedEncodingError(f"cannot write subtype {subtype}")
    samples = np.clip(w.samples, -1.0, 1.0) if subtype == "PCM_16" else w.samples
    sf.write(str(path), samples.astype(np.float32), w.sample_rate, subtype=subtype)


# Canonical format


def resample(w: Waveform, target_rate: int) -> Waveform:
    """
    Linear-interpolation resampling with edge clamping
    :param w: Input waveform
    :param target_rate: Output sample rate in Hz
    :return: Waveform of length round(len * target_rate / sample_rate)
    """
    if target_rate <= 0:
        raise ParameterError(f"target rate must be positive, got {target_rate}")
    if target_rate == w.sample_rate:
        return Waveform(w.samples.copy(), w.sample_rate)
    # round half up, in exact integer arithmetic
    n_out = (2 * len(w) * target_rate + w.sample_rate) // (2 * w.sample_rate)
    if n_out == 0:
        raise EmptySignalError("resampling produced an empty signal")
    positions = np.arange(n_out, dtype=np.float64) * (w.sample_rate / target_rate)
    grid = np.arange(len(w), dtype=np.float64)
    return Waveform(np.interp(positions, grid, w.samples), target_rate)


def pad_or_truncate(w: Waveform, target_len: int) -> Waveform:
    if target_len <= 0:
        raise ParameterError(f"target length must be positive, got {target_len}")
    if len(w) >= target_len:
        return Waveform(w.samples[:target_len].copy(), w.sample_rate)
    padded = np.zeros(target_len, dtype=np.float64)
    padded[: len(w)] = w.samples
    return Waveform(padded, w.sample_rate)


def canonicalize(
    w: Waveform, rate: int = CANONICAL_RATE, length: int = CANONICAL_LENGTH
) -> Waveform:
    return pad_or_truncate(resample(w, rate), length)


# Manifests


def load_manifest(path: PathLike) -> List[ManifestEntry]:
    """
    Parse a `path,label,patient_id,split` CSV and enforce the patient leakage guard
    :param path: Manifest location
    :return: Entries in file order
    """
    path = Path(path)
    if not path.is_file():
        raise DataNotFoundError(f"manifest not found: {path}")
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except (pd.errors.EmptyDataError, pd.errors.ParserError, UnicodeDecodeError) as err:
        raise ManifestParseError(f"cannot parse manifest {path}: {err}") from err
    if list(frame.columns[: len(MANIFEST_COLUMNS)]) != MANIFEST_COLUMNS:
        raise ManifestParseError(
            f"manifest {path} header must start with {','.join(MANIFEST_COLUMNS)}, "
            f"got {','.join(frame.columns)}"
        )
    has_cue = "cue" in frame.columns

    entries = []
    for row_number, record in enumerate(frame.to_dict("records"), start=2):
        label_token = record["label"].strip()
        if label_token not in ("0", "1"):
            raise ManifestParseError(
                f"{path}:{row_number}: unknown label {label_token!r}, expected 0 or 1"
            )
        split = record["split"].strip() or None
        if split is not None and split not in SPLITS:
            raise ManifestParseError(f"{path}:{row_number}: unknown split {split!r}")
        entries.append(
            ManifestEntry(
                path=record["path"].strip(),
                label=int(label_token),
                patient_id=record["patient_id"].strip(),
                split=split,
                cue=(record["cue"].strip() or None) if has_cue else None,
            )
        )
    check_leakage(entries)
    log.debug("[SIGNAL_IO] Manifest loaded", {"path": str(path), "entries": len(entries)})
    return entries


def check_leakage(entries: Iterable[ManifestEntry]) -> None:
    seen = {}
    for entry in entries:
        splits = seen.setdefault(entry.patient_id, set())
        splits.add(entry.split or "")
        if len(splits) > 1:
            raise LeakageError(entry.patient_id, list(splits))


def save_manifest(entries: Iterable[ManifestEntry], path: PathLike) -> None:
    entries = list(entries)
    rows = [
        {
            "path": entry.path,
            "label": entry.label,
            "patient_id": entry.patient_id,
            "split": entry.split or "",
            "cue": entry.cue or "",
        }
        for entry in entries
    ]
    columns = MANIFEST_COLUMNS + (["cue"] if any(e.cue for e in entries) else [])
    pd.DataFrame(rows, columns=MANIFEST_COLUMNS + ["cue"])[columns].to_csv(
        path, index=False, encoding="utf-8", lineterminator="\n"
    )


def split_by_patient(
    entries: List[ManifestEntry], val_fraction: float, seed: int
) -> List[ManifestEntry]:
    """
    Assign train/validation splits at patient level
    Entries already marked `test` keep their split and take no part in the shuffle.
    :param entries: Manifest entries
    :param val_fraction: Share of patients sent to validation
    :param seed: Seed of the patient shuffle
    :return: Entries with splits assigned, in input order
    """
    if not 0.0 < val_fraction < 1.0:
        raise ParameterError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    patients = sorted({e.patient_id for e in entries if e.split != "test"})
    if len(patients) < 2:
        raise InsufficientDataError(
            f"patient-level split needs at least 2 patients, got {len(patients)}"
        )
    order = np.random.default_rng(seed).permutation(len(patients))
    n_val = int(np.floor(val_fraction * len(patients) + 0.5))
    validation = {patients[i] for i in order[:n_val]}
    assigned = [
        e
        if e.split == "test"
        else ManifestEntry(
            path=e.path,
            label=e.label,
            patient_id=e.patient_id,
            split="validation" if e.patient_id in validation else "train",
            cue=e.cue,
        )
        for e in entries
    ]
    log.info(
        "[SIGNAL_IO] Patient-level split assigned",
        {"patients": len(patients), "validation_patients": n_val, "seed": seed},
    )
    return assigned


# Synthetic phonocardiograms


def _tone_burst(t: np.ndarray, start: float, width: float, freq: float) -> np.ndarray:
    center = start + width / 2
    sigma = width / 6
    envelope = np.exp(-0.5 * ((t - center) / sigma) ** 2)
    return envelope * np.sin(2 * np.pi * freq * (t - start))


def _band_noise(rng: np.random.Generator, n: int, rate: int, band: Tuple[float, float]) -> np.ndarray:
    spectrum = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, d=1.0 / rate)
    spectrum[(freqs < band[0]) | (freqs > band[1])] = 0.0
    noise = np.fft.irfft(spectrum, n)
    return noise / (np.std(noise) + 1e-12)


def _clip_cues(spec: SynthSpec, label: int, abnormal_index: int) -> Tuple[bool, bool]:
    if label == 0:
        return False, False
    if spec.cue_mode == "spectral_only":
        return True, False
    if spec.cue_mode == "temporal_only":
        return False, True
    if spec.cue_mode == "both":
        return True, True
    return (True, False) if abnormal_index % 2 == 0 else (False, True)


def synthesize_clip(spec: SynthSpec, index: int) -> Tuple[Waveform, int, str]:
    """
    Generate clip `index` of the dataset described by `spec`
    The clip depends only on (rng_seed, index).
    :return: (waveform, label, cue annotation)
    """
    label = 0 if index < spec.n_per_class else 1
    spectral_cue, temporal_cue = _clip_cues(spec, label, index - spec.n_per_class)
    rng = np.random.default_rng([spec.rng_seed, index])

    rate = spec.sample_rate
    n = int(round(spec.duration * rate))
    t = np.arange(n) / rate
    heart_sounds = np.zeros(n)
    murmur_mask = np.zeros(n)

    rr = 60.0 / rng.uniform(*spec.heart_rate_range)
    onset = rng.uniform(0.0, rr)
    while onset < spec.duration:
        gap = 0.30 * rng.uniform(0.98, 1.02)
        if temporal_cue:
            gap *= 1.0 + rng.uniform(-0.4, 0.4)
        s1_freq = rng.uniform(30.0, 45.0)
        s2_freq = rng.uniform(45.0, 70.0)
        heart_sounds += rng.uniform(0.9, 1.1) * _tone_burst(t, onset, 0.060, s1_freq)
        heart_sounds += rng.uniform(0.7, 0.9) * _tone_burst(t, onset + gap, 0.050, s2_freq)
        systole = (t >= onset + 0.060) & (t < onset + gap)
        murmur_mask[systole] = np.hanning(int(systole.sum()) + 2)[1:-1] if systole.any() else 0.0
        onset += rr

    signal_power = np.mean(heart_sounds**2)
    noise_std = np.sqrt(signal_power / (10.0 ** (spec.snr_db / 10.0)))
    clip = heart_sounds + noise_std * rng.standard_normal(n)
    if spectral_cue:
        clip += 0.25 * murmur_mask * _band_noise(rng, n, rate, spec.murmur_band)

    peak = np.max(np.abs(clip))
    if peak > 0:
        clip = 0.9 * clip / peak

    cue = {
        (False, False): "none",
        (True, False): "spectral",
        (False, True): "temporal",
        (True, True): "both",
    }[(spectral_cue, temporal_cue)]
    return Waveform(clip, rate), label, cue


def synthesize_pcg(spec: SynthSpec) -> List[Tuple[Waveform, int]]:
    """
    Generate 2 * n_per_class clips, normal clips first
    :param spec: Generator parameters
    :return: List of (waveform, label)
    """
    clips = [synthesize_clip(spec, i)[:2] for i in range(2 * spec.n_per_class)]
    log.info(
        "[SIGNAL_IO] Synthetic clips generated",
        {"clips": len(clips), "cue_mode": spec.cue_mode, "seed": spec.rng_seed},
    )
    return clips


def write_synthetic_dataset(
    spec: SynthSpec,
    out_dir: PathLike,
    force: bool = False,
    val_fraction: float = 0.2,
    split_seed: Optional[int] = None,
) -> List[ManifestEntry]:
    """
    Write the synthetic clips as 16-bit WAVs plus `manifest.csv`
    Every clip is its own synthetic patient.
    :return: The manifest entries written
    """
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise RefusalError(f"output directory {out_dir} is not empty; pass --force to overwrite")
    out_dir.mkdir(parents=True, exist_ok=True)

    entries = []
    for index in range(2 * spec.n_per_class):
        wave, label, cue = synthesize_clip(spec, index)
        name = f"clip_{index:05d}.wav"
        write_wav(wave, out_dir / name)
        entries.append(
            ManifestEntry(path=name, label=label, patient_id=f"synth-{index:05d}", cue=cue)
        )
    entries = split_by_patient(
        entries, val_fraction, spec.rng_seed if split_seed is None else split_seed
    )
    save_manifest(entries, out_dir / "manifest.csv")
    log.info(
        "[SIGNAL_IO] Synthetic dataset written",
        {"out_dir": str(out_dir), "clips": len(entries)},
    )
    return entries


def resolve_entry_path(entry: ManifestEntry, manifest_dir: PathLike) -> Path:
    path = Path(entry.path)
    return path if path.is_absolute() else Path(manifest_dir) / path


def load_canonical(entry: ManifestEntry, manifest_dir: PathLike) -> Waveform:
    return canonicalize(read_wav(resolve_entry_path(entry, manifest_dir)))
