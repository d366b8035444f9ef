"""Time-frequency front-end: radix-2 FFT, STFT, power, Mel filterbank and the 224x224 log-Mel image."""

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from src.audiofuse.errors import FormatError, ParameterError, ShapeError, SizeError
from src.audiofuse.signal_io import Waveform
from src.utils.app_logger import AppLogger

log = AppLogger(__name__)

LOG_OFFSET = 1e-6
IMAGE_SIZE = 224
SPECTROGRAM_MAGIC = b"AFSP"
SPECTROGRAM_VERSION = 1


@dataclass(frozen=True)
class StftConfig:
    n_fft: int = 1024
    hop: int = 256
    window: str = "hann"

    def __post_init__(self):
        if self.n_fft < 1 or self.n_fft & (self.n_fft - 1):
            raise ParameterError(f"n_fft must be a power of two, got {self.n_fft}")
        if not 0 < self.hop <= self.n_fft:
            raise ParameterError(f"hop must lie in (0, n_fft], got {self.hop}")
        if self.window not in ("hann", "rectangular"):
            raise ParameterError(f"unknown window {self.window!r}")


@dataclass(frozen=True)
class MelConfig:
    n_mels: int = 128
    fmin: float = 20.0
    fmax: float = 2000.0
    image_size: int = IMAGE_SIZE


@dataclass(frozen=True, eq=False)
class ComplexSpectrogram:
    frames: np.ndarray
    config: StftConfig


@dataclass(frozen=True, eq=False)
class PowerSpectrogram:
    frames: np.ndarray


@dataclass(frozen=True, eq=False)
class MelFilterbank:
    weights: np.ndarray
    fmin: float
    fmax: float
    centers: np.ndarray


@dataclass(frozen=True, eq=False)
class LogMelSpectrogram:
    image: np.ndarray
    normalization: Tuple[float, float]


# Fourier transform


def _bit_reverse_indices(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    indices = np.arange(n)
    reversed_indices = np.zeros(n, dtype=np.intp)
    for bit in range(bits):
        reversed_indices |= ((indices >> bit) & 1) << (bits - 1 - bit)
    return reversed_indices


def fft(frame: np.ndarray) -> np.ndarray:
    """Unnormalized radix-2 decimation-in-time DFT along the last axis.

    Leading axes are treated as a batch of independent frames.
    """
    x = np.asarray(frame, dtype=np.complex128)
    n = x.shape[-1] if x.ndim else 0
    if n < 1 or n & (n - 1):
        raise SizeError(f"FFT length must be a power of two, got {n}")
    x = x[..., _bit_reverse_indices(n)]
    batch = x.shape[:-1]
    m = 2
    while m <= n:
        half = m // 2
        twiddle = np.exp(-2j * np.pi * np.arange(half) / m)
        blocks = x.reshape(batch + (n // m, m))
        u = blocks[..., :half]
        t = blocks[..., half:] * twiddle
        x = np.concatenate([u + t, u - t], axis=-1).reshape(batch + (n,))
        m <<= 1
    return x


def window_function(name: str, n: int) -> np.ndarray:
    if name == "rectangular":
        return np.ones(n)
    # periodic Hann
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def stft(w: Waveform, cfg: StftConfig) -> ComplexSpectrogram:
    """
    Short-time Fourier transform keeping bins 0..n_fft/2
    :param w: Input waveform
    :param cfg: Frame length, hop and window
    :return: Complex spectrogram of shape (n_frames, n_fft/2 + 1)
    """
    if len(w) < cfg.n_fft:
        raise SizeError(f"signal of {len(w)} samples is shorter than one {cfg.n_fft}-sample frame")
    n_frames = (len(w) - cfg.n_fft) // cfg.hop + 1
    frames = sliding_window_view(w.samples, cfg.n_fft)[:: cfg.hop][:n_frames]
    windowed = frames * window_function(cfg.window, cfg.n_fft)
    spectrum = fft(windowed)[:, : cfg.n_fft // 2 + 1]
    return ComplexSpectrogram(spectrum, cfg)


def power(spec: ComplexSpectrogram) -> PowerSpectrogram:
    return PowerSpectrogram(spec.frames.real**2 + spec.frames.imag**2)


# Mel scale


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=16)
def mel_filterbank(
    sample_rate: int, n_fft: int, n_mels: int, fmin: float, fmax: float
) -> MelFilterbank:
    """
    Triangular filters with vertices equally spaced on the Mel axis
    Each triangle rises from its left vertex to its center frequency. The bin nearest the
    center carries weight 1.0, so every row has a non-empty contiguous support peaking at 1.0
    even where the filters are narrower than the bin spacing.
    :return: Filterbank of shape (n_mels, n_fft/2 + 1)
    """
    if not 0.0 <= fmin < fmax <= sample_rate / 2:
        raise ParameterError(
            f"need 0 <= fmin < fmax <= {sample_rate / 2} Hz, got fmin={fmin}, fmax={fmax}"
        )
    if n_mels < 2:
        raise ParameterError(f"n_mels must be at least 2, got {n_mels}")
    vertices = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    bin_freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft

    left, center, right = vertices[:-2, None], vertices[1:-1, None], vertices[2:, None]
    rising = (bin_freqs[None, :] - left) / (center - left)
    falling = (right - bin_freqs[None, :]) / (right - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    nearest = np.rint(vertices[1:-1] * n_fft / sample_rate).astype(np.intp)
    narrow = int(np.sum(weights[np.arange(n_mels), nearest] < 1.0))
    weights[np.arange(n_mels), nearest] = 1.0
    log.debug(
        "[DSP] Mel filterbank built",
        {"n_mels": n_mels, "n_fft": n_fft, "peaks_snapped_to_bin": narrow},
    )
    weights.setflags(write=False)
    return MelFilterbank(weights, float(fmin), float(fmax), vertices[1:-1])


# Image


def _resize_axis(matrix: np.ndarray, new_len: int, axis: int) -> np.ndarray:
    old_len = matrix.shape[axis]
    if new_len == old_len:
        return matrix
    if old_len == 1 or new_len == 1:
        coords = np.zeros(new_len)
    else:
        coords = np.arange(new_len) * ((old_len - 1) / (new_len - 1))
    lower = np.clip(np.floor(coords).astype(np.intp), 0, old_len - 1)
    upper = np.minimum(lower + 1, old_len - 1)
    frac = coords - lower
    shape = [1] * matrix.ndim
    shape[axis] = new_len
    frac = frac.reshape(shape)
    return np.take(matrix, lower, axis=axis) * (1.0 - frac) + np.take(matrix, upper, axis=axis) * frac


def bilinear_resize(matrix: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Align-corners bilinear resize of a 2-D matrix."""
    matrix = np.asarray(matrix, dtype=np.float64)
    return _resize_axis(_resize_axis(matrix, rows, 0), cols, 1)


def log_mel_image(
    p: PowerSpectrogram, fb: MelFilterbank, size: int = IMAGE_SIZE
) -> LogMelSpectrogram:
    """
    Project onto the filterbank, log-compress, resize and min-max normalize
    :param p: Power spectrogram (n_frames, bins)
    :param fb: Mel filterbank (n_mels, bins)
    :return: size x size image, frequency on rows and time on columns
    """
    if fb.weights.shape[1] != p.frames.shape[1]:
        raise ShapeError(
            f"filterbank has {fb.weights.shape[1]} bins but spectrogram has {p.frames.shape[1]}"
        )
    mel_power = fb.weights @ p.frames.T
    log_mel = np.log(mel_power + LOG_OFFSET)
    image = bilinear_resize(log_mel, size, size)
    low, high = float(image.min()), float(image.max())
    if high > low:
        image = (image - low) / (high - low)
    else:
        image = np.zeros_like(image)
    return LogMelSpectrogram(image, (low, high))


def featurize(
    w: Waveform, stft_cfg: StftConfig = StftConfig(), mel_cfg: MelConfig = MelConfig()
) -> LogMelSpectrogram:
    fb = mel_filterbank(w.sample_rate, stft_cfg.n_fft, mel_cfg.n_mels, mel_cfg.fmin, mel_cfg.fmax)
    return log_mel_image(power(stft(w, stft_cfg)), fb, mel_cfg.image_size)


def featurize_batch(
    waves: Sequence[Waveform],
    stft_cfg: StftConfig = StftConfig(),
    mel_cfg: MelConfig = MelConfig(),
    workers: int = 1,
) -> np.ndarray:
    """
    Featurize clips, optionally on a thread pool; output order follows input order
    :return: float32 array (batch, size, size, 1)
    """
    size = mel_cfg.image_size
    batch = np.zeros((len(waves), size, size, 1), dtype=np.float32)

    def _one(index: int) -> Tuple[int, np.ndarray]:
        return index, featurize(waves[index], stft_cfg, mel_cfg).image

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_one, range(len(waves))))
    else:
        results = [_one(i) for i in range(len(waves))]
    for index, image in results:
        batch[index, :, :, 0] = image
    log.debug("[DSP] Batch featurized", {"clips": len(waves), "workers": workers})
    return batch


def band_energy_db(
    w: Waveform, band: Tuple[float, float], cfg: StftConfig = StftConfig(n_fft=256, hop=128)
) -> float:
    """Mean per-frame power inside an Hz band, in dB."""
    p = power(stft(w, cfg)).frames
    freqs = np.arange(cfg.n_fft // 2 + 1) * w.sample_rate / cfg.n_fft
    mask = (freqs >= band[0]) & (freqs <= band[1])
    return float(10.0 * np.log10(p[:, mask].sum(axis=1).mean() + 1e-20))


# Spectrogram cache container


def write_spectrogram(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype="<f4")
    if image.ndim != 2:
        raise ShapeError(f"spectrogram cache holds 2-D matrices, got shape {image.shape}")
    rows, cols = image.shape
    with open(path, "wb") as handle:
        handle.write(SPECTROGRAM_MAGIC)
        handle.write(struct.pack("<III", SPECTROGRAM_VERSION, rows, cols))
        handle.write(image.tobytes(order="C"))


def read_spectrogram(path) -> np.ndarray:
    payload = Path(path).read_bytes()
    if len(payload) < 16 or payload[:4] != SPECTROGRAM_MAGIC:
        raise FormatError(f"{path} is not an AFSP spectrogram file")
    version, rows, cols = struct.unpack("<III", payload[4:16])
    if version != SPECTROGRAM_VERSION:
        raise FormatError(f"{path}: unsupported AFSP version {version}")
    if len(payload) != 16 + 4 * rows * cols:
        raise FormatError(f"{path}: payload size does not match {rows}x{cols}")
    return np.frombuffer(payload[16:], dtype="<f4").reshape(rows, cols).astype(np.float32)
