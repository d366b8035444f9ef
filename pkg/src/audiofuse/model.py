"""AudioFuse classifiers: spectrogram ViT branch, waveform CNN branch and the fusion heads."""

from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from src.audiofuse import autodiff as ad
from src.audiofuse.autodiff import Parameter, Tensor
from src.audiofuse.errors import ConfigError, ShapeError
from src.audiofuse.layers import (
    BatchNorm1D,
    Conv1D,
    Dense,
    Dropout,
    LayerNorm,
    Module,
    MultiHeadAttention,
    PatchEmbedding,
    global_avg_pool,
    max_pool1d,
)

FUSIONS = ("concat", "film", "cross_attention")
ARCHES = ("fusion", "vit_only", "cnn_only")
ARCH_FLAGS = {
    "vit": ("vit_only", "concat"),
    "cnn": ("cnn_only", "concat"),
    "fuse-concat": ("fusion", "concat"),
    "fuse-film": ("fusion", "film"),
    "fuse-xattn": ("fusion", "cross_attention"),
}
POSITIVE_FIELDS = (
    "image_size", "patch", "in_channels", "embed_dim", "depth", "heads", "mlp_hidden",
    "wave_len", "conv_kernel", "conv_stride", "pool", "wave_feat", "head_hidden",
)


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 224
    patch: int = 16
    in_channels: int = 1
    embed_dim: int = 192
    depth: int = 6
    heads: int = 8
    mlp_hidden: int = 384
    wave_len: int = 110250
    conv_filters: Tuple[int, ...] = (64, 128, 256)
    conv_kernel: int = 16
    conv_stride: int = 4
    pool: int = 2
    wave_feat: int = 64
    fusion: str = "concat"
    arch: str = "fusion"
    head_hidden: int = 192
    head_dropout: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "conv_filters", tuple(int(c) for c in self.conv_filters))
        for name in POSITIVE_FIELDS:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer, got {getattr(self, name)}")
        if not self.conv_filters or min(self.conv_filters) < 1:
            raise ConfigError(
                f"conv_filters must be a non-empty list of positive widths, got {list(self.conv_filters)}"
            )
        if self.image_size % self.patch:
            raise ConfigError(f"image_size {self.image_size} is not divisible by patch {self.patch}")
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} is not divisible by {self.heads} heads")
        if any(b <= a for a, b in zip(self.conv_filters, self.conv_filters[1:])):
            raise ConfigError(f"conv_filters must be strictly increasing, got {self.conv_filters}")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"unknown fusion {self.fusion!r}, expected one of {FUSIONS}")
        if self.arch not in ARCHES:
            raise ConfigError(f"unknown arch {self.arch!r}, expected one of {ARCHES}")
        if not 0.0 <= self.head_dropout < 1.0:
            raise ConfigError(f"head_dropout must lie in [0, 1), got {self.head_dropout}")
        if self.wave_sequence_length() < 1:
            raise ConfigError(f"wave_len {self.wave_len} is too short for the convolution stack")

    @property
    def n_tokens(self) -> int:
        return (self.image_size // self.patch) ** 2

    @property
    def arch_flag(self) -> str:
        for flag, (arch, fusion) in ARCH_FLAGS.items():
            if arch == self.arch and (arch != "fusion" or fusion == self.fusion):
                return flag
        return self.arch

    def with_arch_flag(self, flag: str) -> "ModelConfig":
        if flag not in ARCH_FLAGS:
            raise ConfigError(f"unknown --arch {flag!r}, expected one of {sorted(ARCH_FLAGS)}")
        arch, fusion = ARCH_FLAGS[flag]
        values = asdict(self)
        values.update(arch=arch, fusion=fusion)
        return ModelConfig(**values)

    def wave_sequence_length(self) -> int:
        length = self.wave_len
        for _ in self.conv_filters:
            length = -(-length // self.conv_stride)
            length = (length - self.pool) // self.pool + 1 if length >= self.pool else 0
        return length

    def to_dict(self) -> dict:
        values = asdict(self)
        values["conv_filters"] = list(self.conv_filters)
        return values


# Branches


class TransformerBlock(Module):
    """Pre-norm encoder block: x + MHSA(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, dim: int, heads: int, mlp_hidden: int, rng: np.random.Generator):
        super().__init__()
        self.norm1 = LayerNorm(dim)
        self.attention = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Dense(dim, mlp_hidden, rng)
        self.fc2 = Dense(mlp_hidden, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attention(self.norm1(x))
        return x + self.fc2(ad.gelu(self.fc1(self.norm2(x))))


class SpectrogramViT(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = PatchEmbedding(cfg.patch, cfg.in_channels, cfg.embed_dim, rng)
        self.pos_embedding = Parameter(
            np.zeros((cfg.n_tokens, cfg.embed_dim), dtype=ad.default_dtype()), decay=False
        )
        self.blocks = [
            TransformerBlock(cfg.embed_dim, cfg.heads, cfg.mlp_hidden, rng) for _ in range(cfg.depth)
        ]
        self.norm = LayerNorm(cfg.embed_dim)

    def tokens(self, img: Tensor) -> Tensor:
        expected = (self.cfg.image_size, self.cfg.image_size, self.cfg.in_channels)
        if img.ndim != 4 or tuple(img.shape[1:]) != expected:
            raise ShapeError(f"spectrogram batch must be (batch, {expected}), got {img.shape}")
        x = self.patch_embed(img) + self.pos_embedding
        for block in self.blocks:
            x = block(x)
        return self.norm(x)

    def forward(self, img: Tensor) -> Tensor:
        return global_avg_pool(self.tokens(img), axis=1)


class WaveformCNN(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        channels = (1,) + cfg.conv_filters
        self.convs = [
            Conv1D(c_in, c_out, cfg.conv_kernel, cfg.conv_stride, "same", rng)
            for c_in, c_out in zip(channels, channels[1:])
        ]
        self.norms = [BatchNorm1D(c) for c in cfg.conv_filters]
        self.dense = Dense(cfg.conv_filters[-1], cfg.wave_feat, rng)

    def sequence(self, wave: Tensor) -> Tensor:
        if wave.ndim == 2:
            wave = wave.reshape(wave.shape[0], wave.shape[1], 1)
        if wave.ndim != 3 or wave.shape[1:] != (self.cfg.wave_len, 1):
            raise ShapeError(f"waveform batch must be (batch, {self.cfg.wave_len}), got {wave.shape}")
        x = wave
        for conv, norm in zip(self.convs, self.norms):
            x = max_pool1d(ad.relu(norm(conv(x))), self.cfg.pool, self.cfg.pool)
        return x

    def forward(self, wave: Tensor) -> Tensor:
        return self.dense(global_avg_pool(self.sequence(wave), axis=1))


# Heads


class ClassifierHead(Module):
    """affine -> relu -> dropout -> affine(1) -> sigmoid."""

    def __init__(self, in_dim: int, hidden: int, rate: float, rng: np.random.Generator):
        super().__init__()
        self.hidden = Dense(in_dim, hidden, rng)
        self.dropout = Dropout(rate, np.random.default_rng(int(rng.integers(2**63))))
        self.output = Dense(hidden, 1, rng)

    def forward(self, features: Tensor) -> Tensor:
        hidden = self.dropout(ad.relu(self.hidden(features)))
        logits = self.output(hidden)
        return ad.sigmoid(logits.reshape(logits.shape[0]))


class FiLMFusion(Module):
    def __init__(self, spec_dim: int, wave_dim: int, rng: np.random.Generator):
        super().__init__()
        self.gamma = Dense(wave_dim, spec_dim, rng)
        self.beta = Dense(wave_dim, spec_dim, rng)
        self.gate = Dense(spec_dim + wave_dim, spec_dim, rng)

    def forward(self, f_spec: Tensor, f_wave: Tensor) -> Tensor:
        modulated = self.gamma(f_wave) * f_spec + self.beta(f_wave)
        g = ad.sigmoid(self.gate(ad.concat([f_spec, f_wave], axis=1)))
        mixed = g * modulated + (1.0 - g) * f_spec
        return ad.concat([mixed, f_wave], axis=1)


class CrossAttentionFusion(Module):
    """CNN sequence attends over ViT tokens in one pre-norm block with residual."""

    def __init__(self, spec_dim: int, seq_dim: int, heads: int, rng: np.random.Generator):
        super().__init__()
        self.project = Dense(seq_dim, spec_dim, rng)
        self.norm_queries = LayerNorm(spec_dim)
        self.norm_context = LayerNorm(spec_dim)
        self.attention = MultiHeadAttention(spec_dim, heads, rng)

    def forward(self, vit_tokens: Tensor, cnn_sequence: Tensor) -> Tensor:
        queries = self.project(cnn_sequence)
        attended = queries + self.attention(
            self.norm_queries(queries), self.norm_context(vit_tokens)
        )
        return ad.concat(
            [global_avg_pool(attended, axis=1), global_avg_pool(vit_tokens, axis=1)], axis=1
        )


# Full classifier


class AudioFuseModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.vit = SpectrogramViT(cfg, rng) if cfg.arch in ("fusion", "vit_only") else None
        self.cnn = WaveformCNN(cfg, rng) if cfg.arch in ("fusion", "cnn_only") else None
        self.film = None
        self.cross_attention = None

        if cfg.arch == "vit_only":
            head_in = cfg.embed_dim
        elif cfg.arch == "cnn_only":
            head_in = cfg.wave_feat
        elif cfg.fusion == "concat":
            head_in = cfg.embed_dim + cfg.wave_feat
        elif cfg.fusion == "film":
            self.film = FiLMFusion(cfg.embed_dim, cfg.wave_feat, rng)
            head_in = cfg.embed_dim + cfg.wave_feat
        else:
            self.cross_attention = CrossAttentionFusion(
                cfg.embed_dim, cfg.conv_filters[-1], cfg.heads, rng
            )
            head_in = 2 * cfg.embed_dim
        self.head = ClassifierHead(head_in, cfg.head_hidden, cfg.head_dropout, rng)

    @staticmethod
    def _as_tensor(x) -> Tensor:
        return x if isinstance(x, Tensor) else Tensor(x)

    # Branch features

    def vit_branch(self, spectrogram) -> Tensor:
        return self.vit(self._as_tensor(spectrogram))

    def cnn_branch(self, waveform) -> Tensor:
        return self.cnn(self._as_tensor(waveform))

    # Fusion variants

    def fuse_concat(self, f_spec: Tensor, f_wave: Tensor) -> Tensor:
        return self.head(ad.concat([f_spec, f_wave], axis=1))

    def fuse_film(self, f_spec: Tensor, f_wave: Tensor) -> Tensor:
        return self.head(self.film(f_spec, f_wave))

    def fuse_cross_attention(self, vit_tokens: Tensor, cnn_sequence: Tensor) -> Tensor:
        return self.head(self.cross_attention(vit_tokens, cnn_sequence))

    # Baselines

    def vit_only(self, spectrogram) -> Tensor:
        return self.head(self.vit_branch(spectrogram))

    def cnn_only(self, waveform) -> Tensor:
        return self.head(self.cnn_branch(waveform))

    def forward(self, spectrogram=None, waveform=None) -> Tensor:
        """
        Probability of the abnormal class for each clip of the batch
        :param spectrogram: (batch, size, size, channels) log-Mel images
        :param waveform: (batch, wave_len) canonical waveforms
        :return: Tensor (batch,)
        """
        if self.cfg.arch == "vit_only":
            return self.vit_only(spectrogram)
        if self.cfg.arch == "cnn_only":
            return self.cnn_only(waveform)
        if self.cfg.fusion == "cross_attention":
            tokens = self.vit.tokens(self._as_tensor(spectrogram))
            sequence = self.cnn.sequence(self._as_tensor(waveform))
            return self.fuse_cross_attention(tokens, sequence)
        f_spec = self.vit_branch(spectrogram)
        f_wave = self.cnn_branch(waveform)
        if self.cfg.fusion == "film":
            return self.fuse_film(f_spec, f_wave)
        return self.fuse_concat(f_spec, f_wave)

    def branch_modules(self) -> List[Module]:
        return [m for m in (self.vit, self.cnn) if m is not None]

    def head_parameters(self) -> List[Parameter]:
        """Parameters of the final dense layers and of the fusion block."""
        modules = [m for m in (self.film, self.cross_attention, self.head) if m is not None]
        return [p for m in modules for p in m.parameters()]

    def predict(self, spectrogram, waveform, batch_size: int = 32) -> np.ndarray:
        """Eval-mode probabilities for a whole split, batch by batch."""
        previous = self.training
        self.eval()
        n = len(spectrogram) if spectrogram is not None else len(waveform)
        probs = []
        with ad.no_grad():
            for start in range(0, n, batch_size):
                stop = start + batch_size
                probs.append(
                    self.forward(
                        None if spectrogram is None else spectrogram[start:stop],
                        None if waveform is None else waveform[start:stop],
                    ).data
                )
        self.train(previous)
        return np.concatenate(probs) if probs else np.zeros(0)


def parameter_table(cfg: Optional[ModelConfig] = None) -> Dict[str, int]:
    """Parameter counts, batch-norm running statistics included."""
    cfg = cfg or ModelConfig()
    table = {}
    for flag in ARCH_FLAGS:
        model = AudioFuseModel(cfg.with_arch_flag(flag))
        if flag == "fuse-concat":
            table["vit_branch"] = model.vit.num_parameters()
            table["cnn_branch"] = model.cnn.num_parameters()
            table["concat_head"] = model.head.num_parameters()
        table[flag] = model.num_parameters()
    return table
