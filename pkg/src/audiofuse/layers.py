"""Neural building blocks on top of the autodiff engine.

Tensors are channels-last: sequences are (batch, length, channels) and images are
(batch, height, width, channels). Each layer exists as a plain function taking its
parameter tensors and as a `Module` subclass owning them.
"""

import math
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np

from src.audiofuse import autodiff as ad
from src.audiofuse.autodiff import Parameter, Tensor
from src.audiofuse.errors import CheckpointError, ConfigError, ShapeError

BN_MOMENTUM = 0.9
NORM_EPS = 1e-5

SeedLike = Union[int, np.random.Generator, None]


def _generator(seed: SeedLike) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def glorot_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(ad.default_dtype())


class Module:
    """Container of parameters, non-trainable buffers and sub-modules."""

    def __init__(self):
        self.training = True
        self._buffers: Dict[str, np.ndarray] = {}

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for index, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{index}", item

    def named_parameters(self, prefix: str = "") -> List[Tuple[str, Parameter]]:
        found = [
            (f"{prefix}{name}", value)
            for name, value in vars(self).items()
            if isinstance(value, Parameter)
        ]
        for name, child in self._children():
            found.extend(child.named_parameters(f"{prefix}{name}."))
        return found

    def named_buffers(self, prefix: str = "") -> List[Tuple[str, np.ndarray]]:
        found = [(f"{prefix}{name}", value) for name, value in self._buffers.items()]
        for name, child in self._children():
            found.extend(child.named_buffers(f"{prefix}{name}."))
        return found

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self, include_buffers: bool = True) -> int:
        total = sum(p.size for p in self.parameters())
        if include_buffers:
            total += sum(int(b.size) for _, b in self.named_buffers())
        return total

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        expected = self.state_dict()
        missing = sorted(set(expected) - set(state))
        unexpected = sorted(set(state) - set(expected))
        if missing or unexpected:
            raise CheckpointError(
                f"state mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}"
            )
        for name, value in state.items():
            if tuple(np.shape(value)) != tuple(expected[name].shape):
                raise CheckpointError(
                    f"{name}: checkpoint shape {tuple(np.shape(value))} "
                    f"!= model shape {tuple(expected[name].shape)}"
                )
        params = dict(self.named_parameters())
        for name, value in state.items():
            if name in params:
                params[name].data = np.array(value, dtype=params[name].dtype)
        self._load_buffers(state, "")

    def _load_buffers(self, state: Dict[str, np.ndarray], prefix: str) -> None:
        for name in self._buffers:
            current = self._buffers[name]
            self._buffers[name] = np.array(state[f"{prefix}{name}"], dtype=current.dtype)
        for name, child in self._children():
            child._load_buffers(state, f"{prefix}{name}.")


# Functional forms


def affine(x: Tensor, weight: Tensor, bias: Optional[Tensor]) -> Tensor:
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"affine: input width {x.shape[-1]} != weight rows {weight.shape[0]}")
    out = x @ weight
    return out + bias if bias is not None else out


def conv1d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor],
    stride: int = 1,
    padding: str = "same",
) -> Tensor:
    """
    Cross-correlation along time
    :param x: (batch, length, ch_in)
    :param weight: (kernel, ch_in, ch_out)
    :param padding: `same` gives ceil(length / stride) outputs; `valid` pads nothing
    :return: (batch, length', ch_out)
    """
    kernel, ch_in, ch_out = weight.shape
    if x.ndim != 3 or x.shape[2] != ch_in:
        raise ShapeError(f"conv1d: expected (batch, length, {ch_in}), got {x.shape}")
    batch, length, _ = x.shape
    if padding == "same":
        out_len = -(-length // stride)
        total = max((out_len - 1) * stride + kernel - length, 0)
        left, right = total // 2, total - total // 2
        pieces = []
        if left:
            pieces.append(Tensor(np.zeros((batch, left, ch_in), dtype=x.dtype)))
        pieces.append(x)
        if right:
            pieces.append(Tensor(np.zeros((batch, right, ch_in), dtype=x.dtype)))
        x = ad.concat(pieces, axis=1) if len(pieces) > 1 else x
    elif padding != "valid":
        raise ConfigError(f"conv1d: unknown padding {padding!r}")
    if kernel > x.shape[1]:
        raise ShapeError(f"conv1d: kernel {kernel} longer than padded length {x.shape[1]}")
    windows = ad.unfold(x, kernel, stride)
    n_out = windows.shape[1]
    columns = windows.reshape(batch, n_out, kernel * ch_in)
    return affine(columns, weight.reshape(kernel * ch_in, ch_out), bias)


def conv2d_patch_embed(img: Tensor, weight: Tensor, bias: Tensor, patch: int) -> Tensor:
    """
    Non-overlapping patch projection, equivalent to a stride-`patch` Conv2D
    :param img: (batch, height, width, channels)
    :param weight: (patch, patch, channels, dim)
    :return: (batch, tokens, dim), tokens in row-major patch order
    """
    if img.ndim != 4:
        raise ShapeError(f"patch embedding expects (batch, height, width, channels), got {img.shape}")
    batch, height, width, channels = img.shape
    if height % patch or width % patch:
        raise ShapeError(f"image {height}x{width} is not divisible into {patch}x{patch} patches")
    rows, cols = height // patch, width // patch
    patches = img.reshape(batch, rows, patch, cols, patch, channels)
    patches = patches.transpose(0, 1, 3, 2, 4, 5).reshape(batch, rows * cols, patch * patch * channels)
    dim = weight.shape[-1]
    return affine(patches, weight.reshape(patch * patch * channels, dim), bias)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = NORM_EPS) -> Tensor:
    centered = x - x.mean(axis=-1, keepdims=True)
    variance = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / ad.sqrt(variance + eps) * gamma + beta


def batch_norm1d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = NORM_EPS,
) -> Tensor:
    """
    Per-channel normalization over every axis but the last
    In training mode the running statistics are updated in place.
    """
    if x.shape[-1] != gamma.shape[0]:
        raise ShapeError(f"batch_norm1d: {x.shape[-1]} channels but {gamma.shape[0]} parameters")
    axes = tuple(range(x.ndim - 1))
    if training:
        mu = x.mean(axis=axes, keepdims=True)
        centered = x - mu
        variance = (centered * centered).mean(axis=axes, keepdims=True)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu.data.reshape(-1)
        running_var *= momentum
        running_var += (1.0 - momentum) * variance.data.reshape(-1)
        normalized = centered / ad.sqrt(variance + eps)
    else:
        scale = 1.0 / np.sqrt(running_var + eps)
        normalized = (x - running_mean.astype(x.dtype)) * scale.astype(x.dtype)
    return normalized * gamma + beta


def max_pool1d(x: Tensor, size: int = 2, stride: int = 2) -> Tensor:
    if x.ndim != 3 or x.shape[1] < size:
        raise ShapeError(f"max_pool1d: need (batch, length >= {size}, channels), got {x.shape}")
    return ad.unfold(x, size, stride).max(axis=2)


def global_avg_pool(x: Tensor, axis: int = 1) -> Tensor:
    return x.mean(axis=axis)


def dropout(x: Tensor, rate: float, training: bool, seed: SeedLike = None) -> Tensor:
    """Inverted dropout; identity in eval mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = _generator(seed).random(x.shape) >= rate
    mask = keep.astype(x.dtype) / np.asarray(1.0 - rate, dtype=x.dtype)
    return x * Tensor(mask, dtype=x.dtype)


def multi_head_attention(
    queries: Tensor,
    context: Tensor,
    heads: int,
    wq: Tensor,
    bq: Tensor,
    wk: Tensor,
    bk: Tensor,
    wv: Tensor,
    bv: Tensor,
    wo: Tensor,
    bo: Tensor,
) -> Tuple[Tensor, Tensor]:
    """
    Scaled dot-product attention of `queries` over `context`, no masking
    :return: (output (batch, n_queries, dim), attention weights (batch, heads, n_queries, n_keys))
    """
    dim = wq.shape[1]
    if dim % heads:
        raise ConfigError(f"model dim {dim} is not divisible by {heads} heads")
    head_dim = dim // heads
    batch, n_queries, _ = queries.shape
    n_keys = context.shape[1]

    q = affine(queries, wq, bq).reshape(batch, n_queries, heads, head_dim).transpose(0, 2, 1, 3)
    k = affine(context, wk, bk).reshape(batch, n_keys, heads, head_dim).transpose(0, 2, 3, 1)
    v = affine(context, wv, bv).reshape(batch, n_keys, heads, head_dim).transpose(0, 2, 1, 3)

    scores = (q @ k) * (1.0 / math.sqrt(head_dim))
    weights = ad.softmax(scores, axis=-1)
    attended = (weights @ v).transpose(0, 2, 1, 3).reshape(batch, n_queries, dim)
    return affine(attended, wo, bo), weights


# Modules


class Dense(Module):
    def __init__(self, in_features: int, out_features: int, rng: SeedLike = None):
        super().__init__()
        rng = _generator(rng)
        self.weight = Parameter(glorot_uniform(rng, (in_features, out_features), in_features, out_features))
        self.bias = Parameter(np.zeros(out_features, dtype=ad.default_dtype()))

    def forward(self, x: Tensor) -> Tensor:
        return affine(x, self.weight, self.bias)


class Conv1D(Module):
    def __init__(
        self,
        ch_in: int,
        ch_out: int,
        kernel: int,
        stride: int = 1,
        padding: str = "same",
        rng: SeedLike = None,
    ):
        super().__init__()
        rng = _generator(rng)
        self.stride = stride
        self.padding = padding
        self.weight = Parameter(
            glorot_uniform(rng, (kernel, ch_in, ch_out), kernel * ch_in, kernel * ch_out)
        )
        self.bias = Parameter(np.zeros(ch_out, dtype=ad.default_dtype()))

    def forward(self, x: Tensor) -> Tensor:
        return conv1d(x, self.weight, self.bias, self.stride, self.padding)


class PatchEmbedding(Module):
    def __init__(self, patch: int, channels: int, dim: int, rng: SeedLike = None):
        super().__init__()
        rng = _generator(rng)
        self.patch = patch
        fan = patch * patch * channels
        self.weight = Parameter(glorot_uniform(rng, (patch, patch, channels, dim), fan, patch * patch * dim))
        self.bias = Parameter(np.zeros(dim, dtype=ad.default_dtype()))

    def forward(self, img: Tensor) -> Tensor:
        return conv2d_patch_embed(img, self.weight, self.bias, self.patch)


class LayerNorm(Module):
    def __init__(self, dim: int):
        super().__init__()
        self.gamma = Parameter(np.ones(dim, dtype=ad.default_dtype()), decay=False)
        self.beta = Parameter(np.zeros(dim, dtype=ad.default_dtype()), decay=False)

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta)


class BatchNorm1D(Module):
    def __init__(self, channels: int, momentum: float = BN_MOMENTUM):
        super().__init__()
        self.momentum = momentum
        self.gamma = Parameter(np.ones(channels, dtype=ad.default_dtype()), decay=False)
        self.beta = Parameter(np.zeros(channels, dtype=ad.default_dtype()), decay=False)
        self._buffers["running_mean"] = np.zeros(channels, dtype=ad.default_dtype())
        self._buffers["running_var"] = np.ones(channels, dtype=ad.default_dtype())

    @property
    def running_mean(self) -> np.ndarray:
        return self._buffers["running_mean"]

    @property
    def running_var(self) -> np.ndarray:
        return self._buffers["running_var"]

    def forward(self, x: Tensor) -> Tensor:
        return batch_norm1d(
            x, self.gamma, self.beta, self.running_mean, self.running_var, self.training, self.momentum
        )


class Dropout(Module):
    def __init__(self, rate: float, rng: SeedLike = None):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = rate
        self.rng = _generator(rng)

    def forward(self, x: Tensor) -> Tensor:
        return dropout(x, self.rate, self.training, self.rng)


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: SeedLike = None):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"model dim {dim} is not divisible by {heads} heads")
        rng = _generator(rng)
        self.heads = heads
        self.query = Dense(dim, dim, rng)
        self.key = Dense(dim, dim, rng)
        self.value = Dense(dim, dim, rng)
        self.out = Dense(dim, dim, rng)
        self.last_weights: Optional[np.ndarray] = None

    def forward(self, queries: Tensor, context: Optional[Tensor] = None) -> Tensor:
        context = queries if context is None else context
        output, weights = multi_head_attention(
            queries,
            context,
            self.heads,
            self.query.weight,
            self.query.bias,
            self.key.weight,
            self.key.bias,
            self.value.weight,
            self.value.bias,
            self.out.weight,
            self.out.bias,
        )
        self.last_weights = weights.data
        return output


def multi_head_self_attention(x: Tensor, attention: MultiHeadAttention) -> Tensor:
    return attention(x)
