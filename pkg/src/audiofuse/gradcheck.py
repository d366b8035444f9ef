"""Central finite-difference verification of every backward rule.

Each check builds a scalar loss sum(out * r) with a fixed random r, runs backward once
and compares the analytic gradient against (L(x + h) - L(x - h)) / 2h on coordinates
sampled across the differentiated tensors. All arithmetic is 64-bit.
"""

import time
import zlib
from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from src.audiofuse import autodiff as ad
from src.audiofuse import layers as nn
from src.audiofuse.autodiff import Tensor
from src.audiofuse.model import ARCH_FLAGS, AudioFuseModel, ModelConfig
from src.utils.app_logger import AppLogger

log = AppLogger(__name__)

TOLERANCE = 1e-4
PRIMITIVE_STEP = 1e-4
COMPOSITE_STEP = 1e-6

MINI_CONFIG = ModelConfig(
    image_size=32,
    patch=16,
    embed_dim=16,
    depth=1,
    heads=2,
    mlp_hidden=32,
    wave_len=256,
    conv_filters=(4, 8, 16),
    conv_kernel=4,
    conv_stride=2,
    wave_feat=8,
    head_hidden=8,
    head_dropout=0.0,
)

FULL_CONFIG = ModelConfig(
    image_size=64,
    patch=16,
    embed_dim=32,
    depth=2,
    heads=4,
    mlp_hidden=64,
    wave_len=1024,
    conv_filters=(8, 16, 32),
    conv_kernel=8,
    conv_stride=2,
    wave_feat=16,
    head_hidden=16,
    head_dropout=0.0,
)

SIZES = {"mini": (MINI_CONFIG, 16), "full": (FULL_CONFIG, 64)}

# A case maps (rng) -> (inputs to differentiate, function of those inputs, step size)
Case = Callable[[np.random.Generator], Tuple[List[Tensor], Callable[[], Tensor], float]]


@dataclass
class GradcheckRow:
    component: str
    max_rel_error: float
    seeds: int
    passed: bool


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error ||a - n||_inf / max(||a||_inf, ||n||_inf)."""
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def check_gradients(
    inputs: Sequence[Tensor],
    fn: Callable[[], Tensor],
    rng: np.random.Generator,
    h: float,
    coordinates: int = 8,
) -> float:
    """
    Compare backward against central differences on sampled coordinates of `inputs`
    :param inputs: Leaf tensors read by `fn`; perturbed in place
    :param fn: Recomputes the output from the current input values
    :param coordinates: Number of (tensor, index) coordinates sampled over all inputs
    :return: Norm-wise relative error over the sampled coordinates
    """
    with ad.precision(np.float64):
        for tensor in inputs:
            tensor.requires_grad = True
            tensor.grad = None
        out = fn()
        weights = rng.standard_normal(out.shape)

        def loss_value() -> float:
            with ad.no_grad():
                return float(np.sum(fn().data * weights))

        (out * Tensor(weights)).sum().backward()
        sizes = np.array([t.size for t in inputs], dtype=np.float64)
        owners = rng.choice(len(inputs), size=coordinates, p=sizes / sizes.sum())
        analytic = np.zeros(coordinates)
        numeric = np.zeros(coordinates)
        for k, owner in enumerate(owners):
            tensor = inputs[owner]
            flat = tensor.data.reshape(-1)
            index = int(rng.integers(flat.size))
            if tensor.grad is not None:
                analytic[k] = tensor.grad.reshape(-1)[index]
            original = flat[index]
            flat[index] = original + h
            plus = loss_value()
            flat[index] = original - h
            minus = loss_value()
            flat[index] = original
            numeric[k] = (plus - minus) / (2.0 * h)
    return relative_error(analytic, numeric)


def _t(rng: np.random.Generator, *shape, positive: bool = False) -> Tensor:
    data = rng.uniform(0.5, 2.0, shape) if positive else rng.standard_normal(shape)
    return Tensor(data, dtype=np.float64)


# Cases


def _binary(op) -> Case:
    def case(rng):
        a, b = _t(rng, 3, 4), _t(rng, 4)
        return [a, b], lambda: op(a, b), PRIMITIVE_STEP

    return case


def _unary(op, positive: bool = False) -> Case:
    def case(rng):
        a = _t(rng, 3, 5, positive=positive)
        return [a], lambda: op(a), PRIMITIVE_STEP

    return case


def _matmul(rng):
    a, b = _t(rng, 2, 3, 4), _t(rng, 4, 5)
    return [a, b], lambda: a @ b, PRIMITIVE_STEP


def _shape_ops(rng):
    a = _t(rng, 2, 3, 4)
    return [a], lambda: a.transpose(2, 0, 1).reshape(4, 6)[1:3], PRIMITIVE_STEP


def _concat(rng):
    a, b = _t(rng, 2, 3), _t(rng, 2, 5)
    return [a, b], lambda: ad.concat([a, b], axis=1), PRIMITIVE_STEP


def _unfold(rng):
    a = _t(rng, 2, 9, 3)
    return [a], lambda: ad.unfold(a, 4, 2), PRIMITIVE_STEP


def _reductions(rng):
    a = _t(rng, 3, 4, 5)
    return [a], lambda: a.sum(axis=1) + a.mean(axis=1) + a.max(axis=1), PRIMITIVE_STEP


def _clip(rng):
    a = Tensor(rng.uniform(0.1, 0.9, (4, 3)), dtype=np.float64)
    return [a], lambda: ad.clip(a, 0.05, 0.95), PRIMITIVE_STEP


def _dense(rng):
    layer = nn.Dense(6, 4, rng)
    x = _t(rng, 3, 6)
    return [x, layer.weight, layer.bias], lambda: layer(x), COMPOSITE_STEP


def _conv(padding: str) -> Case:
    def case(rng):
        layer = nn.Conv1D(3, 4, 5, 2, padding, rng)
        x = _t(rng, 2, 17, 3)
        return [x, layer.weight, layer.bias], lambda: layer(x), COMPOSITE_STEP

    return case


def _patch_embed(rng):
    layer = nn.PatchEmbedding(4, 2, 5, rng)
    x = _t(rng, 2, 8, 8, 2)
    return [x, layer.weight, layer.bias], lambda: layer(x), COMPOSITE_STEP


def _layer_norm(rng):
    layer = nn.LayerNorm(6)
    layer.gamma.data = rng.standard_normal(6)
    layer.beta.data = rng.standard_normal(6)
    x = _t(rng, 2, 3, 6)
    return [x, layer.gamma, layer.beta], lambda: layer(x), COMPOSITE_STEP


def _batch_norm(rng):
    layer = nn.BatchNorm1D(4)
    layer.gamma.data = rng.standard_normal(4)
    x = _t(rng, 3, 7, 4)
    return [x, layer.gamma, layer.beta], lambda: layer(x), COMPOSITE_STEP


def _max_pool(rng):
    x = _t(rng, 2, 10, 3)
    return [x], lambda: nn.max_pool1d(x, 2, 2), PRIMITIVE_STEP


def _avg_pool(rng):
    x = _t(rng, 2, 6, 3)
    return [x], lambda: nn.global_avg_pool(x, axis=1), PRIMITIVE_STEP


def _dropout(rng):
    x = _t(rng, 4, 6)
    seed = int(rng.integers(2**31))
    return [x], lambda: nn.dropout(x, 0.3, training=True, seed=seed), PRIMITIVE_STEP


def _attention(rng):
    layer = nn.MultiHeadAttention(8, 2, rng)
    queries, context = _t(rng, 2, 3, 8), _t(rng, 2, 5, 8)
    inputs = [queries, context] + layer.parameters()
    return inputs, lambda: layer(queries, context), COMPOSITE_STEP


def _model(cfg: ModelConfig) -> Case:
    def case(rng):
        model = AudioFuseModel(cfg, seed=int(rng.integers(2**31)))
        spectrogram = Tensor(rng.uniform(0.0, 1.0, (2, cfg.image_size, cfg.image_size, 1)), dtype=np.float64)
        waveform = Tensor(rng.standard_normal((2, cfg.wave_len)) * 0.5, dtype=np.float64)
        model.train()
        return model.parameters(), lambda: model(spectrogram, waveform), COMPOSITE_STEP

    return case


PRIMITIVE_CASES: Dict[str, Case] = {
    "add": _binary(ad.add),
    "mul": _binary(ad.mul),
    "div": _binary(lambda a, b: a / (b * b + 1.0)),
    "power": _unary(lambda a: a**1.5, positive=True),
    "exp": _unary(lambda a: ad.exp(a)),
    "log": _unary(lambda a: ad.log(a), positive=True),
    "sqrt": _unary(lambda a: ad.sqrt(a), positive=True),
    "relu": _unary(lambda a: ad.relu(a)),
    "gelu": _unary(lambda a: ad.gelu(a)),
    "sigmoid": _unary(lambda a: ad.sigmoid(a)),
    "softmax": _unary(lambda a: ad.softmax(a, axis=-1)),
    "matmul": _matmul,
    "reshape/transpose/slice": _shape_ops,
    "concat": _concat,
    "unfold": _unfold,
    "sum/mean/max": _reductions,
    "clip": _clip,
}

LAYER_CASES: Dict[str, Case] = {
    "dense": _dense,
    "conv1d same": _conv("same"),
    "conv1d valid": _conv("valid"),
    "patch embedding": _patch_embed,
    "layer norm": _layer_norm,
    "batch norm": _batch_norm,
    "max pool": _max_pool,
    "global average pool": _avg_pool,
    "dropout": _dropout,
    "multi-head attention": _attention,
}


def model_cases(cfg: ModelConfig) -> Dict[str, Case]:
    return {f"model {flag}": _model(cfg.with_arch_flag(flag)) for flag in ARCH_FLAGS}


def run_case(name: str, case: Case, seeds: Sequence[int], coordinates: int) -> GradcheckRow:
    worst = 0.0
    for seed in seeds:
        rng = np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])
        with ad.precision(np.float64):
            inputs, fn, h = case(rng)
        worst = max(worst, check_gradients(inputs, fn, rng, h, coordinates))
    return GradcheckRow(name, worst, len(seeds), worst < TOLERANCE)


def run_gradcheck(size: str = "mini", seeds: int = 20) -> List[GradcheckRow]:
    """
    Run the whole suite
    :param size: `mini` or `full`; selects the end-to-end model size and sample density
    :param seeds: Number of random seeds per component
    :return: One row per component
    """
    cfg, coordinates = SIZES[size]
    cases = {**PRIMITIVE_CASES, **LAYER_CASES, **model_cases(cfg)}
    started = time.monotonic()
    rows = [run_case(name, case, range(seeds), coordinates) for name, case in cases.items()]
    log.info(
        "[GRADCHECK] Suite completed",
        {
            "size": size,
            "seeds": seeds,
            "failed": [r.component for r in rows if not r.passed],
            "seconds": round(time.monotonic() - started, 2),
        },
    )
    return rows


def format_table(rows: Sequence[GradcheckRow]) -> str:
    width = max(len(r.component) for r in rows)
    lines = [f"{'component':<{width}}  max_rel_error  status"]
    for r in rows:
        lines.append(f"{r.component:<{width}}  {r.max_rel_error:13.3e}  {'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)
