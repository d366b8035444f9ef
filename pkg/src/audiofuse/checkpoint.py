"""AFTN named-tensor container and model checkpoints.

Layout, all integers little-endian uint32:
    b"AFTN" | version | header length | header (UTF-8 JSON) | tensor count |
    per tensor: name length | name (UTF-8) | rank | dims... | float32 payload
"""

import json
import struct
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from src.audiofuse.errors import CheckpointError, ConfigError, FormatError
from src.audiofuse.model import AudioFuseModel, ModelConfig
from src.utils.app_logger import AppLogger

log = AppLogger(__name__)

TENSOR_MAGIC = b"AFTN"
TENSOR_VERSION = 1


def canonical_json(document) -> str:
    return json.dumps(document, sort_keys=True, separators=(",", ":"))


def write_tensors(path, tensors: Dict[str, np.ndarray], header: Optional[dict] = None) -> None:
    """
    Write a named map of tensors as float32
    :param path: Output file
    :param tensors: Name -> array of any rank
    :param header: JSON-serializable metadata stored ahead of the tensors
    :return: None
    """
    header_bytes = canonical_json(header or {}).encode("utf-8")
    chunks = [
        TENSOR_MAGIC,
        struct.pack("<II", TENSOR_VERSION, len(header_bytes)),
        header_bytes,
        struct.pack("<I", len(tensors)),
    ]
    for name in sorted(tensors):
        array = np.asarray(tensors[name], dtype="<f4")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack(f"<I{array.ndim}I", array.ndim, *array.shape))
        chunks.append(array.tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, payload: bytes, path):
        self.payload = payload
        self.path = path
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.payload):
            raise FormatError(f"{self.path}: truncated AFTN file")
        chunk = self.payload[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def uint(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def read_tensors(path) -> Tuple[dict, Dict[str, np.ndarray]]:
    """Read an AFTN file back into (header, name -> float32 array)."""
    reader = _Reader(Path(path).read_bytes(), path)
    if reader.take(4) != TENSOR_MAGIC:
        raise FormatError(f"{path} is not an AFTN tensor file")
    version = reader.uint()
    if version != TENSOR_VERSION:
        raise FormatError(f"{path}: unsupported AFTN version {version}")
    try:
        header = json.loads(reader.take(reader.uint()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: unreadable header ({e})") from None
    tensors = {}
    for _ in range(reader.uint()):
        name = reader.take(reader.uint()).decode("utf-8")
        rank = reader.uint()
        shape = tuple(reader.uint() for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64))
        tensors[name] = (
            np.frombuffer(reader.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
        )
    if reader.offset != len(reader.payload):
        raise FormatError(f"{path}: {len(reader.payload) - reader.offset} trailing bytes")
    return header, tensors


# Checkpoints


def save_checkpoint(path, model: AudioFuseModel, extra: Optional[dict] = None) -> None:
    header = {"model_config": model.cfg.to_dict(), "seed": model.seed}
    header.update(extra or {})
    write_tensors(path, model.state_dict(), header)
    log.info("[TRAIN] Checkpoint saved", {"path": str(path), "arch": model.cfg.arch_flag})


def load_checkpoint(path, expected: Optional[ModelConfig] = None) -> Tuple[AudioFuseModel, dict]:
    """
    Rebuild a model from its checkpoint
    :param path: AFTN checkpoint file
    :param expected: When given, the stored configuration must equal it
    :return: (model in eval mode, header)
    """
    if not Path(path).is_file():
        raise CheckpointError(f"checkpoint {path} does not exist")
    try:
        header, tensors = read_tensors(path)
    except FormatError as e:
        raise CheckpointError(str(e)) from None
    if "model_config" not in header:
        raise CheckpointError(f"{path}: header carries no model_config")
    try:
        cfg = ModelConfig(**header["model_config"])
    except (TypeError, ConfigError) as e:
        raise CheckpointError(f"{path}: stored model_config is not valid: {e}") from None
    if expected is not None and expected != cfg:
        differing = sorted(
            key for key, value in expected.to_dict().items() if cfg.to_dict().get(key) != value
        )
        raise CheckpointError(f"{path}: checkpoint config differs in {differing}")
    model = AudioFuseModel(cfg, seed=int(header.get("seed", 0)))
    model.load_state_dict(tensors)
    model.eval()
    return model, header
