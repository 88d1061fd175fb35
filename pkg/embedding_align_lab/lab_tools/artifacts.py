"""On-disk formats: float tensors (FTEN), 8-bit PPM views, model checkpoints
(FCKP) and tab-separated manifests. All binary integers are little-endian."""

import csv
import json
import logging
import struct
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from ..config import ModelConfig
from ..errors import ArtifactFormatError, ConfigurationError, ContractError
from .corpus import Vocabulary
from .encoders import ModelParams, parameter_shapes
from .metrics import classification_matrix
from .tensor import Tensor

logger = logging.getLogger(__name__)

TENSOR_MAGIC = b"FTEN"
TENSOR_VERSION = 1
CHECKPOINT_MAGIC = b"FCKP"
CHECKPOINT_VERSION = 1

_TENSOR_HEAD = struct.Struct("<4sHB")
_CHECKPOINT_HEAD = struct.Struct("<4sHI")
_U32 = struct.Struct("<I")


# ---------------------------------------------------------------------------
# float tensors
# ---------------------------------------------------------------------------

def tensor_to_bytes(array) -> bytes:
    array = np.asarray(array.data if isinstance(array, Tensor) else array)
    if array.ndim > 255:
        raise ContractError(f"rank {array.ndim} does not fit the tensor header")
    head = _TENSOR_HEAD.pack(TENSOR_MAGIC, TENSOR_VERSION, array.ndim)
    extents = struct.pack(f"<{array.ndim}I", *array.shape)
    return head + extents + np.ascontiguousarray(array, dtype="<f4").tobytes()


def tensor_from_bytes(buffer: bytes, path="<memory>", base: int = 0) -> np.ndarray:
    """Decode one complete FTEN record; offsets in errors are relative to the file."""
    if len(buffer) < _TENSOR_HEAD.size:
        raise ArtifactFormatError(path, base + len(buffer), "truncated tensor header")
    magic, version, rank = _TENSOR_HEAD.unpack_from(buffer, 0)
    if magic != TENSOR_MAGIC:
        raise ArtifactFormatError(path, base, f"bad magic {magic!r}")
    if version != TENSOR_VERSION:
        raise ArtifactFormatError(path, base + 4, f"unsupported tensor version {version}")
    offset = _TENSOR_HEAD.size
    if len(buffer) < offset + 4 * rank:
        raise ArtifactFormatError(path, base + len(buffer), "truncated extents")
    shape = struct.unpack_from(f"<{rank}I", buffer, offset)
    offset += 4 * rank
    expected = 4 * int(np.prod(shape, dtype=np.int64))
    payload = len(buffer) - offset
    if payload < expected:
        raise ArtifactFormatError(path, base + len(buffer), f"truncated payload ({payload} of {expected} bytes)")
    if payload > expected:
        raise ArtifactFormatError(path, base + offset + expected, "trailing bytes after payload")
    return np.frombuffer(buffer, dtype="<f4", count=expected // 4, offset=offset).astype(np.float32).reshape(shape)


def save_tensor(path, array) -> Path:
    path = Path(path)
    path.write_bytes(tensor_to_bytes(array))
    return path


def load_tensor(path) -> Tensor:
    """Read an FTEN file into a float32 tensor, bit-identical to what was saved."""
    return Tensor(tensor_from_bytes(Path(path).read_bytes(), path), dtype=np.float32)


# ---------------------------------------------------------------------------
# 8-bit images
# ---------------------------------------------------------------------------

def quantize8(image) -> np.ndarray:
    """v in [0, 1] -> round(v * 255) as bytes (halves round up)."""
    image = np.asarray(image, dtype=np.float64)
    if image.size and (image.min() < 0.0 or image.max() > 1.0):
        raise ContractError("image values must lie in [0, 1] for 8-bit export")
    return np.floor(image * 255.0 + 0.5).astype(np.uint8)


def dequantize8(data) -> np.ndarray:
    return (np.asarray(data, dtype=np.float32) / np.float32(255.0)).astype(np.float32)


def export_image8(path, image) -> Path:
    """Binary PPM (P6, maxval 255) of an S x S x 3 image."""
    path = Path(path)
    Image.fromarray(quantize8(image)).save(path, format="PPM")
    return path


def _ppm_header(path, buffer: bytes):
    """Width, height and payload offset of a binary P6 header with maxval 255."""
    if buffer[:2] != b"P6":
        raise ArtifactFormatError(path, 0, f"bad magic {buffer[:2]!r}, expected b'P6'")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(buffer) and (buffer[pos:pos + 1].isspace() or buffer[pos:pos + 1] == b"#"):
            if buffer[pos:pos + 1] == b"#":
                end = buffer.find(b"\n", pos)
                pos = len(buffer) if end < 0 else end
            pos += 1
        start = pos
        while pos < len(buffer) and buffer[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ArtifactFormatError(path, start, "malformed PPM header")
        fields.append(int(buffer[start:pos]))
    if pos >= len(buffer) or not buffer[pos:pos + 1].isspace():
        raise ArtifactFormatError(path, pos, "malformed PPM header")
    width, height, maxval = fields
    if maxval != 255:
        raise ArtifactFormatError(path, pos, f"maxval {maxval} is not 8-bit")
    payload = pos + 1
    if len(buffer) - payload != width * height * 3:
        raise ArtifactFormatError(path, len(buffer),
                                  f"payload of {len(buffer) - payload} bytes, expected {width * height * 3}")
    return width, height, payload


def import_image8(path) -> np.ndarray:
    """Read an 8-bit P6 image back into [0, 1] floats.

    Raises:
        ArtifactFormatError: wrong magic, maxval other than 255, short or long payload,
            or anything Pillow cannot decode.
    """
    _ppm_header(path, Path(path).read_bytes())
    try:
        with Image.open(path) as handle:
            if handle.format != "PPM" or handle.mode != "RGB":
                raise ArtifactFormatError(path, 0, f"expected an RGB P6 image, got {handle.format} {handle.mode}")
            data = np.asarray(handle)
    except (UnidentifiedImageError, SyntaxError, ValueError, EOFError, OSError) as e:
        raise ArtifactFormatError(path, 0, f"malformed PPM: {e}") from e
    return dequantize8(data)


def round_trip8(image) -> np.ndarray:
    """What an image becomes after 8-bit storage."""
    return dequantize8(quantize8(image))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def checkpoint_bytes(params: ModelParams) -> bytes:
    names = params.names()
    header = json.dumps({"config": params.config.model_dump(mode="json"), "metadata": params.metadata,
                         "tensors": names}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [_CHECKPOINT_HEAD.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header)), header]
    for name in names:
        record = tensor_to_bytes(params.weights[name])
        parts += [_U32.pack(len(record)), record]
    return b"".join(parts)


def save_checkpoint(path, params: ModelParams) -> Path:
    path = Path(path)
    path.write_bytes(checkpoint_bytes(params))
    logger.info(f"Saved checkpoint with {params.num_parameters()} parameters to {path}")
    return path


def load_checkpoint(path, expected_config: Optional[ModelConfig] = None) -> ModelParams:
    """Read a checkpoint; a header config differing from ``expected_config`` is an error."""
    buffer = Path(path).read_bytes()
    if len(buffer) < _CHECKPOINT_HEAD.size:
        raise ArtifactFormatError(path, len(buffer), "truncated checkpoint header")
    magic, version, header_len = _CHECKPOINT_HEAD.unpack_from(buffer, 0)
    if magic != CHECKPOINT_MAGIC:
        raise ArtifactFormatError(path, 0, f"bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise ArtifactFormatError(path, 4, f"unsupported checkpoint version {version}")
    offset = _CHECKPOINT_HEAD.size
    if len(buffer) < offset + header_len:
        raise ArtifactFormatError(path, len(buffer), "truncated checkpoint header JSON")
    try:
        header = json.loads(buffer[offset:offset + header_len].decode("utf-8"))
        config = ModelConfig.model_validate(header["config"])
    except (ValueError, KeyError) as e:
        raise ArtifactFormatError(path, offset, f"unreadable checkpoint header: {e}") from e
    offset += header_len

    if expected_config is not None and expected_config != config:
        raise ConfigurationError(f"{path}: checkpoint model config differs from the requested model config")

    weights: Dict[str, np.ndarray] = {}
    for name in header.get("tensors", []):
        if len(buffer) < offset + _U32.size:
            raise ArtifactFormatError(path, len(buffer), f"truncated record length for {name}")
        (size,) = _U32.unpack_from(buffer, offset)
        offset += _U32.size
        if len(buffer) < offset + size:
            raise ArtifactFormatError(path, len(buffer), f"truncated tensor {name}")
        weights[name] = tensor_from_bytes(buffer[offset:offset + size], path, offset)
        offset += size
    if offset != len(buffer):
        raise ArtifactFormatError(path, offset, "trailing bytes after the parameter table")
    if header.get("tensors") != [name for name, _ in parameter_shapes(config)]:
        raise ArtifactFormatError(path, _CHECKPOINT_HEAD.size, "parameter table does not match the model config")
    return ModelParams(config, weights, header.get("metadata", {}))


def checkpoint_vocabulary(params: ModelParams) -> Vocabulary:
    tokens = params.metadata.get("vocabulary")
    return Vocabulary(tuple(tokens)) if tokens else Vocabulary.default()


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def write_manifest(path, columns: Sequence[str], rows: Sequence[Dict]) -> Path:
    """UTF-8, one tab-separated record per line, header first."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=list(columns), delimiter="\t", lineterminator="\n",
                                extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)
    return path


def read_manifest(path, required: Sequence[str] = ()) -> List[Dict[str, str]]:
    with open(path, "r", newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle, delimiter="\t")
        missing = [c for c in required if c not in (reader.fieldnames or [])]
        if missing:
            raise ArtifactFormatError(path, 0, f"manifest lacks columns {missing}")
        return list(reader)


def quantization_survival(result, model: ModelParams, captions: Sequence[str],
                          vocab: Optional[Vocabulary] = None) -> bool:
    """Does the attacked image still classify as its target after 8-bit storage?"""
    index = {caption: i for i, caption in enumerate(captions)}
    if result.target_text not in index:
        raise ContractError(f"caption set lacks target {result.target_text!r}")
    row = classification_matrix(model, round_trip8(result.image)[None], captions, vocab)[0]
    return bool(np.argmax(row) == index[result.target_text])
