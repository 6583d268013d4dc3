"""
Versioned binary checkpoints for MlpModel.

Layout (little-endian):

    offset  size  field
    0       4     magic b"FDCK"
    4       2     format version (uint16)
    6       2     reserved, zero
    8       4     d_in (uint32)
    12      4     hidden (uint32)
    16      4     classes (uint32)
    20      ...   float64 arrays, row-major: W1 (d_in×hidden), b1 (hidden),
                  W2 (hidden×classes), b2 (classes)
"""

import logging
import struct
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from flatdiv.core.error_handler import CheckpointError
from flatdiv.services.mlp import MlpModel

logger = logging.getLogger(__name__)

MAGIC = b"FDCK"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHHIII")
_FLOAT = np.dtype("<f8")


def encode_checkpoint(model: MlpModel) -> bytes:
    d_in, hidden, classes = model.dims
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, 0, d_in, hidden, classes)
    body = model.flat_params().astype(_FLOAT).tobytes(order="C")
    return header + body


def decode_checkpoint(blob: bytes, expected_dims: Optional[Tuple[int, int, int]] = None) -> MlpModel:
    """
    Decode a checkpoint blob.

    Args:
        blob: Bytes produced by encode_checkpoint
        expected_dims: Optional (d_in, hidden, classes) the caller requires

    Returns:
        The stored model

    Raises:
        CheckpointError: wrong magic, version, size or dimensions
    """
    if len(blob) < _HEADER.size:
        raise CheckpointError("checkpoint shorter than its header")
    magic, version, _, d_in, hidden, classes = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"not a flatdiv checkpoint (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})",
            details={"found": version, "expected": FORMAT_VERSION},
        )
    dims = (d_in, hidden, classes)
    if expected_dims is not None and tuple(expected_dims) != dims:
        raise CheckpointError(f"checkpoint dims {dims} do not match configured dims {tuple(expected_dims)}")

    n_params = d_in * hidden + hidden + hidden * classes + classes
    body = blob[_HEADER.size:]
    if len(body) != n_params * _FLOAT.itemsize:
        raise CheckpointError(f"checkpoint body has {len(body)} bytes, expected {n_params * _FLOAT.itemsize}")
    theta = np.frombuffer(body, dtype=_FLOAT).astype(np.float64)
    template = MlpModel(W1=np.zeros((d_in, hidden)), b1=np.zeros(hidden),
                        W2=np.zeros((hidden, classes)), b2=np.zeros(classes))
    return template.with_flat_params(theta)


def save_checkpoint(model: MlpModel, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(model))
    logger.debug("Checkpoint written", extra={"context": {"path": str(path), "dims": model.dims}})
    return path


def load_checkpoint(path: Union[str, Path], expected_dims: Optional[Tuple[int, int, int]] = None) -> MlpModel:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes(), expected_dims)
