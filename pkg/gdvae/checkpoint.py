"""Binary checkpoints of model parameters.

Layout: magic ``GDVAE1``, a uint32 array count, then per array a uint32 name length, the
UTF-8 name, a uint32 rank, uint64 dims and little-endian float64 values; the footer is the
config digest as 64 ASCII hex characters followed by the magic again.
"""

import logging
import struct
from typing import Dict, Tuple

import numpy as np

from .config import TrainConfig, config_digest
from .model import GDVAE

logger = logging.getLogger("gdvae.checkpoint")

MAGIC = b"GDVAE1"
DIGEST_LENGTH = 64


class CheckpointError(ValueError):
    """Raised for corrupt checkpoints or checkpoints that do not match the config."""


def encode_arrays(arrays: Dict[str, np.ndarray], digest: str) -> bytes:
    """Serialize named arrays in name order with the given config digest."""
    if len(digest) != DIGEST_LENGTH:
        raise CheckpointError(f"Config digest must be {DIGEST_LENGTH} hex characters")
    parts = [MAGIC, struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        value = np.asarray(arrays[name], dtype="<f8")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<I", value.ndim))
        parts.append(struct.pack(f"<{value.ndim}Q", *value.shape))
        parts.append(value.tobytes(order="C"))
    parts.append(digest.encode("ascii"))
    parts.append(MAGIC)
    return b"".join(parts)


def decode_arrays(data: bytes) -> Tuple[Dict[str, np.ndarray], str]:
    """Parse checkpoint bytes into named arrays and the stored config digest."""
    if not data.startswith(MAGIC) or not data.endswith(MAGIC):
        raise CheckpointError("Not a GDVAE1 checkpoint (bad magic)")
    end = len(data) - len(MAGIC) - DIGEST_LENGTH
    if end < len(MAGIC) + 4:
        raise CheckpointError("Checkpoint truncated")
    digest = data[end : end + DIGEST_LENGTH].decode("ascii", errors="replace")

    offset = len(MAGIC)

    def take(size: int) -> bytes:
        nonlocal offset
        if offset + size > end:
            raise CheckpointError(f"Checkpoint truncated at byte {offset}")
        chunk = data[offset : offset + size]
        offset += size
        return chunk

    (count,) = struct.unpack("<I", take(4))
    arrays: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        size = int(np.prod(dims)) if rank else 1
        arrays[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(dims).astype(np.float64)
    if offset != end:
        raise CheckpointError(f"Unexpected {end - offset} trailing bytes before footer")
    return arrays, digest


def save_checkpoint(model: GDVAE, path: str) -> str:
    """Write all model parameters with the model config's digest.

    Returns:
        str: The config digest written to the footer
    """
    digest = config_digest(model.config)
    arrays = {name: p.value for name, p in model.params.items()}
    with open(path, "wb") as f:
        f.write(encode_arrays(arrays, digest))
    logger.info(f"Saved checkpoint with {len(arrays)} arrays to {path}")
    return digest


def load_checkpoint(path: str, config: TrainConfig, model: GDVAE) -> GDVAE:
    """Load parameters into ``model`` after checking the digest and every shape against ``config``."""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except FileNotFoundError:
        raise CheckpointError(f"Checkpoint not found: {path}") from None
    arrays, digest = decode_arrays(data)

    expected_digest = config_digest(config)
    if digest != expected_digest:
        raise CheckpointError(f"Checkpoint config digest {digest[:12]} does not match config {expected_digest[:12]}")

    shapes = model.shapes()
    missing = sorted(set(shapes) - set(arrays))
    extra = sorted(set(arrays) - set(shapes))
    if missing or extra:
        raise CheckpointError(f"Checkpoint arrays differ from model: missing {missing}, unexpected {extra}")
    for name, shape in shapes.items():
        if arrays[name].shape != shape:
            raise CheckpointError(f"Shape mismatch for {name}: checkpoint {arrays[name].shape}, config {shape}")

    for name, value in arrays.items():
        model.params[name].value = value.copy()
    logger.info(f"Loaded checkpoint {path}")
    return model
