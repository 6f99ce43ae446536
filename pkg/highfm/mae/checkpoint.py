"""
HFMCKPT1 checkpoints
magic | u32 manifest length | JSON manifest | little-endian float32 buffers
| u64 FNV-1a digest of everything before it
"""

import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, Mapping, Tuple, Union

import numpy as np

from highfm.datapipe.container import fnv1a64
from highfm.errors import CheckpointError

logger = logging.getLogger(__name__)

MAGIC = b"HFMCKPT1"
_LENGTH = struct.Struct("<I")
_DIGEST = struct.Struct("<Q")


def encode_checkpoint(state: Mapping[str, np.ndarray], meta: Mapping[str, Any] = None) -> bytes:
    tensors = []
    buffers = []
    offset = 0
    for name, value in state.items():
        buf = np.ascontiguousarray(value, dtype="<f4").tobytes()
        tensors.append({"name": name, "shape": list(np.shape(value)), "offset": offset})
        buffers.append(buf)
        offset += len(buf)
    manifest = json.dumps({"meta": dict(meta or {}), "tensors": tensors}, sort_keys=True, separators=(",", ":"))
    header = manifest.encode("utf-8")
    body = MAGIC + _LENGTH.pack(len(header)) + header + b"".join(buffers)
    return body + _DIGEST.pack(fnv1a64(body))


def decode_checkpoint(blob: bytes) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"not an HFMCKPT1 checkpoint (magic {blob[:len(MAGIC)]!r})")
    start = len(MAGIC) + _LENGTH.size
    if len(blob) < start + _DIGEST.size:
        raise CheckpointError("checkpoint truncated inside the header")
    body = blob[: -_DIGEST.size]
    (stored,) = _DIGEST.unpack_from(blob, len(body))
    actual = fnv1a64(body)
    if actual != stored:
        raise CheckpointError(f"checkpoint digest mismatch: stored {stored:#018x}, computed {actual:#018x}")
    (length,) = _LENGTH.unpack_from(body, len(MAGIC))
    if len(body) < start + length:
        raise CheckpointError("checkpoint truncated inside the manifest")
    try:
        manifest = json.loads(body[start : start + length].decode("utf-8"))
        entries = manifest["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise CheckpointError(f"unreadable checkpoint manifest: {e}") from e

    payload = memoryview(body)[start + length :]
    state: Dict[str, np.ndarray] = {}
    for entry in entries:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        begin, end = entry["offset"], entry["offset"] + 4 * count
        if end > len(payload):
            raise CheckpointError(f"tensor {entry['name']} runs past the end of the checkpoint")
        state[entry["name"]] = np.frombuffer(payload[begin:end], dtype="<f4").reshape(shape).astype(np.float32)
    return state, manifest.get("meta", {})


def save_checkpoint(path: Union[str, Path], state: Mapping[str, np.ndarray], meta: Mapping[str, Any] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(state, meta))
    logger.info(f"saved checkpoint {path} ({len(state)} tensors)")
    return path


def load_checkpoint(path: Union[str, Path]) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes())


def encoder_state(state: Mapping[str, np.ndarray], prefix: str = "encoder.") -> Dict[str, np.ndarray]:
    """Strip a module prefix, keeping only the encoder's tensors."""
    return {name[len(prefix) :]: value for name, value in state.items() if name.startswith(prefix)}
