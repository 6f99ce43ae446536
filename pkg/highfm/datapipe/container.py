"""
HFMP1 patch containers and split manifests

Layout (little-endian):
    magic "HFMP1" | u8 version | u8 flags (bit0: label) | u8 T | u8 C | u16 H | u16 W
    | i64 timestamps[T] | f32 data[T*C*H*W] | u8 label[H*W] (if flagged)
    | u64 FNV-1a digest of everything before it
"""

import logging
import re
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from highfm.datapipe.scenes import Location, PatchSample
from highfm.encodings import Timestamp
from highfm.errors import DigestMismatchError, MagicMismatchError, TruncatedContainerError, VersionMismatchError

logger = logging.getLogger(__name__)

MAGIC = b"HFMP1"
VERSION = 1
FLAG_LABEL = 0x01
_HEADER = struct.Struct("<5sBBBBHH")
_DIGEST = struct.Struct("<Q")

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


def encode_container(sample: PatchSample) -> bytes:
    t, c, h, w = sample.data.shape
    flags = FLAG_LABEL if sample.label is not None else 0
    if sample.label is not None and sample.label.shape != (h, w):
        raise ValueError(f"label {sample.label.shape} does not match extents {(h, w)}")
    parts = [
        _HEADER.pack(MAGIC, VERSION, flags, t, c, h, w),
        np.asarray([ts.epoch_seconds for ts in sample.timestamps], dtype="<i8").tobytes(),
        np.ascontiguousarray(sample.data, dtype="<f4").tobytes(),
    ]
    if sample.label is not None:
        parts.append(np.ascontiguousarray(sample.label, dtype=np.uint8).tobytes())
    body = b"".join(parts)
    return body + _DIGEST.pack(fnv1a64(body))


def decode_container(blob: bytes, location: Optional[Location] = None) -> PatchSample:
    if len(blob) < len(MAGIC) or blob[: len(MAGIC)] != MAGIC:
        if len(blob) < len(MAGIC) and MAGIC.startswith(blob):
            raise TruncatedContainerError("container truncated inside the magic")
        raise MagicMismatchError(f"not an HFMP1 container (magic {blob[:len(MAGIC)]!r})")
    if len(blob) < _HEADER.size:
        raise TruncatedContainerError("container truncated inside the header")
    _, version, flags, t, c, h, w = _HEADER.unpack_from(blob)
    if version != VERSION:
        raise VersionMismatchError(f"container version {version}, expected {VERSION}")

    has_label = bool(flags & FLAG_LABEL)
    n_data = t * c * h * w
    body_size = _HEADER.size + 8 * t + 4 * n_data + (h * w if has_label else 0)
    if len(blob) < body_size + _DIGEST.size:
        raise TruncatedContainerError(f"container holds {len(blob)} bytes, expected {body_size + _DIGEST.size}")
    (stored,) = _DIGEST.unpack_from(blob, body_size)
    if fnv1a64(blob[:body_size]) != stored:
        raise DigestMismatchError("container digest does not match its contents")

    offset = _HEADER.size
    epochs = np.frombuffer(blob, dtype="<i8", count=t, offset=offset)
    offset += 8 * t
    data = np.frombuffer(blob, dtype="<f4", count=n_data, offset=offset).reshape(t, c, h, w)
    offset += 4 * n_data
    label = None
    if has_label:
        label = np.frombuffer(blob, dtype=np.uint8, count=h * w, offset=offset).reshape(h, w).copy()
    return PatchSample(
        data=data.astype(np.float32),
        timestamps=[Timestamp.from_epoch(int(e)) for e in epochs],
        label=label,
        location=location,
    )


def container_name(sample: PatchSample) -> str:
    scene_id, row, col = sample.location or ("patch", 0, 0)
    return f"{scene_id}__r{row:03d}_c{col:03d}__{sample.timestamps[-1].epoch_seconds}.hfmp"


_NAME = re.compile(r"^(?P<scene>.+)__r(?P<row>\d+)_c(?P<col>\d+)__(?P<epoch>-?\d+)$")


def parse_location(path: Union[str, Path]) -> Optional[Location]:
    match = _NAME.match(Path(path).stem)
    if not match:
        return None
    return match["scene"], int(match["row"]), int(match["col"])


def write_container(path: Union[str, Path], sample: PatchSample) -> str:
    """Write one sample; returns the hex digest recorded in manifests."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = encode_container(sample)
    path.write_bytes(blob)
    return f"{_DIGEST.unpack_from(blob, len(blob) - _DIGEST.size)[0]:016x}"


def read_container(path: Union[str, Path], expected_digest: Optional[str] = None) -> PatchSample:
    path = Path(path)
    blob = path.read_bytes()
    if expected_digest is not None and len(blob) >= _DIGEST.size:
        actual = f"{_DIGEST.unpack_from(blob, len(blob) - _DIGEST.size)[0]:016x}"
        if actual != expected_digest.lower():
            # Corrupt files raise their own error first; otherwise the manifest is stale.
            decode_container(blob)
            raise DigestMismatchError(f"{path.name}: manifest digest {expected_digest} vs file digest {actual}")
    return decode_container(blob, location=parse_location(path))


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    digest: str
    year: int
    split: str

    def line(self) -> str:
        return f"{self.path}\t{self.digest}\t{self.year}\t{self.split}"


class Manifest:
    """Ordered sample references; paths are relative to the manifest's directory."""

    def __init__(self, entries: Sequence[ManifestEntry], root: Union[str, Path] = "."):
        self.entries = sorted(entries, key=lambda e: e.path)
        self.root = Path(root)

    def __len__(self) -> int:
        return len(self.entries)

    def split(self, name: str) -> List[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    @property
    def splits(self) -> Dict[str, int]:
        counts: Dict[str, int] = {}
        for e in self.entries:
            counts[e.split] = counts.get(e.split, 0) + 1
        return counts

    def load(self, split: Optional[str] = None) -> List[PatchSample]:
        """Verified reads of every entry (optionally one split)."""
        entries = self.entries if split is None else self.split(split)
        return [self.load_entry(e) for e in entries]

    def load_entry(self, entry: ManifestEntry) -> PatchSample:
        return read_container(self.root / entry.path, expected_digest=entry.digest)

    def write(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("".join(e.line() + "\n" for e in self.entries), encoding="utf-8")
        logger.info(f"wrote manifest {path} ({len(self.entries)} entries, splits {self.splits})")
        return path

    @classmethod
    def read(cls, path: Union[str, Path]) -> "Manifest":
        path = Path(path)
        entries = []
        for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 4:
                raise ValueError(f"{path}:{n}: expected 4 tab-separated fields, got {len(fields)}")
            entries.append(ManifestEntry(fields[0], fields[1], int(fields[2]), fields[3]))
        return cls(entries, root=path.parent)
