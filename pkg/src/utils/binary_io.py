"""
Binary artifact formats.

Two self-describing little-endian containers:

Checkpoint ("FDON1")::

    b"FDON1"
    u32 len, ArchSpec as UTF-8 JSON
    per parameter, in declaration order:
        u32 rank, u64 extents..., float64 data

Complex parameters are stored as their float64 view, i.e. with a trailing
axis of extent 2 (real, imaginary).

Dataset ("NGCS1")::

    b"NGCS1"
    u32 version, u32 record count
    per record:
        u32 len, metadata as UTF-8 JSON
        u32 tensor count
        per tensor: u32 len, UTF-8 name, u32 rank, u64 extents..., float64 data

Readers raise ``FormatError`` with the byte offset of the first problem.
"""

from __future__ import annotations

import json
import logging
import struct
from pathlib import Path
from typing import Any, Union

import numpy as np

from src.errors import DatasetIOError, FormatError, MissingCheckpointError
from src.models import ArchSpec
from src.services.operator_model import FourierDeepONet, build_empty

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"FDON1"
DATASET_MAGIC = b"NGCS1"
DATASET_VERSION = 1

Record = tuple[dict[str, Any], dict[str, np.ndarray]]
PathLike = Union[str, Path]


class _Reader:
    """Cursor over a byte buffer that reports truncation with its offset."""

    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.data):
            raise FormatError(f"truncated while reading {what}", self.offset)
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]

    def text(self, what: str) -> str:
        n = self.u32(f"{what} length")
        start = self.offset
        raw = self.take(n, what)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"{what} is not valid UTF-8", start) from e

    def json(self, what: str) -> Any:
        start = self.offset
        raw = self.text(what)
        try:
            return json.loads(raw)
        except json.JSONDecodeError as e:
            raise FormatError(f"{what} is not valid JSON", start) from e

    def tensor(self, what: str) -> np.ndarray:
        rank = self.u32(f"{what} rank")
        shape = tuple(self.u64(f"{what} extent") for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = self.take(8 * count, f"{what} data")
        return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)

    def expect_end(self) -> None:
        if self.offset != len(self.data):
            raise FormatError(f"{len(self.data) - self.offset} trailing bytes", self.offset)


def _text_bytes(text: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _tensor_bytes(array: np.ndarray) -> bytes:
    if np.iscomplexobj(array):
        array = np.ascontiguousarray(array, dtype=np.complex128).view(np.float64).reshape(array.shape + (2,))
    array = np.ascontiguousarray(array, dtype="<f8")
    header = struct.pack("<I", array.ndim) + b"".join(struct.pack("<Q", n) for n in array.shape)
    return header + array.tobytes()


def _read_file(path: PathLike) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise DatasetIOError(f"cannot read {path}: {e}") from e


def _write_file(path: PathLike, payload: bytes) -> None:
    target = Path(path)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(payload)
    except OSError as e:
        raise DatasetIOError(f"cannot write {path}: {e}") from e


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path: PathLike, model: FourierDeepONet) -> None:
    """Write ``model`` as an FDON1 checkpoint."""
    parts = [CHECKPOINT_MAGIC, _text_bytes(model.arch.model_dump_json())]
    parts += [_tensor_bytes(value) for _, value in model.named_parameters()]
    _write_file(path, b"".join(parts))
    logger.debug(f"Saved checkpoint {path}")


def load_checkpoint(path: PathLike) -> FourierDeepONet:
    """
    Read an FDON1 checkpoint.

    Raises:
        MissingCheckpointError: If ``path`` does not exist.
        FormatError: If the magic, architecture or a tensor is malformed.
    """
    if not Path(path).exists():
        raise MissingCheckpointError(f"checkpoint not found: {path}")
    reader = _Reader(_read_file(path))
    if reader.take(len(CHECKPOINT_MAGIC), "magic") != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    arch_offset = reader.offset
    document = reader.json("architecture")
    try:
        arch = ArchSpec.model_validate(document)
    except ValueError as e:
        raise FormatError(f"invalid architecture: {e}", arch_offset) from e

    model = build_empty(arch)
    for name, current in list(model.named_parameters()):
        start = reader.offset
        value = reader.tensor(name)
        if np.iscomplexobj(current):
            if value.shape != current.shape + (2,):
                raise FormatError(f"parameter '{name}' has shape {value.shape[:-1]}, expected {current.shape}", start)
            value = np.ascontiguousarray(value).view(np.complex128).reshape(current.shape)
        elif value.shape != current.shape:
            raise FormatError(f"parameter '{name}' has shape {value.shape}, expected {current.shape}", start)
        model.set_parameter(name, value)
    reader.expect_end()
    return model


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


def write_records(path: PathLike, records: list[Record]) -> None:
    """Write metadata/tensor records as an NGCS1 container."""
    parts = [DATASET_MAGIC, struct.pack("<II", DATASET_VERSION, len(records))]
    for metadata, tensors in records:
        parts.append(_text_bytes(json.dumps(metadata, sort_keys=True)))
        parts.append(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            parts.append(_text_bytes(name))
            parts.append(_tensor_bytes(tensors[name]))
    _write_file(path, b"".join(parts))
    logger.info(f"💾 Wrote {len(records)} records to {path}")


def read_records(path: PathLike) -> list[Record]:
    """
    Read an NGCS1 container.

    Raises:
        DatasetIOError: If the file cannot be read.
        FormatError: On bad magic, unknown version or truncation.
    """
    reader = _Reader(_read_file(path))
    if reader.take(len(DATASET_MAGIC), "magic") != DATASET_MAGIC:
        raise FormatError("bad dataset magic", 0)
    version_offset = reader.offset
    version = reader.u32("version")
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version}", version_offset)
    count = reader.u32("record count")
    records: list[Record] = []
    for i in range(count):
        metadata = reader.json(f"record {i} metadata")
        n_tensors = reader.u32(f"record {i} tensor count")
        tensors = {}
        for _ in range(n_tensors):
            name = reader.text(f"record {i} tensor name")
            tensors[name] = reader.tensor(f"tensor '{name}'")
        records.append((metadata, tensors))
    reader.expect_end()
    return records
