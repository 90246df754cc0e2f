"""Bit-exact checkpoint container I/O with lazy per-tensor access.

File layout: an 8-byte little-endian unsigned header length N, then N bytes
of UTF-8 JSON mapping tensor name -> {"dtype", "shape", "data_offsets"}
(plus an optional "__metadata__" string map), then the raw data section.
Offsets are relative to the start of the data section and contiguous in
sorted-name order on write, so identical inputs produce byte-identical
files.

Tensors are decoded to flat float64 arrays; the storage dtype is metadata.
Non-finite values are rejected on both read and write: a silent NaN in a
checkpoint corrupts every model merged from it.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ValidationError

DTYPE_SIZES = {"F32": 4, "F16": 2, "BF16": 2}

_HEADER_LEN_BYTES = 8
_MAX_HEADER_LEN = 1 << 31


@dataclass(frozen=True)
class TensorMeta:
    name: str
    dtype: str
    shape: tuple[int, ...]
    byte_range: tuple[int, int]

    @property
    def num_elements(self) -> int:
        n = 1
        for d in self.shape:
            n *= d
        return n

    @property
    def num_bytes(self) -> int:
        return self.byte_range[1] - self.byte_range[0]


@dataclass
class TensorBuffer:
    """A named tensor materialized as a flat float64 array."""

    name: str
    shape: tuple[int, ...]
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        n = 1
        for d in self.shape:
            n *= d
        if self.values.size != n:
            raise ValidationError(
                f"tensor '{self.name}': {self.values.size} values for shape {list(self.shape)}"
            )

    @property
    def num_elements(self) -> int:
        return self.values.size


@dataclass
class CheckpointHandle:
    """Immutable view of a checkpoint file; payloads are read on demand.

    Safe to share across threads once opened. ``bytes_read`` counts every
    byte pulled from disk through this handle, which lets tests assert that
    opening costs O(header), not O(payload).
    """

    path: str
    index: dict[str, TensorMeta]
    metadata: dict[str, str] | None
    data_start: int
    bytes_read: int = 0
    _file_size: int = field(default=0, repr=False)

    @property
    def total_params(self) -> int:
        return sum(m.num_elements for m in self.index.values())

    def names(self) -> list[str]:
        return sorted(self.index)


def _decode(raw: bytes, dtype: str) -> np.ndarray:
    if dtype == "F32":
        return np.frombuffer(raw, dtype="<f4").astype(np.float64)
    if dtype == "F16":
        return np.frombuffer(raw, dtype="<f2").astype(np.float64)
    if dtype == "BF16":
        bits = np.frombuffer(raw, dtype="<u2").astype(np.uint32) << np.uint32(16)
        return bits.view(np.float32).astype(np.float64)
    raise FormatError(f"unsupported dtype '{dtype}'")


def _encode(values: np.ndarray, dtype: str, name: str) -> bytes:
    with np.errstate(over="ignore"):
        if dtype == "F32":
            narrowed = values.astype(np.float32)
            out = narrowed.astype("<f4")
        elif dtype == "F16":
            narrowed = values.astype(np.float16)
            out = narrowed.astype("<f2")
        elif dtype == "BF16":
            f32 = values.astype(np.float32)
            u32 = f32.view(np.uint32)
            # round to nearest even on the upper 16 bits
            bias = np.uint32(0x7FFF) + ((u32 >> np.uint32(16)) & np.uint32(1))
            u16 = ((u32 + bias) >> np.uint32(16)).astype(np.uint16)
            narrowed = (u16.astype(np.uint32) << np.uint32(16)).view(np.float32)
            out = u16.astype("<u2")
        else:
            raise FormatError(f"unsupported dtype '{dtype}'")
    if not np.isfinite(narrowed).all():
        raise ValidationError(f"tensor '{name}': overflow for dtype {dtype}")
    return out.tobytes()


def _parse_header(raw: bytes, path: str) -> tuple[dict[str, TensorMeta], dict | None]:
    def reject_duplicates(pairs):
        d = {}
        for k, v in pairs:
            if k in d:
                raise FormatError(f"{path}: duplicate name '{k}' in header")
            d[k] = v
        return d

    try:
        header = json.loads(raw.decode("utf-8"), object_pairs_hook=reject_duplicates)
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: malformed header ({e})") from e
    if not isinstance(header, dict):
        raise FormatError(f"{path}: header is not a JSON object")

    metadata = header.pop("__metadata__", None)
    if metadata is not None:
        if not isinstance(metadata, dict) or not all(
            isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()
        ):
            raise FormatError(f"{path}: __metadata__ must map strings to strings")

    index: dict[str, TensorMeta] = {}
    for name, entry in header.items():
        if not isinstance(entry, dict):
            raise FormatError(f"{path}: entry for '{name}' is not an object")
        dtype = entry.get("dtype")
        if dtype not in DTYPE_SIZES:
            raise FormatError(f"{path}: unsupported dtype '{dtype}' for '{name}'")
        shape = entry.get("shape")
        if not isinstance(shape, list) or not all(
            isinstance(d, int) and d >= 0 for d in shape
        ):
            raise FormatError(f"{path}: bad shape for '{name}'")
        offsets = entry.get("data_offsets")
        if (
            not isinstance(offsets, list)
            or len(offsets) != 2
            or not all(isinstance(o, int) and o >= 0 for o in offsets)
            or offsets[1] < offsets[0]
        ):
            raise FormatError(f"{path}: bad data_offsets for '{name}'")
        meta = TensorMeta(name, dtype, tuple(shape), (offsets[0], offsets[1]))
        expected = meta.num_elements * DTYPE_SIZES[dtype]
        if meta.num_bytes != expected:
            raise FormatError(
                f"{path}: '{name}' declares {meta.num_bytes} bytes, "
                f"shape and dtype require {expected}"
            )
        index[name] = meta

    if not index:
        raise FormatError(f"{path}: checkpoint contains no tensors")

    spans = sorted((m.byte_range for m in index.values() if m.num_bytes), key=lambda r: r[0])
    for (b0, e0), (b1, _) in zip(spans, spans[1:]):
        if b1 < e0:
            raise FormatError(f"{path}: overlapping tensor ranges")
    return index, metadata


def open_checkpoint(path: str) -> CheckpointHandle:
    """Parse the header of *path*; no tensor payload is read."""
    file_size = os.path.getsize(path)
    with open(path, "rb") as f:
        prefix = f.read(_HEADER_LEN_BYTES)
        if len(prefix) < _HEADER_LEN_BYTES:
            raise FormatError(f"{path}: file too short for header length")
        header_len = int.from_bytes(prefix, "little")
        if header_len > _MAX_HEADER_LEN or _HEADER_LEN_BYTES + header_len > file_size:
            raise FormatError(f"{path}: header length {header_len} exceeds file size")
        raw = f.read(header_len)
    index, metadata = _parse_header(raw, path)

    data_start = _HEADER_LEN_BYTES + header_len
    data_len = file_size - data_start
    for meta in index.values():
        if meta.byte_range[1] > data_len:
            raise FormatError(f"{path}: truncated payload for '{meta.name}'")

    return CheckpointHandle(
        path=path,
        index=index,
        metadata=metadata,
        data_start=data_start,
        bytes_read=_HEADER_LEN_BYTES + header_len,
        _file_size=file_size,
    )


def read_tensor(handle: CheckpointHandle, name: str) -> TensorBuffer:
    """Decode one tensor to float64, exactly (F16/BF16 widen without loss)."""
    meta = handle.index.get(name)
    if meta is None:
        raise ValidationError(f"{handle.path}: no tensor named '{name}'")
    with open(handle.path, "rb") as f:
        f.seek(handle.data_start + meta.byte_range[0])
        raw = f.read(meta.num_bytes)
    if len(raw) != meta.num_bytes:
        raise FormatError(f"{handle.path}: truncated payload for '{name}'")
    handle.bytes_read += len(raw)
    values = _decode(raw, meta.dtype)
    if not np.isfinite(values).all():
        raise ValidationError(f"{handle.path}: non-finite value in '{name}'")
    return TensorBuffer(name=name, shape=meta.shape, values=values)


class CheckpointWriter:
    """Incremental writer: declare all tensors up front, then stream values.

    Tensors must be supplied in sorted-name order (the declared layout).
    Data lands in a temp file that is atomically renamed on close, so an
    aborted write never leaves a partial checkpoint behind.
    """

    def __init__(
        self,
        path: str,
        tensor_specs: list[tuple[str, tuple[int, ...], str]],
        metadata: dict[str, str] | None = None,
    ):
        if not tensor_specs:
            raise ValidationError("cannot write a checkpoint with no tensors")
        names = [name for name, _, _ in tensor_specs]
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise ValidationError(f"duplicate tensor names: {dupes}")
        for _, _, dtype in tensor_specs:
            if dtype not in DTYPE_SIZES:
                raise FormatError(f"unsupported dtype '{dtype}'")

        self.path = path
        self._order = sorted(tensor_specs, key=lambda s: s[0])
        header: dict = {}
        if metadata is not None:
            header["__metadata__"] = dict(sorted(metadata.items()))
        offset = 0
        self._specs: dict[str, tuple[tuple[int, ...], str]] = {}
        for name, shape, dtype in self._order:
            n = 1
            for d in shape:
                n *= d
            size = n * DTYPE_SIZES[dtype]
            header[name] = {
                "dtype": dtype,
                "shape": list(shape),
                "data_offsets": [offset, offset + size],
            }
            offset += size
            self._specs[name] = (tuple(shape), dtype)

        header_bytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
        self._tmp_path = path + ".partial"
        self._file = open(self._tmp_path, "wb")
        self._file.write(len(header_bytes).to_bytes(8, "little"))
        self._file.write(header_bytes)
        self._next = 0

    def write(self, buf: TensorBuffer) -> None:
        if self._next >= len(self._order):
            self.abort()
            raise ValidationError("all declared tensors already written")
        expected_name = self._order[self._next][0]
        if buf.name != expected_name:
            self.abort()
            raise ValidationError(
                f"tensors must be written in sorted order: got '{buf.name}', "
                f"expected '{expected_name}'"
            )
        shape, dtype = self._specs[buf.name]
        if buf.shape != shape:
            self.abort()
            raise ValidationError(f"tensor '{buf.name}': shape {buf.shape} != declared {shape}")
        if not np.isfinite(buf.values).all():
            self.abort()
            raise ValidationError(f"tensor '{buf.name}': non-finite value")
        try:
            encoded = _encode(buf.values, dtype, buf.name)
        except Exception:
            self.abort()
            raise
        self._file.write(encoded)
        self._next += 1

    def close(self) -> None:
        if self._file is None:
            return
        if self._next != len(self._order):
            self.abort()
            raise ValidationError(
                f"only {self._next} of {len(self._order)} declared tensors written"
            )
        self._file.close()
        self._file = None
        os.replace(self._tmp_path, self.path)

    def abort(self) -> None:
        if self._file is not None:
            self._file.close()
            self._file = None
        if os.path.exists(self._tmp_path):
            os.unlink(self._tmp_path)


def write_checkpoint(
    path: str,
    tensors: list[tuple[TensorBuffer, str]],
    metadata: dict[str, str] | None = None,
) -> None:
    """Write (buffer, dtype) pairs; round-trips exactly after dtype narrowing."""
    specs = [(buf.name, buf.shape, dtype) for buf, dtype in tensors]
    writer = CheckpointWriter(path, specs, metadata)
    try:
        for buf, _ in sorted(tensors, key=lambda t: t[0].name):
            writer.write(buf)
    except Exception:
        writer.abort()
        raise
    writer.close()


@dataclass
class KeyReport:
    """Result of comparing tensor indices across checkpoints."""

    common: list[str]
    missing: dict[str, list[str]]  # name -> paths lacking it
    shape_mismatch: dict[str, dict[str, list[int]]]  # name -> path -> shape
    dtype_mismatch: dict[str, dict[str, str]]  # name -> path -> dtype

    @property
    def clean(self) -> bool:
        return not (self.missing or self.shape_mismatch or self.dtype_mismatch)

    def to_dict(self) -> dict:
        return {
            "common": self.common,
            "missing": self.missing,
            "shape_mismatch": self.shape_mismatch,
            "dtype_mismatch": self.dtype_mismatch,
        }


def validate_compatibility(handles: list[CheckpointHandle]) -> KeyReport:
    """Report-only comparison of tensor names, shapes and dtypes.

    Callers decide strictness; a merge in strict mode treats any entry in
    the report as fatal, lenient mode tolerates missing names.
    """
    if len(handles) < 2:
        raise ValidationError("compatibility check needs at least two checkpoints")
    all_names = sorted(set().union(*(h.index.keys() for h in handles)))
    common, missing = [], {}
    shape_mismatch: dict[str, dict[str, list[int]]] = {}
    dtype_mismatch: dict[str, dict[str, str]] = {}
    for name in all_names:
        absent = [h.path for h in handles if name not in h.index]
        if absent:
            missing[name] = absent
            continue
        common.append(name)
        shapes = {h.path: list(h.index[name].shape) for h in handles}
        if len({tuple(s) for s in shapes.values()}) > 1:
            shape_mismatch[name] = shapes
        dtypes = {h.path: h.index[name].dtype for h in handles}
        if len(set(dtypes.values())) > 1:
            dtype_mismatch[name] = dtypes
    return KeyReport(common, missing, shape_mismatch, dtype_mismatch)
