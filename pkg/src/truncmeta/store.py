"""Binary archive for p-value matrices with truncated studies.

Layout (little-endian)::

    "TPV1" | version u32 | n_records u64 | K u32
    K x (censored u8, threshold f64)
    n_records x (feature id u64, K1 x p f64, ceil(K2/8) indicator bytes)
    CRC32 u32 of every preceding byte

Indicator bits follow censored-study order, least significant bit first.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import Schema, StudyMatrix

MAGIC = b"TPV1"
FORMAT_VERSION = 1
_HEAD = struct.Struct("<4sIQI")
_DESC = struct.Struct("<Bd")
_CRC = struct.Struct("<I")


class StoreError(ValueError):
    """Unreadable or corrupt store file."""


def _record_dtype(k1: int, k2: int) -> np.dtype:
    fields = [("id", "<u8")]
    if k1:
        fields.append(("p", "<f8", (k1,)))
    nbytes = (k2 + 7) // 8
    if nbytes:
        fields.append(("bits", "u1", (nbytes,)))
    return np.dtype(fields)


@dataclass(frozen=True, eq=False)
class TruncatedStore:
    schema: Schema
    feature_ids: np.ndarray
    observed: np.ndarray
    indicators: np.ndarray
    version: int = FORMAT_VERSION

    def __post_init__(self):
        n = np.asarray(self.feature_ids).shape[0]
        object.__setattr__(self, "feature_ids", np.asarray(self.feature_ids, dtype=np.uint64))
        object.__setattr__(self, "observed",
                           np.asarray(self.observed, dtype=np.float64).reshape(n, self.schema.k1))
        object.__setattr__(self, "indicators",
                           np.asarray(self.indicators, dtype=np.uint8).reshape(n, self.schema.k2))

    def __len__(self) -> int:
        return self.feature_ids.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, TruncatedStore):
            return NotImplemented
        return (
            self.version == other.version
            and self.schema.thresholds == other.schema.thresholds
            and np.array_equal(self.feature_ids, other.feature_ids)
            # bit patterns, so -0.0 / NaN payloads would also have to match
            and np.array_equal(self.observed.view(np.uint64), other.observed.view(np.uint64))
            and np.array_equal(self.indicators, other.indicators)
        )

    def to_matrix(self) -> StudyMatrix:
        ids = tuple(str(int(i)) for i in self.feature_ids)
        return StudyMatrix(self.schema, ids, self.observed, self.indicators)

    @classmethod
    def from_matrix(cls, matrix: StudyMatrix) -> TruncatedStore:
        try:
            ids = np.array([int(f) for f in matrix.feature_ids], dtype=np.uint64)
        except (ValueError, OverflowError) as exc:
            raise ValueError("store feature ids must be unsigned 64-bit integers") from exc
        return cls(matrix.schema, ids, matrix.observed, matrix.indicators)


@dataclass(frozen=True)
class CompressionReport:
    """Value-count accounting of a truncation.

    Each sub-threshold value in a truncated study costs two stored values
    (the p-value and its index); untruncated studies are stored whole.
    """

    n_values: int
    stored_values: int
    below_fraction: float

    @property
    def stored_fraction(self) -> float:
        return self.stored_values / self.n_values if self.n_values else 1.0

    @property
    def ratio(self) -> float:
        return 1.0 - self.stored_fraction

    @property
    def compresses(self) -> bool:
        return self.ratio > 0.0

    def summary(self) -> str:
        if not self.compresses:
            return (f"no compression (sub-threshold fraction {self.below_fraction:.4%}, "
                    f"stored fraction {self.stored_fraction:.4%})")
        return (f"compression ratio {self.ratio:.4%} (sub-threshold fraction "
                f"{self.below_fraction:.4%}, stored fraction {self.stored_fraction:.4%})")


def truncate_matrix(full_pvalues, thresholds: Sequence[float | None],
                    feature_ids: Sequence[int] | None = None) -> tuple[TruncatedStore, CompressionReport]:
    """Keep only ``1{p < alpha}`` for every study that has a threshold."""
    p = np.asarray(full_pvalues, dtype=float)
    for a in thresholds:
        if a is not None and not (0.0 < a < 1.0):
            raise ValueError(f"threshold must lie in (0, 1), got {a}")
    schema = Schema(tuple(thresholds))
    if p.ndim != 2 or p.shape[1] != schema.k:
        raise ValueError(f"expected an n x {schema.k} p-value matrix, got shape {p.shape}")
    n = p.shape[0]
    ids = list(range(n)) if feature_ids is None else list(feature_ids)
    matrix = StudyMatrix.from_full_pvalues(p, schema, [str(i) for i in ids])
    store = TruncatedStore.from_matrix(matrix)
    below = int(matrix.indicators.sum())
    n_trunc = n * schema.k2
    report = CompressionReport(
        n_values=n * schema.k,
        stored_values=n * schema.k1 + 2 * below,
        below_fraction=below / n_trunc if n_trunc else 0.0,
    )
    if schema.k2 == 0:
        report = CompressionReport(n * schema.k, n * schema.k, 0.0)
    return store, report


def encode_store(store: TruncatedStore) -> bytes:
    schema = store.schema
    head = _HEAD.pack(MAGIC, store.version, len(store), schema.k)
    desc = b"".join(_DESC.pack(a is not None, 0.0 if a is None else a) for a in schema.thresholds)
    records = np.zeros(len(store), dtype=_record_dtype(schema.k1, schema.k2))
    records["id"] = store.feature_ids
    if schema.k1:
        records["p"] = store.observed
    if schema.k2:
        records["bits"] = np.packbits(store.indicators, axis=1, bitorder="little")
    payload = head + desc + records.tobytes()
    return payload + _CRC.pack(zlib.crc32(payload))


def _check_crc(blob: bytes) -> None:
    (crc,) = _CRC.unpack_from(blob, len(blob) - _CRC.size)
    if zlib.crc32(blob[: -_CRC.size]) != crc:
        raise StoreError("checksum mismatch; store file is corrupt")


def decode_store(blob: bytes) -> TruncatedStore:
    if len(blob) < _HEAD.size + _CRC.size:
        raise StoreError("store file is truncated")
    magic, version, n, k = _HEAD.unpack_from(blob, 0)
    if magic != MAGIC:
        raise StoreError(f"bad magic {magic!r}; not a truncated p-value store")
    if version != FORMAT_VERSION:
        raise StoreError(f"unsupported store version {version}")
    offset = _HEAD.size
    if len(blob) < offset + k * _DESC.size + _CRC.size:
        raise StoreError("store file is truncated")
    thresholds = []
    for _ in range(k):
        flag, alpha = _DESC.unpack_from(blob, offset)
        offset += _DESC.size
        thresholds.append(alpha if flag else None)
        if flag not in (0, 1):
            _check_crc(blob)
            raise StoreError(f"bad censoring flag {flag} in study descriptor")
    try:
        schema = Schema(tuple(thresholds))
    except ValueError as exc:
        _check_crc(blob)
        raise StoreError(f"bad study descriptor: {exc}") from exc
    dtype = _record_dtype(schema.k1, schema.k2)
    expected = offset + n * dtype.itemsize + _CRC.size
    if len(blob) < expected:
        raise StoreError("store file is truncated")
    if len(blob) > expected:
        raise StoreError("store file has trailing bytes")
    _check_crc(blob)
    records = np.frombuffer(blob, dtype=dtype, count=n, offset=offset)
    observed = records["p"].copy() if schema.k1 else np.empty((n, 0))
    if schema.k2:
        indicators = np.unpackbits(records["bits"], axis=1, count=schema.k2, bitorder="little")
    else:
        indicators = np.empty((n, 0), dtype=np.uint8)
    return TruncatedStore(schema, records["id"].copy(), observed, indicators, version)


def write_store(store: TruncatedStore, path: str | Path) -> None:
    Path(path).write_bytes(encode_store(store))


def read_store(path: str | Path) -> TruncatedStore:
    return decode_store(Path(path).read_bytes())


def is_store_file(path: str | Path) -> bool:
    with open(path, "rb") as fh:
        return fh.read(4) == MAGIC
