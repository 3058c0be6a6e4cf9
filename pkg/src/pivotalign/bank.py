"""Embedding banks and their bit-exact binary file format (UEB1).

A bank is an immutable row-major float32 matrix plus a flat string
metadata map.  Every embedding entering the pipeline — real encoder
output or synthetic — passes through this module.

UEB1 layout (all integers little-endian):

    bytes 0-3    magic "UEB1"
    byte  4      version = 1
    byte  5      dtype = 0 (float32)
    bytes 6-7    reserved, must be 0
    bytes 8-11   dim   (uint32)
    bytes 12-19  rows  (uint64)
    bytes 20-27  reserved, must be 0
    payload      rows * dim float32, row-major

Sidecars: ``<path>.meta.json`` holds the metadata map (absent sidecar
means empty meta except space="unknown"); ``<path>.labels`` holds one
decimal integer per row for labeled banks.
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"UEB1"
VERSION = 1
_HEADER = struct.Struct("<4sBBHIQQ")  # magic, version, dtype, res16, dim, rows, res64


class BankFormatError(ValueError):
    """Raised for any malformed or unreadable bank file."""


@dataclass(frozen=True)
class EmbeddingBank:
    """Fixed-dimension float32 vectors with metadata.

    Invariants enforced at construction: rows >= 1, dim >= 2, all values
    finite, meta contains "space".  The data array is marked read-only
    so banks are safe to share across threads.
    """

    data: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 2:
            raise ValueError(f"bank data must be 2-D, got shape {data.shape}")
        if data.shape[0] < 1:
            raise ValueError("bank must have at least 1 row")
        if data.shape[1] < 2:
            raise ValueError(f"bank dim must be >= 2, got {data.shape[1]}")
        if not np.all(np.isfinite(data)):
            raise ValueError("bank contains non-finite values")
        if "space" not in self.meta:
            raise ValueError('bank meta must contain the key "space"')
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "meta", dict(self.meta))

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class LabeledBank:
    """A bank plus one integer class/caption-group id per row.

    Labels must cover a contiguous id range starting at 0.  Training
    never reads labels; they exist for evaluation and the synthetic
    oracle only.
    """

    bank: EmbeddingBank
    labels: np.ndarray

    def __post_init__(self):
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if labels.ndim != 1 or labels.shape[0] != self.bank.rows:
            raise ValueError(
                f"labels length {labels.shape} does not match bank rows {self.bank.rows}"
            )
        distinct = np.unique(labels)
        if distinct[0] != 0 or distinct[-1] != distinct.size - 1:
            raise ValueError("label ids must be contiguous from 0")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1


def write_bank(bank: EmbeddingBank, path) -> None:
    """Write a bank as UEB1 plus its .meta.json sidecar."""
    path = str(path)
    header = _HEADER.pack(MAGIC, VERSION, 0, 0, bank.dim, bank.rows, 0)
    payload = bank.data.astype("<f4", copy=False).tobytes(order="C")
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(payload)
        with open(path + ".meta.json", "w", encoding="utf-8") as fh:
            json.dump(bank.meta, fh, sort_keys=True, indent=0)
    except OSError as exc:
        raise BankFormatError(f"cannot write bank to {path}: {exc}") from exc


def read_bank(path) -> EmbeddingBank:
    """Read a UEB1 file back into a validated bank."""
    path = str(path)
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise BankFormatError(f"cannot read bank from {path}: {exc}") from exc

    if len(raw) < _HEADER.size or raw[:4] != MAGIC:
        raise BankFormatError(f"not a UEB1 file: {path}")
    magic, version, dtype, res16, dim, rows, res64 = _HEADER.unpack_from(raw)
    if version > VERSION:
        raise BankFormatError(f"unsupported version {version} in {path}")
    if version < 1:
        raise BankFormatError(f"corrupt bank {path}: version 0")
    if dtype != 0:
        raise BankFormatError(f"unsupported dtype {dtype} in {path}")
    if res16 != 0 or res64 != 0:
        raise BankFormatError(f"corrupt bank {path}: nonzero reserved bytes")
    if rows < 1 or dim < 2:
        raise BankFormatError(f"corrupt bank {path}: rows={rows} dim={dim}")

    expected = _HEADER.size + rows * dim * 4
    if len(raw) != expected:
        raise BankFormatError(
            f"corrupt bank {path}: expected {expected} bytes, found {len(raw)}"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(rows, dim)
    if not np.all(np.isfinite(data)):
        raise BankFormatError(f"corrupt bank {path}: non-finite payload values")

    meta = {"space": "unknown"}
    try:
        with open(path + ".meta.json", "r", encoding="utf-8") as fh:
            loaded = json.load(fh)
        if not isinstance(loaded, dict):
            raise BankFormatError(f"corrupt bank {path}: meta sidecar is not a map")
        meta = {str(k): str(v) for k, v in loaded.items()}
        meta.setdefault("space", "unknown")
    except FileNotFoundError:
        pass
    except (OSError, json.JSONDecodeError) as exc:
        raise BankFormatError(f"corrupt bank {path}: bad meta sidecar: {exc}") from exc

    try:
        return EmbeddingBank(data=data.copy(), meta=meta)
    except ValueError as exc:
        raise BankFormatError(f"corrupt bank {path}: {exc}") from exc


def write_labels(labels: np.ndarray, path) -> None:
    """Write the .labels sidecar: one decimal integer per row."""
    with open(str(path), "w", encoding="utf-8") as fh:
        fh.write("\n".join(str(int(v)) for v in labels))
        fh.write("\n")


def read_labels(path) -> np.ndarray:
    try:
        with open(str(path), "r", encoding="utf-8") as fh:
            lines = [ln for ln in fh.read().splitlines() if ln.strip()]
        return np.array([int(ln) for ln in lines], dtype=np.int64)
    except OSError as exc:
        raise BankFormatError(f"cannot read labels from {path}: {exc}") from exc
    except ValueError as exc:
        raise BankFormatError(f"corrupt labels file {path}: {exc}") from exc


def write_labeled_bank(lbank: LabeledBank, path) -> None:
    write_bank(lbank.bank, path)
    write_labels(lbank.labels, str(path) + ".labels")


def read_labeled_bank(path) -> LabeledBank:
    bank = read_bank(path)
    labels = read_labels(str(path) + ".labels")
    return LabeledBank(bank=bank, labels=labels)


def l2_normalize_bank(bank: EmbeddingBank) -> EmbeddingBank:
    """New bank with every row scaled to unit norm (float64 math, float32 storage)."""
    norms = np.linalg.norm(bank.data.astype(np.float64), axis=1)
    bad = np.nonzero(norms <= 1e-12)[0]
    if bad.size:
        raise ValueError(f"zero-norm row {bad[0]}")
    normalized = (bank.data.astype(np.float64) / norms[:, None]).astype(np.float32)
    return EmbeddingBank(data=normalized, meta=bank.meta)
