"""Binary containers for vectors, codebooks and codes, plus view augmentation.

All three formats are little-endian, start with a 4-byte magic and a run of
u32 header fields, and carry a raw row-major payload:

* ``MCQV`` vectors:  count | dim | f32 payload | optional ``LBLS`` label
  section (count x u16 label counts, then the flattened u32 labels)
* ``MCQC`` codebooks: M | K | d | f32 payload, codebook-major
* ``MCQB`` codes:    count | M | K | u8 payload (u16 when K > 256)
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, DataError, FormatError

VECTOR_MAGIC = b"MCQV"
LABEL_MAGIC = b"LBLS"
CODEBOOK_MAGIC = b"MCQC"
CODE_MAGIC = b"MCQB"

_F32 = np.dtype("<f4")
_U16 = np.dtype("<u2")
_U32 = np.dtype("<u4")

Labels = Union[np.ndarray, Sequence[np.ndarray]]


@dataclass
class FeatureDataset:
    """Input vectors plus optional labels (used for evaluation only).

    ``labels`` is either a 1-D integer array (one label per row) or a
    sequence of integer arrays (a label set per row).
    """

    vectors: np.ndarray
    labels: Optional[Labels] = None

    def __post_init__(self):
        v = np.asarray(self.vectors)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise DataError(f"vectors must be a non-empty 2-D matrix, got shape {v.shape}")
        bad = ~np.isfinite(v).all(axis=1)
        if bad.any():
            raise DataError(f"non-finite value in row {int(np.flatnonzero(bad)[0])}")
        self.vectors = v
        if self.labels is not None:
            if len(self.labels) != v.shape[0]:
                raise DataError(
                    f"label count {len(self.labels)} != vector count {v.shape[0]}"
                )
            if isinstance(self.labels, np.ndarray) and self.labels.ndim == 1:
                if (self.labels < 0).any():
                    raise DataError("labels must be non-negative")

    @property
    def count(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def label_sets(self) -> list:
        """Labels as a list of integer arrays, one per row."""
        if self.labels is None:
            raise DataError("dataset has no labels")
        if isinstance(self.labels, np.ndarray) and self.labels.ndim == 1:
            return [self.labels[i : i + 1] for i in range(len(self.labels))]
        return [np.asarray(l, dtype=np.int64).ravel() for l in self.labels]

    def subset(self, index) -> "FeatureDataset":
        index = np.asarray(index)
        labels = None
        if self.labels is not None:
            if isinstance(self.labels, np.ndarray) and self.labels.ndim == 1:
                labels = self.labels[index]
            else:
                labels = [self.labels[i] for i in index]
        return FeatureDataset(self.vectors[index], labels)


@dataclass
class AugmentationConfig:
    """Feature-space view generator: Gaussian noise then inverted dropout."""

    noise_sigma: float = 0.5
    dropout_prob: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not self.noise_sigma >= 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not 0 <= self.dropout_prob < 1:
            raise ConfigError(f"dropout_prob must be in [0, 1), got {self.dropout_prob}")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError(f"seed must fit in an unsigned 64-bit integer, got {self.seed}")


def _augment(batch: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    noise = rng.standard_normal(batch.shape)
    keep = rng.random(batch.shape) >= cfg.dropout_prob
    out = batch + cfg.noise_sigma * noise
    return np.where(keep, out / (1.0 - cfg.dropout_prob), 0.0)


def make_views(batch, cfg: AugmentationConfig, rng: np.random.Generator):
    """Return two independently augmented copies of ``batch``.

    Each coordinate gets additive N(0, noise_sigma^2) noise, is then zeroed
    with probability ``dropout_prob``, and survivors are rescaled by
    ``1 / (1 - dropout_prob)`` so the expected view equals the input.
    """
    batch = np.asarray(batch, dtype=np.float64)
    views_q = _augment(batch, cfg, rng)
    views_k = _augment(batch, cfg, rng)
    return views_q, views_k


# ---------------------------------------------------------------- file I/O


def _read_bytes(path) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except FileNotFoundError:
        raise DataError(f"no such file: {path}") from None


def _header(buf: bytes, magic: bytes, nfields: int, path) -> tuple:
    size = 4 + 4 * nfields
    if len(buf) < size:
        raise FormatError(f"{path}: file too short for header ({len(buf)} bytes)")
    if buf[:4] != magic:
        raise FormatError(f"{path}: bad magic {buf[:4]!r}, expected {magic!r}")
    return tuple(int(v) for v in np.frombuffer(buf, _U32, nfields, 4))


def load_vectors(path) -> FeatureDataset:
    buf = _read_bytes(path)
    count, dim = _header(buf, VECTOR_MAGIC, 2, path)
    nbytes = count * dim * 4
    end = 12 + nbytes
    if len(buf) < end:
        raise FormatError(
            f"{path}: truncated payload, header declares {count}x{dim} "
            f"({nbytes} bytes) but only {len(buf) - 12} present"
        )
    vectors = np.frombuffer(buf, _F32, count * dim, 12).reshape(count, dim).astype(np.float32)
    bad = ~np.isfinite(vectors).all(axis=1)
    if bad.any():
        raise DataError(f"{path}: non-finite value in row {int(np.flatnonzero(bad)[0])}")

    labels = None
    rest = buf[end:]
    if rest:
        if rest[:4] != LABEL_MAGIC:
            raise FormatError(f"{path}: trailing bytes without label section")
        if len(rest) < 4 + 2 * count:
            raise FormatError(f"{path}: truncated label counts")
        counts = np.frombuffer(rest, _U16, count, 4).astype(np.int64)
        offset = 4 + 2 * count
        total = int(counts.sum())
        if len(rest) != offset + 4 * total:
            raise FormatError(f"{path}: label payload length mismatch")
        flat = np.frombuffer(rest, _U32, total, offset).astype(np.int64)
        if (counts == 1).all():
            labels = flat
        else:
            labels = np.split(flat, np.cumsum(counts)[:-1])
    elif len(buf) > end:
        raise FormatError(f"{path}: trailing bytes")
    return FeatureDataset(vectors, labels)


def write_vectors(dataset: FeatureDataset, path) -> None:
    v = np.ascontiguousarray(dataset.vectors, dtype=_F32)
    count, dim = v.shape
    parts = [VECTOR_MAGIC, np.array([count, dim], _U32).tobytes(), v.tobytes()]
    if dataset.labels is not None:
        sets = dataset.label_sets()
        counts = np.array([len(s) for s in sets], dtype=np.int64)
        if counts.max(initial=0) > 0xFFFF:
            raise DataError("more than 65535 labels on one row")
        flat = np.concatenate(sets) if sets else np.zeros(0, np.int64)
        if flat.size and (flat.min() < 0 or flat.max() > 0xFFFFFFFF):
            raise DataError("labels must fit in u32")
        parts += [LABEL_MAGIC, counts.astype(_U16).tobytes(), flat.astype(_U32).tobytes()]
    _write(path, b"".join(parts))


def load_codebooks(path) -> np.ndarray:
    """Read an ``MCQC`` file into an (M, K, d) float32 array."""
    buf = _read_bytes(path)
    M, K, d = _header(buf, CODEBOOK_MAGIC, 3, path)
    n = M * K * d
    if len(buf) != 16 + 4 * n:
        raise FormatError(f"{path}: payload is {len(buf) - 16} bytes, expected {4 * n}")
    w = np.frombuffer(buf, _F32, n, 16).reshape(M, K, d).astype(np.float32)
    if not np.isfinite(w).all():
        raise DataError(f"{path}: non-finite codeword value")
    return w


def write_codebooks(weights, path) -> None:
    w = np.ascontiguousarray(weights, dtype=_F32)
    if w.ndim != 3:
        raise DataError(f"codebooks must be (M, K, d), got shape {w.shape}")
    _write(path, CODEBOOK_MAGIC + np.array(w.shape, _U32).tobytes() + w.tobytes())


def code_dtype(K: int) -> np.dtype:
    return np.dtype(np.uint8) if K <= 256 else np.dtype("<u2")


def load_codes(path) -> tuple[np.ndarray, int]:
    """Read an ``MCQB`` file; returns ``(codes, K)`` with codes shaped (count, M)."""
    buf = _read_bytes(path)
    count, M, K = _header(buf, CODE_MAGIC, 3, path)
    dt = code_dtype(K)
    n = count * M
    if len(buf) != 16 + dt.itemsize * n:
        raise FormatError(
            f"{path}: payload is {len(buf) - 16} bytes, expected {dt.itemsize * n}"
        )
    codes = np.frombuffer(buf, dt, n, 16).reshape(count, M).copy()
    if codes.size and int(codes.max()) >= K:
        raise DataError(f"{path}: code index out of range for K={K}")
    return codes, K


def write_codes(codes, K: int, path) -> None:
    codes = np.asarray(codes)
    if codes.ndim != 2:
        raise DataError(f"codes must be (count, M), got shape {codes.shape}")
    if K > 0xFFFF + 1:
        raise DataError(f"K={K} does not fit u16 indices")
    if codes.size and (codes.min() < 0 or codes.max() >= K):
        raise DataError(f"code index out of range for K={K}")
    count, M = codes.shape
    payload = np.ascontiguousarray(codes.astype(code_dtype(K)))
    _write(path, CODE_MAGIC + np.array([count, M, K], _U32).tobytes() + payload.tobytes())


def _write(path, data: bytes) -> None:
    try:
        with open(os.fspath(path), "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc
