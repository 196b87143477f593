"""FIFO bank of cached soft codes used as extra contrastive negatives."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, DataError
from .quantizer import Codebooks, reconstruct_soft


class CodeMemory:
    """Fixed-capacity queue of code rows, updated one group at a time.

    Args:
        capacity: number of slots; must be a multiple of ``granularity``.
        width: row width (M * K for soft codes, D for cached features).
        granularity: rows per ``enqueue_batch`` call.
        active_from_epoch: first epoch at which the memory joins the loss.
    """

    def __init__(self, capacity: int, width: int, granularity: int, active_from_epoch: int = 0):
        if granularity < 1 or capacity < granularity:
            raise ConfigError(f"need capacity >= granularity >= 1, got {capacity}, {granularity}")
        if capacity % granularity:
            raise ConfigError(
                f"capacity {capacity} is not a multiple of the batch granularity {granularity}"
            )
        self.capacity = capacity
        self.width = width
        self.granularity = granularity
        self.active_from_epoch = active_from_epoch
        self._slots = np.zeros((capacity, width))
        self._start = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def enqueue_batch(self, codes) -> None:
        """Append one group of rows, evicting the oldest rows if full."""
        codes = np.asarray(codes, dtype=np.float64)
        if codes.ndim != 2 or codes.shape[1] != self.width:
            raise DataError(f"code width {codes.shape[-1]} != memory width {self.width}")
        if codes.shape[0] != self.granularity:
            raise DataError(f"expected {self.granularity} rows per enqueue, got {codes.shape[0]}")
        n = codes.shape[0]
        overflow = max(0, self._size + n - self.capacity)
        self._start = (self._start + overflow) % self.capacity
        self._size -= overflow
        idx = (self._start + self._size + np.arange(n)) % self.capacity
        self._slots[idx] = codes
        self._size += n

    def codes(self) -> np.ndarray:
        """Stored rows, oldest first (a copy)."""
        idx = (self._start + np.arange(self._size)) % self.capacity
        return self._slots[idx]

    def is_active(self, epoch: int) -> bool:
        return epoch >= self.active_from_epoch and self._size > 0

    def fetch_reconstructions(self, books: Codebooks) -> np.ndarray:
        """Reconstruct every stored soft code through the current codebooks."""
        if self._size == 0:
            return np.zeros((0, books.D))
        return reconstruct_soft(self.codes(), books)

    def clear(self) -> None:
        self._start = 0
        self._size = 0
