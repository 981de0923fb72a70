"""Seeded YCSB-style workload generation.

Ranks are 0-based: rank 0 is the most popular record.  The Zipfian
generator draws ranks by inverting the exact bounded-zeta CDF, which keeps
the pmf exact at any theta (including theta = 1, where the usual closed-form
approximation divides by zero).  Populations too large for a CDF table fall
back to the closed-form method of Gray et al. used by YCSB.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

EXACT_LIMIT = 5_000_000


def zipf_pmf(n: int, theta: float) -> np.ndarray:
    """P(rank r) proportional to 1 / (r + 1) ** theta for r in [0, n)."""
    w = 1.0 / np.arange(1, n + 1, dtype=np.float64) ** theta
    return w / w.sum()


class ZipfianGenerator:
    def __init__(self, n: int, theta: float = 1.0, seed: int = 0, scramble: bool = False):
        if n < 1:
            raise ValueError("population must be positive")
        if theta < 0:
            raise ValueError("theta must be non-negative")
        self.n = n
        self.theta = theta
        self.scramble = scramble
        self.rng = np.random.default_rng(seed)
        if n <= EXACT_LIMIT:
            self._cdf = np.cumsum(zipf_pmf(n, theta))
            self._cdf[-1] = 1.0
        else:
            if theta == 1.0:
                raise ValueError(f"theta = 1 needs n <= {EXACT_LIMIT}")
            self._cdf = None
            self._zetan = _zeta_approx(n, theta)
            self._zeta2 = 1.0 + 0.5 ** theta
            self._alpha = 1.0 / (1.0 - theta)
            self._eta = (1 - (2.0 / n) ** (1 - theta)) / (1 - self._zeta2 / self._zetan)

    def _ranks(self, u: np.ndarray) -> np.ndarray:
        if self._cdf is not None:
            return np.searchsorted(self._cdf, u, side="right").astype(np.int64)
        uz = u * self._zetan
        r = (self.n * (self._eta * u - self._eta + 1) ** self._alpha).astype(np.int64)
        r = np.where(uz < 1.0, 0, np.where(uz < self._zeta2, 1, r))
        return np.minimum(r, self.n - 1)

    def sample(self, size: int) -> np.ndarray:
        r = self._ranks(self.rng.random(size))
        if self.scramble:
            r = np.array([_scramble(int(x), self.n) for x in r], dtype=np.int64)
        return r

    def next(self) -> int:
        return int(self.sample(1)[0])

    def __iter__(self) -> Iterator[int]:
        while True:
            yield from self.sample(4096).tolist()


class UniformGenerator:
    def __init__(self, n: int, seed: int = 0):
        self.n = n
        self.rng = np.random.default_rng(seed)

    def sample(self, size: int) -> np.ndarray:
        return self.rng.integers(0, self.n, size)

    def next(self) -> int:
        return int(self.sample(1)[0])


def _zeta_approx(n: int, theta: float) -> float:
    # exact head plus an Euler-Maclaurin tail
    m = 10_000
    head = float(np.sum(1.0 / np.arange(1, m + 1, dtype=np.float64) ** theta))
    a, b = m + 1, n
    tail = (b ** (1 - theta) - a ** (1 - theta)) / (1 - theta) + 0.5 * (a ** -theta + b ** -theta)
    return head + tail


def _scramble(rank: int, n: int) -> int:
    h = hashlib.blake2b(struct.pack("<Q", rank), digest_size=8).digest()
    return int.from_bytes(h, "little") % n


@dataclass
class WorkloadSpec:
    record_count: int = 10_000
    record_size: int = 1024
    key_space_max: int = 2 * 10**9
    # percent of operations that are updates; the rest are reads
    update_pct: int = 95
    distribution: str = "zipfian"
    theta: float = 1.0
    op_count: int = 5_000
    warmup_ops: int = 0
    seed: int = 42

    def __post_init__(self):
        if self.distribution not in ("zipfian", "uniform"):
            raise ValueError(f"unknown distribution {self.distribution!r}")
        if not 0 <= self.update_pct <= 100:
            raise ValueError("update_pct must be in [0, 100]")

    def keys(self) -> list[bytes]:
        """The loaded key population, ascending; deterministic under the seed."""
        rng = np.random.default_rng(self.seed)
        ks: set[int] = set()
        while len(ks) < self.record_count:
            ks.update(rng.integers(0, self.key_space_max, self.record_count - len(ks)).tolist())
        return [encode_key(k) for k in sorted(ks)]

    def value(self, rank: int, version: int = 0) -> bytes:
        head = struct.pack("<QQ", rank, version)
        return (head * (self.record_size // len(head) + 1))[:self.record_size]

    def chooser(self, seed_offset: int = 0):
        seed = self.seed + 1 + seed_offset
        if self.distribution == "uniform":
            return UniformGenerator(self.record_count, seed)
        return ZipfianGenerator(self.record_count, self.theta, seed, scramble=True)

    def operations(self, count: Optional[int] = None, seed_offset: int = 0) -> Iterator[tuple[str, int]]:
        """(op, rank) pairs with op in {"read", "update"}."""
        count = self.op_count if count is None else count
        ranks = self.chooser(seed_offset).sample(count)
        coins = np.random.default_rng(self.seed + 7919 + seed_offset).random(count)
        for r, c in zip(ranks.tolist(), coins.tolist()):
            yield ("update" if c * 100 < self.update_pct else "read"), r


def encode_key(k: int) -> bytes:
    """Fixed-width big-endian so byte order equals numeric order."""
    return k.to_bytes(8, "big")


def parse_mix(s: str) -> int:
    """``"95"`` or ``"95/5"`` (update/read percentages) -> update percent."""
    parts = [p.strip() for p in s.split("/")]
    if len(parts) == 1:
        return int(parts[0])
    if len(parts) == 2 and int(parts[0]) + int(parts[1]) == 100:
        return int(parts[0])
    raise ValueError(f"bad mix {s!r}; expected UPDATE or UPDATE/READ summing to 100")
