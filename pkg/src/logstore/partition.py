"""Vertical partition advisor.

Every set partition of the non-key columns is enumerated and costed against a
workload trace.  A query pays, for each column group it touches, the group's
full row width (which includes the embedded primary key), weighted by the
query's frequency.  Ties go to fewer groups, then to the lexicographically
smallest canonical grouping.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional, Sequence

from .errors import SchemaError

MAX_COLUMNS = 12

Grouping = tuple[tuple[str, ...], ...]


@dataclass
class WorkloadTrace:
    queries: list[tuple[frozenset[str], float]] = field(default_factory=list)

    def add(self, columns: Iterable[str], frequency: float = 1.0) -> "WorkloadTrace":
        self.queries.append((frozenset(columns), float(frequency)))
        return self


def canonical(groups: Iterable[Iterable[str]]) -> Grouping:
    return tuple(sorted(tuple(sorted(g)) for g in groups))


def grouping_cost(groups: Iterable[Iterable[str]], trace: WorkloadTrace,
                  widths: Optional[dict[str, int]] = None, key_width: int = 8) -> float:
    widths = widths or {}
    total = 0.0
    for g in groups:
        g = set(g)
        w = key_width + sum(widths.get(c, 8) for c in g)
        for cols, freq in trace.queries:
            if g & cols:
                total += freq * w
    return total


def set_partitions(n: int) -> Iterator[list[int]]:
    """Restricted growth strings of length n (each one labels a set partition)."""
    if n == 0:
        yield []
        return
    a = [0] * n
    b = [1] * n  # b[i] = 1 + max(a[:i])
    while True:
        yield a
        i = n - 1
        while i > 0 and a[i] == b[i]:
            i -= 1
        if i == 0:
            return
        a[i] += 1
        m = max(b[i], a[i] + 1)
        for j in range(i + 1, n):
            a[j] = 0
            b[j] = m


def advise_partitioning(schema, trace: WorkloadTrace) -> Grouping:
    """Exhaustively pick the cheapest column grouping for ``trace``.

    ``schema`` is a TableSchema or a plain sequence of column names.
    """
    if isinstance(schema, Sequence) and not isinstance(schema, str):
        cols, widths, key_width = list(schema), {}, 8
    else:
        cols, widths, key_width = list(schema.columns), schema.column_widths, schema.key_width
    n = len(cols)
    if n > MAX_COLUMNS:
        raise SchemaError(f"{n} columns exceeds the exhaustive-search limit of {MAX_COLUMNS}")
    if n == 0:
        return ()
    pos = {c: i for i, c in enumerate(cols)}
    qmasks = []
    for qcols, freq in trace.queries:
        m = 0
        for c in qcols:
            if c in pos:
                m |= 1 << pos[c]
        qmasks.append((m, freq))
    # per-subset width and touching frequency, indexed by bitmask
    width = [key_width] * (1 << n)
    touch = [0.0] * (1 << n)
    for mask in range(1, 1 << n):
        low = mask & -mask
        width[mask] = width[mask ^ low] + widths.get(cols[low.bit_length() - 1], 8)
        touch[mask] = sum(f for m, f in qmasks if m & mask)

    best = None
    for labels in set_partitions(n):
        k = max(labels) + 1
        masks = [0] * k
        for i, lab in enumerate(labels):
            masks[lab] |= 1 << i
        cost = sum(width[m] * touch[m] for m in masks)
        if best is not None and cost > best[0]:
            continue
        groups = canonical([[cols[i] for i in range(n) if m >> i & 1] for m in masks])
        cand = (cost, k, groups)
        if best is None or cand < best:
            best = cand
    return best[2]
