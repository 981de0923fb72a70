import functools
import itertools

import pytest
from hypothesis import given, strategies as st

from logstore import TableSchema, WorkloadTrace, advise_partitioning
from logstore.errors import SchemaError
from logstore.partition import canonical, grouping_cost, set_partitions

BELL = [1, 1, 2, 5, 15, 52, 203, 877]


@functools.lru_cache(maxsize=None)
def all_groupings(cols):
    """Independent enumeration: label every column freely, keep distinct canonical forms."""
    seen = set()
    for labels in itertools.product(range(len(cols)), repeat=len(cols)):
        blocks = {}
        for c, lab in zip(cols, labels):
            blocks.setdefault(lab, []).append(c)
        seen.add(canonical(blocks.values()))
    return seen


def naive_cost(groups, queries, widths, key_width):
    total = 0.0
    for cols, freq in queries:
        for g in groups:
            if any(c in cols for c in g):
                total += freq * (key_width + sum(widths.get(c, 8) for c in g))
    return total


def oracle(cols, queries, widths=None, key_width=8):
    widths = widths or {}
    return min(all_groupings(tuple(cols)), key=lambda g: (naive_cost(g, queries, widths, key_width), len(g), g))


@pytest.mark.parametrize("n", range(8))
def test_enumeration_counts_are_bell_numbers(n):
    assert sum(1 for _ in set_partitions(n)) == BELL[n]


def test_enumeration_is_distinct():
    forms = {tuple(p) for p in set_partitions(6)}
    assert len(forms) == BELL[6]


def test_columns_read_together_are_grouped():
    t = WorkloadTrace().add(["a", "b"], 10).add(["c"], 10)
    assert advise_partitioning(["a", "b", "c"], t) == (("a", "b"), ("c",))


def test_tie_breaks_toward_fewer_groups():
    # an empty trace costs zero for every grouping
    t = WorkloadTrace()
    assert advise_partitioning(["a", "b"], t) == (("a", "b"),)


def test_schema_widths_and_key_width_matter():
    s = TableSchema("t", {"g": ["a", "b"]}, column_widths={"a": 1000, "b": 4}, key_width=4)
    t = WorkloadTrace().add(["b"], 100).add(["a", "b"], 1)
    assert advise_partitioning(s, t) == (("a",), ("b",))


def test_too_many_columns_rejected():
    with pytest.raises(SchemaError):
        advise_partitioning([f"c{i}" for i in range(13)], WorkloadTrace())


def test_cost_helper_agrees_with_naive():
    t = WorkloadTrace().add(["a"], 2).add(["a", "c"], 1)
    g = [["a", "b"], ["c"]]
    assert grouping_cost(g, t) == naive_cost(g, t.queries, {}, 8)


cols_st = st.integers(1, 6).map(lambda n: [f"c{i}" for i in range(n)])


@given(cols_st, st.data())
def test_matches_brute_force_oracle(cols, data):
    queries = data.draw(st.lists(
        st.tuples(st.sets(st.sampled_from(cols), min_size=1), st.integers(1, 20)), max_size=6))
    widths = data.draw(st.dictionaries(st.sampled_from(cols), st.integers(1, 64)))
    key_width = data.draw(st.integers(0, 16))
    t = WorkloadTrace()
    for q, f in queries:
        t.add(q, f)
    s = TableSchema("t", {"g": list(cols)}, column_widths=widths, key_width=key_width)
    assert advise_partitioning(s, t) == oracle(cols, t.queries, widths, key_width)
