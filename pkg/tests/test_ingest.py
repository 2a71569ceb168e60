import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from txembed import ingest as ing
from txembed.ingest import TransactionRecord as T

HEADER = ",".join(ing.FIELDS) + "\n"


def write(tmp_path, text, name="tx.csv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def test_csv_line_maps_fields(tmp_path):
    p = write(tmp_path, HEADER + "100,1514764800,0xA,0xB,5,true,false,false,false\n")
    (t,) = ing.parse_transactions(p)
    assert (t.block_number, t.timestamp, t.from_account, t.to_account, t.value, t.success) == \
        (100, 1514764800, "0xA", "0xB", 5, True)
    assert not (t.is_internal or t.from_is_contract or t.to_is_contract)


def test_empty_file_gives_no_records(tmp_path):
    assert ing.parse_transactions(write(tmp_path, "")) == []
    assert ing.parse_transactions(write(tmp_path, HEADER, "h.csv")) == []


def test_non_numeric_block_counted_and_skipped(tmp_path):
    good = "".join(f"{i},{i},0xA,0xB,1,true,false,false,false\n" for i in range(200))
    p = write(tmp_path, HEADER + good + "abc,1,0xA,0xB,1,true,false,false,false\n")
    report = ing.ParseReport()
    out = ing.parse_transactions(p, report=report)
    assert len(out) == 200
    assert report.malformed == 1 and report.total_lines == 201


def test_too_many_malformed_lines_abort(tmp_path):
    rows = ["1,1,0xA,0xB,1,true,false,false,false"] * 10 + ["x,1,0xA,0xB,1,true,false,false,false"]
    p = write(tmp_path, HEADER + "\n".join(rows) + "\n")
    with pytest.raises(ing.ParseError) as err:
        ing.parse_transactions(p)
    assert err.value.report.malformed == 1
    assert len(ing.parse_transactions(p, malformed_threshold=0.2)) == 10


def test_wrong_header_rejected(tmp_path):
    p = write(tmp_path, "a,b,c\n1,2,3\n")
    with pytest.raises(ValueError, match="header"):
        ing.parse_transactions(p)


def test_missing_file():
    with pytest.raises(FileNotFoundError):
        ing.parse_transactions("/nonexistent/tx.csv")


def test_jsonl_matches_csv(tmp_path, rng):
    from conftest import random_txs
    txs = random_txs(rng, 50, 10)
    csv_path = tmp_path / "a.csv"
    ing.write_transactions(csv_path, txs)
    lines = [json.dumps(dict(zip(ing.FIELDS, t.as_row()))) for t in txs]
    jl = write(tmp_path, "\n".join(lines) + "\n", "a.jsonl")
    assert ing.parse_transactions(jl, "jsonl") == ing.parse_transactions(csv_path) == txs


def test_value_beyond_128_bits_is_malformed(tmp_path):
    big = str(2 ** 128)
    rows = [f"1,1,0xA,0xB,{big},true,false,false,false"] + ["1,1,0xA,0xB,3,true,false,false,false"] * 200
    report = ing.ParseReport()
    out = ing.parse_transactions(write(tmp_path, HEADER + "\n".join(rows) + "\n"), report=report)
    assert report.malformed == 1 and len(out) == 200


@pytest.mark.parametrize("success,value,kept", [(False, 5, False), (True, 0, False), (True, 3, True)])
def test_filter_cases(success, value, kept):
    t = T(1, 1, "a", "b", value, success)
    assert ing.filter_transactions([t]) == ([t] if kept else [])


records = st.builds(T, st.integers(0, 50), st.integers(0, 10 ** 6), st.sampled_from("abc"),
                    st.sampled_from("abc"), st.integers(0, 5), st.booleans())


@given(st.lists(records, max_size=40))
def test_filter_idempotent_and_order_preserving(txs):
    once = ing.filter_transactions(txs)
    assert ing.filter_transactions(once) == once
    assert once == [t for t in txs if t.success and t.value > 0]


def blocks(*numbers):
    return [T(b, b, "a", "b", 1) for b in numbers]


def sizes(groups):
    return tuple(len(g) for g in groups)


def test_split_examples():
    assert sizes(ing.split_by_block(blocks(*range(10)), 5)) == (2, 2, 2, 2, 2)
    assert sizes(ing.split_by_block(blocks(*range(7)), 3)) == (3, 2, 2)
    with pytest.raises(ValueError):
        ing.split_by_block(blocks(*[4] * 10), 2)
    with pytest.raises(ValueError):
        ing.split_by_block(blocks(3, 1), 1)


def oracle_split_sizes(counts, n):
    """Cut k lands after the first block whose running total reaches k/n of all
    transactions, or earlier when exactly as many blocks remain as splits to fill."""
    total = sum(counts)
    cuts = []
    for k in range(1, n):
        last = cuts[-1] if cuts else -1
        for p in range(last + 1, len(counts)):
            if sum(counts[:p + 1]) * n >= k * total or len(counts) - p - 1 == n - k:
                cuts.append(p)
                break
    bounds = [-1] + cuts + [len(counts) - 1]
    return tuple(sum(counts[bounds[i] + 1:bounds[i + 1] + 1]) for i in range(n))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=1, max_size=12), st.integers(1, 6))
def test_split_matches_exhaustive_rule(counts, n):
    txs = [t for b, c in enumerate(counts) for t in blocks(*[10 + 3 * b] * c)]
    if n > len(counts):
        with pytest.raises(ValueError):
            ing.split_by_block(txs, n)
        return
    groups = ing.split_by_block(txs, n)
    assert sizes(groups) == oracle_split_sizes(counts, n)
    assert all(len(g) for g in groups)
    assert [t for g in groups for t in g] == txs
    for a, b in zip(groups, groups[1:]):
        assert max(t.block_number for t in a) < min(t.block_number for t in b)


def test_load_stream_merges_in_block_order(tmp_path, rng):
    from conftest import random_txs
    txs = random_txs(rng, 40, 8)
    ing.write_transactions(tmp_path / "b.csv", txs[20:])
    ing.write_transactions(tmp_path / "a.csv", txs[:20])
    assert ing.load_stream([tmp_path / "b.csv", tmp_path / "a.csv"]) == sorted(txs, key=lambda t: t.block_number)
