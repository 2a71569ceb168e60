"""Read raw transfer records, drop useless ones, and cut the stream into block-aligned splits."""
from __future__ import annotations

import bisect
import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

log = logging.getLogger(__name__)

FIELDS = ("block_number", "timestamp", "from", "to", "value", "success",
          "is_internal", "from_is_contract", "to_is_contract")
MAX_VALUE = 2 ** 128 - 1


@dataclass(frozen=True, slots=True)
class TransactionRecord:
    block_number: int
    timestamp: int
    from_account: str
    to_account: str
    value: int
    success: bool = True
    is_internal: bool = False
    from_is_contract: bool = False
    to_is_contract: bool = False

    def as_row(self) -> list[str]:
        return [str(self.block_number), str(self.timestamp), self.from_account, self.to_account,
                str(self.value), _fmt_bool(self.success), _fmt_bool(self.is_internal),
                _fmt_bool(self.from_is_contract), _fmt_bool(self.to_is_contract)]


@dataclass
class SplitPlan:
    n_splits: int
    # first block number of splits 2..n
    boundaries: list[int] = field(default_factory=list)

    def split_of(self, block_number: int) -> int:
        return bisect.bisect_right(self.boundaries, block_number)


class ParseError(ValueError):
    def __init__(self, message: str, report: "ParseReport"):
        super().__init__(message)
        self.report = report


@dataclass
class ParseReport:
    total_lines: int = 0
    malformed: int = 0
    examples: list[str] = field(default_factory=list)

    @property
    def malformed_fraction(self) -> float:
        return self.malformed / self.total_lines if self.total_lines else 0.0


_TRUE = {"true", "1", "t", "yes", "y"}
_FALSE = {"false", "0", "f", "no", "n", ""}


def _fmt_bool(b: bool) -> str:
    return "true" if b else "false"


def _parse_bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in _TRUE:
        return True
    if s in _FALSE:
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _parse_uint(v, limit: int | None = None) -> int:
    if isinstance(v, bool):
        raise ValueError("boolean where integer expected")
    if isinstance(v, int):
        n = v
    else:
        s = str(v).strip()
        if not s.isdigit():
            raise ValueError(f"not a non-negative integer: {v!r}")
        n = int(s)
    if n < 0 or (limit is not None and n > limit):
        raise ValueError(f"integer out of range: {v!r}")
    return n


def record_from_mapping(row: dict) -> TransactionRecord:
    src = str(row["from"]).strip()
    dst = str(row["to"]).strip()
    if not src or not dst:
        raise ValueError("empty account id")
    return TransactionRecord(
        block_number=_parse_uint(row["block_number"]),
        timestamp=_parse_uint(row["timestamp"]),
        from_account=src,
        to_account=dst,
        value=_parse_uint(row["value"], MAX_VALUE),
        success=_parse_bool(row["success"]),
        is_internal=_parse_bool(row["is_internal"]),
        from_is_contract=_parse_bool(row["from_is_contract"]),
        to_is_contract=_parse_bool(row["to_is_contract"]),
    )


def _iter_rows(path: Path, fmt: str):
    with open(path, newline="", encoding="utf-8") as fh:
        if fmt == "csv":
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                return
            header = [h.strip() for h in header]
            missing = [f for f in FIELDS if f not in header]
            if missing:
                raise ValueError(f"{path}: CSV header lacks {missing}")
            for line in reader:
                if not line or (len(line) == 1 and not line[0].strip()):
                    continue
                if len(line) != len(header):
                    yield None, ",".join(line)
                    continue
                yield dict(zip(header, line)), ",".join(line)
        elif fmt == "jsonl":
            for line in fh:
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError:
                    yield None, line.rstrip("\n")
                    continue
                yield (obj if isinstance(obj, dict) else None), line.rstrip("\n")
        else:
            raise ValueError(f"unknown format {fmt!r}")


def parse_transactions(path, fmt: str = "csv", malformed_threshold: float = 0.01,
                       report: ParseReport | None = None) -> list[TransactionRecord]:
    """Parse a CSV or JSONL transaction file, in file order.

    Malformed lines are skipped and counted. If their share exceeds
    ``malformed_threshold`` a :class:`ParseError` carrying the report is raised.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    report = report if report is not None else ParseReport()
    out: list[TransactionRecord] = []
    for row, text in _iter_rows(path, fmt):
        report.total_lines += 1
        if row is not None:
            try:
                out.append(record_from_mapping(row))
                continue
            except (KeyError, ValueError, TypeError):
                pass
        report.malformed += 1
        if len(report.examples) < 5:
            report.examples.append(text[:200])
    if report.malformed:
        log.warning("%s: %d of %d lines malformed", path, report.malformed, report.total_lines)
    if report.malformed_fraction > malformed_threshold:
        raise ParseError(
            f"{path}: {report.malformed}/{report.total_lines} malformed lines exceeds "
            f"threshold {malformed_threshold:.2%}", report)
    return out


def write_transactions(path, txs: Iterable[TransactionRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FIELDS)
        for t in txs:
            w.writerow(t.as_row())


def transactions_to_csv(txs: Iterable[TransactionRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FIELDS)
    for t in txs:
        w.writerow(t.as_row())
    return buf.getvalue()


def filter_transactions(txs: Iterable[TransactionRecord]) -> list[TransactionRecord]:
    return [t for t in txs if t.success and t.value > 0]


def plan_splits(block_counts: Sequence[tuple[int, int]], n_splits: int) -> SplitPlan:
    """Choose block-aligned cut points giving near-equal transaction counts.

    ``block_counts`` is ``(block_number, n_transactions)`` in increasing block
    order. Split k closes at the first block where the running count reaches
    ``k * total / n_splits``; a split is also closed early when only as many
    blocks remain as splits still to fill.
    """
    if n_splits < 1:
        raise ValueError("n_splits must be positive")
    n_blocks = len(block_counts)
    if n_splits > n_blocks:
        raise ValueError(f"cannot make {n_splits} splits from {n_blocks} distinct blocks")
    total = sum(c for _, c in block_counts)
    boundaries: list[int] = []
    running = 0
    k = 1
    for pos, (_, count) in enumerate(block_counts):
        if k == n_splits:
            break
        running += count
        blocks_left = n_blocks - pos - 1
        # running * n >= k * total, in integers
        if running * n_splits >= k * total or blocks_left == n_splits - k:
            boundaries.append(block_counts[pos + 1][0])
            k += 1
    return SplitPlan(n_splits=n_splits, boundaries=boundaries)


def split_by_block(txs: Sequence[TransactionRecord], n_splits: int) -> list[list[TransactionRecord]]:
    if any(txs[i].block_number > txs[i + 1].block_number for i in range(len(txs) - 1)):
        raise ValueError("transactions must be sorted by block number")
    counts: list[tuple[int, int]] = []
    for t in txs:
        if counts and counts[-1][0] == t.block_number:
            counts[-1] = (t.block_number, counts[-1][1] + 1)
        else:
            counts.append((t.block_number, 1))
    plan = plan_splits(counts, n_splits)
    groups: list[list[TransactionRecord]] = [[] for _ in range(n_splits)]
    for t in txs:
        groups[plan.split_of(t.block_number)].append(t)
    return groups


def load_stream(paths: Sequence, fmt: str = "csv", malformed_threshold: float = 0.01) -> list[TransactionRecord]:
    """Parse several files and merge them into one block-ordered sequence (stable)."""
    txs: list[TransactionRecord] = []
    for p in paths:
        txs.extend(parse_transactions(p, fmt, malformed_threshold))
    txs.sort(key=lambda t: t.block_number)
    return txs

