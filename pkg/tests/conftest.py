"""Shared builders for small random graphs and transaction sets."""
from __future__ import annotations

import numpy as np
import pytest

from txembed.graphbuild import N_FEATURES, GraphSplit
from txembed.ingest import TransactionRecord


def random_txs(rng: np.random.Generator, n_tx: int, n_accounts: int, *, block0: int = 100,
               contract_p: float = 0.1, self_loop_p: float = 0.0) -> list[TransactionRecord]:
    """Block-sorted random transfers with small integer values and timestamps."""
    contracts = rng.random(n_accounts) < contract_p
    out = []
    block = block0
    for _ in range(n_tx):
        block += int(rng.integers(0, 3))
        a = int(rng.integers(n_accounts))
        b = a if rng.random() < self_loop_p else int(rng.integers(n_accounts))
        out.append(TransactionRecord(block, block * 13, f"0x{a:04x}", f"0x{b:04x}",
                                     int(rng.integers(1, 50)), True, bool(rng.random() < 0.2),
                                     bool(contracts[a]), bool(contracts[b])))
    return out


def graph_from_edges(n: int, edges, rng: np.random.Generator | None = None, split_index: int = 0,
                     ids=None, attrs=None) -> GraphSplit:
    """GraphSplit with the given directed edges and random normalized attributes."""
    rng = rng if rng is not None else np.random.default_rng(0)
    e = np.unique(np.asarray(edges, dtype=np.int64).reshape(-1, 2), axis=0)
    e = e[e[:, 0] != e[:, 1]]
    x = rng.normal(size=(n, N_FEATURES)) if attrs is None else np.asarray(attrs, dtype=np.float64)
    ids = [f"n{i:04d}" for i in range(n)] if ids is None else list(ids)
    return GraphSplit(split_index, ids, e, x, x.astype(np.float32))


def random_graph(rng: np.random.Generator, n: int, m: int, **kw) -> GraphSplit:
    return graph_from_edges(n, rng.integers(n, size=(m, 2)), rng, **kw)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


SMALL_SYNTH = dict(accounts_per_split=200, txs_per_split=3000, phishing_fraction=0.1)


@pytest.fixture(scope="session")
def small_piece():
    """A five-split synthetic piece of about 400 WCC nodes per split, with its labels."""
    from txembed.graphbuild import finalize
    from txembed.synthgen import SynthConfig, generate

    out = generate(SynthConfig(seed=1, **SMALL_SYNTH))
    return [finalize(t, i) for i, t in enumerate(out.splits)], out.phishing


# acceptance criteria report one line each in the terminal summary
ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> bool:
    ACCEPTANCE[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
