"""Turn a group of transactions into a directed single-edge graph with 17 node attributes."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .ingest import TransactionRecord

N_FEATURES = 17

FEATURE_NAMES = (
    "is_contract", "in_degree", "out_degree", "in_tx_count", "out_tx_count",
    "total_amount", "in_amount", "out_amount", "in_amount_mean", "out_amount_mean",
    "time_span", "in_time_span", "out_time_span", "in_frequency", "out_frequency",
    "in_repeat_share", "out_repeat_share",
)

# zero-based columns that get log1p before standardizing: degrees, counts,
# amount sums and time spans (the two mean-amount columns are only standardized)
LOG_COLUMNS = (1, 2, 3, 4, 5, 6, 7, 10, 11, 12)
PASSTHROUGH_COLUMNS = (0,)


@dataclass
class GraphSplit:
    split_index: int
    node_ids: list[str]
    edges: np.ndarray  # (E, 2) int64, sorted, unique, no self loops
    raw_attributes: np.ndarray  # (N, 17) float64
    attributes: np.ndarray | None = None  # (N, 17) float32 once normalized
    norm_stats: dict = field(default_factory=dict)
    _undirected: sp.csr_matrix | None = field(default=None, repr=False, compare=False)
    _in: sp.csr_matrix | None = field(default=None, repr=False, compare=False)
    _out: sp.csr_matrix | None = field(default=None, repr=False, compare=False)
    # full-neighborhood encoder blocks keyed by target set, filled by the encoder
    _blocks: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def index_of(self) -> dict[str, int]:
        return {a: i for i, a in enumerate(self.node_ids)}

    def _adj(self) -> sp.csr_matrix:
        n = self.n_nodes
        ones = np.ones(len(self.edges), dtype=np.int8)
        return sp.csr_matrix((ones, (self.edges[:, 0], self.edges[:, 1])), shape=(n, n))

    @property
    def undirected(self) -> sp.csr_matrix:
        """Symmetric 0/1 adjacency with sorted column indices."""
        if self._undirected is None:
            a = self._adj()
            u = ((a + a.T) > 0).astype(np.int8).tocsr()
            u.sort_indices()
            self._undirected = u
        return self._undirected

    def out_neighbors(self, v: int) -> np.ndarray:
        if self._out is None:
            self._out = self._adj()
            self._out.sort_indices()
        m = self._out
        return m.indices[m.indptr[v]:m.indptr[v + 1]]

    def in_neighbors(self, v: int) -> np.ndarray:
        if self._in is None:
            self._in = self._adj().T.tocsr()
            self._in.sort_indices()
        m = self._in
        return m.indices[m.indptr[v]:m.indptr[v + 1]]

    def neighbors(self, v: int) -> np.ndarray:
        u = self.undirected
        return u.indices[u.indptr[v]:u.indptr[v + 1]]

    def degrees(self) -> np.ndarray:
        return np.diff(self.undirected.indptr)


def build_graph(txs: Sequence[TransactionRecord], split_index: int = 0) -> GraphSplit:
    """Nodes in order of first appearance, deduplicated directed edges, raw attributes."""
    if not txs:
        raise ValueError("cannot build a graph from an empty transaction group")
    index: dict[str, int] = {}
    for t in txs:
        for a in (t.from_account, t.to_account):
            if a not in index:
                index[a] = len(index)
    node_ids = list(index)
    src = np.fromiter((index[t.from_account] for t in txs), dtype=np.int64, count=len(txs))
    dst = np.fromiter((index[t.to_account] for t in txs), dtype=np.int64, count=len(txs))
    keep = src != dst
    pairs = np.unique(np.stack([src[keep], dst[keep]], axis=1), axis=0) if keep.any() \
        else np.zeros((0, 2), dtype=np.int64)
    raw = compute_node_attributes(txs, node_ids)
    return GraphSplit(split_index=split_index, node_ids=node_ids, edges=pairs.astype(np.int64),
                      raw_attributes=raw)


def _span(ts: np.ndarray, who: np.ndarray, n: int) -> np.ndarray:
    hi = np.full(n, -np.inf)
    lo = np.full(n, np.inf)
    np.maximum.at(hi, who, ts)
    np.minimum.at(lo, who, ts)
    out = hi - lo
    out[~np.isfinite(out)] = 0.0
    return out


def _repeat_share(owner: np.ndarray, other: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """(distinct counterparties, share of counterparties with >=2 transactions)."""
    if len(owner) == 0:
        return np.zeros(n), np.zeros(n)
    pairs, counts = np.unique(np.stack([owner, other], axis=1), axis=0, return_counts=True)
    distinct = np.bincount(pairs[:, 0], minlength=n).astype(np.float64)
    repeated = np.bincount(pairs[:, 0], weights=(counts >= 2).astype(np.float64), minlength=n)
    share = np.divide(repeated, distinct, out=np.zeros(n), where=distinct > 0)
    return distinct, share


def compute_node_attributes(txs: Sequence[TransactionRecord], node_ids: Sequence[str]) -> np.ndarray:
    """Raw (N, 17) attribute matrix; see ``FEATURE_NAMES`` for the column order.

    Self-transfers are ignored. A node with no transactions in one direction
    gets zeros in every column of that direction.
    """
    index = {a: i for i, a in enumerate(node_ids)}
    n = len(node_ids)
    txs = [t for t in txs if t.from_account != t.to_account]
    m = len(txs)
    src = np.fromiter((index[t.from_account] for t in txs), dtype=np.int64, count=m)
    dst = np.fromiter((index[t.to_account] for t in txs), dtype=np.int64, count=m)
    val = np.fromiter((float(t.value) for t in txs), dtype=np.float64, count=m)
    ts = np.fromiter((t.timestamp for t in txs), dtype=np.float64, count=m)

    X = np.zeros((n, N_FEATURES), dtype=np.float64)
    contract = np.zeros(n, dtype=bool)
    for t in txs:
        if t.from_is_contract:
            contract[index[t.from_account]] = True
        if t.to_is_contract:
            contract[index[t.to_account]] = True
    X[:, 0] = contract

    in_deg, in_rep = _repeat_share(dst, src, n)
    out_deg, out_rep = _repeat_share(src, dst, n)
    in_cnt = np.bincount(dst, minlength=n).astype(np.float64)
    out_cnt = np.bincount(src, minlength=n).astype(np.float64)
    in_sum = np.bincount(dst, weights=val, minlength=n)
    out_sum = np.bincount(src, weights=val, minlength=n)
    span_in = _span(ts, dst, n)
    span_out = _span(ts, src, n)
    span_all = _span(np.concatenate([ts, ts]), np.concatenate([dst, src]), n)

    X[:, 1] = in_deg
    X[:, 2] = out_deg
    X[:, 3] = in_cnt
    X[:, 4] = out_cnt
    X[:, 5] = in_sum + out_sum
    X[:, 6] = in_sum
    X[:, 7] = out_sum
    X[:, 8] = np.divide(in_sum, in_cnt, out=np.zeros(n), where=in_cnt > 0)
    X[:, 9] = np.divide(out_sum, out_cnt, out=np.zeros(n), where=out_cnt > 0)
    X[:, 10] = span_all
    X[:, 11] = span_in
    X[:, 12] = span_out
    X[:, 13] = in_cnt / np.maximum(span_in, 1.0)
    X[:, 14] = out_cnt / np.maximum(span_out, 1.0)
    X[:, 15] = in_rep
    X[:, 16] = out_rep
    return X


def normalize_attributes(raw: np.ndarray) -> tuple[np.ndarray, dict]:
    """log1p on heavy-tailed columns, then per-column z-score; column 0 passes through."""
    x = np.array(raw, dtype=np.float64)
    if not np.isfinite(x).all():
        raise ValueError("raw attributes must be finite")
    cols = list(LOG_COLUMNS)
    x[:, cols] = np.log1p(np.maximum(x[:, cols], 0.0))
    mean = x.mean(axis=0) if len(x) else np.zeros(x.shape[1])
    std = x.std(axis=0) if len(x) else np.zeros(x.shape[1])
    out = np.zeros_like(x)
    for j in range(x.shape[1]):
        if j in PASSTHROUGH_COLUMNS:
            out[:, j] = x[:, j]
        elif std[j] > 1e-12 * max(1.0, abs(mean[j])):
            out[:, j] = (x[:, j] - mean[j]) / std[j]
    stats = {"mean": mean.tolist(), "std": std.tolist(), "log_columns": cols,
             "passthrough_columns": list(PASSTHROUGH_COLUMNS)}
    return out.astype(np.float32), stats


def _component_labels(graph: GraphSplit) -> np.ndarray:
    n = graph.n_nodes
    ones = np.ones(len(graph.edges), dtype=np.int8)
    a = sp.csr_matrix((ones, (graph.edges[:, 0], graph.edges[:, 1])), shape=(n, n))
    _, labels = connected_components(a, directed=True, connection="weak")
    return labels


def largest_wcc(graph: GraphSplit) -> GraphSplit:
    """Induced subgraph on the largest weakly connected component.

    Ties go to the component holding the lexicographically smallest account id.
    Node order within the component is preserved.
    """
    if graph.n_nodes == 0:
        raise ValueError("empty graph")
    labels = _component_labels(graph)
    sizes = np.bincount(labels)
    best = sizes.max()
    candidates = np.flatnonzero(sizes == best)
    if len(candidates) > 1:
        smallest = {}
        for i, a in enumerate(graph.node_ids):
            c = labels[i]
            if sizes[c] == best and (c not in smallest or a < smallest[c]):
                smallest[c] = a
        chosen = min(candidates, key=lambda c: smallest[c])
    else:
        chosen = candidates[0]
    return induced_subgraph(graph, np.flatnonzero(labels == chosen))


def induced_subgraph(graph: GraphSplit, keep: np.ndarray) -> GraphSplit:
    keep = np.sort(np.asarray(keep, dtype=np.int64))
    remap = np.full(graph.n_nodes, -1, dtype=np.int64)
    remap[keep] = np.arange(len(keep))
    e = remap[graph.edges] if len(graph.edges) else graph.edges
    e = e[(e >= 0).all(axis=1)] if len(e) else np.zeros((0, 2), dtype=np.int64)
    attrs = graph.attributes[keep] if graph.attributes is not None else None
    return GraphSplit(split_index=graph.split_index,
                      node_ids=[graph.node_ids[i] for i in keep],
                      edges=e, raw_attributes=graph.raw_attributes[keep],
                      attributes=attrs, norm_stats=dict(graph.norm_stats))


def finalize(txs: Sequence[TransactionRecord], split_index: int) -> GraphSplit:
    """build -> largest WCC -> normalize."""
    g = largest_wcc(build_graph(txs, split_index))
    g.attributes, g.norm_stats = normalize_attributes(g.raw_attributes)
    return g


@dataclass
class OverlapSet:
    split_index: int
    pairs: np.ndarray  # (K, 2): index in split i, index in split i+1
    ratio: float

    def __len__(self) -> int:
        return len(self.pairs)


def compute_overlap(split_i: GraphSplit, split_j: GraphSplit) -> OverlapSet:
    idx_j = split_j.index_of()
    pairs = [(a, idx_j[acct]) for a, acct in enumerate(split_i.node_ids) if acct in idx_j]
    arr = np.array(pairs, dtype=np.int64).reshape(-1, 2)
    ratio = len(arr) / split_i.n_nodes if split_i.n_nodes else 0.0
    return OverlapSet(split_index=split_i.split_index, pairs=arr, ratio=ratio)


# serialization -------------------------------------------------------------

def save_graph(graph: GraphSplit, directory) -> dict:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "nodes.txt").write_text("".join(a + "\n" for a in graph.node_ids), encoding="utf-8")
    graph.edges.astype("<u4").tofile(d / "edges.bin")
    attrs = graph.attributes if graph.attributes is not None else graph.raw_attributes
    np.ascontiguousarray(attrs, dtype="<f4").tofile(d / "attrs.f32")
    np.ascontiguousarray(graph.raw_attributes, dtype="<f8").tofile(d / "raw_attrs.f64")
    meta = {
        "split_index": graph.split_index,
        "n_nodes": graph.n_nodes,
        "n_edges": graph.n_edges,
        "n_features": N_FEATURES,
        "normalized": graph.attributes is not None,
        "normalization": graph.norm_stats,
    }
    meta["content_hash"] = _hash_files(d, ("nodes.txt", "edges.bin", "attrs.f32", "raw_attrs.f64"))
    (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")
    return meta


def load_graph(directory) -> GraphSplit:
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text(encoding="utf-8"))
    node_ids = (d / "nodes.txt").read_text(encoding="utf-8").splitlines()
    n = len(node_ids)
    edges = np.fromfile(d / "edges.bin", dtype="<u4").astype(np.int64).reshape(-1, 2)
    attrs = np.fromfile(d / "attrs.f32", dtype="<f4").reshape(n, N_FEATURES).astype(np.float32)
    raw_path = d / "raw_attrs.f64"
    raw = (np.fromfile(raw_path, dtype="<f8").reshape(n, N_FEATURES) if raw_path.exists()
           else attrs.astype(np.float64))
    return GraphSplit(split_index=meta["split_index"], node_ids=node_ids, edges=edges,
                      raw_attributes=raw,
                      attributes=attrs if meta.get("normalized", True) else None,
                      norm_stats=meta.get("normalization", {}))


def _hash_files(d: Path, names: Sequence[str]) -> str:
    h = hashlib.sha256()
    for name in names:
        h.update(name.encode())
        h.update((d / name).read_bytes())
    return h.hexdigest()
