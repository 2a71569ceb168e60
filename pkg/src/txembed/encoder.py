"""Two-layer GraphSage encoder with the mean aggregator and uniform neighbor sampling."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import diffcore as dc
from .graphbuild import GraphSplit

PARAM_NAMES = ("l1.self", "l1.neigh", "l1.bias", "l2.self", "l2.neigh", "l2.bias")


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(np.float32)


@dataclass
class EncoderState:
    input_dim: int
    hidden_dim: int
    params: dict[str, dc.Tensor]
    fanouts: tuple[int | None, int | None] = (10, 10)
    dropout_p: float = 0.5

    @classmethod
    def init(cls, input_dim: int, hidden_dim: int, rng: np.random.Generator,
             fanouts=(10, 10), dropout_p: float = 0.5) -> "EncoderState":
        p = {
            "l1.self": _glorot(rng, input_dim, hidden_dim),
            "l1.neigh": _glorot(rng, input_dim, hidden_dim),
            "l1.bias": np.zeros((1, hidden_dim), dtype=np.float32),
            "l2.self": _glorot(rng, hidden_dim, hidden_dim),
            "l2.neigh": _glorot(rng, hidden_dim, hidden_dim),
            "l2.bias": np.zeros((1, hidden_dim), dtype=np.float32),
        }
        return cls(input_dim, hidden_dim, {k: dc.parameter(v) for k, v in p.items()},
                   tuple(fanouts), dropout_p)

    def copy(self) -> "EncoderState":
        return EncoderState(self.input_dim, self.hidden_dim,
                            {k: dc.parameter(v.data.copy()) for k, v in self.params.items()},
                            self.fanouts, self.dropout_p)

    def save(self, path) -> None:
        dc.save_params(path, self.params)

    @classmethod
    def load(cls, path, fanouts=(10, 10), dropout_p: float = 0.5) -> "EncoderState":
        raw = dc.load_params(path)
        params = {k: dc.parameter(raw[k]) for k in PARAM_NAMES}
        return cls(raw["l1.self"].shape[0], raw["l1.self"].shape[1], params,
                   tuple(fanouts), dropout_p)

    def widen_input(self, new_input_dim: int, rng: np.random.Generator) -> "EncoderState":
        """Grow layer-1 inputs at the front: new leading rows fresh, old rows copied."""
        extra = new_input_dim - self.input_dim
        if extra < 0:
            raise ValueError("cannot shrink the encoder input")
        out = self.copy()
        if extra == 0:
            return out
        for name in ("l1.self", "l1.neigh"):
            fresh = _glorot(rng, new_input_dim, self.hidden_dim)[:extra]
            out.params[name] = dc.parameter(np.vstack([fresh, self.params[name].data]))
        out.input_dim = new_input_dim
        return out


@dataclass
class EmbeddingTable:
    split_index: int
    node_ids: list[str]
    vectors: np.ndarray  # (N, hidden_dim) float32

    def row(self, account: str) -> np.ndarray:
        return self.vectors[self.index[account]]

    @property
    def index(self) -> dict[str, int]:
        if self._index is None:
            self._index = {a: i for i, a in enumerate(self.node_ids)}
        return self._index

    _index: dict | None = field(default=None, repr=False, compare=False)

    def rows(self, accounts) -> np.ndarray:
        idx = self.index
        return self.vectors[[idx[a] for a in accounts]]

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "nodes.txt").write_text("".join(a + "\n" for a in self.node_ids), encoding="utf-8")
        np.ascontiguousarray(self.vectors, dtype="<f4").tofile(d / "emb.f32")
        (d / "shape.txt").write_text(f"{self.split_index} {self.vectors.shape[0]} {self.vectors.shape[1]}\n")

    @classmethod
    def load(cls, directory) -> "EmbeddingTable":
        d = Path(directory)
        node_ids = (d / "nodes.txt").read_text(encoding="utf-8").splitlines()
        split_index, n, width = map(int, (d / "shape.txt").read_text().split())
        vec = np.fromfile(d / "emb.f32", dtype="<f4").reshape(n, width).astype(np.float32)
        return cls(split_index, node_ids, vec)


# neighbor sampling -----------------------------------------------------------

def sample_neighbors(graph: GraphSplit, node: int, fanout: int | None,
                     rng: np.random.Generator) -> np.ndarray:
    """Up to ``fanout`` distinct undirected neighbors of ``node``, sorted."""
    nbrs = graph.neighbors(node)
    if fanout is None or len(nbrs) <= fanout:
        return nbrs.copy()
    return np.sort(rng.choice(nbrs, size=fanout, replace=False))


def sample_block(adj: sp.csr_matrix, nodes: np.ndarray, fanout: int | None,
                 rng: np.random.Generator | None) -> tuple[np.ndarray, np.ndarray]:
    """Sampled neighbor lists for many nodes at once, as CSR (indptr, indices).

    Each row is a uniform draw without replacement (random keys, keep the
    ``fanout`` smallest); rows are returned sorted by neighbor index.
    """
    starts = adj.indptr[nodes]
    ends = adj.indptr[nodes + 1]
    deg = ends - starts
    total = int(deg.sum())
    row = np.repeat(np.arange(len(nodes)), deg)
    offs = np.arange(total) - np.repeat(np.cumsum(deg) - deg, deg)
    cols = adj.indices[np.repeat(starts, deg) + offs]
    if fanout is not None and (deg > fanout).any():
        keys = rng.random(total)
        order = np.lexsort((keys, row))
        rank = np.empty(total, dtype=np.int64)
        rank[order] = offs
        keep = rank < fanout
        row, cols = row[keep], cols[keep]
        order = np.lexsort((cols, row))
        row, cols = row[order], cols[order]
    counts = np.bincount(row, minlength=len(nodes))
    indptr = np.zeros(len(nodes) + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    return indptr, cols.astype(np.int64)


_BLOCK_CACHE = 4  # full-neighborhood block sets remembered per graph


@dataclass
class _Block:
    """One aggregation layer: targets are rows; sources index into the layer below."""
    self_index: np.ndarray
    mean_op: sp.csr_matrix


def _build_blocks(graph: GraphSplit, targets: np.ndarray, fanouts, rng):
    """Return (input node ids, [block for layer 1, block for layer 2])."""
    adj = graph.undirected
    layers = [np.asarray(targets, dtype=np.int64)]
    samples = []
    # walk top-down: layer 2 needs targets' neighbors, layer 1 needs theirs
    for fanout in reversed(fanouts):
        cur = layers[-1]
        indptr, cols = sample_block(adj, cur, fanout, rng)
        below = np.union1d(cur, cols)
        samples.append((indptr, cols))
        layers.append(below)
    blocks = []
    for depth in (1, 2):
        # samples[0] belongs to layers[0] -> layers[1]; samples[1] to layers[1] -> layers[2]
        upper, lower = layers[2 - depth], layers[3 - depth]
        indptr, cols = samples[2 - depth]
        pos = np.searchsorted(lower, cols)
        counts = np.diff(indptr)
        w = np.repeat(1.0 / np.maximum(counts, 1), counts).astype(np.float32)
        op = sp.csr_matrix((w, pos, indptr), shape=(len(upper), len(lower)))
        blocks.append(_Block(np.searchsorted(lower, upper), op))
    return layers[2], blocks


def _layer(h: dc.Tensor, block: _Block, w_self, w_neigh, bias) -> dc.Tensor:
    own = dc.gather_rows(h, block.self_index)
    agg = dc.row_mean(h, block.mean_op)
    z = dc.add(dc.matmul(own, w_self), dc.matmul(agg, w_neigh))
    return dc.relu(dc.add_bias(z, bias))


def encode(graph: GraphSplit, features: dc.Tensor, nodes, state: EncoderState,
           training: bool = False, rng: np.random.Generator | None = None,
           fanouts=None) -> dc.Tensor:
    """Embeddings for ``nodes`` (rows in the given order), L2-normalized.

    ``features`` holds one row per graph node. In training mode neighbors are
    sampled with the state's fanouts and dropout is applied to each layer's
    input; otherwise full neighborhoods are used unless ``fanouts`` is given.
    """
    if features.cols != state.input_dim:
        raise dc.ShapeError(f"features have width {features.cols}, encoder expects {state.input_dim}")
    if features.rows != graph.n_nodes:
        raise dc.ShapeError("one feature row per graph node is required")
    nodes = np.asarray(nodes, dtype=np.int64)
    if fanouts is None:
        fanouts = state.fanouts if training else (None, None)
    if any(f is not None for f in fanouts) and rng is None:
        raise ValueError("neighbor sampling needs an rng")
    targets = np.unique(nodes)
    if all(f is None for f in fanouts):
        key = targets.tobytes()
        if key not in graph._blocks:
            if len(graph._blocks) >= _BLOCK_CACHE:
                graph._blocks.pop(next(iter(graph._blocks)))
            graph._blocks[key] = _build_blocks(graph, targets, fanouts, rng)
        inputs, (b1, b2) = graph._blocks[key]
    else:
        inputs, (b1, b2) = _build_blocks(graph, targets, fanouts, rng)
    p = state.params
    h = dc.gather_rows(features, inputs) if len(inputs) != graph.n_nodes else features
    h = dc.dropout(h, state.dropout_p, training, rng)
    h = _layer(h, b1, p["l1.self"], p["l1.neigh"], p["l1.bias"])
    h = dc.dropout(h, state.dropout_p, training, rng)
    h = _layer(h, b2, p["l2.self"], p["l2.neigh"], p["l2.bias"])
    h = dc.l2_normalize_rows(h)
    return dc.gather_rows(h, np.searchsorted(targets, nodes))


def embed_split(graph: GraphSplit, features: dc.Tensor | np.ndarray, state: EncoderState) -> EmbeddingTable:
    """Eval-mode embeddings of every node with full neighborhoods."""
    if not isinstance(features, dc.Tensor):
        features = dc.constant(np.asarray(features, dtype=np.float32))
    frozen = EncoderState(state.input_dim, state.hidden_dim,
                          {k: dc.constant(v.data) for k, v in state.params.items()},
                          state.fanouts, state.dropout_p)
    feats = dc.constant(features.data)
    z = encode(graph, feats, np.arange(graph.n_nodes), frozen, training=False)
    return EmbeddingTable(graph.split_index, list(graph.node_ids), z.data.astype(np.float32))
