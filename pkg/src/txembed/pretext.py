"""Self-supervised objectives: k-hop neighborhood similarity and next-split attribute regression."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

from . import diffcore as dc
from .encoder import EncoderState, encode, _glorot
from .graphbuild import N_FEATURES, GraphSplit

log = logging.getLogger(__name__)

NEG_RETRIES = 50


@dataclass
class PairBatch:
    positives: np.ndarray  # (P, 2) anchor, node within k hops
    negatives: np.ndarray  # (Q, 2) anchor, node beyond k hops

    def nodes(self) -> np.ndarray:
        return np.unique(np.concatenate([self.positives.ravel(), self.negatives.ravel()]))


@dataclass
class PretextHeads:
    params: dict[str, dc.Tensor]

    @classmethod
    def init(cls, hidden_dim: int, rng: np.random.Generator, n_targets: int = N_FEATURES) -> "PretextHeads":
        p = {
            "spatial.w": _glorot(rng, hidden_dim, hidden_dim),
            "spatial.b": np.zeros((1, hidden_dim), dtype=np.float32),
            "temporal.w": _glorot(rng, hidden_dim, n_targets),
            "temporal.b": np.zeros((1, n_targets), dtype=np.float32),
        }
        return cls({k: dc.parameter(v) for k, v in p.items()})

    def spatial(self, z: dc.Tensor) -> dc.Tensor:
        return dc.add_bias(dc.matmul(z, self.params["spatial.w"]), self.params["spatial.b"])

    def temporal(self, z: dc.Tensor) -> dc.Tensor:
        return dc.add_bias(dc.matmul(z, self.params["temporal.w"]), self.params["temporal.b"])


@dataclass
class PretextConfig:
    k: int = 2
    per_node_pos: int = 5
    neg_ratio: float = 1.0
    epochs_spatial: int = 10
    epochs_temporal: int = 5
    batch_size: int = 512
    lr: float = 1e-3
    dropout: float = 0.5
    spatial_loss_form: str = "raw"
    spatial: bool = True
    temporal: bool = True


# pair sampling ---------------------------------------------------------------

def khop_balls(adj: sp.csr_matrix, anchors: np.ndarray, k: int) -> sp.csr_matrix:
    """Boolean (len(anchors), N) matrix: entry set iff within k undirected hops (self included)."""
    n = adj.shape[0]
    a = adj.astype(bool).tocsr()
    reach = sp.csr_matrix((np.ones(len(anchors), dtype=bool), (np.arange(len(anchors)), anchors)),
                          shape=(len(anchors), n))
    frontier = reach
    for _ in range(k):
        frontier = (frontier @ a).astype(bool)
        new = (frontier > reach)
        if new.nnz == 0:
            break
        reach = (reach + new).astype(bool)
        frontier = new.tocsr()
    reach = reach.tocsr()
    reach.sort_indices()
    return reach


def sample_pairs(graph: GraphSplit, k: int = 2, per_node_pos: int = 5, neg_ratio: float = 1.0,
                 rng: np.random.Generator | None = None, anchors=None) -> PairBatch:
    """Positive pairs from each anchor's k-hop ball, negatives by rejection sampling.

    Negatives are drawn from the whole split and rejected when within k hops
    of their anchor, with at most ``NEG_RETRIES`` draws per needed negative.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    rng = rng if rng is not None else np.random.default_rng()
    n = graph.n_nodes
    anchors = np.arange(n) if anchors is None else np.asarray(anchors, dtype=np.int64)
    balls = khop_balls(graph.undirected, anchors, k)
    pos: list[tuple[int, int]] = []
    for r, a in enumerate(anchors):
        ball = balls.indices[balls.indptr[r]:balls.indptr[r + 1]]
        ball = ball[ball != a]
        if len(ball) == 0:
            continue
        take = ball if len(ball) <= per_node_pos else rng.choice(ball, size=per_node_pos, replace=False)
        pos.extend((int(a), int(b)) for b in take)
    positives = np.array(pos, dtype=np.int64).reshape(-1, 2)

    n_neg = int(round(neg_ratio * len(positives)))
    negatives = np.zeros((0, 2), dtype=np.int64)
    if n_neg and n > 1:
        row_of = np.full(n, -1, dtype=np.int64)
        row_of[anchors] = np.arange(len(anchors))
        owners = positives[np.arange(n_neg) % len(positives), 0]
        chosen = np.full(n_neg, -1, dtype=np.int64)
        pending = np.arange(n_neg)
        # every round gives each still-unfilled slot one more draw
        for _ in range(NEG_RETRIES):
            if len(pending) == 0:
                break
            cand = rng.integers(n, size=len(pending))
            inside = np.asarray(balls[row_of[owners[pending]], cand]).ravel().astype(bool)
            chosen[pending[~inside]] = cand[~inside]
            pending = pending[inside]
        ok = chosen >= 0
        negatives = np.stack([owners[ok], chosen[ok]], axis=1)
    if len(negatives) < n_neg:
        log.info("negative sampling under-filled: %d of %d", len(negatives), n_neg)
    return PairBatch(positives, negatives)


# losses ----------------------------------------------------------------------

def _pair_scores(h: dc.Tensor, pairs: np.ndarray) -> dc.Tensor:
    return dc.dot(dc.gather_rows(h, pairs[:, 0]), dc.gather_rows(h, pairs[:, 1]))


def spatial_loss(z: dc.Tensor, heads: PretextHeads, batch: PairBatch, row_of=None,
                 form: str = "raw") -> dc.Tensor:
    """Pull k-hop pairs together and push the others apart through sigmoid(a.b).

    ``z`` holds embeddings; pair entries are translated to its rows with
    ``row_of`` (an index array), or used directly when ``row_of`` is None.
    With ``form='raw'`` the loss is ``-mean sigmoid(pos) + mean sigmoid(neg)``;
    ``form='log'`` uses ``-mean log sigmoid(pos) - mean log sigmoid(-neg)``.
    """
    if len(batch.positives) == 0:
        raise ValueError("spatial loss needs at least one positive pair")
    pos = batch.positives if row_of is None else row_of[batch.positives]
    neg = batch.negatives if row_of is None else row_of[batch.negatives]
    h = heads.spatial(z)
    s_pos = _pair_scores(h, pos)
    if form == "raw":
        loss = dc.scale(dc.mean(dc.sigmoid(s_pos)), -1.0)
        if len(neg):
            loss = dc.add(loss, dc.mean(dc.sigmoid(_pair_scores(h, neg))))
    elif form == "log":
        loss = dc.scale(dc.mean(dc.log_sigmoid(s_pos)), -1.0)
        if len(neg):
            loss = dc.sub(loss, dc.mean(dc.log_sigmoid(dc.scale(_pair_scores(h, neg), -1.0))))
    else:
        raise ValueError(f"unknown spatial loss form {form!r}")
    return loss


def temporal_loss(z: dc.Tensor, heads: PretextHeads, targets: np.ndarray) -> dc.Tensor:
    """Mean squared distance between the regression head output and next-split attributes."""
    if z.rows == 0:
        raise ValueError("temporal loss needs overlap nodes")
    t = dc.constant(np.asarray(targets, dtype=z.data.dtype))
    return dc.mse(heads.temporal(z), t)


# training --------------------------------------------------------------------

@dataclass
class TrainLog:
    spatial: list[float] = field(default_factory=list)
    temporal: list[float] = field(default_factory=list)
    steps: int = 0
    optimizer: dc.Adam | None = field(default=None, repr=False, compare=False)

    def to_json(self) -> dict:
        return {"spatial": self.spatial, "temporal": self.temporal, "steps": self.steps}


FeatureFn = Callable[[], dc.Tensor]


def pretrain_split(graph: GraphSplit, features: FeatureFn | dc.Tensor, state: EncoderState,
                   heads: PretextHeads, config: PretextConfig, rng: np.random.Generator,
                   temporal_nodes: np.ndarray | None = None, temporal_targets: np.ndarray | None = None,
                   extra_params: dict[str, dc.Tensor] | None = None) -> TrainLog:
    """Spatial phase, then (when overlap targets are given) the temporal phase.

    Parameters are updated in place. ``features`` may be a callable that
    rebuilds the (possibly differentiable) input matrix for every step;
    ``extra_params`` are trained alongside the encoder and heads.
    """
    params = {f"enc.{k}": v for k, v in state.params.items()}
    params.update(heads.params)
    if extra_params:
        params.update(extra_params)
    opt = dc.Adam(params, lr=config.lr)
    feats = features if callable(features) else (lambda: features)
    out = TrainLog(optimizer=opt)
    n = graph.n_nodes

    if config.spatial:
        for _ in range(config.epochs_spatial):
            order = rng.permutation(n)
            losses = []
            for start in range(0, n, config.batch_size):
                anchors = order[start:start + config.batch_size]
                batch = sample_pairs(graph, config.k, config.per_node_pos, config.neg_ratio, rng, anchors)
                if len(batch.positives) == 0:
                    continue
                nodes = batch.nodes()
                row_of = np.full(n, -1, dtype=np.int64)
                row_of[nodes] = np.arange(len(nodes))
                opt.zero_grad()
                z = encode(graph, feats(), nodes, state, training=True, rng=rng)
                loss = spatial_loss(z, heads, batch, row_of, config.spatial_loss_form)
                loss.backward()
                opt.step()
                out.steps += 1
                losses.append(loss.item())
            if losses:
                out.spatial.append(float(np.mean(losses)))

    has_targets = temporal_nodes is not None and len(temporal_nodes) > 0
    if config.temporal and has_targets:
        temporal_nodes = np.asarray(temporal_nodes, dtype=np.int64)
        targets = np.asarray(temporal_targets, dtype=np.float32)
        m = len(temporal_nodes)
        for _ in range(config.epochs_temporal):
            order = rng.permutation(m)
            losses = []
            for start in range(0, m, config.batch_size):
                sel = order[start:start + config.batch_size]
                opt.zero_grad()
                z = encode(graph, feats(), temporal_nodes[sel], state, training=True, rng=rng)
                loss = temporal_loss(z, heads, targets[sel])
                loss.backward()
                opt.step()
                out.steps += 1
                losses.append(loss.item())
            out.temporal.append(float(np.mean(losses)))
    return out
