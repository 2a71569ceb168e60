"""Chain encoder training across temporally ordered graph splits.

Each split inherits the previous split's encoder. Accounts that also appeared
in the previous split get that split's final embedding, passed through a
learned projection, prepended to their attributes; every other node gets a
zero prefix.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .encoder import EmbeddingTable, EncoderState, embed_split
from .graphbuild import N_FEATURES, GraphSplit, compute_overlap
from .pretext import PretextConfig, PretextHeads, TrainLog, pretrain_split

log = logging.getLogger(__name__)


@dataclass
class HandoffPacket:
    source_split: int
    node_ids: list[str]
    embeddings: np.ndarray  # (K, hidden_dim)
    projection: np.ndarray  # (hidden_dim, hidden_dim)
    checkpoint: dict[str, np.ndarray] = field(default_factory=dict)

    def save(self, directory) -> None:
        d = Path(directory)
        EmbeddingTable(self.source_split, self.node_ids, self.embeddings).save(d)
        dc.save_params(d / "projection.bin", {"proj": dc.constant(self.projection)})
        if self.checkpoint:
            dc.save_params(d / "params.bin", {k: dc.constant(v) for k, v in self.checkpoint.items()})

    @classmethod
    def load(cls, directory) -> "HandoffPacket":
        d = Path(directory)
        tab = EmbeddingTable.load(d)
        proj = dc.load_params(d / "projection.bin")["proj"]
        ckpt = dc.load_params(d / "params.bin") if (d / "params.bin").exists() else {}
        return cls(tab.split_index, tab.node_ids, tab.vectors, proj, ckpt)


@dataclass
class IncrementalConfig:
    hidden_dim: int = 128
    fanouts: tuple = (10, 10)
    incremental: bool = True
    uniform_width: bool = True
    pretext: PretextConfig = field(default_factory=PretextConfig)


def handoff_prefix(split: GraphSplit, packet: HandoffPacket | None, hidden_dim: int) -> np.ndarray:
    """(N, hidden_dim) matrix of incoming embeddings, zero rows for new accounts."""
    prefix = np.zeros((split.n_nodes, hidden_dim), dtype=np.float32)
    if packet is not None and len(packet.node_ids):
        if packet.embeddings.shape[1] != hidden_dim:
            raise dc.ShapeError("handoff embedding width does not match hidden_dim")
        idx = split.index_of()
        for r, acct in enumerate(packet.node_ids):
            j = idx.get(acct)
            if j is not None:
                prefix[j] = packet.embeddings[r]
    return prefix


def build_concat_features(split: GraphSplit, packet: HandoffPacket | None, hidden_dim: int,
                          projection: dc.Tensor | np.ndarray | None = None) -> dc.Tensor:
    """``[projection(handoff embedding) || attributes]`` per node.

    The projection has no bias, so accounts without a handoff embedding keep
    an exactly-zero prefix. When ``projection`` is a trainable tensor the
    result stays differentiable with respect to it.
    """
    if split.attributes is None:
        raise ValueError("split attributes are not normalized yet")
    if projection is None:
        projection = packet.projection if packet is not None else np.eye(hidden_dim, dtype=np.float32)
    proj = projection if isinstance(projection, dc.Tensor) else dc.constant(np.asarray(projection, dtype=np.float32))
    if proj.shape != (hidden_dim, hidden_dim):
        raise dc.ShapeError(f"projection must be {hidden_dim}x{hidden_dim}, got {proj.shape}")
    prefix = dc.constant(handoff_prefix(split, packet, hidden_dim))
    return dc.concat_rows(dc.matmul(prefix, proj), dc.constant(split.attributes))


@dataclass
class IncrementalResult:
    state: EncoderState
    projection: np.ndarray
    packets: dict[int, HandoffPacket]  # keyed by receiving position in the split list
    tables: dict[int, EmbeddingTable]
    logs: list[TrainLog]
    checkpoints: list[dict[str, np.ndarray]]  # encoder params after each trained split
    start_checkpoints: list[dict[str, np.ndarray]]  # encoder params entering each split
    trained: list[int]

    def features_for(self, split: GraphSplit, pos: int) -> np.ndarray:
        return split_features(split, self.packets.get(pos), self.state.hidden_dim,
                              self.projection, self.state.input_dim).data


def split_features(split: GraphSplit, packet: HandoffPacket | None, hidden_dim: int,
                   projection, width: int) -> dc.Tensor:
    """Encoder input for ``split``: bare attributes for a width-17 encoder, else the concatenation."""
    if width == N_FEATURES:
        return dc.constant(split.attributes)
    return build_concat_features(split, packet, hidden_dim, projection)


def _params_snapshot(state: EncoderState) -> dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in state.params.items()}


def run_incremental(splits: Sequence[GraphSplit], config: IncrementalConfig, rng: np.random.Generator,
                    n_train: int | None = None,
                    trainer: Callable[..., TrainLog] | None = None) -> IncrementalResult:
    """Train on ``splits[:n_train]`` in order; later splits only receive handoffs.

    Every split that has a successor in ``splits`` emits a handoff packet for
    it, so three trained splits yield two packets, and a trailing untrained
    split still receives one. Returns the frozen final encoder and eval-mode
    embedding tables for every split in ``splits``.
    """
    if not splits:
        raise ValueError("need at least one split")
    n_train = len(splits) if n_train is None else n_train
    if not 1 <= n_train <= len(splits):
        raise ValueError("n_train must be between 1 and the number of splits")
    trainer = trainer or pretrain_split
    cfg = config
    h = cfg.hidden_dim
    pcfg = cfg.pretext

    def fresh_width() -> int:
        return h + N_FEATURES if (cfg.incremental and cfg.uniform_width) else N_FEATURES

    state: EncoderState | None = None
    heads: PretextHeads | None = None
    projection = dc.parameter(np.eye(h, dtype=np.float32))
    packets: dict[int, HandoffPacket] = {}
    logs: list[TrainLog] = []
    checkpoints: list[dict[str, np.ndarray]] = []
    starts: list[dict[str, np.ndarray]] = []
    trained: list[int] = []

    for pos in range(n_train):
        split = splits[pos]
        if state is None or not cfg.incremental:
            state = EncoderState.init(fresh_width(), h, rng, cfg.fanouts, pcfg.dropout)
            heads = PretextHeads.init(h, rng)
            projection = dc.parameter(np.eye(h, dtype=np.float32))
        else:
            state = state.copy()
            state.dropout_p = pcfg.dropout
            if state.input_dim != h + N_FEATURES:
                state = state.widen_input(h + N_FEATURES, rng)
        starts.append(_params_snapshot(state))
        packet = packets.get(pos) if cfg.incremental else None

        def feats(split=split, packet=packet, width=state.input_dim):
            return split_features(split, packet, h, projection, width)

        t_nodes = t_targets = None
        if pos + 1 < len(splits):
            ov = compute_overlap(split, splits[pos + 1])
            if len(ov):
                t_nodes = ov.pairs[:, 0]
                t_targets = splits[pos + 1].attributes[ov.pairs[:, 1]]
            else:
                log.info("split %d: empty overlap, temporal task skipped", split.split_index)
        extra = {"proj": projection} if (cfg.incremental and packet is not None) else None
        logs.append(trainer(split, feats, state, heads, pcfg, rng,
                            temporal_nodes=t_nodes, temporal_targets=t_targets, extra_params=extra))
        trained.append(pos)
        checkpoints.append(_params_snapshot(state))

        if cfg.incremental and pos + 1 < len(splits):
            table = embed_split(split, feats(), state)
            ov = compute_overlap(split, splits[pos + 1])
            ids = [split.node_ids[i] for i in ov.pairs[:, 0]]
            packets[pos + 1] = HandoffPacket(split.split_index, ids,
                                             table.vectors[ov.pairs[:, 0]].copy(),
                                             projection.data.copy(), _params_snapshot(state))

    final = EncoderState(state.input_dim, state.hidden_dim,
                         {k: dc.constant(v.data.copy()) for k, v in state.params.items()},
                         state.fanouts, state.dropout_p)
    proj_final = projection.data.copy()
    tables = {}
    for pos, split in enumerate(splits):
        packet = packets.get(pos) if cfg.incremental else None
        tables[pos] = embed_split(split, split_features(split, packet, h, proj_final, final.input_dim), final)
    return IncrementalResult(final, proj_final, packets, tables, logs, checkpoints, starts, trained)


def independent_config(config: IncrementalConfig) -> IncrementalConfig:
    return replace(config, incremental=False)
