import numpy as np
import pytest

from txembed import diffcore as dc
from txembed.encoder import PARAM_NAMES
from txembed.graphbuild import N_FEATURES, compute_overlap
from txembed.incremental import (HandoffPacket, IncrementalConfig, build_concat_features, handoff_prefix,
                                 run_incremental)
from txembed.pretext import PretextConfig, pretrain_split

from conftest import graph_from_edges

H = 8


def chain(rng, n_splits=3, n=40, keep=0.3):
    """Splits whose node sets overlap by about ``keep`` of the previous split."""
    splits, pool, next_id = [], [], 0
    for i in range(n_splits):
        carried = list(rng.choice(pool, size=int(keep * len(pool)), replace=False)) if pool else []
        fresh = [f"a{next_id + j}" for j in range(n - len(carried))]
        next_id += len(fresh)
        names = carried + fresh
        edges = [(j, (j + 1) % n) for j in range(n)] + [tuple(rng.integers(n, size=2)) for _ in range(n)]
        splits.append(graph_from_edges(n, edges, rng, split_index=i, ids=names))
        pool = names
    return splits


def small_config(**kw):
    pc = PretextConfig(epochs_spatial=1, epochs_temporal=1, batch_size=16)
    return IncrementalConfig(hidden_dim=H, pretext=pc, **kw)


def test_first_split_prefix_is_zero(rng):
    (g,) = chain(rng, 1)
    x = build_concat_features(g, None, H).data
    assert x.shape == (g.n_nodes, H + N_FEATURES)
    assert (x[:, :H] == 0).all()
    assert (x[:, H:] == g.attributes).all()


def test_overlap_rows_get_projected_handoff(rng):
    a, b = chain(rng, 2)
    ov = compute_overlap(a, b)
    emb = rng.normal(size=(len(ov), H)).astype(np.float32)
    proj = rng.normal(size=(H, H)).astype(np.float32)
    packet = HandoffPacket(0, [a.node_ids[i] for i in ov.pairs[:, 0]], emb, proj)
    x = build_concat_features(b, packet, H).data
    carried = set(ov.pairs[:, 1].tolist())
    for r, j in enumerate(ov.pairs[:, 1]):
        np.testing.assert_allclose(x[j, :H], emb[r] @ proj, rtol=1e-6)
    for j in range(b.n_nodes):
        assert (x[j, :H] == 0).all() == (j not in carried)
    assert (x[:, H:] == b.attributes).all()


def test_projection_shape_checked(rng):
    (g,) = chain(rng, 1)
    with pytest.raises(dc.ShapeError):
        build_concat_features(g, None, H, np.eye(H + 1))
    bad = HandoffPacket(0, [g.node_ids[0]], np.zeros((1, H + 2), np.float32), np.eye(H, dtype=np.float32))
    with pytest.raises(dc.ShapeError):
        handoff_prefix(g, bad, H)


def test_one_split_equals_plain_pretraining():
    cfg = small_config(uniform_width=False)
    (g,) = chain(np.random.default_rng(3), 1)
    res = run_incremental([g], cfg, np.random.default_rng(5))
    assert res.packets == {} and res.state.input_dim == N_FEATURES

    from txembed.encoder import EncoderState
    from txembed.pretext import PretextHeads
    rng = np.random.default_rng(5)
    st = EncoderState.init(N_FEATURES, H, rng, cfg.fanouts, cfg.pretext.dropout)
    heads = PretextHeads.init(H, rng)
    pretrain_split(g, dc.constant(g.attributes), st, heads, cfg.pretext, rng)
    for k in PARAM_NAMES:
        assert st.params[k].data.tobytes() == res.state.params[k].data.tobytes()


def test_three_splits_make_two_packets(rng):
    res = run_incremental(chain(rng, 3), small_config(), rng)
    assert sorted(res.packets) == [1, 2]
    for pos, packet in res.packets.items():
        assert packet.source_split == pos - 1


def test_trailing_untrained_split_receives_packet(rng):
    splits = chain(rng, 4)
    seen = []

    def trainer(split, *a, **kw):
        seen.append(split.split_index)
        return pretrain_split(split, *a, **kw)

    res = run_incremental(splits, small_config(), rng, n_train=3, trainer=trainer)
    assert seen == [0, 1, 2] and res.trained == [0, 1, 2]
    assert sorted(res.packets) == [1, 2, 3] and sorted(res.tables) == [0, 1, 2, 3]


def test_packet_accounts_are_overlap_accounts(rng):
    splits = chain(rng, 3)
    res = run_incremental(splits, small_config(), rng)
    for pos, packet in res.packets.items():
        prev, cur = splits[pos - 1], splits[pos]
        assert set(packet.node_ids) == set(prev.node_ids) & set(cur.node_ids)


def test_zero_prefix_exactly_on_new_nodes(rng):
    splits = chain(rng, 3)
    res = run_incremental(splits, small_config(), rng)
    for pos, split in enumerate(splits):
        x = res.features_for(split, pos)
        assert x.shape[1] == H + N_FEATURES
        prev = set(splits[pos - 1].node_ids) if pos else set()
        packet = res.packets.get(pos)
        handed = dict(zip(packet.node_ids, packet.embeddings)) if packet else {}
        for j, acct in enumerate(split.node_ids):
            if acct not in prev:
                assert (x[j, :H] == 0).all()
            else:
                np.testing.assert_allclose(x[j, :H], handed[acct] @ res.projection, rtol=1e-5, atol=1e-7)
                # a handoff row is only zero when every unit of its embedding was inactive
                assert (x[j, :H] != 0).any() or not handed[acct].any()


def test_checkpoints_chain_byte_for_byte(rng):
    res = run_incremental(chain(rng, 3), small_config(), rng)
    for before, after in zip(res.checkpoints, res.start_checkpoints[1:]):
        for k in PARAM_NAMES:
            assert before[k].tobytes() == after[k].tobytes()


def test_widening_copies_attribute_block(rng):
    res = run_incremental(chain(rng, 2), small_config(uniform_width=False), rng)
    first, second = res.checkpoints[0], res.start_checkpoints[1]
    assert first["l1.self"].shape == (N_FEATURES, H)
    assert second["l1.self"].shape == (H + N_FEATURES, H)
    for k in ("l1.self", "l1.neigh"):
        assert (second[k][H:] == first[k]).all()
    for k in ("l1.bias", "l2.self", "l2.neigh", "l2.bias"):
        assert (second[k] == first[k]).all()


def test_no_incremental_trains_independent_bare_encoders(rng):
    res = run_incremental(chain(rng, 3), small_config(incremental=False), rng)
    assert res.packets == {} and res.state.input_dim == N_FEATURES
    a, b = res.checkpoints[0]["l1.self"], res.start_checkpoints[1]["l1.self"]
    assert a.tobytes() != b.tobytes()


def test_packet_save_load(tmp_path, rng):
    packet = HandoffPacket(2, ["x", "y"], rng.normal(size=(2, H)).astype(np.float32),
                           np.eye(H, dtype=np.float32), {"l1.bias": np.ones((1, H), np.float32)})
    packet.save(tmp_path)
    back = HandoffPacket.load(tmp_path)
    assert back.source_split == 2 and back.node_ids == ["x", "y"]
    assert (back.embeddings == packet.embeddings).all() and (back.projection == packet.projection).all()
    assert (back.checkpoint["l1.bias"] == 1).all()
