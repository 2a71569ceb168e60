import numpy as np
import pytest

from conftest import SMALL_SYNTH
from txembed.graphbuild import compute_overlap, finalize
from txembed.ingest import ParseReport, filter_transactions, parse_transactions
from txembed.synthgen import SynthConfig, generate, verify_motif, write_output


@pytest.fixture(scope="module")
def default_out():
    return generate(SynthConfig(seed=0))


@pytest.fixture(scope="module")
def default_graphs(default_out):
    return [finalize(t, i) for i, t in enumerate(default_out.splits)]


def test_exact_transaction_counts():
    out = generate(SynthConfig(seed=2, n_splits=3, accounts_per_split=80, txs_per_split=1000,
                               phishing_fraction=0.1))
    assert [len(s) for s in out.splits] == [1000, 1000, 1000]


def test_same_seed_gives_identical_files(tmp_path):
    cfg = dict(seed=4, **SMALL_SYNTH)
    for d in ("a", "b"):
        write_output(generate(SynthConfig(**cfg)), tmp_path / d)
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == sorted(p.name for p in (tmp_path / "b").iterdir())
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()


def test_different_seeds_differ():
    a = generate(SynthConfig(seed=0, **SMALL_SYNTH))
    b = generate(SynthConfig(seed=1, **SMALL_SYNTH))
    assert a.phishing != b.phishing


def test_blocks_monotone_and_files_parse(tmp_path):
    out = generate(SynthConfig(seed=3, **SMALL_SYNTH))
    paths = write_output(out, tmp_path)
    last = -1
    for p, txs in zip(paths, out.splits):
        report = ParseReport()
        parsed = parse_transactions(p, report=report)
        assert parsed == txs and report.malformed == 0
        blocks = [t.block_number for t in txs]
        assert blocks == sorted(blocks) and blocks[0] >= last
        last = blocks[-1]


def test_stream_passes_filter_untouched(default_out):
    for txs in default_out.splits:
        assert filter_transactions(txs) == txs
        assert all(t.success and t.value > 0 for t in txs)


def test_overlap_near_target(default_graphs):
    ratios = [compute_overlap(a, b).ratio for a, b in zip(default_graphs, default_graphs[1:])]
    assert all(abs(r - 0.27) <= 0.05 for r in ratios), ratios


@pytest.mark.parametrize("target", [0.15, 0.4])
def test_overlap_follows_configuration(target):
    out = generate(SynthConfig(seed=0, target_overlap_ratio=target, **SMALL_SYNTH))
    gs = [finalize(t, i) for i, t in enumerate(out.splits)]
    ratios = [compute_overlap(a, b).ratio for a, b in zip(gs, gs[1:])]
    assert all(abs(r - target) <= 0.05 for r in ratios), ratios


def test_default_split_size(default_graphs):
    assert all(1700 <= g.n_nodes <= 2300 for g in default_graphs)


def test_fresh_output_fully_compliant(default_out):
    txs = [t for s in default_out.splits for t in s]
    report = verify_motif(txs, default_out.phishing)
    assert report.checked == len(default_out.phishing) > 0
    assert report.compliance == 1.0, report.failures[:3]


def test_shuffled_labels_fail_motif(default_out):
    txs = [t for s in default_out.splits for t in s]
    normal = sorted(a for a, r in default_out.roles.items() if r == "normal")
    rng = np.random.default_rng(0)
    fake = list(rng.choice(normal, size=len(default_out.phishing), replace=False))
    assert verify_motif(txs, fake).compliance < 0.5


def test_empty_labels_vacuously_compliant(default_out):
    report = verify_motif(default_out.splits[0], [])
    assert report.checked == 0 and report.compliance == 1.0


def test_phishing_accounts_labeled_and_present(default_out, default_graphs):
    present = set().union(*(g.node_ids for g in default_graphs))
    assert set(default_out.phishing) <= present
    assert all(default_out.roles[a] == "phishing" for a in default_out.phishing)


@pytest.mark.parametrize("bad", [
    dict(n_splits=0), dict(txs_per_split=0), dict(phishing_fraction=0.0), dict(target_overlap_ratio=1.0),
    dict(victims_min=5, victims_max=4), dict(accounts_per_split=20, txs_per_split=100),
    dict(accounts_per_split=40, phishing_fraction=0.9, victims_max=60, fresh_victim_share=0.01),
])
def test_infeasible_configs_rejected(bad):
    with pytest.raises(ValueError):
        generate(SynthConfig(**bad))


def test_phishing_separable_on_key_features(default_out, default_graphs):
    # features 2, 4, 14, 16 (in-degree, in-count, in-frequency, repeat in-counterparties)
    ph = set(default_out.phishing)
    for col in (1, 3, 13, 15):
        pos = np.concatenate([g.attributes[[a in ph for a in g.node_ids], col] for g in default_graphs])
        neg = np.concatenate([g.attributes[[a not in ph for a in g.node_ids], col] for g in default_graphs])
        pooled = np.sqrt((pos.var() + neg.var()) / 2)
        gap = abs(pos.mean() - neg.mean()) / pooled
        assert gap > 1.0, f"feature {col + 1}: mean gap {gap:.2f} pooled sd"
