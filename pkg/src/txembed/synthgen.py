"""Synthetic transaction streams with planted phishing behavior.

Normal accounts trade by preferential attachment with log-normal values and
a tendency to repeat past counterparties. A minority of normal "collector"
accounts (deposit addresses, merchants) take many small payments from
established customers and sweep them onward. Phishing accounts run a burst
of small incoming transfers from distinct low-activity victims and then move
the proceeds out in 1-3 large transfers; some of them only cash out in the
following split. A configurable share of each split's accounts, biased
toward busy ones, stays active in the next split.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .ingest import TransactionRecord, write_transactions

SPLIT_SECONDS = 7 * 24 * 3600
BLOCK_SECONDS = 13
GENESIS_TS = 1_514_764_800  # 2018-01-01
GENESIS_BLOCK = 4_832_686
# each split owns a disjoint block range so block-aligned re-splitting recovers it
BLOCKS_PER_SPLIT = -(-SPLIT_SECONDS // BLOCK_SECONDS)


@dataclass
class SynthConfig:
    seed: int = 0
    n_splits: int = 5
    accounts_per_split: int = 600
    txs_per_split: int = 9000
    phishing_fraction: float = 0.25
    target_overlap_ratio: float = 0.27
    contract_fraction: float = 0.05
    value_mu: float = math.log(2e17)
    value_sigma: float = 1.5
    victims_min: int = 3
    victims_max: int = 8
    stealth_share: float = 0.5
    gangs_per_split: int = 3
    gang_route_prob: float = 0.85
    victim_reuse: float = 3.0
    collector_fresh_share: float = 0.1
    late_spread: bool = False
    stealth_victims: int = 3
    fresh_victim_share: float = 0.5
    burst_min_s: int = 3600
    burst_max_s: int = 2 * 24 * 3600
    late_cashout_share: float = 0.3
    collectors_per_phishing: float = 5.0
    repeat_prob: float = 0.35
    attachment_base: float = 1.0
    recurring_share: float = 0.1
    recurring_min: int = 2
    recurring_max: int = 4

    def validate(self) -> None:
        counts = (self.n_splits, self.accounts_per_split, self.txs_per_split, self.victims_min)
        if any(c <= 0 for c in counts):
            raise ValueError("counts must be positive")
        for name in ("phishing_fraction", "target_overlap_ratio", "contract_fraction",
                     "fresh_victim_share", "recurring_share"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.recurring_max < self.recurring_min or self.recurring_min < 2:
            raise ValueError("recurring payments need 2 <= recurring_min <= recurring_max")
        if self.collectors_per_phishing < 0:
            raise ValueError("collectors_per_phishing must be non-negative")
        if self.victims_max < self.victims_min:
            raise ValueError("victims_max < victims_min")
        if self.n_phishing * (self.victims_max + 3) >= self.txs_per_split:
            raise ValueError("phishing motifs need more transactions than a split holds")
        if self.victim_reuse < 1 or self.gangs_per_split < 1:
            raise ValueError("victim_reuse and gangs_per_split must be at least 1")
        # each gang's shared victim pool draws its established members from the split's normals
        pool = max(self.victims_max, self.n_phishing * self.victims_max / (self.gangs_per_split * self.victim_reuse))
        if pool * (1 - self.fresh_victim_share) > self.accounts_per_split:
            raise ValueError("not enough normal accounts to serve as victims")

    @property
    def n_phishing(self) -> int:
        return max(1, int(round(self.phishing_fraction * self.accounts_per_split)))


@dataclass
class SynthOutput:
    splits: list[list[TransactionRecord]]
    phishing: list[str]
    meta: dict
    roles: dict[str, str] = field(default_factory=dict)  # account id -> normal/phishing/victim/collector


def _account_id(seed: int, k: int) -> str:
    return "0x" + hashlib.sha256(f"{seed}:{k}".encode()).hexdigest()[:40]


class _Accounts:
    def __init__(self, seed: int, contract_fraction: float, rng: np.random.Generator):
        self.seed = seed
        self.rng = rng
        self.contract_fraction = contract_fraction
        self.ids: list[str] = []
        self.is_contract: list[bool] = []
        self.kind: list[str] = []

    def new(self, kind: str, can_be_contract: bool = False) -> int:
        k = len(self.ids)
        self.ids.append(_account_id(self.seed, k))
        self.is_contract.append(bool(can_be_contract and self.rng.random() < self.contract_fraction))
        self.kind.append(kind)
        return k


class _Split:
    """Accumulates one split's transfers as (ts, src, dst, value) tuples."""

    def __init__(self, index: int):
        self.index = index
        self.t0 = GENESIS_TS + index * SPLIT_SECONDS
        self.rows: list[tuple[int, int, int, int]] = []

    def add(self, ts: int, src: int, dst: int, value: int) -> None:
        ts = min(max(ts, self.t0), self.t0 + SPLIT_SECONDS - 1)
        self.rows.append((int(ts), int(src), int(dst), max(1, int(value))))


def _value(rng, mu, sigma, size=None):
    return np.maximum(1, np.round(rng.lognormal(mu, sigma, size))).astype(np.int64) if size is not None \
        else max(1, int(round(rng.lognormal(mu, sigma))))


def _pick(rng, weights: np.ndarray, size: int, exclude=None) -> np.ndarray:
    w = weights.astype(np.float64).copy()
    if exclude is not None:
        w[exclude] = 0.0
    w /= w.sum()
    return rng.choice(len(w), size=size, replace=False, p=w) if size <= np.count_nonzero(w) \
        else np.flatnonzero(w)


def _fan_in(rng, cfg: SynthConfig) -> int:
    """Number of distinct payers in one burst; phishing and collectors share this draw."""
    if rng.random() < cfg.stealth_share:
        return int(rng.integers(2, cfg.stealth_victims + 1))
    return int(rng.integers(cfg.victims_min, cfg.victims_max + 1))


def generate(config: SynthConfig) -> SynthOutput:
    """Build ``n_splits`` transaction groups of exactly ``txs_per_split`` transfers each."""
    cfg = config
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    acc = _Accounts(cfg.seed, cfg.contract_fraction, rng)
    mu, sigma = cfg.value_mu, cfg.value_sigma
    phishing: list[int] = []
    carried: list[int] = []  # normal accounts persisting into the next split
    late: list[tuple[int, float, int, bool]] = []  # (account, amount, n_out, spread) for next split
    splits: list[_Split] = []
    overlap_targets: list[int] = []

    for s in range(cfg.n_splits):
        sp_ = _Split(s)
        n_new = cfg.accounts_per_split - len(carried)
        normals = list(carried) + [acc.new("normal", can_be_contract=True) for _ in range(max(n_new, 0))]
        normals_arr = np.array(normals, dtype=np.int64)
        m = len(normals_arr)
        activity = rng.pareto(1.5, size=m) + 1.0
        # persisting accounts are the busier ones
        activity[:len(carried)] *= 2.0
        deg = np.zeros(m)
        budget = cfg.txs_per_split

        q_value = float(np.exp(mu + sigma * 0.6745))  # 75th percentile of normal values

        # sweeps deferred from the previous split: collectors sweep to one
        # address, phishing accounts spread the proceeds over several
        for owner, amount, n_out, spread in late:
            if spread:
                k = int(rng.integers(2, 5))
                dsts = normals_arr[_pick(rng, activity + deg, k)]
                amount = max(amount * n_out / k, 1.5 * q_value)
            else:
                dsts = np.repeat(normals_arr[_pick(rng, activity + deg, 1)], n_out)
            for dst in dsts:
                sp_.add(sp_.t0 + int(rng.integers(0, 12 * 3600)), owner, int(dst), int(amount))
                budget -= 1
        late = []

        cut = sp_.t0 + SPLIT_SECONDS
        funded: set[int] = set()

        def episode(owner: int, payers: list[int], fresh: set[int], sink: int | None = None,
                    spread_late: bool = False) -> None:
            """Burst of small payments into ``owner``, then 1-3 large sweeps out."""
            nonlocal budget
            dur = int(rng.integers(cfg.burst_min_s, cfg.burst_max_s + 1))
            start = sp_.t0 + int(rng.integers(0, SPLIT_SECONDS - dur))
            total = 0
            for v in payers:
                val = _value(rng, mu - 0.5, 0.6)
                total += val
                ts = start + int(rng.integers(0, dur + 1))
                if v in fresh and v not in funded:
                    funded.add(v)
                    # a fresh wallet is funded by one withdrawal shortly before it pays
                    src = _pick(rng, activity + deg, 1)[0]
                    sp_.add(ts - int(rng.integers(600, 24 * 3600)), normals_arr[src], v, int(val * 1.05) + 1)
                    deg[src] += 1
                    budget -= 1
                sp_.add(ts, v, owner, val)
            budget -= len(payers)
            n_out = int(rng.integers(1, 4))
            amount = max(total / n_out, 1.5 * q_value)
            if rng.random() < cfg.late_cashout_share and s + 1 < cfg.n_splits:
                late.append((owner, amount, n_out, spread_late))
                return
            # every sweep of one episode lands on a single destination
            if sink is not None and rng.random() < cfg.gang_route_prob:
                dst = sink
            else:
                dst = _pick(rng, activity + deg, 1)[0]
            for _ in range(n_out):
                sp_.add(min(start + dur + int(rng.integers(60, 6 * 3600)), cut - 1), owner, normals_arr[dst],
                        int(amount))
                deg[dst] += 1
            budget -= n_out

        def payers(n: int, fresh_share: float, quiet: bool) -> tuple[list[int], set[int]]:
            n_fresh = int(rng.binomial(n, fresh_share))
            w = 1.0 / (activity + deg) if quiet else activity + deg
            old = normals_arr[_pick(rng, w, n - n_fresh)] if n > n_fresh else []
            fresh = [acc.new("victim") for _ in range(n_fresh)]
            return fresh + [int(o) for o in old], set(fresh)

        # phishing gangs route proceeds through a shared, otherwise ordinary
        # account and draw victims from a shared pool
        n_g = cfg.gangs_per_split
        sinks = _pick(rng, 1.0 / activity, n_g)
        gang_of = rng.integers(n_g, size=cfg.n_phishing)
        fan = [_fan_in(rng, cfg) for _ in range(cfg.n_phishing)]
        pools = []
        for gi in range(n_g):
            need = sum(f for f, g_ in zip(fan, gang_of) if g_ == gi)
            size = max(max([f for f, g_ in zip(fan, gang_of) if g_ == gi], default=1),
                       int(math.ceil(need / cfg.victim_reuse)))
            pools.append(payers(size, cfg.fresh_victim_share, quiet=True))
        for k in range(cfg.n_phishing):
            p_acct = acc.new("phishing")
            phishing.append(p_acct)
            pool, fresh = pools[gang_of[k]]
            who = [pool[i] for i in rng.choice(len(pool), size=fan[k], replace=False)]
            episode(p_acct, who, fresh, sink=int(sinks[gang_of[k]]), spread_late=cfg.late_spread)

        # collectors (deposit addresses, one-off sellers): the same shape and the
        # same kind of payers, swept to wherever
        for _ in range(int(round(cfg.collectors_per_phishing * cfg.n_phishing))):
            who, fresh = payers(_fan_in(rng, cfg), cfg.collector_fresh_share, quiet=False)
            episode(acc.new("collector"), who, fresh)

        # every normal account transacts at least once, then preferential fill
        partners: dict[int, list[int]] = {}
        touched = np.zeros(m, dtype=bool)

        # recurring payments: a payer settles the same payee several times
        n_rec = int(round(cfg.recurring_share * m))
        payees = rng.choice(np.flatnonzero(~touched), size=min(n_rec, int((~touched).sum())), replace=False)
        for i in payees:
            j = int(_pick(rng, activity + deg, 1, exclude=[i])[0])
            k = int(rng.integers(cfg.recurring_min, cfg.recurring_max + 1))
            val = _value(rng, mu, sigma)
            for ts in np.sort(rng.integers(sp_.t0, sp_.t0 + SPLIT_SECONDS, size=k)):
                sp_.add(int(ts), normals_arr[j], normals_arr[i], int(val * rng.uniform(0.9, 1.1)))
            deg[i] += k
            deg[j] += k
            partners.setdefault(j, []).append(i)
            touched[[i, j]] = True
            budget -= k

        if budget < int((~touched).sum()):
            raise ValueError("txs_per_split too small for the requested accounts and motifs")

        def normal_tx(src_i: int, dst_i: int) -> None:
            sp_.add(sp_.t0 + int(rng.integers(0, SPLIT_SECONDS)), normals_arr[src_i], normals_arr[dst_i],
                    _value(rng, mu, sigma))
            deg[src_i] += 1
            deg[dst_i] += 1
            partners.setdefault(src_i, []).append(dst_i)

        for i in rng.permutation(np.flatnonzero(~touched)):
            j = _pick(rng, cfg.attachment_base * activity + deg, 1, exclude=[i])[0]
            if rng.random() < 0.5:
                normal_tx(i, j)
            else:
                normal_tx(j, i)
            budget -= 1
        while budget > 0:
            w = cfg.attachment_base * activity + deg
            src_i = int(rng.choice(m, p=w / w.sum()))
            prev = partners.get(src_i)
            if prev and rng.random() < cfg.repeat_prob:
                dst_i = prev[int(rng.integers(len(prev)))]
            else:
                dst_i = int(_pick(rng, w, 1, exclude=[src_i])[0])
            normal_tx(src_i, dst_i)
            budget -= 1

        splits.append(sp_)
        # accounts to carry: busy normal accounts of this split, target share of its node count
        active = {r[1] for r in sp_.rows} | {r[2] for r in sp_.rows}
        target = int(round(cfg.target_overlap_ratio * len(active))) - len(late)
        target = max(0, min(target, m))
        overlap_targets.append(target + len(late))
        weights = (deg + 1.0) * activity
        carried = [int(normals_arr[i]) for i in _pick(rng, weights, target)] if target else []

    out_splits = []
    for sp_ in splits:
        rows = sorted(sp_.rows)
        out = []
        for ts, src, dst, val in rows:
            block = GENESIS_BLOCK + sp_.index * BLOCKS_PER_SPLIT + (ts - sp_.t0) // BLOCK_SECONDS
            out.append(TransactionRecord(
                block_number=int(block), timestamp=ts,
                from_account=acc.ids[src], to_account=acc.ids[dst], value=int(val),
                success=True, is_internal=acc.is_contract[src],
                from_is_contract=acc.is_contract[src], to_is_contract=acc.is_contract[dst]))
        out_splits.append(out)
    meta = {"config": asdict(cfg), "n_accounts": len(acc.ids), "n_phishing": len(phishing),
            "planned_overlap": overlap_targets}
    roles = dict(zip(acc.ids, acc.kind))
    return SynthOutput(out_splits, [acc.ids[p] for p in phishing], meta, roles)


def write_output(out: SynthOutput, directory, measured_overlap: list[float] | None = None) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, txs in enumerate(out.splits):
        p = d / f"split_{i:02d}.csv"
        write_transactions(p, txs)
        paths.append(p)
    (d / "labels.txt").write_text("".join(a + "\n" for a in out.phishing), encoding="utf-8")
    meta = dict(out.meta)
    if measured_overlap is not None:
        meta["measured_overlap"] = measured_overlap
    (d / "synth_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")
    return paths


# motif verification ------------------------------------------------------------

@dataclass
class MotifReport:
    checked: int
    compliant: int
    failures: list[str]

    @property
    def compliance(self) -> float:
        return self.compliant / self.checked if self.checked else 1.0


def verify_motif(txs, labels, min_senders: int = 2, window_s: int = 2 * 24 * 3600,
                 quantile: float = 0.75) -> MotifReport:
    """Check every labeled account for a fan-in burst and a large outgoing transfer.

    An account complies when some window of ``window_s`` seconds contains
    transfers from at least ``min_senders`` distinct senders into it, and at
    least one of its outgoing transfers is at or above the ``quantile`` of all
    transfer values in ``txs``.
    """
    labels = list(labels)
    if not labels:
        return MotifReport(0, 0, [])
    txs = list(txs)
    values = np.array([float(t.value) for t in txs]) if txs else np.zeros(1)
    threshold = float(np.quantile(values, quantile))
    wanted = set(labels)
    incoming: dict[str, list[tuple[int, str]]] = {a: [] for a in wanted}
    big_out = {a: False for a in wanted}
    for t in txs:
        if t.to_account in wanted:
            incoming[t.to_account].append((t.timestamp, t.from_account))
        if t.from_account in wanted and float(t.value) >= threshold:
            big_out[t.from_account] = True
    failures = []
    for a in labels:
        if not (big_out[a] and _burst(incoming[a], min_senders, window_s)):
            failures.append(a)
    return MotifReport(len(labels), len(labels) - len(failures), failures)


def _burst(events: list[tuple[int, str]], min_senders: int, window_s: int) -> bool:
    events = sorted(events)
    counts: dict[str, int] = {}
    lo = 0
    for hi, (ts, who) in enumerate(events):
        counts[who] = counts.get(who, 0) + 1
        while ts - events[lo][0] > window_s:
            w = events[lo][1]
            counts[w] -= 1
            if counts[w] == 0:
                del counts[w]
            lo += 1
        if len(counts) >= min_senders:
            return True
    return False
