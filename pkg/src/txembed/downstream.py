"""Label sampling, logistic-regression probe, metrics, and the evaluation protocols."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .encoder import EmbeddingTable
from .graphbuild import GraphSplit

log = logging.getLogger(__name__)

PARTITION = (0.5, 0.2, 0.3)
NEGATIVES_PER_POSITIVE = 3


@dataclass
class LabelSet:
    split_index: int
    positives: list[str]
    negatives: list[str]
    partition: dict[str, str]

    def accounts(self, part: str) -> list[str]:
        return [a for a, p in self.partition.items() if p == part]

    def y(self, accounts: Sequence[str]) -> np.ndarray:
        pos = set(self.positives)
        return np.array([1.0 if a in pos else 0.0 for a in accounts])

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "LabelSet":
        return cls(obj["split_index"], list(obj["positives"]), list(obj["negatives"]), dict(obj["partition"]))


def _partition_counts(n: int) -> tuple[int, int, int]:
    n_train = int(round(PARTITION[0] * n))
    n_val = int(round(PARTITION[1] * n))
    return n_train, n_val, n - n_train - n_val


def sample_labels(split: GraphSplit, phishing_ids, rng: np.random.Generator) -> LabelSet:
    """Phishing nodes of the split plus 3x as many uniformly drawn normal nodes, split 50/20/30.

    The partition is stratified: overall part sizes are fixed first, then
    positives are spread over the parts in the same proportions.
    """
    flagged = set(phishing_ids)
    positives = [a for a in split.node_ids if a in flagged]
    if not positives:
        raise ValueError(f"split {split.split_index} has no phishing nodes")
    normal = [a for a in split.node_ids if a not in flagged]
    n_neg = min(NEGATIVES_PER_POSITIVE * len(positives), len(normal))
    if n_neg < NEGATIVES_PER_POSITIVE * len(positives):
        log.warning("only %d normal nodes available for %d negatives", len(normal),
                    NEGATIVES_PER_POSITIVE * len(positives))
    picked = rng.choice(len(normal), size=n_neg, replace=False)
    negatives = [normal[i] for i in sorted(picked)]

    totals = _partition_counts(len(positives) + len(negatives))
    pos_counts = _partition_counts(len(positives))
    neg_counts = tuple(t - p for t, p in zip(totals, pos_counts))
    partition: dict[str, str] = {}
    for group, counts in ((positives, pos_counts), (negatives, neg_counts)):
        order = rng.permutation(len(group))
        names = ["train"] * counts[0] + ["val"] * counts[1] + ["test"] * counts[2]
        for i, part in zip(order, names):
            partition[group[i]] = part
    return LabelSet(split.split_index, positives, negatives, partition)


# classifier ------------------------------------------------------------------

@dataclass
class ClassifierConfig:
    l2: float = 1e-4
    lr: float = 0.1
    iterations: int = 500
    standardize: bool = True


@dataclass
class LogisticClassifier:
    weights: np.ndarray
    bias: float
    mean: np.ndarray
    scale: np.ndarray
    best_iteration: int = 0
    best_val_f1: float = 0.0

    def _transform(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.scale

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        s = self._transform(x) @ self.weights + self.bias
        return _sigmoid(s)

    def predict(self, x: np.ndarray, threshold: float = 0.5) -> np.ndarray:
        return (self.predict_proba(x) >= threshold).astype(np.int64)

    def to_json(self) -> dict:
        return {"weights": self.weights.tolist(), "bias": self.bias, "mean": self.mean.tolist(),
                "scale": self.scale.tolist(), "best_iteration": self.best_iteration,
                "best_val_f1": self.best_val_f1}

    @classmethod
    def from_json(cls, obj: dict) -> "LogisticClassifier":
        return cls(np.array(obj["weights"]), float(obj["bias"]), np.array(obj["mean"]),
                   np.array(obj["scale"]), obj.get("best_iteration", 0), obj.get("best_val_f1", 0.0))


def _sigmoid(s: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -s))


def fit_logistic(x: np.ndarray, y: np.ndarray, config: ClassifierConfig | None = None,
                 x_val: np.ndarray | None = None, y_val: np.ndarray | None = None) -> LogisticClassifier:
    """Full-batch proximal gradient descent on the mean log-loss plus (l2/2)*|w|^2.

    The penalty step is applied in closed form, ``w <- w / (1 + lr*l2)``, which
    stays stable for any ``l2``. When validation data is given the iterate with
    the best validation F1 is kept (earliest on ties).
    """
    cfg = config or ClassifierConfig()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(np.unique(y)) < 2:
        raise ValueError("training labels contain a single class")
    if cfg.standardize:
        mu = x.mean(axis=0)
        sd = x.std(axis=0)
        sd = np.where(sd > 1e-12, sd, 1.0)
    else:
        mu = np.zeros(x.shape[1])
        sd = np.ones(x.shape[1])
    xs = (x - mu) / sd
    n, d = xs.shape
    w = np.zeros(d)
    b = 0.0
    clf = LogisticClassifier(w.copy(), b, mu, sd)
    use_val = x_val is not None and y_val is not None and len(y_val) > 0
    xv = (np.asarray(x_val, dtype=np.float64) - mu) / sd if use_val else None
    best = -1.0
    for it in range(1, cfg.iterations + 1):
        p = _sigmoid(xs @ w + b)
        r = p - y
        w = (w - cfg.lr * (xs.T @ r) / n) / (1.0 + cfg.lr * cfg.l2)
        b -= cfg.lr * r.mean()
        if use_val:
            pred = (_sigmoid(xv @ w + b) >= 0.5).astype(np.int64)
            f1 = confusion_metrics(y_val, pred)["f1"]
            if f1 > best:
                best = f1
                clf = LogisticClassifier(w.copy(), b, mu, sd, it, f1)
    if not use_val:
        clf = LogisticClassifier(w, b, mu, sd, cfg.iterations, 0.0)
    return clf


def train_classifier(embeddings: EmbeddingTable, labels: LabelSet,
                     config: ClassifierConfig | None = None) -> LogisticClassifier:
    train = labels.accounts("train")
    val = labels.accounts("val")
    missing = [a for a in train + val if a not in embeddings.index]
    if missing:
        raise KeyError(f"{len(missing)} labeled accounts have no embedding, e.g. {missing[0]}")
    return fit_logistic(embeddings.rows(train), labels.y(train), config,
                        embeddings.rows(val) if val else None, labels.y(val) if val else None)


# metrics ---------------------------------------------------------------------

def f1_from(precision: float, recall: float) -> float:
    return 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0


def confusion_metrics(y_true, y_pred) -> dict:
    y_true = np.asarray(y_true).astype(bool)
    y_pred = np.asarray(y_pred).astype(bool)
    tp = int(np.sum(y_true & y_pred))
    tn = int(np.sum(~y_true & ~y_pred))
    fp = int(np.sum(~y_true & y_pred))
    fn = int(np.sum(y_true & ~y_pred))
    total = tp + tn + fp + fn
    precision = 100.0 * tp / (tp + fp) if tp + fp else 0.0
    recall = 100.0 * tp / (tp + fn) if tp + fn else 0.0
    return {"accuracy": 100.0 * (tp + tn) / total if total else 0.0, "precision": precision,
            "recall": recall, "f1": f1_from(precision, recall), "tp": tp, "tn": tn, "fp": fp, "fn": fn}


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0
    seed: int | list[int] | None = None
    protocol: str = "transductive"
    ablation: str = "full"
    runs: int = 1
    extra: dict = field(default_factory=dict)

    def rounded(self) -> dict:
        d = asdict(self)
        for k in ("accuracy", "precision", "recall", "f1"):
            d[k] = round(d[k], 1)
        return d

    def to_json(self) -> str:
        return json.dumps(self.rounded(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, obj: dict) -> "MetricsReport":
        return cls(**obj)


def evaluate(classifier: LogisticClassifier, embeddings: EmbeddingTable, labels: LabelSet,
             threshold: float = 0.5, protocol: str = "transductive", ablation: str = "full",
             seed=None) -> MetricsReport:
    test = labels.accounts("test")
    if not test:
        raise ValueError("empty test partition")
    pred = classifier.predict(embeddings.rows(test), threshold)
    m = confusion_metrics(labels.y(test), pred)
    return MetricsReport(seed=seed, protocol=protocol, ablation=ablation, **m)


def average_reports(reports: Sequence[MetricsReport]) -> MetricsReport:
    if not reports:
        raise ValueError("nothing to average")
    first = reports[0]
    mean = {k: float(np.mean([getattr(r, k) for r in reports]))
            for k in ("accuracy", "precision", "recall", "f1")}
    counts = {k: int(sum(getattr(r, k) for r in reports)) for k in ("tp", "tn", "fp", "fn")}
    return MetricsReport(**mean, **counts, seed=[r.seed for r in reports], protocol=first.protocol,
                         ablation=first.ablation, runs=len(reports),
                         extra={"f1_per_run": [r.f1 for r in reports]})


def format_table(rows: Sequence[tuple[str, MetricsReport]]) -> str:
    """Aligned text table with columns Acc, Precision, Recall, F-1 (percent, one decimal)."""
    width = max([len("Method")] + [len(name) for name, _ in rows])
    lines = [f"{'Method':<{width}}  {'Acc(%)':>7}  {'Precision(%)':>12}  {'Recall(%)':>9}  {'F-1(%)':>7}"]
    for name, r in rows:
        lines.append(f"{name:<{width}}  {r.accuracy:>7.1f}  {r.precision:>12.1f}  {r.recall:>9.1f}  {r.f1:>7.1f}")
    return "\n".join(lines)


# protocols -------------------------------------------------------------------

ABLATIONS = ("full", "no-incremental", "no-temporal", "no-spatial")


@dataclass
class ProtocolConfig:
    mode: str = "transductive"
    ablation: str = "full"
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    inductive_classifier_source: str = "self"
    threshold: float = 0.5


def ablation_tag(incremental: bool, spatial: bool, temporal: bool) -> str:
    if not spatial:
        return "spatial-removed"
    if not temporal:
        return "temporal-removed"
    if not incremental:
        return "incremental-removed"
    return "full"


def protocol_layout(mode: str) -> tuple[int, int]:
    """(number of splits used, number pretrained) for a protocol."""
    if mode == "transductive":
        return 4, 3
    if mode == "inductive":
        return 5, 4
    raise ValueError(f"unknown protocol {mode!r}")


def label_rng(seed: int) -> np.random.Generator:
    # independent of the training stream so every variant sees the same labels
    return np.random.default_rng(np.random.SeedSequence([seed, 0x1AB]))


def raw_table(split: GraphSplit) -> EmbeddingTable:
    return EmbeddingTable(split.split_index, list(split.node_ids), np.asarray(split.attributes, dtype=np.float32))


def evaluate_tables(eval_table: EmbeddingTable, eval_split: GraphSplit, phishing_ids, seed: int,
                    config: ProtocolConfig, tag: str,
                    source: tuple[EmbeddingTable, GraphSplit] | None = None) -> MetricsReport:
    """Sample labels on the evaluation split, fit the probe, and score its test part.

    With ``source`` the probe is instead fit on that table's own labels and
    only scored on the evaluation split.
    """
    clf, labels = fit_probe(eval_table, eval_split, phishing_ids, seed, config, source)
    return evaluate(clf, eval_table, labels, config.threshold, config.mode, tag, seed)


def fit_probe(eval_table: EmbeddingTable, eval_split: GraphSplit, phishing_ids, seed: int,
              config: ProtocolConfig,
              source: tuple[EmbeddingTable, GraphSplit] | None = None) -> tuple[LogisticClassifier, LabelSet]:
    """Evaluation-split labels and the probe fit for them (on ``source`` labels when given)."""
    lr = label_rng(seed)
    labels = sample_labels(eval_split, phishing_ids, lr)
    if source is None:
        return train_classifier(eval_table, labels, config.classifier), labels
    src_table, src_split = source
    return train_classifier(src_table, sample_labels(src_split, phishing_ids, lr), config.classifier), labels


def run_protocol(splits: Sequence[GraphSplit], phishing_ids, inc_config, config: ProtocolConfig,
                 seed: int, trainer=None) -> MetricsReport:
    """One run of the transductive or inductive protocol on one piece of splits."""
    from .incremental import run_incremental

    n_used, n_train = protocol_layout(config.mode)
    if len(splits) < n_used:
        raise ValueError(f"{config.mode} protocol needs {n_used} splits, got {len(splits)}")
    used = list(splits[:n_used])
    pcfg = inc_config.pretext
    tag = ablation_tag(inc_config.incremental, pcfg.spatial, pcfg.temporal)
    if tag != config.ablation and config.ablation != "raw":
        tag = config.ablation
    if config.ablation == "raw":
        eval_table = raw_table(used[-1])
        src = (raw_table(used[-2]), used[-2]) if use_previous_split(config) else None
        return evaluate_tables(eval_table, used[-1], phishing_ids, seed, config, "raw-features", src)
    rng = np.random.default_rng(seed)
    result = run_incremental(used, inc_config, rng, n_train=n_train, trainer=trainer)
    src = (result.tables[n_used - 2], used[-2]) if use_previous_split(config) else None
    report = evaluate_tables(result.tables[n_used - 1], used[-1], phishing_ids, seed, config, tag, src)
    report.extra["trained_splits"] = [used[i].split_index for i in result.trained]
    return report


def use_previous_split(config: ProtocolConfig) -> bool:
    return config.mode == "inductive" and config.inductive_classifier_source == "previous"
