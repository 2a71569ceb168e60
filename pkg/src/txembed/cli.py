"""Command-line entry point: a staged, file-mediated pipeline.

Every stage writes into its own directory together with a ``manifest.json``
holding the stage config, its hash, the seed and the sha256 of every input and
output file. Inside a pipeline work directory stages are content-addressed as
``<stage>-<hash12>`` and reused when an up-to-date manifest is found.
"""
from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import hashlib
import json
import logging
import sys
import time
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import diffcore as dc
from . import downstream as ds
from . import graphbuild as gb
from . import ingest as ing
from . import synthgen as sg
from .encoder import EmbeddingTable, EncoderState, embed_split
from .incremental import HandoffPacket, IncrementalConfig, run_incremental, split_features
from .pretext import PretextConfig

log = logging.getLogger("txembed")

MANIFEST = "manifest.json"


# configuration -----------------------------------------------------------------

def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _fanouts(v) -> tuple:
    if isinstance(v, (tuple, list)):
        return tuple(None if x is None else int(x) for x in v)
    out = []
    for part in str(v).split(","):
        part = part.strip().lower()
        out.append(None if part in ("all", "none", "full") else int(part))
    if len(out) != 2:
        raise ValueError("fanouts needs two comma-separated values")
    return tuple(out)


# key -> (default, parser, help)
KEYS: dict[str, tuple[Any, Callable, str]] = {
    "seed": (0, int, "base seed; run r of --seeds uses seed + r"),
    "seeds": (1, int, "number of independent runs to average"),
    "threads": (1, int, "worker processes for independent runs (see README on determinism)"),
    "mode": ("transductive", str, "evaluation protocol: transductive or inductive"),
    "format": ("csv", str, "input format for ingest: csv or jsonl"),
    "n_splits": (5, int, "number of temporal splits made by ingest"),
    "malformed_threshold": (0.01, float, "largest tolerated share of malformed input lines"),
    "hidden_dim": (128, int, "embedding width"),
    "fanouts": ((10, 10), _fanouts, "neighbors sampled per layer during training, e.g. 10,10"),
    "k": (2, int, "hop radius of spatial positive pairs"),
    "per_node_pos": (5, int, "positive pairs per anchor"),
    "neg_ratio": (1.0, float, "negatives per positive pair"),
    "epochs_spatial": (10, int, "spatial pretext epochs per split"),
    "epochs_temporal": (5, int, "temporal pretext epochs per split"),
    "batch_size": (512, int, "minibatch size for pretext training"),
    "lr": (1e-3, float, "Adam learning rate"),
    "dropout": (0.5, float, "dropout on encoder inputs during training"),
    "spatial_loss_form": ("raw", str, "spatial loss: raw sigmoid form or log form"),
    "incremental": (True, _bool, "chain encoders and hand off embeddings across splits"),
    "spatial": (True, _bool, "train the spatial pretext task"),
    "temporal": (True, _bool, "train the temporal pretext task"),
    "uniform_width": (True, _bool, "train the first split with a zero prefix so chaining is exact"),
    "inductive_classifier_source": ("self", str, "inductive probe labels: self or previous split"),
    "classifier_l2": (1e-4, float, "L2 penalty of the logistic probe"),
    "classifier_lr": (0.1, float, "gradient step of the logistic probe"),
    "classifier_iterations": (500, int, "full-batch iterations of the logistic probe"),
    "threshold": (0.5, float, "decision threshold"),
}
SYNTH_PREFIX = "synth."
for _f in dataclasses.fields(sg.SynthConfig):
    _d = sg.SynthConfig.__dataclass_fields__[_f.name].default
    _p = _bool if isinstance(_d, bool) else type(_d)
    KEYS[SYNTH_PREFIX + _f.name] = (None if _f.name == "seed" else _d, _p,
                                    "synthetic generator parameter" + (" (defaults to seed)" if _f.name == "seed" else ""))

CHOICES = {"mode": ("transductive", "inductive"), "format": ("csv", "jsonl"),
           "spatial_loss_form": ("raw", "log"), "inductive_classifier_source": ("self", "previous")}


class ConfigError(ValueError):
    pass


def coerce(key: str, value) -> Any:
    if key not in KEYS:
        raise ConfigError(f"unknown config key {key!r}")
    if value is None:
        return None
    try:
        out = KEYS[key][1](value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad value for {key}: {value!r} ({e})") from None
    if key in CHOICES and out not in CHOICES[key]:
        raise ConfigError(f"{key} must be one of {', '.join(CHOICES[key])}")
    return out


def read_config_file(path) -> dict[str, Any]:
    """Flat ``key = value`` lines; blank lines and ``#`` comments are ignored."""
    out = {}
    for no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{no}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = coerce(key, value)
    return out


def merge_config(file_values: dict | None = None, overrides: dict | None = None) -> dict[str, Any]:
    """Defaults, then config file, then flags. Rejects configs with nothing to train."""
    cfg = {k: v[0] for k, v in KEYS.items()}
    for layer in (file_values or {}, overrides or {}):
        for k, v in layer.items():
            if v is not None:
                cfg[k] = coerce(k, v)
    if not cfg["spatial"] and not cfg["temporal"]:
        raise ConfigError("disabling both pretext tasks leaves nothing to train")
    if cfg["seeds"] < 1 or cfg["threads"] < 1:
        raise ConfigError("seeds and threads must be positive")
    return cfg


def synth_config(cfg: dict) -> sg.SynthConfig:
    kw = {k[len(SYNTH_PREFIX):]: v for k, v in cfg.items() if k.startswith(SYNTH_PREFIX)}
    if kw.get("seed") is None:
        kw["seed"] = cfg["seed"]
    return sg.SynthConfig(**kw)


def incremental_config(cfg: dict) -> IncrementalConfig:
    pc = PretextConfig(k=cfg["k"], per_node_pos=cfg["per_node_pos"], neg_ratio=cfg["neg_ratio"],
                       epochs_spatial=cfg["epochs_spatial"], epochs_temporal=cfg["epochs_temporal"],
                       batch_size=cfg["batch_size"], lr=cfg["lr"], dropout=cfg["dropout"],
                       spatial_loss_form=cfg["spatial_loss_form"], spatial=cfg["spatial"],
                       temporal=cfg["temporal"])
    return IncrementalConfig(hidden_dim=cfg["hidden_dim"], fanouts=tuple(cfg["fanouts"]),
                             incremental=cfg["incremental"], uniform_width=cfg["uniform_width"], pretext=pc)


def protocol_config(cfg: dict) -> ds.ProtocolConfig:
    tag = ds.ablation_tag(cfg["incremental"], cfg["spatial"], cfg["temporal"])
    clf = ds.ClassifierConfig(l2=cfg["classifier_l2"], lr=cfg["classifier_lr"],
                              iterations=cfg["classifier_iterations"])
    return ds.ProtocolConfig(mode=cfg["mode"], ablation=tag, classifier=clf,
                             inductive_classifier_source=cfg["inductive_classifier_source"],
                             threshold=cfg["threshold"])


STAGE_KEYS = {
    "synth": [k for k in KEYS if k.startswith(SYNTH_PREFIX)] + ["seed"],
    "ingest": ["format", "n_splits", "malformed_threshold"],
    "build": [],
    "pretrain": ["mode", "hidden_dim", "fanouts", "k", "per_node_pos", "neg_ratio", "epochs_spatial",
                 "epochs_temporal", "batch_size", "lr", "dropout", "spatial_loss_form", "incremental",
                 "spatial", "temporal", "uniform_width"],
    "embed": [],
    "classify": ["mode", "inductive_classifier_source", "classifier_l2", "classifier_lr",
                 "classifier_iterations"],
    "eval": ["threshold"],
}
SEEDED = {"synth": False, "ingest": False, "build": False, "pretrain": True, "embed": False,
          "classify": True, "eval": False}


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=list)


def config_hash(cfg: dict, keys: Sequence[str] | None = None) -> str:
    keys = sorted(cfg) if keys is None else sorted(keys)
    return hashlib.sha256(_canonical({k: cfg[k] for k in keys}).encode()).hexdigest()


# manifests -----------------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _output_hashes(d: Path) -> dict[str, str]:
    return {p.relative_to(d).as_posix(): sha256_file(p)
            for p in sorted(d.rglob("*")) if p.is_file() and p.name != MANIFEST}


def input_digest(path) -> str:
    """sha256 of a file, or of a stage directory's recorded outputs."""
    p = Path(path)
    if p.is_dir():
        m = p / MANIFEST
        if m.exists():
            return json.loads(m.read_text(encoding="utf-8"))["digest"]
        return hashlib.sha256(_canonical(_output_hashes(p)).encode()).hexdigest()
    return sha256_file(p)


@dataclasses.dataclass
class StagePlan:
    stage: str
    config: dict
    seed: int | None
    inputs: dict[str, str]  # role -> digest

    @property
    def key(self) -> str:
        return hashlib.sha256(_canonical({"stage": self.stage, "config": self.config, "seed": self.seed,
                                          "inputs": self.inputs}).encode()).hexdigest()


def plan_stage(stage: str, cfg: dict, seed: int | None, inputs: dict[str, Any]) -> StagePlan:
    sub = {k: cfg[k] for k in STAGE_KEYS[stage]}
    return StagePlan(stage, sub, seed if SEEDED[stage] else None,
                     {role: input_digest(p) for role, p in sorted(inputs.items())})


def manifest_matches(d: Path, plan: StagePlan) -> bool:
    m = d / MANIFEST
    if not m.exists():
        return False
    try:
        man = json.loads(m.read_text(encoding="utf-8"))
    except json.JSONDecodeError:
        return False
    if man.get("key") != plan.key:
        return False
    return man.get("outputs") == _output_hashes(d)


def write_manifest(d: Path, plan: StagePlan) -> dict:
    outputs = _output_hashes(d)
    man = {"stage": plan.stage, "key": plan.key, "config": plan.config,
           "config_hash": config_hash(plan.config), "seed": plan.seed, "inputs": plan.inputs,
           "outputs": outputs, "digest": hashlib.sha256(_canonical(outputs).encode()).hexdigest()}
    (d / MANIFEST).write_text(json.dumps(man, indent=2, sort_keys=True, default=list) + "\n", encoding="utf-8")
    return man


def run_stage(stage: str, cfg: dict, seed: int | None, inputs: dict[str, Any], out: Path | None,
              workdir: Path | None, body: Callable[[Path], None]) -> Path:
    """Run ``body`` into the stage directory unless a matching manifest is already there."""
    plan = plan_stage(stage, cfg, seed, inputs)
    d = Path(out) if out is not None else Path(workdir) / f"{stage}-{plan.key[:12]}"
    if manifest_matches(d, plan):
        log.info("stage %s: up to date in %s", stage, d)
        return d
    d.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    body(d)
    write_manifest(d, plan)
    log.info("stage %s: done in %.2fs -> %s", stage, time.perf_counter() - t0, d)
    return d


# stage bodies ----------------------------------------------------------------------

def _split_name(i: int) -> str:
    return f"split_{i:02d}"


def _split_csvs(d: Path) -> list[Path]:
    files = sorted(Path(d).glob("split_*.csv"))
    if not files:
        raise FileNotFoundError(f"no split_*.csv files in {d}")
    return files


def _graph_dirs(d: Path) -> list[Path]:
    dirs = sorted(p for p in Path(d).glob("split_*") if p.is_dir())
    if not dirs:
        raise FileNotFoundError(f"no split graphs in {d}")
    return dirs


def load_graphs(d) -> list[gb.GraphSplit]:
    return [gb.load_graph(p) for p in _graph_dirs(Path(d))]


def read_labels(path) -> list[str]:
    return [s.strip() for s in Path(path).read_text(encoding="utf-8").splitlines() if s.strip()]


def synth_stage(cfg: dict, out: Path | None = None, workdir: Path | None = None) -> Path:
    scfg = synth_config(cfg)

    def body(d: Path) -> None:
        res = sg.generate(scfg)
        graphs = [gb.finalize(ing.filter_transactions(s), i) for i, s in enumerate(res.splits)]
        overlap = [gb.compute_overlap(a, b).ratio for a, b in zip(graphs, graphs[1:])]
        sg.write_output(res, d, measured_overlap=overlap)
        log.info("synth: %d splits, %d phishing accounts, overlap %s", len(res.splits), len(res.phishing),
                 " ".join(f"{r:.3f}" for r in overlap))

    return run_stage("synth", cfg, None, {}, out, workdir, body)


def ingest_stage(cfg: dict, inputs: Sequence[Path], out: Path | None = None,
                 workdir: Path | None = None) -> Path:
    inputs = [Path(p) for p in inputs]
    if not inputs:
        raise ConfigError("ingest needs at least one --input file")

    def body(d: Path) -> None:
        txs = ing.filter_transactions(ing.load_stream(inputs, cfg["format"], cfg["malformed_threshold"]))
        for i, part in enumerate(ing.split_by_block(txs, cfg["n_splits"])):
            ing.write_transactions(d / f"{_split_name(i)}.csv", part)
        log.info("ingest: %d valid transactions in %d splits", len(txs), cfg["n_splits"])

    return run_stage("ingest", cfg, None, {f"input{i}": p for i, p in enumerate(inputs)}, out, workdir, body)


def build_stage(cfg: dict, ingest_dir: Path, out: Path | None = None, workdir: Path | None = None) -> Path:
    def body(d: Path) -> None:
        graphs = []
        for i, f in enumerate(_split_csvs(ingest_dir)):
            g = gb.finalize(ing.filter_transactions(ing.parse_transactions(f, "csv")), i)
            gb.save_graph(g, d / _split_name(i))
            graphs.append(g)
            log.info("build: split %d has %d nodes, %d edges", i, g.n_nodes, g.n_edges)
        ratios = [gb.compute_overlap(a, b).ratio for a, b in zip(graphs, graphs[1:])]
        (d / "overlap.json").write_text(json.dumps({"ratios": ratios}, indent=2) + "\n", encoding="utf-8")

    return run_stage("build", cfg, None, {"ingest": ingest_dir}, out, workdir, body)


def _used_splits(graphs: Sequence[gb.GraphSplit], mode: str) -> tuple[list[gb.GraphSplit], int]:
    n_used, n_train = ds.protocol_layout(mode)
    if len(graphs) < n_used:
        raise ConfigError(f"{mode} protocol needs {n_used} splits, found {len(graphs)}")
    return list(graphs[:n_used]), n_train


def pretrain_stage(cfg: dict, seed: int, build_dir: Path, out: Path | None = None,
                   workdir: Path | None = None) -> Path:
    def body(d: Path) -> None:
        used, n_train = _used_splits(load_graphs(build_dir), cfg["mode"])
        res = run_incremental(used, incremental_config(cfg), np.random.default_rng(seed), n_train=n_train)
        ckpts = []
        for pos, (start, end, tlog) in enumerate(zip(res.start_checkpoints, res.checkpoints, res.logs)):
            sd = d / _split_name(pos)
            sd.mkdir(exist_ok=True)
            dc.save_params(sd / "start.bin", {k: dc.constant(v) for k, v in start.items()})
            dc.save_params(sd / "params.bin", {k: dc.constant(v) for k, v in end.items()})
            if tlog.optimizer is not None:
                dc.save_adam(sd / "adam.bin", tlog.optimizer)
            ckpts.append((sd / "params.bin").name)
        for pos, packet in sorted(res.packets.items()):
            packet.save(d / f"handoff_{pos:02d}")
        final = d / "final"
        final.mkdir(exist_ok=True)
        res.state.save(final / "params.bin")
        dc.save_params(final / "projection.bin", {"proj": dc.constant(res.projection)})
        info = {"trained": res.trained, "n_used": len(used), "seed": seed,
                "ablation": ds.ablation_tag(cfg["incremental"], cfg["spatial"], cfg["temporal"]),
                "input_dim": res.state.input_dim, "hidden_dim": res.state.hidden_dim,
                "logs": [tl.to_json() for tl in res.logs]}
        (d / "train.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    return run_stage("pretrain", cfg, seed, {"graphs": build_dir}, out, workdir, body)


def _train_info(model_dir: Path) -> dict:
    return json.loads((Path(model_dir) / "train.json").read_text(encoding="utf-8"))


def embed_tables(graphs: Sequence[gb.GraphSplit], model_dir: Path, cfg: dict) -> dict[int, EmbeddingTable]:
    """Frozen-encoder embeddings of every split the model was built for."""
    model_dir = Path(model_dir)
    info = _train_info(model_dir)
    used = list(graphs[:info["n_used"]])
    state = EncoderState.load(model_dir / "final" / "params.bin", fanouts=tuple(cfg["fanouts"]),
                              dropout_p=cfg["dropout"])
    proj = dc.load_params(model_dir / "final" / "projection.bin")["proj"]
    tables = {}
    for pos, split in enumerate(used):
        hd = model_dir / f"handoff_{pos:02d}"
        packet = HandoffPacket.load(hd) if hd.is_dir() else None
        tables[pos] = embed_split(split, split_features(split, packet, state.hidden_dim, proj, state.input_dim),
                                  state)
    return tables


def embed_stage(cfg: dict, build_dir: Path, model_dir: Path, out: Path | None = None,
                workdir: Path | None = None) -> Path:
    def body(d: Path) -> None:
        for pos, table in embed_tables(load_graphs(build_dir), model_dir, cfg).items():
            table.save(d / _split_name(pos))
        info = _train_info(model_dir)
        (d / "embed.json").write_text(json.dumps({"ablation": info["ablation"], "n_used": info["n_used"],
                                                  "seed": info["seed"]}, indent=2, sort_keys=True) + "\n",
                                      encoding="utf-8")

    return run_stage("embed", cfg, None, {"graphs": build_dir, "model": model_dir}, out, workdir, body)


def _load_tables(emb_dir: Path) -> list[EmbeddingTable]:
    return [EmbeddingTable.load(p) for p in sorted(Path(emb_dir).glob("split_*")) if p.is_dir()]


def classify_stage(cfg: dict, seed: int, build_dir: Path, emb_dir: Path, labels_path: Path,
                   out: Path | None = None, workdir: Path | None = None) -> Path:
    """Sample labels on the evaluation split and fit probes on the embeddings and on raw attributes."""
    def body(d: Path) -> None:
        graphs = load_graphs(build_dir)
        tables = _load_tables(emb_dir)
        used, _ = _used_splits(graphs, cfg["mode"])
        if len(tables) < len(used):
            raise ConfigError(f"{emb_dir} holds {len(tables)} embedding tables, protocol needs {len(used)}")
        phishing = read_labels(labels_path)
        pc = protocol_config(cfg)
        prev = ds.use_previous_split(pc)
        clf, labels = ds.fit_probe(tables[len(used) - 1], used[-1], phishing, seed, pc,
                                   (tables[len(used) - 2], used[-2]) if prev else None)
        raw_clf, _ = ds.fit_probe(ds.raw_table(used[-1]), used[-1], phishing, seed, pc,
                                  (ds.raw_table(used[-2]), used[-2]) if prev else None)
        dump = lambda obj: json.dumps(obj, indent=2, sort_keys=True) + "\n"
        (d / "labels.json").write_text(dump(labels.to_json()), encoding="utf-8")
        (d / "classifier.json").write_text(dump(clf.to_json()), encoding="utf-8")
        (d / "classifier_raw.json").write_text(dump(raw_clf.to_json()), encoding="utf-8")
        (d / "classify.json").write_text(dump({"seed": seed, "eval_position": len(used) - 1}), encoding="utf-8")

    return run_stage("classify", cfg, seed, {"graphs": build_dir, "embeddings": emb_dir, "labels": labels_path},
                     out, workdir, body)


def eval_stage(cfg: dict, build_dir: Path, emb_dir: Path, clf_dir: Path, out: Path | None = None,
               workdir: Path | None = None) -> Path:
    def body(d: Path) -> None:
        rd = lambda name: json.loads((Path(clf_dir) / name).read_text(encoding="utf-8"))
        meta = rd("classify.json")
        labels = ds.LabelSet.from_json(rd("labels.json"))
        pos = meta["eval_position"]
        table = _load_tables(emb_dir)[pos]
        split = load_graphs(build_dir)[pos]
        ablation = json.loads((Path(emb_dir) / "embed.json").read_text(encoding="utf-8"))["ablation"]
        seed = meta["seed"]
        rep = ds.evaluate(ds.LogisticClassifier.from_json(rd("classifier.json")), table, labels,
                          cfg["threshold"], cfg["mode"], ablation, seed)
        raw = ds.evaluate(ds.LogisticClassifier.from_json(rd("classifier_raw.json")), ds.raw_table(split),
                          labels, cfg["threshold"], cfg["mode"], "raw-features", seed)
        write_report(d, rep, raw)

    return run_stage("eval", cfg, None, {"graphs": build_dir, "embeddings": emb_dir, "classifier": clf_dir},
                     out, workdir, body)


def write_report(d: Path, model: ds.MetricsReport, raw: ds.MetricsReport) -> None:
    obj = {"model": model.rounded(), "raw": raw.rounded()}
    (Path(d) / "report.json").write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    table = ds.format_table([("Raw features", raw), (f"Encoder ({model.ablation})", model)])
    (Path(d) / "report.txt").write_text(table + "\n", encoding="utf-8")


def read_report(d) -> tuple[ds.MetricsReport, ds.MetricsReport]:
    obj = json.loads((Path(d) / "report.json").read_text(encoding="utf-8"))
    return ds.MetricsReport.from_json(obj["model"]), ds.MetricsReport.from_json(obj["raw"])


# pipeline ------------------------------------------------------------------------------

def _run_seed(cfg: dict, seed: int, build_dir: str, labels_path: str, workdir: str) -> dict:
    w = Path(workdir)
    model = pretrain_stage(cfg, seed, Path(build_dir), workdir=w)
    emb = embed_stage(cfg, Path(build_dir), model, workdir=w)
    clf = classify_stage(cfg, seed, Path(build_dir), emb, Path(labels_path), workdir=w)
    ev = eval_stage(cfg, Path(build_dir), emb, clf, workdir=w)
    ckpts = sorted(str(p) for p in model.glob("split_*/params.bin"))
    return {"seed": seed, "pretrain": str(model), "embed": str(emb), "classify": str(clf), "eval": str(ev),
            "checkpoints": ckpts, "final": str(model / "final" / "params.bin")}


def pipeline(cfg: dict, workdir: Path, inputs: Sequence[Path] = (), labels: Path | None = None,
             synthetic: bool = False, out: Path | None = None) -> Path:
    """All stages end to end; averages reports over ``cfg['seeds']`` runs."""
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    if synthetic:
        sd = synth_stage(cfg, workdir=workdir)
        inputs = _split_csvs(sd)
        labels = sd / "labels.txt"
    elif not inputs or labels is None:
        raise ConfigError("pipeline needs --synthetic or both --input and --labels")
    build_dir = build_stage(cfg, ingest_stage(cfg, inputs, workdir=workdir), workdir=workdir)
    seeds = [cfg["seed"] + r for r in range(cfg["seeds"])]
    args = [(cfg, s, str(build_dir), str(labels), str(workdir)) for s in seeds]
    if cfg["threads"] > 1 and len(seeds) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=min(cfg["threads"], len(seeds))) as ex:
            runs = list(ex.map(_run_seed, *zip(*args)))
    else:
        runs = [_run_seed(*a) for a in args]
    pairs = [read_report(r["eval"]) for r in runs]
    model = ds.average_reports([m for m, _ in pairs])
    raw = ds.average_reports([r for _, r in pairs])

    d = Path(out) if out is not None else workdir / f"pipeline-{config_hash(cfg)[:12]}"
    d.mkdir(parents=True, exist_ok=True)
    write_report(d, model, raw)
    run = {"config_hash": config_hash(cfg), "seed": cfg["seed"], "seeds": seeds, "mode": cfg["mode"],
           "splits": [str(p) for p in _graph_dirs(build_dir)], "labels": str(labels), "runs": runs}
    (d / "run.json").write_text(json.dumps(run, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (d / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True, default=list) + "\n",
                                   encoding="utf-8")
    log.info("pipeline: %d runs in %.1fs -> %s", len(runs), time.perf_counter() - t0, d)
    return d


# argument parsing ----------------------------------------------------------------------------

FLAG_KEYS = ("seed", "seeds", "threads", "mode", "format", "n_splits", "malformed_threshold", "hidden_dim",
             "fanouts", "k", "per_node_pos", "neg_ratio", "epochs_spatial", "epochs_temporal", "batch_size",
             "lr", "dropout", "spatial_loss_form", "inductive_classifier_source", "threshold")
SWITCHES = ("incremental", "spatial", "temporal")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration (defaults < --config file < flags)")
    g.add_argument("--config", type=Path, help="flat key = value config file")
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="set any config key, e.g. synth.phishing_fraction=0.2 (repeatable)")
    for key in FLAG_KEYS:
        default, _, help_ = KEYS[key]
        shown = ",".join(map(str, default)) if isinstance(default, tuple) else default
        kw = {"choices": CHOICES[key]} if key in CHOICES else {}
        g.add_argument("--" + key.replace("_", "-"), dest=key, default=None,
                       help=f"{help_} (default: {shown})", **kw)
    for key in SWITCHES:
        g.add_argument(f"--no-{key}", dest=key, action="store_const", const=False, default=None,
                       help=f"ablation: {KEYS[key][2]} off")
    g.add_argument("--uniform-width", dest="uniform_width", action="store_const", const=True, default=None,
                   help="zero-prefix first split so chaining is exact (default: on)")
    g.add_argument("--no-uniform-width", dest="uniform_width", action="store_const", const=False,
                   help="train the first split on bare attributes and widen afterwards")
    g.add_argument("--spatial-loss", dest="spatial_loss_form", choices=CHOICES["spatial_loss_form"],
                   help="alias of --spatial-loss-form")
    g.add_argument("-v", "--verbose", action="store_true", help="debug logging")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="txembed", description=__doc__.splitlines()[0],
                                formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    def cmd(name: str, help_: str) -> argparse.ArgumentParser:
        sp = sub.add_parser(name, help=help_, description=help_)
        _add_config_flags(sp)
        return sp

    s = cmd("synth", "generate a synthetic transaction stream with planted phishing accounts")
    s.add_argument("--out", type=Path, required=True)
    s = cmd("ingest", "parse, filter and split transaction files by block number")
    s.add_argument("--input", type=Path, nargs="+", required=True)
    s.add_argument("--out", type=Path, required=True)
    s = cmd("build", "build one attributed graph per split")
    s.add_argument("--input", type=Path, required=True, help="ingest output directory")
    s.add_argument("--out", type=Path, required=True)
    s = cmd("pretrain", "self-supervised incremental pretraining")
    s.add_argument("--graphs", type=Path, required=True, help="build output directory")
    s.add_argument("--out", type=Path, required=True)
    s = cmd("embed", "embed every split with the frozen encoder")
    s.add_argument("--graphs", type=Path, required=True)
    s.add_argument("--model", type=Path, required=True, help="pretrain output directory")
    s.add_argument("--out", type=Path, required=True)
    s = cmd("classify", "sample labels and fit the logistic probe")
    s.add_argument("--graphs", type=Path, required=True)
    s.add_argument("--embeddings", type=Path, required=True, help="embed output directory")
    s.add_argument("--labels", type=Path, required=True, help="phishing ids, one per line")
    s.add_argument("--out", type=Path, required=True)
    s = cmd("eval", "score the probe on the test partition")
    s.add_argument("--graphs", type=Path, required=True)
    s.add_argument("--embeddings", type=Path, required=True)
    s.add_argument("--classifier", type=Path, required=True, help="classify output directory")
    s.add_argument("--out", type=Path, required=True)
    s = cmd("pipeline", "run every stage and average over --seeds runs")
    s.add_argument("--synthetic", action="store_true", help="generate the input stream")
    s.add_argument("--input", type=Path, nargs="*", default=[])
    s.add_argument("--labels", type=Path)
    s.add_argument("--workdir", type=Path, default=Path("txembed-work"))
    s.add_argument("--out", type=Path, help="where to write the averaged report and run.json")
    return p


def config_from_args(ns: argparse.Namespace) -> dict:
    file_values = read_config_file(ns.config) if ns.config else {}
    flags = {k: getattr(ns, k) for k in FLAG_KEYS + SWITCHES + ("uniform_width",)}
    for item in ns.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        flags[k.strip()] = v.strip()
    return merge_config(file_values, flags)


def main(argv: Sequence[str] | None = None) -> int:
    ns = build_parser().parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=logging.DEBUG if ns.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(ns)
        seed = cfg["seed"]
        c = ns.command
        if c == "synth":
            synth_stage(cfg, out=ns.out)
        elif c == "ingest":
            ingest_stage(cfg, ns.input, out=ns.out)
        elif c == "build":
            build_stage(cfg, ns.input, out=ns.out)
        elif c == "pretrain":
            pretrain_stage(cfg, seed, ns.graphs, out=ns.out)
        elif c == "embed":
            embed_stage(cfg, ns.graphs, ns.model, out=ns.out)
        elif c == "classify":
            classify_stage(cfg, seed, ns.graphs, ns.embeddings, ns.labels, out=ns.out)
        elif c == "eval":
            d = eval_stage(cfg, ns.graphs, ns.embeddings, ns.classifier, out=ns.out)
            print((d / "report.txt").read_text(encoding="utf-8"), end="")
        elif c == "pipeline":
            d = pipeline(cfg, ns.workdir, ns.input, ns.labels, ns.synthetic, ns.out)
            print((d / "report.txt").read_text(encoding="utf-8"), end="")
    except (ConfigError, ing.ParseError, FileNotFoundError, ValueError, KeyError) as e:
        log.error("%s failed: %s", ns.command, e)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
