"""Command-line entry point: simulate, extract, offline, stream, fewshot, augment, report.

Every command merges a JSON config file (``--config``) over built-in defaults,
applies explicit flags on top, writes the resolved config to its output
directory and only then starts working.  Exit codes: 0 success, 2 validation
error, 3 data or I/O error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .aoa_features import ESTIMATORS, WindowPlan, extract_dataset
from .artifact import ModelArtifact, to_jsonable
from .augment import (
    ReplayBuffer, augment_eval, cvae_artifact, cvae_train, expand_to, synthetic_dataset, upsample_buffer,
)
from .channel_sim import ArrayGeometry, TrackSpec, default_specs, generate_track, read_csi, track_seed, write_csi
from .dataset import Dataset, load_features, sort_labels
from .errors import (
    AoalbError, DataError, DimensionMismatch, InvalidSpec, IoError, MissingArtifacts, NumericalError, ValidationError,
)
from .fewshot import ProtoNet, confidence_interval, continual_run, meta_test, meta_train
from .offline import (
    KINDS, class_space, encode_labels, evaluate, random_search, retraining_experiment, stratified_split,
    train_classifier, train_hierarchical,
)
from .seeding import derive_seed
from .stream import LEARNERS, StreamConfig, learner_artifact, make_learner, run_prequential, write_log

OUTPUT_ENV = "AOALB_OUTPUT_ROOT"
STREAM_ORDER = ("AMF", "ARF", "GNB", "HAT", "HT", "SRP")

DEFAULTS = {
    "seed": 0,
    "output_dir": None,
    "record_timing": True,
    "geometry": {f.name: f.default for f in fields(ArrayGeometry)},
    "snapshots": 24000,
    "tracks": None,
    "window": {"window": 2000, "shift_ratio": 0.5},
    "estimators": ["MUSIC"],
    "grid_step": 0.1,
    "region": None,
    "offline": {
        "kind": "RF",
        "params": {},
        "stage": "stage1",
        "train_fraction": 0.8,
        "trials": 100,
        "folds": 5,
        "batches": 10,
        "retrain_trials": 10,
    },
    "stream": {"learners": ["AMF"], "warmup_fraction": 0.1, "tau": 0.5, "params": {}, "shuffle": True},
    "fewshot": {
        "mode": "standard",
        "n": 3,
        "k": [1, 5, 10],
        "q": 3,
        "trials": 10,
        "episodes": 1000,
        "test_episodes": 200,
        "train_fraction": 0.8,
        "lr": 1e-3,
        "steps": 5,
    },
    "cvae": {"beta": 1.0, "epochs": 200, "batch": 64, "lr": 1e-3, "val_fraction": 0.1, "per_class": 1000},
}
# sections whose values are free-form dictionaries
OPEN_SECTIONS = {("offline", "params"), ("stream", "params"), ("tracks",)}


def merge_config(base: dict, override: dict, path=()) -> dict:
    """Recursive merge that rejects keys absent from ``base``."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = ".".join((*path, key))
        if key not in base:
            raise InvalidSpec(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and (*path, key) not in OPEN_SECTIONS:
            if not isinstance(value, dict):
                raise InvalidSpec(f"config key {where!r} must be an object")
            out[key] = merge_config(base[key], value, (*path, key))
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULTS)
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InvalidSpec(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise InvalidSpec("config file must hold a JSON object")
    return merge_config(DEFAULTS, raw)


def set_flag(config: dict, dotted: str, value):
    if value is None:
        return
    node = config
    *parents, leaf = dotted.split(".")
    for p in parents:
        node = node[p]
    node[leaf] = value


def output_dir(config: dict, command: str) -> Path:
    if config["output_dir"]:
        return Path(config["output_dir"])
    return Path(os.environ.get(OUTPUT_ENV, "runs")) / command


def dump_json(path: Path, obj) -> None:
    try:
        path.write_text(json.dumps(to_jsonable(obj), indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def prepare(config: dict, command: str) -> Path:
    """Create the output directory and persist the resolved config there."""
    out = output_dir(config, command)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {out}: {exc}") from exc
    config = dict(config, output_dir=str(out))
    dump_json(out / "config.json", config)
    return out


def write_rows(path: Path, header, rows) -> None:
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_rows(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def select_region(data: Dataset, region) -> Dataset:
    if not region:
        return data
    if region not in ("LoS", "NLoS"):
        raise InvalidSpec(f"region must be LoS or NLoS, got {region!r}")
    return data.in_region(region)


def fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


# --- simulate / extract -------------------------------------------------------------


def track_specs(config: dict) -> list[TrackSpec]:
    if config["tracks"] is None:
        return default_specs(config["snapshots"])
    try:
        return [TrackSpec(**spec) for spec in config["tracks"]]
    except TypeError as exc:
        raise InvalidSpec(f"bad track spec: {exc}") from None


def cmd_simulate(config: dict) -> Path:
    geometry = ArrayGeometry(**config["geometry"])
    specs = track_specs(config)
    plan = WindowPlan(**config["window"])
    for spec in specs:
        if spec.snapshots < plan.window:
            raise InvalidSpec(f"track {spec.track_id} has {spec.snapshots} snapshots but the window needs "
                              f"{plan.window}; raise 'snapshots' or lower 'window.window'")
    out = prepare(config, "simulate")
    for spec in specs:
        csi = generate_track(geometry, spec, track_seed(config["seed"], spec.track_id))
        write_csi(out / f"track_{spec.track_id}.csi", csi)
    return out


def cmd_extract(config: dict, paths) -> Path:
    if not paths:
        raise InvalidSpec("give at least one CSI file")
    estimators = list(config["estimators"])
    for name in estimators:
        if name not in ESTIMATORS:
            raise InvalidSpec(f"unknown estimator {name!r}; choose from {list(ESTIMATORS)}")
    plan = WindowPlan(**config["window"])
    out = prepare(config, "extract")
    parts = {name: [] for name in estimators}
    for path in paths:
        for name, ds in extract_dataset(read_csi(path), plan, estimators, grid_step=config["grid_step"]).items():
            parts[name].append(ds)
    for name in estimators:
        Dataset.concat(parts[name]).to_csv(out / f"features_{name}.csv")
    return out


def timed(report: dict, config: dict) -> dict:
    """Zero wall-clock fields when timing is off so reruns give identical bytes."""
    if config["record_timing"]:
        return report
    return {k: (0.0 if k.endswith(("_ms_mean", "_seconds")) else v) for k, v in report.items()}


# --- offline ------------------------------------------------------------------------


def holdout(data: Dataset, label: str, fraction: float, seed: int):
    y = encode_labels(data.labels(label), class_space(data, label))
    tr, te = stratified_split(y, fraction, seed)
    return data.subset(tr), data.subset(te)


def cmd_offline(config: dict, sub: str, features, model_path=None) -> Path:
    oc = config["offline"]
    data = select_region(load_features(features), config["region"])
    stage = oc["stage"]
    if stage not in ("stage1", "stage2", "hier"):
        raise InvalidSpec("offline.stage must be stage1, stage2 or hier")
    label = "region" if stage == "stage1" else "track"
    seed = config["seed"]
    out = prepare(config, f"offline-{sub}")
    if sub == "train":
        train, test = holdout(data, label, oc["train_fraction"], derive_seed(seed, "split"))
        if stage == "hier":
            art = train_hierarchical(train.in_region("LoS"), train.in_region("NLoS"), oc["kind"], oc["kind"], seed)
            pred = art.model.predict(test.features)
            report = {"accuracy": float(np.mean(pred == test.track_id.astype(str))), "n_test": len(test)}
        else:
            classes = class_space(data, label)
            art = train_classifier(oc["kind"], train, oc["params"], seed, label=label, classes=classes)
            report = evaluate(art, test, label)
        art.save(out / "model.aoalb")
        dump_json(out / "report.json", timed(report, config))
    elif sub == "eval":
        if model_path is None:
            raise InvalidSpec("offline eval needs --model")
        art = ModelArtifact.load(model_path)
        model = art.model
        if data.dim != getattr(model, "n_features", data.dim):
            raise DimensionMismatch(f"model expects {model.n_features} features, file has {data.dim}")
        if art.kind == "HIER":
            pred = model.predict(data.features)
            report = {"accuracy": float(np.mean(pred == data.track_id.astype(str))), "n_test": len(data)}
        else:
            report = evaluate(art, data, label)
        dump_json(out / "report.json", timed(report, config))
    elif sub == "tune":
        result = random_search(oc["kind"], None, data, oc["trials"], oc["folds"], seed, label)
        keys = sorted({k for t in result.trials for k in t["config"]})
        write_rows(out / "trials.csv", ["trial", "cv_score", *keys],
                   [[t["trial"], fmt(t["cv_score"]), *[fmt(t["config"].get(k, "")) for k in keys]]
                    for t in result.trials])
        dump_json(out / "best.json", {"kind": oc["kind"], "config": result.best_config,
                                      "cv_score": result.best_score})
    elif sub == "retrain-exp":
        rows = []
        for strategy in ("buffer", "cumulative"):
            curve = retraining_experiment(data, oc["kind"], strategy, oc["batches"], oc["retrain_trials"], seed,
                                          oc["params"], label)
            rows += [[strategy, b + 1, size, fmt(m), fmt(s)]
                     for b, (size, m, s) in enumerate(zip(curve.train_sizes, curve.mean, curve.std))]
        write_rows(out / "retraining.csv", ["strategy", "batch", "train_size", "mean_accuracy", "std"], rows)
    else:
        raise InvalidSpec(f"unknown offline subcommand {sub!r}")
    return out


# --- stream -------------------------------------------------------------------------


def stream_learners(spec) -> list[str]:
    names = list(STREAM_ORDER) if spec in ("all", ["all"]) else list(spec)
    for name in names:
        if name not in LEARNERS:
            raise InvalidSpec(f"unknown streaming learner {name!r}; choose from {sorted(LEARNERS)} or all")
    return names


def scenario_of(data: Dataset) -> str:
    region = "+".join(sort_labels(set(map(str, data.region)))) or "?"
    est = "+".join(sort_labels(set(map(str, data.estimator)))) or "?"
    return f"{region}/{est}"


def cmd_stream(config: dict, features, cvae_model=None) -> Path:
    sc = config["stream"]
    names = stream_learners(sc["learners"])
    data = select_region(load_features(features), config["region"])
    scenario = scenario_of(data)
    seed = config["seed"]
    out = prepare(config, "stream")
    if cvae_model is not None:
        data = expand_to(data, ModelArtifact.load(cvae_model, "CVAE").model, config["cvae"]["per_class"],
                         derive_seed(seed, "expand"))
    if sc["shuffle"]:
        data = data.subset(np.random.default_rng(derive_seed(seed, "stream-order")).permutation(len(data)))
    classes = sort_labels(map(str, data.track_id))
    cfg = StreamConfig(sc["warmup_fraction"], sc["tau"], seed, config["record_timing"])
    rows = []
    for name in names:
        params = sc["params"].get(name, {})
        model = make_learner(name, classes, derive_seed(seed, "learner", name), **params)
        log, report = run_prequential(model, data, cfg)
        write_log(out / f"log_{name}.csv", log)
        doc = {"learner": name, "scenario": scenario, "tau": cfg.tau, **asdict(report)}
        dump_json(out / f"report_{name}.json", doc)
        learner_artifact(model, {"params": params}, seed, data.fingerprint()).save(out / f"model_{name}.aoalb")
        rows.append([name, scenario, fmt(report.warmup_accuracy if report.warmup_accuracy is not None else ""),
                     fmt(report.online_accuracy), fmt(report.acceptance_rate), fmt(report.forgetting_rate)])
    write_rows(out / "comparison.csv",
               ["learner", "scenario", "warmup_accuracy", "online_accuracy", "acceptance_rate", "forgetting_rate"],
               rows)
    return out


# --- few-shot -----------------------------------------------------------------------


def cmd_fewshot(config: dict, features, cvae_model=None) -> Path:
    fc = config["fewshot"]
    mode = fc["mode"]
    if mode not in ("standard", "continual"):
        raise InvalidSpec("fewshot.mode must be standard or continual")
    ks = fc["k"] if isinstance(fc["k"], list) else [fc["k"]]
    data = select_region(load_features(features), config["region"])
    seed = config["seed"]
    out = prepare(config, f"fewshot-{mode}")
    if cvae_model is not None:
        data = expand_to(data, ModelArtifact.load(cvae_model, "CVAE").model, config["cvae"]["per_class"],
                         derive_seed(seed, "expand"))
    runs_dir = out / "runs"
    runs_dir.mkdir(exist_ok=True)
    rows = []
    for k in ks:
        finals, frs, es = [], [], []
        for trial in range(fc["trials"]):
            tseed = derive_seed(seed, "fewshot", mode, k, trial)
            model = ProtoNet(in_dim=data.dim, lr=fc["lr"], seed=tseed)
            if mode == "standard":
                train, test = holdout(data, "track", fc["train_fraction"], tseed)
                curve = meta_train(model, train, fc["episodes"], fc["n"], k, fc["q"], fc["lr"], tseed)
                acc, ci = meta_test(model, test, fc["test_episodes"], fc["n"], k, fc["q"], tseed + 1)
                doc = {"mode": mode, "k": k, "n": fc["n"], "q": fc["q"], "trial": trial, "accuracy": acc,
                       "ci95": ci, "loss_curve": curve}
                finals.append(acc)
            else:
                res = continual_run(model, data, fc["n"], k, fc["q"], tseed, fc["steps"], fc["lr"],
                                    record_timing=config["record_timing"])
                doc = {"mode": mode, "trial": trial, **asdict(res)}
                finals.append(res.final_accuracy)
                frs.append(res.mean_fr)
                es.append(res.E)
            dump_json(runs_dir / f"{mode}_k{k}_t{trial}.json", doc)
        ci = confidence_interval(finals) if len(finals) > 1 else 0.0
        rows.append([k, fc["n"], fc["q"], fmt(np.mean(es)) if es else "", fmt(np.mean(finals)), fmt(ci),
                     fmt(np.mean(frs)) if frs else ""])
    write_rows(out / "aggregate.csv", ["k", "n", "q", "E", "mean_accuracy", "ci95", "forgetting_rate"], rows)
    return out


# --- augment ------------------------------------------------------------------------


def cmd_augment(config: dict, sub: str, features=None, model_path=None, classifier=None, target=None) -> Path:
    cc = config["cvae"]
    seed = config["seed"]
    out = prepare(config, f"augment-{sub}")
    if sub == "train":
        data = select_region(load_features(features), config["region"])
        model, log = cvae_train(data, cc["beta"], cc["epochs"], cc["batch"], cc["lr"], seed, cc["val_fraction"])
        cvae_artifact(model, cc, seed, data.fingerprint()).save(out / "cvae.aoalb")
        write_rows(out / "loss.csv", ["epoch", "train_elbo", "val_elbo"],
                   [[i, fmt(a), fmt(b)] for i, (a, b) in enumerate(zip(log.train_elbo, log.val_elbo))])
        dump_json(out / "training.json", {"best_epoch": log.best_epoch, "classes": model.classes})
        return out
    if model_path is None:
        raise InvalidSpec(f"augment {sub} needs --model")
    model = ModelArtifact.load(model_path, "CVAE").model
    if sub == "sample":
        syn, clamped = synthetic_dataset(model, cc["per_class"], derive_seed(seed, "sample"))
        syn.to_csv(out / "synthetic.csv")
        dump_json(out / "sample.json", {"rows": len(syn), "clamped_values": clamped})
    elif sub == "eval":
        if classifier is None or features is None:
            raise InvalidSpec("augment eval needs --classifier and --features (synthetic CSV)")
        metrics = augment_eval(ModelArtifact.load(classifier), load_features(features))
        dump_json(out / "metrics.json", metrics)
    elif sub == "upsample":
        if features is None:
            raise InvalidSpec("augment upsample needs --features (buffer CSV)")
        buffer_data = load_features(features)
        buf = ReplayBuffer(max(len(buffer_data), 1))
        buf.extend(buffer_data.samples())
        classes = sort_labels(map(str, buffer_data.track_id))
        upsample_buffer(buf, model, target or cc["per_class"], derive_seed(seed, "upsample"), classes) \
            .to_csv(out / "upsampled.csv")
    else:
        raise InvalidSpec(f"unknown augment subcommand {sub!r}")
    return out


# --- report -------------------------------------------------------------------------


def _table(header, rows) -> list[str]:
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(str(c) for c in row) + " |" for row in rows]
    return lines


def cmd_report(run_dir) -> Path:
    """Collate stream, few-shot and offline outputs under ``run_dir`` into report.md."""
    root = Path(run_dir)
    if not root.is_dir():
        raise MissingArtifacts(f"{root} is not a directory")
    stream_docs = []
    for p in sorted(root.rglob("report_*.json")):
        doc = json.loads(p.read_text())
        if "online_accuracy" in doc:
            stream_docs.append(doc)
    aggregates = sorted(root.rglob("aggregate.csv"))
    offline = [p for p in sorted(root.rglob("report.json"))]
    retrain = sorted(root.rglob("retraining.csv"))
    if not (stream_docs or aggregates or offline or retrain):
        raise MissingArtifacts(f"no run outputs found under {root}")
    lines = ["# Run report", ""]
    if stream_docs:
        scenarios = sorted({d["scenario"] for d in stream_docs})
        learners = sorted({d["learner"] for d in stream_docs})
        cell = {(d["learner"], d["scenario"]): d for d in stream_docs}
        for title, key in (("Online accuracy", "online_accuracy"), ("Forgetting rate", "forgetting_rate"),
                           ("Acceptance rate", "acceptance_rate"), ("Warm-up accuracy", "warmup_accuracy")):
            lines += [f"## Online performance: {title.lower()}", ""]
            rows = []
            for name in learners:
                vals = []
                for s in scenarios:
                    v = cell.get((name, s), {}).get(key)
                    vals.append("" if v is None else f"{v:.4f}")
                rows.append([name, *vals])
            lines += _table(["learner", *scenarios], rows) + [""]
    for p in aggregates:
        rows = read_rows(p)
        lines += [f"## Final accuracy vs K ({p.parent.name})", ""]
        lines += _table(["K", "N", "Q", "E", "mean ± 95% CI", "FR"],
                        [[r["k"], r["n"], r["q"], r["E"] and f"{float(r['E']):.0f}",
                          f"{float(r['mean_accuracy']):.4f} ± {float(r['ci95']):.4f}",
                          r["forgetting_rate"] and f"{float(r['forgetting_rate']):.4f}"] for r in rows]) + [""]
    if offline:
        lines += ["## Offline evaluation", ""]
        rows = []
        for p in offline:
            doc = json.loads(p.read_text())
            rows.append([str(p.parent.relative_to(root)) or ".", f"{doc.get('accuracy', float('nan')):.4f}",
                         f"{doc['macro_f1']:.4f}" if "macro_f1" in doc else ""])
        lines += _table(["run", "accuracy", "macro F1"], rows) + [""]
    for p in retrain:
        lines += [f"## Retraining ({p.parent.name})", ""]
        lines += _table(["strategy", "batch", "train size", "mean accuracy", "std"],
                        [[r["strategy"], r["batch"], r["train_size"], f"{float(r['mean_accuracy']):.4f}",
                          f"{float(r['std']):.4f}"] for r in read_rows(p)]) + [""]
    out = root / "report.md"
    out.write_text("\n".join(lines))
    return out


# --- argument parsing ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aoalb", description="AoA-based localization pipeline")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--region", choices=["LoS", "NLoS"])
    common.add_argument("--no-timing", action="store_true", help="log zero timings for byte-stable outputs")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="generate the CSI campaign")
    p.add_argument("--snapshots", type=int)
    p.add_argument("--window", type=int)

    p = sub.add_parser("extract", parents=[common], help="AoA features from CSI files")
    p.add_argument("csi", nargs="+")
    p.add_argument("--window", type=int)
    p.add_argument("--shift-ratio", type=float)
    p.add_argument("--estimator", nargs="+", choices=list(ESTIMATORS))
    p.add_argument("--grid-step", type=float)

    p = sub.add_parser("offline", parents=[common], help="offline classifiers")
    p.add_argument("action", choices=["train", "eval", "tune", "retrain-exp"])
    p.add_argument("--features", nargs="+", required=True)
    p.add_argument("--model")
    p.add_argument("--kind", choices=list(KINDS))
    p.add_argument("--stage", choices=["stage1", "stage2", "hier"])
    p.add_argument("--trials", type=int)
    p.add_argument("--folds", type=int)
    p.add_argument("--batches", type=int)

    p = sub.add_parser("stream", parents=[common], help="prequential streaming evaluation")
    p.add_argument("--features", nargs="+", required=True)
    p.add_argument("--learner", nargs="+", help="learner kinds or 'all'")
    p.add_argument("--tau", type=float)
    p.add_argument("--warmup", type=float)
    p.add_argument("--cvae", help="CVAE artifact used to expand each class first")

    p = sub.add_parser("fewshot", parents=[common], help="prototypical-network experiments")
    p.add_argument("mode", choices=["standard", "continual"])
    p.add_argument("--features", nargs="+", required=True)
    p.add_argument("--k", type=int, nargs="+")
    p.add_argument("--trials", type=int)
    p.add_argument("--episodes", type=int)
    p.add_argument("--cvae", help="CVAE artifact used to expand each class first")

    p = sub.add_parser("augment", parents=[common], help="conditional VAE augmentation")
    p.add_argument("action", choices=["train", "sample", "eval", "upsample"])
    p.add_argument("--features", nargs="+")
    p.add_argument("--model")
    p.add_argument("--classifier")
    p.add_argument("--per-class", type=int)
    p.add_argument("--target", type=int)
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("report", help="collate a run directory into Markdown")
    p.add_argument("run_dir")
    return parser


def resolve(args) -> dict:
    config = load_config(args.config)
    set_flag(config, "seed", args.seed)
    set_flag(config, "output_dir", args.out)
    set_flag(config, "region", args.region)
    if args.no_timing:
        config["record_timing"] = False
    flag = lambda name: getattr(args, name, None)
    set_flag(config, "snapshots", flag("snapshots"))
    set_flag(config, "window.window", flag("window"))
    set_flag(config, "window.shift_ratio", flag("shift_ratio"))
    set_flag(config, "estimators", flag("estimator"))
    set_flag(config, "grid_step", flag("grid_step"))
    if args.command == "offline":
        set_flag(config, "offline.kind", args.kind)
        set_flag(config, "offline.stage", args.stage)
        set_flag(config, "offline.trials", args.trials)
        set_flag(config, "offline.folds", args.folds)
        set_flag(config, "offline.batches", args.batches)
    if args.command == "stream":
        set_flag(config, "stream.learners", args.learner)
        set_flag(config, "stream.tau", args.tau)
        set_flag(config, "stream.warmup_fraction", args.warmup)
    if args.command == "fewshot":
        set_flag(config, "fewshot.mode", args.mode)
        set_flag(config, "fewshot.k", args.k)
        set_flag(config, "fewshot.trials", args.trials)
        set_flag(config, "fewshot.episodes", args.episodes)
    if args.command == "augment":
        set_flag(config, "cvae.per_class", args.per_class)
        set_flag(config, "cvae.epochs", args.epochs)
    return config


def run(argv=None) -> Path:
    args = build_parser().parse_args(argv)
    if args.command == "report":
        return cmd_report(args.run_dir)
    config = resolve(args)
    if args.command == "simulate":
        return cmd_simulate(config)
    if args.command == "extract":
        return cmd_extract(config, args.csi)
    if args.command == "offline":
        return cmd_offline(config, args.action, args.features, args.model)
    if args.command == "stream":
        return cmd_stream(config, args.features, args.cvae)
    if args.command == "fewshot":
        return cmd_fewshot(config, args.features, args.cvae)
    return cmd_augment(config, args.action, args.features, args.model, args.classifier, args.target)


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, ValidationError):
        return 2
    if isinstance(exc, DataError):
        return 3
    if isinstance(exc, NumericalError):
        return 4
    return 1


def main(argv=None) -> int:
    try:
        out = run(argv)
    except AoalbError as exc:
        print(f"aoalb: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exit_code(exc)
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
