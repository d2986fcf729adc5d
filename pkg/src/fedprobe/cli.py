"""Configuration-driven experiment runner.

A single JSON config describes dataset, model, partition, attack and
aggregator; `fedprobe run` executes it and writes machine-readable outputs
(metrics.csv, diagnostics.json, manifest.json) for external plotting.
Unknown config keys are hard errors so typos never silently fall back to
defaults.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import data as dat
from . import nn
from .aggregation import AggregatorConfig
from .attacks import AttackConfig
from .clustering import pca_project
from .simulation import (ADAPTIVE_KINDS, ExperimentConfig, RoundReport,
                         SimState, run_experiment, screening_benchmark)

SCHEMA_VERSION = 1

log = logging.getLogger("fedprobe")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Config schema: defaults mirror the reference simulation settings
# (200 clients, 30 collected, batch 32, lr 0.001 * 0.998^t, momentum 0.9,
# weight decay 1e-4, SGD, 1 local iteration, 100 global iterations).
# ---------------------------------------------------------------------------

_DEFAULTS: dict = {
    "schema_version": SCHEMA_VERSION,
    "seed": 0,
    "dataset": {
        "name": "synthetic",        # synthetic | digits | mnist
        "classes": 10,
        "per_class": 100,           # synthetic only
        "side": 6,                  # image side (synthetic: dim = side^2)
        "separation": 6.0,          # synthetic blob separation (sigma units)
        "images": "",               # mnist train images path
        "labels": "",               # mnist train labels path
        "test_images": "",
        "test_labels": "",
        "limit": 0,                 # 0 = use everything
        "test_fraction": 0.2,       # synthetic held-out split
    },
    "model": {"name": "auto"},      # auto | lenet_lite | linear
    "partition": {"clients": 200, "alpha": 0.5},
    "round": {
        "tau": 30,
        "global_iterations": 100,
        "local_iterations": 1,
        "batch_size": 32,
        "lr": 0.001,
        "lr_decay": 0.998,
        "momentum": 0.9,
        "weight_decay": 1e-4,
        "global_lr": 1.0,
    },
    "attack": {
        "kind": "none",             # none | trigger | subpopulation |
                                    # adaptive_krum | adaptive_probe
        "mode": "blackbox",         # blackbox | pgd | smp
        "malicious_fraction": 0.0,
        "epsilon": 5e-2,
        "rho1": 10.0,
        "rho2": 1e-4,
        "replace_scale": 0.0,       # 0 disables model replacement
        "target_label": 0,
        "poison_fraction": 0.3,
        "trigger_block": 3,
        "trigger_corner": "br",
        "source_label": 1,          # subpopulation source class
        "subpop_fraction": 0.1,     # share of the source class relabeled
        "adaptive_floor": 1e-10,
    },
    "aggregator": {
        "kind": "fedavg",           # fedavg | ndc | rsa | rfa | krum |
                                    # multikrum | softmax_probe
        "delta": 2.0,
        "rsa_lr": 5e-5,
        "rsa_decay": 0.998,
        "v": 0.1,
        "mu": 1e-5,
        "weiszfeld_rounds": 500,
        "f": -1,                    # -1 = round(tau * malicious_fraction)
        "probe": "ones",
        "probe_seed": 0,
        "min_cluster_size": 0,
        "min_samples": 1,
        "sum_preserved": False,
        "no_cluster_policy": "component",
        "cut_factor": 3.0,
        "probe_full_model": False,
    },
    "measure_screening_time": True,
    "record_diagnostics": True,
}


def _merge_strict(defaults: dict, user: dict, path: str = "") -> dict:
    out = {}
    for key, value in user.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where!r} must be a table")
            out[key] = _merge_strict(defaults[key], value, where)
        else:
            out[key] = value
    for key, value in defaults.items():
        if key not in out:
            out[key] = json.loads(json.dumps(value)) if isinstance(value, dict) else value
    return out


def parse_config(path) -> dict:
    """Read and validate a config file; missing keys take the defaults above."""
    try:
        raw = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        user = json.loads(raw) if raw.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    if not isinstance(user, dict):
        raise ConfigError("config root must be a JSON object")
    cfg = _merge_strict(_DEFAULTS, user)
    if cfg["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"schema_version {cfg['schema_version']} unsupported "
                          f"(expected {SCHEMA_VERSION})")
    _validate(cfg)
    return cfg


def _validate(cfg: dict):
    a = cfg["attack"]
    if not (0.0 <= a["malicious_fraction"] < 0.5):
        raise ConfigError(
            "attack.malicious_fraction must be in [0, 0.5): the threat model "
            "bounds attackers below half of each round")
    if a["kind"] not in ("none", "trigger", "subpopulation") + ADAPTIVE_KINDS:
        raise ConfigError(f"unknown attack.kind {a['kind']!r}")
    if a["mode"] not in ("blackbox", "pgd", "smp"):
        raise ConfigError(f"unknown attack.mode {a['mode']!r}")
    if cfg["aggregator"]["kind"] not in AggregatorConfig.KINDS:
        raise ConfigError(f"unknown aggregator.kind {cfg['aggregator']['kind']!r}")
    if cfg["dataset"]["name"] not in ("synthetic", "digits", "mnist"):
        raise ConfigError(f"unknown dataset.name {cfg['dataset']['name']!r}")
    if cfg["model"]["name"] not in ("auto", "lenet_lite", "linear"):
        raise ConfigError(f"unknown model.name {cfg['model']['name']!r}")
    r = cfg["round"]
    if r["tau"] > cfg["partition"]["clients"]:
        raise ConfigError("round.tau cannot exceed partition.clients")


# ---------------------------------------------------------------------------
# Experiment assembly
# ---------------------------------------------------------------------------

def _load_dataset(cfg: dict, seed: int) -> tuple[dat.Dataset, dat.Dataset]:
    d = cfg["dataset"]
    if d["name"] == "synthetic":
        full = dat.gen_synthetic(d["classes"], d["per_class"], d["side"] ** 2,
                                 seed=seed, separation=d["separation"],
                                 image_side=d["side"])
        n_test = max(1, int(round(d["test_fraction"] * len(full))))
        test = full.subset(np.arange(len(full) - n_test, len(full)))
        train = full.subset(np.arange(0, len(full) - n_test))
        return train, test
    if d["name"] == "digits":
        return dat.load_digits_images(side=d["side"] if d["side"] % 8 == 0 else 16)
    train = dat.load_idx(d["images"], d["labels"], name="mnist")
    test = dat.load_idx(d["test_images"], d["test_labels"], name="mnist-test")
    if d["limit"]:
        train = train.subset(np.arange(min(d["limit"], len(train))))
    return train, test


def _make_spec(cfg: dict, train: dat.Dataset) -> nn.NetworkSpec:
    name = cfg["model"]["name"]
    shape = tuple(train.inputs.shape[1:])
    if name == "auto":
        name = "lenet_lite" if shape[1] >= 12 else "linear"
    if name == "lenet_lite":
        return nn.lenet_lite(shape, train.num_classes)
    return nn.linear_net(shape, train.num_classes)


def _subpopulation_shift(train: dat.Dataset, test: dat.Dataset, cfg: dict,
                         seed: int) -> tuple[dat.Dataset, dat.Dataset, np.ndarray, np.ndarray]:
    """Create a feature-shifted tail inside the source class.

    A deterministic bump pattern is added to a random slice of the source
    class in both train and test copies, making those examples a rare,
    recognizable subpopulation.
    """
    a = cfg["attack"]
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5B9)))
    pattern = rng.uniform(0.15, 0.35, size=train.inputs.shape[1:])

    def shift(ds: dat.Dataset) -> tuple[dat.Dataset, np.ndarray]:
        src = np.flatnonzero(ds.labels == a["source_label"])
        k = max(2, int(round(a["subpop_fraction"] * len(src))))
        chosen = rng.choice(src, size=min(k, len(src)), replace=False)
        inputs = ds.inputs.copy()
        inputs[chosen] = np.clip(inputs[chosen] + pattern, 0.0, 1.0)
        return dat.Dataset(inputs, ds.labels.copy(), ds.num_classes, ds.name), chosen

    train2, train_subpop = shift(train)
    test2, test_subpop = shift(test)
    return train2, test2, train_subpop, test_subpop


def build_experiment(cfg: dict) -> tuple[SimState, ExperimentConfig]:
    """Turn a validated config into an initial state plus run parameters."""
    seed = cfg["seed"]
    train, test = _load_dataset(cfg, seed)
    a = cfg["attack"]

    backdoor = None
    poison_train = None
    if a["kind"] == "trigger":
        backdoor = dat.make_trigger_backdoor(test, a["trigger_block"],
                                             a["trigger_corner"], a["target_label"])
    elif a["kind"] == "subpopulation":
        train, test, train_subpop, _ = _subpopulation_shift(train, test, cfg, seed)
        poison_train, backdoor = dat.make_subpopulation_backdoor(
            train, train_subpop, a["target_label"], test_fraction=0.5,
            seed=seed)

    spec = _make_spec(cfg, train)
    shards = dat.dirichlet_partition(train, cfg["partition"]["clients"],
                                     cfg["partition"]["alpha"], seed=seed)

    fraction = a["malicious_fraction"]
    n_mal = int(round(cfg["partition"]["clients"] * fraction))
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xBAD)))
    malicious_ids = set(rng.choice(cfg["partition"]["clients"], size=n_mal,
                                   replace=False).tolist()) if n_mal else set()

    if a["kind"] == "trigger" and malicious_ids:
        shards = dat.poison_shards(
            shards, malicious_ids,
            lambda clean: dat.apply_trigger(clean, a["trigger_block"],
                                            a["trigger_corner"], a["target_label"],
                                            a["poison_fraction"]))
    elif a["kind"] == "subpopulation" and malicious_ids:
        shards = dat.poison_shards(shards, malicious_ids, lambda clean: poison_train)
    elif a["kind"] in ADAPTIVE_KINDS and malicious_ids:
        shards = [dat.ClientShard(s.client_id, s.clean, None, s.client_id in malicious_ids)
                  for s in shards]

    r = cfg["round"]
    agg = dict(cfg["aggregator"])
    if agg["f"] < 0:
        agg["f"] = int(round(r["tau"] * fraction))
    attack_cfg = None
    if a["kind"] != "none":
        attack_cfg = AttackConfig(
            kind=a["kind"], mode=a["mode"], epsilon=a["epsilon"],
            rho1=a["rho1"], rho2=a["rho2"],
            replace_scale=a["replace_scale"] if a["replace_scale"] else None,
            target_label=a["target_label"], poison_fraction=a["poison_fraction"],
            trigger_block=a["trigger_block"], trigger_corner=a["trigger_corner"])

    exp = ExperimentConfig(
        total_clients=cfg["partition"]["clients"], tau=r["tau"],
        malicious_fraction=fraction, global_iterations=r["global_iterations"],
        local_iterations=r["local_iterations"], batch_size=r["batch_size"],
        lr=r["lr"], lr_decay=r["lr_decay"], momentum=r["momentum"],
        weight_decay=r["weight_decay"], global_lr=r["global_lr"], seed=seed,
        attack=attack_cfg, aggregator=AggregatorConfig(**agg),
        adaptive_floor=a["adaptive_floor"],
        measure_screening_time=cfg["measure_screening_time"])

    state = SimState(spec=spec, global_params=nn.init_params(spec, seed),
                     shards=shards, test_set=test, backdoor=backdoor)
    return state, exp


# ---------------------------------------------------------------------------
# Run outputs
# ---------------------------------------------------------------------------

METRICS_HEADER = ["iteration", "test_error", "attack_success_rate",
                  "preserved_count", "screening_seconds", "preserved_ids"]


def _fmt(x: float) -> str:
    return f"{x:.10g}"


def run_to_dir(cfg: dict, out_dir) -> int:
    """Execute the configured experiment; write metrics/diagnostics/manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    config_text = json.dumps(cfg, indent=2, sort_keys=True)
    (out / "config.json").write_text(config_text)

    state, exp = build_experiment(cfg)
    diagnostics: list[dict] = []
    record = cfg["record_diagnostics"]

    metrics_path = out / "metrics.csv"
    status = "complete"
    try:
        with open(metrics_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(METRICS_HEADER)

            def sink(report: RoundReport):
                if record:
                    diagnostics.append(_compact_diagnostics(report, state.spec))
                writer.writerow([
                    report.iteration,
                    _fmt(report.test_error_rate),
                    "" if report.attack_success_rate is None
                    else _fmt(report.attack_success_rate),
                    len(report.preserved_ids),
                    _fmt(report.screening_seconds),
                    ";".join(str(i) for i in report.preserved_ids),
                ])
                report.diagnostics = {}
                log.info("round %d: err=%.4f asr=%s preserved=%d",
                         report.iteration, report.test_error_rate,
                         report.attack_success_rate, len(report.preserved_ids))

            state, _reports = run_experiment(state, exp, sink=sink,
                                             keep_diagnostics=True)
    except Exception:
        status = "failed"
        raise
    finally:
        if record:
            (out / "diagnostics.json").write_text(
                json.dumps({"rounds": diagnostics}, sort_keys=True))
        manifest = {
            "schema_version": SCHEMA_VERSION,
            "config_file": "config.json",
            "config_sha256": hashlib.sha256(config_text.encode()).hexdigest(),
            "seed": cfg["seed"],
            "started_unix": started,
            "finished_unix": time.time(),
            "outputs": ["metrics.csv"] + (["diagnostics.json"] if record else []),
            "status": status,
            "artifact_version": "0.1.0",
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2,
                                                      sort_keys=True))
    return 0


def _compact_diagnostics(report: RoundReport, spec=None) -> dict:
    """Per-round diagnostics small enough to store: 2-D projections + labels.

    Probe responses are recorded for every aggregator (recomputed with the
    default probe when the rule itself did not screen), so scatter exports
    work regardless of which defense ran.
    """
    from .aggregation import make_probe, probe_responses

    entry: dict = {
        "iteration": report.iteration,
        "sampled_ids": report.sampled_ids,
        "malicious_ids": report.malicious_ids,
        "preserved_ids": report.preserved_ids,
        "adaptive_lambda": report.adaptive_lambda,
        "adaptive_accepted": report.adaptive_accepted,
    }
    diag = report.diagnostics
    updates = diag.get("updates")
    if updates is not None and len(updates) >= 2:
        entry["pca_updates"] = np.round(pca_project(np.asarray(updates), 2).coords,
                                        12).tolist()
    slous = diag.get("slous")
    if slous is None and updates is not None and spec is not None:
        slous = probe_responses(list(updates), spec, make_probe(spec))
    if slous is not None:
        slous = np.asarray(slous)
        entry["slous"] = np.round(slous, 12).tolist()
        if len(slous) >= 2:
            entry["pca_slous"] = np.round(pca_project(slous, 2).coords, 12).tolist()
    if "cluster_labels" in diag:
        entry["cluster_labels"] = np.asarray(diag["cluster_labels"]).tolist()
    if "all_noise" in diag:
        entry["all_noise"] = bool(diag["all_noise"])
    return entry


def export_scatter(run_dir, round_idx: int, space: str, out_path=None) -> Path:
    """Write a per-client CSV of 2-D coordinates for one recorded round."""
    if space not in ("updates", "slous"):
        raise ConfigError("space must be 'updates' or 'slous'")
    run = Path(run_dir)
    diag_path = run / "diagnostics.json"
    if not diag_path.exists():
        raise ConfigError(f"{diag_path} missing: run with record_diagnostics")
    rounds = json.loads(diag_path.read_text())["rounds"]
    match = [r for r in rounds if r["iteration"] == round_idx]
    if not match:
        raise ConfigError(f"round {round_idx} not found in diagnostics")
    entry = match[0]
    key = "pca_updates" if space == "updates" else "pca_slous"
    if key not in entry:
        raise ConfigError(f"round {round_idx} has no {space} coordinates")
    coords = entry[key]
    malicious = set(entry["malicious_ids"])
    preserved = set(entry["preserved_ids"])
    out = Path(out_path) if out_path else run / f"scatter_{space}_round{round_idx}.csv"
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["client_id", "pc1", "pc2", "is_malicious", "preserved"])
        for cid, (pc1, pc2) in zip(entry["sampled_ids"], coords):
            writer.writerow([cid, _fmt(pc1), _fmt(pc2),
                             int(cid in malicious), int(cid in preserved)])
    return out


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="fedprobe",
        description="Federated-learning robustness experiments")
    sub = p.add_subparsers(dest="command", required=True)

    runp = sub.add_parser("run", help="execute one experiment config")
    runp.add_argument("config")
    runp.add_argument("--out", required=True)
    runp.add_argument("--seed", type=int, default=None,
                      help="override the config seed")

    bench = sub.add_parser("bench", help="screening-time benchmark")
    bench.add_argument("--tau", type=int, default=30)
    bench.add_argument("--zeta", type=int, default=1_000_000)
    bench.add_argument("--classes", type=int, default=10)
    bench.add_argument("--repeats", type=int, default=5)
    bench.add_argument("--out", default=None, help="also write a CSV here")

    scat = sub.add_parser("export-scatter", help="dump 2-D projections of one round")
    scat.add_argument("run_dir")
    scat.add_argument("--round", type=int, required=True)
    scat.add_argument("--space", choices=("updates", "slous"), required=True)
    scat.add_argument("--out", default=None)
    return p


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("FEDPROBE_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s")
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            cfg = parse_config(args.config)
            if args.seed is not None:
                cfg["seed"] = args.seed
            return run_to_dir(cfg, args.out)
        if args.command == "bench":
            kinds = ["fedavg", "multikrum", "krum", "rfa", "rsa", "ndc",
                     "softmax_probe"]
            table = screening_benchmark(kinds, args.tau, args.zeta,
                                        args.classes, args.repeats)
            rows = [["method", "screening_mean_seconds", "screening_std_seconds"]]
            for kind in kinds:
                rows.append([kind, _fmt(table[kind]["mean_seconds"]),
                             _fmt(table[kind]["std_seconds"])])
            widths = [max(len(str(r[i])) for r in rows) for i in range(3)]
            for r in rows:
                print("  ".join(str(v).ljust(w) for v, w in zip(r, widths)))
            if args.out:
                with open(args.out, "w", newline="") as fh:
                    csv.writer(fh).writerows(rows)
            return 0
        if args.command == "export-scatter":
            path = export_scatter(args.run_dir, args.round, args.space, args.out)
            print(path)
            return 0
        raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, ValueError) as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - report and exit nonzero
        log.exception("run failed")
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
