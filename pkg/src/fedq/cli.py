"""Command-line entry point: partition, train, and compare subcommands.

A JSON config file can carry every setting; explicit command-line flags
override it. The resolved configuration is echoed into the output
directory so any run can be reproduced from its own artifacts.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numerical
failure (the last good checkpoint is retained).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import data, orchestrator
from .dqn import DqnConfig
from .errors import (
    ConfigInvalid,
    EmptyCluster,
    EmptyDataset,
    FedqError,
    FileUnreadable,
    InvalidSpec,
    NumericalFailure,
    SchemaMismatch,
    TooFewSamples,
)
from .mlp import LearnerConfig
from .orchestrator import RunConfig
from .seeding import split_seed

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4

# Every key a JSON config file may carry; unknown keys are rejected.
DEFAULTS: dict = {
    "dataset": None,
    "schema": None,
    "synthetic": None,
    "subsample_rows": None,
    "load_seed": None,
    "manifest": None,
    "out": None,
    "envs": 100,
    "clusters": 2,
    "alpha": 0.4,
    "train_fraction": 0.8,
    "seed": 0,
    "strategy": "fedq",
    "select_n": 30,
    "mixtures": 2,
    "rounds": 10,
    "target_acc": 0.95,
    "hidden_units": 32,
    "learning_rate": 0.1,
    "local_steps": 10,
    "batch_size": 32,
    "grad_clip": None,
    "gamma": 0.95,
    "tau": 1.0,
    "q_learning_rate": 1e-3,
    "minibatch": 32,
    "capacity": 1000,
    "q_hidden": 64,
    "d_pca": 16,
    "xi": 64.0,
    "repeats": 1,
    "strategies": None,
}

_STRATEGY_ALIASES = {"local": "local_only"}
_CLI_STRATEGIES = ("fedq", "random", "full", "fedavg", "local")


def _load_config_file(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise FileUnreadable(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigInvalid(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigInvalid("config file must hold a JSON object")
    unknown = sorted(set(raw) - set(DEFAULTS))
    if unknown:
        raise ConfigInvalid(f"unknown config keys: {', '.join(unknown)}")
    return raw


def _merge_config(ns: argparse.Namespace) -> dict:
    """defaults < config file < explicit command-line flags."""
    merged = dict(DEFAULTS)
    if getattr(ns, "config", None):
        merged.update(_load_config_file(ns.config))
    for key in DEFAULTS:
        value = getattr(ns, key, None)
        if value is not None:
            merged[key] = value
    if merged["out"] is None:
        merged["out"] = os.environ.get("FEDQ_OUT_DIR") or None
    return merged


def _require_out(merged: dict) -> str:
    out = merged["out"]
    if not out:
        raise ConfigInvalid("no output directory: pass --out or set FEDQ_OUT_DIR")
    os.makedirs(out, exist_ok=True)
    return out


def _canonical_strategy(name: str) -> str:
    name = _STRATEGY_ALIASES.get(name, name)
    if name not in orchestrator.STRATEGIES:
        raise ConfigInvalid(f"unknown strategy {name!r}; choose from "
                            f"{', '.join(_CLI_STRATEGIES)}")
    return name


def _run_config(merged: dict, strategy: str | None = None,
                select_n: int | None = None) -> RunConfig:
    grad_clip = merged["grad_clip"]
    return RunConfig(
        strategy=_canonical_strategy(strategy or merged["strategy"]),
        select_n=int(select_n if select_n is not None else merged["select_n"]),
        rounds=int(merged["rounds"]),
        mixtures=int(merged["mixtures"]),
        target_accuracy=float(merged["target_acc"]),
        seed=int(merged["seed"]),
        learner=LearnerConfig(
            hidden_units=int(merged["hidden_units"]),
            learning_rate=float(merged["learning_rate"]),
            local_steps=int(merged["local_steps"]),
            batch_size=int(merged["batch_size"]),
            seed=int(merged["seed"]),
            grad_clip=None if grad_clip is None else float(grad_clip),
        ),
        dqn=DqnConfig(
            gamma=float(merged["gamma"]),
            xi=float(merged["xi"]),
            q_learning_rate=float(merged["q_learning_rate"]),
            minibatch=int(merged["minibatch"]),
            capacity=int(merged["capacity"]),
            tau=float(merged["tau"]),
            q_hidden=int(merged["q_hidden"]),
            d_pca=int(merged["d_pca"]),
        ),
    )


def _write_json(path: str, payload: dict) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _write_metrics_csv(path: str, metrics) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["round", "accuracy", "tpr", "fpr", "elapsed_ms",
                         "cumulative_ms", "reward", "selected"])
        for m in metrics:
            writer.writerow([m.round_index, m.accuracy, m.tpr, m.fpr,
                             m.elapsed_ms, m.cumulative_ms, m.reward,
                             ";".join(str(i) for i in m.selected)])
    os.replace(tmp, path)


def _write_rounds_jsonl(path: str, metrics) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        for m in metrics:
            fh.write(json.dumps({
                "round": m.round_index,
                "accuracy": m.accuracy,
                "tpr": m.tpr,
                "fpr": m.fpr,
                "elapsed_ms": m.elapsed_ms,
                "cumulative_ms": m.cumulative_ms,
                "reward": m.reward,
                "selected": m.selected,
                "per_env_accuracy": m.per_env_accuracy,
            }, sort_keys=True))
            fh.write("\n")
    os.replace(tmp, path)


def _build_inputs(merged: dict) -> tuple[data.Dataset, np.ndarray, dict]:
    """Dataset, cluster ids, and provenance from either input mode."""
    root_seed = int(merged["seed"])
    if merged["synthetic"] is not None:
        spec_dict = dict(merged["synthetic"])
        spec_dict.setdefault("seed", root_seed)
        spec = data.synth_spec_from_dict(spec_dict)
        ds, clusters = data.synth_mixture(spec)
        provenance = {"kind": "synthetic", "synthetic": data.synth_spec_to_dict(spec)}
        return ds, clusters, provenance
    if not merged["dataset"] or not merged["schema"]:
        raise ConfigInvalid(
            "need --dataset and --schema (or a 'synthetic' config entry)")
    schema = data.load_schema(merged["schema"])
    load_seed = root_seed if merged["load_seed"] is None else int(merged["load_seed"])
    subsample = merged["subsample_rows"]
    subsample = None if subsample is None else int(subsample)
    ds = data.load_dataset(merged["dataset"], schema,
                           subsample_rows=subsample, seed=load_seed)
    clusters = data.cluster_dataset(ds, int(merged["clusters"]),
                                    split_seed(root_seed, "cluster"))
    provenance = {
        "kind": "csv",
        "dataset": merged["dataset"],
        "schema": merged["schema"],
        "schema_inline": schema,
        "subsample_rows": subsample,
        "load_seed": load_seed,
    }
    return ds, clusters, provenance


def cmd_partition(ns: argparse.Namespace) -> int:
    merged = _merge_config(ns)
    out = _require_out(merged)
    ds, clusters, provenance = _build_inputs(merged)
    pcfg = data.PartitionConfig(
        num_environments=int(merged["envs"]),
        num_clusters=int(clusters.max()) + 1,
        dirichlet_alpha=float(merged["alpha"]),
        train_fraction=float(merged["train_fraction"]),
        seed=int(merged["seed"]),
    )
    shards = data.partition_mixture(ds, clusters, pcfg)
    audit = data.audit_shards(shards)
    manifest = data.build_manifest(shards, provenance, pcfg)
    data.write_manifest(os.path.join(out, "manifest.json"), manifest)
    _write_json(os.path.join(out, "audit.json"), audit)
    _write_json(os.path.join(out, "resolved_config.json"), merged)

    sizes = sorted(e["n_train"] for e in audit["environments"])
    quantiles = np.quantile(sizes, [0.0, 0.25, 0.5, 0.75, 1.0])
    print(f"partitioned {ds.n} samples ({ds.rejected_rows} rejected rows) "
          f"into {len(shards)} environments")
    print("train-size histogram (min/p25/median/p75/max): "
          + "/".join(str(int(v)) for v in quantiles))
    print(f"environments with zero positive train samples: "
          f"{len(audit['zero_positive_train_envs'])}")
    if audit["repaired_envs"]:
        print(f"environments repaired from empty: {audit['repaired_envs']}")
    print(f"manifest written to {os.path.join(out, 'manifest.json')}")
    return EXIT_OK


def _load_shards(merged: dict) -> tuple[dict, data.Dataset, list[data.EnvironmentShard]]:
    manifest_path = merged["manifest"]
    if not manifest_path:
        raise ConfigInvalid("no manifest: pass --manifest or set it in the config file")
    manifest = data.read_manifest(manifest_path)
    ds = data.dataset_from_provenance(manifest["provenance"])
    shards = data.shards_from_manifest(manifest, ds)
    return manifest, ds, shards


def cmd_train(ns: argparse.Namespace) -> int:
    merged = _merge_config(ns)
    out = _require_out(merged)
    _, _, shards = _load_shards(merged)
    cfg = _run_config(merged)
    checkpoint_dir = os.path.join(out, "checkpoints")
    os.makedirs(checkpoint_dir, exist_ok=True)
    _write_json(os.path.join(out, "resolved_config.json"), merged)
    try:
        result = orchestrator.run(cfg, shards, checkpoint_dir=checkpoint_dir)
    except NumericalFailure as exc:
        _write_json(os.path.join(out, "error.json"), {
            "error": "numerical_failure",
            "message": str(exc),
            "round": exc.round_index,
        })
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL

    _write_metrics_csv(os.path.join(out, "metrics.csv"), result.metrics)
    _write_rounds_jsonl(os.path.join(out, "rounds.jsonl"), result.metrics)
    final = result.metrics[-1]
    _write_json(os.path.join(out, "summary.json"), {
        "strategy": result.config["strategy"],
        "label": cfg.label(),
        "rounds": cfg.rounds,
        "rounds_to_target": result.rounds_to_target,
        "max_accuracy": result.max_accuracy,
        "final_accuracy": final.accuracy,
        "final_tpr": final.tpr,
        "final_fpr": final.fpr,
        "total_virtual_ms": final.cumulative_ms,
        "wall_seconds": result.wall_seconds,
        "upload_events": result.upload_events,
        "num_environments": len(shards),
        "pca_rank_deficient": (result.projection.rank_deficient
                               if result.projection is not None else None),
        "config": result.config,
    })
    print(f"{cfg.label()}: max accuracy {result.max_accuracy:.4f}, "
          f"rounds_to_target {result.rounds_to_target}, "
          f"virtual ms {final.cumulative_ms:.3f}")
    print(f"outputs written to {out}")
    return EXIT_OK


def _parse_strategy_specs(merged: dict) -> list[tuple[str, int | None]]:
    """Strategy specs from the config list or a compact --strategy string.

    The compact form is comma-separated name[:N] entries, e.g.
    'fedq:30,random:30,full'.
    """
    specs: list[tuple[str, int | None]] = []
    if merged["strategies"]:
        for entry in merged["strategies"]:
            if isinstance(entry, str):
                specs.append(_split_compact(entry))
            elif isinstance(entry, dict):
                specs.append((str(entry.get("strategy", "")),
                              entry.get("select_n")))
            else:
                raise ConfigInvalid("strategies entries must be strings or objects")
    elif merged["strategy"] and "," in str(merged["strategy"]):
        for part in str(merged["strategy"]).split(","):
            specs.append(_split_compact(part.strip()))
    elif merged["strategy"]:
        specs.append(_split_compact(str(merged["strategy"])))
    return specs


def _split_compact(text: str) -> tuple[str, int | None]:
    if ":" in text:
        name, _, num = text.partition(":")
        try:
            return name, int(num)
        except ValueError as exc:
            raise ConfigInvalid(f"bad strategy spec {text!r}") from exc
    return text, None


def cmd_compare(ns: argparse.Namespace) -> int:
    merged = _merge_config(ns)
    out = _require_out(merged)
    _, _, shards = _load_shards(merged)
    specs = _parse_strategy_specs(merged)
    if len(specs) < 2:
        raise ConfigInvalid("compare needs at least two strategies, e.g. "
                            "--strategy fedq:30,random:30")
    configs = [_run_config(merged, strategy=name, select_n=n) for name, n in specs]
    _write_json(os.path.join(out, "resolved_config.json"), merged)
    rows, series = orchestrator.compare(configs, shards, int(merged["repeats"]))

    compare_path = os.path.join(out, "compare.csv")
    tmp = f"{compare_path}.tmp"
    fields = ["label", "repeats", "median_max_accuracy", "p25_max_accuracy",
              "p75_max_accuracy", "median_rounds_to_target",
              "p25_rounds_to_target", "p75_rounds_to_target",
              "median_ms_to_target", "p25_ms_to_target", "p75_ms_to_target"]
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for row in rows:
            writer.writerow([getattr(row, f) for f in fields])
    os.replace(tmp, compare_path)

    for label, per_round in series.items():
        series_path = os.path.join(out, f"series_{label}.csv")
        stmp = f"{series_path}.tmp"
        with open(stmp, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            for k, (acc, tpr, fpr) in enumerate(per_round):
                writer.writerow([k, acc, tpr, fpr])
        os.replace(stmp, series_path)

    print(f"{'label':<14} {'median_max_acc':>14} {'rounds_to_target':>17} "
          f"{'ms_to_target':>13}")
    for row in rows:
        print(f"{row.label:<14} {row.median_max_accuracy:>14.4f} "
              f"{row.median_rounds_to_target:>17.1f} {row.median_ms_to_target:>13.1f}")
    print(f"comparison written to {compare_path}")
    return EXIT_OK


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--out", help="output directory (default: $FEDQ_OUT_DIR)")
    p.add_argument("--seed", type=int, help="root seed for all randomness")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedq",
        description="Federated mixture training with learned environment selection")
    sub = parser.add_subparsers(dest="command", required=True)

    p_part = sub.add_parser("partition", help="partition a dataset into environments")
    _add_common(p_part)
    p_part.add_argument("--dataset", help="delimited text file with a header row")
    p_part.add_argument("--schema", help="JSON column schema for the dataset")
    p_part.add_argument("--subsample-rows", dest="subsample_rows", type=int,
                        help="reservoir-subsample the file to this many rows")
    p_part.add_argument("--envs", type=int, help="number of environments")
    p_part.add_argument("--clusters", type=int, help="number of k-means clusters")
    p_part.add_argument("--alpha", type=float, help="Dirichlet concentration")

    p_train = sub.add_parser("train", help="run one training strategy")
    _add_common(p_train)
    p_train.add_argument("--manifest", help="partition manifest to train on")
    p_train.add_argument("--strategy", choices=_CLI_STRATEGIES,
                         help="participation strategy")
    p_train.add_argument("--select-n", dest="select_n", type=int,
                         help="environments selected per round (fedq/random)")
    p_train.add_argument("--mixtures", type=int, help="number of component models")
    p_train.add_argument("--rounds", type=int, help="communication rounds after init")
    p_train.add_argument("--target-acc", dest="target_acc", type=float,
                         help="target accuracy for rewards and rounds-to-target")

    p_cmp = sub.add_parser("compare", help="run several strategies and summarize")
    _add_common(p_cmp)
    p_cmp.add_argument("--manifest", help="partition manifest to train on")
    p_cmp.add_argument("--strategy",
                       help="comma-separated specs, e.g. fedq:30,random:30,full")
    p_cmp.add_argument("--mixtures", type=int, help="number of component models")
    p_cmp.add_argument("--rounds", type=int, help="communication rounds after init")
    p_cmp.add_argument("--target-acc", dest="target_acc", type=float,
                       help="target accuracy for rounds-to-target")
    p_cmp.add_argument("--repeats", type=int, help="seeds per strategy")

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    handlers = {"partition": cmd_partition, "train": cmd_train, "compare": cmd_compare}
    try:
        return handlers[ns.command](ns)
    except (ConfigInvalid, InvalidSpec, SchemaMismatch, EmptyDataset,
            TooFewSamples, EmptyCluster) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileUnreadable, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericalFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except FedqError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
