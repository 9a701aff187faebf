"""Experiment runner CLI.

Verbs:
  run        execute a configured federation run (one per seed) and write
             rounds.jsonl, summary.json, partition.json and checkpoints
  compare    align two or more completed run directories into CSV tables
  gen-world  export a generated synthetic world as a binary corpus
  cluster    compute client styles and write the selected partition only

Configs are TOML (or JSON; a summary.json works directly, its echoed
config is picked up), with an explicit schema-version key.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import numpy as np

from . import clustering, federation, formats, model, spectral, synthdata

SCHEMA_VERSION = 1

DEFAULT_CONFIG: dict = {
    "schema": SCHEMA_VERSION,
    "seeds": [0],
    "world": {
        "num_domains": 3,
        "clients_per_domain": 10,
        "images_per_client": [8, 24],
        "image_size": [32, 32],
        "num_classes": 5,
        "source_size": 60,
        "test_per_domain": 12,
        "noise_sigma": 0.02,
        "separation": 280.0,
    },
    "federation": {
        "rounds": 40,
        "clients_per_round": 5,
        "local_epochs": 1,
        "lr": 0.0125,
        "lr_schedule": "fixed",
        "lr_exponent": 0.5,
        "lambda_kd": 1.0,
        "teacher_period": 1,
        "swat_start": 24,
        "pretrain_steps": 3000,
        "pretrain_lr": 0.02,
        "pretrain_decay_steps": 300,
        "p_plain": 0.2,
        "conf_threshold": 0.95,
        "class_fraction": 0.5,
        "hidden": 8,
        "cluster_h_min": 2,
        "cluster_h_max": 9,
        "cluster_restarts": 10,
    },
    "toggles": {
        "fda_pretrain": True,
        "fda_window": 3,
        "self_training": True,
        "kd": True,
        "swat": True,
        "cluster_aggr": True,
        "cluster_groups": ["norm"],
    },
}

CLUSTER_GROUP_PRESETS = {
    "none": [],
    "bn": ["norm"],
    "norm": ["norm"],
    "backbone": ["backbone"],
    "classifier": ["classifier"],
    "all": ["backbone", "norm", "classifier"],
}


def _deep_update(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_update(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def load_config(path: str | Path | None) -> dict:
    """Defaults merged with a TOML/JSON config file (if given)."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is None:
        return cfg
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    if path.suffix == ".json":
        doc = json.loads(path.read_text())
        if "config" in doc and "schema" in doc.get("config", {}):
            doc = doc["config"]  # a summary.json: use its echoed config
    else:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    schema = doc.get("schema", SCHEMA_VERSION)
    if schema != SCHEMA_VERSION:
        raise ValueError(f"unsupported config schema {schema}, expected {SCHEMA_VERSION}")
    return _deep_update(cfg, doc)


def world_config(cfg: dict) -> synthdata.WorldConfig:
    w = cfg["world"]
    return synthdata.WorldConfig(
        num_domains=w["num_domains"],
        clients_per_domain=w["clients_per_domain"],
        images_per_client=tuple(w["images_per_client"]),
        image_size=tuple(w["image_size"]),
        num_classes=w["num_classes"],
        source_size=w["source_size"],
        test_per_domain=w["test_per_domain"],
        noise_sigma=w["noise_sigma"],
        separation=w["separation"],
    )


def federation_config(cfg: dict, seed: int) -> federation.FederationConfig:
    """Resolve toggles + federation section into a concrete FederationConfig."""
    f = cfg["federation"]
    t = cfg["toggles"]
    rounds = f["rounds"] if t["self_training"] else 0
    return federation.FederationConfig(
        rounds=rounds,
        clients_per_round=f["clients_per_round"],
        local_epochs=f["local_epochs"],
        lr=f["lr"],
        lr_schedule=f["lr_schedule"],
        lr_exponent=f["lr_exponent"],
        lambda_kd=f["lambda_kd"] if t["kd"] else 0.0,
        teacher_period=f["teacher_period"],
        swat_start=f["swat_start"] if t["swat"] else rounds + 1,
        cluster_groups=frozenset(t["cluster_groups"]) if t["cluster_aggr"] else frozenset(),
        pretrain_steps=f["pretrain_steps"],
        pretrain_lr=f["pretrain_lr"],
        pretrain_decay_steps=f["pretrain_decay_steps"],
        p_plain=f["p_plain"],
        conf_threshold=f["conf_threshold"],
        class_fraction=f["class_fraction"],
        style_window=t["fda_window"],
        fda_pretrain=t["fda_pretrain"],
        cluster_h_min=f["cluster_h_min"],
        cluster_h_max=f["cluster_h_max"],
        cluster_restarts=f["cluster_restarts"],
        arch=model.ArchConfig(
            in_channels=3, hidden=f["hidden"], classes=cfg["world"]["num_classes"]
        ),
        seed=seed,
    )


def _json_dumps(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True)


def _last_fraction_mious(records: list, final_miou: float, fraction: float = 0.1):
    if not records:
        return [final_miou]
    n = max(1, int(np.ceil(fraction * len(records))))
    return [r.miou for r in records[-n:]]


def run_experiment(cfg: dict, out_dir: str | Path) -> dict:
    """Execute one run per seed; write rounds.jsonl, summary.json,
    partition.json, timing.jsonl and per-cluster checkpoints. Returns the
    summary document."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    wcfg = world_config(cfg)
    seeds = list(cfg["seeds"])

    rounds_lines: list[str] = []
    timing_lines: list[str] = []
    per_seed = []
    last_result = None
    last_partition_json = None
    for seed in seeds:
        world = synthdata.build_world(wcfg, seed=seed)
        fcfg = federation_config(cfg, seed=seed)
        result = federation.run(fcfg, world)
        for rec in result.records:
            doc = {"seed": seed, **rec.to_public_dict()}
            rounds_lines.append(json.dumps(doc, sort_keys=True))
            timing_lines.append(
                json.dumps({"seed": seed, "round": rec.round, "wallclock_ms": rec.wallclock_ms})
            )
        tail = _last_fraction_mious(result.records, result.final_miou)
        per_seed.append(
            {
                "seed": seed,
                "miou": float(np.mean(tail)),
                "miou_last10_std": float(np.std(tail)),
                "final_miou": result.final_miou,
                "per_class_iou": result.final_per_class_iou,
            }
        )
        last_result = result
        last_partition_json = result.partition.to_json(
            h_range=(fcfg.cluster_h_min, fcfg.cluster_h_max), seeds=seeds
        )

    assert last_result is not None
    (out / "rounds.jsonl").write_text("\n".join(rounds_lines) + ("\n" if rounds_lines else ""))
    (out / "timing.jsonl").write_text("\n".join(timing_lines) + ("\n" if timing_lines else ""))
    (out / "partition.json").write_text(last_partition_json)
    for c in range(last_result.models.num_clusters):
        formats.save_checkpoint(out / f"cluster_{c}.ckpt", last_result.models.cluster_model(c))
    phi_slice = model.ParamSet(last_result.models.arch, dict(last_result.models.phi))
    formats.save_checkpoint(out / "global_phi.ckpt", phi_slice)

    mious = [p["miou"] for p in per_seed]
    per_class = np.nanmean([p["per_class_iou"] for p in per_seed], axis=0)
    summary = {
        "config": cfg,
        "per_seed": per_seed,
        "miou_mean": float(np.mean(mious)),
        "miou_std_over_seeds": float(np.std(mious)),
        "miou_last10_std_mean": float(np.mean([p["miou_last10_std"] for p in per_seed])),
        "per_class_iou_mean": [float(x) for x in per_class],
    }
    (out / "summary.json").write_text(_json_dumps(summary) + "\n")
    return summary


def _parse_ablation_value(key: str, raw: str):
    if key == "cluster_groups":
        if raw.lower() in CLUSTER_GROUP_PRESETS:
            return CLUSTER_GROUP_PRESETS[raw.lower()]
        return [g for g in raw.split("+") if g]
    if key == "fda_window":
        if raw.lower() == "none":
            return None
        return int(raw)
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            continue
    if raw.lower() in ("true", "false"):
        return raw.lower() == "true"
    return raw


def _apply_ablation(cfg: dict, key: str, value) -> dict:
    cfg = copy.deepcopy(cfg)
    if key == "cluster_groups":
        cfg["toggles"]["cluster_groups"] = value
        cfg["toggles"]["cluster_aggr"] = bool(value)
    elif key == "fda_window":
        if value is None:
            cfg["toggles"]["fda_pretrain"] = False
        else:
            cfg["toggles"]["fda_pretrain"] = True
            cfg["toggles"]["fda_window"] = value
    elif key in cfg["toggles"]:
        cfg["toggles"][key] = value
    elif key in cfg["federation"]:
        cfg["federation"][key] = value
    elif key in cfg["world"]:
        cfg["world"][key] = value
    else:
        raise KeyError(f"unknown ablation key {key!r}")
    return cfg


def cmd_run(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    if args.seed:
        cfg["seeds"] = [int(s) for s in args.seed.split(",")]
    out = Path(args.out) if args.out else Path("runs/run")
    if args.ablate:
        key, _, values = args.ablate.partition("=")
        if not values:
            print(f"error: --ablate expects KEY=V1,V2,..., got {args.ablate!r}", file=sys.stderr)
            return 2
        for raw in values.split(","):
            value = _parse_ablation_value(key, raw)
            sub_cfg = _apply_ablation(cfg, key, value)
            sub_out = out / f"{key}={raw}"
            summary = run_experiment(sub_cfg, sub_out)
            print(f"{sub_out}: mIoU {summary['miou_mean']:.4f} ± {summary['miou_std_over_seeds']:.4f}")
        return 0
    summary = run_experiment(cfg, out)
    print(f"{out}: mIoU {summary['miou_mean']:.4f} ± {summary['miou_std_over_seeds']:.4f}")
    return 0


def compare(run_dirs: list[str | Path], out_dir: str | Path) -> Path:
    """Aligned mIoU table + per-round learning curves for completed runs."""
    if len(run_dirs) < 2:
        raise ValueError("compare requires at least two run directories")
    rows = []
    curves: dict[str, dict[int, list[float]]] = {}
    for d in run_dirs:
        d = Path(d)
        summary_path = d / "summary.json"
        if not summary_path.exists():
            raise FileNotFoundError(f"missing summary.json in {d}")
        summary = json.loads(summary_path.read_text())
        rows.append((str(d), summary["miou_mean"], summary["miou_std_over_seeds"]))
        by_round: dict[int, list[float]] = {}
        rounds_path = d / "rounds.jsonl"
        if rounds_path.exists():
            for line in rounds_path.read_text().splitlines():
                rec = json.loads(line)
                by_round.setdefault(rec["round"], []).append(rec["miou"])
        curves[str(d)] = by_round

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = out / "compare.csv"
    with open(table, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run", "miou_mean", "miou_std_over_seeds"])
        writer.writerows(rows)
    all_rounds = sorted({r for c in curves.values() for r in c})
    with open(out / "curves.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["round"] + [name for name, _, _ in rows])
        for r in all_rounds:
            row = [r]
            for name, _, _ in rows:
                vals = curves[name].get(r)
                row.append(float(np.mean(vals)) if vals else "")
            writer.writerow(row)
    return table


def cmd_compare(args: argparse.Namespace) -> int:
    table = compare(args.run_dirs, args.out or ".")
    print(f"wrote {table}")
    return 0


def cmd_gen_world(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    seed = int(args.seed.split(",")[0]) if args.seed else cfg["seeds"][0]
    world = synthdata.build_world(world_config(cfg), seed=seed)
    manifest = formats.export_corpus(world, args.out or "world_corpus")
    print(f"wrote {manifest}")
    return 0


def cmd_cluster(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    seed = int(args.seed.split(",")[0]) if args.seed else cfg["seeds"][0]
    world = synthdata.build_world(world_config(cfg), seed=seed)
    l_s = cfg["toggles"]["fda_window"]
    points = []
    styles = {}
    for client in sorted(world.clients, key=lambda c: c.client_id):
        mean = spectral.mean_style([spectral.extract_style(img, l_s) for img in client.images])
        styles[client.client_id] = mean.values.tolist()
        points.append(clustering.StylePoint(client.client_id, mean.values))
    fcfg = federation_config(cfg, seed=seed)
    h_max = min(fcfg.cluster_h_max, len(points))
    part = clustering.select_clustering(
        points, m=fcfg.cluster_h_min, n=h_max, N=fcfg.cluster_restarts, base_seed=seed
    )
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    (out / "partition.json").write_text(
        part.to_json(h_range=(fcfg.cluster_h_min, h_max), seeds=[seed])
    )
    (out / "styles.json").write_text(_json_dumps(styles))
    print(f"wrote {out / 'partition.json'} (C={part.num_clusters}, silhouette={part.silhouette:.4f})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedstyle", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)

    def add_common(p):
        p.add_argument("--config", help="TOML or JSON config file")
        p.add_argument("--seed", help="comma-separated seed list override")
        p.add_argument("--out", help="output directory")

    p_run = sub.add_parser("run", help="execute a federation experiment")
    add_common(p_run)
    p_run.add_argument("--ablate", help="KEY=V1,V2,... run one experiment per value")
    p_run.set_defaults(func=cmd_run)

    p_cmp = sub.add_parser("compare", help="tabulate completed runs")
    p_cmp.add_argument("run_dirs", nargs="+", help="completed run directories")
    p_cmp.add_argument("--out", help="output directory for CSVs")
    p_cmp.set_defaults(func=cmd_compare)

    p_gen = sub.add_parser("gen-world", help="export a synthetic world corpus")
    add_common(p_gen)
    p_gen.set_defaults(func=cmd_gen_world)

    p_clu = sub.add_parser("cluster", help="styles -> partition.json only")
    add_common(p_clu)
    p_clu.set_defaults(func=cmd_cluster)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
