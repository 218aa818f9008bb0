"""Command-line entry points: train, evaluate, extract, ablate.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

import argparse
import csv
import io
import itertools
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import config as C
from .data import AugmentConfig, DataError, PkBatchSpec, ingest_dataset
from .evaluation import evaluate, extract_dataset_features, metrics_dict, pairwise_distances
from .model import BCOSNet
from .training import (
    CheckpointError,
    NumericError,
    Trainer,
    check_checkpoint,
    fit,
    load_checkpoint,
    set_determinism,
)

log = logging.getLogger("bcosnet")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4

SNAPSHOT_NAME = "config.snapshot"
METRICS_NAME = "metrics.json"

# row label -> overrides, in the order the ablation tables list them
ABLATION_GRIDS = {
    "table2": [
        ("local-global", {"branches": "local,global"}),
        ("local-global-OvR", {"branches": "local,global,ovr"}),
        ("local-global-gcp", {"branches": "local,global,gcp"}),
        ("local-global-gcp-OvR", {"branches": "local,global,gcp,ovr"}),
    ],
    "table3": [
        ("w/o-GeM", {"gem.enabled": "false"}),
        ("w-GeM", {"gem.enabled": "true"}),
    ],
    "table4": [
        ("f6+f4+f2", {"ovr_splits": "6,4,2"}),
        ("f6", {"ovr_splits": "6"}),
    ],
    "table5": [
        ("BC-OSNet", {"bdb.enabled": "false", "gcd.enabled": "false"}),
        ("+GCDropout+BDB", {"bdb.enabled": "true", "gcd.enabled": "true"}),
    ],
}


def load_data(cfg):
    layout = cfg["data.layout"]
    if layout != "synthetic" and not cfg["data.root"]:
        raise DataError(f"data.root is not set; pass --set data.root=PATH or export {C.DATA_ROOT_ENV}")
    synth = {
        "num_ids": cfg["data.synth.num_ids"],
        "imgs_per_id": cfg["data.synth.imgs_per_id"],
        "eval_per_id": cfg["data.synth.eval_per_id"],
        "seed": cfg["data.synth.seed"],
        "noise": cfg["data.synth.noise"],
        "tint": cfg["data.synth.tint"],
    }
    return ingest_dataset(cfg["data.root"], layout, cfg["data.height"], cfg["data.width"], synth=synth)


def build_model(cfg, num_classes):
    return BCOSNet(C.build_model_config(cfg, num_classes))


def run_evaluation(model, ds, cfg):
    q = extract_dataset_features(model, ds, ds.query, cfg["eval.batch_size"], cfg["eval.normalize"])
    g = extract_dataset_features(model, ds, ds.gallery, cfg["eval.batch_size"], cfg["eval.normalize"])
    dist = pairwise_distances(q, g, cfg["eval.distance"])
    result = evaluate(dist, [r.person_id for r in ds.query], [r.camera_id for r in ds.query],
                      [r.person_id for r in ds.gallery], [r.camera_id for r in ds.gallery])
    return metrics_dict(result, len(ds.query), len(ds.gallery), C.config_hash(cfg))


def cmd_train(config_path=None, overrides=None, run_dir="runs/latest", preset=None, resume=None,
              load_checkpoint_path=None, env=None):
    """Train per the resolved config; returns the run directory."""
    cfg = C.load_config(config_path, overrides, preset, env=os.environ if env is None else env)
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    text = C.dump_text(cfg)
    (run_dir / SNAPSHOT_NAME).write_text(text)

    set_determinism(cfg["seed"], cfg["deterministic"])
    ds = load_data(cfg)
    model = build_model(cfg, ds.num_train_pids)
    weights, triplet = C.build_loss_configs(cfg)
    trainer = Trainer(model, C.build_optim_config(cfg), weights, triplet,
                      triplet_branches=cfg["loss.triplet_branches"], center_branches=cfg["loss.center_branches"],
                      center_lr=cfg["loss.center_lr"], seed=cfg["seed"])
    if resume:
        trainer.load_state_dict(load_checkpoint(resume))
    elif load_checkpoint_path:
        state = load_checkpoint(load_checkpoint_path)
        check_checkpoint(state, model)
        model.load_state_dict(state["model"])

    aug = None
    if cfg["augment.enabled"]:
        aug = AugmentConfig(cfg["augment.flip_prob"], cfg["augment.erase_prob"], cfg["augment.erase_area"],
                            cfg["augment.erase_aspect"], cfg["augment.erase_fill"])
    fit(trainer, ds, PkBatchSpec(cfg["data.P"], cfg["data.K"]), aug, run_dir=run_dir,
        max_steps=cfg["train.max_steps"], eval_interval=cfg["eval.interval"],
        eval_fn=lambda m: run_evaluation(m, ds, cfg), checkpoint_interval=cfg["train.checkpoint_interval"],
        config_text=text)
    metrics = run_evaluation(model, ds, cfg)
    (run_dir / METRICS_NAME).write_text(json.dumps(metrics, indent=2))
    log.info("mAP %.4f rank-1 %.4f", metrics["mAP"], metrics["cmc"][0])
    return run_dir


def _config_for_checkpoint(state, config_path, overrides, env):
    layers = []
    if state.get("config"):
        layers.append(C.parse_text(state["config"]))
    if config_path:
        layers.append(C.parse_text(Path(config_path).read_text()))
    layers.append(C.parse_overrides(overrides))
    return C.resolve(*layers, env=env)


def _model_from_checkpoint(checkpoint, config_path, overrides, env):
    state = load_checkpoint(checkpoint)
    cfg = _config_for_checkpoint(state, config_path, overrides, os.environ if env is None else env)
    ds = load_data(cfg)
    model = build_model(cfg, state["num_classes"])
    check_checkpoint(state, model)
    model.load_state_dict(state["model"])
    model.eval()
    return model, ds, cfg


def cmd_evaluate(checkpoint, config_path=None, overrides=None, out=None, env=None):
    """Evaluate a checkpoint; writes and returns the metrics dict."""
    model, ds, cfg = _model_from_checkpoint(checkpoint, config_path, overrides, env)
    metrics = run_evaluation(model, ds, cfg)
    out = Path(out) if out else Path(checkpoint).resolve().parent.parent / METRICS_NAME
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(metrics, indent=2))
    return metrics


def cmd_extract(checkpoint, out, split="query", config_path=None, overrides=None, env=None):
    model, ds, cfg = _model_from_checkpoint(checkpoint, config_path, overrides, env)
    records = getattr(ds, split)
    feats = extract_dataset_features(model, ds, records, cfg["eval.batch_size"], cfg["eval.normalize"])
    np.savez(out, features=feats, person_ids=np.array([r.person_id for r in records]),
             camera_ids=np.array([r.camera_id for r in records]), paths=np.array([r.path for r in records]))
    return feats


def parse_axes(axes):
    """``["k=v1|v2", "k2=a|b"]`` -> Cartesian list of (label, overrides)."""
    if not axes:
        return []
    parsed = []
    for axis in axes:
        if "=" not in axis:
            raise C.ConfigError(f"grid axis {axis!r} is not of the form key=v1|v2")
        k, vals = axis.split("=", 1)
        parsed.append([(k.strip(), v.strip()) for v in vals.split("|") if v.strip()])
    cells = []
    for combo in itertools.product(*parsed):
        cells.append((", ".join(f"{k}={v}" for k, v in combo), dict(combo)))
    return cells


def format_table(rows, fmt="markdown"):
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["variant", "mAP", "rank-1", "status"])
        for r in rows:
            w.writerow([r["variant"], r.get("mAP", ""), r.get("rank1", ""), r["status"]])
        return buf.getvalue()
    lines = ["| variant | mAP | rank-1 | status |", "|---|---|---|---|"]
    for r in rows:
        m = f"{100 * r['mAP']:.1f}" if "mAP" in r else "-"
        r1 = f"{100 * r['rank1']:.1f}" if "rank1" in r else "-"
        lines.append(f"| {r['variant']} | {m} | {r1} | {r['status']} |")
    return "\n".join(lines) + "\n"


def cmd_ablate(config_path=None, grid=None, overrides=None, out_dir="runs/ablation", preset=None, env=None):
    """Train and evaluate each grid cell in turn; a failed cell does not stop the rest."""
    if isinstance(grid, str):
        if grid not in ABLATION_GRIDS:
            raise C.ConfigError(f"unknown grid {grid!r}; choose from {sorted(ABLATION_GRIDS)}")
        cells = ABLATION_GRIDS[grid]
    else:
        cells = parse_axes(grid or [])
    if not cells:
        raise C.ConfigError("ablation grid is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, (label, cell) in enumerate(cells):
        cell_overrides = list(overrides or []) + [f"{k}={v}" for k, v in cell.items()]
        try:
            run = cmd_train(config_path, cell_overrides, out_dir / f"cell_{i:02d}", preset=preset, env=env)
            metrics = json.loads((run / METRICS_NAME).read_text())
            rows.append({"variant": label, "mAP": metrics["mAP"], "rank1": metrics["cmc"][0], "status": "ok"})
        except Exception as e:  # one broken cell must not abort the grid
            log.exception("ablation cell %r failed", label)
            rows.append({"variant": label, "status": f"failed: {type(e).__name__}: {e}"})
    (out_dir / "table.md").write_text(format_table(rows))
    (out_dir / "table.csv").write_text(format_table(rows, "csv"))
    return rows


def _add_config_args(p, preset=True):
    p.add_argument("--config", help="flat 'key = value' config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    if preset:
        p.add_argument("--preset", choices=["synthetic"], help="start from a built-in preset")


def build_parser():
    parser = argparse.ArgumentParser(prog="bcosnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    _add_config_args(p)
    p.add_argument("--run-dir", default="runs/latest")
    p.add_argument("--resume", help="continue from a training checkpoint")
    p.add_argument("--load-checkpoint", help="initialise weights from a checkpoint")

    p = sub.add_parser("evaluate", help="evaluate a checkpoint")
    _add_config_args(p, preset=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--distance", choices=["euclidean", "cosine"])
    p.add_argument("--out", help="metrics JSON path (default: <run>/metrics.json)")

    p = sub.add_parser("extract", help="dump features of one split")
    _add_config_args(p, preset=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=["train", "query", "gallery"], default="query")
    p.add_argument("--out", required=True, help="output .npz")

    p = sub.add_parser("ablate", help="run an ablation grid")
    _add_config_args(p)
    p.add_argument("--grid", choices=sorted(ABLATION_GRIDS), help="built-in grid")
    p.add_argument("--axis", action="append", default=[], metavar="KEY=V1|V2",
                   help="custom grid axis (repeatable, Cartesian product)")
    p.add_argument("--out-dir", default="runs/ablation")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        if args.command == "train":
            run = cmd_train(args.config, args.overrides, args.run_dir, args.preset, args.resume,
                            args.load_checkpoint)
            print(Path(run, METRICS_NAME).read_text())
        elif args.command == "evaluate":
            overrides = list(args.overrides)
            if args.distance:
                overrides.append(f"eval.distance={args.distance}")
            print(json.dumps(cmd_evaluate(args.checkpoint, args.config, overrides, args.out), indent=2))
        elif args.command == "extract":
            feats = cmd_extract(args.checkpoint, args.out, args.split, args.config, args.overrides)
            print(f"wrote {feats.shape[0]} x {feats.shape[1]} features to {args.out}")
        else:
            grid = args.grid if args.grid else args.axis
            rows = cmd_ablate(args.config, grid, args.overrides, args.out_dir, args.preset)
            print(format_table(rows), end="")
    except (C.ConfigError, CheckpointError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
