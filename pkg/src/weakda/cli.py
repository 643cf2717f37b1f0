"""Batch experiment CLI: dataset generation, training, sweeps, evaluation, plots.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical abort
(non-finite loss during training). Every command writes a manifest capturing
the resolved configuration; feeding that manifest back through --config
reruns the command with identical outputs. Config files override flags.
"""

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__, nets, synthdata, trainer
from .losses import LossWeights
from .trainer import TrainAbortError, TrainConfig, RunRecord

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERIC = 2

SWEEP_PARAMS = ("T", "lambda_c", "lambda_adv", "points")


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_benchmark_flags(p):
    p.add_argument("--H", type=int, default=64)
    p.add_argument("--W", type=int, default=64)
    p.add_argument("--C", type=int, default=6)
    p.add_argument("--rarity", type=str, default=None,
                   help="comma-separated per-class appearance probabilities")
    p.add_argument("--n-source", type=int, default=500)
    p.add_argument("--n-target", type=int, default=500)
    p.add_argument("--n-val", type=int, default=100)


def _add_train_flags(p):
    p.add_argument("--mode", choices=trainer.MODES, default="source_only")
    p.add_argument("--T", type=float, default=None)
    p.add_argument("--lambda-c", type=float, default=None)
    p.add_argument("--lambda-adv", type=float, default=None)
    p.add_argument("--lambda-out", type=float, default=None)
    p.add_argument("--k", type=float, default=None)
    p.add_argument("--points", type=int, default=1)
    p.add_argument("--iters", type=int, default=4000)
    p.add_argument("--warmup", type=int, default=1000)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--lr-g", type=float, default=None)
    p.add_argument("--lr-d", type=float, default=None)
    p.add_argument("--eval-interval", type=int, default=500)
    p.add_argument("--n-eval", type=int, default=100)
    p.add_argument("--dropout", type=float, default=None)
    p.add_argument("--dataset", type=str, default=None,
                   help="train from an on-disk dataset instead of generating")
    p.add_argument("--config", type=str, default=None,
                   help="JSON config or manifest; its values override flags")


def build_parser():
    parser = _Parser(prog="weakda", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render both domains to disk")
    _add_benchmark_flags(g)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out-dir", type=str, required=True)

    t = sub.add_parser("train", help="train one configuration")
    _add_benchmark_flags(t)
    _add_train_flags(t)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out-dir", type=str, required=True)

    s = sub.add_parser("sweep", help="grid of full runs over one parameter")
    _add_benchmark_flags(s)
    _add_train_flags(s)
    s.add_argument("--param", choices=SWEEP_PARAMS, required=True)
    s.add_argument("--grid", type=str, required=True, help="comma-separated values")
    s.add_argument("--seeds", type=str, default="0", help="comma-separated seeds")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out-dir", type=str, required=True)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    e.add_argument("--checkpoint", type=str, required=True)
    e.add_argument("--dataset", type=str, required=True)
    e.add_argument("--split", type=str, default="target_val")
    e.add_argument("--limit", type=int, default=None, help="evaluate only the first N scenes")
    e.add_argument("--subset", type=str, default=None,
                   help="comma-separated class indices for the reduced-set mean")

    pl = sub.add_parser("plot", help="render figures from record files")
    pl.add_argument("records", nargs="+", type=str)
    pl.add_argument("--out-dir", type=str, required=True)
    return parser


# ---------------------------------------------------------------------------
# config resolution


def _parse_floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip() != ""]
    except ValueError as exc:
        raise UsageError(f"cannot parse number list {text!r}") from exc


def _benchmark_from_args(args, seed):
    kwargs = {"H": args.H, "W": args.W, "C": args.C, "seed": seed,
              "n_source": args.n_source, "n_target": args.n_target}
    if args.rarity is not None:
        kwargs["class_rarity"] = tuple(_parse_floats(args.rarity))
    return synthdata.BenchmarkSpec(**kwargs)


def _weights_from_args(args, mode):
    w = trainer.default_loss_weights(mode)
    updates = {}
    if args.lambda_c is not None:
        updates["lambda_c"] = args.lambda_c
    if args.lambda_adv is not None:
        updates["lambda_adv"] = args.lambda_adv
    if args.lambda_out is not None:
        updates["lambda_out"] = args.lambda_out
    if args.k is not None:
        updates["k"] = args.k
    if args.T is not None:
        updates["T"] = args.T
    return replace(w, **updates) if updates else w


def _train_config_from_args(args, seed):
    kwargs = {
        "mode": args.mode,
        "weights": _weights_from_args(args, args.mode),
        "points_per_class": args.points,
        "total_iters": args.iters,
        "warmup_iters": args.warmup,
        "batch_size": args.batch_size,
        "eval_interval": args.eval_interval,
        "n_eval": args.n_eval,
        "seed": seed,
    }
    if args.lr_g is not None:
        kwargs["lr_G"] = args.lr_g
    if args.lr_d is not None:
        kwargs["lr_D"] = args.lr_d
    if args.dropout is not None:
        kwargs["dropout_rate"] = args.dropout
    return TrainConfig(**kwargs)


def _resolve_train(args):
    """Flags -> (TrainConfig, BenchmarkSpec, dataset_root). A --config file
    overrides flags; an on-disk dataset pins the benchmark spec."""
    cfg = _train_config_from_args(args, args.seed)
    spec = _benchmark_from_args(args, args.seed)
    dataset_root = Path(args.dataset) if args.dataset else None
    if dataset_root is not None:
        spec, _ = synthdata.load_manifest(dataset_root)
    if args.config is not None:
        doc = json.loads(Path(args.config).read_text())
        if "config" in doc:
            cfg = trainer.config_from_dict(doc["config"])
        if "benchmark" in doc and dataset_root is None:
            bench = dict(doc["benchmark"])
            bench["class_rarity"] = tuple(bench["class_rarity"])
            spec = synthdata.BenchmarkSpec(**bench)
    return cfg, spec, dataset_root


def _write_manifest(out_dir, command, cfg, spec, artifacts, extra=None):
    manifest = {
        "command": command,
        "tool_version": __version__,
        "config": trainer._config_dict(cfg) if cfg is not None else None,
        "benchmark": asdict(spec) if spec is not None else None,
        "artifacts": artifacts,
    }
    if extra:
        manifest.update(extra)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args):
    spec = _benchmark_from_args(args, args.seed)
    out_dir = Path(args.out_dir)
    synthdata.dump_dataset(out_dir, spec, n_val=args.n_val)
    total = spec.n_source + spec.n_target + 2 * args.n_val
    print(f"wrote {total} scenes to {out_dir}")
    return EXIT_OK


def _run_and_save(cfg, spec, out_dir, dataset_root=None):
    out_dir.mkdir(parents=True, exist_ok=True)
    record, state = trainer.run_experiment(cfg, spec, dataset_root=dataset_root)
    record_path = out_dir / "record.jsonl"
    record.save(record_path)
    ckpt_path = out_dir / "checkpoint.npz"
    nets.save_checkpoint(ckpt_path, state.net_cfg, state.g, state.bank, state.dnet)
    return record, record_path, ckpt_path


def cmd_train(args):
    cfg, spec, dataset_root = _resolve_train(args)
    out_dir = Path(args.out_dir)
    record, record_path, ckpt_path = _run_and_save(cfg, spec, out_dir, dataset_root)
    _write_manifest(out_dir, "train", cfg, spec,
                    {"record": record_path.name, "checkpoint": ckpt_path.name})
    final = record.final
    print(f"mode={cfg.mode} final mIoU {100 * final['miou']:.2f}% "
          f"mIoU* {100 * final['miou_star']:.2f}%")
    return EXIT_OK


def _apply_sweep_value(cfg, param, value):
    if param == "T":
        return replace(cfg, weights=replace(cfg.weights, T=float(value)))
    if param == "lambda_c":
        return replace(cfg, weights=replace(cfg.weights, lambda_c=float(value)))
    if param == "lambda_adv":
        return replace(cfg, weights=replace(cfg.weights, lambda_adv=float(value)))
    if param == "points":
        return replace(cfg, points_per_class=int(value))
    raise UsageError(f"unknown sweep parameter {param!r}")


def _sweep_worker(payload):
    cfg = trainer.config_from_dict(payload["config"])
    bench = dict(payload["benchmark"])
    bench["class_rarity"] = tuple(bench["class_rarity"])
    spec = synthdata.BenchmarkSpec(**bench)
    out_dir = Path(payload["out_dir"])
    dataset_root = Path(payload["dataset"]) if payload["dataset"] else None
    record, _, _ = _run_and_save(cfg, spec, out_dir, dataset_root)
    return {
        "value": payload["value"],
        "seed": cfg.seed,
        "miou": record.final["miou"],
        "miou_star": record.final["miou_star"],
        "pseudo_recall_warmup": record.meta.get("warmup_pseudo_pr", {}).get("recall"),
    }


def cmd_sweep(args):
    grid = [v for v in args.grid.split(",") if v.strip() != ""]
    if not grid:
        raise UsageError("sweep grid is empty")
    seeds = [int(s) for s in args.seeds.split(",") if s.strip() != ""]
    if not seeds:
        raise UsageError("need at least one seed")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    jobs = []
    for value in grid:
        for seed in seeds:
            base_cfg, spec, dataset_root = _resolve_train(args)
            cfg = replace(base_cfg, seed=seed)
            spec = replace(spec, seed=seed) if dataset_root is None else spec
            cfg = _apply_sweep_value(cfg, args.param, value)
            run_dir = out_dir / "runs" / f"{args.param}_{value}_s{seed}"
            jobs.append({
                "config": trainer._config_dict(cfg),
                "benchmark": asdict(spec),
                "out_dir": str(run_dir),
                "dataset": str(dataset_root) if dataset_root else None,
                "value": float(value) if args.param != "points" else int(value),
            })

    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(_sweep_worker, jobs))
    else:
        results = [_sweep_worker(j) for j in jobs]

    by_value = {}
    for r in results:
        by_value.setdefault(r["value"], []).append(r)
    table_path = out_dir / "sweep.jsonl"
    with open(table_path, "w") as fh:
        meta = {"type": "meta", "param": args.param, "seeds": seeds,
                "grid": [j["value"] for j in jobs[::len(seeds)]],
                "tool_version": __version__}
        fh.write(json.dumps(meta, sort_keys=True) + "\n")
        for value in meta["grid"]:
            rows = by_value[value]
            entry = {
                "type": "point",
                "value": value,
                "median_miou": float(np.median([r["miou"] for r in rows])),
                "median_miou_star": float(np.median([r["miou_star"] for r in rows])),
                "median_pseudo_recall_warmup": _median_or_none(
                    [r["pseudo_recall_warmup"] for r in rows]),
                "per_seed": {str(r["seed"]): r["miou"] for r in rows},
            }
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    for value in meta["grid"]:
        rows = by_value[value]
        print(f"{args.param}={value}: median mIoU "
              f"{100 * float(np.median([r['miou'] for r in rows])):.2f}%")
    print(f"sweep table written to {table_path}")
    return EXIT_OK


def _median_or_none(values):
    vals = [v for v in values if v is not None]
    return float(np.median(vals)) if vals else None


def cmd_eval(args):
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise UsageError(f"checkpoint not found: {ckpt}")
    net_cfg, g, bank, dnet = nets.load_checkpoint(ckpt)
    root = Path(args.dataset)
    spec, _ = synthdata.load_manifest(root)
    if spec.C != net_cfg.num_classes:
        raise UsageError(f"dataset has {spec.C} classes but checkpoint expects "
                         f"{net_cfg.num_classes}")
    batch = synthdata.load_split(root, args.split)
    if args.limit is not None:
        batch = synthdata.SceneBatch(X=batch.X[:args.limit], Y=batch.Y[:args.limit])
    subset = ([int(s) for s in args.subset.split(",")] if args.subset
              else trainer.miou_star_subset(spec))
    result = trainer.segmentation_metrics(g, net_cfg, batch.X, batch.Y, subset)
    for c, iou in enumerate(result["per_class_iou"]):
        label = "undefined" if iou is None else f"{100 * iou:.2f}%"
        print(f"class {c}: IoU {label}")
    print(f"mIoU {100 * result['miou']:.2f}%  mIoU* {100 * result['miou_star']:.2f}% "
          f"(subset {sorted(subset)})")
    return EXIT_OK


def cmd_plot(args):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for rec_path in args.records:
        path = Path(rec_path)
        first = json.loads(path.read_text().splitlines()[0])
        if "param" in first:
            written.append(_plot_sweep(plt, path, out_dir))
        else:
            written.extend(_plot_record(plt, path, out_dir))
    for p in written:
        print(f"wrote {p}")
    return EXIT_OK


_SAVEFIG_KW = {"dpi": 100, "metadata": {"Software": "weakda"}}


def _plot_record(plt, path, out_dir):
    record = RunRecord.load(path)
    iters = [row["iteration"] for row in record.rows]
    mious = [100 * row["miou"] for row in record.rows]
    stem = path.stem

    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(iters, mious, marker="o")
    ax.set_xlabel("iteration")
    ax.set_ylabel("mIoU (%)")
    mode = record.meta.get("config", {}).get("mode", "?")
    ax.set_title(f"training curve ({mode})")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    curve = out_dir / f"{stem}_curve.png"
    fig.savefig(curve, **_SAVEFIG_KW)
    plt.close(fig)

    final = record.rows[-1]
    ious = [0.0 if v is None else 100 * v for v in final["per_class_iou"]]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar(range(len(ious)), ious)
    ax.set_xlabel("class")
    ax.set_ylabel("IoU (%)")
    ax.set_title(f"final per-class IoU ({mode})")
    fig.tight_layout()
    bars = out_dir / f"{stem}_per_class.png"
    fig.savefig(bars, **_SAVEFIG_KW)
    plt.close(fig)
    return [curve, bars]


def _plot_sweep(plt, path, out_dir):
    meta = None
    points = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: malformed record on line {lineno}") from exc
        if obj.get("type") == "meta":
            meta = obj
        elif obj.get("type") == "point":
            points.append(obj)
        else:
            raise ValueError(f"{path}: unknown record type on line {lineno}")
    if meta is None or not points:
        raise ValueError(f"{path}: not a sweep table")
    xs = [p["value"] for p in points]
    ys = [100 * p["median_miou"] for p in points]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(xs, ys, marker="o")
    ax.set_xlabel(meta["param"])
    ax.set_ylabel("median mIoU (%)")
    ax.set_title(f"sweep over {meta['param']}")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    out = out_dir / f"{path.stem}_sweep.png"
    fig.savefig(out, **_SAVEFIG_KW)
    plt.close(fig)
    return out


# ---------------------------------------------------------------------------


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        handler = {
            "generate": cmd_generate,
            "train": cmd_train,
            "sweep": cmd_sweep,
            "eval": cmd_eval,
            "plot": cmd_plot,
        }[args.command]
        return handler(args)
    except TrainAbortError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
