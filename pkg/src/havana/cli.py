"""Command-line entry point: ``havana <subcommand> [flags]``.

Every subcommand accepts ``--config FILE`` (UTF-8 JSON whose keys mirror the
flag names); explicit flags override values from the file. Exit codes: 0 on
success, 1 on usage or configuration errors, 2 on data or format errors.
"""

import argparse
import glob
import json
import os
import sys

import numpy as np

from . import cloud as cloudmod
from .clustering import kmeans, standardize_features
from .contrastive import STRATEGIES, MiningConfig
from .encoder import EncoderConfig
from .errors import ArgumentError, DataError, HavanaError
from .evaluation import confusion, error_map, format_metrics_csv, metrics
from .features import compute_features
from .synth import CLASS_NAMES, SceneSpec, synthesize
from .trainer import (
    TrainConfig,
    finetune,
    load_checkpoint,
    mining_stats,
    predict_with_voting,
    pretrain,
    save_checkpoint,
)

SUBCOMMANDS = ("synth", "features", "cluster", "pretrain", "finetune", "predict", "evaluate", "mine-stats")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _default_threads():
    try:
        return max(1, int(os.environ.get("HAVANA_THREADS", "1")))
    except ValueError:
        return 1


def _common(p, seed=True):
    p.add_argument("--config", help="JSON file with flag values")
    if seed:
        p.add_argument("--seed", type=int, default=0, help="seed for all randomness")
    p.add_argument("--threads", type=int, default=_default_threads(),
                   help="worker threads for intra-step parallelism (env HAVANA_THREADS)")


def _model_flags(p):
    p.add_argument("--radius", type=float, default=10.0, help="sphere radius in metres")
    p.add_argument("--grid", type=float, default=0.4, help="grid subsampling cell in metres (0 disables)")
    p.add_argument("--agg-k", type=int, default=16, help="pooling neighbours per point")
    p.add_argument("--widths", type=int, nargs="+", default=[32, 64, 64], help="encoder stage widths")
    p.add_argument("--no-intensity", action="store_true", help="drop the intensity input channel")
    p.add_argument("--no-returns", action="store_true", help="drop the return-count input channel")


def _feature_flags(p):
    p.add_argument("--neighbors", type=int, default=20, help="neighbourhood size for covariance features")
    p.add_argument("--center", choices=("medoid", "mean"), default="medoid", help="covariance centring point")


def _mining_flags(p, strategy_choices, strategy_default):
    p.add_argument("--strategy", choices=strategy_choices, default=strategy_default,
                   help="negative mining strategy")
    p.add_argument("--k", type=int, default=9, help="k-means clusters for pseudo labels")
    p.add_argument("--n-positive", type=int, default=4096, help="positive pairs per block pair")
    p.add_argument("--n-negative", type=int, default=2048, help="negative-mining anchors per block pair")
    p.add_argument("--t-p", type=float, default=0.2, help="positive margin")
    p.add_argument("--t-n", type=float, default=2.0, help="negative margin")


def _train_flags(p):
    p.add_argument("--epochs", type=int, default=1, help="training epochs")
    p.add_argument("--iters", type=int, default=200, help="iterations per epoch")
    p.add_argument("--batch", type=int, default=4, help="block pairs per optimizer step")
    p.add_argument("--lr", type=float, default=0.001, help="base learning rate")
    p.add_argument("--decay", type=float, default=0.98, help="learning-rate decay every 5 epochs")


def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="havana", description="Contrastive pre-training for point-cloud segmentation.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a labeled synthetic scene", formatter_class=fmt)
    _common(p)
    p.add_argument("--out", required=True, help="output havana-xyz file")
    p.add_argument("--manifest", help="object manifest path (default: <out>.manifest.txt)")
    p.add_argument("--extent", type=float, nargs=2, default=[50.0, 50.0], help="scene size in metres")
    p.add_argument("--density", type=float, default=10.0, help="points per square metre")
    p.add_argument("--buildings", type=int, default=4)
    p.add_argument("--poles", type=int, default=6)
    p.add_argument("--trees", type=int, default=8)
    p.add_argument("--cars", type=int, default=6)
    p.add_argument("--noise", type=float, default=0.03, help="surface jitter half-width in metres")

    p = sub.add_parser("features", help="per-point geometric features as CSV", formatter_class=fmt)
    _common(p, seed=False)
    p.add_argument("--in", dest="input", required=True, help="input havana-xyz file")
    p.add_argument("--out", required=True, help="output CSV")
    _feature_flags(p)

    p = sub.add_parser("cluster", help="k-means pseudo labels as CSV", formatter_class=fmt)
    _common(p)
    p.add_argument("--in", dest="input", required=True, help="input havana-xyz file")
    p.add_argument("--out", required=True, help="output CSV of point_index,cluster_id")
    p.add_argument("--centroids", help="centroid CSV (default: <out>.centroids.csv)")
    p.add_argument("--k", type=int, default=9, help="number of clusters")
    p.add_argument("--max-iter", type=int, default=100, help="Lloyd iteration cap")
    _feature_flags(p)

    p = sub.add_parser("pretrain", help="contrastive pre-training", formatter_class=fmt)
    _common(p)
    p.add_argument("--data", required=True, help="directory of havana-xyz files (or one file)")
    p.add_argument("--out", required=True, help="output checkpoint")
    _train_flags(p)
    _mining_flags(p, STRATEGIES, "abspan")
    _model_flags(p)
    _feature_flags(p)

    p = sub.add_parser("finetune", help="supervised fine-tuning", formatter_class=fmt)
    _common(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--init", help="pre-trained checkpoint")
    src.add_argument("--scratch", action="store_true", help="start from a fresh initialisation")
    p.add_argument("--data", required=True, help="labeled havana-xyz file (or directory)")
    p.add_argument("--out", required=True, help="output checkpoint")
    p.add_argument("--fraction", type=float, default=1.0, help="labeled fraction (spatial crop)")
    p.add_argument("--classes", type=int, help="number of classes (default: from labels)")
    p.add_argument("--freeze", action="store_true", help="train the head only")
    _train_flags(p)
    _model_flags(p)

    p = sub.add_parser("predict", help="voting inference", formatter_class=fmt)
    _common(p, seed=False)
    p.add_argument("--model", required=True, help="checkpoint with a head")
    p.add_argument("--in", dest="input", required=True, help="input havana-xyz file")
    p.add_argument("--out", required=True, help="output havana-xyz with predicted labels")
    p.add_argument("--votes", type=int, default=20, help="minimum predictions per point")

    p = sub.add_parser("evaluate", help="OA / F1 metrics and error map", formatter_class=fmt)
    _common(p, seed=False)
    p.add_argument("--pred", required=True, help="havana-xyz with predicted labels")
    p.add_argument("--truth", required=True, help="havana-xyz with true labels")
    p.add_argument("--out-dir", required=True, help="directory for metrics.csv and error_map.xyz")
    p.add_argument("--classes", type=int, help="number of classes (default: from labels)")

    p = sub.add_parser("mine-stats", help="compare negative mining strategies", formatter_class=fmt)
    _common(p, seed=False)
    p.add_argument("--data", required=True, help="labeled havana-xyz file")
    p.add_argument("--out", required=True, help="output CSV")
    p.add_argument("--seeds", type=int, default=10, help="number of seeds (0..n-1)")
    p.add_argument("--model", help="checkpoint providing encoder weights (default: fresh init per seed)")
    _mining_flags(p, ("both",) + STRATEGIES, "both")
    _model_flags(p)
    _feature_flags(p)
    return parser, sub.choices


def _parse(argv):
    parser, subparsers = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError(parser.format_usage() + "havana: error: a subcommand is required")
    if args.config:
        sp = subparsers[args.command]
        try:
            with open(args.config, encoding="utf-8") as fh:
                values = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(values, dict):
            raise UsageError("config file must hold a JSON object")
        dests = {a.dest for a in sp._actions}
        defaults = {}
        for key, value in values.items():
            dest = key.lstrip("-").replace("-", "_")
            if dest not in dests or dest in ("help", "config"):
                raise UsageError(f"unknown config key {key!r} for {args.command}")
            defaults[dest] = value
        sp.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


# ---------------------------------------------------------------------------
# config assembly


def _train_config(args, **extra):
    enc = EncoderConfig(
        block_widths=tuple(args.widths),
        aggregation_k=args.agg_k,
        use_intensity=not args.no_intensity,
        use_returns=not args.no_returns,
    )
    mining = {}
    if hasattr(args, "n_positive"):
        strategy = args.strategy if args.strategy in STRATEGIES else "abspan"
        mining = dict(mining=MiningConfig(args.n_positive, args.n_negative, args.t_p, args.t_n, strategy))
    kw = dict(
        seed=getattr(args, "seed", 0),
        radius=args.radius,
        grid_cell=args.grid if args.grid > 0 else None,
        encoder=enc,
        threads=args.threads,
        **mining,
    )
    if hasattr(args, "epochs"):
        kw.update(epochs=args.epochs, iterations_per_epoch=args.iters, batch_blocks=args.batch,
                  learning_rate=args.lr, decay_factor=args.decay)
    if hasattr(args, "neighbors"):
        kw.update(feature_neighbors=args.neighbors, feature_center=args.center)
    if hasattr(args, "k"):
        kw.update(n_clusters=args.k)
    kw.update(extra)
    return TrainConfig(**kw)


def _load_many(path):
    if os.path.isdir(path):
        files = sorted(glob.glob(os.path.join(path, "*.xyz")))
        if not files:
            raise DataError(f"no .xyz files in {path}")
    else:
        files = [path]
    return [cloudmod.load_cloud(f) for f in files]


def _write_csv(path, header, rows):
    lines = [",".join(header)] + [",".join(r) for r in rows]
    cloudmod.atomic_write(path, "\n".join(lines) + "\n")


def _g(v):
    return "undefined" if v is None else f"{v:.9g}"


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    spec = SceneSpec(
        extent=tuple(args.extent), density=args.density, n_buildings=args.buildings,
        n_poles=args.poles, n_trees=args.trees, n_cars=args.cars, noise_sigma=args.noise, seed=args.seed,
    )
    cloud, manifest = synthesize(spec)
    cloudmod.save_cloud(cloud, args.out)
    cloudmod.atomic_write(args.manifest or args.out + ".manifest.txt", manifest.to_text())


def cmd_features(args):
    if args.neighbors < 1:
        raise ArgumentError("--neighbors must be >= 1")
    cloud = cloudmod.load_cloud(args.input)
    if len(cloud) == 0:
        raise DataError("input cloud is empty")
    f = compute_features(cloud, neighbor_count=args.neighbors, center=args.center)
    rows = (
        (str(i), _g(f.planarity[i]), _g(f.surface_variation[i]), _g(f.verticality[i]), _g(f.normal_z_abs[i]))
        for i in range(len(f))
    )
    _write_csv(args.out, ("point_index", "planarity", "surface_variation", "verticality", "normal_z"), rows)


def cmd_cluster(args):
    if args.k < 1 or args.neighbors < 1:
        raise ArgumentError("--k and --neighbors must be >= 1")
    cloud = cloudmod.load_cloud(args.input)
    if len(cloud) < args.k:
        raise DataError(f"cloud has {len(cloud)} points, fewer than k={args.k}")
    f = compute_features(cloud, neighbor_count=args.neighbors, center=args.center)
    res = kmeans(standardize_features(f), args.k, args.max_iter, seed=args.seed)
    _write_csv(args.out, ("point_index", "cluster_id"),
               ((str(i), str(c)) for i, c in enumerate(res.assignment)))
    header = ("cluster_id", "planarity", "surface_variation", "verticality", "normal_z")
    _write_csv(args.centroids or args.out + ".centroids.csv", header,
               ((str(c),) + tuple(_g(v) for v in row) for c, row in enumerate(res.centroids)))


def cmd_pretrain(args):
    cfg = _train_config(args)
    clouds = _load_many(args.data)
    ckpt = pretrain(clouds, cfg)
    save_checkpoint(ckpt, args.out)


def cmd_finetune(args):
    cfg = _train_config(args, label_fraction=args.fraction, n_classes=args.classes, freeze_encoder=args.freeze)
    init = None
    if args.init:
        init = load_checkpoint(args.init)
        # the encoder architecture is whatever the checkpoint was trained with
        saved = init.train_config()
        cfg = TrainConfig(**{**cfg.__dict__, "encoder": saved.encoder})
    clouds = _load_many(args.data)
    save_checkpoint(finetune(init, clouds, cfg), args.out)


def cmd_predict(args):
    if args.votes < 1:
        raise ArgumentError("--votes must be >= 1")
    ckpt = load_checkpoint(args.model)
    cfg = ckpt.train_config()
    cfg.threads = args.threads
    cloud = cloudmod.load_cloud(args.input)
    pred = predict_with_voting(ckpt, cloud, args.votes, cfg)
    out = cloud.subset(np.arange(len(cloud)))
    out.labels = pred.labels.astype(np.int64)
    cloudmod.save_cloud(out, args.out)


def cmd_evaluate(args):
    pred = cloudmod.load_cloud(args.pred)
    truth = cloudmod.load_cloud(args.truth)
    if pred.labels is None or truth.labels is None:
        raise DataError("both files need a label column")
    if len(pred) != len(truth):
        raise DataError(f"size mismatch: {len(pred)} predicted points vs {len(truth)} labeled points")
    if len(truth) == 0:
        raise DataError("no points to evaluate")
    m = confusion(pred.labels, truth.labels, args.classes)
    met = metrics(m)
    os.makedirs(args.out_dir, exist_ok=True)
    names = CLASS_NAMES if len(met.f1) <= len(CLASS_NAMES) else None
    cloudmod.atomic_write(os.path.join(args.out_dir, "metrics.csv"), format_metrics_csv(met, names))
    cloudmod.save_cloud(error_map(pred.labels, truth.labels, truth), os.path.join(args.out_dir, "error_map.xyz"))


def cmd_mine_stats(args):
    if args.seeds < 1:
        raise ArgumentError("--seeds must be >= 1")
    cfg = _train_config(args)
    cloud = cloudmod.load_cloud(args.data)
    if cloud.labels is None:
        raise DataError("mine-stats needs a labeled cloud")
    work = cloudmod.grid_subsample(cloud, cfg.grid_cell) if cfg.grid_cell else cloud
    params = None
    if args.model:
        ckpt = load_checkpoint(args.model)
        params = ckpt.encoder
        cfg = TrainConfig(**{**cfg.__dict__, "encoder": ckpt.train_config().encoder})
    strategies = STRATEGIES if args.strategy == "both" else (args.strategy,)
    rows = []
    for seed in range(args.seeds):
        for r in mining_stats(work, seed, cfg, params, strategies):
            rows.append((r["strategy"], str(seed), str(r["n_valid"]),
                         _g(r["frac_same_true_label"]), _g(r["mean_neg_distance"])))
    _write_csv(args.out, ("strategy", "seed", "n_valid", "frac_same_true_label", "mean_neg_distance"), rows)


COMMANDS = {
    "synth": cmd_synth,
    "features": cmd_features,
    "cluster": cmd_cluster,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "mine-stats": cmd_mine_stats,
}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = _parse(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    try:
        COMMANDS[args.command](args)
    except (ArgumentError, UsageError) as exc:
        print(f"havana {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (DataError, OSError) as exc:
        print(f"havana {args.command}: {exc}", file=sys.stderr)
        return 2
    except HavanaError as exc:
        print(f"havana {args.command}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
