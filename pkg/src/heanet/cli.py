"""Command-line interface: ``heanet <command> ...``.

Commands: ``sample``, ``train``, ``eval``, ``benchmark``,
``export-correlation``, ``export-stages`` and ``neighbors``.

Exit codes: 0 success, 1 runtime or data error, 2 usage or configuration
error. ``HEA_THREADS`` caps BLAS and worker threads.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from importlib import resources
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import ndtensor as nd
from .benchmark import BASELINES, ATTENTION, ALIASES, run_benchmark
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, document
from .data import load_split, resolve
from .downsample import Projections, correlation_matrix
from .exceptions import ArgumentError, ConfigError, HEAError, SizeError
from .model import forward
from .neighbors import embed, knn, neighbors_to_csv
from .ndtensor import Tensor
from .pcio import PointCloud, read_cloud, write_cloud
from .sampling import METHODS, init_sampler_weights, sample
from .train import TrainingDiverged, evaluate, fit

logger = logging.getLogger("heanet")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
CORRELATION_CAP = 2048
SHIPPED = ("toy_cls",)


class UsageError(ConfigError):
    """Bad flag combination detected after argument parsing."""


def _threads() -> Optional[int]:
    raw = os.environ.get("HEA_THREADS", "").strip()
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"HEA_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"HEA_THREADS must be a positive integer, got {raw!r}")
    return n


def checkpoint_path(name: str) -> str:
    """Resolve a shipped checkpoint name (e.g. ``toy_cls``) or return the path unchanged."""
    if name in SHIPPED and not Path(name).exists():
        return str(resources.files("heanet").joinpath("checkpoints").joinpath(f"{name}.heaw"))
    return name


# ------------------------------------------------------------------- sample
def cmd_sample(args) -> int:
    cloud = read_cloud(args.input)
    weights, k, embed_k, fusion = None, args.k, None, "shared_index"
    if args.weights and args.method in ("global", "local", "gld"):
        weights, spec, _ = load_checkpoint(checkpoint_path(args.weights))
        k = args.k if args.k is not None else spec.k
        embed_k, fusion = spec.k, spec.fusion
    sel = sample(cloud.points, args.method, args.m, k if k is not None else 16, args.seed, weights, fusion, embed_k)
    labels = None if cloud.per_point_labels is None else cloud.per_point_labels[sel.idx]
    write_cloud(PointCloud(cloud.points[sel.idx], labels, cloud.class_label, cloud.name), args.out)
    if args.export_scores:
        sel.to_csv(args.export_scores)
    print(f"{args.method}: kept {len(sel.idx)} of {len(cloud)} points -> {args.out}")
    return EXIT_OK


# -------------------------------------------------------------------- train
def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config, args.set or ())
    data = args.data or cfg["data"]
    if not data:
        raise UsageError("no data: pass --data or set 'data' in the config")
    cfg = cfg.replace(data=data)
    resolve(data)
    spec, tcfg = cfg.model_spec(), cfg.train_config()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "config.cfg")

    train = load_split(data, "train", spec.n_points, tcfg.seed)
    test = load_split(data, cfg["eval_split"], spec.n_points, tcfg.seed) if cfg["eval_split"] else None
    _check_label_space(train, spec)

    def progress(row):
        print(f"epoch {row['epoch']:>4}  lr {row['lr']:.3e}  loss {row['train_loss']:.4f}  "
              f"eval {row['eval_metric']:.4f}", flush=True)

    result = fit(train, spec, tcfg, test, out_dir=str(out), progress=progress)
    summary = {"epochs": tcfg.epochs, "final_train_loss": result.history[-1]["train_loss"]}
    for name, weights in (("best", result.best_weights), ("last", result.weights)):
        meta = {"data": data, "config": "config.cfg"}
        if test is not None:
            metrics = evaluate(weights, test, spec, tcfg.batch)
            meta.update(split=cfg["eval_split"], metrics={k: v for k, v in metrics.items() if k != "loss"})
            summary[name] = meta["metrics"]
        save_checkpoint(out / f"{name}.heaw", weights, spec, meta)
    (out / "metrics.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"wrote {out / 'best.heaw'}, {out / 'last.heaw'}, {out / 'train_log.csv'}")
    return EXIT_OK


def _check_label_space(ds, spec) -> None:
    if spec.task == "classification" and len(ds.class_names) > spec.num_classes:
        raise ConfigError(f"data has {len(ds.class_names)} classes but num_classes = {spec.num_classes}")
    if spec.task == "segmentation":
        top = max(int(c.per_point_labels.max()) for c in ds.clouds if c.per_point_labels is not None)
        if top >= spec.num_parts:
            raise ConfigError(f"data has part label {top} but num_parts = {spec.num_parts}")


# --------------------------------------------------------------------- eval
def cmd_eval(args) -> int:
    path = checkpoint_path(args.weights)
    weights, spec, meta = load_checkpoint(path)
    if args.task and args.task != spec.task:
        raise UsageError(f"--task {args.task} does not match the checkpoint's {spec.task} model")
    data = args.data or meta.get("data")
    if not data:
        raise UsageError("no data: pass --data (the checkpoint records none)")
    split = args.split or meta.get("split", "test")
    ds = load_split(data, split, spec.n_points, args.seed)
    _check_label_space(ds, spec)
    metrics = evaluate(weights, ds, spec, args.batch)
    if spec.task == "classification":
        names = [("accuracy", "Acc")]
    else:
        names = [("ins_miou", "Ins.mIoU"), ("cat_miou", "Cat.mIoU")]
    recorded = meta.get("metrics", {}) if meta.get("data") == data and meta.get("split", "test") == split else {}
    for key, label in names:
        line = f"{label}: {metrics[key]!r}"
        if key in recorded:
            line += f"  (recorded {recorded[key]!r}, {'match' if recorded[key] == metrics[key] else 'MISMATCH'})"
        print(line)
    return EXIT_OK


# ---------------------------------------------------------------- benchmark
def cmd_benchmark(args) -> int:
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    try:
        m_list = [int(m) for m in args.m_list.split(",") if m.strip()]
    except ValueError:
        raise UsageError(f"--m-list must be comma-separated integers, got {args.m_list!r}") from None
    if not methods or not m_list:
        raise UsageError("--methods and --m-list must be non-empty")
    weights = spec = None
    if args.weights:
        weights, spec, _ = load_checkpoint(checkpoint_path(args.weights))
    resolve(args.data)
    train = load_split(args.data, "train", args.points, args.seed)
    test = load_split(args.data, "test", args.points, args.seed)
    result = run_benchmark(train, test, methods, m_list, args.seeds, weights, spec, threads=_threads())
    table = result.table()
    print(table)
    print(f"full-cloud accuracy {result.full_accuracy:.4f}; {result.seeds} seeds")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    result.csv(out)
    out.with_suffix(".txt").write_text(table + "\n")
    return EXIT_OK


# ------------------------------------------------------- export-correlation
def cmd_export_correlation(args) -> int:
    cloud = read_cloud(args.input)
    n = len(cloud)
    if n > args.cap:
        raise SizeError(f"N={n} exceeds the correlation export cap {args.cap}; the dump would need "
                        f"{8 * n * n} bytes")
    if n < 3:
        raise ArgumentError("correlation export needs at least 3 points")
    if args.weights:
        weights, spec, _ = load_checkpoint(checkpoint_path(args.weights))
        embed_k = spec.k
    else:
        weights, embed_k = init_sampler_weights(args.seed), args.k
    k = min(args.k, n - 1)
    embed_k = min(embed_k, n - 1)
    pts = cloud.points[None]
    rng = np.random.default_rng(args.seed)
    dtype = next(iter(weights.params.values())).dtype
    with nd.no_grad():
        nbr = knn(pts, embed_k).idx
        feats = embed(Tensor(np.transpose(pts, (0, 2, 1)).astype(dtype)), weights, embed_k, rng, local_index=nbr)
    corr = correlation_matrix(feats, cloud.points, k, Projections.from_weights(weights, "stage1.global"),
                              Projections.from_weights(weights, "stage1.local"), cap=args.cap,
                              nbr=nbr if k == embed_k else None)
    corr.save(args.out)
    g, l = corr.row_sums()
    summary = (f"N={n} K={k} file={args.out} bytes={os.path.getsize(args.out)}\n"
               f"global row sums: min {g.min():.8f} max {g.max():.8f} max|1-s| {np.abs(1 - g).max():.3e}\n"
               f"local  row sums: min {l.min():.8f} max {l.max():.8f} max|1-s| {np.abs(1 - l).max():.3e}\n")
    Path(str(args.out) + ".summary.txt").write_text(summary)
    print(summary, end="")
    return EXIT_OK


# ------------------------------------------------------------ export-stages
def cmd_export_stages(args) -> int:
    weights, spec, _ = load_checkpoint(checkpoint_path(args.weights))
    cloud = read_cloud(args.input)
    if len(cloud) != spec.n_points:
        rng = np.random.default_rng(args.seed)
        cloud = PointCloud(cloud.points[np.sort(rng.choice(len(cloud), spec.n_points, len(cloud) < spec.n_points))])
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with nd.no_grad():
        result = forward(cloud.points[None], spec, weights, training=False)
    for level, coords in enumerate(result.coords):
        write_cloud(PointCloud(coords[0]), out / f"stage{level}.xyz")
    for s, (sel, absolute) in enumerate(zip(result.selections, result.absolute_indices), start=1):
        sel.to_csv(out / f"stage{s}_scores.csv")
        np.savetxt(out / f"stage{s}_indices.csv", absolute[0], fmt="%d", header="input_index", comments="")
    sizes = " -> ".join(str(c.shape[1]) for c in result.coords)
    print(f"wrote {len(result.coords)} levels ({sizes}) to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- neighbors
def cmd_neighbors(args) -> int:
    cloud = read_cloud(args.input)
    table = knn(cloud.points, args.k, args.method).idx
    neighbors_to_csv(table, args.out)
    print(f"wrote {table.shape[0]} x {table.shape[1]} neighbor table to {args.out}")
    return EXIT_OK


# ------------------------------------------------------------------- parser
class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse's own exit code is already 2; keep the message format
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="heanet", description="Edge-aware point cloud sampling, training and evaluation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("sample", help="downsample one point cloud")
    s.add_argument("--input", required=True, help="OFF, XYZ or BIN cloud")
    s.add_argument("--method", required=True, choices=METHODS)
    s.add_argument("--m", type=int, required=True, help="points to keep")
    s.add_argument("--k", type=int, default=None, help="local neighborhood size (default 16 or the checkpoint's)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--weights", help="checkpoint for the attention samplers (default: frozen random weights)")
    s.add_argument("--out", required=True, help="output cloud; .bin writes HEAP0001, anything else XYZ")
    s.add_argument("--export-scores", metavar="CSV", help="write index,score,selected for every input point")
    s.set_defaults(func=cmd_sample)

    t = sub.add_parser("train", help="train a model from a run configuration",
                       epilog="configuration keys:\n" + document(), formatter_class=argparse.RawDescriptionHelpFormatter)
    t.add_argument("--config", required=True, help="config file or preset name (toy_cls, toy_seg, paper)")
    t.add_argument("--data", help="dataset directory or synthetic description (overrides the config)")
    t.add_argument("--out-dir", required=True)
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--weights", required=True, help="checkpoint path or shipped name (toy_cls)")
    e.add_argument("--data", help="dataset (default: the one recorded with the checkpoint)")
    e.add_argument("--task", choices=("classification", "segmentation"))
    e.add_argument("--split", choices=("train", "test"))
    e.add_argument("--batch", type=int, default=16)
    e.add_argument("--seed", type=int, default=0, help="resampling seed for directory data")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("benchmark", help="task accuracy of samplers across sample counts")
    b.add_argument("--data", default="synthetic")
    b.add_argument("--methods", default="rs,fps,voxel,gld-frozen",
                   help="comma list from " + ",".join(BASELINES + ATTENTION + tuple(ALIASES)))
    b.add_argument("--m-list", default="128,64,32")
    b.add_argument("--out", required=True, help="CSV path; the aligned table goes next to it as .txt")
    b.add_argument("--weights", help="checkpoint for the *-trained methods")
    b.add_argument("--seeds", type=int, default=20)
    b.add_argument("--points", type=int, default=1024, help="resampled size for directory data")
    b.add_argument("--seed", type=int, default=0, help="resampling seed for directory data")
    b.set_defaults(func=cmd_benchmark)

    c = sub.add_parser("export-correlation", help="dump the N x 2N global/local attention matrix")
    c.add_argument("--input", required=True)
    c.add_argument("--k", type=int, default=16)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--weights", help="checkpoint (default: frozen random weights)")
    c.add_argument("--out", required=True)
    c.add_argument("--cap", type=int, default=CORRELATION_CAP, help="largest N accepted")
    c.set_defaults(func=cmd_export_correlation)

    x = sub.add_parser("export-stages", help="write the cloud kept at every encoder stage of a model")
    x.add_argument("--weights", required=True, help="checkpoint path or shipped name (toy_cls)")
    x.add_argument("--input", required=True)
    x.add_argument("--out-dir", required=True)
    x.add_argument("--seed", type=int, default=0, help="resampling seed when N differs from the model's")
    x.set_defaults(func=cmd_export_stages)

    n = sub.add_parser("neighbors", help="export the k-nearest-neighbor table as CSV")
    n.add_argument("--input", required=True)
    n.add_argument("--k", type=int, default=16)
    n.add_argument("--method", choices=("brute", "kdtree"), default="kdtree")
    n.add_argument("--out", required=True)
    n.set_defaults(func=cmd_neighbors)
    return p


def _run(args) -> int:
    threads = _threads()
    if threads is None:
        return args.func(args)
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=threads):
        return args.func(args)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return _run(args)
    except ConfigError as exc:  # includes UsageError
        print(f"heanet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ArgumentError as exc:
        print(f"heanet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (HEAError, OSError, TrainingDiverged) as exc:
        print(f"heanet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
