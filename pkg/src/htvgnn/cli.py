"""Command line entry point: ``htvgnn {prepare,dtw,train,eval,forecast,verify}``.

Human-readable tables go to stdout, logs to stderr, and machine artifacts
only to the paths named by flags.  Exit codes: 0 success, 1 user error,
2 internal error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import graphs as G
from .errors import ConfigError, HTVGNNError
from .model import ABLATIONS, HTVGNN, PRESETS, load_checkpoint, preset
from .trainer import (evaluate, format_table, predict, report_csv, train,
                      write_metric_log)

log = logging.getLogger("htvgnn")

CACHE_ENV = "HTVGNN_CACHE"
SPLITS = ("train", "val", "test")


class UsageError(HTVGNNError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------- cache helpers

def _cache_dir(arg) -> Path:
    path = arg or os.environ.get(CACHE_ENV)
    if not path:
        raise UsageError(f"no cache directory; pass --cache or set {CACHE_ENV}")
    return Path(path)


def _sha(*chunks) -> str:
    h = hashlib.sha256()
    for c in chunks:
        h.update(c if isinstance(c, bytes) else repr(c).encode())
    return h.hexdigest()


def _file_sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _parse_ratios(text: str):
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"--ratios expects comma-separated numbers, got {text!r}") from None
    if len(vals) != 3:
        raise UsageError(f"--ratios needs exactly three values (train,val,test), got {len(vals)}")
    return vals


def load_cache(cache: Path):
    """Dataset with fitted statistics, split objects, topology and metadata."""
    meta_path = cache / "meta.json"
    if not meta_path.exists():
        raise UsageError(f"no prepared data in {cache}; run `htvgnn prepare --cache {cache}` first")
    meta = json.loads(meta_path.read_text())
    values = D.read_packed(cache / "series.bin")
    if _sha(values.astype("<f8").tobytes()) != meta["series_sha256"]:
        raise UsageError(f"{cache}/series.bin does not match meta.json; rerun `htvgnn prepare`")
    ds = D.SeriesDataset(values, interval_minutes=meta["interval_minutes"],
                         start_day_of_week=meta["start_day_of_week"],
                         mean=np.array(meta["mean"]), std=np.array(meta["std"]))
    splits = {name: D.Split(name, lo, hi, D.window_anchors(lo, hi, meta["T"], meta["tau"]))
              for name, (lo, hi) in zip(SPLITS, meta["bounds"])}
    topo = D.read_packed(cache / "topology.bin")[:, :, 0]
    return ds, splits, topo, meta


# ---------------------------------------------------------------- commands

def cmd_prepare(args) -> int:
    cache = _cache_dir(args.cache)
    ratios = _parse_ratios(args.ratios)
    if args.synthetic:
        ds, g = D.synth_network(args.nodes, args.days, seed=args.seed, interval_minutes=args.interval)
        topo = g.a_topo
    else:
        if not args.data:
            raise UsageError("pass --data PATH or --synthetic")
        ds = D.load_series(args.data, layout=args.layout, channels=args.channels,
                           interval_minutes=args.interval, start_day_of_week=args.start_dow)
        if args.edges:
            topo = G.build_topology(G.read_edge_csv(args.edges), ds.n_nodes, directed=args.directed)
        else:
            log.warning("no --edges given; topology is the identity")
            topo = np.eye(ds.n_nodes)
    values = ds.values
    key = _sha(values.astype("<f8").tobytes(), topo.astype("<f8").tobytes(), ratios, args.T, args.tau,
               ds.interval_minutes, ds.start_day_of_week)
    meta_path = cache / "meta.json"
    if meta_path.exists() and json.loads(meta_path.read_text()).get("key") == key:
        print(f"cache hit: {cache} (key {key[:16]})")
        return 0

    splits = D.split_and_window(ds, ratios, args.T, args.tau)
    norm = ds.normalize(values)
    cache.mkdir(parents=True, exist_ok=True)
    D.write_packed(cache / "series.bin", values)
    D.write_packed(cache / "topology.bin", topo)
    for name, s in splits.items():
        D.write_packed(cache / f"{name}.bin", norm[s.start:s.stop])
    meta = {
        "key": key,
        "series_sha256": _sha(values.astype("<f8").tobytes()),
        "interval_minutes": ds.interval_minutes,
        "start_day_of_week": ds.start_day_of_week,
        "ratios": ratios, "T": args.T, "tau": args.tau,
        "mean": ds.mean.tolist(), "std": ds.std.tolist(),
        "bounds": [[s.start, s.stop] for s in splits.values()],
        "windows": {k: int(len(s.windows)) for k, s in splits.items()},
        "source": "synthetic" if args.synthetic else str(args.data),
    }
    meta_path.write_text(json.dumps(meta, indent=2) + "\n")
    print(f"prepared {ds.steps} steps x {ds.n_nodes} nodes x {ds.n_channels} channels into {cache}")
    for name, s in splits.items():
        print(f"  {name:<5} steps [{s.start}, {s.stop})  windows {len(s.windows)}")
    return 0


def _train_fraction(meta) -> float:
    return meta["bounds"][0][1] / meta["bounds"][-1][1]


def cmd_dtw(args) -> int:
    cache = _cache_dir(args.cache)
    ds, _, _, meta = load_cache(cache)
    a, path, hit = G.cached_pattern_graph(ds, cache, args.sparsity, _train_fraction(meta))
    edges = int(a.sum() - np.trace(a))
    print(f"{'cache hit' if hit else 'computed'}: {path} ({a.shape[0]}x{a.shape[1]}, {edges} off-diagonal edges)")
    return 0


def _resolve_config(args, ds, meta):
    overrides = {"T": meta["T"], "tau": meta["tau"], "samples_per_day": ds.samples_per_day,
                 "channels": ds.n_channels}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.sparsity is not None:
        overrides["sparsity"] = args.sparsity
    cfg = preset(args.preset, **overrides)
    if cfg.n_nodes != ds.n_nodes:
        raise ConfigError(f"preset {args.preset!r} is sized for {cfg.n_nodes} nodes but the prepared "
                          f"data has {ds.n_nodes}")
    return cfg


def cmd_train(args) -> int:
    from .plotting import learning_curve

    cache = _cache_dir(args.cache)
    ds, splits, topo, meta = load_cache(cache)
    cfg = _resolve_config(args, ds, meta)
    a_dtw, dtw_path, _ = G.cached_pattern_graph(ds, cache, cfg.sparsity, _train_fraction(meta))
    model = HTVGNN(cfg, G.GraphSet(topo, a_dtw), ds.mean, ds.std, ablation=args.ablation, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = train(model, ds, splits, epochs=cfg.epochs, seed=args.seed, patience=args.patience,
                out_dir=out, eval_every=args.eval_every)

    (out / "config.txt").write_text(cfg.to_text())
    write_metric_log(out / "metrics.csv", res.log)
    learning_curve(res.log, out / "learning_curve.png", title=f"{args.preset} / {args.ablation}")
    manifest = {
        "config": {k: v for k, v in (ln.split("=", 1) for ln in cfg.to_text().splitlines())},
        "preset": args.preset,
        "ablation": model.ablation.__dict__,
        "seed": args.seed,
        "cache": str(cache.resolve()),
        "hashes": {"series": meta["series_sha256"], "topology": _file_sha(cache / "topology.bin"),
                   "pattern_graph": _file_sha(dtw_path)},
        "best_epoch": res.state.best_epoch,
        "best_val_mae": res.state.best_val_mae,
        "artifacts": {k: str(out / k) for k in
                      ("checkpoint.bin", "config.txt", "metrics.csv", "learning_curve.png")},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"trained {model.ablation.name} seed {args.seed}: best val MAE {res.state.best_val_mae:.4f} "
          f"at epoch {res.state.best_epoch}; artifacts in {out}")
    return 0


def _load_run(args):
    if args.run:
        run = Path(args.run)
        ckpt = run / "checkpoint.bin"
        cache = args.cache or json.loads((run / "manifest.json").read_text())["cache"]
    else:
        if not args.checkpoint:
            raise UsageError("pass --run DIR or --checkpoint FILE")
        ckpt = Path(args.checkpoint)
        cache = args.cache
    if not ckpt.exists():
        raise UsageError(f"no checkpoint at {ckpt}; run `htvgnn train` first")
    model, _ = load_checkpoint(ckpt)
    ds, splits, _, meta = load_cache(_cache_dir(cache))
    if (model.cfg.T, model.cfg.tau, model.cfg.n_nodes) != (meta["T"], meta["tau"], ds.n_nodes):
        raise ConfigError("checkpoint shape does not match the prepared data")
    return model, ds, splits


def cmd_eval(args) -> int:
    from .plotting import horizon_errors

    model, ds, splits = _load_run(args)
    if not len(splits[args.split].windows):
        raise UsageError(f"the {args.split} split is shorter than T + tau and holds no windows")
    rep = evaluate(model, ds, splits[args.split].windows, horizon=args.horizon)
    print(format_table(rep, label="HTVGNN" if model.ablation.name == "full" else model.ablation.name))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.csv").write_text(report_csv(rep))
        horizon_errors(rep, out / "horizon_errors.png", ds.interval_minutes,
                       title=f"{args.split} split, {model.ablation.name}")
    return 0


def cmd_forecast(args) -> int:
    model, ds, splits = _load_run(args)
    anchors = splits[args.split].windows
    if not 0 <= args.index < len(anchors):
        raise UsageError(f"--index {args.index} outside 0..{len(anchors) - 1} for the {args.split} split")
    pred, _ = predict(model, ds, anchors[args.index:args.index + 1])
    D.write_packed(args.out, pred[0])
    print(f"wrote forecast {pred[0].shape} for window {args.index} (anchor step {anchors[args.index]}) to {args.out}")
    return 0


def cmd_verify(args) -> int:
    from .verify import SUITES

    names = list(SUITES) if args.suite == "all" else [args.suite]
    failed = 0
    for name in names:
        for chk in SUITES[name]():
            print(f"[{'PASS' if chk.passed else 'FAIL'}] {name}: {chk.name}  {chk.detail}".rstrip())
            failed += not chk.passed
    print(f"{failed} failure(s)")
    return 1 if failed else 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="htvgnn", description="Time-varying graph traffic forecasting")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("prepare", help="load, normalize, split and cache a series")
    s.add_argument("--data")
    s.add_argument("--synthetic", action="store_true", help="generate the synthetic 8-node network")
    s.add_argument("--layout", default="csv_grid", choices=["csv_grid", "packed_binary", "npz"])
    s.add_argument("--channels", type=int, default=1)
    s.add_argument("--interval", type=int, default=None, help="minutes per step")
    s.add_argument("--start-dow", type=int, default=0)
    s.add_argument("--edges", help="edge CSV: from,to,cost")
    s.add_argument("--directed", action="store_true")
    s.add_argument("--ratios", default="0.6,0.2,0.2")
    s.add_argument("--T", type=int, default=12)
    s.add_argument("--tau", type=int, default=12)
    s.add_argument("--nodes", type=int, default=8)
    s.add_argument("--days", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--cache")
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("dtw", help="build the DTW pattern graph")
    s.add_argument("--cache")
    s.add_argument("--sparsity", type=float, default=0.01)
    s.set_defaults(func=cmd_dtw)

    s = sub.add_parser("train", help="train a model on prepared data")
    s.add_argument("--cache")
    s.add_argument("--preset", default="synthetic", choices=sorted(PRESETS))
    s.add_argument("--ablation", default="full", choices=list(ABLATIONS))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--epochs", type=int)
    s.add_argument("--patience", type=int)
    s.add_argument("--eval-every", type=int, default=1)
    s.add_argument("--sparsity", type=float)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "score a checkpoint"),
                                 ("forecast", cmd_forecast, "forecast one window")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--run", help="training output directory")
        s.add_argument("--checkpoint")
        s.add_argument("--cache")
        s.add_argument("--split", default="test", choices=SPLITS)
        if name == "eval":
            s.add_argument("--horizon", default="cumulative", choices=["cumulative", "single"])
            s.add_argument("--out")
        else:
            s.add_argument("--index", type=int, required=True)
            s.add_argument("--out", required=True)
        s.set_defaults(func=func)

    s = sub.add_parser("verify", help="run self-check suites")
    s.add_argument("--suite", default="all", choices=["all", "gradcheck", "invariants", "oracles"])
    s.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        if getattr(args, "interval", 0) is None:
            args.interval = 15 if args.synthetic else 5
        return args.func(args)
    except HTVGNNError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
