"""Command line entry point: ``agcrn <command> [options]``.

Exit codes: 0 success, 1 runtime or numerical failure, 2 configuration or
I/O error.
"""
from __future__ import annotations

import argparse
import configparser
import io
import json
import logging
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import data as D
from . import graph as G
from .model import ConfigError, ModelConfig, build, count_params, load_checkpoint, save_checkpoint
from .numerics import NonFiniteError, finite_difference_check, make_rng, mean_all, op
from .training import TrainConfig, TrainingError, l1_loss, predict_windows, train

log = logging.getLogger("agcrn")

GRADCHECK_LIMIT = 10_000


class UsageError(Exception):
    """Bad configuration or unreadable input (exit code 2)."""


@dataclass
class RunConfig:
    # [data]
    data: str = ""
    graph: str = ""
    steps_per_day: int = 288
    out: str = "runs/agcrn"
    # [model]
    nodes: int = 0
    input_dim: int = 1
    variant: str = "agcrn"
    dagg_variant: str = "dagg_1"
    embed_dim: int = 10
    hidden: int = 64
    layers: int = 2
    horizon: int = 12
    lookback: int = 12
    # [train]
    lr: float = 0.003
    batch_size: int = 64
    epochs: int = 100
    patience: int = 15
    seed: int = 0

    SECTIONS = {
        "data": ("data", "graph", "steps_per_day", "out"),
        "model": ("nodes", "input_dim", "variant", "dagg_variant", "embed_dim", "hidden", "layers",
                  "horizon", "lookback"),
        "train": ("lr", "batch_size", "epochs", "patience", "seed"),
    }

    def set(self, key: str, raw) -> None:
        kinds = {f.name: f.type for f in fields(self)}
        if key not in kinds:
            raise UsageError(f"unknown config key {key!r}")
        cast = {"int": int, "float": float, "str": str}[kinds[key]]
        try:
            setattr(self, key, cast(raw))
        except ValueError:
            raise UsageError(f"config key {key!r}: cannot parse {raw!r} as {kinds[key]}") from None

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        for section, keys in self.SECTIONS.items():
            cp[section] = {k: str(getattr(self, k)) for k in keys}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def model_config(self, n_nodes: int | None = None) -> ModelConfig:
        n = n_nodes if n_nodes is not None else self.nodes
        if n < 1:
            raise UsageError("number of nodes unknown: pass --nodes or --data")
        return ModelConfig(n_nodes=n, input_dim=self.input_dim, hidden=self.hidden, layers=self.layers,
                           embed_dim=self.embed_dim, horizon=self.horizon, lookback=self.lookback,
                           variant=self.variant, dagg_variant=self.dagg_variant, seed=self.seed)

    def train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, batch_size=self.batch_size, max_epochs=self.epochs,
                           patience=self.patience, seed=self.seed)


def read_config(path) -> dict[str, str]:
    """Key/value pairs from an INI file; unknown sections or keys are errors."""
    cp = configparser.ConfigParser()
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    except configparser.Error as exc:
        raise UsageError(f"malformed config {path}: {exc}") from None
    values = {}
    for section in cp.sections():
        if section not in RunConfig.SECTIONS:
            raise UsageError(f"{path}: unknown section [{section}]")
        for key, raw in cp[section].items():
            if key not in RunConfig.SECTIONS[section]:
                raise UsageError(f"{path}: unknown key {key!r} in [{section}]")
            values[key] = raw
    return values


def resolve_config(args, defaults: dict | None = None) -> RunConfig:
    """Defaults, then the config file, then explicit flags."""
    cfg = RunConfig()
    for k, v in (defaults or {}).items():
        setattr(cfg, k, v)
    if getattr(args, "config", None):
        for k, raw in read_config(args.config).items():
            cfg.set(k, raw)
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            cfg.set(f.name, v)
    return cfg


# helpers


def _require_file(path: str, what: str) -> Path:
    if not path:
        raise UsageError(f"no {what} given")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {path}")
    return p


def _out_dir(path: str) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {path}: {exc.strerror}") from None
    return p


def _load_series(cfg: RunConfig) -> D.RawSeries:
    path = _require_file(cfg.data, "data file")
    return D.interpolate_missing(D.load_csv(path, cfg.steps_per_day))


def _load_graph(cfg: RunConfig, n_nodes: int, required: bool) -> G.PredefinedGraph | None:
    if not required:
        return None
    if not cfg.graph:
        raise UsageError(f"variant {cfg.variant!r} needs --graph (edge-list CSV)")
    return G.load_edge_list(_require_file(cfg.graph, "graph file"), n_nodes)


def _write_metrics(report: D.MetricsReport, out: Path, stem: str) -> None:
    report.to_csv(out / f"{stem}.csv")
    report.to_json(out / f"{stem}.json")
    a = report.average
    print(f"{stem}: MAE {a.mae:.4f}  RMSE {a.rmse:.4f}  MAPE {a.mape:.2f}%")


# commands


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    series = _load_series(cfg)
    out = _out_dir(cfg.out)
    mcfg = cfg.model_config(series.n_nodes)
    graph = _load_graph(cfg, series.n_nodes, mcfg.needs_graph)
    ds = D.split_and_window(series, lookback=mcfg.lookback, horizon=mcfg.horizon)
    model = build(mcfg, graph=graph)
    model, history = train(model, ds, cfg.train_config())
    for r in history.records:
        log.info("epoch %d took %.3fs", r.epoch, r.seconds)
    history.to_csv(out / "history.csv", include_seconds=False)
    extra = {"normalizer": {"mean": ds.normalizer.mean_, "std": ds.normalizer.std_},
             "steps_per_day": series.steps_per_day, "best_epoch": history.best_epoch}
    save_checkpoint(model, out / "checkpoint.json", extra)
    (out / "config.ini").write_text(cfg.to_ini())
    pred = predict_windows(model, ds.val.inputs, ds.normalizer, cfg.batch_size)
    _write_metrics(D.window_metrics(pred, ds.val), out, "metrics_val")
    return 0


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    series = _load_series(cfg)
    out = _out_dir(cfg.out)
    split = args.split
    names = ("train", "val", "test")
    if args.ha:
        bounds = dict(zip(names, D.split_bounds(series.n_steps)))
        lo, hi = bounds[split]
        pred = D.ha_forecast(series, bounds["train"][1], cfg.horizon, lo, hi)
        truth = np.broadcast_to(series.values[lo:hi].T, pred.shape)
        mask = np.broadcast_to(~series.missing_mask[lo:hi].T, pred.shape)
        _write_metrics(D.metrics(pred, truth, mask), out, f"metrics_{split}_ha")
        return 0
    if not args.checkpoint and not args.oracle:
        raise UsageError("eval needs --checkpoint (or --ha)")
    if args.oracle:
        ds = D.split_and_window(series, lookback=cfg.lookback, horizon=cfg.horizon)
        ws = ds.split(split)
        _write_metrics(D.window_metrics(ws.targets.copy(), ws), out, f"metrics_{split}")
        return 0
    model, extra = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    c = model.config
    if c.n_nodes != series.n_nodes:
        raise UsageError(f"checkpoint has {c.n_nodes} nodes but data has {series.n_nodes}")
    norm = D.Normalizer.from_stats(extra["normalizer"]["mean"], extra["normalizer"]["std"])
    ds = D.split_and_window(series, lookback=c.lookback, horizon=c.horizon, normalizer=norm)
    ws = ds.split(split)
    pred = predict_windows(model, ws.inputs, norm, cfg.batch_size)
    _write_metrics(D.window_metrics(pred, ws), out, f"metrics_{split}")
    return 0


def _faulty_scale(x, factor: float):
    """Identity forward, backward scaled by ``factor`` (gradcheck self-test)."""
    return op("faulty_scale", x.data.copy(), (x,), lambda g: (g * factor,))


def gradcheck_model(cfg: RunConfig, inject_fault: bool = False):
    mcfg = cfg.model_config()
    if mcfg.n_nodes * mcfg.hidden * mcfg.embed_dim > GRADCHECK_LIMIT:
        raise UsageError(f"gradcheck needs nodes*hidden*embed_dim <= {GRADCHECK_LIMIT}")
    rng = make_rng(cfg.seed)
    graph = None
    if mcfg.needs_graph:
        graph = (G.load_edge_list(_require_file(cfg.graph, "graph file"), mcfg.n_nodes) if cfg.graph
                 else G.PredefinedGraph(mcfg.n_nodes, [(i, i + 1, 1.0) for i in range(mcfg.n_nodes - 1)]))
    model = build(mcfg, rng, graph)
    windows = rng.standard_normal((2, mcfg.lookback, mcfg.n_nodes, mcfg.input_dim))
    targets = rng.standard_normal((2, mcfg.horizon, mcfg.n_nodes))
    if inject_fault:
        victim = model.parameters()[0]

        def loss_fn():
            # extra term whose backward is 1.5x too large
            return l1_loss(model.forward(windows), targets) + mean_all(_faulty_scale(victim, 1.5))
    else:
        def loss_fn():
            return l1_loss(model.forward(windows), targets)
    return model, loss_fn


def cmd_gradcheck(args) -> int:
    defaults = {"nodes": 5, "hidden": 8, "embed_dim": 3, "lookback": 4, "horizon": 2, "layers": 2}
    cfg = resolve_config(args, defaults)
    model, loss_fn = gradcheck_model(cfg, args.inject_fault)
    report = finite_difference_check(loss_fn, model.parameters(), step=args.step, tol=args.tol,
                                     seed=cfg.seed)
    text = report.to_json()
    if args.report:
        Path(args.report).write_text(text + "\n")
    else:
        out = _out_dir(cfg.out)
        (out / "gradcheck.json").write_text(text + "\n")
    for p in report.params:
        print(f"{'ok  ' if p.passed else 'FAIL'} {p.name:32s} max_rel_err={p.max_rel_err:.3e}")
    print(f"gradcheck {'passed' if report.passed else 'FAILED'} (tol {report.tol:g})")
    return 0 if report.passed else 1


def cmd_count_params(args) -> int:
    cfg = resolve_config(args)
    print(count_params(cfg.model_config()))
    return 0


def cmd_export_graph(args) -> int:
    cfg = resolve_config(args)
    model, _ = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    emb = model.graph_embedding
    if emb is None:
        emb = model.layer_embedding(0)
    if emb is None:
        raise UsageError(f"variant {model.config.variant!r} has no node embeddings to export")
    out = _out_dir(cfg.out)
    D.write_csv(out / "embedding.csv", emb.data, [f"d{i}" for i in range(emb.shape[1])])
    adj = G.dagg_matrix(emb).data
    D.write_csv(out / "adjacency.csv", adj, [f"n{i}" for i in range(adj.shape[0])])
    print(f"wrote {out / 'embedding.csv'} and {out / 'adjacency.csv'}")
    return 0


def cmd_synth(args) -> int:
    out = _out_dir(args.out)
    s = D.synth_generate(args.nodes, args.communities, args.steps, args.noise, args.seed,
                         steps_per_day=args.steps_per_day, equal_amplitude=args.equal_amplitude,
                         phase_jitter=args.phase_jitter)
    D.write_csv(out / "series.csv", s.values, [f"node{i}" for i in range(s.n_nodes)])
    (out / "series.meta.json").write_text(json.dumps(s.meta, indent=2, sort_keys=True) + "\n")
    G.write_edge_list(out / "graph.csv", G.community_graph(s.meta["communities"]))
    print(f"wrote {out / 'series.csv'} ({s.n_steps} x {s.n_nodes})")
    return 0


# argument parsing


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI file with [data], [model], [train] sections")
    p.add_argument("--data")
    p.add_argument("--graph", help="edge-list CSV (u,v,weight) for pre-defined-graph variants")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--nodes", type=int)
    p.add_argument("--input-dim", dest="input_dim", type=int)
    p.add_argument("--steps-per-day", dest="steps_per_day", type=int)
    p.add_argument("--variant")
    p.add_argument("--dagg-variant", dest="dagg_variant")
    p.add_argument("--embed-dim", dest="embed_dim", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--horizon", type=int)
    p.add_argument("--lookback", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--patience", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="agcrn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write checkpoint, history and metrics")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-horizon metrics for a checkpoint or the HA baseline")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--ha", action="store_true", help="score the historical-average baseline")
    p.add_argument("--oracle", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every parameter")
    _add_common(p)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--report", help="write the JSON report here instead of <out>/gradcheck.json")
    p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("count-params", help="print the number of scalar parameters")
    _add_common(p)
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("export-graph", help="write node embeddings and learned adjacency as CSV")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_export_graph)

    p = sub.add_parser("synth", help="generate a community-structured synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--nodes", type=int, default=8)
    p.add_argument("--communities", type=int, default=2)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps-per-day", dest="steps_per_day", type=int, default=48)
    p.add_argument("--phase-jitter", dest="phase_jitter", type=float, default=0.0)
    p.add_argument("--equal-amplitude", dest="equal_amplitude", action="store_true")
    p.set_defaults(func=cmd_synth)
    return parser


def _limit_threads():
    n = os.environ.get("AGCRN_THREADS")
    if not n:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    _limit_threads()
    try:
        return args.func(args)
    except (UsageError, ConfigError, D.DataError, ValueError, OSError) as exc:
        print(f"agcrn {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, NonFiniteError, RuntimeError, FloatingPointError) as exc:
        print(f"agcrn {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
