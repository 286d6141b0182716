"""Command-line entry point: ``kevo <subcommand> --config <path> [options]``.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import graph as G
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .fileio import atomic_write
from .config import ExperimentConfig, load_config
from .data import Dataset, load_idx_pair, load_tensor_manifest, split_dataset, synthetic_blobs
from .errors import CheckpointError, ConfigError, DataError, DimensionError, StructuralError, TrainingError
from .evolve import (GenerationLog, RunState, evaluate_model, run_knowledge_evolution,
                     train_generation)
from .metrics import h2d_metrics, hypothesis_mean_abs
from .report import emit_report
from .splitting import extract_slim, masked_dense, profile_network, save_mask

log = logging.getLogger("kevo")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
SUBCOMMANDS = ("train", "evolve", "extract", "profile", "eval", "analyze")


def load_dataset(exp: ExperimentConfig) -> tuple[Dataset, Dataset]:
    d = exp.data
    src = d["source"]
    frac = d.get("eval_fraction", 0.5)
    if src == "synthetic-blobs":
        shape = tuple(exp.architecture.get("input_shape", (3, 32, 32)))
        data = synthetic_blobs(d.get("classes", exp.architecture["num_classes"]), d.get("per_class", 60),
                               shape, exp.seed, d.get("noise", 1.0), d.get("signal", 1.0), d.get("grid", 4))
        return split_dataset(data, frac, exp.seed)
    if src == "idx-pair":
        for key in ("train_images", "train_labels"):
            if key not in d:
                raise ConfigError(f"data.{key} is required for idx-pair")
        train = load_idx_pair(exp.resolve(d["train_images"]), exp.resolve(d["train_labels"]), d.get("limit"))
        if "eval_images" in d:
            ev = load_idx_pair(exp.resolve(d["eval_images"]), exp.resolve(d["eval_labels"]), d.get("eval_limit"))
            return train, ev
        return split_dataset(train, frac, exp.seed)
    train, ev = load_tensor_manifest(exp.resolve(d["manifest"]))
    if len(ev) == 0:
        return split_dataset(train, frac, exp.seed)
    return train, ev


def build_graph(exp: ExperimentConfig) -> G.NetworkGraph:
    a = exp.architecture
    if a.get("graph_file"):
        return G.load_graph(exp.resolve(a["graph_file"]))
    kw = {}
    for key in ("width", "embedding_dim"):
        if a.get(key):
            kw[key] = a[key]
    if "hidden" in a:
        kw["hidden"] = tuple(a["hidden"])
    if "branch_widths" in a:
        kw["branch_widths"] = tuple(a["branch_widths"])
    return G.build_architecture(a["family"], a["num_classes"], tuple(a["input_shape"]), **kw)


def _check_static(exp: ExperimentConfig, graph: G.NetworkGraph) -> None:
    d = exp.data
    for key in ("train_images", "train_labels", "eval_images", "eval_labels", "manifest"):
        if key in d and not exp.resolve(d[key]).exists():
            raise ConfigError(f"data.{key}: file {exp.resolve(d[key])} does not exist")
    if d["source"] == "synthetic-blobs" and tuple(exp.architecture["input_shape"]) != graph.input_shape:
        raise ConfigError("architecture.input_shape does not match the graph input")


def _meta(exp: ExperimentConfig, graph: G.NetworkGraph, generation: int, **extra) -> dict:
    return {"config": exp.to_dict(), "generation": generation, "graph": graph.to_dict(), **extra}


def _checkpoint_path(out: Path, g: int) -> Path:
    return out / f"generation-{g:03d}.kevo"


def _generation_checkpoints(out: Path) -> list[Path]:
    return sorted(out.glob("generation-*.kevo"))


def _graph_from(ckpt: Checkpoint, fallback: G.NetworkGraph) -> G.NetworkGraph:
    return G.NetworkGraph.from_dict(ckpt.meta["graph"]) if "graph" in ckpt.meta else fallback


def _write_logs(out: Path, logs: list[GenerationLog]) -> None:
    emit_report(logs, out / "summary.csv", "csv")
    emit_report(logs, out / "generations.jsonl", "structured")


# --------------------------------------------------------------------------- #
# Subcommands
# --------------------------------------------------------------------------- #

def cmd_evolve(exp: ExperimentConfig, graph: G.NetworkGraph, args) -> int:
    train, ev = load_dataset(exp)
    out = exp.output_dir
    out.mkdir(parents=True, exist_ok=True)
    logs: list[GenerationLog] = []
    resume = None
    if args.resume:
        ck = load_checkpoint(args.resume)
        resume = RunState(ck.meta["generation"], ck.params, ck.masks["current"], ck.masks["first"],
                          ck.masks["previous"])
        logs = [GenerationLog.from_dict(d) for d in ck.meta.get("logs", [])]

    def on_generation(entry: GenerationLog, state: RunState) -> None:
        logs.append(entry)
        save_checkpoint(_checkpoint_path(out, state.generation), state.params,
                        {"current": state.mask, "first": state.first_mask, "previous": state.prev_mask},
                        _meta(exp, graph, state.generation, logs=[l.to_dict() for l in logs]))
        _write_logs(out, logs)
        print(f"generation {entry.generation}: dense={entry.dense_metric} slim={entry.slim_metric}")

    run_knowledge_evolution(graph, exp.train, train, ev, on_generation, resume)
    save_mask(_generation_mask(out), out / "mask.json")
    return EXIT_OK


def _generation_mask(out: Path):
    return load_checkpoint(_generation_checkpoints(out)[-1]).mask


def cmd_train(exp: ExperimentConfig, graph: G.NetworkGraph, args) -> int:
    train, ev = load_dataset(exp)
    out = exp.output_dir
    params = G.init_params(graph, exp.seed, stream="generation-0")
    params, losses = train_generation(graph, params, train, exp.train, 1)
    metric = evaluate_model(graph, params, ev, exp.train.task)
    save_checkpoint(out / "trained.kevo", params, None, _meta(exp, graph, 1, losses=losses, metric=metric))
    print(json.dumps({"epoch_losses": losses, "metric": metric}))
    return EXIT_OK


def _resolve_checkpoint(exp: ExperimentConfig, args) -> Path:
    if args.checkpoint:
        return Path(args.checkpoint)
    found = _generation_checkpoints(exp.output_dir)
    if not found:
        raise ConfigError(f"no checkpoint given and none found in {exp.output_dir}")
    return found[-1]


def cmd_extract(exp: ExperimentConfig, graph: G.NetworkGraph, args) -> int:
    path = _resolve_checkpoint(exp, args)
    ck = load_checkpoint(path)
    if ck.mask is None:
        raise ConfigError(f"{path} carries no split mask")
    dense_graph = _graph_from(ck, graph)
    slim_graph, slim_params = extract_slim(dense_graph, ck.params, ck.mask)
    out = exp.output_dir
    target = Path(args.slim_out) if args.slim_out else out / "slim.kevo"
    save_checkpoint(target, slim_params, None,
                    _meta(exp, slim_graph, ck.meta.get("generation", 0), slim=True, source=str(path)))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "dense", "slim"])
    dshapes = dense_graph.param_shapes()
    sshapes = slim_graph.param_shapes()
    for node in dense_graph.nodes:
        key = f"{node.name}.weight"
        if key in dshapes:
            w.writerow([node.name, " x ".join(map(str, dshapes[key])), " x ".join(map(str, sshapes[key]))])
    atomic_write(out / "dimensions.csv", buf.getvalue().encode())
    print(buf.getvalue(), end="")
    return EXIT_OK


def cmd_profile(exp: ExperimentConfig, graph: G.NetworkGraph, args) -> int:
    target = graph
    if args.slim:
        from .splitting import kels_split
        params = {k: np.zeros(s, np.float32) for k, s in graph.param_shapes().items()}
        target, _ = extract_slim(graph, params, kels_split(graph, exp.train.split_rate))
    sys.stdout.write(profile_network(target).to_csv())
    return EXIT_OK


def cmd_eval(exp: ExperimentConfig, graph: G.NetworkGraph, args) -> int:
    _, ev = load_dataset(exp)
    path = _resolve_checkpoint(exp, args)
    ck = load_checkpoint(path)
    g = _graph_from(ck, graph)
    params = ck.params
    if args.masked:
        if ck.mask is None:
            raise ConfigError(f"{path} carries no split mask")
        params = masked_dense(g, params, ck.mask)
    metric = evaluate_model(g, params, ev, exp.train.task)
    print(json.dumps(metric))
    return EXIT_OK


def cmd_analyze(exp: ExperimentConfig, graph: G.NetworkGraph, args) -> int:
    paths = _generation_checkpoints(exp.output_dir)
    if not paths:
        raise ConfigError(f"no generation checkpoints in {exp.output_dir}")
    rows, series = [], []
    for p in paths:
        ck = load_checkpoint(p)
        g = _graph_from(ck, graph)
        masks = ck.mask.param_masks(g)
        series.append(np.concatenate([m.reshape(-1) for m in masks.values()]))
        stats = hypothesis_mean_abs(ck.params, masks)
        rows.append((ck.meta["generation"], stats))
    s_h2d, c_h2d = h2d_metrics(series) if len(series) > 1 else ([], [])
    layers = list(rows[0][1])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["generation"] + [f"mean_abs_fit_{l}" for l in layers]
               + [f"mean_abs_reset_{l}" for l in layers] + ["s_h2d", "c_h2d"])
    for i, (gen, stats) in enumerate(rows):
        fmt = lambda v: "" if v is None else repr(v)
        extra = ["", ""] if i == 0 else [repr(s_h2d[i - 1]), repr(c_h2d[i - 1])]
        w.writerow([gen] + [fmt(stats[l][0]) for l in layers] + [fmt(stats[l][1]) for l in layers] + extra)
    atomic_write(exp.output_dir / "analysis.csv", buf.getvalue().encode())
    print(buf.getvalue(), end="")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "evolve": cmd_evolve, "extract": cmd_extract,
            "profile": cmd_profile, "eval": cmd_eval, "analyze": cmd_analyze}


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kevo", description="Knowledge-evolution experiments")
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", required=True, help="experiment config file (YAML or JSON)")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", default=None, help="output directory (overrides output_dir)")
    parser.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="dot-path config override, e.g. train.epochs=5")
    parser.add_argument("--checkpoint", default=None, help="checkpoint for extract/eval")
    parser.add_argument("--slim-out", default=None, help="slim checkpoint path for extract")
    parser.add_argument("--masked", action="store_true", help="eval: zero the reset-hypothesis first")
    parser.add_argument("--slim", action="store_true", help="profile: report the KELS slim network")
    parser.add_argument("--resume", default=None, help="evolve: continue from a generation checkpoint")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def _thread_limit():
    n = os.environ.get("KEVO_THREADS")
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=int(n))


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        exp = load_config(args.config, args.override, args.seed, args.out)
        graph = build_graph(exp)
        _check_static(exp, graph)
        with _thread_limit():
            return COMMANDS[args.subcommand](exp, graph, args)
    except (ConfigError, StructuralError, DimensionError) as exc:
        print(f"kevo: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError) as exc:
        print(f"kevo: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, ArithmeticError, FloatingPointError) as exc:
        print(f"kevo: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
