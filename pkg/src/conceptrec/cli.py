"""Command-line entry points for every pipeline stage.

Subcommands mirror the pipeline: data and graph preparation (gen-data,
build-graph), text enhancement and encoding (enhance, encode), the four
training stages (pretrain-graph, pretrain-kt, pretrain-seq, finetune),
inference and scoring (recommend, evaluate, embed-report), and `run`, which
drives everything from one config file.

Exit codes: 0 on success, 1 on runtime failure, 2 on unknown subcommand or
bad arguments (argparse's convention), 3 on an invalid run-config field.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import math
import os
import sys

import numpy as np
import torch

from . import datasets, evalkit, interp, kgraph, nnutil, storage
from .adapter import AdapterConfig, ContrastiveConfig, GraphAdapter, adapt_table, pretrain_adapter
from .encoder import HASH_DIM, encode_interpretations, make_encoder
from .ktrace import KnowledgeTracer, KtConfig
from .pipeline import (
    Pipeline,
    PipelineConfig,
    PipelineError,
    evaluate as evaluate_pipeline,
    load_pipeline,
    make_pipeline,
    recommend as recommend_pipeline,
    run_stages,
    save_pipeline,
)
from .trainer import FinetuneConfig, KtTrainConfig, SslConfig, train_kt

log = logging.getLogger("conceptrec")

STAGE_RAW = 0
STAGE_ADAPTED = 1

# flags every subcommand cannot run without, validated here rather than by
# argparse so the failure lands on exit code 3 and names the field
REQUIRED_FLAGS = {
    "gen-data": ("concepts", "learners", "out"),
    "build-graph": ("infile", "out"),
    "enhance": ("graph", "names", "provider", "cache"),
    "encode": ("texts", "backend", "out"),
    "pretrain-graph": ("graph", "names", "embeddings", "out"),
    "pretrain-kt": ("data", "out"),
    "pretrain-seq": ("data", "names", "graph", "embeddings", "out"),
    "finetune": ("data", "graph", "out"),
    "recommend": ("model", "data", "graph"),
    "evaluate": ("model", "data", "graph", "out"),
    "embed-report": ("raw", "adapted"),
    "run": ("config",),
}

# argparse stores --in as `infile`; error messages should name the flag
FLAG_NAMES = {"infile": "in"}


class ConfigError(ValueError):
    """Bad field in a run config; message names section and field."""


def _check_required(args) -> None:
    for dest in REQUIRED_FLAGS.get(args.command, ()):
        if getattr(args, dest, None) is None:
            flag = FLAG_NAMES.get(dest, dest).replace("_", "-")
            raise ConfigError(f"{args.command}: {flag} is required")


def _write_json(path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _append_metrics(path, stage, losses, val_metrics=None) -> None:
    """Json-lines training log: {stage, epoch, loss, val_metric} per epoch."""
    if not path:
        return
    with open(path, "a", encoding="utf-8") as fh:
        for epoch, loss in enumerate(losses):
            row = {
                "stage": stage,
                "epoch": epoch,
                "loss": loss,
                "val_metric": None if val_metrics is None else val_metrics[epoch],
            }
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def _log_stage_histories(path, histories) -> None:
    mrr = histories.get("finetune_valid_mrr")
    for stage in ("graph", "kt", "seq", "finetune"):
        if stage in histories:
            _append_metrics(
                path, stage, histories[stage], mrr if stage == "finetune" else None
            )


def _load_table(path, expect_stage=None):
    stage, ids, matrix = storage.read_table(path)
    if expect_stage is not None and stage != expect_stage:
        label = {STAGE_RAW: "raw", STAGE_ADAPTED: "adapted"}.get(stage, str(stage))
        raise storage.StorageError(f"{path} holds a {label} table, not the expected kind")
    if not np.array_equal(ids, np.arange(len(ids))):
        raise storage.StorageError(f"{path}: table ids are not contiguous from 0")
    return ids, matrix


def _load_named_data(data_path, names_path=None, format="tabular"):
    names = datasets.load_names(names_path) if names_path else None
    seqs, name_to_id = datasets.load_sequences(data_path, format=format, names=names)
    return seqs, name_to_id


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    if args.graph:
        names = datasets.load_names(args.names) if args.names else None
        if names is None:
            raise datasets.DataError("--graph needs --names to resolve concept names")
        graph = kgraph.load_graph(args.graph, names)
        if len(names) != args.concepts:
            raise datasets.DataError(
                f"--concepts {args.concepts} != {len(names)} names in {args.names}"
            )
        name_to_id = names
    else:
        graph = kgraph.planted_cluster_graph(args.concepts, args.clusters, args.out_degree)
        name_to_id = {f"c{k:04d}": k for k in range(args.concepts)}
    id_to_name = datasets.id_to_name_map(name_to_id)
    seqs = datasets.generate_synthetic(
        args.concepts,
        args.learners,
        graph,
        args.walk_bias,
        args.seed,
        min_len=args.min_len,
        max_len=args.max_len,
    )
    datasets.write_sequences(seqs, args.out, id_to_name)
    if args.names_out:
        datasets.save_names(name_to_id, args.names_out)
    if args.graph_out:
        kgraph.save_graph(graph, args.graph_out, id_to_name)
    if args.fixture_out:
        fixture = {
            name: (
                f"{name} is study unit {k} of the course; it drills one idea "
                "until the pattern is routine."
            )
            for name, k in sorted(name_to_id.items(), key=lambda kv: kv[1])
        }
        _write_json(args.fixture_out, fixture)
    total = sum(len(s) for s in seqs)
    print(f"wrote {len(seqs)} learners, {total} records to {args.out}")
    return 0


def cmd_build_graph(args) -> int:
    seqs, name_to_id = _load_named_data(args.infile, args.names)
    graph = kgraph.build_transition_graph(
        seqs, len(name_to_id), min_count=args.min_count, min_ratio=args.min_ratio
    )
    kgraph.save_graph(graph, args.out, datasets.id_to_name_map(name_to_id))
    if args.names_out:
        datasets.save_names(name_to_id, args.names_out)
    print(f"wrote {graph.num_edges} edges over {graph.num_nodes} concepts to {args.out}")
    return 0


def cmd_enhance(args) -> int:
    name_to_id = datasets.load_names(args.names)
    graph = kgraph.load_graph(args.graph, name_to_id)
    if args.provider == "fixture":
        if not args.fixture:
            raise interp.ProviderError("fixture provider needs --fixture <file>")
        provider = interp.FixtureProvider(args.fixture)
    else:
        provider = interp.RemoteProvider(endpoint=args.endpoint, model=args.model)
    cached = {}
    if os.path.exists(args.cache):
        cached = interp.load_cache(args.cache)
    interps = interp.build_interpretations(graph, name_to_id, provider, cached=cached)
    interp.save_cache(interps, args.cache)
    fresh = sum(1 for it in interps if it.id not in cached)
    print(f"wrote {len(interps)} interpretations to {args.cache} ({fresh} newly explained)")
    return 0


def cmd_encode(args) -> int:
    interps = list(interp.load_cache(args.texts).values())
    if not interps:
        raise interp.CacheError(f"{args.texts} holds no interpretations")
    if args.backend == "hash":
        encoder = make_encoder("hash", dim=args.dim)
    else:
        encoder = make_encoder("lm", model_name=args.lm_model)
    ids, matrix = encode_interpretations(interps, encoder)
    storage.write_table(args.out, STAGE_RAW, ids, matrix)
    print(f"encoded {len(ids)} concepts at width {matrix.shape[1]} into {args.out}")
    return 0


def cmd_pretrain_graph(args) -> int:
    nnutil.single_thread()
    name_to_id = datasets.load_names(args.names)
    graph = kgraph.load_graph(args.graph, name_to_id)
    _, matrix = _load_table(args.embeddings, expect_stage=STAGE_RAW)
    acfg = AdapterConfig(dim=matrix.shape[1], num_layers=args.layers, seed=args.seed)
    ccfg = ContrastiveConfig(
        gamma=args.gamma,
        tau=args.tau,
        epochs=args.epochs,
        lr=args.lr,
        optimizer=args.optimizer,
        seed=args.seed,
    )
    adapter = GraphAdapter(acfg)
    history = pretrain_adapter(
        adapter, torch.as_tensor(matrix, dtype=torch.float32), graph, ccfg
    )
    meta = {
        "kind": "adapter",
        "trained": True,
        "config": acfg.__dict__,
        "contrastive": ccfg.__dict__,
    }
    nnutil.save_module(args.out, adapter, meta)
    _append_metrics(args.log, "graph", history)
    if args.adapted_out:
        adapted = adapt_table(adapter, torch.as_tensor(matrix, dtype=torch.float32), graph)
        storage.write_table(args.adapted_out, STAGE_ADAPTED, np.arange(len(adapted)), adapted)
    tail = f", final loss {history[-1]:.4f}" if history else ""
    print(f"adapter trained for {len(history)} epochs{tail}; saved to {args.out}")
    return 0


def cmd_pretrain_kt(args) -> int:
    nnutil.single_thread()
    seqs, name_to_id = _load_named_data(args.data, args.names)
    split = datasets.split_leave_one_out(seqs)
    kcfg = KtConfig(
        num_concepts=len(name_to_id),
        input_dim=args.input_dim,
        hidden_dim=args.hidden,
        loss=args.loss,
        seed=args.seed,
    )
    tcfg = KtTrainConfig(
        epochs=args.epochs, lr=args.lr, optimizer=args.optimizer,
        batch_size=args.batch_size, seed=args.seed,
    )
    kt = KnowledgeTracer(kcfg)
    history = train_kt(kt, split.train, tcfg)
    meta = {
        "kind": "kt",
        "trained": True,
        "config": kcfg.__dict__,
        "name_to_id": name_to_id,
    }
    nnutil.save_module(args.out, kt, meta)
    _append_metrics(args.log, "kt", history)
    print(
        f"tracer trained for {len(history)} epochs, final loss {history[-1]:.4f}; "
        f"saved to {args.out}"
    )
    return 0


def _assemble_pipeline(args, name_to_id, matrix) -> Pipeline:
    """Build a Pipeline from flags plus optional adapter/tracer checkpoints."""
    config = PipelineConfig(
        num_concepts=len(name_to_id),
        text_dim=matrix.shape[1],
        dim=args.dim,
        num_blocks=args.blocks,
        num_heads=args.heads,
        max_len=args.max_len,
        parts=tuple(args.parts.split(",")),
        seed=args.seed,
    )
    stages_done = []
    if getattr(args, "adapter", None):
        meta, _ = storage.read_tensors(args.adapter)
        if meta.get("kind") != "adapter":
            raise PipelineError(f"{args.adapter} is not an adapter checkpoint")
        config.adapter_layers = int(meta["config"]["num_layers"])
        if int(meta["config"]["dim"]) != matrix.shape[1]:
            raise PipelineError(
                f"adapter width {meta['config']['dim']} != table width {matrix.shape[1]}"
            )
    if getattr(args, "kt", None):
        meta, _ = storage.read_tensors(args.kt)
        if meta.get("kind") != "kt":
            raise PipelineError(f"{args.kt} is not a tracer checkpoint")
        if int(meta["config"]["num_concepts"]) != len(name_to_id):
            raise PipelineError(
                f"tracer knows {meta['config']['num_concepts']} concepts, data has "
                f"{len(name_to_id)}"
            )
        config.kt_input_dim = int(meta["config"]["input_dim"])
        config.kt_hidden_dim = int(meta["config"]["hidden_dim"])
        config.kt_loss = str(meta["config"]["loss"])
    pipe = make_pipeline(config, name_to_id, matrix)
    if getattr(args, "adapter", None):
        meta = nnutil.load_module(args.adapter, pipe.adapter)
        if meta.get("trained"):
            stages_done.append("graph")
    if getattr(args, "kt", None):
        meta = nnutil.load_module(args.kt, pipe.kt)
        if meta.get("trained"):
            stages_done.append("kt")
    pipe.stages_done = stages_done
    return pipe


def cmd_pretrain_seq(args) -> int:
    nnutil.single_thread()
    seqs, name_to_id = _load_named_data(args.data, args.names)
    split = datasets.split_leave_one_out(seqs)
    graph = kgraph.load_graph(args.graph, name_to_id)
    _, matrix = _load_table(args.embeddings, expect_stage=STAGE_RAW)
    pipe = _assemble_pipeline(args, name_to_id, matrix)
    pipe.config.ssl = SslConfig(
        epochs=args.epochs,
        lr=args.lr,
        optimizer=args.optimizer,
        batch_size=args.batch_size,
        mask_prob=args.mask_prob,
        seed=args.seed,
    )
    histories = run_stages(
        pipe, split, graph, stages=("seq",), from_scratch=args.from_scratch
    )
    save_pipeline(args.out, pipe)
    _log_stage_histories(args.log, histories)
    tail = histories["seq"][-1] if histories["seq"] else float("nan")
    print(f"sequence pre-training done ({args.epochs} epochs, last loss {tail:.4f}); "
          f"saved to {args.out}")
    return 0


def cmd_finetune(args) -> int:
    nnutil.single_thread()
    if args.model:
        pipe = load_pipeline(args.model)
        seqs, _ = datasets.load_sequences(args.data, names=pipe.name_to_id)
    else:
        if not (args.embeddings and args.names):
            raise ConfigError("finetune: needs either model or embeddings with names")
        seqs, name_to_id = _load_named_data(args.data, args.names)
        _, matrix = _load_table(args.embeddings, expect_stage=STAGE_RAW)
        pipe = _assemble_pipeline(args, name_to_id, matrix)
    split = datasets.split_leave_one_out(seqs)
    graph = kgraph.load_graph(args.graph, pipe.name_to_id)
    pipe.config.finetune = FinetuneConfig(
        epochs=args.epochs,
        lr=args.lr,
        optimizer=args.optimizer,
        batch_size=args.batch_size,
        patience=args.patience,
        seed=args.seed,
    )
    histories = run_stages(
        pipe, split, graph, stages=("finetune",), from_scratch=args.from_scratch
    )
    save_pipeline(args.out, pipe)
    _log_stage_histories(args.log, histories)
    mrr = max(histories["finetune_valid_mrr"])
    print(
        f"fine-tuned for {len(histories['finetune'])} epochs, "
        f"best validation MRR {mrr:.4f}; saved to {args.out}"
    )
    return 0


def cmd_recommend(args) -> int:
    pipe = load_pipeline(args.model)
    seqs, _ = datasets.load_sequences(args.data, names=pipe.name_to_id)
    graph = kgraph.load_graph(args.graph, pipe.name_to_id)
    by_learner = {s.learner: s for s in seqs}
    if args.learner is None:
        wanted = sorted(by_learner)
    elif args.learner in by_learner:
        wanted = [args.learner]
    else:
        raise PipelineError(f"learner {args.learner!r} not found in {args.data}")
    id_to_name = datasets.id_to_name_map(pipe.name_to_id)
    for learner in wanted:
        picks = recommend_pipeline(pipe, graph, by_learner[learner].records, args.top_k)
        row = {"learner": learner, "ranking": [id_to_name[c] for c in picks]}
        print(json.dumps(row, sort_keys=True))
    return 0


def cmd_evaluate(args) -> int:
    pipe = load_pipeline(args.model)
    seqs, _ = datasets.load_sequences(args.data, names=pipe.name_to_id)
    split = datasets.split_leave_one_out(seqs)
    graph = kgraph.load_graph(args.graph, pipe.name_to_id)
    report = evaluate_pipeline(pipe, split, graph)
    _write_json(args.out, report)
    for key, value in report.items():
        shown = "null" if value is None else f"{value:.4f}"
        print(f"{key}: {shown}")
    return 0


def cmd_embed_report(args) -> int:
    _, raw = _load_table(args.raw)
    _, adapted = _load_table(args.adapted)
    k = args.k if args.k is not None else max(2, round(math.sqrt(len(raw))))
    report = evalkit.embedding_report(raw, adapted, k, args.seed)
    if args.out:
        _write_json(args.out, report)
    for key, value in report.items():
        print(f"{key}: {value:.4f}")
    return 0


# ------------------------------------------------------------- run command


def _cfg_get(parser, section, field, cast, default=None, required=False):
    if not parser.has_section(section):
        if required:
            raise ConfigError(f"[{section}] section is required")
        if default is None and required:
            raise ConfigError(f"[{section}] {field} is required")
    try:
        raw = parser.get(section, field, fallback=None)
    except configparser.Error as exc:
        raise ConfigError(f"[{section}] {field}: {exc}") from exc
    if raw is None:
        if required:
            raise ConfigError(f"[{section}] {field} is required")
        return default
    try:
        if cast is bool:
            lowered = raw.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        return cast(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {field}: {exc}") from exc


def run_from_config(path, no_stages=(), log_path=None) -> dict:
    """Execute the staged pipeline described by an INI config.

    Returns the final report. See the README for the section reference;
    every field error is raised as ConfigError naming section and field.
    `no_stages` drops stages on top of the config's own enabled flags;
    dropping any stage doubles as the from-scratch override for the ones
    that remain. `log_path` appends per-epoch json-lines metrics.
    """
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config file {path} not found or unreadable")

    out_dir = _cfg_get(parser, "out", "dir", str, required=True)
    os.makedirs(out_dir, exist_ok=True)

    data_path = _cfg_get(parser, "data", "sequences", str, required=True)
    names_path = _cfg_get(parser, "data", "names", str)
    data_format = _cfg_get(parser, "data", "format", str, default="tabular")
    seqs, name_to_id = _load_named_data(data_path, names_path, format=data_format)
    if len(seqs) == 0:
        raise ConfigError("[data] sequences: no usable learners after filtering")
    split = datasets.split_leave_one_out(seqs)

    graph_path = _cfg_get(parser, "graph", "path", str)
    if graph_path:
        graph = kgraph.load_graph(graph_path, name_to_id)
    else:
        graph = kgraph.build_transition_graph(
            seqs,
            len(name_to_id),
            min_count=_cfg_get(parser, "graph", "min_count", int, default=2),
            min_ratio=_cfg_get(parser, "graph", "min_ratio", float, default=0.05),
        )
        graph_path = os.path.join(out_dir, "graph.tsv")
        kgraph.save_graph(graph, graph_path, datasets.id_to_name_map(name_to_id))

    provider_name = _cfg_get(parser, "text", "provider", str, default="fixture")
    if provider_name not in ("fixture", "remote"):
        raise ConfigError(f"[text] provider: must be fixture or remote, got {provider_name!r}")
    cache_path = _cfg_get(
        parser, "text", "cache", str, default=os.path.join(out_dir, "interp.jsonl")
    )
    if provider_name == "fixture":
        fixture_path = _cfg_get(parser, "text", "fixture", str, required=True)
        provider = interp.FixtureProvider(fixture_path)
    else:
        provider = interp.RemoteProvider()
    cached = interp.load_cache(cache_path) if os.path.exists(cache_path) else {}
    interps = interp.build_interpretations(graph, name_to_id, provider, cached=cached)
    interp.save_cache(interps, cache_path)

    backend = _cfg_get(parser, "text", "backend", str, default="hash")
    if backend == "hash":
        encoder = make_encoder("hash", dim=_cfg_get(parser, "text", "dim", int, default=HASH_DIM))
    elif backend == "lm":
        encoder = make_encoder("lm")
    else:
        raise ConfigError(f"[text] backend: must be hash or lm, got {backend!r}")
    ids, matrix = encode_interpretations(interps, encoder)
    storage.write_table(os.path.join(out_dir, "raw_table.bin"), STAGE_RAW, ids, matrix)

    seed = _cfg_get(parser, "model", "seed", int, default=0)
    config = PipelineConfig(
        num_concepts=len(name_to_id),
        text_dim=matrix.shape[1],
        dim=_cfg_get(parser, "model", "dim", int, default=64),
        num_blocks=_cfg_get(parser, "model", "blocks", int, default=3),
        num_heads=_cfg_get(parser, "model", "heads", int, default=2),
        max_len=_cfg_get(parser, "model", "max_len", int, default=200),
        parts=tuple(
            _cfg_get(parser, "model", "parts", str, default="id,answer,text,state").split(",")
        ),
        compact=_cfg_get(parser, "model", "compact", bool, default=False),
        adapter_layers=_cfg_get(parser, "model", "adapter_layers", int, default=2),
        kt_input_dim=_cfg_get(parser, "model", "kt_input_dim", int, default=64),
        kt_hidden_dim=_cfg_get(parser, "model", "kt_hidden", int, default=64),
        kt_loss=_cfg_get(parser, "model", "kt_loss", str, default="mse"),
        seed=seed,
        cluster_k=_cfg_get(parser, "eval", "clusters", int),
        cluster_seed=_cfg_get(parser, "eval", "cluster_seed", int, default=0),
        contrastive=ContrastiveConfig(
            gamma=_cfg_get(parser, "stage:graph", "gamma", float, default=0.3),
            tau=_cfg_get(parser, "stage:graph", "tau", float, default=0.2),
            epochs=_cfg_get(parser, "stage:graph", "epochs", int, default=60),
            lr=_cfg_get(parser, "stage:graph", "lr", float, default=0.05),
            optimizer=_cfg_get(parser, "stage:graph", "optimizer", str, default="sgd"),
            seed=seed,
        ),
        kt_train=KtTrainConfig(
            epochs=_cfg_get(parser, "stage:kt", "epochs", int, default=15),
            lr=_cfg_get(parser, "stage:kt", "lr", float, default=0.005),
            optimizer=_cfg_get(parser, "stage:kt", "optimizer", str, default="adam"),
            batch_size=_cfg_get(parser, "stage:kt", "batch_size", int, default=128),
            seed=seed,
        ),
        ssl=SslConfig(
            epochs=_cfg_get(parser, "stage:seq", "epochs", int, default=10),
            lr=_cfg_get(parser, "stage:seq", "lr", float, default=0.001),
            optimizer=_cfg_get(parser, "stage:seq", "optimizer", str, default="adam"),
            batch_size=_cfg_get(parser, "stage:seq", "batch_size", int, default=256),
            mask_prob=_cfg_get(parser, "stage:seq", "mask_prob", float, default=0.2),
            seed=seed,
        ),
        finetune=FinetuneConfig(
            epochs=_cfg_get(parser, "stage:finetune", "epochs", int, default=40),
            lr=_cfg_get(parser, "stage:finetune", "lr", float, default=0.001),
            optimizer=_cfg_get(parser, "stage:finetune", "optimizer", str, default="adam"),
            batch_size=_cfg_get(parser, "stage:finetune", "batch_size", int, default=256),
            patience=_cfg_get(parser, "stage:finetune", "patience", int, default=5),
            seed=seed,
        ),
    )

    stages = [
        name
        for name in ("graph", "kt", "seq", "finetune")
        if _cfg_get(parser, f"stage:{name}", "enabled", bool, default=True)
        and name not in no_stages
    ]
    try:
        pipe = make_pipeline(config, name_to_id, matrix)
    except (ValueError, PipelineError) as exc:
        raise ConfigError(f"[model] invalid configuration: {exc}") from exc
    # disabling a stage is itself the explicit override for the rest
    from_scratch = len(stages) < 4
    histories = run_stages(pipe, split, graph, stages=stages, from_scratch=from_scratch)
    _log_stage_histories(log_path, histories)

    model_path = os.path.join(out_dir, "model.ckpt")
    save_pipeline(model_path, pipe)
    adapted = adapt_table(pipe.adapter, torch.as_tensor(matrix, dtype=torch.float32), graph)
    storage.write_table(
        os.path.join(out_dir, "adapted_table.bin"), STAGE_ADAPTED, ids, adapted
    )

    report = evaluate_pipeline(pipe, split, graph)
    report_path = _cfg_get(
        parser, "eval", "report", str, default=os.path.join(out_dir, "report.json")
    )
    _write_json(report_path, report)
    return report


def cmd_run(args) -> int:
    report = run_from_config(args.config, no_stages=tuple(args.no_stage), log_path=args.log)
    for key, value in report.items():
        shown = "null" if value is None else f"{value:.4f}"
        print(f"{key}: {shown}")
    return 0


# ------------------------------------------------------------------ parser


def _add_model_flags(sub) -> None:
    sub.add_argument("--dim", type=int, default=64)
    sub.add_argument("--blocks", type=int, default=3)
    sub.add_argument("--heads", type=int, default=2)
    sub.add_argument("--max-len", type=int, default=200)
    sub.add_argument("--parts", default="id,answer,text,state")
    sub.add_argument("--batch-size", type=int, default=256)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="conceptrec",
        description="Concept recommendation pipeline over learner histories",
    )
    parser.add_argument(
        "--log-level",
        default="INFO",
        choices=("DEBUG", "INFO", "WARNING", "ERROR"),
        help="stderr logging threshold",
    )
    parser.add_argument("--log", help="append per-epoch json-lines metrics to this file")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("gen-data", help="generate synthetic learner histories")
    p.add_argument("--concepts", type=int)
    p.add_argument("--learners", type=int)
    p.add_argument("--walk-bias", type=float, default=0.7)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--graph", help="edge list steering the walks; omit to plant clusters")
    p.add_argument("--names", help="concept id map for --graph")
    p.add_argument("--clusters", type=int, default=4)
    p.add_argument("--out-degree", type=int, default=2)
    p.add_argument("--min-len", type=int, default=10)
    p.add_argument("--max-len", type=int, default=30)
    p.add_argument("--out")
    p.add_argument("--names-out")
    p.add_argument("--graph-out")
    p.add_argument("--fixture-out")
    p.set_defaults(func=cmd_gen_data)

    p = subs.add_parser("build-graph", help="estimate the concept graph from transitions")
    p.add_argument("--in", dest="infile")
    p.add_argument("--out")
    p.add_argument("--min-count", type=int, default=2)
    p.add_argument("--min-ratio", type=float, default=0.05)
    p.add_argument("--names")
    p.add_argument("--names-out")
    p.set_defaults(func=cmd_build_graph)

    p = subs.add_parser("enhance", help="attach explanations and graph context to concepts")
    p.add_argument("--graph")
    p.add_argument("--names")
    p.add_argument("--provider", choices=("remote", "fixture"))
    p.add_argument("--cache")
    p.add_argument("--fixture", help="explanation table for the fixture provider")
    p.add_argument("--endpoint", default=interp.DEFAULT_ENDPOINT)
    p.add_argument("--model", default=interp.DEFAULT_MODEL)
    p.set_defaults(func=cmd_enhance)

    p = subs.add_parser("encode", help="embed interpretation texts into a table")
    p.add_argument("--texts", help="interpretation cache from enhance")
    p.add_argument("--backend", choices=("lm", "hash"))
    p.add_argument("--dim", type=int, default=HASH_DIM, help="hash backend width")
    p.add_argument("--lm-model", default="bert-base-uncased")
    p.add_argument("--out")
    p.set_defaults(func=cmd_encode)

    p = subs.add_parser("pretrain-graph", help="contrastive adapter training on graph views")
    p.add_argument("--graph")
    p.add_argument("--names")
    p.add_argument("--embeddings")
    p.add_argument("--gamma", type=float, default=0.3)
    p.add_argument("--tau", type=float, default=0.2)
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--optimizer", choices=("sgd", "adam"), default="sgd")
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--adapted-out", help="also write the adapted table")
    p.set_defaults(func=cmd_pretrain_graph)

    p = subs.add_parser("pretrain-kt", help="train the knowledge tracer")
    p.add_argument("--data")
    p.add_argument("--names")
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--lr", type=float, default=0.005)
    p.add_argument("--optimizer", choices=("sgd", "adam"), default="adam")
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--input-dim", type=int, default=64)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--loss", choices=("mse", "bce"), default="mse")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_pretrain_kt)

    p = subs.add_parser("pretrain-seq", help="masked-objective pre-training for the recommender")
    p.add_argument("--data")
    p.add_argument("--names")
    p.add_argument("--graph")
    p.add_argument("--embeddings")
    p.add_argument("--adapter", help="adapter checkpoint from pretrain-graph")
    p.add_argument("--kt", help="tracer checkpoint from pretrain-kt")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--optimizer", choices=("sgd", "adam"), default="adam")
    p.add_argument("--mask-prob", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument(
        "--from-scratch",
        action="store_true",
        help="run without the graph/kt pre-training prerequisites",
    )
    _add_model_flags(p)
    p.set_defaults(func=cmd_pretrain_seq)

    p = subs.add_parser("finetune", help="joint next-concept training")
    p.add_argument("--data")
    p.add_argument("--graph")
    p.add_argument("--model", help="pipeline checkpoint from pretrain-seq")
    p.add_argument("--names", help="needed when assembling from parts")
    p.add_argument("--embeddings", help="raw table when assembling from parts")
    p.add_argument("--adapter")
    p.add_argument("--kt")
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--optimizer", choices=("sgd", "adam"), default="adam")
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument(
        "--from-scratch",
        action="store_true",
        help="fine-tune without any pre-trained checkpoints",
    )
    _add_model_flags(p)
    p.set_defaults(func=cmd_finetune)

    p = subs.add_parser("recommend", help="ranked next concepts as json-lines")
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--graph")
    p.add_argument("--learner", help="restrict to one learner; default is everyone")
    p.add_argument("--top-k", type=int, default=5)
    p.set_defaults(func=cmd_recommend)

    p = subs.add_parser("evaluate", help="held-out metrics and geometry report")
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--graph")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = subs.add_parser("embed-report", help="clustering quality of raw vs adapted tables")
    p.add_argument("--raw")
    p.add_argument("--adapted")
    p.add_argument("--k", type=int, help="cluster count; default round(sqrt(#concepts))")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_embed_report)

    p = subs.add_parser("run", help="full staged pipeline from a config file")
    p.add_argument("--config")
    p.add_argument(
        "--no-stage",
        action="append",
        default=[],
        choices=("graph", "kt", "seq", "finetune"),
        help="skip a stage (repeatable); overrides the config's enabled flags",
    )
    p.set_defaults(func=cmd_run)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level), format="%(levelname)s %(message)s"
    )
    try:
        _check_required(args)
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 3
    except (
        datasets.DataError,
        kgraph.GraphError,
        interp.ProviderError,
        interp.CacheError,
        storage.StorageError,
        RuntimeError,
        ValueError,
        OSError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
