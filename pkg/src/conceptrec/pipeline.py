"""End-to-end pipeline: staged training, one-file checkpoints, report assembly.

The full model is three cooperating modules (graph adapter, knowledge
tracer, next-concept recommender) plus the frozen raw text table they hang
off. Stages run in a fixed order:

    graph     contrastive adapter pre-training on edge-dropout views
    kt        next-step correctness training for the tracer
    seq       masked-objective pre-training for the recommender
    finetune  joint next-concept training with validation early stopping

Any stage can be skipped; `finetune` is what marks the bundle trained.
Checkpoints embed the raw text table and every module's weights, so
evaluation needs only the checkpoint, the data and the graph.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np
import torch

from . import evalkit, nnutil, storage, trainer
from .adapter import AdapterConfig, ContrastiveConfig, GraphAdapter, adapt_table, pretrain_adapter
from .kgraph import ConceptGraph
from .ktrace import KnowledgeTracer, KtConfig
from .recommender import NextConceptModel, RecConfig, top_k
from .trainer import FinetuneConfig, KtTrainConfig, SslConfig

STAGE_ORDER = ("graph", "kt", "seq", "finetune")

REPORT_KEYS = (
    "HR@1",
    "NDCG@5",
    "MRR",
    "consistency_all",
    "consistency_adherent",
    "DBI_raw",
    "DBI_adapted",
)


class PipelineError(RuntimeError):
    """Pipeline misuse: missing stage, untrained model, mismatched artifacts."""


@dataclass
class PipelineConfig:
    num_concepts: int
    text_dim: int
    dim: int = 64
    num_blocks: int = 3
    num_heads: int = 2
    max_len: int = 200
    parts: tuple = ("id", "answer", "text", "state")
    compact: bool = False
    adapter_layers: int = 2
    kt_input_dim: int = 64
    kt_hidden_dim: int = 64
    kt_loss: str = "mse"
    seed: int = 0
    cluster_k: int | None = None  # None: round(sqrt(num_concepts)), floor 2
    cluster_seed: int = 0
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    kt_train: KtTrainConfig = field(default_factory=KtTrainConfig)
    ssl: SslConfig = field(default_factory=SslConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)

    def __post_init__(self):
        self.parts = tuple(self.parts)

    def resolved_cluster_k(self) -> int:
        if self.cluster_k is not None:
            return self.cluster_k
        return max(2, round(math.sqrt(self.num_concepts)))

    def adapter_config(self) -> AdapterConfig:
        return AdapterConfig(
            dim=self.text_dim, num_layers=self.adapter_layers, seed=self.seed
        )

    def kt_config(self) -> KtConfig:
        return KtConfig(
            num_concepts=self.num_concepts,
            input_dim=self.kt_input_dim,
            hidden_dim=self.kt_hidden_dim,
            loss=self.kt_loss,
            seed=self.seed + 1,
        )

    def rec_config(self) -> RecConfig:
        return RecConfig(
            num_concepts=self.num_concepts,
            dim=self.dim,
            num_blocks=self.num_blocks,
            num_heads=self.num_heads,
            max_len=self.max_len,
            parts=self.parts,
            compact=self.compact,
            seed=self.seed + 2,
        )


@dataclass
class Pipeline:
    config: PipelineConfig
    name_to_id: dict
    raw_features: np.ndarray
    adapter: GraphAdapter
    kt: KnowledgeTracer
    model: NextConceptModel
    stages_done: list = field(default_factory=list)

    @property
    def trained(self) -> bool:
        return "finetune" in self.stages_done


def make_pipeline(config, name_to_id, raw_features) -> Pipeline:
    """Fresh modules from the config's seeds around a raw embedding table."""
    raw_features = np.asarray(raw_features, dtype=np.float32)
    if raw_features.shape != (config.num_concepts, config.text_dim):
        raise PipelineError(
            f"raw table shape {raw_features.shape} != "
            f"({config.num_concepts}, {config.text_dim})"
        )
    if len(name_to_id) != config.num_concepts:
        raise PipelineError(
            f"name map covers {len(name_to_id)} concepts, config says {config.num_concepts}"
        )
    adapter = GraphAdapter(config.adapter_config())
    kt = KnowledgeTracer(config.kt_config())
    model = NextConceptModel(
        config.rec_config(), text_dim=config.text_dim, state_dim=config.kt_hidden_dim
    )
    return Pipeline(
        config=config,
        name_to_id=dict(name_to_id),
        raw_features=raw_features,
        adapter=adapter,
        kt=kt,
        model=model,
    )


def run_stages(pipe, split, graph, stages=None, from_scratch=False):
    """Execute the requested stages; returns {stage: history}.

    `stages` defaults to all four. Stages must be requested in canonical
    order and may not revisit anything this pipeline already completed.
    A stage also needs its full prefix of earlier stages, either done on a
    previous call or requested now; `from_scratch=True` waives that prefix
    requirement (deliberately untrained modules, e.g. ablations and
    cold-start fine-tuning) but never the ordering rules.
    """
    nnutil.single_thread()
    wanted = STAGE_ORDER if stages is None else tuple(stages)
    for name in wanted:
        if name not in STAGE_ORDER:
            raise PipelineError(f"unknown stage {name!r}, expected one of {STAGE_ORDER}")
    indices = [STAGE_ORDER.index(name) for name in wanted]
    if indices != sorted(set(indices)):
        raise PipelineError(
            f"stages must be requested in the order {STAGE_ORDER}, got {wanted}"
        )
    done = max((STAGE_ORDER.index(name) for name in pipe.stages_done), default=-1)
    if indices and indices[0] <= done:
        raise PipelineError(
            f"stage {wanted[0]!r} cannot run: {STAGE_ORDER[done]!r} already completed "
            "and stages only move forward"
        )
    if not from_scratch:
        have = set(pipe.stages_done)
        for name, idx in zip(wanted, indices):
            missing = [s for s in STAGE_ORDER[:idx] if s not in have]
            if missing:
                raise PipelineError(
                    f"stage {name!r} is missing pre-trained stages: "
                    f"{', '.join(missing)} (override with from_scratch)"
                )
            have.add(name)
    histories = {}
    features = torch.as_tensor(pipe.raw_features, dtype=torch.float32)
    if "graph" in wanted:
        histories["graph"] = pretrain_adapter(
            pipe.adapter, features, graph, pipe.config.contrastive
        )
        pipe.stages_done.append("graph")
    if "kt" in wanted:
        histories["kt"] = trainer.train_kt(pipe.kt, split.train, pipe.config.kt_train)
        pipe.stages_done.append("kt")
    if "seq" in wanted:
        histories["seq"] = trainer.train_ssl(
            pipe.model,
            pipe.kt,
            pipe.adapter,
            pipe.raw_features,
            graph,
            split.train,
            pipe.config.ssl,
        )
        pipe.stages_done.append("seq")
    if "finetune" in wanted:
        loss_hist, mrr_hist = trainer.train_finetune(
            pipe.model,
            pipe.kt,
            pipe.adapter,
            pipe.raw_features,
            graph,
            split,
            pipe.config.finetune,
        )
        histories["finetune"] = loss_hist
        histories["finetune_valid_mrr"] = mrr_hist
        pipe.stages_done.append("finetune")
    return histories


def _config_meta(config) -> dict:
    meta = asdict(config)
    meta["parts"] = list(config.parts)
    return meta


def _config_from_meta(meta) -> PipelineConfig:
    meta = dict(meta)
    meta["parts"] = tuple(meta["parts"])
    meta["contrastive"] = ContrastiveConfig(**meta["contrastive"])
    meta["kt_train"] = KtTrainConfig(**meta["kt_train"])
    meta["ssl"] = SslConfig(**meta["ssl"])
    meta["finetune"] = FinetuneConfig(**meta["finetune"])
    return PipelineConfig(**meta)


def save_pipeline(path, pipe) -> None:
    meta = {
        "kind": "pipeline",
        "config": _config_meta(pipe.config),
        "name_to_id": pipe.name_to_id,
        "stages_done": list(pipe.stages_done),
    }
    tensors = {"raw_features": pipe.raw_features}
    for prefix, module in (("adapter", pipe.adapter), ("kt", pipe.kt), ("rec", pipe.model)):
        for key, value in nnutil.state_to_numpy(module).items():
            tensors[f"{prefix}.{key}"] = value
    storage.write_tensors(path, meta, tensors)


def load_pipeline(path) -> Pipeline:
    meta, tensors = storage.read_tensors(path)
    if meta.get("kind") != "pipeline":
        raise PipelineError(f"{path} is not a pipeline checkpoint")
    config = _config_from_meta(meta["config"])
    pipe = make_pipeline(config, meta["name_to_id"], tensors.pop("raw_features"))
    pipe.stages_done = list(meta["stages_done"])
    for prefix, module in (("adapter", pipe.adapter), ("kt", pipe.kt), ("rec", pipe.model)):
        state = {
            key[len(prefix) + 1 :]: torch.from_numpy(np.ascontiguousarray(value))
            for key, value in tensors.items()
            if key.startswith(prefix + ".")
        }
        module.load_state_dict(state)
    return pipe


def _require_trained(pipe) -> None:
    if not pipe.trained:
        done = ", ".join(pipe.stages_done) or "none"
        raise PipelineError(
            f"model has not been fine-tuned (stages done: {done}); "
            "run the finetune stage before asking for predictions"
        )


def recommend(pipe, graph, records, k) -> list[int]:
    """Top-k next concepts after the given history, best first."""
    _require_trained(pipe)
    if not records:
        raise PipelineError("cannot recommend from an empty history")
    if k < 1:
        raise ValueError(f"top-k must be positive, got {k}")
    nnutil.single_thread()
    features = torch.as_tensor(pipe.raw_features, dtype=torch.float32)
    text_table = torch.from_numpy(adapt_table(pipe.adapter, features, graph))
    scores = trainer.score_history(pipe.model, pipe.kt, text_table, records)
    return top_k(scores, k)


def evaluate(pipe, split, graph) -> dict:
    """The full report: ranking quality, graph consistency, cluster geometry.

    Consistency pairs are (last concept the learner actually saw, the
    model's top test-time recommendation); the adherent variant keeps only
    learners whose own history mostly follows graph direction and is null
    when there is no such learner.
    """
    _require_trained(pipe)
    nnutil.single_thread()
    ranks = trainer.model_rankings(
        pipe.model, pipe.kt, pipe.adapter, pipe.raw_features, graph, split, "test"
    )
    report = dict(evalkit.ranking_metrics(ranks.values(), hr_k=1, ndcg_k=5))

    features = torch.as_tensor(pipe.raw_features, dtype=torch.float32)
    text_table = torch.from_numpy(adapt_table(pipe.adapter, features, graph))
    pairs = {}
    histories = {}
    for learner in sorted(split.train):
        prefix = list(split.train[learner]) + [split.valid[learner]]
        scores = trainer.score_history(pipe.model, pipe.kt, text_table, prefix)
        pairs[learner] = (prefix[-1].concept, top_k(scores, 1)[0])
        histories[learner] = [r.concept for r in prefix] + [split.test[learner].concept]
    report["consistency_all"] = evalkit.consistency_ratio(pairs.values(), graph)
    adherent = evalkit.adherent_learners(histories, graph)
    if adherent:
        report["consistency_adherent"] = evalkit.consistency_ratio(
            [pairs[u] for u in sorted(adherent)], graph
        )
    else:
        report["consistency_adherent"] = None

    adapted = adapt_table(pipe.adapter, features, graph)
    report.update(
        evalkit.embedding_report(
            pipe.raw_features,
            adapted,
            pipe.config.resolved_cluster_k(),
            pipe.config.cluster_seed,
        )
    )
    missing = [key for key in REPORT_KEYS if key not in report]
    if missing:
        raise PipelineError(f"report assembly lost keys: {missing}")
    return {key: report[key] for key in REPORT_KEYS}
