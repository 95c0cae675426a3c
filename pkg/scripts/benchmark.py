"""Synthetic benchmark: full pipeline vs its ablations over several seeds.

Reproduces the numbers behind the end-to-end acceptance criteria on the
200-learner / 30-concept course: the fully pre-trained pipeline against
the ID-only ablation (text and adapter removed), the no-graph ablation
(contrastive pre-training skipped), and the cold fine-tune baseline used
for the checkpoint-chaining check.

Usage:
    python3 scripts/benchmark.py [--seeds 5] [--out bench.json]
"""

import argparse
import json
import time

import numpy as np

from conceptrec.adapter import ContrastiveConfig
from conceptrec.datasets import generate_synthetic, split_leave_one_out
from conceptrec.encoder import HashTextEncoder, encode_interpretations
from conceptrec.interp import ConceptInterpretation
from conceptrec.kgraph import planted_cluster_graph
from conceptrec.pipeline import PipelineConfig, evaluate, make_pipeline, run_stages
from conceptrec.trainer import FinetuneConfig, KtTrainConfig, SslConfig

FULL_PARTS = ("id", "answer", "text", "state")


def course_table(graph, num_concepts, dim=32):
    names = {f"c{k:04d}": k for k in range(num_concepts)}
    id_to_name = {v: k for k, v in names.items()}
    interps = [
        ConceptInterpretation(
            id=k,
            name=id_to_name[k],
            explanation=(
                f"{id_to_name[k]} is study unit {k} of the course; "
                "it drills one idea until the pattern is routine."
            ),
            predecessors=tuple(id_to_name[p] for p in graph.predecessors(k)),
            successors=tuple(id_to_name[s] for s in graph.successors(k)),
        )
        for k in range(num_concepts)
    ]
    _, matrix = encode_interpretations(interps, HashTextEncoder(dim))
    return names, matrix


def course_config(seed, parts=FULL_PARTS, finetune_epochs=3):
    # same small downstream budget as the acceptance gate: the pre-trained
    # table geometry has to carry, not be relearned during fine-tuning
    return PipelineConfig(
        num_concepts=30, text_dim=32, dim=32, num_blocks=2, num_heads=2,
        max_len=40, parts=parts, kt_input_dim=32, kt_hidden_dim=32,
        seed=seed, cluster_k=4,
        contrastive=ContrastiveConfig(epochs=40, seed=seed),
        kt_train=KtTrainConfig(epochs=8, batch_size=64, seed=seed),
        ssl=SslConfig(epochs=2, batch_size=64, max_span=6, seed=seed),
        finetune=FinetuneConfig(epochs=finetune_epochs, batch_size=64,
                                patience=3, seed=seed),
    )


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--out", default=None, help="also dump the table as json")
    args = ap.parse_args()

    graph = planted_cluster_graph(30, 4, out_degree=2)
    names, raw = course_table(graph, 30)

    rows = []
    started = time.perf_counter()
    for seed in range(args.seeds):
        seqs = generate_synthetic(30, 200, graph, 0.8, seed=seed,
                                  min_len=6, max_len=14)
        split = split_leave_one_out(seqs)
        row = {"seed": seed}

        pipe = make_pipeline(course_config(seed), names, raw)
        hist = run_stages(pipe, split, graph)
        report = evaluate(pipe, split, graph)
        row["full_hr1"] = report["HR@1"]
        row["full_mrr"] = report["MRR"]
        row["full_first_loss"] = hist["finetune"][0]

        ablation = make_pipeline(
            course_config(seed, parts=("id", "answer", "state")), names, raw
        )
        run_stages(ablation, split, graph,
                   stages=("kt", "seq", "finetune"), from_scratch=True)
        row["id_hr1"] = evaluate(ablation, split, graph)["HR@1"]

        nograph = make_pipeline(course_config(seed), names, raw)
        run_stages(nograph, split, graph,
                   stages=("kt", "seq", "finetune"), from_scratch=True)
        row["nograph_hr1"] = evaluate(nograph, split, graph)["HR@1"]

        scratch = make_pipeline(course_config(seed, finetune_epochs=1), names, raw)
        hist = run_stages(scratch, split, graph,
                          stages=("finetune",), from_scratch=True)
        row["scratch_first_loss"] = hist["finetune"][0]

        rows.append(row)
        print(f"seed {seed}: full {row['full_hr1']:.3f}  id-only {row['id_hr1']:.3f}  "
              f"no-graph {row['nograph_hr1']:.3f}  "
              f"first-loss {row['full_first_loss']:.3f} vs {row['scratch_first_loss']:.3f}")

    mean = lambda key: float(np.mean([r[key] for r in rows]))
    elapsed = time.perf_counter() - started
    print(f"\nmeans over {args.seeds} seeds ({elapsed:.0f}s):")
    print(f"  HR@1 full      {mean('full_hr1'):.4f}")
    print(f"  HR@1 id-only   {mean('id_hr1'):.4f}")
    print(f"  HR@1 no-graph  {mean('nograph_hr1'):.4f}")
    print(f"  first fine-tune loss: pre-trained {mean('full_first_loss'):.4f} "
          f"vs cold {mean('scratch_first_loss'):.4f}")
    print(f"  directional checks: full >= id-only: "
          f"{mean('full_hr1') >= mean('id_hr1')}, "
          f"full >= no-graph: {mean('full_hr1') >= mean('nograph_hr1')}, "
          f"chained loss lower: {mean('full_first_loss') < mean('scratch_first_loss')}")

    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"rows": rows, "elapsed_sec": elapsed}, fh, indent=2)
        print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
