"""End-to-end CLI walkthrough on a small synthetic course.

Builds a 12-concept workspace, walks the individual preprocessing commands,
runs the staged pipeline twice (full and with the graph stage ablated),
prints the held-out reports side by side, and finishes with ranked
recommendations, the clustering report, and the stage-ordering refusal.

Usage:
    python3 scripts/make_demo.py [--workdir demo_workspace] [--seed 7]
"""

import argparse
import json
import shutil
import subprocess
import sys
from pathlib import Path

RUN_INI = """\
[out]
dir = {out_dir}

[data]
sequences = seqs.tsv
names = names.tsv

[graph]
path = graph.tsv

[text]
provider = fixture
fixture = fixture.json
backend = hash
dim = 16

[model]
seed = {seed}
dim = 16
blocks = 1
heads = 2
max_len = 20
kt_input_dim = 12
kt_hidden = 12

[eval]
clusters = 3

[stage:graph]
epochs = 30

[stage:kt]
epochs = 4

[stage:seq]
epochs = 2

[stage:finetune]
epochs = 4
patience = 4
"""


def cli(workdir, *args, check=True):
    cmd = [sys.executable, "-m", "conceptrec.cli", *[str(a) for a in args]]
    print(f"$ conceptrec {' '.join(str(a) for a in args)}")
    res = subprocess.run(cmd, cwd=workdir, capture_output=True, text=True)
    if check and res.returncode != 0:
        print(res.stderr, file=sys.stderr)
        raise SystemExit(f"command failed with exit code {res.returncode}")
    return res


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--workdir", default="demo_workspace", help="demo workspace directory")
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()

    work = Path(args.workdir)
    if work.exists():
        shutil.rmtree(work)
    work.mkdir(parents=True)
    print(f"workspace: {work.resolve()}\n")

    print("== 1. synthetic course data ==")
    cli(work, "gen-data",
        "--concepts", 12, "--learners", 60, "--walk-bias", 0.85,
        "--seed", args.seed, "--clusters", 3, "--out-degree", 2,
        "--min-len", 6, "--max-len", 14,
        "--out", "seqs.tsv", "--names-out", "names.tsv",
        "--graph-out", "graph.tsv", "--fixture-out", "fixture.json")

    print("\n== 2. interpretation texts and raw embeddings ==")
    cli(work, "enhance", "--graph", "graph.tsv", "--names", "names.tsv",
        "--provider", "fixture", "--fixture", "fixture.json",
        "--cache", "texts.tsv")
    cli(work, "encode", "--texts", "texts.tsv", "--backend", "hash",
        "--dim", 16, "--out", "raw.bin")

    print("\n== 3. staged pipeline, full and graph-ablated ==")
    (work / "run_full.ini").write_text(RUN_INI.format(out_dir="out_full", seed=args.seed))
    (work / "run_nograph.ini").write_text(RUN_INI.format(out_dir="out_nograph", seed=args.seed))
    cli(work, "--log", "metrics.jsonl", "run", "--config", "run_full.ini")
    cli(work, "run", "--config", "run_nograph.ini", "--no-stage", "graph")

    full = json.loads((work / "out_full" / "report.json").read_text())
    ablated = json.loads((work / "out_nograph" / "report.json").read_text())
    print(f"\n{'metric':<22}{'full':>10}{'no graph':>10}")
    for key, value in full.items():
        other = ablated.get(key)
        fmt = lambda v: "  n/a" if v is None else f"{v:.4f}"
        print(f"{key:<22}{fmt(value):>10}{fmt(other):>10}")

    print("\n== 4. ranked recommendations for learner u0003 ==")
    res = cli(work, "recommend", "--model", "out_full/model.ckpt",
              "--data", "seqs.tsv", "--graph", "graph.tsv",
              "--learner", "u0003", "--top-k", 5)
    for line in res.stdout.strip().splitlines():
        print(f"  {line}")

    print("\n== 5. raw vs adapted clustering ==")
    res = cli(work, "embed-report", "--raw", "raw.bin",
              "--adapted", "out_full/adapted_table.bin", "--k", 3)
    for line in res.stdout.strip().splitlines():
        print(f"  {line}")

    print("\n== 6. stage ordering is enforced ==")
    res = cli(work, "finetune", "--data", "seqs.tsv", "--names", "names.tsv",
              "--graph", "graph.tsv", "--embeddings", "raw.bin",
              "--out", "refused.ckpt", check=False)
    print(f"  exit code {res.returncode}: {res.stderr.strip().splitlines()[-1]}")
    print("  (pass --from-scratch to deliberately start cold)")

    print(f"\ndemo artifacts left in {work.resolve()}")


if __name__ == "__main__":
    main()
