"""Learner-sequence data: loading, synthetic generation, leave-one-out splitting.

A learner's history is an ordered list of (concept, correctness) records.
Concept names are interned to contiguous integer ids in first-appearance
order; the id map travels as a json sidecar so every later stage agrees on
the numbering.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

MIN_SEQUENCE_LEN = 3  # leave-one-out needs train/valid/test slots

SEQUENCE_COLUMNS = ("learner_id", "concept_name", "correct", "step")


class DataError(ValueError):
    """Malformed input data file."""


@dataclass(frozen=True)
class LearningRecord:
    concept: int
    correct: int
    step: int


@dataclass
class LearnerSequence:
    learner: str
    records: list[LearningRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def concepts(self) -> list[int]:
        return [r.concept for r in self.records]


@dataclass
class SplitDataset:
    """Per-learner partition: all but the last two records train, then one valid, one test."""

    train: dict[str, list[LearningRecord]]
    valid: dict[str, LearningRecord]
    test: dict[str, LearningRecord]

    @property
    def learners(self) -> list[str]:
        return list(self.train)


def _finish_learner(learner, rows, out):
    rows.sort(key=lambda r: r[2])
    records = [LearningRecord(concept=c, correct=a, step=i) for i, (c, a, _) in enumerate(rows)]
    out.append(LearnerSequence(learner=learner, records=records))


def load_sequences(path, format="tabular", names=None):
    """Read learner sequences from a tabular csv or json-lines file.

    Returns (sequences, name_to_id). Rows are grouped by learner and sorted
    by the step column (used for ordering only); steps are then renumbered
    0..n-1. Learners shorter than MIN_SEQUENCE_LEN are dropped with a
    warning, as are learners with a correctness value outside {0, 1}.
    When `names` is given it fixes the concept numbering; otherwise ids are
    interned in first-appearance order.
    """
    if format not in ("tabular", "json-lines"):
        raise DataError(f"unknown sequence format {format!r}")
    name_to_id = dict(names) if names is not None else {}
    frozen_names = names is not None
    per_learner: dict[str, list] = {}
    bad_learners: set[str] = set()

    def intern(name, lineno):
        if name in name_to_id:
            return name_to_id[name]
        if frozen_names:
            raise DataError(f"{path} line {lineno}: concept {name!r} not in the provided id map")
        name_to_id[name] = len(name_to_id)
        return name_to_id[name]

    def consume(lineno, obj):
        try:
            learner = str(obj["learner_id"])
            cname = str(obj["concept_name"])
            correct = int(obj["correct"])
            step = int(obj["step"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path} line {lineno}: malformed row ({exc})") from exc
        if correct not in (0, 1):
            bad_learners.add(learner)
            return
        cid = intern(cname, lineno)
        per_learner.setdefault(learner, []).append((cid, correct, step))

    with open(path, "r", encoding="utf-8", newline="") as fh:
        if format == "tabular":
            reader = csv.DictReader(fh)
            if reader.fieldnames is not None:
                missing = [c for c in SEQUENCE_COLUMNS if c not in reader.fieldnames]
                if missing:
                    raise DataError(f"{path} line 1: missing columns {missing}")
            for lineno, row in enumerate(reader, start=2):
                if None in row.values() or None in row:
                    raise DataError(f"{path} line {lineno}: malformed row (wrong column count)")
                consume(lineno, row)
        else:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DataError(f"{path} line {lineno}: malformed row ({exc})") from exc
                consume(lineno, obj)

    sequences = []
    for learner, rows in per_learner.items():
        if learner in bad_learners:
            log.warning("learner %s dropped: correctness value outside {0, 1}", learner)
            continue
        if len(rows) < MIN_SEQUENCE_LEN:
            log.warning(
                "learner %s dropped: %d records < minimum %d", learner, len(rows), MIN_SEQUENCE_LEN
            )
            continue
        _finish_learner(learner, rows, sequences)
    return sequences, name_to_id


def write_sequences(seqs, path, id_to_name, format="tabular") -> None:
    """Inverse of load_sequences for the same format."""
    if format not in ("tabular", "json-lines"):
        raise DataError(f"unknown sequence format {format!r}")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if format == "tabular":
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(SEQUENCE_COLUMNS)
            for seq in seqs:
                for rec in seq.records:
                    writer.writerow([seq.learner, id_to_name[rec.concept], rec.correct, rec.step])
        else:
            for seq in seqs:
                for rec in seq.records:
                    obj = {
                        "learner_id": seq.learner,
                        "concept_name": id_to_name[rec.concept],
                        "correct": rec.correct,
                        "step": rec.step,
                    }
                    fh.write(json.dumps(obj, sort_keys=True) + "\n")


def save_names(name_to_id, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(name_to_id, fh, sort_keys=True, indent=0)
        fh.write("\n")


def load_names(path) -> dict[str, int]:
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    name_to_id = {str(k): int(v) for k, v in raw.items()}
    ids = sorted(name_to_id.values())
    if ids != list(range(len(ids))):
        raise DataError(f"{path}: concept ids are not contiguous from 0")
    return name_to_id


def id_to_name_map(name_to_id) -> dict[int, str]:
    return {v: k for k, v in name_to_id.items()}


def generate_synthetic(
    num_concepts,
    num_learners,
    graph,
    walk_bias,
    seed,
    min_len=10,
    max_len=30,
    start=None,
):
    """Synthetic learners as biased random walks on the graph.

    At each step the next concept is a uniformly chosen graph successor of
    the current one with probability `walk_bias`, otherwise uniform over all
    concepts; a node without successors always falls back to the uniform
    draw. Correctness is Bernoulli with per-(learner, concept) mastery
    1 - 0.5**(1 + prior exposures), so repeated study raises the success
    rate. Fully reproducible from `seed`.
    """
    if not 0.0 <= walk_bias <= 1.0:
        raise ValueError(f"walk_bias must be in [0, 1], got {walk_bias}")
    if not graph.nodes:
        raise ValueError("graph is empty")
    if max(graph.nodes) >= num_concepts:
        raise ValueError(
            f"graph node {max(graph.nodes)} outside concept range [0, {num_concepts})"
        )
    if min_len < MIN_SEQUENCE_LEN:
        raise ValueError(f"min_len must be >= {MIN_SEQUENCE_LEN}")
    rng = np.random.default_rng(seed)
    succ = {k: graph.successors(k) for k in graph.nodes}
    sequences = []
    for u in range(num_learners):
        length = int(rng.integers(min_len, max_len + 1))
        exposures: dict[int, int] = {}
        if start is not None:
            current = int(start)
        else:
            current = int(rng.integers(num_concepts))
        records = []
        for step in range(length):
            mastery = 1.0 - 0.5 ** (1 + exposures.get(current, 0))
            correct = int(rng.random() < mastery)
            exposures[current] = exposures.get(current, 0) + 1
            records.append(LearningRecord(concept=current, correct=correct, step=step))
            options = succ.get(current, ())
            if options and rng.random() < walk_bias:
                current = int(options[int(rng.integers(len(options)))])
            else:
                current = int(rng.integers(num_concepts))
        sequences.append(LearnerSequence(learner=f"u{u:04d}", records=records))
    return sequences


def split_leave_one_out(seqs) -> SplitDataset:
    """Last record to test, second-to-last to valid, the rest to train."""
    train, valid, test = {}, {}, {}
    for seq in seqs:
        if len(seq.records) < MIN_SEQUENCE_LEN:
            raise ValueError(
                f"learner {seq.learner}: {len(seq.records)} records, "
                f"need >= {MIN_SEQUENCE_LEN} for leave-one-out"
            )
        train[seq.learner] = list(seq.records[:-2])
        valid[seq.learner] = seq.records[-2]
        test[seq.learner] = seq.records[-1]
    return SplitDataset(train=train, valid=valid, test=test)
