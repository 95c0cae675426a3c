"""Shared fixtures: tiny graphs and a small trained-pipeline setup."""

import numpy as np
import pytest
import torch

from conceptrec import kgraph
from conceptrec.datasets import LearningRecord, LearnerSequence, split_leave_one_out

torch.set_num_threads(1)


@pytest.fixture
def chain_graph():
    # 0 -> 1 -> 2
    return kgraph.ConceptGraph(nodes=frozenset({0, 1, 2}), edges=((0, 1), (1, 2)))


@pytest.fixture
def pair_graph():
    # single directed edge 0 -> 1
    return kgraph.ConceptGraph(nodes=frozenset({0, 1}), edges=((0, 1),))


def make_records(concepts, corrects=None):
    corrects = corrects or [1] * len(concepts)
    return [
        LearningRecord(concept=c, correct=a, step=t)
        for t, (c, a) in enumerate(zip(concepts, corrects))
    ]


@pytest.fixture
def tiny_split():
    """Six learners over five concepts, enough for every stage to run."""
    rng = np.random.default_rng(0)
    seqs = []
    for u in range(6):
        length = int(rng.integers(5, 9))
        concepts = rng.integers(0, 5, size=length).tolist()
        corrects = rng.integers(0, 2, size=length).tolist()
        seqs.append(LearnerSequence(learner=f"u{u}", records=make_records(concepts, corrects)))
    return split_leave_one_out(seqs)


@pytest.fixture
def tiny_graph():
    return kgraph.planted_cluster_graph(5, 2, out_degree=1)
