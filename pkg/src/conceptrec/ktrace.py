"""Knowledge tracing: a recurrent model of per-concept mastery over a history.

Each (concept, correct) interaction is embedded as a single token (index
concept + correct * K, so 2K rows) and fed through a gated recurrent cell.
The hidden state doubles as the learner's knowledge state for the
recommender; a sigmoid head reads out per-concept mastery probabilities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from . import nnutil


@dataclass
class KtConfig:
    num_concepts: int
    input_dim: int = 64
    hidden_dim: int = 64
    loss: str = "mse"  # squared error on next-step correctness; "bce" as alternative
    seed: int = 0

    def validate(self) -> None:
        if self.num_concepts < 1:
            raise ValueError(f"num_concepts must be positive, got {self.num_concepts}")
        if self.input_dim < 1 or self.hidden_dim < 1:
            raise ValueError("input_dim and hidden_dim must be positive")
        if self.loss not in ("mse", "bce"):
            raise ValueError(f"unknown kt loss {self.loss!r}")


class GatedCell(nn.Module):
    """Gated recurrent cell with the update gate weighting the candidate.

        r = sigmoid(i_r + h_r)
        z = sigmoid(i_z + h_z)
        n = tanh(i_n + r * h_n)
        h' = (1 - z) * h + z * n

    Note z multiplies the candidate n, so all-zero parameters give
    h' = 0.5 * h and the state stays at its zero start.
    """

    def __init__(self, input_dim, hidden_dim, generator):
        super().__init__()
        self.weight_ih = nn.Parameter(torch.empty(3 * hidden_dim, input_dim))
        self.weight_hh = nn.Parameter(torch.empty(3 * hidden_dim, hidden_dim))
        self.bias_ih = nn.Parameter(torch.empty(3 * hidden_dim))
        self.bias_hh = nn.Parameter(torch.empty(3 * hidden_dim))
        bound = 1.0 / math.sqrt(hidden_dim)
        for p in self.parameters():
            nnutil.uniform_(p, bound, generator)

    def forward(self, x, h) -> torch.Tensor:
        gi = x @ self.weight_ih.T + self.bias_ih
        gh = h @ self.weight_hh.T + self.bias_hh
        i_r, i_z, i_n = gi.chunk(3, dim=-1)
        h_r, h_z, h_n = gh.chunk(3, dim=-1)
        r = torch.sigmoid(i_r + h_r)
        z = torch.sigmoid(i_z + h_z)
        n = torch.tanh(i_n + r * h_n)
        return (1.0 - z) * h + z * n


class KnowledgeTracer(nn.Module):
    def __init__(self, config):
        super().__init__()
        config.validate()
        self.config = config
        gen = nnutil.make_generator(config.seed)
        self.pair_embedding = nn.Embedding(2 * config.num_concepts, config.input_dim)
        nnutil.init_embedding(self.pair_embedding, gen)
        self.cell = GatedCell(config.input_dim, config.hidden_dim, gen)
        self.head = nn.Linear(config.hidden_dim, config.num_concepts)
        nnutil.init_linear(self.head, gen)

    def forward(self, concepts, corrects):
        """Run the cell over (B, T) concept/correct tensors.

        Returns (hidden, mastery): hidden is (B, T, H) with hidden[:, t]
        the state after consuming interaction t; mastery is (B, T, K)
        sigmoid probabilities. Padding positions are the caller's problem;
        mask them out of any loss.
        """
        if concepts.shape != corrects.shape:
            raise ValueError("concepts and corrects must have the same shape")
        k = self.config.num_concepts
        pair = concepts + corrects * k
        x = self.pair_embedding(pair)
        batch, steps = concepts.shape
        h = torch.zeros(batch, self.config.hidden_dim, dtype=x.dtype)
        states = []
        for t in range(steps):
            h = self.cell(x[:, t], h)
            states.append(h)
        hidden = torch.stack(states, dim=1)
        mastery = torch.sigmoid(self.head(hidden))
        return hidden, mastery

    def trace(self, concepts, corrects):
        """forward() without grad, for feature extraction."""
        with torch.no_grad():
            return self.forward(concepts, corrects)


def kt_loss(mastery, concepts, corrects, mask, kind="mse") -> torch.Tensor:
    """Next-step prediction loss, averaged over valid transitions.

    Term t compares the traced mastery of the *next* concept against the
    next answer: mastery[:, t, concepts[:, t+1]] vs corrects[:, t+1]. The
    mask marks real (non-padding) positions; a transition counts only when
    both endpoints are real. Default is the squared-error form; "bce"
    swaps in binary cross entropy.
    """
    if mastery.shape[1] < 2:
        raise ValueError("need at least 2 steps for a next-step loss")
    next_concepts = concepts[:, 1:]
    pred = mastery[:, :-1].gather(2, next_concepts.unsqueeze(2)).squeeze(2)
    target = corrects[:, 1:].to(pred.dtype)
    valid = (mask[:, :-1] & mask[:, 1:]).to(pred.dtype)
    count = valid.sum()
    if count == 0:
        raise ValueError("no valid transitions under the mask")
    if kind == "mse":
        per = (pred - target) ** 2
    elif kind == "bce":
        eps = 1e-7
        p = pred.clamp(eps, 1.0 - eps)
        per = -(target * torch.log(p) + (1.0 - target) * torch.log(1.0 - p))
    else:
        raise ValueError(f"unknown kt loss {kind!r}")
    return (per * valid).sum() / count
