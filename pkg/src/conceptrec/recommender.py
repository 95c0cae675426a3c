"""Next-concept recommender: fused inputs, self-attention encoder, ranking head.

Per-position input is a concatenation of up to four fixed-order parts, each
of width `dim`:

    id       learned concept embedding (one extra row serves mask/padding)
    answer   learned correctness embedding; a third learned vector stands
             in when the answer is hidden or unknown
    text     graph-adapted text vector of the concept, projected to dim
    state    knowledge-tracer hidden state, projected to dim

The fused sequence plus learned positions runs through post-norm
self-attention blocks; a linear head scores every concept. Ranking breaks
score ties by ascending concept id so results never depend on sort
internals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import nnutil

PART_ORDER = ("id", "answer", "text", "state")
ANSWER_HIDDEN = 2  # answer token for masked or not-yet-known correctness
NEG_INF = float("-inf")


@dataclass
class RecConfig:
    num_concepts: int
    dim: int = 64
    num_blocks: int = 3
    num_heads: int = 2
    max_len: int = 200
    ff_hidden: int = 0  # 0 means same as the fused width
    parts: tuple = field(default=PART_ORDER)
    compact: bool = False  # project the fused concatenation back down to dim
    seed: int = 0

    def validate(self) -> None:
        if self.num_concepts < 1:
            raise ValueError(f"num_concepts must be positive, got {self.num_concepts}")
        if self.dim < 1 or self.num_blocks < 1 or self.max_len < 1:
            raise ValueError("dim, num_blocks and max_len must be positive")
        parts = tuple(self.parts)
        if not parts or any(p not in PART_ORDER for p in parts):
            raise ValueError(f"parts must be a non-empty subset of {PART_ORDER}, got {parts}")
        if len(set(parts)) != len(parts):
            raise ValueError(f"duplicate entries in parts: {parts}")
        if tuple(p for p in PART_ORDER if p in parts) != parts:
            raise ValueError(f"parts must keep the order {PART_ORDER}, got {parts}")
        if "id" not in parts:
            raise ValueError("the id part is not optional")
        if self.width % self.num_heads != 0:
            raise ValueError(
                f"fused width {self.width} not divisible by {self.num_heads} heads"
            )

    @property
    def width(self) -> int:
        if self.compact:
            return self.dim
        return len(tuple(self.parts)) * self.dim

    @property
    def mask_token(self) -> int:
        return self.num_concepts


class AttentionBlock(nn.Module):
    """Post-norm transformer block: LN(x + MHA(x)) then LN(h + FFN(h))."""

    def __init__(self, width, num_heads, ff_hidden, generator):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = width // num_heads
        self.query = nn.Linear(width, width)
        self.key = nn.Linear(width, width)
        self.value = nn.Linear(width, width)
        self.out = nn.Linear(width, width)
        self.ff1 = nn.Linear(width, ff_hidden)
        self.ff2 = nn.Linear(ff_hidden, width)
        for layer in (self.query, self.key, self.value, self.out, self.ff1, self.ff2):
            nnutil.init_linear(layer, generator)
        self.norm1 = nn.LayerNorm(width)
        self.norm2 = nn.LayerNorm(width)

    def _split(self, x):
        batch, steps, _ = x.shape
        return x.view(batch, steps, self.num_heads, self.head_dim).transpose(1, 2)

    def forward(self, x, attn_bias, need_weights=False):
        batch, steps, width = x.shape
        q = self._split(self.query(x))
        k = self._split(self.key(x))
        v = self._split(self.value(x))
        att = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        att = att + attn_bias
        att = torch.softmax(att, dim=-1)
        mixed = (att @ v).transpose(1, 2).reshape(batch, steps, width)
        h = self.norm1(x + self.out(mixed))
        f = self.ff2(torch.relu(self.ff1(h)))
        out = self.norm2(h + f)
        if need_weights:
            return out, att
        return out


class NextConceptModel(nn.Module):
    def __init__(self, config, text_dim=None, state_dim=None):
        super().__init__()
        config.validate()
        parts = tuple(config.parts)
        if "text" in parts and not text_dim:
            raise ValueError("text part requested but text_dim not given")
        if "state" in parts and not state_dim:
            raise ValueError("state part requested but state_dim not given")
        self.config = config
        self.parts = parts
        gen = nnutil.make_generator(config.seed)
        d = config.dim
        self.concept_embedding = nn.Embedding(config.num_concepts + 1, d)
        nnutil.init_embedding(self.concept_embedding, gen)
        self.answer_embedding = nn.Embedding(2, d)
        nnutil.init_embedding(self.answer_embedding, gen)
        self.answer_hidden = nn.Parameter(torch.empty(d))
        nnutil.uniform_(self.answer_hidden, 1.0 / math.sqrt(d), gen)
        if "text" in parts:
            self.text_projection = nn.Linear(text_dim, d)
            nnutil.init_linear(self.text_projection, gen)
        if "state" in parts:
            self.state_projection = nn.Linear(state_dim, d)
            nnutil.init_linear(self.state_projection, gen)
        if config.compact:
            self.fuse_projection = nn.Linear(len(parts) * d, d)
            nnutil.init_linear(self.fuse_projection, gen)
        width = config.width
        self.position_embedding = nn.Embedding(config.max_len, width)
        nnutil.init_embedding(self.position_embedding, gen, bound=1.0 / math.sqrt(width))
        ff_hidden = config.ff_hidden or width
        self.blocks = nn.ModuleList(
            AttentionBlock(width, config.num_heads, ff_hidden, gen)
            for _ in range(config.num_blocks)
        )
        self.score_head = nn.Linear(width, config.num_concepts)
        nnutil.init_linear(self.score_head, gen)
        # multi-label head over concepts; reads graph-derived attributes off
        # either fused inputs or encoded features during pre-training
        self.attr_head = nn.Linear(width, config.num_concepts)
        nnutil.init_linear(self.attr_head, gen)

    def fuse(self, concepts, answers, states, text_table) -> torch.Tensor:
        """Concatenate the configured parts for (B, T) token tensors.

        `concepts` uses id K for mask/padding; `answers` uses 2 for hidden.
        `states` is (B, T, state_dim), zeros wherever the tracer state must
        not leak (padding, masked positions). `text_table` is the adapted
        (K, text_dim) table; the mask token reads a zero text row.
        """
        pieces = []
        if "id" in self.parts:
            pieces.append(self.concept_embedding(concepts))
        if "answer" in self.parts:
            known = self.answer_embedding(answers.clamp(max=1))
            hidden = self.answer_hidden.expand_as(known)
            pieces.append(torch.where((answers == ANSWER_HIDDEN).unsqueeze(-1), hidden, known))
        if "text" in self.parts:
            zero_row = torch.zeros(1, text_table.shape[1], dtype=text_table.dtype)
            padded = torch.cat([text_table, zero_row], dim=0)
            pieces.append(self.text_projection(padded[concepts]))
        if "state" in self.parts:
            pieces.append(self.state_projection(states))
        fused = torch.cat(pieces, dim=-1)
        if self.config.compact:
            fused = self.fuse_projection(fused)
        return fused

    def _attention_bias(self, real_mask, causal):
        batch, steps = real_mask.shape
        bias = torch.zeros(batch, 1, steps, steps)
        if causal:
            future = torch.triu(torch.ones(steps, steps, dtype=torch.bool), diagonal=1)
            bias = bias.masked_fill(future, NEG_INF)
        else:
            key_pad = ~real_mask.view(batch, 1, 1, steps)
            bias = bias.masked_fill(key_pad, NEG_INF)
            # padded query rows may end up with no live key; let them see
            # themselves so softmax stays finite
            eye = torch.eye(steps, dtype=torch.bool).view(1, 1, steps, steps)
            bias = bias.masked_fill(eye, 0.0)
        return bias

    def encode(self, concepts, answers, states, text_table, real_mask, causal=True,
               return_attention=False):
        """Fused inputs -> per-position features (B, T, width).

        `real_mask` marks non-padding positions; with the causal flag the
        attention is strictly left-to-right (padding sits on the right, so
        real positions never see it), without it attention is bidirectional
        and padded keys are excluded explicitly. `return_attention` also
        hands back each block's softmaxed attention matrix.
        """
        steps = concepts.shape[1]
        if steps > self.config.max_len:
            raise ValueError(f"sequence length {steps} exceeds max_len {self.config.max_len}")
        x = self.fuse(concepts, answers, states, text_table)
        positions = torch.arange(steps).unsqueeze(0)
        x = x + self.position_embedding(positions)
        bias = self._attention_bias(real_mask, causal)
        attention = []
        for block in self.blocks:
            if return_attention:
                x, att = block(x, bias, need_weights=True)
                attention.append(att)
            else:
                x = block(x, bias)
        if return_attention:
            return x, attention
        return x

    def scores(self, features) -> torch.Tensor:
        return self.score_head(features)


def rec_loss(logits, targets, mask) -> torch.Tensor:
    """Cross entropy over concepts, averaged over positions where mask is set."""
    valid = mask.reshape(-1)
    if int(valid.sum()) == 0:
        raise ValueError("no valid positions under the mask")
    flat_logits = logits.reshape(-1, logits.shape[-1])[valid]
    flat_targets = targets.reshape(-1)[valid]
    return F.cross_entropy(flat_logits, flat_targets)


def rank_of(scores, target) -> int:
    """1-based rank of `target` under descending score, ties to the smaller id."""
    scores = np.asarray(scores, dtype=np.float64)
    s = scores[target]
    better = int(np.sum(scores > s))
    tied_before = int(np.sum(scores[:target] == s))
    return 1 + better + tied_before


def top_k(scores, k) -> list[int]:
    """Ids of the k best scores, descending, ties broken by ascending id."""
    scores = np.asarray(scores, dtype=np.float64)
    ids = np.arange(len(scores))
    order = np.lexsort((ids, -scores))
    return order[:k].tolist()
