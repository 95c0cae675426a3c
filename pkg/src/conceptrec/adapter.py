"""Graph adapter: message passing over the concept graph plus contrastive training.

The text encoder knows nothing about the graph, so its vectors are adapted
by a small stack of shared affine layers with neighbor mean-aggregation.
Training is self-supervised: two independently edge-dropped views of the
graph must map each concept to nearby points while other concepts stay far,
scored by a temperature-scaled cosine objective.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import nnutil
from .kgraph import edge_dropout_view


@dataclass
class AdapterConfig:
    dim: int
    num_layers: int = 2
    combine: str = "tanh"  # "tanh" or "linear"; linear exists for closed-form checks
    directed: bool = False  # False: messages flow both ways along every edge
    seed: int = 0

    def validate(self) -> None:
        if self.dim < 1:
            raise ValueError(f"adapter dim must be positive, got {self.dim}")
        if self.num_layers < 1:
            raise ValueError(f"adapter needs >= 1 layer, got {self.num_layers}")
        if self.combine not in ("tanh", "linear"):
            raise ValueError(f"unknown combine {self.combine!r}")


@dataclass
class ContrastiveConfig:
    gamma: float = 0.3  # fraction of edges dropped per view
    tau: float = 0.2
    epochs: int = 60
    lr: float = 0.05
    optimizer: str = "sgd"
    include_positive: bool = False  # keep the matched pair out of the denominator
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must be in [0, 1), got {self.gamma}")
        if self.tau <= 0.0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        # lr = 0 is legal: a zero step must leave parameters bitwise intact
        if self.lr < 0.0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")


class GraphAdapter(nn.Module):
    """Stacked neighborhood smoothing with one affine map per layer.

    Layer update for node k:
        t = H_l(h)                      shared affine on every node
        agg_k = mean of t over k's neighbors (zero vector when isolated)
        h'_k = combine(t_k + agg_k)     combine = tanh by default

    Undirected mode treats every edge as bidirectional for aggregation;
    directed mode lets messages flow only from predecessors.
    """

    def __init__(self, config):
        super().__init__()
        config.validate()
        self.config = config
        gen = nnutil.make_generator(config.seed)
        self.layers = nn.ModuleList(
            nn.Linear(config.dim, config.dim) for _ in range(config.num_layers)
        )
        for layer in self.layers:
            nnutil.init_linear(layer, gen)

    def _edge_index(self, graph):
        if graph.num_edges == 0:
            src = torch.zeros(0, dtype=torch.int64)
            return src, src.clone()
        arr = np.asarray(graph.edges, dtype=np.int64)
        src, dst = arr[:, 0], arr[:, 1]
        if not self.config.directed:
            src, dst = np.concatenate([src, dst]), np.concatenate([dst, src])
        return torch.from_numpy(src.copy()), torch.from_numpy(dst.copy())

    def forward(self, features, graph) -> torch.Tensor:
        if features.shape[0] != graph.num_nodes:
            raise ValueError(
                f"feature rows ({features.shape[0]}) != graph nodes ({graph.num_nodes})"
            )
        if features.shape[1] != self.config.dim:
            raise ValueError(
                f"feature dim ({features.shape[1]}) != adapter dim ({self.config.dim})"
            )
        src, dst = self._edge_index(graph)
        deg = torch.zeros(features.shape[0], dtype=features.dtype)
        deg.index_add_(0, dst, torch.ones_like(dst, dtype=features.dtype))
        deg = deg.clamp(min=1.0).unsqueeze(1)
        h = features
        for layer in self.layers:
            t = layer(h)
            agg = torch.zeros_like(t)
            agg.index_add_(0, dst, t[src])
            h = t + agg / deg
            if self.config.combine == "tanh":
                h = torch.tanh(h)
        return h


def contrastive_loss(h1, h2, tau, include_positive=False) -> torch.Tensor:
    """Temperature-scaled cosine alignment of two views, summed over nodes.

    For node k the positive is (h1_k, h2_k) and the negatives are h2_i for
    every other node i. By default the denominator covers only the
    negatives (i != k), so the value is unbounded below and can go
    negative; `include_positive` switches to the variant whose minimum
    is 0.
    """
    if h1.shape != h2.shape:
        raise ValueError(f"view shapes differ: {tuple(h1.shape)} vs {tuple(h2.shape)}")
    n = h1.shape[0]
    if n < 2:
        raise ValueError("contrastive loss needs at least 2 nodes")
    for tag, h in (("first", h1), ("second", h2)):
        zero = (h.detach().norm(dim=1) == 0).nonzero()
        if zero.numel():
            raise ValueError(
                f"node {int(zero[0])} has a zero vector in the {tag} view; "
                "cosine similarity is undefined"
            )
    z1 = F.normalize(h1, dim=1)
    z2 = F.normalize(h2, dim=1)
    sim = z1 @ z2.T / tau
    pos = sim.diagonal()
    if include_positive:
        denom = torch.logsumexp(sim, dim=1)
    else:
        masked = sim.masked_fill(torch.eye(n, dtype=torch.bool), float("-inf"))
        denom = torch.logsumexp(masked, dim=1)
    return (denom - pos).sum()


def pretrain_adapter(adapter, features, graph, config):
    """Contrastive pre-training over edge-dropout graph views.

    Each epoch draws two independent subgraph views from one numpy stream,
    runs the shared adapter on both, and steps on the alignment loss.
    Returns the per-epoch loss history.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    opt = nnutil.make_optimizer(adapter.parameters(), config.optimizer, config.lr)
    history = []
    features = features.detach()
    for epoch in range(config.epochs):
        view1 = edge_dropout_view(graph, config.gamma, rng)
        view2 = edge_dropout_view(graph, config.gamma, rng)
        h1 = adapter(features, view1)
        h2 = adapter(features, view2)
        loss = contrastive_loss(h1, h2, config.tau, config.include_positive)
        if not torch.isfinite(loss):
            raise RuntimeError(
                f"graph stage epoch {epoch}: non-finite loss {float(loss.detach())}"
            )
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(float(loss.detach()))
    return history


def adapt_table(adapter, features, graph) -> np.ndarray:
    """Run the adapter on the full table without grad; rows stay id-ordered."""
    with torch.no_grad():
        out = adapter(torch.as_tensor(features, dtype=torch.float32), graph)
    return out.numpy().astype(np.float32)
