import math

import numpy as np
import pytest
import torch

from conceptrec import kgraph
from conceptrec.adapter import (
    AdapterConfig,
    ContrastiveConfig,
    GraphAdapter,
    adapt_table,
    contrastive_loss,
    pretrain_adapter,
)
from conceptrec.kgraph import ConceptGraph, planted_cluster_graph


def identity_adapter(dim, num_layers=1, combine="linear"):
    adapter = GraphAdapter(AdapterConfig(dim=dim, num_layers=num_layers, combine=combine))
    with torch.no_grad():
        for layer in adapter.layers:
            layer.weight.copy_(torch.eye(dim))
            layer.bias.zero_()
    return adapter


# ----------------------------------------------------------------- configs


def test_adapter_config_validation():
    with pytest.raises(ValueError):
        AdapterConfig(dim=0).validate()
    with pytest.raises(ValueError):
        AdapterConfig(dim=4, num_layers=0).validate()
    with pytest.raises(ValueError):
        AdapterConfig(dim=4, combine="relu").validate()


def test_contrastive_config_lr_zero_legal_negative_not():
    ContrastiveConfig(lr=0.0).validate()
    with pytest.raises(ValueError, match="lr"):
        ContrastiveConfig(lr=-0.1).validate()
    with pytest.raises(ValueError, match="tau"):
        ContrastiveConfig(tau=0.0).validate()
    with pytest.raises(ValueError, match="gamma"):
        ContrastiveConfig(gamma=1.0).validate()


# ---------------------------------------------------------------- forward


def test_isolated_nodes_aggregate_nothing():
    g = ConceptGraph(nodes=frozenset({0, 1}), edges=())
    x = torch.tensor([[0.2, -0.4], [1.0, 0.5]])
    linear = identity_adapter(2)
    assert torch.allclose(linear(x, g), x, atol=1e-7)
    tanh = identity_adapter(2, combine="tanh")
    # same update with the nonlinearity on top
    with torch.no_grad():
        for layer in tanh.layers:
            layer.weight.copy_(torch.eye(2))
            layer.bias.zero_()
    tanh.config = AdapterConfig(dim=2, num_layers=1, combine="tanh")
    assert torch.allclose(tanh(x, g), torch.tanh(x), atol=1e-7)


def test_two_node_identity_linear_sums_features():
    g = ConceptGraph(nodes=frozenset({0, 1}), edges=((0, 1),))
    x = torch.tensor([[1.0, 2.0], [10.0, -3.0]])
    adapter = identity_adapter(2)
    out = adapter(x, g)
    # undirected single edge: each node adds its one neighbor's transform
    assert torch.allclose(out[0], x[0] + x[1], atol=1e-6)
    assert torch.allclose(out[1], x[0] + x[1], atol=1e-6)


def test_directed_flag_limits_message_flow():
    g = ConceptGraph(nodes=frozenset({0, 1}), edges=((0, 1),))
    x = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    adapter = identity_adapter(2)
    adapter.config = AdapterConfig(dim=2, num_layers=1, combine="linear", directed=True)
    out = adapter(x, g)
    assert torch.allclose(out[0], x[0], atol=1e-6)  # no predecessors
    assert torch.allclose(out[1], x[0] + x[1], atol=1e-6)


def test_forward_matches_manual_mean_aggregation():
    # 0->1, 0->2, 1->2; one tanh layer with random weights vs a numpy replay
    g = ConceptGraph(nodes=frozenset({0, 1, 2}), edges=((0, 1), (0, 2), (1, 2)))
    cfg = AdapterConfig(dim=3, num_layers=1, combine="tanh", seed=5)
    adapter = GraphAdapter(cfg)
    x = torch.from_numpy(np.random.default_rng(0).standard_normal((3, 3)).astype(np.float32))
    out = adapter(x, g).detach().numpy()

    w = adapter.layers[0].weight.detach().numpy()
    b = adapter.layers[0].bias.detach().numpy()
    t = x.numpy() @ w.T + b
    nbrs = {k: g.neighbors(k) for k in range(3)}
    expected = np.stack(
        [np.tanh(t[k] + np.mean(t[list(nbrs[k])], axis=0)) for k in range(3)]
    )
    assert np.allclose(out, expected, atol=1e-6)


def test_forward_shape_validation(chain_graph):
    adapter = GraphAdapter(AdapterConfig(dim=4))
    with pytest.raises(ValueError, match="feature rows"):
        adapter(torch.zeros(2, 4), chain_graph)
    with pytest.raises(ValueError, match="feature dim"):
        adapter(torch.zeros(3, 5), chain_graph)


def test_same_seed_same_parameters():
    a = GraphAdapter(AdapterConfig(dim=4, seed=3))
    b = GraphAdapter(AdapterConfig(dim=4, seed=3))
    for p, q in zip(a.parameters(), b.parameters()):
        assert torch.equal(p, q)


def test_permutation_equivariance():
    g = planted_cluster_graph(6, 2, out_degree=1)
    adapter = GraphAdapter(AdapterConfig(dim=4, num_layers=2, seed=1))
    x = torch.from_numpy(np.random.default_rng(2).standard_normal((6, 4)).astype(np.float32))
    perm = [3, 5, 0, 1, 4, 2]
    inv = np.argsort(perm)
    permuted_edges = tuple((int(inv[a]), int(inv[b])) for a, b in g.edges)
    pg = ConceptGraph(nodes=frozenset(range(6)), edges=permuted_edges)
    out = adapter(x, g)
    out_p = adapter(x[perm], pg)
    assert torch.allclose(out[perm], out_p, atol=1e-6)


# ----------------------------------------------------------------- InfoNCE


def test_infonce_two_orthogonal_nodes_is_minus_two():
    h = torch.eye(2)
    loss = contrastive_loss(h, h, tau=1.0)
    # per node: logsumexp over the single negative (cos 0) minus cos 1
    assert float(loss) == pytest.approx(-2.0, abs=1e-6)


def test_infonce_scale_invariance():
    rng = np.random.default_rng(4)
    h1 = torch.from_numpy(rng.standard_normal((6, 5)))
    h2 = torch.from_numpy(rng.standard_normal((6, 5)))
    base = contrastive_loss(h1, h2, tau=0.3)
    scaled = contrastive_loss(h1 * 7.5, h2 * 0.01, tau=0.3)
    assert float(base) == pytest.approx(float(scaled), rel=1e-6)


def test_infonce_high_temperature_limit():
    # tau -> inf flattens every similarity, leaving sum_k log(K-1)
    rng = np.random.default_rng(0)
    h1 = torch.from_numpy(rng.standard_normal((4, 8)))
    h2 = torch.from_numpy(rng.standard_normal((4, 8)))
    loss = contrastive_loss(h1, h2, tau=1e4)
    assert float(loss) == pytest.approx(4 * math.log(3), abs=1e-3)


def naive_info_nce(h1, h2, tau, include_positive):
    z1 = h1 / np.linalg.norm(h1, axis=1, keepdims=True)
    z2 = h2 / np.linalg.norm(h2, axis=1, keepdims=True)
    n = len(z1)
    total = 0.0
    for k in range(n):
        pos = float(z1[k] @ z2[k]) / tau
        terms = [
            float(z1[k] @ z2[i]) / tau
            for i in range(n)
            if include_positive or i != k
        ]
        m = max(terms)
        total += m + math.log(sum(math.exp(t - m) for t in terms)) - pos
    return total


@pytest.mark.parametrize("n", [2, 7, 23, 50])
@pytest.mark.parametrize("include_positive", [False, True])
def test_infonce_matches_naive_double_loop(n, include_positive):
    rng = np.random.default_rng(n)
    h1 = rng.standard_normal((n, 6))
    h2 = rng.standard_normal((n, 6))
    got = contrastive_loss(
        torch.from_numpy(h1), torch.from_numpy(h2), tau=0.2, include_positive=include_positive
    )
    assert float(got) == pytest.approx(naive_info_nce(h1, h2, 0.2, include_positive), abs=1e-6)


def test_infonce_include_positive_nonnegative():
    rng = np.random.default_rng(9)
    h1 = torch.from_numpy(rng.standard_normal((8, 4)))
    h2 = torch.from_numpy(rng.standard_normal((8, 4)))
    assert float(contrastive_loss(h1, h2, tau=0.5, include_positive=True)) >= 0.0


def test_infonce_zero_norm_names_node():
    h = torch.ones(3, 2)
    bad = h.clone()
    bad[1] = 0.0
    with pytest.raises(ValueError, match="node 1.*second"):
        contrastive_loss(h, bad, tau=1.0)


def test_infonce_needs_two_nodes_and_matching_shapes():
    one = torch.ones(1, 3)
    with pytest.raises(ValueError, match="at least 2"):
        contrastive_loss(one, one, tau=1.0)
    with pytest.raises(ValueError, match="shapes differ"):
        contrastive_loss(torch.ones(2, 3), torch.ones(2, 4), tau=1.0)


# ---------------------------------------------------------------- training


def test_pretrain_lr_zero_leaves_parameters_bitwise():
    g = planted_cluster_graph(8, 2)
    adapter = GraphAdapter(AdapterConfig(dim=4, seed=0))
    before = [p.detach().clone() for p in adapter.parameters()]
    x = torch.from_numpy(np.random.default_rng(0).standard_normal((8, 4)).astype(np.float32))
    history = pretrain_adapter(
        adapter, x, g, ContrastiveConfig(epochs=3, lr=0.0, gamma=0.2, seed=1)
    )
    assert len(history) == 3
    for p, q in zip(adapter.parameters(), before):
        assert torch.equal(p, q)


def test_pretrain_reduces_loss_and_tightens_clusters():
    g = planted_cluster_graph(12, 2, out_degree=2)
    x = torch.from_numpy(
        np.random.default_rng(3).standard_normal((12, 8)).astype(np.float32)
    )
    adapter = GraphAdapter(AdapterConfig(dim=8, seed=0))
    history = pretrain_adapter(
        adapter, x, g, ContrastiveConfig(epochs=60, lr=0.05, gamma=0.3, tau=0.2, seed=0)
    )
    assert history[-1] < history[0]

    table = adapt_table(adapter, x, g)
    z = table / np.linalg.norm(table, axis=1, keepdims=True)
    sim = z @ z.T
    block = np.array([0] * 6 + [1] * 6)
    same = block[:, None] == block[None, :]
    off_diag = ~np.eye(12, dtype=bool)
    intra = sim[same & off_diag].mean()
    inter = sim[~same].mean()
    assert intra > inter


def test_pretrain_aborts_on_non_finite_loss():
    g = planted_cluster_graph(4, 2)
    adapter = GraphAdapter(AdapterConfig(dim=3, combine="linear", seed=0))
    x = torch.full((4, 3), float("nan"))
    with pytest.raises(RuntimeError, match="graph stage epoch 0"):
        pretrain_adapter(adapter, x, g, ContrastiveConfig(epochs=1, gamma=0.0))


def test_gradients_match_finite_differences():
    g = planted_cluster_graph(6, 2, out_degree=1)
    adapter = GraphAdapter(AdapterConfig(dim=4, num_layers=2, seed=2)).double()
    x = torch.from_numpy(np.random.default_rng(1).standard_normal((6, 4)))
    rng = np.random.default_rng(0)
    v1 = kgraph.edge_dropout_view(g, 0.3, rng)
    v2 = kgraph.edge_dropout_view(g, 0.3, rng)

    def loss_fn():
        return contrastive_loss(adapter(x, v1), adapter(x, v2), tau=0.2)

    loss = loss_fn()
    loss.backward()
    step = 1e-4
    for p in adapter.parameters():
        grad = p.grad.clone()
        fd = torch.zeros_like(p)
        flat = p.data.view(-1)
        fd_flat = fd.view(-1)
        with torch.no_grad():
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + step
                up = float(loss_fn())
                flat[i] = orig - step
                down = float(loss_fn())
                flat[i] = orig
                fd_flat[i] = (up - down) / (2 * step)
        rel = (grad - fd).norm() / max(float(grad.norm()), float(fd.norm()), 1e-12)
        assert rel < 1e-3


def test_adapt_table_matches_forward():
    g = planted_cluster_graph(5, 1)
    adapter = GraphAdapter(AdapterConfig(dim=3, seed=0))
    x = np.random.default_rng(0).standard_normal((5, 3)).astype(np.float32)
    table = adapt_table(adapter, torch.from_numpy(x), g)
    with torch.no_grad():
        direct = adapter(torch.from_numpy(x), g).numpy()
    assert table.dtype == np.float32
    assert np.array_equal(table, direct.astype(np.float32))
