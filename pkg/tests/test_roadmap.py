import numpy as np
import pytest

from maipp.gp import BeliefModel, KernelParams, posterior
from maipp.intent import fit_intent, fuse_intents
from maipp.roadmap import (
    AgentFeatures,
    DisconnectedGraphError,
    RoadmapGraph,
    build_observation,
    build_prm,
    knn_graph,
    laplacian,
    spectral_encoding,
)


def path_adj(n):
    a = np.zeros((n, n), bool)
    for i in range(n - 1):
        a[i, i + 1] = a[i + 1, i] = True
    return a


def test_default_prm_degrees_and_symmetry():
    g = build_prm(0)
    assert g.n == 200 and g.k >= 20
    assert g.degrees.min() >= 20
    assert np.array_equal(g.adjacency, g.adjacency.T)
    assert not g.adjacency.diagonal().any()
    assert g.n_components() == 1


def test_prm_deterministic():
    assert np.array_equal(build_prm(5).adjacency, build_prm(5).adjacency)


def test_two_nodes_single_edge():
    g = build_prm(1, n=2, k=1)
    assert len(g.edges()) == 1


def test_collinear_middle_node_degree_two():
    adj = knn_graph([[0.0, 0.5], [0.1, 0.5], [0.2, 0.5]], 1)
    assert adj.sum(1).tolist() == [1, 2, 1]


@pytest.mark.parametrize("n,k", [(5, 5), (3, 0), (4, 7)])
def test_invalid_prm_sizes(n, k):
    with pytest.raises(ValueError):
        build_prm(0, n, k)


def test_disconnected_knn_grows_k():
    g = build_prm(3, n=40, k=1)
    assert g.n_components() == 1 and g.k > 1


def test_path_graph_spectrum():
    enc = spectral_encoding(path_adj(4), dim=2)
    np.testing.assert_allclose(enc.eigenvalues, [2 - np.sqrt(2), 2], atol=1e-12)
    L = laplacian(path_adj(4))
    for j, lam in enumerate(enc.eigenvalues):
        q = enc.vectors[:, j]
        assert np.abs(L @ q - lam * q).max() < 1e-8


def test_complete_graph_spectrum():
    adj = ~np.eye(5, dtype=bool)
    enc = spectral_encoding(adj, dim=3)
    np.testing.assert_allclose(enc.eigenvalues, [5, 5, 5], atol=1e-12)


def test_default_prm_eigenpairs_orthonormal_and_signed():
    g = build_prm(2)
    enc = spectral_encoding(g)
    L = laplacian(g.adjacency)
    assert enc.vectors.shape == (200, 32)
    for j, lam in enumerate(enc.eigenvalues):
        q = enc.vectors[:, j]
        assert np.abs(L @ q - lam * q).max() < 1e-8
        assert q[np.flatnonzero(np.abs(q) > 1e-12)[0]] > 0
    np.testing.assert_allclose(enc.vectors.T @ enc.vectors, np.eye(32), atol=1e-8)


def test_small_graph_zero_padded():
    enc = spectral_encoding(path_adj(4))
    assert enc.vectors.shape == (4, 32) and np.all(enc.vectors[:, 3:] == 0)


def test_disconnected_graph_names_components():
    adj = np.zeros((4, 4), bool)
    adj[0, 1] = adj[1, 0] = True
    with pytest.raises(DisconnectedGraphError, match="3 components"):
        spectral_encoding(adj)


def test_permuted_graph_gives_permuted_encoding():
    # random geometric graph with a simple spectrum
    g = build_prm(3, n=30, k=6)
    enc = spectral_encoding(g)
    assert np.min(np.diff(enc.eigenvalues)) > 1e-6
    perm = np.random.default_rng(0).permutation(30)
    enc_p = spectral_encoding(g.adjacency[np.ix_(perm, perm)])
    np.testing.assert_allclose(enc_p.eigenvalues, enc.eigenvalues, atol=1e-10)
    for j in range(enc.eigenvalues.size):
        a, b = enc.vectors[perm, j], enc_p.vectors[:, j]
        assert min(np.abs(a - b).max(), np.abs(a + b).max()) < 1e-8


def test_observation_features():
    g = build_prm(0, n=30, k=5)
    enc = spectral_encoding(g)
    node = g.nodes[7]
    obs = build_observation(g, enc, BeliefModel(), fuse_intents([]), AgentFeatures(tuple(node), 2.5))
    np.testing.assert_array_equal(obs.nodes[7, :2], [0.0, 0.0])
    np.testing.assert_array_equal(obs.nodes[:, :2], g.nodes - node)
    assert np.all(obs.nodes[:, 2] == 0.0) and np.all(obs.nodes[:, 3] == 1.0)
    assert np.all(obs.nodes[:, 4] == 0.0)
    np.testing.assert_array_equal(obs.agent, [node[0], node[1], 2.5, 0.4])
    # first decision: previous features equal current ones
    assert np.array_equal(obs.prev_nodes, obs.nodes)


def test_observation_uses_belief_and_intent(rng):
    g = build_prm(0, n=30, k=5)
    enc = spectral_encoding(g)
    b = BeliefModel(rng.uniform(size=(6, 2)), rng.uniform(size=6), KernelParams())
    fused = fuse_intents([fit_intent(rng.uniform(size=(8, 2)))])
    prev = build_observation(g, enc, BeliefModel(), fuse_intents([]), AgentFeatures((0.5, 0.5), 3.0))
    obs = build_observation(g, enc, b, fused, AgentFeatures((0.5, 0.5), 2.0), prev)
    post = posterior(b, g.nodes)
    np.testing.assert_array_equal(obs.nodes[:, 2], post.mean)
    np.testing.assert_array_equal(obs.nodes[:, 3], post.var)
    np.testing.assert_array_equal(obs.nodes[:, 4], fused(g.nodes))
    assert np.all(obs.nodes[:, 4] >= 0)
    assert np.array_equal(obs.prev_nodes, prev.nodes) and np.array_equal(obs.prev_agent, prev.agent)


def test_graph_csv_export(tmp_path):
    g = build_prm(0, n=10, k=3)
    g.export_csv(tmp_path / "nodes.csv", tmp_path / "edges.csv")
    nodes = np.loadtxt(tmp_path / "nodes.csv", delimiter=",", skiprows=1)
    edges = np.loadtxt(tmp_path / "edges.csv", delimiter=",", skiprows=1, dtype=int)
    np.testing.assert_array_equal(nodes[:, 1:], g.nodes)
    assert len(edges) == g.adjacency.sum() // 2
