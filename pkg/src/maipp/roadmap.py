"""Probabilistic roadmaps, Laplacian positional encodings and agent observations."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .gp import BeliefModel, posterior
from .intent import AccumulatedIntent

log = logging.getLogger(__name__)

NODE_FEATURES = 5
AGENT_FEATURES = 4
ENCODING_DIM = 32


class DisconnectedGraphError(ValueError):
    def __init__(self, n_components: int) -> None:
        super().__init__(f"graph is disconnected ({n_components} components)")
        self.n_components = n_components


@dataclass(frozen=True)
class RoadmapGraph:
    nodes: np.ndarray
    adjacency: np.ndarray
    k: int
    seed: int | None = None

    @property
    def n(self) -> int:
        return len(self.nodes)

    @property
    def degrees(self) -> np.ndarray:
        return self.adjacency.sum(axis=1)

    def edges(self) -> np.ndarray:
        i, j = np.nonzero(np.triu(self.adjacency, 1))
        return np.column_stack([i, j])

    def n_components(self) -> int:
        return int(connected_components(self.adjacency, directed=False)[0])

    def export_csv(self, nodes_path: str | Path, edges_path: str | Path) -> None:
        ids = np.arange(self.n)
        np.savetxt(nodes_path, np.column_stack([ids, self.nodes]), delimiter=",", header="node_id,x,y", comments="", fmt=["%d", "%.17g", "%.17g"])
        np.savetxt(edges_path, self.edges(), delimiter=",", header="source,target", comments="", fmt="%d")


def knn_graph(points, k: int) -> np.ndarray:
    """Symmetric boolean adjacency from the union of each node's k nearest neighbours."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    n = len(pts)
    _, idx = cKDTree(pts).query(pts, k=min(k + 1, n))
    adj = np.zeros((n, n), dtype=bool)
    for i, row in enumerate(np.atleast_2d(idx)):
        for j in row:
            if j != i:
                adj[i, j] = True
    adj |= adj.T
    return adj


def build_prm(seed: int, n: int = 200, k: int = 20) -> RoadmapGraph:
    """n uniform nodes with k-NN edges; k grows until the roadmap is connected."""
    if not n > k >= 1:
        raise ValueError(f"build_prm needs n > k >= 1, got n={n}, k={k}")
    nodes = np.random.default_rng(seed).uniform(0.0, 1.0, size=(n, 2))
    k_used = k
    adj = knn_graph(nodes, k_used)
    while connected_components(adj, directed=False)[0] > 1 and k_used < n - 1:
        k_used += 1
        adj = knn_graph(nodes, k_used)
    if k_used != k:
        log.info("roadmap seed=%s disconnected at k=%d; connected at k=%d", seed, k, k_used)
    return RoadmapGraph(nodes, adj, k_used, seed)


@dataclass(frozen=True)
class SpectralEncoding:
    vectors: np.ndarray
    eigenvalues: np.ndarray

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def laplacian(adjacency: np.ndarray) -> np.ndarray:
    a = np.asarray(adjacency, dtype=float)
    return np.diag(a.sum(axis=1)) - a


def spectral_encoding(graph: RoadmapGraph | np.ndarray, dim: int = ENCODING_DIM) -> SpectralEncoding:
    """Eigenvectors of L = D − A for the ``dim`` smallest non-trivial eigenvalues.

    Each vector is sign-normalised so its first clearly non-zero entry is
    positive. Graphs with fewer than ``dim + 1`` nodes are zero-padded to
    ``dim`` columns (``eigenvalues`` lists only the real ones).
    """
    adj = graph.adjacency if isinstance(graph, RoadmapGraph) else np.asarray(graph)
    ncomp = int(connected_components(adj, directed=False)[0])
    if ncomp > 1:
        raise DisconnectedGraphError(ncomp)
    vals, vecs = np.linalg.eigh(laplacian(adj))
    m = min(dim, len(vals) - 1)
    vals, vecs = vals[1 : 1 + m], vecs[:, 1 : 1 + m].copy()
    for j in range(m):
        nz = np.flatnonzero(np.abs(vecs[:, j]) > 1e-12)
        if len(nz) and vecs[nz[0], j] < 0:
            vecs[:, j] *= -1.0
    out = np.zeros((len(adj), dim))
    out[:, :m] = vecs
    return SpectralEncoding(out, vals)


@dataclass(frozen=True)
class AgentFeatures:
    position: tuple[float, float]
    remaining_budget: float
    mu_th: float = 0.4

    def as_array(self) -> np.ndarray:
        return np.array([self.position[0], self.position[1], self.remaining_budget, self.mu_th])


@dataclass(frozen=True)
class Observation:
    """Per-agent observation at one decision plus the previous decision's features.

    ``nodes`` columns: relative x, relative y, GP mean, GP variance, fused intent.
    """

    graph_id: str
    nodes: np.ndarray
    encoding: np.ndarray
    agent: np.ndarray
    prev_nodes: np.ndarray
    prev_agent: np.ndarray

    @property
    def n(self) -> int:
        return len(self.nodes)


def augmented_nodes(graph: RoadmapGraph, belief: BeliefModel, fused: AccumulatedIntent | None, position) -> np.ndarray:
    post = posterior(belief, graph.nodes)
    rel = graph.nodes - np.asarray(position, dtype=float)
    f = fused(graph.nodes) if fused is not None else np.zeros(graph.n)
    return np.column_stack([rel, post.mean, post.var, f])


def build_observation(
    graph: RoadmapGraph,
    encoding: SpectralEncoding,
    belief: BeliefModel,
    fused_intent: AccumulatedIntent | None,
    agent: AgentFeatures,
    previous: Observation | None = None,
    graph_id: str = "",
) -> Observation:
    """Assemble {augmented nodes, positional encoding, agent features}.

    ``previous`` is the same agent's observation at its prior decision; at the
    first decision the current features stand in for it.
    """
    nodes = augmented_nodes(graph, belief, fused_intent, agent.position)
    a = agent.as_array()
    if previous is None:
        prev_nodes, prev_agent = nodes, a
    else:
        if previous.n != graph.n:
            raise ValueError("previous observation was built on a different graph")
        prev_nodes, prev_agent = previous.nodes, previous.agent
    return Observation(graph_id, nodes, encoding.vectors, a, prev_nodes, prev_agent)
