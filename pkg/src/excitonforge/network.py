"""
Similarity network over efficient structures, Markov clustering and layout.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import networkx as nx
import numpy as np
from joblib import Parallel, delayed
from scipy import sparse
from scipy.sparse.csgraph import connected_components

from .exceptions import ConvergenceError
from .geometry import SiteConfiguration
from .similarity import PreparedStructure, prepare, score_prepared

logger = logging.getLogger(__name__)

PRUNE_THRESHOLD = 1e-12
ATTRACTOR_TIE_TOLERANCE = 1e-6
ROW_BLOCK = 32


@dataclass(frozen=True)
class NodeRef:
    seed: Optional[int]
    epsilon: float


@dataclass(frozen=True)
class EfficiencyNetwork:
    """
    Undirected similarity graph; edges are (i, j) with i < j, sorted, each with its S^2.
    """

    nodes: Tuple[NodeRef, ...]
    edges: np.ndarray
    s_squared: np.ndarray
    cutoff: float

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_edges(self) -> int:
        return int(self.edges.shape[0])

    def adjacency(self) -> sparse.csc_matrix:
        """Symmetric 0/1 adjacency matrix without self-loops."""
        n = self.n_nodes
        if self.n_edges == 0:
            return sparse.csc_matrix((n, n))
        rows = np.concatenate([self.edges[:, 0], self.edges[:, 1]])
        cols = np.concatenate([self.edges[:, 1], self.edges[:, 0]])
        return sparse.csc_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))

    def to_networkx(self) -> nx.Graph:
        graph = nx.Graph()
        graph.add_nodes_from(range(self.n_nodes))
        graph.add_weighted_edges_from(
            ((int(i), int(j), float(w)) for (i, j), w in zip(self.edges, self.s_squared)), weight="s_squared"
        )
        return graph

    def degrees(self) -> np.ndarray:
        return np.bincount(self.edges.ravel(), minlength=self.n_nodes) if self.n_edges else np.zeros(self.n_nodes, int)


@dataclass(frozen=True)
class ClusterPartition:
    """
    Node to cluster assignment. Cluster ids are dense from 1 in order of
    descending population; `populations` are fractions of all nodes.
    """

    assignment: np.ndarray
    populations: Dict[int, float]
    noise_clusters: Tuple[int, ...] = ()
    ambiguous_nodes: Tuple[int, ...] = ()
    iterations: int = 0
    residual: float = 0.0
    max_stochasticity_error: float = 0.0
    inflation: float = 1.4

    @property
    def noise_fraction(self) -> float:
        return float(sum(self.populations[c] for c in self.noise_clusters))

    @property
    def n_clusters(self) -> int:
        return len(self.populations)

    def members(self, cluster_id: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == cluster_id)


@dataclass(frozen=True)
class LayoutCoordinates:
    coordinates: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    def __post_init__(self):
        if not np.all(np.isfinite(self.coordinates)):
            raise ValueError("layout produced non-finite coordinates")


def _score_rows(prepared: Sequence[PreparedStructure], rows: Sequence[int], cutoff: float):
    found = []
    for i in rows:
        for j in range(i + 1, len(prepared)):
            result = score_prepared(prepared[i], prepared[j], cutoff=cutoff)
            if result.s_squared < cutoff:
                if not result.exact:
                    result = score_prepared(prepared[i], prepared[j])
                found.append((i, j, result.s_squared))
    return found


def build_network(
    structures: Sequence[SiteConfiguration],
    cutoff: float,
    epsilons: Optional[Sequence[float]] = None,
    workers: int = 1,
) -> EfficiencyNetwork:
    """
    Links every pair of structures whose similarity S^2 lies below `cutoff`.

    The bounded search uses the cutoff for early exit; linked pairs are
    rescored exactly so the stored S^2 is the true minimum.

    Args:
        structures: Efficient structures, all with the same number of sites.
        cutoff: Link threshold in r0^2.
        epsilons: Efficiency of each structure, stored on the nodes.
        workers: joblib worker count; the result does not depend on it.

    Returns:
        The EfficiencyNetwork.
    """
    structures = list(structures)
    if epsilons is None:
        epsilons = [float("nan")] * len(structures)
    if len(epsilons) != len(structures):
        raise ValueError("one efficiency per structure is required")
    if len({s.n_sites for s in structures}) > 1:
        raise ValueError("all structures in a network must have the same number of sites")
    nodes = tuple(NodeRef(s.seed, float(e)) for s, e in zip(structures, epsilons))

    edges: List[Tuple[int, int, float]] = []
    if cutoff > 0 and len(structures) > 1:
        prepared = [prepare(s) for s in structures]
        blocks = [list(range(start, min(start + ROW_BLOCK, len(prepared)))) for start in range(0, len(prepared), ROW_BLOCK)]
        results = Parallel(n_jobs=workers)(delayed(_score_rows)(prepared, rows, cutoff) for rows in blocks)
        for found in results:
            edges.extend(found)
    logger.info("Built network with %d nodes and %d edges at cutoff %g", len(nodes), len(edges), cutoff)

    edge_array = np.array([(i, j) for i, j, _ in edges], dtype=np.int64).reshape(-1, 2)
    weights = np.array([w for _, _, w in edges], dtype=float)
    return EfficiencyNetwork(nodes, edge_array, weights, float(cutoff))


def _normalize_columns(matrix: sparse.csc_matrix) -> sparse.csc_matrix:
    sums = np.asarray(matrix.sum(axis=0)).ravel()
    sums[sums == 0] = 1.0
    return sparse.csc_matrix(matrix @ sparse.diags(1.0 / sums))


def _stochasticity_error(matrix: sparse.csc_matrix) -> float:
    sums = np.asarray(matrix.sum(axis=0)).ravel()
    return float(np.max(np.abs(sums - 1.0))) if sums.size else 0.0


def _loop_nodes(net: EfficiencyNetwork, self_loops: bool) -> np.ndarray:
    """Nodes that receive a self-loop: all of them, or those in bipartite components."""
    if self_loops:
        return np.arange(net.n_nodes)
    graph = net.to_networkx()
    loops = []
    for component in nx.connected_components(graph):
        if nx.is_bipartite(graph.subgraph(component)):
            loops.extend(component)
    return np.array(sorted(loops), dtype=np.int64)


def _attractor_clusters(matrix: sparse.csc_matrix):
    """
    Groups columns by their dominant attractor.

    Attractors tied within ATTRACTOR_TIE_TOLERANCE in some column belong to
    one attractor system, labeled by its lowest node id. Columns with weight
    on more than one system keep the system of their largest entry and are
    reported as ambiguous.
    """
    n = matrix.shape[0]
    matrix = sparse.csc_matrix(matrix)
    matrix.sort_indices()
    columns = [
        (matrix.indices[matrix.indptr[j]:matrix.indptr[j + 1]], matrix.data[matrix.indptr[j]:matrix.indptr[j + 1]])
        for j in range(n)
    ]
    links_a, links_b, tied_min = [], [], np.empty(n, dtype=np.int64)
    for j, (rows, values) in enumerate(columns):
        tied = rows[values >= values.max() - ATTRACTOR_TIE_TOLERANCE]
        tied_min[j] = tied.min()
        links_a.extend([tied.min()] * len(tied))
        links_b.extend(tied)
    graph = sparse.coo_matrix((np.ones(len(links_a)), (links_a, links_b)), shape=(n, n))
    _, system = connected_components(graph, directed=False)
    labels = system[tied_min]

    ambiguous = tuple(
        j for j, (rows, values) in enumerate(columns)
        if np.any(system[rows[values > ATTRACTOR_TIE_TOLERANCE]] != labels[j])
    )
    return labels, ambiguous


def mcl_cluster(
    net: EfficiencyNetwork,
    inflation: float = 1.4,
    max_iter: int = 200,
    tol: float = 1e-9,
    self_loops: bool = False,
    noise_floor: float = 0.005,
) -> ClusterPartition:
    """
    Markov clustering of the similarity network.

    Each iteration squares the column-stochastic matrix, raises its entries
    to the power `inflation`, drops entries below 1e-12 and renormalizes the
    columns, until the largest elementwise change falls below `tol`.

    Args:
        net: The network to cluster.
        inflation: Inflation exponent p > 1.
        max_iter: Iteration limit.
        tol: Convergence threshold on the largest elementwise change.
        self_loops: Add a self-loop to every node. Without it only nodes of
                    bipartite components get one.
        noise_floor: Clusters below this population fraction are noise.

    Returns:
        ClusterPartition.

    Raises:
        ConvergenceError: if `max_iter` iterations do not reach `tol`.
    """
    if inflation <= 1.0:
        raise ValueError(f"inflation must be greater than 1, got {inflation}")
    n = net.n_nodes
    if n == 0:
        return ClusterPartition(np.zeros(0, dtype=np.int64), {}, inflation=inflation)

    adjacency = net.adjacency().tolil()
    for node in _loop_nodes(net, self_loops):
        adjacency[node, node] = 1.0
    current = _normalize_columns(adjacency.tocsc())
    max_error = _stochasticity_error(current)

    residual = np.inf
    iterations = 0
    while iterations < max_iter:
        iterations += 1
        expanded = current @ current
        inflated = expanded.power(inflation)
        inflated.data[inflated.data < PRUNE_THRESHOLD] = 0.0
        inflated.eliminate_zeros()
        updated = _normalize_columns(inflated)
        max_error = max(max_error, _stochasticity_error(updated))
        difference = abs(updated - current)
        residual = float(difference.max()) if difference.nnz else 0.0
        current = updated
        if residual < tol:
            break
    else:
        raise ConvergenceError(f"MCL did not converge in {max_iter} iterations", residual=residual)
    logger.debug("MCL converged after %d iterations (residual %.2e)", iterations, residual)

    raw_labels, ambiguous = _attractor_clusters(current)
    if ambiguous:
        logger.warning("%d nodes have weight on more than one attractor system", len(ambiguous))

    unique, counts = np.unique(raw_labels, return_counts=True)
    first_member = {label: int(np.flatnonzero(raw_labels == label)[0]) for label in unique}
    ranked = sorted(zip(unique, counts), key=lambda item: (-item[1], first_member[item[0]]))
    relabel = {label: cluster_id for cluster_id, (label, _) in enumerate(ranked, start=1)}
    assignment = np.array([relabel[label] for label in raw_labels], dtype=np.int64)
    populations = {relabel[label]: count / n for label, count in ranked}
    noise = tuple(c for c, fraction in populations.items() if fraction < noise_floor)

    return ClusterPartition(
        assignment=assignment,
        populations=populations,
        noise_clusters=noise,
        ambiguous_nodes=ambiguous,
        iterations=iterations,
        residual=residual,
        max_stochasticity_error=max_error,
        inflation=inflation,
    )


def fr_layout(net: EfficiencyNetwork, iterations: int = 50, rng_seed: int = 0) -> LayoutCoordinates:
    """
    Fruchterman-Reingold layout in raw spring units (no rescaling).

    The natural spring length is 1/sqrt(n); a single node sits at the origin.
    """
    if net.n_nodes == 0:
        return LayoutCoordinates(np.zeros((0, 2)))
    if net.n_nodes == 1:
        return LayoutCoordinates(np.zeros((1, 2)))
    graph = net.to_networkx()
    pos = nx.spring_layout(graph, iterations=iterations, seed=rng_seed, scale=None, weight=None)
    return LayoutCoordinates(np.array([pos[i] for i in range(net.n_nodes)], dtype=float))
