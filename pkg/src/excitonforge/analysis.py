"""
Characterizations of efficient structures: robustness to displacements,
active sites, the inactive pair and its spectral signature, pair landscapes,
cluster superposition and class statistics.
"""
import logging
from dataclasses import dataclass
from itertools import combinations
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import sparse
from scipy.linalg import eigh
from scipy.sparse.csgraph import connected_components
from scipy.spatial.distance import pdist
from scipy.stats import ks_2samp

from .geometry import (
    IN_OUT_AXIS,
    MIN_SITE_DISTANCE,
    SiteConfiguration,
    SymmetryTransform,
    apply_transform,
    axis_coordinates,
    derive_seed,
    displace_sites,
    make_rng,
    pairwise_distances,
    remove_sites,
)
from .network import ClusterPartition
from .open_system import NoiseRateModel, evolve_master_equation
from .quantum_core import build_hamiltonian, efficiency_batch, max_site_excitations, window_tau
from .similarity import prepare, score_prepared

logger = logging.getLogger(__name__)

INACTIVE_THRESHOLD = 0.075
CLASS_MEAN_TOLERANCE = 0.02
CLASS_KS_TOLERANCE = 0.1

CLASS_PAIR = "pair"
CLASS_INLINE = "inline"
CLASS_SPARSE = "sparse"
CLASS_UNCLASSIFIED = "unclassified"


@dataclass(frozen=True)
class RobustnessReport:
    """Efficiency loss under random displacements; negative losses are kept."""

    delta_eps_rand: float
    n_trials: int
    epsilon_original: float
    standard_error: float
    n_outside: int = 0
    trial_epsilons: Optional[np.ndarray] = None


@dataclass(frozen=True)
class SiteActivity:
    maxima: np.ndarray
    active: np.ndarray
    threshold: float

    @property
    def n_active(self) -> int:
        return int(np.count_nonzero(self.active))


@dataclass(frozen=True)
class PairAnalysis:
    pairs: Tuple[Tuple[int, int], ...]
    backbone_indices: Tuple[int, ...]
    delta_eps_pair: Optional[float]
    activity_maxima: np.ndarray

    @property
    def pair_indices(self) -> Tuple[int, ...]:
        return tuple(i for pair in self.pairs for i in pair)

    @property
    def has_pair(self) -> bool:
        return bool(self.pairs)


@dataclass(frozen=True)
class HarmonicFit:
    base_frequency: float
    multiples: np.ndarray
    max_deviation: float
    rms_deviation: float


@dataclass(frozen=True)
class SpectralShiftReport:
    lambdas_full: np.ndarray
    lambdas_reduced: np.ndarray
    v: float
    delta: float
    perturbative_shift: float
    measured_shifts: np.ndarray
    second_order_shifts: np.ndarray
    harmonic_fit: Optional[HarmonicFit] = None


@dataclass(frozen=True)
class LandscapeSurface:
    r_p: np.ndarray
    r_b: np.ndarray
    epsilon: np.ndarray
    skipped: np.ndarray
    backbone_epsilon: float
    direction: np.ndarray
    pair_axis: np.ndarray

    def to_frame(self) -> pd.DataFrame:
        grid_p, grid_b = np.meshgrid(self.r_p, self.r_b, indexing="ij")
        return pd.DataFrame({
            "r_p": grid_p.ravel(),
            "r_b": grid_b.ravel(),
            "epsilon": self.epsilon.ravel(),
            "skipped": self.skipped.ravel(),
        })


@dataclass(frozen=True)
class Superposition:
    reference_index: int
    aligned: Tuple[SiteConfiguration, ...]
    transforms: Tuple[SymmetryTransform, ...]
    s_squared: np.ndarray
    averaged: Optional[Tuple[SiteConfiguration, ...]] = None

    def to_frame(self, averaged: bool = False) -> pd.DataFrame:
        configs = self.averaged if averaged and self.averaged is not None else self.aligned
        rows = [
            (member, site, *position)
            for member, config in enumerate(configs)
            for site, position in enumerate(config.positions)
        ]
        return pd.DataFrame(rows, columns=["member", "site", "x", "y", "z"])


@dataclass(frozen=True)
class ClassLabel:
    label: str
    clusters: Tuple[int, ...]


@dataclass(frozen=True)
class ClassStats:
    class_label: ClassLabel
    n_nodes: int
    population: float
    mean_delta_eps_rand: float
    fastest_t_star: float
    mean_t_star: float

    @property
    def label(self) -> str:
        return self.class_label.label


def random_displacement_loss(
    config: SiteConfiguration,
    cube_side: float = 0.05,
    n_trials: int = 1000,
    rng_seed: int = 0,
    include_terminals: bool = True,
    noise_model: Optional[NoiseRateModel] = None,
    keep_trials: bool = False,
    tau: Optional[float] = None,
) -> RobustnessReport:
    """
    Mean efficiency loss when every site moves inside a small cube.

    Perturbed copies are scored against the window of the original structure.
    Trial i is seeded with derive_seed(rng_seed, i).

    Args:
        config: The structure.
        cube_side: Full edge of the displacement cube in r0.
        n_trials: Number of randomizations.
        rng_seed: Seed of the trial sequence.
        include_terminals: Whether input and output move too.
        noise_model: Score with the master equation under this model instead
                     of coherent dynamics.
        keep_trials: Attach the per-trial efficiencies.
        tau: Window length; defaults to `window_tau(config)`.

    Returns:
        RobustnessReport with the loss and its standard error.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be positive")
    if tau is None:
        tau = window_tau(config)
    perturbed = [
        displace_sites(config, cube_side, rng_seed=derive_seed(rng_seed, i), include_terminals=include_terminals)
        for i in range(n_trials)
    ]
    if noise_model is None:
        stack = np.stack([config.positions] + [p.positions for p in perturbed])
        epsilons, _ = efficiency_batch(stack, tau)
        original, trials = float(epsilons[0]), epsilons[1:]
    else:
        original = evolve_master_equation(config, noise_model, tau=tau).epsilon_max
        trials = np.array([evolve_master_equation(p, noise_model, tau=tau).epsilon_max for p in perturbed])

    error = float(np.std(trials, ddof=1) / np.sqrt(n_trials)) if n_trials > 1 else 0.0
    return RobustnessReport(
        delta_eps_rand=float(original - trials.mean()),
        n_trials=n_trials,
        epsilon_original=original,
        standard_error=error,
        n_outside=sum(p.displaced_outside for p in perturbed),
        trial_epsilons=trials if keep_trials else None,
    )


def classify_active_sites(
    config: SiteConfiguration, inactive_threshold: float = INACTIVE_THRESHOLD, tau: Optional[float] = None
) -> SiteActivity:
    """A site is active when its maximal population within the window exceeds the threshold."""
    maxima = max_site_excitations(config, tau=tau)
    active = maxima > inactive_threshold
    active[[0, config.output_index]] = True
    return SiteActivity(maxima, active, inactive_threshold)


def pair_removal_loss(config: SiteConfiguration, pair: Sequence[int], tau: Optional[float] = None) -> float:
    """Efficiency lost when the given intermediate sites are deleted; both are scored over the same window."""
    reduced = remove_sites(config, pair)
    if tau is None:
        tau = window_tau(config)
    epsilons, _ = efficiency_batch(np.stack([config.positions]), tau)
    reduced_eps, _ = efficiency_batch(np.stack([reduced.positions]), tau)
    return float(epsilons[0] - reduced_eps[0])


def detect_pair(
    config: SiteConfiguration,
    inactive_threshold: float = INACTIVE_THRESHOLD,
    compute_loss: bool = True,
    tau: Optional[float] = None,
) -> PairAnalysis:
    """
    Finds pairs of mutually nearest, dynamically inactive intermediate sites.

    The closest two remaining intermediates form a pair when both stay at or
    below the threshold; they are removed and the search repeats, up to
    (N - 4) // 2 pairs.
    """
    activity = classify_active_sites(config, inactive_threshold, tau=tau)
    distances = pairwise_distances(config)
    remaining = list(config.intermediate_indices)
    pairs: List[Tuple[int, int]] = []
    while len(pairs) < (config.n_sites - 4) // 2 and len(remaining) >= 2:
        i, j = min(combinations(remaining, 2), key=lambda ij: (distances[ij], ij))
        if activity.maxima[i] > inactive_threshold or activity.maxima[j] > inactive_threshold:
            break
        pairs.append((i, j))
        remaining = [k for k in remaining if k not in (i, j)]

    flattened = [k for pair in pairs for k in pair]
    loss = pair_removal_loss(config, flattened, tau=tau) if pairs and compute_loss else None
    return PairAnalysis(tuple(pairs), tuple(remaining), loss, activity.maxima)


def fundamental_frequency_fit(eigenvalues: Sequence[float], n_grid: int = 2000, max_divisor: float = 3.0) -> HarmonicFit:
    """
    Fits consecutive eigenvalue gaps to integer multiples of one base frequency.

    The base is swept between (smallest gap / max_divisor) and the smallest
    gap, then refined by least squares at fixed multiples. Deviations are
    relative to the base.
    """
    gaps = np.diff(np.sort(np.asarray(eigenvalues, dtype=float)))
    gaps = gaps[gaps > 1e-12]
    if gaps.size == 0:
        return HarmonicFit(0.0, np.zeros(0, dtype=int), 0.0, 0.0)
    smallest = gaps.min()
    bases = np.linspace(smallest / max_divisor, smallest, n_grid)
    multiples = np.maximum(np.rint(gaps[None, :] / bases[:, None]), 1.0)
    residuals = np.sqrt(np.mean(((gaps[None, :] - multiples * bases[:, None]) / bases[:, None]) ** 2, axis=1))
    # prefer the largest base among equally good ones
    best = len(bases) - 1 - int(np.argmin(residuals[::-1]))
    m = multiples[best]
    base = float(np.dot(m, gaps) / np.dot(m, m))
    deviation = np.abs(gaps - m * base) / base
    return HarmonicFit(base, m.astype(int), float(deviation.max()), float(np.sqrt(np.mean(deviation ** 2))))


def spectral_pair_shift(config: SiteConfiguration, pair: Sequence[int]) -> SpectralShiftReport:
    """
    Shift of the backbone eigenvalues caused by the pair.

    Backbone-dominant eigenstates are the N-2 states with the largest weight
    on the non-pair sites. delta = 1/r_P^3 and v is the RMS of the couplings
    between pair and backbone sites.
    """
    a, b = (int(k) for k in pair)
    if a == b or {a, b} & {0, config.output_index}:
        raise ValueError(f"invalid pair {tuple(pair)}")
    matrix = build_hamiltonian(config).matrix
    backbone = [k for k in range(config.n_sites) if k not in (a, b)]

    values, vectors = eigh(matrix)
    weights = np.sum(vectors[backbone, :] ** 2, axis=0)
    dominant = np.sort(np.argsort(-weights, kind="stable")[: len(backbone)])
    lambdas_full = values[dominant]

    reduced_values, reduced_vectors = eigh(matrix[np.ix_(backbone, backbone)])
    delta = float(matrix[a, b])
    couplings = matrix[np.ix_([a, b], backbone)]
    v = float(np.sqrt(np.mean(couplings ** 2)))

    # pair eigenstates: symmetric at +delta, antisymmetric at -delta
    to_symmetric = reduced_vectors.T @ (couplings[0] + couplings[1]) / np.sqrt(2.0)
    to_antisymmetric = reduced_vectors.T @ (couplings[0] - couplings[1]) / np.sqrt(2.0)
    second_order = to_symmetric ** 2 / (reduced_values - delta) + to_antisymmetric ** 2 / (reduced_values + delta)

    return SpectralShiftReport(
        lambdas_full=lambdas_full,
        lambdas_reduced=reduced_values,
        v=v,
        delta=delta,
        perturbative_shift=v ** 2 / delta,
        measured_shifts=lambdas_full - reduced_values,
        second_order_shifts=second_order,
        harmonic_fit=fundamental_frequency_fit(lambdas_full),
    )


def _perpendicular(vector: np.ndarray) -> np.ndarray:
    radial = vector - np.dot(vector, IN_OUT_AXIS) * IN_OUT_AXIS
    norm = np.linalg.norm(radial)
    if norm < 1e-12:
        radial = np.cross(IN_OUT_AXIS, [1.0, 0.0, 0.0])
        norm = np.linalg.norm(radial)
    return radial / norm


def pair_landscape_scan(
    config: SiteConfiguration,
    pair: Sequence[int],
    r_p_grid: Sequence[float],
    r_b_grid: Sequence[float],
    tau: Optional[float] = None,
) -> LandscapeSurface:
    """
    Efficiency as the pair is resized and moved relative to a fixed backbone.

    The pair midpoint sits at distance r_B from the centroid of the backbone
    intermediates, along the direction perpendicular to the in-out axis that
    points toward the original pair. The pair keeps its original orientation.
    Grid points that make two sites coincide are skipped and left as NaN.
    """
    a, b = (int(k) for k in pair)
    pos = config.positions
    backbone = [k for k in config.intermediate_indices if k not in (a, b)]
    if not backbone:
        raise ValueError("the landscape needs at least one backbone intermediate")
    center = pos[backbone].mean(axis=0)
    midpoint = 0.5 * (pos[a] + pos[b])
    direction = _perpendicular(midpoint - center)
    pair_axis = (pos[a] - pos[b]) / np.linalg.norm(pos[a] - pos[b])

    r_p = np.asarray(r_p_grid, dtype=float)
    r_b = np.asarray(r_b_grid, dtype=float)
    if tau is None:
        tau = window_tau(config)
    epsilon = np.full((r_p.size, r_b.size), np.nan)
    skipped = np.zeros_like(epsilon, dtype=bool)
    stack, where = [], []
    for i, size in enumerate(r_p):
        for j, offset in enumerate(r_b):
            trial = pos.copy()
            mid = center + offset * direction
            trial[a] = mid + 0.5 * size * pair_axis
            trial[b] = mid - 0.5 * size * pair_axis
            if pdist(trial).min() <= MIN_SITE_DISTANCE:
                skipped[i, j] = True
                continue
            stack.append(trial)
            where.append((i, j))
    if skipped.any():
        logger.warning("Skipped %d landscape points with coincident sites", int(skipped.sum()))
    if stack:
        values, _ = efficiency_batch(np.stack(stack), tau)
        for (i, j), value in zip(where, values):
            epsilon[i, j] = value
    backbone_eps, _ = efficiency_batch(remove_sites(config, (a, b)).positions[None], tau)
    return LandscapeSurface(r_p, r_b, epsilon, skipped, float(backbone_eps[0]), direction, pair_axis)


def superpose_cluster(
    members: Sequence[SiteConfiguration],
    degrees: Optional[Sequence[int]] = None,
    n_average: int = 0,
    rng_seed: int = 0,
) -> Superposition:
    """
    Aligns every member of a cluster onto its reference structure.

    Args:
        members: Structures of one cluster.
        degrees: Network degree of each member; the most connected member
                 (lowest index on ties) is the reference. Without degrees the
                 member with the smallest summed S^2 to the others is used.
        n_average: When positive, each aligned structure is also averaged with
                   this many other randomly chosen aligned members.
        rng_seed: Seed for the choice of averaging partners.

    Returns:
        Superposition.
    """
    members = list(members)
    if not members:
        raise ValueError("cannot superpose an empty cluster")
    prepared = [prepare(m) for m in members]
    if degrees is not None:
        reference = int(np.argmax(np.asarray(degrees)))
    else:
        totals = np.zeros(len(members))
        for i, j in combinations(range(len(members)), 2):
            s2 = score_prepared(prepared[i], prepared[j]).s_squared
            totals[i] += s2
            totals[j] += s2
        reference = int(np.argmin(totals))

    aligned, transforms, s_squared = [], [], []
    for member, item in zip(members, prepared):
        result = score_prepared(item, prepared[reference])
        transforms.append(result.best_transform)
        aligned.append(apply_transform(member, result.best_transform))
        s_squared.append(result.s_squared)

    averaged = None
    if n_average > 0 and len(members) > 1:
        averaged = []
        for index, config in enumerate(aligned):
            others = [k for k in range(len(aligned)) if k != index]
            rng = make_rng(derive_seed(rng_seed, index))
            chosen = rng.choice(others, size=min(n_average, len(others)), replace=False)
            stack = np.stack([config.positions] + [aligned[k].positions for k in chosen])
            averaged.append(SiteConfiguration(stack.mean(axis=0), seed=config.seed))
        averaged = tuple(averaged)
    return Superposition(reference, tuple(aligned), tuple(transforms), np.array(s_squared), averaged)


def cloud_rms(configs: Sequence[SiteConfiguration], sites: Sequence[int]) -> float:
    """RMS spread of the given sites around their mean positions across structures."""
    stack = np.stack([c.positions[list(sites)] for c in configs])
    return float(np.sqrt(np.mean(np.sum((stack - stack.mean(axis=0)) ** 2, axis=-1))))


def axis_spread(config: SiteConfiguration) -> float:
    """Mean distance of the intermediate sites from the in-out axis."""
    _, radial = axis_coordinates(config.positions)
    inner = radial[1:-1]
    return float(inner.mean()) if inner.size else 0.0


def _merge_clusters(distributions: Mapping[int, np.ndarray]) -> List[Tuple[int, ...]]:
    ids = sorted(distributions)
    n = len(ids)
    rows, cols = [], []
    for x, y in combinations(range(n), 2):
        first, second = distributions[ids[x]], distributions[ids[y]]
        close = abs(first.mean() - second.mean()) < CLASS_MEAN_TOLERANCE
        if close and ks_2samp(first, second).statistic < CLASS_KS_TOLERANCE:
            rows.append(x)
            cols.append(y)
    graph = sparse.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    n_groups, labels = connected_components(graph, directed=False)
    return [tuple(ids[k] for k in range(n) if labels[k] == g) for g in range(n_groups)]


def class_statistics(
    partition: ClusterPartition,
    delta_eps_rand: Sequence[float],
    t_star: Sequence[float],
    geometry_hints: Optional[Mapping[str, Sequence[float]]] = None,
) -> List[ClassStats]:
    """
    Groups clusters into classes of similar robustness and summarizes them.

    Clusters whose Delta-eps_rand distributions differ in mean by less than
    0.02 and have a two-sample KS statistic below 0.1 are merged (single
    linkage). With `geometry_hints` ("has_pair" and "axis_spread" per node)
    the class with the largest pair fraction (at least one half) is `pair`,
    the remaining class closest to the in-out axis is `inline` and the rest
    are `sparse`. Without hints the lowest mean loss is `pair` and the
    highest `inline`. Noise clusters form the `unclassified` class.

    Args:
        partition: Cluster assignment of the nodes.
        delta_eps_rand: Loss per node.
        t_star: Time of maximal efficiency per node, in units of tau.
        geometry_hints: Optional per-node arrays keyed "has_pair" and "axis_spread".

    Returns:
        One ClassStats per class, classified classes first by population.
    """
    losses = np.asarray(delta_eps_rand, dtype=float)
    times = np.asarray(t_star, dtype=float)
    n_nodes = len(partition.assignment)
    if losses.shape != (n_nodes,) or times.shape != (n_nodes,):
        raise ValueError("one loss and one t_star per node are required")

    regular = [c for c in partition.populations if c not in partition.noise_clusters]
    groups = _merge_clusters({c: losses[partition.assignment == c] for c in regular}) if regular else []
    node_sets = [np.isin(partition.assignment, group) for group in groups]
    means = [float(losses[mask].mean()) for mask in node_sets]

    labels = [CLASS_SPARSE] * len(groups)
    if groups and geometry_hints is not None:
        has_pair = np.asarray(geometry_hints["has_pair"], dtype=float)
        spread = np.asarray(geometry_hints["axis_spread"], dtype=float)
        fractions = [float(has_pair[mask].mean()) for mask in node_sets]
        rest = list(range(len(groups)))
        top = int(np.argmax(fractions))
        if fractions[top] >= 0.5:
            labels[top] = CLASS_PAIR
            rest.remove(top)
        if rest:
            labels[min(rest, key=lambda g: float(spread[node_sets[g]].mean()))] = CLASS_INLINE
    elif groups:
        order = np.argsort(means, kind="stable")
        labels[int(order[0])] = CLASS_PAIR
        if len(groups) > 1:
            labels[int(order[-1])] = CLASS_INLINE

    summary = []
    for group, mask, label in zip(groups, node_sets, labels):
        summary.append(_class_stats(ClassLabel(label, tuple(group)), mask, losses, times))
    summary.sort(key=lambda s: (-s.n_nodes, s.class_label.clusters))
    if partition.noise_clusters:
        mask = np.isin(partition.assignment, partition.noise_clusters)
        summary.append(_class_stats(ClassLabel(CLASS_UNCLASSIFIED, tuple(partition.noise_clusters)), mask, losses, times))
    return summary


def _class_stats(label: ClassLabel, mask: np.ndarray, losses: np.ndarray, times: np.ndarray) -> ClassStats:
    count = int(mask.sum())
    return ClassStats(
        class_label=label,
        n_nodes=count,
        population=count / len(mask),
        mean_delta_eps_rand=float(losses[mask].mean()),
        fastest_t_star=float(times[mask].min()),
        mean_t_star=float(times[mask].mean()),
    )


def node_class_labels(partition: ClusterPartition, classes: Sequence[ClassStats]) -> np.ndarray:
    """Class label of every node."""
    labels = np.full(len(partition.assignment), CLASS_UNCLASSIFIED, dtype=object)
    for stats in classes:
        labels[np.isin(partition.assignment, stats.class_label.clusters)] = stats.label
    return labels


def overlap_coefficient(a: Sequence[float], b: Sequence[float], bins: int = 40, value_range=None) -> float:
    """Shared area of two normalized histograms on common bins, in [0, 1]."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size == 0 or b.size == 0:
        return 0.0
    if value_range is None:
        value_range = (min(a.min(), b.min()), max(a.max(), b.max()))
        if value_range[0] == value_range[1]:
            return 1.0
    hist_a, edges = np.histogram(a, bins=bins, range=value_range)
    hist_b, _ = np.histogram(b, bins=edges)
    return float(np.minimum(hist_a / a.size, hist_b / b.size).sum())


def robustness_by_active_count(n_active: Sequence[int], delta_eps_rand: Sequence[float]) -> Dict[int, np.ndarray]:
    """Loss distributions grouped by the number of active sites."""
    counts = np.asarray(n_active, dtype=int)
    losses = np.asarray(delta_eps_rand, dtype=float)
    return {int(k): losses[counts == k] for k in np.unique(counts)}
