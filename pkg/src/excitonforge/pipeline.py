"""
Resumable stages from census to class statistics.

Every stage reads its inputs from and writes its artifacts to the run's
output directory, so each can be rerun on its own. Artifacts get a JSON
manifest next to them (`<artifact>.manifest.json`).
"""
import json
import logging
import time
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from . import __version__
from .analysis import (
    CLASS_INLINE,
    CLASS_PAIR,
    ClassStats,
    axis_spread,
    class_statistics,
    classify_active_sites,
    detect_pair,
    node_class_labels,
    overlap_coefficient,
    pair_landscape_scan,
    random_displacement_loss,
    robustness_by_active_count,
    spectral_pair_shift,
    superpose_cluster,
)
from .config import RunConfig
from .geometry import SiteConfiguration, derive_seed, pair_geometry_descriptors, sample_positions_batch
from .network import ClusterPartition, EfficiencyNetwork, LayoutCoordinates, NodeRef, build_network, fr_layout, mcl_cluster
from .open_system import NoiseRateModel, get_noise_model, noisy_census
from .quantum_core import efficiency_batch, trajectory_frame, transport_efficiency, window_tau
from .store import (
    CENSUS_DTYPE,
    StructureStore,
    efficiency_histogram,
    read_edge_list,
    read_partition,
    write_edge_list,
    write_layout,
    write_partition,
)

logger = logging.getLogger(__name__)

CHUNK_SIZE = 1000
ANALYSIS_STREAM = 1
NOISE_STREAM = 2

STORE_DIR = "store"
EDGES_FILE = "edges.txt"
PARTITION_FILE = "partition.txt"
LAYOUT_FILE = "layout.txt"
NODES_FILE = "nodes.csv"
CLASSES_FILE = "classes.csv"


@dataclass(frozen=True)
class AnalysisResult:
    nodes: pd.DataFrame
    classes: List[ClassStats]


def write_manifest(artifact: Path, config: RunConfig, stage: str, wall_time: float, extras: Optional[Dict[str, Any]] = None) -> Path:
    """Writes `<artifact>.manifest.json` describing how the artifact was produced."""
    artifact = Path(artifact)
    manifest = {
        "artifact": artifact.name,
        "stage": stage,
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "code_version": __version__,
        "wall_time_s": wall_time,
        "created": datetime.now(timezone.utc).isoformat(),
        "extras": extras or {},
    }
    path = artifact.with_name(artifact.name + ".manifest.json")
    with open(path, "w") as f:
        json.dump(manifest, f, indent=4, sort_keys=True, default=_json_default)
    return path


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


def store_directory(config: RunConfig) -> Path:
    return config.output_path / STORE_DIR


def open_store(config: RunConfig) -> StructureStore:
    return StructureStore.open(store_directory(config))


# --- census ---


def _census_chunk(n_sites: int, master_seed: int, start: int, stop: int, threshold: float, window_multiplier: float):
    seeds = np.array([derive_seed(master_seed, i) for i in range(start, stop)], dtype=np.uint64)
    positions = sample_positions_batch(n_sites, seeds)
    tau = window_tau(SiteConfiguration(positions[0]), window_multiplier)
    epsilons, t_star = efficiency_batch(positions, tau)
    keep = np.flatnonzero(epsilons > threshold)
    census = np.zeros(len(keep), dtype=CENSUS_DTYPE)
    census["seed"] = seeds[keep]
    census["epsilon"] = epsilons[keep]
    census["t_star"] = t_star[keep]
    census["epsilon_int"] = [
        transport_efficiency(SiteConfiguration(positions[k]), tau=tau).epsilon_int for k in keep
    ]
    return seeds[keep], positions[keep], census, efficiency_histogram(epsilons)


def run_census(config: RunConfig, resume: bool = True) -> StructureStore:
    """
    Samples `n_samples` structures and stores those with epsilon above the threshold.

    Work is committed batch by batch; with `resume` an interrupted census
    continues after the last committed batch. Sample i always uses the seed
    derive_seed(master_seed, i) and chunks have a fixed size, so the store
    does not depend on the worker count.
    """
    started = time.perf_counter()
    directory = store_directory(config)
    if resume:
        store = StructureStore.open_or_create(directory, config.n_sites, config.config_hash())
    else:
        store = StructureStore.create(directory, config.n_sites, config.config_hash())
    if store.next_index:
        logger.info("Resuming census at sample %d", store.next_index)

    with Parallel(n_jobs=config.workers) as parallel:
        for batch_start in range(store.next_index, config.n_samples, config.batch_size):
            batch_stop = min(batch_start + config.batch_size, config.n_samples)
            chunks = [(s, min(s + CHUNK_SIZE, batch_stop)) for s in range(batch_start, batch_stop, CHUNK_SIZE)]
            results = parallel(
                delayed(_census_chunk)(
                    config.n_sites, config.master_seed, lo, hi, config.efficiency_threshold, config.window_multiplier
                )
                for lo, hi in chunks
            )
            store.append_batch(
                seeds=np.concatenate([r[0] for r in results]),
                positions=np.concatenate([r[1] for r in results]).reshape(-1, config.n_sites, 3),
                census=np.concatenate([r[2] for r in results]),
                histogram=np.sum([r[3] for r in results], axis=0),
                next_index=batch_stop,
            )
            logger.info("Census committed %d/%d samples, %d survivors", batch_stop, config.n_samples, len(store))

    write_manifest(
        directory / "census",
        config,
        "sample",
        time.perf_counter() - started,
        {"n_samples": store.n_samples, "n_survivors": len(store), "survivor_rate": len(store) / max(store.n_samples, 1)},
    )
    return store


# --- network ---


def build_network_stage(store: StructureStore, config: RunConfig) -> EfficiencyNetwork:
    started = time.perf_counter()
    structures = store.structures()
    if not structures:
        logger.warning("The store in %s holds no efficient structures; the network is empty", store.directory)
    net = build_network(structures, config.similarity_cutoff, store.census()["epsilon"], workers=config.workers)
    path = config.output_path / EDGES_FILE
    path.parent.mkdir(parents=True, exist_ok=True)
    write_edge_list(path, net)
    write_manifest(path, config, "network", time.perf_counter() - started, {"cutoff": net.cutoff, "n_nodes": net.n_nodes, "n_edges": net.n_edges})
    return net


def load_network(store: StructureStore, config: RunConfig) -> EfficiencyNetwork:
    """Rebuilds the network from the stored edge list."""
    edges, s_squared = read_edge_list(config.output_path / EDGES_FILE)
    census = store.census()
    nodes = tuple(NodeRef(int(seed), float(eps)) for seed, eps in zip(census["seed"], census["epsilon"]))
    return EfficiencyNetwork(nodes, edges, s_squared, config.similarity_cutoff)


def run_cluster_stage(net: EfficiencyNetwork, config: RunConfig) -> Tuple[ClusterPartition, LayoutCoordinates]:
    started = time.perf_counter()
    partition = mcl_cluster(
        net,
        inflation=config.inflation,
        max_iter=config.mcl_max_iter,
        tol=config.mcl_tol,
        self_loops=config.self_loops,
        noise_floor=config.noise_floor,
    )
    path = config.output_path / PARTITION_FILE
    path.parent.mkdir(parents=True, exist_ok=True)
    write_partition(path, partition)
    write_manifest(path, config, "cluster", time.perf_counter() - started, {
        "inflation": config.inflation,
        "iterations": partition.iterations,
        "residual": partition.residual,
        "max_stochasticity_error": partition.max_stochasticity_error,
        "populations": {str(k): v for k, v in partition.populations.items()},
        "noise_clusters": list(partition.noise_clusters),
        "ambiguous_nodes": list(partition.ambiguous_nodes),
    })

    started = time.perf_counter()
    layout = fr_layout(net, iterations=config.layout_iterations, rng_seed=config.master_seed)
    write_layout(config.output_path / LAYOUT_FILE, layout)
    write_manifest(config.output_path / LAYOUT_FILE, config, "cluster", time.perf_counter() - started, {"iterations": config.layout_iterations})
    return partition, layout


def run_network_stage(store: StructureStore, config: RunConfig):
    """Builds, clusters and lays out the network; returns (network, partition, layout)."""
    net = build_network_stage(store, config)
    partition, layout = run_cluster_stage(net, config)
    return net, partition, layout


def load_partition(config: RunConfig) -> ClusterPartition:
    return read_partition(config.output_path / PARTITION_FILE, noise_floor=config.noise_floor, inflation=config.inflation)


# --- analysis ---


def _analyze_node(config: SiteConfiguration, run: RunConfig) -> Dict[str, Any]:
    tau = window_tau(config, run.window_multiplier)
    robustness = random_displacement_loss(
        config,
        cube_side=run.displacement_side,
        n_trials=run.displacement_trials,
        rng_seed=derive_seed(config.seed, ANALYSIS_STREAM),
        include_terminals=run.displace_terminals,
        tau=tau,
    )
    activity = classify_active_sites(config, run.activity_threshold, tau=tau)
    pair = detect_pair(config, run.activity_threshold, tau=tau)
    row = {
        "delta_eps_rand": robustness.delta_eps_rand,
        "delta_eps_rand_se": robustness.standard_error,
        "n_active": activity.n_active,
        "has_pair": pair.has_pair,
        "pair_sites": " ".join(str(k) for k in pair.pair_indices),
        "delta_eps_pair": np.nan if pair.delta_eps_pair is None else pair.delta_eps_pair,
        "axis_spread": axis_spread(config),
        "r_p": np.nan,
        "r_b": np.nan,
        "d_s": np.nan,
        "d_bb": np.nan,
        "perturbative_shift": np.nan,
        "mean_measured_shift": np.nan,
        "harmonic_max_deviation": np.nan,
    }
    if pair.has_pair:
        a, b = pair.pairs[0]
        report = spectral_pair_shift(config, (a, b))
        # descriptors need a backbone intermediate besides the pair
        if config.n_sites > 4:
            row.update(asdict(pair_geometry_descriptors(config, (a, b))))
        else:
            row["r_p"] = float(np.linalg.norm(config.positions[a] - config.positions[b]))
        row.update({
            "perturbative_shift": report.perturbative_shift,
            "mean_measured_shift": float(np.mean(np.abs(report.measured_shifts))),
            "harmonic_max_deviation": report.harmonic_fit.max_deviation,
        })
    return row


def run_analysis_stage(
    store: StructureStore, partition: ClusterPartition, config: RunConfig, net: Optional[EfficiencyNetwork] = None
) -> AnalysisResult:
    """
    Per-structure robustness, activity and pair analyses, then class statistics.

    Writes nodes.csv, classes.csv, per-cluster robustness histograms, per-class
    activity histograms and the superposition of every regular cluster.
    """
    started = time.perf_counter()
    structures = store.structures()
    census = store.census()
    if len(structures) != len(partition.assignment):
        raise ValueError("partition and store disagree on the number of structures")
    rows = Parallel(n_jobs=config.workers)(delayed(_analyze_node)(c, config) for c in structures)

    nodes = pd.DataFrame(rows)
    nodes.insert(0, "cluster", partition.assignment)
    nodes.insert(0, "t_star", census["t_star"])
    nodes.insert(0, "epsilon", census["epsilon"])
    nodes.insert(0, "seed", census["seed"])

    classes = class_statistics(
        partition,
        nodes["delta_eps_rand"].to_numpy(),
        nodes["t_star"].to_numpy(),
        geometry_hints={"has_pair": nodes["has_pair"].to_numpy(), "axis_spread": nodes["axis_spread"].to_numpy()},
    ) if len(nodes) else []
    nodes["class"] = node_class_labels(partition, classes)

    out = config.output_path
    out.mkdir(parents=True, exist_ok=True)
    nodes.to_csv(out / NODES_FILE, index=False)
    _classes_frame(classes).to_csv(out / CLASSES_FILE, index=False)
    _robustness_histograms(nodes).to_csv(out / "robustness_histograms.csv", index=False)
    _activity_histograms(nodes).to_csv(out / "activity_histograms.csv", index=False)
    by_count = robustness_by_active_count(nodes["n_active"], nodes["delta_eps_rand"]) if len(nodes) else {}
    _active_count_frame(by_count).to_csv(out / "robustness_by_active_count.csv", index=False)

    degrees = net.degrees() if net is not None else None
    for cluster_id in partition.populations:
        if cluster_id in partition.noise_clusters:
            continue
        members = partition.members(cluster_id)
        superposition = superpose_cluster(
            [structures[k] for k in members],
            degrees=None if degrees is None else degrees[members],
            n_average=2,
            rng_seed=config.master_seed,
        )
        superposition.to_frame().to_csv(out / f"cluster_{cluster_id}_aligned.csv", index=False)
        superposition.to_frame(averaged=True).to_csv(out / f"cluster_{cluster_id}_averaged.csv", index=False)

    write_manifest(out / NODES_FILE, config, "analyze", time.perf_counter() - started, {
        "classes": [{"label": c.label, "clusters": list(c.class_label.clusters)} for c in classes],
        "overlaps": _robustness_overlaps(nodes, by_count),
    })
    return AnalysisResult(nodes, classes)


def _robustness_overlaps(nodes: pd.DataFrame, by_count: Dict[int, np.ndarray]) -> Dict[str, Any]:
    """Histogram overlaps of the loss distributions: two most common active counts, pair vs inline class."""
    overlaps: Dict[str, Any] = {}
    common = sorted(by_count, key=lambda k: (-len(by_count[k]), k))[:2]
    if len(common) == 2:
        overlaps["active_counts"] = sorted(common)
        overlaps["active_count_overlap"] = overlap_coefficient(by_count[common[0]], by_count[common[1]])
    losses = {label: group["delta_eps_rand"].to_numpy() for label, group in nodes.groupby("class")} if len(nodes) else {}
    if CLASS_PAIR in losses and CLASS_INLINE in losses:
        overlaps["pair_inline_overlap"] = overlap_coefficient(losses[CLASS_PAIR], losses[CLASS_INLINE])
    return overlaps


def _active_count_frame(by_count: Dict[int, np.ndarray]) -> pd.DataFrame:
    return pd.DataFrame([
        {
            "n_active": k,
            "count": len(v),
            "mean_delta_eps_rand": float(np.mean(v)),
            "std_delta_eps_rand": float(np.std(v)),
        }
        for k, v in sorted(by_count.items())
    ], columns=["n_active", "count", "mean_delta_eps_rand", "std_delta_eps_rand"])


def _classes_frame(classes: Sequence[ClassStats]) -> pd.DataFrame:
    return pd.DataFrame([
        {
            "label": c.label,
            "clusters": " ".join(str(k) for k in c.class_label.clusters),
            "n_nodes": c.n_nodes,
            "population": c.population,
            "mean_delta_eps_rand": c.mean_delta_eps_rand,
            "fastest_t_star": c.fastest_t_star,
            "mean_t_star": c.mean_t_star,
        }
        for c in classes
    ], columns=["label", "clusters", "n_nodes", "population", "mean_delta_eps_rand", "fastest_t_star", "mean_t_star"])


def _robustness_histograms(nodes: pd.DataFrame, bins: int = 40) -> pd.DataFrame:
    edges = np.linspace(-0.1, 0.4, bins + 1)
    frames = []
    for cluster_id, group in nodes.groupby("cluster"):
        counts, _ = np.histogram(group["delta_eps_rand"], bins=edges)
        frames.append(pd.DataFrame({"cluster": cluster_id, "bin_low": edges[:-1], "bin_high": edges[1:], "count": counts}))
    return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=["cluster", "bin_low", "bin_high", "count"])


def _activity_histograms(nodes: pd.DataFrame) -> pd.DataFrame:
    if nodes.empty:
        return pd.DataFrame(columns=["class", "n_active", "count"])
    return nodes.groupby(["class", "n_active"]).size().reset_index(name="count")


# --- noise ---


def noise_model_from_config(config: RunConfig, tau: float) -> NoiseRateModel:
    kind = config.noise_model
    if kind == "haken_strobl":
        return get_noise_model(kind, gamma=config.noise_rate, tau=tau)
    if kind == "ohmic_tcl2":
        return get_noise_model(kind, asymptotic_rate=config.noise_rate, tau=tau, coupling_cm=config.coupling_cm)
    if kind == "non_markovian":
        return get_noise_model(kind, tau=tau, coupling_cm=config.coupling_cm)
    return get_noise_model(kind, tau=tau)


def _noisy_loss(config: SiteConfiguration, model: NoiseRateModel, run: RunConfig) -> float:
    report = random_displacement_loss(
        config,
        cube_side=run.displacement_side,
        n_trials=run.displacement_trials,
        rng_seed=derive_seed(config.seed, NOISE_STREAM),
        include_terminals=run.displace_terminals,
        noise_model=model,
        tau=model.tau,
    )
    return report.delta_eps_rand


def _geometry_hints(config: SiteConfiguration, run: RunConfig) -> Tuple[bool, float]:
    pair = detect_pair(config, run.activity_threshold, compute_loss=False, tau=window_tau(config, run.window_multiplier))
    return pair.has_pair, axis_spread(config)


def _class_hints(structures: Sequence[SiteConfiguration], seeds: np.ndarray, coherent: Optional[pd.DataFrame], run: RunConfig):
    """Per-node hints for class labelling; taken from nodes.csv when it covers every seed."""
    if coherent is not None and {"seed", "has_pair", "axis_spread"} <= set(coherent.columns):
        by_seed = {
            int(s): (bool(p), float(a))
            for s, p, a in zip(coherent["seed"], coherent["has_pair"], coherent["axis_spread"])
        }
        if all(int(s) in by_seed for s in seeds):
            hints = [by_seed[int(s)] for s in seeds]
            return {"has_pair": np.array([h[0] for h in hints], dtype=bool), "axis_spread": np.array([h[1] for h in hints])}
    hints = Parallel(n_jobs=run.workers)(delayed(_geometry_hints)(c, run) for c in structures)
    return {"has_pair": np.array([h[0] for h in hints], dtype=bool), "axis_spread": np.array([h[1] for h in hints])}


def run_noise_stage(store: StructureStore, config: RunConfig, partition: Optional[ClusterPartition] = None) -> pd.DataFrame:
    """
    Noisy efficiency of every stored structure under the configured rate model.

    With a partition the displacement losses are recomputed under noise and
    labelled with the same geometry hints the coherent analysis uses; the
    labels are compared with the coherent ones from nodes.csv, matched by
    seed, when that file exists.
    """
    started = time.perf_counter()
    structures = store.structures()
    tau = window_tau(structures[0], config.window_multiplier) if structures else 1.0
    model = noise_model_from_config(config, tau)
    out = config.output_path
    out.mkdir(parents=True, exist_ok=True)

    grid = model.grid
    pd.DataFrame({"t_over_tau": grid, "gamma_tau": model.table}).to_csv(out / "rate_table.csv", index=False)

    chunks = [structures[i:i + CHUNK_SIZE] for i in range(0, len(structures), CHUNK_SIZE)]
    epsilons = Parallel(n_jobs=config.workers)(delayed(noisy_census)(chunk, model, tau=model.tau) for chunk in chunks)
    census = store.census()
    frame = pd.DataFrame({
        "seed": census["seed"],
        "model_kind": model.kind,
        "parameters": json.dumps(model.parameters(), sort_keys=True),
        "epsilon_coherent": census["epsilon"],
        "epsilon_noisy": np.concatenate(epsilons) if epsilons else np.empty(0),
        "delta_eps_rand_noisy": np.nan,
    })

    extras: Dict[str, Any] = {"noise_model": model.kind, "parameters": model.parameters(), "tau": model.tau}
    if partition is not None and structures:
        if len(structures) != len(partition.assignment):
            raise ValueError("partition and store disagree on the number of structures")
        frame["delta_eps_rand_noisy"] = Parallel(n_jobs=config.workers)(
            delayed(_noisy_loss)(c, model, config) for c in structures
        )
        coherent_path = out / NODES_FILE
        coherent = pd.read_csv(coherent_path) if coherent_path.exists() else None
        hints = _class_hints(structures, census["seed"], coherent, config)
        noisy_classes = class_statistics(
            partition, frame["delta_eps_rand_noisy"].to_numpy(), census["t_star"], geometry_hints=hints
        )
        frame["class_noisy"] = node_class_labels(partition, noisy_classes)
        if coherent is not None and "class" in coherent.columns:
            coherent_class = {int(s): c for s, c in zip(coherent["seed"], coherent["class"])}
            pairs = [
                (coherent_class[int(s)], noisy)
                for s, noisy in zip(census["seed"], frame["class_noisy"])
                if int(s) in coherent_class
            ]
            if pairs:
                agreement = float(np.mean([a == b for a, b in pairs]))
                extras["class_agreement"] = agreement
                logger.info("Noisy class labels agree with coherent labels for %.1f%% of structures", 100 * agreement)

    path = out / "noisy_census.csv"
    frame.to_csv(path, index=False)
    write_manifest(path, config, "noise", time.perf_counter() - started, extras)
    return frame


# --- landscape and export ---


def run_landscape_stage(
    store: StructureStore,
    config: RunConfig,
    r_p_grid: Optional[Sequence[float]] = None,
    r_b_grid: Optional[Sequence[float]] = None,
    seed: Optional[int] = None,
):
    """
    Pair landscape of one stored structure: the given seed, or the most
    efficient structure with a detected pair.
    """
    started = time.perf_counter()
    if seed is not None:
        target = store.get(seed)
        pair = detect_pair(
            target, config.activity_threshold, compute_loss=False, tau=window_tau(target, config.window_multiplier)
        )
    else:
        census = store.census()
        target, pair = None, None
        for k in np.argsort(-census["epsilon"], kind="stable"):
            candidate = store.get(int(census["seed"][k]))
            found = detect_pair(
                candidate, config.activity_threshold, compute_loss=False, tau=window_tau(candidate, config.window_multiplier)
            )
            if found.has_pair:
                target, pair = candidate, found
                break
        if target is None:
            raise ValueError("no stored structure has a detected pair")
    if not pair.has_pair:
        raise ValueError(f"structure {seed} has no detected pair")

    r_p = np.linspace(0.05, 0.6, 23) if r_p_grid is None else np.asarray(r_p_grid, dtype=float)
    r_b = np.linspace(0.05, 0.8, 31) if r_b_grid is None else np.asarray(r_b_grid, dtype=float)
    surface = pair_landscape_scan(target, pair.pairs[0], r_p, r_b, tau=window_tau(target, config.window_multiplier))
    path = config.output_path / "landscape.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    surface.to_frame().to_csv(path, index=False)
    write_manifest(path, config, "landscape", time.perf_counter() - started, {
        "seed": target.seed,
        "pair": list(pair.pairs[0]),
        "direction": surface.direction,
        "pair_axis": surface.pair_axis,
        "backbone_epsilon": surface.backbone_epsilon,
        "geometry": "pair midpoint on the perpendicular from the backbone centroid toward the original pair; pair axis fixed",
    })
    return surface


def export_stage(store: StructureStore, config: RunConfig, seed: Optional[int] = None) -> List[Path]:
    """CSV mirrors of the store and census; with a seed also its population trajectory."""
    started = time.perf_counter()
    out = config.output_path
    out.mkdir(parents=True, exist_ok=True)
    written = [store.export_csv(out / "structures.csv")]
    census_path = out / "census.csv"
    store.census_frame().to_csv(census_path, index=False)
    written.append(census_path)
    histogram_path = out / "efficiency_histogram.csv"
    pd.DataFrame({
        "bin_low": np.arange(len(store.histogram)) / len(store.histogram),
        "count": store.histogram,
    }).to_csv(histogram_path, index=False)
    written.append(histogram_path)
    if seed is not None:
        result = transport_efficiency(store.get(seed), window_multiplier=config.window_multiplier, keep_trajectory=True)
        trajectory_path = out / f"trajectory_{seed}.csv"
        trajectory_frame(result).to_csv(trajectory_path, index=False)
        written.append(trajectory_path)
    for path in written:
        write_manifest(path, config, "export", time.perf_counter() - started)
    return written
