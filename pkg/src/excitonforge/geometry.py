"""
Site configurations: random sampling, symmetry transforms, displacements,
site removal and pair descriptors.

All lengths are in units of r0, the edge of the cube whose opposite corners
hold the input (index 0) and output (index N-1) sites.
"""
import logging
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import pdist, squareform
from scipy.spatial.transform import Rotation

logger = logging.getLogger(__name__)

INPUT_CORNER = np.zeros(3)
OUTPUT_CORNER = np.ones(3)
IN_OUT_AXIS = np.ones(3) / np.sqrt(3.0)

MIN_SITE_DISTANCE = 1e-6
MAX_CONSECUTIVE_REJECTIONS = 1000
ROTATION_STEP_DEG = 2
N_ROTATIONS = 360 // ROTATION_STEP_DEG

# Reflection through the x - y = 0 plane swaps x and y; the plane contains the in-out axis.
MIRROR_MATRIX = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based Philox generator keyed by a 64-bit seed."""
    return np.random.Generator(np.random.Philox(int(seed)))


def derive_seed(master_seed: int, index: int) -> int:
    """
    Derives the seed of item `index` from a master seed.

    The result depends only on (master_seed, index), so batch order and
    worker count never change which structure an index produces.
    """
    state = np.random.SeedSequence([int(master_seed), int(index)]).generate_state(1, dtype=np.uint64)
    return int(state[0])


@dataclass(frozen=True)
class SiteConfiguration:
    """N labeled site positions; index 0 is the input, index N-1 the output."""

    positions: np.ndarray
    seed: Optional[int] = None
    displaced_outside: bool = False

    def __post_init__(self):
        positions = np.array(self.positions, dtype=float)
        if positions.ndim != 2 or positions.shape[1] != 3 or positions.shape[0] < 2:
            raise ValueError(f"positions must have shape (N, 3) with N >= 2, got {positions.shape}")
        if not np.all(np.isfinite(positions)):
            raise ValueError("positions must be finite")
        positions.setflags(write=False)
        object.__setattr__(self, "positions", positions)

    @property
    def n_sites(self) -> int:
        return self.positions.shape[0]

    @property
    def input_index(self) -> int:
        return 0

    @property
    def output_index(self) -> int:
        return self.n_sites - 1

    @property
    def intermediate_indices(self) -> Tuple[int, ...]:
        return tuple(range(1, self.n_sites - 1))

    @property
    def is_canonical(self) -> bool:
        """True when input and output sit exactly on the cube corners."""
        return bool(
            np.array_equal(self.positions[0], INPUT_CORNER)
            and np.array_equal(self.positions[-1], OUTPUT_CORNER)
        )

    @property
    def in_out_distance(self) -> float:
        return float(np.linalg.norm(self.positions[-1] - self.positions[0]))

    def __eq__(self, other):
        if not isinstance(other, SiteConfiguration):
            return NotImplemented
        return (
            self.seed == other.seed
            and self.displaced_outside == other.displaced_outside
            and np.array_equal(self.positions, other.positions)
        )

    def __hash__(self):
        return hash((self.seed, self.positions.tobytes()))


@dataclass(frozen=True)
class SymmetryTransform:
    """
    Relabeling of intermediate sites, rotation about the in-out diagonal and
    optional mirror, applied in that order.

    `permutation[i] = j` means intermediate slot i takes the position of the
    original intermediate site j (both counted from 0 among intermediates).
    """

    permutation: Tuple[int, ...]
    rotation_angle: int = 0
    mirror: bool = False

    def __post_init__(self):
        object.__setattr__(self, "permutation", tuple(int(p) for p in self.permutation))
        if sorted(self.permutation) != list(range(len(self.permutation))):
            raise ValueError(f"permutation {self.permutation} is not a bijection")
        if self.rotation_angle % ROTATION_STEP_DEG != 0 or not 0 <= self.rotation_angle < 360:
            raise ValueError(f"rotation_angle must be a multiple of {ROTATION_STEP_DEG} in [0, 360)")

    @classmethod
    def identity(cls, n_sites: int) -> "SymmetryTransform":
        return cls(permutation=tuple(range(max(n_sites - 2, 0))))

    def inverse(self) -> "SymmetryTransform":
        # M R(a) M = R(-a), so the inverse of M^m R(a) P is M^m R(a') P^-1
        # with a' = a when mirrored and -a otherwise.
        inverse_perm = [0] * len(self.permutation)
        for slot, source in enumerate(self.permutation):
            inverse_perm[source] = slot
        angle = self.rotation_angle if self.mirror else (-self.rotation_angle) % 360
        return SymmetryTransform(tuple(inverse_perm), angle, self.mirror)

    def matrix(self) -> np.ndarray:
        """The 3x3 orthogonal part (rotation, then mirror)."""
        return transform_matrix(self.rotation_angle, self.mirror)

    def sort_key(self) -> Tuple:
        return (self.permutation, self.rotation_angle, self.mirror)


@dataclass(frozen=True)
class PairGeometryDescriptor:
    r_p: float
    r_b: float
    d_s: float
    d_bb: float


def rotation_matrix(angle_deg: float) -> np.ndarray:
    """Rotation by `angle_deg` about the in-out diagonal through the origin."""
    return Rotation.from_rotvec(np.deg2rad(angle_deg) * IN_OUT_AXIS).as_matrix()


def transform_matrix(angle_deg: float, mirror: bool) -> np.ndarray:
    rot = rotation_matrix(angle_deg)
    return MIRROR_MATRIX @ rot if mirror else rot


def candidate_matrices() -> np.ndarray:
    """
    All 2 * 180 orthogonal candidates, shape (180, 2, 3, 3), indexed by
    (angle // 2, mirror).
    """
    mats = np.empty((N_ROTATIONS, 2, 3, 3))
    for k in range(N_ROTATIONS):
        rot = rotation_matrix(k * ROTATION_STEP_DEG)
        mats[k, 0] = rot
        mats[k, 1] = MIRROR_MATRIX @ rot
    return mats


def pairwise_distances(config: SiteConfiguration) -> np.ndarray:
    """Full N x N matrix of inter-site distances."""
    return squareform(pdist(config.positions))


def axis_coordinates(positions: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Rotation-invariant cylindrical features about the in-out axis.

    Returns:
        (along, radial): projection on the axis and distance from it, per site.
    """
    positions = np.asarray(positions, dtype=float)
    along = positions @ IN_OUT_AXIS
    radial_vec = positions - np.outer(along, IN_OUT_AXIS)
    return along, np.linalg.norm(radial_vec, axis=1)


def _has_coincidence(positions: np.ndarray) -> bool:
    return positions.shape[0] > 1 and float(pdist(positions).min()) <= MIN_SITE_DISTANCE


def sample_random_structure(n_sites: int, rng_seed: int) -> SiteConfiguration:
    """
    Draws a structure with N-2 intermediate sites uniform in the unit cube.

    Draws that put two sites within MIN_SITE_DISTANCE are rejected and
    redrawn from the same stream.

    Args:
        n_sites: Total number of sites including input and output.
        rng_seed: 64-bit seed of the Philox stream.

    Returns:
        A canonical SiteConfiguration tagged with `rng_seed`.
    """
    if n_sites < 2:
        raise ValueError(f"n_sites must be >= 2, got {n_sites}")
    rng = make_rng(rng_seed)
    for _ in range(MAX_CONSECUTIVE_REJECTIONS):
        positions = np.vstack([INPUT_CORNER, rng.random((n_sites - 2, 3)), OUTPUT_CORNER])
        if not _has_coincidence(positions):
            return SiteConfiguration(positions, seed=int(rng_seed))
    raise RuntimeError(
        f"{MAX_CONSECUTIVE_REJECTIONS} consecutive coincident draws for seed {rng_seed}; "
        "the random stream is pathological"
    )


def sample_positions_batch(n_sites: int, seeds: Sequence[int]) -> np.ndarray:
    """Positions of `sample_random_structure` for many seeds, shape (B, N, 3)."""
    batch = np.empty((len(seeds), n_sites, 3))
    for b, seed in enumerate(seeds):
        batch[b] = sample_random_structure(n_sites, seed).positions
    return batch


def displace_sites(
    config: SiteConfiguration,
    cube_side: float,
    which: Optional[Iterable[int]] = None,
    rng_seed: int = 0,
    include_terminals: bool = True,
) -> SiteConfiguration:
    """
    Shifts sites by independent uniform draws inside a cube centered on each site.

    Args:
        config: The structure to perturb.
        cube_side: Full edge of the displacement cube; each coordinate moves
                   by U(-cube_side/2, +cube_side/2).
        which: Site indices to move. None selects every site, or every
               intermediate site when `include_terminals` is False.
        rng_seed: Seed of the displacement stream.
        include_terminals: Whether the default selection includes input and output.

    Returns:
        A new SiteConfiguration; `displaced_outside` records whether any
        coordinate left the unit cube.
    """
    if cube_side < 0:
        raise ValueError(f"cube_side must be non-negative, got {cube_side}")
    if which is None:
        selected = np.arange(config.n_sites) if include_terminals else np.array(config.intermediate_indices, dtype=int)
    else:
        selected = np.array(sorted(set(int(i) for i in which)), dtype=int)
    positions = config.positions.copy()
    if cube_side > 0 and selected.size:
        half = 0.5 * cube_side
        rng = make_rng(rng_seed)
        positions[selected] += rng.uniform(-half, half, size=(selected.size, 3))
    outside = bool(np.any(positions < 0.0) or np.any(positions > 1.0))
    return SiteConfiguration(positions, seed=config.seed, displaced_outside=outside)


def remove_sites(config: SiteConfiguration, indices: Iterable[int]) -> SiteConfiguration:
    """
    Drops intermediate sites, keeping the order of the remaining ones.

    Raises:
        ValueError: if `indices` contains the input, the output or an index out of range.
    """
    removed = set(int(i) for i in indices)
    if 0 in removed or config.output_index in removed:
        raise ValueError("input and output sites cannot be removed")
    if any(i < 0 or i >= config.n_sites for i in removed):
        raise ValueError(f"site indices {sorted(removed)} out of range for N={config.n_sites}")
    keep = [i for i in range(config.n_sites) if i not in removed]
    return SiteConfiguration(
        config.positions[keep], seed=config.seed, displaced_outside=config.displaced_outside
    )


def apply_transform(config: SiteConfiguration, t: SymmetryTransform) -> SiteConfiguration:
    """Relabels intermediates, then rotates about the in-out diagonal, then mirrors."""
    if len(t.permutation) != max(config.n_sites - 2, 0):
        raise ValueError(
            f"transform acts on {len(t.permutation)} intermediate sites, structure has {config.n_sites - 2}"
        )
    order = [0] + [1 + p for p in t.permutation] + [config.output_index]
    permuted = config.positions[order]
    moved = permuted @ t.matrix().T
    return SiteConfiguration(moved, seed=config.seed, displaced_outside=config.displaced_outside)


def scale_configuration(config: SiteConfiguration, factor: float) -> SiteConfiguration:
    """Scales every coordinate about the origin."""
    return SiteConfiguration(config.positions * factor, seed=config.seed)


def backbone_order(config: SiteConfiguration, backbone: Sequence[int]) -> list:
    """Backbone site indices sorted by their projection on the in-out axis."""
    along, _ = axis_coordinates(config.positions)
    return sorted(backbone, key=lambda i: along[i])


def pair_geometry_descriptors(config: SiteConfiguration, pair_indices: Sequence[int]) -> PairGeometryDescriptor:
    """
    Distances describing a pair relative to the backbone.

    r_P is the intra-pair distance, r_B the distance between the pair midpoint
    and the centroid of the backbone intermediates, d_s the mean spacing of the
    terminals to their nearest backbone site and d_bb the mean spacing between
    consecutive intermediate backbone sites.
    """
    pair = tuple(int(i) for i in pair_indices)
    if len(set(pair)) != 2:
        raise ValueError(f"a pair needs two distinct sites, got {pair_indices}")
    if any(i in (0, config.output_index) for i in pair):
        raise ValueError("pair sites must be intermediate sites")
    backbone = [i for i in config.intermediate_indices if i not in pair]
    if not backbone:
        raise ValueError("descriptors need at least one backbone intermediate site")

    pos = config.positions
    p1, p2 = pos[pair[0]], pos[pair[1]]
    r_p = float(np.linalg.norm(p1 - p2))
    pair_mid = 0.5 * (p1 + p2)
    backbone_center = pos[backbone].mean(axis=0)
    r_b = float(np.linalg.norm(pair_mid - backbone_center))

    ordered = backbone_order(config, backbone)
    d_s = 0.5 * (
        float(np.linalg.norm(pos[ordered[0]] - pos[0]))
        + float(np.linalg.norm(pos[-1] - pos[ordered[-1]]))
    )
    if len(ordered) > 1:
        steps = np.diff(pos[ordered], axis=0)
        d_bb = float(np.linalg.norm(steps, axis=1).mean())
    else:
        d_bb = 0.0
    return PairGeometryDescriptor(r_p=r_p, r_b=r_b, d_s=d_s, d_bb=d_bb)
