"""
Symmetry-minimized structural similarity.

S^2(a, b) is the mean squared distance between corresponding sites after
relabeling the intermediates of `a`, rotating it about the in-out diagonal
on the 2 degree grid and optionally mirroring it. The search space is
closed under inversion, so S^2 is symmetric in its arguments.
"""
import logging
from dataclasses import dataclass
from functools import lru_cache
from itertools import permutations
from typing import NamedTuple, Optional

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import (
    ROTATION_STEP_DEG,
    SiteConfiguration,
    SymmetryTransform,
    axis_coordinates,
    candidate_matrices,
)

logger = logging.getLogger(__name__)

TIE_TOLERANCE = 1e-12
_PERMUTATION_BLOCK = 64


@dataclass(frozen=True)
class AlignmentResult:
    """
    Outcome of one similarity search.

    `exact` is False when a cutoff allowed the search to stop early; the
    predicate `s_squared < cutoff` is still decided correctly. When the
    axis-profile bound alone rules the pair out, `s_squared` holds that
    bound and `best_transform` is None.
    """

    s_squared: float
    best_transform: Optional[SymmetryTransform]
    evaluations: int
    exact: bool = True


class PreparedStructure(NamedTuple):
    positions: np.ndarray
    along: np.ndarray
    radial: np.ndarray
    square_norm: float


def prepare(config: SiteConfiguration) -> PreparedStructure:
    """Caches the per-structure quantities reused across many comparisons."""
    along, radial = axis_coordinates(config.positions)
    return PreparedStructure(config.positions, along, radial, float(np.sum(config.positions ** 2)))


@lru_cache(maxsize=None)
def _candidates() -> np.ndarray:
    mats = candidate_matrices().reshape(-1, 3, 3)
    mats.setflags(write=False)
    return mats


@lru_cache(maxsize=16)
def _permutation_table(n_intermediate: int) -> np.ndarray:
    perms = list(permutations(range(n_intermediate)))
    table = np.array(perms, dtype=np.intp).reshape(len(perms), n_intermediate)
    table.setflags(write=False)
    return table


def _transform_from_index(perm, g: int) -> SymmetryTransform:
    return SymmetryTransform(tuple(int(p) for p in perm), (g // 2) * ROTATION_STEP_DEG, bool(g % 2))


def _check_sizes(a, b) -> int:
    if a.positions.shape != b.positions.shape:
        raise ValueError(f"structures differ in size: {a.positions.shape[0]} vs {b.positions.shape[0]} sites")
    return a.positions.shape[0]


def _profile_costs(a: PreparedStructure, b: PreparedStructure):
    """Terminal contribution and the intermediate cost matrix (slot of b, source of a)."""
    dz = a.along[None, :] - b.along[:, None]
    dr = a.radial[None, :] - b.radial[:, None]
    costs = dz ** 2 + dr ** 2
    terminal = costs[0, 0] + costs[-1, -1]
    return float(terminal), costs[1:-1, 1:-1]


def axis_profile_lower_bound(a, b) -> float:
    """
    Lower bound on S^2 from rotation- and mirror-invariant site features.

    Every candidate transform keeps each site's position along the in-out
    axis and its distance from it, so matching those features optimally
    between the two structures can only undercut the true minimum.

    Args:
        a: First structure (SiteConfiguration or PreparedStructure).
        b: Second structure of the same size.

    Returns:
        The bound in r0^2.
    """
    a = a if isinstance(a, PreparedStructure) else prepare(a)
    b = b if isinstance(b, PreparedStructure) else prepare(b)
    n = _check_sizes(a, b)
    terminal, costs = _profile_costs(a, b)
    if costs.size:
        rows, cols = linear_sum_assignment(costs)
        terminal += float(costs[rows, cols].sum())
    return terminal / n


def _cross_terms(a: PreparedStructure, b: PreparedStructure) -> np.ndarray:
    """K[g, i, j] = b_i . (G_g a_j) for every candidate matrix G_g."""
    return np.einsum("ik,gkl,jl->gij", b.positions, _candidates(), a.positions, optimize=True)


class _BestCandidate:
    def __init__(self):
        self.value = np.inf
        self.key = None

    def offer(self, value: float, perm, g: int):
        key = (tuple(int(p) for p in perm), int(g))
        if self.key is None or value < self.value - TIE_TOLERANCE:
            self.value, self.key = value, key
        elif value <= self.value + TIE_TOLERANCE:
            # ties go to the lexicographically smallest (permutation, angle, mirror)
            if key < self.key:
                self.key = key
            self.value = min(self.value, value)


def _offer_block(best: _BestCandidate, perms: np.ndarray, values: np.ndarray):
    """values has shape (P, G); candidates are offered lexicographically."""
    for row, perm in zip(values, perms):
        low = row.min()
        if low > best.value + TIE_TOLERANCE:
            continue
        threshold = min(best.value, low) + TIE_TOLERANCE
        g = int(np.flatnonzero(row <= threshold)[0])
        best.offer(float(row[g]), perm, g)


def _exhaustive(a: PreparedStructure, b: PreparedStructure) -> AlignmentResult:
    n = a.positions.shape[0]
    perms = _permutation_table(n - 2)
    mats = _candidates()
    best = _BestCandidate()
    for perm in perms:
        order = np.concatenate(([0], 1 + perm, [n - 1]))
        moved = np.einsum("gkl,il->gik", mats, a.positions[order])
        values = np.sum((moved - b.positions[None]) ** 2, axis=(1, 2)) / n
        _offer_block(best, perm[None], values[None])
    perm, g = best.key
    return AlignmentResult(max(best.value, 0.0), _transform_from_index(perm, g), len(perms) * len(mats), True)


def score_prepared(
    a: PreparedStructure, b: PreparedStructure, cutoff: Optional[float] = None, exhaustive: bool = False
) -> AlignmentResult:
    """`similarity_score` on structures already passed through `prepare`."""
    n = _check_sizes(a, b)
    if exhaustive:
        return _exhaustive(a, b)

    terminal, costs = _profile_costs(a, b)
    perms = _permutation_table(n - 2)
    slots = np.arange(n - 2)
    bounds = (terminal + costs[slots, perms].sum(axis=1)) / n
    if cutoff is not None and bounds.min() >= cutoff:
        return AlignmentResult(float(bounds.min()), None, 0, exact=False)

    order = np.argsort(bounds, kind="stable")
    kernel = _cross_terms(a, b)
    fixed = kernel[:, 0, 0] + kernel[:, n - 1, n - 1]
    inner = kernel[:, 1:n - 1, 1:n - 1]
    norms = a.square_norm + b.square_norm

    best = _BestCandidate()
    evaluations = 0
    truncated = False
    for start in range(0, len(order), _PERMUTATION_BLOCK):
        block = order[start:start + _PERMUTATION_BLOCK]
        live = block[bounds[block] <= best.value + TIE_TOLERANCE]
        if cutoff is not None:
            eligible = live.size
            live = live[bounds[live] < cutoff]
            truncated = truncated or live.size < eligible
        if live.size == 0:
            break
        block_perms = perms[live]
        cross = fixed[None, :] + inner[:, slots[None, :], block_perms].sum(axis=2).T
        values = np.maximum((norms - 2.0 * cross) / n, 0.0)
        evaluations += values.size
        _offer_block(best, block_perms, values)
        if cutoff is not None and best.value < cutoff:
            perm, g = best.key
            return AlignmentResult(best.value, _transform_from_index(perm, g), evaluations, exact=False)

    if best.key is None:
        # every permutation was ruled out by the cutoff
        return AlignmentResult(float(bounds.min()), None, evaluations, exact=False)
    perm, g = best.key
    # permutations skipped by the cutoff may hold a lower value that is still >= cutoff
    return AlignmentResult(best.value, _transform_from_index(perm, g), evaluations, exact=not truncated)


def similarity_score(
    a: SiteConfiguration, b: SiteConfiguration, cutoff: Optional[float] = None, exhaustive: bool = False
) -> AlignmentResult:
    """
    Minimal mean squared site distance over relabelings, rotations and mirror.

    Args:
        a: Structure that is transformed.
        b: Reference structure.
        cutoff: Link threshold in r0^2. When given, the search stops as soon
                as the outcome of `s_squared < cutoff` is settled.
        exhaustive: Enumerate explicit coordinates for every candidate instead
                    of the bounded search.

    Returns:
        AlignmentResult; `best_transform` maps `a` onto `b` via `apply_transform`.

    Raises:
        ValueError: if the structures differ in size.
    """
    _check_sizes(a, b)
    return score_prepared(prepare(a), prepare(b), cutoff=cutoff, exhaustive=exhaustive)
