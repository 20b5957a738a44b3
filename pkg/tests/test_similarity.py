import itertools

import numpy as np
import pytest

from excitonforge import similarity
from excitonforge.geometry import SymmetryTransform, apply_transform, sample_random_structure


@pytest.fixture
def structures():
    return [sample_random_structure(5, rng_seed=seed) for seed in range(8)]


def test_structure_is_identical_to_itself():
    config = sample_random_structure(6, rng_seed=0)

    result = similarity.similarity_score(config, config)

    assert result.s_squared == pytest.approx(0.0, abs=1e-12)
    assert result.best_transform == SymmetryTransform.identity(6)
    assert result.exact


@pytest.mark.parametrize("transform", [
    SymmetryTransform((1, 0, 2), 90, False),
    SymmetryTransform((2, 1, 0), 0, True),
    SymmetryTransform((0, 2, 1), 314, True),
])
def test_transformed_copy_scores_zero(transform):
    config = sample_random_structure(5, rng_seed=31)
    moved = apply_transform(config, transform)

    result = similarity.similarity_score(moved, config)

    assert result.s_squared == pytest.approx(0.0, abs=1e-12)
    aligned = apply_transform(moved, result.best_transform)
    assert np.allclose(aligned.positions, config.positions, atol=1e-6)


def test_score_is_invariant_under_symmetry_transforms(structures):
    a, b = structures[0], structures[1]
    moved = apply_transform(a, SymmetryTransform((2, 0, 1), 122, True))

    assert similarity.similarity_score(moved, b).s_squared == pytest.approx(
        similarity.similarity_score(a, b).s_squared, abs=1e-12
    )


def test_score_is_symmetric(structures):
    for a, b in itertools.combinations(structures[:5], 2):
        assert similarity.similarity_score(a, b).s_squared == pytest.approx(
            similarity.similarity_score(b, a).s_squared, abs=1e-12
        )


@pytest.mark.parametrize("n_sites", [4, 5])
def test_bounded_search_matches_exhaustive_enumeration(n_sites):
    configs = [sample_random_structure(n_sites, rng_seed=100 + seed) for seed in range(5)]
    for a, b in itertools.combinations(configs, 2):
        # Act
        pruned = similarity.similarity_score(a, b)
        brute = similarity.similarity_score(a, b, exhaustive=True)

        # Assert
        assert pruned.s_squared == pytest.approx(brute.s_squared, abs=1e-12)
        assert pruned.best_transform == brute.best_transform
        assert pruned.evaluations <= brute.evaluations

def test_bounded_search_agrees_with_enumeration_on_many_four_site_pairs():
    cutoff = 0.0125
    for k in range(100):
        a = sample_random_structure(4, rng_seed=1000 + 2 * k)
        b = sample_random_structure(4, rng_seed=1001 + 2 * k)

        brute = similarity.similarity_score(a, b, exhaustive=True)
        pruned = similarity.similarity_score(a, b)
        linked = similarity.similarity_score(a, b, cutoff=cutoff)

        assert pruned.s_squared == pytest.approx(brute.s_squared, abs=1e-12)
        assert (linked.s_squared < cutoff) == (brute.s_squared < cutoff)



def test_cutoff_decides_the_link_predicate(structures):
    pairs = list(itertools.combinations(structures, 2))
    exact = np.array([similarity.similarity_score(a, b).s_squared for a, b in pairs])
    cutoff = float(np.median(exact))

    for (a, b), value in zip(pairs, exact):
        result = similarity.similarity_score(a, b, cutoff=cutoff)
        assert (result.s_squared < cutoff) == (value < cutoff)
        if result.exact:
            assert result.s_squared == pytest.approx(value, abs=1e-12)


def test_profile_bound_never_exceeds_score(structures):
    for a, b in itertools.combinations(structures, 2):
        assert similarity.axis_profile_lower_bound(a, b) <= similarity.similarity_score(a, b).s_squared + 1e-12


def test_profile_bound_vanishes_for_rotated_copy():
    config = sample_random_structure(6, rng_seed=2)
    rotated = apply_transform(config, SymmetryTransform((0, 1, 2, 3), 90, False))
    assert similarity.axis_profile_lower_bound(config, rotated) == pytest.approx(0.0, abs=1e-12)


def test_bound_alone_can_rule_out_a_pair():
    a = sample_random_structure(5, rng_seed=1)
    b = sample_random_structure(5, rng_seed=2)
    bound = similarity.axis_profile_lower_bound(a, b)

    result = similarity.similarity_score(a, b, cutoff=bound * (1.0 - 1e-9))

    assert result.best_transform is None
    assert result.evaluations == 0
    assert not result.exact


def test_size_mismatch_is_rejected():
    with pytest.raises(ValueError):
        similarity.similarity_score(sample_random_structure(5, rng_seed=0), sample_random_structure(6, rng_seed=0))


def test_two_site_structures_have_no_intermediates_to_relabel():
    a = sample_random_structure(2, rng_seed=0)
    result = similarity.similarity_score(a, a)
    assert result.s_squared == pytest.approx(0.0, abs=1e-12)
    assert result.best_transform.permutation == ()
