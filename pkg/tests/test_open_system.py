import math

import numpy as np
import pytest
from scipy.integrate import trapezoid

from excitonforge import open_system, quantum_core
from excitonforge.exceptions import ConvergenceError
from excitonforge.geometry import SiteConfiguration, sample_random_structure


@pytest.fixture
def dimer():
    return SiteConfiguration(np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]]))


def test_coherent_model_reproduces_closed_system_dimer(dimer):
    """The window ends on the grid, so the dimer maximum is sampled exactly."""
    # Arrange
    expected = quantum_core.transport_efficiency(dimer)

    # Act
    noisy = open_system.evolve_master_equation(dimer, open_system.CoherentRate())

    # Assert
    assert noisy.epsilon_max == pytest.approx(expected.epsilon_max, abs=1e-6)
    assert noisy.t_star == pytest.approx(1.0)


@pytest.mark.parametrize("seed", [1, 2, 3, 9])
def test_zero_rate_matches_closed_system_on_six_sites(seed):
    config = sample_random_structure(6, rng_seed=seed)
    expected = quantum_core.transport_efficiency(config)

    noisy = open_system.evolve_master_equation(config, open_system.haken_strobl_rate(0.0))

    assert noisy.epsilon_max == pytest.approx(expected.epsilon_max, abs=1e-6)


def test_sampled_peak_is_refined_between_samples():
    times = np.arange(0.0, 3.0, 0.1)
    values = np.sin(times)

    t_best, peak = open_system.refine_sampled_peak(times, values, np.cos(times))

    assert values.max() < 1.0 - 1e-4
    assert peak == pytest.approx(1.0, abs=1e-6)
    assert t_best == pytest.approx(math.pi / 2, abs=1e-3)


def test_sampled_peak_at_the_boundary_keeps_the_sample():
    times = np.linspace(0.0, 1.0, 11)
    t_best, peak = open_system.refine_sampled_peak(times, times, np.ones_like(times))
    assert (t_best, peak) == (1.0, 1.0)


def test_dephasing_slows_dimer_transfer_monotonically(dimer):
    epsilons = [
        open_system.evolve_master_equation(dimer, open_system.haken_strobl_rate(g)).epsilon_max
        for g in (0.0, 0.5, 1.32, 4.0)
    ]
    assert all(a > b for a, b in zip(epsilons, epsilons[1:]))


def test_long_dephased_evolution_equalizes_populations(dimer):
    result = open_system.evolve_master_equation(
        dimer, open_system.haken_strobl_rate(1.32), duration=20.0, steps_per_tau=500, keep_trajectory=True
    )
    assert result.times[-1] == pytest.approx(20.0)
    assert np.allclose(result.populations[-1], 0.5, atol=1e-3)
    # efficiency figures still refer to the first window
    assert result.t_star <= 1.0


def test_trace_is_preserved():
    config = sample_random_structure(6, rng_seed=1)
    result = open_system.evolve_master_equation(config, open_system.haken_strobl_rate(1.32), keep_trajectory=True)
    assert np.allclose(result.populations.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(result.populations > -1e-9)


def test_trace_drift_raises_convergence_error(mocker, dimer):
    mocker.patch.object(open_system, "TRACE_TOLERANCE", -1.0)
    with pytest.raises(ConvergenceError) as excinfo:
        open_system.evolve_master_equation(dimer, open_system.CoherentRate())
    assert excinfo.value.residual is not None


def test_duration_shorter_than_window_is_rejected(dimer):
    with pytest.raises(ValueError):
        open_system.evolve_master_equation(dimer, open_system.CoherentRate(), duration=0.5)


def test_haken_strobl_rejects_negative_rate():
    with pytest.raises(ValueError):
        open_system.HakenStroblRate(-0.1)


def test_rate_table_is_read_only_and_interpolated():
    model = open_system.haken_strobl_rate(1.32)
    assert model.table.shape == (201,)
    with pytest.raises(ValueError):
        model.table[0] = 0.0
    assert np.allclose(model.rate(np.array([0.0, 0.37, 5.0])), 1.32)
    assert not model.is_coherent
    assert open_system.CoherentRate().is_coherent


def test_rate_grid_must_increase():
    with pytest.raises(ValueError):
        open_system.HakenStroblRate(1.0, grid=[0.0, 0.5, 0.5, 1.0])


def test_ohmic_rate_starts_at_zero_and_reaches_calibrated_plateau():
    model = open_system.ohmic_tcl2_rate()

    assert model.table[0] == 0.0
    assert model.asymptotic_rate == pytest.approx(0.5)
    assert model.rate_at(np.array([1000.0]))[0] == pytest.approx(0.5, rel=1e-2)
    assert np.all(model.table >= 0.0)


def test_ohmic_rate_matches_direct_quadrature():
    # Arrange
    model = open_system.OhmicTCL2Rate(lambda_reorg=35.0, omega_c=30.0, temperature=10.0)
    s = 0.5
    t = s * model.tau
    w = np.linspace(1e-9, open_system.CUTOFF_MULTIPLE * model.omega_c, 400001)
    integrand = (model.lambda_reorg / model.omega_c) * np.exp(-w / model.omega_c) / np.tanh(w / (2.0 * model.kt)) * np.sin(w * t)

    # Act
    direct = 2.0 * trapezoid(integrand, w) * model.tau

    # Assert
    assert model.rate_at(np.array([s]))[0] == pytest.approx(direct, rel=1e-3)


def test_non_markovian_rate_turns_negative():
    model = open_system.non_markovian_rate()
    assert model.table[0] == 0.0
    assert model.table.min() < 0.0
    assert model.parameters()["omega_channel_cm"] == 150.0


def test_non_markovian_integrand_is_regular_at_resonance():
    model = open_system.NonMarkovianRate()
    value = model.integrand(np.array([model.omega]), 2.0)
    assert np.all(np.isfinite(value))


def test_get_noise_model_by_name():
    model = open_system.get_noise_model("haken_strobl", gamma=0.5)
    assert isinstance(model, open_system.HakenStroblRate)
    assert model.parameters() == {"gamma_tau": 0.5}
    with pytest.raises(ValueError):
        open_system.get_noise_model("lindblad")


def test_liouvillian_dephasing_kills_only_coherences():
    h = np.array([[0.0, 1.0], [1.0, 0.0]])
    coherent, dephasing = open_system.liouvillian_parts(h)
    assert coherent.shape == (4, 4)
    assert list(dephasing) == [0.0, -1.0, -1.0, 0.0]
    rho = np.diag([1.0, 0.0]).astype(complex).ravel()
    # d/dt rho = -i[H, rho] keeps the trace
    assert abs((coherent @ rho)[[0, 3]].sum()) < 1e-12


def test_unit_cube_window_constant():
    assert open_system.UNIT_CUBE_TAU == pytest.approx(quantum_core.window_tau(
        SiteConfiguration(np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]]))
    ))
    assert open_system.UNIT_CUBE_TAU == pytest.approx(0.2 * math.pi * 3.0 ** 1.5)


def test_noisy_census_evaluates_every_structure():
    configs = [sample_random_structure(4, rng_seed=s) for s in range(3)]
    values = open_system.noisy_census(configs, open_system.haken_strobl_rate(1.32))
    assert values.shape == (3,)
    assert np.all((values >= 0.0) & (values <= 1.0))


@pytest.mark.slow
def test_dephasing_never_raises_efficiency_on_random_structures():
    rates = (0.0, 0.4, 1.32, 2.0)
    for seed in range(100):
        config = sample_random_structure(6, rng_seed=seed)
        epsilons = [
            open_system.evolve_master_equation(config, open_system.haken_strobl_rate(g)).epsilon_max for g in rates
        ]
        assert all(later <= earlier + 1e-6 for earlier, later in zip(epsilons, epsilons[1:])), (seed, epsilons)


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(10))
def test_long_dephased_evolution_spreads_evenly_over_six_sites(seed):
    config = sample_random_structure(6, rng_seed=seed)
    result = open_system.evolve_master_equation(
        config, open_system.haken_strobl_rate(1.32), duration=10.0, steps_per_tau=500, keep_trajectory=True
    )
    assert result.populations[-1, -1] == pytest.approx(1.0 / 6.0, abs=1e-3)
