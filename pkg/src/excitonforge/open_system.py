"""
Site-dephasing master equations with constant, Ohmic time-dependent and
non-Markovian rates.

Rates are handled as gamma * tau on the dimensionless time s = t / tau.
Bath parameters given in cm^-1 (and temperatures in K) are brought to J
units through `coupling_cm`, the value of J in cm^-1.
"""
import logging
import math
import warnings
from abc import ABC, abstractmethod
from typing import Any, Dict, Iterable, Optional

import numpy as np
from scipy.integrate import IntegrationWarning, quad, simpson
from scipy.interpolate import CubicHermiteSpline

from .exceptions import ConvergenceError
from .geometry import SiteConfiguration
from .quantum_core import TransportResult, build_hamiltonian, window_tau

logger = logging.getLogger(__name__)

KB_CM_PER_K = 0.6950348  # Boltzmann constant in cm^-1 / K
UNIT_CUBE_TAU = 0.2 * math.pi * 3.0 ** 1.5
DEFAULT_COUPLING_CM = 100.0

STEPS_PER_TAU = 5000
MAX_PHASE_PER_STEP = 0.02
TRACE_TOLERANCE = 1e-6
CONVERGENCE_TOLERANCE = 1e-6
QUAD_EPSABS = 1e-8
CUTOFF_MULTIPLE = 50.0


def _default_grid() -> np.ndarray:
    return np.linspace(0.0, 1.0, 201)


class NoiseRateModel(ABC):
    """Abstract base class for dephasing-rate models."""

    kind: str = ""

    def __init__(self, grid: Optional[Iterable[float]] = None, tau: float = UNIT_CUBE_TAU):
        self.tau = float(tau)
        grid = _default_grid() if grid is None else np.asarray(list(grid), dtype=float)
        if grid.ndim != 1 or grid.size < 2 or np.any(np.diff(grid) <= 0):
            raise ValueError("rate grid must be strictly increasing with at least two points")
        grid.setflags(write=False)
        self.grid = grid
        table = np.asarray(self.rate_at(grid), dtype=float)
        table.setflags(write=False)
        self.table = table

    @abstractmethod
    def rate_at(self, s: np.ndarray) -> np.ndarray:
        """
        Exact gamma * tau at dimensionless times s = t / tau.

        Returns:
            An array of the same shape as `s`.
        """

    @abstractmethod
    def parameters(self) -> Dict[str, Any]:
        """Model parameters for manifests and census records."""

    def rate_table(self, grid: Optional[Iterable[float]] = None) -> np.ndarray:
        """gamma * tau on `grid`; the precomputed table when no grid is given."""
        if grid is None:
            return self.table
        return np.asarray(self.rate_at(np.asarray(list(grid), dtype=float)), dtype=float)

    def rate(self, s: np.ndarray) -> np.ndarray:
        """gamma * tau linearly interpolated from the precomputed table; held constant past its end."""
        return np.interp(s, self.grid, self.table)

    @property
    def is_coherent(self) -> bool:
        return not np.any(self.table)


class CoherentRate(NoiseRateModel):
    """No dephasing; reduces the master equation to the von Neumann equation."""

    kind = "coherent"

    def rate_at(self, s):
        return np.zeros_like(np.asarray(s, dtype=float))

    def parameters(self):
        return {}


class HakenStroblRate(NoiseRateModel):
    """Constant dephasing rate gamma, given in units of 1/tau."""

    kind = "haken_strobl"

    def __init__(self, gamma: float, grid=None, tau: float = UNIT_CUBE_TAU):
        if gamma < 0:
            raise ValueError(f"gamma must be non-negative, got {gamma}")
        self.gamma = float(gamma)
        super().__init__(grid=grid, tau=tau)

    def rate_at(self, s):
        return np.full_like(np.asarray(s, dtype=float), self.gamma)

    def parameters(self):
        return {"gamma_tau": self.gamma}


def _coth_minus_inverse(x: float) -> float:
    """coth(x) - 1/x, regular at the origin."""
    if x < 1e-4:
        return x / 3.0
    return 1.0 / math.tanh(x) - 1.0 / x


def _quad_checked(func, lower, upper, **kwargs) -> float:
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", IntegrationWarning)
        value, abserr = quad(func, lower, upper, epsabs=QUAD_EPSABS, limit=500, **kwargs)
    if any(issubclass(w.category, IntegrationWarning) for w in caught):
        raise ConvergenceError("rate quadrature did not converge", residual=abserr)
    return value


class OhmicTCL2Rate(NoiseRateModel):
    """
    Time-dependent TCL2 rate of an Ohmic bath,
    gamma(t) = 2 int_0^inf J(w) coth(w / 2T) sin(w t) / w dw,  J(w) = (lambda / w_c) w exp(-w / w_c).

    When `lambda_reorg` is None it is calibrated so that gamma(inf) equals
    `asymptotic_rate` / tau, using gamma(inf) = 2 pi lambda T / w_c.
    """

    kind = "ohmic_tcl2"

    def __init__(
        self,
        lambda_reorg: Optional[float] = None,
        omega_c: float = 30.0,
        temperature: float = 10.0,
        grid=None,
        tau: float = UNIT_CUBE_TAU,
        coupling_cm: float = DEFAULT_COUPLING_CM,
        asymptotic_rate: float = 0.5,
    ):
        if omega_c <= 0 or temperature <= 0:
            raise ValueError("omega_c and temperature must be positive")
        self.omega_c_cm = float(omega_c)
        self.temperature_k = float(temperature)
        self.coupling_cm = float(coupling_cm)
        self.omega_c = omega_c / coupling_cm
        self.kt = KB_CM_PER_K * temperature / coupling_cm
        if lambda_reorg is None:
            self.lambda_reorg = (asymptotic_rate / tau) * self.omega_c / (2.0 * math.pi * self.kt)
        else:
            self.lambda_reorg = lambda_reorg / coupling_cm
        super().__init__(grid=grid, tau=tau)

    @property
    def asymptotic_rate(self) -> float:
        """gamma(inf) * tau."""
        return 2.0 * math.pi * self.lambda_reorg * self.kt / self.omega_c * self.tau

    def _gamma(self, t: float) -> float:
        if t == 0.0:
            return 0.0
        wc, kt = self.omega_c, self.kt

        def regular(w):
            return math.exp(-w / wc) * _coth_minus_inverse(w / (2.0 * kt))

        # coth(w/2T) = 2T/w + (coth(w/2T) - 2T/w); the 2T/w part integrates to 2T arctan(w_c t)
        oscillatory = _quad_checked(regular, 0.0, CUTOFF_MULTIPLE * wc, weight="sin", wvar=t)
        return 2.0 * (self.lambda_reorg / wc) * (2.0 * kt * math.atan(wc * t) + oscillatory)

    def rate_at(self, s):
        s = np.asarray(s, dtype=float)
        return np.vectorize(lambda x: self._gamma(x * self.tau) * self.tau)(s) if s.size else s.copy()

    def parameters(self):
        return {
            "lambda_reorg_cm": self.lambda_reorg * self.coupling_cm,
            "omega_c_cm": self.omega_c_cm,
            "temperature_k": self.temperature_k,
            "coupling_cm": self.coupling_cm,
            "asymptotic_rate_tau": self.asymptotic_rate,
        }


class NonMarkovianRate(NoiseRateModel):
    """
    Single-channel TCL2 rate that turns negative at some times,
    gamma(w, t) = 2 int J(v) [n(v) sin((w+v)t)/(w+v) + (n(v)+1) sin((w-v)t)/(w-v)] dv,
    with n(v) = v^3 / (4 pi^3) / (exp(v / T) - 1) and hbar = c = k_B = 1.
    """

    kind = "non_markovian"

    def __init__(
        self,
        omega_channel: float = 150.0,
        lambda_reorg: float = 30.0,
        omega_c: float = 10.0,
        temperature: float = 10.0,
        grid=None,
        tau: float = UNIT_CUBE_TAU,
        coupling_cm: float = DEFAULT_COUPLING_CM,
    ):
        if min(omega_channel, lambda_reorg, omega_c, temperature) <= 0:
            raise ValueError("non-Markovian rate parameters must be positive")
        self.cm_parameters = {
            "omega_channel_cm": float(omega_channel),
            "lambda_reorg_cm": float(lambda_reorg),
            "omega_c_cm": float(omega_c),
            "temperature_k": float(temperature),
            "coupling_cm": float(coupling_cm),
        }
        self.omega = omega_channel / coupling_cm
        self.lambda_reorg = lambda_reorg / coupling_cm
        self.omega_c = omega_c / coupling_cm
        self.kt = KB_CM_PER_K * temperature / coupling_cm
        super().__init__(grid=grid, tau=tau)

    def occupation(self, v):
        v = np.asarray(v, dtype=float)
        safe = np.where(v > 0, v, 1.0)
        n = safe ** 3 / (4.0 * math.pi ** 3) / np.expm1(safe / self.kt)
        return np.where(v > 0, n, 0.0)

    def integrand(self, v, t):
        """Integrand of gamma(w, t) in J units; vectorized over v."""
        v = np.asarray(v, dtype=float)
        spectral = (self.lambda_reorg / self.omega_c) * v * np.exp(-v / self.omega_c)
        n = self.occupation(v)
        # sin(x t) / x = t sinc(x t / pi), regular at x = 0
        plus = t * np.sinc((self.omega + v) * t / math.pi)
        minus = t * np.sinc((self.omega - v) * t / math.pi)
        return 2.0 * spectral * (n * plus + (n + 1.0) * minus)

    def _gamma(self, t: float) -> float:
        if t == 0.0:
            return 0.0
        upper = CUTOFF_MULTIPLE * self.omega_c
        points = [self.omega] if self.omega < upper else None
        return _quad_checked(lambda v: float(self.integrand(v, t)), 0.0, upper, points=points)

    def rate_at(self, s):
        s = np.asarray(s, dtype=float)
        return np.vectorize(lambda x: self._gamma(x * self.tau) * self.tau)(s) if s.size else s.copy()

    def parameters(self):
        return dict(self.cm_parameters, omega_channel_tau=self.omega * self.tau)


# A mapping from noise_model names in the run config to the classes that implement them.
NOISE_MODEL_MAP = {
    "coherent": CoherentRate,
    "haken_strobl": HakenStroblRate,
    "ohmic_tcl2": OhmicTCL2Rate,
    "non_markovian": NonMarkovianRate,
}


def get_noise_model(kind: str, **params) -> NoiseRateModel:
    """
    Instantiates a rate model by name.

    Args:
        kind: A key of NOISE_MODEL_MAP.
        **params: Constructor arguments of the selected class.

    Returns:
        The rate model with its table precomputed.
    """
    model_class = NOISE_MODEL_MAP.get(kind)
    if model_class is None:
        raise ValueError(f"Unknown noise model '{kind}'. Known: {sorted(NOISE_MODEL_MAP)}")
    return model_class(**params)


def haken_strobl_rate(gamma: float, grid=None, tau: float = UNIT_CUBE_TAU) -> HakenStroblRate:
    return HakenStroblRate(gamma, grid=grid, tau=tau)


def ohmic_tcl2_rate(
    lambda_reorg: Optional[float] = None,
    omega_c: float = 30.0,
    temperature: float = 10.0,
    grid=None,
    tau: float = UNIT_CUBE_TAU,
    coupling_cm: float = DEFAULT_COUPLING_CM,
    asymptotic_rate: float = 0.5,
) -> OhmicTCL2Rate:
    return OhmicTCL2Rate(lambda_reorg, omega_c, temperature, grid, tau, coupling_cm, asymptotic_rate)


def non_markovian_rate(
    omega_channel: float = 150.0,
    lambda_reorg: float = 30.0,
    omega_c: float = 10.0,
    temperature: float = 10.0,
    grid=None,
    tau: float = UNIT_CUBE_TAU,
    coupling_cm: float = DEFAULT_COUPLING_CM,
) -> NonMarkovianRate:
    return NonMarkovianRate(omega_channel, lambda_reorg, omega_c, temperature, grid, tau, coupling_cm)


def liouvillian_parts(hamiltonian: np.ndarray):
    """
    Coherent superoperator and dephasing mask on the row-major vectorized rho.

    rho_dot = -i[rho, H] + gamma * sum_k (A_k rho A_k - {A_k, rho}/2)
    and the dissipator with site projectors A_k removes every off-diagonal element.
    """
    n = hamiltonian.shape[0]
    identity = np.eye(n)
    # vec(A rho B) = (A kron B^T) vec(rho) for row-major vec
    coherent = -1j * (np.kron(identity, hamiltonian.T) - np.kron(hamiltonian, identity))
    dephasing = -(1.0 - identity).ravel()
    return coherent, dephasing


def _step_count(hamiltonian: np.ndarray, tau: float, duration: float, steps_per_tau: int) -> int:
    base = int(math.ceil(steps_per_tau * duration))
    spectral_radius = float(np.max(np.abs(np.linalg.eigvalsh(hamiltonian)))) if hamiltonian.size else 0.0
    needed = int(math.ceil(duration * tau * spectral_radius / MAX_PHASE_PER_STEP))
    if needed > base:
        logger.debug("Raising integrator steps from %d to %d for spectral radius %.3g", base, needed, spectral_radius)
    return max(base, needed)


def _integrate(hamiltonian: np.ndarray, model: NoiseRateModel, tau: float, duration: float, steps: int):
    n = hamiltonian.shape[0]
    coherent, dephasing = liouvillian_parts(hamiltonian)
    dt = duration * tau / steps
    half_steps = np.arange(2 * steps + 1) * (0.5 * dt / tau)
    gammas = model.rate(half_steps) / tau

    diag = np.arange(n) * (n + 1)
    rho = np.zeros(n * n, dtype=complex)
    rho[0] = 1.0
    populations = np.empty((steps + 1, n))
    populations[0] = rho[diag].real
    # d p_out / dt at every step
    slopes = np.empty(steps + 1)
    max_hermiticity = 0.0

    def rhs(v, gamma):
        return coherent @ v + gamma * dephasing * v

    for step in range(steps):
        g0, gh, g1 = gammas[2 * step], gammas[2 * step + 1], gammas[2 * step + 2]
        k1 = rhs(rho, g0)
        slopes[step] = k1[diag[-1]].real
        k2 = rhs(rho + 0.5 * dt * k1, gh)
        k3 = rhs(rho + 0.5 * dt * k2, gh)
        k4 = rhs(rho + dt * k3, g1)
        rho = rho + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        populations[step + 1] = rho[diag].real
        if step % 500 == 0:
            matrix = rho.reshape(n, n)
            max_hermiticity = max(max_hermiticity, float(np.max(np.abs(matrix - matrix.conj().T))))
    slopes[steps] = rhs(rho, gammas[-1])[diag[-1]].real

    trace_drift = float(np.max(np.abs(populations.sum(axis=1) - 1.0)))
    if trace_drift > TRACE_TOLERANCE:
        raise ConvergenceError(
            f"trace drift over {steps} steps of dt={dt:.3e} (hermiticity error {max_hermiticity:.2e})",
            residual=trace_drift,
        )
    return populations, slopes, rho.reshape(n, n)


def evolve_master_equation(
    config: SiteConfiguration,
    model: NoiseRateModel,
    tau: Optional[float] = None,
    duration: float = 1.0,
    steps_per_tau: int = STEPS_PER_TAU,
    keep_trajectory: bool = False,
    check_convergence: bool = False,
) -> TransportResult:
    """
    Integrates the dephasing master equation from the input site with RK4.

    Args:
        config: The structure.
        model: Rate model; its rate is interpolated at every RK4 substep.
        tau: Window length; defaults to `window_tau(config)`.
        duration: Integrated span in units of tau. Efficiency figures always
                  refer to the first window [0, tau]; the trajectory covers the span.
        steps_per_tau: Minimum RK4 steps per tau; raised for stiff structures.
        keep_trajectory: Attach times (in tau) and site populations.
        check_convergence: Repeat with doubled steps and fail if epsilon moves by 1e-6 or more.

    Returns:
        TransportResult of the noisy evolution.

    Raises:
        ConvergenceError: on trace drift above 1e-6 or a failed convergence check.
    """
    if tau is None:
        tau = window_tau(config)
    if duration < 1.0:
        raise ValueError("duration must cover at least one window")
    hamiltonian = build_hamiltonian(config).matrix
    steps = _step_count(hamiltonian, tau, duration, steps_per_tau)
    result = _noisy_result(hamiltonian, model, tau, duration, steps, keep_trajectory)

    if check_convergence:
        refined = _noisy_result(hamiltonian, model, tau, duration, 2 * steps, False)
        change = abs(refined.epsilon_max - result.epsilon_max)
        if change >= CONVERGENCE_TOLERANCE:
            raise ConvergenceError(f"epsilon changed when doubling {steps} steps", residual=change)
    return result


def refine_sampled_peak(times: np.ndarray, values: np.ndarray, slopes: np.ndarray):
    """
    Maximum of a sampled curve, refined between the samples.

    A cubic Hermite spline through the samples and their slopes is maximized
    on the two intervals around the best sample.

    Returns:
        (t_best, value_best); value_best is never below the sampled maximum.
    """
    best = int(np.argmax(values))
    t_best, v_best = float(times[best]), float(values[best])
    lo, hi = max(best - 1, 0), min(best + 1, len(times) - 1)
    if hi == lo:
        return t_best, v_best
    spline = CubicHermiteSpline(times[lo:hi + 1], values[lo:hi + 1], slopes[lo:hi + 1])
    critical = spline.derivative().roots(discontinuity=False, extrapolate=False)
    critical = critical[np.isfinite(critical)]
    if critical.size:
        candidates = spline(critical)
        k = int(np.argmax(candidates))
        if candidates[k] > v_best:
            t_best, v_best = float(critical[k]), float(candidates[k])
    return t_best, v_best


def _noisy_result(hamiltonian, model, tau, duration, steps, keep_trajectory) -> TransportResult:
    populations, slopes, _ = _integrate(hamiltonian, model, tau, duration, steps)
    times = np.linspace(0.0, duration, steps + 1)
    in_window = times <= 1.0 + 1e-12
    p_out = populations[in_window, -1]
    # slopes per unit of t / tau
    t_star, peak = refine_sampled_peak(times[in_window], p_out, slopes[in_window] * tau)
    epsilon_max = float(np.clip(peak, 0.0, 1.0))
    epsilon_int = float(np.clip(simpson(p_out, x=times[in_window]), 0.0, epsilon_max))
    return TransportResult(
        epsilon_max=epsilon_max,
        t_star=t_star,
        tau=float(tau),
        epsilon_int=epsilon_int,
        times=times if keep_trajectory else None,
        populations=populations if keep_trajectory else None,
    )


def noisy_census(configs: Iterable[SiteConfiguration], model: NoiseRateModel, tau: Optional[float] = None) -> np.ndarray:
    """Noisy efficiencies of many structures under one rate model."""
    return np.array([evolve_master_equation(c, model, tau=tau).epsilon_max for c in configs])
