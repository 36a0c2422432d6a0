"""
Dynamics Service

This module evolves the excitonic density matrix under coherent hopping, pure
dephasing with nearest-neighbor noise correlation, irreversible trapping at a
sink site and uniform recombination loss:

    d rho/dt = -i (H_eff rho - rho H_eff^+) - M o rho
    H_eff    = H - (i/2) (kappa |s><s| + Gamma I)
    M_mn     = d (1 - c_mn) for m != n, 0 on the diagonal

The sink and loss accumulators are integrated alongside rho, so
Tr rho + sink + loss is conserved by construction.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, List, Optional

import numpy as np
from scipy.linalg import expm
from scipy.optimize import brentq

from src.services.network_service import hamiltonian
from src.utils.errors import InvalidArgumentError, NumericalFailure
from src.utils.storage import write_trajectory_csv

logger = logging.getLogger(__name__)

METHODS = ("rk4", "exact")

# Integration stops once the system holds less than this population
COMPLETION_TRACE = 1e-6
# A run that hits t_max with more than this left is reported as non-converged
NONCONVERGED_TRACE = 0.01
# Loss-limited horizon in units of 1/Gamma
LOSS_HORIZON = 20.0
# RK4 step as a fraction of the fastest rate in the problem
STEP_FRACTION = 0.05
# Default cap on the number of snapshots kept by propagate
MAX_DEFAULT_SNAPSHOTS = 1000

HERMITIAN_ATOL = 1e-10
POSITIVITY_ATOL = 1e-8
TRACE_ATOL = 1e-8
STEP_HALVING_ATOL = 1e-6


@dataclass(frozen=True)
class OpenSystemSpec:
    """Environment rates in 1/ps and the nearest-neighbor noise correlation."""

    dephasing_rate: float = 0.0
    noise_correlation: float = 0.0
    sink_rate: float = 0.0
    loss_rate: float = 0.0

    def __post_init__(self):
        for name in ("dephasing_rate", "sink_rate", "loss_rate"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise InvalidArgumentError(
                    f"{name} must be finite and >= 0, got {value}"
                )
        if not -1.0 <= self.noise_correlation <= 1.0:
            raise InvalidArgumentError(
                f"noise_correlation must lie in [-1, 1], got {self.noise_correlation}"
            )


@dataclass(eq=False)
class Trajectory:
    """Density-matrix snapshots on a time grid with the trap/loss accumulators."""

    times: np.ndarray
    states: np.ndarray
    sink_population: np.ndarray
    loss_population: np.ndarray
    positions: np.ndarray

    @property
    def populations(self):
        """Site populations, shape (n_times, n_sites)."""
        return np.real(np.diagonal(self.states, axis1=1, axis2=2))

    @property
    def trace(self):
        """Population still in the system at every snapshot."""
        return self.populations.sum(axis=1)


@dataclass(eq=False)
class TransportOutcome:
    """Result of running a propagation until the excitation has left the system."""

    efficiency: float
    loss: float
    residual: float
    transfer_time: float
    completion_time: float
    converged: bool
    trajectory: Trajectory
    method: str
    warnings: List[str] = field(default_factory=list)
    msd: Optional[np.ndarray] = None
    diffusion_fit: Optional[Any] = None


def nearest_neighbor_mask(positions, tol=1e-9):
    """
    Boolean matrix marking pairs of sites at the minimal inter-site distance.

    Args:
        positions (np.ndarray): Site coordinates, shape (n, dim)
        tol (float): Relative tolerance on the distance comparison

    Returns:
        np.ndarray: Symmetric boolean matrix with a False diagonal
    """
    diff = positions[:, None, :] - positions[None, :, :]
    distance = np.sqrt((diff**2).sum(axis=-1))
    off_diagonal = ~np.eye(len(positions), dtype=bool)
    nearest = distance[off_diagonal].min()
    return off_diagonal & (distance <= nearest * (1.0 + tol))


def neighbor_mask(net):
    """
    Pairs of sites treated as nearest neighbors for correlated noise.

    Presets use their geometry; custom networks use the coupling graph, so
    irregular positions do not change which coherences are correlated.
    """
    if net.topology_tag == "custom":
        mask = np.asarray(net.couplings) != 0
        mask[np.diag_indices(net.n_sites)] = False
        return mask
    return nearest_neighbor_mask(net.positions)


def dephasing_matrix(net, env):
    """
    Coherence decay rates M_mn = d (1 - c_mn), zero on the diagonal.

    Args:
        net (SiteNetwork): Network (see neighbor_mask)
        env (OpenSystemSpec): Environment

    Returns:
        np.ndarray: Real n x n matrix of decay rates
    """
    n = net.n_sites
    correlation = np.where(
        neighbor_mask(net), env.noise_correlation, 0.0
    )
    rates = env.dephasing_rate * (1.0 - correlation)
    rates[np.diag_indices(n)] = 0.0
    return rates


def effective_hamiltonian(net, env):
    """
    Non-Hermitian generator H - (i/2)(kappa |s><s| + Gamma I).

    The mean site energy is removed; a global shift does not change rho(t)
    and keeps the RK4 step independent of the absolute energy origin.
    """
    h = hamiltonian(net).astype(complex)
    h -= np.eye(net.n_sites) * np.mean(net.site_energies)
    if env.sink_rate > 0:
        if net.sink_site is None:
            raise InvalidArgumentError("sink_rate > 0 requires a network sink_site")
        h[net.sink_site, net.sink_site] -= 0.5j * env.sink_rate
    h -= 0.5j * env.loss_rate * np.eye(net.n_sites)
    return h


def default_step(net, env):
    """
    Default RK4 step 0.05 / max(spectral radius(H), d, kappa, Gamma).

    Args:
        net (SiteNetwork): Network
        env (OpenSystemSpec): Environment

    Returns:
        float: Step in ps
    """
    h = hamiltonian(net) - np.eye(net.n_sites) * np.mean(net.site_energies)
    radius = float(np.max(np.abs(np.linalg.eigvalsh(h))))
    scale = max(radius, env.dephasing_rate, env.sink_rate, env.loss_rate)
    return STEP_FRACTION / scale if scale > 0 else STEP_FRACTION


def validate_initial_state(rho0, n):
    """
    Check that rho0 is an n x n density matrix.

    Raises:
        InvalidArgumentError: Wrong shape, not Hermitian, or not unit trace
        NumericalFailure: Not positive semidefinite (reported at t=0)
    """
    rho0 = np.asarray(rho0, dtype=complex)
    if rho0.shape != (n, n):
        raise InvalidArgumentError(f"rho0 must be {n}x{n}, got {rho0.shape}")
    if not np.allclose(rho0, rho0.conj().T, rtol=0, atol=HERMITIAN_ATOL):
        raise InvalidArgumentError("rho0 must be Hermitian")
    if abs(np.trace(rho0).real - 1.0) > TRACE_ATOL:
        raise InvalidArgumentError("rho0 must have unit trace")
    if np.linalg.eigvalsh(rho0).min() < -POSITIVITY_ATOL:
        raise NumericalFailure("Initial state is not positive semidefinite", time=0.0)
    return rho0


def _check_state(rho, t):
    if not np.all(np.isfinite(rho)):
        raise NumericalFailure("Non-finite density matrix", time=t)
    if np.linalg.eigvalsh(rho).min() < -POSITIVITY_ATOL:
        raise NumericalFailure("Density matrix lost positivity", time=t)


def _derivative(rho, heff, decay):
    """Right-hand side of the master equation for the system block."""
    return -1j * (heff @ rho - rho @ heff.conj().T) - decay * rho


def coherent_propagator(heff, decay, dt):
    """
    Amplitude propagator exp(-i H_eff dt) when no coherence decays, else None.

    Without dephasing the master equation reduces to rho -> K rho K^+, which
    keeps pure states pure and positive for any step.
    """
    if np.any(decay):
        return None
    return expm(-1j * heff * dt)


def _rk4_step(rho, dt, heff, decay, sink_site, kappa, gamma, propagator=None):
    """
    Advance rho by one RK4 step.

    With an amplitude propagator the state is mapped as K rho K^+ and the
    quadrature shares of sink and loss are rescaled to the exact trace drop.

    Returns:
        tuple: (new rho, sink increment, loss increment)
    """
    k1 = _derivative(rho, heff, decay)
    r2 = rho + 0.5 * dt * k1
    k2 = _derivative(r2, heff, decay)
    r3 = rho + 0.5 * dt * k2
    k3 = _derivative(r3, heff, decay)
    r4 = rho + dt * k3
    if propagator is None:
        k4 = _derivative(r4, heff, decay)
        new_rho = rho + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    else:
        new_rho = propagator @ rho @ propagator.conj().T

    # Accumulators use the same stage states as rho
    stages = (rho, r2, r3, r4)
    weights = (1.0, 2.0, 2.0, 1.0)
    d_sink = 0.0
    if kappa > 0:
        d_sink = sum(w * r[sink_site, sink_site].real for w, r in zip(weights, stages))
        d_sink *= kappa * dt / 6.0
    d_loss = 0.0
    if gamma > 0:
        d_loss = sum(w * np.trace(r).real for w, r in zip(weights, stages))
        d_loss *= gamma * dt / 6.0
    if propagator is not None and d_sink + d_loss > 0:
        share = (np.trace(rho).real - np.trace(new_rho).real) / (d_sink + d_loss)
        d_sink *= share
        d_loss *= share
    return new_rho, d_sink, d_loss


def liouvillian(net, env):
    """
    Augmented generator acting on (vec rho, sink, loss).

    vec is row-major, so vec(A rho B) = kron(A, B^T) vec(rho).

    Args:
        net (SiteNetwork): Network
        env (OpenSystemSpec): Environment

    Returns:
        np.ndarray: Complex (n^2 + 2) x (n^2 + 2) matrix
    """
    n = net.n_sites
    heff = effective_hamiltonian(net, env)
    identity = np.eye(n)
    dim = n * n
    generator = np.zeros((dim + 2, dim + 2), dtype=complex)
    generator[:dim, :dim] = -1j * (np.kron(heff, identity) - np.kron(identity, heff.conj()))
    generator[:dim, :dim] -= np.diag(dephasing_matrix(net, env).ravel())

    diagonal = np.arange(n) * (n + 1)
    if env.sink_rate > 0:
        generator[dim, net.sink_site * (n + 1)] = env.sink_rate
    generator[dim + 1, diagonal] = env.loss_rate
    return generator


def _unpack(vectors, n):
    """Split augmented state vectors into (states, sink, loss)."""
    vectors = np.atleast_2d(vectors)
    states = vectors[:, : n * n].reshape(-1, n, n)
    states = 0.5 * (states + states.conj().transpose(0, 2, 1))
    return states, vectors[:, -2].real, vectors[:, -1].real


def _time_grid(t_end, dt, sample_interval):
    """
    Snapshot grid over [0, t_end] and the number of RK4 substeps per interval.

    Returns:
        tuple: (times, substeps, step)
    """
    if sample_interval is None:
        sample_interval = dt
    n_records = max(1, int(round(t_end / sample_interval)))
    interval = t_end / n_records
    substeps = max(1, int(math.ceil(interval / dt - 1e-9)))
    times = np.linspace(0.0, t_end, n_records + 1)
    return times, substeps, interval / substeps


def propagate(net, env, rho0, t_end, dt=None, sample_interval=None, method="rk4"):
    """
    Integrate the master equation and record snapshots on a uniform grid.

    Args:
        net (SiteNetwork): Network
        env (OpenSystemSpec): Environment
        rho0 (np.ndarray): Initial density matrix
        t_end (float): Final time in ps
        dt (float): RK4 step in ps; defaults to default_step(net, env)
        sample_interval (float): Snapshot spacing in ps; defaults to dt, coarsened
            so that at most 1000 snapshots are kept
        method (str): "rk4" (fixed-step Runge-Kutta; the amplitude propagator
            exp(-i H_eff dt) when d = 0) or "exact" (matrix exponential)

    Returns:
        Trajectory: Snapshots, sink and loss accumulators

    Raises:
        NumericalFailure: Non-positive rho0 or a non-finite/non-positive state
    """
    if method not in METHODS:
        raise InvalidArgumentError(f"Unknown integration method: {method!r}")
    if not math.isfinite(t_end) or t_end <= 0:
        raise InvalidArgumentError(f"t_end must be positive, got {t_end}")
    if dt is None:
        dt = default_step(net, env)
    if dt <= 0:
        raise InvalidArgumentError(f"dt must be positive, got {dt}")

    if sample_interval is None:
        sample_interval = max(dt, t_end / MAX_DEFAULT_SNAPSHOTS)

    n = net.n_sites
    rho = validate_initial_state(rho0, n).copy()
    times, substeps, step = _time_grid(t_end, dt, sample_interval)

    if method == "exact":
        generator = liouvillian(net, env)
        propagator = expm(generator * (times[1] - times[0]))
        vectors = np.empty((len(times), n * n + 2), dtype=complex)
        vectors[0] = np.concatenate([rho.ravel(), [0.0, 0.0]])
        for k in range(1, len(times)):
            vectors[k] = propagator @ vectors[k - 1]
        states, sink, loss = _unpack(vectors, n)
        for t, state in zip(times, states):
            _check_state(state, t)
        return Trajectory(times, states, sink, loss, net.positions)

    heff = effective_hamiltonian(net, env)
    decay = dephasing_matrix(net, env)
    propagator = coherent_propagator(heff, decay, step)
    states = np.empty((len(times), n, n), dtype=complex)
    sink = np.zeros(len(times))
    loss = np.zeros(len(times))
    states[0] = rho
    sink_total = loss_total = 0.0

    for k in range(1, len(times)):
        for _ in range(substeps):
            rho, d_sink, d_loss = _rk4_step(
                rho, step, heff, decay, net.sink_site, env.sink_rate, env.loss_rate,
                propagator,
            )
            sink_total += d_sink
            loss_total += d_loss
        rho = 0.5 * (rho + rho.conj().T)
        _check_state(rho, times[k])
        states[k] = rho
        sink[k] = sink_total
        loss[k] = loss_total

    logger.debug(
        f"Propagated {n} sites to t={t_end} ps with {len(times) - 1} snapshots "
        f"({substeps} RK4 steps of {step:.3g} ps each)"
    )
    return Trajectory(times, states, sink, loss, net.positions)


def _horizon(env, t_max):
    if not math.isfinite(t_max) or t_max <= 0:
        raise InvalidArgumentError(f"t_max must be positive, got {t_max}")
    if env.loss_rate > 0:
        return min(t_max, LOSS_HORIZON / env.loss_rate)
    return t_max


def _first_crossing(values, times, level):
    """Linear interpolation of the first time a rising series reaches `level`."""
    index = int(np.argmax(values >= level))
    if index == 0:
        return float(times[0])
    t0, t1 = times[index - 1], times[index]
    v0, v1 = values[index - 1], values[index]
    if v1 == v0:
        return float(t1)
    return float(t0 + (level - v0) * (t1 - t0) / (v1 - v0))


def _complete_exact(net, env, rho, horizon, n_samples):
    n = net.n_sites
    generator = liouvillian(net, env)
    x0 = np.concatenate([rho.ravel(), [0.0, 0.0]])
    diagonal = np.arange(n) * (n + 1)

    def state_at(t):
        vector = expm(generator * t) @ x0
        if not np.all(np.isfinite(vector)):
            raise NumericalFailure("Non-finite state", time=t)
        return vector

    def trace_at(t):
        return state_at(t)[diagonal].real.sum()

    completion = horizon
    if trace_at(horizon) < COMPLETION_TRACE:
        completion = brentq(
            lambda t: trace_at(t) - COMPLETION_TRACE,
            0.0,
            horizon,
            xtol=1e-12 + 1e-10 * horizon,
        )

    final = state_at(completion)
    efficiency = float(final[-2].real)
    transfer_time = math.nan
    if efficiency > 0:
        transfer_time = brentq(
            lambda t: state_at(t)[-2].real - 0.5 * efficiency,
            0.0,
            completion,
            xtol=1e-12 + 1e-10 * completion,
        )

    times = np.linspace(0.0, completion, n_samples + 1)
    propagator = expm(generator * (times[1] - times[0]))
    vectors = np.empty((len(times), n * n + 2), dtype=complex)
    vectors[0] = x0
    for k in range(1, len(times)):
        vectors[k] = propagator @ vectors[k - 1]
    vectors[-1] = final
    states, sink, loss = _unpack(vectors, n)
    trajectory = Trajectory(times, states, sink, loss, net.positions)
    return trajectory, completion, transfer_time


def _complete_rk4(net, env, rho, horizon, dt, n_samples):
    n = net.n_sites
    heff = effective_hamiltonian(net, env)
    decay = dephasing_matrix(net, env)
    record_every = max(1, int(round(horizon / n_samples / dt)))
    full_step = coherent_propagator(heff, decay, dt)

    step_times = [0.0]
    step_sink = [0.0]
    times, states, sink, loss = [0.0], [rho.copy()], [0.0], [0.0]
    t = sink_total = loss_total = 0.0
    step = 0
    trace = 1.0
    while trace >= COMPLETION_TRACE and t < horizon - 1e-12:
        h = min(dt, horizon - t)
        propagator = full_step
        if full_step is not None and h < dt:
            propagator = coherent_propagator(heff, decay, h)
        rho, d_sink, d_loss = _rk4_step(
            rho, h, heff, decay, net.sink_site, env.sink_rate, env.loss_rate,
            propagator,
        )
        t += h
        step += 1
        sink_total += d_sink
        loss_total += d_loss
        trace = np.trace(rho).real
        if not math.isfinite(trace):
            raise NumericalFailure("Non-finite density matrix", time=t)
        step_times.append(t)
        step_sink.append(sink_total)
        if step % record_every == 0 or trace < COMPLETION_TRACE or t >= horizon - 1e-12:
            rho = 0.5 * (rho + rho.conj().T)
            _check_state(rho, t)
            times.append(t)
            states.append(rho.copy())
            sink.append(sink_total)
            loss.append(loss_total)

    trajectory = Trajectory(
        np.array(times), np.array(states), np.array(sink), np.array(loss), net.positions
    )
    efficiency = sink_total
    transfer_time = math.nan
    if efficiency > 0:
        transfer_time = _first_crossing(
            np.array(step_sink), np.array(step_times), 0.5 * efficiency
        )
    return trajectory, t, transfer_time


def run_to_completion(
    net, env, rho0, t_max, method="exact", dt=None, n_samples=200
):
    """
    Run until the system population drops below 1e-6 or t_max is reached.

    The horizon is min(t_max, 20/Gamma) when Gamma > 0.

    Args:
        net (SiteNetwork): Network with a sink site when kappa > 0
        env (OpenSystemSpec): Environment; needs kappa > 0 or Gamma > 0
        rho0 (np.ndarray): Initial density matrix
        t_max (float): Time cap in ps
        method (str): "exact" (default) or "rk4"
        dt (float): RK4 step; defaults to default_step(net, env)
        n_samples (int): Number of snapshot intervals kept in the trajectory

    Returns:
        TransportOutcome: Efficiency, loss, transfer time and trajectory summary
    """
    if env.sink_rate <= 0 and env.loss_rate <= 0:
        raise InvalidArgumentError(
            "run_to_completion needs sink_rate > 0 or loss_rate > 0"
        )
    if method not in METHODS:
        raise InvalidArgumentError(f"Unknown integration method: {method!r}")

    rho = validate_initial_state(rho0, net.n_sites).copy()
    horizon = _horizon(env, t_max)

    if method == "exact":
        trajectory, completion, transfer_time = _complete_exact(
            net, env, rho, horizon, n_samples
        )
    else:
        if dt is None:
            dt = default_step(net, env)
        trajectory, completion, transfer_time = _complete_rk4(
            net, env, rho, horizon, dt, n_samples
        )

    efficiency = float(trajectory.sink_population[-1])
    loss = float(trajectory.loss_population[-1])
    residual = float(trajectory.trace[-1])
    converged = residual <= NONCONVERGED_TRACE
    warnings = []
    if not converged:
        message = (
            f"Not converged: {residual:.3g} of the population remains at "
            f"t={completion:.6g} ps"
        )
        warnings.append(message)
        logger.warning(message)

    return TransportOutcome(
        efficiency=efficiency,
        loss=loss,
        residual=residual,
        transfer_time=float(transfer_time),
        completion_time=float(completion),
        converged=converged,
        trajectory=trajectory,
        method=method,
        warnings=warnings,
    )


def check_step_convergence(net, env, rho0, t_max, dt=None):
    """
    Step-halving check of the RK4 efficiency.

    Args:
        net (SiteNetwork): Network
        env (OpenSystemSpec): Environment
        rho0 (np.ndarray): Initial density matrix
        t_max (float): Time cap in ps
        dt (float): Step to check; defaults to default_step(net, env)

    Returns:
        dict: {"dt", "efficiency", "efficiency_half_step", "difference", "converged"}
    """
    if dt is None:
        dt = default_step(net, env)
    coarse = run_to_completion(net, env, rho0, t_max, method="rk4", dt=dt)
    fine = run_to_completion(net, env, rho0, t_max, method="rk4", dt=0.5 * dt)
    difference = abs(coarse.efficiency - fine.efficiency)
    converged = difference < STEP_HALVING_ATOL
    if not converged:
        logger.warning(
            f"Halving dt={dt:.3g} ps changed the efficiency by {difference:.3g}"
        )
    return {
        "dt": dt,
        "efficiency": coarse.efficiency,
        "efficiency_half_step": fine.efficiency,
        "difference": difference,
        "converged": converged,
    }


def export_trajectory(traj, path):
    """Write a trajectory as CSV (time, p_1..p_n, sink, loss)."""
    write_trajectory_csv(traj, path)
