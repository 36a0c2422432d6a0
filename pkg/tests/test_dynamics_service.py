"""
Tests for the dynamics service module.
"""

import csv
import math
import tempfile
import unittest

import numpy as np
import pytest

# Add the src directory to the Python path
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.services.dynamics_service import (
    OpenSystemSpec,
    check_step_convergence,
    dephasing_matrix,
    export_trajectory,
    liouvillian,
    nearest_neighbor_mask,
    neighbor_mask,
    propagate,
    run_to_completion,
)
from src.services.network_service import (
    DisorderSpec,
    SiteNetwork,
    build_preset,
    hamiltonian,
    localized_state,
)
from src.services.observables_service import fit_relaxation_rate
from src.services.theory_service import two_state
from src.utils.errors import InvalidArgumentError, NumericalFailure


def _dimer(sink_site=None, detuning=0.0):
    return SiteNetwork(
        n_sites=2,
        positions=np.array([[0.0], [1.0]]),
        site_energies=np.array([0.0, 2.0 * detuning]),
        couplings=np.array([[0.0, 1.0], [1.0, 0.0]]),
        sink_site=sink_site,
    )


class TestPropagate(unittest.TestCase):
    """Test cases for propagate."""

    def test_rabi_oscillation_rk4(self):
        """Test rho_22(t) = sin^2(t) for a coherent resonant dimer."""
        # Call the function
        traj = propagate(_dimer(), OpenSystemSpec(), localized_state(2, 0), 10.0, sample_interval=0.1)

        # Verify the result
        np.testing.assert_allclose(traj.populations[:, 1], np.sin(traj.times) ** 2, atol=1e-5)

    def test_rabi_oscillation_exact(self):
        """Test the matrix-exponential method on the same dimer."""
        traj = propagate(
            _dimer(), OpenSystemSpec(), localized_state(2, 0), 10.0,
            sample_interval=0.1, method="exact",
        )
        np.testing.assert_allclose(traj.populations[:, 1], np.sin(traj.times) ** 2, atol=1e-10)

    def test_pure_decay(self):
        """Test Tr rho(t) = exp(-Gamma t) with uniform loss only."""
        env = OpenSystemSpec(loss_rate=0.5)
        for method in ("rk4", "exact"):
            traj = propagate(_dimer(), env, localized_state(2, 0), 8.0, sample_interval=0.5, method=method)
            np.testing.assert_allclose(traj.trace, np.exp(-0.5 * traj.times), atol=1e-7)
            np.testing.assert_allclose(traj.loss_population, 1.0 - np.exp(-0.5 * traj.times), atol=1e-7)

    def test_correlated_noise_preserves_coherence(self):
        """Test that fully correlated neighbor noise leaves a dimer coherent."""
        env = OpenSystemSpec(dephasing_rate=10.0, noise_correlation=1.0)
        traj = propagate(_dimer(), env, localized_state(2, 0), 5.0, sample_interval=0.1, method="exact")
        np.testing.assert_allclose(traj.populations[:, 1], np.sin(traj.times) ** 2, atol=1e-10)

    def test_classical_hopping_limit(self):
        """Test that strong dephasing gives per-direction hopping 2J^2/d."""
        env = OpenSystemSpec(dephasing_rate=10.0)
        traj = propagate(
            _dimer(), env, localized_state(2, 0), 20.0, dt=1e-3, sample_interval=0.05
        )

        # Call the function
        rate = fit_relaxation_rate(traj, site=0, window=(2.0, 20.0))

        # Verify the result
        self.assertAlmostEqual(rate / 2.0, 0.2, delta=0.015)

    def test_rk4_matches_exact(self):
        """Test agreement of the two methods on a disordered open chain."""
        net = build_preset("chain", 4, 1.0, DisorderSpec(width=1.0, seed=5), sink_site=3)
        env = OpenSystemSpec(dephasing_rate=0.7, noise_correlation=0.3, sink_rate=1.0, loss_rate=0.05)
        rho0 = localized_state(4, 0)
        rk4 = propagate(net, env, rho0, 6.0, sample_interval=0.5)
        exact = propagate(net, env, rho0, 6.0, sample_interval=0.5, method="exact")
        np.testing.assert_allclose(rk4.states, exact.states, atol=1e-5)
        np.testing.assert_allclose(rk4.sink_population, exact.sink_population, atol=1e-5)

    def test_trace_bookkeeping(self):
        """Test Tr rho + sink + loss = 1 across a random parameter grid."""
        rng = np.random.default_rng(2024)
        for case in range(50):
            n = int(rng.integers(2, 6))
            net = build_preset(
                "chain" if case % 2 else "ring",
                max(n, 3) if case % 2 == 0 else n,
                float(rng.uniform(0.2, 2.0)),
                DisorderSpec(width=float(rng.uniform(0.0, 2.0)), seed=case),
                sink_site=0,
            )
            env = OpenSystemSpec(
                dephasing_rate=float(rng.uniform(0.0, 5.0)),
                noise_correlation=float(rng.uniform(-1.0, 1.0)),
                sink_rate=float(rng.uniform(0.0, 2.0)),
                loss_rate=float(rng.uniform(0.0, 0.5)),
            )
            method = "rk4" if case % 3 else "exact"
            traj = propagate(
                net, env, localized_state(net.n_sites, net.n_sites - 1), 3.0,
                sample_interval=0.25, method=method,
            )
            total = traj.trace + traj.sink_population + traj.loss_population
            np.testing.assert_allclose(total, 1.0, atol=1e-6, err_msg=f"case {case}")
            for state in traj.states:
                self.assertGreaterEqual(np.linalg.eigvalsh(state).min(), -1e-8)

    def test_coherent_rk4_conserves_energy(self):
        """Test that Tr(H rho) and positivity hold over t = 100/J without dephasing."""
        net = build_preset("chain", 8, 1.0, DisorderSpec(width=1.0, seed=3))
        H = hamiltonian(net)

        # Call the function
        traj = propagate(net, OpenSystemSpec(), localized_state(8, 0), 100.0)

        # Verify the result
        energy = np.einsum("ij,tji->t", H, traj.states).real
        np.testing.assert_allclose(energy, energy[0], atol=1e-8)
        np.testing.assert_allclose(traj.trace, 1.0, atol=1e-10)
        for state in traj.states:
            self.assertGreaterEqual(np.linalg.eigvalsh(state).min(), -1e-8)

    def test_two_state_peak_transfer(self):
        """Test max rho_22 = J^2 / (J^2 + delta^2) over one coherent period."""
        for delta in (0.0, 0.5, 1.0, 2.0, 5.0):
            net = SiteNetwork(
                n_sites=2,
                positions=np.array([[0.0], [1.0]]),
                site_energies=np.array([delta, -delta]),
                couplings=np.array([[0.0, 1.0], [1.0, 0.0]]),
            )
            expected = two_state(1.0, delta)
            period = math.pi / expected.omega
            traj = propagate(
                net, OpenSystemSpec(), localized_state(2, 0), period,
                sample_interval=period / 2000.0, method="exact",
            )
            self.assertAlmostEqual(
                traj.populations[:, 1].max(), expected.p_max, delta=1e-5, msg=f"delta={delta}"
            )

    def test_classical_limit_strong_dephasing(self):
        """Test the hopping rate 2J^2/d at d = 100 J against the exact propagator."""
        env = OpenSystemSpec(dephasing_rate=100.0)
        traj = propagate(
            _dimer(), env, localized_state(2, 0), 100.0, sample_interval=0.5, method="exact"
        )
        rate = fit_relaxation_rate(traj, site=0, window=(2.0, 100.0))
        self.assertAlmostEqual(rate / 2.0, 0.02, delta=0.02 * 0.05)

    def test_scale_covariance(self):
        """Test that scaling every rate by s and t_max by 1/s leaves eta unchanged."""
        scale = 10.0
        outcomes = []
        for s in (1.0, scale):
            net = build_preset("chain", 4, s, DisorderSpec(width=s, seed=9), sink_site=3)
            env = OpenSystemSpec(
                dephasing_rate=0.5 * s, noise_correlation=0.2, sink_rate=s, loss_rate=0.01 * s
            )
            outcomes.append(run_to_completion(net, env, localized_state(4, 0), 1e4 / s))
        self.assertAlmostEqual(outcomes[0].efficiency, outcomes[1].efficiency, delta=1e-5)
        self.assertAlmostEqual(
            outcomes[0].transfer_time / (scale * outcomes[1].transfer_time), 1.0, delta=1e-4
        )

    def test_non_positive_initial_state(self):
        """Test that a non-positive rho0 fails at t = 0."""
        rho0 = np.array([[1.5, 0.0], [0.0, -0.5]], dtype=complex)
        with self.assertRaises(NumericalFailure) as context:
            propagate(_dimer(), OpenSystemSpec(), rho0, 1.0)
        self.assertEqual(context.exception.time, 0.0)

    def test_invalid_arguments(self):
        """Test rejection of bad shapes, methods, times and sinkless trapping."""
        with self.assertRaises(InvalidArgumentError):
            propagate(_dimer(), OpenSystemSpec(), localized_state(3, 0), 1.0)
        with self.assertRaises(InvalidArgumentError):
            propagate(_dimer(), OpenSystemSpec(), localized_state(2, 0), 1.0, method="euler")
        with self.assertRaises(InvalidArgumentError):
            propagate(_dimer(), OpenSystemSpec(), localized_state(2, 0), 0.0)
        with self.assertRaises(InvalidArgumentError):
            propagate(_dimer(), OpenSystemSpec(sink_rate=1.0), localized_state(2, 0), 1.0)
        with self.assertRaises(InvalidArgumentError):
            OpenSystemSpec(noise_correlation=1.5)
        with self.assertRaises(InvalidArgumentError):
            OpenSystemSpec(dephasing_rate=-1.0)

    def test_snapshot_cap(self):
        """Test that default sampling keeps at most 1000 snapshots."""
        traj = propagate(_dimer(), OpenSystemSpec(), localized_state(2, 0), 200.0)
        self.assertLessEqual(len(traj.times), 1001)
        self.assertAlmostEqual(traj.times[-1], 200.0)


class TestOperators(unittest.TestCase):
    """Test cases for the dephasing matrix and the Liouvillian."""

    def test_nearest_neighbors_on_ring(self):
        """Test that ring neighbors are the two adjacent sites."""
        mask = nearest_neighbor_mask(build_preset("ring", 6, 1.0).positions)
        self.assertTrue(np.all(mask.sum(axis=1) == 2))
        self.assertTrue(mask[0, 1] and mask[0, 5] and not mask[0, 2])

    def test_dephasing_matrix(self):
        """Test M_mn = d (1 - c) for neighbors and d otherwise."""
        net = build_preset("chain", 3, 1.0)
        M = dephasing_matrix(net, OpenSystemSpec(dephasing_rate=2.0, noise_correlation=0.25))
        self.assertAlmostEqual(M[0, 1], 1.5)
        self.assertAlmostEqual(M[0, 2], 2.0)
        self.assertEqual(M[1, 1], 0.0)

    def test_custom_network_neighbors_follow_couplings(self):
        """Test that irregular positions do not decide correlated pairs."""
        net = SiteNetwork(
            n_sites=3,
            positions=np.array([[0.0], [0.2], [5.0]]),
            site_energies=np.zeros(3),
            couplings=np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 0.5], [0.0, 0.5, 0.0]]),
        )

        # Call the function
        mask = neighbor_mask(net)
        M = dephasing_matrix(net, OpenSystemSpec(dephasing_rate=2.0, noise_correlation=1.0))

        # Verify the result
        np.testing.assert_array_equal(mask, [[False, True, False], [True, False, True], [False, True, False]])
        self.assertEqual(M[0, 1], 0.0)
        self.assertEqual(M[1, 2], 0.0)
        self.assertAlmostEqual(M[0, 2], 2.0)

    def test_preset_neighbors_follow_geometry(self):
        """Test that presets keep the geometric neighbor mask."""
        net = build_preset("ring", 6, 1.0)
        np.testing.assert_array_equal(neighbor_mask(net), nearest_neighbor_mask(net.positions))

    def test_liouvillian_shape_and_conservation(self):
        """Test that population leaving the system enters sink or loss."""
        net = build_preset("chain", 3, 1.0, sink_site=2)
        L = liouvillian(net, OpenSystemSpec(dephasing_rate=1.0, sink_rate=1.0, loss_rate=0.1))
        self.assertEqual(L.shape, (11, 11))

        # The trace functional (diagonal entries, sink, loss) is conserved
        functional = np.zeros(11)
        functional[[0, 4, 8, 9, 10]] = 1.0
        np.testing.assert_allclose(functional @ L, 0.0, atol=1e-12)


class TestRunToCompletion(unittest.TestCase):
    """Test cases for run_to_completion."""

    def test_lossless_absorption(self):
        """Test that a lossless dimer delivers everything to the sink."""
        env = OpenSystemSpec(sink_rate=1.0)

        # Call the function
        outcome = run_to_completion(_dimer(sink_site=1), env, localized_state(2, 0), 1e4)

        # Verify the result
        self.assertAlmostEqual(outcome.efficiency, 1.0, delta=1e-4)
        self.assertTrue(outcome.converged)
        self.assertEqual(outcome.warnings, [])
        self.assertGreater(outcome.transfer_time, 0.0)
        self.assertLess(outcome.transfer_time, outcome.completion_time)

    def test_lossless_absorption_rk4(self):
        """Test the same run with fixed-step integration."""
        env = OpenSystemSpec(sink_rate=1.0)
        outcome = run_to_completion(_dimer(sink_site=1), env, localized_state(2, 0), 1e4, method="rk4")
        self.assertAlmostEqual(outcome.efficiency, 1.0, delta=1e-4)
        exact = run_to_completion(_dimer(sink_site=1), env, localized_state(2, 0), 1e4)
        self.assertAlmostEqual(outcome.transfer_time, exact.transfer_time, delta=5e-3)

    def test_loss_dominated(self):
        """Test that strong recombination starves the sink."""
        env = OpenSystemSpec(sink_rate=1.0, loss_rate=100.0)
        outcome = run_to_completion(_dimer(sink_site=1), env, localized_state(2, 0), 1e4)
        self.assertLess(outcome.efficiency, 0.05)
        self.assertAlmostEqual(outcome.efficiency + outcome.loss + outcome.residual, 1.0, delta=1e-8)

    def test_non_converged_warning(self):
        """Test that a short horizon returns a flagged result."""
        env = OpenSystemSpec(sink_rate=0.01)
        outcome = run_to_completion(_dimer(sink_site=1), env, localized_state(2, 0), 1.0)
        self.assertFalse(outcome.converged)
        self.assertEqual(len(outcome.warnings), 1)
        self.assertGreater(outcome.residual, 0.01)

    def test_needs_an_exit_channel(self):
        """Test that a closed system is rejected."""
        with self.assertRaises(InvalidArgumentError):
            run_to_completion(_dimer(), OpenSystemSpec(dephasing_rate=1.0), localized_state(2, 0), 10.0)

    def test_dephasing_assisted_transport(self):
        """Test that optimal dephasing beats coherent transport on disordered chains."""
        env_coherent = OpenSystemSpec(sink_rate=1.0, loss_rate=0.001)
        env_optimal = OpenSystemSpec(dephasing_rate=8.0, sink_rate=1.0, loss_rate=0.001)
        coherent, optimal = [], []
        for seed in range(100):
            net = build_preset("chain", 8, 1.0, DisorderSpec(width=2.0, seed=seed), sink_site=7)
            rho0 = localized_state(8, 0)
            coherent.append(run_to_completion(net, env_coherent, rho0, 2e4).efficiency)
            optimal.append(run_to_completion(net, env_optimal, rho0, 2e4).efficiency)
        self.assertGreater(np.mean(optimal), np.mean(coherent))

    def test_step_convergence(self):
        """Test the step-halving check on a dimer."""
        report = check_step_convergence(
            _dimer(sink_site=1), OpenSystemSpec(dephasing_rate=0.5, sink_rate=1.0), localized_state(2, 0), 200.0
        )
        self.assertTrue(report["converged"])
        self.assertLess(report["difference"], 1e-6)

    def test_coherent_rk4_completion(self):
        """Test fixed-step completion without dephasing on a disordered chain."""
        net = build_preset("chain", 8, 1.0, DisorderSpec(width=1.0, seed=3), sink_site=7)
        env = OpenSystemSpec(sink_rate=1.0, loss_rate=0.01)
        rho0 = localized_state(8, 0)

        # Call the function
        outcome = run_to_completion(net, env, rho0, 2e4, method="rk4")

        # Verify the result
        exact = run_to_completion(net, env, rho0, 2e4)
        self.assertTrue(outcome.converged)
        self.assertAlmostEqual(outcome.efficiency, exact.efficiency, delta=1e-4)
        self.assertAlmostEqual(outcome.efficiency + outcome.loss + outcome.residual, 1.0, delta=1e-8)
        for state in outcome.trajectory.states:
            self.assertGreaterEqual(np.linalg.eigvalsh(state).min(), -1e-8)

    def test_step_convergence_without_dephasing(self):
        """Test the step-halving check on a coherent dimer."""
        report = check_step_convergence(
            _dimer(sink_site=1), OpenSystemSpec(sink_rate=1.0), localized_state(2, 0), 200.0
        )
        self.assertTrue(report["converged"])

    def test_export_trajectory(self):
        """Test the trajectory CSV layout."""
        outcome = run_to_completion(
            _dimer(sink_site=1), OpenSystemSpec(sink_rate=1.0), localized_state(2, 0), 100.0, n_samples=20
        )
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "traj.csv"
            export_trajectory(outcome.trajectory, path)
            with open(path, newline="") as f:
                rows = list(csv.reader(f))
        self.assertEqual(rows[0], ["time", "p_1", "p_2", "sink", "loss"])
        self.assertEqual(len(rows), 22)
        self.assertTrue(math.isclose(float(rows[-1][3]), outcome.efficiency, rel_tol=1e-9))


if __name__ == "__main__":
    pytest.main(["-v", __file__])
