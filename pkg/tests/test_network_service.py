"""
Tests for the network service module.
"""

import json
import math
import tempfile
import unittest

import numpy as np
import pytest

# Add the src directory to the Python path
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.services.network_service import (
    DisorderSpec,
    SiteNetwork,
    build_preset,
    draw_site_energies,
    hamiltonian,
    load_network,
    localized_state,
    nominal_coupling,
    parse_network,
    save_network,
)
from src.utils.errors import InvalidArgumentError, SchemaError

NETWORKS_DIR = Path(__file__).parent.parent / "networks"


def _document(**overrides):
    document = {
        "unit": "rad/ps",
        "energies": [0.0, 0.0],
        "couplings": [[0.0, 1.0], [1.0, 0.0]],
    }
    document.update(overrides)
    return json.dumps(document, indent=2)


class TestPresets(unittest.TestCase):
    """Test cases for preset construction and disorder."""

    def test_chain_without_disorder(self):
        """Test a two-site ordered chain."""
        # Call the function
        net = build_preset("chain", 2, 1.0)

        # Verify the result
        np.testing.assert_array_equal(net.couplings, [[0.0, 1.0], [1.0, 0.0]])
        np.testing.assert_array_equal(net.site_energies, [0.0, 0.0])
        self.assertEqual(net.topology_tag, "chain")
        self.assertIsNone(net.sink_site)

    def test_ring_neighbors(self):
        """Test that every ring site couples to exactly two neighbors."""
        net = build_preset("ring", 4, 1.0)
        for row in net.couplings:
            self.assertEqual(int(np.count_nonzero(row)), 2)
            self.assertTrue(np.all(row[row != 0] == 1.0))

    def test_ring_positions_have_unit_spacing(self):
        """Test that neighboring ring sites are one lattice spacing apart."""
        net = build_preset("ring", 6, 1.0)
        for i in range(6):
            gap = np.linalg.norm(net.positions[i] - net.positions[(i + 1) % 6])
            self.assertAlmostEqual(gap, 1.0)

    def test_disorder_is_reproducible(self):
        """Test bounded, seed-reproducible uniform disorder."""
        disorder = DisorderSpec(width=2.0, distribution="uniform", seed=7)

        # Call the function twice
        first = build_preset("chain", 8, 1.0, disorder)
        second = build_preset("chain", 8, 1.0, disorder)

        # Verify the result
        self.assertTrue(np.all(np.abs(first.site_energies) <= 2.0))
        np.testing.assert_array_equal(first.site_energies, second.site_energies)
        self.assertFalse(np.all(first.site_energies == 0))

    def test_different_seeds_differ(self):
        """Test that different seeds give different energies."""
        a = draw_site_energies(8, DisorderSpec(width=1.0, seed=1))
        b = draw_site_energies(8, DisorderSpec(width=1.0, seed=2))
        self.assertFalse(np.array_equal(a, b))

    def test_gaussian_disorder(self):
        """Test the Gaussian distribution's spread."""
        energies = draw_site_energies(20000, DisorderSpec(width=2.0, distribution="gaussian", seed=3))
        self.assertAlmostEqual(float(np.std(energies)), 2.0, delta=0.05)

    def test_invalid_presets(self):
        """Test rejection of bad sizes, couplings and kinds."""
        with self.assertRaises(InvalidArgumentError):
            build_preset("chain", 1, 1.0)
        with self.assertRaises(InvalidArgumentError):
            build_preset("chain", 4, 0.0)
        with self.assertRaises(InvalidArgumentError):
            build_preset("star", 4, 1.0)
        with self.assertRaises(InvalidArgumentError):
            DisorderSpec(width=-1.0)
        with self.assertRaises(InvalidArgumentError):
            DisorderSpec(distribution="cauchy")

    def test_network_invariants(self):
        """Test that SiteNetwork rejects asymmetric couplings and bad sinks."""
        with self.assertRaises(InvalidArgumentError):
            SiteNetwork(
                n_sites=2,
                positions=np.zeros((2, 1)),
                site_energies=np.zeros(2),
                couplings=np.array([[0.0, 1.0], [2.0, 0.0]]),
            )
        with self.assertRaises(InvalidArgumentError):
            build_preset("chain", 3, 1.0, sink_site=3)


class TestHamiltonian(unittest.TestCase):
    """Test cases for the Hamiltonian and helpers."""

    def test_dimer(self):
        """Test the ordered dimer Hamiltonian."""
        np.testing.assert_array_equal(hamiltonian(build_preset("chain", 2, 1.0)), [[0, 1], [1, 0]])

    def test_detuned_dimer_gap(self):
        """Test the eigenvalue gap 2 sqrt(J^2 + delta^2)."""
        net = SiteNetwork(
            n_sites=2,
            positions=np.array([[0.0], [1.0]]),
            site_energies=np.array([0.0, 2.0]),
            couplings=np.array([[0.0, 1.0], [1.0, 0.0]]),
        )
        values = np.linalg.eigvalsh(hamiltonian(net))
        self.assertAlmostEqual(values[1] - values[0], 2.0 * math.sqrt(2.0))

    def test_ring_spectrum(self):
        """Test the circulant spectrum {2, 0, 0, -2}."""
        values = np.linalg.eigvalsh(hamiltonian(build_preset("ring", 4, 1.0)))
        np.testing.assert_allclose(values, [-2.0, 0.0, 0.0, 2.0], atol=1e-12)

    def test_ordered_chain_spectrum(self):
        """Test the open-chain spectrum 2J cos(k pi / (n + 1))."""
        n, J = 7, 0.8
        values = np.linalg.eigvalsh(hamiltonian(build_preset("chain", n, J)))
        k = np.arange(1, n + 1)
        np.testing.assert_allclose(values, np.sort(2.0 * J * np.cos(k * np.pi / (n + 1))), atol=1e-12)

    def test_hamiltonian_is_hermitian(self):
        """Test Hermiticity with disorder."""
        H = hamiltonian(build_preset("ring", 7, 0.7, DisorderSpec(width=1.5, seed=11)))
        np.testing.assert_array_equal(H, H.conj().T)

    def test_nominal_coupling(self):
        """Test that presets report the J they were built with."""
        self.assertAlmostEqual(nominal_coupling(build_preset("chain", 5, 0.3)), 0.3)

    def test_localized_state(self):
        """Test the single-site density matrix."""
        rho = localized_state(3, 1)
        self.assertEqual(rho[1, 1], 1.0)
        self.assertEqual(np.count_nonzero(rho), 1)
        with self.assertRaises(InvalidArgumentError):
            localized_state(3, 3)


class TestNetworkFiles(unittest.TestCase):
    """Test cases for loading and saving network files."""

    def test_wavenumber_conversion(self):
        """Test that 1 cm^-1 loads as 0.188365 rad/ps."""
        net = parse_network(_document(unit="cm-1"))
        self.assertAlmostEqual(net.couplings[0, 1], 0.188365, places=6)

    def test_identity_conversion(self):
        """Test that rad/ps values load unchanged."""
        net = parse_network(_document())
        self.assertEqual(net.couplings[0, 1], 1.0)
        self.assertEqual(net.topology_tag, "custom")

    def test_asymmetric_couplings(self):
        """Test that J12 != J21 is a schema error naming the entry."""
        with self.assertRaises(SchemaError) as context:
            parse_network(_document(couplings=[[0.0, 1.0], [1.5, 0.0]]))
        self.assertEqual(context.exception.field, "couplings[0][1]")
        self.assertIsNotNone(context.exception.line)

    def test_unknown_unit(self):
        """Test that an unknown unit tag is a schema error."""
        with self.assertRaises(SchemaError) as context:
            parse_network(_document(unit="eV"))
        self.assertEqual(context.exception.field, "unit")
        self.assertEqual(context.exception.line, 2)

    def test_invalid_json(self):
        """Test that parse failures report a line."""
        with self.assertRaises(SchemaError) as context:
            parse_network('{\n  "unit": "rad/ps",\n  "energies": [0, 0\n}')
        self.assertIsNotNone(context.exception.line)

    def test_missing_field(self):
        """Test that a missing field is named."""
        with self.assertRaises(SchemaError) as context:
            parse_network(json.dumps({"unit": "rad/ps", "energies": [0, 0]}))
        self.assertEqual(context.exception.field, "couplings")

    def test_bad_sink(self):
        """Test that an out-of-range sink is a schema error."""
        with self.assertRaises(SchemaError):
            parse_network(_document(sink_site=2))

    def test_missing_file(self):
        """Test that a missing file is a schema error."""
        with self.assertRaises(SchemaError):
            load_network("does/not/exist.json")

    def test_sample_networks(self):
        """Test that the bundled sample networks load."""
        dimer = load_network(NETWORKS_DIR / "dimer.json")
        self.assertEqual(dimer.sink_site, 1)
        trimer = load_network(NETWORKS_DIR / "trimer_cm1.json")
        self.assertEqual(trimer.n_sites, 3)
        self.assertEqual(trimer.positions.shape, (3, 2))

    def test_save_and_load(self):
        """Test that a saved network loads back with the same Hamiltonian."""
        net = build_preset("ring", 5, 0.8, DisorderSpec(width=0.5, seed=4), sink_site=2)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "ring.json"

            # Call the function
            save_network(net, path, unit="cm-1")
            loaded = load_network(path)

        # Verify the result
        np.testing.assert_allclose(hamiltonian(loaded), hamiltonian(net), rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(loaded.positions, net.positions)
        self.assertEqual(loaded.sink_site, 2)


if __name__ == "__main__":
    pytest.main(["-v", __file__])
