import math

import numpy as np
import pytest

from bdfqed.clifford import BETA
from bdfqed.errors import BasisError, ScfError
from bdfqed.nonrel_hf import (
    GaussianBasis,
    NrState,
    _energy_parts,
    binding_test,
    concavity_probe,
    hf_energy_from_fock,
    hydrogen_orbital,
    nr_energy,
    pekar_scaling,
    radial_energy,
    scf_minimize,
    virial_derivative,
)

# trapezoid and finite-difference error of the radial oracle is about 2e-8 here
R = np.concatenate([[0.0], np.geomspace(1e-6, 40.0, 200_000)])


@pytest.fixture(scope="module")
def hydrogen():
    return scf_minimize(1.0, 1.0, 0.0)


@pytest.fixture(scope="module")
def helium():
    return scf_minimize(2.0, 2.0, 0.0)


@pytest.fixture(scope="module")
def screened_helium():
    return scf_minimize(2.0, 2.0, 0.05)


def test_hydrogen_energy(hydrogen):
    assert hydrogen.energy == pytest.approx(-0.5, abs=5e-3)


def test_exact_hydrogen_orbital_on_radial_grid():
    u = hydrogen_orbital(R, 2.0)[None]
    assert radial_energy(R, u, [0], [1.0], 2.0, 0.0) == pytest.approx(-2.0, abs=1e-7)


def test_radial_oracle_matches_basis_energy(helium, screened_helium):
    for st in (helium, screened_helium):
        u = st.radial_orbitals(R)
        assert radial_energy(R, u, st.spins, st.occ, st.Z, st.a) == pytest.approx(st.energy, abs=1e-7)


def test_single_electron_direct_equals_exchange(hydrogen):
    for a in (0.0, 0.1, 0.4):
        st = scf_minimize(1.0, 1.0, a)
        Pu, Pd = st.density_matrices()
        e = _energy_parts(st.basis.integrals(), Pu, Pd, st.Z, st.a)
        assert abs(e["direct"] - e["exchange"]) <= 1e-10 * e["direct"]
        assert nr_energy(st) == pytest.approx(e["kinetic"] + e["nuclear"] - 0.5 * a * e["direct"], abs=1e-12)


def test_helium_hartree_fock(helium):
    # Hartree-Fock limit for helium
    assert helium.energy == pytest.approx(-2.86168, abs=1e-3)
    assert hf_energy_from_fock(helium) == pytest.approx(nr_energy(helium), abs=1e-10)


def test_state_invariants(helium, screened_helium):
    for st in (helium, screened_helium):
        assert st.overlap_error() < 1e-10
        assert np.all((st.occ >= 0) & (st.occ <= 1))
        assert st.occ.sum() == pytest.approx(st.M, abs=1e-12)
        assert abs(virial_derivative(st)) < 1e-3 * abs(st.energy)


def test_spinor_restriction(screened_helium):
    emb = screened_helium.dirac_embedding()
    upper = 0.5 * np.einsum("ab,obk->oak", np.eye(4) + BETA.real, emb)
    assert np.all(upper == 0)


def test_energy_decreases_in_M(screened_helium):
    one = scf_minimize(2.0, 1.0, 0.05)
    assert screened_helium.energy < one.energy


@pytest.mark.parametrize("Z,M,a", [(1.0, 1.0, 0.0), (2.0, 2.0, 0.0), (2.0, 2.0, 0.05), (2.0, 1.5, 0.05)])
def test_damped_scf_monotone(Z, M, a):
    for damping in (0.3, 0.5):
        st = scf_minimize(Z, M, a, damping=damping)
        # non-increasing up to round-off in the energy evaluation
        assert np.all(np.diff(st.energies) <= 1e-10 * abs(st.energy))


def test_invalid_inputs():
    with pytest.raises(ValueError):
        scf_minimize(1.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        scf_minimize(1.0, 0.0, 0.1)
    with pytest.raises(BasisError):
        GaussianBasis(0.02, 1.02, 40).integrals()


def test_scf_error_reports_residuals():
    with pytest.raises(ScfError) as exc:
        scf_minimize(2.0, 2.0, 0.05, max_iter=2, tol=1e-14)
    assert len(exc.value.residuals) == 2


def test_state_rejects_bad_screening():
    with pytest.raises(ValueError):
        NrState(1.2, 1.0, 1.0, GaussianBasis(), np.zeros((1, 14)), np.zeros(1), np.ones(1))


def test_binding_gap():
    rep = binding_test(2.0, 2.0, 0.05)
    assert rep["gap"] > 0 and rep["binds"]
    assert rep["E0_1"] < 0
    assert rep["trial_above_E_M"]
    assert not rep["degenerate"]
    assert rep["free_ratio_one_center"] == pytest.approx(rep["E0_M_one_center"] / (2 * rep["E0_1"]))


def test_free_particle_degenerate():
    rep = binding_test(0.0, 1.0, 0.0)
    assert rep["degenerate"]
    # the infimum 0 is not attained; the basis floor sits below the most diffuse Gaussian's 3 alpha0 / 2
    alpha0 = 2e-5
    assert 0 < rep["E0_1"] <= 1.5 * alpha0


def test_concavity():
    rep = concavity_probe(2.0, 0.05)
    assert rep["concave"] and rep["second_differences"][0] <= 1e-4
    assert rep["occupations_ok"]
    assert rep["E"][0] == pytest.approx(scf_minimize(2.0, 1.0, 0.05, tol=1e-9).energy, abs=1e-9)
    assert rep["E"][2] == pytest.approx(scf_minimize(2.0, 2.0, 0.05, tol=1e-9).energy, abs=1e-9)


def test_pekar_scaling():
    rep = pekar_scaling()
    assert rep["spread"] < 0.02
    assert all(e < 0 for e in rep["E_over_a2"])
