import math

import numpy as np
import pytest

from bdfqed.clifford import I4, sign_array
from bdfqed.dressed_dirac import PhysicalParams, dress, free_dirac
from bdfqed.errors import UnsupportedOrderError
from bdfqed.vacuum_polarization import (
    TWO_OVER_3PI,
    assemble,
    compute_B,
    compute_f_term,
    default_kgrid,
    kernel_l1_norm,
    neumann_F,
    radial_sine_integral,
)


def direct_B(k, dressed, direction, n=2**17, seed=0):
    """Brute-force 3D importance sampling of the trace definition of B(k)."""
    rng = np.random.default_rng(seed)
    lam, eps = dressed.lam, 1e-3
    span = math.log(lam / eps)
    r = eps * np.exp(rng.random(n) * span)
    v = rng.normal(size=(n, 3))
    u = r[:, None] * v / np.linalg.norm(v, axis=1)[:, None]
    pdf = 1 / (4 * math.pi * r**3 * span)
    hk = 0.5 * k * np.asarray(direction, float) / np.linalg.norm(direction)
    a, b = u + hk, u - hk
    ok = (np.linalg.norm(a, axis=1) < lam) & (np.linalg.norm(b, axis=1) < lam)
    tr = np.einsum("nii->n", I4 - sign_array(b[ok], dressed) @ sign_array(a[ok], dressed)).real
    den = dressed.e_script(np.linalg.norm(a[ok], axis=1)) + dressed.e_script(np.linalg.norm(b[ok], axis=1))
    vals = np.zeros(n)
    vals[ok] = tr / den / pdf[ok]
    c = 1 / (4 * math.pi**2 * k * k)
    return c * vals.mean(), c * vals.std() / math.sqrt(n)


@pytest.mark.parametrize("k", [0.5, 3.0])
def test_B_matches_direct_sampling_in_three_directions(k, dressed):
    b = compute_B(k, dressed)
    for i, e in enumerate(([0, 0, 1], [1, 1, 0], [1, -2, 3])):
        est, err = direct_B(k, dressed, e, seed=i)
        assert abs(est - b) < 4 * err


def test_B_slope_free():
    lams = np.array([1e2, 1e3, 1e4])
    b0 = [compute_B(0.0, free_dirac(lam)) for lam in lams]
    slope = np.polyfit(np.log(lams), b0, 1)[0]
    assert slope == pytest.approx(TWO_OVER_3PI, rel=0.05)


def test_B_vanishes_at_2lam(dressed):
    assert compute_B(2 * dressed.lam, dressed) == 0.0
    with pytest.raises(ValueError):
        compute_B(3 * dressed.lam, dressed)


def test_B_small_k_continuous(dressed):
    assert compute_B(1e-3, dressed) == pytest.approx(compute_B(0.0, dressed), rel=1e-4)


def test_B_monotone_decreasing(dressed):
    k = np.geomspace(0.05, 1.9 * dressed.lam, 40)
    b = np.array([compute_B(x, dressed) for x in k])
    assert np.all(np.diff(b) <= 1e-9 * b[:-1])


def test_f_term_order_limits(dressed):
    with pytest.raises(UnsupportedOrderError):
        compute_f_term(4, 1.0, dressed)
    with pytest.raises(ValueError):
        compute_f_term(1, 0.5, dressed, method="legendre")


def test_f_term_zero_coupling():
    d0 = dress(PhysicalParams(0.0, 1e3))
    assert compute_f_term(1, 0.0, d0).value == 0.0
    rf = assemble(d0, PhysicalParams(0.0, 1e3), kgrid=default_kgrid(1e3, 24))
    assert rf.Z3 == 1.0
    assert np.all(rf.f == 0) and np.all(rf.F == 0)


def test_f1_bounded_by_L(dressed):
    t = compute_f_term(1, 0.0, dressed)
    contribution = dressed.alpha * t.value
    assert abs(contribution) / (dressed.alpha**2 * math.log(dressed.lam)) < 1.0


def test_f1_sampling_agrees_with_legendre(dressed):
    ref = compute_f_term(1, 0.0, dressed).value
    mc = compute_f_term(1, 1e-3, dressed, 2**16, seed=3, method="mc")
    assert abs(mc.value - ref) < 3 * mc.stderr


def test_f2_mc_agrees_with_qmc(dressed):
    a = compute_f_term(2, 0.5, dressed, 2**16, seed=1, method="mc")
    b = compute_f_term(2, 0.5, dressed, 2**16, seed=1, method="qmc")
    assert abs(a.value - b.value) < 3 * math.hypot(a.stderr, b.stderr)


def test_f_term_seed_determinism(dressed):
    a = compute_f_term(2, 0.5, dressed, 2**12, seed=5, method="mc")
    b = compute_f_term(2, 0.5, dressed, 2**12, seed=5, method="mc")
    assert a == b


def test_assemble_J0_is_alpha_B(dressed, params):
    k = default_kgrid(dressed.lam, 24)
    rf = assemble(dressed, params, J_max=0, kgrid=k)
    np.testing.assert_array_equal(rf.f, params.alpha * rf.B)


def test_renorm_functions(renorm, params):
    assert np.all(renorm.f >= 0)
    assert np.all(renorm.F < 1)
    assert renorm.Z3 == pytest.approx(1 / (1 + TWO_OVER_3PI * params.L), rel=0.1)
    assert renorm.Z3 == pytest.approx(1 / (1 + renorm.f0), rel=1e-14)
    # J = 1 shift bounded by alpha^2 log lam
    shift = renorm.f_terms[1][0]
    assert abs(shift) <= params.alpha**2 * math.log(params.lam)
    assert renorm.checkF_L1 / params.L <= 3
    assert renorm.F_at(2.5 * params.lam) == 0.0


def test_neumann_series(renorm):
    np.testing.assert_allclose(neumann_F(renorm.f), renorm.F, atol=1e-10)


def test_kgrid_refinement(dressed, params, renorm):
    fine = assemble(dressed, params, kgrid=default_kgrid(dressed.lam, 384))
    assert abs(fine.Z3 - renorm.Z3) / renorm.Z3 < 1e-3


def test_sine_integral_against_quadrature():
    from scipy.integrate import quad

    k = np.linspace(0, 5, 201)
    F = np.exp(-k)
    r = np.array([0.3, 2.0, 7.0])
    got = radial_sine_integral(k, F, r)
    for ri, g in zip(r, got):
        f = lambda x: x * np.interp(x, k, F) * math.sin(x * ri)  # noqa: E731
        ref = sum(quad(f, a, b)[0] for a, b in zip(k[:-1], k[1:]))
        assert g == pytest.approx(ref, rel=1e-9, abs=1e-12)


def test_kernel_l1_of_gaussian_multiplier():
    # F = exp(-k^2/2) is the transform of a positive Gaussian of unit mass
    k = np.linspace(0, 12, 4001)
    l1, integral = kernel_l1_norm(k, np.exp(-0.5 * k * k))
    assert l1 == pytest.approx(1.0, rel=1e-4)
    assert integral == pytest.approx(1.0, rel=1e-4)
