"""Property-based checks of the algebraic and numerical invariants."""
import math

import numpy as np
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.integrate import quad

from bdfqed.bdf_operators import Grid, OperatorKernel, k_constant, q10_kernel, contour_kernel
from bdfqed.clifford import EVEN, GAMMA, I4, ODD, DiracElement, calcul_identity_check, classify, furry_trace_check, sign_array
from bdfqed.nonrel_hf import _aufbau, boys0
from bdfqed.vacuum_polarization import neumann_F, radial_sine_integral

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)
momentum = arrays(np.float64, 3, elements=finite)
scalar = st.complex_numbers(max_magnitude=10, allow_nan=False, allow_infinity=False)


@given(st.lists(st.integers(0, 3), min_size=1, max_size=9))
def test_word_grading_and_trace(idx):
    word = [DiracElement(GAMMA[i], ODD) for i in idx]
    r = furry_trace_check(word)
    prod = I4
    for i in idx:
        prod = prod @ GAMMA[i]
    assert r.grading == (ODD if len(idx) % 2 else EVEN)
    assert classify(prod) == r.grading
    if len(idx) % 2:
        assert abs(np.trace(prod)) < 1e-12


@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=4))
def test_even_products_stay_even(pairs):
    prod = DiracElement(I4, EVEN)
    for i, j in pairs:
        prod = prod @ DiracElement(GAMMA[i] @ GAMMA[j], EVEN)
    assert prod.grading == EVEN and classify(prod.entries) == EVEN


@given(momentum)
def test_sign_matrix_unitary_involution(p):
    s = sign_array(p)
    np.testing.assert_allclose(s @ s, I4, atol=1e-13)
    np.testing.assert_allclose(s, s.conj().T, atol=0)


@given(momentum, momentum, momentum, scalar, scalar)
def test_calcul_identities(p, p1, q, v1, v2):
    r = calcul_identity_check(sign_array(p), sign_array(p1), sign_array(q), v1, v2)
    assert r.residual <= 1e-12 * max(1.0, abs(v1 * v2))
    assert all(abs(t) <= 1e-12 * max(1.0, abs(v1 * v2)) for t in r.traces)


@given(momentum, momentum, arrays(np.float64, (4, 4), elements=st.floats(-1, 1)))
def test_q10_closed_form_vs_contour(p, q, X):
    X = X.astype(complex)
    a = q10_kernel(p[None], q[None], X[None])
    b = contour_kernel(p[None], q[None], X[None])
    assert np.abs(a - b).max() <= 1e-8 * max(np.abs(X).max(), 1e-300)


@given(arrays(np.float64, 20, elements=st.floats(0, 0.5)))
def test_neumann_series_matches_ratio(f):
    np.testing.assert_allclose(neumann_F(f), f / (1 + f), atol=1e-10)


@given(st.floats(1.05, 60))
def test_k_constant_positive_and_decreasing(a):
    # k_constant raises unless its closed form and its quadrature agree
    ka = k_constant(a)
    assert ka > 0 and k_constant(a + 1) < ka


@given(st.floats(0, 50))
def test_boys_function(t):
    ref = quad(lambda u: math.exp(-t * u * u), 0, 1, epsabs=1e-14)[0]
    assert abs(float(boys0(t)) - ref) < 1e-12


@given(
    arrays(np.float64, 6, elements=st.floats(-5, 5)),
    arrays(np.float64, 6, elements=st.floats(-5, 5)),
    st.floats(0.1, 6.0),
)
def test_aufbau_occupations(eu, ed, M):
    occ = _aufbau(np.sort(eu), np.sort(ed), M)
    vals = np.array([o for _, _, o in occ])
    assert abs(vals.sum() - M) < 1e-12
    assert np.all((vals > 0) & (vals <= 1))
    assert np.all(vals[:-1] == 1)


@given(arrays(np.float64, 30, elements=st.floats(-3, 3)), arrays(np.float64, 30, elements=st.floats(-3, 3)), st.floats(-2, 2))
def test_sine_integral_linear(F1, F2, c):
    k = np.linspace(0, 6, 30)
    r = np.array([0.01, 0.5, 3.0])
    lhs = radial_sine_integral(k, F1 + c * F2, r)
    rhs = radial_sine_integral(k, F1, r) + c * radial_sine_integral(k, F2, r)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


_G = Grid(8, 6.0, 3.0)


@given(st.integers(0, 2**32 - 1), st.integers(1, 3))
def test_hs_norm_and_band_limit(seed, rank):
    rng = np.random.default_rng(seed)
    shape = (rank, 4) + _G.shape
    L = rng.normal(size=shape) + 1j * rng.normal(size=shape)
    R = rng.normal(size=shape) + 1j * rng.normal(size=shape)
    Q = OperatorKernel(_G, L, R, rng.normal(size=rank))
    assert np.all(Q.left[:, :, ~_G.mask] == 0) and np.all(Q.right[:, :, ~_G.mask] == 0)
    assert math.isclose(Q.hs_norm(), np.linalg.norm(Q.to_dense_modes()), rel_tol=1e-10)
    Qa = Q.adjoint()
    np.testing.assert_allclose(Qa.to_dense_modes(), Q.to_dense_modes().conj().T, atol=1e-12)
