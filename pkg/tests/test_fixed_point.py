import math
from dataclasses import replace

import numpy as np
import pytest

from bdfqed import fixed_point as fp
from bdfqed.bdf_operators import Density, Grid, coulomb_bilinear, density_of
from bdfqed.dressed_dirac import PhysicalParams
from bdfqed.errors import NonContractionError
from bdfqed.fixed_point import (
    f1_step,
    gaussian_density,
    initial_state,
    lattice_problem,
    linear_response_density,
    observed_charge,
    renorm_table,
    solve,
)

ALPHAS = (0.005, 0.01, 0.02)


@pytest.fixture(scope="module")
def runs():
    out = {}
    for a in ALPHAS:
        ctx, N = lattice_problem(a)
        out[a] = (ctx, N, solve(ctx, N, furry=True))
    return out


def test_zero_coupling_one_step():
    ctx, N = lattice_problem(0.0)
    s1 = f1_step(initial_state(ctx, N), ctx)
    assert np.abs(s1.gamma_modes).max() == 0
    np.testing.assert_allclose(s1.rho_pp.values, (ctx.n - ctx.nu).values, atol=1e-15)
    s2 = f1_step(s1, ctx)
    assert s2.residuals[-1] < 1e-15


@pytest.mark.parametrize("alpha", ALPHAS)
def test_converges_with_contraction(runs, alpha):
    ctx, N, res = runs[alpha]
    assert res.converged
    assert 0 < res.contraction_ratio < 1
    assert abs(res.trace0_gamma) < 1e-6
    assert res.state.N.rank == N.rank == 1
    assert max(res.state.furry_history) < 1e-8


def test_ratio_monotone_and_roughly_linear(runs):
    r = [runs[a][2].contraction_ratio for a in ALPHAS]
    assert r[0] < r[1] < r[2]
    per_alpha = np.array(r) / np.array(ALPHAS)
    assert per_alpha.max() / per_alpha.min() < 2


def test_fixed_point_close_to_data(runs):
    # the converged pair stays within O(alpha) of (N, n - nu)
    for a in ALPHAS:
        res = runs[a][2]
        assert res.distance_from_data < 10 * a


def test_fixed_point_is_stationary(runs):
    ctx, N, res = runs[0.01]
    g, r, _ = fp.f1_map(ctx, res.state.gamma_modes, res.state.rho_pp, 2)
    dg = g - res.state.gamma_modes
    drho = r - res.state.rho_pp
    assert math.sqrt(np.vdot(dg, dg).real + abs(coulomb_bilinear(drho, drho))) < 1e-11


def test_geometric_residuals(runs):
    ctx, N, res = runs[0.02]
    ratios = np.array(res.state.residual_history)[-5:]
    assert np.var(ratios) / np.mean(ratios) ** 2 < 0.2


def test_order_validation(runs):
    ctx, N, _ = runs[0.005]
    with pytest.raises(ValueError):
        f1_step(initial_state(ctx, N), ctx, order=4)


def test_non_contraction_detected(runs, monkeypatch):
    ctx, N, _ = runs[0.005]

    def growing(state, ctx, order=2, furry=False):
        r = state.residuals[-1] * 2 if state.residuals else 1.0
        ratios = state.residual_history + ((2.0,) if state.residuals else ())
        return replace(state, residuals=state.residuals + (r,), residual_history=ratios)

    monkeypatch.setattr(fp, "f1_step", growing)
    with pytest.raises(NonContractionError) as exc:
        solve(ctx, N, max_iter=20)
    assert list(exc.value.ratios)[-3:] == [2.0, 2.0, 2.0]


# --------------------------------------------------------- linear response


@pytest.fixture(scope="module")
def response_setup(dressed):
    g = Grid(32, 24.0)
    N = fp.electron_projector(g, 1, None, width=1.5)
    return g, N


def test_response_vanishes_for_neutral_data(response_setup, renorm):
    g, N = response_setup
    rho = linear_response_density(N, density_of(N), renorm)
    assert np.abs(rho.values).max() < 1e-14


def test_response_total_charge(response_setup, renorm):
    g, N = response_setup
    nu = Density(g, np.zeros(g.shape))
    rho = linear_response_density(N, nu, renorm)
    assert rho.integral() == pytest.approx(-renorm.F[0] * 1.0, rel=1e-10)


def test_response_translation(response_setup, renorm):
    g, N = response_setup
    nu = gaussian_density(g, 0.5, 1.0)
    base = linear_response_density(N, nu, renorm).values
    shift = (2, -3, 1)
    from bdfqed.bdf_operators import OperatorKernel

    moved_N = OperatorKernel.from_orbitals(g, g.translate(N.left, np.array(shift) * g.h))
    moved_nu = Density(g, np.roll(nu.values, shift, axis=(0, 1, 2)))
    moved = linear_response_density(moved_N, moved_nu, renorm).values
    np.testing.assert_allclose(moved, np.roll(base, shift, axis=(0, 1, 2)), atol=1e-12)


def test_observed_charge_matches_Z3(renorm):
    q = observed_charge(renorm, 1.0, 0.0)
    assert q == pytest.approx(renorm.Z3, rel=0.01)


def test_renorm_rows():
    rows = renorm_table([(0.0, 1e3), (0.1 / math.log(1e3), 1e3), (0.01, 1e4)], 1.0, 0.0, tol=1e-3)
    assert rows[0].Z3_formula == 1.0 and rows[0].Z3_quadrature == pytest.approx(1.0, abs=1e-3)
    assert all(r.agree for r in rows)
    assert rows[1].L == pytest.approx(0.1)
    assert rows[1].Z3_formula == pytest.approx(1 / (1 + 0.0212), rel=0.1)
    Z = [r.Z3_formula for r in sorted(rows, key=lambda r: r.L)]
    assert all(a > b for a, b in zip(Z, Z[1:]))


def test_neutral_row_flagged():
    (row,) = renorm_table([(0.01, 1e2)], 1.0, 1.0)
    assert row.Z3_quadrature is None and row.flag == "neutral, ratio undefined"
    assert not row.agree
