"""Picard iteration of the F1 scheme and the linear density response.

The vacuum part (gamma, rho'') is iterated with the electron projector N held
fixed. Resolvent terms are formed in the dense lattice model of
``bdf_operators``; the density update divides by 1 + alpha B(|k|) mode-wise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .bdf_operators import Density, Grid, LatticeModel, OperatorKernel, coulomb_bilinear, project
from .dressed_dirac import PhysicalParams, dress
from .errors import NonContractionError
from .vacuum_polarization import RenormFunctions, assemble, compute_B, radial_sine_integral


@dataclass(frozen=True)
class ScfContext:
    """Data that stay fixed along the iteration."""

    model: LatticeModel
    params: PhysicalParams
    N: np.ndarray
    n: Density
    nu: Density
    B_grid: np.ndarray
    nquad: int = 64


@dataclass(frozen=True)
class ScfState:
    N: OperatorKernel
    gamma_modes: np.ndarray
    rho_pp: Density
    residual_history: tuple = ()
    residuals: tuple = ()
    furry_history: tuple = ()

    @property
    def gamma(self) -> OperatorKernel:
        return OperatorKernel.from_dense_modes(self.N.grid, self.gamma_modes)


def b_on_grid(grid: Grid, dressed, tol: float = 1e-6) -> np.ndarray:
    """B(|k|) on every FFT mode; zero beyond 2 lam."""
    kn = np.round(grid.knorm, 12)
    vals, inv = np.unique(kn, return_inverse=True)
    b = np.array([compute_B(float(k), dressed, tol) if k < 2 * dressed.lam else 0.0 for k in vals])
    return b[inv].reshape(grid.shape)


def electron_projector(grid: Grid, M: int, dressed=None, width: float = 1.0) -> OperatorKernel:
    """Rank-M projector onto positive-energy Gaussians of increasing width."""
    from .bdf_operators import gaussian_orbital

    spinors = [(1, 0, 0, 0), (0, 1, 0, 0)]
    cols = []
    for j in range(M):
        c = gaussian_orbital(grid, width * (1 + 0.5 * (j // 2)), spinor=spinors[j % 2])
        cols.append(project(grid, c, 1, dressed))
    A = np.stack([c[:, grid.mask].reshape(-1) for c in cols], axis=1)
    q, _ = np.linalg.qr(A)
    orbs = np.zeros((M, 4) + grid.shape, dtype=complex)
    orbs[:, :, grid.mask] = q.T.reshape(M, 4, -1)
    return OperatorKernel.from_orbitals(grid, orbs)


def gaussian_density(grid: Grid, charge: float, width: float = 1.0, center=(0.0, 0.0, 0.0)) -> Density:
    x = grid.coords - np.asarray(center, dtype=float)[:, None, None, None]
    g = np.exp(-(x**2).sum(0) / (2 * width**2))
    return Density(grid, charge * g / (g.sum() * grid.dV))


def _mode_density_hat(rho: Density) -> np.ndarray:
    return np.fft.fftn(rho.values)


def _from_hat(grid: Grid, hat: np.ndarray) -> Density:
    return Density(grid, np.fft.ifftn(hat).real)


def make_context(
    model: LatticeModel, params: PhysicalParams, N: OperatorKernel, nu: Density, nquad: int = 64
) -> ScfContext:
    from .bdf_operators import density_of

    if model.dressed is None:
        raise ValueError("the lattice model needs the dressed operator")
    Nm = model.from_kernel(N)
    return ScfContext(model, params, Nm, density_of(N), nu, b_on_grid(model.grid, model.dressed), nquad)


def initial_state(ctx: ScfContext, N: OperatorKernel) -> ScfState:
    return ScfState(N, np.zeros_like(ctx.N), ctx.n - ctx.nu)


def _distance(ctx: ScfContext, dg: np.ndarray, drho: Density) -> float:
    return math.sqrt(float(np.vdot(dg, dg).real) + max(coulomb_bilinear(drho, drho), 0.0))


def f1_map(ctx: ScfContext, gamma: np.ndarray, rho_pp: Density, order: int, furry: bool = False):
    """One application of F1 = (F1_Q, F1_rho); returns (gamma', rho'', pure-v second-order density norm)."""
    if order not in (1, 2, 3):
        raise ValueError("order must be 1, 2 or 3")
    lm, alpha = ctx.model, ctx.params.alpha
    grid = lm.grid
    Qp = gamma + ctx.N
    RQ = lm.exchange(Qp)
    C = RQ - lm.potential_operator(rho_pp)
    terms = lm.cauchy_terms(C, order, ctx.nquad)
    new_gamma = sum(alpha ** (l + 1) * t for l, t in enumerate(terms))
    q10 = lm.first_order_closed(RQ)
    hat = _mode_density_hat(ctx.n - ctx.nu) + alpha * _mode_density_hat(lm.density(q10))
    for l in range(2, order + 1):
        hat = hat + alpha**l * _mode_density_hat(lm.density(terms[l - 1]))
    new_rho = _from_hat(grid, hat / (1 + alpha * ctx.B_grid))
    furry_val = 0.0
    if furry and order >= 2:
        q02 = lm.cauchy_terms(-lm.potential_operator(rho_pp), 2, ctx.nquad)[1]
        d = lm.density(q02).values
        furry_val = float(np.linalg.norm(d))
    return new_gamma, new_rho, furry_val


def f1_step(state: ScfState, ctx: ScfContext, order: int = 2, furry: bool = False) -> ScfState:
    """Apply F1 once and record the step length and its ratio to the previous one."""
    g, r, fv = f1_map(ctx, state.gamma_modes, state.rho_pp, order, furry)
    res = _distance(ctx, g - state.gamma_modes, r - state.rho_pp)
    hist = state.residuals + (res,)
    ratios = state.residual_history
    if len(state.residuals) > 0 and state.residuals[-1] > 0:
        ratios = ratios + (res / state.residuals[-1],)
    if furry:
        norm = float(np.linalg.norm(r.values)) or 1.0
        fh = state.furry_history + (fv / norm,)
    else:
        fh = state.furry_history
    return replace(state, gamma_modes=g, rho_pp=r, residual_history=ratios, residuals=hist, furry_history=fh)


@dataclass
class ScfResult:
    state: ScfState
    iterations: int
    converged: bool
    contraction_ratio: float
    trace0_gamma: float
    distance_from_data: float
    gamma_norm: float
    log: list = field(default_factory=list)


def measured_ratio(state: ScfState, floor: float = 1e-11) -> float:
    """Geometric mean of step ratios while the steps stay above the round-off floor."""
    res = np.array(state.residuals)
    if len(res) < 3:
        return 0.0
    ok = res[1:] > floor * max(res[0], 1e-300)
    ratios = np.array(state.residual_history)[ok]
    if ratios.size == 0:
        return 0.0
    return float(np.exp(np.log(np.maximum(ratios, 1e-300)).mean()))


def solve(
    ctx: ScfContext,
    N: OperatorKernel,
    order: int = 2,
    tol: float = 1e-12,
    max_iter: int = 50,
    furry: bool = False,
    callback=None,
) -> ScfResult:
    state = initial_state(ctx, N)
    bad = 0
    converged = False
    log = []
    it = 0
    for it in range(1, max_iter + 1):
        state = f1_step(state, ctx, order, furry)
        res = state.residuals[-1]
        ratio = state.residual_history[-1] if state.residual_history else None
        total = float((state.rho_pp.values).sum() * ctx.model.grid.dV)
        rec = {"iter": it, "residual": res, "ratio": ratio, "total_charge": total}
        log.append(rec)
        if callback is not None:
            callback(rec)
        if ratio is not None and ratio >= 1 and res > tol:
            bad += 1
            if bad >= 3:
                raise NonContractionError("F1 is not contracting", state.residual_history)
        else:
            bad = 0
        if res <= tol * max(state.residuals[0], 1.0):
            converged = True
            break
    lm = ctx.model
    dg = state.gamma_modes
    drho = state.rho_pp - (ctx.n - ctx.nu)
    return ScfResult(
        state,
        it,
        converged,
        measured_ratio(state),
        lm.trace0(state.gamma_modes),
        _distance(ctx, dg, drho),
        float(np.linalg.norm(dg)),
        log,
    )


def lattice_problem(
    alpha: float,
    lam: float = 1e3,
    M: int = 1,
    Z: float = 1.0,
    grid: Grid | None = None,
    nu_width: float = 1.0,
    nquad: int = 64,
):
    """Standard desk-scale setup: dressed operator, lattice model, N and a Gaussian nucleus."""
    params = PhysicalParams(alpha, lam, M, Z)
    d = dress(params)
    grid = grid or Grid(6, 6.0, lam)
    lm = LatticeModel(grid, d)
    N = electron_projector(grid, M, d)
    nu = gaussian_density(grid, Z, nu_width)
    return make_context(lm, params, N, nu, nquad), N


# ------------------------------------------------------------ linear response


def linear_response_density(
    N: OperatorKernel, nu: Density, renorm: RenormFunctions, include_tau: bool = False, model: LatticeModel | None = None
) -> Density:
    """rho_lin with hat(rho) = -F(|k|) (hat n - hat nu), optionally plus (1 - F) t_N."""
    from .bdf_operators import density_of

    grid = N.grid
    F = renorm.F_at(grid.knorm)
    dn = _mode_density_hat(density_of(N) - nu)
    hat = -F * dn
    if include_tau:
        lm = model or LatticeModel(grid, None)
        hat = hat + (1 - F) * _mode_density_hat(tau_density(lm, N, renorm.alpha))
    return _from_hat(grid, hat)


def tau_density(lm: LatticeModel, N: OperatorKernel, alpha: float, tol: float = 1e-14, max_terms: int = 200) -> Density:
    """t_N = rho(T[N] - N) with T = (1 - alpha F10)^-1 summed as a Neumann series."""
    X = lm.from_kernel(N)
    acc = np.zeros_like(X)
    for _ in range(max_terms):
        X = alpha * lm.first_order_closed(lm.exchange(X))
        acc += X
        if np.linalg.norm(X) <= tol * max(np.linalg.norm(acc), 1e-300):
            break
    return lm.density(acc)


def hydrogen_hat(k, charge: float = 1.0):
    """Fourier transform of a hydrogen 1s density with the given charge."""
    return charge / (1 + np.asarray(k) ** 2 / 4) ** 2


def gaussian_hat(k, charge: float = 1.0, width: float = 0.05):
    return charge * np.exp(-0.5 * (np.asarray(k) * width) ** 2)


def observed_charge(renorm: RenormFunctions, M: float, Z: float, r_max: float = 60.0, n_r: int = 3000, k_max: float = 400.0):
    """int (rho_lin + n - nu) dx from the real-space radial profile.

    n is a hydrogen 1s density of charge M and nu a narrow Gaussian nucleus of
    charge Z. The profile comes from the sine transform of (1 - F)(n - nu)^,
    integrated against 4 pi r^2 on a uniform radial grid.
    """
    k = np.union1d(np.linspace(0.0, k_max, 8001), renorm.kgrid[renorm.kgrid <= k_max])
    g = (1 - renorm.F_at(k)) * (hydrogen_hat(k, M) - gaussian_hat(k, Z))
    r = np.linspace(0.0, r_max, n_r + 1)[1:]
    prof = radial_sine_integral(k, g, r) / (2 * math.pi**2 * r)
    q = 4 * math.pi * np.concatenate([[0.0], r * r * prof])
    rr = np.concatenate([[0.0], r])
    return float(np.trapezoid(q, rr))


@dataclass
class RenormRow:
    alpha: float
    lam: float
    L: float
    f0: float
    Z3_formula: float
    Z3_quadrature: float | None
    tol: float
    flag: str = ""

    @property
    def agree(self) -> bool:
        return self.Z3_quadrature is not None and abs(self.Z3_formula - self.Z3_quadrature) <= self.tol


def renorm_table(grid_points, M: float, Z: float, tol: float = 1e-3, J_max: int = 1, seed: int = 0) -> list[RenormRow]:
    """Z3 from 1/(1 + f(0)) next to the observed-charge ratio from real-space quadrature."""
    rows = []
    for alpha, lam in grid_points:
        params = PhysicalParams(alpha, lam)
        d = dress(params)
        rf = assemble(d, params, J_max=J_max, seed=seed)
        if M == Z:
            rows.append(RenormRow(alpha, lam, rf.L, rf.f0, rf.Z3, None, tol, "neutral, ratio undefined"))
            continue
        zq = observed_charge(rf, M, Z) / (M - Z)
        rows.append(RenormRow(alpha, lam, rf.L, rf.f0, rf.Z3, zq, tol))
    return rows
