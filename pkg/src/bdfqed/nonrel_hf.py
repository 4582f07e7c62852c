"""Screened nonrelativistic Hartree-Fock with a Pekar-type self-attraction.

E(G) = 1/2 Tr(-Lap G) - Z (1 - a) Tr(G / |x|) + 1/2 (D(rho, rho) - Ex[G]) - a/2 D(rho, rho)

Orbitals are two-component spin orbitals expanded in even-tempered s-type
Gaussians centred on the nucleus, so every integral is analytic. A radial-grid
evaluation of the same functional serves as an independent check.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, special

from .errors import BasisError, ScfError

_COND_MAX = 1e10


def boys0(t):
    """Boys function F0(t) = int_0^1 exp(-t u^2) du."""
    t = np.asarray(t, dtype=float)
    small = t < 1e-12
    ts = np.where(small, 1.0, t)
    return np.where(small, 1.0 - t / 3, 0.5 * np.sqrt(np.pi / ts) * special.erf(np.sqrt(ts)))


@dataclass(frozen=True)
class GaussianBasis:
    alpha0: float = 0.02
    beta: float = 2.2
    n: int = 14

    def __post_init__(self):
        if self.n < 1 or self.alpha0 <= 0 or self.beta <= 1:
            raise ValueError("need n >= 1, alpha0 > 0 and beta > 1")

    @property
    def exponents(self) -> np.ndarray:
        return self.alpha0 * self.beta ** np.arange(self.n)

    @property
    def norms(self) -> np.ndarray:
        return (2 * self.exponents / math.pi) ** 0.75

    def integrals(self) -> "Integrals":
        return _integrals(self)


@dataclass(frozen=True)
class Integrals:
    S: np.ndarray
    T: np.ndarray
    V: np.ndarray  # matrix of 1/|x|
    eri: np.ndarray  # (kl|mn), chemists' order


_INT_CACHE: dict = {}


def _integrals(basis: GaussianBasis) -> Integrals:
    key = (basis.alpha0, basis.beta, basis.n)
    if key in _INT_CACHE:
        return _INT_CACHE[key]
    a = basis.exponents
    nn = basis.norms
    p = a[:, None] + a[None, :]
    nk = nn[:, None] * nn[None, :]
    S = nk * (math.pi / p) ** 1.5
    T = 3 * a[:, None] * a[None, :] / p * S
    V = nk * 2 * math.pi / p
    P, Q = p[:, :, None, None], p[None, None, :, :]
    eri = nk[:, :, None, None] * nk[None, None, :, :] * 2 * math.pi**2.5 / (P * Q * np.sqrt(P + Q))
    cond = np.linalg.cond(S)
    if cond > _COND_MAX:
        raise BasisError(f"overlap condition number {cond:.3e} exceeds {_COND_MAX:.0e}")
    out = Integrals(S, T, V, eri)
    _INT_CACHE[key] = out
    return out


def _coulomb(ints: Integrals, P: np.ndarray) -> np.ndarray:
    return np.einsum("klmn,mn->kl", ints.eri, P)


def _exchange(ints: Integrals, P: np.ndarray) -> np.ndarray:
    return np.einsum("kmln,mn->kl", ints.eri, P)


@dataclass
class NrState:
    a: float
    Z: float
    M: float
    basis: GaussianBasis
    orbitals: np.ndarray  # (n_orb, n_basis) coefficient rows
    spins: np.ndarray  # 0 = up, 1 = down
    occ: np.ndarray
    energy: float = float("nan")
    eps: np.ndarray = field(default_factory=lambda: np.zeros(0))
    iterations: int = 0
    residuals: list = field(default_factory=list)
    energies: list = field(default_factory=list)

    def __post_init__(self):
        if not 0 <= self.a < 1:
            raise ValueError("screening constant must satisfy 0 <= a < 1")

    def density_matrices(self) -> tuple[np.ndarray, np.ndarray]:
        out = []
        for s in (0, 1):
            sel = self.spins == s
            C = self.orbitals[sel]
            out.append((C.T * self.occ[sel]) @ C)
        return out[0], out[1]

    def overlap_error(self) -> float:
        S = self.basis.integrals().S
        err = 0.0
        for s in (0, 1):
            C = self.orbitals[self.spins == s]
            if len(C):
                err = max(err, float(np.abs(C @ S @ C.T - np.eye(len(C))).max()))
        return err

    def dirac_embedding(self) -> np.ndarray:
        """Orbitals as four-spinors, shape (n_orb, 4, n_basis), using the lower components only."""
        out = np.zeros((len(self.orbitals), 4, self.orbitals.shape[1]))
        out[np.arange(len(self.orbitals)), 2 + self.spins.astype(int)] = self.orbitals
        return out

    def radial_orbitals(self, r: np.ndarray) -> np.ndarray:
        """Orbital values on radial points, shape (n_orb, len(r))."""
        g = self.basis.norms[:, None] * np.exp(-self.basis.exponents[:, None] * np.asarray(r)[None, :] ** 2)
        return self.orbitals @ g


def _energy_parts(ints: Integrals, Pu, Pd, Z, a):
    P = Pu + Pd
    h = ints.T - Z * (1 - a) * ints.V
    J = _coulomb(ints, P)
    kin = float(np.sum(ints.T * P))
    nuc = -Z * (1 - a) * float(np.sum(ints.V * P))
    direct = float(np.sum(J * P))
    ex = float(np.sum(_exchange(ints, Pu) * Pu) + np.sum(_exchange(ints, Pd) * Pd))
    return {"kinetic": kin, "nuclear": nuc, "direct": direct, "exchange": ex, "h": h, "J": J}


def nr_energy(state: NrState) -> float:
    ints = state.basis.integrals()
    Pu, Pd = state.density_matrices()
    e = _energy_parts(ints, Pu, Pd, state.Z, state.a)
    return e["kinetic"] + e["nuclear"] + 0.5 * (e["direct"] - e["exchange"]) - 0.5 * state.a * e["direct"]


def hf_energy_from_fock(state: NrState) -> float:
    """1/2 sum_s Tr[(h + F_s) P_s]; equals nr_energy when a = 0."""
    ints = state.basis.integrals()
    Pu, Pd = state.density_matrices()
    e = _energy_parts(ints, Pu, Pd, state.Z, state.a)
    tot = 0.0
    for Ps in (Pu, Pd):
        F = e["h"] + (1 - state.a) * e["J"] - _exchange(ints, Ps)
        tot += 0.5 * float(np.sum((e["h"] + F) * Ps))
    return tot


def virial_derivative(state: NrState) -> float:
    """dE/dlambda at lambda = 1 for the dilation psi(x) -> lambda^(3/2) psi(lambda x)."""
    ints = state.basis.integrals()
    Pu, Pd = state.density_matrices()
    e = _energy_parts(ints, Pu, Pd, state.Z, state.a)
    coul = e["nuclear"] + 0.5 * (e["direct"] - e["exchange"]) - 0.5 * state.a * e["direct"]
    return 2 * e["kinetic"] + coul


def _aufbau(eigs_u, eigs_d, M):
    """Occupations filling the lowest spin orbitals; the last one may be fractional."""
    levels = [(e, 0, i) for i, e in enumerate(eigs_u)] + [(e, 1, i) for i, e in enumerate(eigs_d)]
    # stable order keeps spin up first among degenerate levels
    levels.sort(key=lambda t: (round(t[0], 10), t[1], t[2]))
    occ, left = [], M
    for e, s, i in levels:
        if left <= 1e-14:
            break
        o = min(1.0, left)
        occ.append((s, i, o))
        left -= o
    return occ


def _state_from(basis, a, Z, M, Cu, Cd, occ_list, eu, ed):
    rows, spins, occ, eps = [], [], [], []
    for s, i, o in occ_list:
        C = Cu if s == 0 else Cd
        rows.append(C[:, i])
        spins.append(s)
        occ.append(o)
        eps.append(-(eu if s == 0 else ed)[i])
    n = basis.n
    orbs = np.array(rows).reshape(-1, n)
    return NrState(a, Z, M, basis, orbs, np.array(spins, dtype=int), np.array(occ), eps=np.array(eps))


def scf_minimize(
    Z: float,
    M: float,
    a: float,
    basis_spec=(0.02, 2.2, 14),
    damping: float = 0.3,
    tol: float = 1e-8,
    max_iter: int = 5000,
    level_shift: float = 0.0,
) -> NrState:
    """Damped unrestricted SCF with aufbau occupations.

    The density matrices are mixed as P <- (1 - damping) P_new + damping P_old.
    Convergence requires the commutator residual ||F P S - S P F|| below tol
    for both spins.
    """
    if M <= 0:
        raise ValueError("M must be positive")
    if not 0 <= a < 1:
        raise ValueError("screening constant must satisfy 0 <= a < 1")
    basis = basis_spec if isinstance(basis_spec, GaussianBasis) else GaussianBasis(*basis_spec)
    ints = basis.integrals()
    S = ints.S
    h = ints.T - Z * (1 - a) * ints.V
    eu, Cu = linalg.eigh(h, S)
    ed, Cd = eu.copy(), Cu.copy()
    occ = _aufbau(eu, ed, M)
    state = _state_from(basis, a, Z, M, Cu, Cd, occ, eu, ed)
    Pu, Pd = state.density_matrices()
    residuals, energies = [], []
    for it in range(1, max_iter + 1):
        J = _coulomb(ints, Pu + Pd)
        Fu = h + (1 - a) * J - _exchange(ints, Pu)
        Fd = h + (1 - a) * J - _exchange(ints, Pd)
        res = max(float(np.abs(F @ P @ S - S @ P @ F).max()) for F, P in ((Fu, Pu), (Fd, Pd)))
        residuals.append(res)
        energies.append(nr_energy(state))
        if res < tol:
            state.energy = energies[-1]
            state.iterations = it
            state.residuals, state.energies = residuals, energies
            return state
        if level_shift:
            Fu = Fu - level_shift * S @ Pu @ S
            Fd = Fd - level_shift * S @ Pd @ S
        eu, Cu = linalg.eigh(Fu, S)
        ed, Cd = linalg.eigh(Fd, S)
        occ = _aufbau(eu, ed, M)
        new = _state_from(basis, a, Z, M, Cu, Cd, occ, eu, ed)
        nu, nd = new.density_matrices()
        Pu = (1 - damping) * nu + damping * Pu
        Pd = (1 - damping) * nd + damping * Pd
        state = _natural_state(basis, a, Z, M, Pu, Pd, S, new.eps)
    raise ScfError(f"SCF did not converge in {max_iter} iterations", residuals)


def _natural_state(basis, a, Z, M, Pu, Pd, S, eps):
    """Rebuild orthonormal orbitals and occupations from mixed density matrices."""
    rows, spins, occ = [], [], []
    for s, P in ((0, Pu), (1, Pd)):
        # natural orbitals: S P S c = n S c
        w, C = linalg.eigh(S @ P @ S, S)
        for j in np.argsort(-w):
            if w[j] > 1e-14:
                rows.append(C[:, j])
                spins.append(s)
                occ.append(min(w[j], 1.0))
    st = NrState(a, Z, M, basis, np.array(rows).reshape(-1, basis.n), np.array(spins, dtype=int), np.array(occ), eps=eps)
    return st


# ---------------------------------------------------------- radial oracle


def radial_energy(r: np.ndarray, orbitals: np.ndarray, spins, occ, Z: float, a: float) -> float:
    """The same functional for s-type orbitals sampled on a radial grid.

    Hartree potentials follow from Newton's shell theorem; same-spin exchange
    between s orbitals is the Coulomb self-energy of the pair density.
    """
    from scipy.integrate import cumulative_trapezoid, trapezoid

    r = np.asarray(r, dtype=float)
    orbitals = np.asarray(orbitals, dtype=float)
    spins, occ = np.asarray(spins), np.asarray(occ, dtype=float)

    def self_energy(rho):
        inner = cumulative_trapezoid(4 * math.pi * r * r * rho, r, initial=0.0)
        outer_c = cumulative_trapezoid(4 * math.pi * r * rho, r, initial=0.0)
        outer = outer_c[-1] - outer_c
        with np.errstate(divide="ignore", invalid="ignore"):
            U = np.where(r > 0, inner / np.where(r > 0, r, 1), 0.0) + outer
        return trapezoid(4 * math.pi * r * r * rho * U, r)

    kin = 0.0
    nuc = 0.0
    for u, o in zip(orbitals, occ):
        du = np.gradient(u, r, edge_order=2)
        kin += o * 0.5 * trapezoid(4 * math.pi * r * r * du * du, r)
        nuc += o * trapezoid(4 * math.pi * r * u * u, r)
    rho = (occ[:, None] * orbitals**2).sum(0)
    direct = self_energy(rho)
    ex = 0.0
    for i in range(len(occ)):
        for j in range(len(occ)):
            if spins[i] == spins[j]:
                ex += occ[i] * occ[j] * self_energy(orbitals[i] * orbitals[j])
    return kin - Z * (1 - a) * nuc + 0.5 * (direct - ex) - 0.5 * a * direct


def hydrogen_orbital(r, Z: float = 1.0):
    return (Z**3 / math.pi) ** 0.5 * np.exp(-Z * np.asarray(r))


# ---------------------------------------------------------- reports


def _two_center(basis: GaussianBasis, P1, P2, R: float):
    """(D(rho1, rho2), int rho2 / |x|) for rho2 centred at distance R from the origin."""
    a = basis.exponents
    nn = basis.norms
    p = a[:, None] + a[None, :]
    nk = nn[:, None] * nn[None, :]
    pref = nk * (math.pi / p) ** 1.5  # charge of each product Gaussian
    q1 = P1 * pref
    q2 = P2 * pref
    pp = p.reshape(-1)[:, None]
    qq = p.reshape(-1)[None, :]
    mu = pp * qq / (pp + qq)
    # two normalised Gaussian charges: erf(sqrt(mu) R) / R
    d = float(q1.reshape(-1) @ (2 * np.sqrt(mu / math.pi) * boys0(mu * R * R)) @ q2.reshape(-1))
    nuc = float((q2 * 2 * np.sqrt(p / math.pi) * boys0(p * R * R)).sum())
    return d, nuc


WIDE_BASIS = (2e-5, 2.0, 28)


def binding_test(Z: float, M: float, a: float, basis_spec=WIDE_BASIS, radius: float = 10.0, tol: float = 1e-9) -> dict:
    """Gap E(M-1) + E^0(1) - E(M) and a separated trial state for comparison.

    The default basis reaches both the nuclear scale and the diffuse scale of
    the Pekar orbital, which grows like 1/a.
    """
    if M < 1:
        raise ValueError("M >= 1 required")
    basis = basis_spec if isinstance(basis_spec, GaussianBasis) else GaussianBasis(*basis_spec)
    eM = scf_minimize(Z, M, a, basis, tol=tol)
    if M - 1 > 1e-14:
        eM1 = scf_minimize(Z, M - 1, a, basis, tol=tol)
        e_m1 = eM1.energy
    else:
        eM1, e_m1 = None, 0.0
    e0 = scf_minimize(0.0, 1.0, a, basis, tol=tol)
    # free cluster energy against M copies of one free electron. A single-centre
    # basis cannot pull the electrons apart, so this is only an upper bound on E^0(M)
    e0M = scf_minimize(0.0, M, a, basis, tol=tol).energy if M > 1 else e0.energy
    degenerate = a == 0 and Z == 0
    gap = e_m1 + e0.energy - eM.energy
    # trial state: the extra electron sits at distance 5R with the spin that is less occupied
    D = 5 * radius
    if eM1 is not None:
        Pu, Pd = eM1.density_matrices()
        P1 = Pu + Pd
    else:
        P1 = np.zeros((basis.n, basis.n))
    P2u, P2d = e0.density_matrices()
    P2 = P2u + P2d
    d12, nuc2 = _two_center(basis, P1, P2, D)
    trial = e_m1 + e0.energy + (1 - a) * d12 - Z * (1 - a) * nuc2
    return {
        "E_M": eM.energy,
        "E_M_minus_1": e_m1,
        "E0_1": e0.energy,
        "E0_M_one_center": e0M,
        "free_ratio_one_center": e0M / (M * e0.energy) if e0.energy != 0 else float("nan"),
        "gap": gap,
        "binds": gap > 0,
        "degenerate": degenerate,
        "trial_distance": D,
        "trial_energy": trial,
        "trial_above_E_M": trial >= eM.energy,
    }


def concavity_probe(Z: float, a: float, basis_spec=(0.02, 2.2, 14), M_grid=(1.0, 1.5, 2.0), tol: float = 1e-9) -> dict:
    """Energies at fractional M and their discrete second differences."""
    M_grid = np.asarray(M_grid, dtype=float)
    states = [scf_minimize(Z, m, a, basis_spec, tol=tol) for m in M_grid]
    E = np.array([s.energy for s in states])
    h = np.diff(M_grid)
    second = []
    for i in range(1, len(M_grid) - 1):
        hl, hr = h[i - 1], h[i]
        # reduces to E[i-1] - 2 E[i] + E[i+1] on a uniform grid
        second.append(float(2 * (hr * E[i - 1] + hl * E[i + 1] - (hl + hr) * E[i]) / (hl + hr)))
    occ_ok = all(np.all((s.occ >= -1e-12) & (s.occ <= 1 + 1e-12)) and abs(s.occ.sum() - s.M) < 1e-10 for s in states)
    return {
        "M": M_grid.tolist(),
        "E": E.tolist(),
        "second_differences": second,
        "concave": all(x <= 1e-4 for x in second),
        "occupations_ok": bool(occ_ok),
    }


def pekar_scaling(a_values=(0.05, 0.1, 0.2), basis_spec=(2e-5, 2.0, 24), tol: float = 1e-10) -> dict:
    """E^0(1)/a^2 for the pure Pekar problem at several screening constants."""
    ratios = []
    for a in a_values:
        s = scf_minimize(0.0, 1.0, a, basis_spec, tol=tol)
        ratios.append(s.energy / a**2)
    r = np.array(ratios)
    return {"a": list(a_values), "E_over_a2": r.tolist(), "spread": float((r.max() - r.min()) / abs(r.mean()))}
