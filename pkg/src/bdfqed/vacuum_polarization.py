"""Vacuum-polarisation multipliers B(k), f(k), F(k) = f/(1+f) and Z3.

B is the k-space multiplier of the first-order vacuum density response,

    B(k) = 1/(4 pi^2 k^2) int du Tr(1 - s_{u-k/2} s_{u+k/2}) / (E(u+k/2) + E(u-k/2)),

over |u +- k/2| < lam. Writing s_p through the unit four-vector
(cos phi, sin phi omega_p), phi(r) = atan2(g1, g0), and switching to
bipolar coordinates r_+-, the integral becomes two-dimensional:

    B(k) = 2/(pi k^3) int ds int dt [2 r+ r- sin^2(dphi/2) + b+ b- (k^2 - t^2)/2] / (E+ + E-)

with s = (r+ + r-)/2, t = r+ - r-, |t| <= k. At k = 0 the Taylor limit gives
B(0) = 1/(3 pi) int_0^lam (r^2 phi'^2 + 2 sin^2 phi) / E dr.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.stats import qmc

from .clifford import I4, sign_array
from .dressed_dirac import DressedDirac, PhysicalParams, kernel_matrix
from .errors import QuadratureError, UnsupportedOrderError

TWO_OVER_3PI = 2.0 / (3.0 * math.pi)


class _Radial:
    """Spline view of a dressed operator: phi(r), E(r) and derivatives."""

    def __init__(self, dressed: DressedDirac):
        self.lam = dressed.lam
        self.grid = dressed.grid
        phi = np.arctan2(dressed.g1, dressed.g0)
        self.phi = CubicSpline(dressed.grid, phi)
        self.dphi = self.phi.derivative()
        self.E = CubicSpline(dressed.grid, np.hypot(dressed.g0, dressed.g1))


_RADIAL_CACHE: dict = {}


def _radial(dressed: DressedDirac) -> _Radial:
    key = id(dressed)
    hit = _RADIAL_CACHE.get(key)
    if hit is None or hit[0] is not dressed:
        if len(_RADIAL_CACHE) > 16:
            _RADIAL_CACHE.clear()
        hit = (dressed, _Radial(dressed))
        _RADIAL_CACHE[key] = hit
    return hit[1]


def _b_zero(rad: _Radial, n_gauss: int) -> float:
    xg, wg = np.polynomial.legendre.leggauss(n_gauss)
    a, b = rad.grid[:-1], rad.grid[1:]
    r = 0.5 * (a + b)[:, None] + 0.5 * (b - a)[:, None] * xg
    w = 0.5 * (b - a)[:, None] * wg
    ph = rad.phi(r)
    integrand = (r * r * rad.dphi(r) ** 2 + 2 * np.sin(ph) ** 2) / rad.E(r)
    return float((integrand * w).sum() / (3 * math.pi))


def _b_positive(rad: _Radial, k: float, n_s: int, n_panels: int, n_t: int) -> float:
    lam = rad.lam
    xs, ws = np.polynomial.legendre.leggauss(n_s)
    xt, wt = np.polynomial.legendre.leggauss(n_t)
    s_lo, s_mid = 0.5 * k, lam - 0.5 * k
    pieces = []
    if s_mid > s_lo:
        width = s_mid - s_lo
        first = min(1e-3 * max(1.0, k), 0.5 * width)
        edges = np.concatenate([[s_lo], s_lo + np.geomspace(first, width, n_panels)])
        pieces.append(edges)
    tail_lo = max(s_lo, s_mid)
    pieces.append(np.linspace(tail_lo, lam, max(4, n_panels // 6)))
    total = 0.0
    for edges in pieces:
        a, b = edges[:-1], edges[1:]
        s = (0.5 * (a + b)[:, None] + 0.5 * (b - a)[:, None] * xs).ravel()
        wsv = (0.5 * (b - a)[:, None] * ws).ravel()
        tmax = np.minimum(k, 2.0 * (lam - s))
        t = 0.5 * tmax[:, None] * (1 + xt[None, :])
        wtv = 0.5 * tmax[:, None] * wt[None, :]
        rp = s[:, None] + 0.5 * t
        rm = np.clip(s[:, None] - 0.5 * t, 0.0, None)
        php, phm = rad.phi(rp), rad.phi(rm)
        num = 2 * rp * rm * np.sin(0.5 * (php - phm)) ** 2 + np.sin(php) * np.sin(phm) * (k * k - t * t) / 2
        den = rad.E(rp) + rad.E(rm)
        # t integrated over [0, tmax]; the integrand is even in t
        total += 2.0 * float(((num / den) * wtv).sum(1) @ wsv)
    return 2.0 * total / (math.pi * k**3)


def compute_B(k: float, dressed: DressedDirac, tol: float = 1e-6, return_error: bool = False):
    """B(k) for 0 <= k <= 2 lam by two-level Gauss-Legendre quadrature."""
    lam = dressed.lam
    if k < 0 or k > 2 * lam * (1 + 1e-12):
        raise ValueError(f"k = {k} outside [0, 2 lam]")
    if k >= 2 * lam:
        return (0.0, 0.0) if return_error else 0.0
    rad = _radial(dressed)
    if k == 0:
        lo, hi = _b_zero(rad, 6), _b_zero(rad, 12)
    else:
        lo = _b_positive(rad, k, 8, 60, 12)
        hi = _b_positive(rad, k, 12, 90, 20)
    err = abs(hi - lo)
    if err > tol * max(abs(hi), 1e-300) and err > 1e-14:
        raise QuadratureError(f"B({k:g}) error estimate {err:.3g} above tolerance", err)
    return (hi, err) if return_error else hi


@dataclass(frozen=True)
class FTerm:
    value: float
    stderr: float
    samples: int
    method: str


def _f1_zero(dressed: DressedDirac) -> float:
    """k -> 0 limit of the J = 1 term reduced to a 2D radial integral.

    The e-averaged product of the bivectors sigma ^ d_e sigma at u and v,
    integrated against 1/|u - v|^2 over both angles, leaves Legendre-Q
    kernels in the radii.
    """
    rad = _radial(dressed)
    r = dressed.grid
    ph = rad.phi(r)
    dph = rad.dphi(r)
    a, b = np.cos(ph), np.sin(ph)
    E = rad.E(r)
    with np.errstate(divide="ignore", invalid="ignore"):
        R = np.where(r > 0, a * b / np.where(r > 0, r, 1.0), dph[0])
        S = np.where(r > 0, b * b / np.where(r > 0, r, 1.0), 0.0)
    P = dph - R
    P[0] = 0.0
    M0, M1, M2 = (kernel_matrix(r, l) for l in range(3))
    pe, re_, se = P / E, R / E, S / E
    m0p, m0r = M0 @ pe, M0 @ re_
    T = (2.0 / 9.0) * P * (2 * (M2 @ pe) + m0p) + (2.0 / 3.0) * (P * m0r + R * m0p) + 2 * R * m0r + (4.0 / 3.0) * S * (M1 @ se)
    outer = (r / E) * 2 * math.pi * r * T
    integral = float(np.trapezoid(outer, r))
    return integral / (4 * math.pi**2)


def _sample_ball(u, lam_r, eps, p_log, r_inner):
    """Map uniforms (n, 4) to points from a log-radius / uniform-ball mixture."""
    choose = u[:, 0] < p_log
    span = math.log(lam_r / eps)
    r_log = eps * np.exp(u[:, 1] * span)
    r_in = r_inner * np.cbrt(u[:, 1])
    r = np.where(choose, r_log, r_in)
    cth = 2 * u[:, 2] - 1
    sth = np.sqrt(np.clip(1 - cth * cth, 0, None))
    phi = 2 * math.pi * u[:, 3]
    x = r[:, None] * np.stack([sth * np.cos(phi), sth * np.sin(phi), cth], axis=1)
    pdf_log = np.where(r >= eps, 1.0 / (4 * math.pi * r**3 * span), 0.0)
    pdf_in = np.where(r <= r_inner, 3.0 / (4 * math.pi * r_inner**3), 0.0)
    pdf = p_log * pdf_log + (1 - p_log) * pdf_in
    return x, pdf


def _f_integrand(J, k, dressed, U):
    """Weighted integrand of the J-th term for uniforms U of shape (n, 4 (J + 1))."""
    lam = dressed.lam
    e = np.array([0.0, 0.0, 1.0])
    hk = 0.5 * k * e
    u0, pdf = _sample_ball(U[:, :4], lam, 1e-4, 0.7, 2.0)
    weight = 1.0 / pdf
    centres = [u0]
    for j in range(1, J + 1):
        ell, pl = _sample_ball(U[:, 4 * j : 4 * j + 4], 2 * lam, 1e-4, 0.9, 1.0)
        weight = weight / (pl * np.einsum("ij,ij->i", ell, ell))
        centres.append(centres[-1] - ell)
    ok = np.ones(len(U), dtype=bool)
    for c in centres:
        ok &= (np.linalg.norm(c + hk, axis=1) < lam) & (np.linalg.norm(c - hk, axis=1) < lam)
    out = np.zeros(len(U))
    if not ok.any():
        return out
    cs = [c[ok] for c in centres]
    sp = [sign_array(c + hk, dressed) for c in cs]
    sq = [sign_array(c - hk, dressed) for c in cs]
    den = np.ones(ok.sum())
    for c in cs:
        den *= dressed.e_script(np.linalg.norm(c + hk, axis=1)) + dressed.e_script(np.linalg.norm(c - hk, axis=1))
    Y = I4 - sp[J] @ sq[J]
    for j in range(J - 1, 0, -1):
        Y = Y - sp[j] @ Y @ sq[j]
    X = I4 - sq[0] @ sp[0]
    tr = np.einsum("nab,nba->n", X, Y).real
    out[ok] = weight[ok] * tr / den
    return out


def _f_prefactor(J, k, alpha):
    return alpha / (4 * math.pi**2) ** J / (4 * math.pi**2 * k * k)


def compute_f_term(
    J: int,
    k: float,
    dressed: DressedDirac,
    samples: int = 2**14,
    seed: int = 0,
    method: str | None = None,
) -> FTerm:
    """J-th correction f_J(k); its contribution to f is alpha^J * value.

    method "legendre" (J = 1, k = 0 only), "qmc" (16 scrambled Sobol
    replicates seeded from the run seed, error from their spread)
    or "mc" (counter-based Philox stream, standard error).
    """
    if J < 1 or J > 3:
        raise UnsupportedOrderError(f"order J = {J} not supported (1 <= J <= 3)")
    alpha = dressed.alpha
    if method is None:
        method = "legendre" if (J == 1 and k == 0) else ("qmc" if J == 1 else "mc")
    if method == "legendre":
        if J != 1 or k != 0:
            raise ValueError("the Legendre reduction covers J = 1 at k = 0 only")
        return FTerm(alpha * _f1_zero(dressed), 0.0, 0, method)
    if k <= 0:
        raise ValueError("sampling estimators need k > 0")
    if k >= 2 * dressed.lam:
        return FTerm(0.0, 0.0, 0, method)
    dim = 4 * (J + 1)
    if method == "qmc":
        # randomised QMC: independent Owen-scrambled Sobol replicates, seeded
        reps = 16
        m = max(1, int(round(math.log2(max(samples // reps, 2)))))
        means = []
        for r in range(reps):
            eng = qmc.Sobol(dim, scramble=True, seed=np.random.default_rng([seed, J, r]))
            pts = np.clip(eng.random_base2(m), 0, 1 - 1e-16)
            means.append(_f_integrand(J, k, dressed, pts).mean())
        means = np.array(means)
        pref = _f_prefactor(J, k, alpha)
        return FTerm(pref * means.mean(), pref * means.std(ddof=1) / math.sqrt(reps), reps * 2**m, method)
    if method == "mc":
        gen = np.random.Generator(np.random.Philox(key=seed, counter=[J, int(k * 1e6) & 0xFFFFFFFF, 0, 0]))
        pts = gen.random((samples, dim))
        vals = _f_integrand(J, k, dressed, pts)
        pref = _f_prefactor(J, k, alpha)
        return FTerm(pref * vals.mean(), pref * vals.std(ddof=1) / math.sqrt(samples), samples, method)
    raise ValueError(f"unknown method {method!r}")


def default_kgrid(lam: float, n: int = 192, k_min: float = 1e-3) -> np.ndarray:
    return np.concatenate([[0.0], np.geomspace(k_min, 2 * lam, n - 1)])


def radial_sine_integral(k: np.ndarray, F: np.ndarray, r: np.ndarray, chunk: int = 2**22) -> np.ndarray:
    """int_0^kmax k F(k) sin(k r) dk for piecewise-linear F, exact per panel."""
    r = np.asarray(r, dtype=float)
    step = max(1, chunk // max(len(k), 1))
    if len(r) > step:
        return np.concatenate([_sine_block(k, F, r[i : i + step]) for i in range(0, len(r), step)])
    return _sine_block(k, F, r)


def _sine_block(k, F, r):
    r = r[:, None]
    ka, kb = k[:-1][None, :], k[1:][None, :]
    Fa, Fb = F[:-1][None, :], F[1:][None, :]
    h = kb - ka
    c1 = (Fb - Fa) / h
    c0 = Fa - c1 * ka

    def prim(x):
        P = c1 * x * x + c0 * x
        dP = 2 * c1 * x + c0
        return -P * np.cos(x * r) / r + dP * np.sin(x * r) / r**2 + 2 * c1 * np.cos(x * r) / r**3

    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        exact = prim(kb) - prim(ka)
    xg, wg = np.polynomial.legendre.leggauss(8)
    kk = 0.5 * (ka + kb)[..., None] + 0.5 * h[..., None] * xg
    Fk = c0[..., None] + c1[..., None] * kk
    gl = (0.5 * h[..., None] * wg * kk * Fk * np.sin(kk * r[..., None])).sum(-1)
    use_gl = (r * h) < 2.0
    return np.where(use_gl, gl, exact).sum(axis=1)


def kernel_l1_norm(k: np.ndarray, F: np.ndarray, n_r: int = 600) -> tuple[float, float]:
    """L1 norm and integral of the radial kernel whose k-space multiplier is F.

    The kernel K satisfies (K * rho)^ = F rho^, i.e.
    r K(r) = 1/(2 pi^2) int k F(k) sin(k r) dk.
    """
    kmax = k[-1]
    r = np.concatenate([[0.0], np.geomspace(1e-3 / kmax, 60.0, n_r)])
    rr = np.where(r > 0, r, 1.0)
    vals = radial_sine_integral(k, F, rr) / (2 * math.pi**2 * rr)
    vals[0] = float(np.trapezoid(k * k * F, k)) / (2 * math.pi**2)
    dens = 4 * math.pi * r * r * vals
    return float(np.trapezoid(np.abs(dens), r)), float(np.trapezoid(dens, r))


@dataclass
class RenormFunctions:
    kgrid: np.ndarray
    B: np.ndarray
    f_terms: list
    f: np.ndarray
    F: np.ndarray
    Z3: float
    checkF_L1: float
    alpha: float
    lam: float
    f_term_errors: list = field(default_factory=list)
    kernel_integral: float = 0.0

    @property
    def L(self) -> float:
        return self.alpha * math.log(self.lam)

    @property
    def f0(self) -> float:
        return float(self.f[0])

    @property
    def F_L1_unitary(self) -> float:
        # the same function under the unitary transform differs by (2 pi)^(3/2)
        return self.checkF_L1 * (2 * math.pi) ** 1.5

    def F_at(self, k):
        return np.interp(np.abs(k), self.kgrid, self.F, right=0.0)

    def as_json(self) -> dict:
        return {
            "Z3": self.Z3,
            "F_L1_norm": self.checkF_L1,
            "F_L1_norm_unitary": self.F_L1_unitary,
            "L": self.L,
            "f0": self.f0,
            "Z3_alt_convention": 1.0 / (1.0 + self.alpha * self.f0),
        }


def assemble(
    dressed: DressedDirac,
    params: PhysicalParams | None = None,
    J_max: int = 1,
    kgrid: np.ndarray | None = None,
    tol: float = 1e-6,
    samples: int = 2**13,
    seed: int = 0,
) -> RenormFunctions:
    """Sample B, f = alpha B + sum_J alpha^J f_J, F and Z3 on a radial k-grid."""
    if J_max < 0:
        raise ValueError("J_max must be non-negative")
    if J_max > 3:
        raise UnsupportedOrderError("J_max above 3 is not supported")
    alpha = dressed.alpha if params is None else params.alpha
    lam = dressed.lam
    k = default_kgrid(lam) if kgrid is None else np.asarray(kgrid, dtype=float)
    B = np.array([compute_B(float(x), dressed, tol) for x in k])
    terms = [alpha * B]
    errs = [np.zeros_like(B)]
    for J in range(1, J_max + 1):
        vals, es = np.zeros_like(k), np.zeros_like(k)
        if alpha > 0:
            for i, x in enumerate(k):
                if x == 0 and J == 1:
                    t = compute_f_term(1, 0.0, dressed)
                elif x == 0:
                    t = compute_f_term(J, float(k[1]) if len(k) > 1 else 1e-3, dressed, samples, seed)
                else:
                    t = compute_f_term(J, float(x), dressed, samples, seed)
                vals[i], es[i] = t.value, t.stderr
        terms.append(alpha**J * vals)
        errs.append(alpha**J * es)
    f = np.sum(terms, axis=0)
    F = f / (1 + f)
    l1, integral = kernel_l1_norm(k, F) if alpha > 0 else (0.0, 0.0)
    return RenormFunctions(k, B, terms, f, F, float(1 / (1 + f[0])), l1, alpha, lam, errs, integral)


def neumann_F(f: np.ndarray, tail_tol: float = 1e-10) -> np.ndarray:
    """F = f/(1+f) through the alternating series sum (-1)^(l+1) f^l."""
    f = np.asarray(f, dtype=float)
    if np.any(np.abs(f) >= 1):
        raise ValueError("series needs |f| < 1")
    out = np.zeros_like(f)
    term = -np.ones_like(f)
    for _ in range(10_000):
        term = -term * f
        out += term
        if np.max(np.abs(term * f) / (1 - np.abs(f))) < tail_tol:
            break
    return out
