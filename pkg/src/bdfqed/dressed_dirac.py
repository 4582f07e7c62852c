"""Self-consistent dressed free Dirac operator under a sharp momentum cutoff.

In momentum space the operator is alpha.omega_p g1(|p|) + beta g0(|p|). The
fixed-point equation

    D(p) = alpha.p + beta + (alpha / 4 pi^2) int_{|q|<lam} s(q) / |p - q|^2 dq

reduces, after the angular integration, to two radial equations

    g0(p) = 1 + alpha/(2 pi p) int_0^lam q Q_0(z) g0(q)/E(q) dq
    g1(p) = p + alpha/(2 pi p) int_0^lam q Q_1(z) g1(q)/E(q) dq

with z = (p^2 + q^2) / (2 p q) and Q_l the Legendre functions of the second
kind. The kernels are discretised once on a geometric grid (piecewise-linear
product integration, logarithmic singularity integrated analytically) and the
map is then iterated.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import CutoffError, DivergenceError, ResolutionError

MIN_NODES = 64


@dataclass(frozen=True)
class PhysicalParams:
    alpha: float
    lam: float
    M: float = 0
    Z: float = 0.0
    nu_spec: str | None = None

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.lam <= 1:
            raise ValueError("cutoff must exceed 1")

    @property
    def L(self) -> float:
        return self.alpha * math.log(self.lam)

    @property
    def small_alpha(self) -> bool:
        return self.alpha <= 0.1

    @property
    def small_L(self) -> bool:
        return self.L <= 0.3

    @property
    def in_regime(self) -> bool:
        return self.small_alpha and self.small_L

    def warn_regime(self):
        if not self.in_regime:
            warnings.warn(
                f"alpha={self.alpha:g}, L={self.L:.3g} outside the small-coupling regime",
                RuntimeWarning,
                stacklevel=3,
            )


def legendre_q0(w):
    """Q_0(z) written in w = 1/z, i.e. artanh(w); stable for small w."""
    w = np.asarray(w, dtype=float)
    return np.arctanh(np.minimum(w, 1.0 - 1e-16))


def legendre_q1(w):
    """Q_1(z) = z Q_0(z) - 1 in terms of w = 1/z, with a series for small w."""
    w = np.asarray(w, dtype=float)
    out = np.empty_like(w)
    small = w < 0.5
    ws = w[small] ** 2
    acc = np.zeros_like(ws)
    term = np.ones_like(ws)
    for n in range(1, 30):
        term = term * ws
        acc += term / (2 * n + 1)
    out[small] = acc
    wl = np.minimum(w[~small], 1.0 - 1e-16)
    out[~small] = np.arctanh(wl) / wl - 1.0
    return out


def legendre_q2(w):
    """Q_2(z) = ((3 z^2 - 1)/2) Q_0(z) - 3 z / 2, with a series for small w."""
    w = np.asarray(w, dtype=float)
    out = np.empty_like(w)
    small = w < 0.5
    # Q_2 = sum_n c_n w^(2n+3) with c_n from the hypergeometric form
    ws = w[small]
    acc = np.zeros_like(ws)
    for n in range(30):
        c = 2.0 * (n + 1) / ((2 * n + 3) * (2 * n + 5))
        acc += c * ws ** (2 * n + 3)
    out[small] = acc
    wl = np.minimum(w[~small], 1.0 - 1e-16)
    z = 1.0 / wl
    out[~small] = 0.5 * (3 * z * z - 1) * np.arctanh(wl) - 1.5 * z
    return out


def _wpq(p, q):
    return 2.0 * p * q / (p * p + q * q)


def _log_moments(xa, xb, nmax):
    """int_{xa}^{xb} x^n ln|x| dx for n = 0..nmax (columns)."""

    def prim(x, n):
        ax = np.abs(x)
        with np.errstate(divide="ignore", invalid="ignore"):
            lg = np.where(ax > 0, np.log(np.where(ax > 0, ax, 1.0)), 0.0)
        return x ** (n + 1) * (lg / (n + 1) - 1.0 / (n + 1) ** 2)

    return np.stack([prim(xb, n) - prim(xa, n) for n in range(nmax + 1)], axis=-1)


def geometric_grid(lam: float, n: int, p_min: float = 1e-3) -> np.ndarray:
    if n < MIN_NODES:
        raise ResolutionError(f"radial grid needs at least {MIN_NODES} nodes, got {n}")
    p_min = min(p_min, lam * 1e-3)
    return np.concatenate([[0.0], np.geomspace(p_min, lam, n - 1)])


def _q_and_log_split(l, p, q):
    """Kernel q Q_l(z) = S - C ln|q - p| with S, C smooth near q = p."""
    z = (p * p + q * q) / (2 * p * q)
    lnp = np.log(p + q)
    if l == 0:
        c = q
        return c * lnp, c
    if l == 1:
        c = q * z
        return c * lnp - q, c
    if l == 2:
        c = 0.5 * q * (3 * z * z - 1)
        return c * lnp - 1.5 * q * z, c
    raise ValueError("only l <= 2 is supported")


_Q_FUNCS = {0: legendre_q0, 1: legendre_q1, 2: legendre_q2}


def radial_kernel_matrix(grid: np.ndarray, l: int, n_gauss: int = 8, near: int = 2) -> np.ndarray:
    """Matrix A with (A h)(p_i) = 1/(2 pi p_i) int_0^lam q Q_l(z) h(q) dq.

    h is taken piecewise linear between grid nodes. Panels next to the
    singular point use Gauss-Legendre for the smooth part and exact moments of
    x^n ln|x| against a degree-5 fit of the log coefficient.
    """
    n = grid.size
    xg, wg = np.polynomial.legendre.leggauss(n_gauss)
    a, b = grid[:-1], grid[1:]
    h = b - a
    qn = 0.5 * (a + b)[:, None] + 0.5 * h[:, None] * xg[None, :]
    qw = 0.5 * h[:, None] * wg[None, :]
    phl = (b[:, None] - qn) / h[:, None]
    phr = (qn - a[:, None]) / h[:, None]
    qfun = _Q_FUNCS[l]

    A = np.zeros((n, n))
    if l == 0:
        # limit p -> 0 of q Q_0(z) / p is 2
        A[0, :-1] += (qw * phl).sum(1) / math.pi
        A[0, 1:] += (qw * phr).sum(1) / math.pi
    for i in range(1, n):
        p = grid[i]
        k = qn * qfun(_wpq(p, qn))
        lo, hi = max(0, i - 1 - near), min(n - 1, i + near)
        mask = np.ones(n - 1, dtype=bool)
        mask[lo:hi] = False
        idx = np.nonzero(mask)[0]
        np.add.at(A[i], idx, (k * phl * qw)[mask].sum(1))
        np.add.at(A[i], idx + 1, (k * phr * qw)[mask].sum(1))
        for j in range(lo, hi):
            qq, ww = qn[j], qw[j]
            smooth, coef = _q_and_log_split(l, p, qq)
            mom = _log_moments(a[j] - p, b[j] - p, 5)
            for node, phi in ((j, phl[j]), (j + 1, phr[j])):
                fit = np.polynomial.polynomial.polyfit(qq - p, coef * phi, 5)
                A[i, node] += (smooth * phi * ww).sum() - fit @ mom
        A[i] /= 2 * math.pi * p
    return A


@dataclass(frozen=True)
class DressedDirac:
    grid: np.ndarray
    g0: np.ndarray
    g1: np.ndarray
    alpha: float
    lam: float
    iterations: int = 0
    residual: float = 0.0
    residual_history: tuple = field(default_factory=tuple)

    @property
    def m(self) -> float:
        return float(np.min(self.e_script_nodes))

    @property
    def e_script_nodes(self) -> np.ndarray:
        return np.hypot(self.g0, self.g1)

    def evaluate(self, pn):
        pn = np.asarray(pn, dtype=float)
        if np.any(pn > self.lam * (1 + 1e-12)):
            raise CutoffError(f"|p| = {np.max(pn):.6g} exceeds cutoff {self.lam:.6g}")
        return np.interp(pn, self.grid, self.g0), np.interp(pn, self.grid, self.g1)

    def e_script(self, pn):
        g0, g1 = self.evaluate(pn)
        return np.hypot(g0, g1)

    def gstar_report(self) -> dict:
        p, g0, g1 = self.grid, self.g0, self.g1
        slack = 1e-12 * np.maximum(1.0, p)
        lower = bool(np.all(p <= g1 + slack))
        upper = bool(np.all(g1 <= g0 * p + slack))
        g0_low = bool(np.all(g0 >= 1 - 1e-12))
        logl = math.log(self.lam)
        c_fit = float(np.max(g0 - 1) / (self.alpha * logl)) if self.alpha > 0 else 0.0
        return {
            "p_le_g1": lower,
            "g1_le_g0p": upper,
            "g0_ge_1": g0_low,
            "C_fit": c_fit,
            "ok": lower and upper and g0_low,
        }


def free_dirac(lam: float, n_nodes: int = 512) -> DressedDirac:
    grid = geometric_grid(lam, n_nodes)
    return DressedDirac(grid, np.ones_like(grid), grid.copy(), 0.0, lam, 1, 0.0, (0.0,))


_KERNEL_CACHE: dict = {}


def kernel_matrix(grid: np.ndarray, l: int) -> np.ndarray:
    key = (grid.size, float(grid[1]), float(grid[-1]), l)
    if key not in _KERNEL_CACHE:
        if len(_KERNEL_CACHE) > 12:
            _KERNEL_CACHE.clear()
        _KERNEL_CACHE[key] = radial_kernel_matrix(grid, l)
    return _KERNEL_CACHE[key]


def dress(
    params: PhysicalParams,
    tol: float = 1e-11,
    max_iter: int = 50,
    n_nodes: int = 512,
    mixing: float = 1.0,
) -> DressedDirac:
    """Picard iteration from the free operator until the sup-norm update is below tol.

    The update norm is max(|dg0|, |dg1| / max(1, p)) over the grid.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if not 0 < mixing <= 1:
        raise ValueError("mixing must lie in (0, 1]")
    params.warn_regime()
    grid = geometric_grid(params.lam, n_nodes)
    g0, g1 = np.ones_like(grid), grid.copy()
    scale = np.maximum(1.0, grid)
    if params.alpha == 0:
        return DressedDirac(grid, g0, g1, 0.0, params.lam, 1, 0.0, (0.0,))
    A0, A1 = kernel_matrix(grid, 0), kernel_matrix(grid, 1)
    hist = []
    for it in range(1, max_iter + 1):
        e = np.hypot(g0, g1)
        n0 = 1.0 + params.alpha * (A0 @ (g0 / e))
        n1 = grid + params.alpha * (A1 @ (g1 / e))
        n0 = (1 - mixing) * g0 + mixing * n0
        n1 = (1 - mixing) * g1 + mixing * n1
        res = float(max(np.max(np.abs(n0 - g0)), np.max(np.abs(n1 - g1) / scale)))
        hist.append(res)
        g0, g1 = n0, n1
        if not np.isfinite(res):
            break
        if res < tol:
            return DressedDirac(grid, g0, g1, params.alpha, params.lam, it, res, tuple(hist))
    raise DivergenceError(f"no convergence in {max_iter} iterations (last residual {hist[-1]:.3g})", hist)


def projector_array(p, sign: int, dressed: DressedDirac | None = None) -> np.ndarray:
    """(I + sign * s_p) / 2 for momenta of shape (..., 3); returns (..., 4, 4)."""
    from .clifford import I4, sign_array

    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    return 0.5 * (I4 + sign * sign_array(np.asarray(p, dtype=float), dressed))


def projector_kernel(p, sign: int, dressed: DressedDirac | None = None):
    """(I + sign * s_p) / 2 at a single momentum, as a Dirac element."""
    from .clifford import MIXED, DiracElement

    return DiracElement(projector_array(p, sign, dressed), MIXED)


@dataclass(frozen=True)
class SmoothnessReport:
    max_dg0: float
    max_dg1_minus_1: float
    dg0_over_alpha: float
    dg1_over_L: float


def smoothness_probe(dressed: DressedDirac, order: int = 1) -> SmoothnessReport:
    """Finite-difference bounds on derivatives of g0 and g1."""
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    p = dressed.grid
    d0 = np.gradient(dressed.g0, p)
    d1 = np.gradient(dressed.g1, p)
    if order == 2:
        d0 = np.gradient(d0, p)
        d1 = np.gradient(d1, p) + 1.0
    m0 = float(np.max(np.abs(d0)))
    m1 = float(np.max(np.abs(d1 - 1.0)))
    L = dressed.alpha * math.log(dressed.lam)
    return SmoothnessReport(
        m0,
        m1,
        m0 / dressed.alpha if dressed.alpha > 0 else 0.0,
        m1 / L if L > 0 else 0.0,
    )
