"""Exact 4x4 Dirac matrix algebra with even/odd grading.

The generators are beta and alpha_1..3 in the standard (Dirac) representation.
Elements carry a grading tag: "even" for products of an even number of
generators, "odd" for an odd number, "mixed" otherwise.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import CutoffError, GradingError

EVEN, ODD, MIXED = "even", "odd", "mixed"
_ATOL = 1e-12

SIGMA = np.array(
    [
        [[0, 1], [1, 0]],
        [[0, -1j], [1j, 0]],
        [[1, 0], [0, -1]],
    ],
    dtype=complex,
)
I2 = np.eye(2, dtype=complex)
I4 = np.eye(4, dtype=complex)
Z2 = np.zeros((2, 2), dtype=complex)

BETA = np.block([[I2, Z2], [Z2, -I2]])
ALPHA = np.stack([np.block([[Z2, s], [s, Z2]]) for s in SIGMA])
# generators in the order (beta, alpha_1, alpha_2, alpha_3)
GAMMA = np.concatenate([BETA[None], ALPHA])


def compose_grading(a: str, b: str) -> str:
    if MIXED in (a, b):
        return MIXED
    return EVEN if a == b else ODD


@dataclass(frozen=True)
class DiracElement:
    entries: np.ndarray
    grading: str

    def __post_init__(self):
        m = np.asarray(self.entries)
        if m.shape != (4, 4):
            raise ValueError(f"expected 4x4 entries, got {m.shape}")
        if self.grading not in (EVEN, ODD, MIXED):
            raise ValueError(f"unknown grading {self.grading!r}")
        object.__setattr__(self, "entries", m)

    def __matmul__(self, other: "DiracElement") -> "DiracElement":
        return DiracElement(self.entries @ other.entries, compose_grading(self.grading, other.grading))

    def __add__(self, other: "DiracElement") -> "DiracElement":
        g = self.grading if self.grading == other.grading else MIXED
        return DiracElement(self.entries + other.entries, g)

    def __sub__(self, other: "DiracElement") -> "DiracElement":
        g = self.grading if self.grading == other.grading else MIXED
        return DiracElement(self.entries - other.entries, g)

    def __neg__(self) -> "DiracElement":
        return DiracElement(-self.entries, self.grading)

    def scale(self, c) -> "DiracElement":
        return DiracElement(c * self.entries, self.grading)

    def trace(self):
        return np.trace(self.entries)

    @property
    def adjoint(self) -> "DiracElement":
        return DiracElement(self.entries.conj().T, self.grading)


def identity() -> DiracElement:
    return DiracElement(I4.copy(), EVEN)


def make_dirac_basis() -> dict[str, DiracElement]:
    """Return alpha_1, alpha_2, alpha_3 and beta, all tagged odd."""
    out = {f"alpha{j + 1}": DiracElement(ALPHA[j].copy(), ODD) for j in range(3)}
    out["beta"] = DiracElement(BETA.copy(), ODD)
    return out


def _product_basis():
    """The 16 ordered products of distinct generators with their parity."""
    mats, parity = [], []
    for r in range(5):
        for idx in itertools.combinations(range(4), r):
            m = I4.copy()
            for i in idx:
                m = m @ GAMMA[i]
            mats.append(m)
            parity.append(r % 2)
    return np.array(mats), np.array(parity)


_BASIS, _PARITY = _product_basis()


def grade_parts(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split a 4x4 matrix into its even and odd parts.

    The 16 generator products are orthonormal for <A, B> = Tr(A* B)/4, so the
    projection is a sum of rank-one terms.
    """
    m = np.asarray(m, dtype=complex)
    coef = np.einsum("kij,ij->k", _BASIS.conj(), m) / 4.0
    parts = coef[:, None, None] * _BASIS
    return parts[_PARITY == 0].sum(axis=0), parts[_PARITY == 1].sum(axis=0)


def classify(m, atol: float = _ATOL) -> str:
    """Grading of a matrix from its projections; the zero matrix counts as even."""
    ev, od = grade_parts(np.asarray(getattr(m, "entries", m)))
    ne, no = np.abs(ev).max(), np.abs(od).max()
    if no <= atol:
        return EVEN
    if ne <= atol:
        return ODD
    return MIXED


def _free_g(pn):
    pn = np.asarray(pn, dtype=float)
    return np.ones_like(pn), pn


def sign_array(p, dressed=None) -> np.ndarray:
    """Vectorised s_p for momenta of shape (..., 3); returns (..., 4, 4)."""
    p = np.asarray(p, dtype=float)
    pn = np.linalg.norm(p, axis=-1)
    if dressed is None:
        g0, g1 = _free_g(pn)
    else:
        if np.any(pn > dressed.lam * (1 + 1e-12)):
            raise CutoffError(f"|p| = {pn.max():.6g} exceeds cutoff {dressed.lam:.6g}")
        g0, g1 = dressed.evaluate(pn)
    e = np.hypot(g0, g1)
    with np.errstate(invalid="ignore", divide="ignore"):
        w = np.where(pn[..., None] > 0, p / np.where(pn > 0, pn, 1.0)[..., None], 0.0)
    vec = np.einsum("...j,jab->...ab", w, ALPHA)
    return ((g0 / e)[..., None, None] * BETA + (g1 / e)[..., None, None] * vec).astype(complex)


def sign_matrix(p, dressed=None) -> DiracElement:
    """s_p = (beta g0 + (p/|p|).alpha g1) / E_script; free operator if dressed is None."""
    return DiracElement(sign_array(np.asarray(p, dtype=float), dressed), ODD)


@dataclass(frozen=True)
class FurryResult:
    trace: complex
    grading: str


def furry_trace_check(word, exact: bool = False) -> FurryResult:
    """Trace and grading of a product of pure-graded Dirac elements.

    With exact=True the product is formed over Gaussian rationals, so the trace
    of an odd word is exactly zero rather than below 1e-12.
    """
    word = list(word)
    if not word:
        raise ValueError("empty word")
    grading = EVEN
    for w in word:
        if w.grading == MIXED:
            raise GradingError("mixed-graded element in word")
        grading = compose_grading(grading, w.grading)
    if exact:
        re, im = _to_exact(word[0].entries)
        for w in word[1:]:
            r2, i2 = _to_exact(w.entries)
            re, im = re.dot(r2) - im.dot(i2), re.dot(i2) + im.dot(r2)
        tr = complex(float(np.trace(re)), float(np.trace(im)))
        if grading == ODD and (np.trace(re) != 0 or np.trace(im) != 0):
            raise AssertionError("odd word with non-zero exact trace")
        return FurryResult(tr, grading)
    prod = word[0].entries
    for w in word[1:]:
        prod = prod @ w.entries
    tr = np.trace(prod)
    if grading == ODD and abs(tr) >= _ATOL:
        raise AssertionError(f"odd word with trace {tr}")
    return FurryResult(complex(tr), grading)


def _to_exact(m: np.ndarray):
    def conv(x):
        return Fraction(x).limit_denominator(10**12)

    re = np.vectorize(conv, otypes=[object])(np.real(m))
    im = np.vectorize(conv, otypes=[object])(np.imag(m))
    return re, im


def all_generator_words(max_len: int):
    gens = [DiracElement(g, ODD) for g in GAMMA]
    for n in range(1, max_len + 1):
        for idx in itertools.product(range(4), repeat=n):
            yield idx, [gens[i] for i in idx]


@dataclass(frozen=True)
class CalculResult:
    residual: float
    traces: tuple[complex, complex, complex]
    gradings: tuple[str, str, str]


def calcul_identity_check(s_p, s_p1, s_q, v1, v2) -> CalculResult:
    """Residual of the three projector-product identities behind Furry cancellation.

    Each identity rewrites a difference of P_+/P_- sandwiches with scalar
    insertions v1, v2 as a sum of odd products of sign matrices.
    """
    a, b, c = (getattr(x, "entries", x) for x in (s_p, s_p1, s_q))
    one = I4
    lhs = [
        0.5 * ((one + a) * v1 @ (one - b) * v2 @ (one - c) - (one - a) * v1 @ (one + b) * v2 @ (one + c)),
        0.5 * ((one + a) * v1 @ (one - b) * v2 @ (one + c) - (one - a) * v1 @ (one + b) * v2 @ (one - c)),
        0.5 * ((one - a) * v1 @ (one - b) * v2 @ (one + c) - (one + a) * v1 @ (one + b) * v2 @ (one - c)),
    ]
    vv = v1 * v2
    rhs = [
        vv * (a @ b @ c + a - c - b),
        vv * (-a @ b @ c + a + c - b),
        vv * (a @ b @ c - a + c - b),
    ]
    res = max(float(np.abs(l - r).max()) for l, r in zip(lhs, rhs))
    traces = tuple(complex(np.trace(r)) for r in rhs)
    gradings = tuple(classify(r, atol=1e-10 * max(1.0, abs(vv))) for r in rhs)
    return CalculResult(res, traces, gradings)


def a_transport(ell, kernel, p, q, dressed=None) -> DiracElement:
    """One step of the transport recursion: K(p-l, q-l) - s_p K(p-l, q-l) s_q."""
    ell, p, q = (np.asarray(x, dtype=float) for x in (ell, p, q))
    if dressed is not None:
        for v in (p, q, p - ell, q - ell):
            if np.linalg.norm(v) > dressed.lam * (1 + 1e-12):
                raise CutoffError("shifted momentum outside the cutoff ball")
    k = kernel(p - ell, q - ell)
    if not isinstance(k, DiracElement):
        k = DiracElement(np.asarray(k, dtype=complex), classify(k))
    sp, sq = sign_matrix(p, dressed), sign_matrix(q, dressed)
    return k - sp @ k @ sq


def fit_sign_lipschitz(dressed=None, n_pairs: int = 1000, rng=None, lam: float | None = None) -> float:
    """Empirical constant C_s in |s_p - s_q| <= C_s |p - q| / max(E(p), E(q))."""
    rng = np.random.default_rng(rng)
    lam = dressed.lam if dressed is not None else (lam or 1e3)
    p = _random_ball(rng, n_pairs, lam)
    q = _random_ball(rng, n_pairs, lam)
    sp, sq = sign_array(p, dressed), sign_array(q, dressed)
    diff = np.linalg.norm(sp - sq, ord=2, axis=(-2, -1))
    if dressed is None:
        ep = np.sqrt(1 + (p**2).sum(-1))
        eq = np.sqrt(1 + (q**2).sum(-1))
    else:
        ep = dressed.e_script(np.linalg.norm(p, axis=-1))
        eq = dressed.e_script(np.linalg.norm(q, axis=-1))
    dist = np.linalg.norm(p - q, axis=-1)
    return float(np.max(diff * np.maximum(ep, eq) / dist))


def _random_ball(rng, n, lam):
    # log-uniform radii so that every scale below the cutoff is sampled
    r = np.exp(rng.uniform(np.log(1e-3), np.log(lam), n))
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True) * r[:, None]
