"""Fubini-Study geometry on CP^1 and Berezin-Toeplitz operators.

Polynomial symbols are stored as homogeneous polynomials of bidegree (n, n) in
``(z0, z1)`` and their conjugates, evaluated on unit vectors. On the affine
chart ``w = z1 / z0`` this is the span of ``w^a conj(w)^b (1+|w|^2)^(-c)``
with ``a, b <= c``. The Fubini-Study measure is normalized to total mass one,
under which

    int z^alpha conj(z)^beta = delta_{alpha beta} alpha0! alpha1! / (|alpha| + 1)!

This closed form gives exact Toeplitz matrices for polynomial symbols; other
symbols use a product Gauss-Legendre / trapezoid rule in ``t = |z1|^2`` and
the phase of ``w``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from scipy.special import gammaln

from .group_rep import GroupElement, monomial_norms

Exponent = tuple[int, int, int, int]  # (a0, a1, b0, b1): z0^a0 z1^a1 conj(z0)^b0 conj(z1)^b1


class QuadratureError(ValueError):
    """Raised when a quadrature rule cannot integrate a request exactly."""


def _log_comb(n: int, k: np.ndarray) -> np.ndarray:
    return gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1)


@dataclass(frozen=True)
class QuadratureRule:
    """Product rule on CP^1: Gauss-Legendre in ``t = |z1|^2``, uniform in phase.

    Exact for ``z^alpha conj(z)^beta`` whenever ``|alpha| = |beta| <= degree``.
    """

    n_t: int
    n_phi: int
    points: np.ndarray = field(repr=False)  # (Q, 2) unit vectors
    weights: np.ndarray = field(repr=False)  # (Q,), sum to 1

    @classmethod
    def build(cls, degree: int) -> "QuadratureRule":
        n_t = max(degree // 2 + 1, 1)
        n_phi = degree + 1
        x, w = np.polynomial.legendre.leggauss(n_t)
        t = 0.5 * (x + 1)
        wt = 0.5 * w
        phi = 2 * np.pi * np.arange(n_phi) / n_phi
        T, P = np.meshgrid(t, phi, indexing="ij")
        pts = np.stack([np.sqrt(1 - T), np.sqrt(T) * np.exp(1j * P)], axis=-1).reshape(-1, 2)
        wts = np.repeat(wt, n_phi) / n_phi
        return cls(n_t, n_phi, pts, wts)

    @property
    def degree(self) -> int:
        return min(2 * self.n_t - 1, self.n_phi - 1)

    def integrate(self, values: np.ndarray) -> complex:
        return complex(np.dot(self.weights, values))


class FibreSymbol:
    """A function on CP^1.

    Use :meth:`polynomial`, :meth:`from_affine` or :meth:`sampled` to build
    one. Polynomial symbols carry an exact coefficient table; sampled ones
    carry a vectorized callable on unit vectors ``z`` with shape ``(..., 2)``
    and a declared polynomial ``degree`` that quadrature must resolve.
    """

    def __init__(self, kind: str, degree: int, real: bool,
                 coeffs: Mapping[Exponent, complex] | None = None,
                 func: Callable[[np.ndarray], np.ndarray] | None = None,
                 name: str = ""):
        if kind not in ("polynomial", "sampled"):
            raise ValueError(f"unknown symbol kind {kind!r}")
        self.kind = kind
        self.degree = int(degree)
        self.real = bool(real)
        self.coeffs = dict(coeffs) if coeffs is not None else None
        self.func = func
        self.name = name

    def __repr__(self):
        return f"FibreSymbol({self.kind}, degree={self.degree}, real={self.real}, name={self.name!r})"

    # construction ---------------------------------------------------------

    @classmethod
    def polynomial(cls, coeffs: Mapping[Exponent, complex], name: str = "",
                   real: bool | None = None) -> "FibreSymbol":
        """Homogeneous polynomial; every exponent must have ``a0+a1 = b0+b1``.

        Terms of lower bidegree are lifted with ``(|z0|^2+|z1|^2)^k = 1``.
        """
        clean = {tuple(int(e) for e in k): complex(v) for k, v in coeffs.items() if v != 0}
        for a0, a1, b0, b1 in clean:
            if a0 + a1 != b0 + b1 or min(a0, a1, b0, b1) < 0:
                raise ValueError(f"exponent {(a0, a1, b0, b1)} is not of bidegree (n, n)")
        n = max((k[0] + k[1] for k in clean), default=0)
        out: dict[Exponent, complex] = {}
        for key, c in clean.items():
            for lifted, m in _lift(key, n - key[0] - key[1]).items():
                out[lifted] = out.get(lifted, 0) + c * m
        out = {k: v for k, v in out.items() if v != 0}
        if real is None:
            real = all(abs(out.get((k[2], k[3], k[0], k[1]), 0) - np.conj(v)) < 1e-15 * (1 + abs(v))
                       for k, v in out.items())
        return cls("polynomial", n, real, coeffs=out, name=name)

    @classmethod
    def from_affine(cls, coeffs: Mapping[tuple[int, int, int], complex], name: str = "",
                    real: bool | None = None) -> "FibreSymbol":
        """Symbol ``sum c * w^a conj(w)^b (1+|w|^2)^(-c)`` with ``a, b <= c``."""
        hom = {}
        for (a, b, c), v in coeffs.items():
            if a > c or b > c or min(a, b) < 0:
                raise ValueError(f"affine monomial {(a, b, c)} is not bounded on CP^1")
            key = (c - a, a, c - b, b)
            hom[key] = hom.get(key, 0) + v
        return cls.polynomial(hom, name=name, real=real)

    @classmethod
    def constant(cls, value: complex = 1.0) -> "FibreSymbol":
        return cls.polynomial({(0, 0, 0, 0): value}, name=f"const({value})")

    @classmethod
    def bloch(cls, axis: int) -> "FibreSymbol":
        """Coordinate ``x_axis`` of the Bloch vector (axis 0, 1 or 2)."""
        if axis == 0:
            c = {(1, 0, 0, 1): 1.0, (0, 1, 1, 0): 1.0}
        elif axis == 1:
            c = {(1, 0, 0, 1): 1j, (0, 1, 1, 0): -1j}
        elif axis == 2:
            c = {(1, 0, 1, 0): 1.0, (0, 1, 0, 1): -1.0}
        else:
            raise ValueError("axis must be 0, 1 or 2")
        return cls.polynomial(c, name=f"x{axis + 1}", real=True)

    @classmethod
    def sampled(cls, func: Callable[[np.ndarray], np.ndarray], degree: int,
                real: bool = True, name: str = "") -> "FibreSymbol":
        return cls("sampled", degree, real, func=func, name=name)

    # algebra --------------------------------------------------------------

    def _require_poly(self):
        if self.kind != "polynomial":
            raise TypeError("operation needs a polynomial symbol")

    def __mul__(self, other: "FibreSymbol") -> "FibreSymbol":
        if isinstance(other, (int, float, complex)):
            if self.kind == "polynomial":
                return FibreSymbol.polynomial({k: v * other for k, v in self.coeffs.items()})
            f = self.func
            return FibreSymbol.sampled(lambda z: other * f(z), self.degree,
                                       real=self.real and complex(other).imag == 0)
        if self.kind == "polynomial" and other.kind == "polynomial":
            out: dict[Exponent, complex] = {}
            for k1, v1 in self.coeffs.items():
                for k2, v2 in other.coeffs.items():
                    k = tuple(a + b for a, b in zip(k1, k2))
                    out[k] = out.get(k, 0) + v1 * v2
            return FibreSymbol.polynomial(out)
        f, g = self.func_or_eval(), other.func_or_eval()
        return FibreSymbol.sampled(lambda z: f(z) * g(z), self.degree + other.degree,
                                   real=self.real and other.real)

    __rmul__ = __mul__

    def __add__(self, other: "FibreSymbol") -> "FibreSymbol":
        if self.kind == "polynomial" and other.kind == "polynomial":
            n = max(self.degree, other.degree)
            out: dict[Exponent, complex] = {}
            for sym in (self, other):
                for key, c in sym.coeffs.items():
                    for lifted, m in _lift(key, n - key[0] - key[1]).items():
                        out[lifted] = out.get(lifted, 0) + c * m
            return FibreSymbol.polynomial(out)
        f, g = self.func_or_eval(), other.func_or_eval()
        return FibreSymbol.sampled(lambda z: f(z) + g(z), max(self.degree, other.degree),
                                   real=self.real and other.real)

    def conj(self) -> "FibreSymbol":
        if self.kind == "polynomial":
            return FibreSymbol.polynomial(
                {(k[2], k[3], k[0], k[1]): np.conj(v) for k, v in self.coeffs.items()})
        f = self.func
        return FibreSymbol.sampled(lambda z: np.conj(f(z)), self.degree, real=self.real)

    def compose(self, g: GroupElement) -> "FibreSymbol":
        """The symbol ``z -> H(g z)``."""
        m = g.entries
        if self.kind == "sampled":
            f = self.func
            return FibreSymbol.sampled(lambda z: f(np.einsum("ij,...j->...i", m, z)),
                                       self.degree, real=self.real)
        # (g z)_i = m_i0 z0 + m_i1 z1 as linear forms; expand each monomial.
        lin = [{(1, 0, 0, 0): m[i, 0], (0, 1, 0, 0): m[i, 1]} for i in range(2)]
        lin_bar = [{(0, 0, 1, 0): np.conj(m[i, 0]), (0, 0, 0, 1): np.conj(m[i, 1])}
                   for i in range(2)]
        out: dict[Exponent, complex] = {}
        for (a0, a1, b0, b1), c in self.coeffs.items():
            term = {(0, 0, 0, 0): c}
            for poly, e in ((lin[0], a0), (lin[1], a1), (lin_bar[0], b0), (lin_bar[1], b1)):
                for _ in range(e):
                    term = _poly_mul(term, poly)
            for k, v in term.items():
                out[k] = out.get(k, 0) + v
        return FibreSymbol.polynomial(out, real=self.real)

    # evaluation -----------------------------------------------------------

    def __call__(self, z: np.ndarray) -> np.ndarray:
        """Evaluate at unit vectors ``z`` (shape ``(..., 2)``)."""
        z = np.asarray(z, dtype=complex)
        if self.kind == "sampled":
            return np.asarray(self.func(z))
        z0, z1 = z[..., 0], z[..., 1]
        out = np.zeros(z.shape[:-1], dtype=complex)
        for (a0, a1, b0, b1), c in self.coeffs.items():
            out = out + c * z0 ** a0 * z1 ** a1 * np.conj(z0) ** b0 * np.conj(z1) ** b1
        return out.real if self.real else out

    def func_or_eval(self) -> Callable[[np.ndarray], np.ndarray]:
        return self.func if self.kind == "sampled" else self.__call__

    def sup_estimate(self, n: int = 200) -> float:
        """Sup norm estimated on a product mesh of ``n x 2n`` points."""
        t = np.linspace(0, 1, n)
        phi = np.linspace(0, 2 * np.pi, 2 * n, endpoint=False)
        T, P = np.meshgrid(t, phi, indexing="ij")
        z = np.stack([np.sqrt(1 - T), np.sqrt(T) * np.exp(1j * P)], axis=-1)
        return float(np.abs(self(z)).max())


def _lift(key: Exponent, k: int) -> dict[Exponent, float]:
    """Multiply a monomial by ``(|z0|^2 + |z1|^2)^k``."""
    a0, a1, b0, b1 = key
    return {(a0 + i, a1 + k - i, b0 + i, b1 + k - i): float(math.comb(k, i)) for i in range(k + 1)}


def _poly_mul(p: Mapping[Exponent, complex], q: Mapping[Exponent, complex]) -> dict[Exponent, complex]:
    out: dict[Exponent, complex] = {}
    for k1, v1 in p.items():
        for k2, v2 in q.items():
            k = tuple(a + b for a, b in zip(k1, k2))
            out[k] = out.get(k, 0) + v1 * v2
    return out


@dataclass(frozen=True)
class ToeplitzOperator:
    """Matrix of ``T_{H,p}`` in the normalized monomial basis."""

    p: int
    entries: np.ndarray
    symbol: FibreSymbol | None = None

    def __post_init__(self):
        m = np.asarray(self.entries)
        if self.symbol is not None and self.symbol.real:
            defect = np.abs(m - m.conj().T).max()
            if defect > 1e-11:
                raise ValueError(f"real symbol gave a non-Hermitian matrix ({defect:.2e})")
        m.setflags(write=False)
        object.__setattr__(self, "entries", m)

    def norm(self) -> float:
        return float(np.linalg.norm(self.entries, 2))

    def normalized_trace(self) -> complex:
        return complex(np.trace(self.entries)) / (self.p + 1)


def fs_integral(H: FibreSymbol, rule: QuadratureRule | None = None) -> complex:
    """Integral of ``H`` against the Fubini-Study measure of total mass one.

    Polynomial symbols are integrated exactly; sampled ones by ``rule``
    (default: a rule exact to the declared degree).
    """
    if H.kind == "polynomial":
        total = 0j
        for (a0, a1, b0, b1), c in H.coeffs.items():
            if a0 == b0 and a1 == b1:
                total += c / ((a0 + a1 + 1) * math.comb(a0 + a1, a1))
        return total
    if rule is None:
        rule = QuadratureRule.build(max(H.degree, 64))
    elif rule.degree < H.degree:
        raise QuadratureError(
            f"rule of degree {rule.degree} cannot integrate a degree-{H.degree} symbol")
    return rule.integrate(H(rule.points))


def basis_values(p: int, z: np.ndarray) -> np.ndarray:
    """Values ``e_j(z) = c_j z0^(p-j) z1^j`` at unit vectors, shape ``(..., p+1)``."""
    z = np.asarray(z, dtype=complex)
    j = np.arange(p + 1)
    log_c = 0.5 * (np.log(p + 1) + _log_comb(p, j))
    z0, z1 = z[..., 0:1], z[..., 1:2]
    with np.errstate(divide="ignore", invalid="ignore"):
        mod = np.exp(log_c + (p - j) * np.log(np.abs(z0)) + j * np.log(np.abs(z1)))
    mod = np.nan_to_num(mod, nan=0.0)
    # 0^0 = 1 at the poles
    mod = np.where((np.abs(z0) == 0) & (j == p), np.exp(log_c), mod)
    mod = np.where((np.abs(z1) == 0) & (j == 0), np.exp(log_c), mod)
    ph0 = np.exp(1j * np.angle(z0))
    ph1 = np.exp(1j * np.angle(z1))
    return mod * ph0 ** (p - j) * ph1 ** j


def section_values(coeffs: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Evaluate ``s(z) = sum_j coeffs[..., j] e_j(z)``; broadcasting over leading axes."""
    coeffs = np.asarray(coeffs)
    p = coeffs.shape[-1] - 1
    return np.sum(coeffs * basis_values(p, z), axis=-1)


def toeplitz_matrix(H: FibreSymbol, p: int, rule: QuadratureRule | None = None) -> ToeplitzOperator:
    """Berezin-Toeplitz matrix ``T[j, k] = c_j c_k int H z^{e_k} conj(z)^{e_j}``.

    Here ``e_k = (p-k, k)``. Polynomial symbols use the closed-form
    integrals; sampled ones use ``rule``, whose degree must reach
    ``p + H.degree`` (default rule: degree ``max(p + H.degree, 64)``).
    """
    if p < 0:
        raise ValueError("p must be nonnegative")
    if H.kind == "polynomial":
        T = np.zeros((p + 1, p + 1), dtype=complex)
        idx = np.arange(p + 1)
        log_cp = _log_comb(p, idx)
        n = H.degree
        for (a0, a1, b0, b1), c in H.coeffs.items():
            # need a1 + k = b1 + j
            shift = a1 - b1
            k = idx[(idx + shift >= 0) & (idx + shift <= p)]
            j = k + shift
            m = a1 + k
            log_val = (np.log(p + 1) + 0.5 * (log_cp[j] + log_cp[k])
                       - np.log(n + p + 1) - _log_comb(n + p, m))
            T[j, k] += c * np.exp(log_val)
        return ToeplitzOperator(p, T, H)
    need = p + H.degree
    if rule is None:
        rule = QuadratureRule.build(max(need, 64))
    elif rule.degree < need:
        raise QuadratureError(
            f"quadrature of degree {rule.degree} too coarse for p={p} and symbol degree "
            f"{H.degree} (need {need})")
    B = basis_values(p, rule.points)
    vals = H(rule.points) * rule.weights
    T = B.conj().T @ (vals[:, None] * B)
    return ToeplitzOperator(p, T, H)


def bergman_diagonal(p: int, z: np.ndarray | None = None) -> float:
    """Bergman kernel on the diagonal, ``sum_j |e_j(z)|^2``; equals ``p + 1``."""
    if z is None:
        z = np.array([1.0, 0.0])
    return float(np.sum(np.abs(basis_values(p, np.asarray(z))) ** 2))


def toeplitz_kernel_diagonal(T: ToeplitzOperator, z: np.ndarray) -> np.ndarray:
    """Diagonal ``K(z, z) = sum_{jk} T[j,k] e_j(z) conj(e_k(z))`` of the Toeplitz kernel."""
    B = basis_values(T.p, z)
    return np.einsum("...j,jk,...k->...", B, T.entries, B.conj())


def product_remainder(H: FibreSymbol, H2: FibreSymbol, p: int) -> float:
    """Operator norm of ``T_H T_H2 - T_{H H2}``."""
    A = toeplitz_matrix(H, p).entries
    B = toeplitz_matrix(H2, p).entries
    C = toeplitz_matrix(H * H2, p).entries
    return float(np.linalg.norm(A @ B - C, 2))


def stirling_terms(p: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-index maxima ``max_{|z0|<=1/2} c_j |z0|^(p-j) |z1|^j`` for ``p/3 <= j <= 2p/3``.

    For such ``j`` the one-variable maximizer has ``|z0|^2 = (p-j)/p >= 1/3``,
    so the function increases on ``|z0| <= 1/2`` and peaks on the boundary.
    """
    j = np.arange(math.ceil(p / 3), math.floor(2 * p / 3) + 1)
    if np.any((p - j) / p < 0.25):
        raise AssertionError("interior maximum inside |z0| <= 1/2")
    log_c = 0.5 * (np.log(p + 1) + _log_comb(p, j))
    log_val = log_c + (p - j) * np.log(0.5) + 0.5 * j * np.log(0.75)
    return j, np.exp(log_val)


def stirling_concentration(p: int) -> float:
    """Sup of ``c_j |z0|^(p-j) |z1|^j`` over ``p/3 <= j <= 2p/3`` and ``|z0| <= 1/2``."""
    if p < 3:
        raise ValueError("p must be at least 3")
    _, vals = stirling_terms(p)
    return float(vals.max())


def stirling_rate_fit(ps) -> tuple[float, float, float]:
    """Least-squares fit ``log S(p) = a p + b``; returns ``(a, b, R^2)``."""
    ps = np.asarray(list(ps), dtype=float)
    y = np.log([stirling_concentration(int(p)) for p in ps])
    a, b = np.polyfit(ps, y, 1)
    resid = y - (a * ps + b)
    r2 = 1 - resid @ resid / np.sum((y - y.mean()) ** 2)
    return float(a), float(b), float(r2)
