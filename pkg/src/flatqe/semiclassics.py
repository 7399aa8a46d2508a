"""Semiclassical operators, matrix elements and variance statistics.

Torus operators live in the plane-wave basis of a frequency box
``m in [-N/2, N/2)^2``; in the weight-``j`` sector the basis functions are
``exp(2 pi i (m + beta_j) . x / L)``, which is the flat-holonomy gauge.
With ``Op_h(xi_i) = h D_{x_i}`` the Weyl quantization of
``A = sum_k a_k(xi) exp(2 pi i k . x / L)`` has the exact banded form

    <e_m, Op_h(A) e_n> = a_{m-n}(2 pi h ((m + n)/2 + beta) / L).

Curved-base (octagon) observables are position symbols ``sum f_i(x) H_i(z)``
whose matrix elements are FEM pairings with ``M_f (x) T_{H,p}``; momentum
cut-offs enter through the spectral multiplier ``phi(h^2 Delta)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .base_geometry import TorusGeometry, ergodic_mean
from .bundle_spectra import BundleSpec, DiscreteLaplacian, EigenData, p1_matrices, torus_betas
from .fibre_quantization import QuadratureRule, section_values, toeplitz_matrix
from .symbols import MixedSymbol

SCHEMA_VERSION = 1
# defects below this multiple of the operator scale are rounding noise
MEANINGFUL_REL = 1e-12

MomentumFn = Callable[[np.ndarray], np.ndarray]


# ---------------------------------------------------------------------------
# Cut-off functions


def _smooth_step(t: np.ndarray) -> np.ndarray:
    """C-infinity step: 0 for t <= 0, 1 for t >= 1."""
    t = np.clip(np.asarray(t, dtype=float), 0.0, 1.0)
    with np.errstate(divide="ignore", over="ignore"):
        a = np.where(t > 0, np.exp(-1.0 / np.where(t > 0, t, 1.0)), 0.0)
        b = np.where(t < 1, np.exp(-1.0 / np.where(t < 1, 1 - t, 1.0)), 0.0)
    return a / (a + b)


@dataclass(frozen=True)
class Bump:
    """Smooth compactly supported cut-off on ``(lo, hi)``.

    Equal to one on ``plateau`` (default: the middle third) with smooth
    transitions; ``support`` is the closed interval outside which it vanishes.
    """

    lo: float
    hi: float
    plateau: tuple[float, float] | None = None

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError("need lo < hi")
        c, d = self.plateau or (self.lo + (self.hi - self.lo) / 3, self.hi - (self.hi - self.lo) / 3)
        if not self.lo <= c <= d <= self.hi:
            raise ValueError("plateau must lie inside (lo, hi)")
        object.__setattr__(self, "plateau", (float(c), float(d)))

    @property
    def support(self) -> tuple[float, float]:
        return (self.lo, self.hi)

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        c, d = self.plateau
        up = _smooth_step((s - self.lo) / (c - self.lo)) if c > self.lo else (s >= self.lo) * 1.0
        down = _smooth_step((self.hi - s) / (self.hi - d)) if self.hi > d else (s <= self.hi) * 1.0
        return up * down

    def integral(self, n: int = 4001) -> float:
        """``int_0^inf phi(s) ds`` (the bump is smooth, Simpson is spectrally fine)."""
        from scipy.integrate import simpson
        s = np.linspace(max(self.lo, 0.0), self.hi, n)
        return float(simpson(self(s), x=s))


# ---------------------------------------------------------------------------
# Torus Weyl quantization


def box_modes(n_grid: int) -> np.ndarray:
    """Integer frequencies ``[-N/2, N/2)^2`` in row-major order, shape ``(N^2, 2)``."""
    r = np.arange(-(n_grid // 2), n_grid - n_grid // 2)
    A, B = np.meshgrid(r, r, indexing="ij")
    return np.column_stack([A.ravel(), B.ravel()])


def _box_index(m: np.ndarray, n_grid: int) -> np.ndarray:
    off = n_grid // 2
    i = m + off
    ok = np.all((i >= 0) & (i < n_grid), axis=-1)
    return np.where(ok, i[..., 0] * n_grid + i[..., 1], -1)


@dataclass
class WeylOperator:
    """Weyl quantization on the twisted torus, one sparse block per weight sector.

    ``blocks[j]`` acts on the plane waves ``e_{m + beta_j}``; sectors with
    equal quasi-momenta share a block.
    """

    h: float
    n_grid: int
    betas: np.ndarray
    lengths: tuple[float, float]
    blocks: list
    sector_block: np.ndarray

    @property
    def p(self) -> int:
        return len(self.betas) - 1

    @property
    def shape(self) -> tuple[int, int]:
        n = self.n_grid ** 2 * len(self.betas)
        return (n, n)

    def block(self, j: int) -> sp.csr_matrix:
        return self.blocks[self.sector_block[j]]

    def _combine(self, other: "WeylOperator", fn) -> "WeylOperator":
        if self.n_grid != other.n_grid or not np.allclose(self.betas, other.betas):
            raise ValueError("operators live on different spaces")
        blocks = [fn(self.blocks[b], other.blocks[b]) for b in range(len(self.blocks))]
        return WeylOperator(self.h, self.n_grid, self.betas, self.lengths, blocks,
                            self.sector_block)

    def __matmul__(self, other: "WeylOperator") -> "WeylOperator":
        return self._combine(other, lambda a, b: (a @ b).tocsr())

    def __sub__(self, other: "WeylOperator") -> "WeylOperator":
        return self._combine(other, lambda a, b: (a - b).tocsr())

    def __add__(self, other: "WeylOperator") -> "WeylOperator":
        return self._combine(other, lambda a, b: (a + b).tocsr())

    def scale(self, c: complex) -> "WeylOperator":
        return WeylOperator(self.h, self.n_grid, self.betas, self.lengths,
                            [(c * b).tocsr() for b in self.blocks], self.sector_block)

    def adjoint(self) -> "WeylOperator":
        return WeylOperator(self.h, self.n_grid, self.betas, self.lengths,
                            [b.conj().T.tocsr() for b in self.blocks], self.sector_block)

    def conjugate_diagonal(self, phases: Sequence[np.ndarray]) -> "WeylOperator":
        """``D^* Op D`` for diagonal unitaries ``D`` given per block."""
        out = []
        for b, d in zip(self.blocks, phases):
            D = sp.diags(d)
            out.append((D.conj() @ b @ D).tocsr())
        return WeylOperator(self.h, self.n_grid, self.betas, self.lengths, out,
                            self.sector_block)

    def norm(self) -> float:
        """Spectral norm (maximum over sector blocks)."""
        return max(operator_norm(b) for b in self.blocks)

    def trace(self) -> complex:
        return complex(sum(self.block(j).diagonal().sum() for j in range(len(self.betas))))

    def hermitian_defect(self) -> float:
        return max(float(abs(b - b.conj().T).max()) if b.nnz else 0.0 for b in self.blocks)

    def to_grid(self, j: int = 0) -> np.ndarray:
        """Dense matrix of sector ``j`` on nodal values at ``x_a = a L / N``."""
        N = self.n_grid
        if N > 64:
            raise ValueError("dense grid form is limited to N_g <= 64")
        m = box_modes(N) + self.betas[j]
        x = box_modes(N) % N / N  # any enumeration of the grid works
        F = np.exp(2j * np.pi * (x @ m.T)) / N
        return F @ self.block(j).toarray() @ F.conj().T

    def apply_sector(self, j: int, coeffs: np.ndarray) -> np.ndarray:
        return self.block(j) @ coeffs


def operator_norm(A) -> float:
    """Spectral norm of a sparse or dense matrix."""
    if sp.issparse(A):
        if A.nnz == 0:
            return 0.0
        if A.shape[0] <= 256:
            return float(np.linalg.norm(A.toarray(), 2))
        amax = float(abs(A).max())
        if amax == 0.0:
            return 0.0
        # scale first so eigsh sees O(1) numbers
        B = A / amax
        G = (B.conj().T @ B).tocsr()
        val = spla.eigsh(G, k=1, which="LM", tol=1e-12, return_eigenvectors=False,
                         v0=np.ones(G.shape[0]))
        return float(math.sqrt(max(val[0].real, 0.0)) * amax)
    return float(np.linalg.norm(np.asarray(A), 2))


def _torus_frame(spec: BundleSpec | None, p: int | None, lengths):
    if spec is None:
        p = 0 if p is None else p
        return np.zeros((p + 1, 2)), tuple(map(float, lengths))
    geom = spec.geometry
    if not isinstance(geom, TorusGeometry):
        raise TypeError("torus operators need a TorusGeometry")
    theta = []
    for g in spec.rep.images:
        e = g.entries
        if abs(e[0, 1]) > 1e-14 or abs(e[1, 0]) > 1e-14:
            raise ValueError("non-diagonal holonomy is not supported by the plane-wave gauge")
        theta.append(-2 * np.angle(e[0, 0]) / np.pi)
    return torus_betas(theta, spec.p), tuple(map(float, geom.lengths))


def weyl_quantize_torus(A: MixedSymbol, h: float, n_grid: int, spec: BundleSpec | None = None,
                        p: int | None = None, lengths=(1.0, 1.0)) -> WeylOperator:
    """Weyl quantization of a scalar torus symbol on the twisted bundle of ``spec``.

    Parameters
    ----------
    A : MixedSymbol
        ``torus_scalar`` symbol; it acts identically on every weight sector.
    h : float
        Semiclassical parameter in ``(0, 1]``.
    n_grid : int
        Box size ``N_g`` per dimension; must satisfy ``N_g >= 4/h``.
    spec : BundleSpec, optional
        Twisted torus; without it the trivial bundle of rank ``p+1`` is used.
    """
    if A.kind != "torus_scalar":
        raise ValueError("weyl_quantize_torus needs a torus_scalar symbol")
    if not 0 < h <= 1:
        raise ValueError("h must lie in (0, 1]")
    if n_grid < 4 / h - 1e-9:
        raise ValueError(f"n_grid={n_grid} too small for h={h}; need at least {4 / h:g}")
    betas, L = _torus_frame(spec, p, lengths)
    L = np.asarray(L)
    modes = box_modes(n_grid)
    uniq, sector_block = np.unique(np.round(betas, 14), axis=0, return_inverse=True)
    blocks = []
    size = n_grid ** 2
    for beta in uniq:
        rows, cols, vals = [], [], []
        for k, a in A.fourier.items():
            n = modes - np.asarray(k)
            col = _box_index(n, n_grid)
            ok = col >= 0
            m_ok, n_ok = modes[ok], n[ok]
            xi = 2 * np.pi * h * ((m_ok + n_ok) / 2 + beta) / L
            rows.append(np.flatnonzero(ok))
            cols.append(col[ok])
            vals.append(np.asarray(a(xi), dtype=complex) * np.ones(len(xi)))
        B = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(size, size))
        B.sum_duplicates()
        blocks.append(B)
    return WeylOperator(float(h), int(n_grid), np.asarray(betas, float), tuple(L), blocks,
                        np.asarray(sector_block).ravel())


def box_eigenvalues(op: WeylOperator) -> list[np.ndarray]:
    """Laplace eigenvalues ``4 pi^2 |(m + beta)/L|^2`` of the box plane waves, per block."""
    modes = box_modes(op.n_grid)
    L = np.asarray(op.lengths)
    out = []
    uniq = np.unique(np.round(op.betas, 14), axis=0)
    for beta in uniq:
        k = (modes + beta) / L
        out.append(4 * np.pi ** 2 * np.sum(k ** 2, axis=1))
    return out


# --- symbol calculus for torus symbols --------------------------------------


def _grad_xi(a: MomentumFn, xi: np.ndarray, step: float = 1e-3) -> np.ndarray:
    """Fourth-order central differences in each ``xi`` component."""
    out = []
    for i in range(2):
        e = np.zeros(2)
        e[i] = step
        d = (-a(xi + 2 * e) + 8 * a(xi + e) - 8 * a(xi - e) + a(xi - 2 * e)) / (12 * step)
        out.append(np.asarray(d))
    return np.stack(out, -1)


def torus_product(A: MixedSymbol, B: MixedSymbol) -> MixedSymbol:
    """Pointwise product of two torus symbols."""
    terms: dict[tuple[int, int], list] = {}
    for k, a in A.fourier.items():
        for l, b in B.fourier.items():
            terms.setdefault((k[0] + l[0], k[1] + l[1]), []).append((a, b))

    def make(pairs):
        return lambda xi: sum(a(xi) * b(xi) for a, b in pairs)

    return MixedSymbol.torus({k: make(v) for k, v in terms.items()},
                             name=f"({A.name})({B.name})", real=A.real and B.real)


def torus_first_order(A: MixedSymbol, B: MixedSymbol, lengths=(1.0, 1.0)) -> MixedSymbol:
    """First-order Weyl product term ``A *_1 B = {A, B} / (2i)``.

    ``{A, B} = d_xi A . d_x B - d_x A . d_xi B``.
    """
    L = np.asarray(lengths, dtype=float)
    terms: dict[tuple[int, int], list] = {}
    for k, a in A.fourier.items():
        for l, b in B.fourier.items():
            terms.setdefault((k[0] + l[0], k[1] + l[1]), []).append((k, a, l, b))

    def make(items):
        def f(xi):
            xi = np.asarray(xi, dtype=float)
            tot = 0
            for k, a, l, b in items:
                kx = 2j * np.pi * np.asarray(k) / L
                lx = 2j * np.pi * np.asarray(l) / L
                ga, gb = _grad_xi(a, xi), _grad_xi(b, xi)
                tot = tot + (ga @ lx) * b(xi) - a(xi) * (gb @ kx)
            return tot / 2j
        return f

    return MixedSymbol.torus({k: make(v) for k, v in terms.items()},
                             name=f"{A.name}*1{B.name}", real=False)


def transported_symbol(A: MixedSymbol, t: float, lengths=(1.0, 1.0)) -> MixedSymbol:
    """``A(x + t xi, xi)``: free transport of a torus symbol."""
    L = np.asarray(lengths, dtype=float)

    def make(k, a):
        kk = np.asarray(k) / L
        return lambda xi: a(xi) * np.exp(2j * np.pi * t * (np.asarray(xi) @ kk))

    return MixedSymbol.torus({k: make(k, a) for k, a in A.fourier.items()},
                             name=f"psi_{t}({A.name})", real=A.real)


def kohn_nirenberg_estimate(A: MixedSymbol, order: int = 4, n: int = 24,
                            xi_max: float = 6.0, step: float = 1e-2) -> float:
    """Finite-difference estimate of ``max_{|a|+|b| <= order} sup |<xi>^|b| d_x^a d_xi^b A|``.

    Only ``torus_scalar`` symbols; x-derivatives are exact on Fourier modes.
    """
    if A.kind != "torus_scalar":
        raise ValueError("only torus symbols carry momentum dependence")
    g = np.linspace(-xi_max, xi_max, n)
    XI = np.stack(np.meshgrid(g, g, indexing="ij"), -1).reshape(-1, 2)
    weight = np.sqrt(1 + np.sum(XI ** 2, axis=1))
    best = 0.0
    for bx in range(order + 1):
        for by in range(order + 1 - bx):
            ax_budget = order - bx - by
            sup_mode = 0.0
            for k, a in A.fourier.items():
                # d_xi^b by nested central differences
                def deriv(xi, bx=bx, by=by, a=a):
                    out = 0
                    for i in range(bx + 1):
                        for j in range(by + 1):
                            c = ((-1) ** (i + j) * math.comb(bx, i) * math.comb(by, j))
                            sh = np.array([(bx / 2 - i) * step, (by / 2 - j) * step])
                            out = out + c * a(xi + sh)
                    return out / step ** (bx + by)
                kmax = (2 * np.pi * np.abs(k)).max() if np.any(k) else 0.0
                xfac = max(1.0, kmax) ** ax_budget
                sup_mode += xfac * float(np.max(np.abs(deriv(XI)) * weight ** (bx + by)))
            best = max(best, sup_mode)
    return best


# ---------------------------------------------------------------------------
# Functional calculus


@dataclass
class SpectralMultiplier:
    """``phi(h^2 Delta)`` as a diagonal in the computed eigenbasis."""

    eigen: EigenData
    h: float
    values: np.ndarray

    def apply(self, coeffs: np.ndarray) -> np.ndarray:
        """Act on eigenbasis coefficients (first axis indexes eigenpairs)."""
        c = np.asarray(coeffs)
        return self.values.reshape((-1,) + (1,) * (c.ndim - 1)) * c

    def matrix(self) -> np.ndarray:
        return np.diag(self.values)

    def trace(self) -> float:
        return float(self.values.sum())


def eigendata_range(eig: EigenData) -> float:
    """Largest ``lambda`` below which ``eig`` holds the complete spectrum."""
    meta = eig.metadata
    if "complete_to" in meta:
        return float(meta["complete_to"])
    if "complete_below" in eig.certificate:
        return float(eig.certificate["complete_below"])
    return float(eig.eigenvalues[-1])


def functional_calculus(eig: EigenData, phi: Bump, h: float) -> SpectralMultiplier:
    """``phi(h^2 Delta)`` restricted to the span of ``eig``.

    Raises
    ------
    ValueError
        If ``phi`` is not supported inside the computed part of the spectrum.
    """
    top = phi.support[1] / h ** 2
    if top > eigendata_range(eig) * (1 + 1e-12):
        raise ValueError(f"support of phi reaches lambda={top:.6g} beyond the eigendata "
                         f"range {eigendata_range(eig):.6g}")
    return SpectralMultiplier(eig, float(h), np.asarray(phi(h ** 2 * eig.eigenvalues)))


def _box_lookup(eig: EigenData, n_grid: int, betas: np.ndarray):
    """Block and box index of each closed-form torus mode."""
    uniq, inv = np.unique(np.round(betas, 14), axis=0, return_inverse=True)
    inv = np.asarray(inv).ravel()
    blk = inv[eig.modes[:, 2]]
    idx = _box_index(eig.modes[:, :2], n_grid)
    return blk, idx


def functional_calculus_defect(spec: BundleSpec, phi: Bump, h: float,
                               n_grid: int | None = None) -> float:
    """``|| Op_h(phi(|xi|^2)) - phi(h^2 Delta) ||`` on the twisted torus.

    ``phi(h^2 Delta)`` comes from the closed-form eigendata, embedded in the
    same plane-wave box as the Weyl operator.
    """
    from .bundle_spectra import torus_spectrum_exact

    n_grid = n_grid or int(math.ceil(4 / h))
    sym = MixedSymbol.torus({(0, 0): lambda xi: phi(np.sum(np.asarray(xi) ** 2, axis=-1))},
                            name="phi(|xi|^2)")
    op = weyl_quantize_torus(sym, h, n_grid, spec=spec)
    lam_top = phi.support[1] / h ** 2
    count = int(spec.dim * spec.area * lam_top / (4 * np.pi) * 1.3) + 64
    eig = torus_spectrum_exact(spec, count)
    while eig.eigenvalues[-1] <= lam_top:
        count *= 2
        eig = torus_spectrum_exact(spec, count)
    fc = functional_calculus(eig, phi, h)
    blk, idx = _box_lookup(eig, n_grid, op.betas)
    if np.any((idx < 0) & (fc.values != 0)):
        raise ValueError("box too small for the support of phi")
    diag = [np.zeros(n_grid ** 2, dtype=complex) for _ in op.blocks]
    for b, i, v in zip(blk, idx, fc.values):
        if i >= 0:
            diag[b][i] += v
    return max(operator_norm((B - sp.diags(d)).tocsr()) for B, d in zip(op.blocks, diag))


# ---------------------------------------------------------------------------
# Egorov, product formula, traces (torus)


def propagator_phases(op: WeylOperator, t: float) -> list[np.ndarray]:
    """Diagonal of ``U_{t,h} = exp(-i t h Delta / 2)`` on each block."""
    return [np.exp(-0.5j * t * op.h * lam) for lam in box_eigenvalues(op)]


@dataclass(frozen=True)
class DefectResult:
    defect: float
    scale: float
    h: float

    @property
    def meaningful(self) -> bool:
        """False when the defect is indistinguishable from rounding."""
        return self.defect > MEANINGFUL_REL * max(self.scale, 1.0)


def egorov_defect(A: MixedSymbol, t: float, h: float, spec: BundleSpec | None = None,
                  n_grid: int | None = None) -> DefectResult:
    """``|| U_{-t} Op_h(A) U_t - Op_h(A(x + t xi, xi)) ||`` on the torus.

    The propagator is applied in the exact plane-wave eigenbasis.
    """
    if not 0 <= t <= 10:
        raise ValueError("t must lie in [0, 10]")
    n_grid = n_grid or int(math.ceil(4 / h))
    lengths = tuple(spec.geometry.lengths) if spec is not None else (1.0, 1.0)
    op = weyl_quantize_torus(A, h, n_grid, spec=spec)
    lhs = op.conjugate_diagonal(propagator_phases(op, t))
    rhs = weyl_quantize_torus(transported_symbol(A, t, lengths), h, n_grid, spec=spec)
    return DefectResult((lhs - rhs).norm(), op.norm(), h)


def product_formula_defect(A: MixedSymbol, B: MixedSymbol, h: float,
                           n_grid: int | None = None) -> float:
    """``|| Op(A) Op(B) - Op(AB) - h Op(A *_1 B) ||`` on the trivial torus bundle."""
    n_grid = n_grid or int(math.ceil(4 / h))
    oa = weyl_quantize_torus(A, h, n_grid)
    ob = weyl_quantize_torus(B, h, n_grid)
    oab = weyl_quantize_torus(torus_product(A, B), h, n_grid)
    o1 = weyl_quantize_torus(torus_first_order(A, B), h, n_grid)
    return (oa @ ob - oab - o1.scale(h)).norm()


def momentum_integral(a: MomentumFn, radius: float = 12.0, n: int = 801) -> complex:
    """``int_{R^2} a(xi) d xi`` for rapidly decaying ``a`` (tensor Simpson rule)."""
    from scipy.integrate import simpson
    g = np.linspace(-radius, radius, n)
    XI = np.stack(np.meshgrid(g, g, indexing="ij"), -1)
    vals = np.asarray(a(XI), dtype=complex)
    return complex(simpson(simpson(vals, x=g, axis=1), x=g))


def torus_trace_check(A: MixedSymbol, h: float, spec: BundleSpec | None = None,
                      n_grid: int | None = None) -> tuple[complex, complex]:
    """``(tr Op_h(A), (2 pi h)^-2 dim int int tr A)`` on the torus."""
    n_grid = n_grid or int(math.ceil(4 / h))
    op = weyl_quantize_torus(A, h, n_grid, spec=spec)
    dim = len(op.betas)
    area = float(np.prod(op.lengths))
    a0 = A.fourier.get((0, 0), lambda xi: 0 * xi[..., 0])
    pred = (2 * np.pi * h) ** -2 * dim * area * momentum_integral(a0)
    return op.trace(), pred


def local_weyl_torus(A: MixedSymbol, phi: Bump, h: float, spec: BundleSpec) -> tuple[complex, complex]:
    """``(tr phi(h^2 Delta) Op_h(A), (2 pi h)^-2 dim int int phi(|xi|^2) tr A)``.

    The trace is taken in the exact eigenbasis, where only the x-mean of
    ``A`` contributes.
    """
    from .bundle_spectra import torus_spectrum_exact

    lam_top = phi.support[1] / h ** 2
    count = int(spec.dim * spec.area * lam_top / (4 * np.pi) * 1.3) + 64
    eig = torus_spectrum_exact(spec, count)
    while eig.eigenvalues[-1] <= lam_top:
        count *= 2
        eig = torus_spectrum_exact(spec, count)
    betas, L = _torus_frame(spec, None, None)
    L = np.asarray(L)
    xi = 2 * np.pi * h * (eig.modes[:, :2] + betas[eig.modes[:, 2]]) / L
    a0 = A.fourier.get((0, 0))
    vals = phi(h ** 2 * eig.eigenvalues) * (a0(xi) if a0 is not None else 0)
    pred_fn = (lambda X: phi(np.sum(X ** 2, -1)) * a0(X)) if a0 is not None else (lambda X: 0 * X[..., 0])
    r = math.sqrt(phi.support[1]) + 0.5
    pred = (2 * np.pi * h) ** -2 * spec.dim * spec.area * momentum_integral(pred_fn, radius=r)
    return complex(np.sum(vals)), pred


def shell_concentration_check(eig: EigenData, B: MixedSymbol, h: float,
                              spec: BundleSpec, b: float = 4.0) -> float:
    """``max ||Op_{h_j}((|xi|^2 - 1) B) u_j||`` over ``h^-2 <= lambda_j <= b h^-2``.

    ``eig`` must be closed-form torus eigendata; ``h_j = lambda_j^{-1/2}``.
    The Weyl formula gives the image of a plane wave mode by mode.
    """
    if eig.modes is None:
        raise ValueError("shell check needs closed-form torus eigendata")
    betas, L = _torus_frame(spec, None, None)
    L = np.asarray(L)
    lam = eig.eigenvalues
    sel = np.flatnonzero((lam >= h ** -2) & (lam <= b * h ** -2))
    best = 0.0
    for i in sel:
        hj = lam[i] ** -0.5
        n = eig.modes[i, :2] + betas[eig.modes[i, 2]]
        tot = 0.0
        for k, a in B.fourier.items():
            xi = 2 * np.pi * hj * (n + np.asarray(k) / 2) / L
            tot += abs((np.sum(xi ** 2) - 1) * a(xi)) ** 2
        best = max(best, math.sqrt(tot))
    return best


# ---------------------------------------------------------------------------
# Matrix elements


def _torus_base_mean(f, lengths, n: int = 256) -> complex:
    g = (np.arange(n) + 0.5) / n
    X = np.stack(np.meshgrid(g * lengths[0], g * lengths[1], indexing="ij"), -1)
    return complex(np.mean(f(X)))


def mixed_pairing(eig: EigenData, sym: MixedSymbol, indices=None,
                  disc: DiscreteLaplacian | None = None, batch: int = 64) -> np.ndarray:
    """``int_X <T_{A(x, .), p} u_j(x), u_j(x)> dv`` for the selected eigensections.

    Closed-form torus data pair exactly (plane waves have constant modulus);
    FEM data use the weighted mass matrices ``M_f`` tensored with Toeplitz
    matrices, i.e. the same degree-5 quadrature as the mass matrix.
    """
    if sym.kind == "torus_scalar":
        raise ValueError("mixed_pairing takes position (or separable) symbols")
    idx = np.arange(len(eig)) if indices is None else np.asarray(indices)
    p = eig.p
    Ts = [toeplitz_matrix(H, p).entries for _, H in sym.terms]
    if eig.modes is not None:
        lengths = eig.metadata.get("lengths", (1.0, 1.0))
        out = np.zeros(len(idx), dtype=complex)
        j = eig.modes[idx, 2]
        for (f, _), T in zip(sym.terms, Ts):
            # |u|^2 = 1 / area, so the base integral is the mean of f
            out += _torus_base_mean(f, lengths) * T[j, j]
        return out
    if disc is None:
        raise ValueError("FEM eigendata need the DiscreteLaplacian for pairings")
    if disc.p != p:
        raise ValueError(f"symbol/eigendata mismatch: disc has p={disc.p}, eigendata p={p}")
    Ms = [p1_matrices(disc.mesh, weight=f)[1] for f, _ in sym.terms]
    out = np.zeros(len(idx), dtype=complex)
    for s in range(0, len(idx), batch):
        cols = idx[s:s + batch]
        U = disc.full_values(np.asarray(eig.vectors[:, cols]))  # (N, d, k)
        for Mf, T in zip(Ms, Ts):
            TU = np.einsum("ij,njk->nik", T, U)
            MTU = (Mf @ TU.reshape(len(U), -1)).reshape(TU.shape)
            out[s:s + len(cols)] += np.einsum("nik,nik->k", MTU, U.conj())
    return out


def pairing_direct(disc: DiscreteLaplacian, vec: np.ndarray, sym: MixedSymbol,
                   rule: QuadratureRule | None = None) -> complex:
    """``int_X int_{CP^1} A(x, z) |u(x)(z)|^2 omega_FS dv`` by direct quadrature.

    Uses the interpolated section at the triangle quadrature points and a
    fibre rule exact for ``|u(z)|^2 H(z)``.
    """
    from .bundle_spectra import QUAD7, QUAD7_W

    mesh = disc.mesh
    U = disc.full_values(vec)  # (N, d)
    p = disc.p
    deg = max(H.degree for _, H in sym.terms)
    rule = rule or QuadratureRule.build(p + deg + 2)
    P = mesh.nodes[mesh.triangles]
    x0, x1, x2 = P[:, 0], P[:, 1], P[:, 2]
    area = 0.5 * ((x1[:, 0] - x0[:, 0]) * (x2[:, 1] - x0[:, 1])
                  - (x2[:, 0] - x0[:, 0]) * (x1[:, 1] - x0[:, 1]))
    qp = np.einsum("qi,tid->tqd", QUAD7, P)
    uq = np.einsum("qi,tid->tqd", QUAD7, U[mesh.triangles])  # (T, 7, d)
    w = QUAD7_W[None, :] * area[:, None] * mesh.density(qp)
    sv = section_values(uq[:, :, None, :], rule.points[None, None, :, :])  # (T, 7, Q)
    dens = np.abs(sv) ** 2
    total = 0j
    for f, H in sym.terms:
        hz = np.asarray(H(rule.points))
        fib = np.einsum("tqk,k->tq", dens, rule.weights * hz)
        total += np.sum(w * f(qp) * fib)
    return total


def torus_scalar_elements(eig: EigenData, A: MixedSymbol) -> np.ndarray:
    """``<Op_{h_j}(A) u_j, u_j>`` with ``h_j = lambda_j^{-1/2}`` (closed-form torus data).

    Only the x-mean ``a_0`` contributes on plane waves, evaluated at the
    unit covector ``2 pi h_j (n + beta_j) / L``. Zero modes get ``nan``.
    """
    theta = eig.metadata["theta"]
    L = np.asarray(eig.metadata.get("lengths", (1.0, 1.0)))
    betas = torus_betas(theta, eig.p)
    lam = eig.eigenvalues
    with np.errstate(divide="ignore"):
        hj = np.where(lam > 0, lam, np.nan) ** -0.5
    xi = 2 * np.pi * hj[:, None] * (eig.modes[:, :2] + betas[eig.modes[:, 2]]) / L
    a0 = A.fourier.get((0, 0))
    return np.asarray(a0(xi), dtype=complex) if a0 is not None else np.zeros(len(lam), complex)


def torus_shell_mean(A: MixedSymbol, n: int = 4096) -> complex:
    """Phase-space mean over the unit circle bundle of a torus symbol."""
    a0 = A.fourier.get((0, 0))
    if a0 is None:
        return 0j
    th = 2 * np.pi * np.arange(n) / n
    return complex(np.mean(a0(np.stack([np.cos(th), np.sin(th)], -1))))


@dataclass
class PairingTable:
    """Matrix elements of a symbol battery on one eigendata batch."""

    p: int
    eigenvalues: np.ndarray
    values: np.ndarray  # (n_symbols, n_eigen)
    means: np.ndarray  # (n_symbols,)
    names: tuple[str, ...]
    metadata: dict = field(default_factory=dict)

    def deviations(self) -> np.ndarray:
        return np.abs(self.values - self.means[:, None])


def matrix_elements(eig: EigenData, symbols: Sequence[MixedSymbol], geom=None,
                    disc: DiscreteLaplacian | None = None, quad=None) -> PairingTable:
    """Pairings and ergodic means for a symbol battery.

    Separable symbols ``f phi(|xi|^2) H`` contribute ``phi(h_j^2 lambda_j) = phi(1)``
    times the position pairing.
    """
    vals, means = [], []
    for sym in symbols:
        if sym.kind == "torus_scalar":
            vals.append(torus_scalar_elements(eig, sym))
            means.append(torus_shell_mean(sym))
            continue
        v = mixed_pairing(eig, sym, disc=disc)
        if sym.kind == "separable":
            v = v * complex(sym.phi(np.array(1.0)))
        vals.append(v)
        if geom is None:
            raise ValueError("geometry needed for the ergodic mean")
        means.append(ergodic_mean(geom, sym, quad))
    return PairingTable(eig.p, np.asarray(eig.eigenvalues), np.array(vals),
                        np.array(means, dtype=complex), tuple(s.name for s in symbols),
                        {"complete_to": eigendata_range(eig)})


# ---------------------------------------------------------------------------
# Quantum variance


@dataclass
class VarianceReport:
    """Normalized windowed variance of matrix elements for one ``p`` and ``h``."""

    p: int
    h: float
    window: tuple[float, float]
    symbol: str
    ergodic_mean: complex
    indices: np.ndarray
    eigenvalues: np.ndarray
    elements: np.ndarray
    variance: float
    empty: bool
    metadata: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        d = asdict(self)
        d["schema_version"] = SCHEMA_VERSION
        d["ergodic_mean"] = [self.ergodic_mean.real, self.ergodic_mean.imag]
        d["indices"] = self.indices.tolist()
        d["eigenvalues"] = self.eigenvalues.tolist()
        d["elements"] = [[z.real, z.imag] for z in self.elements]
        d["window"] = list(self.window)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True)


def _degenerate_clusters(lam: np.ndarray, rtol: float = 1e-8) -> int:
    if len(lam) < 2:
        return 0
    close = np.diff(lam) <= rtol * (1 + np.abs(lam[1:]))
    # count runs of consecutive close pairs
    return int(np.count_nonzero(close[1:] & ~close[:-1]) + (close[0] if len(close) else 0))


def quantum_variance(tables: Sequence[PairingTable], h: float, window=(1.0, 4.0),
                     symbol: int = 0, check_range: bool = True) -> list[VarianceReport]:
    """``(2 pi h)^2 / dim F_p * sum_{a/h^2 <= lambda <= b/h^2} |<A u, u> - mean|^2``.

    One report per table (that is, per ``p``).
    """
    a, b = window
    lo, hi = a / h ** 2, b / h ** 2
    out = []
    for tab in tables:
        if check_range and hi > tab.metadata.get("complete_to", np.inf) * (1 + 1e-12):
            raise ValueError(f"window top {hi:.6g} exceeds the eigendata range "
                             f"{tab.metadata['complete_to']:.6g} for p={tab.p}")
        lam = tab.eigenvalues
        sel = np.flatnonzero((lam >= lo) & (lam <= hi))
        el = tab.values[symbol, sel]
        mean = complex(tab.means[symbol])
        dim = tab.p + 1
        var = float((2 * np.pi * h) ** 2 / dim * np.sum(np.abs(el - mean) ** 2))
        meta = {"n_window": int(len(sel)), "degenerate_clusters": _degenerate_clusters(lam[sel]),
                "normalization": "(2 pi h)^2 / dim F_p"}
        out.append(VarianceReport(tab.p, float(h), (lo, hi), tab.names[symbol], mean, sel,
                                  lam[sel], el, var, len(sel) == 0, meta))
    return out


# ---------------------------------------------------------------------------
# Density-one extraction


@dataclass
class WindowStats:
    p: int
    r: int
    n_window: int
    level: int
    eps: float
    discarded: int
    bound: float
    retained_fraction: float

    @property
    def chebyshev_ok(self) -> bool:
        return self.discarded <= self.bound * (1 + 1e-12) + 1e-12


@dataclass
class ExtractionReport:
    """Retained index set and per-window statistics of the dyadic selection."""

    retained: dict[int, np.ndarray]
    windows: list[WindowStats]
    levels: dict[int, int]
    density_curve: list[tuple[float, float]]

    def to_json_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION,
                "retained": {str(p): v.tolist() for p, v in self.retained.items()},
                "windows": [asdict(w) | {"chebyshev_ok": w.chebyshev_ok} for w in self.windows],
                "levels": {str(r): l for r, l in self.levels.items()},
                "density_curve": [list(x) for x in self.density_curve]}


def _window_eps(dev2: np.ndarray, level: int) -> float:
    """Mean over the window of ``sum_{i <= level} |dev_i|^2``."""
    if dev2.shape[1] == 0:
        return 0.0
    return float(dev2[: level + 1].sum(axis=0).mean())


def density_one_extract(tables: Sequence[PairingTable], levels: Mapping[int, int] | int | None = None,
                        r_min: int = 0) -> ExtractionReport:
    """Dyadic density-one selection.

    Windows are ``4^r <= lambda < 4^{r+1}`` inside the complete range of every
    table. In window ``r`` at level ``l`` an index is kept iff
    ``max_{i <= l} |<A_i u, u> - mean_i|^2 <= 2^{-l}``; the Chebyshev count
    ``#discarded <= 2^l eps_{l,r} N_{p,r}`` is recorded per window.

    ``levels`` may fix ``l`` (globally or per ``r``); by default ``l(r)`` is
    the largest level whose ``eps_{l,r'} <= 2^{-2l}`` holds for all
    ``r' >= r``, capped by the battery size and made nondecreasing in ``r``.
    """
    top = min(t.metadata.get("complete_to", t.eigenvalues.max()) for t in tables)
    rs = [r for r in range(r_min, 64) if 4 ** (r + 1) <= top]
    n_sym = min(len(t.names) for t in tables)
    dev2 = {t.p: t.deviations() ** 2 for t in tables}
    masks = {t.p: [(t.eigenvalues >= 4 ** r) & (t.eigenvalues < 4 ** (r + 1)) for r in rs]
             for t in tables}
    if isinstance(levels, int):
        lev = {r: levels for r in rs}
    elif levels is not None:
        lev = {r: int(levels[r]) for r in rs}
    else:
        def eps_sup(l, ri):
            return max(_window_eps(dev2[t.p][:, masks[t.p][ri]], l) for t in tables)
        lev = {}
        r_of_level = []
        for l in range(n_sym):
            ok = [all(eps_sup(l, rj) <= 2.0 ** (-2 * l) for rj in range(ri, len(rs)))
                  for ri in range(len(rs))]
            first = next((ri for ri, v in enumerate(ok) if v), None)
            if first is None:
                break
            if r_of_level and first <= r_of_level[-1]:
                first = r_of_level[-1] + 1
            if first >= len(rs):
                break
            r_of_level.append(first)
        for ri, r in enumerate(rs):
            lev[r] = max([l for l, rl in enumerate(r_of_level) if rl <= ri], default=0)
    windows, retained = [], {}
    for t in tables:
        keep = t.eigenvalues < 4 ** r_min
        for ri, r in enumerate(rs):
            m = masks[t.p][ri]
            l = min(lev[r], n_sym - 1)
            d2 = dev2[t.p][: l + 1][:, m]
            ok = d2.max(axis=0) <= 2.0 ** (-l) if d2.size else np.zeros(0, bool)
            keep[np.flatnonzero(m)[ok]] = True
            N = int(m.sum())
            eps = _window_eps(d2, l)
            disc = int(N - ok.sum())
            windows.append(WindowStats(t.p, r, N, l, eps, disc, 2.0 ** l * eps * N,
                                       float(ok.mean()) if N else 1.0))
        if rs:
            keep &= t.eigenvalues < 4 ** (rs[-1] + 1)
        retained[t.p] = np.flatnonzero(keep)
    curve = []
    for r in rs:
        lam_c = 4.0 ** (r + 1)
        fr = []
        for t in tables:
            below = t.eigenvalues < lam_c
            n = int(below.sum())
            fr.append(np.isin(np.flatnonzero(below), retained[t.p]).sum() / n if n else 1.0)
        curve.append((lam_c, float(min(fr))))
    return ExtractionReport(retained, windows, lev, curve)
