"""SU(2) elements, surface-group representations and the irreps on Sym^p(C^2).

Conventions
-----------
* The irrep of highest weight ``p`` acts on homogeneous polynomials of degree
  ``p`` in ``(z0, z1)`` by ``(g.s)(z) = s(g^{-1} z)``.
* Basis vector ``j`` is the normalized monomial ``c_j z0^(p-j) z1^j`` with
  ``c_j = sqrt((p+1) C(p, j))``; it is orthonormal for the Fubini-Study
  pairing with total mass one.
* Words in a surface group are tuples of signed, 1-based generator labels:
  ``k`` stands for generator ``k-1`` of ``(a1, b1, ..., ag, bg)`` and ``-k``
  for its inverse.
* Points of CP^1 are unit vectors in C^2 with the first nonzero coordinate
  made real and positive.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

import gmpy2
import numpy as np
from scipy.spatial import cKDTree

UNITARY_TOL = 1e-12
IRREP_UNITARY_TOL = 1e-11
RELATOR_TOL = 1e-10

PAULI = np.array(
    [[[0, 1], [1, 0]], [[0, -1j], [1j, 0]], [[1, 0], [0, -1]]], dtype=complex
)


class RepresentationError(ValueError):
    """Raised when a matrix or representation violates its invariants."""


@dataclass(frozen=True)
class GroupElement:
    """An element of SU(2).

    Parameters
    ----------
    entries : array_like, shape (2, 2)
        Complex matrix; must be unitary with determinant one to 1e-12.
    """

    entries: np.ndarray

    def __post_init__(self):
        g = np.array(self.entries, dtype=complex)
        if g.shape != (2, 2):
            raise RepresentationError(f"expected a 2x2 matrix, got shape {g.shape}")
        defect = np.abs(g @ g.conj().T - np.eye(2)).max()
        if defect > UNITARY_TOL:
            raise RepresentationError(f"matrix is not unitary (defect {defect:.3e})")
        det_defect = abs(np.linalg.det(g) - 1.0)
        if det_defect > UNITARY_TOL:
            raise RepresentationError(f"determinant differs from 1 by {det_defect:.3e}")
        g.setflags(write=False)
        object.__setattr__(self, "entries", g)

    @classmethod
    def identity(cls) -> "GroupElement":
        return cls(np.eye(2, dtype=complex))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "GroupElement":
        """Build from a matrix that is SU(2) up to round-off, re-projecting it.

        Used after long products, where errors of order 1e-15 per factor can
        accumulate past the strict constructor tolerance.
        """
        m = np.asarray(m, dtype=complex)
        a = 0.5 * (m[0, 0] + m[1, 1].conjugate())
        b = 0.5 * (m[0, 1] - m[1, 0].conjugate())
        n = math.sqrt(abs(a) ** 2 + abs(b) ** 2)
        a, b = a / n, b / n
        return cls(np.array([[a, b], [-b.conjugate(), a.conjugate()]]))

    def __matmul__(self, other: "GroupElement") -> "GroupElement":
        return GroupElement.from_matrix(self.entries @ other.entries)

    def inv(self) -> "GroupElement":
        return GroupElement(self.entries.conj().T)

    def act(self, z: np.ndarray) -> np.ndarray:
        """Linear action on C^2 (and hence the Mobius action on CP^1)."""
        return self.entries @ np.asarray(z, dtype=complex)

    def to_so3(self) -> np.ndarray:
        """Image under the double cover, ``R_ab = tr(s_a g s_b g^*) / 2``."""
        g = self.entries
        gh = g.conj().T
        return np.array(
            [[0.5 * np.trace(PAULI[a] @ g @ PAULI[b] @ gh).real for b in range(3)]
             for a in range(3)]
        )

    def eigenphase(self) -> float:
        """Return ``alpha`` in [0, pi] with eigenvalues ``exp(+-i alpha)``."""
        return float(np.arccos(np.clip(np.trace(self.entries).real / 2, -1.0, 1.0)))


@dataclass(frozen=True)
class IrrepMatrix:
    """Matrix of a group element on Sym^p(C^2) in the normalized monomial basis."""

    p: int
    entries: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.entries, dtype=complex)
        if m.shape != (self.p + 1, self.p + 1):
            raise RepresentationError("irrep matrix has the wrong shape")
        defect = np.abs(m @ m.conj().T - np.eye(self.p + 1)).max()
        if defect > IRREP_UNITARY_TOL:
            raise RepresentationError(f"irrep matrix not unitary (defect {defect:.3e})")
        m.setflags(write=False)
        object.__setattr__(self, "entries", m)


def _letter_image(images: Sequence[GroupElement], letter: int) -> np.ndarray:
    if letter == 0 or abs(letter) > len(images):
        raise RepresentationError(f"invalid generator label {letter}")
    g = images[abs(letter) - 1].entries
    return g if letter > 0 else g.conj().T


def reduce_word(word: Iterable[int]) -> tuple[int, ...]:
    """Freely reduce a word given as signed 1-based generator labels."""
    out: list[int] = []
    for letter in word:
        if out and out[-1] == -letter:
            out.pop()
        else:
            out.append(letter)
    return tuple(out)


def invert_word(word: Sequence[int]) -> tuple[int, ...]:
    return tuple(-x for x in reversed(word))


@dataclass(frozen=True)
class SurfaceGroupRep:
    """A representation of the genus-g surface group into SU(2).

    ``images`` lists the images of ``a1, b1, ..., ag, bg``; the product of
    commutators must map to the identity.
    """

    genus: int
    images: tuple[GroupElement, ...]

    def __post_init__(self):
        if self.genus < 1:
            raise RepresentationError("genus must be positive")
        images = tuple(self.images)
        if len(images) != 2 * self.genus:
            raise RepresentationError(
                f"need {2 * self.genus} generator images, got {len(images)}")
        object.__setattr__(self, "images", images)
        defect = np.abs(self.relator_image() - np.eye(2)).max()
        if defect > RELATOR_TOL:
            raise RepresentationError(f"relator image differs from I by {defect:.3e}")

    def relator_image(self) -> np.ndarray:
        out = np.eye(2, dtype=complex)
        for i in range(self.genus):
            a = self.images[2 * i].entries
            b = self.images[2 * i + 1].entries
            out = out @ a @ b @ a.conj().T @ b.conj().T
        return out

    def word_matrix(self, word: Sequence[int]) -> np.ndarray:
        """SU(2) matrix of a word (left-to-right product of letter images)."""
        out = np.eye(2, dtype=complex)
        for letter in word:
            out = out @ _letter_image(self.images, letter)
        return out

    def word_image(self, word: Sequence[int]) -> GroupElement:
        return GroupElement.from_matrix(self.word_matrix(word))

    def is_trivial(self) -> bool:
        return all(np.allclose(g.entries, np.eye(2), atol=1e-14) for g in self.images)


def monomial_norms(p: int) -> np.ndarray:
    """Normalizing constants ``c_j = sqrt((p+1) C(p, j))`` for ``j = 0..p``.

    Examples
    --------
    >>> monomial_norms(1)
    array([1.41421356, 1.41421356])
    """
    if p < 0:
        raise ValueError("p must be nonnegative")
    return np.sqrt([(p + 1) * math.comb(p, j) for j in range(p + 1)], dtype=float)


@functools.lru_cache(maxsize=256)
def _irrep_cached(key: tuple[complex, complex, complex, complex], p: int) -> np.ndarray:
    # Expand s(g^{-1} z) exactly; entries of g^{-1} = g^* as mpc numbers.
    prec = 64 + 2 * p
    with gmpy2.context(gmpy2.get_context(), precision=prec):
        g00, g01, g10, g11 = (gmpy2.mpc(c) for c in key)
        h00, h01, h10, h11 = (x.conjugate() for x in (g00, g10, g01, g11))

        def powers(x):
            out = [gmpy2.mpc(1)]
            for _ in range(p):
                out.append(out[-1] * x)
            return out

        P00, P01, P10, P11 = powers(h00), powers(h01), powers(h10), powers(h11)
        binom = [[gmpy2.comb(n, k) for k in range(n + 1)] for n in range(p + 1)]
        root = [gmpy2.sqrt(gmpy2.mpfr(binom[p][j])) for j in range(p + 1)]
        out = np.empty((p + 1, p + 1), dtype=complex)
        for k in range(p + 1):
            # (h00 z0 + h01 z1)^(p-k) (h10 z0 + h11 z1)^k, coefficient of z0^(p-j) z1^j
            for j in range(p + 1):
                acc = gmpy2.mpc(0)
                for s in range(max(0, j - k), min(p - k, j) + 1):
                    acc += (binom[p - k][s] * binom[k][j - s]
                            * P00[p - k - s] * P01[s] * P10[k - j + s] * P11[j - s])
                val = acc * root[k] / root[j]
                out[j, k] = complex(val)
    out.setflags(write=False)
    return out


def irrep_action(g: GroupElement | np.ndarray, p: int) -> IrrepMatrix:
    """Matrix of ``s -> s(g^{-1} .)`` on Sym^p(C^2).

    Parameters
    ----------
    g : GroupElement or ndarray
        The SU(2) element. Plain arrays are validated.
    p : int
        Highest weight, ``p >= 0``.

    Notes
    -----
    Entries come from an exact binomial expansion evaluated in extended
    precision (``64 + 2p`` bits); the cancellation between terms grows like
    ``2^(p/2)`` so double precision loses digits for large ``p``.
    """
    if not isinstance(g, GroupElement):
        g = GroupElement(np.asarray(g))
    if p < 0:
        raise ValueError("p must be nonnegative")
    key = tuple(complex(x) for x in g.entries.ravel())
    return IrrepMatrix(p, _irrep_cached(key, p))


def theta_pair(theta: float) -> tuple[GroupElement, GroupElement]:
    """The diagonal and off-diagonal SU(2) matrices with half-angle theta*pi/2."""
    a = theta * np.pi / 2
    c1 = GroupElement(np.diag([np.exp(-1j * a), np.exp(1j * a)]))
    c2 = GroupElement(np.array([[np.cos(a), 1j * np.sin(a)], [1j * np.sin(a), np.cos(a)]]))
    return c1, c2


def genus2_rep(theta: float) -> SurfaceGroupRep:
    """Genus-2 representation with ``rho(a1)=rho(b1)=c1`` and ``rho(a2)=rho(b2)=c2``.

    Each commutator is trivial, so the relator holds identically.
    """
    c1, c2 = theta_pair(theta)
    return SurfaceGroupRep(2, (c1, c1, c2, c2))


def is_generic(g: GroupElement, max_denominator: int = 1000, tol: float = 1e-9) -> bool:
    """Heuristic test that ``g`` generates a maximal torus.

    The closure of ``<g>`` is a maximal torus exactly when its eigenphase is
    an irrational multiple of pi; we reject phases within ``tol`` of a
    rational with denominator at most ``max_denominator``.
    """
    x = g.eigenphase() / np.pi
    q = Fraction(x).limit_denominator(max_denominator)
    return abs(x - float(q)) > tol


def haar_su2(rng: np.random.Generator) -> GroupElement:
    """Haar-random SU(2) element from a uniform point on S^3."""
    v = rng.standard_normal(4)
    v /= np.linalg.norm(v)
    a, b = complex(v[0], v[1]), complex(v[2], v[3])
    return GroupElement(np.array([[a, b], [-b.conjugate(), a.conjugate()]]))


def generate_dense_rep(genus: int, target: str = "SU2", seed: int = 0,
                       theta: float | None = None) -> SurfaceGroupRep:
    """Surface-group representation with dense image, built stepwise.

    Step one picks a generic element ``c1`` (its closure is a maximal torus);
    step two picks a generic ``c2`` not commuting with ``c1``, so the closure
    of ``<c1, c2>`` is all of SU(2). Generators are assigned in pairs
    ``rho(a_i) = rho(b_i)``, cycling through ``(c1, c2)``, which makes every
    commutator trivial.

    Parameters
    ----------
    genus : int
        At least 2 (one handle per construction step).
    target : {"SU2", "SO3"}
        Target group. For "SO3" the SU(2) lift is returned.
    seed : int
        Seed for the random generic elements.
    theta : float, optional
        If given, use the lifts of the two rotations by ``theta*pi`` about the
        z and x axes instead of random elements.
    """
    if genus < 2:
        raise RepresentationError("the stepwise construction needs genus >= 2")
    if target not in ("SU2", "SO3"):
        raise ValueError(f"unknown target group {target!r}")
    if theta is not None:
        c1, c2 = theta_pair(theta)
    else:
        rng = np.random.default_rng(seed)
        c1 = haar_su2(rng)
        while not is_generic(c1):
            c1 = haar_su2(rng)
        c2 = haar_su2(rng)
        while (not is_generic(c2)
               or np.abs(c1.entries @ c2.entries - c2.entries @ c1.entries).max() < 1e-3):
            c2 = haar_su2(rng)
    steps = (c1, c2)
    images = []
    for i in range(genus):
        images += [steps[i % 2], steps[i % 2]]
    return SurfaceGroupRep(genus, tuple(images))


def normalize_cp1(z: np.ndarray) -> np.ndarray:
    """Canonical representative: unit norm, first nonzero coordinate real positive."""
    z = np.asarray(z, dtype=complex)
    z = z / np.linalg.norm(z, axis=-1, keepdims=True)
    lead = np.where(np.abs(z[..., 0]) > 1e-15, z[..., 0], z[..., 1])
    return z * (np.abs(lead) / lead)[..., None]


def bloch_vector(z: np.ndarray) -> np.ndarray:
    """Bloch vectors ``x_a = z^* s_a z`` of unit vectors (last axis of length 2)."""
    z = np.asarray(z, dtype=complex)
    z0, z1 = z[..., 0], z[..., 1]
    c = np.conj(z0) * z1
    return np.stack([2 * c.real, 2 * c.imag, np.abs(z0) ** 2 - np.abs(z1) ** 2], axis=-1)


def fs_distance(z: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Fubini-Study distance ``arccos |<z, w>|`` in ``[0, pi/2]``."""
    ip = np.abs(np.sum(np.conj(z) * w, axis=-1))
    return np.arccos(np.clip(ip, 0.0, 1.0))


def fibonacci_sphere(n: int) -> np.ndarray:
    """Deterministic, nearly uniform ``n`` points on the unit sphere."""
    k = np.arange(n) + 0.5
    z = 1 - 2 * k / n
    phi = np.pi * (3 - np.sqrt(5)) * k
    r = np.sqrt(1 - z ** 2)
    return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])


def random_walk_orbit(rep: SurfaceGroupRep, z0: np.ndarray, length: int,
                      seed: int = 0) -> np.ndarray:
    """Orbit points ``rho(w_k) z0`` along a random walk of ``length`` letters.

    Prefixes of the walk are words, so the sample for a smaller budget is a
    prefix of the sample for a larger one.
    """
    rng = np.random.default_rng(seed)
    ng = len(rep.images)
    letters = rng.integers(0, 2 * ng, size=length)
    mats = [g.entries for g in rep.images] + [g.entries.conj().T for g in rep.images]
    pts = np.empty((length + 1, 2), dtype=complex)
    z = np.asarray(z0, dtype=complex) / np.linalg.norm(z0)
    pts[0] = z
    for n, k in enumerate(letters, start=1):
        z = mats[k] @ z
        pts[n] = z
    return pts


def orbit_density_diagnostic(rep: SurfaceGroupRep, z0: np.ndarray, word_budget: int,
                             mesh_size: int = 4096, seed: int = 0) -> float:
    """Covering radius of a sampled orbit of ``z0``, measured on a fixed mesh.

    Returns ``max_m min_k d_FS(m, rho(w_k) z0)`` over a Fibonacci mesh ``m``
    of CP^1. The orbit sample is a random walk whose prefixes are nested,
    so the estimate is nonincreasing in ``word_budget``.
    """
    if word_budget < 1:
        raise ValueError("word_budget must be >= 1")
    pts = random_walk_orbit(rep, z0, word_budget, seed=seed)
    tree = cKDTree(bloch_vector(pts))
    chord, _ = tree.query(fibonacci_sphere(mesh_size))
    # chord between Bloch vectors = 2 sin(d_FS)
    return float(np.arcsin(np.clip(chord.max() / 2, 0.0, 1.0)))
