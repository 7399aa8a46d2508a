"""Base geometries, geodesic and horizontal flows, Birkhoff averages.

Two bases are provided: the flat torus ``R^2 / Z^2`` (scaled by side
lengths) and the genus-2 surface obtained from the regular hyperbolic octagon
with vertex angles pi/4 in the Poincare disk.

Unfolding convention: a phase point ``(x, xi, z)`` with ``x`` in the
fundamental domain ``P`` and accumulated word ``w`` represents the point
``(w x, rho(w) z)`` of the universal cover. When the flow leaves ``P``
through side ``s`` the side pairing ``T_s`` (which maps ``P`` onto its
neighbour across ``s``) is inverted on the base, ``rho(T_s)^{-1}`` acts on
the fibre and the label of ``T_s`` is appended to the word. Hence
``z_now = rho(w)^{-1} z_start`` at all times.

Disk geodesics are exact: a unit tangent vector is an SU(1,1) frame ``G``
(base point ``G(0)``, direction ``2 arg G[0,0]``) and the flow is
right multiplication by ``A_t = [[cosh t/2, sinh t/2], [sinh t/2, cosh t/2]]``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np

from .fibre_quantization import fs_integral
from .group_rep import (GroupElement, SurfaceGroupRep, reduce_word, theta_pair)
from .symbols import MixedSymbol

STEP_BOUND = 0.1
INSIDE_TOL = 1e-12


class FlowError(RuntimeError):
    """Raised when unfolding fails to bring a point back into the domain."""


# ---------------------------------------------------------------------------
# Torus


@dataclass(frozen=True)
class TorusGeometry:
    """Flat torus ``[0, L1) x [0, L2)`` with diagonal holonomy.

    The holonomy of the translation ``e_i`` is
    ``diag(exp(-i theta_i pi/2), exp(i theta_i pi/2))``; generator labels are
    1 for ``e_1`` and 2 for ``e_2``.
    """

    theta: tuple[float, float] = (0.0, 0.0)
    lengths: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        a, b = (e.entries for e in self.holonomy_images)
        if np.abs(a @ b - b @ a).max() > 1e-12:
            raise ValueError("torus holonomy images do not commute")

    @property
    def holonomy_images(self) -> tuple[GroupElement, GroupElement]:
        return theta_pair(self.theta[0])[0], theta_pair(self.theta[1])[0]

    @property
    def rep(self) -> SurfaceGroupRep:
        # Z^2 is the genus-one surface group
        return SurfaceGroupRep(1, self.holonomy_images)

    @property
    def area(self) -> float:
        return self.lengths[0] * self.lengths[1]


# ---------------------------------------------------------------------------
# Hyperbolic octagon


def mobius(M: np.ndarray, z):
    return (M[..., 0, 0] * z + M[..., 0, 1]) / (M[..., 1, 0] * z + M[..., 1, 1])


def su11_inv(M: np.ndarray) -> np.ndarray:
    return np.array([[M[1, 1], -M[0, 1]], [-M[1, 0], M[0, 0]]])


def _disk_frame(p: complex, q: complex) -> np.ndarray:
    """SU(1,1) map sending ``p`` to 0 and ``q`` onto the positive real axis."""
    s = 1 / math.sqrt(1 - abs(p) ** 2)
    A = s * np.array([[1, -p], [-np.conj(p), 1]])
    w = mobius(A, q)
    ph = np.exp(-0.5j * np.angle(w))
    return np.diag([ph, np.conj(ph)]) @ A


def hyperbolic_distance_from_origin(x):
    return 2 * np.arctanh(np.abs(x))


def conformal_factor(x):
    """Density ``2 / (1 - |x|^2)`` of the disk metric (``ds = factor |dx|``)."""
    return 2.0 / (1.0 - np.abs(x) ** 2)


@dataclass(frozen=True)
class HyperbolicOctagon:
    """Regular octagon with vertex angles pi/4, centred at the origin.

    Side ``s`` runs from ``vertices[s]`` to ``vertices[s+1]``. ``pairings[s]``
    is the SU(1,1) matrix ``T_s`` taking ``P`` to its neighbour across side
    ``s``; ``side_label[s]`` is the signed generator label of ``T_s`` in
    ``(a1, b1, a2, b2)``, chosen so the standard relator holds.
    """

    vertices: np.ndarray = field(repr=False)
    centers: np.ndarray = field(repr=False)
    radii: np.ndarray = field(repr=False)
    pairings: np.ndarray = field(repr=False)  # (8, 2, 2) SU(1,1)
    side_label: tuple[int, ...] = ()
    partner: tuple[int, ...] = ()
    generators: np.ndarray = field(repr=False, default=None)  # (4, 2, 2) SU(1,1)

    genus = 2

    @property
    def area(self) -> float:
        return 4 * np.pi

    @property
    def circumradius(self) -> float:
        return float(hyperbolic_distance_from_origin(self.vertices[0]))

    @property
    def inradius(self) -> float:
        mid = self.centers[0] - self.radii[0] * self.centers[0] / abs(self.centers[0])
        return float(hyperbolic_distance_from_origin(mid))

    def letter_matrix(self, letter: int) -> np.ndarray:
        g = self.generators[abs(letter) - 1]
        return g if letter > 0 else su11_inv(g)

    def word_matrix(self, word: Sequence[int]) -> np.ndarray:
        out = np.eye(2, dtype=complex)
        for letter in word:
            out = out @ self.letter_matrix(letter)
        return out

    def psl2r(self, M: np.ndarray) -> np.ndarray:
        """Conjugate a disk automorphism to the upper half-plane, det 1, real."""
        K = np.array([[1j, 1j], [-1, 1]])
        R = K @ M @ np.linalg.inv(K)
        R = R / np.sqrt(np.linalg.det(R))
        return R.real

    def relator_matrix(self) -> np.ndarray:
        a1, b1, a2, b2 = self.generators
        inv = su11_inv
        return a1 @ b1 @ inv(a1) @ inv(b1) @ a2 @ b2 @ inv(a2) @ inv(b2)

    def violation(self, y) -> np.ndarray:
        """``r_s - |y - c_s|`` per side; positive entries are violated sides."""
        y = np.asarray(y)
        return self.radii - np.abs(y[..., None] - self.centers)

    def contains(self, y, tol: float = INSIDE_TOL):
        return np.all(self.violation(y) <= tol, axis=-1)

    def vertex_angles(self) -> np.ndarray:
        """Interior angle at each vertex between the two incident side arcs."""
        out = []
        for k in range(8):
            v = self.vertices[k]
            # tangent of a circle at v is perpendicular to the radius vector
            t_in = 1j * (v - self.centers[k - 1])
            t_out = 1j * (v - self.centers[k])
            # orient tangents to point from v into the sides
            if np.real(np.conj(t_out) * (self.vertices[(k + 1) % 8] - v)) < 0:
                t_out = -t_out
            if np.real(np.conj(t_in) * (self.vertices[k - 1] - v)) < 0:
                t_in = -t_in
            out.append(abs(np.angle(t_out / t_in)))
        return np.array(out)

    def boundary_radius(self, phi: np.ndarray) -> np.ndarray:
        """Euclidean distance from 0 to the boundary along the ray at angle ``phi``."""
        phi = np.asarray(phi, dtype=float)
        side = np.floor((phi - np.pi / 8) / (np.pi / 4)).astype(int) % 8
        c, r = self.centers[side], self.radii[side]
        u = np.exp(1j * phi)
        b = np.real(np.conj(u) * c)
        # |t u - c|^2 = r^2, smaller root
        return b - np.sqrt(b ** 2 - (np.abs(c) ** 2 - r ** 2))

    def quadrature(self, n_phi: int = 48, n_r: int = 48) -> tuple[np.ndarray, np.ndarray]:
        """Points (complex) and hyperbolic-area weights over the octagon.

        Gauss-Legendre in angle on each of the 8 sides' angular sectors and
        in ``s = r / R(phi)`` radially.
        """
        xp, wp = np.polynomial.legendre.leggauss(n_phi)
        xr, wr = np.polynomial.legendre.leggauss(n_r)
        pts, wts = [], []
        for k in range(8):
            a0 = np.pi / 8 + k * np.pi / 4
            phi = a0 + (xp + 1) * np.pi / 8
            wphi = wp * np.pi / 8
            R = self.boundary_radius(phi)
            s = 0.5 * (xr + 1)
            ws = 0.5 * wr
            r = R[:, None] * s[None, :]
            dens = conformal_factor(r) ** 2 * r * R[:, None]
            pts.append((r * np.exp(1j * phi[:, None])).ravel())
            wts.append((wphi[:, None] * ws[None, :] * dens).ravel())
        return np.concatenate(pts), np.concatenate(wts)

    def area_numeric(self, n_phi: int = 64) -> float:
        """Hyperbolic area from the closed radial integral ``2 R^2 / (1 - R^2)``."""
        xp, wp = np.polynomial.legendre.leggauss(n_phi)
        total = 0.0
        for k in range(8):
            phi = np.pi / 8 + k * np.pi / 4 + (xp + 1) * np.pi / 8
            R = self.boundary_radius(phi)
            total += np.dot(wp * np.pi / 8, 2 * R ** 2 / (1 - R ** 2))
        return float(total)


def build_octagon() -> HyperbolicOctagon:
    """Construct the regular genus-2 octagon and its side pairings.

    The circumradius satisfies ``cosh R = cot^2(pi/8)``. Sides ``s`` and
    ``s+2`` are paired for ``s`` in {0, 1, 4, 5}, with orientation
    reversed; the assignment of these pairings to ``(a1, b1, a2, b2)`` is
    searched so that ``[a1, b1][a2, b2] = +-I``.
    """
    R = math.acosh(1 / math.tan(math.pi / 8) ** 2)
    rv = math.tanh(R / 2)
    V = rv * np.exp(1j * (np.pi / 8 + np.arange(8) * np.pi / 4))
    d = (rv ** 2 + 1) / (2 * rv * math.cos(math.pi / 8))
    centers = d * np.exp(1j * (np.arange(8) + 1) * np.pi / 4)
    radii = np.full(8, math.sqrt(d ** 2 - 1))

    def pair(s: int, t: int) -> np.ndarray:
        # side t (reversed) onto side s
        F1 = _disk_frame(V[(t + 1) % 8], V[t])
        F0 = _disk_frame(V[s], V[(s + 1) % 8])
        return su11_inv(F0) @ F1

    T = np.zeros((8, 2, 2), dtype=complex)
    partner = [0] * 8
    for s in (0, 1, 4, 5):
        T[s] = pair(s, s + 2)
        T[s + 2] = su11_inv(T[s])
        partner[s], partner[s + 2] = s + 2, s

    def is_pm_identity(M):
        return min(np.abs(M - np.eye(2)).max(), np.abs(M + np.eye(2)).max())

    inv = su11_inv
    for a1, b1, a2, b2 in itertools.product((0, 2), (1, 3), (4, 6), (5, 7)):
        A1, B1, A2, B2 = T[a1], T[b1], T[a2], T[b2]
        rel = A1 @ B1 @ inv(A1) @ inv(B1) @ A2 @ B2 @ inv(A2) @ inv(B2)
        if is_pm_identity(rel) < 1e-9:
            break
    else:  # pragma: no cover - the regular octagon always admits one
        raise FlowError("no side-pairing assignment satisfies the relator")
    label = [0] * 8
    for gen, s in enumerate((a1, b1, a2, b2), start=1):
        label[s] = gen
        label[partner[s]] = -gen
    return HyperbolicOctagon(V, centers, radii, T, tuple(label), tuple(partner),
                             np.array([T[a1], T[b1], T[a2], T[b2]]))


# ---------------------------------------------------------------------------
# Phase points and flows


@dataclass(frozen=True)
class PhasePoint:
    """A point of the (augmented) unit cotangent bundle.

    ``x`` is a real 2-vector (for the disk, ``(Re x, Im x)``); ``xi`` is the
    covector in coordinates, of unit length in the metric (for the disk,
    ``|xi| = 2 / (1 - |x|^2)``). ``z`` is an optional unit vector in C^2.
    """

    x: np.ndarray
    xi: np.ndarray
    z: np.ndarray | None = None
    word: tuple[int, ...] = ()

    @property
    def xc(self) -> complex:
        return complex(self.x[0], self.x[1])

    def direction(self) -> float:
        return float(math.atan2(self.xi[1], self.xi[0]))


def make_point(geom, x, direction: float, z=None, word=()) -> PhasePoint:
    """Phase point at ``x`` with unit covector pointing at angle ``direction``."""
    x = np.asarray(x, dtype=float)
    u = np.array([math.cos(direction), math.sin(direction)])
    scale = 1.0 if isinstance(geom, TorusGeometry) else conformal_factor(complex(*x))
    zz = None if z is None else np.asarray(z, dtype=complex) / np.linalg.norm(z)
    return PhasePoint(x, scale * u, zz, tuple(word))


def covector_norm(geom, point: PhasePoint) -> float:
    n = float(np.hypot(*point.xi))
    if isinstance(geom, TorusGeometry):
        return n
    return n / float(conformal_factor(point.xc))


def point_to_frame(point: PhasePoint) -> np.ndarray:
    x = point.xc
    s = 1 / math.sqrt(1 - abs(x) ** 2)
    a = s * np.exp(0.5j * point.direction())
    return np.array([[a, x * np.conj(a)], [np.conj(x * np.conj(a)), np.conj(a)]])


def frame_to_xdir(G: np.ndarray) -> tuple[complex, float]:
    x = G[..., 0, 1] / G[..., 1, 1]
    return x, 2 * np.angle(G[..., 0, 0])


def flow_matrix(t: float) -> np.ndarray:
    c, s = math.cosh(t / 2), math.sinh(t / 2)
    return np.array([[c, s], [s, c]], dtype=complex)


def _renormalize(G: np.ndarray) -> np.ndarray:
    a = 0.5 * (G[..., 0, 0] + np.conj(G[..., 1, 1]))
    b = 0.5 * (G[..., 0, 1] + np.conj(G[..., 1, 0]))
    n = np.sqrt(np.abs(a) ** 2 - np.abs(b) ** 2)
    a, b = a / n, b / n
    return np.stack([np.stack([a, b], -1), np.stack([np.conj(b), np.conj(a)], -1)], -2)


def _bisect(f, lo: float, hi: float, tol: float = 1e-12) -> float:
    """Root of a sign change of ``f`` (False at lo, True at hi)."""
    for _ in range(200):
        if abs(hi - lo) <= tol:
            break
        mid = 0.5 * (lo + hi)
        if f(mid):
            hi = mid
        else:
            lo = mid
    return hi


def _rho_inverse(rep: SurfaceGroupRep | None, label: int, z):
    if z is None or rep is None:
        return z
    g = rep.word_matrix((label,))
    return g.conj().T @ z


def _torus_step(geom: TorusGeometry, point: PhasePoint, t: float,
                rep: SurfaceGroupRep | None) -> PhasePoint:
    L = np.asarray(geom.lengths, dtype=float)
    y = point.x + t * point.xi
    word = list(point.word)
    z = point.z
    for i in range(2):
        n = int(math.floor(y[i] / L[i]))
        letter = (i + 1) if n > 0 else -(i + 1)
        for _ in range(abs(n)):
            word.append(letter)
            z = _rho_inverse(rep, letter, z)
        y[i] -= n * L[i]
    return PhasePoint(y, point.xi.copy(), z, reduce_word(word))


def _octagon_step(geom: HyperbolicOctagon, point: PhasePoint, t: float,
                  rep: SurfaceGroupRep | None) -> PhasePoint:
    G0 = point_to_frame(point)
    word = list(point.word)
    z = point.z
    s_lo = 0.0
    for _ in range(16):
        y_end = mobius(G0 @ flow_matrix(t), 0)
        viol = geom.violation(y_end)
        bad = np.flatnonzero(viol > INSIDE_TOL)
        if bad.size == 0:
            break
        # convexity: each side's half-plane is left at most once on the path
        times = []
        for s in bad:
            def outside(u, s=s, G0=G0):
                y = mobius(G0 @ flow_matrix(u), 0)
                return geom.violation(y)[s] > 0
            times.append(_bisect(outside, s_lo, t))
        k = int(np.argmin(np.abs(np.array(times))))
        s = int(bad[k])
        s_lo = times[k]
        G0 = su11_inv(geom.pairings[s]) @ G0
        word.append(geom.side_label[s])
        z = _rho_inverse(rep, geom.side_label[s], z)
    else:
        raise FlowError(f"point {y_end} still outside after 16 side crossings; "
                        f"violations {geom.violation(y_end)}")
    G = _renormalize(G0 @ flow_matrix(t))
    x, ang = frame_to_xdir(G)
    lam = conformal_factor(x)
    xi = lam * np.array([math.cos(ang), math.sin(ang)])
    return PhasePoint(np.array([x.real, x.imag]), xi, z, reduce_word(word))


def geodesic_step(geom, point: PhasePoint, t: float, step_bound: float = STEP_BOUND,
                  rep: SurfaceGroupRep | None = None) -> PhasePoint:
    """Flow along the geodesic for time ``t``, unfolding through side pairings.

    Parameters
    ----------
    geom : TorusGeometry or HyperbolicOctagon
    point : PhasePoint
    t : float
        Time. On the octagon ``|t| <= step_bound`` so that crossings can be
        located one at a time; the torus flow is affine and takes any ``t``.
    rep : SurfaceGroupRep, optional
        If given and ``point.z`` is set, the fibre point is transported too
        (this is :func:`horizontal_step`).

    Raises
    ------
    FlowError
        If the unfolding does not land inside the domain.
    """
    if t == 0:
        return point
    if isinstance(geom, TorusGeometry):
        return _torus_step(geom, point, t, rep)
    if abs(t) > step_bound + 1e-15:
        raise ValueError(f"|t| = {abs(t)} exceeds the step bound {step_bound}")
    return _octagon_step(geom, point, t, rep)


def horizontal_step(geom, point: PhasePoint, t: float, rep: SurfaceGroupRep | None = None,
                    step_bound: float = STEP_BOUND) -> PhasePoint:
    """Horizontal geodesic flow: base as :func:`geodesic_step`, fibre by flat transport.

    For the torus the holonomy comes from the geometry; for the octagon it
    must be passed as ``rep`` (trivial if omitted).
    """
    if point.z is None:
        raise ValueError("horizontal flow needs a fibre point")
    if rep is None:
        rep = geom.rep if isinstance(geom, TorusGeometry) else _trivial_rep(2)
    return geodesic_step(geom, point, t, step_bound=step_bound, rep=rep)


def flow(geom, point: PhasePoint, t: float, rep: SurfaceGroupRep | None = None,
         step_bound: float = STEP_BOUND) -> PhasePoint:
    """Compose steps of size at most ``step_bound`` to flow for total time ``t``."""
    n = max(1, math.ceil(abs(t) / step_bound - 1e-12))
    dt = t / n
    for _ in range(n):
        point = (horizontal_step(geom, point, dt, rep, step_bound) if point.z is not None
                 else geodesic_step(geom, point, dt, step_bound))
    return point


def fold_point(geom, y, max_iter: int = 64):
    """Fundamental-domain representative of ``y`` and the deck word reaching it.

    Returns ``(x, word)`` with ``y = word . x``: for the octagon
    ``y = mobius(word_matrix(word), x)``, for the torus ``y = x + shifts``.
    """
    if isinstance(geom, TorusGeometry):
        y = np.asarray(y, dtype=float)
        L = np.asarray(geom.lengths, dtype=float)
        n = np.floor(y / L).astype(int)
        x = y - n * L
        word = (1,) * n[0] if n[0] >= 0 else (-1,) * -n[0]
        word += (2,) * n[1] if n[1] >= 0 else (-2,) * -n[1]
        return x, word
    y = complex(y)
    word = []
    for _ in range(max_iter):
        viol = geom.violation(y)
        s = int(np.argmax(viol))
        if viol[s] <= INSIDE_TOL:
            return y, tuple(word)
        y = complex(mobius(su11_inv(geom.pairings[s]), y))
        word.append(geom.side_label[s])
    raise FlowError("point fold did not terminate")


def _trivial_rep(genus: int) -> SurfaceGroupRep:
    return SurfaceGroupRep(genus, tuple(GroupElement.identity() for _ in range(2 * genus)))


# ---------------------------------------------------------------------------
# Batched flows for Monte-Carlo work


def _rep_letter_mats(geom, rep):
    """Per-side (octagon) inverse fibre matrices ``rho(T_s)^{-1}``."""
    if rep is None:
        return None
    return np.array([rep.word_matrix((lab,)).conj().T for lab in geom.side_label])


def fold_frames(geom: HyperbolicOctagon, G: np.ndarray, Z: np.ndarray | None = None,
                rho_inv: np.ndarray | None = None, max_iter: int = 32):
    """Bring frames back into the octagon by greedy side pairings.

    Uses the Dirichlet property of the regular octagon: pairing across a
    violated side strictly decreases the distance to the centre.
    """
    for _ in range(max_iter):
        y = G[:, 0, 1] / G[:, 1, 1]
        viol = geom.violation(y)
        worst = np.argmax(viol, axis=1)
        out = viol[np.arange(len(y)), worst] > INSIDE_TOL
        if not out.any():
            return G, Z
        idx = np.flatnonzero(out)
        s = worst[idx]
        Tinv = np.array([su11_inv(M) for M in geom.pairings])
        G[idx] = Tinv[s] @ G[idx]
        if Z is not None:
            Z[idx] = np.einsum("nij,nj->ni", rho_inv[s], Z[idx])
    raise FlowError("batched fold did not terminate")


def sample_uniform(geom, n: int, rng: np.random.Generator, with_fibre: bool = True):
    """Uniform samples on the augmented unit sphere bundle.

    Returns positions (complex for the disk, real pairs for the torus),
    directions and fibre unit vectors (Haar on CP^1).
    """
    z = None
    if with_fibre:
        g = rng.standard_normal((n, 2)) + 1j * rng.standard_normal((n, 2))
        z = g / np.linalg.norm(g, axis=1, keepdims=True)
    ang = rng.uniform(0, 2 * np.pi, n)
    if isinstance(geom, TorusGeometry):
        x = rng.uniform(0, 1, (n, 2)) * np.asarray(geom.lengths)
        return x, ang, z
    Rc = geom.circumradius
    pts = np.empty(0, dtype=complex)
    while pts.size < n:
        m = 2 * (n - pts.size) + 16
        # hyperbolic distance density ~ sinh(d) on [0, Rc]
        d = np.arccosh(1 + rng.uniform(0, 1, m) * (math.cosh(Rc) - 1))
        cand = np.tanh(d / 2) * np.exp(1j * rng.uniform(0, 2 * np.pi, m))
        pts = np.concatenate([pts, cand[geom.contains(cand)]])
    return pts[:n], ang, z


def frames_from(x: np.ndarray, ang: np.ndarray) -> np.ndarray:
    s = 1 / np.sqrt(1 - np.abs(x) ** 2)
    a = s * np.exp(0.5j * ang)
    b = x * np.conj(a)
    return np.stack([np.stack([a, b], -1), np.stack([np.conj(b), np.conj(a)], -1)], -2)


def _eval_obs(obs: MixedSymbol, x_real: np.ndarray, dirs: np.ndarray, Z):
    u = np.stack([np.cos(dirs), np.sin(dirs)], -1)
    return obs.evaluate(x_real, u, Z)


def birkhoff_batch(geom, observable: MixedSymbol, x0, ang0, z0, T: float, dt: float = 0.1,
                   rep: SurfaceGroupRep | None = None) -> np.ndarray:
    """Composite-midpoint time averages for a batch of trajectories.

    Samples at times ``(k + 1/2) dt``, ``k < T/dt``. Positions ``x0`` are
    complex (disk) or real pairs (torus); ``z0`` may be ``None`` for
    observables without fibre dependence.
    """
    if T <= 0 or dt <= 0 or dt > STEP_BOUND + 1e-15:
        raise ValueError("need T > 0 and 0 < dt <= 0.1")
    n_steps = max(1, int(round(T / dt)))
    Z = None if z0 is None else np.array(z0, dtype=complex)
    acc = 0
    if isinstance(geom, TorusGeometry):
        if rep is None:
            rep = geom.rep
        L = np.asarray(geom.lengths)
        U = np.stack([np.cos(ang0), np.sin(ang0)], -1)
        X = np.array(x0, dtype=float)
        hol = [g.entries for g in rep.images]
        for k in range(n_steps):
            h = dt / 2 if k == 0 else dt
            X = X + h * U
            wraps = np.floor(X / L).astype(int)
            X = X - wraps * L
            if Z is not None and np.any(wraps):
                for i in range(2):
                    for n in np.unique(wraps[:, i]):
                        if n == 0:
                            continue
                        sel = wraps[:, i] == n
                        M = np.linalg.matrix_power(hol[i].conj().T, int(n)) if n > 0 else \
                            np.linalg.matrix_power(hol[i], int(-n))
                        Z[sel] = Z[sel] @ M.T
            acc = acc + _eval_obs(observable, X, ang0, Z)
        return acc / n_steps
    rho_inv = _rep_letter_mats(geom, rep) if Z is not None else None
    if Z is not None and rho_inv is None:
        rho_inv = np.broadcast_to(np.eye(2, dtype=complex), (8, 2, 2))
    G = frames_from(np.asarray(x0, dtype=complex), np.asarray(ang0, dtype=float))
    A_half, A_full = flow_matrix(dt / 2), flow_matrix(dt)
    for k in range(n_steps):
        G = G @ (A_half if k == 0 else A_full)
        G, Z = fold_frames(geom, G, Z, rho_inv)
        if k % 64 == 0:
            G = _renormalize(G)
        x, ang = frame_to_xdir(G)
        acc = acc + _eval_obs(observable, np.stack([x.real, x.imag], -1), ang, Z)
    return acc / n_steps


def birkhoff_average(geom, observable: MixedSymbol, start: PhasePoint, T: float,
                     dt: float = 0.1, rep: SurfaceGroupRep | None = None) -> complex:
    """Time average ``(1/T) int_0^T A(phi_t(start)) dt`` by the composite midpoint rule.

    Implemented by stepping :func:`horizontal_step` (or :func:`geodesic_step`
    without a fibre point) and sampling at the midpoints of each interval.
    """
    if T <= 0 or dt <= 0 or dt > STEP_BOUND + 1e-15:
        raise ValueError("need T > 0 and 0 < dt <= 0.1")
    n_steps = max(1, int(round(T / dt)))
    if rep is None and isinstance(geom, TorusGeometry):
        rep = geom.rep
    if rep is None:
        rep = _trivial_rep(2)
    total = 0j
    pt = start
    for k in range(n_steps):
        h = dt / 2 if k == 0 else dt
        pt = geodesic_step(geom, pt, h, rep=rep)
        u = np.array([math.cos(pt.direction()), math.sin(pt.direction())])
        total += complex(observable.evaluate(pt.x, u, pt.z))
    val = total / n_steps
    return val.real if observable.real else val


class TimeAverageBound(NamedTuple):
    value: float
    stderr: float
    T: float
    n_trajectories: int


def ergodic_mean(geom, symbol: MixedSymbol, quad=None) -> complex:
    """Normalized phase-space average of a position symbol.

    Fibre integrals are exact; base integrals use the octagon quadrature (or
    a periodic midpoint grid on the torus).
    """
    if symbol.kind == "torus_scalar":
        raise ValueError("use the torus phase-space average for torus symbols")
    if isinstance(geom, TorusGeometry):
        n = 256
        g = (np.arange(n) + 0.5) / n
        X = np.stack(np.meshgrid(g * geom.lengths[0], g * geom.lengths[1], indexing="ij"), -1)
        vals = symbol.fibre_average(X)
        out = complex(np.mean(vals))
    else:
        pts, w = quad if quad is not None else geom.quadrature()
        vals = symbol.fibre_average(np.stack([pts.real, pts.imag], -1))
        out = complex(np.dot(w, vals) / w.sum())
    if symbol.kind == "separable":
        out *= complex(symbol.phi(np.array(1.0)))
    return out.real if symbol.real else out


def rhs_time_average_bound(symbol: MixedSymbol, T: float, budget: int, geom=None,
                           rep: SurfaceGroupRep | None = None, dt: float = 0.1,
                           seed: int = 0) -> TimeAverageBound:
    """Monte-Carlo estimate of ``|| <A>_T - mean ||^2`` in L^2 of the phase space.

    ``budget`` trajectories start from uniform, seeded samples. Returns the
    estimate and its standard error.
    """
    if T <= 0:
        raise ValueError("T must be positive")
    if geom is None:
        geom = build_octagon()
    rng = np.random.default_rng(seed)
    x, ang, z = sample_uniform(geom, budget, rng)
    avg = birkhoff_batch(geom, symbol, x, ang, z, T, dt, rep)
    mean = ergodic_mean(geom, symbol)
    dev = np.abs(avg - mean) ** 2
    return TimeAverageBound(float(dev.mean()), float(dev.std(ddof=1) / math.sqrt(budget)),
                            float(T), int(budget))


def phase_space_partition_counts(geom: HyperbolicOctagon, x: np.ndarray, ang: np.ndarray,
                                 z: np.ndarray, bins: tuple[int, int, int, int] = (3, 8, 4, 2)):
    """Counts on a coarse partition of the augmented sphere bundle of the octagon.

    Cells: hyperbolic radius (equal-area shells), polar angle, direction
    relative to the radial direction, and hemisphere of the Bloch vector.
    """
    nr, nphi, nd, nz = bins
    Rc = geom.circumradius
    d = hyperbolic_distance_from_origin(x)
    u = (np.cosh(d) - 1) / (math.cosh(Rc) - 1)
    ir = np.minimum((u * nr).astype(int), nr - 1)
    iphi = ((np.angle(x) % (2 * np.pi)) / (2 * np.pi) * nphi).astype(int) % nphi
    rel = (ang - np.angle(x)) % (2 * np.pi)
    idir = (rel / (2 * np.pi) * nd).astype(int) % nd
    x3 = np.abs(z[:, 0]) ** 2 - np.abs(z[:, 1]) ** 2
    iz = (x3 > 0).astype(int) if nz == 2 else np.zeros(len(x), int)
    flat = ((ir * nphi + iphi) * nd + idir) * nz + iz
    return np.bincount(flat, minlength=nr * nphi * nd * nz)
