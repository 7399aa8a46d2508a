"""Spectra of the flat-bundle Laplacian on the torus and the genus-2 octagon.

The torus has a closed form: with diagonal holonomy the weight-``j``
component is a plane wave ``exp(2 pi i (n + beta_j) . x)`` with
``beta_j = theta (p - 2j) / 4`` and eigenvalue ``4 pi^2 |n + beta_j|^2``.

The finite-element solver uses P1 elements on a triangulated fundamental
domain. In two dimensions the Dirichlet form is conformally invariant, so
the stiffness matrix is Euclidean; the mass matrix carries the density of
the metric. Twisted sections satisfy ``u(gamma y) = rho(gamma) u(y)``, so
boundary nodes are expressed through master nodes with ``irrep_action``
blocks, giving the reduced pencil ``(C^* K C, C^* M C)``.
"""

from __future__ import annotations

import gc
import logging
import math
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.spatial import cKDTree

from .base_geometry import (HyperbolicOctagon, TorusGeometry, _disk_frame, build_octagon,
                            conformal_factor, mobius, su11_inv)
from .group_rep import SurfaceGroupRep, irrep_action

log = logging.getLogger(__name__)

# lambda <= TRUST_C * h_mesh^-2; see the decisions ledger for the calibration
TRUST_C = 0.5


class MeshError(ValueError):
    """Raised for meshes whose boundary cannot be paired."""


class ConvergenceError(RuntimeError):
    """Raised when the eigensolver misses its residual targets."""

    def __init__(self, msg, residuals=None):
        super().__init__(msg)
        self.residuals = residuals


@dataclass(frozen=True)
class BundleSpec:
    """A base geometry, a holonomy representation and the highest weight ``p``."""

    geometry: TorusGeometry | HyperbolicOctagon
    rep: SurfaceGroupRep | None
    p: int

    def __post_init__(self):
        if self.p < 0:
            raise ValueError("p must be nonnegative")
        if self.rep is None:
            rep = self.geometry.rep if isinstance(self.geometry, TorusGeometry) else None
            object.__setattr__(self, "rep", rep)

    @property
    def dim(self) -> int:
        return self.p + 1

    @property
    def area(self) -> float:
        return float(self.geometry.area)


@dataclass
class EigenData:
    """Eigenpairs of one (geometry, rep, p) problem.

    ``vectors`` holds reduced FEM coefficient vectors as columns (possibly a
    read-only memmap); ``modes`` holds ``(n1, n2, j)`` labels for the
    closed-form torus spectrum instead.
    """

    p: int
    eigenvalues: np.ndarray
    vectors: np.ndarray | None = None
    modes: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)
    certificate: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.eigenvalues)

    def subset(self, idx) -> "EigenData":
        idx = np.asarray(idx)
        return EigenData(self.p, self.eigenvalues[idx],
                         None if self.vectors is None else np.asarray(self.vectors[:, idx]),
                         None if self.modes is None else self.modes[idx],
                         dict(self.metadata), dict(self.certificate))


# ---------------------------------------------------------------------------
# Torus closed form


def torus_betas(theta: Sequence[float], p: int) -> np.ndarray:
    """Quasi-momenta ``beta_j = theta (p - 2j) / 4``, shape ``(p+1, 2)``."""
    j = np.arange(p + 1)
    return np.outer(p - 2 * j, np.asarray(theta, dtype=float)) / 4


def torus_spectrum_exact(spec: BundleSpec, count: int) -> EigenData:
    """Lowest ``count`` eigenvalues of the twisted torus, with mode labels.

    Ties are broken by ``(j, n1, n2)`` so the ordering is deterministic.
    """
    geom = spec.geometry
    if not isinstance(geom, TorusGeometry):
        raise TypeError("torus_spectrum_exact needs a TorusGeometry")
    rep = spec.rep
    for g in rep.images:
        e = g.entries
        if abs(e[0, 1]) > 1e-14 or abs(e[1, 0]) > 1e-14:
            raise ValueError("closed form requires diagonal holonomy")
    # angles theta_i from the diagonal entries exp(-i theta pi/2)
    theta = [-2 * np.angle(g.entries[0, 0]) / np.pi for g in rep.images]
    L = np.asarray(geom.lengths, dtype=float)
    betas = torus_betas(theta, spec.p)
    # Weyl estimate for the box size
    lam_est = 4 * np.pi * (count + 10) / (geom.area * spec.dim) * 1.5 + 100
    R = int(math.ceil(math.sqrt(lam_est) / (2 * np.pi) * L.max())) + 2
    rng = np.arange(-R, R + 1)
    N1, N2 = np.meshgrid(rng, rng, indexing="ij")
    lam, labels = [], []
    for j, b in enumerate(betas):
        k1 = (N1 + b[0]) / L[0]
        k2 = (N2 + b[1]) / L[1]
        lam.append((4 * np.pi ** 2 * (k1 ** 2 + k2 ** 2)).ravel())
        labels.append(np.column_stack([N1.ravel(), N2.ravel(), np.full(N1.size, j)]))
    lam = np.concatenate(lam)
    labels = np.concatenate(labels)
    order = np.lexsort((labels[:, 1], labels[:, 0], labels[:, 2], np.round(lam, 9)))
    lam, labels = lam[order][:count], labels[order][:count]
    if lam[-1] > (2 * np.pi * (R - 1) / L.max()) ** 2:  # pragma: no cover
        raise RuntimeError("enumeration box too small")
    return EigenData(spec.p, lam, modes=labels,
                     metadata={"solver": "closed-form", "theta": list(map(float, theta)),
                               "lengths": L.tolist()})


def torus_mode_values(spec: BundleSpec, modes: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Values of L^2-normalized torus eigensections at points ``x`` (..., 2).

    Returns shape ``(..., n_modes, p+1)`` with the plane wave in slot ``j``.
    """
    geom = spec.geometry
    theta = [-2 * np.angle(g.entries[0, 0]) / np.pi for g in spec.rep.images]
    L = np.asarray(geom.lengths, dtype=float)
    betas = torus_betas(theta, spec.p)
    modes = np.asarray(modes)
    k = (modes[:, :2] + betas[modes[:, 2]]) / L
    phase = np.exp(2j * np.pi * np.tensordot(np.asarray(x, float), k.T, axes=(-1, 0)))
    out = np.zeros(phase.shape + (spec.dim,), dtype=complex)
    idx = np.arange(len(modes))
    out[..., idx, modes[:, 2]] = phase / math.sqrt(geom.area)
    return out


# ---------------------------------------------------------------------------
# Meshes


@dataclass(frozen=True)
class Mesh:
    """Triangulated fundamental domain.

    ``nodes`` are real coordinates ``(N, 2)``; ``sides[s]`` lists the node
    indices on side ``s`` in order; ``side_maps[s] = (label, partner)``
    gives the generator label whose action maps side ``s`` onto side
    ``partner``.
    """

    nodes: np.ndarray
    triangles: np.ndarray
    sides: tuple[np.ndarray, ...]
    side_maps: tuple[tuple[int, int], ...]
    density: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    act: Callable[[int, np.ndarray], np.ndarray] = field(repr=False)
    kind: str = "octagon"
    resolution: int = 0

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def edge_lengths(self) -> np.ndarray:
        """Metric lengths of all triangle edges (midpoint rule for the density)."""
        P = self.nodes[self.triangles]
        out = []
        for a, b in ((0, 1), (1, 2), (2, 0)):
            mid = 0.5 * (P[:, a] + P[:, b])
            out.append(np.linalg.norm(P[:, a] - P[:, b], axis=1) * np.sqrt(self.density(mid)))
        return np.concatenate(out)

    @property
    def h_mesh(self) -> float:
        return float(self.edge_lengths().max())


def torus_mesh(n: int, lengths=(1.0, 1.0)) -> Mesh:
    """Uniform ``n x n`` grid on the torus rectangle, each cell split into two."""
    L1, L2 = lengths
    a = np.arange(n + 1)
    A, B = np.meshgrid(a, a, indexing="ij")
    nodes = np.column_stack([A.ravel() * L1 / n, B.ravel() * L2 / n])
    idx = (A * (n + 1) + B)
    i0 = idx[:-1, :-1].ravel()
    i1 = idx[1:, :-1].ravel()
    i2 = idx[1:, 1:].ravel()
    i3 = idx[:-1, 1:].ravel()
    tris = np.concatenate([np.column_stack([i0, i1, i2]), np.column_stack([i0, i2, i3])])
    sides = (idx[0, :], idx[n, :], idx[:, 0], idx[:, n])  # left, right, bottom, top
    side_maps = ((1, 1), (-1, 0), (2, 3), (-2, 2))

    def act(label: int, x: np.ndarray) -> np.ndarray:
        shift = np.zeros(2)
        shift[abs(label) - 1] = math.copysign(lengths[abs(label) - 1], label)
        return x + shift

    return Mesh(nodes, tris, sides, side_maps,
                density=lambda x: np.ones(np.shape(x)[:-1]), act=act,
                kind="torus", resolution=n)


def octagon_mesh(n: int, geom: HyperbolicOctagon | None = None) -> Mesh:
    """Structured triangulation of the octagon by eight geodesic sectors.

    Sector ``k`` is bounded by the rays to vertices ``k`` and ``k+1`` and by
    side ``k``. Row ``i`` holds ``i+1`` nodes; node ``(i, j)`` lies on the ray
    towards the point at arc-length fraction ``j/i`` along the side, at
    fraction ``i/n`` of the hyperbolic distance to it. Sides are divided
    into ``n`` equal hyperbolic lengths, so paired sides are node-conforming.
    """
    geom = geom or build_octagon()
    V = geom.vertices
    coords: list[complex] = [0j]

    def arc_points(k: int, t: np.ndarray) -> np.ndarray:
        F = _disk_frame(V[k], V[(k + 1) % 8])
        r1 = mobius(F, V[(k + 1) % 8]).real
        L = 2 * math.atanh(r1)
        return mobius(su11_inv(F), np.tanh(t * L / 2))

    def radial(A: complex, frac: float) -> complex:
        D = 2 * math.atanh(abs(A))
        return math.tanh(frac * D / 2) * A / abs(A)

    rays = []
    for k in range(8):
        ray = [0]
        for i in range(1, n + 1):
            coords.append(radial(V[k], i / n))
            ray.append(len(coords) - 1)
        rays.append(ray)
    grid = []
    for k in range(8):
        rows = [[0]]
        for i in range(1, n + 1):
            A = arc_points(k, np.arange(i + 1) / i)
            row = [rays[k][i]]
            for j in range(1, i):
                coords.append(radial(A[j], i / n))
                row.append(len(coords) - 1)
            row.append(rays[(k + 1) % 8][i])
            rows.append(row)
        grid.append(rows)
    tris = []
    for rows in grid:
        for i in range(n):
            r0, r1 = rows[i], rows[i + 1]
            for j in range(i + 1):
                tris.append((r0[j], r1[j], r1[j + 1]))
            for j in range(i):
                tris.append((r0[j], r1[j + 1], r0[j + 1]))
    z = np.array(coords)
    nodes = np.column_stack([z.real, z.imag])
    tris = np.array(tris)
    P = nodes[tris]
    signed = ((P[:, 1, 0] - P[:, 0, 0]) * (P[:, 2, 1] - P[:, 0, 1])
              - (P[:, 2, 0] - P[:, 0, 0]) * (P[:, 1, 1] - P[:, 0, 1]))
    flip = signed < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]
    sides = tuple(np.array(grid[k][n]) for k in range(8))
    side_maps = tuple((geom.side_label[geom.partner[s]], geom.partner[s]) for s in range(8))

    def act(label: int, x: np.ndarray) -> np.ndarray:
        w = mobius(geom.letter_matrix(label), x[..., 0] + 1j * x[..., 1])
        return np.stack([w.real, w.imag], -1)

    def density(x: np.ndarray) -> np.ndarray:
        return conformal_factor(x[..., 0] + 1j * x[..., 1]) ** 2

    return Mesh(nodes, tris, sides, side_maps, density=density, act=act,
                kind="octagon", resolution=n)


# ---------------------------------------------------------------------------
# Assembly

# Degree-5 seven-point rule on the reference triangle (barycentric, weights sum to 1)
_A1, _B1 = 0.059715871789770, 0.470142064105115
_A2, _B2 = 0.797426985353087, 0.101286507323456
_W0, _W1, _W2 = 0.225, 0.132394152788506, 0.125939180544827
QUAD7 = np.array([
    [1 / 3, 1 / 3, 1 / 3],
    [_A1, _B1, _B1], [_B1, _A1, _B1], [_B1, _B1, _A1],
    [_A2, _B2, _B2], [_B2, _A2, _B2], [_B2, _B2, _A2],
])
QUAD7_W = np.array([_W0, _W1, _W1, _W1, _W2, _W2, _W2])


def p1_matrices(mesh: Mesh, weight: Callable[[np.ndarray], np.ndarray] | None = None):
    """Euclidean P1 stiffness and density-weighted mass matrices.

    If ``weight`` is given, the mass integrand is multiplied by it (used for
    base-function pairings). Returns CSR matrices ``(K, M)``.
    """
    P = mesh.nodes[mesh.triangles]
    x0, x1, x2 = P[:, 0], P[:, 1], P[:, 2]
    area = 0.5 * ((x1[:, 0] - x0[:, 0]) * (x2[:, 1] - x0[:, 1])
                  - (x2[:, 0] - x0[:, 0]) * (x1[:, 1] - x0[:, 1]))
    if np.any(area <= 0):
        raise MeshError("mesh has degenerate or inverted triangles")
    # gradients of barycentric coordinates
    b = np.stack([x1[:, 1] - x2[:, 1], x2[:, 1] - x0[:, 1], x0[:, 1] - x1[:, 1]], 1)
    c = np.stack([x2[:, 0] - x1[:, 0], x0[:, 0] - x2[:, 0], x1[:, 0] - x0[:, 0]], 1)
    Kloc = (b[:, :, None] * b[:, None, :] + c[:, :, None] * c[:, None, :]) / (4 * area[:, None, None])
    qp = np.einsum("qi,tid->tqd", QUAD7, P)
    dens = mesh.density(qp)
    if weight is not None:
        dens = dens * weight(qp)
    Mloc = np.einsum("q,tq,qi,qj->tij", QUAD7_W, dens, QUAD7, QUAD7) * area[:, None, None]
    rows = np.repeat(mesh.triangles, 3, axis=1).ravel()
    cols = np.tile(mesh.triangles, (1, 3)).ravel()
    N = mesh.n_nodes
    K = sp.csr_matrix((Kloc.ravel(), (rows, cols)), shape=(N, N))
    M = sp.csr_matrix((Mloc.ravel(), (rows, cols)), shape=(N, N))
    return K, M


def pairing_words(mesh: Mesh, snap: float = 1e-3) -> tuple[np.ndarray, dict[int, tuple[int, ...]]]:
    """Master node and group word for every boundary node.

    Returns ``master`` (length ``N``; interior nodes are their own master) and
    ``words`` mapping each slave node ``b`` to ``w`` with
    ``x_b = w . x_master`` and ``u(x_b) = rho(w) u(x_master)``.

    Raises
    ------
    MeshError
        If a boundary node's image is not within ``snap`` (relative to the
        local edge length) of a node on the partner side, or if a vertex
        cycle closes inconsistently.
    """
    N = mesh.n_nodes
    adj: dict[int, list[tuple[int, int]]] = {}
    h_loc = np.linalg.norm(np.diff(mesh.nodes[mesh.sides[0]], axis=0), axis=1).min()
    unpaired = []
    for s, (label, partner) in enumerate(mesh.side_maps):
        src = mesh.sides[s]
        dst = mesh.sides[partner]
        img = mesh.act(label, mesh.nodes[src])
        dist, k = cKDTree(mesh.nodes[dst]).query(img)
        bad = dist > snap * h_loc
        if bad.any():
            unpaired += [(int(src[i]), s, float(dist[i])) for i in np.flatnonzero(bad)]
        for a, b in zip(src, dst[k]):
            adj.setdefault(int(a), []).append((int(b), label))
            adj.setdefault(int(b), []).append((int(a), -label))
    if unpaired:
        report = ", ".join(f"node {a} (side {s}, miss {d:.2e})" for a, s, d in unpaired[:10])
        raise MeshError(f"{len(unpaired)} unpaired boundary nodes: {report}")
    master = np.arange(N)
    words: dict[int, tuple[int, ...]] = {}
    seen: dict[int, tuple[int, ...]] = {}
    for start in sorted(adj):
        if start in seen:
            continue
        seen[start] = ()
        queue = deque([start])
        while queue:
            a = queue.popleft()
            for b, label in adj[a]:
                w = (label,) + seen[a]
                if b not in seen:
                    seen[b] = w
                    master[b] = start
                    if b != start:
                        words[b] = w
                    queue.append(b)
    # geometric consistency of the words
    for b, w in words.items():
        x = mesh.nodes[master[b]]
        for letter in reversed(w):
            x = mesh.act(letter, x)
        if np.linalg.norm(x - mesh.nodes[b]) > snap * h_loc:
            raise MeshError(f"word {w} does not map node {master[b]} to node {b}")
    return master, words


def _check_cycles(mesh: Mesh, master, words, rep: SurfaceGroupRep):
    """Every boundary class must close up in the representation as well."""
    # Already implied by the relator; kept as a cheap guard for custom meshes.
    for b, w in words.items():
        if len(w) > 16:
            raise MeshError(f"suspiciously long pairing word at node {b}: {w}")


@dataclass
class DiscreteLaplacian:
    """Reduced FEM pencil for the twisted Laplacian.

    ``K`` and ``M`` act on master degrees of freedom (node-major, fibre
    index minor); ``C`` maps reduced to full nodal values.
    """

    K: sp.csr_matrix
    M: sp.csr_matrix
    C: sp.csr_matrix | None = None
    mesh: Mesh | None = None
    p: int = 0
    metadata: dict = field(default_factory=dict)
    spec: BundleSpec | None = None
    _locator: object = field(default=None, repr=False)

    @property
    def ndof(self) -> int:
        return self.K.shape[0]

    @property
    def dim(self) -> int:
        return self.p + 1

    def full_values(self, vecs: np.ndarray) -> np.ndarray:
        """Nodal values ``(N, p+1)`` (or ``(N, p+1, k)`` for several vectors)."""
        v = np.asarray(vecs)
        full = self.C @ v if self.C is not None else v
        if v.ndim == 1:
            return full.reshape(-1, self.dim)
        return full.reshape(-1, self.dim, v.shape[1])

    @property
    def trust_lambda(self) -> float:
        return self.metadata.get("trust_lambda", np.inf)


def assemble_fem(spec: BundleSpec, resolution: int, mesh: Mesh | None = None) -> DiscreteLaplacian:
    """Assemble the reduced stiffness and mass matrices for ``spec``.

    Parameters
    ----------
    spec : BundleSpec
        Octagon or torus (the torus goes through the same code path).
    resolution : int
        Sector subdivision ``n`` (octagon, ``~4 n^2`` nodes) or grid size
        (torus, ``n^2`` master nodes).
    """
    geom = spec.geometry
    if mesh is None:
        if isinstance(geom, TorusGeometry):
            mesh = torus_mesh(resolution, geom.lengths)
        else:
            mesh = octagon_mesh(resolution, geom)
    rep = spec.rep
    if rep is None:
        from .base_geometry import _trivial_rep
        rep = _trivial_rep(2 if mesh.kind == "octagon" else 1)
    K, M = p1_matrices(mesh)
    master, words = pairing_words(mesh)
    _check_cycles(mesh, master, words, rep)
    d = spec.dim
    N = mesh.n_nodes
    masters = np.flatnonzero(master == np.arange(N))
    col_of = -np.ones(N, dtype=int)
    col_of[masters] = np.arange(len(masters))
    rows, cols, vals = [], [], []
    eye = np.eye(d)
    cache: dict[tuple[int, ...], np.ndarray] = {}
    for a in range(N):
        m = master[a]
        if m == a:
            blk = eye
        else:
            w = words[a]
            if w not in cache:
                cache[w] = irrep_action(rep.word_image(w), spec.p).entries
            blk = cache[w]
        r0, c0 = a * d, col_of[m] * d
        ii, jj = np.nonzero(np.abs(blk) > 0) if m != a else (np.arange(d), np.arange(d))
        rows.append(r0 + ii)
        cols.append(c0 + jj)
        vals.append(blk[ii, jj])
    C = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(N * d, len(masters) * d), dtype=complex)
    Kd = sp.kron(K, sp.identity(d), format="csr")
    Md = sp.kron(M, sp.identity(d), format="csr")
    Kr = (C.conj().T @ Kd @ C).tocsr()
    Mr = (C.conj().T @ Md @ C).tocsr()
    Kr = 0.5 * (Kr + Kr.conj().T)
    Mr = 0.5 * (Mr + Mr.conj().T)
    h = mesh.h_mesh
    meta = {"mesh": mesh.kind, "resolution": mesh.resolution, "n_nodes": int(N),
            "n_masters": int(len(masters)), "h_mesh": h, "trust_c": TRUST_C,
            "trust_lambda": TRUST_C / h ** 2, "p": spec.p}
    return DiscreteLaplacian(Kr.tocsr(), Mr.tocsr(), C, mesh, spec.p, meta,
                             BundleSpec(geom, rep, spec.p))


# ---------------------------------------------------------------------------
# Pointwise evaluation of eigensections


class _Locator:
    """Triangle lookup by nearest centroids and barycentric tests."""

    def __init__(self, mesh: Mesh, k: int = 16):
        P = mesh.nodes[mesh.triangles]
        self.P = P
        self.tree = cKDTree(P.mean(axis=1))
        self.k = min(k, len(P))
        self.tris = mesh.triangles

    def locate(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Triangle index and barycentric coordinates for points ``x`` (n, 2)."""
        x = np.atleast_2d(x)
        _, cand = self.tree.query(x, k=self.k)
        P = self.P[cand]  # (n, k, 3, 2)
        v0, v1, v2 = P[..., 0, :], P[..., 1, :], P[..., 2, :]
        det = ((v1[..., 0] - v0[..., 0]) * (v2[..., 1] - v0[..., 1])
               - (v2[..., 0] - v0[..., 0]) * (v1[..., 1] - v0[..., 1]))
        d = x[:, None, :] - v0
        l1 = (d[..., 0] * (v2[..., 1] - v0[..., 1]) - (v2[..., 0] - v0[..., 0]) * d[..., 1]) / det
        l2 = ((v1[..., 0] - v0[..., 0]) * d[..., 1] - d[..., 0] * (v1[..., 1] - v0[..., 1])) / det
        bary = np.stack([1 - l1 - l2, l1, l2], -1)
        best = np.argmax(bary.min(axis=-1), axis=1)
        rows = np.arange(len(x))
        if np.any(bary[rows, best].min(axis=-1) < -1e-6):
            raise MeshError("point outside the triangulated fundamental domain")
        return cand[rows, best], bary[rows, best]


def section_at(disc: DiscreteLaplacian, vec: np.ndarray, y) -> np.ndarray:
    """Value ``u(y) in C^{p+1}`` of an eigensection at any point of the cover.

    ``y`` is folded into the fundamental domain, ``y = gamma . x``, the P1
    interpolant is evaluated at ``x`` and ``u(y) = rho(gamma) u(x)``.
    """
    from .base_geometry import fold_point

    geom = disc.spec.geometry
    if isinstance(geom, TorusGeometry):
        x, word = fold_point(geom, np.asarray(y, dtype=float))
        xr = np.asarray(x, dtype=float)
    else:
        x, word = fold_point(geom, complex(y))
        xr = np.array([x.real, x.imag])
    if disc._locator is None:
        disc._locator = _Locator(disc.mesh)
    tri, bary = disc._locator.locate(xr[None, :])
    U = disc.full_values(vec)
    ux = np.einsum("i,id->d", bary[0], U[disc.mesh.triangles[tri[0]]])
    if word:
        ux = irrep_action(disc.spec.rep.word_image(word), disc.p).entries @ ux
    return ux


def husimi_density(disc: DiscreteLaplacian, vec: np.ndarray, y, z: np.ndarray) -> np.ndarray:
    """``|u(y)(z)|^2``: fibre-resolved density of an eigensection at ``(y, z)``."""
    from .fibre_quantization import section_values

    return np.abs(section_values(section_at(disc, vec, y), z)) ** 2


# ---------------------------------------------------------------------------
# Eigensolver


def _rayleigh_ritz(K, M, V):
    KV = V.conj().T @ (K @ V)
    MV = V.conj().T @ (M @ V)
    KV = 0.5 * (KV + KV.conj().T)
    MV = 0.5 * (MV + MV.conj().T)
    lam, Y = sla.eigh(KV, MV)
    return lam, V @ Y


def certify(K, M, lam: np.ndarray, V: np.ndarray) -> dict:
    """Residuals and M-Gram defect of computed eigenpairs."""
    KV = K @ V
    MV = M @ V
    R = KV - MV * lam[None, :]
    res = np.linalg.norm(R, axis=0) / np.linalg.norm(MV, axis=0)
    gram = V.conj().T @ MV
    return {"max_rel_residual": float(np.max(res / (1 + np.abs(lam)))) if len(lam) else 0.0,
            "gram_defect": float(np.abs(gram - np.eye(len(lam))).max()) if len(lam) else 0.0}


def factorize(K, M, sigma: float):
    """Factor ``K - sigma M`` without pivoting (an LDL^* in effect).

    SuperLU in symmetric mode with a symmetric fill-reducing ordering and
    no row pivoting leaves ``D`` on the diagonal of ``U``; by Sylvester's law
    the number of negative entries is the number of eigenvalues below
    ``sigma``. Returns ``(lu, inertia)``.
    """
    lu = spla.splu((K - sigma * M).tocsc(), permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                   options={"SymmetricMode": True})
    dg = lu.U.diagonal()
    return lu, int(np.count_nonzero(dg.real < 0))


def inertia(K, M, sigma: float) -> int:
    """Number of eigenvalues below ``sigma``; the factorization is freed on return."""
    return factorize(K, M, sigma)[1]


def _shift_invert_slice(K, M, sigma: float, k: int, tol: float, seed: int, lu=None):
    n = K.shape[0]
    t0 = time.perf_counter()
    if lu is None:
        lu, _ = factorize(K, M, sigma)
    t_fact = time.perf_counter() - t0
    op = spla.LinearOperator((n, n), matvec=lu.solve, dtype=complex)
    rng = np.random.default_rng(seed)
    v0 = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    ncv = min(n - 1, max(2 * k + 1, 20))
    vals, vecs = spla.eigsh(K, k=k, M=M, sigma=sigma, OPinv=op, v0=v0, ncv=ncv, tol=tol,
                            which="LM", maxiter=5000)
    lam, V = _rayleigh_ritz(K, M, vecs)
    return lam, V, t_fact, time.perf_counter() - t0


def solve_dense(disc: DiscreteLaplacian, count: int) -> EigenData:
    lam, V = sla.eigh(disc.K.toarray(), disc.M.toarray())
    return EigenData(disc.p, lam[:count], V[:, :count],
                     metadata={**disc.metadata, "solver": "dense"},
                     certificate=certify(disc.K, disc.M, lam[:count], V[:, :count]))


def solve_lowest(disc: DiscreteLaplacian, count: int, tol: float = 1e-10, seed: int = 0,
                 slice_size: int = 120) -> EigenData:
    """Lowest ``count`` eigenpairs of ``K u = lambda M u``.

    Shift-invert Arnoldi/Lanczos (ARPACK, M-inner product) on a
    pivot-free sparse factorization of ``K - sigma M``; for large counts the
    spectrum is sliced. Ritz vectors are refined by a Rayleigh-Ritz step,
    which also makes them M-orthonormal, and every slice is certified
    complete by Sylvester inertia counts.

    Raises
    ------
    ConvergenceError
        If a returned pair misses ``|Ku - lam Mu| / |Mu| <= 1e-8 (1 + lam)``
        or a slice stays incomplete after retries.
    """
    if count > 0.2 * disc.ndof and disc.ndof > 50:
        raise ValueError("count must be at most 0.2 x matrix dimension")
    if disc.ndof <= 50:
        return solve_dense(disc, count)
    lam, V, info = _sliced(disc.K, disc.M, count=count, lam_max=None, tol=tol, seed=seed,
                           slice_size=max(slice_size, min(count + 16, 2 * slice_size)))
    cert = info.pop("certificate")
    lam, V = lam[:count], V[:, :count]
    if cert["max_rel_residual"] > 1e-8:
        raise ConvergenceError(f"residual {cert['max_rel_residual']:.2e} exceeds 1e-8",
                               residuals=cert)
    meta = {**disc.metadata, "solver": "shift-invert ARPACK + Rayleigh-Ritz", "tol": tol,
            "seed": seed, **info}
    return EigenData(disc.p, lam, V, metadata=meta, certificate=cert)


def solve_window(disc: DiscreteLaplacian, lam_max: float, tol: float = 1e-10, seed: int = 0,
                 slice_size: int = 100, vector_store=None) -> EigenData:
    """All eigenpairs with ``lambda <= lam_max``, by spectrum slicing.

    ``vector_store(n_rows, n_cols)`` may return a writable array (for
    example a disk memmap) that receives the eigenvectors.
    """
    lam, V, info = _sliced(disc.K, disc.M, count=None, lam_max=lam_max, tol=tol, seed=seed,
                           slice_size=slice_size, vector_store=vector_store)
    cert = info.pop("certificate")
    if cert["max_rel_residual"] > 1e-8:
        raise ConvergenceError(f"residual {cert['max_rel_residual']:.2e} exceeds 1e-8",
                               residuals=cert)
    meta = {**disc.metadata, "solver": "sliced shift-invert ARPACK + Rayleigh-Ritz",
            "tol": tol, "seed": seed, "lam_max": lam_max, "complete_to": lam_max, **info}
    return EigenData(disc.p, lam, V, metadata=meta, certificate=cert)


def _pick_cut(cand: np.ndarray, lo: float, hi: float) -> float:
    """Midpoint of the widest gap among eigenvalues in the top fifth of ``[lo, hi)``."""
    top = cand[cand > hi - 0.2 * (hi - lo)]
    if len(top) < 2:
        return hi
    g = int(np.argmax(np.diff(top)))
    return 0.5 * (top[g] + top[g + 1])


def _sliced(K, M, count, lam_max, tol, seed, slice_size, vector_store=None, max_retries=4):
    """Spectrum slicing; each accepted interval ``[cut, new_cut)`` is certified
    by the inertia difference ``nu(new_cut) - nu(cut)``."""
    n = K.shape[0]
    sigma = -1.0
    cut, nu_cut = -1.0, 0  # K is positive semidefinite
    # total size is known up front, so slices stream straight into the store
    n_total = count if count is not None else inertia(K, M, lam_max)
    if vector_store is not None:
        V_all = vector_store(n, n_total)
    else:
        V_all = np.empty((n, n_total), dtype=complex)
    lam_parts, sigmas, certs = [], [], []
    n_done = 0
    half_width = None
    retries = 0
    k = min(slice_size, n - 2)
    it = 0
    while True:
        it += 1
        if it > 1000:  # pragma: no cover
            raise ConvergenceError("spectrum slicing did not finish")
        lu, _ = factorize(K, M, sigma)
        lam, V, tf, tt = _shift_invert_slice(K, M, sigma, k, tol, seed + it, lu=lu)
        # the ARPACK wrapper keeps lu.solve in a reference cycle; collect it now so
        # at most one factorization is alive
        del lu
        gc.collect()
        d = np.abs(lam - sigma).max()
        log.debug("shift sigma=%.4f k=%d reach %.4f in %.1fs", sigma, k, d, tt)
        safe = d - 1e-6 * (1 + abs(sigma))
        lo, hi = sigma - safe, sigma + safe
        if lo > cut:
            sigma -= (lo - cut) + 0.25 * d
            continue
        cand = np.sort(lam[(lam >= cut) & (lam < hi)])
        new_cut = _pick_cut(cand, max(cut, lo), hi)
        if count is not None and n_done + np.count_nonzero(cand < new_cut) > count:
            # stop at the first gap above the requested count
            need = count - n_done
            above = cand[need - 1:]
            gaps = np.diff(above)
            g = int(np.argmax(gaps > 1e-8 * (1 + above[:-1]))) if len(gaps) else 0
            if len(gaps) and gaps[g] > 1e-8 * (1 + above[g]):
                new_cut = 0.5 * (above[g] + above[g + 1])
        if lam_max is not None and new_cut > lam_max:
            below, above = cand[cand <= lam_max], cand[cand > lam_max]
            if len(above):
                # any point in (lam_max, above.min()) is a valid final cut
                new_cut = 0.5 * (lam_max + above.min())
        keep = (lam >= cut) & (lam < new_cut)
        nu_new = inertia(K, M, new_cut)
        if np.count_nonzero(keep) != nu_new - nu_cut:
            retries += 1
            log.warning("slice at sigma=%.4f found %d of %d eigenvalues in [%.4f, %.4f); retry",
                        sigma, np.count_nonzero(keep), nu_new - nu_cut, cut, new_cut)
            if retries > max_retries:
                raise ConvergenceError(
                    f"slice at sigma={sigma} incomplete after {max_retries} retries")
            k = min(int(k * 1.5) + 8, n - 2)
            continue
        retries = 0
        order = np.argsort(lam[keep], kind="stable")
        lam_k, V_k = lam[keep][order], V[:, keep][:, order]
        certs.append(certify(K, M, lam_k, V_k))
        lam_parts.append(lam_k)
        m = min(len(lam_k), n_total - n_done)
        V_all[:, n_done:n_done + m] = V_k[:, :m]
        n_done += len(lam_k)
        del V, V_k
        sigmas.append(float(sigma))
        log.info("slice %d sigma=%.3f kept %d (total %d) cut %.4f fact %.1fs total %.1fs",
                 len(sigmas), sigma, len(lam_k), n_done, new_cut, tf, tt)
        cut, nu_cut = new_cut, nu_new
        half_width = d
        k = min(slice_size, n - 2)
        if count is not None and n_done >= count:
            break
        if lam_max is not None and cut > lam_max:
            break
        sigma = cut + 0.8 * half_width
    lam_all = np.concatenate(lam_parts)[:n_total]
    if len(lam_all) < n_total:  # pragma: no cover
        raise ConvergenceError(f"found {len(lam_all)} of {n_total} eigenvalues")
    cert = {"max_rel_residual": max(c["max_rel_residual"] for c in certs),
            "gram_defect": max(c["gram_defect"] for c in certs),
            "inertia_count": int(nu_cut), "complete_below": float(cut)}
    info = {"slices": len(sigmas), "sigmas": sigmas, "certificate": cert}
    return lam_all, V_all, info


def counting_function(eigs: EigenData | Sequence[EigenData], lam: float,
                      check_trust: bool = True) -> np.ndarray | int:
    """Number of eigenvalues ``<= lam`` for each member of an ensemble.

    Raises
    ------
    ValueError
        If ``lam`` exceeds the discretization trust threshold or the largest
        computed eigenvalue (the count would be incomplete).
    """
    single = isinstance(eigs, EigenData)
    ens = [eigs] if single else list(eigs)
    out = []
    for e in ens:
        trust = e.metadata.get("trust_lambda", np.inf)
        if check_trust and lam > trust:
            raise ValueError(f"lambda={lam} is above the trust threshold {trust:.3g}")
        if lam > e.eigenvalues[-1] and not e.metadata.get("complete_to", 0) >= lam:
            raise ValueError(f"lambda={lam} exceeds the computed range {e.eigenvalues[-1]:.4g}")
        out.append(int(np.searchsorted(e.eigenvalues, lam, side="right")))
    return out[0] if single else np.array(out)


def weyl_ratio(eig: EigenData, lam: float, area: float, **kw) -> float:
    """``N(lam) / (dim F_p * Area * lam / (4 pi))``."""
    return counting_function(eig, lam, **kw) / ((eig.p + 1) * area * lam / (4 * np.pi))
