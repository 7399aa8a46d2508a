import dataclasses
import math

import numpy as np
import pytest
import scipy.sparse as sp
from scipy.linalg import subspace_angles

from flatqe.base_geometry import TorusGeometry, mobius
from flatqe.bundle_spectra import (BundleSpec, DiscreteLaplacian, MeshError, assemble_fem,
                                   counting_function, husimi_density, octagon_mesh, section_at,
                                   solve_lowest, solve_window, torus_mesh, torus_spectrum_exact,
                                   weyl_ratio)
from flatqe.group_rep import GroupElement, SurfaceGroupRep, genus2_rep

from conftest import THETA

FOUR_PI2 = 4 * math.pi ** 2


def torus_spec(t1, t2, p):
    return BundleSpec(TorusGeometry(theta=(t1, t2)), None, p)


# -- closed-form torus ---------------------------------------------------------

def test_torus_trivial_p0():
    lam = torus_spectrum_exact(torus_spec(0, 0, 0), 9).eigenvalues
    assert np.allclose(lam, [0] + [FOUR_PI2] * 4 + [2 * FOUR_PI2] * 4)


def test_torus_trivial_twist_multiplicity():
    l0 = torus_spectrum_exact(torus_spec(0, 0, 0), 30).eigenvalues
    l2 = torus_spectrum_exact(torus_spec(0, 0, 2), 90).eigenvalues
    assert np.allclose(l2, np.repeat(l0, 3))


def test_torus_half_twist_ground_state():
    eig = torus_spectrum_exact(torus_spec(0.5, 0, 1), 4)
    assert eig.eigenvalues[0] == pytest.approx(FOUR_PI2 / 64, rel=1e-14)
    assert eig.eigenvalues[1] == pytest.approx(FOUR_PI2 / 64, rel=1e-14)


def test_torus_plane_wave_satisfies_boundary_condition():
    # u(x + e_i) = rho(e_i) u(x) with rho(e_i) acting by irrep weights
    from flatqe.bundle_spectra import torus_betas
    from flatqe.group_rep import irrep_action
    spec = torus_spec(0.3, 0.7, 2)
    betas = torus_betas((0.3, 0.7), 2)
    x = np.array([0.2, 0.4])
    for j, b in enumerate(betas):
        for i, e in enumerate(np.eye(2)):
            R = irrep_action(spec.rep.images[i], 2).entries
            v = np.zeros(3, complex)
            v[j] = 1
            shifted = np.exp(2j * np.pi * b @ (x + e)) * v
            assert np.allclose(shifted, R @ (np.exp(2j * np.pi * b @ x) * v))


def test_torus_rejects_non_diagonal_holonomy():
    g = GroupElement(np.array([[0, 1j], [1j, 0]]))
    rep = SurfaceGroupRep(1, (g, g))
    with pytest.raises(ValueError):
        torus_spectrum_exact(BundleSpec(TorusGeometry(), rep, 1), 5)


def test_counting_function_examples():
    eig = torus_spectrum_exact(torus_spec(0, 0, 0), 4000)
    assert counting_function(eig, 1.0) == 1
    for lam in (8000.0, 12000.0):
        assert counting_function(eig, lam) >= 500
        assert weyl_ratio(eig, lam, 1.0) == pytest.approx(1.0, abs=0.05)


# -- FEM -------------------------------------------------------------------------

def test_fem_trivial_constant_mode(octagon):
    disc = assemble_fem(BundleSpec(octagon, genus2_rep(0.0), 0), 8)
    eig = solve_lowest(disc, 3)
    assert abs(eig.eigenvalues[0]) < 1e-6
    u = disc.full_values(eig.vectors[:, 0])[:, 0]
    assert np.abs(u - u.mean()).max() < 1e-6 * np.abs(u).max()


def test_fem_matrices_hermitian_psd(octagon):
    disc = assemble_fem(BundleSpec(octagon, genus2_rep(THETA), 2), 6)
    K, M = disc.K, disc.M
    assert abs(K - K.conj().T).max() <= 1e-12 * abs(K).max()
    assert abs(M - M.conj().T).max() <= 1e-12 * abs(M).max()
    lam = np.linalg.eigvalsh(K.toarray())
    assert lam.min() >= -1e-9 * np.abs(lam).max()
    assert np.linalg.eigvalsh(M.toarray()).min() > 0


def test_constraint_blocks_unitary(octagon):
    disc = assemble_fem(BundleSpec(octagon, genus2_rep(THETA), 2), 4)
    C = disc.C.toarray()
    d = 3
    for a in range(disc.mesh.n_nodes):
        blk = C[a * d:(a + 1) * d]
        nz = np.flatnonzero(np.abs(blk).sum(0))
        B = blk[:, nz]
        assert B.shape == (3, 3)
        assert np.allclose(B @ B.conj().T, np.eye(3), atol=1e-12)


def test_fem_richardson_order(octagon):
    spec = BundleSpec(octagon, genus2_rep(0.0), 0)
    lams = [solve_lowest(assemble_fem(spec, n), 11).eigenvalues[1:11] for n in (8, 16, 32)]
    order = np.log2(np.abs(lams[0] - lams[1]) / np.abs(lams[1] - lams[2]))
    assert np.all((order > 1.5) & (order < 2.5))


def test_fem_torus_matches_closed_form():
    spec = torus_spec(0.5, 0.0, 1)
    fem = solve_lowest(assemble_fem(spec, 48), 20).eigenvalues
    exact = torus_spectrum_exact(spec, 20).eigenvalues
    assert np.abs(fem[1:] / exact[1:] - 1).max() < 0.03


def test_solver_diagonal_matrix(rng):
    vals = rng.permutation(np.arange(1.0, 301.0))
    disc = DiscreteLaplacian(sp.diags(vals.astype(complex)).tocsr(),
                             sp.identity(300, dtype=complex, format="csr"))
    eig = solve_lowest(disc, 10)
    assert np.allclose(eig.eigenvalues, np.arange(1.0, 11.0), atol=1e-10)


def test_solver_certificate(octagon):
    disc = assemble_fem(BundleSpec(octagon, genus2_rep(THETA), 1), 12)
    eig = solve_lowest(disc, 30)
    c = eig.certificate
    assert c["max_rel_residual"] <= 1e-8
    assert c["gram_defect"] <= 1e-8
    assert c["inertia_count"] >= 30
    assert np.all(np.diff(eig.eigenvalues) >= 0)
    assert eig.eigenvalues.min() >= -1e-9


def test_solver_rejects_large_count():
    disc = assemble_fem(torus_spec(0, 0, 0), 10)
    with pytest.raises(ValueError):
        solve_lowest(disc, 30)


def test_seed_stability(octagon):
    disc = assemble_fem(BundleSpec(octagon, genus2_rep(THETA), 1), 12)
    a = solve_lowest(disc, 24, seed=0)
    b = solve_lowest(disc, 24, seed=7)
    assert np.abs(a.eigenvalues - b.eigenvalues).max() < 1e-9
    lam = a.eigenvalues
    # compare eigenspaces cluster by cluster, skipping a cluster cut by the count
    edges = np.flatnonzero(np.diff(lam) > 1e-6 * (1 + lam[1:])) + 1
    bounds = [0, *edges.tolist()]
    L = np.linalg.cholesky(disc.M.toarray())
    for lo, hi in zip(bounds, bounds[1:]):
        A = L.conj().T @ a.vectors[:, lo:hi]
        B = L.conj().T @ b.vectors[:, lo:hi]
        assert subspace_angles(A, B).max() < 1e-6


def test_window_solver_complete(octagon):
    disc = assemble_fem(BundleSpec(octagon, genus2_rep(THETA), 0), 12)
    win = solve_window(disc, 60.0, slice_size=20)
    low = solve_lowest(disc, len(win) + 3)
    assert np.allclose(win.eigenvalues, low.eigenvalues[:len(win)], atol=1e-8)
    assert low.eigenvalues[len(win)] > 60.0
    assert win.metadata["complete_to"] == 60.0


def test_trust_threshold(octagon):
    disc = assemble_fem(BundleSpec(octagon, genus2_rep(0.0), 0), 8)
    eig = solve_lowest(disc, 20)
    with pytest.raises(ValueError):
        counting_function(eig, disc.trust_lambda * 1.01)
    with pytest.raises(ValueError):
        counting_function(eig, eig.eigenvalues[-1] + 1)  # beyond the computed range


# -- gauge covariance -----------------------------------------------------------------

def test_gauge_covariance_torus_translation():
    spec = torus_spec(0.3, 0.7, 1)
    m = torus_mesh(12)
    shifted = dataclasses.replace(m, nodes=m.nodes + [1.0, 0.0],
                                  act=lambda l, x: m.act(l, x))
    a = solve_lowest(assemble_fem(spec, 12), 12).eigenvalues
    b = solve_lowest(assemble_fem(spec, 12, mesh=shifted), 12).eigenvalues
    assert np.allclose(a, b, atol=1e-9)


def test_gauge_covariance_octagon_deck_translate(octagon):
    # move the fundamental domain by a deck transformation gamma; pairings become
    # gamma T gamma^{-1}, the representation is conjugated by rho(gamma)
    rep = genus2_rep(THETA)
    m = octagon_mesh(12, octagon)
    Gm = octagon.letter_matrix(1)
    Gi = np.linalg.inv(Gm)

    def to_c(x):
        return x[..., 0] + 1j * x[..., 1]

    def to_r(w):
        return np.stack([w.real, w.imag], -1)

    nodes = to_r(mobius(Gm, to_c(m.nodes)))
    act = lambda l, x: to_r(mobius(Gm @ octagon.letter_matrix(l) @ Gi, to_c(x)))
    moved = dataclasses.replace(m, nodes=nodes, act=act)
    g = rep.images[0].entries
    conj = SurfaceGroupRep(2, tuple(GroupElement.from_matrix(g @ h.entries @ g.conj().T)
                                    for h in rep.images))
    a = solve_lowest(assemble_fem(BundleSpec(octagon, rep, 1), 12), 10).eigenvalues
    b = solve_lowest(assemble_fem(BundleSpec(octagon, conj, 1), 12, mesh=moved), 10).eigenvalues
    # the straight-edge triangulation of the moved domain is a different P1 space,
    # so agreement is up to the O(h^2) discretization error
    assert np.abs(a[1:] / b[1:] - 1).max() < 0.02


# -- mesh errors -----------------------------------------------------------------------

def test_unpaired_boundary_node_rejected():
    m = torus_mesh(6)
    nodes = m.nodes.copy()
    nodes[m.sides[0][2]] += [0.0, 0.03]
    with pytest.raises(MeshError, match="unpaired boundary nodes: node"):
        assemble_fem(torus_spec(0, 0, 0), 6, mesh=dataclasses.replace(m, nodes=nodes))


# -- eigensection values and Husimi gauge invariance -------------------------------------

@pytest.fixture(scope="module")
def octagon_p2():
    from flatqe.base_geometry import build_octagon
    disc = assemble_fem(BundleSpec(build_octagon(), genus2_rep(THETA), 2), 16)
    return disc, solve_lowest(disc, 6)


def _random_triples(octagon, n, seed):
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        x = complex(*rng.uniform(-0.6, 0.6, 2))
        if not octagon.contains(x):
            continue
        word = tuple(int(v) for v in rng.choice([1, 2, 3, 4, -1, -2, -3, -4],
                                                size=rng.integers(1, 4)))
        z = rng.standard_normal(2) + 1j * rng.standard_normal(2)
        out.append((x, z / np.linalg.norm(z), word))
    return out


def test_section_at_matches_nodes(octagon_p2):
    disc, eig = octagon_p2
    U = disc.full_values(eig.vectors[:, 3])
    for node in (0, 5, 40):
        x = complex(*disc.mesh.nodes[node])
        assert np.allclose(section_at(disc, eig.vectors[:, 3], x), U[node], atol=1e-12)


def test_husimi_gauge_invariance(octagon_p2, octagon):
    disc, eig = octagon_p2
    rep = disc.spec.rep
    v = eig.vectors[:, 4]
    worst = 0.0
    for x, z, word in _random_triples(octagon, 100, 1):
        y = complex(mobius(octagon.word_matrix(word), x))
        gz = rep.word_matrix(word) @ z
        a = husimi_density(disc, v, x, z)
        b = husimi_density(disc, v, y, gz)
        worst = max(worst, abs(a - b) / max(abs(a), 1e-300))
    assert worst < 1e-8


def test_husimi_negative_control(octagon_p2, octagon):
    # transporting the fibre point with rho(gamma)^{-1} instead must break invariance
    disc, eig = octagon_p2
    rep = disc.spec.rep
    v = eig.vectors[:, 4]
    bad = 0
    for x, z, word in _random_triples(octagon, 30, 2):
        y = complex(mobius(octagon.word_matrix(word), x))
        wrong = rep.word_matrix(word).conj().T @ z
        a = husimi_density(disc, v, x, z)
        b = husimi_density(disc, v, y, wrong)
        bad += abs(a - b) > 1e-6 * abs(a)
    assert bad >= 20
