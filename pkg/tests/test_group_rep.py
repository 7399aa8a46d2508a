import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from flatqe.group_rep import (GroupElement, RepresentationError, generate_dense_rep, genus2_rep,
                              haar_su2, irrep_action, is_generic, monomial_norms,
                              normalize_cp1, orbit_density_diagnostic, theta_pair)

seeds = st.integers(0, 2 ** 32 - 1)


def su2(seed):
    return haar_su2(np.random.default_rng(seed))


# -- monomial norms ---------------------------------------------------------

def test_monomial_norms_examples():
    assert np.allclose(monomial_norms(0), [1.0])
    assert np.allclose(monomial_norms(1), [math.sqrt(2), math.sqrt(2)])
    assert monomial_norms(6)[3] == pytest.approx(math.sqrt(7 * 20), abs=1e-12)
    assert monomial_norms(6)[3] == pytest.approx(11.8322, abs=1e-4)


# -- group elements ---------------------------------------------------------

def test_group_element_rejects_non_unitary():
    with pytest.raises(RepresentationError):
        GroupElement(np.array([[2, 0], [0, 0.5]]))
    with pytest.raises(RepresentationError):
        GroupElement(np.diag([1j, 1j]))  # det = -1


def test_irrep_action_rejects_non_unitary_array():
    with pytest.raises(RepresentationError):
        irrep_action(np.array([[1.0, 1.0], [0.0, 1.0]]), 2)


# -- irrep_action examples ---------------------------------------------------

@pytest.mark.parametrize("p", [0, 1, 5, 20])
def test_irrep_identity(p):
    assert np.allclose(irrep_action(GroupElement.identity(), p).entries, np.eye(p + 1), atol=1e-14)


@given(seeds)
def test_irrep_p1_is_conjugate(seed):
    g = su2(seed)
    assert np.allclose(irrep_action(g, 1).entries, np.conj(g.entries), atol=1e-13)


@given(st.floats(-3, 3), st.integers(0, 30))
def test_irrep_diagonal_weights(theta, p):
    g = theta_pair(theta)[0]
    j = np.arange(p + 1)
    want = np.diag(np.exp(1j * theta * np.pi * (p - 2 * j) / 2))
    assert np.allclose(irrep_action(g, p).entries, want, atol=1e-11)


def test_irrep_matches_direct_definition(rng):
    # (g.s)(z) = s(g^{-1} z) evaluated on random points, for a monomial basis section
    from flatqe.fibre_quantization import basis_values
    g = haar_su2(rng)
    p = 4
    R = irrep_action(g, p).entries
    z = rng.standard_normal((7, 2)) + 1j * rng.standard_normal((7, 2))
    lhs = basis_values(p, (g.inv().entries @ z.T).T)  # e_k(g^{-1} z)
    rhs = basis_values(p, z) @ R  # sum_j e_j(z) R[j, k]
    assert np.allclose(lhs, rhs, atol=1e-12)


# -- invariants --------------------------------------------------------------

@given(seeds, seeds, st.integers(0, 16))
def test_irrep_multiplicative(s1, s2, p):
    g, h = su2(s1), su2(s2)
    lhs = irrep_action(g @ h, p).entries
    rhs = irrep_action(g, p).entries @ irrep_action(h, p).entries
    assert np.linalg.norm(lhs - rhs, 2) <= 1e-9


@given(seeds, st.integers(0, 64))
def test_irrep_unitary(seed, p):
    m = irrep_action(su2(seed), p).entries
    assert np.abs(m @ m.conj().T - np.eye(p + 1)).max() <= 1e-10


@given(seeds, st.integers(0, 64))
def test_irrep_inverse_is_adjoint(seed, p):
    g = su2(seed)
    assert np.abs(irrep_action(g.inv(), p).entries - irrep_action(g, p).entries.conj().T).max() <= 1e-10


# -- genus-two representation ------------------------------------------------

def test_genus2_theta_zero_trivial():
    rep = genus2_rep(0.0)
    for g in rep.images:
        assert np.allclose(g.entries, np.eye(2))


def test_genus2_relator_random_theta(rng):
    for theta in rng.uniform(-4, 4, 100):
        assert np.abs(genus2_rep(theta).relator_image() - np.eye(2)).max() <= 1e-10


def test_genus2_first_image():
    t = math.sqrt(2) - 1
    rep = genus2_rep(t)
    want = np.diag([np.exp(-1j * t * np.pi / 2), np.exp(1j * t * np.pi / 2)])
    assert np.allclose(rep.images[0].entries, want, atol=1e-15)
    assert rep.images[0] == rep.images[1] or np.allclose(rep.images[0].entries, rep.images[1].entries)


def test_dense_rep_lifts_of_rotations():
    t = math.sqrt(2) - 1
    rep = generate_dense_rep(2, target="SO3", theta=t)
    R1, R2 = rep.images[0].to_so3(), rep.images[2].to_so3()
    a = t * np.pi
    # rotations by theta*pi about the z and x axes (up to orientation)
    assert np.isclose(np.trace(R1), 1 + 2 * math.cos(a))
    assert np.isclose(np.trace(R2), 1 + 2 * math.cos(a))
    assert np.allclose(R1 @ [0, 0, 1], [0, 0, 1])
    assert np.allclose(R2 @ [1, 0, 0], [1, 0, 0])


@pytest.mark.parametrize("seed", [0, 1, 7])
def test_dense_rep_relator_and_determinism(seed):
    a = generate_dense_rep(2, seed=seed)
    b = generate_dense_rep(2, seed=seed)
    assert np.abs(a.relator_image() - np.eye(2)).max() <= 1e-10
    for g, h in zip(a.images, b.images):
        assert np.array_equal(g.entries, h.entries)
    assert is_generic(a.images[0]) and is_generic(a.images[2])
    assert np.abs(a.images[0].entries @ a.images[2].entries
                  - a.images[2].entries @ a.images[0].entries).max() > 1e-3


def test_dense_rep_rejects_genus_one():
    with pytest.raises(RepresentationError):
        generate_dense_rep(1)


# -- orbit density -------------------------------------------------------------

NORTH = np.array([1.0, 0.0])


def test_orbit_trivial_rep_is_single_point():
    r = orbit_density_diagnostic(genus2_rep(0.0), NORTH, 200)
    # farthest mesh point from the north pole is close to the south pole
    assert r == pytest.approx(math.pi / 2, abs=0.05)


def test_orbit_dense_rep_covers():
    rep = generate_dense_rep(2, seed=3)
    assert orbit_density_diagnostic(rep, NORTH, 10_000) < 0.2


def test_orbit_monotone_in_budget():
    rep = genus2_rep(math.sqrt(2) - 1)
    vals = [orbit_density_diagnostic(rep, NORTH, b) for b in (10, 100, 1000, 5000)]
    assert all(b <= a for a, b in zip(vals, vals[1:]))


def test_orbit_rational_theta_stalls():
    rep = genus2_rep(0.5)
    r1 = orbit_density_diagnostic(rep, NORTH, 2000)
    r2 = orbit_density_diagnostic(rep, NORTH, 20000)
    assert r2 > 0.2 and r2 == pytest.approx(r1, abs=1e-12)


def test_normalize_cp1_phase():
    z = normalize_cp1(np.array([1j, 1.0]))
    assert z[0].imag == 0 and z[0].real > 0
    assert np.isclose(np.linalg.norm(z), 1)
