import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from flatqe.fibre_quantization import (FibreSymbol, QuadratureError, QuadratureRule,
                                       bergman_diagonal, fs_integral, product_remainder,
                                       stirling_concentration, stirling_rate_fit, stirling_terms,
                                       toeplitz_kernel_diagonal, toeplitz_matrix)
from flatqe.group_rep import haar_su2, irrep_action

X1, X2, X3 = (FibreSymbol.bloch(a) for a in range(3))


def random_poly(seed: int, max_deg: int = 3, real: bool = False) -> FibreSymbol:
    rng = np.random.default_rng(seed)
    n = int(rng.integers(0, max_deg + 1))
    coeffs = {}
    for a1 in range(n + 1):
        for b1 in range(n + 1):
            c = complex(rng.standard_normal(), rng.standard_normal())
            coeffs[(n - a1, a1, n - b1, b1)] = c
    H = FibreSymbol.polynomial(coeffs)
    if real:
        H = FibreSymbol.polynomial({k: 0.5 * v for k, v in (H + H.conj()).coeffs.items()}, real=True)
    return H


def beta_oracle(p: int, j: int) -> Fraction:
    """``c_j^2 int_0^1 t^j (1-t)^(p-j) (1 - 2t) dt`` with ``t = |z1|^2``, exactly."""
    def beta(a, b):  # B(a, b) for positive integers
        return Fraction(math.factorial(a - 1) * math.factorial(b - 1), math.factorial(a + b - 1))
    c2 = (p + 1) * math.comb(p, j)
    return c2 * (beta(j + 1, p - j + 1) - 2 * beta(j + 2, p - j + 1))


# -- quadrature and integrals -------------------------------------------------

def test_quadrature_weights_sum_to_one():
    q = QuadratureRule.build(20)
    assert q.weights.sum() == pytest.approx(1.0, abs=1e-14)
    assert np.all(q.weights > 0)


@given(st.integers(0, 6), st.integers(0, 6))
def test_quadrature_exact_on_monomials(a0, a1):
    q = QuadratureRule.build(16)
    z = q.points
    vals = np.abs(z[:, 0]) ** (2 * a0) * np.abs(z[:, 1]) ** (2 * a1)
    exact = math.factorial(a0) * math.factorial(a1) / math.factorial(a0 + a1 + 1)
    assert q.integrate(vals) == pytest.approx(exact, abs=1e-13)


def test_fs_integral_examples():
    assert fs_integral(FibreSymbol.constant(1.0)) == pytest.approx(1.0, abs=1e-15)
    t = FibreSymbol.from_affine({(1, 1, 1): 1.0})  # |w|^2 / (1 + |w|^2)
    assert fs_integral(t) == pytest.approx(0.5, abs=1e-15)
    assert abs(fs_integral(X3)) < 1e-15


@given(st.integers(0, 10_000))
def test_fs_integral_exact_matches_quadrature(seed):
    H = random_poly(seed)
    S = FibreSymbol.sampled(H.__call__, H.degree, real=False)
    assert abs(fs_integral(H) - fs_integral(S)) < 1e-12


def test_sampled_symbol_rejects_coarse_rule():
    S = FibreSymbol.sampled(lambda z: np.abs(z[..., 0]) ** 8, 4)
    with pytest.raises(QuadratureError):
        fs_integral(S, QuadratureRule.build(2))
    with pytest.raises(QuadratureError):
        toeplitz_matrix(S, 10, QuadratureRule.build(8))


# -- Toeplitz matrices ----------------------------------------------------------

@pytest.mark.parametrize("p", [0, 1, 7, 64])
def test_toeplitz_of_one_is_identity(p):
    assert np.abs(toeplitz_matrix(FibreSymbol.constant(1.0), p).entries - np.eye(p + 1)).max() < 1e-12


def test_toeplitz_x3_diagonal_against_beta_oracle():
    for p in range(0, 65):
        T = toeplitz_matrix(X3, p).entries
        j = np.arange(p + 1)
        assert np.abs(T - np.diag(np.diag(T))).max() < 1e-12
        oracle = np.array([float(beta_oracle(p, k)) for k in j])
        assert np.abs(np.diag(T) - oracle).max() < 1e-12
        assert np.abs(np.diag(T) - (p - 2 * j) / (p + 2)).max() < 1e-12
        assert beta_oracle(p, 0) == Fraction(p, p + 2)


@given(st.integers(0, 10_000), st.integers(1, 64))
def test_normalized_trace_identity(seed, p):
    H = random_poly(seed)
    assert abs(toeplitz_matrix(H, p).normalized_trace() - fs_integral(H)) < 1e-12


@given(st.integers(0, 10_000), st.integers(0, 20))
def test_sampled_toeplitz_matches_exact(seed, p):
    H = random_poly(seed, max_deg=2)
    S = FibreSymbol.sampled(H.__call__, H.degree, real=False)
    assert np.abs(toeplitz_matrix(H, p).entries - toeplitz_matrix(S, p).entries).max() < 1e-11


@given(st.integers(0, 10_000), st.integers(0, 24))
def test_real_symbol_gives_hermitian(seed, p):
    T = toeplitz_matrix(random_poly(seed, real=True), p).entries
    assert np.abs(T - T.conj().T).max() < 1e-11


def test_norm_bound(rng):
    for seed in range(100):
        H = random_poly(seed, max_deg=2)
        p = int(rng.integers(1, 24))
        assert toeplitz_matrix(H, p).norm() <= H.sup_estimate(200) * (1 + 1e-3) + 1e-9


@given(st.integers(0, 10_000), st.integers(0, 24))
def test_positivity_of_form_defect(seed, p):
    H = random_poly(seed, max_deg=2)
    A = toeplitz_matrix(H, p).entries
    B = toeplitz_matrix(H.conj() * H, p).entries
    D = B - A.conj().T @ A
    assert np.linalg.eigvalsh(0.5 * (D + D.conj().T)).min() >= -1e-10


@given(st.integers(0, 10_000), st.integers(0, 2 ** 31), st.integers(0, 16))
def test_equivariance(seed, gseed, p):
    H = random_poly(seed, max_deg=2)
    g = haar_su2(np.random.default_rng(gseed))
    R = irrep_action(g, p).entries
    lhs = toeplitz_matrix(H.compose(g.inv()), p).entries
    rhs = R @ toeplitz_matrix(H, p).entries @ R.conj().T
    assert np.abs(lhs - rhs).max() < 1e-9


# -- kernel, Bergman, product remainder -------------------------------------------

def test_bergman_diagonal(rng):
    assert bergman_diagonal(0) == pytest.approx(1.0)
    assert bergman_diagonal(5) == pytest.approx(6.0)
    z = rng.standard_normal((50, 2)) + 1j * rng.standard_normal((50, 2))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    assert all(bergman_diagonal(5, zz) == pytest.approx(6.0) for zz in z)
    q = QuadratureRule.build(12)
    from flatqe.fibre_quantization import basis_values
    vals = np.sum(np.abs(basis_values(5, q.points)) ** 2, -1)
    assert q.integrate(vals) == pytest.approx(6.0, abs=1e-12)


def test_kernel_expansion_first_order():
    H = X3 * X3 + X1 * 0.5
    q = QuadratureRule.build(8)
    errs = []
    for p in (16, 32, 64, 128, 256):
        K = toeplitz_kernel_diagonal(toeplitz_matrix(H, p), q.points)
        # K(z,z) / (p+1) is the Berezin transform of T_H
        errs.append(p * np.abs(K.real / (p + 1) - H(q.points)).max())
    assert max(errs) / min(errs) < 1.5
    assert max(errs) < 10


def test_product_remainder_with_one_vanishes():
    assert product_remainder(FibreSymbol.constant(1.0), X1 * X2, 12) < 1e-12


def test_product_remainder_x3_scaled_converges():
    vals = [p * product_remainder(X3, X3, p) for p in (8, 16, 32, 64, 128)]
    assert min(vals) > 0
    diffs = np.abs(np.diff(vals))
    assert np.all(diffs[1:] <= diffs[:-1] + 1e-12)
    assert abs(vals[-1] - vals[-2]) / vals[-1] < 0.05


# -- Stirling concentration -----------------------------------------------------------

def test_stirling_examples():
    j, vals = stirling_terms(6)
    assert list(j) == [2, 3, 4]
    # the j = 3 term at |z0| = 1/2; the sup over the index range is the j = 4 term
    assert vals[1] == pytest.approx(0.9607, abs=1e-4)
    assert stirling_concentration(6) == pytest.approx(math.sqrt(105) * 0.25 * 0.75 ** 2, rel=1e-14)
    # middle-index terms decrease; the sup over the index range only decays eventually
    mid = {p: stirling_terms(p)[1][list(stirling_terms(p)[0]).index(p // 2)] for p in (6, 60)}
    assert mid[60] < mid[6]
    assert stirling_concentration(300) < stirling_concentration(6)
    with pytest.raises(ValueError):
        stirling_concentration(2)


def test_stirling_boundary_maximum(rng):
    # brute force over |z0| <= 1/2 agrees with the boundary formula
    p = 30
    r0 = np.linspace(0.0, 0.5, 2001)
    j = np.arange(10, 21)
    from flatqe.group_rep import monomial_norms
    c = monomial_norms(p)[j]
    vals = c[:, None] * r0[None] ** (p - j[:, None]) * np.sqrt(1 - r0 ** 2)[None] ** j[:, None]
    assert vals.max() == pytest.approx(stirling_concentration(p), rel=1e-12)


def test_stirling_rate_negative():
    a, _, r2 = stirling_rate_fit(range(30, 301, 10))
    assert a < 0
    assert r2 > 0.95
