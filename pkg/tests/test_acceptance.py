"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v``; the lines are repeated in the
terminal summary. Criteria 6, 9 and 10 use the octagon eigendata cache
(``$QE_CACHE_DIR`` or ``~/.cache/flatqe``); populate it first with
``python scripts/populate_cache.py`` or the first run will solve it.
"""

import math
from pathlib import Path

import numpy as np
import pytest

from flatqe.base_geometry import TorusGeometry, build_octagon, mobius, rhs_time_average_bound
from flatqe.bundle_spectra import (BundleSpec, assemble_fem, husimi_density, solve_lowest,
                                   torus_spectrum_exact, weyl_ratio)
from flatqe.cache import default_root
from flatqe.cli import eigendata
from flatqe.config import load_config
from flatqe.fibre_quantization import (FibreSymbol, fs_integral, product_remainder,
                                       stirling_rate_fit, toeplitz_matrix)
from flatqe.group_rep import genus2_rep, orbit_density_diagnostic
from flatqe.semiclassics import (Bump, PairingTable, density_one_extract, egorov_defect,
                                 functional_calculus_defect, matrix_elements, quantum_variance)
from flatqe.symbols import MixedSymbol

from conftest import ACCEPTANCE_LINES, THETA
from test_bundle_spectra import _random_triples
from test_fibre_quantization import beta_oracle, random_poly
from test_semiclassics import wave

ROOT = Path(__file__).resolve().parents[1]
X1, X2, X3 = (FibreSymbol.bloch(a) for a in range(3))
H_GRID = (1 / 8, 1 / 16, 1 / 32)


def record(k: int, ok: bool, detail: str):
    line = f"criterion {k:2d} {'PASS' if ok else 'FAIL'}: {detail}"
    ACCEPTANCE_LINES[k] = line
    print(line)
    assert ok, line


def nonincreasing(v, rel=0.2, abs_=1e-12):
    return all(b <= (1 + rel) * a + abs_ for a, b in zip(v, v[1:]))


# -- fibre quantization --------------------------------------------------------

def test_criterion_01_toeplitz_identities():
    worst_id = max(np.abs(toeplitz_matrix(FibreSymbol.constant(1.0), p).entries
                          - np.eye(p + 1)).max() for p in range(1, 65))
    worst_tr = 0.0
    for seed in range(50):
        H = random_poly(seed)
        ref = fs_integral(H)
        for p in range(1, 65):
            worst_tr = max(worst_tr, abs(toeplitz_matrix(H, p).normalized_trace() - ref))
    record(1, worst_id < 1e-12 and worst_tr < 1e-12,
           f"max |T_1 - I| = {worst_id:.2e}, max trace defect = {worst_tr:.2e} (tol 1e-12)")


def test_criterion_02_x3_diagonal_oracle():
    worst_formula = worst_oracle = 0.0
    for p in range(0, 65):
        d = np.diag(toeplitz_matrix(X3, p).entries).real
        j = np.arange(p + 1)
        worst_formula = max(worst_formula, np.abs(d - (p - 2 * j) / (p + 2)).max())
        oracle = np.array([float(beta_oracle(p, k)) for k in j])
        worst_oracle = max(worst_oracle, np.abs(d - oracle).max())
    record(2, max(worst_formula, worst_oracle) < 1e-12,
           f"max deviation from (p-2j)/(p+2) = {worst_formula:.2e}, "
           f"from beta oracle = {worst_oracle:.2e}")


def test_criterion_03_product_remainder():
    pairs = {"x3,x3": (X3, X3), "x1,x2": (X1, X2), "x3^2,x3": (X3 * X3, X3)}
    fl = {}
    for name, (H, G) in pairs.items():
        v = np.array([p * product_remainder(H, G, p) for p in (16, 32, 64, 128)])
        fl[name] = (v.max() - v.min()) / v.mean()
    worst = max(fl.values())
    record(3, worst < 0.25, "relative fluctuation of p*remainder: "
           + ", ".join(f"{k} {v:.3f}" for k, v in fl.items()) + " (tol 0.25)")


def test_criterion_04_stirling_rate():
    a, _, r2 = stirling_rate_fit(range(30, 301))
    record(4, a < 0 and r2 > 0.99, f"rate {a:.5f}, R^2 {r2:.4f} (need rate < 0, R^2 > 0.99)")


# -- spectra -------------------------------------------------------------------

def test_criterion_05_torus_oracle():
    cases = [(0.0, 0.0, 0), (0.5, 0.0, 1), (math.sqrt(2) - 1, math.sqrt(3) - 1, 2)]
    errs = []
    for t1, t2, p in cases:
        spec = BundleSpec(TorusGeometry(theta=(t1, t2)), None, p)
        fem = solve_lowest(assemble_fem(spec, 192), 50).eigenvalues
        exact = torus_spectrum_exact(spec, 50).eigenvalues
        nz = exact > 1e-9
        zero_ok = np.all(np.abs(fem[~nz]) < 1e-9)
        errs.append(np.abs(fem[nz] / exact[nz] - 1).max() if zero_ok else np.inf)
    record(5, max(errs) < 5e-3, "max relative error of first 50 eigenvalues: "
           + ", ".join(f"{e:.2e}" for e in errs) + " (tol 5e-3, mesh n=192)")


@pytest.fixture(scope="module")
def octagon_cfg():
    return load_config(ROOT / "configs" / "octagon_variance.yaml")


@pytest.fixture(scope="module")
def octagon_data(octagon_cfg):
    cfg = octagon_cfg
    out = {}
    for p in cfg.p:
        eig, disc, _ = eigendata(cfg, p, str(default_root()))
        out[p] = (eig, disc)
    return out


def test_criterion_06_weyl_law(octagon_data):
    ratios = []
    for p in (0, 1, 2):
        spec = BundleSpec(TorusGeometry(theta=(math.sqrt(2) - 1, math.sqrt(3) - 1)), None, p)
        eig = torus_spectrum_exact(spec, 3000)
        lam0 = eig.eigenvalues[499]
        for lam in np.linspace(lam0, eig.eigenvalues[-1], 25):
            ratios.append(("torus", p, weyl_ratio(eig, lam, spec.area)))
    area = build_octagon().area
    for p, (eig, _) in octagon_data.items():
        top = min(eig.metadata["complete_to"], eig.metadata["trust_lambda"])
        lam0 = eig.eigenvalues[299]
        for lam in np.linspace(lam0, top, 25):
            ratios.append(("octagon", p, weyl_ratio(eig, lam, area)))
    vals = np.array([r[2] for r in ratios])
    tor = vals[[r[0] == "torus" for r in ratios]]
    octo = vals[[r[0] == "octagon" for r in ratios]]
    record(6, bool(np.all((vals >= 0.9) & (vals <= 1.1))),
           f"torus ratios in [{tor.min():.4f}, {tor.max():.4f}], octagon ratios in "
           f"[{octo.min():.4f}, {octo.max():.4f}] for p <= 2 (need [0.9, 1.1])")


# -- semiclassics --------------------------------------------------------------

def _ratios(d):
    return [a / b if b > 0 else np.inf for a, b in zip(d, d[1:])]


def test_criterion_07_egorov_decay():
    spec = BundleSpec(TorusGeometry(theta=(0.3, 0.7)), None, 1)
    res = [egorov_defect(wave(), 1.0, h, spec) for h in H_GRID]
    r = _ratios([x.defect for x in res])
    ok = all(1.3 <= x <= 3 for x in r) and all(x.meaningful for x in res)
    record(7, ok, "defects " + ", ".join(f"{x.defect:.2e}" for x in res)
           + f", ratios {', '.join(f'{x:.2f}' for x in r)}, meaningful "
           f"{[x.meaningful for x in res]} (need ratios in [1.3, 3])")


def test_criterion_08_functional_calculus():
    spec = BundleSpec(TorusGeometry(theta=(0.3, 0.7)), None, 1)
    d = [functional_calculus_defect(spec, Bump(0.5, 2.0), h) for h in H_GRID]
    r = _ratios(d)
    record(8, all(1.3 <= x <= 3 for x in r),
           "defects " + ", ".join(f"{x:.2e}" for x in d)
           + f", ratios {', '.join(f'{x:.2f}' for x in r)} (need ratios in [1.3, 3])")


@pytest.fixture(scope="module")
def octagon_tables(octagon_cfg, octagon_data):
    geom = octagon_cfg.build_geometry()
    syms = octagon_cfg.build_symbols()
    quad = geom.quadrature()
    return [matrix_elements(eig, syms, geom, disc, quad) for eig, disc in octagon_data.values()]


def test_criterion_09_variance_trend(octagon_cfg, octagon_tables):
    hs = octagon_cfg.h_grid
    names = octagon_tables[0].names
    bad, lines = [], []
    for s, name in enumerate(names):
        V = np.array([[r.variance for r in quantum_variance(octagon_tables, h, octagon_cfg.window,
                                                            symbol=s)] for h in hs])  # (h, p)
        per_p = all(nonincreasing(V[:, k]) for k in range(V.shape[1]))
        uniform = nonincreasing(V.max(axis=1))
        if not (per_p and uniform):
            bad.append(name)
        lines.append(f"{name} max_p {np.array2string(V.max(axis=1), precision=3)}")
    record(9, not bad, "; ".join(lines)
           + (f"; violations: {bad}" if bad else "") + " (20% slack)")


def test_criterion_10_extraction(octagon_tables):
    rep = density_one_extract(octagon_tables)
    cheb = all(w.chebyshev_ok for w in rep.windows)
    rng = np.random.default_rng(7)
    n = 4000
    lam = np.sort(rng.uniform(1, 4 ** 5, n))
    dev = np.zeros((3, n))
    planted = rng.choice(n, n // 10, replace=False)
    dev[rng.integers(0, 3, len(planted)), planted] = 2.0
    tab = PairingTable(0, lam, dev.astype(complex), np.zeros(3, complex), ("a", "b", "c"),
                       {"complete_to": 4.0 ** 5})
    # level 2 checks all three planted symbols
    syn = density_one_extract([tab], levels=2)
    frac = len(syn.retained[0]) / n
    dropped = np.setdiff1d(np.arange(n), syn.retained[0])
    syn_ok = (np.array_equal(dropped, np.sort(planted))
              and all(w.chebyshev_ok for w in syn.windows))
    curve = rep.density_curve[-1][1] if rep.density_curve else float("nan")
    record(10, cheb and syn_ok,
           f"Chebyshev bound holds in {sum(w.chebyshev_ok for w in rep.windows)}/"
           f"{len(rep.windows)} octagon windows (levels {rep.levels}, retained fraction "
           f"{curve:.3f}); planted retention {frac:.4f} vs {1 - len(planted) / n:.4f}")


# -- ergodicity and gauge ------------------------------------------------------

def test_criterion_11_ergodicity():
    rep = genus2_rep(THETA)
    geom = build_octagon()
    obs = MixedSymbol.fibre(X3)
    b = [rhs_time_average_bound(obs, T, 256, geom=geom, rep=rep, seed=11) for T in (10, 100, 1000)]
    mono = all(y.value <= x.value + 2 * math.hypot(x.stderr, y.stderr) for x, y in zip(b, b[1:]))
    mono = mono and b[-1].value < b[0].value
    radius = orbit_density_diagnostic(rep, np.array([1.0, 0.0], complex), 100_000)
    record(11, mono and radius < 0.1,
           "time-average bound " + ", ".join(f"{x.value:.3e}+-{x.stderr:.1e}" for x in b)
           + f" at T=10,100,1000; orbit covering radius {radius:.4f} (need < 0.1)")


def test_criterion_12_husimi_invariance():
    octagon = build_octagon()
    disc = assemble_fem(BundleSpec(octagon, genus2_rep(THETA), 2), 16)
    v = solve_lowest(disc, 6).vectors[:, 4]
    worst = 0.0
    for x, z, word in _random_triples(octagon, 100, 1):
        y = complex(mobius(octagon.word_matrix(word), x))
        gz = disc.spec.rep.word_matrix(word) @ z
        a = husimi_density(disc, v, x, z)
        b = husimi_density(disc, v, y, gz)
        worst = max(worst, abs(a - b) / max(abs(a), 1e-300))
    record(12, worst < 1e-8, f"max relative disagreement over 100 triples {worst:.2e} (tol 1e-8)")
