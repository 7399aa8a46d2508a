import json

import numpy as np
import pytest

from flatqe.base_geometry import TorusGeometry, build_octagon
from flatqe.bundle_spectra import BundleSpec, EigenData, assemble_fem, solve_window
from flatqe.cache import CacheError, EigenCache, cache_key, cached_window
from flatqe.group_rep import genus2_rep

from conftest import THETA


@pytest.fixture
def cache(tmp_path):
    return EigenCache(tmp_path / "cache")


def _sample(rng, n=40, k=5, p=1):
    vals = np.sort(rng.uniform(0, 100, k))
    vecs = rng.normal(size=(n, k)) + 1j * rng.normal(size=(n, k))
    return EigenData(p, vals, vecs, metadata={"solver": "test"}, certificate={"inertia_count": k})


def test_round_trip_is_bitwise(cache, rng):
    eig = _sample(rng)
    cache.store("k" * 64, eig)
    back = cache.load("k" * 64)
    assert back.eigenvalues.tobytes() == eig.eigenvalues.tobytes()
    assert np.asarray(back.vectors).tobytes() == np.ascontiguousarray(eig.vectors).tobytes()
    assert back.metadata == eig.metadata and back.certificate == eig.certificate


def test_truncated_file_refused(cache, rng):
    d = cache.store("t" * 64, _sample(rng))
    data = (d / "eigvecs.f64").read_bytes()
    (d / "eigvecs.f64").write_bytes(data[:-16])
    with pytest.raises(CacheError, match=r"size \d+ bytes"):
        cache.load("t" * 64)


def test_flipped_byte_refused(cache, rng):
    d = cache.store("f" * 64, _sample(rng))
    data = bytearray((d / "eigvals.f64").read_bytes())
    data[3] ^= 1
    (d / "eigvals.f64").write_bytes(bytes(data))
    with pytest.raises(CacheError, match="sha256"):
        cache.load("f" * 64)


def test_manifest_edit_refused(cache, rng):
    d = cache.store("m" * 64, _sample(rng))
    m = json.loads((d / "manifest.json").read_text())
    m["eigenvalues"][0] += 1.0
    (d / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(CacheError, match="manifest hash"):
        cache.load("m" * 64)


def test_version_mismatch_refused(cache, rng):
    d = cache.store("v" * 64, _sample(rng))
    m = json.loads((d / "manifest.json").read_text())
    m["cache_version"] = -1
    (d / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(CacheError, match="version"):
        cache.load("v" * 64)


def test_missing_entry(cache):
    with pytest.raises(CacheError, match="no cache entry"):
        cache.load("x" * 64)


def test_key_depends_on_spec():
    a = BundleSpec(TorusGeometry(theta=(0.3, 0.7)), None, 1)
    b = BundleSpec(TorusGeometry(theta=(0.3, 0.7)), None, 2)
    assert cache_key(a, 16, {"lam_max": 100.0}) != cache_key(b, 16, {"lam_max": 100.0})
    assert cache_key(a, 16, {"lam_max": 100.0}) == cache_key(a, 16, {"lam_max": 100.0})


def test_cached_window_streams_and_reloads(cache):
    spec = BundleSpec(build_octagon(), genus2_rep(THETA), 1)
    eig, disc, hit = cached_window(cache, spec, 16, 12.0, slice_size=20)
    assert not hit and len(eig) > 0
    assert isinstance(eig.vectors.base, np.memmap) or isinstance(eig.vectors, np.memmap)
    ref = solve_window(assemble_fem(spec, 16), 12.0)
    assert np.allclose(eig.eigenvalues, ref.eigenvalues, rtol=1e-9)
    again, _, hit2 = cached_window(cache, spec, 16, 12.0, slice_size=20)
    assert hit2
    assert again.eigenvalues.tobytes() == eig.eigenvalues.tobytes()
    assert np.asarray(again.vectors).tobytes() == np.asarray(eig.vectors).tobytes()
