"""On-disk eigendata cache.

Each entry is a directory holding ``manifest.json``, ``eigvals.f64`` and
``eigvecs.f64``. Arrays are little-endian IEEE-754 float64; complex vectors
are stored as interleaved (re, im) pairs, one eigenvector after another.
The manifest records sizes and SHA-256 digests of both files and a digest of
itself; any mismatch refuses the entry.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
from pathlib import Path

import numpy as np

from .bundle_spectra import BundleSpec, EigenData

CACHE_VERSION = 1
ENV_VAR = "QE_CACHE_DIR"


class CacheError(RuntimeError):
    """A cache entry failed validation and was not loaded."""


def default_root() -> Path:
    return Path(os.environ.get(ENV_VAR, Path.home() / ".cache" / "flatqe"))


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_jsonable)


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, complex):
        return [o.real, o.imag]
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not serializable: {type(o)}")


def spec_descriptor(spec: BundleSpec) -> dict:
    """Content description of a bundle: geometry, holonomy images, p."""
    geom = spec.geometry
    desc = {"geometry": type(geom).__name__, "p": spec.p}
    if hasattr(geom, "lengths"):
        desc["lengths"] = [float(x) for x in geom.lengths]
        desc["theta"] = [float(x) for x in geom.theta]
    rep = spec.rep
    if rep is not None:
        desc["rep"] = [[[float(v.real), float(v.imag)] for v in g.entries.ravel()]
                       for g in rep.images]
    return desc


def cache_key(spec: BundleSpec, resolution: int, request: dict) -> str:
    payload = {"version": CACHE_VERSION, "spec": spec_descriptor(spec),
               "resolution": int(resolution), "request": request}
    return hashlib.sha256(_canonical(payload).encode()).hexdigest()


def mesh_hash(mesh) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(mesh.nodes, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(mesh.triangles, dtype="<i8").tobytes())
    return h.hexdigest()


def _file_digest(path: Path, chunk: int = 1 << 24) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        while True:
            b = f.read(chunk)
            if not b:
                break
            h.update(b)
    return h.hexdigest()


def _manifest_digest(manifest: dict) -> str:
    body = {k: v for k, v in manifest.items() if k != "manifest_sha256"}
    return hashlib.sha256(_canonical(body).encode()).hexdigest()


class EigenCache:
    """Content-addressed store of ``EigenData`` batches."""

    def __init__(self, root: str | os.PathLike | None = None):
        self.root = Path(root) if root is not None else default_root()
        self.root.mkdir(parents=True, exist_ok=True)
        self._streams: dict[str, np.memmap] = {}

    def path(self, key: str) -> Path:
        return self.root / key[:24]

    def exists(self, key: str) -> bool:
        return (self.path(key) / "manifest.json").exists()

    # writing ----------------------------------------------------------------

    def vector_store(self, key: str):
        """Factory for a disk-backed ``(n, k)`` array to stream eigenvectors into."""
        d = self.path(key)
        d.mkdir(parents=True, exist_ok=True)

        def make(n_rows: int, n_cols: int):
            arr = np.memmap(d / "eigvecs.f64.partial", dtype="<c16", mode="w+",
                            shape=(max(n_cols, 1), n_rows))
            self._streams[key] = arr
            return arr[:n_cols].T

        return make

    def store(self, key: str, eig: EigenData, extra: dict | None = None) -> Path:
        d = self.path(key)
        d.mkdir(parents=True, exist_ok=True)
        vals = np.ascontiguousarray(eig.eigenvalues, dtype="<f8")
        vals.tofile(d / "eigvals.f64")
        partial = d / "eigvecs.f64.partial"
        V = eig.vectors
        n_rows = 0 if V is None else V.shape[0]
        n_cols = len(vals)
        stream = self._streams.pop(key, None)
        if V is not None and stream is not None and np.may_share_memory(V, stream):
            stream.flush()
            del V, stream
            eig.vectors = None
            with open(partial, "r+b") as f:
                f.truncate(n_rows * n_cols * 16)
            os.replace(partial, d / "eigvecs.f64")
        else:
            arr = np.zeros((n_cols, n_rows), dtype="<c16") if V is None else \
                np.ascontiguousarray(np.asarray(V).T, dtype="<c16")
            arr.tofile(d / "eigvecs.f64")
        files = {}
        for name in ("eigvals.f64", "eigvecs.f64"):
            files[name] = {"sha256": _file_digest(d / name), "bytes": (d / name).stat().st_size}
        manifest = {
            "cache_version": CACHE_VERSION,
            "key": key,
            "p": int(eig.p),
            "n_eigen": n_cols,
            "n_rows": n_rows,
            "dtype": {"eigvals": "<f8", "eigvecs": "<f8 interleaved complex, eigenvector-major"},
            "eigenvalues": vals.tolist(),
            "metadata": eig.metadata,
            "certificate": eig.certificate,
            "files": files,
            **(extra or {}),
        }
        manifest["manifest_sha256"] = _manifest_digest(json.loads(_canonical(manifest)))
        with open(d / "manifest.json", "w", encoding="utf-8") as f:
            f.write(json.dumps(json.loads(_canonical(manifest)), indent=1, sort_keys=True))
        return d

    # reading ----------------------------------------------------------------

    def load(self, key: str, verify: bool = True, mmap: bool = True) -> EigenData:
        """Reload an entry; raises ``CacheError`` on any inconsistency."""
        d = self.path(key)
        mpath = d / "manifest.json"
        if not mpath.exists():
            raise CacheError(f"no cache entry {key[:24]}")
        try:
            manifest = json.loads(mpath.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise CacheError(f"manifest unreadable: {e}") from e
        if manifest.get("cache_version") != CACHE_VERSION:
            raise CacheError(f"cache version {manifest.get('cache_version')} != {CACHE_VERSION}; "
                             "refusing stale entry")
        if manifest.get("manifest_sha256") != _manifest_digest(manifest):
            raise CacheError("manifest hash mismatch: manifest was edited or corrupted")
        for name, info in manifest["files"].items():
            f = d / name
            if not f.exists():
                raise CacheError(f"missing file {name}")
            size = f.stat().st_size
            if size != info["bytes"]:
                raise CacheError(f"{name}: size {size} bytes, manifest says {info['bytes']}")
            if verify and _file_digest(f) != info["sha256"]:
                raise CacheError(f"{name}: sha256 mismatch")
        n, k = manifest["n_rows"], manifest["n_eigen"]
        vals = np.fromfile(d / "eigvals.f64", dtype="<f8")
        if k == 0 or n == 0:
            vecs = None
        elif mmap:
            vecs = np.memmap(d / "eigvecs.f64", dtype="<c16", mode="r", shape=(k, n)).T
        else:
            vecs = np.fromfile(d / "eigvecs.f64", dtype="<c16").reshape(k, n).T
        return EigenData(manifest["p"], vals, vecs, metadata=manifest["metadata"],
                         certificate=manifest["certificate"])

    def remove(self, key: str) -> None:
        shutil.rmtree(self.path(key), ignore_errors=True)


def cached_window(cache: EigenCache | None, spec: BundleSpec, resolution: int, lam_max: float,
                  tol: float = 1e-10, seed: int = 0, slice_size: int = 100):
    """Eigenpairs below ``lam_max`` for ``spec``, from the cache when present.

    Returns ``(EigenData, DiscreteLaplacian, cache_hit)``.
    """
    from .bundle_spectra import assemble_fem, solve_window

    disc = assemble_fem(spec, resolution)
    request = {"kind": "window", "lam_max": float(lam_max), "tol": tol, "seed": seed,
               "mesh_sha256": mesh_hash(disc.mesh)}
    if cache is None:
        return solve_window(disc, lam_max, tol=tol, seed=seed, slice_size=slice_size), disc, False
    key = cache_key(spec, resolution, request)
    if cache.exists(key):
        return cache.load(key), disc, True
    eig = solve_window(disc, lam_max, tol=tol, seed=seed, slice_size=slice_size,
                       vector_store=cache.vector_store(key))
    cache.store(key, eig, {"spec": spec_descriptor(spec), "resolution": resolution,
                           "request": request})
    return cache.load(key), disc, False
