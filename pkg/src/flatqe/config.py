"""Experiment configuration: YAML with schema validation and line-anchored errors.

A minimal config::

    version: 1
    geometry: {kind: octagon}
    rep: {kind: genus2, theta: 0.41421356237309515}
    p: [0, 1, 2]
    mesh: {resolution: 112}
    eigen: {lam_max: 550}
    symbols:
      - {name: bump, base: {type: gauss, center: [0.2, 0.1], width: 0.6}}
      - {name: x3sq, fibre: {bloch: [3, 3]}}
    window: [1, 4]
    h_grid: {h0: 0.1715, count: 3, ratio: 1.4142135623730951}
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .base_geometry import TorusGeometry, build_octagon, hyperbolic_distance_from_origin, mobius
from .bundle_spectra import BundleSpec
from .fibre_quantization import FibreSymbol
from .group_rep import generate_dense_rep, genus2_rep
from .symbols import MixedSymbol

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration; the message starts with ``file:line:``."""


# ---------------------------------------------------------------------------
# YAML with line numbers


class _LineDict(dict):
    lines: dict
    line: int


class _Loader(yaml.SafeLoader):
    pass


def _construct_mapping(loader, node, deep=False):
    loader.flatten_mapping(node)
    out = _LineDict()
    out.lines = {}
    out.line = node.start_mark.line + 1
    for k_node, v_node in node.value:
        key = loader.construct_object(k_node, deep=True)
        out[key] = loader.construct_object(v_node, deep=True)
        out.lines[key] = k_node.start_mark.line + 1
    return out


_Loader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping)


class _Ctx:
    def __init__(self, source: str):
        self.source = source

    def fail(self, node, key, msg):
        line = getattr(node, "lines", {}).get(key, getattr(node, "line", 0)) if node is not None else 0
        raise ConfigError(f"{self.source}:{line}: {msg}")


def _check_keys(ctx, node, allowed, where):
    if not isinstance(node, dict):
        ctx.fail(None, None, f"{where} must be a mapping")
    for k in node:
        if k not in allowed:
            ctx.fail(node, k, f"unknown key {k!r} in {where} (allowed: {', '.join(sorted(allowed))})")


# ---------------------------------------------------------------------------
# Schema


@dataclass(frozen=True)
class GeometryConfig:
    kind: str = "octagon"
    theta: tuple[float, float] = (0.0, 0.0)
    lengths: tuple[float, float] = (1.0, 1.0)


@dataclass(frozen=True)
class RepConfig:
    kind: str = "genus2"  # genus2 | dense | trivial | torus
    theta: float = math.sqrt(2) - 1
    seed: int = 0


@dataclass(frozen=True)
class SymbolConfig:
    name: str
    base: dict | None = None
    fibre: dict | None = None
    momentum: dict | None = None
    torus_modes: tuple = ()


@dataclass(frozen=True)
class ExperimentConfig:
    version: int = CONFIG_VERSION
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    rep: RepConfig = field(default_factory=RepConfig)
    p: tuple[int, ...] = (0,)
    resolution: int = 32
    count: int | None = 50
    lam_max: float | None = None
    tol: float = 1e-10
    symbols: tuple[SymbolConfig, ...] = ()
    window: tuple[float, float] = (1.0, 4.0)
    h_grid: tuple[float, ...] = ()
    t: float = 1.0
    T: tuple[float, ...] = (10.0, 100.0, 1000.0)
    budget: int = 256
    levels: int | None = None
    lam_grid: tuple[float, ...] = ()
    seed: int = 0
    out_dir: str = "qe_out"

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()

    # builders -------------------------------------------------------------

    def build_geometry(self):
        if self.geometry.kind == "torus":
            return TorusGeometry(self.geometry.theta, self.geometry.lengths)
        return build_octagon()

    def build_rep(self, geom=None):
        if self.geometry.kind == "torus":
            return (geom or self.build_geometry()).rep
        if self.rep.kind == "genus2":
            return genus2_rep(self.rep.theta)
        if self.rep.kind == "trivial":
            return genus2_rep(0.0)
        return generate_dense_rep(2, seed=self.rep.seed)

    def bundle(self, p: int) -> BundleSpec:
        geom = self.build_geometry()
        return BundleSpec(geom, self.build_rep(geom), p)

    def build_symbols(self) -> list[MixedSymbol]:
        return [build_symbol(s, self.geometry.kind) for s in self.symbols]


_TOP_KEYS = {"version", "geometry", "rep", "p", "mesh", "eigen", "symbols", "window", "h_grid",
             "egorov", "birkhoff", "extract", "weyl", "seed", "output"}


def _float_tuple(ctx, node, key, n=None):
    v = node[key]
    if not isinstance(v, (list, tuple)) or (n is not None and len(v) != n):
        ctx.fail(node, key, f"{key} must be a list" + (f" of {n} numbers" if n else ""))
    try:
        return tuple(float(x) for x in v)
    except (TypeError, ValueError):
        ctx.fail(node, key, f"{key} must contain numbers")


def _num(ctx, node, key, typ=float, positive=False):
    v = node[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        ctx.fail(node, key, f"{key} must be a number")
    v = typ(v)
    if positive and v <= 0:
        ctx.fail(node, key, f"{key} must be positive")
    return v


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    """Parse and validate a YAML experiment config."""
    ctx = _Ctx(source)
    try:
        raw = yaml.load(text, Loader=_Loader)
    except yaml.MarkedYAMLError as e:
        line = e.problem_mark.line + 1 if e.problem_mark else 0
        raise ConfigError(f"{source}:{line}: YAML syntax error: {e.problem}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}:1: config must be a mapping")
    _check_keys(ctx, raw, _TOP_KEYS, "config")
    kw: dict = {}
    if "version" not in raw:
        raise ConfigError(f"{source}:1: missing 'version'")
    if raw["version"] != CONFIG_VERSION:
        ctx.fail(raw, "version", f"unsupported config version {raw['version']!r} "
                                 f"(expected {CONFIG_VERSION})")
    if "geometry" in raw:
        g = raw["geometry"]
        _check_keys(ctx, g, {"kind", "theta", "lengths"}, "geometry")
        kind = g.get("kind", "octagon")
        if kind not in ("octagon", "torus"):
            ctx.fail(g, "kind", f"geometry kind must be octagon or torus, got {kind!r}")
        gk = {"kind": kind}
        if "theta" in g:
            gk["theta"] = _float_tuple(ctx, g, "theta", 2)
        if "lengths" in g:
            gk["lengths"] = _float_tuple(ctx, g, "lengths", 2)
        kw["geometry"] = GeometryConfig(**gk)
    if "rep" in raw:
        r = raw["rep"]
        _check_keys(ctx, r, {"kind", "theta", "seed"}, "rep")
        rk = {}
        if "kind" in r:
            if r["kind"] not in ("genus2", "dense", "trivial"):
                ctx.fail(r, "kind", f"rep kind must be genus2, dense or trivial, got {r['kind']!r}")
            rk["kind"] = r["kind"]
        if "theta" in r:
            rk["theta"] = _num(ctx, r, "theta")
        if "seed" in r:
            rk["seed"] = _num(ctx, r, "seed", int)
        kw["rep"] = RepConfig(**rk)
    if "p" in raw:
        v = raw["p"]
        v = [v] if isinstance(v, int) else v
        if not isinstance(v, list) or not all(isinstance(x, int) and 0 <= x <= 8 for x in v):
            ctx.fail(raw, "p", "p must be an integer or list of integers in [0, 8]")
        kw["p"] = tuple(v)
    if "mesh" in raw:
        m = raw["mesh"]
        _check_keys(ctx, m, {"resolution"}, "mesh")
        kw["resolution"] = _num(ctx, m, "resolution", int, positive=True)
    if "eigen" in raw:
        e = raw["eigen"]
        _check_keys(ctx, e, {"count", "lam_max", "tol"}, "eigen")
        kw["count"] = _num(ctx, e, "count", int, positive=True) if "count" in e else None
        if "lam_max" in e:
            kw["lam_max"] = _num(ctx, e, "lam_max", positive=True)
        if "tol" in e:
            kw["tol"] = _num(ctx, e, "tol", positive=True)
        if kw["count"] is None and "lam_max" not in kw:
            ctx.fail(raw, "eigen", "eigen needs count or lam_max")
    if "symbols" in raw:
        syms = raw["symbols"]
        if not isinstance(syms, list):
            ctx.fail(raw, "symbols", "symbols must be a list")
        out, names = [], set()
        for s in syms:
            out.append(_parse_symbol(ctx, s))
            if out[-1].name in names:
                ctx.fail(s, "name", f"duplicate symbol name {out[-1].name!r}")
            names.add(out[-1].name)
        kw["symbols"] = tuple(out)
    if "window" in raw:
        w = _float_tuple(ctx, raw, "window", 2)
        if not 0 < w[0] < w[1]:
            ctx.fail(raw, "window", "window must satisfy 0 < a < b")
        kw["window"] = w
    if "h_grid" in raw:
        hg = raw["h_grid"]
        if isinstance(hg, list):
            kw["h_grid"] = _float_tuple(ctx, raw, "h_grid")
        else:
            _check_keys(ctx, hg, {"h0", "count", "ratio"}, "h_grid")
            h0 = _num(ctx, hg, "h0", positive=True)
            cnt = _num(ctx, hg, "count", int, positive=True) if "count" in hg else 3
            ratio = _num(ctx, hg, "ratio", positive=True) if "ratio" in hg else math.sqrt(2)
            kw["h_grid"] = tuple(h0 / ratio ** i for i in range(cnt))
        if any(not 0 < h <= 1 for h in kw["h_grid"]):
            ctx.fail(raw, "h_grid", "h values must lie in (0, 1]")
    if "egorov" in raw:
        e = raw["egorov"]
        _check_keys(ctx, e, {"t"}, "egorov")
        kw["t"] = _num(ctx, e, "t")
        if not 0 <= kw["t"] <= 10:
            ctx.fail(e, "t", "t must lie in [0, 10]")
    if "birkhoff" in raw:
        b = raw["birkhoff"]
        _check_keys(ctx, b, {"T", "budget"}, "birkhoff")
        if "T" in b:
            kw["T"] = _float_tuple(ctx, b, "T")
        if "budget" in b:
            kw["budget"] = _num(ctx, b, "budget", int, positive=True)
    if "extract" in raw:
        x = raw["extract"]
        _check_keys(ctx, x, {"levels"}, "extract")
        if "levels" in x:
            kw["levels"] = _num(ctx, x, "levels", int)
    if "weyl" in raw:
        x = raw["weyl"]
        _check_keys(ctx, x, {"lam_grid"}, "weyl")
        kw["lam_grid"] = _float_tuple(ctx, x, "lam_grid")
    if "seed" in raw:
        kw["seed"] = _num(ctx, raw, "seed", int)
    if "output" in raw:
        o = raw["output"]
        _check_keys(ctx, o, {"dir"}, "output")
        kw["out_dir"] = str(o["dir"])
    cfg = ExperimentConfig(**kw)
    if cfg.geometry.kind == "octagon" and "mesh" not in raw and cfg.lam_max is not None:
        raise ConfigError(f"{source}:{raw.line}: octagon spectra need mesh.resolution")
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"{path}:0: cannot read config: {e}") from e
    return parse_config(text, str(path))


# ---------------------------------------------------------------------------
# Symbol definitions

_BASE_TYPES = {"gauss", "cos", "const"}


def _parse_symbol(ctx, s) -> SymbolConfig:
    _check_keys(ctx, s, {"name", "base", "fibre", "momentum", "torus_modes"}, "symbol")
    if "name" not in s or not isinstance(s["name"], str):
        ctx.fail(s, "name", "every symbol needs a string name")
    base = s.get("base")
    if base is not None:
        _check_keys(ctx, base, {"type", "center", "width", "k", "amplitude"}, f"symbol {s['name']} base")
        if base.get("type") not in _BASE_TYPES:
            ctx.fail(base, "type", f"base type must be one of {sorted(_BASE_TYPES)}")
    fib = s.get("fibre")
    if fib is not None:
        _check_keys(ctx, fib, {"bloch", "constant", "coeffs"}, f"symbol {s['name']} fibre")
        if "bloch" in fib and (not isinstance(fib["bloch"], list)
                               or not all(a in (1, 2, 3) for a in fib["bloch"])):
            ctx.fail(fib, "bloch", "bloch must be a list of axes in {1, 2, 3}")
    mom = s.get("momentum")
    if mom is not None:
        _check_keys(ctx, mom, {"lo", "hi"}, f"symbol {s['name']} momentum")
    modes = s.get("torus_modes", [])
    for m in modes:
        _check_keys(ctx, m, {"k", "amplitude", "center", "width"}, f"symbol {s['name']} torus mode")
    if base is None and fib is None and not modes:
        ctx.fail(s, "name", f"symbol {s['name']!r} needs base, fibre or torus_modes")
    return SymbolConfig(s["name"], _plain(base), _plain(fib), _plain(mom),
                        tuple(_plain(m) for m in modes))


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, list):
        return [_plain(v) for v in x]
    return x


def base_function(spec: dict | None, geometry_kind: str):
    """Scalar base function from a config mapping (``None`` means 1)."""
    if spec is None:
        return None
    amp = float(spec.get("amplitude", 1.0))
    if spec["type"] == "const":
        return lambda x: amp * np.ones(np.shape(x)[:-1])
    if spec["type"] == "cos":
        k = np.asarray(spec.get("k", [1, 0]), dtype=float)
        return lambda x: amp * np.cos(2 * np.pi * (np.asarray(x) @ k))
    c = spec.get("center", [0.0, 0.0])
    w = float(spec.get("width", 0.5))
    if geometry_kind == "octagon":
        c0 = complex(c[0], c[1])
        # Mobius map sending c0 to the origin; hyperbolic distance to c0
        M = np.array([[1, -c0], [-np.conj(c0), 1]]) / np.sqrt(1 - abs(c0) ** 2)

        def f(x):
            y = mobius(M, x[..., 0] + 1j * x[..., 1])
            return amp * np.exp(-(hyperbolic_distance_from_origin(y) / w) ** 2)
        return f
    cc = np.asarray(c, dtype=float)

    def g(x):
        d = (np.asarray(x) - cc + 0.5) % 1.0 - 0.5
        return amp * np.exp(-np.sum(d ** 2, -1) / w ** 2)
    return g


def fibre_symbol(spec: dict | None) -> FibreSymbol:
    if spec is None:
        return FibreSymbol.constant(1.0)
    H = FibreSymbol.constant(float(spec.get("constant", 1.0)))
    for axis in spec.get("bloch", []):
        H = H * FibreSymbol.bloch(axis - 1)
    if "coeffs" in spec:
        coeffs = {tuple(int(v) for v in c[:4]): complex(c[4], c[5] if len(c) > 5 else 0.0)
                  for c in spec["coeffs"]}
        H = H * FibreSymbol.polynomial(coeffs)
    return H


def build_symbol(s: SymbolConfig, geometry_kind: str) -> MixedSymbol:
    if s.torus_modes:
        modes = {}
        for m in s.torus_modes:
            k = tuple(int(v) for v in m.get("k", [0, 0]))
            amp = complex(m.get("amplitude", 1.0))
            c = np.asarray(m.get("center", [0.0, 0.0]), dtype=float)
            w = float(m.get("width", 1.0))
            prev = modes.get(k)

            def a(xi, amp=amp, c=c, w=w, prev=prev):
                v = amp * np.exp(-np.sum((np.asarray(xi) - c) ** 2, -1) / w ** 2)
                return v + prev(xi) if prev is not None else v
            modes[k] = a
        return MixedSymbol.torus(modes, name=s.name, real=False)
    f = base_function(s.base, geometry_kind)
    H = fibre_symbol(s.fibre)
    if s.momentum is not None:
        from .semiclassics import Bump
        phi = Bump(float(s.momentum["lo"]), float(s.momentum["hi"]))
        return MixedSymbol.separable(f, phi, H, name=s.name)
    return MixedSymbol.position([(f, H)], name=s.name)
