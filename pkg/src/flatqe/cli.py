"""Command-line harness: ``qe <subcommand> --config <path> [--out DIR] [--cache DIR] [--jobs N]``.

Each subcommand writes ``<subcommand>.csv`` (RFC 4180), ``<subcommand>.json``
(floats at 17 significant digits), ``<subcommand>.gp`` (a gnuplot script
that plots the CSV) and ``provenance.json`` (runtimes, cache hits, host
details). The first three files are byte-identical across reruns with the
same config; everything run-dependent lives in the provenance file.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .base_geometry import TorusGeometry, rhs_time_average_bound
from .bundle_spectra import (BundleSpec, ConvergenceError, EigenData, MeshError, assemble_fem,
                             solve_lowest, torus_spectrum_exact)
from .cache import CacheError, EigenCache, cached_window
from .config import ConfigError, ExperimentConfig, load_config
from .fibre_quantization import FibreSymbol, toeplitz_matrix
from .semiclassics import SCHEMA_VERSION, density_one_extract, egorov_defect, matrix_elements, \
    quantum_variance

EXIT_CONFIG = 2
EXIT_RUNTIME = 3

SUBCOMMANDS = ("spectra", "toeplitz", "weyl-law", "egorov", "variance", "birkhoff", "extract",
               "equidistribution")


@dataclass
class Result:
    """Output of one subcommand."""

    columns: dict[str, tuple[str, str]]  # name -> (unit, description)
    rows: list[dict]
    summary: dict = field(default_factory=dict)
    plot: tuple[str, str, str] = ("", "", "")  # x column, y column, title
    logscale: bool = False
    provenance: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Serialization


def format_float(x: float) -> str:
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return "%.17g" % x


def dumps_json(obj, indent: int = 1, _level: int = 0) -> str:
    """JSON with sorted keys and every float printed with ``%.17g``.

    Non-finite floats become ``null``; complex numbers become ``[re, im]``.
    """
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {dumps_json(v, indent, _level + 1)}"
                 for k, v in sorted(obj.items(), key=lambda kv: str(kv[0]))]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple)) for v in obj):
            return "[" + ", ".join(dumps_json(v, indent, _level + 1) for v in obj) + "]"
        return "[\n" + ",\n".join(pad + dumps_json(v, indent, _level + 1) for v in obj) + "\n" + end + "]"
    if isinstance(obj, np.ndarray):
        return dumps_json(obj.tolist(), indent, _level)
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (complex, np.complexfloating)):
        return dumps_json([obj.real, obj.imag], indent, _level)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return format_float(x) if math.isfinite(x) else "null"
    return json.dumps(str(obj))


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format_float(float(v))
    return str(v)


def write_csv(path: Path, columns, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n", quoting=csv.QUOTE_MINIMAL)
    w.writerow(list(columns))
    for r in rows:
        w.writerow([_cell(r[c]) for c in columns])
    path.write_bytes(buf.getvalue().encode("utf-8"))


def gnuplot_script(name: str, result: Result) -> str:
    cols = list(result.columns)
    x, y, title = result.plot
    ix, iy = cols.index(x) + 1, cols.index(y) + 1
    lines = [
        f"# plots {name}.csv; run: gnuplot -p {name}.gp",
        "set datafile separator ','",
        "set key autotitle columnhead",
        f"set title {json.dumps(title or name)}",
        f"set xlabel {json.dumps(f'{x} [{result.columns[x][0]}]')}",
        f"set ylabel {json.dumps(f'{y} [{result.columns[y][0]}]')}",
    ]
    if result.logscale:
        lines.append("set logscale xy")
    lines.append(f"plot '{name}.csv' using {ix}:{iy} with points pt 7 ps 0.5")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Eigendata


def _torus_window(spec: BundleSpec, lam_max: float) -> EigenData:
    count = int(spec.dim * spec.area * lam_max / (4 * np.pi) * 1.3) + 64
    while True:
        eig = torus_spectrum_exact(spec, count)
        if eig.eigenvalues[-1] > lam_max:
            keep = eig.eigenvalues <= lam_max
            out = eig.subset(np.flatnonzero(keep))
            out.metadata["complete_to"] = float(lam_max)
            return out
        count *= 2


def eigendata(cfg: ExperimentConfig, p: int, cache_root: str | None, lam_max: float | None = None,
              fem: bool | None = None):
    """``(EigenData, DiscreteLaplacian | None, cache_hit)`` for one ``p``."""
    spec = cfg.bundle(p)
    lam_max = lam_max if lam_max is not None else cfg.lam_max
    if isinstance(spec.geometry, TorusGeometry) and not fem:
        if lam_max is not None:
            return _torus_window(spec, lam_max), None, False
        return torus_spectrum_exact(spec, cfg.count), None, False
    if lam_max is not None:
        cache = EigenCache(cache_root) if cache_root is not None else None
        return cached_window(cache, spec, cfg.resolution, lam_max, tol=cfg.tol, seed=cfg.seed)
    disc = assemble_fem(spec, cfg.resolution)
    return solve_lowest(disc, cfg.count, tol=cfg.tol, seed=cfg.seed), disc, False


def _map(fn, args, jobs: int):
    if jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(fn, *zip(*args)))
    return [fn(*a) for a in args]


def _geom_and_rep(cfg: ExperimentConfig):
    geom = cfg.build_geometry()
    return geom, cfg.build_rep(geom)


# ---------------------------------------------------------------------------
# Per-p workers (top level so they pickle)


def _spectra_rows(cfg: ExperimentConfig, p: int, cache_root):
    t0 = time.perf_counter()
    eig, disc, hit = eigendata(cfg, p, cache_root)
    rows = []
    for i, lam in enumerate(eig.eigenvalues):
        r = {"p": p, "index": i, "eigenvalue": float(lam)}
        if eig.modes is not None:
            r.update(n1=int(eig.modes[i, 0]), n2=int(eig.modes[i, 1]), weight=int(eig.modes[i, 2]))
        else:
            r.update(n1="", n2="", weight="")
        rows.append(r)
    summary = {"count": len(eig), "certificate": eig.certificate,
               "solver": eig.metadata.get("solver"),
               "trust_lambda": eig.metadata.get("trust_lambda")}
    return rows, summary, {"p": p, "seconds": time.perf_counter() - t0, "cache_hit": hit}


def _pairing_table(cfg: ExperimentConfig, p: int, cache_root, lam_max):
    t0 = time.perf_counter()
    eig, disc, hit = eigendata(cfg, p, cache_root, lam_max=lam_max)
    geom = cfg.build_geometry()
    tab = matrix_elements(eig, cfg.build_symbols(), geom=geom, disc=disc)
    return tab, {"p": p, "seconds": time.perf_counter() - t0, "cache_hit": hit,
                 "n_eigen": len(eig)}


def _birkhoff_row(cfg: ExperimentConfig, k: int, T: float):
    t0 = time.perf_counter()
    geom, rep = _geom_and_rep(cfg)
    sym = cfg.build_symbols()[k]
    b = rhs_time_average_bound(sym, T, cfg.budget, geom=geom, rep=rep, seed=cfg.seed)
    row = {"symbol": sym.name, "T": float(T), "mean_square_deviation": b.value,
           "stderr": b.stderr, "trajectories": b.n_trajectories}
    return row, {"symbol": sym.name, "T": T, "seconds": time.perf_counter() - t0}


# ---------------------------------------------------------------------------
# Subcommands


def cmd_spectra(cfg, cache_root, jobs) -> Result:
    out = _map(_spectra_rows, [(cfg, p, cache_root) for p in cfg.p], jobs)
    rows = [r for o in out for r in o[0]]
    cols = {"p": ("1", "highest weight of the fibre representation"),
            "index": ("1", "eigenvalue index from 0, ascending"),
            "eigenvalue": ("length^-2", "eigenvalue of the twisted Laplacian"),
            "n1": ("1", "torus lattice label along e1 (closed form only)"),
            "n2": ("1", "torus lattice label along e2 (closed form only)"),
            "weight": ("1", "torus weight-line index j (closed form only)")}
    return Result(cols, rows, {str(p): o[1] for p, o in zip(cfg.p, out)},
                  ("index", "eigenvalue", "spectrum"), provenance={"per_p": [o[2] for o in out]})


def cmd_toeplitz(cfg, cache_root, jobs) -> Result:
    syms = cfg.build_symbols() or []
    items = [(s.name, s.terms[0][1]) for s in syms if s.kind != "torus_scalar"]
    if not items:
        items = [("one", FibreSymbol.constant(1.0))]
    rows, summary = [], {}
    for name, H in items:
        for p in cfg.p:
            T = toeplitz_matrix(H, p).entries
            for i in range(p + 1):
                for j in range(p + 1):
                    rows.append({"symbol": name, "p": p, "row": i, "col": j,
                                 "re": float(T[i, j].real), "im": float(T[i, j].imag)})
            summary[f"{name}/p={p}"] = {"norm": float(np.linalg.norm(T, 2)),
                                        "trace_over_dim": complex(np.trace(T) / (p + 1))}
    cols = {"symbol": ("-", "fibre symbol name"),
            "p": ("1", "highest weight"),
            "row": ("1", "row index in the monomial basis"),
            "col": ("1", "column index in the monomial basis"),
            "re": ("symbol units", "real part of the Toeplitz matrix entry"),
            "im": ("symbol units", "imaginary part of the Toeplitz matrix entry")}
    return Result(cols, rows, summary, ("row", "re", "Toeplitz entries"))


def cmd_weyl_law(cfg, cache_root, jobs) -> Result:
    out = _map(_spectra_rows, [(cfg, p, cache_root) for p in cfg.p], jobs)
    geom = cfg.build_geometry()
    area = float(geom.area)
    rows = []
    for p, (spec_rows, summ, _) in zip(cfg.p, out):
        lam = np.array([r["eigenvalue"] for r in spec_rows])
        top = cfg.lam_max if cfg.lam_max is not None else lam[-1]
        if summ.get("trust_lambda"):
            top = min(top, summ["trust_lambda"])
        grid = cfg.lam_grid or tuple(np.linspace(top / 10, top, 10))
        for L in grid:
            if L > top * (1 + 1e-12):
                raise ValueError(f"weyl lam_grid value {L} exceeds the trusted range {top:.6g} for p={p}")
            n = int(np.searchsorted(lam, L, side="right"))
            pred = (p + 1) * area * L / (4 * np.pi)
            rows.append({"p": p, "lambda": float(L), "count": n, "weyl_prediction": pred,
                         "ratio": n / pred})
    cols = {"p": ("1", "highest weight"),
            "lambda": ("length^-2", "spectral parameter"),
            "count": ("1", "number of eigenvalues <= lambda, with multiplicity"),
            "weyl_prediction": ("1", "(p+1) area lambda / (4 pi)"),
            "ratio": ("1", "count / weyl_prediction")}
    return Result(cols, rows, {"area": area}, ("lambda", "ratio", "Weyl ratio"),
                  provenance={"per_p": [o[2] for o in out]})


def cmd_egorov(cfg, cache_root, jobs) -> Result:
    if cfg.geometry.kind != "torus":
        raise ValueError("egorov is implemented on the flat torus only (geometry.kind: torus)")
    if not cfg.h_grid:
        raise ValueError("egorov needs h_grid")
    rows = []
    for s in cfg.build_symbols():
        for p in cfg.p:
            spec = cfg.bundle(p)
            prev = None
            for h in cfg.h_grid:
                r = egorov_defect(s, cfg.t, h, spec=spec)
                rows.append({"symbol": s.name, "p": p, "h": h, "t": cfg.t, "defect": r.defect,
                             "operator_norm": r.scale, "meaningful": r.meaningful,
                             "ratio_to_previous": (r.defect / prev) if prev else float("nan")})
                prev = r.defect if r.meaningful else None
    cols = {"symbol": ("-", "symbol name"),
            "p": ("1", "highest weight"),
            "h": ("length", "semiclassical parameter"),
            "t": ("length", "propagation time"),
            "defect": ("symbol units", "operator norm of the Egorov defect"),
            "operator_norm": ("symbol units", "operator norm of the quantized symbol"),
            "meaningful": ("bool", "defect exceeds rounding level"),
            "ratio_to_previous": ("1", "defect over the previous h (nan if not meaningful)")}
    return Result(cols, rows, {}, ("h", "defect", "Egorov defect"), logscale=True)


def _tables(cfg, cache_root, jobs, lam_max):
    out = _map(_pairing_table, [(cfg, p, cache_root, lam_max) for p in cfg.p], jobs)
    return [o[0] for o in out], [o[1] for o in out]


def cmd_variance(cfg, cache_root, jobs) -> Result:
    if not cfg.h_grid or not cfg.symbols:
        raise ValueError("variance needs h_grid and symbols")
    need = cfg.window[1] / min(cfg.h_grid) ** 2
    lam_max = max(cfg.lam_max or 0.0, need)
    tables, prov = _tables(cfg, cache_root, jobs, lam_max)
    rows = []
    for k, name in enumerate(tables[0].names):
        for h in cfg.h_grid:
            for rep in quantum_variance(tables, h, cfg.window, symbol=k):
                rows.append({"symbol": name, "p": rep.p, "h": h, "h_inv_sq": 1 / h ** 2,
                             "lambda_lo": rep.window[0], "lambda_hi": rep.window[1],
                             "n_window": rep.metadata["n_window"],
                             "ergodic_mean_re": rep.ergodic_mean.real, "variance": rep.variance})
    cols = {"symbol": ("-", "symbol name"),
            "p": ("1", "highest weight"),
            "h": ("length", "semiclassical parameter"),
            "h_inv_sq": ("length^-2", "1 / h^2"),
            "lambda_lo": ("length^-2", "window lower end a / h^2"),
            "lambda_hi": ("length^-2", "window upper end b / h^2"),
            "n_window": ("1", "eigenvalues in the window"),
            "ergodic_mean_re": ("symbol units", "real part of the phase-space mean"),
            "variance": ("symbol units^2", "(2 pi h)^2 / (p+1) times the windowed sum of squared deviations")}
    return Result(cols, rows, {"window": list(cfg.window)}, ("h_inv_sq", "variance",
                  "quantum variance"), logscale=True, provenance={"per_p": prov})


def cmd_equidistribution(cfg, cache_root, jobs) -> Result:
    if not cfg.symbols:
        raise ValueError("equidistribution needs symbols")
    tables, prov = _tables(cfg, cache_root, jobs, cfg.lam_max)
    rows = []
    for tab in tables:
        for k, name in enumerate(tab.names):
            m = complex(tab.means[k])
            for i, lam in enumerate(tab.eigenvalues):
                v = complex(tab.values[k, i])
                rows.append({"symbol": name, "p": tab.p, "index": i, "eigenvalue": float(lam),
                             "re": v.real, "im": v.imag, "mean_re": m.real, "mean_im": m.imag,
                             "deviation": abs(v - m)})
    cols = {"symbol": ("-", "symbol name"),
            "p": ("1", "highest weight"),
            "index": ("1", "eigenvalue index"),
            "eigenvalue": ("length^-2", "eigenvalue"),
            "re": ("symbol units", "real part of the matrix element"),
            "im": ("symbol units", "imaginary part of the matrix element"),
            "mean_re": ("symbol units", "real part of the phase-space mean"),
            "mean_im": ("symbol units", "imaginary part of the phase-space mean"),
            "deviation": ("symbol units", "|matrix element - mean|")}
    return Result(cols, rows, {}, ("eigenvalue", "deviation", "matrix element deviations"),
                  provenance={"per_p": prov})


def cmd_extract(cfg, cache_root, jobs) -> Result:
    if not cfg.symbols:
        raise ValueError("extract needs symbols")
    tables, prov = _tables(cfg, cache_root, jobs, cfg.lam_max)
    rep = density_one_extract(tables, levels=cfg.levels)
    rows = [{"p": w.p, "r": w.r, "n_window": w.n_window, "level": w.level, "eps": w.eps,
             "discarded": w.discarded, "chebyshev_bound": w.bound,
             "retained_fraction": w.retained_fraction, "chebyshev_ok": w.chebyshev_ok}
            for w in rep.windows]
    cols = {"p": ("1", "highest weight"),
            "r": ("1", "dyadic window index, 4^r <= lambda < 4^(r+1)"),
            "n_window": ("1", "eigenvalues in the window"),
            "level": ("1", "number of battery symbols tested minus one"),
            "eps": ("symbol units^2", "window mean of summed squared deviations"),
            "discarded": ("1", "indices removed in the window"),
            "chebyshev_bound": ("1", "2^level eps n_window"),
            "retained_fraction": ("1", "kept / n_window"),
            "chebyshev_ok": ("bool", "discarded <= chebyshev_bound")}
    summary = {"levels": {str(k): v for k, v in rep.levels.items()},
               "density_curve": [list(x) for x in rep.density_curve],
               "retained": {str(p): v.tolist() for p, v in rep.retained.items()}}
    return Result(cols, rows, summary, ("r", "retained_fraction", "retained density"),
                  provenance={"per_p": prov})


def cmd_birkhoff(cfg, cache_root, jobs) -> Result:
    if not cfg.symbols:
        raise ValueError("birkhoff needs symbols")
    syms = cfg.build_symbols()
    args = [(cfg, k, T) for k, s in enumerate(syms) if s.kind == "position" for T in cfg.T]
    if not args:
        raise ValueError("birkhoff needs position symbols (no momentum dependence)")
    out = _map(_birkhoff_row, args, jobs)
    cols = {"symbol": ("-", "symbol name"),
            "T": ("length", "averaging time"),
            "mean_square_deviation": ("symbol units^2", "phase-space mean of |time average - mean|^2"),
            "stderr": ("symbol units^2", "Monte-Carlo standard error"),
            "trajectories": ("1", "number of sampled trajectories")}
    return Result(cols, [o[0] for o in out], {"dt": 0.1}, ("T", "mean_square_deviation",
                  "time-average decay"), logscale=True, provenance={"runs": [o[1] for o in out]})


COMMANDS = {"spectra": cmd_spectra, "toeplitz": cmd_toeplitz, "weyl-law": cmd_weyl_law,
            "egorov": cmd_egorov, "variance": cmd_variance, "birkhoff": cmd_birkhoff,
            "extract": cmd_extract, "equidistribution": cmd_equidistribution}


# ---------------------------------------------------------------------------
# Entry point


def run(command: str, cfg: ExperimentConfig, out_dir: Path, cache_root: str | None,
        jobs: int = 1) -> Result:
    t0 = time.perf_counter()
    res = COMMANDS[command](cfg, cache_root, jobs)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_csv(out_dir / f"{command}.csv", res.columns, res.rows)
    report = {"schema_version": SCHEMA_VERSION, "command": command, "config": asdict(cfg),
              "config_sha256": cfg.config_hash(), "package_version": __version__,
              "columns": {k: {"unit": u, "description": d} for k, (u, d) in res.columns.items()},
              "n_rows": len(res.rows), "summary": res.summary}
    (out_dir / f"{command}.json").write_text(dumps_json(report) + "\n", encoding="utf-8")
    (out_dir / f"{command}.gp").write_text(gnuplot_script(command, res), encoding="utf-8")
    prov = {"command": command, "config_sha256": cfg.config_hash(),
            "seconds": time.perf_counter() - t0, "jobs": jobs, "cache_root": cache_root,
            "python": sys.version.split()[0], "numpy": np.__version__,
            "platform": platform.platform(), **res.provenance}
    (out_dir / "provenance.json").write_text(dumps_json(prov) + "\n", encoding="utf-8")
    return res


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="qe", description="Twisted-bundle spectra and "
                                 "semiclassical diagnostics.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="YAML experiment config")
        sp.add_argument("--out", help="output directory (default: output.dir from the config)")
        sp.add_argument("--cache", help="eigendata cache directory (default: $QE_CACHE_DIR "
                        "or ~/.cache/flatqe); 'none' disables caching")
        sp.add_argument("--jobs", type=int, default=1, help="worker processes")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    if args.jobs < 1:
        print("error: --jobs must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    from .cache import default_root
    cache_root = None if args.cache == "none" else str(args.cache or default_root())
    out_dir = Path(args.out or cfg.out_dir)
    try:
        res = run(args.command, cfg, out_dir, cache_root, args.jobs)
    except (ValueError, TypeError, CacheError, ConvergenceError, MeshError) as e:
        print(f"error: {args.command}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"{args.command}: {len(res.rows)} rows -> {out_dir}/{args.command}.csv")
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
