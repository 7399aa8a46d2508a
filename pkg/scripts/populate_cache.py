"""Solve and cache the octagon eigendata used by the variance and Weyl-law experiments.

Usage: python scripts/populate_cache.py [--config configs/octagon_variance.yaml] [--p 0 1 2]

The cache keys come from the config, so the acceptance suite and ``qe`` runs on the
same config hit the entries written here.
"""

import argparse
import logging
import time
from pathlib import Path

from flatqe.cache import default_root
from flatqe.cli import eigendata
from flatqe.config import load_config

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=str(ROOT / "configs" / "octagon_variance.yaml"))
    ap.add_argument("--p", type=int, nargs="+", default=None)
    ap.add_argument("--cache", default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = load_config(args.config)
    root = args.cache if args.cache is not None else str(default_root())
    for p in args.p if args.p is not None else cfg.p:
        t0 = time.perf_counter()
        eig, _, hit = eigendata(cfg, p, root)
        logging.info("p=%d: %d eigenpairs below %.1f (cache hit: %s) in %.0f s", p, len(eig),
                     cfg.lam_max, hit, time.perf_counter() - t0)


if __name__ == "__main__":
    main()
