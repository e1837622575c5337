#!/usr/bin/env python3
"""Generate a latent-world synthetic dataset as registry/queries files.

The world is a grid of domain x subdomain cells; every service belongs to
exactly one cell and every query targets one cell. The files work with the
taxonav CLI (build, eval, baseline, stats)."""

from __future__ import annotations

import argparse
import logging
from pathlib import Path

from taxonav.registry import save_queries, save_registry
from taxonav.synthetic import make_queries, make_world

logger = logging.getLogger("make_synthetic_dataset")


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out-dir", required=True, help="directory for registry.jsonl and queries.jsonl")
    parser.add_argument("--domains", type=int, default=4)
    parser.add_argument("--subdomains", type=int, default=4)
    parser.add_argument("--services", type=int, default=200)
    parser.add_argument("--queries", type=int, default=50)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)

    world = make_world(
        n_domains=args.domains,
        n_subdomains=args.subdomains,
        total_services=args.services,
    )
    queries = make_queries(world, n=args.queries, seed=args.seed)

    out_dir = Path(args.out_dir)
    save_registry(world.registry, out_dir / "registry.jsonl")
    save_queries(queries, out_dir / "queries.jsonl")
    print(
        f"wrote {len(world.registry)} services and {len(queries)} queries "
        f"({args.domains}x{args.subdomains} latent cells) -> {out_dir}"
    )
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
