#!/usr/bin/env python3
"""End-to-end offline demo: build a taxonomy over a synthetic world with an
oracle-driven mock backend, evaluate taxonomy search against the embedding
baseline, and print the comparison table. No network, fully deterministic."""

from __future__ import annotations

import argparse
import logging
from pathlib import Path

from taxonav import taxonomy as taxonomy_io
from taxonav.baselines import build_embedding_index, topk_retrieve
from taxonav.builder import BuildConfig, build
from taxonav.eval_harness import EvalConfig, compare, evaluate, write_run
from taxonav.gateway import LlmGateway, MockChatBackend, MockEmbeddingBackend
from taxonav.search import MODES, SearchConfig, retrieve
from taxonav.synthetic import LatentOracle, make_queries, make_world

logger = logging.getLogger("run_mock_demo")


def oracle_gateway(world, vectors: dict | None = None, dim: int = 8) -> LlmGateway:
    return LlmGateway(
        chat_backend=MockChatBackend(oracle=LatentOracle(world)),
        embedding_backend=MockEmbeddingBackend(vectors=vectors, dim=dim),
    )


def cell_vectors(world, queries) -> dict[str, list[float]]:
    """One-hot cell vectors so the embedding baseline sees real structure."""
    cells = [(d, s) for d in world.domains for s in world.domains[d]]
    index = {cell: i for i, cell in enumerate(cells)}

    def one_hot(i: int) -> list[float]:
        vec = [0.0] * len(cells)
        vec[i] = 1.0
        return vec

    vectors = {}
    for svc in world.registry:
        cell = (world.domain_of[svc.id], world.subdomain_of[svc.id])
        vectors[svc.description] = one_hot(index[cell])
    for case in queries:
        vectors[case.text] = one_hot(index[world.query_target[case.text]])
    return vectors


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", required=True, help="directory for taxonomy and run artifacts")
    parser.add_argument("--domains", type=int, default=4)
    parser.add_argument("--subdomains", type=int, default=4)
    parser.add_argument("--services", type=int, default=200)
    parser.add_argument("--queries", type=int, default=50)
    parser.add_argument("--mode", choices=MODES, default="get_all")
    parser.add_argument("--k", type=int, default=10, help="top-K for the embedding baseline")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)

    world = make_world(
        n_domains=args.domains,
        n_subdomains=args.subdomains,
        total_services=args.services,
    )
    queries = make_queries(world, n=args.queries)
    out = Path(args.out)

    taxonomy, report = build(world.registry, BuildConfig(), oracle_gateway(world))
    taxonomy_io.save(taxonomy, out / "taxonomy")
    report.save(out / "taxonomy" / "build_report.json")
    stats = taxonomy_io.stats(taxonomy)
    print(
        f"built: {stats.total_categories} categories, {stats.leaf_categories} leaves, "
        f"{report.total_calls()} chat calls"
    )

    search_gateway = oracle_gateway(world)
    search_cfg = SearchConfig(mode=args.mode)
    tax_summary, tax_records = evaluate(
        lambda case: retrieve(case.text, taxonomy, world.registry, search_gateway, search_cfg),
        queries,
        EvalConfig(method="taxonomy", dataset="synthetic", setting=args.mode),
    )
    write_run(out / "run_taxonomy", tax_summary, tax_records)

    vectors = cell_vectors(world, queries)
    embed_gateway = oracle_gateway(world, vectors=vectors, dim=args.domains * args.subdomains)
    index = build_embedding_index(world.registry, embed_gateway)
    emb_summary, emb_records = evaluate(
        lambda case: topk_retrieve(case.text, index, args.k, embed_gateway),
        queries,
        EvalConfig(method="embed", dataset="synthetic", setting=f"k={args.k}"),
    )
    write_run(out / "run_embed", emb_summary, emb_records)

    print(compare([out / "run_taxonomy", out / "run_embed"]).render_text())
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
