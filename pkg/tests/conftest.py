"""Shared fixtures: latent synthetic worlds and oracle-backed gateways."""

from __future__ import annotations

import pytest

from taxonav.gateway import LlmGateway, MockChatBackend, MockEmbeddingBackend
from taxonav.synthetic import LatentOracle, make_queries, make_world


@pytest.fixture(scope="session")
def world200():
    world = make_world(n_domains=4, n_subdomains=4, total_services=200)
    make_queries(world, n=50, seed=7)
    return world


@pytest.fixture()
def oracle_gateway(world200):
    return make_oracle_gateway(world200)


@pytest.fixture()
def gateway_factory():
    return make_oracle_gateway


def make_oracle_gateway(world, **kwargs) -> LlmGateway:
    return LlmGateway(
        chat_backend=MockChatBackend(oracle=LatentOracle(world)),
        embedding_backend=MockEmbeddingBackend(),
        **kwargs,
    )
