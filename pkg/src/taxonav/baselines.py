"""Reference retrievers the taxonomy search is measured against.

Three baselines: a pure-LLM retriever that stuffs the whole catalog into a
single prompt (the cost ceiling), a dense embedding top-K retriever (the
no-LLM floor), and a rewrite-then-retrieve pipeline that asks the LLM to
describe the needed tool first and embeds that description instead of the
raw query.

All of them return the same RetrievalResult shape as the taxonomy search
so one evaluation harness serves everything.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass

import numpy as np

from . import prompts
from .errors import ConfigError
from .gateway import LlmGateway
from .registry import Registry
from .search import RetrievalResult

logger = logging.getLogger(__name__)

DEFAULT_K_BY_SHAPE = {"toolret": 5, "publicmcp": 10}


def default_k(shape: str) -> int:
    try:
        return DEFAULT_K_BY_SHAPE[shape]
    except KeyError:
        raise ConfigError(
            f"unknown dataset shape {shape!r}; expected one of {sorted(DEFAULT_K_BY_SHAPE)}"
        ) from None


# -- pure-LLM full-context retrieval ----------------------------------------


def pure_llm_retrieve(query: str, registry: Registry, gateway: LlmGateway) -> RetrievalResult:
    """Single chat call over the entire catalog (ids, names, descriptions;
    no input schemas). Ids in the reply are validated against the registry;
    unknown ones are dropped and counted, never guessed at."""
    catalog = "\n".join(f"{svc.id} | {svc.name}: {svc.description}" for svc in registry)
    system, user = prompts.render("pure_llm_retrieve", query=query, catalog=catalog)
    response = gateway.chat(system, user, label="baseline.pure_llm")

    returned: list[str] = []
    seen: set[str] = set()
    dropped = 0
    for token in re.split(r"[,\n;]+", response.text):
        candidate = token.strip().strip("\"'`[](){}.")
        if not candidate or candidate.upper() == "NONE":
            continue
        if candidate in registry:
            if candidate not in seen:
                seen.add(candidate)
                returned.append(candidate)
        else:
            dropped += 1
    flags = [f"dropped_unknown_ids:{dropped}"] if dropped else []
    if dropped:
        logger.warning("pure-LLM reply contained %d unknown ids", dropped)
    return RetrievalResult(
        service_ids=returned,
        calls=1,
        prompt_tokens=response.prompt_tokens,
        output_tokens=response.output_tokens,
        flags=flags,
    )


# -- dense embedding top-K ----------------------------------------------------


@dataclass
class EmbeddingIndex:
    """Unit-norm description vectors in registry order; cosine similarity
    is therefore a plain dot product."""

    service_ids: list[str]
    matrix: np.ndarray
    model: str


def build_embedding_index(
    registry: Registry, gateway: LlmGateway, model: str | None = None
) -> EmbeddingIndex:
    if len(registry) == 0:
        raise ConfigError("cannot build an embedding index over an empty registry")
    vectors = gateway.embed([svc.description for svc in registry], model=model)
    return EmbeddingIndex(
        service_ids=registry.ids,
        matrix=np.stack([v.values for v in vectors]),
        model=vectors[0].model,
    )


def rank_by_vector(vector: np.ndarray, index: EmbeddingIndex, k: int) -> list[str]:
    """Top-k ids by cosine similarity; ties resolve to registry order via a
    stable sort. k beyond the index size clamps with a warning."""
    if k < 1:
        raise ConfigError("k must be positive")
    if k > len(index.service_ids):
        logger.warning("k=%d exceeds index size %d; returning all", k, len(index.service_ids))
        k = len(index.service_ids)
    sims = index.matrix @ np.asarray(vector, dtype=np.float64)
    order = np.argsort(-sims, kind="stable")
    return [index.service_ids[i] for i in order[:k]]


def topk_retrieve(
    query: str, index: EmbeddingIndex, k: int, gateway: LlmGateway
) -> RetrievalResult:
    vector = gateway.embed([query], model=index.model)[0].values
    return RetrievalResult(service_ids=rank_by_vector(vector, index, k))


# -- rewrite-then-retrieve ----------------------------------------------------


@dataclass
class RewriteExtraction:
    server_hint: str
    tool_description: str


def parse_tool_assistant(text: str) -> RewriteExtraction | None:
    """Parses the <tool_assistant> block; None when the block or the tool
    line is missing or empty."""
    match = re.search(r"<tool_assistant>(.*?)</tool_assistant>", text, re.DOTALL | re.IGNORECASE)
    if not match:
        return None
    body = match.group(1)
    server = re.search(r"server\s*:\s*(.+)", body, re.IGNORECASE)
    tool = re.search(r"tool\s*:\s*(.+)", body, re.IGNORECASE)
    tool_text = tool.group(1).strip() if tool else ""
    if not tool_text:
        return None
    return RewriteExtraction(
        server_hint=server.group(1).strip() if server else "",
        tool_description=tool_text,
    )


def rewrite_retrieve(
    query: str, index: EmbeddingIndex, k: int, gateway: LlmGateway
) -> RetrievalResult:
    """One chat call that rewrites the task into a tool description, whose
    embedding then drives top-K. A reply without a usable block gets one
    re-ask; after that the raw query embedding is used and flagged."""
    template = prompts.load("rewrite_extract")
    system, user = template.render(task=query)
    response = gateway.chat(system, user, label="baseline.rewrite")
    calls, ptok, otok = 1, response.prompt_tokens, response.output_tokens
    extraction = parse_tool_assistant(response.text)
    if extraction is None:
        retry = gateway.chat(
            system,
            user + "\n\nReply with the <tool_assistant> block in exactly the requested format.",
            label="baseline.rewrite",
        )
        calls += 1
        ptok += retry.prompt_tokens
        otok += retry.output_tokens
        extraction = parse_tool_assistant(retry.text)

    flags: list[str] = []
    if extraction is None:
        flags.append("rewrite_fallback")
        logger.warning("rewrite reply had no usable <tool_assistant> block; using the raw query")
        search_text = query
    else:
        search_text = extraction.tool_description
    vector = gateway.embed([search_text], model=index.model)[0].values
    return RetrievalResult(
        service_ids=rank_by_vector(vector, index, k),
        calls=calls,
        prompt_tokens=ptok,
        output_tokens=otok,
        flags=flags,
    )
