"""Progressive-disclosure retrieval over a built taxonomy.

A query descends the tree level by level: each chat call sees exactly one
node's children and picks the relevant ones, so no prompt ever enumerates
the registry. Reached leaves are deduplicated first-come-first-served,
undersized leaf groups are merged by tree distance to keep selection
prompts worth their overhead, and a final per-group call picks services.

The three modes (get_all, get_important, get_one) share all machinery and
differ only in the instruction sentence injected into the two prompts.

Parallel fan-out is level-synchronous with results merged in child-index
order, so retrieval is deterministic for a fixed backend script.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from statistics import fmean

from . import prompts
from .errors import ConfigError
from .gateway import LlmGateway
from .taxonomy import Taxonomy

logger = logging.getLogger(__name__)

MODES = ("get_all", "get_important", "get_one")

NAVIGATE_INSTRUCTIONS = {
    "get_all": "Select all categories that could contain query-relevant services.",
    "get_important": (
        "Select all categories that could contain query-relevant services, "
        "but deduplicate services with the same function."
    ),
    "get_one": "Always select the single most relevant branch.",
}

SELECT_INSTRUCTIONS = {
    "get_all": "Select every service relevant to the query.",
    "get_important": (
        "Select the services relevant to the query, "
        "but deduplicate services with the same function."
    ),
    "get_one": "Select the single most relevant service.",
}


@dataclass
class SearchConfig:
    mode: str = "get_all"
    merge_threshold: int = 30
    workers: int = 20

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"unknown search mode {self.mode!r}; expected one of {MODES}")
        if self.merge_threshold < 1:
            raise ConfigError("merge_threshold must be positive")
        if self.workers < 1:
            raise ConfigError("workers must be positive")


@dataclass
class LeafHit:
    """One reached leaf (or merged group of leaves) and its services in
    presentation order. leaf_id is the representative leaf."""

    leaf_id: str
    services: list[str]


@dataclass
class TraceStep:
    kind: str  # navigate | select
    node_id: str
    options_shown: int
    chosen: list[int]
    dropped: int = 0
    parse_failed: bool = False
    depth: int = 0

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "node_id": self.node_id,
            "options_shown": self.options_shown,
            "chosen": self.chosen,
            "dropped": self.dropped,
            "parse_failed": self.parse_failed,
            "depth": self.depth,
        }


@dataclass
class RetrievalResult:
    service_ids: list[str]
    trace: list[TraceStep] = field(default_factory=list)
    calls: int = 0
    navigation_calls: int = 0
    selection_calls: int = 0
    prompt_tokens: int = 0
    output_tokens: int = 0
    depth_reached: int = 0
    branches_per_level: float = 0.0
    groups_visited: int = 0
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "service_ids": self.service_ids,
            "calls": self.calls,
            "navigation_calls": self.navigation_calls,
            "selection_calls": self.selection_calls,
            "prompt_tokens": self.prompt_tokens,
            "output_tokens": self.output_tokens,
            "depth_reached": self.depth_reached,
            "branches_per_level": self.branches_per_level,
            "groups_visited": self.groups_visited,
            "flags": self.flags,
            "trace": [step.to_dict() for step in self.trace],
        }


def _category_options(taxonomy: Taxonomy, child_ids: list[str]) -> str:
    lines = []
    for i, child_id in enumerate(child_ids, start=1):
        node = taxonomy.node(child_id)
        suffix = f" (NOT: {node.boundary})" if node.boundary else ""
        lines.append(f"{i}. {node.name}: {node.description}{suffix}")
    return "\n".join(lines)


def navigate(
    taxonomy: Taxonomy,
    query: str,
    mode: str,
    gateway: LlmGateway,
) -> tuple[list[LeafHit], list[TraceStep], dict]:
    """Descends from the root, one chat call per visited internal node.

    Fan-out is processed level by level with parallel calls; hits and trace
    steps come back in depth-first child-index order regardless of thread
    scheduling. An empty or unparseable selection prunes that subtree.
    """
    template = prompts.load("search_navigate")
    instruction = NAVIGATE_INSTRUCTIONS[mode]
    hits: list[tuple[tuple[int, ...], LeafHit]] = []
    steps: list[tuple[tuple[int, ...], TraceStep]] = []
    counters = {"calls": 0, "prompt_tokens": 0, "output_tokens": 0}

    frontier: list[tuple[tuple[int, ...], str]] = [((), taxonomy.root_id)]
    while frontier:
        internal: list[tuple[tuple[int, ...], str]] = []
        for path, node_id in frontier:
            node = taxonomy.node(node_id)
            if node.is_leaf():
                hits.append((path, LeafHit(leaf_id=node_id, services=list(node.service_ids))))
            else:
                internal.append((path, node_id))
        if not internal:
            break

        def call(entry: tuple[tuple[int, ...], str]):
            _, node_id = entry
            children = taxonomy.node(node_id).children
            system, user = template.render(
                mode_instruction=instruction,
                query=query,
                options=_category_options(taxonomy, children),
            )
            return gateway.select_indices(
                system, user, label="search.navigate", n_options=len(children)
            )

        selections = gateway.run_parallel(call, internal)
        next_frontier: list[tuple[tuple[int, ...], str]] = []
        for (path, node_id), sel in zip(internal, selections):
            node = taxonomy.node(node_id)
            counters["calls"] += sel.calls
            counters["prompt_tokens"] += sel.prompt_tokens
            counters["output_tokens"] += sel.output_tokens
            steps.append(
                (
                    path,
                    TraceStep(
                        kind="navigate",
                        node_id=node_id,
                        options_shown=len(node.children),
                        chosen=list(sel.indices),
                        dropped=sel.dropped,
                        parse_failed=sel.parse_failed,
                        depth=node.depth,
                    ),
                )
            )
            for idx in sel.indices:
                next_frontier.append((path + (idx,), node.children[idx - 1]))
        frontier = next_frontier

    hits.sort(key=lambda item: item[0])
    steps.sort(key=lambda item: item[0])
    return [hit for _, hit in hits], [step for _, step in steps], counters


def dedup(hits: list[LeafHit]) -> list[LeafHit]:
    """First-come-first-served: a service stays in the earliest hit that
    contains it. Hits emptied by dedup are dropped."""
    seen: set[str] = set()
    out: list[LeafHit] = []
    for hit in hits:
        kept = []
        for sid in hit.services:
            if sid not in seen:
                seen.add(sid)
                kept.append(sid)
        if kept:
            out.append(LeafHit(leaf_id=hit.leaf_id, services=kept))
    return out


def merge_small_groups(
    hits: list[LeafHit], merge_threshold: int, taxonomy: Taxonomy
) -> list[LeafHit]:
    """Greedily merges sub-threshold groups with each other.

    While at least two groups are below the threshold, the pair of
    sub-threshold groups with the smallest tree (LCA) distance between
    their representative leaves merges; ties break on smaller combined
    size, then lexicographic leaf ids. The merged group keeps the earlier
    hit's leaf as representative and its position in the list. Groups at or
    above the threshold are never touched, so one undersized straggler
    simply stays as it is.
    """
    groups = [LeafHit(leaf_id=h.leaf_id, services=list(h.services)) for h in hits]
    while True:
        small = [i for i, g in enumerate(groups) if len(g.services) < merge_threshold]
        if len(small) < 2:
            return groups
        best: tuple | None = None
        for a_pos in range(len(small)):
            for b_pos in range(a_pos + 1, len(small)):
                i, j = small[a_pos], small[b_pos]
                key = (
                    taxonomy.lca_distance(groups[i].leaf_id, groups[j].leaf_id),
                    len(groups[i].services) + len(groups[j].services),
                    tuple(sorted((groups[i].leaf_id, groups[j].leaf_id))),
                )
                if best is None or key < best[0]:
                    best = (key, i, j)
        _, i, j = best
        groups[i] = LeafHit(
            leaf_id=groups[i].leaf_id, services=groups[i].services + groups[j].services
        )
        del groups[j]


def select_services(
    group: LeafHit,
    query: str,
    mode: str,
    registry_names: dict[str, tuple[str, str]],
    gateway: LlmGateway,
) -> tuple[list[str], TraceStep, dict]:
    """One chat call choosing services from a merged group."""
    options = "\n".join(
        f"{i}. {registry_names[sid][0]}: {registry_names[sid][1]}"
        for i, sid in enumerate(group.services, start=1)
    )
    system, user = prompts.render(
        "search_select",
        mode_instruction=SELECT_INSTRUCTIONS[mode],
        query=query,
        options=options,
    )
    sel = gateway.select_indices(
        system, user, label="search.select", n_options=len(group.services)
    )
    chosen = [group.services[idx - 1] for idx in sel.indices]
    step = TraceStep(
        kind="select",
        node_id=group.leaf_id,
        options_shown=len(group.services),
        chosen=list(sel.indices),
        dropped=sel.dropped,
        parse_failed=sel.parse_failed,
    )
    counters = {"calls": sel.calls, "prompt_tokens": sel.prompt_tokens, "output_tokens": sel.output_tokens}
    return chosen, step, counters


def retrieve(
    query: str,
    taxonomy: Taxonomy,
    registry,
    gateway: LlmGateway,
    cfg: SearchConfig | None = None,
) -> RetrievalResult:
    """Full taxonomy retrieval: navigate, dedup, merge, select.

    In get_one mode the result is capped to the single first-selected
    service, matching the single-branch navigation instruction.
    """
    cfg = cfg or SearchConfig()
    registry_names = {svc.id: (svc.name, svc.description) for svc in registry}

    hits, nav_steps, nav_counters = navigate(taxonomy, query, cfg.mode, gateway)
    groups = merge_small_groups(dedup(hits), cfg.merge_threshold, taxonomy)
    groups = [g for g in groups if g.services]

    selections = gateway.run_parallel(
        lambda g: select_services(g, query, cfg.mode, registry_names, gateway), groups
    )

    service_ids: list[str] = []
    steps = list(nav_steps)
    sel_calls = sel_ptok = sel_otok = 0
    for chosen, step, counters in selections:
        service_ids.extend(chosen)
        steps.append(step)
        sel_calls += counters["calls"]
        sel_ptok += counters["prompt_tokens"]
        sel_otok += counters["output_tokens"]
    if cfg.mode == "get_one":
        service_ids = service_ids[:1]

    nav_levels: dict[int, list[int]] = {}
    for step in nav_steps:
        nav_levels.setdefault(step.depth, []).append(len(step.chosen))
    branches = fmean(fmean(counts) for counts in nav_levels.values()) if nav_levels else 0.0
    leaf_depths = [
        taxonomy.node(h.leaf_id).depth for h in hits
    ]

    return RetrievalResult(
        service_ids=service_ids,
        trace=steps,
        calls=nav_counters["calls"] + sel_calls,
        navigation_calls=nav_counters["calls"],
        selection_calls=sel_calls,
        prompt_tokens=nav_counters["prompt_tokens"] + sel_ptok,
        output_tokens=nav_counters["output_tokens"] + sel_otok,
        depth_reached=max(leaf_depths) if leaf_depths else 0,
        branches_per_level=branches,
        groups_visited=len(groups),
    )
