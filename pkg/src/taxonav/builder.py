"""Category-tree construction.

Two builders live here. The main one grows the tree breadth-first: any node
holding more services than the leaf threshold (and above the depth cap) is
split by an LLM-designed set of sibling categories, with a classification /
refinement loop that tightens boundaries until every service lands cleanly
or the iteration budget runs out. Oversized nodes are first compressed into
a keyword frequency table so the designer prompt stays small. After the
tree settles, a cross-domain pass lets services surface under additional
top-level domains, which is where the multi-parent structure comes from.

The second builder produces the whole tree from one design call plus one
classification call per service. It exists as a baseline and deliberately
skips the per-node machinery; its variants toggle a keyword payload, a
whole-tree refinement loop, and single-axis design rules.
"""

from __future__ import annotations

import json
import logging
import re
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

from . import prompts
from .errors import ConfigError, DataError, DesignError
from .gateway import LlmGateway, extract_json_object, usage_delta
from .registry import Registry, Service
from .taxonomy import Taxonomy, TaxonomyNode

logger = logging.getLogger(__name__)

AXIS_TAGS = ("functional-domain", "operation-object", "operation-type", "technical-approach")

CATCHALL_NAME = "Other"

# Mode instruction reused from search for cross-domain routing descents.
SINGLE_BRANCH_INSTRUCTION = "Always select the single most relevant branch."

ONESHOT_VARIANTS = ("base", "freq", "refine", "axis")


@dataclass
class BuildConfig:
    keyword_threshold: int = 500
    leaf_threshold: int = 40
    max_depth: int = 3
    generic_ratio: float = 1 / 3
    max_categories: int = 20
    max_refine_iterations: int = 3
    keyword_batch_size: int = 50
    tiny_merge_threshold: int = 2
    workers: int = 20

    def __post_init__(self) -> None:
        if self.keyword_threshold < 1 or self.leaf_threshold < 1:
            raise ConfigError("thresholds must be positive")
        if self.max_depth < 1:
            raise ConfigError("max_depth must be at least 1")
        if not 0 < self.generic_ratio <= 1:
            raise ConfigError("generic_ratio must be in (0, 1]")
        if self.max_categories < 2:
            raise ConfigError("max_categories must allow at least 2 drafts")
        if self.keyword_batch_size < 1 or self.workers < 1:
            raise ConfigError("batch size and workers must be positive")
        if self.tiny_merge_threshold < 0:
            raise ConfigError("tiny_merge_threshold must be non-negative")


@dataclass
class KeywordTable:
    """Frequency-ranked functional keywords for a group of services."""

    entries: list[tuple[str, int]]

    def render(self) -> str:
        return "\n".join(f"- {kw} ({freq})" for kw, freq in self.entries)


@dataclass
class CategoryDraft:
    name: str
    description: str
    boundary: str
    axis: str


@dataclass
class ClassificationOutcome:
    service_id: str
    matched: tuple[int, ...]  # 1-based draft indices
    status: str  # ok | generic | unmatched


@dataclass
class BuildReport:
    method: str = "bfs"
    calls_by_phase: dict[str, int] = field(default_factory=dict)
    tokens_by_phase: dict[str, int] = field(default_factory=dict)
    refine_iterations: dict[str, int] = field(default_factory=dict)
    merged_tiny_categories: int = 0
    catchall_placements: int = 0
    forced_placements: int = 0
    oversized_leaves: list[str] = field(default_factory=list)
    cross_domain: dict = field(default_factory=dict)
    classification_failures: list[dict] = field(default_factory=list)
    assigned_services: int = 0
    pruned_empty_categories: int = 0
    warnings: list[str] = field(default_factory=list)

    def total_calls(self) -> int:
        return sum(self.calls_by_phase.values())

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "calls_by_phase": dict(sorted(self.calls_by_phase.items())),
            "tokens_by_phase": dict(sorted(self.tokens_by_phase.items())),
            "total_calls": self.total_calls(),
            "refine_iterations": self.refine_iterations,
            "merged_tiny_categories": self.merged_tiny_categories,
            "catchall_placements": self.catchall_placements,
            "forced_placements": self.forced_placements,
            "oversized_leaves": self.oversized_leaves,
            "cross_domain": dict(sorted(self.cross_domain.items())),
            "classification_failures": self.classification_failures,
            "assigned_services": self.assigned_services,
            "pruned_empty_categories": self.pruned_empty_categories,
            "warnings": self.warnings,
        }

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(
            json.dumps(self.to_dict(), indent=2, ensure_ascii=False, sort_keys=True) + "\n",
            encoding="utf-8",
        )


def _numbered_services(services: list[Service]) -> str:
    return "\n".join(f"{i}. {s.name}: {s.description}" for i, s in enumerate(services, start=1))


def _numbered_drafts(drafts: list[CategoryDraft]) -> str:
    lines = []
    for i, d in enumerate(drafts, start=1):
        suffix = f" (NOT: {d.boundary})" if d.boundary else ""
        lines.append(f"{i}. {d.name}: {d.description}{suffix}")
    return "\n".join(lines)


def _normalize_axis(raw: object) -> str | None:
    if not isinstance(raw, str) or not raw.strip():
        return None
    return re.sub(r"[\s_]+", "-", raw.strip().lower())


def _normalize_name(name: str) -> str:
    return re.sub(r"\s+", " ", name).strip().lower()


def _phase_of(label: str) -> str:
    return label.split(".", 1)[1] if "." in label else label


def _fill_phases(report: BuildReport, delta: dict, prefixes: tuple[str, ...]) -> None:
    for label, bucket in delta["labels"].items():
        if not label.startswith(prefixes):
            continue
        phase = _phase_of(label)
        report.calls_by_phase[phase] = report.calls_by_phase.get(phase, 0) + bucket["calls"]
        report.tokens_by_phase[phase] = (
            report.tokens_by_phase.get(phase, 0)
            + bucket["prompt_tokens"]
            + bucket["output_tokens"]
        )


class TaxonomyBuilder:
    """Stateful driver for the breadth-first build."""

    def __init__(self, gateway: LlmGateway, cfg: BuildConfig | None = None) -> None:
        self.gateway = gateway
        self.cfg = cfg or BuildConfig()

    # -- keyword compression ----------------------------------------------

    def extract_keywords(self, services: list[Service], *, label: str = "build.keyword") -> KeywordTable:
        """Batched keyword extraction; one chat call per batch of services.

        Keywords deduplicate case-insensitively; the frequency of a keyword
        is the number of services that mentioned it. A batch whose reply
        parses to nothing contributes nothing (with a warning); only all
        batches failing is an error.
        """
        cfg = self.cfg
        batches = [
            services[i : i + cfg.keyword_batch_size]
            for i in range(0, len(services), cfg.keyword_batch_size)
        ]
        template = prompts.load("keyword_extract")

        def call(batch: list[Service]) -> str:
            system, user = template.render(services=_numbered_services(batch))
            return self.gateway.chat(system, user, label=label).text

        replies = self.gateway.run_parallel(call, batches)
        counts: dict[str, int] = {}
        failed_batches = 0
        line_re = re.compile(r"^\s*(\d+)\s*[:.)\-]\s*(.+)$")
        for batch, reply in zip(batches, replies):
            parsed_any = False
            for line in reply.splitlines():
                match = line_re.match(line)
                if not match:
                    continue
                idx = int(match.group(1))
                if not 1 <= idx <= len(batch):
                    continue
                parsed_any = True
                seen: set[str] = set()
                for raw in match.group(2).split(","):
                    keyword = raw.strip().lower()
                    if not keyword or keyword in seen:
                        continue
                    seen.add(keyword)
                    if len(seen) > 5:  # per-service cap
                        break
                    counts[keyword] = counts.get(keyword, 0) + 1
            if not parsed_any:
                failed_batches += 1
                logger.warning("keyword batch of %d services parsed to nothing", len(batch))
        if batches and failed_batches == len(batches):
            raise DataError("keyword extraction failed for every batch")
        entries = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        return KeywordTable(entries=entries)

    # -- category design ----------------------------------------------------

    def _parse_drafts(self, obj: dict) -> tuple[list[CategoryDraft], str | None, list[str]]:
        """Validates a design reply. Returns (drafts, fatal_violation, warnings)."""
        warnings: list[str] = []
        raw = obj.get("categories")
        if not isinstance(raw, list):
            return [], "the reply JSON lacks a 'categories' array", warnings
        shared_axis = _normalize_axis(obj.get("axis"))
        drafts: list[CategoryDraft] = []
        for item in raw:
            if not isinstance(item, dict):
                continue
            name = str(item.get("name") or "").strip()
            if not name:
                continue
            drafts.append(
                CategoryDraft(
                    name=name,
                    description=str(item.get("description") or "").strip(),
                    boundary=str(item.get("not_here") or "").strip(),
                    axis=_normalize_axis(item.get("axis")) or shared_axis or "",
                )
            )
        axes = {d.axis for d in drafts if d.axis}
        if len(axes) > 1:
            return drafts, "the sibling categories mix classification axes (" + ", ".join(sorted(axes)) + ")", warnings
        if len(drafts) < 2:
            return drafts, "fewer than 2 categories were proposed", warnings
        axis = next(iter(axes), "")
        if axis not in AXIS_TAGS:
            if axis:
                warnings.append(f"unknown axis tag {axis!r} coerced to functional-domain")
            axis = "functional-domain"
        for draft in drafts:
            draft.axis = axis
            if not draft.boundary:
                warnings.append(f"category {draft.name!r} came without a boundary clause")
                draft.boundary = "Services that fit a sibling category better."
        if len(drafts) > self.cfg.max_categories:
            warnings.append(
                f"designer proposed {len(drafts)} categories; truncated to {self.cfg.max_categories}"
            )
            drafts = drafts[: self.cfg.max_categories]
        return drafts, None, warnings

    def _request_drafts(
        self, template_name: str, values: dict[str, str], *, label: str, report: BuildReport | None
    ) -> list[CategoryDraft]:
        """One design call with a single validation re-ask, then DesignError."""
        system, user = prompts.render(template_name, **values)
        response = self.gateway.chat(system, user, label=label)
        try:
            drafts, violation, warnings = self._parse_drafts(extract_json_object(response.text))
        except Exception as exc:  # malformed JSON counts as a violation
            drafts, violation, warnings = [], f"the reply was not a valid JSON object ({exc})", []
        if violation is not None:
            retry_user = (
                user
                + f"\n\nYour previous reply was invalid: {violation}."
                + " Reply again with a single JSON object following the schema exactly."
            )
            retry = self.gateway.chat(system, retry_user, label=label)
            try:
                drafts, violation, warnings = self._parse_drafts(extract_json_object(retry.text))
            except Exception as exc:
                drafts, violation, warnings = [], f"the reply was not a valid JSON object ({exc})", []
            if violation is not None:
                raise DesignError(f"category design failed after re-ask: {violation}")
        if report is not None:
            report.warnings.extend(warnings)
        return drafts

    def design_categories(
        self,
        payload: KeywordTable | list[Service],
        parent_context: str,
        *,
        label: str = "build.design",
        report: BuildReport | None = None,
    ) -> list[CategoryDraft]:
        """Designs sibling categories from either a keyword table (large
        nodes) or raw service descriptions (small nodes)."""
        values = {
            "parent_context": parent_context,
            "axis_rules": prompts.snippet("axis_rules"),
            "max_categories": str(self.cfg.max_categories),
        }
        if isinstance(payload, KeywordTable):
            if not payload.entries:
                raise DesignError("cannot design categories from an empty keyword table")
            values["keywords"] = payload.render()
            template = "design_from_keywords"
        else:
            if not payload:
                raise DesignError("cannot design categories for zero services")
            values["services"] = _numbered_services(payload)
            template = "design_from_descriptions"
        return self._request_drafts(template, values, label=label, report=report)

    def validate_root(
        self,
        drafts: list[CategoryDraft],
        keyword_table: KeywordTable | None,
        services: list[Service],
        report: BuildReport,
    ) -> list[CategoryDraft]:
        """Root-only audit: one chat call that either confirms the top-level
        set or supplies a full replacement (at most one repair round)."""
        if keyword_table is not None:
            payload_header = "Keyword frequencies observed across the catalog:"
            payload = keyword_table.render()
        else:
            payload_header = "Catalog services:"
            payload = _numbered_services(services)
        system, user = prompts.render(
            "validate_root",
            axis_rules=prompts.snippet("axis_rules"),
            categories=_numbered_drafts(drafts),
            payload_header=payload_header,
            payload=payload,
        )
        response = self.gateway.chat(system, user, label="build.design")
        try:
            obj = extract_json_object(response.text)
        except Exception:
            report.warnings.append("root validation reply unparseable; keeping unvalidated drafts")
            return drafts
        if obj.get("ok") is True:
            return drafts
        repaired, violation, warnings = self._parse_drafts(obj)
        if violation is not None:
            report.warnings.append(f"root repair rejected ({violation}); keeping original drafts")
            return drafts
        report.warnings.extend(warnings)
        logger.info("root validation replaced %d drafts with %d", len(drafts), len(repaired))
        return repaired

    # -- classification ------------------------------------------------------

    def classify_services(
        self,
        services: list[Service],
        drafts: list[CategoryDraft],
        *,
        label: str = "build.classify",
    ) -> list[ClassificationOutcome]:
        """One chat call per service against the draft list.

        Status rules: no match (including a reply unparseable after its
        re-ask) is unmatched; matching strictly more than generic_ratio *
        len(drafts) categories is generic; anything else is ok.
        """
        options = _numbered_drafts(drafts)
        template = prompts.load("classify_service")
        threshold = self.cfg.generic_ratio * len(drafts)

        def call(svc: Service) -> ClassificationOutcome:
            system, user = template.render(
                service_name=svc.name, service_description=svc.description, options=options
            )
            sel = self.gateway.select_indices(system, user, label=label, n_options=len(drafts))
            if not sel.indices:
                status = "unmatched"
            elif len(sel.indices) > threshold:
                status = "generic"
            else:
                status = "ok"
            return ClassificationOutcome(service_id=svc.id, matched=sel.indices, status=status)

        return self.gateway.run_parallel(call, services)

    def classify_single_best(self, service: Service, drafts: list[CategoryDraft]) -> int | None:
        """Forced-choice placement for generic services; smallest in-range
        index wins if the reply names several."""
        system, user = prompts.render(
            "classify_single_best",
            service_name=service.name,
            service_description=service.description,
            options=_numbered_drafts(drafts),
        )
        sel = self.gateway.select_indices(
            system, user, label="build.classify", n_options=len(drafts)
        )
        return min(sel.indices) if sel.indices else None

    def refine_drafts(
        self,
        drafts: list[CategoryDraft],
        generic: list[Service],
        unmatched: list[Service],
        parent_context: str,
        *,
        report: BuildReport | None = None,
    ) -> list[CategoryDraft] | None:
        """One refinement round; None when the designer reply is unusable."""

        def listing(items: list[Service]) -> str:
            return _numbered_services(items) if items else "(none)"

        values = {
            "parent_context": parent_context,
            "axis_rules": prompts.snippet("axis_rules"),
            "options": _numbered_drafts(drafts),
            "generic_services": listing(generic),
            "unmatched_services": listing(unmatched),
            "max_categories": str(self.cfg.max_categories),
        }
        try:
            return self._request_drafts("refine_categories", values, label="build.refine", report=report)
        except DesignError as exc:
            logger.warning("refinement failed (%s); keeping previous drafts", exc)
            return None

    # -- node splitting ------------------------------------------------------

    def split_node(
        self,
        taxonomy: Taxonomy,
        node_id: str,
        services: list[Service],
        report: BuildReport,
    ) -> list[tuple[str, list[Service]]]:
        """Splits one node into LLM-designed children.

        Returns (child_id, child_services) pairs in draft order, or an empty
        list when the node collapses back into a leaf (fewer than two
        children survived the tiny merge). Raises DesignError when even the
        design re-ask fails; the caller decides what that means.
        """
        cfg = self.cfg
        node = taxonomy.node(node_id)

        table: KeywordTable | None = None
        payload: KeywordTable | list[Service]
        if len(services) > cfg.keyword_threshold:
            table = self.extract_keywords(services)
            payload = table
        else:
            payload = services

        if node_id == taxonomy.root_id:
            parent_context = "These services form the root of the catalog."
        else:
            parent_context = f'The parent category is "{node.name}": {node.description}'

        drafts = self.design_categories(payload, parent_context, report=report)
        if node_id == taxonomy.root_id:
            drafts = self.validate_root(drafts, table, services, report)

        refine_rounds = 0
        while True:
            outcomes = self.classify_services(services, drafts)
            generic = [s for s, o in zip(services, outcomes) if o.status == "generic"]
            unmatched = [s for s, o in zip(services, outcomes) if o.status == "unmatched"]
            if not generic and not unmatched:
                break
            if refine_rounds >= cfg.max_refine_iterations:
                break
            refined = self.refine_drafts(drafts, generic, unmatched, parent_context, report=report)
            if refined is None:
                report.warnings.append(f"{node_id}: refinement reply unusable; boundaries kept as-is")
                break
            drafts = refined
            refine_rounds += 1
        report.refine_iterations[node_id] = refine_rounds

        # Placement: ok services go to every matched child, generic services
        # to a single forced choice, the rest to the catch-all pool.
        buckets: list[list[Service]] = [[] for _ in drafts]
        pending: list[Service] = []
        generic_services = [s for s, o in zip(services, outcomes) if o.status == "generic"]
        forced = dict(
            zip(
                (s.id for s in generic_services),
                self.gateway.run_parallel(
                    lambda s: self.classify_single_best(s, drafts), generic_services
                ),
            )
        )
        for svc, outcome in zip(services, outcomes):
            if outcome.status == "ok":
                for idx in outcome.matched:
                    buckets[idx - 1].append(svc)
            elif outcome.status == "generic":
                choice = forced.get(svc.id)
                if choice is None:
                    pending.append(svc)
                else:
                    buckets[choice - 1].append(svc)
            else:
                pending.append(svc)

        # Tiny merge: children at or below the threshold are deleted and
        # their services re-classified among the survivors.
        tiny = [i for i, b in enumerate(buckets) if len(b) <= cfg.tiny_merge_threshold]
        survivors = [i for i in range(len(buckets)) if i not in tiny]
        if len(survivors) < 2:
            report.warnings.append(
                f"{node_id}: fewer than 2 children survived the tiny merge; kept as a leaf"
            )
            if len(services) > cfg.leaf_threshold:
                report.oversized_leaves.append(node_id)
            return []
        report.merged_tiny_categories += sum(1 for i in tiny if buckets[i])
        displaced = [svc for i in tiny for svc in buckets[i]]
        if displaced:
            survivor_drafts = [drafts[i] for i in survivors]
            for svc, outcome in zip(displaced, self.classify_services(displaced, survivor_drafts)):
                if outcome.matched:
                    for idx in outcome.matched:
                        buckets[survivors[idx - 1]].append(svc)
                else:
                    pending.append(svc)

        catchall = list(pending)
        if catchall and len(catchall) <= cfg.tiny_merge_threshold:
            # A tiny catch-all would immediately violate the tiny rule, so
            # force its services into the largest surviving child instead.
            largest = max(survivors, key=lambda i: (len(buckets[i]), -i))
            buckets[largest].extend(catchall)
            report.forced_placements += len(catchall)
            report.warnings.append(
                f"{node_id}: {len(catchall)} stray services forced into {drafts[largest].name!r}"
            )
            catchall = []

        children: list[tuple[str, list[Service]]] = []
        for i in survivors:
            child = taxonomy.add_child(
                node_id, drafts[i].name, drafts[i].description, drafts[i].boundary
            )
            child.service_ids = [s.id for s in buckets[i]]
            children.append((child.node_id, buckets[i]))
        if catchall:
            child = taxonomy.add_child(
                node_id,
                CATCHALL_NAME,
                "Services that did not fit any sibling category.",
                "Anything that clearly belongs to a named sibling.",
            )
            child.service_ids = [s.id for s in catchall]
            children.append((child.node_id, catchall))
            report.catchall_placements += len(catchall)
        return children

    # -- cross-domain pass -----------------------------------------------------

    def cross_domain_assign(self, taxonomy: Taxonomy, registry: Registry, report: BuildReport) -> None:
        """One proposal call per leaf; accepted candidates are routed to the
        best leaf under the named top-level domain by a single-branch
        descent. Re-proposing an existing placement changes nothing."""
        root = taxonomy.root
        if len(root.children) < 2:
            report.cross_domain = {
                "proposals": 0,
                "accepted": 0,
                "duplicates": 0,
                "skipped": 0,
                "routing_failures": 0,
                "extra_assignments_distribution": {},
            }
            return
        domain_by_name = {
            _normalize_name(taxonomy.node(cid).name): cid for cid in root.children
        }
        domain_names = ", ".join(taxonomy.node(cid).name for cid in root.children)
        leaf_ids = taxonomy.leaves()
        template = prompts.load("cross_domain_candidates")
        navigate = prompts.load("search_navigate")
        stats = {"proposals": 0, "accepted": 0, "duplicates": 0, "skipped": 0, "routing_failures": 0}
        extra_counts: dict[str, int] = {}

        def propose(leaf_id: str) -> dict | None:
            leaf = taxonomy.node(leaf_id)
            leaf_services = [registry.get(sid) for sid in leaf.service_ids]
            if not leaf_services:
                return None
            own = taxonomy.node(taxonomy.top_level_of(leaf_id)).name
            system, user = template.render(
                own_domain=own, domains=domain_names, options=_numbered_services(leaf_services)
            )
            return self.gateway.chat_json(system, user, label="build.cross_domain")

        replies = self.gateway.run_parallel(propose, leaf_ids)
        for leaf_id, obj in zip(leaf_ids, replies):
            if obj is None:
                continue
            candidates = obj.get("candidates")
            if not isinstance(candidates, list):
                report.warnings.append(f"{leaf_id}: cross-domain reply lacked a candidate list")
                continue
            leaf = taxonomy.node(leaf_id)
            own_domain_id = taxonomy.top_level_of(leaf_id)
            for cand in candidates:
                stats["proposals"] += 1
                if not isinstance(cand, dict):
                    stats["skipped"] += 1
                    continue
                idx = cand.get("index")
                target_id = domain_by_name.get(_normalize_name(str(cand.get("domain") or "")))
                if (
                    not isinstance(idx, int)
                    or not 1 <= idx <= len(leaf.service_ids)
                    or target_id is None
                    or target_id == own_domain_id
                ):
                    stats["skipped"] += 1
                    continue
                svc = registry.get(leaf.service_ids[idx - 1])
                target_leaf = self._route_to_leaf(taxonomy, target_id, svc, navigate)
                if target_leaf is None:
                    stats["routing_failures"] += 1
                    continue
                target = taxonomy.node(target_leaf)
                if svc.id in target.service_ids:
                    stats["duplicates"] += 1
                    continue
                target.service_ids.append(svc.id)
                taxonomy.assignment.setdefault(svc.id, []).append(target_leaf)
                stats["accepted"] += 1
                extra_counts[svc.id] = extra_counts.get(svc.id, 0) + 1

        distribution: dict[str, int] = {}
        for count in extra_counts.values():
            distribution[str(count)] = distribution.get(str(count), 0) + 1
        report.cross_domain = {**stats, "extra_assignments_distribution": distribution}

    def _route_to_leaf(
        self, taxonomy: Taxonomy, start_id: str, service: Service, navigate_template
    ) -> str | None:
        query = f"{service.name}: {service.description}"
        current = taxonomy.node(start_id)
        while not current.is_leaf():
            children = [taxonomy.node(cid) for cid in current.children]
            options = "\n".join(
                f"{i}. {c.name}: {c.description}" + (f" (NOT: {c.boundary})" if c.boundary else "")
                for i, c in enumerate(children, start=1)
            )
            system, user = navigate_template.render(
                mode_instruction=SINGLE_BRANCH_INSTRUCTION, query=query, options=options
            )
            sel = self.gateway.select_indices(
                system, user, label="build.cross_domain", n_options=len(children)
            )
            if not sel.indices:
                return None
            current = children[min(sel.indices) - 1]
        return current.node_id

    # -- the BFS build -----------------------------------------------------------

    def build(self, registry: Registry) -> tuple[Taxonomy, BuildReport]:
        """Grows the full tree breadth-first, then runs the cross-domain pass."""
        cfg = self.cfg
        before = self.gateway.meter.snapshot()
        report = BuildReport(method="bfs")
        taxonomy = Taxonomy()
        taxonomy.root.name = "All services"
        all_services = list(registry)
        taxonomy.root.service_ids = [s.id for s in all_services]
        node_services: dict[str, list[Service]] = {taxonomy.root_id: all_services}

        queue: deque[str] = deque([taxonomy.root_id])
        while queue:
            node_id = queue.popleft()
            node = taxonomy.node(node_id)
            services = node_services[node_id]
            if len(services) <= cfg.leaf_threshold or node.depth >= cfg.max_depth:
                continue  # stays a leaf
            try:
                children = self.split_node(taxonomy, node_id, services, report)
            except DesignError as exc:
                if node_id == taxonomy.root_id:
                    raise DesignError(f"unrecoverable design failure at the root: {exc}") from exc
                report.warnings.append(f"{node_id}: design failed ({exc}); kept as a leaf")
                report.oversized_leaves.append(node_id)
                continue
            if not children:
                continue  # collapsed back into a leaf; split_node reported why
            node.service_ids = []
            for child_id, child_services in children:
                node_services[child_id] = child_services
                queue.append(child_id)

        taxonomy.rebuild_assignment()
        self.cross_domain_assign(taxonomy, registry, report)
        report.assigned_services = len(taxonomy.assignment)
        _fill_phases(report, usage_delta(before, self.gateway.meter.snapshot()), ("build.",))
        return taxonomy, report


def build(registry: Registry, cfg: BuildConfig, gateway: LlmGateway) -> tuple[Taxonomy, BuildReport]:
    return TaxonomyBuilder(gateway, cfg).build(registry)


# -- one-shot construction ----------------------------------------------------


def _tree_from_design(obj: dict, report: BuildReport) -> Taxonomy:
    """Materializes the strict-JSON design tree; bounds are advisory."""
    categories = obj.get("categories")
    if not isinstance(categories, list) or not categories:
        raise DesignError("one-shot design reply lacks a 'categories' array")
    taxonomy = Taxonomy()
    taxonomy.root.name = "All services"

    def add_level(parent_id: str, items: list, level: int) -> int:
        added = 0
        for item in items:
            if not isinstance(item, dict):
                continue
            name = str(item.get("name") or "").strip()
            if not name:
                continue
            node = taxonomy.add_child(
                parent_id, name, str(item.get("description") or "").strip()
            )
            added += 1
            children = item.get("children")
            if isinstance(children, list) and level < 3:
                count = add_level(node.node_id, children, level + 1)
                if not 3 <= count <= 5:
                    report.warnings.append(
                        f"{node.node_id}: {count} children outside the requested (3, 5) range"
                    )
        return added

    top_count = add_level(taxonomy.root_id, categories, 1)
    if not 6 <= top_count <= 10:
        report.warnings.append(f"{top_count} top-level categories outside the requested (6, 10) range")
    return taxonomy


def _render_outline(taxonomy: Taxonomy) -> str:
    lines: list[str] = []

    def walk(node_id: str) -> None:
        node = taxonomy.node(node_id)
        if node_id != taxonomy.root_id:
            indent = "  " * (node.depth - 1)
            desc = f": {node.description}" if node.description else ""
            lines.append(f"{indent}- {node.name}{desc}")
        for child_id in node.children:
            walk(child_id)

    walk(taxonomy.root_id)
    return "\n".join(lines)


def _resolve_path(taxonomy: Taxonomy, reply: str) -> str | None:
    """Maps a 'Top > Sub > Leaf' reply onto a leaf id, or None."""
    path_line = None
    for line in reply.splitlines():
        if ">" in line:
            path_line = line
    if path_line is None:
        return None
    parts = [re.sub(r'^["\'\s\-\d.]+|["\'\s]+$', "", p) for p in path_line.split(">")]
    parts = [p for p in parts if p]
    if not parts:
        return None
    current = taxonomy.root
    for part in parts:
        wanted = _normalize_name(part)
        next_node = None
        for child_id in current.children:
            if _normalize_name(taxonomy.node(child_id).name) == wanted:
                next_node = taxonomy.node(child_id)
                break
        if next_node is None:
            return None
        current = next_node
    return current.node_id if current.is_leaf() else None


def _prune_empty(taxonomy: Taxonomy, report: BuildReport) -> None:
    """Removes leaves that absorbed nothing, then any childless ancestors."""
    removed = True
    parents = taxonomy.parent_map()
    while removed:
        removed = False
        for node_id in list(taxonomy.nodes):
            if node_id == taxonomy.root_id:
                continue
            node = taxonomy.nodes.get(node_id)
            if node is None or node.children or node.service_ids:
                continue
            taxonomy.remove_child(parents[node_id], node_id)
            report.pruned_empty_categories += 1
            removed = True
        if removed:
            parents = taxonomy.parent_map()


def build_oneshot(
    registry: Registry,
    variant: str,
    cfg: BuildConfig,
    gateway: LlmGateway,
) -> tuple[Taxonomy, BuildReport]:
    """Single-pass baseline builder: one design call for the whole tree,
    then one classification call per service. Variants: base, freq (keyword
    payload), refine (whole-tree refinement cycles), axis (single-axis rules
    prepended to the design prompt)."""
    variant = variant.lstrip("+")
    if variant not in ONESHOT_VARIANTS:
        raise DataError(f"unknown one-shot variant {variant!r}; expected one of {ONESHOT_VARIANTS}")
    builder = TaxonomyBuilder(gateway, cfg)
    before = gateway.meter.snapshot()
    report = BuildReport(method=f"oneshot-{variant}")
    services = list(registry)
    if not services:
        raise DataError("cannot build a taxonomy over an empty registry")

    if variant == "freq":
        table = builder.extract_keywords(services, label="oneshot.keyword")
        payload_header = "Keyword frequencies (keyword, number of services mentioning it):"
        payload = table.render()
    else:
        payload_header = "Services:"
        payload = _numbered_services(services)
    axis_prefix = prompts.snippet("axis_rules") + "\n\n" if variant == "axis" else ""

    system, user = prompts.render(
        "oneshot_design", axis_prefix=axis_prefix, payload_header=payload_header, payload=payload
    )
    design = gateway.chat_json(system, user, label="oneshot.design")
    if design is None:
        raise DesignError("one-shot design produced no parsable JSON tree")
    taxonomy = _tree_from_design(design, report)

    classify_template = prompts.load("oneshot_classify")

    def classify_all() -> list[dict]:
        outline = _render_outline(taxonomy)

        def call(svc: Service) -> tuple[str | None, str]:
            sys_p, user_p = classify_template.render(
                tree=outline, service_name=svc.name, service_description=svc.description
            )
            reply = gateway.chat(sys_p, user_p, label="oneshot.classify").text
            return _resolve_path(taxonomy, reply), reply

        failures: list[dict] = []
        for leaf in taxonomy.nodes.values():
            leaf.service_ids = []
        for svc, (leaf_id, reply) in zip(services, gateway.run_parallel(call, services)):
            if leaf_id is None:
                failures.append({"service_id": svc.id, "reply": reply.strip()[:200]})
            else:
                taxonomy.node(leaf_id).service_ids.append(svc.id)
        return failures

    failures = classify_all()
    if variant == "refine":
        cycles = 0
        while failures and cycles < cfg.max_refine_iterations:
            failed_services = [registry.get(f["service_id"]) for f in failures]
            sys_p, user_p = prompts.render(
                "oneshot_refine",
                tree=_render_outline(taxonomy),
                failure_count=str(len(failures)),
                failures=_numbered_services(failed_services[:20]),
            )
            refined = gateway.chat_json(sys_p, user_p, label="oneshot.refine")
            if refined is None:
                report.warnings.append("one-shot refinement reply unusable; stopping early")
                break
            try:
                taxonomy = _tree_from_design(refined, report)
            except DesignError as exc:
                report.warnings.append(f"one-shot refinement rejected: {exc}")
                break
            failures = classify_all()
            cycles += 1

    report.classification_failures = failures
    _prune_empty(taxonomy, report)
    taxonomy.rebuild_assignment()
    report.assigned_services = len(taxonomy.assignment)
    _fill_phases(report, usage_delta(before, gateway.meter.snapshot()), ("oneshot.",))
    return taxonomy, report
