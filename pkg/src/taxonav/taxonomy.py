"""Multi-parent category tree: structure, traversal, persistence, statistics.

The tree itself is a plain rooted tree (every node has one parent). The
multi-parent property lives only in the assignment map and in leaf service
lists: one service id may appear under several leaves. Node ids are
path-derived slugs ("root/travel/flights") so diffs stay readable;
collisions within a parent are resolved by numeric suffixes.

Persistence splits into two files: taxonomy.json (nodes, child order,
boundaries, leaf service lists) and class.json (service id -> ordered leaf
ids, primary placement first).
"""

from __future__ import annotations

import json
import logging
import re
import statistics
from dataclasses import dataclass, field
from pathlib import Path

from .errors import DataError, SchemaError
from .registry import Registry

logger = logging.getLogger(__name__)

ROOT_ID = "root"

TAXONOMY_FILE = "taxonomy.json"
CLASS_FILE = "class.json"


@dataclass
class TaxonomyNode:
    node_id: str
    name: str
    description: str = ""
    boundary: str = ""
    children: list[str] = field(default_factory=list)
    service_ids: list[str] = field(default_factory=list)
    depth: int = 0

    def is_leaf(self) -> bool:
        return not self.children


class Taxonomy:
    """Rooted category tree plus the service -> leaves assignment map."""

    def __init__(
        self,
        nodes: dict[str, TaxonomyNode] | None = None,
        root_id: str = ROOT_ID,
        assignment: dict[str, list[str]] | None = None,
    ) -> None:
        self.nodes: dict[str, TaxonomyNode] = nodes or {
            root_id: TaxonomyNode(node_id=root_id, name=root_id)
        }
        self.root_id = root_id
        if root_id not in self.nodes:
            raise DataError(f"root node {root_id!r} missing from node table")
        self.assignment: dict[str, list[str]] = assignment or {}

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Taxonomy):
            return NotImplemented
        return (
            self.root_id == other.root_id
            and self.nodes == other.nodes
            and self.assignment == other.assignment
        )

    # -- structure ---------------------------------------------------------

    def node(self, node_id: str) -> TaxonomyNode:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise DataError(f"unknown node id {node_id!r}") from None

    @property
    def root(self) -> TaxonomyNode:
        return self.nodes[self.root_id]

    def add_child(
        self, parent_id: str, name: str, description: str = "", boundary: str = ""
    ) -> TaxonomyNode:
        parent = self.node(parent_id)
        child = TaxonomyNode(
            node_id=make_node_id(self, parent_id, name),
            name=name,
            description=description,
            boundary=boundary,
            depth=parent.depth + 1,
        )
        self.nodes[child.node_id] = child
        parent.children.append(child.node_id)
        return child

    def remove_child(self, parent_id: str, child_id: str) -> None:
        """Detaches and deletes a childless child node."""
        child = self.node(child_id)
        if child.children:
            raise DataError(f"cannot remove node {child_id!r}: it still has children")
        self.node(parent_id).children.remove(child_id)
        del self.nodes[child_id]

    def parent_map(self) -> dict[str, str]:
        parents: dict[str, str] = {}
        for node in self.nodes.values():
            for child_id in node.children:
                parents[child_id] = node.node_id
        return parents

    def leaves(self) -> list[str]:
        """Leaf ids in depth-first, child-index order. Deterministic."""
        order: list[str] = []

        def walk(node_id: str) -> None:
            node = self.node(node_id)
            if node.is_leaf():
                order.append(node_id)
                return
            for child_id in node.children:
                walk(child_id)

        walk(self.root_id)
        return order

    def top_level_of(self, node_id: str) -> str:
        """The depth-1 ancestor of a node (the node itself if it is the root)."""
        parents = self.parent_map()
        current = node_id
        while current != self.root_id and parents.get(current, self.root_id) != self.root_id:
            current = parents[current]
        return current

    def lca_distance(self, a: str, b: str) -> int:
        """Tree path length between two nodes: depth(a)+depth(b)-2*depth(lca)."""
        parents = self.parent_map()

        def chain(node_id: str) -> list[str]:
            self.node(node_id)
            path = [node_id]
            while path[-1] != self.root_id:
                parent = parents.get(path[-1])
                if parent is None:
                    raise DataError(f"node {path[-1]!r} is not reachable from the root")
                path.append(parent)
            return path

        chain_a = chain(a)
        depth_a = {node_id: i for i, node_id in enumerate(chain_a)}
        steps_b = 0
        for node_id in chain(b):
            if node_id in depth_a:
                return depth_a[node_id] + steps_b
            steps_b += 1
        raise DataError(f"nodes {a!r} and {b!r} share no ancestor")

    def rebuild_assignment(self) -> None:
        """Derives the assignment map from leaf service lists.

        Walks leaves depth-first so the primary placement (first leaf that
        holds the service in tree order) comes first. Cross-domain additions
        made later must append to the map themselves to keep "primary first".
        """
        assignment: dict[str, list[str]] = {}
        for leaf_id in self.leaves():
            for sid in self.node(leaf_id).service_ids:
                assignment.setdefault(sid, [])
                if leaf_id not in assignment[sid]:
                    assignment[sid].append(leaf_id)
        self.assignment = assignment


def make_node_id(taxonomy: Taxonomy, parent_id: str, name: str) -> str:
    slug = re.sub(r"[^a-z0-9]+", "-", name.lower()).strip("-") or "node"
    base = f"{parent_id}/{slug}"
    node_id = base
    suffix = 2
    while node_id in taxonomy.nodes:
        node_id = f"{base}-{suffix}"
        suffix += 1
    return node_id


@dataclass
class TaxonomyStats:
    total_categories: int
    leaf_categories: int
    max_depth: int
    avg_services_per_leaf: float
    branching_min: int
    branching_mean: float
    branching_max: int

    def to_dict(self) -> dict:
        return {
            "total_categories": self.total_categories,
            "leaf_categories": self.leaf_categories,
            "max_depth": self.max_depth,
            "avg_services_per_leaf": self.avg_services_per_leaf,
            "branching_min": self.branching_min,
            "branching_mean": self.branching_mean,
            "branching_max": self.branching_max,
        }


def stats(taxonomy: Taxonomy) -> TaxonomyStats:
    """Structure statistics. Services sitting in several leaves count once
    per leaf, so cross-domain copies inflate avg_services_per_leaf."""
    leaf_ids = taxonomy.leaves()
    leaf_sizes = [len(taxonomy.node(l).service_ids) for l in leaf_ids]
    internal = [n for n in taxonomy.nodes.values() if n.children]
    branching = [len(n.children) for n in internal]
    return TaxonomyStats(
        total_categories=len(taxonomy.nodes),
        leaf_categories=len(leaf_ids),
        max_depth=max(n.depth for n in taxonomy.nodes.values()),
        avg_services_per_leaf=statistics.fmean(leaf_sizes) if leaf_sizes else 0.0,
        branching_min=min(branching) if branching else 0,
        branching_mean=statistics.fmean(branching) if branching else 0.0,
        branching_max=max(branching) if branching else 0,
    )


@dataclass
class Violation:
    kind: str
    subject: str
    detail: str


def validate(taxonomy: Taxonomy, registry: Registry, max_depth: int = 3) -> list[Violation]:
    """Reports structural violations instead of raising: uncovered services,
    over-depth nodes, dangling ids, duplicates, unreachable nodes."""
    violations: list[Violation] = []
    reachable: set[str] = set()
    queue = [taxonomy.root_id]
    while queue:
        node_id = queue.pop()
        if node_id in reachable:
            continue
        reachable.add(node_id)
        node = taxonomy.nodes.get(node_id)
        if node is None:
            continue
        queue.extend(node.children)

    for node_id in sorted(taxonomy.nodes):
        node = taxonomy.nodes[node_id]
        if node_id not in reachable:
            violations.append(Violation("unreachable", node_id, "not reachable from the root"))
        if node.depth > max_depth:
            violations.append(
                Violation("over-depth", node_id, f"depth {node.depth} exceeds cap {max_depth}")
            )
        for child_id in node.children:
            if child_id not in taxonomy.nodes:
                violations.append(
                    Violation("dangling-child", node_id, f"child {child_id!r} has no node")
                )
        seen: set[str] = set()
        for sid in node.service_ids:
            if sid in seen:
                violations.append(
                    Violation("duplicate-in-leaf", node_id, f"service {sid!r} listed twice")
                )
            seen.add(sid)
            if sid not in registry:
                violations.append(
                    Violation("dangling-service", node_id, f"service {sid!r} not in registry")
                )

    covered: set[str] = set()
    for node_id in reachable:
        node = taxonomy.nodes.get(node_id)
        if node is not None and node.is_leaf():
            covered.update(node.service_ids)
    for svc in registry:
        if svc.id not in covered:
            violations.append(Violation("uncovered", svc.id, "service appears in no leaf"))

    for sid, leaf_ids in taxonomy.assignment.items():
        for leaf_id in leaf_ids:
            node = taxonomy.nodes.get(leaf_id)
            if node is None or not node.is_leaf() or sid not in node.service_ids:
                violations.append(
                    Violation("assignment-mismatch", sid, f"assignment names leaf {leaf_id!r}")
                )
    return violations


# -- persistence -----------------------------------------------------------


def save(taxonomy: Taxonomy, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    nodes = []
    for node_id in sorted(taxonomy.nodes):
        node = taxonomy.nodes[node_id]
        record: dict = {
            "id": node.node_id,
            "name": node.name,
            "description": node.description,
            "boundary": node.boundary,
            "children": list(node.children),
            "depth": node.depth,
        }
        if node.is_leaf():
            record["services"] = list(node.service_ids)
        nodes.append(record)
    doc = {"root": taxonomy.root_id, "nodes": nodes}
    (directory / TAXONOMY_FILE).write_text(
        json.dumps(doc, indent=2, ensure_ascii=False, sort_keys=True) + "\n", encoding="utf-8"
    )
    (directory / CLASS_FILE).write_text(
        json.dumps(taxonomy.assignment, indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
    )


def load(directory: str | Path) -> Taxonomy:
    directory = Path(directory)
    tax_path = directory / TAXONOMY_FILE
    class_path = directory / CLASS_FILE
    for path in (tax_path, class_path):
        if not path.exists():
            raise DataError(f"missing taxonomy file: {path}")
    try:
        doc = json.loads(tax_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{tax_path}: invalid JSON ({exc.msg})") from exc
    try:
        assignment_doc = json.loads(class_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{class_path}: invalid JSON ({exc.msg})") from exc

    if not isinstance(doc, dict) or "root" not in doc or "nodes" not in doc:
        raise SchemaError(f"{tax_path}: expected an object with 'root' and 'nodes'")
    if not isinstance(assignment_doc, dict):
        raise SchemaError(f"{class_path}: expected an object mapping service id to leaf ids")

    nodes: dict[str, TaxonomyNode] = {}
    for idx, record in enumerate(doc["nodes"]):
        if not isinstance(record, dict):
            raise SchemaError(f"{tax_path}: nodes[{idx}] is not an object")
        for key in ("id", "name", "description", "boundary", "children", "depth"):
            if key not in record:
                raise SchemaError(f"{tax_path}: nodes[{idx}] missing field {key!r}")
        node = TaxonomyNode(
            node_id=record["id"],
            name=record["name"],
            description=record["description"],
            boundary=record["boundary"],
            children=list(record["children"]),
            service_ids=list(record.get("services", [])),
            depth=int(record["depth"]),
        )
        if node.node_id in nodes:
            raise SchemaError(f"{tax_path}: duplicate node id {node.node_id!r}")
        nodes[node.node_id] = node

    root_id = doc["root"]
    if root_id not in nodes:
        raise SchemaError(f"{tax_path}: root {root_id!r} has no node record")
    for node in nodes.values():
        for child_id in node.children:
            if child_id not in nodes:
                raise SchemaError(
                    f"{tax_path}: node {node.node_id!r} references unknown child {child_id!r}"
                )

    assignment: dict[str, list[str]] = {}
    for sid, leaf_ids in assignment_doc.items():
        if not isinstance(leaf_ids, list) or not leaf_ids:
            raise SchemaError(f"{class_path}: service {sid!r} must map to a non-empty list")
        for leaf_id in leaf_ids:
            leaf = nodes.get(leaf_id)
            if leaf is None:
                raise SchemaError(f"{class_path}: service {sid!r} references unknown leaf {leaf_id!r}")
            if leaf.children:
                raise SchemaError(f"{class_path}: service {sid!r} references non-leaf {leaf_id!r}")
            if sid not in leaf.service_ids:
                raise SchemaError(
                    f"{class_path}: service {sid!r} assigned to leaf {leaf_id!r} "
                    "but missing from its service list"
                )
        assignment[sid] = list(leaf_ids)

    for node in nodes.values():
        if node.is_leaf():
            for sid in node.service_ids:
                if sid not in assignment or node.node_id not in assignment[sid]:
                    raise SchemaError(
                        f"{class_path}: leaf {node.node_id!r} holds service {sid!r} "
                        "absent from the assignment map"
                    )

    taxonomy = Taxonomy(nodes=nodes, root_id=root_id, assignment=assignment)
    logger.info(
        "loaded taxonomy from %s: %d nodes, %d assigned services",
        directory, len(nodes), len(assignment),
    )
    return taxonomy
