"""Tree structure, LCA distances vs a BFS oracle, persistence, validation."""

from __future__ import annotations

import json
import random
from collections import deque

import pytest
from hypothesis import given
from hypothesis import strategies as st

from taxonav.errors import DataError, SchemaError
from taxonav.registry import Registry, Service
from taxonav.taxonomy import (
    Taxonomy,
    load,
    save,
    stats,
    validate,
)


def small_tree() -> Taxonomy:
    """root -> a -> a1, root -> b; a1 and b are leaves with services."""
    tax = Taxonomy()
    a = tax.add_child("root", "A", "alpha things")
    a1 = tax.add_child(a.node_id, "A1", "alpha ones")
    b = tax.add_child("root", "B", "beta things")
    a1.service_ids = ["s1", "s2"]
    b.service_ids = ["s2", "s3"]
    tax.rebuild_assignment()
    return tax


def bfs_distance(tax: Taxonomy, a: str, b: str) -> int:
    """Independent oracle: undirected shortest path over the tree edges."""
    adj: dict[str, set[str]] = {nid: set() for nid in tax.nodes}
    for nid, node in tax.nodes.items():
        for child in node.children:
            adj[nid].add(child)
            adj[child].add(nid)
    seen = {a: 0}
    queue = deque([a])
    while queue:
        cur = queue.popleft()
        if cur == b:
            return seen[cur]
        for nxt in adj[cur]:
            if nxt not in seen:
                seen[nxt] = seen[cur] + 1
                queue.append(nxt)
    raise AssertionError("nodes not connected")


def test_add_child_slugs_and_collisions():
    tax = Taxonomy()
    first = tax.add_child("root", "Crypto Prices!")
    second = tax.add_child("root", "crypto prices")
    assert first.node_id == "root/crypto-prices"
    assert second.node_id == "root/crypto-prices-2"
    assert first.depth == 1


def test_leaves_depth_first_child_order():
    tax = small_tree()
    assert tax.leaves() == ["root/a/a1", "root/b"]


def test_top_level_of():
    tax = small_tree()
    assert tax.top_level_of("root/a/a1") == "root/a"
    assert tax.top_level_of("root/b") == "root/b"
    assert tax.top_level_of("root") == "root"


def test_lca_distance_hand_cases():
    tax = small_tree()
    assert tax.lca_distance("root/a/a1", "root/b") == 3
    assert tax.lca_distance("root/a/a1", "root/a") == 1
    assert tax.lca_distance("root", "root/a/a1") == 2
    assert tax.lca_distance("root/b", "root/b") == 0


def random_tree(seed: int, n_nodes: int) -> Taxonomy:
    rng = random.Random(seed)
    tax = Taxonomy()
    ids = ["root"]
    for i in range(n_nodes):
        parent = rng.choice(ids)
        node = tax.add_child(parent, f"n{i}")
        ids.append(node.node_id)
    return tax


@given(seed=st.integers(0, 10_000), n_nodes=st.integers(1, 25), data=st.data())
def test_lca_distance_matches_bfs_oracle(seed, n_nodes, data):
    tax = random_tree(seed, n_nodes)
    ids = sorted(tax.nodes)
    a = data.draw(st.sampled_from(ids))
    b = data.draw(st.sampled_from(ids))
    d = tax.lca_distance(a, b)
    assert d == bfs_distance(tax, a, b)
    assert d == tax.lca_distance(b, a)
    assert (d == 0) == (a == b)


def test_lca_distance_unknown_node():
    with pytest.raises(DataError):
        small_tree().lca_distance("root", "root/missing")


def test_rebuild_assignment_primary_first():
    tax = small_tree()
    # s2 sits in both leaves; the depth-first earlier leaf is primary
    assert tax.assignment["s2"] == ["root/a/a1", "root/b"]
    assert tax.assignment["s1"] == ["root/a/a1"]


def test_stats_root_only():
    tax = Taxonomy()
    tax.root.service_ids = ["a", "b", "c", "d", "e"]
    s = stats(tax)
    assert (s.total_categories, s.leaf_categories, s.max_depth) == (1, 1, 0)
    assert s.avg_services_per_leaf == 5.0
    assert (s.branching_min, s.branching_mean, s.branching_max) == (0, 0.0, 0)


def test_stats_counts_cross_domain_copies_per_leaf():
    tax = small_tree()
    s = stats(tax)
    assert s.total_categories == 4
    assert s.leaf_categories == 2
    assert s.max_depth == 2
    assert s.avg_services_per_leaf == 2.0
    assert (s.branching_min, s.branching_mean, s.branching_max) == (1, 1.5, 2)


def registry_for(tax: Taxonomy) -> Registry:
    sids = sorted({sid for n in tax.nodes.values() for sid in n.service_ids})
    return Registry([Service(id=s, name=s, description="d") for s in sids])


def test_validate_clean_tree():
    tax = small_tree()
    assert validate(tax, registry_for(tax)) == []


def test_validate_detects_violations():
    tax = small_tree()
    reg = registry_for(tax)

    tax.node("root/b").service_ids.append("ghost")
    tax.node("root/b").service_ids.append("s3")
    tax.node("root/a").children.append("root/a/missing")
    tax.nodes["orphan"] = type(tax.root)(node_id="orphan", name="x", depth=9)
    tax.assignment["s1"] = ["root/b"]  # leaf that does not hold s1
    kinds = {v.kind for v in validate(tax, reg, max_depth=3)}
    assert {"dangling-service", "duplicate-in-leaf", "dangling-child",
            "unreachable", "over-depth", "assignment-mismatch"} <= kinds


def test_validate_uncovered_service():
    tax = small_tree()
    reg = Registry(list(registry_for(tax)) + [Service(id="s9", name="s9", description="d")])
    kinds = {v.kind for v in validate(tax, reg)}
    assert "uncovered" in kinds


# -- persistence ---------------------------------------------------------------


def test_save_load_round_trip(tmp_path):
    tax = small_tree()
    save(tax, tmp_path)
    assert load(tmp_path) == tax


def test_save_is_deterministic(tmp_path):
    tax = small_tree()
    save(tax, tmp_path / "one")
    save(tax, tmp_path / "two")
    for name in ("taxonomy.json", "class.json"):
        assert (tmp_path / "one" / name).read_bytes() == (tmp_path / "two" / name).read_bytes()


def test_class_file_preserves_primary_first_order(tmp_path):
    tax = small_tree()
    save(tax, tmp_path)
    doc = json.loads((tmp_path / "class.json").read_text())
    assert doc["s2"] == ["root/a/a1", "root/b"]
    # leaf service order survives the round trip even for shared services
    assert load(tmp_path).node("root/b").service_ids == ["s2", "s3"]


def test_load_missing_file(tmp_path):
    with pytest.raises(DataError, match="missing taxonomy file"):
        load(tmp_path)


def test_load_invalid_json(tmp_path):
    save(small_tree(), tmp_path)
    (tmp_path / "taxonomy.json").write_text("{nope")
    with pytest.raises(SchemaError, match="invalid JSON"):
        load(tmp_path)


def test_load_names_missing_field(tmp_path):
    save(small_tree(), tmp_path)
    doc = json.loads((tmp_path / "taxonomy.json").read_text())
    del doc["nodes"][0]["boundary"]
    (tmp_path / "taxonomy.json").write_text(json.dumps(doc))
    with pytest.raises(SchemaError, match=r"nodes\[0\] missing field 'boundary'"):
        load(tmp_path)


def test_load_rejects_cross_file_mismatch(tmp_path):
    save(small_tree(), tmp_path)
    doc = json.loads((tmp_path / "class.json").read_text())
    doc["s1"] = ["root/a"]  # internal node, not a leaf
    (tmp_path / "class.json").write_text(json.dumps(doc))
    with pytest.raises(SchemaError, match="non-leaf"):
        load(tmp_path)


def test_load_rejects_assignment_missing_leaf_service(tmp_path):
    save(small_tree(), tmp_path)
    doc = json.loads((tmp_path / "class.json").read_text())
    del doc["s3"]
    (tmp_path / "class.json").write_text(json.dumps(doc))
    with pytest.raises(SchemaError, match="absent from the assignment map"):
        load(tmp_path)


def test_load_rejects_unknown_leaf_reference(tmp_path):
    save(small_tree(), tmp_path)
    doc = json.loads((tmp_path / "class.json").read_text())
    doc["s1"] = ["root/nowhere"]
    (tmp_path / "class.json").write_text(json.dumps(doc))
    with pytest.raises(SchemaError, match="unknown leaf"):
        load(tmp_path)


def test_remove_child_requires_childless():
    tax = small_tree()
    with pytest.raises(DataError, match="still has children"):
        tax.remove_child("root", "root/a")
    tax.remove_child("root/a", "root/a/a1")
    assert "root/a/a1" not in tax.nodes
