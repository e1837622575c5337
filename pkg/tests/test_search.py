"""Retrieval behavior: level-synchronous navigation, dedup, small-group
merging, per-group selection, and the three disclosure modes."""

from __future__ import annotations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from taxonav.errors import ConfigError
from taxonav.gateway import LlmGateway, MockChatBackend, ScriptRule
from taxonav.registry import Registry, Service
from taxonav.search import (
    NAVIGATE_INSTRUCTIONS,
    SELECT_INSTRUCTIONS,
    LeafHit,
    SearchConfig,
    dedup,
    merge_small_groups,
    retrieve,
)
from taxonav.taxonomy import Taxonomy


def gw(*rules: ScriptRule, oracle=None) -> LlmGateway:
    return LlmGateway(chat_backend=MockChatBackend(rules=rules, oracle=oracle))


def make_registry(ids: list[str]) -> Registry:
    return Registry([Service(id=i, name=i, description=f"{i} does things") for i in ids])


def leaf(tax: Taxonomy, parent: str, name: str, services: list[str]):
    node = tax.add_child(parent, name, f"{name} category")
    node.service_ids = list(services)
    return node


# -- dedup -------------------------------------------------------------------


def test_dedup_keeps_first_occurrence_and_drops_emptied_hits():
    hits = [
        LeafHit("a", ["s1", "s2"]),
        LeafHit("b", ["s2", "s3"]),
        LeafHit("c", ["s1"]),
    ]
    out = dedup(hits)
    assert [(h.leaf_id, h.services) for h in out] == [("a", ["s1", "s2"]), ("b", ["s3"])]


@given(
    st.lists(
        st.lists(st.integers(min_value=0, max_value=20), max_size=8),
        max_size=8,
    )
)
def test_dedup_preserves_union_without_duplicates(raw):
    hits = [LeafHit(f"leaf{i}", [f"s{v}" for v in svc]) for i, svc in enumerate(raw)]
    out = dedup(hits)
    flat = [sid for h in out for sid in h.services]
    assert len(flat) == len(set(flat))
    assert set(flat) == {sid for h in hits for sid in h.services}
    assert all(h.services for h in out)


# -- merging -----------------------------------------------------------------


def sibling_tree() -> Taxonomy:
    tax = Taxonomy()
    a = tax.add_child("root", "A", "a")
    b = tax.add_child("root", "B", "b")
    leaf(tax, a.node_id, "A1", [])
    leaf(tax, a.node_id, "A2", [])
    leaf(tax, b.node_id, "B1", [])
    return tax


def test_merge_joins_closest_small_groups_and_leaves_big_ones():
    tax = sibling_tree()
    hits = [
        LeafHit("root/a/a1", [f"x{i}" for i in range(5)]),
        LeafHit("root/a/a2", [f"y{i}" for i in range(5)]),
        LeafHit("root/b/b1", [f"z{i}" for i in range(40)]),
    ]
    out = merge_small_groups(hits, 30, tax)
    assert [(h.leaf_id, len(h.services)) for h in out] == [("root/a/a1", 10), ("root/b/b1", 40)]
    # siblings (distance 2) merged instead of the cross-branch pair (distance 4)
    assert out[0].services == hits[0].services + hits[1].services


def test_merge_noop_when_groups_are_large_enough():
    tax = sibling_tree()
    hits = [
        LeafHit("root/a/a1", [f"x{i}" for i in range(30)]),
        LeafHit("root/a/a2", [f"y{i}" for i in range(31)]),
    ]
    out = merge_small_groups(hits, 30, tax)
    assert [(h.leaf_id, h.services) for h in out] == [(h.leaf_id, h.services) for h in hits]


def test_merge_single_straggler_stays():
    tax = sibling_tree()
    hits = [
        LeafHit("root/a/a1", ["x0"]),
        LeafHit("root/b/b1", [f"z{i}" for i in range(30)]),
    ]
    out = merge_small_groups(hits, 30, tax)
    assert [(h.leaf_id, len(h.services)) for h in out] == [("root/a/a1", 1), ("root/b/b1", 30)]


def test_merge_distance_beats_list_order():
    # A1 appears before B1, but A2 is A1's sibling, so A1+A2 merge first
    tax = sibling_tree()
    hits = [
        LeafHit("root/a/a1", ["a1s"]),
        LeafHit("root/b/b1", ["b1s"]),
        LeafHit("root/a/a2", ["a2s"]),
    ]
    out = merge_small_groups(hits, 2, tax)
    assert [(h.leaf_id, h.services) for h in out] == [
        ("root/a/a1", ["a1s", "a2s"]),
        ("root/b/b1", ["b1s"]),
    ]


def test_merge_size_tiebreak_prefers_smaller_combined_group():
    tax = Taxonomy()
    p = tax.add_child("root", "P", "p")
    for name in ("X", "Y", "Z"):
        leaf(tax, p.node_id, name, [])
    hits = [
        LeafHit("root/p/x", ["sx"]),
        LeafHit("root/p/y", ["sy1", "sy2"]),
        LeafHit("root/p/z", ["sz"]),
    ]
    # all pairs are siblings (distance 2); (X, Z) has the smallest combined size
    out = merge_small_groups(hits, 3, tax)
    assert len(out) == 1
    assert out[0].leaf_id == "root/p/x"
    assert out[0].services == ["sx", "sz", "sy1", "sy2"]


def test_merge_id_tiebreak_is_lexicographic():
    tax = Taxonomy()
    p = tax.add_child("root", "P", "p")
    for name in ("X", "Y", "Z"):
        leaf(tax, p.node_id, name, [])
    hits = [
        LeafHit("root/p/x", ["sx"]),
        LeafHit("root/p/y", ["sy"]),
        LeafHit("root/p/z", ["sz"]),
    ]
    out = merge_small_groups(hits, 2, tax)
    assert [(h.leaf_id, h.services) for h in out] == [
        ("root/p/x", ["sx", "sy"]),
        ("root/p/z", ["sz"]),
    ]


# -- full retrieval ------------------------------------------------------------


def two_level_tree() -> tuple[Taxonomy, Registry]:
    tax = Taxonomy()
    c1 = tax.add_child("root", "C1", "first")
    c2 = tax.add_child("root", "C2", "second")
    leaf(tax, c1.node_id, "L11", ["a1", "a2"])
    leaf(tax, c1.node_id, "L12", ["b1"])
    leaf(tax, c2.node_id, "L21", ["c1"])
    tax.rebuild_assignment()
    return tax, make_registry(["a1", "a2", "b1", "c1"])


def test_retrieve_on_leaf_root_is_selection_only():
    tax = Taxonomy()
    tax.root.service_ids = ["a1", "a2"]
    tax.rebuild_assignment()
    registry = make_registry(["a1", "a2"])
    gateway = gw(ScriptRule(pattern=".*", label="search.select", reply="1, 2"))
    result = retrieve("q", tax, registry, gateway)
    assert result.service_ids == ["a1", "a2"]
    assert result.navigation_calls == 0
    assert result.selection_calls == 1
    assert result.calls == 1
    assert result.depth_reached == 0
    assert result.groups_visited == 1
    assert result.branches_per_level == 0.0


def test_retrieve_empty_leaf_costs_nothing():
    tax = Taxonomy()
    tax.rebuild_assignment()
    gateway = gw()
    result = retrieve("q", tax, make_registry([]), gateway)
    assert result.service_ids == []
    assert result.calls == 0
    assert result.groups_visited == 0
    assert gateway.chat_backend.transcript == []


def test_retrieve_empty_selection_gives_empty_result():
    tax = Taxonomy()
    tax.root.service_ids = ["a1"]
    registry = make_registry(["a1"])
    gateway = gw(ScriptRule(pattern=".*", label="search.select", reply="0"))
    result = retrieve("q", tax, registry, gateway)
    assert result.service_ids == []
    assert result.calls == 1
    assert result.groups_visited == 1
    assert result.trace[-1].chosen == []


def test_retrieve_orders_hits_by_navigation_path():
    tax, registry = two_level_tree()
    gateway = gw(
        ScriptRule(pattern=r"1\. C1:", label="search.navigate", reply="1, 2"),
        ScriptRule(pattern=r"1\. L11:", label="search.navigate", reply="2"),
        ScriptRule(pattern=r"1\. L21:", label="search.navigate", reply="1"),
        ScriptRule(pattern=r"1\. b1:", label="search.select", reply="1"),
        ScriptRule(pattern=r"1\. c1:", label="search.select", reply="1"),
    )
    result = retrieve("q", tax, registry, gateway, SearchConfig(merge_threshold=1))
    assert result.service_ids == ["b1", "c1"]
    nav_nodes = [s.node_id for s in result.trace if s.kind == "navigate"]
    assert nav_nodes == ["root", "root/c1", "root/c2"]
    assert result.depth_reached == 2
    assert result.groups_visited == 2
    # level 0 chose 2 branches, level 1 averaged (1 + 1) / 2
    assert result.branches_per_level == pytest.approx(1.5)


def test_retrieve_counts_reask_calls():
    tax = Taxonomy()
    leaf(tax, "root", "L", ["a1"])
    leaf(tax, "root", "L2", ["b1"])
    registry = make_registry(["a1", "b1"])
    gateway = gw(
        ScriptRule(pattern=r"1\. L:", label="search.navigate", reply=["junk reply", "1"]),
        ScriptRule(pattern=".*", label="search.select", reply="1"),
    )
    result = retrieve("q", tax, registry, gateway)
    assert result.navigation_calls == 2  # the parse failure costs one re-ask
    assert result.selection_calls == 1
    assert result.calls == 3
    assert result.service_ids == ["a1"]


def mode_oracle(label, request):
    """Replies are a pure function of the injected instruction sentence, so
    any behavior difference between modes comes from that sentence alone."""
    system = request.system_prompt
    options = [
        line for line in request.user_prompt.splitlines() if line[:1].isdigit()
    ]
    if label == "search.navigate":
        if NAVIGATE_INSTRUCTIONS["get_one"] in system:
            return "1"
        return ", ".join(str(i) for i in range(1, len(options) + 1))
    if label == "search.select":
        if SELECT_INSTRUCTIONS["get_one"] in system:
            return "1"
        if SELECT_INSTRUCTIONS["get_important"] in system:
            seen: set[str] = set()
            keep = []
            for i, line in enumerate(options, start=1):
                function = line.split(": ", 1)[1]
                if function not in seen:
                    seen.add(function)
                    keep.append(str(i))
            return ", ".join(keep)
        return ", ".join(str(i) for i in range(1, len(options) + 1))
    return None


def duplicate_function_world() -> tuple[Taxonomy, Registry]:
    tax = Taxonomy()
    leaf(tax, "root", "Mail", ["m1", "m2"])
    leaf(tax, "root", "Files", ["f1"])
    tax.rebuild_assignment()
    registry = Registry(
        [
            Service(id="m1", name="m1", description="sends email"),
            Service(id="m2", name="m2", description="sends email"),
            Service(id="f1", name="f1", description="stores files"),
        ]
    )
    return tax, registry


def test_modes_differ_only_by_instruction_and_nest():
    tax, registry = duplicate_function_world()
    results = {}
    for mode in ("get_all", "get_important", "get_one"):
        gateway = gw(oracle=mode_oracle)
        results[mode] = retrieve("q", tax, registry, gateway, SearchConfig(mode=mode))
    assert results["get_all"].service_ids == ["m1", "m2", "f1"]
    assert results["get_important"].service_ids == ["m1", "f1"]
    assert results["get_one"].service_ids == ["m1"]
    assert set(results["get_one"].service_ids) < set(results["get_important"].service_ids)
    assert set(results["get_important"].service_ids) < set(results["get_all"].service_ids)


def test_get_one_caps_even_a_multi_index_reply():
    tax = Taxonomy()
    leaf(tax, "root", "Mail", ["m1", "m2"])
    leaf(tax, "root", "Files", ["f1"])
    registry = make_registry(["m1", "m2", "f1"])
    gateway = gw(
        ScriptRule(pattern=r"Categories:", label="search.navigate", reply="1"),
        ScriptRule(pattern=r"Services:", label="search.select", reply="1, 2"),
    )
    result = retrieve("q", tax, registry, gateway, SearchConfig(mode="get_one"))
    assert result.service_ids == ["m1"]
    assert result.selection_calls == 1


def test_retrieval_is_deterministic(world200, gateway_factory):
    from taxonav.builder import BuildConfig, build

    taxonomy, _ = build(world200.registry, BuildConfig(), gateway_factory(world200))
    query = world200.queries[0]
    runs = []
    for _ in range(2):
        gateway = gateway_factory(world200)
        runs.append(retrieve(query.text, taxonomy, world200.registry, gateway).to_dict())
    assert runs[0] == runs[1]


def test_no_prompt_enumerates_the_registry(world200, gateway_factory):
    from taxonav.builder import BuildConfig, build

    taxonomy, _ = build(world200.registry, BuildConfig(), gateway_factory(world200))
    gateway = gateway_factory(world200)
    for query in world200.queries[:5]:
        result = retrieve(query.text, taxonomy, world200.registry, gateway)
        assert set(result.service_ids) == set(query.ground_truth)
        assert max(step.options_shown for step in result.trace) < len(world200.registry)


def test_search_config_validation():
    with pytest.raises(ConfigError, match="unknown search mode"):
        SearchConfig(mode="get_some")
    with pytest.raises(ConfigError):
        SearchConfig(merge_threshold=0)
    with pytest.raises(ConfigError):
        SearchConfig(workers=0)


def test_result_to_dict_round_trips_trace():
    tax = Taxonomy()
    tax.root.service_ids = ["a1"]
    registry = make_registry(["a1"])
    gateway = gw(ScriptRule(pattern=".*", label="search.select", reply="1"))
    payload = retrieve("q", tax, registry, gateway).to_dict()
    assert payload["service_ids"] == ["a1"]
    assert payload["trace"][0]["kind"] == "select"
    assert payload["trace"][0]["options_shown"] == 1
    assert set(payload) >= {
        "calls",
        "navigation_calls",
        "selection_calls",
        "prompt_tokens",
        "output_tokens",
        "depth_reached",
        "branches_per_level",
        "groups_visited",
        "flags",
    }
