"""Metric arithmetic, run artifacts, and the comparison table."""

from __future__ import annotations

import csv
import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from taxonav.errors import ConfigError, DataError, SchemaError
from taxonav.eval_harness import (
    EvalConfig,
    PerQueryRecord,
    Summary,
    compare,
    evaluate,
    load_records,
    load_summary,
    recompute_summary,
    score_query,
    summarize,
    write_run,
)
from taxonav.registry import QueryCase
from taxonav.search import RetrievalResult, TraceStep


def test_score_query_hand_cases():
    assert score_query(["a", "b", "c"], {"a", "d"}) == (1, 0.5, pytest.approx(1 / 3))
    assert score_query([], {"a"}) == (0, 0.0, 0.0)
    assert score_query(["x"], {"a"}) == (0, 0.0, 0.0)
    assert score_query(["a", "a", "b"], {"a"}) == (1, 1.0, 0.5)  # sets, not lists
    with pytest.raises(ConfigError, match="empty ground-truth"):
        score_query(["a"], set())


@given(
    st.sets(st.integers(0, 30), min_size=1, max_size=10),
    st.lists(st.integers(0, 30), max_size=10),
)
def test_score_query_bounds_and_hit_consistency(truth, returned):
    hit, recall, precision = score_query([str(v) for v in returned], {str(v) for v in truth})
    assert hit in (0, 1)
    assert 0.0 <= recall <= 1.0
    assert 0.0 <= precision <= 1.0
    overlap = set(map(str, returned)) & set(map(str, truth))
    assert hit == (1 if overlap else 0)
    if set(map(str, returned)) <= set(map(str, truth)) and returned:
        assert precision == 1.0


def test_eval_config_validation():
    with pytest.raises(ConfigError, match="method"):
        EvalConfig(method="")
    with pytest.raises(ConfigError, match="workers"):
        EvalConfig(method="taxonomy", workers=0)


def record(qid, hit, recall, precision, calls, ptok, otok=50, error=None):
    return PerQueryRecord(
        query_id=qid,
        returned=["r"],
        truth=["t"],
        hit=hit,
        recall=recall,
        precision=precision,
        calls=calls,
        prompt_tokens=ptok,
        output_tokens=otok,
        error=error,
    )


def ten_records() -> list[PerQueryRecord]:
    rows = [
        (1, 1.0, 1.0, 3, 1000),
        (1, 0.5, 0.5, 3, 1200),
        (1, 0.25, 0.125, 3, 800),
        (1, 1.0, 1.0, 5, 1500),
        (1, 0.75, 0.25, 3, 900),
        (1, 0.5, 0.5, 3, 1100),
        (1, 1.0, 0.25, 3, 1000),
        (0, 0.0, 0.0, 1, 400),
        (0, 0.0, 0.0, 1, 500),
        (0, 0.25, 0.125, 2, 700),
    ]
    records = [record(f"q{i:02d}", *row) for i, row in enumerate(rows)]
    records[8].error = "backend timeout"
    return records


def test_summarize_ten_record_fixture_full_precision():
    # means verified against an independent exact-fraction computation
    summary = summarize(ten_records(), EvalConfig(method="m", dataset="d", setting="s"))
    assert summary.query_count == 10
    assert summary.failure_count == 1
    assert summary.hit_rate == 0.7
    assert summary.recall == 0.525
    assert summary.precision == 0.375
    assert summary.tokens_per_query == 960.0
    assert summary.calls_per_query == 2.7
    assert summary.to_dict()["precision_is_secondary"] is True


def test_summarize_is_order_independent():
    cfg = EvalConfig(method="m")
    forward = summarize(ten_records(), cfg)
    backward = summarize(list(reversed(ten_records())), cfg)
    assert forward == backward  # fsum-based means are exact


def test_summarize_small_hand_case_and_empty():
    records = [
        record("q0", 1, 1.0, 0.5, 2, 100, otok=10),
        record("q1", 0, 0.0, 0.0, 4, 300, otok=30),
    ]
    summary = summarize(records, EvalConfig(method="m"))
    assert summary.hit_rate == 0.5
    assert summary.recall == 0.5
    assert summary.precision == 0.25
    assert summary.tokens_per_query == 220.0
    assert summary.calls_per_query == 3.0
    with pytest.raises(ConfigError, match="empty record list"):
        summarize([], EvalConfig(method="m"))


# -- evaluate -------------------------------------------------------------------


def queries(n: int) -> list[QueryCase]:
    return [QueryCase(id=f"q{i}", text=f"text {i}", ground_truth=frozenset({f"s{i}"})) for i in range(n)]


def test_evaluate_records_stay_in_query_order():
    def retrieve_fn(query: QueryCase) -> RetrievalResult:
        return RetrievalResult(
            service_ids=[f"s{query.id[1:]}"],
            calls=2,
            prompt_tokens=10,
            output_tokens=1,
            trace=[TraceStep(kind="select", node_id="root", options_shown=1, chosen=[1])],
        )

    summary, records = evaluate(retrieve_fn, queries(9), EvalConfig(method="m", workers=4))
    assert [r.query_id for r in records] == [f"q{i}" for i in range(9)]
    assert summary.hit_rate == 1.0
    assert summary.failure_count == 0
    assert records[0].trace[0]["kind"] == "select"


def test_evaluate_captures_package_errors_as_failures():
    def retrieve_fn(query: QueryCase) -> RetrievalResult:
        if query.id == "q1":
            raise DataError("leaf vanished")
        return RetrievalResult(service_ids=list(query.ground_truth), calls=1)

    summary, records = evaluate(retrieve_fn, queries(3), EvalConfig(method="m", workers=1))
    assert summary.failure_count == 1
    failed = records[1]
    assert failed.error == "leaf vanished"
    assert failed.returned == []
    assert failed.hit == 0
    assert summary.hit_rate == pytest.approx(2 / 3)


def test_evaluate_lets_foreign_exceptions_propagate():
    def retrieve_fn(query: QueryCase) -> RetrievalResult:
        raise RuntimeError("not a package error")

    with pytest.raises(RuntimeError):
        evaluate(retrieve_fn, queries(1), EvalConfig(method="m"))
    with pytest.raises(ConfigError, match="empty query list"):
        evaluate(lambda q: RetrievalResult(service_ids=[]), [], EvalConfig(method="m"))


# -- run artifacts ----------------------------------------------------------------


def write_fixture_run(tmp_path):
    cfg = EvalConfig(method="taxonomy", dataset="toolret", setting="get_all")
    records = ten_records()
    summary = summarize(records, cfg)
    run_dir = tmp_path / "run"
    write_run(run_dir, summary, records)
    return run_dir, summary, records


def test_write_run_round_trips(tmp_path):
    run_dir, summary, records = write_fixture_run(tmp_path)
    assert load_records(run_dir) == records
    loaded = load_summary(run_dir)
    assert loaded["hit_rate"] == summary.hit_rate
    assert loaded["precision_is_secondary"] is True


def test_recompute_summary_is_bit_identical(tmp_path):
    run_dir, _, _ = write_fixture_run(tmp_path)
    recomputed = recompute_summary(run_dir)
    rendered = (
        json.dumps(recomputed.to_dict(), indent=2, ensure_ascii=False, sort_keys=True) + "\n"
    )
    assert rendered.encode("utf-8") == (run_dir / "summary.json").read_bytes()


def test_load_summary_schema_errors(tmp_path):
    with pytest.raises(SchemaError, match="has no summary.json"):
        load_summary(tmp_path)
    (tmp_path / "summary.json").write_text("{not json", encoding="utf-8")
    with pytest.raises(SchemaError, match="invalid JSON"):
        load_summary(tmp_path)
    (tmp_path / "summary.json").write_text('{"method": "m"}', encoding="utf-8")
    with pytest.raises(SchemaError, match="missing field"):
        load_summary(tmp_path)


def test_load_records_schema_errors(tmp_path):
    with pytest.raises(SchemaError, match="has no per_query.jsonl"):
        load_records(tmp_path)
    (tmp_path / "per_query.jsonl").write_text('{"query_id": "q0"}\nnot json\n', encoding="utf-8")
    with pytest.raises(SchemaError, match="malformed per-query record"):
        load_records(tmp_path)
    (tmp_path / "per_query.jsonl").write_text("not json\n", encoding="utf-8")
    with pytest.raises(SchemaError, match="line 1"):
        load_records(tmp_path)


# -- comparison -------------------------------------------------------------------


def seed_runs(tmp_path) -> list:
    specs = [
        ("taxonomy", "get_all", [record("q0", 1, 1.0, 0.5, 3, 900)]),
        ("pure-llm", "full", [record("q0", 1, 1.0, 0.25, 1, 60000)]),
        ("embed", "k=5", [record("q0", 0, 0.0, 0.0, 0, 0)]),
    ]
    dirs = []
    for method, setting, records in specs:
        cfg = EvalConfig(method=method, dataset="toolret", setting=setting)
        run_dir = tmp_path / method
        write_run(run_dir, summarize(records, cfg), records)
        dirs.append(run_dir)
    return dirs


def test_compare_sorts_and_footnotes(tmp_path):
    table = compare(seed_runs(tmp_path))
    assert [row["method"] for row in table.rows] == ["pure-llm", "taxonomy", "embed"]
    text = table.render_text()
    assert "prec(2nd)" in text
    assert text.splitlines()[-1] == (
        "precision is a secondary metric: benchmark ground truth is incomplete"
    )
    assert "taxonomy" in text and "60050.0" in text
    with pytest.raises(ConfigError, match="at least one run"):
        compare([])


def test_compare_to_csv(tmp_path):
    table = compare(seed_runs(tmp_path))
    out = tmp_path / "table.csv"
    table.to_csv(out)
    with out.open(encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [row["method"] for row in rows] == ["pure-llm", "taxonomy", "embed"]
    assert rows[0]["hit_rate"] == "1.0"
    assert set(rows[0]) == {
        "method", "dataset", "setting", "query_count", "failure_count",
        "hit_rate", "recall", "precision", "tokens_per_query", "calls_per_query",
    }


def test_summary_dataclass_round_trip():
    summary = Summary(
        method="m", dataset="d", setting="s", query_count=1, failure_count=0,
        hit_rate=1.0, recall=1.0, precision=1.0, tokens_per_query=10.0, calls_per_query=1.0,
    )
    payload = summary.to_dict()
    assert payload["query_count"] == 1
    assert payload["precision_is_secondary"] is True
