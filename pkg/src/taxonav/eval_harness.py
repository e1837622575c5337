"""Metrics and run artifacts for retrieval evaluation.

Hit rate asks whether any ground-truth service came back; recall and
precision are macro-averaged over queries. Precision is labeled secondary
everywhere it is reported, because ground-truth coverage in tool-retrieval
benchmarks is incomplete: a "wrong" service can be a perfectly good answer
that the annotators never listed.

A run directory holds summary.json, per_query.jsonl, and the config.json
the CLI persisted before doing any work; the summary must always be
recomputable from the per-query lines bit for bit.
"""

from __future__ import annotations

import csv
import json
import logging
from collections.abc import Callable, Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from statistics import fmean

from .errors import ConfigError, DiscoveryError, SchemaError
from .registry import QueryCase
from .search import RetrievalResult

logger = logging.getLogger(__name__)

SUMMARY_FILE = "summary.json"
PER_QUERY_FILE = "per_query.jsonl"

SUMMARY_FIELDS = (
    "method",
    "dataset",
    "setting",
    "query_count",
    "failure_count",
    "hit_rate",
    "recall",
    "precision",
    "tokens_per_query",
    "calls_per_query",
)


def score_query(returned: Sequence[str], truth: Iterable[str]) -> tuple[int, float, float]:
    """(hit, recall, precision) for one query.

    Precision over an empty return is 0 by convention; an empty truth set
    is a configuration error, not a scorable case.
    """
    truth_set = set(truth)
    if not truth_set:
        raise ConfigError("cannot score a query with an empty ground-truth set")
    returned_set = set(returned)
    overlap = len(returned_set & truth_set)
    hit = 1 if overlap else 0
    recall = overlap / len(truth_set)
    precision = overlap / len(returned_set) if returned_set else 0.0
    return hit, recall, precision


@dataclass
class EvalConfig:
    method: str
    dataset: str = "unknown"
    setting: str = ""  # mode name or K value, whatever distinguishes the run
    workers: int = 8

    def __post_init__(self) -> None:
        if not self.method:
            raise ConfigError("eval config needs a method name")
        if self.workers < 1:
            raise ConfigError("workers must be positive")


@dataclass
class PerQueryRecord:
    query_id: str
    returned: list[str]
    truth: list[str]
    hit: int
    recall: float
    precision: float
    calls: int
    prompt_tokens: int
    output_tokens: int
    error: str | None = None
    flags: list[str] = field(default_factory=list)
    trace: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "returned": self.returned,
            "truth": self.truth,
            "hit": self.hit,
            "recall": self.recall,
            "precision": self.precision,
            "calls": self.calls,
            "prompt_tokens": self.prompt_tokens,
            "output_tokens": self.output_tokens,
            "error": self.error,
            "flags": self.flags,
            "trace": self.trace,
        }

    @classmethod
    def from_dict(cls, record: dict) -> "PerQueryRecord":
        try:
            return cls(
                query_id=record["query_id"],
                returned=list(record["returned"]),
                truth=list(record["truth"]),
                hit=int(record["hit"]),
                recall=float(record["recall"]),
                precision=float(record["precision"]),
                calls=int(record["calls"]),
                prompt_tokens=int(record["prompt_tokens"]),
                output_tokens=int(record["output_tokens"]),
                error=record.get("error"),
                flags=list(record.get("flags", [])),
                trace=list(record.get("trace", [])),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"malformed per-query record: {exc}") from exc


@dataclass
class Summary:
    method: str
    dataset: str
    setting: str
    query_count: int
    failure_count: int
    hit_rate: float
    recall: float
    precision: float
    tokens_per_query: float
    calls_per_query: float

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "dataset": self.dataset,
            "setting": self.setting,
            "query_count": self.query_count,
            "failure_count": self.failure_count,
            "hit_rate": self.hit_rate,
            "recall": self.recall,
            "precision": self.precision,
            "precision_is_secondary": True,
            "tokens_per_query": self.tokens_per_query,
            "calls_per_query": self.calls_per_query,
        }


def summarize(records: Sequence[PerQueryRecord], cfg: EvalConfig) -> Summary:
    """Macro averages over per-query records, in record order."""
    if not records:
        raise ConfigError("cannot summarize an empty record list")
    return Summary(
        method=cfg.method,
        dataset=cfg.dataset,
        setting=cfg.setting,
        query_count=len(records),
        failure_count=sum(1 for r in records if r.error),
        hit_rate=fmean(r.hit for r in records),
        recall=fmean(r.recall for r in records),
        precision=fmean(r.precision for r in records),
        tokens_per_query=fmean(r.prompt_tokens + r.output_tokens for r in records),
        calls_per_query=fmean(r.calls for r in records),
    )


def evaluate(
    retrieve_fn: Callable[[QueryCase], RetrievalResult],
    queries: Sequence[QueryCase],
    cfg: EvalConfig,
) -> tuple[Summary, list[PerQueryRecord]]:
    """Runs the retriever over every query in parallel, in stable order.

    A query whose retrieval raises a package error is recorded as a failure
    with an empty return instead of aborting the run.
    """
    if not queries:
        raise ConfigError("cannot evaluate over an empty query list")

    def run_one(query: QueryCase) -> PerQueryRecord:
        error = None
        try:
            result = retrieve_fn(query)
        except DiscoveryError as exc:
            logger.error("retrieval failed for query %s: %s", query.id, exc)
            result = RetrievalResult(service_ids=[])
            error = str(exc)
        hit, recall, precision = score_query(result.service_ids, query.ground_truth)
        return PerQueryRecord(
            query_id=query.id,
            returned=list(result.service_ids),
            truth=sorted(query.ground_truth),
            hit=hit,
            recall=recall,
            precision=precision,
            calls=result.calls,
            prompt_tokens=result.prompt_tokens,
            output_tokens=result.output_tokens,
            error=error,
            flags=list(result.flags),
            trace=[step.to_dict() for step in result.trace],
        )

    if cfg.workers <= 1 or len(queries) <= 1:
        records = [run_one(q) for q in queries]
    else:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            records = list(pool.map(run_one, queries))
    return summarize(records, cfg), records


# -- run artifacts ------------------------------------------------------------


def dump_json(payload: dict, path: Path) -> None:
    path.write_text(
        json.dumps(payload, indent=2, ensure_ascii=False, sort_keys=True) + "\n",
        encoding="utf-8",
    )


def write_run(run_dir: str | Path, summary: Summary, records: Sequence[PerQueryRecord]) -> None:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    dump_json(summary.to_dict(), run_dir / SUMMARY_FILE)
    with (run_dir / PER_QUERY_FILE).open("w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")


def load_summary(run_dir: str | Path) -> dict:
    path = Path(run_dir) / SUMMARY_FILE
    if not path.exists():
        raise SchemaError(f"run {run_dir} has no {SUMMARY_FILE}")
    try:
        summary = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc.msg})") from exc
    for key in SUMMARY_FIELDS:
        if key not in summary:
            raise SchemaError(f"run {run_dir}: summary missing field {key!r}")
    return summary


def load_records(run_dir: str | Path) -> list[PerQueryRecord]:
    path = Path(run_dir) / PER_QUERY_FILE
    if not path.exists():
        raise SchemaError(f"run {run_dir} has no {PER_QUERY_FILE}")
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            records.append(PerQueryRecord.from_dict(json.loads(line)))
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: line {lineno}: invalid JSON ({exc.msg})") from exc
    return records


def recompute_summary(run_dir: str | Path) -> Summary:
    """Rebuilds the summary from per_query.jsonl; must match summary.json
    exactly (same arithmetic, same order)."""
    existing = load_summary(run_dir)
    records = load_records(run_dir)
    cfg = EvalConfig(
        method=existing["method"], dataset=existing["dataset"], setting=existing["setting"]
    )
    return summarize(records, cfg)


@dataclass
class ComparisonTable:
    rows: list[dict]

    def render_text(self) -> str:
        headers = [
            "method", "dataset", "setting", "queries", "hit_rate",
            "recall", "prec(2nd)", "tok/q", "calls/q",
        ]
        body = [
            [
                str(row["method"]),
                str(row["dataset"]),
                str(row["setting"]),
                str(row["query_count"]),
                f"{row['hit_rate']:.4f}",
                f"{row['recall']:.4f}",
                f"{row['precision']:.4f}",
                f"{row['tokens_per_query']:.1f}",
                f"{row['calls_per_query']:.2f}",
            ]
            for row in self.rows
        ]
        widths = [max(len(h), *(len(r[i]) for r in body)) if body else len(h) for i, h in enumerate(headers)]
        lines = [
            "  ".join(h.ljust(widths[i]) for i, h in enumerate(headers)),
            "  ".join("-" * widths[i] for i in range(len(headers))),
        ]
        lines.extend("  ".join(r[i].ljust(widths[i]) for i in range(len(headers))) for r in body)
        lines.append("precision is a secondary metric: benchmark ground truth is incomplete")
        return "\n".join(lines)

    def to_csv(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(SUMMARY_FIELDS))
            writer.writeheader()
            for row in self.rows:
                writer.writerow({key: row[key] for key in SUMMARY_FIELDS})


def compare(run_dirs: Sequence[str | Path]) -> ComparisonTable:
    """Aligns several runs into one table, best hit rate first."""
    if not run_dirs:
        raise ConfigError("compare needs at least one run directory")
    rows = [load_summary(run_dir) for run_dir in run_dirs]
    rows.sort(key=lambda row: (-row["hit_rate"], row["method"], row["setting"]))
    return ComparisonTable(rows=rows)
