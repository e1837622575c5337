"""Service registries and benchmark query sets.

Datasets arrive as JSONL (one object per line) or as a single JSON array.
Field names vary between datasets, so loaders take a FieldMap that renames
whatever the files use onto the canonical fields. Ids are opaque strings and
must be unique within a registry.
"""

from __future__ import annotations

import json
import logging
import statistics
from collections.abc import Iterable, Iterator
from dataclasses import dataclass
from pathlib import Path

from .errors import DataError

logger = logging.getLogger(__name__)

FORMATS = ("jsonl", "json")


@dataclass(frozen=True)
class Service:
    id: str
    name: str
    description: str
    source: str | None = None


@dataclass(frozen=True)
class QueryCase:
    id: str
    text: str
    ground_truth: frozenset[str]


@dataclass(frozen=True)
class FieldMap:
    """Maps canonical field names onto the keys a dataset file actually uses."""

    id: str = "id"
    name: str = "name"
    description: str = "description"
    source: str = "source"
    query_id: str = "id"
    query_text: str = "text"
    ground_truth: str = "ground_truth"


class Registry:
    """Ordered, id-indexed collection of services. Immutable after creation."""

    def __init__(self, services: Iterable[Service]):
        self._services: list[Service] = list(services)
        self._positions: dict[str, int] = {}
        for pos, svc in enumerate(self._services):
            if svc.id in self._positions:
                raise DataError(f"duplicate service id {svc.id!r}")
            self._positions[svc.id] = pos

    def __len__(self) -> int:
        return len(self._services)

    def __iter__(self) -> Iterator[Service]:
        return iter(self._services)

    def __contains__(self, service_id: str) -> bool:
        return service_id in self._positions

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Registry):
            return NotImplemented
        return self._services == other._services

    def get(self, service_id: str) -> Service:
        try:
            return self._services[self._positions[service_id]]
        except KeyError:
            raise DataError(f"unknown service id {service_id!r}") from None

    def position(self, service_id: str) -> int:
        """Position in registry order; ties elsewhere break on this."""
        try:
            return self._positions[service_id]
        except KeyError:
            raise DataError(f"unknown service id {service_id!r}") from None

    @property
    def ids(self) -> list[str]:
        return [svc.id for svc in self._services]


def _iter_records(path: Path, format: str) -> Iterator[tuple[str, dict]]:
    """Yields (locator, record) pairs; locator names the line or index."""
    if format not in FORMATS:
        raise DataError(f"unknown dataset format {format!r}; expected one of {FORMATS}")
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    text = path.read_text(encoding="utf-8")
    if format == "jsonl":
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}: line {lineno}: invalid JSON ({exc.msg})") from exc
            yield f"line {lineno}", record
    else:
        try:
            records = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON ({exc.msg})") from exc
        if not isinstance(records, list):
            raise DataError(f"{path}: expected a JSON array of records")
        for idx, record in enumerate(records):
            yield f"record {idx}", record


def _required(record: dict, key: str, locator: str, path: Path) -> str:
    value = record.get(key)
    if not isinstance(value, str) or not value.strip():
        raise DataError(f"{path}: {locator}: missing or empty field {key!r}")
    return value


def load_registry(
    path: str | Path,
    format: str = "jsonl",
    field_map: FieldMap | None = None,
) -> Registry:
    path = Path(path)
    fm = field_map or FieldMap()
    services = []
    for locator, record in _iter_records(path, format):
        if not isinstance(record, dict):
            raise DataError(f"{path}: {locator}: expected a JSON object")
        source = record.get(fm.source)
        services.append(
            Service(
                id=_required(record, fm.id, locator, path),
                name=_required(record, fm.name, locator, path),
                description=_required(record, fm.description, locator, path),
                source=source if isinstance(source, str) and source else None,
            )
        )
    registry = Registry(services)
    logger.info("loaded %d services from %s", len(registry), path)
    return registry


def save_registry(registry: Registry, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for svc in registry:
            record = {"id": svc.id, "name": svc.name, "description": svc.description}
            if svc.source is not None:
                record["source"] = svc.source
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")


def load_queries(
    path: str | Path,
    registry: Registry,
    format: str = "jsonl",
    field_map: FieldMap | None = None,
) -> list[QueryCase]:
    """Loads query cases and checks every ground-truth id against the registry."""
    path = Path(path)
    fm = field_map or FieldMap()
    queries = []
    for locator, record in _iter_records(path, format):
        if not isinstance(record, dict):
            raise DataError(f"{path}: {locator}: expected a JSON object")
        qid = _required(record, fm.query_id, locator, path)
        text = _required(record, fm.query_text, locator, path)
        truth = record.get(fm.ground_truth)
        if not isinstance(truth, list) or not truth:
            raise DataError(f"{path}: {locator}: query {qid!r} has no ground-truth ids")
        for sid in truth:
            if sid not in registry:
                raise DataError(
                    f"{path}: {locator}: query {qid!r} references unknown service {sid!r}"
                )
        queries.append(QueryCase(id=qid, text=text, ground_truth=frozenset(truth)))
    logger.info("loaded %d queries from %s", len(queries), path)
    return queries


def save_queries(queries: Iterable[QueryCase], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for q in queries:
            record = {"id": q.id, "text": q.text, "ground_truth": sorted(q.ground_truth)}
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")


def registry_stats(registry: Registry) -> dict:
    """Service count plus description-length distribution."""
    stats: dict = {"count": len(registry)}
    if len(registry):
        lengths = [len(svc.description) for svc in registry]
        stats["description_length"] = {
            "min": min(lengths),
            "median": statistics.median(lengths),
            "mean": statistics.fmean(lengths),
            "max": max(lengths),
        }
    return stats


def mean_ground_truth_size(queries: list[QueryCase]) -> float:
    if not queries:
        return 0.0
    return statistics.fmean(len(q.ground_truth) for q in queries)
