"""Command line entry points for building, searching, and evaluating.

Runtime settings resolve in four layers, later ones winning: built-in
defaults, a --config JSON file, TAXONAV_* environment variables, then
explicit flags. The API key is read only from TAXONAV_API_KEY; it cannot
appear in a config file and is never written to the persisted config.json.

Exit codes: 0 success, 2 usage, 3 bad data or configuration, 4 backend
transport failure, 1 anything else.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from . import baselines, builder, eval_harness, search
from . import taxonomy as taxonomy_io
from .builder import ONESHOT_VARIANTS, BuildConfig
from .errors import ConfigError, DataError, DiscoveryError, TransportError
from .gateway import (
    HttpChatBackend,
    HttpEmbeddingBackend,
    LlmGateway,
    MockChatBackend,
    MockEmbeddingBackend,
)
from .registry import (
    FieldMap,
    load_queries,
    load_registry,
    mean_ground_truth_size,
    registry_stats,
)
from .search import MODES, SearchConfig

logger = logging.getLogger(__name__)

ENV_PREFIX = "TAXONAV_"
BACKENDS = ("mock", "http")
CONFIG_FILE = "config.json"
BUILD_REPORT_FILE = "build_report.json"

# env var suffix -> (RuntimeConfig field, parser)
_ENV_KEYS = {
    "ENDPOINT": ("endpoint", str),
    "API_KEY": ("api_key", str),
    "CHAT_MODEL": ("chat_model", str),
    "EMBED_MODEL": ("embedding_model", str),
    "WORKERS": ("workers", int),
    "RETRIES": ("retries", int),
}

_FLAG_FIELDS = (
    "backend",
    "endpoint",
    "chat_model",
    "embedding_model",
    "workers",
    "retries",
    "retry_backoff",
    "cache_dir",
    "script",
)


@dataclass
class RuntimeConfig:
    """Gateway-level settings shared by every subcommand."""

    backend: str = "mock"
    endpoint: str = ""
    chat_model: str = "mock-chat"
    embedding_model: str = "mock-embed"
    workers: int = 20
    retries: int = 3
    retry_backoff: float = 1.0
    cache_dir: str | None = None
    script: str | None = None
    api_key: str | None = None

    def public_dict(self) -> dict:
        """Everything except the API key; safe to persist."""
        payload = dataclasses.asdict(self)
        del payload["api_key"]
        return payload


def resolve_runtime(args: argparse.Namespace) -> RuntimeConfig:
    values = dataclasses.asdict(RuntimeConfig())

    config_path = getattr(args, "config", None)
    if config_path:
        path = Path(config_path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc.msg}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        if "api_key" in doc:
            raise ConfigError(
                "the API key is read only from the TAXONAV_API_KEY environment "
                "variable; remove 'api_key' from the config file"
            )
        for key, value in doc.items():
            if key not in values:
                raise ConfigError(f"unknown config key {key!r} in {path}")
            values[key] = value

    for suffix, (field_name, cast) in _ENV_KEYS.items():
        raw = os.environ.get(ENV_PREFIX + suffix)
        if raw:
            try:
                values[field_name] = cast(raw)
            except ValueError:
                raise ConfigError(
                    f"environment variable {ENV_PREFIX + suffix} must be a {cast.__name__}"
                ) from None

    for field_name in _FLAG_FIELDS:
        flag_value = getattr(args, field_name, None)
        if flag_value is not None:
            values[field_name] = flag_value

    cfg = RuntimeConfig(**values)
    if cfg.backend not in BACKENDS:
        raise ConfigError(f"unknown backend {cfg.backend!r}; expected one of {BACKENDS}")
    if cfg.workers < 1:
        raise ConfigError("workers must be >= 1")
    if cfg.retries < 1:
        raise ConfigError("retries must be >= 1")
    if cfg.backend == "http" and not cfg.endpoint:
        raise ConfigError(
            "the http backend needs an endpoint (--endpoint, config file, or TAXONAV_ENDPOINT)"
        )
    return cfg


def make_gateway(cfg: RuntimeConfig) -> LlmGateway:
    if cfg.backend == "mock":
        script_doc: dict = {}
        if cfg.script:
            path = Path(cfg.script)
            try:
                script_doc = json.loads(path.read_text(encoding="utf-8"))
            except OSError as exc:
                raise ConfigError(f"cannot read mock script {path}: {exc}") from exc
            except json.JSONDecodeError as exc:
                raise ConfigError(f"mock script {path} is not valid JSON: {exc.msg}") from exc
        chat_backend = MockChatBackend.from_script(script_doc) if script_doc else MockChatBackend()
        embedding_backend = MockEmbeddingBackend(
            vectors=script_doc.get("embeddings"),
            dim=int(script_doc.get("embedding_dim", 8)),
        )
    else:
        chat_backend = HttpChatBackend(cfg.endpoint, api_key=cfg.api_key)
        embedding_backend = HttpEmbeddingBackend(cfg.endpoint, api_key=cfg.api_key)
    return LlmGateway(
        chat_backend=chat_backend,
        embedding_backend=embedding_backend,
        chat_model=cfg.chat_model,
        embedding_model=cfg.embedding_model,
        retries=cfg.retries,
        retry_backoff=cfg.retry_backoff,
        cache_dir=cfg.cache_dir,
        workers=cfg.workers,
    )


def _parse_field_map(raw: str | None) -> FieldMap | None:
    """Accepts an inline JSON object or a path to a JSON file."""
    if raw is None:
        return None
    text = raw.strip()
    if not text.startswith("{"):
        path = Path(text)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read field map file {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"field map is not valid JSON: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("field map must be a JSON object")
    known = {f.name for f in dataclasses.fields(FieldMap)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown field map keys: {', '.join(unknown)}")
    return FieldMap(**doc)


def _load_registry(args: argparse.Namespace):
    return load_registry(
        args.registry, format=args.format, field_map=_parse_field_map(args.field_map)
    )


def _write_config(out_dir: Path, cfg: RuntimeConfig, extra: dict) -> None:
    """Persists the effective run configuration before any work happens."""
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = cfg.public_dict()
    payload.update(extra)
    eval_harness.dump_json(payload, out_dir / CONFIG_FILE)


def _build_config(args: argparse.Namespace, workers: int) -> BuildConfig:
    return BuildConfig(
        keyword_threshold=args.theta_kw,
        leaf_threshold=args.theta_leaf,
        max_depth=args.max_depth,
        generic_ratio=args.generic_ratio,
        max_categories=args.max_categories,
        max_refine_iterations=args.max_refine_iterations,
        keyword_batch_size=args.keyword_batch_size,
        tiny_merge_threshold=args.tiny_merge_threshold,
        workers=workers,
    )


# -- subcommands ---------------------------------------------------------------


def cmd_build(args: argparse.Namespace) -> int:
    cfg = resolve_runtime(args)
    build_cfg = _build_config(args, cfg.workers)
    out_dir = Path(args.out)
    _write_config(out_dir, cfg, {"command": "build", "build": dataclasses.asdict(build_cfg)})

    registry = _load_registry(args)
    gateway = make_gateway(cfg)
    taxonomy, report = builder.build(registry, build_cfg, gateway)
    taxonomy_io.save(taxonomy, out_dir)
    report.save(out_dir / BUILD_REPORT_FILE)
    tax_stats = taxonomy_io.stats(taxonomy)
    print(
        f"built taxonomy over {len(registry)} services: "
        f"{tax_stats.total_categories} categories, {tax_stats.leaf_categories} leaves, "
        f"{report.total_calls()} chat calls -> {out_dir}"
    )
    return 0


def cmd_build_oneshot(args: argparse.Namespace) -> int:
    cfg = resolve_runtime(args)
    build_cfg = _build_config(args, cfg.workers)
    out_dir = Path(args.out)
    _write_config(
        out_dir,
        cfg,
        {
            "command": "build-oneshot",
            "variant": args.variant,
            "build": dataclasses.asdict(build_cfg),
        },
    )

    registry = _load_registry(args)
    gateway = make_gateway(cfg)
    taxonomy, report = builder.build_oneshot(registry, args.variant, build_cfg, gateway)
    taxonomy_io.save(taxonomy, out_dir)
    report.save(out_dir / BUILD_REPORT_FILE)
    tax_stats = taxonomy_io.stats(taxonomy)
    print(
        f"one-shot ({report.method}) taxonomy over {len(registry)} services: "
        f"{tax_stats.total_categories} categories, {len(report.classification_failures)} "
        f"classification failures, {report.total_calls()} chat calls -> {out_dir}"
    )
    return 0


def cmd_search(args: argparse.Namespace) -> int:
    cfg = resolve_runtime(args)
    registry = _load_registry(args)
    taxonomy = taxonomy_io.load(args.taxonomy)
    gateway = make_gateway(cfg)
    search_cfg = SearchConfig(
        mode=args.mode, merge_threshold=args.theta_merge, workers=cfg.workers
    )
    result = search.retrieve(args.query, taxonomy, registry, gateway, search_cfg)
    payload = result.to_dict()
    if not args.trace:
        del payload["trace"]
    print(json.dumps(payload, indent=2, ensure_ascii=False, sort_keys=True))
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = resolve_runtime(args)
    run_dir = Path(args.run_dir)
    _write_config(
        run_dir,
        cfg,
        {
            "command": "eval",
            "method": "taxonomy",
            "mode": args.mode,
            "theta_merge": args.theta_merge,
            "taxonomy": str(args.taxonomy),
            "dataset": args.dataset,
        },
    )

    registry = _load_registry(args)
    queries = load_queries(
        args.queries, registry, format=args.format, field_map=_parse_field_map(args.field_map)
    )
    taxonomy = taxonomy_io.load(args.taxonomy)
    gateway = make_gateway(cfg)
    search_cfg = SearchConfig(
        mode=args.mode, merge_threshold=args.theta_merge, workers=cfg.workers
    )
    eval_cfg = eval_harness.EvalConfig(
        method="taxonomy", dataset=args.dataset, setting=args.mode, workers=cfg.workers
    )
    summary, records = eval_harness.evaluate(
        lambda case: search.retrieve(case.text, taxonomy, registry, gateway, search_cfg),
        queries,
        eval_cfg,
    )
    eval_harness.write_run(run_dir, summary, records)
    print(
        f"taxonomy/{args.mode}: hit_rate={summary.hit_rate:.3f} recall={summary.recall:.3f} "
        f"over {summary.query_count} queries -> {run_dir}"
    )
    return 0


def cmd_baseline(args: argparse.Namespace) -> int:
    cfg = resolve_runtime(args)
    method = args.method
    k = args.k
    if method in ("embed", "rewrite") and k is None:
        if args.shape is None:
            raise ConfigError(f"method {method!r} needs --k or --shape to pick a top-K")
        k = baselines.default_k(args.shape)

    run_dir = Path(args.run_dir)
    setting = f"k={k}" if method in ("embed", "rewrite") else ""
    _write_config(
        run_dir,
        cfg,
        {"command": "baseline", "method": method, "k": k, "dataset": args.dataset},
    )

    registry = _load_registry(args)
    queries = load_queries(
        args.queries, registry, format=args.format, field_map=_parse_field_map(args.field_map)
    )
    gateway = make_gateway(cfg)

    if method == "pure-llm":
        run_one = lambda case: baselines.pure_llm_retrieve(case.text, registry, gateway)
    elif method == "embed":
        index = baselines.build_embedding_index(registry, gateway)
        run_one = lambda case: baselines.topk_retrieve(case.text, index, k, gateway)
    else:
        index = baselines.build_embedding_index(registry, gateway)
        run_one = lambda case: baselines.rewrite_retrieve(case.text, index, k, gateway)

    eval_cfg = eval_harness.EvalConfig(
        method=method, dataset=args.dataset, setting=setting, workers=cfg.workers
    )
    summary, records = eval_harness.evaluate(run_one, queries, eval_cfg)
    eval_harness.write_run(run_dir, summary, records)
    print(
        f"{method}{' ' + setting if setting else ''}: hit_rate={summary.hit_rate:.3f} "
        f"recall={summary.recall:.3f} over {summary.query_count} queries -> {run_dir}"
    )
    return 0


def cmd_stats(args: argparse.Namespace) -> int:
    if not (args.registry or args.taxonomy):
        raise ConfigError("nothing to report: provide --registry and/or --taxonomy")
    payload: dict = {}
    registry = None
    if args.registry:
        registry = _load_registry(args)
        payload["registry"] = registry_stats(registry)
    if args.queries:
        if registry is None:
            raise ConfigError("--queries needs --registry to validate ground-truth ids")
        queries = load_queries(
            args.queries, registry, format=args.format, field_map=_parse_field_map(args.field_map)
        )
        payload["queries"] = {
            "count": len(queries),
            "mean_ground_truth_size": mean_ground_truth_size(queries),
        }
    if args.taxonomy:
        payload["taxonomy"] = taxonomy_io.stats(taxonomy_io.load(args.taxonomy)).to_dict()
    print(json.dumps(payload, indent=2, ensure_ascii=False, sort_keys=True))
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    table = eval_harness.compare(args.run_dirs)
    print(table.render_text())
    if args.csv:
        table.to_csv(args.csv)
        print(f"wrote {args.csv}")
    return 0


# -- parser ----------------------------------------------------------------


def _backend_parent() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("backend")
    g.add_argument("--config", help="JSON file with runtime defaults (never the API key)")
    g.add_argument("--backend", choices=BACKENDS, default=None)
    g.add_argument("--endpoint", default=None, help="OpenAI-compatible base URL")
    g.add_argument("--chat-model", dest="chat_model", default=None)
    g.add_argument("--embed-model", dest="embedding_model", default=None)
    g.add_argument("--workers", type=int, default=None, help="parallel request cap")
    g.add_argument("--retries", type=int, default=None)
    g.add_argument("--retry-backoff", dest="retry_backoff", type=float, default=None)
    g.add_argument("--cache-dir", dest="cache_dir", default=None, help="embedding cache directory")
    g.add_argument("--script", default=None, help="scripted replies for the mock backend (JSON)")
    g.add_argument("-v", "--verbose", action="store_true")
    return p


def _dataset_parent(require_registry: bool = True) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("dataset")
    g.add_argument("--registry", required=require_registry, help="service registry file")
    g.add_argument("--format", choices=("jsonl", "json"), default="jsonl")
    g.add_argument(
        "--field-map",
        dest="field_map",
        default=None,
        help="JSON object (or file) mapping canonical field names to dataset keys",
    )
    return p


def _build_parent() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("build thresholds")
    g.add_argument("--theta-kw", dest="theta_kw", type=int, default=500,
                   help="switch to keyword compression above this node size")
    g.add_argument("--theta-leaf", dest="theta_leaf", type=int, default=40,
                   help="stop splitting nodes at or below this size")
    g.add_argument("--max-depth", dest="max_depth", type=int, default=3)
    g.add_argument("--generic-ratio", dest="generic_ratio", type=float, default=1 / 3)
    g.add_argument("--max-categories", dest="max_categories", type=int, default=20)
    g.add_argument("--max-refine-iterations", dest="max_refine_iterations", type=int, default=3)
    g.add_argument("--keyword-batch-size", dest="keyword_batch_size", type=int, default=50)
    g.add_argument("--tiny-merge-threshold", dest="tiny_merge_threshold", type=int, default=2)
    return p


def _search_parent() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("search")
    g.add_argument("--mode", choices=MODES, default="get_all")
    g.add_argument("--theta-merge", dest="theta_merge", type=int, default=30,
                   help="merge result groups smaller than this")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="taxonav",
        description="LLM-navigated service taxonomy: build, search, evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    backend = _backend_parent()
    dataset = _dataset_parent()
    build_flags = _build_parent()
    search_flags = _search_parent()

    p = sub.add_parser("build", parents=[backend, dataset, build_flags],
                       help="construct a taxonomy by recursive splitting")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("build-oneshot", parents=[backend, dataset, build_flags],
                       help="construct a taxonomy with one whole-tree design call")
    p.add_argument("--out", required=True)
    p.add_argument("--variant", default="base",
                   help="base, +freq, +refine, or +axis (plus sign optional)")
    p.set_defaults(func=cmd_build_oneshot)

    p = sub.add_parser("search", parents=[backend, dataset, search_flags],
                       help="answer one query against a built taxonomy")
    p.add_argument("--taxonomy", required=True, help="directory holding taxonomy.json/class.json")
    p.add_argument("--query", required=True)
    p.add_argument("--trace", action="store_true", help="include per-step trace in the output")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("eval", parents=[backend, dataset, search_flags],
                       help="run a query set through taxonomy search and score it")
    p.add_argument("--taxonomy", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--run-dir", dest="run_dir", required=True)
    p.add_argument("--dataset", default="unknown", help="dataset name for reports")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("baseline", parents=[backend, dataset],
                       help="run a non-taxonomy retrieval baseline")
    p.add_argument("--method", required=True, choices=("pure-llm", "embed", "rewrite"))
    p.add_argument("--queries", required=True)
    p.add_argument("--run-dir", dest="run_dir", required=True)
    p.add_argument("--k", type=int, default=None, help="top-K for embedding methods")
    p.add_argument("--shape", choices=sorted(baselines.DEFAULT_K_BY_SHAPE), default=None,
                   help="dataset shape that picks the default top-K")
    p.add_argument("--dataset", default="unknown")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("stats", parents=[_dataset_parent(require_registry=False)],
                       help="print dataset and taxonomy statistics as JSON")
    p.add_argument("--taxonomy", default=None)
    p.add_argument("--queries", default=None)
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("compare", help="tabulate summaries from evaluation run directories")
    p.add_argument("run_dirs", nargs="+", metavar="RUN_DIR")
    p.add_argument("--csv", default=None, help="also write the table as CSV")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_compare)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except TransportError as exc:
        return _fail("backend", exc, 4)
    except (DataError, ConfigError) as exc:
        return _fail("data", exc, 3)
    except DiscoveryError as exc:
        return _fail("internal", exc, 1)


def _fail(category: str, exc: Exception, code: int) -> int:
    print(f"error category={category}: {exc}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
