"""Command line interface.

Exit status: 0 success, 1 usage error, 2 data error, 3 provider error.
Failures print one JSON object on stderr.
"""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from crossfind.config import EngineConfig, build_providers
from crossfind.core import SCHEMAS, CodeSnippet, FusionWeights, Query
from crossfind.errors import CalibrationDataError, ConfigError, CrossfindError
from crossfind.evaluation import dataset_from_records, evaluate_pipeline, ranks_csv, read_pairs_jsonl
from crossfind.fusion import STRATEGIES, calibrate, lattice_size
from crossfind.indexer import build_index, load_index, save_index
from crossfind.search import SearchRequest, score_dataset, search
from crossfind.server import canonical_json

log = logging.getLogger("crossfind")

EXIT_USAGE, EXIT_DATA, EXIT_PROVIDER = 1, 2, 3


def _echo_err(msg: str) -> None:
    click.echo(msg, err=True)


def _parse_weights(text: str | None) -> FusionWeights | None:
    if text is None:
        return None
    try:
        parts = [float(p) for p in text.split(",")]
    except ValueError:
        raise click.BadParameter("expected three comma-separated numbers", param_hint="--weights")
    if len(parts) != 3:
        raise click.BadParameter("expected three comma-separated numbers", param_hint="--weights")
    try:
        return FusionWeights(*parts, origin="manual")
    except CrossfindError as exc:
        raise click.BadParameter(str(exc), param_hint="--weights")


def _load_config(path: str, index: str | None = None, cache: str | None = None) -> EngineConfig:
    cfg = EngineConfig.load(path)
    if index:
        cfg.index_path = Path(index).resolve()
    if cache:
        cfg.cache_path = Path(cache).resolve()
    return cfg


def _index_for_records(records, cfg: EngineConfig, providers, codebase_id: str):
    snippets = [CodeSnippet(r["id"], r["code"], r["language"]) for r in records]
    return build_index(snippets, providers, providers.cache, codebase_id=codebase_id)


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def cli(verbose: bool) -> None:
    """Zero-shot code search with query/comment/generated-code score fusion."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


config_option = click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False),
                             help="Engine YAML config.")


@cli.command("index")
@config_option
@click.argument("codebase", type=click.Path(exists=True, dir_okay=False))
@click.option("--index", "index_path", help="Output index path (overrides config).")
@click.option("--cache", "cache_path", help="Cache directory (overrides config).")
@click.option("--codebase-id", default=None, help="Identifier stored in the index; defaults to the file stem.")
def index_cmd(config_path, codebase, index_path, cache_path, codebase_id):
    """Generate comments for CODEBASE (JSONL of id/code/language) and embed it."""
    cfg = _load_config(config_path, index_path, cache_path)
    if cfg.index_path is None:
        raise ConfigError("no index path: set index_path in the config or pass --index")
    providers = build_providers(cfg)
    records = read_pairs_jsonl(codebase)
    snippets = [CodeSnippet(r["id"], r["code"], r["language"]) for r in records]
    before = providers.total_calls()
    index = build_index(
        snippets, providers, providers.cache,
        codebase_id=codebase_id or Path(codebase).stem,
        progress=lambda done, total: log.info("indexed %d/%d", done, total),
    )
    save_index(index, cfg.index_path)
    calls = providers.total_calls() - before
    _echo_err(f"indexed {len(index)} snippets into {cfg.index_path}")
    _echo_err(f"{index.fallback_count} comment fallbacks")
    _echo_err(f"{calls} provider calls" + (" (cache hit)" if calls == 0 else ""))


@cli.command("search")
@config_option
@click.argument("query")
@click.option("--language", default="", help="Target programming language of the codebase.")
@click.option("--top-k", default=10, show_default=True, type=click.IntRange(min=1))
@click.option("--weights", help="alpha,beta,gamma (must sum to 1).")
@click.option("--strategy", type=click.Choice(STRATEGIES), default="linear", show_default=True)
@click.option("--schema", type=click.Choice(SCHEMAS), help="Rank by one matching schema only.")
@click.option("--index", "index_path", help="Index path (overrides config).")
@click.option("--query-id", default=None)
@click.option("--format", "fmt", type=click.Choice(["jsonl", "result", "pretty"]), default="jsonl",
              show_default=True, help="jsonl: one line per hit; result: the ranked result as one JSON object.")
@click.option("--pretty", is_flag=True, help="Shorthand for --format pretty.")
def search_cmd(config_path, query, language, top_k, weights, strategy, schema, index_path, query_id, fmt, pretty):
    """Search the index for QUERY."""
    from crossfind.server import query_id_for

    w = _parse_weights(weights)
    cfg = _load_config(config_path, index_path)
    if cfg.index_path is None:
        raise ConfigError("no index path: set index_path in the config or pass --index")
    providers = build_providers(cfg)
    index = load_index(cfg.index_path, providers)
    if schema:
        w, strategy = FusionWeights.unit(schema), "linear"
    q = Query(query_id or query_id_for(query, language), query, language)
    resp = search(SearchRequest(q, top_k, w or cfg.weights, strategy), index, providers)
    if resp.degraded:
        _echo_err("warning: code generation failed, query text used as generated code")
    if pretty or fmt == "pretty":
        click.echo(f"{'rank':>4}  {'fused':>8}  {'s_qc':>8}  {'s_qm':>8}  {'s_cg':>8}  candidate")
        for it in resp.result.items:
            sc = it.schema_scores
            click.echo(f"{it.rank:>4}  {it.fused_score:8.4f}  {sc.s_qc:8.4f}  {sc.s_qm:8.4f}  {sc.s_cg:8.4f}  {it.candidate_id}")
    elif fmt == "result":
        click.echo(canonical_json(resp.result.to_dict()).decode("utf-8"))
    else:
        for row in resp.result.to_dict()["results"]:
            click.echo(canonical_json(row).decode("utf-8"))


@cli.command("calibrate")
@config_option
@click.argument("calibration", type=click.Path(exists=True, dir_okay=False))
@click.option("--step", default=0.05, show_default=True, type=float)
@click.option("--top-k", "k", default=10, show_default=True, type=click.IntRange(min=1))
@click.option("--out", "out_path", type=click.Path(dir_okay=False), help="Write the report JSON here.")
@click.option("--csv", "csv_path", type=click.Path(dir_okay=False), help="Also export the surface as CSV.")
@click.option("--cache", "cache_path", help="Cache directory (overrides config).")
def calibrate_cmd(config_path, calibration, step, k, out_path, csv_path, cache_path):
    """Grid-search fusion weights on CALIBRATION (JSONL of id/query/code/language)."""
    try:
        points = lattice_size(step)
    except CrossfindError as exc:
        raise click.BadParameter(str(exc), param_hint="--step")
    cfg = _load_config(config_path, cache=cache_path)
    records = read_pairs_jsonl(calibration)
    if not records:
        raise CalibrationDataError(f"{calibration}: calibration set is empty")
    dataset = dataset_from_records(records, Path(calibration).stem)
    providers = build_providers(cfg)
    index = _index_for_records(records, cfg, providers, dataset.dataset_id)
    samples = score_dataset([(it.query, it.truth) for it in dataset.items], index, providers)
    _echo_err(f"evaluating {points} grid points over {len(samples)} queries")
    report = calibrate(samples, step, k=k, dataset_id=dataset.dataset_id)
    if out_path:
        Path(out_path).write_text(json.dumps(report.to_dict(), indent=1), encoding="utf-8")
    if csv_path:
        Path(csv_path).write_text(report.surface_csv(), encoding="utf-8")
    bw = report.best_weights
    click.echo(json.dumps({
        "alpha": bw.alpha, "beta": bw.beta, "gamma": bw.gamma,
        "objective": report.best_objective, "grid_points": report.grid_points,
    }))


@cli.command("evaluate")
@config_option
@click.argument("dataset_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--strategy", "strategies", multiple=True, type=click.Choice(STRATEGIES),
              help="Fusion strategies to compare (repeatable); default all.")
@click.option("--schema", type=click.Choice(SCHEMAS), help="Evaluate a single matching schema.")
@click.option("--weights", help="alpha,beta,gamma for the linear strategy.")
@click.option("--index", "index_path", help="Prebuilt index for the dataset's codebase.")
@click.option("--cache", "cache_path", help="Cache directory (overrides config).")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), help="Write the JSON report here.")
@click.option("--ranks-csv", "ranks_csv_path", type=click.Path(dir_okay=False), help="Per-query reciprocal ranks of the fused run.")
@click.option("--no-timing", is_flag=True, help="Omit wall-clock stats from the JSON report.")
def evaluate_cmd(config_path, dataset_path, strategies, schema, weights, index_path, cache_path, out_path,
                 ranks_csv_path, no_timing):
    """Evaluate MRR/top-k on DATASET_PATH and compare fusion strategies."""
    w = _parse_weights(weights)
    cfg = _load_config(config_path, index_path, cache_path)
    records = read_pairs_jsonl(dataset_path)
    dataset = dataset_from_records(records, Path(dataset_path).stem)
    providers = build_providers(cfg)
    if index_path:
        index = load_index(cfg.index_path, providers)
    else:
        index = _index_for_records(records, cfg, providers, dataset.dataset_id)
    if schema:
        w, strategies = FusionWeights.unit(schema), ("linear",)
    report = evaluate_pipeline(dataset, index, providers, weights=w or cfg.weights,
                               strategies=strategies or STRATEGIES)
    payload = report.to_dict(include_timing=not no_timing)
    if out_path:
        Path(out_path).write_text(json.dumps(payload, indent=1, sort_keys=True), encoding="utf-8")
    if ranks_csv_path:
        Path(ranks_csv_path).write_text(ranks_csv(report.fused), encoding="utf-8")
    click.echo(report.table())


@cli.command("serve")
@config_option
@click.option("--index", "index_path", help="Index path (overrides config).")
@click.option("--host", default=None)
@click.option("--port", default=None, type=int)
def serve_cmd(config_path, index_path, host, port):
    """Run the HTTP search service."""
    import uvicorn

    from crossfind.server import create_app

    cfg = _load_config(config_path, index_path)
    if cfg.index_path is None:
        raise ConfigError("no index path: set index_path in the config or pass --index")
    # provider construction resolves auth env vars, so a bad config fails before the port is bound
    providers = build_providers(cfg)
    app = create_app(providers, weights=cfg.weights, index_path=cfg.index_path, concurrency=cfg.concurrency)
    uvicorn.run(app, host=host or cfg.host, port=port or cfg.port, limit_concurrency=cfg.concurrency * 4,
                timeout_graceful_shutdown=30)


def main(argv: list[str] | None = None) -> int:
    try:
        cli.main(args=argv, prog_name="crossfind", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.UsageError as exc:
        _echo_err(json.dumps({"error": "usage", "message": exc.format_message()}))
        return EXIT_USAGE
    except click.Abort:
        return EXIT_USAGE
    except CrossfindError as exc:
        _echo_err(json.dumps({"error": type(exc).__name__, "message": str(exc)}))
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
