"""Batch CLI: headless pipeline, scoring, benchmarks, KB and plan tools.

Every subcommand writes exactly one JSON document to stdout; logs and
errors go to stderr.  Report-producing subcommands optionally render a
matplotlib figure next to their JSON output via --figure.
"""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from . import engine, kb as kbmod, metrics, retrieval, viz
from .extract import (
    ExtractionConfig,
    extract_characters,
    extract_relations,
    ingest_candidates,
)
from .graph import Document, Entity, Graph, Status
from .providers import provider_from_config
from .retrieval import embedder_from_config

log = logging.getLogger(__name__)


class CliError(click.ClickException):
    """One-line machine-parseable failure: 'error: <code>: <message>'."""

    exit_code = 2

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code

    def show(self, file=None):
        print(f"error: {self.code}: {self.message}", file=file or sys.stderr)


def _fail(code: str, message: str) -> CliError:
    return CliError(code, message)


def emit(data: dict) -> None:
    click.echo(json.dumps(data, indent=2, sort_keys=True))


def load_graph_file(path: str) -> tuple[Graph, dict]:
    try:
        data = json.loads(Path(path).read_text("utf-8"))
        return Graph.from_json(data), data
    except FileNotFoundError:
        raise _fail("missing_file", f"no such file: {path}")
    except (ValueError, KeyError) as e:
        raise _fail("bad_graph", f"{path}: {e}")


def load_kb_file(path: str | None) -> kbmod.RuleKB:
    if path is None:
        return kbmod.builtin_kb()
    try:
        return kbmod.load_kb(Path(path).read_text("utf-8"))
    except FileNotFoundError:
        raise _fail("missing_file", f"no such file: {path}")
    except kbmod.KBParseError as e:
        raise _fail("kb_parse", str(e))


def load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text("utf-8"))
    except FileNotFoundError:
        raise _fail("missing_file", f"no such file: {path}")
    except ValueError as e:
        raise _fail("bad_config", f"{path}: {e}")


def graph_keys(g: Graph) -> set:
    return {k for k, t in g.triples.items() if t.status is not Status.REJECTED}


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="debug logging to stderr")
def main(verbose: bool):
    """Character relationship graphs: extract, reason, score, serve."""
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )


@main.command()
@click.argument("doc", type=click.Path(exists=True))
@click.option("--kb", "kb_path", type=click.Path(exists=True), help="KB file (builtin if omitted)")
@click.option("--out", type=click.Path(), help="write the graph JSON here")
@click.option("--auto-resolve", is_flag=True, help="resolve conflicts via the provider and apply")
@click.option("--config", "config_path", type=click.Path(exists=True), help="provider/extraction config JSON")
@click.option("--figure", type=click.Path(), help="render the final graph to this image file")
def pipeline(doc, kb_path, out, auto_resolve, config_path, figure):
    """Run extract -> ingest -> complete -> conflict-check headless."""
    config = load_config_file(config_path)
    if "provider" not in config:
        raise _fail("no_provider", "config must name a provider (see README)")
    provider = provider_from_config(config["provider"])
    embedder = embedder_from_config(config.get("embedder"))
    cfg = ExtractionConfig.from_json(config.get("extraction"))
    kb = load_kb_file(kb_path)

    text = Path(doc).read_text("utf-8")
    document = Document(id=Path(doc).stem, text=text)
    g = Graph(doc_id=document.id, kb_version=kb.version)

    chars = extract_characters(document, cfg, provider)
    g = ingest_candidates(g, chars=chars)
    # batch mode has no annotator: all retained characters count as verified
    for eid in sorted(g.entities):
        ent = g.entities[eid]
        g = g.update_entity(Entity(
            id=ent.id, canonical=ent.canonical, aliases=ent.aliases,
            mentions=ent.mentions, status=Status.CONFIRMED,
        ))
    rels, rejects = extract_relations(
        document, list(g.entities.values()), kb, cfg, provider
    )
    g = ingest_candidates(g, rels=rels)
    g, derivations = engine.close(g, kb)
    conflicts = engine.detect_conflicts(g, kb)

    resolved = []
    if auto_resolve and conflicts:
        index = retrieval.build_index(
            document,
            int(config.get("chunk_chars", 800)),
            int(config.get("overlap_chars", 200)),
            embedder,
        )
        for conflict in conflicts:
            chunks = retrieval.retrieve_evidence(
                index, conflict, int(config.get("evidence_k", 4)), embedder, g, kb
            )
            prompt = retrieval.build_resolution_prompt(conflict, chunks, g, kb)
            resolution = retrieval.resolve_conflict(conflict, prompt, provider)
            if resolution.parsed:
                for key in resolution.dropped:
                    g = g.set_status(key, Status.REJECTED)
                resolved.append(resolution.to_json())
        g, more = engine.close(g, kb)
        derivations = derivations + more
        conflicts = engine.detect_conflicts(g, kb)

    export = engine.export_annotated(g, derivations, conflicts)
    if out:
        Path(out).write_text(json.dumps(export, indent=2) + "\n", "utf-8")
    if figure:
        viz.render_graph_figure(export, figure)
    emit(
        {
            "doc": document.id,
            "out": out,
            "entities": len(g.entities),
            "triples": len(g.triples),
            "rejected_candidates": len(rejects),
            "open_conflicts": len(conflicts),
            "resolved": resolved,
            "figure": figure,
        }
        if out
        else export
    )


@main.command("eval")
@click.option("--pred", required=True, type=click.Path(exists=True))
@click.option("--gold", required=True, type=click.Path(exists=True))
@click.option("--soft-hierarchy", is_flag=True, help="predicted subtypes match gold supertypes")
@click.option("--kb", "kb_path", type=click.Path(exists=True), help="KB for hierarchy-aware matching")
@click.option("--figure", type=click.Path(), help="render P/R/F1 bars to this image file")
def eval_cmd(pred, gold, soft_hierarchy, kb_path, figure):
    """Score a predicted graph against a gold graph (exact directed match)."""
    pred_graph, _ = load_graph_file(pred)
    gold_graph, _ = load_graph_file(gold)
    kb = load_kb_file(kb_path) if (kb_path or soft_hierarchy) else None
    report = metrics.score_triples(
        graph_keys(pred_graph),
        graph_keys(gold_graph),
        kb=kb,
        soft_hierarchy=soft_hierarchy,
    ).to_json()
    if figure:
        viz.render_eval_figure(report, figure)
        report["figure"] = figure
    emit(report)


@main.command("logic-bench")
@click.argument("items", type=click.Path(exists=True))
@click.option("--provider", "provider_path", required=True, type=click.Path(exists=True))
def logic_bench(items, provider_path):
    """Run the add/remove logic benchmark against a provider."""
    config = load_config_file(provider_path)
    provider = provider_from_config(config.get("provider", config))
    try:
        bench_items = metrics.load_bench_items(items)
    except (ValueError, KeyError) as e:
        raise _fail("bad_items", f"{items}: {e}")
    emit(metrics.run_logic_benchmark(bench_items, provider))


@main.command()
@click.argument("graph", type=click.Path(exists=True))
@click.option("--samples", default=20, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--figure", type=click.Path(), help="render the reference comparison to this image file")
def swi(graph, samples, seed, figure):
    """Small-world statistics of a graph JSON file."""
    g, _ = load_graph_file(graph)
    try:
        report = metrics.small_world_index(g, samples=samples, seed=seed).to_json()
    except ValueError as e:
        raise _fail("bad_params", str(e))
    if figure:
        viz.render_swi_figure(report, figure)
        report["figure"] = figure
    emit(report)


@main.group()
def kb():
    """Knowledge-base tools."""


@kb.command("validate")
@click.argument("kb_file", type=click.Path(exists=True))
def kb_validate(kb_file):
    """Report diagnostics; exit 1 on hard errors."""
    try:
        parsed = kbmod.load_kb(Path(kb_file).read_text("utf-8"))
    except kbmod.KBParseError as e:
        emit({"errors": [{"message": str(e)}], "warnings": [], "ok": False})
        sys.exit(1)
    diags = kbmod.validate_kb(parsed)
    errors = [d for d in diags if d.severity == "error"]
    warnings = [d for d in diags if d.severity == "warning"]
    emit(
        {
            "relations": len(parsed.relations),
            "rules": len(parsed.rules),
            "errors": [{"message": d.message, "rules": [str(r) for r in d.rules]} for d in errors],
            "warnings": [{"message": d.message, "rules": [str(r) for r in d.rules]} for d in warnings],
            "ok": not errors,
        }
    )
    if errors:
        sys.exit(1)


@main.command()
@click.option("--from", "from_path", required=True, type=click.Path(exists=True))
@click.option("--to", "to_path", required=True, type=click.Path(exists=True))
@click.option("--kb", "kb_path", type=click.Path(exists=True))
def plan(from_path, to_path, kb_path):
    """Plan the op sequence turning one graph's triples into another's."""
    g_o, _ = load_graph_file(from_path)
    g_g, _ = load_graph_file(to_path)
    kb_obj = load_kb_file(kb_path)
    try:
        result = engine.plan_completion(g_o, g_g, kb_obj)
    except engine.EngineError as e:
        raise _fail("plan_failed", str(e))
    emit(result.to_json())


@main.command()
@click.option("--host", default=None)
@click.option("--port", default=None, type=int)
@click.option("--data-dir", default=None, type=click.Path())
@click.option("--config", "config_path", default=None, type=click.Path(exists=True))
@click.option("--kb", "kb_path", default=None, type=click.Path(exists=True))
@click.option("--ui-dir", default=None, type=click.Path())
def serve(host, port, data_dir, config_path, kb_path, ui_dir):
    """Run the annotation HTTP service."""
    import uvicorn

    from .service import ServiceConfig, create_app

    config = ServiceConfig.load(config_path)
    if data_dir:
        config.data_dir = Path(data_dir)
    if host:
        config.host = host
    if port:
        config.port = port
    if kb_path:
        config.kb_text = Path(kb_path).read_text("utf-8")
    if ui_dir:
        config.ui_dir = Path(ui_dir)
    app = create_app(config=config)
    uvicorn.run(app, host=config.host, port=config.port, log_level="warning")


if __name__ == "__main__":
    main()
