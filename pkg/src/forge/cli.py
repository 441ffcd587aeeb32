"""Command-line surface: full runs, single stages, and corpus indexing.

Exit codes are a stable contract: 0 success, 1 validation problems
(including missing inputs and bad config), 2 provider failures, 3 sandbox
or terminal refinement-loop failures. Every number a command prints also
lands in a machine-readable file inside the output directory.
"""

from __future__ import annotations

import os
import sys
from pathlib import Path
from typing import Any, Callable, Dict, Optional

import click

from .consensus import ResearchPlan
from .errors import (
    DependencyError,
    LoadError,
    ProviderError,
    SandboxError,
    ValidationError,
)
from .errors import LoopError
from .pipeline import (
    RunConfig,
    build_providers,
    close_run,
    load_config,
    open_run,
    persist_artifact,
    persist_loop_trace,
    persist_predictions,
    run_pipeline,
    stage_analyze,
    stage_design,
    stage_evaluate,
    stage_execute,
)
from .execution import LoopTrace
from .matrixio import read_json, write_json
from .retrieval import load_corpus, write_embeddings
from .task_analysis import AnalysisReport, load_bundle


def _die(code: int, exc: Exception) -> None:
    click.echo(f"error: {exc}", err=True)
    sys.exit(code)


def _guarded(action: Callable[[], None]) -> None:
    try:
        action()
    except click.ClickException:
        raise
    except ValidationError as exc:
        _die(1, exc)
    except ProviderError as exc:
        _die(2, exc)
    except SandboxError as exc:
        _die(3, exc)


def _config_options(f):
    f = click.option(
        "--config",
        "config_path",
        type=click.Path(dir_okay=False),
        default=None,
        help="JSON config file merged over the shipped defaults.",
    )(f)
    f = click.option("--seed", type=int, default=None, help="Run seed override.")(f)
    f = click.option(
        "--fixture",
        type=click.Path(dir_okay=False),
        default=None,
        help="Scripted-provider fixture file (overrides the config).",
    )(f)
    return f


def _resolve_config(
    config_path: Optional[str], seed: Optional[int], fixture: Optional[str]
) -> RunConfig:
    if config_path is not None and not os.path.exists(config_path):
        raise LoadError(f"config file not found: {config_path}")
    overrides: Dict[str, Any] = {}
    if seed is not None:
        overrides["seed"] = seed
    if fixture is not None:
        overrides["provider"] = {"fixture": fixture}
    return load_config(config_path, overrides)


def _read_task(path: str) -> str:
    if not os.path.exists(path):
        raise LoadError(f"task file not found: {path}")
    text = Path(path).read_text(encoding="utf-8")
    if not text.strip():
        raise ValidationError(f"task file {path} is empty")
    return text


def _require(path: str, producer: str) -> str:
    if not os.path.exists(path):
        raise DependencyError(f"{path} not found — run `forge {producer}` first")
    return path


def _echo_metrics(metrics: Dict[str, Any]) -> None:
    for name in sorted(metrics):
        click.echo(f"  {name}={metrics[name]}")


@click.group()
@click.version_option(package_name="forge")
def main() -> None:
    """Autonomous analysis, planning, execution, and scoring of
    single-cell perturbation prediction tasks."""


@main.command("run")
@click.option("--task", "task_path", required=True, type=click.Path(dir_okay=False))
@click.option("--bundle", "bundle_path", required=True, type=click.Path(file_okay=False))
@click.option("--corpus", "corpus_path", default=None, type=click.Path(file_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@_config_options
def cmd_run(task_path, bundle_path, corpus_path, out_dir, config_path, seed, fixture):
    """Full pipeline: analyze, design, execute, evaluate."""

    def action() -> None:
        config = _resolve_config(config_path, seed, fixture)
        _read_task(task_path)
        summary = run_pipeline(task_path, bundle_path, config, out_dir, corpus_path)
        click.echo(f"run complete: {summary['out_dir']}")
        click.echo(
            f"  rounds_used={summary['rounds_used']}"
            f" refinements={summary['refinements']}"
            f" retrieval_stop={summary['retrieval_stop']}"
        )
        _echo_metrics(summary["metrics"])

    _guarded(action)


@main.command("analyze")
@click.option("--task", "task_path", required=True, type=click.Path(dir_okay=False))
@click.option("--bundle", "bundle_path", required=True, type=click.Path(file_okay=False))
@click.option("--corpus", "corpus_path", default=None, type=click.Path(file_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@_config_options
def cmd_analyze(task_path, bundle_path, corpus_path, out_dir, config_path, seed, fixture):
    """Task-analysis stage: profile, retrieve, and write report.json."""

    def action() -> None:
        config = _resolve_config(config_path, seed, fixture)
        task_text = _read_task(task_path)
        bundle = load_bundle(bundle_path)
        ctx = open_run(config, out_dir)
        try:
            corpus = (
                load_corpus(corpus_path, ctx.embedder)
                if corpus_path is not None
                else None
            )
            report, retrieval = stage_analyze(task_text, bundle, ctx, corpus)
            write_json(os.path.join(ctx.out_dir, "report.json"), report.to_json())
            write_json(
                os.path.join(ctx.out_dir, "retrieval_trace.json"),
                {
                    "trace": retrieval.trace.to_json(),
                    "documents": retrieval.document_ids,
                },
            )
        finally:
            close_run(ctx)
        click.echo(f"report written: {os.path.join(out_dir, 'report.json')}")
        click.echo(
            f"  retrieved={len(retrieval.documents)}"
            f" stop={retrieval.trace.stop_reason}"
        )

    _guarded(action)


@main.command("design")
@click.option("--report", "report_path", required=True, type=click.Path(dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@_config_options
def cmd_design(report_path, out_dir, config_path, seed, fixture):
    """Design stage: expert discussion over a saved report.json."""

    def action() -> None:
        config = _resolve_config(config_path, seed, fixture)
        _require(report_path, "analyze")
        report = AnalysisReport.from_json(read_json(report_path))
        ctx = open_run(config, out_dir)
        try:
            plan, trace = stage_design(report, ctx)
            write_json(os.path.join(ctx.out_dir, "plan.json"), plan.to_json())
            write_json(
                os.path.join(ctx.out_dir, "discussion_trace.json"), trace.to_json()
            )
        finally:
            close_run(ctx)
        click.echo(f"plan written: {os.path.join(out_dir, 'plan.json')}")
        click.echo(
            f"  rounds_used={plan.rounds_used}"
            f" converged={trace.converged}"
            f" reason={trace.reason}"
        )

    _guarded(action)


@main.command("execute")
@click.option("--plan", "plan_path", required=True, type=click.Path(dir_okay=False))
@click.option("--bundle", "bundle_path", required=True, type=click.Path(file_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@_config_options
def cmd_execute(plan_path, bundle_path, out_dir, config_path, seed, fixture):
    """Execution stage: generate code, run it, refine until it works."""

    def action() -> None:
        config = _resolve_config(config_path, seed, fixture)
        _require(plan_path, "design")
        plan = ResearchPlan.from_json(read_json(plan_path))
        bundle = load_bundle(bundle_path)
        ctx = open_run(config, out_dir)
        try:
            try:
                artifact, result, trace = stage_execute(plan, bundle, ctx)
            except LoopError as exc:
                if isinstance(exc.trace, LoopTrace):
                    persist_loop_trace(exc.trace, ctx.out_dir)
                if exc.rollback is not None:
                    persist_artifact(exc.rollback, ctx.out_dir)
                raise
            persist_artifact(artifact, ctx.out_dir)
            persist_loop_trace(trace, ctx.out_dir)
            predictions_dir = persist_predictions(result.workdir, ctx.out_dir)
        finally:
            close_run(ctx)
        click.echo(f"predictions written: {predictions_dir}")
        click.echo(f"  refinements={trace.refinements} revision={artifact.revision}")

    _guarded(action)


@main.command("evaluate")
@click.option(
    "--predictions", "predictions_path", required=True, type=click.Path()
)
@click.option("--bundle", "bundle_path", required=True, type=click.Path(file_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@_config_options
def cmd_evaluate(predictions_path, bundle_path, out_dir, config_path, seed, fixture):
    """Evaluation stage: score a prediction file against the bundle."""

    def action() -> None:
        config = _resolve_config(config_path, seed, fixture)
        _require(predictions_path, "execute")
        bundle = load_bundle(bundle_path)
        ctx = open_run(config, out_dir, require_fixture=False)
        try:
            validation = stage_evaluate(predictions_path, bundle, ctx)
            doc = validation.to_json()
            doc["passed"] = validation.passed
            write_json(os.path.join(ctx.out_dir, "metrics.json"), doc)
        finally:
            close_run(ctx)
        click.echo(f"metrics written: {os.path.join(out_dir, 'metrics.json')}")
        _echo_metrics(validation.metrics.to_json())
        click.echo(f"  passed={validation.passed}")

    _guarded(action)


@main.group("corpus")
def corpus_group() -> None:
    """Corpus maintenance commands."""


@corpus_group.command("index")
@click.argument("corpus_dir", type=click.Path(file_okay=False))
@_config_options
def cmd_corpus_index(corpus_dir, config_path, seed, fixture):
    """Embed every document and write embeddings.tsv into the corpus."""

    def action() -> None:
        config = _resolve_config(config_path, seed, fixture)
        if not os.path.isdir(corpus_dir):
            raise LoadError(f"corpus directory not found: {corpus_dir}")
        _, embedder = build_providers(config, require_fixture=False)
        try:
            corpus = load_corpus(corpus_dir, embedder)
        except OSError as exc:
            name = getattr(exc, "filename", None) or corpus_dir
            raise LoadError(f"unreadable document {name}: {exc}") from exc
        path = write_embeddings(corpus, corpus_dir)
        click.echo(f"indexed {len(corpus)} documents -> {path}")

    _guarded(action)


if __name__ == "__main__":
    main()
