"""Operator entry point.

Subcommands: run, ask, ablate, convert, synth, cache {stats,gc}, report.
"""

from __future__ import annotations

import json
import sys
from dataclasses import replace
from pathlib import Path

import click

from .backend import BackendError
from .config import (
    CACHE_ROOT_ENV,
    ConfigError,
    RunConfig,
    build_backend,
    load_components,
    load_run_config,
)
from .dataset import (
    CONVERT_FORMATS,
    DatasetManifest,
    FormatMismatch,
    MissingImages,
    Sample,
    SchemaError,
    convert,
    load_manifest,
    write_manifest_rows,
)
from .geometry import CropMode, ImageLoadError
from .metrics import EvalResult, GroupKey, contains_correct, report_from_counts
from .pipeline import (
    SampleOutcome,
    Strategy,
    StrategyKind,
    read_outcomes_jsonl,
    run_sample,
    run_samples,
    write_outcomes_jsonl,
)
from .prompting import PromptError
from .store import ResponseCache
from .synthetic import OracleParams, generate_suite, write_suite

_STRATEGY_CHOICES = [k.value for k in StrategyKind]
_CROP_MODE_CHOICES = [m.value for m in CropMode]

REASONING_VARIANTS = (
    ("baseline", Strategy(StrategyKind.DIRECT)),
    ("ground", Strategy(StrategyKind.ZOOMCOT, use_crop=False, use_caption=False)),
    ("ground_crop", Strategy(StrategyKind.ZOOMCOT, use_crop=True, use_caption=False)),
    ("ground_crop_caption", Strategy(StrategyKind.ZOOMCOT, use_crop=True, use_caption=True)),
)
CROPPING_VARIANTS = (
    ("crop_strict_rect", Strategy(StrategyKind.ZOOMCOT, crop_mode=CropMode.STRICT_RECT)),
    ("crop_square", Strategy(StrategyKind.ZOOMCOT, crop_mode=CropMode.SQUARE)),
    ("crop_square_scaled", Strategy(StrategyKind.ZOOMCOT, crop_mode=CropMode.SQUARE_SCALED)),
    ("crop_full_image", Strategy(StrategyKind.ZOOMCOT, crop_mode=CropMode.FULL_IMAGE)),
)


@click.group()
@click.version_option(package_name="zoomcot")
def main() -> None:
    """Staged zoom chain-of-thought VQA over vision-language backends."""


def _fail(exc: Exception) -> "click.ClickException":
    return click.ClickException(f"{type(exc).__name__}: {exc}")


def _evaluate(
    outcomes: list[SampleOutcome], manifest: DatasetManifest
) -> list[EvalResult]:
    by_id = {s.id: s for s in manifest.samples}
    results = []
    for outcome in outcomes:
        sample = by_id[outcome.sample_id]
        if outcome.trace is None:
            results.append(EvalResult(outcome.sample_id, False, None, ""))
        else:
            results.append(
                contains_correct(outcome.trace.final_answer, sample.answers, outcome.sample_id)
            )
    return results


def _write_results(
    path: Path, results: list[EvalResult], strategy: str, dataset: str
) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in sorted(results, key=lambda r: r.sample_id):
            fh.write(
                json.dumps(
                    {
                        "sample_id": r.sample_id,
                        "strategy": strategy,
                        "dataset": dataset,
                        "correct": r.correct,
                        "matched_answer": r.matched_answer,
                        "final_answer": r.final_answer,
                    },
                    ensure_ascii=False,
                    sort_keys=True,
                )
                + "\n"
            )


def execute_run(cfg: RunConfig, strategy_name: str | None = None) -> tuple[dict, list[EvalResult]]:
    """Run one strategy over one manifest; write all artifacts.

    Returns the run metadata and per-sample eval results.
    """
    manifest = load_manifest(cfg.dataset, name=cfg.dataset_name)
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    cache = ResponseCache(cfg.cache_root) if cfg.cache_root else None
    backend = build_backend(cfg.backend, cache)
    strategy_name = strategy_name or cfg.strategy.kind.value

    traces_path = out / "traces.jsonl"
    meta_path = out / "run_meta.json"
    existing: list[SampleOutcome] = []
    skip: set[str] = set()
    if cfg.resume:
        if not traces_path.exists() or not meta_path.exists():
            raise ConfigError(
                f"resume requested but no previous run artifacts in {out}"
            )
        previous = json.loads(meta_path.read_text(encoding="utf-8"))
        if previous.get("config_hash") != cfg.config_hash():
            raise ConfigError(
                "resume refused: output dir holds a run with a different "
                f"config (hash {previous.get('config_hash')!r})"
            )
        valid_ids = {s.id for s in manifest.samples}
        existing = [
            o for o in read_outcomes_jsonl(traces_path) if o.sample_id in valid_ids
        ]
        skip = {o.sample_id for o in existing}

    new = run_samples(
        manifest.samples,
        backend,
        cfg.strategy,
        cfg.prompts,
        cfg.crop,
        seed=cfg.seed,
        max_output_tokens=cfg.max_output_tokens,
        concurrency=cfg.concurrency,
        skip_ids=skip,
    )
    outcomes = sorted(existing + new, key=lambda o: o.sample_id)
    write_outcomes_jsonl(outcomes, traces_path)

    results = _evaluate(outcomes, manifest)
    _write_results(out / "results.jsonl", results, strategy_name, manifest.name)
    key: GroupKey = (strategy_name, manifest.name)
    correct = sum(r.correct for r in results)
    report = report_from_counts([(key, len(results), correct)])
    (out / "report.md").write_text(report.to_markdown(), encoding="utf-8")
    (out / "report.csv").write_text(report.to_csv(), encoding="utf-8")
    (out / "config.resolved.json").write_text(
        json.dumps(cfg.resolved(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    meta = {
        "config_hash": cfg.config_hash(),
        "backend_calls": backend.call_count,
        "errors": sum(1 for o in outcomes if o.error),
        "samples": len(outcomes),
        "strategy": strategy_name,
        "dataset": manifest.name,
        "correct": correct,
    }
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return meta, results


@main.command("run")
@click.option("--config", "-c", "config_path", type=click.Path(dir_okay=False), default=None)
@click.option("--dataset", type=click.Path(), default=None, help="canonical JSONL manifest")
@click.option("--output", "-o", "output_dir", type=click.Path(file_okay=False), default=None)
@click.option("--strategy", "strategies", type=click.Choice(_STRATEGY_CHOICES), multiple=True,
              help="repeatable; several strategies yield one combined report")
@click.option("--seed", type=int, default=None)
@click.option("--concurrency", type=int, default=None)
@click.option("--cache-root", type=click.Path(file_okay=False), default=None)
@click.option("--resume", is_flag=True, default=False, help="skip samples already traced")
def cmd_run(config_path, dataset, output_dir, strategies, seed, concurrency, cache_root, resume):
    """Evaluate strategies over a dataset manifest.

    Writes traces.jsonl, results.jsonl, report.md/csv, a resolved-config
    snapshot, and run_meta.json into the output directory. With several
    --strategy flags, per-strategy artifacts land in strategies/<name>/ and
    the top-level report carries one row per strategy.
    """
    try:
        base = load_run_config(
            config_path,
            dataset=dataset,
            output_dir=output_dir,
            strategy=strategies[0] if len(strategies) == 1 else None,
            seed=seed,
            concurrency=concurrency,
            cache_root=cache_root,
            resume=resume or None,
        )
        if len(strategies) <= 1:
            meta, _ = execute_run(base)
            metas = [meta]
            out_dir = base.output_dir
        else:
            metas = []
            counts: list[tuple[GroupKey, int, int]] = []
            for name in strategies:
                cfg = load_run_config(
                    config_path,
                    dataset=dataset,
                    output_dir=str(base.output_dir / "strategies" / name),
                    strategy=name,
                    seed=seed,
                    concurrency=concurrency,
                    cache_root=cache_root,
                    resume=resume or None,
                )
                meta, results = execute_run(cfg)
                metas.append(meta)
                counts.append(((name, meta["dataset"]), len(results), sum(r.correct for r in results)))
            report = report_from_counts(counts)
            out_dir = base.output_dir
            out_dir.mkdir(parents=True, exist_ok=True)
            (out_dir / "report.md").write_text(report.to_markdown(), encoding="utf-8")
            (out_dir / "report.csv").write_text(report.to_csv(), encoding="utf-8")
    except (ConfigError, SchemaError, MissingImages, PromptError) as exc:
        raise _fail(exc)
    for meta in metas:
        click.echo(
            f"{meta['strategy']} on {meta['dataset']}: {meta['correct']}/{meta['samples']} correct, "
            f"{meta['backend_calls']} backend calls, {meta['errors']} errors"
        )
    click.echo(f"artifacts -> {out_dir}")
    if any(meta["errors"] for meta in metas):
        sys.exit(1)


@main.command("ask")
@click.option("--image", "-i", "image_path", required=True, type=click.Path())
@click.option("--question", "-q", required=True)
@click.option("--strategy", "-s", type=click.Choice(_STRATEGY_CHOICES), default="zoomcot")
@click.option("--config", "-c", "config_path", type=click.Path(dir_okay=False), default=None,
              help="TOML with backend/prompts/crop sections (mock backend when omitted)")
@click.option("--no-crop", is_flag=True, default=False)
@click.option("--no-caption", is_flag=True, default=False)
@click.option("--crop-mode", type=click.Choice(_CROP_MODE_CHOICES), default=None)
@click.option("--paths", type=int, default=5, help="sampled paths for cot_sc")
@click.option("--seed", type=int, default=0)
@click.option("--trace", "show_trace", is_flag=True, default=False)
def cmd_ask(image_path, question, strategy, config_path, no_crop, no_caption,
            crop_mode, paths, seed, show_trace):
    """Answer one question about one image; print the final answer."""
    try:
        settings, prompts, crop_cfg = load_components(config_path)
        backend = build_backend(settings)
        strat = Strategy(
            StrategyKind(strategy),
            use_crop=not no_crop,
            use_caption=not no_caption,
            crop_mode=CropMode(crop_mode) if crop_mode else None,
            paths=paths,
        )
        sample = Sample(
            id="ask", image_path=Path(image_path), question=question, answers=("n/a",)
        )
        trace = run_sample(sample, backend, strat, prompts, crop_cfg, seed=seed)
    except (ConfigError, ImageLoadError, PromptError, BackendError) as exc:
        raise _fail(exc)
    click.echo(trace.final_answer)
    if show_trace:
        click.echo(json.dumps(trace.to_json(), indent=2, sort_keys=True))


@main.command("ablate")
@click.option("--config", "-c", "config_path", type=click.Path(dir_okay=False), required=True)
@click.option("--axis", type=click.Choice(["reasoning", "cropping", "both"]), default="reasoning")
@click.option("--output", "-o", "output_dir", type=click.Path(file_okay=False), default=None)
def cmd_ablate(config_path, axis, output_dir):
    """Run an ablation matrix and emit one combined report.

    The reasoning axis toggles grounding, cropping, and captioning; the
    cropping axis sweeps the crop geometry with the full pipeline.
    """
    variants = []
    if axis in ("reasoning", "both"):
        variants += list(REASONING_VARIANTS)
    if axis in ("cropping", "both"):
        variants += list(CROPPING_VARIANTS)
    if not variants:
        raise click.UsageError("empty ablation matrix")
    try:
        base = load_run_config(config_path, output_dir=output_dir)
        counts: list[tuple[GroupKey, int, int]] = []
        total_errors = 0
        for name, strategy in variants:
            cfg = replace(
                base,
                strategy=strategy,
                output_dir=base.output_dir / "variants" / name,
                resume=False,
            )
            meta, results = execute_run(cfg, strategy_name=name)
            total_errors += meta["errors"]
            counts.append(((name, meta["dataset"]), len(results), sum(r.correct for r in results)))
    except (ConfigError, SchemaError, MissingImages) as exc:
        raise _fail(exc)
    report = report_from_counts(counts)
    base.output_dir.mkdir(parents=True, exist_ok=True)
    (base.output_dir / "ablate_report.md").write_text(report.to_markdown(), encoding="utf-8")
    (base.output_dir / "ablate_report.csv").write_text(report.to_csv(), encoding="utf-8")
    click.echo(report.to_markdown())
    if total_errors:
        sys.exit(1)


@main.command("convert")
@click.argument("raw_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--format", "-f", "fmt", type=click.Choice(CONVERT_FORMATS), required=True)
@click.option("--out", "-o", "out_path", type=click.Path(dir_okay=False), required=True)
@click.option("--image", "image_name", default=None,
              help="image filename to reference for formats without one")
def cmd_convert(raw_path, fmt, out_path, image_name):
    """Convert a raw benchmark file to the canonical JSONL manifest."""
    try:
        rows = convert(raw_path, fmt, image_name)
    except FormatMismatch as exc:
        raise _fail(exc)
    write_manifest_rows(rows, out_path)
    click.echo(f"wrote {len(rows)} samples to {out_path}")


@main.command("synth")
@click.option("--out", "-o", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--count", "-n", type=int, default=100)
@click.option("--seed", type=int, default=0)
@click.option("--model-input-side", type=int, default=336)
@click.option("--legibility-threshold", type=float, default=12.0)
@click.option("--jitter", type=float, default=0.25)
def cmd_synth(out_dir, count, seed, model_input_side, legibility_threshold, jitter):
    """Generate a deterministic synthetic scene suite plus oracle sidecar."""
    params = OracleParams(
        model_input_side=model_input_side,
        legibility_threshold=legibility_threshold,
        grounding_jitter=jitter,
        seed=seed,
    )
    scenes = generate_suite(count, params, seed)
    manifest_path, sidecar_path = write_suite(scenes, params, out_dir)
    click.echo(f"wrote {len(scenes)} scenes: {manifest_path} / {sidecar_path}")


@main.group("cache")
@click.option("--root", envvar=CACHE_ROOT_ENV, required=True, type=click.Path(file_okay=False))
@click.pass_context
def cmd_cache(ctx, root):
    """Inspect or maintain the response cache."""
    ctx.obj = ResponseCache(root)


@cmd_cache.command("stats")
@click.pass_obj
def cmd_cache_stats(cache: ResponseCache):
    """Print entry count and total size."""
    s = cache.stats()
    click.echo(f"{s.entries} entries, {s.total_bytes} bytes, root {cache.root}")


@cmd_cache.command("gc")
@click.option("--all", "remove_all", is_flag=True, default=False, help="remove every entry")
@click.pass_obj
def cmd_cache_gc(cache: ResponseCache, remove_all):
    """Remove corrupt entries (or everything with --all)."""
    removed, kept = cache.gc(remove_all=remove_all)
    click.echo(f"removed {removed}, kept {kept}")


@main.command("report")
@click.option("--results", "-r", "results_path", type=click.Path(exists=True, dir_okay=False),
              required=True)
@click.option("--out", "-o", "out_dir", type=click.Path(file_okay=False), default=None)
def cmd_report(results_path, out_dir):
    """Rebuild report files from a results JSONL."""
    counts: dict[GroupKey, list[int]] = {}
    order: list[GroupKey] = []
    with open(results_path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            key = (row["strategy"], row["dataset"])
            if key not in counts:
                counts[key] = [0, 0]
                order.append(key)
            counts[key][0] += 1
            counts[key][1] += int(row["correct"])
    report = report_from_counts([(k, counts[k][0], counts[k][1]) for k in order])
    click.echo(report.to_markdown())
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.md").write_text(report.to_markdown(), encoding="utf-8")
        (out / "report.csv").write_text(report.to_csv(), encoding="utf-8")


if __name__ == "__main__":
    main()
