"""Operator CLI: synthesize, filter, export, sample, evaluate, trace, report.

Each command prints exactly one machine-readable JSON summary line to stdout
and sends human logs to stderr, so the commands compose in shell pipelines.
Exit codes: 0 success, 1 unexpected failure, 2 config error, 3 seed-file
error, 4 search aborted.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .chain import ProvenanceRecord, PyramidLevel, QuestionChain
from .config import PipelineConfig, load_config, load_seed_tasks
from .dataset import (
    collect_blind_answers,
    filter_by_reward,
    flatten_chains,
    leakage_filter,
    read_chains,
    read_test_items,
    stratified_sample,
    write_chains,
    write_panels,
    write_sft_records,
    write_test_items,
    export_sft,
)
from .errors import ConfigError, PipelineError, SearchAborted, SeedFileError
from .evaluate import (
    build_model_table,
    dataset_stats,
    error_proportions,
    read_results,
    render_report,
    run_eval,
    trace_back,
)
from .search import run_search

logger = logging.getLogger("finpyramid.cli")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_SEEDS = 3
EXIT_SEARCH_ABORTED = 4


def _emit(summary: dict) -> None:
    sys.stdout.write(json.dumps(summary, ensure_ascii=False, sort_keys=True) + "\n")


def _derive_task_seed(base_seed: int, task_id: str) -> int:
    digest = hashlib.sha256(f"{base_seed}:{task_id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def _created_at(config: PipelineConfig) -> str:
    if config.run_timestamp:
        return config.run_timestamp
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


# --- synth -------------------------------------------------------------------

def cmd_synth(config: PipelineConfig, args) -> int:
    seeds = load_seed_tasks(config.seeds_path, config.themes, config.image_types)
    challenger = config.challenger.make_agent()
    solver = config.solver.make_agent()
    verifier = config.verifier()
    out_dir = Path(config.output_dir)
    checkpoints = out_dir / "checkpoints"
    created_at = _created_at(config)

    def search_one(seed) -> list[QuestionChain]:
        task_config = replace(
            config.search, rng_seed=_derive_task_seed(config.search.rng_seed, seed.task_id)
        )
        provenance = ProvenanceRecord(
            challenger_model=challenger.model_name,
            solver_model=solver.model_name,
            rng_seed=task_config.rng_seed,
            created_at=created_at,
            engine_version=__version__,
        )
        return run_search(
            seed,
            challenger,
            solver,
            verifier,
            task_config,
            provenance=provenance,
            checkpoint_path=checkpoints / f"{seed.task_id}.json",
            resume=args.resume,
            stop_after=args.stop_after_rollouts,
            challenger_template=config.prompts.challenger,
            solver_template=config.prompts.solver,
        )

    chains: list[QuestionChain] = []
    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            for result in pool.map(search_one, seeds):
                chains.extend(result)
    else:
        for seed in seeds:
            chains.extend(search_one(seed))
    chains_path = out_dir / "chains.jsonl"
    count = write_chains(chains, chains_path)
    _emit({
        "command": "synth",
        "seeds": len(seeds),
        "chains_written": count,
        "output": str(chains_path),
        "checkpoints": str(checkpoints),
    })
    return EXIT_OK


# --- filter ------------------------------------------------------------------

def cmd_filter(config: PipelineConfig, args) -> int:
    in_path = Path(args.input) if args.input else Path(config.output_dir) / "chains.jsonl"
    chains = read_chains(in_path)
    manifest: list[dict] = []
    kept = chains
    if args.reward_threshold is not None:
        surviving = filter_by_reward(kept, args.reward_threshold)
        survivor_ids = {c.chain_id for c in surviving}
        for chain in kept:
            if chain.chain_id not in survivor_ids:
                manifest.append({
                    "chain_id": chain.chain_id,
                    "rule": "reward_below_threshold",
                    "detail": f"min sample reward"
                              f" {min(s.reward for s in chain.samples):.6g}"
                              f" < {args.reward_threshold}",
                })
        kept = surviving
    panels_path = Path(config.output_dir) / "blind_panels.jsonl"
    if args.leakage:
        if not config.leakage.panel:
            raise ConfigError(["--leakage requires leakage.panel endpoints in config"])
        items = flatten_chains(kept)
        panels = collect_blind_answers(
            items,
            [entry.endpoint for entry in config.leakage.panel],
            template=config.prompts.blind,
            max_workers=config.leakage.max_workers,
        )
        write_panels(panels, panels_path)
        kept_items = leakage_filter(
            items, panels,
            max_agree=config.leakage.max_agree,
            panel_size=config.leakage.panel_size,
        )
        kept_ids = {item.sample_id for item in kept_items}
        surviving = []
        for chain in kept:
            leaked = [s.sample_id for s in chain.samples if s.sample_id not in kept_ids]
            if leaked:
                manifest.append({
                    "chain_id": chain.chain_id,
                    "rule": "leakage",
                    "detail": f"blind panel agreement exceeded"
                              f" {config.leakage.max_agree} of"
                              f" {config.leakage.panel_size} on"
                              f" sample(s) {', '.join(leaked)}",
                })
            else:
                surviving.append(chain)
        kept = surviving
    out_path = Path(args.output) if args.output else Path(config.output_dir) / "filtered.jsonl"
    count = write_chains(kept, out_path)
    manifest_path = Path(config.output_dir) / "drop_manifest.jsonl"
    with manifest_path.open("w", encoding="utf-8") as fh:
        for entry in manifest:
            fh.write(json.dumps(entry, ensure_ascii=False, separators=(",", ":")) + "\n")
    summary = {
        "command": "filter",
        "input": str(in_path),
        "kept": count,
        "dropped": len(manifest),
        "output": str(out_path),
        "drop_manifest": str(manifest_path),
    }
    if args.leakage:
        summary["blind_panels"] = str(panels_path)
    _emit(summary)
    return EXIT_OK


# --- export / sample -----------------------------------------------------------

def _default_chain_input(config: PipelineConfig) -> Path:
    filtered = Path(config.output_dir) / "filtered.jsonl"
    if filtered.exists():
        return filtered
    return Path(config.output_dir) / "chains.jsonl"


def cmd_export(config: PipelineConfig, args) -> int:
    in_path = Path(args.input) if args.input else _default_chain_input(config)
    chains = read_chains(in_path)
    records = export_sft(chains, args.mode)
    out_path = Path(config.output_dir) / f"sft_{args.mode}.jsonl"
    count = write_sft_records(records, out_path)
    _emit({
        "command": "export",
        "mode": args.mode,
        "input": str(in_path),
        "records": count,
        "output": str(out_path),
    })
    return EXIT_OK


def cmd_sample(config: PipelineConfig, args) -> int:
    in_path = Path(args.input) if args.input else _default_chain_input(config)
    chains = read_chains(in_path)
    items = flatten_chains(chains)
    selected = stratified_sample(items, args.total, args.seed)
    out_path = Path(config.output_dir) / "test_set.jsonl"
    count = write_test_items(selected, out_path)
    _emit({
        "command": "sample",
        "input": str(in_path),
        "population": len(items),
        "selected": count,
        "seed": args.seed,
        "output": str(out_path),
    })
    return EXIT_OK


# --- eval / trace ----------------------------------------------------------------

def cmd_eval(config: PipelineConfig, args) -> int:
    model = config.eval_model(args.model)
    test_path = Path(args.test_set) if args.test_set else Path(config.output_dir) / "test_set.jsonl"
    items = read_test_items(test_path)
    results_path = Path(config.output_dir) / f"results_{model.name}.jsonl"
    results = run_eval(
        model.name,
        model.make_agent(),
        items,
        config.verifier(),
        temperature=config.eval.temperature,
        top_p=config.eval.top_p,
        template=config.prompts.eval,
        results_path=results_path,
        max_workers=config.eval.max_concurrency,
    )
    correct = sum(r.correct for r in results)
    _emit({
        "command": "eval",
        "model": model.name,
        "test_set": str(test_path),
        "evaluated": len(results),
        "correct": correct,
        "results": str(results_path),
    })
    return EXIT_OK


def cmd_trace(config: PipelineConfig, args) -> int:
    model = config.eval_model(args.model)
    in_path = Path(args.chains) if args.chains else _default_chain_input(config)
    chains = read_chains(in_path)
    agent = model.make_agent()
    verifier = config.verifier()
    traces = [
        trace_back(chain, model.name, agent, verifier,
                   template=config.prompts.solver)
        for chain in chains
    ]
    failed = [t for t in traces if t.first_failure_level is not None]
    traces_path = Path(config.output_dir) / f"traces_{model.name}.jsonl"
    with traces_path.open("w", encoding="utf-8") as fh:
        for trace in traces:
            fh.write(json.dumps(trace.to_dict(), ensure_ascii=False,
                                separators=(",", ":")) + "\n")
    proportions_path = Path(config.output_dir) / f"error_proportions_{model.name}.json"
    proportions = {}
    if failed:
        proportions = {
            level.label: share
            for level, share in error_proportions(failed).items()
        }
    proportions_path.write_text(
        json.dumps(proportions, ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
    )
    _emit({
        "command": "trace",
        "model": model.name,
        "chains": len(chains),
        "failed_chains": len(failed),
        "traces": str(traces_path),
        "error_proportions": str(proportions_path),
    })
    return EXIT_OK


# --- report ---------------------------------------------------------------------

def cmd_report(config: PipelineConfig, args) -> int:
    out_dir = Path(config.output_dir)
    results = []
    result_files = (
        [Path(p) for p in args.results]
        if args.results else sorted(out_dir.glob("results_*.jsonl"))
    )
    for path in result_files:
        results.extend(read_results(path))
    table = build_model_table(results)
    fmt = args.format
    ext = "csv" if fmt == "csv" else "md"
    report_path = out_dir / f"report.{ext}"
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(render_report(table, fmt), encoding="utf-8")
    written = {"report": str(report_path)}

    figures_dir = out_dir / "figures"
    from . import figures

    if table:
        written["accuracy_figure"] = str(
            figures.save_accuracy_by_level(table, figures_dir / "accuracy_by_level.png")
        )
    chains_path = Path(args.chains) if args.chains else _default_chain_input(config)
    if chains_path.exists():
        stats = dataset_stats(read_chains(chains_path))
        stats_path = out_dir / "stats.json"
        stats_path.write_text(json.dumps(stats, ensure_ascii=False, indent=2) + "\n",
                              encoding="utf-8")
        written["stats"] = str(stats_path)
        written["level_counts_figure"] = str(
            figures.save_level_counts(stats, figures_dir / "level_counts.png")
        )
    for prop_path in sorted(out_dir.glob("error_proportions_*.json")):
        data = json.loads(prop_path.read_text(encoding="utf-8"))
        if not data:
            continue
        proportions = {PyramidLevel[label]: share for label, share in data.items()}
        name = prop_path.stem.replace("error_proportions_", "")
        written[f"error_figure_{name}"] = str(
            figures.save_error_proportions(
                proportions, figures_dir / f"error_proportions_{name}.png"
            )
        )
    _emit({"command": "report", "format": fmt, "models": len(table), **written})
    return EXIT_OK


# --- entrypoint -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="finpyramid",
        description="Adversarial synthesis and hierarchical evaluation of"
                    " pyramid-structured financial question chains.",
    )
    parser.add_argument("--config", required=True, help="pipeline config JSON")
    parser.add_argument("--output-dir", help="override the config output_dir")
    parser.add_argument("--log-level", default="INFO",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="run the search over every seed task")
    p.add_argument("--resume", action="store_true",
                   help="continue from per-seed checkpoints")
    p.add_argument("--stop-after-rollouts", type=int, default=None,
                   help="stop each seed after N rollouts this run (checkpointed)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("filter", help="reward and leakage filtering")
    p.add_argument("--input", help="chains file (default: output_dir/chains.jsonl)")
    p.add_argument("--output", help="kept-chains file (default: output_dir/filtered.jsonl)")
    p.add_argument("--reward-threshold", type=float, default=None)
    p.add_argument("--leakage", action="store_true",
                   help="query the blind panel and drop leaked chains")
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("export", help="write SFT records")
    p.add_argument("--input", help="chains file")
    p.add_argument("--mode", choices=["cot", "final_only"], required=True)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("sample", help="stratified test-set sampling")
    p.add_argument("--input", help="chains file")
    p.add_argument("--total", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="evaluate one configured model")
    p.add_argument("--model", required=True)
    p.add_argument("--test-set", help="test-set file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("trace", help="trace-back error attribution")
    p.add_argument("--model", required=True)
    p.add_argument("--chains", help="chains file")
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("report", help="accuracy tables, stats, and figures")
    p.add_argument("--format", choices=["csv", "markdown"], default="markdown")
    p.add_argument("--results", nargs="*", help="result files (default: results_*.jsonl)")
    p.add_argument("--chains", help="chains file for dataset stats")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=getattr(logging, args.log_level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        config = load_config(args.config)
        if args.output_dir:
            config.output_dir = args.output_dir
        Path(config.output_dir).mkdir(parents=True, exist_ok=True)
        return args.func(config, args)
    except ConfigError as exc:
        for violation in exc.violations:
            logger.error("config: %s", violation)
        return EXIT_CONFIG
    except SeedFileError as exc:
        logger.error("seeds: %s", exc)
        return EXIT_SEEDS
    except SearchAborted as exc:
        logger.error("search aborted: %s", exc)
        return EXIT_SEARCH_ABORTED
    except PipelineError as exc:
        logger.error("%s", exc)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
