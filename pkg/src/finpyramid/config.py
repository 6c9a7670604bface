"""Pipeline configuration: one JSON document, validated up front.

Secrets are referenced by environment-variable name and interpolated with
``${NAME}`` syntax; the values are read at call time and never echoed into
logs, summaries, or checkpoints. Every violation found during validation is
reported at once.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .agents import (
    Agent,
    AgentEndpoint,
    DEFAULT_BLIND_TEMPLATE,
    DEFAULT_CHALLENGER_TEMPLATE,
    DEFAULT_EVAL_TEMPLATE,
    DEFAULT_JUDGE_TEMPLATE,
    DEFAULT_SOLVER_TEMPLATE,
    PromptTemplate,
    SCRIPTED_URL_PREFIX,
    make_backend,
)
from .chain import PyramidLevel, SeedTask
from .errors import ConfigError, SeedFileError
from .search import SearchConfig
from .verify import VerifierConfig

# Closed default vocabularies. The catalogue counts (17 themes, 11 image
# types) are fixed; deployments with a different label set override these in
# the config file.
DEFAULT_THEMES = [
    "stocks",
    "bonds",
    "funds",
    "futures",
    "options",
    "foreign_exchange",
    "commodities",
    "real_estate",
    "banking",
    "insurance",
    "macroeconomics",
    "corporate_finance",
    "personal_finance",
    "cryptocurrency",
    "risk_management",
    "taxation",
    "auditing",
]

DEFAULT_IMAGE_TYPES = [
    "candlestick_chart",
    "line_chart",
    "bar_chart",
    "pie_chart",
    "scatter_plot",
    "area_chart",
    "heatmap",
    "table",
    "financial_statement",
    "dashboard",
    "infographic",
]

_ENV_RE = re.compile(r"\$\{(\w+)\}")


def _interpolate(value: Any, violations: list[str]) -> Any:
    if isinstance(value, str):
        def repl(match: re.Match) -> str:
            name = match.group(1)
            if name not in os.environ:
                violations.append(f"environment variable {name} is not set")
                return ""
            return os.environ[name]

        return _ENV_RE.sub(repl, value)
    if isinstance(value, list):
        return [_interpolate(v, violations) for v in value]
    if isinstance(value, dict):
        return {k: _interpolate(v, violations) for k, v in value.items()}
    return value


@dataclass
class EndpointConfig:
    """Either an HTTP chat endpoint or a scripted fixture."""

    endpoint: AgentEndpoint
    name: str = ""

    def make_agent(self, **http_kwargs) -> Agent:
        return Agent(self.endpoint, make_backend(self.endpoint, **http_kwargs))


def _parse_endpoint(
    data: Mapping[str, Any], where: str, violations: list[str],
    default_temperature: float = 0.0,
) -> EndpointConfig | None:
    backend = data.get("backend", "http")
    try:
        if backend == "scripted":
            fixture = data.get("fixture_path")
            if not fixture:
                violations.append(f"{where}: scripted backend needs fixture_path")
                return None
            endpoint = AgentEndpoint(
                base_url=f"{SCRIPTED_URL_PREFIX}{fixture}",
                model_name=str(data.get("model_name", "scripted")),
                temperature=float(data.get("temperature", default_temperature)),
                top_p=float(data.get("top_p", 1.0)),
            )
        elif backend == "http":
            if not data.get("base_url"):
                violations.append(f"{where}: http backend needs base_url")
                return None
            endpoint = AgentEndpoint(
                base_url=str(data["base_url"]),
                model_name=str(data.get("model_name", "")),
                api_key_env=str(data.get("api_key_env", "")),
                timeout_ms=int(data.get("timeout_ms", 30_000)),
                max_retries=int(data.get("max_retries", 2)),
                temperature=float(data.get("temperature", default_temperature)),
                top_p=float(data.get("top_p", 1.0)),
            )
        else:
            violations.append(f"{where}: unknown backend {backend!r}")
            return None
    except (ValueError, TypeError) as exc:
        violations.append(f"{where}: {exc}")
        return None
    return EndpointConfig(endpoint=endpoint, name=str(data.get("name", "")))


@dataclass
class LeakageConfig:
    max_agree: int = 8
    panel: list[EndpointConfig] = field(default_factory=list)
    max_workers: int = 8

    @property
    def panel_size(self) -> int:
        return len(self.panel)


@dataclass
class EvalSettings:
    temperature: float = 0.1
    top_p: float = 1.0
    max_concurrency: int = 1
    models: list[EndpointConfig] = field(default_factory=list)


@dataclass
class Prompts:
    challenger: PromptTemplate = DEFAULT_CHALLENGER_TEMPLATE
    solver: PromptTemplate = DEFAULT_SOLVER_TEMPLATE
    judge: PromptTemplate = DEFAULT_JUDGE_TEMPLATE
    blind: PromptTemplate = DEFAULT_BLIND_TEMPLATE
    eval: PromptTemplate = DEFAULT_EVAL_TEMPLATE


@dataclass
class PipelineConfig:
    seeds_path: str
    output_dir: str
    search: SearchConfig
    challenger: EndpointConfig
    solver: EndpointConfig
    judge: EndpointConfig | None
    verifier_mode: str
    numeric_rel_tol: float
    leakage: LeakageConfig
    eval: EvalSettings
    themes: list[str]
    image_types: list[str]
    prompts: Prompts
    run_timestamp: str | None = None
    workers: int = 1

    def verifier(self) -> VerifierConfig:
        judge_agent = None
        judge_template = None
        if self.verifier_mode == "judge":
            if self.judge is None:
                raise ConfigError(["verifier mode 'judge' requires a judge endpoint"])
            judge_agent = self.judge.make_agent()
            judge_template = self.prompts.judge
        return VerifierConfig(
            mode=self.verifier_mode,
            numeric_rel_tol=self.numeric_rel_tol,
            judge_agent=judge_agent,
            judge_template=judge_template,
        )

    def eval_model(self, name: str) -> EndpointConfig:
        for model in self.eval.models:
            if model.name == name or model.endpoint.model_name == name:
                return model
        raise ConfigError([f"no eval model named {name!r} in config"])


def _parse_template(data: Mapping[str, Any], where: str, violations: list[str],
                    default: PromptTemplate) -> PromptTemplate:
    try:
        return PromptTemplate(
            template_id=str(data.get("template_id", where)),
            role_preamble=str(data.get("role_preamble", default.role_preamble)),
            body=str(data.get("body", default.body)),
            output_schema_hint=str(data.get("output_schema_hint",
                                            default.output_schema_hint)),
            empty_prefix_marker=str(data.get("empty_prefix_marker",
                                             default.empty_prefix_marker)),
        )
    except ValueError as exc:
        violations.append(f"{where}: {exc}")
        return default


def load_config(path: str | Path) -> PipelineConfig:
    """Parse, interpolate, and validate; raises ConfigError listing every

    violation found rather than stopping at the first.
    """
    violations: list[str] = []
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError([f"config file not found: {path}"])
    except json.JSONDecodeError as exc:
        raise ConfigError([f"config is not valid JSON: {exc}"])
    if not isinstance(raw, dict):
        raise ConfigError(["config root must be a JSON object"])
    data = _interpolate(raw, violations)

    seeds_path = str(data.get("seeds_path", ""))
    if not seeds_path:
        violations.append("seeds_path is required")
    output_dir = str(data.get("output_dir", "out"))

    search_data = data.get("search", {})
    search = None
    try:
        search = SearchConfig(
            rollout_budget=int(search_data.get("rollout_budget", 32)),
            rng_seed=int(search_data.get("rng_seed", 0)),
            uct_constant=float(search_data.get("uct_constant", 2 ** 0.5)),
            explore_prob=float(search_data.get("explore_prob", 0.3)),
            max_depth=int(search_data.get("max_depth", 16)),
            reward_threshold=float(search_data.get("reward_threshold", 1.0)),
            checkpoint_every=int(search_data.get("checkpoint_every", 10)),
            repair_attempts=int(search_data.get("repair_attempts", 3)),
            max_consecutive_failures=int(search_data.get("max_consecutive_failures", 10)),
        )
    except (ValueError, TypeError) as exc:
        violations.append(f"search: {exc}")

    challenger = None
    if "challenger" in data:
        challenger = _parse_endpoint(data["challenger"], "challenger", violations,
                                     default_temperature=0.7)
    else:
        violations.append("challenger endpoint is required")
    solver = None
    if "solver" in data:
        solver = _parse_endpoint(data["solver"], "solver", violations,
                                 default_temperature=0.1)
    else:
        violations.append("solver endpoint is required")
    judge = None
    if "judge" in data:
        judge = _parse_endpoint(data["judge"], "judge", violations,
                                default_temperature=0.0)

    verifier_data = data.get("verifier", {})
    verifier_mode = str(verifier_data.get("mode", "exact"))
    numeric_rel_tol = float(verifier_data.get("numeric_rel_tol", 1e-4))
    if verifier_mode not in ("exact", "numeric", "judge"):
        violations.append(f"verifier: unknown mode {verifier_mode!r}")
    if numeric_rel_tol <= 0:
        violations.append("verifier: numeric_rel_tol must be positive")
    if verifier_mode == "judge" and judge is None:
        violations.append("verifier mode 'judge' requires a judge endpoint")

    leakage_data = data.get("leakage", {})
    panel = []
    for i, entry in enumerate(leakage_data.get("panel", [])):
        parsed = _parse_endpoint(entry, f"leakage.panel[{i}]", violations)
        if parsed is not None:
            panel.append(parsed)
    leakage = LeakageConfig(
        max_agree=int(leakage_data.get("max_agree", 8)),
        panel=panel,
        max_workers=int(leakage_data.get("max_workers", 8)),
    )
    if leakage.max_agree < 0:
        violations.append("leakage: max_agree must be non-negative")

    eval_data = data.get("eval", {})
    models = []
    for i, entry in enumerate(eval_data.get("models", [])):
        parsed = _parse_endpoint(entry, f"eval.models[{i}]", violations)
        if parsed is not None:
            if not parsed.name:
                parsed.name = parsed.endpoint.model_name
            models.append(parsed)
    eval_settings = EvalSettings(
        temperature=float(eval_data.get("temperature", 0.1)),
        top_p=float(eval_data.get("top_p", 1.0)),
        max_concurrency=int(eval_data.get("max_concurrency", 1)),
        models=models,
    )
    if eval_settings.max_concurrency <= 0:
        violations.append("eval: max_concurrency must be positive")

    vocab = data.get("vocabularies", {})
    themes = [str(t) for t in vocab.get("themes", DEFAULT_THEMES)]
    image_types = [str(t) for t in vocab.get("image_types", DEFAULT_IMAGE_TYPES)]
    if not themes:
        violations.append("vocabularies.themes must be non-empty")
    if not image_types:
        violations.append("vocabularies.image_types must be non-empty")

    prompt_data = data.get("prompts", {})
    prompts = Prompts(
        challenger=_parse_template(prompt_data.get("challenger", {}),
                                   "prompts.challenger", violations,
                                   DEFAULT_CHALLENGER_TEMPLATE),
        solver=_parse_template(prompt_data.get("solver", {}),
                               "prompts.solver", violations, DEFAULT_SOLVER_TEMPLATE),
        judge=_parse_template(prompt_data.get("judge", {}),
                              "prompts.judge", violations, DEFAULT_JUDGE_TEMPLATE),
        blind=_parse_template(prompt_data.get("blind", {}),
                              "prompts.blind", violations, DEFAULT_BLIND_TEMPLATE),
        eval=_parse_template(prompt_data.get("eval", {}),
                             "prompts.eval", violations, DEFAULT_EVAL_TEMPLATE),
    )

    workers = int(data.get("workers", 1))
    if workers <= 0:
        violations.append("workers must be positive")

    if violations:
        raise ConfigError(violations)
    assert search is not None and challenger is not None and solver is not None
    return PipelineConfig(
        seeds_path=seeds_path,
        output_dir=output_dir,
        search=search,
        challenger=challenger,
        solver=solver,
        judge=judge,
        verifier_mode=verifier_mode,
        numeric_rel_tol=numeric_rel_tol,
        leakage=leakage,
        eval=eval_settings,
        themes=themes,
        image_types=image_types,
        prompts=prompts,
        run_timestamp=data.get("run_timestamp"),
        workers=workers,
    )


def load_seed_tasks(path: str | Path, themes: list[str],
                    image_types: list[str]) -> list[SeedTask]:
    """Seed-task JSONL: {task_id, image, theme, image_type, ground_truth?,

    target_level?}; themes and image types must come from the closed
    vocabularies.
    """
    file = Path(path)
    if not file.exists():
        raise SeedFileError(f"seeds file not found: {path}")
    seeds: list[SeedTask] = []
    seen: set[str] = set()
    with file.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
                seed = SeedTask(
                    task_id=str(data["task_id"]),
                    image=str(data["image"]),
                    theme=str(data["theme"]),
                    image_type=str(data["image_type"]),
                    ground_truth=(str(data["ground_truth"])
                                  if data.get("ground_truth") is not None else None),
                    target_level=PyramidLevel(int(data.get("target_level", 6))),
                )
            except SeedFileError:
                raise
            except Exception as exc:
                raise SeedFileError(f"seeds line {lineno}: {exc}") from exc
            if seed.task_id in seen:
                raise SeedFileError(f"seeds line {lineno}: duplicate task_id {seed.task_id!r}")
            if seed.theme not in themes:
                raise SeedFileError(
                    f"seeds line {lineno}: theme {seed.theme!r} is not in the vocabulary"
                )
            if seed.image_type not in image_types:
                raise SeedFileError(
                    f"seeds line {lineno}: image_type {seed.image_type!r} is not in"
                    " the vocabulary"
                )
            seen.add(seed.task_id)
            seeds.append(seed)
    return seeds
