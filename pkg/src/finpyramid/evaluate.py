"""Hierarchical evaluation: per-level accuracy tables, trace-back error

attribution, and dataset statistics.

Evaluation is strict about protocol: models are instructed to box their
solution, and a reply without a well-formed box counts as incorrect (unlike
synthesis-time verification, which falls back to the whole reply). Transport
failures count as incorrect but carry an error flag so availability problems
stay distinguishable from capability failures.
"""

from __future__ import annotations

import json
import logging
import statistics
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

from .agents import Agent, DEFAULT_EVAL_TEMPLATE, PromptTemplate, render_prompt
from .chain import LEVEL_LABELS, PyramidLevel, QuestionChain
from .dataset import DatasetItem
from .errors import AgentTransportError, EmptyTraceSet, SchemaError
from .verify import (
    NoBoxedAnswer,
    VerifierConfig,
    extract_boxed,
    judge_correct,
    reference_answer,
)

logger = logging.getLogger(__name__)

GROUP_KEYS = ("model", "level", "complexity", "theme", "image_type")


@dataclass(frozen=True)
class EvalResult:
    model_name: str
    sample_id: str
    level: PyramidLevel
    complexity: int
    theme: str
    image_type: str
    predicted: str
    correct: bool
    raw_reply: str
    error_flag: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "model": self.model_name,
            "sample_id": self.sample_id,
            "level": int(self.level),
            "complexity": int(self.complexity),
            "theme": self.theme,
            "image_type": self.image_type,
            "predicted": self.predicted,
            "correct": self.correct,
            "error_flag": self.error_flag,
            "raw_reply": self.raw_reply,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "EvalResult":
        return cls(
            model_name=str(data["model"]),
            sample_id=str(data["sample_id"]),
            level=PyramidLevel(int(data["level"])),
            complexity=int(data["complexity"]),
            theme=str(data["theme"]),
            image_type=str(data["image_type"]),
            predicted=str(data["predicted"]),
            correct=bool(data["correct"]),
            raw_reply=str(data["raw_reply"]),
            error_flag=bool(data.get("error_flag", False)),
        )


def read_results(path: str | Path) -> list[EvalResult]:
    results = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                results.append(EvalResult.from_dict(json.loads(line)))
            except Exception as exc:
                raise SchemaError(str(exc), line=lineno) from exc
    return results


def _grade_reply(item: DatasetItem, raw_reply: str, verifier: VerifierConfig) -> tuple[str, bool]:
    try:
        predicted = extract_boxed(raw_reply)
    except NoBoxedAnswer:  # evaluation is strict: no box means incorrect
        return "", False
    return predicted, judge_correct(predicted, reference_answer(item.answer), verifier)


def run_eval(
    model_name: str,
    agent: Agent,
    items: Sequence[DatasetItem],
    verifier: VerifierConfig,
    *,
    temperature: float = 0.1,
    top_p: float = 1.0,
    template: PromptTemplate = DEFAULT_EVAL_TEMPLATE,
    results_path: str | Path | None = None,
    max_workers: int = 1,
) -> list[EvalResult]:
    """Evaluate every test item once, appending results incrementally so an

    interrupted run resumes without re-querying completed samples.
    """
    done: dict[str, EvalResult] = {}
    if results_path and Path(results_path).exists():
        for result in read_results(results_path):
            if result.model_name == model_name:
                done[result.sample_id] = result
    eval_agent = Agent(
        replace(agent.endpoint, temperature=temperature, top_p=top_p),
        agent.backend,
    )

    def evaluate(item: DatasetItem) -> EvalResult:
        messages = render_prompt(
            template, {"question": item.question, "image": item.image}
        )
        try:
            raw = eval_agent.complete(
                messages,
                context={"task_id": item.task_id, "prefix_len": 0,
                         "question": item.question},
            )
        except AgentTransportError as exc:
            logger.warning("eval %s failed on %s: %s", model_name, item.sample_id, exc)
            return EvalResult(
                model_name=model_name, sample_id=item.sample_id, level=item.level,
                complexity=int(item.complexity), theme=item.theme,
                image_type=item.image_type, predicted="", correct=False,
                raw_reply="", error_flag=True,
            )
        predicted, correct = _grade_reply(item, raw, verifier)
        return EvalResult(
            model_name=model_name, sample_id=item.sample_id, level=item.level,
            complexity=int(item.complexity), theme=item.theme,
            image_type=item.image_type, predicted=predicted, correct=correct,
            raw_reply=raw,
        )

    pending = [item for item in items if item.sample_id not in done]
    sink = None
    if results_path:
        Path(results_path).parent.mkdir(parents=True, exist_ok=True)
        sink = Path(results_path).open("a", encoding="utf-8")
    try:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            for result in pool.map(evaluate, pending):
                done[result.sample_id] = result
                if sink is not None:
                    sink.write(json.dumps(result.to_dict(), ensure_ascii=False,
                                          separators=(",", ":")) + "\n")
                    sink.flush()
    finally:
        if sink is not None:
            sink.close()
    return [done[item.sample_id] for item in items if item.sample_id in done]


# --- aggregation --------------------------------------------------------------

def _group_value(result: EvalResult, key: str):
    if key == "model":
        return result.model_name
    if key == "level":
        return result.level.label
    if key == "complexity":
        return int(result.complexity)
    if key == "theme":
        return result.theme
    if key == "image_type":
        return result.image_type
    raise ValueError(f"unknown group key {key!r}")


def accuracy_pct(correct: int, total: int) -> float:
    return round(100.0 * correct / total, 2)


def aggregate(
    results: Sequence[EvalResult], group_keys: Sequence[str] = ("model",)
) -> list[dict[str, Any]]:
    """Accuracy per group, as a percentage to two decimals, with raw counts.

    Groups with zero samples simply do not appear.
    """
    for key in group_keys:
        if key not in GROUP_KEYS:
            raise ValueError(f"unknown group key {key!r}")
    buckets: dict[tuple, list[EvalResult]] = defaultdict(list)
    for result in results:
        buckets[tuple(_group_value(result, k) for k in group_keys)].append(result)
    rows = []
    for key in sorted(buckets, key=lambda k: tuple(str(v) for v in k)):
        group = buckets[key]
        correct = sum(r.correct for r in group)
        row: dict[str, Any] = dict(zip(group_keys, key))
        row.update(
            total=len(group),
            correct=correct,
            accuracy=accuracy_pct(correct, len(group)),
        )
        rows.append(row)
    return rows


REPORT_COLUMNS = ["Model", "Overall"] + LEVEL_LABELS + [str(d) for d in range(1, 6)]


def build_model_table(results: Sequence[EvalResult]) -> list[dict[str, Any]]:
    """One row per model: Overall, per-level, and per-complexity accuracy.

    Cells for empty groups are None (rendered blank).
    """
    rows = []
    models = sorted({r.model_name for r in results})
    by_level = {(r["model"], r["level"]): r["accuracy"]
                for r in aggregate(results, ("model", "level"))}
    by_cx = {(r["model"], r["complexity"]): r["accuracy"]
             for r in aggregate(results, ("model", "complexity"))}
    overall = {r["model"]: r["accuracy"] for r in aggregate(results, ("model",))}
    for model in models:
        row: dict[str, Any] = {"Model": model, "Overall": overall[model]}
        for label in LEVEL_LABELS:
            row[label] = by_level.get((model, label))
        for degree in range(1, 6):
            row[str(degree)] = by_cx.get((model, degree))
        rows.append(row)
    return rows


def render_report(rows: Sequence[Mapping[str, Any]], fmt: str = "markdown") -> str:
    """Deterministic column order (Overall, then the six levels, then the

    complexity degrees), accuracy formatted to two decimals.
    """
    if fmt not in ("csv", "markdown"):
        raise ValueError(f"unknown report format {fmt!r}")

    def cell(value: Any) -> str:
        if value is None:
            return ""
        if isinstance(value, float):
            return f"{value:.2f}"
        return str(value)

    table = [[cell(row.get(col)) for col in REPORT_COLUMNS] for row in rows]
    if fmt == "csv":
        lines = [",".join(REPORT_COLUMNS)]
        lines += [",".join(line) for line in table]
        return "\n".join(lines) + "\n"
    header = "| " + " | ".join(REPORT_COLUMNS) + " |"
    rule = "| " + " | ".join("---" for _ in REPORT_COLUMNS) + " |"
    lines = [header, rule]
    lines += ["| " + " | ".join(line) + " |" for line in table]
    return "\n".join(lines) + "\n"


# --- trace-back ----------------------------------------------------------------

@dataclass(frozen=True)
class TraceReport:
    """Per-sample verdicts for one chain, locating the first failing level.

    ``first_failure_level`` is None iff every sample was answered correctly.
    """

    chain_id: str
    model_name: str
    verdicts: tuple[bool, ...]
    error_flags: tuple[bool, ...]
    first_failure_level: PyramidLevel | None

    def to_dict(self) -> dict[str, Any]:
        return {
            "chain_id": self.chain_id,
            "model": self.model_name,
            "verdicts": list(self.verdicts),
            "error_flags": list(self.error_flags),
            "first_failure_level": (
                int(self.first_failure_level)
                if self.first_failure_level is not None else None
            ),
        }


def trace_back(
    chain: QuestionChain,
    model_name: str,
    agent: Agent,
    verifier: VerifierConfig,
    *,
    template: PromptTemplate | None = None,
) -> TraceReport:
    """Evaluate the model on every sample of the chain, in order, conditioning

    each question on the REFERENCE prefix Q/A pairs (not the model's own
    outputs) so the first failure pinpoints the level where capability
    breaks down.
    """
    from .agents import DEFAULT_SOLVER_TEMPLATE, answer_question

    template = template or DEFAULT_SOLVER_TEMPLATE
    verdicts: list[bool] = []
    errors: list[bool] = []
    first_failure: PyramidLevel | None = None
    for i, sample in enumerate(chain.samples):
        prefix = list(chain.samples[:i])
        try:
            raw = answer_question(
                agent, chain.image, sample.question, prefix, template,
                task_id=chain.task_id,
            )
            error = False
        except AgentTransportError as exc:
            logger.warning("trace %s failed on %s: %s", model_name, sample.sample_id, exc)
            raw, error = "", True
        if error:
            correct = False
        else:
            try:
                predicted = extract_boxed(raw)
                correct = judge_correct(predicted, reference_answer(sample.answer), verifier)
            except NoBoxedAnswer:
                correct = False
        verdicts.append(correct)
        errors.append(error)
        if not correct and first_failure is None:
            first_failure = sample.level
    return TraceReport(
        chain_id=chain.chain_id,
        model_name=model_name,
        verdicts=tuple(verdicts),
        error_flags=tuple(errors),
        first_failure_level=first_failure,
    )


def error_proportions(traces: Sequence[TraceReport]) -> dict[PyramidLevel, float]:
    """Share of traces whose first failure sits at each level; sums to 1."""
    if not traces:
        raise EmptyTraceSet("no trace reports to attribute errors over")
    for trace in traces:
        if trace.first_failure_level is None:
            raise ValueError(
                f"trace {trace.chain_id} has no failure; error attribution"
                " expects traces from failed chains"
            )
    counts = Counter(trace.first_failure_level for trace in traces)
    return {level: counts[level] / len(traces) for level in sorted(counts)}


# --- dataset statistics ----------------------------------------------------------

def dataset_stats(chains: Sequence[QuestionChain]) -> dict[str, Any]:
    """Chain counts, length summaries per terminal level, and sample counts

    by level / theme / image type.
    """
    lengths_by_terminal: dict[str, list[int]] = defaultdict(list)
    samples_by_level: Counter = Counter()
    samples_by_theme: Counter = Counter()
    samples_by_type: Counter = Counter()
    total_samples = 0
    for chain in chains:
        lengths_by_terminal[chain.terminal.level.label].append(len(chain))
        samples_by_theme[chain.theme] += len(chain)
        samples_by_type[chain.image_type] += len(chain)
        total_samples += len(chain)
        for sample in chain.samples:
            samples_by_level[sample.level.label] += 1
    all_lengths = [len(chain) for chain in chains]
    return {
        "chain_count": len(chains),
        "total_samples": total_samples,
        "mean_chain_length": round(statistics.fmean(all_lengths), 4) if all_lengths else 0.0,
        "by_terminal_level": {
            label: {
                "count": len(lengths),
                "mean_length": round(statistics.fmean(lengths), 4),
                "median_length": statistics.median(lengths),
            }
            for label, lengths in sorted(
                lengths_by_terminal.items(),
                key=lambda kv: PyramidLevel[kv[0]],
            )
        },
        "samples_by_level": {
            label: samples_by_level[label]
            for label in LEVEL_LABELS if samples_by_level[label]
        },
        "samples_by_theme": dict(sorted(samples_by_theme.items())),
        "samples_by_image_type": dict(sorted(samples_by_type.items())),
    }
