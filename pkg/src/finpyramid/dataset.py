"""Persistence, filtering, stratified sampling, and SFT export of chains.

All files are UTF-8 JSONL with a stable field order. Reading is strict by
default: a single bad line rejects the file with its line number; lenient
mode skips bad lines and logs how many were dropped.
"""

from __future__ import annotations

import json
import logging
import random
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .agents import (
    Agent,
    AgentEndpoint,
    DEFAULT_BLIND_TEMPLATE,
    PromptTemplate,
    make_backend,
    render_prompt,
)
from .chain import (
    ComplexityDegree,
    PyramidLevel,
    QuestionChain,
    chain_from_dict,
    chain_to_dict,
    validate_chain,
)
from .errors import (
    AgentTransportError,
    EmptyChain,
    InsufficientPopulation,
    PanelMismatch,
    SchemaError,
)
from .verify import NoBoxedAnswer, extract_boxed, normalize_answer

logger = logging.getLogger(__name__)


# --- chain files ------------------------------------------------------------

def write_chains(chains: Sequence[QuestionChain], path: str | Path) -> int:
    """One chain per line; every chain is validated before anything is written."""
    for chain in chains:
        report = validate_chain(chain)
        if not report.ok:
            raise SchemaError(
                f"refusing to write invalid chain {chain.chain_id}:"
                f" {[v.message for v in report.violations]}"
            )
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with target.open("w", encoding="utf-8") as fh:
        for chain in chains:
            fh.write(json.dumps(chain_to_dict(chain), ensure_ascii=False,
                                separators=(",", ":")) + "\n")
    return len(chains)


def read_chains(path: str | Path, strict: bool = True) -> list[QuestionChain]:
    chains: list[QuestionChain] = []
    skipped = 0
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                chain = chain_from_dict(json.loads(line))
                report = validate_chain(chain)
                if not report.ok:
                    raise ValueError(
                        f"invariant violations: {[v.message for v in report.violations]}"
                    )
            except SchemaError:
                raise
            except Exception as exc:
                if strict:
                    raise SchemaError(str(exc), line=lineno) from exc
                skipped += 1
                logger.warning("skipping chain at line %d: %s", lineno, exc)
                continue
            chains.append(chain)
    if skipped:
        logger.warning("read_chains: skipped %d invalid line(s) from %s", skipped, path)
    return chains


def filter_by_reward(
    chains: Sequence[QuestionChain], threshold: float
) -> list[QuestionChain]:
    """Keep chains whose minimum per-sample reward meets the threshold."""
    return [
        chain for chain in chains
        if min(sample.reward for sample in chain.samples) >= threshold
    ]


# --- flattened samples (test-set / leakage unit) ----------------------------

@dataclass(frozen=True)
class DatasetItem:
    """One dataset sample enriched with its chain's catalogue metadata."""

    sample_id: str
    chain_id: str
    task_id: str
    image: str
    theme: str
    image_type: str
    level: PyramidLevel
    complexity: ComplexityDegree
    question: str
    answer: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "level", PyramidLevel(self.level))
        object.__setattr__(self, "complexity", ComplexityDegree(self.complexity))


def flatten_chains(chains: Sequence[QuestionChain]) -> list[DatasetItem]:
    """Every sample of every chain, deduplicated by sample id (a sample shared

    by several chains through a common tree prefix appears once).
    """
    seen: set[str] = set()
    items: list[DatasetItem] = []
    for chain in chains:
        for sample in chain.samples:
            if sample.sample_id in seen:
                continue
            seen.add(sample.sample_id)
            items.append(
                DatasetItem(
                    sample_id=sample.sample_id,
                    chain_id=chain.chain_id,
                    task_id=chain.task_id,
                    image=chain.image,
                    theme=chain.theme,
                    image_type=chain.image_type,
                    level=sample.level,
                    complexity=sample.complexity,
                    question=sample.question,
                    answer=sample.answer,
                )
            )
    return items


_TEST_ITEM_FIELDS = ("sample_id", "chain_id", "task_id", "image", "theme",
                     "image_type", "level", "complexity", "question", "answer")


def write_test_items(items: Sequence[DatasetItem], path: str | Path) -> int:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with target.open("w", encoding="utf-8") as fh:
        for item in items:
            record = {
                "sample_id": item.sample_id,
                "chain_id": item.chain_id,
                "task_id": item.task_id,
                "image": item.image,
                "theme": item.theme,
                "image_type": item.image_type,
                "level": int(item.level),
                "complexity": int(item.complexity),
                "question": item.question,
                "answer": item.answer,
            }
            fh.write(json.dumps(record, ensure_ascii=False, separators=(",", ":")) + "\n")
    return len(items)


def read_test_items(path: str | Path) -> list[DatasetItem]:
    items: list[DatasetItem] = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
                items.append(DatasetItem(**{k: data[k] for k in _TEST_ITEM_FIELDS}))
            except Exception as exc:
                raise SchemaError(str(exc), line=lineno) from exc
    return items


# --- blind panel / leakage filter -------------------------------------------

@dataclass(frozen=True)
class BlindPanelResult:
    """Per-sample answers from models queried WITHOUT the image attachment.

    ``None`` entries are abstentions (transport failures); they never count
    toward agreement.
    """

    sample_id: str
    panel: tuple[tuple[str, str | None], ...]

    @property
    def panel_size(self) -> int:
        return len(self.panel)

    def largest_agreement(self) -> int:
        counts = Counter(
            normalize_answer(answer) for _, answer in self.panel if answer is not None
        )
        return max(counts.values(), default=0)


def collect_blind_answers(
    items: Sequence[DatasetItem],
    panel_endpoints: Sequence[AgentEndpoint],
    *,
    template: PromptTemplate = DEFAULT_BLIND_TEMPLATE,
    max_workers: int = 8,
) -> list[BlindPanelResult]:
    """Query every panel model with the bare question (no image); answers are

    normalized before storage and failures are recorded as abstentions.
    """
    if not panel_endpoints:
        raise ValueError("blind panel needs at least one endpoint")
    agents = [Agent(ep, make_backend(ep)) for ep in panel_endpoints]

    def ask(item: DatasetItem, agent: Agent) -> str | None:
        messages = render_prompt(template, {"question": item.question})
        try:
            reply = agent.complete(
                messages,
                context={"task_id": item.task_id, "prefix_len": 0,
                         "question": item.question},
            )
        except AgentTransportError as exc:
            logger.warning("blind panel %s abstained on %s: %s",
                           agent.model_name, item.sample_id, exc)
            return None
        return normalize_answer(reply)

    jobs = [(item, agent) for item in items for agent in agents]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        replies = list(pool.map(lambda job: ask(*job), jobs))
    results: list[BlindPanelResult] = []
    width = len(agents)
    for i, item in enumerate(items):
        row = replies[i * width:(i + 1) * width]
        results.append(
            BlindPanelResult(
                sample_id=item.sample_id,
                panel=tuple((agent.model_name, answer)
                            for agent, answer in zip(agents, row)),
            )
        )
    return results


def leakage_filter(
    items: Sequence[DatasetItem],
    panels: Sequence[BlindPanelResult],
    max_agree: int = 8,
    panel_size: int = 15,
) -> list[DatasetItem]:
    """Drop a sample iff strictly more than ``max_agree`` of its blind panel

    produced the same normalized answer; order is preserved.
    """
    by_id = {panel.sample_id: panel for panel in panels}
    kept: list[DatasetItem] = []
    for item in items:
        panel = by_id.get(item.sample_id)
        if panel is None:
            raise PanelMismatch(f"sample {item.sample_id} has no blind panel")
        if panel.panel_size != panel_size:
            raise PanelMismatch(
                f"sample {item.sample_id}: panel size {panel.panel_size} differs"
                f" from declared {panel_size}"
            )
        if panel.largest_agreement() > max_agree:
            continue
        kept.append(item)
    return kept


def write_panels(panels: Sequence[BlindPanelResult], path: str | Path) -> int:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with target.open("w", encoding="utf-8") as fh:
        for panel in panels:
            record = {
                "sample_id": panel.sample_id,
                "panel": [{"model": m, "answer": a} for m, a in panel.panel],
            }
            fh.write(json.dumps(record, ensure_ascii=False, separators=(",", ":")) + "\n")
    return len(panels)


def read_panels(path: str | Path) -> list[BlindPanelResult]:
    panels: list[BlindPanelResult] = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
                panels.append(
                    BlindPanelResult(
                        sample_id=str(data["sample_id"]),
                        panel=tuple((str(e["model"]), e["answer"]) for e in data["panel"]),
                    )
                )
            except Exception as exc:
                raise SchemaError(str(exc), line=lineno) from exc
    return panels


# --- SFT export --------------------------------------------------------------

SFT_MODES = ("cot", "final_only")
DEFAULT_SFT_PROMPT = "{question}"


@dataclass(frozen=True)
class SftRecord:
    record_id: str
    image: str
    prompt: str
    target: str
    mode: str
    source_chain: str
    steps: int


def _boxed_final(answer: str) -> str:
    try:
        core = extract_boxed(answer)
    except NoBoxedAnswer:
        core = answer.strip()
    return f"\\boxed{{{core}}}"


def export_sft(
    chains: Sequence[QuestionChain],
    mode: str,
    prompt_template: str = DEFAULT_SFT_PROMPT,
) -> list[SftRecord]:
    """Chains as training records.

    ``cot``: one record per chain whose target walks every step in order
    ("Step k [LEVEL]: <question> -> <answer>" blocks) and ends with the
    terminal answer in a box. ``final_only``: the last sample's question and
    answer, verbatim.
    """
    if mode not in SFT_MODES:
        raise ValueError(f"unknown SFT mode {mode!r}")
    records: list[SftRecord] = []
    for chain in chains:
        if not chain.samples:
            raise EmptyChain(f"chain {chain.chain_id} has no samples")
        terminal = chain.terminal
        if mode == "final_only":
            records.append(
                SftRecord(
                    record_id=f"{chain.chain_id}:final_only",
                    image=chain.image,
                    prompt=terminal.question,
                    target=terminal.answer,
                    mode=mode,
                    source_chain=chain.chain_id,
                    steps=1,
                )
            )
            continue
        blocks = [
            f"Step {k} [{sample.level.label}]: {sample.question} → {sample.answer}"
            for k, sample in enumerate(chain.samples, start=1)
        ]
        target = "\n".join(blocks) + f"\nFinal answer: {_boxed_final(terminal.answer)}"
        records.append(
            SftRecord(
                record_id=f"{chain.chain_id}:cot",
                image=chain.image,
                prompt=prompt_template.format(question=terminal.question),
                target=target,
                mode=mode,
                source_chain=chain.chain_id,
                steps=len(chain.samples),
            )
        )
    return records


def write_sft_records(records: Sequence[SftRecord], path: str | Path) -> int:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with target.open("w", encoding="utf-8") as fh:
        for rec in records:
            record = {
                "record_id": rec.record_id,
                "image": rec.image,
                "prompt": rec.prompt,
                "target": rec.target,
                "mode": rec.mode,
                "source_chain": rec.source_chain,
                "steps": rec.steps,
            }
            fh.write(json.dumps(record, ensure_ascii=False, separators=(",", ":")) + "\n")
    return len(records)


# --- stratified sampling ------------------------------------------------------

def stratified_quotas(level_counts: Mapping[int, int], total: int) -> dict[int, int]:
    """Largest-remainder quotas proportional to the level distribution;

    quotas always sum exactly to ``total`` and each deviates from exact
    proportionality by less than one sample.
    """
    population = sum(level_counts.values())
    if population == 0:
        raise InsufficientPopulation("population is empty")
    exact = {lvl: total * count / population for lvl, count in level_counts.items()}
    quotas = {lvl: int(value) for lvl, value in exact.items()}
    shortfall = total - sum(quotas.values())
    remainders = sorted(
        level_counts, key=lambda lvl: (-(exact[lvl] - quotas[lvl]), lvl)
    )
    for lvl in remainders[:shortfall]:
        quotas[lvl] += 1
    return quotas


def stratified_sample(
    items: Sequence[DatasetItem], total: int, rng_seed: int
) -> list[DatasetItem]:
    """Proportional-by-level sample without replacement, deterministic under

    the seed. Output keeps the original order within each level, levels
    ascending.
    """
    if total > len(items):
        raise InsufficientPopulation(
            f"requested {total} samples from a population of {len(items)}"
        )
    by_level: dict[int, list[DatasetItem]] = {}
    for item in items:
        by_level.setdefault(int(item.level), []).append(item)
    quotas = stratified_quotas({lvl: len(group) for lvl, group in by_level.items()}, total)
    rng = random.Random(rng_seed)
    selected: list[DatasetItem] = []
    for lvl in sorted(by_level):
        group = by_level[lvl]
        picked = sorted(rng.sample(range(len(group)), quotas[lvl]))
        selected.extend(group[i] for i in picked)
    return selected
