"""Answer extraction, normalization, and correctness judging.

Used both for terminal verification during search and by the evaluation
harness. Everything here is a pure function except judge mode, which calls
out through the agent gateway.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import NamedTuple, TYPE_CHECKING

from .errors import (
    AgentTransportError,
    JudgeTransportError,
    JudgeVerdictError,
    NoBoxedAnswer,
    NoGroundTruth,
)

if TYPE_CHECKING:
    from .agents import Agent, PromptTemplate
    from .chain import QuestionChain, SeedTask


@dataclass
class VerifierConfig:
    """How predicted answers are compared against references.

    ``judge`` mode delegates the verdict to an agent; it requires both the
    judge agent and its prompt template.
    """

    mode: str = "exact"  # exact | numeric | judge
    numeric_rel_tol: float = 1e-4
    judge_agent: "Agent | None" = None
    judge_template: "PromptTemplate | None" = None

    def __post_init__(self) -> None:
        if self.mode not in ("exact", "numeric", "judge"):
            raise ValueError(f"unknown verifier mode {self.mode!r}")
        if self.numeric_rel_tol <= 0:
            raise ValueError("numeric_rel_tol must be positive")
        if self.mode == "judge" and (self.judge_agent is None or self.judge_template is None):
            raise ValueError("judge mode requires a judge agent and template")


def extract_boxed(text: str) -> str:
    """Content of the last well-formed ``\\boxed{...}`` occurrence.

    Brace matching is balanced, so nested braces are preserved. Occurrences
    with unbalanced or missing braces are skipped; if none is well-formed the
    input counts as having no boxed answer.
    """
    starts = [m.start() for m in re.finditer(r"\\boxed", text)]
    for idx in reversed(starts):
        pos = idx + len("\\boxed")
        while pos < len(text) and text[pos].isspace():
            pos += 1
        if pos >= len(text) or text[pos] != "{":
            continue
        depth = 1
        pos += 1
        start = pos
        while pos < len(text):
            ch = text[pos]
            if ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0:
                    return text[start:pos]
            pos += 1
        # ran off the end: unbalanced, try an earlier occurrence
    raise NoBoxedAnswer(f"no \\boxed{{...}} occurrence in reply: {text[:80]!r}")


class NormalizedAnswer(NamedTuple):
    text: str
    unit: str | None


_CURRENCY = "$€£¥"
# plain / thousands-separated / scientific numerals, optionally signed
_NUMERIC_RE = re.compile(
    r"[+-]?(?:\d{1,3}(?:,\d{3})+|\d+)(?:\.\d+)?(?:[eE][+-]?\d+)?|[+-]?\.\d+"
)
_FRACTION_RE = re.compile(r"[+-]?\d+\s*/\s*\d+")


def _format_number(value: float) -> str:
    out = f"{value:.12g}"
    return "0" if out == "-0" else out


def _canonical_numeric(text: str) -> str | None:
    """Decimal form for fully-numeric text (fractions, thousands separators)."""
    if _FRACTION_RE.fullmatch(text):
        num, den = (part.strip() for part in text.split("/"))
        if int(den) == 0:
            return None
        return _format_number(int(num) / int(den))
    if _NUMERIC_RE.fullmatch(text):
        plain = text.replace(",", "")
        if re.fullmatch(r"[+-]?\d+", plain):
            return str(int(plain))
        value = float(plain)
        if not math.isfinite(value):
            return None
        return _format_number(value)
    return None


def normalize_answer_full(raw: str) -> NormalizedAnswer:
    """Canonical text plus the first stripped currency/percent symbol, if any.

    The textual strip phase (whitespace, case, trailing periods, edge
    symbols) runs to a fixpoint so normalization is idempotent even for
    stacked symbols like ``"$€5"`` or ``"5.%"``.
    """
    s = raw
    unit: str | None = None
    while True:
        before = s
        s = " ".join(s.strip().lower().split())
        s = s.rstrip(".").strip()
        if s and s[0] in _CURRENCY:
            unit = unit or s[0]
            s = s[1:]
        if s and s[-1] == "%":
            unit = unit or "%"
            s = s[:-1]
        elif s and s[-1] in _CURRENCY:
            unit = unit or s[-1]
            s = s[:-1]
        if s == before:
            break
    numeric = _canonical_numeric(s)
    return NormalizedAnswer(numeric if numeric is not None else s, unit)


def normalize_answer(raw: str) -> str:
    """Canonical comparison text; idempotent. Non-numeric text passes through

    after whitespace/case/punctuation normalization.
    """
    return normalize_answer_full(raw).text


def reference_answer(text: str) -> str:
    """Final answer carried by a stored reference reply: its boxed core when

    present, otherwise the whole text.
    """
    try:
        return extract_boxed(text)
    except NoBoxedAnswer:
        return text


def parse_number(text: str) -> float | None:
    canonical = normalize_answer(text)
    if _NUMERIC_RE.fullmatch(canonical):
        try:
            return float(canonical.replace(",", ""))
        except ValueError:
            return None
    return None


def judge_correct(predicted: str, truth: str, config: VerifierConfig) -> bool:
    """Compare a predicted answer against the reference under ``config.mode``.

    numeric mode uses the hybrid tolerance |p - t| <= tol * max(1, |t|), so
    references at or below 1 in magnitude get an absolute tolerance; inputs
    that do not both parse as numbers fall back to exact comparison.
    """
    if config.mode == "judge":
        return _judge_via_agent(predicted, truth, config)
    if config.mode == "numeric":
        p = parse_number(predicted)
        t = parse_number(truth)
        if p is not None and t is not None:
            return abs(p - t) <= config.numeric_rel_tol * max(1.0, abs(t))
    return normalize_answer(predicted) == normalize_answer(truth)


def _judge_via_agent(predicted: str, truth: str, config: VerifierConfig) -> bool:
    from .agents import render_prompt  # local import to avoid a cycle

    assert config.judge_agent is not None and config.judge_template is not None
    query = (
        f"Predicted answer: {predicted}\n"
        f"Reference answer: {truth if truth else '(none provided)'}"
    )
    messages = render_prompt(config.judge_template, {"question": query})
    try:
        reply = config.judge_agent.complete(
            messages,
            context={"task_id": "__judge__", "prefix_len": 0, "question": query},
        )
    except AgentTransportError as exc:
        raise JudgeTransportError(str(exc)) from exc
    verdict = reply.strip().upper()
    match = re.search(r"\b(YES|NO)\b", verdict)
    if match is None:
        raise JudgeVerdictError(f"judge reply is not a strict YES/NO: {reply!r}")
    return match.group(1) == "YES"


def terminal_verify(
    chain: "QuestionChain",
    seed: "SeedTask",
    config: VerifierConfig,
) -> bool:
    """Verdict on the chain's terminal answer against the seed ground truth.

    Synthesis-time extraction is forgiving: when the reply carries no boxed
    answer the whole normalized reply is judged instead (the evaluation
    harness, by contrast, counts a missing box as incorrect).
    """
    if not chain.samples:
        raise ValueError("chain has no terminal sample")
    raw = chain.samples[-1].answer
    try:
        predicted = extract_boxed(raw)
    except NoBoxedAnswer:
        predicted = raw
    truth = seed.ground_truth
    if truth is None:
        if config.mode != "judge":
            raise NoGroundTruth(
                f"seed {seed.task_id} has no ground truth and verifier mode is"
                f" {config.mode!r}"
            )
        return _judge_via_agent(predicted, "", config)
    return judge_correct(predicted, truth, config)
