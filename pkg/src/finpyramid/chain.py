"""Domain model for pyramid-structured question chains.

A chain is an ordered list of question/answer samples over a single image.
Levels are non-decreasing along the chain, complexity is non-decreasing
within a run of equal levels, and a finished chain must be at least as long
as the level of its final sample. All types are immutable values; the only
sanctioned mutation path is :func:`append_sample`, which returns a new chain.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Any, Iterable, Mapping

from .errors import ImageMismatch, MonotonicityViolation

ENGINE_VERSION = "0.1.0"


class PyramidLevel(IntEnum):
    """Capability tiers, from basic perception up to decision support."""

    PP = 1  # Perception
    DE = 2  # Data Extraction
    CA = 3  # Calculation Analysis
    PR = 4  # Pattern Recognition
    LR = 5  # Logical Reasoning
    DS = 6  # Decision Support

    @property
    def label(self) -> str:
        return self.name


class ComplexityDegree(IntEnum):
    """Within-level difficulty rating; values outside 1..5 are unrepresentable."""

    D1 = 1
    D2 = 2
    D3 = 3
    D4 = 4
    D5 = 5


LEVEL_LABELS = [lvl.label for lvl in PyramidLevel]


@dataclass(frozen=True)
class Sample:
    """One (image, question, answer) unit with pyramid metadata.

    ``reward`` defaults to 0 and is only set by search backpropagation or an
    explicit import; it is untrusted until then.
    """

    sample_id: str
    image: str
    question: str
    answer: str
    level: PyramidLevel
    complexity: ComplexityDegree
    reward: float = 0.0
    extra: Mapping[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "level", PyramidLevel(self.level))
        object.__setattr__(self, "complexity", ComplexityDegree(self.complexity))
        if not self.question:
            raise ValueError(f"sample {self.sample_id}: question is empty")
        if not self.answer:
            raise ValueError(f"sample {self.sample_id}: answer is empty")
        if not 0.0 <= self.reward <= 1.0:
            raise ValueError(
                f"sample {self.sample_id}: reward {self.reward} outside [0, 1]"
            )


@dataclass(frozen=True)
class ProvenanceRecord:
    """How a chain was produced; populated in full at creation time."""

    challenger_model: str
    solver_model: str
    rng_seed: int
    created_at: str
    engine_version: str = ENGINE_VERSION

    def to_dict(self) -> dict[str, Any]:
        return {
            "challenger_model": self.challenger_model,
            "solver_model": self.solver_model,
            "rng_seed": self.rng_seed,
            "created_at": self.created_at,
            "engine_version": self.engine_version,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ProvenanceRecord":
        return cls(
            challenger_model=str(data["challenger_model"]),
            solver_model=str(data["solver_model"]),
            rng_seed=int(data["rng_seed"]),
            created_at=str(data["created_at"]),
            engine_version=str(data.get("engine_version", ENGINE_VERSION)),
        )


@dataclass(frozen=True)
class SeedTask:
    """Input unit for the search: one image plus its catalogue metadata.

    ``ground_truth`` is the reference answer for the terminal question when
    known; vocabulary membership of ``theme``/``image_type`` is checked at
    seed-file load time against the configured closed lists.
    """

    task_id: str
    image: str
    theme: str
    image_type: str
    ground_truth: str | None = None
    target_level: PyramidLevel = PyramidLevel.DS

    def __post_init__(self) -> None:
        object.__setattr__(self, "target_level", PyramidLevel(self.target_level))


@dataclass(frozen=True)
class QuestionChain:
    """Ordered samples over one image, ending at (or working toward) a target level."""

    chain_id: str
    task_id: str
    image: str
    theme: str
    image_type: str
    samples: tuple[Sample, ...]
    terminal_reward: float
    provenance: ProvenanceRecord
    extra: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "samples", tuple(self.samples))

    @property
    def terminal(self) -> Sample:
        return self.samples[-1]

    def __len__(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class Violation:
    """One broken rule, locating the offending sample index (or index pair)."""

    rule: str
    message: str
    index: int | None = None


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...]

    @property
    def ok(self) -> bool:
        return not self.violations

    def rules(self) -> set[str]:
        return {v.rule for v in self.violations}


def _check_ordering(prev: Sample, new: Sample) -> str | None:
    """Return a violation message if ``new`` may not follow ``prev``, else None.

    Complexity is only constrained within a run of equal levels; it may reset
    when the level strictly increases.
    """
    if new.level < prev.level:
        return f"level decreases from {int(prev.level)} to {int(new.level)}"
    if new.level == prev.level and new.complexity < prev.complexity:
        return (
            f"complexity decreases from {int(prev.complexity)} to"
            f" {int(new.complexity)} within level {int(new.level)}"
        )
    return None


def validate_chain(chain: QuestionChain) -> ValidationReport:
    """Check every structural invariant; reports violations, never raises."""
    violations: list[Violation] = []
    if not chain.samples:
        return ValidationReport((Violation("empty_chain", "chain has no samples", None),))

    for i, sample in enumerate(chain.samples):
        if sample.image != chain.image:
            violations.append(
                Violation(
                    "image_mismatch",
                    f"sample {i} image {sample.image!r} differs from chain image"
                    f" {chain.image!r}",
                    i,
                )
            )

    for i in range(1, len(chain.samples)):
        msg = _check_ordering(chain.samples[i - 1], chain.samples[i])
        if msg is not None:
            rule = "level_monotonicity" if "level decreases" in msg else "complexity_monotonicity"
            violations.append(Violation(rule, f"{msg} at index {i}", i))

    n = len(chain.samples)
    terminal_level = int(chain.samples[-1].level)
    if n < terminal_level:
        violations.append(
            Violation(
                "length_below_terminal_level",
                f"chain length {n} is below terminal level {terminal_level}"
                " (n >= l breached)",
                n - 1,
            )
        )

    if not 0.0 <= chain.terminal_reward <= 1.0:
        violations.append(
            Violation(
                "terminal_reward_range",
                f"terminal reward {chain.terminal_reward} outside [0, 1]",
                None,
            )
        )
    return ValidationReport(tuple(violations))


def append_sample(chain: QuestionChain, sample: Sample) -> QuestionChain:
    """Return a new chain with ``sample`` appended; the input is unmodified.

    Raises:
        MonotonicityViolation: level lower than the tail, or equal with
            lower complexity.
        ImageMismatch: sample references a different image.
    """
    if sample.image != chain.image:
        raise ImageMismatch(
            f"sample image {sample.image!r} does not match chain image {chain.image!r}"
        )
    if chain.samples:
        msg = _check_ordering(chain.samples[-1], sample)
        if msg is not None:
            raise MonotonicityViolation(msg)
    return replace(chain, samples=chain.samples + (sample,))


# --- serialization -------------------------------------------------------
#
# Chain JSONL contract (one chain per line). Field names and their order are
# stable; unknown fields are preserved on read and rewritten on write.

_CHAIN_FIELDS = ("chain_id", "task_id", "image", "theme", "image_type",
                 "terminal_reward", "provenance", "samples")
_SAMPLE_FIELDS = ("sample_id", "level", "complexity", "question", "answer", "reward")


def sample_to_dict(sample: Sample) -> dict[str, Any]:
    record: dict[str, Any] = {
        "sample_id": sample.sample_id,
        "level": int(sample.level),
        "complexity": int(sample.complexity),
        "question": sample.question,
        "answer": sample.answer,
        "reward": sample.reward,
    }
    for key in sorted(sample.extra):
        record[key] = sample.extra[key]
    return record


def sample_from_dict(data: Mapping[str, Any], image: str) -> Sample:
    extra = {k: v for k, v in data.items() if k not in _SAMPLE_FIELDS}
    return Sample(
        sample_id=str(data["sample_id"]),
        image=image,
        question=str(data["question"]),
        answer=str(data["answer"]),
        level=PyramidLevel(int(data["level"])),
        complexity=ComplexityDegree(int(data["complexity"])),
        reward=float(data["reward"]),
        extra=extra,
    )


def chain_to_dict(chain: QuestionChain) -> dict[str, Any]:
    record: dict[str, Any] = {
        "chain_id": chain.chain_id,
        "task_id": chain.task_id,
        "image": chain.image,
        "theme": chain.theme,
        "image_type": chain.image_type,
        "terminal_reward": chain.terminal_reward,
        "provenance": chain.provenance.to_dict(),
        "samples": [sample_to_dict(s) for s in chain.samples],
    }
    for key in sorted(chain.extra):
        record[key] = chain.extra[key]
    return record


def chain_from_dict(data: Mapping[str, Any]) -> QuestionChain:
    image = str(data["image"])
    extra = {k: v for k, v in data.items() if k not in _CHAIN_FIELDS}
    return QuestionChain(
        chain_id=str(data["chain_id"]),
        task_id=str(data["task_id"]),
        image=image,
        theme=str(data["theme"]),
        image_type=str(data["image_type"]),
        samples=tuple(sample_from_dict(s, image) for s in data["samples"]),
        terminal_reward=float(data["terminal_reward"]),
        provenance=ProvenanceRecord.from_dict(data["provenance"]),
        extra=extra,
    )


def chain_from_samples(
    chain_id: str,
    seed: SeedTask,
    samples: Iterable[Sample],
    terminal_reward: float,
    provenance: ProvenanceRecord,
) -> QuestionChain:
    return QuestionChain(
        chain_id=chain_id,
        task_id=seed.task_id,
        image=seed.image,
        theme=seed.theme,
        image_type=seed.image_type,
        samples=tuple(samples),
        terminal_reward=terminal_reward,
        provenance=provenance,
    )
