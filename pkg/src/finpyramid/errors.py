"""Exception hierarchy shared across the pipeline.

Errors are grouped by the layer that raises them so callers can catch a
whole family (e.g. ``AgentError``) or a precise condition.
"""

from __future__ import annotations


class PipelineError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(PipelineError):
    """Invalid pipeline configuration; carries every violation found."""

    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class SeedFileError(PipelineError):
    """Seed-task file missing or malformed."""


# --- chain model ---

class ChainError(PipelineError):
    pass


class MonotonicityViolation(ChainError):
    """Appending a sample would break level/complexity ordering."""


class ImageMismatch(ChainError):
    """Sample image reference differs from the chain's image."""


class EmptyChain(ChainError):
    pass


# --- agent gateway ---

class AgentError(PipelineError):
    pass


class AgentTransportError(AgentError):
    """HTTP failure, timeout, or scripted-fixture miss after retries."""


class ChallengerProtocolError(AgentError):
    """Challenger reply unparseable or invalid after repair attempts."""


class MissingPlaceholder(AgentError):
    """Prompt template references a placeholder absent from the context."""


# --- verifier ---

class VerifierError(PipelineError):
    pass


class NoBoxedAnswer(VerifierError):
    """No well-formed \\boxed{...} occurrence in the text."""


class NoGroundTruth(VerifierError):
    """Terminal verification requested without a reference answer."""


class JudgeTransportError(VerifierError):
    """Judge-mode agent call failed."""


class JudgeVerdictError(VerifierError):
    """Judge reply did not contain a strict YES/NO verdict."""


# --- search engine ---

class SearchAborted(PipelineError):
    """Consecutive agent failures exceeded the configured cap."""


# --- dataset io ---

class SchemaError(PipelineError):
    """A persisted record violates the file schema; names the line."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class PanelMismatch(PipelineError):
    """Sample lacks a blind panel or panel size differs from declared."""


class InsufficientPopulation(PipelineError):
    """Requested sample size exceeds the population."""


# --- eval harness ---

class EmptyTraceSet(PipelineError):
    pass
