"""Adversarial synthesis and hierarchical evaluation of pyramid-structured

financial question chains.
"""

__version__ = "0.1.0"

from .chain import (
    ComplexityDegree,
    ProvenanceRecord,
    PyramidLevel,
    QuestionChain,
    Sample,
    SeedTask,
    append_sample,
    validate_chain,
)
from .search import SearchConfig, SearchTree, run_search
from .verify import VerifierConfig, extract_boxed, judge_correct, normalize_answer

__all__ = [
    "ComplexityDegree",
    "ProvenanceRecord",
    "PyramidLevel",
    "QuestionChain",
    "Sample",
    "SeedTask",
    "SearchConfig",
    "SearchTree",
    "VerifierConfig",
    "append_sample",
    "extract_boxed",
    "judge_correct",
    "normalize_answer",
    "run_search",
    "validate_chain",
    "__version__",
]
