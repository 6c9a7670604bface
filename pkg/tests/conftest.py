"""Shared fixtures: scripted agent worlds and chain builders."""

from __future__ import annotations

import json
from pathlib import Path

import pytest

from finpyramid.agents import Agent, AgentEndpoint, ScriptedBackend
from finpyramid.chain import (
    ComplexityDegree,
    ProvenanceRecord,
    PyramidLevel,
    QuestionChain,
    Sample,
    SeedTask,
)

PROVENANCE = ProvenanceRecord(
    challenger_model="scripted-challenger",
    solver_model="scripted-solver",
    rng_seed=7,
    created_at="2026-01-01T00:00:00Z",
)


def make_sample(
    sample_id: str = "s1",
    image: str = "img.png",
    question: str = "q?",
    answer: str = "a",
    level: int = 1,
    complexity: int = 1,
    reward: float = 0.0,
) -> Sample:
    return Sample(
        sample_id=sample_id,
        image=image,
        question=question,
        answer=answer,
        level=PyramidLevel(level),
        complexity=ComplexityDegree(complexity),
        reward=reward,
    )


def make_chain(
    levels_complexities,
    chain_id: str = "c1",
    task_id: str = "t1",
    image: str = "img.png",
    theme: str = "stocks",
    image_type: str = "line_chart",
    terminal_reward: float = 1.0,
    rewards=None,
) -> QuestionChain:
    samples = []
    for i, (level, complexity) in enumerate(levels_complexities):
        samples.append(
            make_sample(
                sample_id=f"{task_id}/s{i}",
                image=image,
                question=f"question {i}?",
                answer=f"answer {i}",
                level=level,
                complexity=complexity,
                reward=rewards[i] if rewards else 1.0,
            )
        )
    return QuestionChain(
        chain_id=chain_id,
        task_id=task_id,
        image=image,
        theme=theme,
        image_type=image_type,
        samples=tuple(samples),
        terminal_reward=terminal_reward,
        provenance=PROVENANCE,
    )


def scripted_agent(rows, model_name: str = "scripted") -> Agent:
    endpoint = AgentEndpoint(base_url="scripted:<inline>", model_name=model_name)
    return Agent(endpoint, ScriptedBackend(rows=rows))


# --- the branching "oracle" world: 8 enumerable content paths ---------------
#
# task t1, target level 3. Two challenger variants at every expansion point
# give a 2x2x2 question tree; terminal correctness is fixed per terminal
# question. ORACLE_TRUTH maps each content path to its terminal verdict.

ORACLE_TRUTH = {
    ("Q1a", "Q2aa", "Q3aaa"): True,
    ("Q1a", "Q2aa", "Q3aab"): False,
    ("Q1a", "Q2ab", "Q3aba"): True,
    ("Q1a", "Q2ab", "Q3abb"): True,
    ("Q1b", "Q2ba", "Q3baa"): False,
    ("Q1b", "Q2ba", "Q3bab"): False,
    ("Q1b", "Q2bb", "Q3bba"): True,
    ("Q1b", "Q2bb", "Q3bbb"): False,
}


def oracle_world_rows():
    challenger_rows = []

    def proposal(prefix_len, tail, variant, question, level, complexity):
        row = {
            "task_id": "t1",
            "prefix_len": prefix_len,
            "variant": variant,
            "proposal": {"question": question, "level": level,
                         "complexity": complexity, "rationale": "r"},
        }
        if tail is not None:
            row["prefix_tail"] = tail
        return row

    challenger_rows.append(proposal(0, None, 0, "Q1a", 1, 1))
    challenger_rows.append(proposal(0, None, 1, "Q1b", 1, 2))
    for tail, c1, c2 in (("Q1a", "Q2aa", "Q2ab"), ("Q1b", "Q2ba", "Q2bb")):
        challenger_rows.append(proposal(1, tail, 0, c1, 2, 1))
        challenger_rows.append(proposal(1, tail, 1, c2, 2, 2))
    terminals = {
        "Q2aa": ("Q3aaa", "Q3aab"),
        "Q2ab": ("Q3aba", "Q3abb"),
        "Q2ba": ("Q3baa", "Q3bab"),
        "Q2bb": ("Q3bba", "Q3bbb"),
    }
    for tail, (t0, t1) in terminals.items():
        challenger_rows.append(proposal(2, tail, 0, t0, 3, 1))
        challenger_rows.append(proposal(2, tail, 1, t1, 3, 2))

    solver_rows = []
    for question in ("Q1a", "Q1b", "Q2aa", "Q2ab", "Q2ba", "Q2bb"):
        solver_rows.append(
            {"task_id": "t1", "question": question, "answer": f"ans-{question}"}
        )
    for path, correct in ORACLE_TRUTH.items():
        terminal_q = path[-1]
        answer = "\\boxed{OK}" if correct else "\\boxed{WRONG}"
        solver_rows.append({"task_id": "t1", "question": terminal_q, "answer": answer})
    return challenger_rows, solver_rows


@pytest.fixture
def oracle_world():
    challenger_rows, solver_rows = oracle_world_rows()
    seed = SeedTask(
        task_id="t1",
        image="img.png",
        theme="stocks",
        image_type="line_chart",
        ground_truth="OK",
        target_level=PyramidLevel.CA,
    )
    return {
        "seed": seed,
        "challenger": scripted_agent(challenger_rows, "scripted-challenger"),
        "solver": scripted_agent(solver_rows, "scripted-solver"),
    }


def write_jsonl(path: Path, rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")
    return path


@pytest.fixture
def oracle_world_files(tmp_path):
    """The oracle world written to fixture files, plus a pipeline config."""
    challenger_rows, solver_rows = oracle_world_rows()
    challenger_path = write_jsonl(tmp_path / "challenger.jsonl", challenger_rows)
    solver_path = write_jsonl(tmp_path / "solver.jsonl", solver_rows)
    seeds_path = write_jsonl(
        tmp_path / "seeds.jsonl",
        [{
            "task_id": "t1",
            "image": "img.png",
            "theme": "stocks",
            "image_type": "line_chart",
            "ground_truth": "OK",
            "target_level": 3,
        }],
    )
    out_dir = tmp_path / "out"
    config = {
        "seeds_path": str(seeds_path),
        "output_dir": str(out_dir),
        "run_timestamp": "2026-01-01T00:00:00Z",
        "search": {
            "rollout_budget": 24,
            "rng_seed": 7,
            "explore_prob": 0.5,
            "max_depth": 6,
            "reward_threshold": 0.0,
            "checkpoint_every": 5,
        },
        "challenger": {"backend": "scripted", "fixture_path": str(challenger_path),
                       "model_name": "scripted-challenger"},
        "solver": {"backend": "scripted", "fixture_path": str(solver_path),
                   "model_name": "scripted-solver"},
        "verifier": {"mode": "exact"},
    }
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps(config, indent=2), encoding="utf-8")
    return {
        "config_path": config_path,
        "config": config,
        "out_dir": out_dir,
        "tmp_path": tmp_path,
    }
