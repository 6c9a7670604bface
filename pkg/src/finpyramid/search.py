"""Adversarial tree search that grows question chains over one seed image.

A challenger agent proposes progressively harder questions and a solver
answers them; the two interact inside a visit-count tree. Each descent step
flips a Bernoulli coin between exploring (requesting a brand-new follow-up
question at the current node) and exploiting (descending to the child with
the best upper-confidence score). A rollout ends when a question at the
seed's target level is answered, or the depth limit is hit; the terminal
verdict is backpropagated as +1 visit (and +1 success on a correct answer)
to every node on the path, so a node's reward is its empirical success rate.

One tree is owned by exactly one worker; a fixed rng seed plus scripted
agents makes whole runs byte-reproducible, including across checkpoint
interrupts.
"""

from __future__ import annotations

import json
import logging
import math
import random
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

from .agents import (
    Agent,
    ChallengerProposal,
    PromptTemplate,
    DEFAULT_CHALLENGER_TEMPLATE,
    DEFAULT_SOLVER_TEMPLATE,
    answer_question,
    propose_question,
)
from .chain import (
    ProvenanceRecord,
    PyramidLevel,
    QuestionChain,
    Sample,
    SeedTask,
    chain_from_samples,
    sample_from_dict,
    sample_to_dict,
    validate_chain,
)
from .errors import (
    AgentError,
    ChallengerProtocolError,
    JudgeTransportError,
    JudgeVerdictError,
    SearchAborted,
)
from .verify import VerifierConfig, terminal_verify

# failures that abort one rollout (consuming budget) without killing the search
_ROLLOUT_FAILURES = (AgentError, JudgeTransportError, JudgeVerdictError)

logger = logging.getLogger(__name__)

EXPLORE = "explore"
EXPLOIT = "exploit"

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class SearchConfig:
    """Search knobs; every numeric range is enforced at construction."""

    rollout_budget: int
    rng_seed: int = 0
    uct_constant: float = math.sqrt(2)
    explore_prob: float = 0.3
    max_depth: int = 16
    reward_threshold: float = 1.0
    checkpoint_every: int = 10
    repair_attempts: int = 3
    max_consecutive_failures: int = 10

    def __post_init__(self) -> None:
        if self.rollout_budget < 0:
            raise ValueError("rollout_budget must be non-negative")
        if self.uct_constant <= 0:
            raise ValueError("uct_constant must be positive")
        if not 0.0 <= self.explore_prob <= 1.0:
            raise ValueError("explore_prob must be in [0, 1]")
        if self.max_depth <= 0:
            raise ValueError("max_depth must be positive")
        if not 0.0 <= self.reward_threshold <= 1.0:
            raise ValueError("reward_threshold must be in [0, 1]")
        if self.checkpoint_every <= 0:
            raise ValueError("checkpoint_every must be positive")
        if self.repair_attempts < 0:
            raise ValueError("repair_attempts must be non-negative")

    def to_dict(self) -> dict:
        return {
            "rollout_budget": self.rollout_budget,
            "rng_seed": self.rng_seed,
            "uct_constant": self.uct_constant,
            "explore_prob": self.explore_prob,
            "max_depth": self.max_depth,
            "reward_threshold": self.reward_threshold,
            "checkpoint_every": self.checkpoint_every,
            "repair_attempts": self.repair_attempts,
            "max_consecutive_failures": self.max_consecutive_failures,
        }


@dataclass
class TreeNode:
    """One question node; the root is a sentinel with no sample."""

    node_id: str
    parent_id: str | None
    sample: Sample | None
    children: list[str] = field(default_factory=list)
    visits: int = 0
    successes: int = 0

    @property
    def reward(self) -> float:
        """Empirical success rate; 0 before the first completed rollout."""
        return self.successes / self.visits if self.visits else 0.0


@dataclass
class RolloutOutcome:
    """One completed root-to-terminal traversal."""

    path: list[str]  # node ids, root first
    terminal_correct: bool
    chain: QuestionChain


class SearchTree:
    """Per-seed search state: an id-keyed node store under a sentinel root."""

    def __init__(self, seed: SeedTask, provenance: ProvenanceRecord):
        self.seed = seed
        self.provenance = provenance
        self.root_id = "n0"
        self.nodes: dict[str, TreeNode] = {
            self.root_id: TreeNode(node_id=self.root_id, parent_id=None, sample=None)
        }
        self._next_index = 1
        self.rollouts_done = 0
        self.consecutive_failures = 0

    @property
    def root(self) -> TreeNode:
        return self.nodes[self.root_id]

    def node(self, node_id: str) -> TreeNode:
        return self.nodes[node_id]

    def children_of(self, node: TreeNode) -> list[TreeNode]:
        return [self.nodes[c] for c in node.children]

    def is_terminal(self, node: TreeNode) -> bool:
        return node.sample is not None and node.sample.level >= self.seed.target_level

    def path_samples(self, path: Sequence[str]) -> list[Sample]:
        return [self.nodes[nid].sample for nid in path if self.nodes[nid].sample is not None]

    def add_child(self, parent: TreeNode, sample: Sample) -> TreeNode:
        node = TreeNode(node_id=f"n{self._next_index}", parent_id=parent.node_id, sample=sample)
        self._next_index += 1
        self.nodes[node.node_id] = node
        parent.children.append(node.node_id)
        return node

    def next_sample_id(self) -> str:
        return f"{self.seed.task_id}/n{self._next_index}"


def uct_score(node: TreeNode, parent_visits: int, c: float) -> float:
    """Mean success plus the exploration bonus c*sqrt(ln(parent)/visits).

    Unvisited nodes score +inf so they are tried first.
    """
    if node.visits == 0:
        return math.inf
    return node.successes / node.visits + c * math.sqrt(
        math.log(parent_visits) / node.visits
    )


def _best_child(tree: SearchTree, node: TreeNode, c: float) -> TreeNode:
    # strict > keeps the lowest-index child on ties; unvisited children score
    # +inf before the parent count is ever consulted, so log(0) is unreachable
    best = None
    best_score = -math.inf
    for child in tree.children_of(node):
        score = uct_score(child, node.visits, c)
        if score > best_score:
            best = child
            best_score = score
    assert best is not None
    return best


def select(
    tree: SearchTree, rng: random.Random, config: SearchConfig
) -> tuple[list[str], str]:
    """Descend from the root, flipping the explore/exploit coin at each step.

    Returns the path (node ids, root first) and the action at its tail:
    ``explore`` means a new child question should be created there;
    ``exploit`` means the descent reached a terminal or depth-limited node.
    """
    path = [tree.root_id]
    while True:
        node = tree.nodes[path[-1]]
        depth = len(path) - 1
        if tree.is_terminal(node) or depth >= config.max_depth:
            return path, EXPLOIT
        if not node.children:
            return path, EXPLORE
        if rng.random() < config.explore_prob:
            return path, EXPLORE
        path.append(_best_child(tree, node, config.uct_constant).node_id)


def _proposal_violation(
    proposal: ChallengerProposal,
    prefix: Sequence[Sample],
    position: int,
    target_level: PyramidLevel,
) -> str | None:
    """Why the proposal may not extend the prefix at this 1-based position.

    Beyond plain level/complexity monotonicity: proposals above the target
    level are rejected, a chain must open at level 1, and a target-level
    question may only arrive once the chain is long enough to satisfy the
    finished-chain rule (length >= terminal level).
    """
    if proposal.level > target_level:
        return (
            f"proposed level {int(proposal.level)} exceeds the target level"
            f" {int(target_level)}"
        )
    if not prefix:
        if proposal.level != PyramidLevel.PP:
            return f"the first question must be level 1, got level {int(proposal.level)}"
        return None
    tail = prefix[-1]
    if proposal.level < tail.level:
        return (
            f"proposed level {int(proposal.level)} is below the current level"
            f" {int(tail.level)}"
        )
    if proposal.level == tail.level and proposal.complexity < tail.complexity:
        return (
            f"proposed complexity {int(proposal.complexity)} is below the current"
            f" complexity {int(tail.complexity)} at level {int(tail.level)}"
        )
    if proposal.level == target_level and position < int(target_level):
        return (
            f"a level-{int(target_level)} question at step {position} would leave"
            f" the chain shorter than its terminal level"
        )
    return None


def expand(
    tree: SearchTree,
    path: Sequence[str],
    challenger: Agent,
    solver: Agent,
    seed: SeedTask,
    config: SearchConfig,
    challenger_template: PromptTemplate = DEFAULT_CHALLENGER_TEMPLATE,
    solver_template: PromptTemplate = DEFAULT_SOLVER_TEMPLATE,
) -> TreeNode:
    """Ask the challenger for a new question at the path tail, have the

    solver answer it, and attach the resulting node (visits = successes = 0).
    Invalid proposals are re-requested up to ``config.repair_attempts`` times
    with the violation named in the prompt, then the rollout aborts.
    """
    parent = tree.nodes[path[-1]]
    if tree.is_terminal(parent):
        raise ValueError("cannot expand a terminal node")
    if len(path) - 1 >= config.max_depth:
        raise ValueError("cannot expand beyond the depth limit")
    prefix = tree.path_samples(path)
    siblings = [child.sample.question for child in tree.children_of(parent)]
    position = len(prefix) + 1
    violation: str | None = None
    proposal: ChallengerProposal | None = None
    for attempt in range(config.repair_attempts + 1):
        candidate = propose_question(
            challenger,
            seed.image,
            prefix,
            seed.target_level,
            challenger_template,
            task_id=seed.task_id,
            sibling_questions=siblings,
            attempt=attempt,
            violation=violation,
        )
        violation = _proposal_violation(candidate, prefix, position, seed.target_level)
        if violation is None:
            proposal = candidate
            break
        logger.debug(
            "task %s: proposal rejected at depth %d (attempt %d): %s",
            seed.task_id, position, attempt, violation,
        )
    if proposal is None:
        raise ChallengerProtocolError(
            f"task {seed.task_id}: no valid proposal after"
            f" {config.repair_attempts + 1} attempts; last violation: {violation}"
        )
    answer = answer_question(
        solver,
        seed.image,
        proposal.question,
        prefix,
        solver_template,
        task_id=seed.task_id,
    )
    sample = Sample(
        sample_id=tree.next_sample_id(),
        image=seed.image,
        question=proposal.question,
        answer=answer,
        level=proposal.level,
        complexity=proposal.complexity,
    )
    return tree.add_child(parent, sample)


def rollout(
    tree: SearchTree,
    seed: SeedTask,
    challenger: Agent,
    solver: Agent,
    verifier: VerifierConfig,
    rng: random.Random,
    config: SearchConfig,
    challenger_template: PromptTemplate = DEFAULT_CHALLENGER_TEMPLATE,
    solver_template: PromptTemplate = DEFAULT_SOLVER_TEMPLATE,
) -> RolloutOutcome:
    """One traversal: select through the existing tree, then expand until the

    target level is answered or the depth limit is reached. The terminal
    verdict is false when the depth limit cut the path short.
    """
    path, action = select(tree, rng, config)
    if action == EXPLORE:
        while True:
            node = expand(
                tree, path, challenger, solver, seed, config,
                challenger_template, solver_template,
            )
            path = list(path) + [node.node_id]
            if tree.is_terminal(node) or len(path) - 1 >= config.max_depth:
                break
    path = list(path)
    samples = tree.path_samples(path)
    terminal_node = tree.nodes[path[-1]]
    chain = chain_from_samples(
        chain_id=f"{seed.task_id}/{terminal_node.node_id}",
        seed=seed,
        samples=samples,
        terminal_reward=0.0,
        provenance=tree.provenance,
    )
    terminal_correct = bool(
        tree.is_terminal(terminal_node) and terminal_verify(chain, seed, verifier)
    )
    return RolloutOutcome(path=path, terminal_correct=terminal_correct, chain=chain)


def backpropagate(tree: SearchTree, outcome: RolloutOutcome) -> None:
    """+1 visit on every path node, +1 success when the terminal was correct."""
    for node_id in outcome.path:
        node = tree.nodes[node_id]
        node.visits += 1
        if outcome.terminal_correct:
            node.successes += 1


def extract_chains(tree: SearchTree, reward_threshold: float) -> list[QuestionChain]:
    """One chain per root-to-terminal path, in depth-first child order.

    Sample rewards are the nodes' empirical success rates; a chain is kept
    only when the minimum reward along its path meets the threshold. Every
    returned chain satisfies the chain-model invariants.
    """
    chains: list[QuestionChain] = []
    stack = [(tree.root_id, [])]
    while stack:
        node_id, trail = stack.pop()
        node = tree.nodes[node_id]
        trail = trail + [node] if node.sample is not None else trail
        if tree.is_terminal(node):
            rewards = [n.reward for n in trail]
            if min(rewards) < reward_threshold:
                continue
            samples = tuple(
                replace(n.sample, reward=n.reward) for n in trail
            )
            chain = chain_from_samples(
                chain_id=f"{tree.seed.task_id}/{node.node_id}",
                seed=tree.seed,
                samples=samples,
                terminal_reward=node.reward,
                provenance=tree.provenance,
            )
            report = validate_chain(chain)
            if not report.ok:  # engine guards make this unreachable
                raise AssertionError(
                    f"extracted chain {chain.chain_id} violates invariants:"
                    f" {[v.message for v in report.violations]}"
                )
            chains.append(chain)
            continue
        # push in reverse so the lowest child index is visited first
        for child_id in reversed(node.children):
            stack.append((child_id, trail))
    return chains


# --- checkpointing ----------------------------------------------------------

def save_checkpoint(
    tree: SearchTree, rng: random.Random, config: SearchConfig, path: str | Path
) -> None:
    """Full tree, rng state, and config echo; resume reproduces the exact

    continuation.
    """
    doc = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "task_id": tree.seed.task_id,
        "target_level": int(tree.seed.target_level),
        "config": config.to_dict(),
        "provenance": tree.provenance.to_dict(),
        "rollouts_done": tree.rollouts_done,
        "consecutive_failures": tree.consecutive_failures,
        "next_node_index": tree._next_index,
        "root_id": tree.root_id,
        "rng_state": _rng_state_to_json(rng.getstate()),
        "nodes": [
            {
                "node_id": node.node_id,
                "parent_id": node.parent_id,
                "children": node.children,
                "visits": node.visits,
                "successes": node.successes,
                "sample": sample_to_dict(node.sample) if node.sample else None,
            }
            for node in tree.nodes.values()
        ],
    }
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = target.with_suffix(target.suffix + ".tmp")
    tmp.write_text(json.dumps(doc, ensure_ascii=False), encoding="utf-8")
    tmp.replace(target)


def load_checkpoint(
    path: str | Path, seed: SeedTask
) -> tuple[SearchTree, random.Random]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format in {path}")
    if doc["task_id"] != seed.task_id:
        raise ValueError(
            f"checkpoint {path} belongs to task {doc['task_id']!r}, not"
            f" {seed.task_id!r}"
        )
    tree = SearchTree(seed, ProvenanceRecord.from_dict(doc["provenance"]))
    tree.nodes = {}
    for rec in doc["nodes"]:
        sample = sample_from_dict(rec["sample"], seed.image) if rec["sample"] else None
        tree.nodes[rec["node_id"]] = TreeNode(
            node_id=rec["node_id"],
            parent_id=rec["parent_id"],
            sample=sample,
            children=list(rec["children"]),
            visits=int(rec["visits"]),
            successes=int(rec["successes"]),
        )
    tree.root_id = doc["root_id"]
    tree._next_index = int(doc["next_node_index"])
    tree.rollouts_done = int(doc["rollouts_done"])
    tree.consecutive_failures = int(doc["consecutive_failures"])
    rng = random.Random()
    rng.setstate(_rng_state_from_json(doc["rng_state"]))
    return tree, rng


def _rng_state_to_json(state) -> list:
    version, internal, gauss_next = state
    return [version, list(internal), gauss_next]


def _rng_state_from_json(data) -> tuple:
    version, internal, gauss_next = data
    return (version, tuple(internal), gauss_next)


# --- top-level driver -------------------------------------------------------

def run_search(
    seed: SeedTask,
    challenger: Agent,
    solver: Agent,
    verifier: VerifierConfig,
    config: SearchConfig,
    *,
    provenance: ProvenanceRecord | None = None,
    checkpoint_path: str | Path | None = None,
    resume: bool = False,
    stop_after: int | None = None,
    on_outcome: Callable[[RolloutOutcome], None] | None = None,
    challenger_template: PromptTemplate = DEFAULT_CHALLENGER_TEMPLATE,
    solver_template: PromptTemplate = DEFAULT_SOLVER_TEMPLATE,
) -> list[QuestionChain]:
    """Run exactly ``config.rollout_budget`` rollouts (aborted ones count)

    and return the surviving chains. An aborted rollout leaves all visit
    counts untouched; once ``max_consecutive_failures`` aborts pile up in a
    row the search stops with :class:`SearchAborted`. ``stop_after`` bounds
    the rollouts executed in this call (for budget splitting / graceful
    interruption) and leaves a checkpoint behind to resume from.
    """
    if resume and checkpoint_path and Path(checkpoint_path).exists():
        tree, rng = load_checkpoint(checkpoint_path, seed)
    else:
        if provenance is None:
            provenance = ProvenanceRecord(
                challenger_model=challenger.model_name,
                solver_model=solver.model_name,
                rng_seed=config.rng_seed,
                created_at="1970-01-01T00:00:00Z",
            )
        tree = SearchTree(seed, provenance)
        rng = random.Random(config.rng_seed)

    executed_here = 0
    while tree.rollouts_done < config.rollout_budget:
        if stop_after is not None and executed_here >= stop_after:
            break
        try:
            outcome = rollout(
                tree, seed, challenger, solver, verifier, rng, config,
                challenger_template, solver_template,
            )
            backpropagate(tree, outcome)
            tree.consecutive_failures = 0
            if on_outcome is not None:
                on_outcome(outcome)
        except _ROLLOUT_FAILURES as exc:
            tree.consecutive_failures += 1
            logger.warning(
                "task %s: rollout %d aborted (%d consecutive): %s",
                seed.task_id, tree.rollouts_done, tree.consecutive_failures, exc,
            )
            if tree.consecutive_failures > config.max_consecutive_failures:
                if checkpoint_path:
                    save_checkpoint(tree, rng, config, checkpoint_path)
                raise SearchAborted(
                    f"task {seed.task_id}: {tree.consecutive_failures} consecutive"
                    " agent failures"
                ) from exc
        tree.rollouts_done += 1
        executed_here += 1
        if checkpoint_path and tree.rollouts_done % config.checkpoint_every == 0:
            save_checkpoint(tree, rng, config, checkpoint_path)
    if checkpoint_path:
        save_checkpoint(tree, rng, config, checkpoint_path)
    return extract_chains(tree, config.reward_threshold)
