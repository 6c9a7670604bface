"""Challenger/solver agent gateway.

Two interchangeable backends sit behind one ``complete(messages, context)``
surface: a chat-completions HTTP client for real multimodal models, and a
deterministic scripted backend that replays fixture files for tests and
reproducible runs. Prompt templating for the question/answer agents lives
here too.

Wire format (stable contract): POST {base_url}/chat/completions with
``{model, temperature, top_p, messages:[{role, content:[{type:"text",text}
| {type:"image_url",image_url:{url}}]}]}``; the reply answer is read from
``choices[0].message.content``. The bearer token comes from the environment
variable named on the endpoint and is never serialized into logs, goldens,
or checkpoints.
"""

from __future__ import annotations

import base64
import json
import logging
import mimetypes
import os
import random
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

from .chain import ComplexityDegree, PyramidLevel, Sample
from .errors import AgentTransportError, ChallengerProtocolError, MissingPlaceholder

logger = logging.getLogger(__name__)

PLACEHOLDERS = frozenset({"image", "chain_prefix", "question", "target_level"})
_PLACEHOLDER_RE = re.compile(r"\{(\w+)\}")


@dataclass(frozen=True)
class PromptTemplate:
    """System preamble plus a body with named placeholders.

    Only placeholders from the closed set are allowed in the body; contexts
    may carry extra keys (ignored), but every placeholder the body uses must
    be supplied at render time.
    """

    template_id: str
    role_preamble: str
    body: str
    output_schema_hint: str = ""
    empty_prefix_marker: str = "(no prior steps)"

    def __post_init__(self) -> None:
        unknown = set(_PLACEHOLDER_RE.findall(self.body)) - PLACEHOLDERS
        if unknown:
            raise ValueError(
                f"template {self.template_id!r} uses unknown placeholders: "
                f"{sorted(unknown)}"
            )


@dataclass(frozen=True)
class ChallengerProposal:
    """Parsed challenger output: the next question and its pyramid tags."""

    question: str
    level: PyramidLevel
    complexity: ComplexityDegree
    rationale: str | None = None
    raw_reply: str = field(default="", repr=False, compare=False)


@dataclass(frozen=True)
class AgentEndpoint:
    """Where and how to reach one model. Key material stays in the named

    environment variable; it is read per request and never stored.
    """

    base_url: str
    model_name: str
    api_key_env: str = ""
    timeout_ms: int = 30_000
    max_retries: int = 2
    temperature: float = 0.0
    top_p: float = 1.0

    def __post_init__(self) -> None:
        if self.timeout_ms <= 0:
            raise ValueError("timeout_ms must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be non-negative")


def render_chain_prefix(prefix: Sequence[Sample], marker: str) -> str:
    """Prior Q/A pairs as numbered blocks, or the empty-prefix marker."""
    if not prefix:
        return marker
    blocks = []
    for i, sample in enumerate(prefix, start=1):
        blocks.append(
            f"Step {i} [{sample.level.label}, complexity {int(sample.complexity)}]\n"
            f"Q: {sample.question}\n"
            f"A: {sample.answer}"
        )
    return "\n\n".join(blocks)


def image_to_url(image: str) -> str:
    """Local paths become base64 data URIs; URLs pass through unchanged."""
    if image.startswith(("http://", "https://", "data:")):
        return image
    mime = mimetypes.guess_type(image)[0] or "application/octet-stream"
    payload = base64.b64encode(Path(image).read_bytes()).decode("ascii")
    return f"data:{mime};base64,{payload}"


def render_prompt(template: PromptTemplate, context: Mapping[str, Any]) -> list[dict]:
    """Deterministic message list: one system message, then one user message

    whose content parts are the image attachment (when the context carries an
    image) followed by the rendered body.
    """
    def substitute(match: re.Match) -> str:
        name = match.group(1)
        if name not in context:
            raise MissingPlaceholder(
                f"template {template.template_id!r} needs {{{name}}} but the"
                " context does not supply it"
            )
        return str(context[name])

    body = _PLACEHOLDER_RE.sub(substitute, template.body)
    parts: list[dict] = []
    image = context.get("image")
    if image:
        # raw reference here; the HTTP layer converts local paths to data URIs
        parts.append({"type": "image_url", "image_url": {"url": str(image)}})
    parts.append({"type": "text", "text": body})
    return [
        {"role": "system", "content": [{"type": "text", "text": template.role_preamble}]},
        {"role": "user", "content": parts},
    ]


# --- wire format ----------------------------------------------------------

def _with_wire_images(messages: list[dict]) -> list[dict]:
    """Copy of the messages with local image paths inlined as data URIs."""
    out = []
    for message in messages:
        parts = []
        for part in message["content"]:
            if part.get("type") == "image_url":
                part = {
                    "type": "image_url",
                    "image_url": {"url": image_to_url(part["image_url"]["url"])},
                }
            parts.append(part)
        out.append({"role": message["role"], "content": parts})
    return out


def build_chat_request(
    endpoint: AgentEndpoint, messages: list[dict]
) -> tuple[str, dict[str, str], bytes]:
    """(url, headers-without-authorization, body bytes) for one completion call.

    The body serialization is byte-stable so requests can be golden-tested.
    """
    url = endpoint.base_url.rstrip("/") + "/chat/completions"
    payload = {
        "model": endpoint.model_name,
        "temperature": endpoint.temperature,
        "top_p": endpoint.top_p,
        "messages": _with_wire_images(messages),
    }
    body = json.dumps(payload, ensure_ascii=False, separators=(",", ":")).encode("utf-8")
    headers = {"Content-Type": "application/json"}
    return url, headers, body


class HttpChatBackend:
    """Chat-completions client with bounded concurrency and retries.

    Retries use exponential backoff with full jitter; 4xx responses are
    client errors and are not retried, while 5xx and transport failures are.
    """

    def __init__(
        self,
        session=None,
        max_concurrency: int = 4,
        backoff_base: float = 0.5,
        backoff_cap: float = 8.0,
        sleep_fn=time.sleep,
        jitter_rng: random.Random | None = None,
    ):
        if session is None:
            import requests

            session = requests.Session()
        self._session = session
        self._limiter = threading.BoundedSemaphore(max_concurrency)
        self._backoff_base = backoff_base
        self._backoff_cap = backoff_cap
        self._sleep = sleep_fn
        self._jitter = jitter_rng or random.Random()

    def complete(
        self,
        messages: list[dict],
        *,
        endpoint: AgentEndpoint,
        context: Mapping[str, Any] | None = None,
    ) -> str:
        url, headers, body = build_chat_request(endpoint, messages)
        if endpoint.api_key_env:
            key = os.environ.get(endpoint.api_key_env)
            if not key:
                raise AgentTransportError(
                    f"environment variable {endpoint.api_key_env} is not set"
                )
            headers = dict(headers)
            headers["Authorization"] = f"Bearer {key}"
        attempts = endpoint.max_retries + 1
        last_error = "unknown"
        for attempt in range(attempts):
            if attempt:
                delay = min(self._backoff_cap, self._backoff_base * 2 ** (attempt - 1))
                self._sleep(delay * self._jitter.random())
            try:
                with self._limiter:
                    response = self._session.post(
                        url, data=body, headers=headers,
                        timeout=endpoint.timeout_ms / 1000.0,
                    )
            except Exception as exc:  # connection error / timeout
                last_error = f"transport failure: {exc}"
                logger.warning("%s (attempt %d/%d)", last_error, attempt + 1, attempts)
                continue
            status = response.status_code
            if 200 <= status < 300:
                return _reply_text(response, endpoint)
            last_error = f"HTTP {status}: {_safe_body(response)}"
            if 400 <= status < 500:
                raise AgentTransportError(f"{endpoint.model_name}: {last_error}")
            logger.warning("%s (attempt %d/%d)", last_error, attempt + 1, attempts)
        raise AgentTransportError(
            f"{endpoint.model_name}: {last_error} after {attempts} attempts"
        )


def _safe_body(response) -> str:
    try:
        return response.text[:200]
    except Exception:
        return "<unreadable body>"


def _reply_text(response, endpoint: AgentEndpoint) -> str:
    try:
        content = response.json()["choices"][0]["message"]["content"]
    except Exception as exc:
        raise AgentTransportError(
            f"{endpoint.model_name}: malformed completion reply: {exc}"
        ) from exc
    if isinstance(content, list):  # some servers return content parts
        content = "".join(
            part.get("text", "") for part in content if isinstance(part, dict)
        )
    return str(content)


class ScriptedBackend:
    """Deterministic fixture replay; a pure function of its lookup key.

    Fixture file: JSONL rows of
    ``{task_id, prefix_len, question?, proposal?|answer?}`` with optional
    ``prefix_tail`` / ``variant`` / ``attempt`` keys for branching worlds and
    repair sequences, and an optional ``model`` key so one file can serve a
    whole panel. Challenger rows carry ``proposal``, solver rows ``answer``.
    """

    def __init__(self, fixture_path: str | Path | None = None,
                 rows: Sequence[Mapping[str, Any]] | None = None,
                 model_name: str | None = None):
        if rows is None:
            if fixture_path is None:
                raise ValueError("ScriptedBackend needs a fixture path or rows")
            rows = [
                json.loads(line)
                for line in Path(fixture_path).read_text(encoding="utf-8").splitlines()
                if line.strip()
            ]
        self._proposals: dict[tuple, str] = {}
        self._answers: dict[tuple, str] = {}
        for row in rows:
            row_model = row.get("model")
            if row_model is not None and model_name is not None and row_model != model_name:
                continue
            task_id = row.get("task_id")
            prefix_len = row.get("prefix_len")
            if "proposal" in row:
                key = (task_id, prefix_len, row.get("prefix_tail"),
                       row.get("variant", 0), row.get("attempt", 0))
                self._proposals[key] = json.dumps(row["proposal"], ensure_ascii=False)
            elif "answer" in row:
                self._answers[(task_id, prefix_len, row.get("question"))] = str(row["answer"])
            else:
                raise ValueError(f"scripted fixture row has neither proposal nor answer: {row}")

    def complete(
        self,
        messages: list[dict],
        *,
        endpoint: AgentEndpoint,
        context: Mapping[str, Any] | None = None,
    ) -> str:
        ctx = context or {}
        task_id = ctx.get("task_id")
        prefix_len = ctx.get("prefix_len")
        if ctx.get("kind") == "propose":
            tail = ctx.get("prefix_tail")
            variant = ctx.get("variant", 0)
            attempt = ctx.get("attempt", 0)
            for key in (
                (task_id, prefix_len, tail, variant, attempt),
                (task_id, prefix_len, tail, variant, 0),
                (task_id, prefix_len, tail, 0, 0),
                (task_id, prefix_len, None, variant, attempt),
                (task_id, prefix_len, None, variant, 0),
                (task_id, prefix_len, None, 0, 0),
            ):
                if key in self._proposals:
                    return self._proposals[key]
            raise AgentTransportError(
                f"no scripted proposal for task={task_id!r} prefix_len={prefix_len}"
                f" tail={ctx.get('prefix_tail')!r} variant={variant} attempt={attempt}"
            )
        question = ctx.get("question")
        for key in (
            (task_id, prefix_len, question),
            (task_id, None, question),
            (None, None, question),
        ):
            if key in self._answers:
                return self._answers[key]
        raise AgentTransportError(
            f"no scripted answer for task={task_id!r} prefix_len={prefix_len}"
            f" question={question!r}"
        )


SCRIPTED_URL_PREFIX = "scripted:"


def make_backend(endpoint: AgentEndpoint, **http_kwargs):
    """Scripted backend for ``scripted:<path>`` base URLs, HTTP otherwise."""
    if endpoint.base_url.startswith(SCRIPTED_URL_PREFIX):
        path = endpoint.base_url[len(SCRIPTED_URL_PREFIX):]
        return ScriptedBackend(path, model_name=endpoint.model_name)
    return HttpChatBackend(**http_kwargs)


@dataclass
class Agent:
    """One configured model behind a backend."""

    endpoint: AgentEndpoint
    backend: Any

    @property
    def model_name(self) -> str:
        return self.endpoint.model_name

    def complete(self, messages: list[dict], *, context: Mapping[str, Any] | None = None) -> str:
        return self.backend.complete(messages, endpoint=self.endpoint, context=context)


# --- challenger / solver operations ---------------------------------------

_REQUIRED_PROPOSAL_KEYS = {"question", "level", "complexity"}
_OPTIONAL_PROPOSAL_KEYS = {"rationale"}


def parse_proposal(reply: str) -> ChallengerProposal:
    """Strict JSON object {question, level, complexity, rationale?}.

    Accepts the object bare, inside a fenced code block, or embedded in
    surrounding prose; missing or extra keys are protocol errors.
    """
    candidates = [reply.strip()]
    fence = re.search(r"```(?:json)?\s*(.*?)```", reply, re.DOTALL)
    if fence:
        candidates.append(fence.group(1).strip())
    brace = re.search(r"\{.*\}", reply, re.DOTALL)
    if brace:
        candidates.append(brace.group(0))
    data = None
    for candidate in candidates:
        try:
            data = json.loads(candidate)
            break
        except (json.JSONDecodeError, ValueError):
            continue
    if not isinstance(data, dict):
        raise ChallengerProtocolError(f"challenger reply is not a JSON object: {reply[:120]!r}")
    keys = set(data)
    missing = _REQUIRED_PROPOSAL_KEYS - keys
    extra = keys - _REQUIRED_PROPOSAL_KEYS - _OPTIONAL_PROPOSAL_KEYS
    if missing or extra:
        raise ChallengerProtocolError(
            f"challenger proposal keys invalid (missing={sorted(missing)},"
            f" extra={sorted(extra)})"
        )
    question = data["question"]
    if not isinstance(question, str) or not question.strip():
        raise ChallengerProtocolError("challenger proposal question is empty")
    try:
        level = PyramidLevel(int(data["level"]))
        complexity = ComplexityDegree(int(data["complexity"]))
    except (ValueError, TypeError) as exc:
        raise ChallengerProtocolError(f"challenger proposal tags invalid: {exc}") from exc
    rationale = data.get("rationale")
    return ChallengerProposal(
        question=question.strip(),
        level=level,
        complexity=complexity,
        rationale=str(rationale) if rationale is not None else None,
        raw_reply=reply,
    )


def propose_question(
    challenger: Agent,
    image: str,
    prefix: Sequence[Sample],
    target_level: PyramidLevel,
    template: PromptTemplate,
    *,
    task_id: str = "",
    sibling_questions: Sequence[str] = (),
    attempt: int = 0,
    violation: str | None = None,
) -> ChallengerProposal:
    """Ask the challenger for the next question given the chain prefix.

    ``sibling_questions`` are questions already asked at this expansion
    point; they are surfaced so the model proposes something new. On repair
    attempts the previous violation is named in the prompt.
    """
    context = {
        "image": image,
        "chain_prefix": render_chain_prefix(prefix, template.empty_prefix_marker),
        "target_level": int(target_level),
    }
    messages = render_prompt(template, context)
    notes = []
    if sibling_questions:
        asked = "\n".join(f"- {q}" for q in sibling_questions)
        notes.append(
            "The following follow-up questions were already asked at this point;"
            f" propose a different one:\n{asked}"
        )
    if violation:
        notes.append(
            f"Your previous proposal was rejected: {violation}."
            " Propose a corrected question."
        )
    if notes:
        messages[-1]["content"][-1]["text"] += "\n\n" + "\n\n".join(notes)
    reply = challenger.complete(
        messages,
        context={
            "kind": "propose",
            "task_id": task_id,
            "prefix_len": len(prefix),
            "prefix_tail": prefix[-1].question if prefix else None,
            "variant": len(sibling_questions),
            "attempt": attempt,
        },
    )
    return parse_proposal(reply)


def answer_question(
    solver: Agent,
    image: str,
    question: str,
    prefix: Sequence[Sample],
    template: PromptTemplate,
    *,
    task_id: str = "",
) -> str:
    """Raw solver reply for ``question``, conditioned on the prefix Q/A pairs."""
    context = {
        "image": image,
        "chain_prefix": render_chain_prefix(prefix, template.empty_prefix_marker),
        "question": question,
    }
    messages = render_prompt(template, context)
    return solver.complete(
        messages,
        context={
            "kind": "answer",
            "task_id": task_id,
            "prefix_len": len(prefix),
            "question": question,
        },
    )


# --- default templates -----------------------------------------------------

DEFAULT_CHALLENGER_TEMPLATE = PromptTemplate(
    template_id="challenger-default",
    role_preamble=(
        "You write financial image-understanding questions of steadily"
        " increasing difficulty. You check the solver's progress so far and"
        " pose the next, more challenging follow-up question."
    ),
    body=(
        "Progress so far:\n{chain_prefix}\n\n"
        "The question sequence climbs capability levels 1 (perception) through"
        " {target_level} (the final target). Propose the next follow-up"
        " question about the attached financial image. It must build on the"
        " prior steps and be answerable from the image.\n\n"
        "Reply with a single JSON object and nothing else:\n"
        '{"question": "...", "level": <1-6>, "complexity": <1-5>,'
        ' "rationale": "..."}'
    ),
    output_schema_hint='{"question": str, "level": int, "complexity": int, "rationale": str}',
)

DEFAULT_SOLVER_TEMPLATE = PromptTemplate(
    template_id="solver-default",
    role_preamble=(
        "You answer financial image-understanding questions precisely, using"
        " the image and the prior question/answer steps."
    ),
    body=(
        "Prior steps:\n{chain_prefix}\n\n"
        "Question: {question}\n\n"
        "Answer concisely and place the final answer within \\boxed{}."
    ),
)

DEFAULT_JUDGE_TEMPLATE = PromptTemplate(
    template_id="judge-default",
    role_preamble=(
        "You compare a predicted answer against a reference and reply with"
        " exactly YES or NO."
    ),
    body="{question}\n\nDo these answers agree? Reply with exactly YES or NO.",
)

DEFAULT_BLIND_TEMPLATE = PromptTemplate(
    template_id="blind-default",
    role_preamble="You answer financial questions. No image is provided.",
    body="Question: {question}\n\nAnswer concisely.",
)

DEFAULT_EVAL_TEMPLATE = PromptTemplate(
    template_id="eval-default",
    role_preamble="You answer financial image-understanding questions.",
    body="{question}\n\nPlace the solution within \\boxed{}.",
)
