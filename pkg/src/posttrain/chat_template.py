"""Chat-template rendering with reasoning control, and SFT reasoning-control prep.

Rendered layout, one block per message::

    <|system|>
    You are helpful.
    <TOOLS>
    <TOOL name="search">Web search</TOOL>
    </TOOLS>
    <|end|>
    <|user|>
    hi
    <|end|>
    <|assistant|>
    <think>
    ...reasoning...
    </think>
    answer text
    <TOOLCALL name="search">
    <ARG key="query">cats</ARG>
    </TOOLCALL>
    <|end|>

In reasoning mode only assistant messages after the last user message keep
their ``<think>`` block; earlier turns are rendered without it. Argument
values are written verbatim except that ``<\\`` and the closing-tag prefixes
``</ARG`` and ``</TOOLCALL`` are backslash-escaped, which keeps the grammar
unambiguous.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Mapping, Sequence

from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import StructureError, check_probability
from .tokens import DEFAULT_TOKENIZER, Tokenizer, keyed_choice, keyed_uniform

ROLES = ("system", "user", "assistant", "tool")
REASONING_MODES = ("on", "off")
DEFAULT_BUDGETS = (1024, 2048, 4096, 8192, 16384)

_IDENT_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_.\-]*$")


@dataclass(frozen=True)
class ToolCall:
    name: str
    arguments: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        if not self.name or not _IDENT_RE.match(self.name):
            raise ValueError(f"invalid tool name {self.name!r}")
        args = tuple((str(k), str(v)) for k, v in self.arguments)
        keys = [k for k, _ in args]
        for key in keys:
            if not _IDENT_RE.match(key):
                raise ValueError(f"invalid argument key {key!r} in call to {self.name}")
        if len(set(keys)) != len(keys):
            raise ValueError(f"duplicate argument key in call to {self.name}")
        object.__setattr__(self, "arguments", args)


@dataclass(frozen=True)
class ToolDefinition:
    name: str
    description: str = ""
    parameters: str = ""  # canonical JSON, may be empty

    def __post_init__(self):
        if not self.name or not _IDENT_RE.match(self.name):
            raise ValueError(f"invalid tool name {self.name!r}")


@dataclass(frozen=True)
class Message:
    role: str
    content: str = ""
    reasoning: str | None = None
    tool_calls: tuple[ToolCall, ...] = ()
    tool_definitions: tuple[ToolDefinition, ...] | None = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        object.__setattr__(self, "tool_calls", tuple(self.tool_calls))
        if self.tool_definitions is not None:
            object.__setattr__(self, "tool_definitions", tuple(self.tool_definitions))
        if self.role != "assistant" and (self.reasoning is not None or self.tool_calls):
            raise ValueError(f"{self.role} message cannot carry reasoning or tool calls")
        if self.role != "system" and self.tool_definitions is not None:
            raise ValueError(f"{self.role} message cannot declare tools")


@dataclass(frozen=True)
class Conversation:
    messages: tuple[Message, ...]
    reasoning_mode: str = "on"

    def __post_init__(self):
        object.__setattr__(self, "messages", tuple(self.messages))
        if self.reasoning_mode not in REASONING_MODES:
            raise ValueError(f"reasoning_mode must be 'on' or 'off', got {self.reasoning_mode!r}")

    @property
    def last_user_index(self) -> int:
        """Index of the last user message, -1 when there is none."""
        for i in range(len(self.messages) - 1, -1, -1):
            if self.messages[i].role == "user":
                return i
        return -1

    def declared_tools(self) -> tuple[ToolDefinition, ...]:
        return tuple(t for m in self.messages if m.role == "system" for t in (m.tool_definitions or ()))


@dataclass(frozen=True)
class RenderedPrompt:
    text: str
    # (message index, (start byte, end byte)) into text.encode("utf-8")
    included_reasoning_spans: tuple[tuple[int, tuple[int, int]], ...] = ()


def validate_structure(conv: Conversation) -> None:
    """Raise :class:`StructureError` naming the first malformed message."""
    msgs = conv.messages
    if not msgs:
        raise StructureError("conversation is empty")
    if msgs[0].role not in ("system", "user"):
        raise StructureError(f"conversation must start with system or user, got {msgs[0].role}", 0)
    for i, msg in enumerate(msgs):
        if msg.role == "system" and i != 0:
            prev = msgs[i - 1].role
            detail = "two consecutive system messages" if prev == "system" else "system message after the first position"
            raise StructureError(detail, i)
        if msg.role == "tool" and msgs[i - 1].role not in ("assistant", "tool"):
            raise StructureError("tool message must follow an assistant or tool message", i)


# --- tool-call tag grammar ----------------------------------------------------

_ESCAPE_RE = re.compile(r"<\\|</(?=ARG|TOOLCALL)")
_UNESCAPE_RE = re.compile(r"<\\([\\/])")
_CALL_RE = re.compile(r'<TOOLCALL name="([^"<>]*)">(.*?)</TOOLCALL>', re.DOTALL)
_ARG_RE = re.compile(r'<ARG key="([^"<>]*)">(.*?)</ARG>', re.DOTALL)


def _escape_value(value: str) -> str:
    return _ESCAPE_RE.sub(lambda m: "<\\\\" if m.group(0) == "<\\" else "<\\/", value)


def _unescape_value(value: str) -> str:
    return _UNESCAPE_RE.sub(lambda m: "<" + m.group(1), value)


def serialize_tool_call(call: ToolCall) -> str:
    parts = [f'<TOOLCALL name="{call.name}">\n']
    for key, value in call.arguments:
        parts.append(f'<ARG key="{key}">{_escape_value(value)}</ARG>\n')
    parts.append("</TOOLCALL>")
    return "".join(parts)


def parse_tool_calls(text: str, *, strict: bool = False) -> list[ToolCall]:
    """Extract every well-formed ``<TOOLCALL>`` block from ``text``.

    With ``strict`` a block containing stray non-whitespace between arguments,
    or one that fails :class:`ToolCall` validation, raises ``ValueError``;
    otherwise such blocks are skipped.
    """
    calls = []
    for match in _CALL_RE.finditer(text):
        body = match.group(2)
        args = [(m.group(1), _unescape_value(m.group(2))) for m in _ARG_RE.finditer(body)]
        leftover = _ARG_RE.sub("", body)
        try:
            if leftover.strip():
                raise ValueError(f"unexpected text inside tool call {match.group(1)!r}")
            calls.append(ToolCall(match.group(1), tuple(args)))
        except ValueError:
            if strict:
                raise
    return calls


def _tool_definition_block(tools: Sequence[ToolDefinition]) -> str:
    lines = ["<TOOLS>"]
    for tool in tools:
        body = tool.description
        if tool.parameters:
            body = f"{body}\n{tool.parameters}" if body else tool.parameters
        lines.append(f'<TOOL name="{tool.name}">{body}</TOOL>')
    lines.append("</TOOLS>")
    return "\n".join(lines)


def render(conversation: Conversation, *, add_generation_prompt: bool = False) -> RenderedPrompt:
    """Render ``conversation`` to a prompt string.

    Reasoning of assistant messages after the last user message is kept when
    ``reasoning_mode`` is ``"on"``; everything else is rendered without its
    reasoning. The byte offsets of each included reasoning segment are
    returned alongside the text.
    """
    validate_structure(conversation)
    keep_from = conversation.last_user_index + 1 if conversation.reasoning_mode == "on" else None

    chunks: list[str] = []
    spans: list[tuple[int, tuple[int, int]]] = []
    offset = 0

    def emit(piece: str) -> None:
        nonlocal offset
        chunks.append(piece)
        offset += len(piece.encode("utf-8"))

    for i, msg in enumerate(conversation.messages):
        emit(f"<|{msg.role}|>\n")
        if msg.role == "assistant" and msg.reasoning is not None and keep_from is not None and i >= keep_from:
            emit("<think>\n")
            start = offset
            emit(msg.reasoning)
            spans.append((i, (start, offset)))
            emit("\n</think>\n")
        if msg.content:
            emit(msg.content + "\n")
        if msg.role == "system" and msg.tool_definitions:
            emit(_tool_definition_block(msg.tool_definitions) + "\n")
        for call in msg.tool_calls:
            emit(serialize_tool_call(call) + "\n")
        emit("<|end|>\n")
    if add_generation_prompt:
        emit("<|assistant|>\n")
        if conversation.reasoning_mode == "on":
            emit("<think>\n")
    return RenderedPrompt("".join(chunks), tuple(spans))


# --- JSONL mapping ------------------------------------------------------------

def _arg_text(value: Any) -> str:
    return value if isinstance(value, str) else json.dumps(value, sort_keys=True)


def tool_call_from_dict(data: Mapping[str, Any]) -> ToolCall:
    arguments = data.get("arguments") or {}
    if isinstance(arguments, Mapping):
        pairs = tuple((k, _arg_text(v)) for k, v in arguments.items())
    else:
        pairs = tuple((a["key"], _arg_text(a["value"])) for a in arguments)
    return ToolCall(data["name"], pairs)


def message_from_dict(data: Mapping[str, Any]) -> Message:
    tools = data.get("tool_definitions")
    if tools is not None:
        tools = tuple(
            ToolDefinition(
                t["name"],
                t.get("description", ""),
                json.dumps(t["parameters"], sort_keys=True) if t.get("parameters") is not None else "",
            )
            for t in tools
        )
    return Message(
        role=data["role"],
        content=data.get("content") or "",
        reasoning=data.get("reasoning"),
        tool_calls=tuple(tool_call_from_dict(c) for c in data.get("tool_calls") or ()),
        tool_definitions=tools,
    )


def conversation_from_dict(data: Mapping[str, Any]) -> Conversation:
    return Conversation(
        tuple(message_from_dict(m) for m in data["messages"]),
        data.get("reasoning_mode", "on"),
    )


def message_to_dict(msg: Message) -> dict[str, Any]:
    out: dict[str, Any] = {"role": msg.role, "content": msg.content}
    if msg.reasoning is not None:
        out["reasoning"] = msg.reasoning
    if msg.tool_calls:
        out["tool_calls"] = [{"name": c.name, "arguments": dict(c.arguments)} for c in msg.tool_calls]
    if msg.tool_definitions is not None:
        defs = []
        for t in msg.tool_definitions:
            d: dict[str, Any] = {"name": t.name}
            if t.description:
                d["description"] = t.description
            if t.parameters:
                d["parameters"] = json.loads(t.parameters)
            defs.append(d)
        out["tool_definitions"] = defs
    return out


def conversation_to_dict(conv: Conversation) -> dict[str, Any]:
    return {"messages": [message_to_dict(m) for m in conv.messages], "reasoning_mode": conv.reasoning_mode}


# --- reasoning control for SFT corpora ---------------------------------------

def _without_reasoning(conv: Conversation) -> Conversation:
    msgs = tuple(replace(m, reasoning=None) if m.reasoning is not None else m for m in conv.messages)
    return Conversation(msgs, "off")


def strip_reasoning(corpus: Sequence[Conversation], fraction: float, seed: int, *, offset: int = 0) -> list[Conversation]:
    """Remove all reasoning from a seeded random ``fraction`` of the corpus.

    Selected samples also switch to ``reasoning_mode="off"``. Selection for the
    sample at global position ``offset + i`` depends only on ``seed`` and that
    position.
    """
    fraction = check_probability(fraction, "fraction")
    return [
        _without_reasoning(conv) if keyed_uniform(seed, "strip", offset + i) < fraction else conv
        for i, conv in enumerate(corpus)
    ]


@dataclass
class TruncationReport:
    selected: int = 0
    truncated: int = 0
    unchanged: int = 0  # budget not shorter than the trace
    skipped_no_reasoning: int = 0
    skipped_indices: list[int] = field(default_factory=list)

    def merge(self, other: "TruncationReport") -> "TruncationReport":
        return TruncationReport(
            self.selected + other.selected,
            self.truncated + other.truncated,
            self.unchanged + other.unchanged,
            self.skipped_no_reasoning + other.skipped_no_reasoning,
            self.skipped_indices + other.skipped_indices,
        )


def truncate_budget(
    corpus: Sequence[Conversation],
    fraction: float,
    seed: int,
    budgets: Sequence[int] = DEFAULT_BUDGETS,
    *,
    tokenizer: Tokenizer = DEFAULT_TOKENIZER,
    offset: int = 0,
) -> tuple[list[Conversation], TruncationReport]:
    """Cut the final assistant reasoning of a seeded ``fraction`` of samples.

    The budget for each selected sample is drawn uniformly from ``budgets``;
    the answer after the reasoning is left as is. Selected samples whose final
    assistant message has no reasoning are skipped and reported.
    """
    fraction = check_probability(fraction, "fraction")
    budgets = tuple(int(b) for b in budgets)
    if not budgets or min(budgets) <= 0:
        raise ValueError("budgets must be non-empty and positive")

    report = TruncationReport()
    out = []
    for i, conv in enumerate(corpus):
        idx = offset + i
        if keyed_uniform(seed, "truncate", idx) >= fraction:
            out.append(conv)
            continue
        report.selected += 1
        last = max((j for j, m in enumerate(conv.messages) if m.role == "assistant"), default=None)
        if last is None or not conv.messages[last].reasoning:
            report.skipped_no_reasoning += 1
            report.skipped_indices.append(idx)
            out.append(conv)
            continue
        budget = keyed_choice(seed, "budget", idx, budgets)
        msg = conv.messages[last]
        cut = tokenizer.truncate(msg.reasoning, budget)
        if cut == msg.reasoning:
            report.unchanged += 1
            out.append(conv)
            continue
        report.truncated += 1
        msgs = list(conv.messages)
        msgs[last] = replace(msg, reasoning=cut)
        out.append(Conversation(tuple(msgs), conv.reasoning_mode))
    return out, report


def prepare_reasoning_corpus(
    corpus: Sequence[Conversation],
    strip_fraction: float,
    truncate_fraction: float,
    seed: int,
    budgets: Sequence[int] = DEFAULT_BUDGETS,
    *,
    tokenizer: Tokenizer = DEFAULT_TOKENIZER,
    offset: int = 0,
) -> tuple[list[Conversation], int, TruncationReport]:
    """Strip, then truncate; returns ``(corpus, n_stripped, truncation report)``.

    Both fractions are shares of the whole corpus. The strip and truncate
    draws are independent, so truncation runs at ``t / (1 - s)`` over the
    samples that kept their reasoning.
    """
    strip_fraction = check_probability(strip_fraction, "strip_fraction")
    truncate_fraction = check_probability(truncate_fraction, "truncate_fraction")
    if strip_fraction + truncate_fraction > 1:
        raise ValueError("strip_fraction + truncate_fraction must not exceed 1")
    stripped = strip_reasoning(corpus, strip_fraction, seed, offset=offset)
    n_stripped = sum(a is not b for a, b in zip(stripped, corpus))
    kept = 1.0 - strip_fraction
    conditional = min(1.0, truncate_fraction / kept) if kept > 0 else 0.0
    out, report = truncate_budget(stripped, conditional, seed, budgets, tokenizer=tokenizer, offset=offset)
    return out, n_stripped, report


class ReasoningControl(TransformerMixin, BaseEstimator):
    """Prepare an SFT corpus for reasoning on/off and budget control.

    Strips reasoning from ``strip_fraction`` of samples, then truncates the
    final reasoning trace of ``truncate_fraction`` of samples to a budget from
    ``budgets``. Stateless: ``fit`` only validates parameters.
    """

    def __init__(self, strip_fraction=0.10, truncate_fraction=0.03, budgets=DEFAULT_BUDGETS, seed=0):
        self.strip_fraction = strip_fraction
        self.truncate_fraction = truncate_fraction
        self.budgets = budgets
        self.seed = seed

    def fit(self, X=None, y=None):
        check_probability(self.strip_fraction, "strip_fraction")
        check_probability(self.truncate_fraction, "truncate_fraction")
        if not self.budgets or min(self.budgets) <= 0:
            raise ValueError("budgets must be non-empty and positive")
        return self

    def transform(self, X: Iterable[Conversation], offset: int = 0) -> list[Conversation]:
        corpus, self.n_stripped_, self.truncation_report_ = prepare_reasoning_corpus(
            list(X), self.strip_fraction, self.truncate_fraction, self.seed, self.budgets, offset=offset
        )
        return corpus
