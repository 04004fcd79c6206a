"""SFT data filtering and DPO preference labeling for tool-use calibration.

The filter pipeline runs three rules in order (structural, repetition,
alignment) and attributes each rejected sample to the first rule it fails.
"""

from __future__ import annotations

import hashlib
import re
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import ConfigError, StructureError
from .chat_template import Conversation, parse_tool_calls, validate_structure
from .config import get_value, prefixed, to_bool
from .tokens import DEFAULT_TOKENIZER, Tokenizer

RULES = ("structural", "repetition", "alignment")

DEFAULT_ALIGNMENT_PATTERNS = {
    "our_nation_party": r"\bour\s+(?:nation|party)\b",
    "our_values": r"\bour\s+values\b",
}


@dataclass(frozen=True)
class CheckResult:
    passed: bool
    reason: str | None = None
    witness: Any = None

    def __bool__(self) -> bool:
        return self.passed


PASS = CheckResult(True)


# --- structural -----------------------------------------------------------------

def assistant_tool_calls(conv: Conversation) -> list[tuple[int, str]]:
    """(message index, tool name) for every call an assistant makes.

    Counts both structured ``tool_calls`` and calls written inline in the
    assistant text using the template's tag grammar.
    """
    found = []
    for i, msg in enumerate(conv.messages):
        if msg.role != "assistant":
            continue
        found.extend((i, c.name) for c in msg.tool_calls)
        found.extend((i, c.name) for c in parse_tool_calls(msg.content))
    return found


def structural_check(conv: Conversation, *, require_declared_names: bool = False) -> CheckResult:
    try:
        validate_structure(conv)
    except StructureError as exc:
        return CheckResult(False, f"malformed roles: {exc}", exc.index)
    calls = assistant_tool_calls(conv)
    if not calls:
        return PASS
    declared = {t.name for t in conv.declared_tools()}
    if not declared:
        return CheckResult(False, "tool calls present but no tool definitions declared", calls[0][0])
    if require_declared_names:
        for index, name in calls:
            if name not in declared:
                return CheckResult(False, f"call to undeclared tool {name!r}", index)
    return PASS


# --- repetition -------------------------------------------------------------------

@dataclass(frozen=True)
class RepetitionConfig:
    ngram: int = 8
    window: int = 512
    window_threshold: int = 4
    global_threshold: int = 8

    def __post_init__(self):
        if self.ngram < 2:
            raise ConfigError("ngram must be >= 2")
        if self.window_threshold < 2 or self.global_threshold < 2:
            raise ConfigError("repetition thresholds must be >= 2")
        if self.window < self.ngram:
            raise ConfigError("window must be at least ngram tokens")

    @classmethod
    def from_config(cls, cfg: Mapping[str, str]) -> "RepetitionConfig":
        d = cls()
        return cls(**{k: get_value(cfg, k, int, getattr(d, k)) for k in d.__dataclass_fields__})


@dataclass(frozen=True)
class RepetitionWitness:
    ngram: tuple[str, ...]
    positions: tuple[int, ...]
    scope: str  # "window" or "global"


def repetition_check(tokens: Sequence[str], cfg: RepetitionConfig = RepetitionConfig()) -> CheckResult:
    """Flag n-grams repeated too often inside one window or across the stream.

    Occurrences may overlap. A window hit needs ``window_threshold``
    occurrences that all fit inside ``window`` consecutive tokens.
    """
    n = cfg.ngram
    positions: dict[tuple, list[int]] = defaultdict(list)
    for i in range(len(tokens) - n + 1):
        positions[tuple(tokens[i:i + n])].append(i)

    k = cfg.window_threshold
    for gram, pos in positions.items():
        for a in range(len(pos) - k + 1):
            if pos[a + k - 1] + n - pos[a] <= cfg.window:
                return CheckResult(False, "windowed n-gram repetition",
                                   RepetitionWitness(gram, tuple(pos[a:a + k]), "window"))
    for gram, pos in positions.items():
        if len(pos) >= cfg.global_threshold:
            return CheckResult(False, "global n-gram repetition", RepetitionWitness(gram, tuple(pos), "global"))
    return PASS


# --- alignment ------------------------------------------------------------------

def compile_patterns(patterns: Mapping[str, str] | Sequence[str], *, case_sensitive: bool = False) -> dict[str, re.Pattern]:
    """Compile ``{id: regex}``; a plain sequence uses each regex as its own id."""
    items = patterns.items() if isinstance(patterns, Mapping) else ((p, p) for p in patterns)
    flags = 0 if case_sensitive else re.IGNORECASE
    compiled = {}
    for pid, source in items:
        try:
            compiled[pid] = re.compile(source, flags)
        except re.error as exc:
            raise ConfigError(f"invalid alignment pattern {pid!r}: {exc}") from exc
    return compiled


def alignment_filter(text: str, patterns: Mapping[str, re.Pattern | str] | Sequence[str] | None = None) -> CheckResult:
    if patterns is None:
        patterns = DEFAULT_ALIGNMENT_PATTERNS
    compiled = (
        patterns
        if isinstance(patterns, Mapping) and all(isinstance(p, re.Pattern) for p in patterns.values())
        else compile_patterns(patterns)
    )
    for pid, rx in compiled.items():
        match = rx.search(text)
        if match:
            return CheckResult(False, f"alignment pattern {pid!r}", pid)
    return PASS


# --- pipeline ---------------------------------------------------------------------

@dataclass
class FilterReport:
    input_count: int = 0
    rejected_structural: int = 0
    rejected_repetition: int = 0
    rejected_alignment: int = 0
    kept: int = 0
    per_rule_samples: dict[str, list] = field(default_factory=lambda: {r: [] for r in RULES})

    def record(self, sample_id, rule: str | None) -> None:
        self.input_count += 1
        if rule is None:
            self.kept += 1
            return
        setattr(self, f"rejected_{rule}", getattr(self, f"rejected_{rule}") + 1)
        self.per_rule_samples[rule].append(sample_id)

    def merge(self, other: "FilterReport") -> "FilterReport":
        return FilterReport(
            self.input_count + other.input_count,
            self.rejected_structural + other.rejected_structural,
            self.rejected_repetition + other.rejected_repetition,
            self.rejected_alignment + other.rejected_alignment,
            self.kept + other.kept,
            {r: self.per_rule_samples[r] + other.per_rule_samples[r] for r in RULES},
        )

    def reconciles(self) -> bool:
        return self.kept + self.rejected_structural + self.rejected_repetition + self.rejected_alignment == self.input_count

    def to_dict(self) -> dict:
        return {
            "input_count": self.input_count,
            "rejected_structural": self.rejected_structural,
            "rejected_repetition": self.rejected_repetition,
            "rejected_alignment": self.rejected_alignment,
            "kept": self.kept,
            "per_rule_samples": self.per_rule_samples,
        }


def trajectory_text(conv: Conversation) -> str:
    """Assistant reasoning and answers, in order, as one string."""
    parts = []
    for m in conv.messages:
        if m.role == "assistant":
            if m.reasoning:
                parts.append(m.reasoning)
            if m.content:
                parts.append(m.content)
    return "\n".join(parts)


class SFTDataFilter(TransformerMixin, BaseEstimator):
    """Structural, repetition and alignment filtering of an SFT corpus.

    ``fit`` compiles the alignment patterns (bad regexes fail here);
    ``transform`` returns the kept conversations and leaves the per-rule
    accounting in ``report_``.
    """

    def __init__(self, ngram=8, window=512, window_threshold=4, global_threshold=8,
                 patterns=None, case_sensitive=False, require_declared_names=False, tokenizer=None):
        self.ngram = ngram
        self.window = window
        self.window_threshold = window_threshold
        self.global_threshold = global_threshold
        self.patterns = patterns
        self.case_sensitive = case_sensitive
        self.require_declared_names = require_declared_names
        self.tokenizer = tokenizer

    @classmethod
    def from_config(cls, cfg: Mapping[str, str]) -> "SFTDataFilter":
        rep = RepetitionConfig.from_config(cfg)
        patterns = dict(DEFAULT_ALIGNMENT_PATTERNS)
        if not get_value(cfg, "default_patterns", to_bool, True):
            patterns = {}
        patterns.update(prefixed(cfg, "pattern"))
        return cls(rep.ngram, rep.window, rep.window_threshold, rep.global_threshold, patterns,
                   get_value(cfg, "case_sensitive", to_bool, False))

    def fit(self, X=None, y=None):
        self.repetition_config_ = RepetitionConfig(self.ngram, self.window, self.window_threshold, self.global_threshold)
        patterns = DEFAULT_ALIGNMENT_PATTERNS if self.patterns is None else self.patterns
        self.patterns_ = compile_patterns(patterns, case_sensitive=self.case_sensitive)
        self.tokenizer_: Tokenizer = self.tokenizer or DEFAULT_TOKENIZER
        return self

    def first_failure(self, conv: Conversation) -> tuple[str, CheckResult] | None:
        check_is_fitted(self, "patterns_")
        result = structural_check(conv, require_declared_names=self.require_declared_names)
        if not result:
            return "structural", result
        text = trajectory_text(conv)
        result = repetition_check(self.tokenizer_.tokenize(text), self.repetition_config_)
        if not result:
            return "repetition", result
        result = alignment_filter(text, self.patterns_)
        if not result:
            return "alignment", result
        return None

    def filter(self, convs: Iterable[Conversation], ids: Iterable | None = None) -> tuple[list[Conversation], FilterReport]:
        convs = list(convs)
        ids = list(range(len(convs))) if ids is None else list(ids)
        report = FilterReport()
        kept = []
        for sid, conv in zip(ids, convs):
            failure = self.first_failure(conv)
            report.record(sid, None if failure is None else failure[0])
            if failure is None:
                kept.append(conv)
        return kept, report

    def transform(self, X: Iterable[Conversation]) -> list[Conversation]:
        kept, self.report_ = self.filter(X)
        return kept


# --- tool hallucination and DPO labeling ------------------------------------------

def detect_tool_hallucination(conv: Conversation) -> bool:
    """True when no tools are declared yet an assistant output contains a tool call."""
    if conv.declared_tools():
        return False
    return bool(assistant_tool_calls(conv))


def hallucination_rate(convs: Sequence[Conversation]) -> float:
    if not convs:
        raise ValueError("hallucination rate of an empty set is undefined")
    return sum(map(detect_tool_hallucination, convs)) / len(convs)


CATEGORIES = ("no_tools", "with_tools", "hallucination_penalty")


@dataclass(frozen=True)
class Rollout:
    prompt_id: Any
    sample_id: Any
    correct: bool
    tool_called: bool
    tools_declared: bool


@dataclass(frozen=True)
class PreferencePair:
    prompt_id: Any
    chosen: Any
    rejected: Any
    category: str

    def __post_init__(self):
        if self.chosen == self.rejected:
            raise ValueError("chosen and rejected must differ")
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")


def prompt_category(rollouts: Sequence[Rollout]) -> str:
    if any(r.tools_declared for r in rollouts):
        return "with_tools"
    if any(r.tool_called for r in rollouts):
        return "hallucination_penalty"
    return "no_tools"


def _tier(r: Rollout, category: str) -> int:
    if category == "hallucination_penalty":
        return 0 if r.tool_called else 1 + int(r.correct)
    return int(r.correct)


def _stable_key(value) -> int:
    return int.from_bytes(hashlib.blake2b(repr(value).encode(), digest_size=8).digest(), "big")


def label_dpo_pairs(
    rollouts: Iterable[Rollout],
    seed: int = 0,
    max_pairs_per_prompt: int | None = None,
) -> tuple[list[PreferencePair], list]:
    """Build (chosen, rejected) pairs per prompt.

    Rollouts are ranked into tiers: correctness alone for ``no_tools`` and
    ``with_tools`` prompts; for ``hallucination_penalty`` prompts any tool
    call ranks below every clean rollout, then correctness. Chosen members
    come from the top tier, rejected ones from lower tiers, matched after a
    seeded shuffle. Returns the pairs and the ids of prompts with no
    preference signal.
    """
    by_prompt: dict[Any, list[Rollout]] = {}
    for r in rollouts:
        by_prompt.setdefault(r.prompt_id, []).append(r)

    pairs: list[PreferencePair] = []
    skipped = []
    for pid, group in by_prompt.items():
        if len(group) < 2:
            skipped.append(pid)
            continue
        category = prompt_category(group)
        tiers = [_tier(r, category) for r in group]
        top = max(tiers)
        chosen = [r for r, t in zip(group, tiers) if t == top]
        rejected = [r for r, t in zip(group, tiers) if t < top]
        if not rejected:
            skipped.append(pid)
            continue
        rng = np.random.default_rng([seed, _stable_key(pid)])
        chosen = [chosen[i] for i in rng.permutation(len(chosen))]
        rejected = [rejected[i] for i in rng.permutation(len(rejected))]
        n = min(len(chosen), len(rejected))
        if max_pairs_per_prompt is not None:
            n = min(n, max_pairs_per_prompt)
        pairs.extend(PreferencePair(pid, c.sample_id, r.sample_id, category) for c, r in zip(chosen[:n], rejected[:n]))
    return pairs, skipped
