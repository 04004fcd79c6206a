"""RLHF reward computation.

Covers the generative reward model's own training reward, circular pairwise
judging with the tiebreaker, base-reward aggregation, group-relative length
control with quality-gated conciseness bonuses, GRPO advantages and the
overlong mask.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Any, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import (
    ConfigError,
    CoverageError,
    check_in_range,
    check_lengths,
    check_matrix,
    check_positive,
    check_vector,
)
from .config import get_value

HELPFULNESS_RANGE = (1.0, 5.0)
RANKING_RANGE = (1.0, 6.0)
RANKING_MIDPOINT = 3.5


# --- GenRM training reward ----------------------------------------------------

@dataclass(frozen=True)
class JudgePrediction:
    p_h1: float
    p_h2: float
    p_r: float
    format_violation: bool = False

    def __post_init__(self):
        check_in_range(self.p_h1, *HELPFULNESS_RANGE, "p_h1")
        check_in_range(self.p_h2, *HELPFULNESS_RANGE, "p_h2")
        check_in_range(self.p_r, *RANKING_RANGE, "p_r")


@dataclass(frozen=True)
class JudgeGroundTruth:
    g_h1: float
    g_h2: float
    g_r: float

    def __post_init__(self):
        check_in_range(self.g_h1, *HELPFULNESS_RANGE, "g_h1")
        check_in_range(self.g_h2, *HELPFULNESS_RANGE, "g_h2")
        check_in_range(self.g_r, *RANKING_RANGE, "g_r")


@dataclass(frozen=True)
class GenRmRewardConfig:
    c1: float = 10.0
    c2: float = 1.0

    def __post_init__(self):
        check_positive(self.c1, "c1", allow_zero=True)
        check_positive(self.c2, "c2", allow_zero=True)

    @classmethod
    def from_config(cls, cfg: Mapping[str, str]) -> "GenRmRewardConfig":
        return cls(get_value(cfg, "c1", float, cls.c1), get_value(cfg, "c2", float, cls.c2))


def genrm_reward(pred: JudgePrediction, truth: JudgeGroundTruth, cfg: GenRmRewardConfig = GenRmRewardConfig()) -> float:
    """Negative weighted L1 distance between judge output and ground truth.

    Format violations cost ``c1``; the ranking error is weighted by ``c2``.
    """
    return (
        -cfg.c1 * float(pred.format_violation)
        - abs(pred.p_h1 - truth.g_h1)
        - abs(pred.p_h2 - truth.g_h2)
        - cfg.c2 * abs(pred.p_r - truth.g_r)
    )


@dataclass(frozen=True)
class JudgeSample:
    """One GenRM training example: two responses and their ground truth."""

    response_1: Any
    response_2: Any
    truth: JudgeGroundTruth


def swap_truth(truth: JudgeGroundTruth) -> JudgeGroundTruth:
    lo, hi = RANKING_RANGE
    return JudgeGroundTruth(truth.g_h2, truth.g_h1, lo + hi - truth.g_r)


def swap_prediction(pred: JudgePrediction) -> JudgePrediction:
    lo, hi = RANKING_RANGE
    return JudgePrediction(pred.p_h2, pred.p_h1, lo + hi - pred.p_r, pred.format_violation)


def position_swap(sample: JudgeSample) -> JudgeSample:
    """Swap the two responses; the ranking label reflects as ``g_r -> 7 - g_r``."""
    return JudgeSample(sample.response_2, sample.response_1, swap_truth(sample.truth))


# --- circular comparisons ----------------------------------------------------

def circular_schedule(n: int) -> list[tuple[int, int]]:
    """Pairs ``(i, i+1 mod n)`` for a group of ``n`` responses, 0-based."""
    if n < 2:
        raise ValueError(f"a comparison group needs at least 2 responses, got {n}")
    return [(i, (i + 1) % n) for i in range(n)]


@dataclass(frozen=True)
class PairVerdict:
    first: int
    second: int
    s_i: float
    s_j: float
    s_r: float

    def __post_init__(self):
        if self.first == self.second:
            raise ValueError("a verdict must compare two different responses")


def tiebreak(verdict: PairVerdict) -> PairVerdict:
    """Split tied helpfulness scores using the ranking score.

    Idempotent: after a split the scores are equal only when ``s_r`` is the
    midpoint, where the split is a no-op.
    """
    if verdict.s_i != verdict.s_j:
        return verdict
    return replace(
        verdict,
        s_i=verdict.s_i + (RANKING_MIDPOINT - verdict.s_r),
        s_j=verdict.s_j + (verdict.s_r - RANKING_MIDPOINT),
    )


def check_coverage(n: int, verdicts: Sequence[PairVerdict]) -> None:
    """Each response must appear exactly once as ``first`` and once as ``second``."""
    as_first = [0] * n
    as_second = [0] * n
    for v in verdicts:
        for idx in (v.first, v.second):
            if not 0 <= idx < n:
                raise CoverageError(f"verdict references response {idx} outside group of {n}")
        as_first[v.first] += 1
        as_second[v.second] += 1
    for i in range(n):
        if as_first[i] != 1 or as_second[i] != 1:
            raise CoverageError(
                f"response {i} judged {as_first[i]}x in first position and {as_second[i]}x in second; expected 1 and 1"
            )


def base_rewards(n: int, verdicts: Sequence[PairVerdict]) -> np.ndarray:
    """Average of the two (tiebroken) helpfulness scores each response received."""
    check_coverage(n, verdicts)
    total = np.zeros(n)
    for v in map(tiebreak, verdicts):
        total[v.first] += v.s_i
        total[v.second] += v.s_j
    return total / 2.0


# --- group-relative length control -------------------------------------------

@dataclass(frozen=True)
class Response:
    id: Any
    think_len: int
    answer_len: int
    total_len: int | None = None

    def __post_init__(self):
        total = self.think_len + self.answer_len if self.total_len is None else self.total_len
        object.__setattr__(self, "total_len", total)
        if min(self.think_len, self.answer_len) < 0 or self.think_len + self.answer_len > total:
            raise ValueError(f"inconsistent lengths for response {self.id!r}")


@dataclass(frozen=True)
class ResponseGroup:
    prompt_id: Any
    responses: tuple[Response, ...]

    def __post_init__(self):
        object.__setattr__(self, "responses", tuple(self.responses))

    def __len__(self) -> int:
        return len(self.responses)


@dataclass(frozen=True)
class LengthControlConfig:
    lambda_think: float = 0.5
    lambda_answer: float = 0.5
    beta_think: float = 0.5
    beta_answer: float = 0.5
    tau_percentile: float = 80.0

    def __post_init__(self):
        for name in ("lambda_think", "lambda_answer", "beta_think", "beta_answer"):
            check_positive(getattr(self, name), name, allow_zero=True)
        if not 0 <= self.tau_percentile <= 100:
            raise ConfigError(f"tau_percentile must lie in [0, 100], got {self.tau_percentile}")

    @classmethod
    def from_config(cls, cfg: Mapping[str, str]) -> "LengthControlConfig":
        defaults = cls()
        return cls(**{k: get_value(cfg, k, float, getattr(defaults, k)) for k in defaults.__dataclass_fields__})


@dataclass(frozen=True)
class RewardBreakdown:
    base: float
    length_adj_think: float
    length_adj_answer: float
    bonus: float
    final: float


def length_weights(lengths: Sequence[float]) -> np.ndarray:
    """Centered min-max weights; the shortest response gets the largest value.

    A group of equal lengths carries no length signal and gets all zeros.
    """
    ell = check_lengths(lengths, "lengths", min_len=2)
    lo, hi = ell.min(), ell.max()
    if hi == lo:
        return np.zeros_like(ell)
    w = 1.0 - (ell - lo) / (hi - lo)
    return w - w.mean()


def nearest_rank_percentile(values: Sequence[float], p: float) -> float:
    """Smallest value with at least ``p`` percent of the sample at or below it."""
    ordered = sorted(values)
    rank = max(1, math.ceil(p / 100.0 * len(ordered)))
    return ordered[rank - 1]


def final_rewards(
    group: ResponseGroup | Sequence[Response],
    base: Sequence[float],
    cfg: LengthControlConfig = LengthControlConfig(),
) -> list[RewardBreakdown]:
    responses = group.responses if isinstance(group, ResponseGroup) else tuple(group)
    base = check_vector(base, "base")
    if len(base) != len(responses):
        raise ValueError(f"{len(base)} base rewards for a group of {len(responses)}")
    think = np.array([r.think_len for r in responses], dtype=float)
    answer = np.array([r.answer_len for r in responses], dtype=float)
    adj_think = cfg.lambda_think * length_weights(think)
    adj_answer = cfg.lambda_answer * length_weights(answer)

    bonus = np.zeros(len(base))
    threshold = nearest_rank_percentile(base, cfg.tau_percentile)
    k = int(np.argmin(think))  # first index on ties
    if base[k] >= threshold:
        bonus[k] += cfg.beta_think
    m = int(np.argmin(answer))
    if base[m] >= threshold:
        bonus[m] += cfg.beta_answer

    out = []
    for i in range(len(base)):
        b, t, a, x = float(base[i]), float(adj_think[i]), float(adj_answer[i]), float(bonus[i])
        out.append(RewardBreakdown(b, t, a, x, b + t + a + x))
    return out


# --- GRPO -------------------------------------------------------------------

def grpo_advantages(rewards: Sequence[float], eps: float = 1e-8, ddof: int = 0) -> np.ndarray:
    """Group-normalized advantages ``(r - mean) / (std + eps)``; zeros for a constant group."""
    r = check_vector(rewards, "rewards", min_len=2)
    if np.ptp(r) == 0:
        return np.zeros_like(r)
    return (r - r.mean()) / (r.std(ddof=ddof) + eps)


def overlong_mask(lengths: Sequence[int], max_len: int) -> np.ndarray:
    """True where a rollout reached ``max_len`` and must be left out of the loss."""
    if max_len <= 0:
        raise ValueError(f"max_len must be positive, got {max_len}")
    return check_lengths(lengths, "lengths") >= max_len


# --- end-to-end group scoring -------------------------------------------------

@dataclass(frozen=True)
class ScoredResponse:
    id: Any
    breakdown: RewardBreakdown
    advantage: float
    overlong: bool


def score_group(
    group: ResponseGroup,
    verdicts: Sequence[PairVerdict],
    cfg: LengthControlConfig = LengthControlConfig(),
    max_len: int | None = None,
) -> list[ScoredResponse]:
    """Base rewards from verdicts, then length control and advantages.

    Responses that hit ``max_len`` keep their base reward for reporting but are
    excluded from the length statistics, the percentile gate and the advantage
    normalization; their advantage is 0.
    """
    base = base_rewards(len(group), verdicts)
    mask = (
        overlong_mask([r.total_len for r in group.responses], max_len)
        if max_len is not None
        else np.zeros(len(group), dtype=bool)
    )
    keep = np.flatnonzero(~mask)
    breakdowns: list[RewardBreakdown] = [RewardBreakdown(b, 0.0, 0.0, 0.0, b) for b in base.tolist()]
    advantages = np.zeros(len(group))
    if len(keep) >= 2:
        kept = final_rewards([group.responses[i] for i in keep], base[keep], cfg)
        for i, bd in zip(keep, kept):
            breakdowns[i] = bd
        advantages[keep] = grpo_advantages([bd.final for bd in kept])
    return [
        ScoredResponse(r.id, breakdowns[i], float(advantages[i]), bool(mask[i]))
        for i, r in enumerate(group.responses)
    ]


class GroupLengthControl(TransformerMixin, BaseEstimator):
    """Length-controlled rewards for one response group, sklearn style.

    ``transform`` takes an ``(n, 3)`` array of ``[base, think_len, answer_len]``
    rows and returns the final reward per row.
    """

    def __init__(self, lambda_think=0.5, lambda_answer=0.5, beta_think=0.5, beta_answer=0.5, tau_percentile=80.0):
        self.lambda_think = lambda_think
        self.lambda_answer = lambda_answer
        self.beta_think = beta_think
        self.beta_answer = beta_answer
        self.tau_percentile = tau_percentile

    def _config(self) -> LengthControlConfig:
        return LengthControlConfig(**self.get_params())

    def fit(self, X=None, y=None):
        self.config_ = self._config()
        return self

    def breakdown(self, X) -> list[RewardBreakdown]:
        check_is_fitted(self, "config_")
        X = check_matrix(X, "X", n_cols=3)
        group = [Response(i, int(t), int(a)) for i, (t, a) in enumerate(X[:, 1:])]
        return final_rewards(group, X[:, 0], self.config_)

    def transform(self, X) -> np.ndarray:
        return np.array([bd.final for bd in self.breakdown(X)])
