"""RLVR curriculum: Gaussian pass-rate targeting under fixed domain ratios.

Also home to the warmup-stable-decay learning-rate schedule and the
prompt-sensitivity metric, which are small enough not to need modules of
their own.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import ConfigError, check_matrix, check_positive
from .config import get_value, prefixed


@dataclass(frozen=True)
class TaskProfile:
    task_id: str
    domain: str
    pass_rate: float

    def __post_init__(self):
        if not 0.0 <= self.pass_rate <= 1.0:
            raise ValueError(f"pass_rate of {self.task_id!r} must lie in [0, 1], got {self.pass_rate}")


@dataclass(frozen=True)
class CurriculumConfig:
    domain_ratios: Mapping[str, float]
    mu_start: float = 0.9
    mu_end: float = 0.2
    sigma: float = 0.2
    total_steps: int = 100
    batch_size: int = 128
    seed: int = 0

    def __post_init__(self):
        ratios = dict(sorted(self.domain_ratios.items()))
        if not ratios:
            raise ConfigError("domain_ratios is empty")
        if any(r < 0 for r in ratios.values()) or abs(sum(ratios.values()) - 1.0) > 1e-9:
            raise ConfigError(f"domain ratios must be non-negative and sum to 1, got {ratios}")
        if not 0.0 <= self.mu_end <= self.mu_start <= 1.0:
            raise ConfigError("need 0 <= mu_end <= mu_start <= 1")
        check_positive(self.sigma, "sigma")
        check_positive(self.total_steps, "total_steps")
        check_positive(self.batch_size, "batch_size")
        object.__setattr__(self, "domain_ratios", ratios)

    @classmethod
    def from_config(cls, cfg: Mapping[str, str]) -> "CurriculumConfig":
        ratios = {k: float(v) for k, v in prefixed(cfg, "domain_ratio").items()}
        return cls(
            domain_ratios=ratios,
            mu_start=get_value(cfg, "mu_start", float, cls.mu_start),
            mu_end=get_value(cfg, "mu_end", float, cls.mu_end),
            sigma=get_value(cfg, "sigma", float, cls.sigma),
            total_steps=get_value(cfg, "total_steps", int, cls.total_steps),
            batch_size=get_value(cfg, "batch_size", int, cls.batch_size),
            seed=get_value(cfg, "seed", int, cls.seed),
        )

    def target_mean(self, step: int) -> float:
        return self.mu_start + (step / self.total_steps) * (self.mu_end - self.mu_start)


@dataclass(frozen=True)
class BatchPlan:
    step: int
    entries: tuple[str, ...]
    domain_counts: dict[str, int]
    target_mean: float
    # domains whose quota exceeded the eligible pool and were drawn with replacement
    with_replacement: tuple[str, ...] = field(default=())


def filter_solved(profiles: Sequence[TaskProfile]) -> list[TaskProfile]:
    """Drop tasks the reference checkpoint already solves every time."""
    return [p for p in profiles if p.pass_rate < 1.0]


def domain_quotas(ratios: Mapping[str, float], batch_size: int) -> dict[str, int]:
    """Largest-remainder apportionment of ``batch_size`` over the domains."""
    exact = {d: r * batch_size for d, r in ratios.items()}
    quotas = {d: math.floor(x) for d, x in exact.items()}
    short = batch_size - sum(quotas.values())
    # ties in remainder resolved by domain name
    for d in sorted(exact, key=lambda d: (-(exact[d] - quotas[d]), d))[:short]:
        quotas[d] += 1
    return quotas


def gaussian_weights(pass_rates: Sequence[float], mu: float, sigma: float) -> np.ndarray:
    """Unnormalized Gaussian density of each pass rate around ``mu``."""
    x = np.asarray(pass_rates, dtype=float)
    return np.exp(-0.5 * ((x - mu) / sigma) ** 2)


def selection_probabilities(pass_rates: Sequence[float], mu: float, sigma: float) -> np.ndarray:
    w = gaussian_weights(pass_rates, mu, sigma)
    total = w.sum()
    if total == 0.0 or not np.isfinite(total):
        return np.full(len(w), 1.0 / len(w))
    return w / total


def _group_by_domain(profiles: Sequence[TaskProfile]) -> dict[str, list[TaskProfile]]:
    pools: dict[str, list[TaskProfile]] = {}
    for p in profiles:
        pools.setdefault(p.domain, []).append(p)
    return pools


def sample_batch(profiles: Sequence[TaskProfile], cfg: CurriculumConfig, step: int) -> BatchPlan:
    """Draw the batch for ``step``.

    Each domain gets its fixed quota; within a domain tasks are drawn without
    replacement with probability proportional to the Gaussian density of their
    pass rate around the step's target mean. The result depends only on
    ``(profiles, cfg, step)``.
    """
    if step < 0:
        raise ValueError(f"step must be non-negative, got {step}")
    pools = _group_by_domain(profiles)
    missing = [d for d in cfg.domain_ratios if not pools.get(d)]
    if missing:
        raise ValueError(f"no eligible tasks for domain(s) {missing}")

    rng = np.random.default_rng([cfg.seed, step])
    mu = cfg.target_mean(step)
    quotas = domain_quotas(cfg.domain_ratios, cfg.batch_size)
    entries: list[str] = []
    flagged = []
    for domain, quota in quotas.items():
        if quota == 0:
            continue
        pool = pools[domain]
        probs = selection_probabilities([p.pass_rate for p in pool], mu, cfg.sigma)
        replace = quota > len(pool)
        if replace:
            flagged.append(domain)
        else:
            # numpy rejects p with fewer non-zero entries than draws
            probs = np.maximum(probs, np.finfo(float).tiny)
            probs /= probs.sum()
        picks = rng.choice(len(pool), size=quota, replace=replace, p=probs)
        entries.extend(pool[i].task_id for i in picks)
    order = rng.permutation(len(entries))
    return BatchPlan(
        step=step,
        entries=tuple(entries[i] for i in order),
        domain_counts={d: q for d, q in quotas.items()},
        target_mean=mu,
        with_replacement=tuple(flagged),
    )


def expected_pass_rate(profiles: Sequence[TaskProfile], cfg: CurriculumConfig, step: int) -> float:
    """Quota-weighted mean pass rate of a single Gaussian-weighted draw per domain."""
    pools = _group_by_domain(profiles)
    mu = cfg.target_mean(step)
    total = 0.0
    for domain, ratio in cfg.domain_ratios.items():
        rates = np.array([p.pass_rate for p in pools[domain]])
        total += ratio * float(selection_probabilities(rates, mu, cfg.sigma) @ rates)
    return total


class CurriculumSampler(BaseEstimator):
    """Batch planner over a profiled task pool.

    ``fit`` ingests task profiles (dropping fully solved tasks); ``sample``
    returns the plan for a training step. Re-profiling is a second ``fit``.
    """

    def __init__(self, domain_ratios=None, mu_start=0.9, mu_end=0.2, sigma=0.2, total_steps=100, batch_size=128, seed=0):
        self.domain_ratios = domain_ratios
        self.mu_start = mu_start
        self.mu_end = mu_end
        self.sigma = sigma
        self.total_steps = total_steps
        self.batch_size = batch_size
        self.seed = seed

    def fit(self, profiles: Sequence[TaskProfile], y=None):
        eligible = filter_solved(profiles)
        ratios = self.domain_ratios
        if ratios is None:
            domains = sorted({p.domain for p in eligible})
            ratios = {d: 1.0 / len(domains) for d in domains}
        self.config_ = CurriculumConfig(dict(ratios), self.mu_start, self.mu_end, self.sigma,
                                        self.total_steps, self.batch_size, self.seed)
        self.profiles_ = eligible
        self.n_filtered_ = len(profiles) - len(eligible)
        return self

    def sample(self, step: int) -> BatchPlan:
        check_is_fitted(self, "profiles_")
        return sample_batch(self.profiles_, self.config_, step)

    def plans(self, steps) -> list[BatchPlan]:
        return [self.sample(s) for s in steps]


# --- learning-rate schedule ---------------------------------------------------

@dataclass(frozen=True)
class WsdConfig:
    warmup_tokens: float = 8.4e9
    total_tokens: float = 25e12
    stable_fraction: float = 0.8
    lr_max: float = 1e-3
    lr_min: float = 1e-5

    def __post_init__(self):
        if not 0 < self.warmup_tokens < self.decay_start < self.total_tokens:
            raise ConfigError("need 0 < warmup_tokens < stable_fraction * total_tokens < total_tokens")
        if not 0 < self.lr_min < self.lr_max:
            raise ConfigError("need 0 < lr_min < lr_max")

    @property
    def decay_start(self) -> float:
        return self.stable_fraction * self.total_tokens

    @classmethod
    def from_config(cls, cfg: Mapping[str, str]) -> "WsdConfig":
        defaults = cls()
        return cls(**{k: get_value(cfg, k, float, getattr(defaults, k)) for k in defaults.__dataclass_fields__})


def wsd_lr(tokens_seen: float, cfg: WsdConfig = WsdConfig()) -> float:
    """Linear warmup, flat plateau, then log-linear decay to ``lr_min``."""
    if not 0 <= tokens_seen <= cfg.total_tokens:
        raise ValueError(f"tokens_seen must lie in [0, {cfg.total_tokens}], got {tokens_seen}")
    if tokens_seen < cfg.warmup_tokens:
        return cfg.lr_max * tokens_seen / cfg.warmup_tokens
    if tokens_seen <= cfg.decay_start:
        return cfg.lr_max
    if tokens_seen == cfg.total_tokens:
        return cfg.lr_min
    frac = (tokens_seen - cfg.decay_start) / (cfg.total_tokens - cfg.decay_start)
    return cfg.lr_max * (cfg.lr_min / cfg.lr_max) ** frac


# --- evaluation robustness ----------------------------------------------------

def prompt_sensitivity(accuracy) -> float:
    """Population std over prompt variants of the per-prompt mean accuracy.

    ``accuracy`` is a ``(prompts, seeds)`` matrix.
    """
    acc = check_matrix(accuracy, "accuracy")
    if acc.shape[0] < 2 or acc.shape[1] < 1:
        raise ValueError(f"need >= 2 prompts and >= 1 seed, got shape {acc.shape}")
    return float(acc.mean(axis=1).std())
