"""Desk-scale simulator of a sigmoid-gated top-k MoE router.

Selection uses ``sigmoid(logit) + bias``; gate weights use the sigmoid score
alone, renormalized over the selected experts. The per-expert bias is nudged
by a fixed step toward balanced load after every batch, which balances
experts without an auxiliary loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import FrozenStateError, check_matrix, check_positive, check_vector
from .config import get_value


@dataclass(frozen=True)
class RouterConfig:
    n_experts: int = 128
    top_k: int = 6
    n_shared: int = 2
    bias_update_rate: float = 1e-3
    lb_coeff: float = 1e-4

    def __post_init__(self):
        if not 0 < self.top_k <= self.n_experts:
            raise ValueError(f"need 0 < top_k <= n_experts, got top_k={self.top_k}, n_experts={self.n_experts}")
        check_positive(self.n_shared, "n_shared", allow_zero=True)
        check_positive(self.bias_update_rate, "bias_update_rate", allow_zero=True)
        check_positive(self.lb_coeff, "lb_coeff", allow_zero=True)

    @classmethod
    def from_config(cls, cfg: Mapping[str, str]) -> "RouterConfig":
        d = cls()
        types = {"n_experts": int, "top_k": int, "n_shared": int, "bias_update_rate": float, "lb_coeff": float}
        return cls(**{k: get_value(cfg, k, t, getattr(d, k)) for k, t in types.items()})


@dataclass(frozen=True)
class RouterState:
    expert_bias: np.ndarray
    cumulative_load: np.ndarray

    @classmethod
    def zeros(cls, n_experts: int) -> "RouterState":
        return cls(np.zeros(n_experts), np.zeros(n_experts, dtype=np.int64))

    def __post_init__(self):
        if self.expert_bias.shape != self.cumulative_load.shape:
            raise ValueError("bias and load vectors must have the same length")


@dataclass(frozen=True)
class RoutingDecision:
    selected: np.ndarray
    gates: np.ndarray
    shared_gate: float = 1.0


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def _check_state(state: RouterState, cfg: RouterConfig) -> None:
    if state.expert_bias.shape[0] != cfg.n_experts:
        raise ValueError(f"router state has {state.expert_bias.shape[0]} experts, config says {cfg.n_experts}")


def _select(scores: np.ndarray, bias: np.ndarray, k: int) -> np.ndarray:
    """Top-k expert indices per row by ``scores + bias``, best first."""
    keys = -(np.atleast_2d(scores) + bias)
    n = keys.shape[1]
    top = np.argpartition(keys, k - 1, axis=1)[:, :k] if k < n else np.tile(np.arange(n), (keys.shape[0], 1))
    order = np.argsort(np.take_along_axis(keys, top, axis=1), axis=1, kind="stable")
    return np.take_along_axis(top, order, axis=1)


def route(logits, state: RouterState, cfg: RouterConfig) -> RoutingDecision:
    logits = check_vector(logits, "logits")
    if logits.shape[0] != cfg.n_experts:
        raise ValueError(f"expected {cfg.n_experts} logits, got {logits.shape[0]}")
    _check_state(state, cfg)
    selected, gates = route_batch(logits[None, :], state, cfg)
    return RoutingDecision(selected[0], gates[0])


def route_batch(logits, state: RouterState, cfg: RouterConfig) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`route` over a ``(tokens, experts)`` matrix.

    Returns ``(selected, gates)``, both shaped ``(tokens, top_k)``.
    """
    logits = check_matrix(logits, "logits", n_cols=cfg.n_experts)
    _check_state(state, cfg)
    scores = sigmoid(logits)
    selected = _select(scores, state.expert_bias, cfg.top_k)
    gates = np.take_along_axis(scores, selected, axis=1)
    return selected, gates / gates.sum(axis=1, keepdims=True)


def expert_loads(selected: np.ndarray, n_experts: int) -> np.ndarray:
    return np.bincount(np.asarray(selected).ravel(), minlength=n_experts)


def update_bias(state: RouterState, batch_loads, cfg: RouterConfig) -> RouterState:
    """One sign-rule step: underloaded experts gain ``u``, overloaded ones lose ``u``."""
    loads = check_vector(batch_loads, "batch_loads")
    if loads.shape != state.expert_bias.shape:
        raise ValueError(f"expected {state.expert_bias.shape[0]} loads, got {loads.shape[0]}")
    step = cfg.bias_update_rate * np.sign(loads.mean() - loads)
    return RouterState(state.expert_bias + step, state.cumulative_load + loads.astype(np.int64))


def gate_probabilities(logits) -> np.ndarray:
    """Sigmoid scores normalized over all experts, per token."""
    scores = sigmoid(check_matrix(logits, "logits"))
    return scores / scores.sum(axis=1, keepdims=True)


def lb_loss(gate_probs, selections, cfg: RouterConfig, *, sequence_ids=None) -> float:
    """``alpha * E * sum_i f_i * p_i`` load-balancing loss.

    ``f_i`` is the share of routing assignments that went to expert ``i`` and
    ``p_i`` the mean gate probability of expert ``i``. With ``sequence_ids``
    the loss is computed per sequence and averaged; otherwise over the batch.
    """
    probs = check_matrix(gate_probs, "gate_probs", n_cols=cfg.n_experts)
    sel = np.asarray(selections)
    if sel.ndim != 2 or sel.shape[0] != probs.shape[0]:
        raise ValueError("selections must be (tokens, top_k) matching gate_probs rows")

    def one(p: np.ndarray, s: np.ndarray) -> float:
        f = expert_loads(s, cfg.n_experts) / s.size
        return cfg.lb_coeff * cfg.n_experts * float(f @ p.mean(axis=0))

    if sequence_ids is None:
        return one(probs, sel)
    seq = np.asarray(sequence_ids)
    return float(np.mean([one(probs[seq == q], sel[seq == q]) for q in np.unique(seq)]))


def load_imbalance(loads) -> float:
    """max load / mean load."""
    loads = np.asarray(loads, dtype=float)
    return float(loads.max() / loads.mean())


# --- router with weights, and its frozen view ----------------------------------

@dataclass
class Router:
    """Linear router ``logits = x @ weights`` plus selection-bias state."""

    weights: np.ndarray
    config: RouterConfig
    state: RouterState = field(default=None)

    def __post_init__(self):
        if self.state is None:
            self.state = RouterState.zeros(self.config.n_experts)
        if self.weights.shape[1] != self.config.n_experts:
            raise ValueError("weights must have one column per expert")

    def logits(self, hidden) -> np.ndarray:
        return np.atleast_2d(hidden) @ self.weights

    def route(self, hidden) -> tuple[np.ndarray, np.ndarray]:
        return route_batch(self.logits(hidden), self.state, self.config)

    def update_bias(self, batch_loads) -> RouterState:
        self.state = update_bias(self.state, batch_loads, self.config)
        return self.state

    def apply_weight_update(self, delta) -> None:
        self.weights = self.weights + np.asarray(delta)

    def freeze(self) -> "FrozenRouter":
        return FrozenRouter(self)


class FrozenRouter:
    """View of a :class:`Router` whose weights cannot change.

    Routing and bias updates pass through to the wrapped router.
    """

    def __init__(self, router: Router):
        self._router = router

    @property
    def weights(self) -> np.ndarray:
        view = self._router.weights.view()
        view.flags.writeable = False
        return view

    @property
    def state(self) -> RouterState:
        return self._router.state

    @property
    def config(self) -> RouterConfig:
        return self._router.config

    def logits(self, hidden):
        return self._router.logits(hidden)

    def route(self, hidden):
        return self._router.route(hidden)

    def update_bias(self, batch_loads) -> RouterState:
        return self._router.update_bias(batch_loads)

    def apply_weight_update(self, delta) -> None:
        raise FrozenStateError("router weights are frozen; only the expert bias may change")


def freeze_router(router: Router) -> FrozenRouter:
    return router.freeze()


# --- simulation -------------------------------------------------------------------

def skewed_logit_stream(n_experts: int, tokens_per_step: int, steps: int, seed: int, skew: float = 1.5, noise: float = 1.0):
    """Yield ``(tokens, experts)`` logit batches with a fixed per-expert offset.

    The offsets are evenly spaced over ``[-skew, skew]`` and randomly assigned
    to experts, so some experts are persistently favored.
    """
    rng = np.random.default_rng(seed)
    offsets = rng.permutation(np.linspace(-skew, skew, n_experts))
    for _ in range(steps):
        yield offsets + noise * rng.standard_normal((tokens_per_step, n_experts))


@dataclass
class SimulationTrace:
    loads: list[np.ndarray]
    biases: list[np.ndarray]
    lb_losses: list[float]

    def imbalance(self, last: int = 1) -> float:
        """max/mean of the load summed over the final ``last`` steps."""
        return load_imbalance(np.sum(self.loads[-last:], axis=0))


def simulate(stream: Iterable[np.ndarray], cfg: RouterConfig, state: RouterState | None = None,
             record_bias: bool = True, record_loss: bool = True) -> tuple[RouterState, SimulationTrace]:
    state = RouterState.zeros(cfg.n_experts) if state is None else state
    trace = SimulationTrace([], [], [])
    for logits in stream:
        selected, _ = route_batch(logits, state, cfg)
        loads = expert_loads(selected, cfg.n_experts)
        trace.loads.append(loads)
        if record_loss:
            trace.lb_losses.append(lb_loss(gate_probabilities(logits), selected, cfg))
        state = update_bias(state, loads, cfg)
        if record_bias:
            trace.biases.append(state.expert_bias.copy())
    return state, trace


class AuxLossFreeRouter(BaseEstimator):
    """Bias-balanced top-k router as an estimator.

    ``fit`` consumes batches of router logits, updating the selection bias
    after each; ``predict`` returns the selected experts for new logits.
    """

    def __init__(self, n_experts=128, top_k=6, n_shared=2, bias_update_rate=1e-3, lb_coeff=1e-4):
        self.n_experts = n_experts
        self.top_k = top_k
        self.n_shared = n_shared
        self.bias_update_rate = bias_update_rate
        self.lb_coeff = lb_coeff

    def fit(self, batches: Iterable, y=None):
        self.config_ = RouterConfig(**self.get_params())
        self.state_, self.trace_ = simulate(batches, self.config_, record_bias=False, record_loss=False)
        return self

    def partial_fit(self, batch, y=None):
        if not hasattr(self, "state_"):
            self.config_ = RouterConfig(**self.get_params())
            self.state_ = RouterState.zeros(self.n_experts)
        selected, _ = route_batch(batch, self.state_, self.config_)
        self.state_ = update_bias(self.state_, expert_loads(selected, self.n_experts), self.config_)
        return self

    def predict(self, logits) -> np.ndarray:
        check_is_fitted(self, "state_")
        return route_batch(np.atleast_2d(logits), self.state_, self.config_)[0]

    def gates(self, logits) -> np.ndarray:
        check_is_fitted(self, "state_")
        return route_batch(np.atleast_2d(logits), self.state_, self.config_)[1]
