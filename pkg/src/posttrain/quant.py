"""Selective mixed-precision planning for hybrid Mamba / attention / MoE stacks.

The selective policy keeps every attention layer and the Mamba layer directly
feeding it in BF16, quantizes everything else (weights and KV cache) to FP8,
and keeps the Mamba Conv1D weights in BF16 throughout.
"""

from __future__ import annotations

import warnings
from dataclasses import MISSING, asdict, dataclass, fields
from pathlib import Path
from typing import Mapping

from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import ConfigError

LAYER_KINDS = ("mamba", "attention", "moe")
PRECISIONS = ("BF16", "FP8")
BYTES_PER_ELEMENT = {"BF16": 2, "FP8": 1}

# single-letter pattern codes, as in hybrid-model layer strings
_CODES = {"M": "mamba", "*": "attention", "E": "moe"}


@dataclass(frozen=True)
class LayerPattern:
    layers: tuple[str, ...]

    def __post_init__(self):
        layers = tuple(k.strip().lower() for k in self.layers)
        if not layers:
            raise ValueError("layer pattern is empty")
        bad = sorted({k for k in layers if k not in LAYER_KINDS})
        if bad:
            raise ValueError(f"unknown layer kind(s) {bad}; expected one of {LAYER_KINDS}")
        object.__setattr__(self, "layers", layers)

    @classmethod
    def from_code(cls, code: str) -> "LayerPattern":
        """Parse a compact string such as ``"MEM*EME"``."""
        try:
            return cls(tuple(_CODES[c] for c in code if not c.isspace()))
        except KeyError as exc:
            raise ValueError(f"unknown layer code {exc.args[0]!r}") from None

    @classmethod
    def from_file(cls, path: str | Path) -> "LayerPattern":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(tuple(s for s in (ln.split("#", 1)[0].strip() for ln in lines) if s))

    def __len__(self) -> int:
        return len(self.layers)

    def count(self, kind: str) -> int:
        return self.layers.count(kind)


@dataclass(frozen=True)
class LayerPrecision:
    kind: str
    weights: str
    note: str


@dataclass(frozen=True)
class PrecisionPlan:
    per_layer: tuple[LayerPrecision, ...]
    kv_cache: str
    conv1d: str
    embedding: str
    policy: str

    @property
    def pattern(self) -> LayerPattern:
        return LayerPattern(tuple(lp.kind for lp in self.per_layer))

    def bf16_indices(self, kind: str | None = None) -> list[int]:
        return [i for i, lp in enumerate(self.per_layer) if lp.weights == "BF16" and (kind is None or lp.kind == kind)]

    def to_dict(self) -> dict:
        return {
            "policy": self.policy,
            "kv_cache": self.kv_cache,
            "conv1d": self.conv1d,
            "embedding": self.embedding,
            "per_layer": [asdict(lp) for lp in self.per_layer],
        }


@dataclass(frozen=True)
class QuantPolicy:
    """One point on the ablation grid.

    ``attention``: precision of attention layers. ``mamba``: ``"mixed"`` keeps
    the Mamba layers feeding attention in BF16, ``"FP8"`` quantizes all of
    them. ``kv_cache``, ``conv1d``, ``embedding``, ``moe``: precisions.
    """

    attention: str = "BF16"
    mamba: str = "mixed"
    kv_cache: str = "FP8"
    moe: str = "FP8"
    conv1d: str = "BF16"
    embedding: str = "BF16"

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            allowed = PRECISIONS + ("mixed",) if f.name == "mamba" else PRECISIONS
            if value not in allowed:
                raise ConfigError(f"{f.name} precision must be one of {allowed}, got {value!r}")


POLICIES = {
    "selective": QuantPolicy(),
    "all_fp8": QuantPolicy("FP8", "FP8", "FP8", "FP8", "FP8", "FP8"),
    "all_bf16": QuantPolicy("BF16", "BF16", "BF16", "BF16", "BF16", "BF16"),
}


def resolve_policy(policy: str | QuantPolicy) -> tuple[str, QuantPolicy]:
    if isinstance(policy, QuantPolicy):
        return "custom", policy
    if policy not in POLICIES:
        raise ConfigError(f"unknown policy {policy!r}; expected one of {sorted(POLICIES)}")
    return policy, POLICIES[policy]


def plan(pattern: LayerPattern | PrecisionPlan, policy: str | QuantPolicy = "selective") -> PrecisionPlan:
    """Assign a weight precision to every layer of ``pattern``."""
    if isinstance(pattern, PrecisionPlan):
        pattern = pattern.pattern
    name, pol = resolve_policy(policy)
    layers = pattern.layers

    feeds_attention = set()
    for i, kind in enumerate(layers):
        if kind != "attention":
            continue
        if i > 0 and layers[i - 1] == "mamba":
            feeds_attention.add(i - 1)
        elif i == 0:
            warnings.warn("attention layer at position 0 has no preceding Mamba layer", stacklevel=2)

    per_layer = []
    for i, kind in enumerate(layers):
        if kind == "attention":
            per_layer.append(LayerPrecision(kind, pol.attention, "attention"))
        elif kind == "mamba":
            if pol.mamba == "mixed":
                weights = "BF16" if i in feeds_attention else "FP8"
                note = "feeds attention" if i in feeds_attention else "mamba"
            else:
                weights, note = pol.mamba, "mamba"
            per_layer.append(LayerPrecision(kind, weights, note))
        else:
            per_layer.append(LayerPrecision(kind, pol.moe, "moe"))
    return PrecisionPlan(tuple(per_layer), pol.kv_cache, pol.conv1d, pol.embedding, name)


# --- parameter counting and memory ------------------------------------------------

@dataclass(frozen=True)
class ModelDims:
    model_dim: int
    vocab_size: int
    n_heads: int
    n_kv_heads: int
    head_dim: int
    mamba_heads: int
    mamba_head_dim: int
    mamba_state_dim: int
    mamba_groups: int
    n_experts: int
    n_shared_experts: int
    expert_dim: int
    mamba_conv_kernel: int = 4
    shared_expert_dim: int | None = None
    tied_embeddings: bool = False

    @classmethod
    def from_mapping(cls, cfg: Mapping[str, str]) -> "ModelDims":
        required = [f.name for f in fields(cls) if f.default is MISSING]
        missing = [k for k in required if k not in cfg]
        if missing:
            raise ConfigError(f"missing model dimension(s): {', '.join(missing)}")
        values = {}
        for f in fields(cls):
            if f.name not in cfg:
                continue
            raw = cfg[f.name]
            try:
                values[f.name] = raw.strip().lower() in {"1", "true", "yes"} if f.name == "tied_embeddings" else int(raw)
            except ValueError:
                raise ConfigError(f"bad value for {f.name!r}: {raw!r}") from None
        return cls(**values)

    @property
    def mamba_inner(self) -> int:
        return self.mamba_heads * self.mamba_head_dim

    @property
    def conv_channels(self) -> int:
        return self.mamba_inner + 2 * self.mamba_groups * self.mamba_state_dim


def layer_parameters(kind: str, dims: ModelDims) -> dict[str, int]:
    """Parameter count of one layer, split into ``weights`` and ``conv1d``.

    Includes the layer's pre-norm. Linear layers carry no bias.
    """
    d = dims.model_dim
    if kind == "attention":
        q = d * dims.n_heads * dims.head_dim
        kv = 2 * d * dims.n_kv_heads * dims.head_dim
        o = dims.n_heads * dims.head_dim * d
        return {"weights": q + kv + o + d, "conv1d": 0}
    if kind == "mamba":
        inner = dims.mamba_inner
        in_proj = d * (2 * inner + 2 * dims.mamba_groups * dims.mamba_state_dim + dims.mamba_heads)
        out_proj = inner * d
        # A_log, D, dt_bias per head; gated RMSNorm over the inner dim
        extra = 3 * dims.mamba_heads + inner + d
        conv = dims.conv_channels * (dims.mamba_conv_kernel + 1)
        return {"weights": in_proj + out_proj + extra, "conv1d": conv}
    if kind == "moe":
        shared_dim = dims.shared_expert_dim or dims.expert_dim
        routed = dims.n_experts * 2 * d * dims.expert_dim
        shared = dims.n_shared_experts * 2 * d * shared_dim
        router = d * dims.n_experts
        return {"weights": routed + shared + router + d, "conv1d": 0}
    raise ValueError(f"unknown layer kind {kind!r}")


def parameter_count(pattern: LayerPattern, dims: ModelDims) -> int:
    embed = dims.vocab_size * dims.model_dim * (1 if dims.tied_embeddings else 2)
    final_norm = dims.model_dim
    layers = sum(sum(layer_parameters(k, dims).values()) for k in pattern.layers)
    return embed + final_norm + layers


def memory_estimate(pattern: LayerPattern, plan_: PrecisionPlan, dims: ModelDims) -> dict[str, int]:
    """Weight bytes by category plus KV-cache bytes per token of context."""
    if len(plan_.per_layer) != len(pattern):
        raise ValueError("plan and pattern have different depths")
    out = {kind: 0 for kind in LAYER_KINDS}
    out["conv1d"] = 0
    for kind, lp in zip(pattern.layers, plan_.per_layer):
        params = layer_parameters(kind, dims)
        out[kind] += params["weights"] * BYTES_PER_ELEMENT[lp.weights]
        out["conv1d"] += params["conv1d"] * BYTES_PER_ELEMENT[plan_.conv1d]
    embed = dims.vocab_size * dims.model_dim * (1 if dims.tied_embeddings else 2) + dims.model_dim
    out["embedding"] = embed * BYTES_PER_ELEMENT[plan_.embedding]
    out["total_weights"] = sum(out[k] for k in (*LAYER_KINDS, "conv1d", "embedding"))
    kv_elems = pattern.count("attention") * 2 * dims.n_kv_heads * dims.head_dim
    out["kv_cache_per_token"] = kv_elems * BYTES_PER_ELEMENT[plan_.kv_cache]
    return out


class SelectivePrecisionPlanner(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit`` a layer pattern, ``transform`` to per-layer precisions."""

    def __init__(self, policy="selective"):
        self.policy = policy

    def fit(self, X, y=None):
        self.pattern_ = X if isinstance(X, LayerPattern) else LayerPattern(tuple(X))
        self.plan_ = plan(self.pattern_, self.policy)
        return self

    def transform(self, X) -> list[str]:
        """Precisions for pattern ``X``, or for the fitted pattern when ``X`` is None."""
        check_is_fitted(self, "plan_")
        target = self.plan_ if X is None else plan(X if isinstance(X, LayerPattern) else LayerPattern(tuple(X)), self.policy)
        return [lp.weights for lp in target.per_layer]
