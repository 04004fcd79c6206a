import warnings

import pytest
from sklearn.base import clone

from oracles import parameter_count_oracle
from posttrain._validation import ConfigError
from posttrain.config import parse_config
from posttrain.quant import (
    LayerPattern,
    ModelDims,
    QuantPolicy,
    SelectivePrecisionPlanner,
    memory_estimate,
    parameter_count,
    plan,
)

TABLE_DIMS = ModelDims(
    model_dim=2688, vocab_size=131072, n_heads=32, n_kv_heads=2, head_dim=128,
    mamba_heads=64, mamba_head_dim=64, mamba_state_dim=128, mamba_groups=8,
    n_experts=128, n_shared_experts=2, expert_dim=1856,
)
# 23 Mamba, 23 MoE, 6 attention; each attention layer follows a Mamba layer
PATTERN_52 = LayerPattern.from_code("MEMEM*EMEMEM*EMEMEM*EMEMEM*EMEMEM*EMEMEM*EMEMEMEMEME")


def test_reference_pattern_counts():
    assert len(PATTERN_52) == 52
    assert (PATTERN_52.count("mamba"), PATTERN_52.count("moe"), PATTERN_52.count("attention")) == (23, 23, 6)


def test_selective_plan():
    p = plan(PATTERN_52)
    att = [i for i, k in enumerate(PATTERN_52.layers) if k == "attention"]
    assert p.bf16_indices("attention") == att
    assert p.bf16_indices("mamba") == [i - 1 for i in att]
    assert p.bf16_indices("moe") == []
    assert (p.kv_cache, p.conv1d, p.embedding) == ("FP8", "BF16", "BF16")


def test_only_the_immediate_predecessor_is_kept():
    p = plan(LayerPattern.from_code("MM*E*M"))
    assert [lp.weights for lp in p.per_layer] == ["FP8", "BF16", "BF16", "FP8", "BF16", "FP8"]


def test_leading_attention_warns():
    with pytest.warns(UserWarning):
        plan(LayerPattern.from_code("*M"))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        plan(LayerPattern.from_code("M*"))


def test_policy_grid():
    fp8 = plan(PATTERN_52, "all_fp8")
    assert all(lp.weights == "FP8" for lp in fp8.per_layer) and fp8.conv1d == "FP8"
    bf16 = plan(PATTERN_52, "all_bf16")
    assert all(lp.weights == "BF16" for lp in bf16.per_layer) and bf16.kv_cache == "BF16"
    custom = plan(PATTERN_52, QuantPolicy(attention="FP8", mamba="FP8"))
    assert custom.bf16_indices() == [] and custom.policy == "custom"
    with pytest.raises(ConfigError):
        plan(PATTERN_52, "nope")
    with pytest.raises(ConfigError):
        QuantPolicy(attention="INT4")


def test_pattern_parsing(tmp_path):
    f = tmp_path / "layers.txt"
    f.write_text("mamba\n# comment\nattention  # inline\n\nmoe\n")
    assert LayerPattern.from_file(f).layers == ("mamba", "attention", "moe")
    with pytest.raises(ValueError):
        LayerPattern.from_code("MX")
    with pytest.raises(ValueError):
        LayerPattern(())


def test_parameter_count_matches_oracle_and_total():
    total = parameter_count(PATTERN_52, TABLE_DIMS)
    assert total == parameter_count_oracle(23, 6, 23)
    assert abs(total - 31.6e9) / 31.6e9 < 0.05


def test_memory_ratios():
    bf16 = memory_estimate(PATTERN_52, plan(PATTERN_52, "all_bf16"), TABLE_DIMS)
    fp8 = memory_estimate(PATTERN_52, plan(PATTERN_52, "all_fp8"), TABLE_DIMS)
    sel = memory_estimate(PATTERN_52, plan(PATTERN_52), TABLE_DIMS)
    assert bf16["total_weights"] == 2 * fp8["total_weights"]
    assert bf16["total_weights"] == 2 * parameter_count(PATTERN_52, TABLE_DIMS)
    assert fp8["total_weights"] < sel["total_weights"] < bf16["total_weights"]
    assert sel["kv_cache_per_token"] == 6 * 2 * 2 * 128


def test_dims_from_config():
    text = "\n".join(f"{k} = {v}" for k, v in vars(TABLE_DIMS).items() if k not in ("shared_expert_dim", "tied_embeddings"))
    assert ModelDims.from_mapping(parse_config(text)) == TABLE_DIMS
    with pytest.raises(ConfigError):
        ModelDims.from_mapping({"model_dim": "8"})


def test_planner_estimator():
    est = SelectivePrecisionPlanner()
    assert clone(est).get_params() == {"policy": "selective"}
    assert est.fit(["mamba", "attention", "moe"]).transform(None) == ["BF16", "BF16", "FP8"]
    assert est.transform(["moe", "mamba"]) == ["FP8", "FP8"]
