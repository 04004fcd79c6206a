import numpy as np
import pytest
from hypothesis import given, strategies as st
from sklearn.base import clone

from oracles import repetition_exhaustive, windowed_repetition_brute
from posttrain._validation import ConfigError
from posttrain.chat_template import Conversation, Message, ToolCall, ToolDefinition, serialize_tool_call
from posttrain.config import parse_config
from posttrain.data_filter import (
    FilterReport,
    RepetitionConfig,
    Rollout,
    SFTDataFilter,
    alignment_filter,
    compile_patterns,
    detect_tool_hallucination,
    hallucination_rate,
    label_dpo_pairs,
    prompt_category,
    repetition_check,
    structural_check,
)

SEARCH = ToolDefinition("search", "Web search")


def convo(answer="fine", reasoning=None, tools=(), calls=()):
    system = Message("system", "sys", tool_definitions=tuple(tools)) if tools else Message("system", "sys")
    return Conversation((system, Message("user", "q"), Message("assistant", answer, reasoning=reasoning, tool_calls=tuple(calls))))


# --- structural -----------------------------------------------------------------

def test_structural_accepts_plain_and_declared():
    assert structural_check(convo())
    assert structural_check(convo(tools=[SEARCH], calls=[ToolCall("search")]))
    assert structural_check(convo(tools=[SEARCH]))


def test_structural_rejects_undeclared_calls_structured_and_inline():
    result = structural_check(convo(calls=[ToolCall("search")]))
    assert not result and result.witness == 2
    inline = serialize_tool_call(ToolCall("search", (("q", "x"),)))
    assert not structural_check(convo(answer=inline))


def test_structural_declared_name_option():
    conv = convo(tools=[SEARCH], calls=[ToolCall("browse")])
    assert structural_check(conv)
    assert not structural_check(conv, require_declared_names=True)


def test_structural_reports_role_error_index():
    conv = Conversation((Message("system", "a"), Message("system", "b"), Message("user", "c")))
    result = structural_check(conv)
    assert not result and result.witness == 1


# --- repetition -----------------------------------------------------------------

def test_repetition_window_trigger():
    tokens = "a b c d e f g h".split() * 4
    result = repetition_check(tokens)
    assert not result
    assert result.witness.scope == "window" and result.witness.ngram == tuple("abcdefgh")


def test_repetition_global_trigger():
    gram = "a b c d e f g h".split()
    filler = [f"x{i}" for i in range(600)]
    tokens = []
    for _ in range(8):
        tokens += gram + filler
    result = repetition_check(tokens)
    assert not result and result.witness.scope == "global"
    assert repetition_check(tokens[: -(len(gram) + len(filler))])


def test_repetition_overlap_counts():
    cfg = RepetitionConfig(ngram=2, window=10, window_threshold=4, global_threshold=50)
    assert not repetition_check(["a"] * 5, cfg)
    assert repetition_check(["a"] * 4, cfg)


def test_repetition_window_edge():
    cfg = RepetitionConfig(ngram=2, window=8, window_threshold=2, global_threshold=50)
    # occurrences at 0 and 6 span exactly 8 tokens
    assert not repetition_check(["a", "b", "x", "y", "z", "w", "a", "b"], cfg)
    assert repetition_check(["a", "b", "x", "y", "z", "w", "v", "a", "b"], cfg)


@given(
    st.lists(st.sampled_from("ab"), min_size=0, max_size=60),
    st.integers(2, 3), st.integers(4, 20), st.integers(2, 4), st.integers(2, 6),
)
def test_repetition_matches_oracles(tokens, n, window, wt, gt):
    window = max(window, n)
    cfg = RepetitionConfig(ngram=n, window=window, window_threshold=wt, global_threshold=gt)
    expected = repetition_exhaustive(tokens, n, window, wt, gt)
    assert windowed_repetition_brute(tokens, n, window, wt, gt) == expected
    assert (not repetition_check(tokens, cfg)) == expected


def test_repetition_config_validation():
    with pytest.raises(ConfigError):
        RepetitionConfig(ngram=8, window=4)
    assert RepetitionConfig.from_config(parse_config("ngram = 3\n")).ngram == 3


# --- alignment ------------------------------------------------------------------

@pytest.mark.parametrize("text, hit", [
    ("Our Nation is strong", True),
    ("for our   party", True),
    ("we share our values", True),
    ("ournation", False),
    ("our nationals", False),
    ("the nation", False),
])
def test_default_alignment_patterns(text, hit):
    assert (not alignment_filter(text)) == hit


def test_custom_patterns_and_case_sensitivity():
    pats = compile_patterns({"foo": r"\bfoo\b"}, case_sensitive=True)
    assert not alignment_filter("a foo b", pats)
    assert alignment_filter("a FOO b", pats)
    assert not alignment_filter("FOO", ["foo"])
    with pytest.raises(ConfigError):
        compile_patterns({"bad": "("})


# --- pipeline ---------------------------------------------------------------------

def test_pipeline_attributes_first_failing_rule():
    looping = " ".join(["a b c d e f g h"] * 4)
    corpus = [
        convo(),
        convo(calls=[ToolCall("search")], answer=looping),  # structural wins over repetition
        convo(answer=looping + " our values"),  # repetition wins over alignment
        convo(reasoning="we defend our nation"),
        convo(),
    ]
    est = SFTDataFilter().fit()
    kept, report = est.filter(corpus, ids=["k1", "s", "r", "a", "k2"])
    assert len(kept) == 2
    assert report.per_rule_samples == {"structural": ["s"], "repetition": ["r"], "alignment": ["a"]}
    assert report.reconciles() and report.input_count == 5


def test_report_merge_reconciles():
    a, b = FilterReport(), FilterReport()
    a.record(1, None)
    a.record(2, "alignment")
    b.record(3, "structural")
    merged = a.merge(b)
    assert merged.reconciles() and merged.to_dict()["rejected_structural"] == 1


def test_filter_estimator_from_config():
    cfg = parse_config("ngram = 3\nwindow = 20\ndefault_patterns = no\npattern.bad = forbidden\n")
    est = SFTDataFilter.from_config(cfg)
    assert est.patterns == {"bad": "forbidden"}
    assert clone(est).get_params()["ngram"] == 3
    out = est.fit_transform([convo(answer="forbidden word"), convo(answer="our values")])
    assert len(out) == 1 and est.report_.rejected_alignment == 1


def test_filter_requires_fit():
    with pytest.raises(Exception):
        SFTDataFilter().first_failure(convo())


# --- tool hallucination and DPO -----------------------------------------------------

def test_hallucination_detection():
    assert detect_tool_hallucination(convo(calls=[ToolCall("search")]))
    assert not detect_tool_hallucination(convo(tools=[SEARCH], calls=[ToolCall("search")]))
    assert not detect_tool_hallucination(convo())
    assert hallucination_rate([convo(), convo(calls=[ToolCall("x")])]) == 0.5
    with pytest.raises(ValueError):
        hallucination_rate([])


def rollouts(pid, outcomes, declared=False):
    return [Rollout(pid, f"{pid}-{i}", correct, called, declared) for i, (correct, called) in enumerate(outcomes)]


def test_prompt_categories():
    assert prompt_category(rollouts("p", [(True, False)])) == "no_tools"
    assert prompt_category(rollouts("p", [(True, True)], declared=True)) == "with_tools"
    assert prompt_category(rollouts("p", [(True, False), (True, True)])) == "hallucination_penalty"


def test_hallucinating_rollouts_are_always_rejected():
    data = rollouts("p", [(True, True), (True, False), (False, False), (False, True)])
    pairs, skipped = label_dpo_pairs(data, seed=0)
    assert skipped == []
    assert pairs and all(p.category == "hallucination_penalty" for p in pairs)
    assert {p.chosen for p in pairs} == {"p-1"}
    assert all(p.rejected != "p-1" for p in pairs)


def test_dpo_skips_prompts_without_signal_and_is_deterministic():
    data = rollouts("same", [(True, False), (True, False)]) + rollouts("solo", [(True, False)]) + \
        rollouts("mixed", [(True, False), (False, False), (True, False), (False, False)])
    pairs, skipped = label_dpo_pairs(data, seed=3)
    assert sorted(skipped) == ["same", "solo"]
    assert len(pairs) == 2 and all(p.category == "no_tools" for p in pairs)
    assert label_dpo_pairs(data, seed=3) == (pairs, skipped)
    assert len(label_dpo_pairs(data, seed=3, max_pairs_per_prompt=1)[0]) == 1


def test_dpo_with_tools_ranks_by_correctness():
    data = rollouts("t", [(False, True), (True, True)], declared=True)
    pairs, _ = label_dpo_pairs(data)
    assert [(p.chosen, p.rejected, p.category) for p in pairs] == [("t-1", "t-0", "with_tools")]


def test_dpo_pairs_are_independent_of_other_prompts():
    a = rollouts("a", [(True, False), (False, False), (True, False), (False, False)])
    b = rollouts("b", [(True, False), (False, True)])
    alone, _ = label_dpo_pairs(a, seed=1)
    together, _ = label_dpo_pairs(b + a, seed=1)
    assert [p for p in together if p.prompt_id == "a"] == alone


def test_random_rollouts_invariants():
    rng = np.random.default_rng(0)
    data = [Rollout(f"p{i // 6}", i, bool(rng.integers(2)), bool(rng.integers(2)), bool(rng.integers(2)))
            for i in range(600)]
    by_id = {r.sample_id: r for r in data}
    pairs, _ = label_dpo_pairs(data, seed=7)
    for p in pairs:
        c, r = by_id[p.chosen], by_id[p.rejected]
        if p.category == "hallucination_penalty":
            assert not c.tool_called
            assert r.tool_called or (c.correct and not r.correct)
        else:
            assert c.correct and not r.correct
