import hashlib
import json
import subprocess
import sys
from collections import Counter

import pytest
from hypothesis import given, strategies as st
from sklearn.base import clone

from oracles import expected_reasoning_messages
from posttrain._validation import StructureError
from posttrain.chat_template import (
    Conversation,
    Message,
    ReasoningControl,
    ToolCall,
    ToolDefinition,
    conversation_from_dict,
    conversation_to_dict,
    parse_tool_calls,
    render,
    serialize_tool_call,
    strip_reasoning,
    truncate_budget,
)
from posttrain.tokens import WhitespaceTokenizer


def span_texts(prompt):
    raw = prompt.text.encode("utf-8")
    return [raw[a:b].decode("utf-8") for _, (a, b) in prompt.included_reasoning_spans]


def test_two_turn_keeps_only_current_turn_reasoning(two_turn):
    prompt = render(two_turn)
    assert "three plus three is six" in prompt.text
    assert "two plus two is four" not in prompt.text
    assert [i for i, _ in prompt.included_reasoning_spans] == [4]
    assert span_texts(prompt) == ["three plus three is six"]


def test_reasoning_off_has_no_reasoning_bytes(two_turn):
    prompt = render(Conversation(two_turn.messages, "off"))
    assert prompt.included_reasoning_spans == ()
    assert "<think>" not in prompt.text
    for m in two_turn.messages:
        if m.reasoning:
            assert m.reasoning not in prompt.text


def test_multi_step_tool_loop_keeps_all_steps(tool_loop):
    prompt = render(tool_loop)
    expected = expected_reasoning_messages([conversation_to_dict(tool_loop)["messages"][i] for i in range(7)], "on")
    assert expected == [2, 4, 6]
    assert [i for i, _ in prompt.included_reasoning_spans] == expected
    assert span_texts(prompt) == ["step one", "step two", "step three"]


def test_spans_are_utf8_byte_offsets():
    conv = Conversation((Message("user", "héllo ✓"), Message("assistant", "ok", reasoning="naïve ∑ reasoning")))
    prompt = render(conv)
    assert span_texts(prompt) == ["naïve ∑ reasoning"]


@pytest.mark.parametrize("roles, bad_index", [
    (["system", "system", "user"], 1),
    (["assistant", "user"], 0),
    (["user", "tool"], 1),
    (["user", "assistant", "system"], 2),
])
def test_malformed_roles_name_the_index(roles, bad_index):
    conv = Conversation(tuple(Message(r, "x") for r in roles))
    with pytest.raises(StructureError) as info:
        render(conv)
    assert info.value.index == bad_index


def test_empty_conversation_is_a_structure_error():
    with pytest.raises(StructureError):
        render(Conversation(()))


def test_message_field_invariants():
    with pytest.raises(ValueError):
        Message("user", "x", reasoning="no")
    with pytest.raises(ValueError):
        Message("user", "x", tool_definitions=())
    with pytest.raises(ValueError):
        ToolCall("f", (("a", "1"), ("a", "2")))
    with pytest.raises(ValueError):
        ToolCall("")


def test_render_is_deterministic_across_processes(tool_loop):
    line = json.dumps(conversation_to_dict(tool_loop))
    code = (
        "import sys, json, hashlib;"
        "from posttrain.chat_template import render, conversation_from_dict;"
        "print(hashlib.sha256(render(conversation_from_dict(json.loads(sys.stdin.read()))).text.encode()).hexdigest())"
    )
    digests = {
        subprocess.run([sys.executable, "-c", code], input=line, capture_output=True, text=True, check=True).stdout.strip()
        for _ in range(2)
    }
    local = hashlib.sha256(render(tool_loop).text.encode()).hexdigest()
    assert digests == {local}


def test_tool_definitions_and_calls_are_rendered(tool_loop):
    text = render(tool_loop).text
    assert '<TOOL name="search">Web search</TOOL>' in text
    assert '<TOOLCALL name="search">\n<ARG key="q">France</ARG>\n</TOOLCALL>' in text


def test_generation_prompt():
    conv = Conversation((Message("user", "hi"),), "on")
    assert render(conv, add_generation_prompt=True).text.endswith("<|assistant|>\n<think>\n")
    conv_off = Conversation((Message("user", "hi"),), "off")
    assert render(conv_off, add_generation_prompt=True).text.endswith("<|assistant|>\n")


# --- tool-call grammar round trip ------------------------------------------------

identifiers = st.from_regex(r"[A-Za-z_][A-Za-z0-9_]{0,8}", fullmatch=True)
pieces = st.sampled_from(list('ab <>/\\"=\n') + ["</ARG>", "</TOOLCALL>", "<\\/", "é"])
values = st.lists(pieces, max_size=12).map("".join)
calls = st.builds(
    lambda name, args: ToolCall(name, tuple(args.items())),
    identifiers,
    st.dictionaries(identifiers, values, max_size=4),
)


@given(st.lists(calls, min_size=1, max_size=4))
def test_rendered_tool_calls_round_trip(call_list):
    conv = Conversation((
        Message("system", "", tool_definitions=tuple(ToolDefinition(c.name) for c in call_list)),
        Message("user", "go"),
        Message("assistant", "", reasoning="r", tool_calls=tuple(call_list)),
    ))
    parsed = parse_tool_calls(render(conv).text, strict=True)
    key = lambda c: (c.name, c.arguments)  # noqa: E731
    assert Counter(map(key, parsed)) == Counter(map(key, call_list))


@given(values)
def test_single_value_round_trip(value):
    call = ToolCall("f", (("v", value),))
    assert parse_tool_calls(serialize_tool_call(call)) == [call]


def test_quotes_are_not_escaped():
    call = ToolCall("run", (("code", 'print("hi")'),))
    assert 'print("hi")' in serialize_tool_call(call)


def test_json_round_trip(tool_loop):
    assert conversation_from_dict(json.loads(json.dumps(conversation_to_dict(tool_loop)))) == tool_loop


# --- reasoning control ----------------------------------------------------------

def make_corpus(n, reasoning="a b c d e f g h i j"):
    return [
        Conversation((Message("user", f"q{i}"), Message("assistant", f"answer {i}", reasoning=reasoning)))
        for i in range(n)
    ]


def test_strip_fraction_zero_and_one():
    corpus = make_corpus(50)
    assert strip_reasoning(corpus, 0.0, seed=3) == corpus
    stripped = strip_reasoning(corpus, 1.0, seed=3)
    assert all(m.reasoning is None for c in stripped for m in c.messages)
    assert all(c.reasoning_mode == "off" for c in stripped)


def test_strip_is_reproducible_and_idempotent():
    corpus = make_corpus(2000)
    once = strip_reasoning(corpus, 0.1, seed=11)
    assert once == strip_reasoning(corpus, 0.1, seed=11)
    assert strip_reasoning(once, 0.1, seed=11) == once
    assert once != strip_reasoning(corpus, 0.1, seed=12)


def test_strip_is_shard_invariant():
    corpus = make_corpus(1000)
    whole = strip_reasoning(corpus, 0.1, seed=5)
    parts = strip_reasoning(corpus[:400], 0.1, seed=5) + strip_reasoning(corpus[400:], 0.1, seed=5, offset=400)
    assert parts == whole


def test_strip_rejects_bad_fraction():
    with pytest.raises(ValueError):
        strip_reasoning(make_corpus(1), 1.5, seed=0)


def test_truncate_budget_longer_than_trace_is_noop():
    corpus = make_corpus(100)
    out, report = truncate_budget(corpus, 1.0, seed=0, budgets=(10, 50))
    assert out == corpus
    assert report.selected == 100 and report.unchanged == 100 and report.truncated == 0


def test_truncate_keeps_first_tokens_and_answer():
    tokens = [f"t{i}" for i in range(10)]
    corpus = make_corpus(1, reasoning="  ".join(tokens))
    out, report = truncate_budget(corpus, 1.0, seed=0, budgets=(4,))
    msg = out[0].messages[-1]
    assert WhitespaceTokenizer().tokenize(msg.reasoning) == tokens[:4]
    assert msg.content == corpus[0].messages[-1].content
    assert out[0].reasoning_mode == "on"
    assert report.truncated == 1


def test_truncate_skips_samples_without_reasoning():
    corpus = [Conversation((Message("user", "q"), Message("assistant", "a")))] * 5
    out, report = truncate_budget(corpus, 1.0, seed=0)
    assert out == corpus
    assert report.skipped_no_reasoning == 5 and report.skipped_indices == [0, 1, 2, 3, 4]


def test_truncate_only_touches_final_assistant(two_turn):
    out, _ = truncate_budget([two_turn], 1.0, seed=0, budgets=(1,))
    assert out[0].messages[2].reasoning == "two plus two is four"
    assert out[0].messages[4].reasoning == "three"


def test_truncate_is_idempotent():
    corpus = make_corpus(3000, reasoning=" ".join(["w"] * 3000))
    once, _ = truncate_budget(corpus, 0.03, seed=9)
    twice, report = truncate_budget(once, 0.03, seed=9)
    assert twice == once
    assert report.truncated == 0


def test_truncate_rejects_bad_budgets():
    with pytest.raises(ValueError):
        truncate_budget(make_corpus(1), 0.5, seed=0, budgets=())
    with pytest.raises(ValueError):
        truncate_budget(make_corpus(1), 0.5, seed=0, budgets=(0, 8))


def test_reasoning_control_estimator():
    est = ReasoningControl(strip_fraction=0.5, truncate_fraction=0.0, seed=1)
    assert clone(est).get_params() == est.get_params()
    corpus = make_corpus(200)
    out = est.fit(corpus).transform(corpus)
    assert out == strip_reasoning(corpus, 0.5, seed=1)
    assert est.truncation_report_.selected == 0
    with pytest.raises(ValueError):
        ReasoningControl(strip_fraction=2).fit()
