import sys
from pathlib import Path

import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", max_examples=200, deadline=None)
settings.load_profile("default")

from posttrain.chat_template import Conversation, Message, ToolCall, ToolDefinition  # noqa: E402

DATA = Path(__file__).parent / "data"


@pytest.fixture
def data_dir():
    return DATA


@pytest.fixture
def two_turn():
    return Conversation((
        Message("system", "You are helpful."),
        Message("user", "What is 2+2?"),
        Message("assistant", "4", reasoning="two plus two is four"),
        Message("user", "And 3+3?"),
        Message("assistant", "6", reasoning="three plus three is six"),
    ), "on")


@pytest.fixture
def tool_loop():
    """One user message followed by three assistant steps with tool calls."""
    search = ToolDefinition("search", "Web search")
    return Conversation((
        Message("system", "Use tools.", tool_definitions=(search,)),
        Message("user", "Find the capital of France"),
        Message("assistant", "", reasoning="step one", tool_calls=(ToolCall("search", (("q", "France"),)),)),
        Message("tool", "Paris is the capital"),
        Message("assistant", "", reasoning="step two", tool_calls=(ToolCall("search", (("q", "Paris"),)),)),
        Message("tool", "Paris: population 2M"),
        Message("assistant", "Paris.", reasoning="step three"),
    ), "on")
