import json

import httpx
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import PROPERTY_EXAMPLES
from floornav.acceptance import RESPONSE_SHAPES, golden_prompt
from floornav.llmclient import (
    AREA_EXAMPLE,
    AREA_KEY,
    FLOOR_EXAMPLE,
    FLOOR_KEY,
    FLOOR_PRIOR_KEY,
    ROOM_PRIOR_KEY,
    LlmConfig,
    LlmOracle,
    ResponseParseError,
    build_prompt,
    format_request,
    format_response,
    parse_response,
)
from floornav.reasoning import DecisionRequest, DecisionResponse, Mode, rule_based_decide


def chat_reply(content: str) -> httpx.MockTransport:
    def handler(request: httpx.Request) -> httpx.Response:
        return httpx.Response(200, json={"choices": [{"message": {"role": "assistant", "content": content}}]})

    return httpx.MockTransport(handler)


def unreachable(request: httpx.Request) -> httpx.Response:
    raise httpx.ConnectError("connection refused", request=request)


@pytest.mark.parametrize("name, request_", [("area", AREA_EXAMPLE), ("floor", FLOOR_EXAMPLE)])
def test_prompts_match_the_golden_files(name, request_):
    assert build_prompt(request_) == golden_prompt(name)


def test_floor_prompt_carries_the_floor_fields():
    prompt = build_prompt(FLOOR_EXAMPLE)
    assert FLOOR_PRIOR_KEY in prompt and FLOOR_KEY in prompt
    assert '"Index": "3"' in prompt


def test_area_prompt_carries_the_area_fields():
    prompt = build_prompt(AREA_EXAMPLE)
    assert AREA_KEY in prompt and ROOM_PRIOR_KEY in prompt and FLOOR_PRIOR_KEY not in prompt


@pytest.mark.parametrize("text, expected", RESPONSE_SHAPES)
def test_three_response_shapes(text, expected):
    if expected is None:
        with pytest.raises(ResponseParseError):
            parse_response(text)
    else:
        r = parse_response(text)
        assert (r.index, r.reason) == expected


@pytest.mark.parametrize("text", ['{"Reason": "no index"}', '{"Index": "three"}', "[1, 2]", ""])
def test_unusable_responses_raise(text):
    with pytest.raises(ResponseParseError):
        parse_response(text)


def test_numeric_index_is_accepted():
    assert parse_response('{"Index": 2, "Reason": null}') == DecisionResponse(2, "")


def test_unreachable_endpoint_falls_back_to_rules():
    oracle = LlmOracle(LlmConfig(max_retries=1), transport=httpx.MockTransport(unreachable))
    r = oracle.decide(AREA_EXAMPLE)
    assert r.reason.startswith("fallback")
    assert r.index == rule_based_decide(AREA_EXAMPLE).index
    assert oracle.calls == 1


def test_valid_answer_passes_through():
    oracle = LlmOracle(transport=chat_reply('{"Index": "1", "Reason": "bathroom"}'))
    assert oracle.decide(AREA_EXAMPLE) == DecisionResponse(1, "bathroom")


def test_out_of_range_index_is_not_clamped_here():
    oracle = LlmOracle(transport=chat_reply('{"Index": "42", "Reason": "?"}'))
    assert oracle.decide(AREA_EXAMPLE).index == 42


def test_request_body_is_a_deterministic_chat_completion(monkeypatch):
    seen = []

    def handler(request):
        seen.append((json.loads(request.content), request.headers.get("authorization")))
        return httpx.Response(200, json={"choices": [{"message": {"content": '{"Index": 1}'}}]})

    monkeypatch.setenv("FLOORNAV_API_KEY", "k")
    LlmOracle(LlmConfig(model="m"), transport=httpx.MockTransport(handler)).decide(FLOOR_EXAMPLE)
    body, auth = seen[0]
    assert body == {"model": "m", "messages": [{"role": "user", "content": build_prompt(FLOOR_EXAMPLE)}], "temperature": 0}
    assert auth == "Bearer k"


def test_retries_stop_after_the_configured_count():
    hits = []

    def handler(request):
        hits.append(1)
        return httpx.Response(500)

    LlmOracle(LlmConfig(max_retries=2), transport=httpx.MockTransport(handler)).decide(AREA_EXAMPLE)
    assert len(hits) == 3


@pytest.mark.parametrize("kwargs", [{"timeout": 0}, {"max_retries": -1}])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        LlmConfig(**kwargs)


# ---------------------------------------------------------------------------
# properties

words = st.text(st.characters(codec="utf-8", exclude_categories=("Cs",)), max_size=40)
rooms = st.sampled_from(["bathroom", "bedroom", "garage", "kitchen", "living room", "hall"])


@st.composite
def requests(draw):
    goal = draw(st.sampled_from(["toilet", "bed", "tv", "sofa"]))
    area_priors = draw(st.dictionaries(rooms, st.floats(0, 100).map(lambda p: round(p, 1)), max_size=3))
    if draw(st.booleans()):
        n = draw(st.integers(1, 3))
        floor_priors = draw(st.dictionaries(st.integers(0, n - 1), st.floats(0, 100).map(lambda p: round(p, 1)), max_size=n))
        descs = {f: draw(words) for f in range(n)}
        return DecisionRequest(goal, Mode.INTER_FLOOR, floor_priors, area_priors, descs)
    n = draw(st.integers(1, 3))
    return DecisionRequest(goal, Mode.INTRA_FLOOR, area_priors=area_priors, area_descriptions={i: draw(words) for i in range(1, n + 1)})


@settings(max_examples=PROPERTY_EXAMPLES)
@given(st.one_of(words, st.binary(max_size=60).map(lambda b: b.decode("latin-1"))), st.integers(0, 1))
def test_decide_never_raises(content, retries):
    oracle = LlmOracle(LlmConfig(max_retries=retries), transport=chat_reply(content))
    r = oracle.decide(AREA_EXAMPLE)
    assert isinstance(r, DecisionResponse) and isinstance(r.index, int)


@settings(max_examples=PROPERTY_EXAMPLES)
@given(requests())
def test_prompts_are_byte_identical_for_equal_requests(req):
    twin = DecisionRequest(req.goal, req.mode, dict(req.floor_priors), dict(req.area_priors),
                           dict(req.floor_descriptions), dict(req.area_descriptions))
    assert build_prompt(req).encode() == build_prompt(twin).encode()


@settings(max_examples=PROPERTY_EXAMPLES)
@given(requests(), st.integers(-5, 50), words)
def test_wire_format_round_trips(req, index, reason):
    # the table layout writes keyed lists; as objects they are plain JSON
    wire = json.loads(format_request(req).replace("[\n", "{\n").replace("\n  ]", "\n  }"))
    assert wire["Goal"] == req.goal
    assert wire[ROOM_PRIOR_KEY] == {r[:1].upper() + r[1:]: p for r, p in req.area_priors.items()}
    if req.mode is Mode.INTER_FLOOR:
        assert list(wire) == ["Goal", FLOOR_PRIOR_KEY, ROOM_PRIOR_KEY, FLOOR_KEY]
        assert wire[FLOOR_PRIOR_KEY] == {f"Floor {f + 1}": p for f, p in req.floor_priors.items()}
        assert wire[FLOOR_KEY] == {f"Floor {f + 1}": t for f, t in req.floor_descriptions.items()}
    else:
        assert list(wire) == ["Goal", ROOM_PRIOR_KEY, AREA_KEY]
        assert wire[AREA_KEY] == {f"Area {i}": t for i, t in req.area_descriptions.items()}
    assert parse_response(format_response(DecisionResponse(index, reason))) == DecisionResponse(index, reason)
