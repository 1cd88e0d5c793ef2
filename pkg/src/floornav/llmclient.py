"""Prompt rendering, response parsing and an HTTP chat-completion oracle."""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass

import httpx

from .reasoning import DecisionRequest, DecisionResponse, Mode, rule_based_decide

log = logging.getLogger(__name__)

AREA_TASK = "Task: Select the optimal area based on prior probabilistic data and environmental context."
FLOOR_TASK = "Task: Select the optimal floor based on prior probabilistic data and environmental context."
ANSWER_FORMAT = "Expected Answer Format: JSON"

ROOM_PRIOR_KEY = "Prior Probabilities between Room Type and Goal Object"
FLOOR_PRIOR_KEY = "Prior Probabilities between Floor and Goal Object"
AREA_KEY = "Area Descriptions"
FLOOR_KEY = "Floor Descriptions"

AREA_EXAMPLE = DecisionRequest(
    goal="toilet",
    mode=Mode.INTRA_FLOOR,
    area_priors={"bathroom": 90.0},
    area_descriptions={
        1: "a bathroom containing objects: shower, towel",
        2: "a bedroom containing objects: bed, nightstand",
        3: "a garage containing objects: car",
    },
)
AREA_EXAMPLE_RESPONSE = DecisionResponse(
    1, "Shower and towel in Bathroom indicate toilet location, with high probability (90.0%)."
)

FLOOR_EXAMPLE = DecisionRequest(
    goal="bed",
    mode=Mode.INTER_FLOOR,
    floor_priors={0: 10.0},
    area_priors={"bedroom": 80.0},
    floor_descriptions={
        0: "Current floor. There are room types: hall, living room, containing objects: tv, sofa",
        1: "Other floor. There are room types: bathroom containing objects: shower, towel. "
        "You do not need to explore this floor again",
        2: "Other floor. There are room types: unknown rooms containing objects: unknown objects",
    },
)
FLOOR_EXAMPLE_RESPONSE = DecisionResponse(
    3,
    "The bedroom is most likely to be on the Floor 3, and the room types and object types on the "
    "Floor 1 and Floor 2 are not directly related to the target object bed, especially it does not "
    "need to explore Floor 2 again.",
)


class ResponseParseError(ValueError):
    pass


def _q(text: str) -> str:
    return json.dumps(text, ensure_ascii=False)


def _room_key(room: str) -> str:
    return room[:1].upper() + room[1:]


def _block(key: str, entries: list[str]) -> str:
    body = ",\n".join(f"    {e}" for e in entries)
    return f"  {_q(key)}: [\n{body}\n  ]" if entries else f"  {_q(key)}: [\n  ]"


def format_request(request: DecisionRequest) -> str:
    """Render a request in the table-style layout used on the wire."""
    parts = [f"  \"Goal\": {_q(request.goal)}"]
    rooms = [f"{_q(_room_key(r))}: {p:.1f}" for r, p in request.area_priors.items()]
    if request.mode is Mode.INTER_FLOOR:
        floors = [f"{_q(f'Floor {f + 1}')}: {p:.1f}" for f, p in sorted(request.floor_priors.items())]
        parts.append(_block(FLOOR_PRIOR_KEY, floors))
        parts.append(_block(ROOM_PRIOR_KEY, rooms))
        descs = [f"{_q(f'Floor {f + 1}')}: {_q(t)}" for f, t in sorted(request.floor_descriptions.items())]
        parts.append(_block(FLOOR_KEY, descs))
    else:
        parts.append(_block(ROOM_PRIOR_KEY, rooms))
        descs = [f"{_q(f'Area {i}')}: {_q(t)}" for i, t in sorted(request.area_descriptions.items())]
        parts.append(_block(AREA_KEY, descs))
    return "{\n" + ",\n".join(parts) + "\n}"


def format_response(response: DecisionResponse) -> str:
    return "{\n" + f"  \"Index\": {_q(str(response.index))},\n  \"Reason\": {_q(response.reason)}\n" + "}"


def build_prompt(request: DecisionRequest) -> str:
    if request.mode is Mode.INTER_FLOOR:
        task, example, answer = FLOOR_TASK, FLOOR_EXAMPLE, FLOOR_EXAMPLE_RESPONSE
    else:
        task, example, answer = AREA_TASK, AREA_EXAMPLE, AREA_EXAMPLE_RESPONSE
    return (
        f"{task}\n\n{ANSWER_FORMAT}\n\n"
        f"Example Input:\n{format_request(example)}\n\n"
        f"Example Response:\n{format_response(answer)}\n\n"
        f"Prompted Input:\n{format_request(request)}\n"
    )


def parse_response(text: str) -> DecisionResponse:
    """Pull the first JSON object out of free text and read Index/Reason from it."""
    decoder = json.JSONDecoder()
    start = text.find("{")
    while start != -1:
        try:
            obj, _ = decoder.raw_decode(text, start)
        except json.JSONDecodeError:
            start = text.find("{", start + 1)
            continue
        if isinstance(obj, dict):
            if "Index" not in obj:
                raise ResponseParseError("response JSON has no Index")
            raw = obj["Index"]
            try:
                index = int(str(raw).strip())
            except ValueError as exc:
                raise ResponseParseError(f"non-numeric Index {raw!r}") from exc
            reason = obj.get("Reason", "")
            return DecisionResponse(index, "" if reason is None else str(reason))
        start = text.find("{", start + 1)
    raise ResponseParseError("no JSON object in response")


@dataclass(frozen=True)
class LlmConfig:
    endpoint: str = "http://localhost:8000/v1/chat/completions"
    model: str = "qwen2.5-7b-instruct"
    timeout: float = 30.0
    max_retries: int = 2
    api_key_env: str = "FLOORNAV_API_KEY"

    def __post_init__(self):
        if self.timeout <= 0:
            raise ValueError("timeout must be > 0")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")


class LlmOracle:
    """Decision oracle backed by an OpenAI-compatible chat-completion endpoint."""

    def __init__(self, config: LlmConfig | None = None, transport: httpx.BaseTransport | None = None):
        self.config = config or LlmConfig()
        self.calls = 0
        self._client = httpx.Client(timeout=self.config.timeout, transport=transport)

    def close(self) -> None:
        self._client.close()

    def _headers(self) -> dict:
        key = os.environ.get(self.config.api_key_env)
        return {"Authorization": f"Bearer {key}"} if key else {}

    def decide(self, request: DecisionRequest) -> DecisionResponse:
        self.calls += 1
        body = {
            "model": self.config.model,
            "messages": [{"role": "user", "content": build_prompt(request)}],
            "temperature": 0,
        }
        error = "no attempt made"
        for attempt in range(self.config.max_retries + 1):
            try:
                reply = self._client.post(self.config.endpoint, json=body, headers=self._headers())
                reply.raise_for_status()
                content = reply.json()["choices"][0]["message"]["content"]
                return parse_response(content)
            except (httpx.HTTPError, ResponseParseError, KeyError, IndexError, TypeError, ValueError) as exc:
                error = f"{type(exc).__name__}: {exc}"
                log.warning("oracle attempt %d failed: %s", attempt + 1, error)
        fallback = rule_based_decide(request)
        return DecisionResponse(fallback.index, f"fallback ({error}): {fallback.reason}")
