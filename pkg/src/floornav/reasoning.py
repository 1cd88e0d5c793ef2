"""Coarse frontier ranking and oracle-backed floor/area decisions."""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Protocol, Sequence

import numpy as np

from .mapping import DEFAULT_D_THETA, Frontier, frontier_value
from .scene import PriorTables

TAU_SSIM = 0.85
DEFAULT_K = 3
MIN_SWITCH_INTERVAL = 50
EXCLUDE_NOTE = "You do not need to explore this floor again"
_L = 255.0
C1 = (0.01 * _L) ** 2
C2 = (0.03 * _L) ** 2


class Mode(str, Enum):
    INTER_FLOOR = "InterFloor"
    INTRA_FLOOR = "IntraFloor"


@dataclass(frozen=True)
class FrontierDescription:
    room_type: str = "unknown"
    objects: tuple[str, ...] = ()
    floor: int = 0

    def text(self) -> str:
        article = "an" if self.room_type[:1] in "aeiou" else "a"
        if self.objects:
            return f"{article} {self.room_type} containing objects: {', '.join(self.objects)}"
        return f"{article} {self.room_type} containing no objects"


@dataclass
class CacheEntry:
    frontier: Frontier
    patch: np.ndarray | None
    description: FrontierDescription | None
    score: float


@dataclass
class CoarseCache:
    entries: list[CacheEntry] = field(default_factory=list)
    k: int = DEFAULT_K


@dataclass(frozen=True)
class DecisionRequest:
    goal: str
    mode: Mode
    floor_priors: dict = field(default_factory=dict)  # floor index -> percent
    area_priors: dict = field(default_factory=dict)  # room type -> percent
    floor_descriptions: dict = field(default_factory=dict)  # floor index -> text
    area_descriptions: dict = field(default_factory=dict)  # 1-based area label -> text

    def __post_init__(self):
        if self.mode is Mode.INTER_FLOOR and not self.floor_descriptions:
            raise ValueError("an inter-floor request needs floor descriptions")
        if self.mode is Mode.INTRA_FLOOR and not self.area_descriptions:
            raise ValueError("an intra-floor request needs area descriptions")


@dataclass(frozen=True)
class DecisionResponse:
    index: int  # the label shown on the wire: "Area 1" / "Floor 1" -> 1
    reason: str = ""


class DecisionOracle(Protocol):
    def decide(self, request: DecisionRequest) -> DecisionResponse: ...


# ---------------------------------------------------------------------------
# coarse stage


def semantic_similarity(room_types: Sequence[str], objects: Sequence[str], goal: str, priors: PriorTables) -> float:
    """Best room-type prior for the goal among what is in view; 1.0 if the goal itself is seen."""
    if goal in objects:
        return 1.0
    return max((priors.area(goal, t) for t in room_types if t), default=0.0)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Whole-image structural similarity of two 8-bit intensity patches."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"patch shapes differ: {a.shape} vs {b.shape}")
    mu_a, mu_b = a.mean(), b.mean()
    var_a, var_b = a.var(), b.var()
    cov = ((a - mu_a) * (b - mu_b)).mean()
    num = (2 * mu_a * mu_b + C1) * (2 * cov + C2)
    den = (mu_a**2 + mu_b**2 + C1) * (var_a + var_b + C2)
    return float(num / den)


def dedup_frontiers(candidates: Sequence[Frontier], cache: list, tau: float = TAU_SSIM) -> list[Frontier]:
    """Drop frontiers whose view patch is too similar to one already cached.

    Frontiers without a patch are always kept. Kept patches are appended to ``cache``.
    """
    kept = []
    for f in candidates:
        if f.patch is None:
            kept.append(f)
            continue
        if all(ssim(f.patch, p) < tau for p in cache):
            kept.append(f)
            cache.append(f.patch)
    return kept


def _rank_key(f: Frontier):
    return (-f.score, f.distance, f.cell)


def _semantic_key(f: Frontier):
    # without the cost term distance plays no part at all, not even as a tie-break
    return (-f.score, f.cell)


def score_frontiers(
    frontiers: Sequence[Frontier],
    m_ss: np.ndarray,
    d_theta: float = DEFAULT_D_THETA,
    use_cost: bool = True,
    lambda_goal: float = 1.0,
    lambda_expl: float = 1.0,
) -> list[Frontier]:
    """Set each frontier's value and return them best first.

    With unit weights the score is exactly ``frontier_value``; the weights let
    callers trade the semantic term against the distance bonus.
    """
    for f in frontiers:
        m = float(m_ss[f.cell])
        bonus = frontier_value(m, f.distance, d_theta) - m if use_cost and math.isfinite(f.distance) else 0.0
        f.score = m + bonus if lambda_goal == lambda_expl == 1.0 else lambda_goal * m + lambda_expl * bonus
    return sorted(frontiers, key=_rank_key if use_cost else _semantic_key)


def coarse_select(
    frontiers: Sequence[Frontier],
    m_ss: np.ndarray,
    d_theta: float = DEFAULT_D_THETA,
    k: int = DEFAULT_K,
    describe: Callable[[Frontier], FrontierDescription] | None = None,
    use_cost: bool = True,
    lambda_goal: float = 1.0,
    lambda_expl: float = 1.0,
) -> CoarseCache:
    ranked = score_frontiers(frontiers, m_ss, d_theta, use_cost, lambda_goal, lambda_expl)[:k]
    entries = [CacheEntry(f, f.patch, describe(f) if describe else f.description, f.score) for f in ranked]
    for e in entries:
        e.frontier.description = e.description
    return CoarseCache(entries, k)


def should_invoke_fine(frontiers: Sequence[Frontier], d_theta: float = DEFAULT_D_THETA, k: int = DEFAULT_K) -> bool:
    return len(frontiers) >= k and all(f.distance > d_theta for f in frontiers)


# ---------------------------------------------------------------------------
# fine stage


@dataclass(frozen=True)
class FloorDecision:
    switch: bool
    floor: int
    called: bool
    response: DecisionResponse | None = None


def floor_label_to_index(label: int) -> int:
    return label - 1


def fine_decide_floor(
    request: DecisionRequest,
    oracle: DecisionOracle,
    last_transition_step: int | None,
    now: int,
    floor_fully_explored: bool,
    current_floor: int,
    min_interval: int = MIN_SWITCH_INTERVAL,
) -> FloorDecision:
    """Ask the oracle whether to change floors, respecting the anti-thrash gate."""
    if request.mode is not Mode.INTER_FLOOR:
        raise ValueError("floor decisions need an inter-floor request")
    waited = last_transition_step is None or now - last_transition_step >= min_interval
    if not (waited or floor_fully_explored):
        return FloorDecision(False, current_floor, called=False)
    response = oracle.decide(request)
    floor = floor_label_to_index(response.index)
    if floor == current_floor or floor not in request.floor_descriptions:
        return FloorDecision(False, current_floor, True, response)
    return FloorDecision(True, floor, True, response)


def fine_decide_frontier(
    request: DecisionRequest,
    oracle: DecisionOracle,
    cache: CoarseCache,
    always_call: bool = False,
) -> tuple[Frontier, bool]:
    """Let the oracle pick an area; anything unusable falls back to the top entry.

    Returns the chosen frontier and whether the oracle was consulted.
    """
    if not cache.entries:
        raise ValueError("empty coarse cache")
    if len(cache.entries) == 1 and not always_call:
        return cache.entries[0].frontier, False
    try:
        response = oracle.decide(request)
        i = int(response.index) - 1
    except Exception:  # the oracle contract is total, but stay safe
        return cache.entries[0].frontier, True
    if 0 <= i < len(cache.entries):
        return cache.entries[i].frontier, True
    return cache.entries[0].frontier, True


# ---------------------------------------------------------------------------
# request builders and the deterministic oracle


def percent(p: float) -> float:
    return round(100.0 * p, 1)


def area_prior_entries(goal: str, priors: PriorTables, limit: int = 3) -> dict[str, float]:
    row = priors.area_prior.get(goal, {})
    best = sorted((t for t in row if row[t] > 0), key=lambda t: (-row[t], t))[:limit]
    return {t: percent(row[t]) for t in best}


def build_intra_request(goal: str, priors: PriorTables | None, cache: CoarseCache) -> DecisionRequest:
    areas = {}
    for i, e in enumerate(cache.entries, start=1):
        desc = e.description or FrontierDescription()
        areas[i] = desc.text()
    area_priors = area_prior_entries(goal, priors) if priors is not None else {}
    return DecisionRequest(goal, Mode.INTRA_FLOOR, area_priors=area_priors, area_descriptions=areas)


def describe_floor(current: bool, room_types: Sequence[str], objects: Sequence[str], excluded: bool) -> str:
    head = "Current floor." if current else "Other floor."
    rooms = ", ".join(room_types) if room_types else "unknown rooms"
    objs = ", ".join(objects) if objects else "unknown objects"
    text = f"{head} There are room types: {rooms} containing objects: {objs}"
    if excluded:
        text += f". {EXCLUDE_NOTE}"
    return text


def build_inter_request(
    goal: str,
    priors: PriorTables | None,
    floors: dict[int, tuple[Sequence[str], Sequence[str]]],
    current: int,
    excluded: set[int],
) -> DecisionRequest:
    """``floors`` maps each known floor to (room types seen, objects seen)."""
    descs = {
        f: describe_floor(f == current, sorted(rooms), sorted(objs), f in excluded)
        for f, (rooms, objs) in sorted(floors.items())
    }
    floor_priors, area_priors = {}, {}
    if priors is not None:
        row = priors.floor_prior.get(goal, {})
        floor_priors = {f: percent(row[f]) for f in sorted(floors) if f in row}
        area_priors = area_prior_entries(goal, priors)
    return DecisionRequest(goal, Mode.INTER_FLOOR, floor_priors, area_priors, descs)


_ROOM_RE = re.compile(r"^an? (.+?)(?: containing\b.*)?$")


def _area_room(text: str) -> str:
    m = _ROOM_RE.match(text.strip())
    return m.group(1).strip().lower() if m else ""


def _lookup_area(area_priors: dict, room: str) -> float:
    for key, value in area_priors.items():
        if key.lower() == room:
            return float(value)
    return 0.0


def rule_based_decide(request: DecisionRequest) -> DecisionResponse:
    """Deterministic stand-in for the language model: follow the priors."""
    if request.mode is Mode.INTRA_FLOOR:
        labels = sorted(request.area_descriptions)
        scores = [_lookup_area(request.area_priors, _area_room(request.area_descriptions[i])) for i in labels]
        best = max(range(len(labels)), key=lambda j: (scores[j], -j))
        room = _area_room(request.area_descriptions[labels[best]]) or "unknown area"
        return DecisionResponse(
            labels[best],
            f"Area {labels[best]} is {room}, the room type most associated with {request.goal} ({scores[best]:.1f}%).",
        )

    floors = sorted(request.floor_descriptions)
    excluded = {f for f in floors if EXCLUDE_NOTE in request.floor_descriptions[f]}
    known = {f: float(p) for f, p in request.floor_priors.items()}
    missing = [f for f in floors if f not in known]
    share = max(0.0, 100.0 - sum(known.values())) / len(missing) if missing else 0.0
    candidates = [f for f in floors if f not in excluded] or floors
    score = {f: known.get(f, share) for f in candidates}
    best = max(candidates, key=lambda f: (score[f], -f))
    return DecisionResponse(
        best + 1,
        f"Floor {best + 1} has the highest chance of holding the {request.goal} ({score[best]:.1f}%).",
    )


class RuleBasedOracle:
    def decide(self, request: DecisionRequest) -> DecisionResponse:
        return rule_based_decide(request)


class CountingOracle:
    """Wraps an oracle and counts every call."""

    def __init__(self, inner: DecisionOracle):
        self.inner = inner
        self.calls = 0
        self.log: list[tuple[DecisionRequest, DecisionResponse]] = []

    def decide(self, request: DecisionRequest) -> DecisionResponse:
        self.calls += 1
        response = self.inner.decide(request)
        self.log.append((request, response))
        return response
