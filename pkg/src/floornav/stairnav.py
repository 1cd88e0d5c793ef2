"""Stair validation and the cross-floor transition state machine."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .mapping import FloorMapStack, stair_centroid, blacklist_stair, cache_transition, mark_stair, switch_active_floor
from .simulator import MAX_STEPS, Action, AgentPose, Observation, StairCandidate
from .scene import CellKind

EPS1 = 0.8
EPS2 = 0.5
EPS_UP = 0.3
EPS_DOWN = 0.1
D_STAIR = 0.8
CLIMB_BUDGET = MAX_STEPS // 10

Cell = tuple[int, int]


class StairStatus(str, Enum):
    UNEXPLORED = "Unexplored"
    TRAVERSED = "Traversed"
    BLACKLISTED = "Blacklisted"


class Direction(str, Enum):
    UP = "Up"
    DOWN = "Down"
    UNKNOWN = "Unknown"


class Phase(str, Enum):
    APPROACH = "ApproachCentroid"
    CLIMB = "Climb"
    EXIT = "Exit"


class StairError(RuntimeError):
    pass


@dataclass
class StairRecord:
    id: int
    floor: int
    region: set[Cell]
    status: StairStatus = StairStatus.UNEXPLORED
    direction_hint: Direction = Direction.UNKNOWN
    entry: Cell | None = None
    exit: Cell | None = None
    approach: Cell | None = None
    arrival: Cell | None = None
    dest_floor: int | None = None

    @property
    def area(self) -> int:
        return len(self.region)

    @property
    def centroid(self) -> Cell:
        return stair_centroid(sorted(self.region))

    def target_floor(self) -> int | None:
        if self.dest_floor is not None:
            return self.dest_floor
        if self.direction_hint is Direction.UP:
            return self.floor + 1
        if self.direction_hint is Direction.DOWN:
            return self.floor - 1
        return None

    def transition_status(self, new: StairStatus) -> None:
        if self.status is not StairStatus.UNEXPLORED and new is not self.status:
            raise StairError(f"stair record {self.id}: illegal status change {self.status.value} -> {new.value}")
        self.status = new


@dataclass
class StairRegistry:
    records: dict[int, StairRecord] = field(default_factory=dict)
    next_id: int = 0

    def add(self, floor: int, region, direction: Direction) -> StairRecord:
        rec = StairRecord(self.next_id, floor, set(region), direction_hint=direction)
        self.records[rec.id] = rec
        self.next_id += 1
        return rec

    def on_floor(self, floor: int) -> list[StairRecord]:
        return [r for r in self.records.values() if r.floor == floor]

    def match(self, floor: int, cells) -> StairRecord | None:
        cells = set(cells)
        for rec in self.on_floor(floor):
            if rec.region & cells:
                return rec
        return None


# directives returned by transition_step


@dataclass(frozen=True)
class Waypoint:
    x: float
    y: float


@dataclass(frozen=True)
class Look:
    action: Action


@dataclass(frozen=True)
class Completed:
    dest_floor: int
    entry: Cell
    exit: Cell


@dataclass(frozen=True)
class Aborted:
    steps_used: int


@dataclass(frozen=True)
class Backtrack:
    x: float
    y: float
    record_id: int


@dataclass
class TransitionState:
    record_id: int
    phase: Phase
    origin: AgentPose
    budget: int = CLIMB_BUDGET
    steps_used: int = 0
    approach_steps: int = 0
    axis: Cell | None = None
    approach: Cell | None = None
    entry: Cell | None = None
    exit: Cell | None = None
    on_stair: bool = False
    looked_up: bool = False
    looked_down: bool = False
    direction: Direction = Direction.UNKNOWN
    region: frozenset = frozenset()
    dest_floor: int | None = None
    cached: bool = False


def validate_stair(candidate: StairCandidate, eps1: float = EPS1, eps2: float = EPS2) -> bool:
    """Confidence and stair-pixel proportion must both strictly exceed their thresholds."""
    if candidate.total_pixel_count <= 0:
        raise ValueError("candidate has no pixels")
    if candidate.stair_pixel_count > candidate.total_pixel_count:
        raise ValueError("stair pixels exceed total pixels")
    return candidate.confidence > eps1 and candidate.stair_pixel_count / candidate.total_pixel_count > eps2


def infer_downward(obs: Observation) -> list[StairCandidate]:
    return [c for c in obs.stair_candidates if c.below_ground]


def begin_transition(record: StairRecord, pose: AgentPose, budget: int = CLIMB_BUDGET) -> TransitionState:
    if record.status is StairStatus.BLACKLISTED:
        raise StairError(f"stair record {record.id} is blacklisted")
    ts = TransitionState(
        record.id,
        Phase.APPROACH,
        pose,
        budget=budget,
        direction=record.direction_hint,
        region=frozenset(record.region),
        dest_floor=record.target_floor(),
    )
    if record.status is StairStatus.TRAVERSED and record.approach is not None and record.entry is not None:
        # reuse the recorded endpoints: walk to the stored start cell, then climb
        ts.phase = Phase.CLIMB
        ts.cached = True
        ts.approach = record.approach
        ts.axis = (record.entry[0] - record.approach[0], record.entry[1] - record.approach[1])
    return ts


def _cell(pose: AgentPose, res: float) -> Cell:
    return (int(math.floor(pose.y / res)), int(math.floor(pose.x / res)))


def _own_kind(obs: Observation, cell: Cell) -> int:
    hit = np.nonzero((obs.cells[:, 0] == cell[0]) & (obs.cells[:, 1] == cell[1]))[0]
    return int(obs.kinds[hit[0]]) if len(hit) else int(CellKind.FREE)


def long_axis(region) -> list[Cell]:
    """Unit steps along the longer side of the region; all four when it is square."""
    rows = {r for r, _ in region}
    cols = {c for _, c in region}
    if len(rows) > len(cols):
        return [(-1, 0), (1, 0)]
    if len(cols) > len(rows):
        return [(0, -1), (0, 1)]
    return [(-1, 0), (1, 0), (0, -1), (0, 1)]


def stair_ends(region) -> list[Cell]:
    """Cells just outside each end of an elongated region, in line with its middle."""
    steps = long_axis(region)
    if len(steps) == 4:
        return []
    mid = stair_centroid(sorted(region))
    out = []
    for dr, dc in steps:
        r, c = mid
        while (r, c) in region:
            r, c = r + dr, c + dc
        out.append((r, c))
    return out


def entry_neighbor(region, cell: Cell) -> Cell | None:
    """Region cell one step along the stair's long axis from ``cell`` (lowest first), if any."""
    if cell in region:
        return None
    r, c = cell
    for n in sorted((r + dr, c + dc) for dr, dc in long_axis(region)):
        if n in region:
            return n
    return None


def transition_step(
    ts: TransitionState,
    pose: AgentPose,
    obs: Observation,
    res: float,
    eps_up: float = EPS_UP,
    eps_down: float = EPS_DOWN,
    blocked=None,
):
    """Advance the transition by one simulator step and say what to do next.

    ``blocked(cell)`` lets the caller rule out stair ends it already knows are walls.
    """
    here = _cell(pose, res)
    if ts.phase is Phase.APPROACH:
        nxt = entry_neighbor(ts.region, here)
        if nxt is None:
            ts.approach_steps += 1
            ends = [e for e in stair_ends(ts.region) if blocked is None or not blocked(e)]
            if ends:
                cr, cc = min(ends, key=lambda e: (math.dist(e, here), e))
            else:
                cr, cc = stair_centroid(sorted(ts.region))
            return Waypoint((cc + 0.5) * res, (cr + 0.5) * res)
        ts.phase = Phase.CLIMB
        ts.approach = here
        ts.axis = (nxt[0] - here[0], nxt[1] - here[1])

    if ts.phase is Phase.CLIMB:
        if ts.cached and not ts.on_stair and here != ts.approach and here not in ts.region:
            # still walking to the stored start cell; not yet on the budget
            ts.approach_steps += 1
            ar, ac = ts.approach
            return Waypoint((ac + 0.5) * res, (ar + 0.5) * res)
        on_stair = _own_kind(obs, here) == CellKind.STAIR
        if on_stair:
            if not ts.on_stair:
                ts.entry = here
            ts.on_stair = True
            ts.exit = here
        elif ts.on_stair:
            dr, dc = ts.axis
            if (here[0] - ts.exit[0]) * dr + (here[1] - ts.exit[1]) * dc > 0:
                ts.phase = Phase.EXIT
                return Completed(ts.dest_floor, ts.entry, ts.exit)
            # slipped off the side or the near end: still on the same floor, go back on
            ts.on_stair = False
            ts.entry = None
        if not on_stair and ts.exit is not None and ts.steps_used < ts.budget:
            ts.steps_used += 1
            er, ec = ts.exit
            return Waypoint((ec + 0.5) * res, (er + 0.5) * res)
        if ts.steps_used >= ts.budget:
            return Aborted(ts.steps_used)
        ts.steps_used += 1
        upper = float(obs.stair_mask[: obs.stair_mask.shape[0] // 2].mean())
        lower = float(obs.stair_mask[obs.stair_mask.shape[0] // 2 :].mean())
        if ts.on_stair and not ts.looked_up and pose.tilt < 30 and upper > eps_up:
            ts.looked_up = True
            return Look(Action.LOOK_UP)
        if ts.on_stair and ts.direction is Direction.DOWN and not ts.looked_down and pose.tilt > -30 and lower < eps_down:
            ts.looked_down = True
            return Look(Action.LOOK_DOWN)
        dr, dc = ts.axis
        return Waypoint(pose.x + D_STAIR * dc, pose.y + D_STAIR * dr)
    raise StairError("transition already finished")


def on_abort(record: StairRecord, stack: FloorMapStack, origin: AgentPose) -> Backtrack:
    """Give up on a stair: blacklist it on its floor and head back to where the attempt began."""
    om = stack.obs_maps[record.floor]
    if blacklist_stair(om, record.id):
        record.transition_status(StairStatus.BLACKLISTED)
    return Backtrack(origin.x, origin.y, record.id)


def on_complete(record: StairRecord, ts: TransitionState, stack: FloorMapStack, registry: StairRegistry, arrival: Cell) -> StairRecord:
    """Record a successful crossing on both floors and activate the destination map."""
    dest = ts.dest_floor
    record.transition_status(StairStatus.TRAVERSED)
    record.entry, record.exit = ts.entry, ts.exit
    record.approach, record.arrival = ts.approach, arrival
    record.dest_floor = dest
    cache_transition(stack.obs_maps[record.floor], record.id, ts.entry, ts.exit, dest, ts.approach, arrival)

    switch_active_floor(stack, dest)
    mirror = registry.match(dest, record.region)
    reverse = Direction.DOWN if record.direction_hint is Direction.UP else Direction.UP
    if mirror is None or mirror.status is StairStatus.BLACKLISTED:
        mirror = registry.add(dest, record.region, reverse)
    mirror.region |= record.region
    if mirror.status is StairStatus.UNEXPLORED:
        mirror.transition_status(StairStatus.TRAVERSED)
    mirror.direction_hint = reverse
    mirror.entry, mirror.exit = ts.exit, ts.entry
    mirror.approach, mirror.arrival = arrival, ts.approach
    mirror.dest_floor = record.floor
    om = stack.obs_maps[dest]
    mark_stair(om, mirror.id, sorted(mirror.region))
    cache_transition(om, mirror.id, mirror.entry, mirror.exit, record.floor, mirror.approach, mirror.arrival)
    return mirror


class NoEligibleStair(StairError):
    pass


def select_stair(records: list[StairRecord], intent: str = "NewFloor", target: int | None = None) -> StairRecord:
    """Pick the stair to use: unexplored-largest for new floors, cached ones for revisits."""
    usable = [r for r in records if r.status is not StairStatus.BLACKLISTED]
    if not usable:
        raise NoEligibleStair("no usable stair record on this floor")
    by_area = lambda r: (-r.area, r.id)  # noqa: E731
    if intent == "NewFloor":
        fresh = [r for r in usable if r.status is StairStatus.UNEXPLORED]
        return min(fresh or usable, key=by_area)
    if intent == "Revisit":
        known = [r for r in usable if r.status is StairStatus.TRAVERSED and (target is None or r.dest_floor == target)]
        return min(known or usable, key=by_area)
    raise ValueError(f"unknown intent {intent!r}")
