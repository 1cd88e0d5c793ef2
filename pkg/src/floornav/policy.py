"""The navigation agent: exploration, cross-floor transitions and goal approach.

The agent only sees observations. Its floor index is its own belief, seeded
from the episode's start floor and updated when a stair crossing completes.
"""
from __future__ import annotations

import heapq
import logging
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import ndimage

from . import mapping as mp
from .mapping import FREE, OBSTACLE, UNKNOWN, FloorMapStack, Frontier, ObstacleMap
from .reasoning import (
    DEFAULT_K,
    MIN_SWITCH_INTERVAL,
    TAU_SSIM,
    CoarseCache,
    DecisionOracle,
    FrontierDescription,
    build_inter_request,
    build_intra_request,
    coarse_select,
    dedup_frontiers,
    fine_decide_floor,
    fine_decide_frontier,
    score_frontiers,
    semantic_similarity,
    should_invoke_fine,
)
from .scene import Episode, PriorTables, SUCCESS_RADIUS
from .simulator import Action, AgentPose, LOOK_DOWN_RANGE, MAX_STEPS, Observation
from .stairnav import (
    CLIMB_BUDGET,
    EPS1,
    EPS2,
    EPS_DOWN,
    EPS_UP,
    Aborted,
    Completed,
    Direction,
    Look,
    NoEligibleStair,
    Phase,
    StairRegistry,
    StairStatus,
    TransitionState,
    Waypoint,
    begin_transition,
    on_abort,
    on_complete,
    select_stair,
    transition_step,
    validate_stair,
)

log = logging.getLogger(__name__)

Cell = tuple[int, int]
HEADING_TOLERANCE = 15.0
TURN_STEP = 30.0
ABLATIONS = frozenset({"cost-map", "cross-floor", "c2f", "priors"})


class PolicyPhase(str, Enum):
    EXPLORE = "Explore"
    TRANSIT = "Transit"
    APPROACH = "Approach"
    DONE = "Done"


LEGAL_PHASE_STEPS = {
    PolicyPhase.EXPLORE: {PolicyPhase.TRANSIT, PolicyPhase.APPROACH, PolicyPhase.DONE},
    PolicyPhase.TRANSIT: {PolicyPhase.EXPLORE, PolicyPhase.DONE},
    PolicyPhase.APPROACH: {PolicyPhase.DONE},
    PolicyPhase.DONE: set(),
}


class RecoveryEvent(str, Enum):
    STUCK_ON_STAIR = "StuckOnStair"
    DETECTION_FAILURE = "DetectionFailure"
    MISIDENTIFICATION = "Misidentification"
    WRONG_FLOOR = "WrongFloor"


REPLAN, BACKTRACK = "Replan", "Backtrack"


def recovery(event: RecoveryEvent) -> str:
    """Recovery class for a failure event."""
    if event in (RecoveryEvent.STUCK_ON_STAIR, RecoveryEvent.DETECTION_FAILURE):
        return REPLAN
    return BACKTRACK


@dataclass(frozen=True)
class PolicyConfig:
    lambda_expl: float = 1.0
    lambda_goal: float = 1.0
    d_theta: float = 3.0
    k: int = DEFAULT_K
    eps1: float = EPS1
    eps2: float = EPS2
    eps_up: float = EPS_UP
    eps_down: float = EPS_DOWN
    tau_ssim: float = TAU_SSIM
    waypoint_budget: int = MAX_STEPS // 10
    climb_budget: int = CLIMB_BUDGET
    min_switch_interval: int = MIN_SWITCH_INTERVAL
    ablate: frozenset = frozenset()
    reference_planner: bool = False
    euclidean_distance: bool = False
    spin_turns: int = 9

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.d_theta <= 0:
            raise ValueError("d_theta must be > 0")
        unknown = set(self.ablate) - ABLATIONS
        if unknown:
            raise ValueError(f"unknown ablations {sorted(unknown)}")
        object.__setattr__(self, "ablate", frozenset(self.ablate))

    @property
    def cross_floor(self) -> bool:
        return "cross-floor" not in self.ablate

    @property
    def coarse_to_fine(self) -> bool:
        return "c2f" not in self.ablate


# ---------------------------------------------------------------------------
# low-level control


_DIRS = ((0, 1), (1, 0), (0, -1), (-1, 0))  # headings 0, 90, 180, 270 degrees


def turn_steps(heading: float, direction: int) -> int:
    """Rotation actions needed before a heading is within tolerance of a grid direction."""
    diff = abs(_angle_diff(90.0 * direction, heading))
    return max(0, math.ceil((diff - HEADING_TOLERANCE) / TURN_STEP))


def plan_path(
    om: ObstacleMap,
    start: Cell,
    goal: Cell,
    allowed: set[Cell] | frozenset = frozenset(),
    unknown_cost: float = 1.5,
    inflation_cost: float = 0.5,
    heading: float | None = None,
) -> list[Cell] | None:
    """A* over 4-connected Free/Unknown cells; returns the cell path or None.

    Unknown cells cost ``unknown_cost`` to enter and cells touching a known
    obstacle pay ``inflation_cost`` extra, which keeps paths off walls without
    sealing narrow doorways. Stair-labelled cells are usable only if listed
    in ``allowed``. Given the agent's ``heading``, each rotation action a path
    implies is charged one step, so among equal-length routes the one with
    fewer corners wins.
    """
    h, w = om.shape
    occ = om.occupancy
    passable = occ != OBSTACLE
    for cell in om.stair_labels:
        passable[cell] = False
    for cell in allowed:
        if om.in_bounds(cell) and occ[cell] != OBSTACLE:
            passable[cell] = True
    if not om.in_bounds(goal) or not passable[goal] and goal != start:
        return None
    if start == goal:
        return [start]
    wall = occ == OBSTACLE
    near = ndimage.binary_dilation(wall, structure=np.ones((3, 3), bool)) & ~wall
    cost = np.where(occ == UNKNOWN, unknown_cost, 1.0) + np.where(near, inflation_cost, 0.0)
    passable_l = passable.ravel().tolist()
    cost_l = cost.ravel().tolist()
    gr, gc = goal
    turning = heading is not None
    ndir = 4 if turning else 1
    s_cell = start[0] * w + start[1]
    best: dict[int, float] = {}
    parent: dict[int, int] = {}
    heap = []
    counter = 0
    h0 = abs(start[0] - gr) + abs(start[1] - gc)
    for d in range(ndir):
        sid = s_cell * ndir + d
        g0 = float(turn_steps(heading, d)) if turning else 0.0
        best[sid] = g0
        parent[sid] = -1
        heap.append((g0 + h0, counter, sid))
        counter += 1
    heapq.heapify(heap)
    closed = set()
    found = -1
    while heap:
        _, _, u = heapq.heappop(heap)
        if u in closed:
            continue
        cell, du_dir = divmod(u, ndir)
        if cell == gr * w + gc:
            found = u
            break
        closed.add(u)
        r, c = divmod(cell, w)
        du = best[u]
        for d, (dr, dc) in enumerate(_DIRS):
            nr, nc = r + dr, c + dc
            if not (0 <= nr < h and 0 <= nc < w):
                continue
            v_cell = nr * w + nc
            if not passable_l[v_cell]:
                continue
            step = cost_l[v_cell]
            if turning:
                step += (0, 3, 6, 3)[(d - du_dir) % 4]
                v = v_cell * 4 + d
            else:
                v = v_cell
            if v in closed:
                continue
            nd = du + step
            if nd < best.get(v, math.inf):
                best[v] = nd
                parent[v] = u
                counter += 1
                heapq.heappush(heap, (nd + abs(nr - gr) + abs(nc - gc), counter, v))
    if found < 0:
        return None
    path = []
    v = found
    while v != -1:
        path.append(divmod(v // ndir, w))
        v = parent[v]
    return [(int(r), int(c)) for r, c in reversed(path)]


def path_length(path: list[Cell], resolution: float) -> float:
    return (len(path) - 1) * resolution


def _angle_diff(target: float, heading: float) -> float:
    d = (target - heading) % 360.0
    return d - 360.0 if d > 180.0 else d


def steer(pose: AgentPose, x: float, y: float) -> Action:
    """Turn toward (x, y) until within tolerance, then step forward."""
    bearing = math.degrees(math.atan2(y - pose.y, x - pose.x))
    diff = _angle_diff(bearing, pose.heading)
    if abs(diff) <= HEADING_TOLERANCE:
        return Action.MOVE_FORWARD
    if diff == 180.0 or diff > 0:
        return Action.TURN_LEFT
    return Action.TURN_RIGHT


def path_to_action(pose: AgentPose, path: list[Cell], resolution: float, keep_tilt: bool = False) -> Action:
    """Rotate toward the next path cell then move; level the camera first unless climbing."""
    if not keep_tilt and pose.tilt != 0:
        return Action.LOOK_UP if pose.tilt < 0 else Action.LOOK_DOWN
    here = (int(math.floor(pose.y / resolution)), int(math.floor(pose.x / resolution)))
    nxt = path[0]
    if here in path:
        i = path.index(here)
        if i + 1 >= len(path):
            return Action.STOP
        nxt = path[i + 1]
    return steer(pose, (nxt[1] + 0.5) * resolution, (nxt[0] + 0.5) * resolution)


def belief_line_of_sight(om: ObstacleMap, p0: tuple[float, float], p1: tuple[float, float]) -> bool:
    """True when every cell on the segment is known Free (endpoints excepted)."""
    res = om.resolution
    n = max(2, int(math.ceil(math.hypot(p1[0] - p0[0], p1[1] - p0[1]) / (res * 0.2))) + 1)
    xs = np.linspace(p0[0], p1[0], n)
    ys = np.linspace(p0[1], p1[1], n)
    rows = np.floor(ys / res).astype(int)
    cols = np.floor(xs / res).astype(int)
    end = (rows[-1], cols[-1])
    for r, c in zip(rows, cols):
        if (r, c) == end:
            continue
        if not (0 <= r < om.shape[0] and 0 <= c < om.shape[1]) or om.occupancy[r, c] == OBSTACLE:
            return False
    return True


# ---------------------------------------------------------------------------
# agent state


@dataclass
class Target:
    kind: str  # "frontier" | "probe" | "backtrack"
    cell: Cell
    set_step: int
    face: Cell | None = None
    cluster: tuple[Cell, ...] = ()
    stage: str = "go"
    gap: float = math.inf  # remaining path cells when the current budget window opened
    distance: float = 0.0


@dataclass
class RecoveryRecord:
    event: str
    directive: str
    step: int
    cost: int = 0


@dataclass
class PolicyState:
    goal: str
    floor: int
    stack: FloorMapStack
    registry: StairRegistry = field(default_factory=StairRegistry)
    phase: PolicyPhase = PolicyPhase.EXPLORE
    target: Target | None = None
    path: list[Cell] | None = None
    transition: TransitionState | None = None
    last_transition_step: int | None = None
    last_fine_decision_step: int | None = None
    coarse_cache: CoarseCache | None = None
    oracle_calls: int = 0
    fine_triggers: int = 0
    step: int = 0
    spin_left: int = 0
    target_floor: int | None = None
    covered: set[int] = field(default_factory=set)
    oracle_floors: set[int] = field(default_factory=set)
    wrong_floor_logged: set[int] = field(default_factory=set)
    goal_cells: dict[int, set[Cell]] = field(default_factory=dict)
    unreachable_goals: set[tuple[int, Cell]] = field(default_factory=set)
    bad_frontiers: dict[int, set[Cell]] = field(default_factory=dict)
    probed: dict[int, np.ndarray] = field(default_factory=dict)
    stalled: dict[int, int] = field(default_factory=dict)  # stair record -> step its approach was given up
    phase_history: list[PolicyPhase] = field(default_factory=lambda: [PolicyPhase.EXPLORE])
    recoveries: list[RecoveryRecord] = field(default_factory=list)
    events: list[dict] = field(default_factory=list)
    open_recovery: RecoveryRecord | None = None
    frontier_count: int = 0
    approach_gap: float = math.inf
    oracle_called: bool = False
    may_call: bool = True
    integrated: bool = False

    def set_phase(self, phase: PolicyPhase) -> None:
        if phase is self.phase:
            return
        if phase not in LEGAL_PHASE_STEPS[self.phase]:
            raise RuntimeError(f"illegal phase change {self.phase.value} -> {phase.value}")
        self.phase = phase
        self.phase_history.append(phase)


class NavigationPolicy:
    """Stateful wrapper bundling the agent state with its oracle, priors and config."""

    def __init__(
        self,
        episode: Episode,
        shape: tuple[int, int],
        resolution: float,
        priors: PriorTables,
        oracle: DecisionOracle,
        config: PolicyConfig | None = None,
    ):
        self.config = config or PolicyConfig()
        self.priors = priors
        self.oracle = oracle
        self.resolution = resolution
        stack = FloorMapStack.create(shape, episode.start_floor, resolution)
        self.state = PolicyState(episode.goal_category, episode.start_floor, stack, spin_left=self.config.spin_turns)

    def act(self, obs: Observation) -> Action:
        return next_action(self.state, self.state.stack, obs, self.oracle, self.config, self.priors)

    def force_done(self) -> None:
        if self.state.phase is not PolicyPhase.DONE:
            self.state.set_phase(PolicyPhase.DONE)


# ---------------------------------------------------------------------------
# per-step logic


def _cell_of(pose: AgentPose, res: float) -> Cell:
    return (int(math.floor(pose.y / res)), int(math.floor(pose.x / res)))


def _centre(cell: Cell, res: float) -> tuple[float, float]:
    return ((cell[1] + 0.5) * res, (cell[0] + 0.5) * res)


def _log_recovery(ps: PolicyState, event: RecoveryEvent) -> RecoveryRecord:
    rec = RecoveryRecord(event.value, recovery(event), ps.step)
    ps.recoveries.append(rec)
    log.debug("step %d: %s -> %s", ps.step, event.value, rec.directive)
    return rec


def _close_recovery(ps: PolicyState) -> None:
    if ps.open_recovery is not None:
        ps.open_recovery.cost = ps.step - ps.open_recovery.step
        ps.open_recovery = None


def next_action(
    ps: PolicyState,
    stack: FloorMapStack,
    obs: Observation,
    oracle: DecisionOracle,
    config: PolicyConfig,
    priors: PriorTables,
) -> Action:
    """Choose the next action from the newest observation."""
    ps.step += 1
    ps.oracle_called = False
    ps.integrated = False
    ps.may_call = ps.phase is PolicyPhase.EXPLORE
    if ps.phase is PolicyPhase.DONE:
        return Action.STOP

    if ps.phase is PolicyPhase.TRANSIT:
        act = _transit(ps, obs, oracle, config, priors)
        if act is not None:
            return act

    if not ps.integrated:
        _integrate(ps, obs, config, priors)

    if ps.phase is PolicyPhase.EXPLORE and _goal_candidates(ps):
        ps.target = None
        ps.path = None
        ps.set_phase(PolicyPhase.APPROACH)
    if ps.phase is PolicyPhase.APPROACH:
        return _approach(ps, obs)
    return _explore(ps, obs, oracle, config, priors)


def _integrate(ps: PolicyState, obs: Observation, config: PolicyConfig, priors: PriorTables) -> None:
    ps.integrated = True
    stack, res = ps.stack, ps.stack.resolution
    sim = semantic_similarity(obs.room_types, obs.visible_objects, ps.goal, priors)
    mp.integrate_observation(stack, obs, sim, ps.step)
    om = stack.obs
    if obs.collided and not (ps.transition and ps.transition.phase is Phase.CLIMB):
        th = math.radians(obs.pose.heading)
        ahead = _cell_of(
            AgentPose(0, obs.pose.x + 0.25 * math.cos(th), obs.pose.y + 0.25 * math.sin(th)), res
        )
        if om.in_bounds(ahead) and ahead not in om.stair_labels and ahead != _cell_of(obs.pose, res):
            om.occupancy[ahead] = OBSTACLE
        ps.path = None
    if config.cross_floor:
        for cand in obs.stair_candidates:
            direction = Direction.DOWN if cand.below_ground else Direction.UP
            rec = _match_record(ps, cand.window_cells)
            if rec is not None:
                if rec.status is StairStatus.BLACKLISTED:
                    continue
                rec.region |= set(cand.window_cells)
                mp.mark_stair(om, rec.id, cand.window_cells)
            elif cand.total_pixel_count > 0 and validate_stair(cand, config.eps1, config.eps2):
                rec = ps.registry.add(ps.floor, cand.window_cells, direction)
                mp.mark_stair(om, rec.id, cand.window_cells)
                ps.events.append(
                    {"step": ps.step, "event": "stair_validated", "stair_id": rec.id,
                     "floor_from": ps.floor, "floor_to": rec.target_floor()}
                )
            else:
                continue
            extra = mp.attached_stair_cells(om, rec.region)
            if extra:
                rec.region |= set(extra)
                mp.mark_stair(om, rec.id, extra)
    for det in obs.goal_detections:
        if det.category == ps.goal:
            ps.goal_cells.setdefault(ps.floor, set()).add(det.cell)


def _match_record(ps: PolicyState, cells):
    cells = set(cells)
    grown = set()
    for r, c in cells:
        for dr in range(-2, 3):
            for dc in range(-2, 3):
                grown.add((r + dr, c + dc))
    for rec in ps.registry.on_floor(ps.floor):
        if rec.region & grown:
            return rec
    return None


# --- approach ----------------------------------------------------------------


def _goal_candidates(ps: PolicyState) -> list[Cell]:
    return sorted(c for c in ps.goal_cells.get(ps.floor, ()) if (ps.floor, c) not in ps.unreachable_goals)


def _approach(ps: PolicyState, obs: Observation) -> Action:
    om, res = ps.stack.obs, ps.stack.resolution
    pose = obs.pose
    here = _cell_of(pose, res)
    goals = _goal_candidates(ps)
    if not goals:
        return Action.TURN_LEFT
    goals.sort(key=lambda g: (math.dist(_centre(g, res), pose.xy), g))
    for g in goals:
        gxy = _centre(g, res)
        if math.dist(gxy, pose.xy) <= SUCCESS_RADIUS + 1e-9 and belief_line_of_sight(om, pose.xy, gxy):
            ps.set_phase(PolicyPhase.DONE)
            return Action.STOP
    goal = goals[0]
    if ps.path is None or here not in ps.path or ps.path[-1] != goal or _path_blocked(om, ps.path, here):
        ps.path = plan_path(om, here, goal, allowed={goal}, heading=pose.heading)
    if ps.path is None:
        ps.unreachable_goals.add((ps.floor, goal))
        return Action.TURN_LEFT
    return path_to_action(pose, ps.path, res)


def _path_blocked(om: ObstacleMap, path: list[Cell], here: Cell, allowed=frozenset()) -> bool:
    i = path.index(here) if here in path else 0
    for cell in path[i + 1 :]:
        if om.occupancy[cell] == OBSTACLE or (cell in om.stair_labels and cell not in allowed):
            return True
    return False


# --- transit -----------------------------------------------------------------


def _transit(ps: PolicyState, obs: Observation, oracle, config: PolicyConfig, priors: PriorTables) -> Action | None:
    ts = ps.transition
    rec = ps.registry.records[ts.record_id]
    res = ps.stack.resolution
    pose = obs.pose
    here = _cell_of(pose, res)
    om = ps.stack.obs
    d = transition_step(ts, pose, obs, res, config.eps_up, config.eps_down, blocked=lambda c: _known_wall(om, c))

    if isinstance(d, Completed):
        floor_from = ps.floor
        on_complete(rec, ts, ps.stack, ps.registry, here)
        ps.floor = d.dest_floor
        ps.last_transition_step = ps.step
        ps.events.append(
            {"step": ps.step, "event": "completed", "stair_id": rec.id, "floor_from": floor_from, "floor_to": ps.floor}
        )
        ps.transition = None
        ps.target = None
        ps.path = None
        if ps.target_floor == ps.floor:
            ps.target_floor = None
        ps.spin_left = config.spin_turns
        ps.set_phase(PolicyPhase.EXPLORE)
        _close_recovery(ps)
        return None

    if isinstance(d, Aborted):
        directive = on_abort(rec, ps.stack, ts.origin)
        ps.events.append(
            {"step": ps.step, "event": "aborted", "stair_id": rec.id, "floor_from": ps.floor, "floor_to": ts.dest_floor,
             "steps_used": d.steps_used}
        )
        ps.open_recovery = _log_recovery(ps, RecoveryEvent.MISIDENTIFICATION)
        ps.transition = None
        ps.path = None
        ps.target = Target("backtrack", _cell_of(AgentPose(0, directive.x, directive.y), res), ps.step)
        ps.set_phase(PolicyPhase.EXPLORE)
        return None

    if isinstance(d, Look):
        return d.action

    assert isinstance(d, Waypoint)
    if ts.phase is Phase.CLIMB and (ts.on_stair or here == ts.approach):
        return steer(pose, d.x, d.y)

    # still walking toward the stair on the current floor
    _integrate(ps, obs, config, priors)
    if _goal_candidates(ps):
        _cancel_transit(ps)
        return None
    if ts.approach_steps > config.waypoint_budget and rec.status is not StairStatus.BLACKLISTED:
        # each budget window is a fresh pursuit; only a window without progress counts as stuck
        gap = math.dist(pose.xy, (d.x, d.y))
        if gap < ps.approach_gap - res:
            ps.approach_gap = gap
            ts.approach_steps = 0
    if rec.status is StairStatus.BLACKLISTED or ts.approach_steps > config.waypoint_budget:
        ps.open_recovery = _log_recovery(ps, RecoveryEvent.STUCK_ON_STAIR)
        ps.stalled[rec.id] = ps.step
        _cancel_transit(ps)
        return None
    if ts.phase is Phase.APPROACH:
        ts.region = frozenset(rec.region)  # the record may have grown since the start
    goal = _cell_of(AgentPose(0, d.x, d.y), res)
    allowed = frozenset(rec.region) | {goal}
    if ps.path is None or here not in ps.path or ps.path[-1] != goal or _path_blocked(om, ps.path, here, allowed):
        ps.path = plan_path(om, here, goal, allowed=allowed, heading=pose.heading)
    if ps.path is None:
        ps.open_recovery = _log_recovery(ps, RecoveryEvent.STUCK_ON_STAIR)
        ps.stalled[rec.id] = ps.step
        _cancel_transit(ps)
        return None
    return path_to_action(pose, ps.path, res)


def _known_wall(om: ObstacleMap, cell: Cell) -> bool:
    h, w = om.occupancy.shape
    return not (0 <= cell[0] < h and 0 <= cell[1] < w) or om.occupancy[cell] == OBSTACLE


def _cancel_transit(ps: PolicyState) -> None:
    ps.events.append(
        {"step": ps.step, "event": "cancelled", "stair_id": ps.transition.record_id,
         "floor_from": ps.floor, "floor_to": ps.transition.dest_floor}
    )
    ps.transition = None
    ps.path = None
    ps.target = None
    ps.set_phase(PolicyPhase.EXPLORE)


def _start_transit(ps: PolicyState, rec, pose: AgentPose, config: PolicyConfig) -> None:
    ps.transition = begin_transition(rec, pose, config.climb_budget)
    ps.approach_gap = math.dist(pose.xy, _centre(rec.centroid, ps.stack.resolution))
    ps.target = None
    ps.path = None
    ps.events.append(
        {"step": ps.step, "event": "begin", "stair_id": rec.id, "floor_from": ps.floor, "floor_to": rec.target_floor()}
    )
    ps.set_phase(PolicyPhase.TRANSIT)


def _records_toward(ps: PolicyState, target_floor: int, cooldown: int):
    out = []
    for rec in ps.registry.on_floor(ps.floor):
        if rec.status is StairStatus.BLACKLISTED:
            continue
        if rec.id in ps.stalled and ps.step - ps.stalled[rec.id] < cooldown:
            continue  # give the map a chance to open a way there before trying again
        dest = rec.target_floor()
        if dest is None:
            continue
        if (target_floor > ps.floor and dest > ps.floor) or (target_floor < ps.floor and dest < ps.floor):
            out.append(rec)
    return out


def _go_to_floor(
    ps: PolicyState, target_floor: int, pose: AgentPose, config: PolicyConfig, remember: bool = True
) -> bool:
    if remember:
        ps.target_floor = target_floor
    recs = _records_toward(ps, target_floor, config.waypoint_budget)
    if not recs:
        return False
    intent = "Revisit" if any(r.status is StairStatus.TRAVERSED for r in recs) else "NewFloor"
    try:
        rec = select_stair(recs, intent, target_floor)
    except NoEligibleStair:
        return False
    _start_transit(ps, rec, pose, config)
    return True


# --- explore -----------------------------------------------------------------


def _explore(ps: PolicyState, obs: Observation, oracle, config: PolicyConfig, priors: PriorTables) -> Action:
    pose = obs.pose
    res = ps.stack.resolution
    here = _cell_of(pose, res)
    if ps.spin_left > 0:
        ps.spin_left -= 1
        if pose.tilt != 0:
            return Action.LOOK_UP if pose.tilt < 0 else Action.LOOK_DOWN
        return Action.TURN_LEFT

    if config.reference_planner and ps.may_call and ps.target is not None and ps.target.kind == "frontier":
        # the reference planner never commits: every Explore step is a fresh selection
        ps.target = None
    for _ in range(4):
        t = ps.target
        if t is not None:
            act = _pursue(ps, t, pose, here, config)
            if act is not None:
                return act
        _select(ps, pose, here, oracle, config, priors)
        if ps.phase is PolicyPhase.TRANSIT:
            act = _transit(ps, obs, oracle, config, priors)
            if act is not None:
                return act
            if ps.phase is not PolicyPhase.EXPLORE:
                break
        if ps.phase is PolicyPhase.APPROACH:
            return _approach(ps, obs)
        if ps.phase is PolicyPhase.DONE:
            return Action.STOP
        if ps.target is None:
            break
    return Action.TURN_LEFT


def _pursue(ps: PolicyState, t: Target, pose: AgentPose, here: Cell, config: PolicyConfig) -> Action | None:
    """Action toward the current target, or None when the target should be dropped."""
    om, res = ps.stack.obs, ps.stack.resolution
    if ps.step - t.set_step >= config.waypoint_budget:
        # a window that brought the agent closer opens a fresh pursuit of the same target
        left = _remaining(ps.path, here)
        if t.kind == "backtrack" or left is None or left >= t.gap:
            ps.target = None
            return None
        t.set_step, t.gap = ps.step, left
    if t.kind == "frontier" and not _still_frontier(om, t.cell):
        # boundaries creep as they are uncovered; follow a nearby boundary cell
        moved = _nearby_frontier(om, t.cell, radius=2)
        if moved is None:
            ps.target = None
            return None
        t.cell = moved
    if t.kind == "probe":
        act = _probe(ps, t, pose, here)
        if act is not None or ps.target is None:
            return act
    if here == t.cell:
        if t.kind == "backtrack":
            _close_recovery(ps)
        if t.kind != "probe":
            ps.target = None
            return None
    if ps.path is None or here not in ps.path or ps.path[-1] != t.cell or _path_blocked(om, ps.path, here):
        ps.path = plan_path(om, here, t.cell, heading=pose.heading)
        if ps.path is not None and math.isinf(t.gap):
            t.gap = len(ps.path) - 1
    if ps.path is None:
        if t.kind == "frontier":
            ps.bad_frontiers.setdefault(ps.floor, set()).add(t.cell)
        if t.kind == "backtrack":
            _close_recovery(ps)
        ps.target = None
        return None
    return path_to_action(pose, ps.path, res)


def _remaining(path: list[Cell] | None, here: Cell) -> int | None:
    if path is None or here not in path:
        return None
    return len(path) - 1 - path.index(here)


def _nearby_frontier(om: ObstacleMap, cell: Cell, radius: int) -> Cell | None:
    r, c = cell
    options = [
        (abs(dr) + abs(dc), (r + dr, c + dc))
        for dr in range(-radius, radius + 1)
        for dc in range(-radius, radius + 1)
        if om.in_bounds((r + dr, c + dc)) and _still_frontier(om, (r + dr, c + dc))
    ]
    return min(options)[1] if options else None


def _still_frontier(om: ObstacleMap, cell: Cell) -> bool:
    if om.occupancy[cell] != FREE or cell in om.stair_labels:
        return False
    r, c = cell
    for n in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
        if om.in_bounds(n) and om.occupancy[n] == UNKNOWN:
            return True
    return False


def _probe(ps: PolicyState, t: Target, pose: AgentPose, here: Cell) -> Action | None:
    """Walk near a suspected drop, look down at it, and see whether a stair shows up."""
    res = ps.stack.resolution
    probed = ps.probed.setdefault(ps.floor, np.zeros(ps.stack.shape, bool))
    if t.stage == "check":
        for cell in t.cluster:
            probed[cell] = True
        if not any(c in ps.stack.obs.stair_labels for c in t.cluster):
            ps.open_recovery = _log_recovery(ps, RecoveryEvent.DETECTION_FAILURE)
            _close_recovery(ps)
        ps.target = None
        return None
    if here != t.cell:
        return None
    fx, fy = _centre(t.face, res)
    if pose.tilt == 0:
        turn = steer(pose, fx, fy)
        if turn is not Action.MOVE_FORWARD:
            return turn
        return Action.LOOK_DOWN
    if pose.tilt < 0:
        t.stage = "check"
        return _probe(ps, t, pose, here)
    return Action.LOOK_DOWN


def _probe_target(ps: PolicyState, here: Cell) -> Target | None:
    om = ps.stack.obs
    probed = ps.probed.setdefault(ps.floor, np.zeros(ps.stack.shape, bool))
    drops = om.drops & ~probed & (om.occupancy == OBSTACLE)
    labelled = om.label_mask()
    if labelled.any():
        # leftovers next to a known stair belong to it and get absorbed on approach
        drops &= ~ndimage.binary_dilation(labelled, structure=np.ones((3, 3), bool), iterations=2)
    if not drops.any():
        return None
    labels, n = ndimage.label(drops, structure=np.ones((3, 3), bool))
    dist = mp.free_distances(om, here)
    res = om.resolution
    reach = int(LOOK_DOWN_RANGE / res)
    best = None
    for lab in range(1, n + 1):
        cluster = [tuple(map(int, rc)) for rc in zip(*np.nonzero(labels == lab))]
        options = []
        for (r, c) in cluster:
            for rr in range(r - reach, r + reach + 1):
                for cc in range(c - reach, c + reach + 1):
                    if not om.in_bounds((rr, cc)) or om.occupancy[rr, cc] != FREE or (rr, cc) in om.stair_labels:
                        continue
                    sep = math.hypot(rr - r, cc - c) * res
                    if sep > 1.25 or not math.isfinite(dist[rr, cc]):
                        continue
                    if not belief_line_of_sight(om, _centre((rr, cc), res), _centre((r, c), res)):
                        continue
                    options.append((float(dist[rr, cc]), (rr, cc), (r, c)))
        if not options:
            for cell in cluster:
                probed[cell] = True
            continue
        d, stand, face = min(options)
        if best is None or d < best[0]:
            best = (d, stand, face, tuple(cluster))
    if best is None:
        return None
    return Target("probe", best[1], ps.step, face=best[2], cluster=best[3], distance=best[0] * res)


def _describe(ps: PolicyState, f: Frontier) -> FrontierDescription:
    om = ps.stack.obs
    room = om.room_name(f.cell) or "unknown"
    objects: set[str] = set()
    v = int(om.first_view[f.cell])
    if v >= 0:
        view = om.views[v]
        for cell, names in view.objects.items():
            if view.rooms.get(cell, "") == room:
                objects.update(names)
    return FrontierDescription(room, tuple(sorted(objects)), f.floor)


def _known_floors(ps: PolicyState) -> dict[int, tuple[list[str], list[str]]]:
    floors = set(ps.stack.obs_maps) | {ps.floor}
    for rec in ps.registry.records.values():
        if rec.status is not StairStatus.BLACKLISTED and rec.target_floor() is not None:
            floors.add(rec.target_floor())
    out = {}
    for f in sorted(floors):
        summary = ps.stack.floor_descriptions.get(f)
        if summary is None:
            out[f] = ([], [])
        else:
            out[f] = (sorted(summary.room_types), sorted(summary.objects))
    return out


def _select(ps: PolicyState, pose: AgentPose, here: Cell, oracle, config: PolicyConfig, priors: PriorTables) -> None:
    """Pick the next target: a probe, a frontier, or a floor change."""
    om, vm = ps.stack.obs, ps.stack.val
    floor = ps.floor
    ps.path = None
    frontiers = mp.extract_frontiers(om, here, floor, config.euclidean_distance)
    bad = ps.bad_frontiers.get(floor, set())
    plain = [f for f in frontiers if not f.is_stair and f.cell not in bad]
    stairs = [f for f in frontiers if f.is_stair] if config.cross_floor else []
    ps.frontier_count = len(plain) + len(stairs)
    use_cost = "cost-map" not in config.ablate
    ranked = score_frontiers(plain, vm.m_ss, config.d_theta, use_cost, config.lambda_goal, config.lambda_expl)
    prior_tables = None if "priors" in config.ablate else priors

    if config.cross_floor:
        # look into nearby drops first; far ones wait until nothing else is left
        probe = _probe_target(ps, here)
        if probe is not None and (probe.distance <= config.d_theta or not ranked):
            ps.target = probe
            return

    covered = not ranked
    if covered and floor not in ps.covered:
        ps.covered.add(floor)
        if floor in ps.oracle_floors and floor not in ps.wrong_floor_logged:
            ps.wrong_floor_logged.add(floor)
            rec = _log_recovery(ps, RecoveryEvent.WRONG_FLOOR)
            rec.cost = 0

    if config.cross_floor and ps.target_floor is not None and ps.target_floor != floor:
        if ps.target_floor in ps.covered:
            ps.target_floor = None
        elif _go_to_floor(ps, ps.target_floor, pose, config):
            return
        elif covered:
            ps.target_floor = None

    everything = ranked + stairs
    fine = config.coarse_to_fine and should_invoke_fine(everything, config.d_theta, config.k)
    if config.reference_planner:
        fine = bool(everything)
    fine = fine and ps.may_call  # the oracle is only consulted from a step that began in Explore
    if fine:
        ps.fine_triggers += 1
        inter_due = (
            ps.last_fine_decision_step is None
            or ps.step - ps.last_fine_decision_step >= config.min_switch_interval
            or covered
        )
        if stairs and (inter_due or config.reference_planner):
            req = build_inter_request(ps.goal, prior_tables, _known_floors(ps), floor, set(ps.covered))
            dec = fine_decide_floor(
                req, oracle, ps.last_transition_step, ps.step, covered, floor, config.min_switch_interval
            )
            if dec.called:
                ps.oracle_calls += 1
                ps.oracle_called = True
                ps.last_fine_decision_step = ps.step
            if dec.switch and dec.floor not in ps.covered:
                if _go_to_floor(ps, dec.floor, pose, config):
                    ps.oracle_floors.add(dec.floor)
                    return
        if ranked:
            pool = dedup_frontiers(ranked, [], config.tau_ssim)
            cache = coarse_select(
                pool, vm.m_ss, config.d_theta, config.k, lambda f: _describe(ps, f), use_cost,
                config.lambda_goal, config.lambda_expl,
            )
            ps.coarse_cache = cache
            req = build_intra_request(ps.goal, prior_tables, cache)
            chosen, called = fine_decide_frontier(req, oracle, cache, always_call=config.reference_planner)
            if called:
                ps.oracle_calls += 1
                ps.oracle_called = True
            ps.target = Target("frontier", chosen.cell, ps.step)
            return
    elif ranked:
        ps.target = Target("frontier", ranked[0].cell, ps.step)
        return

    if covered:
        if config.cross_floor:
            # floors known to exist and not yet covered, likeliest first; may be several stairs away
            known = {r.target_floor() for r in ps.registry.records.values()
                     if r.status is not StairStatus.BLACKLISTED and r.target_floor() is not None}
            known |= set(ps.stack.obs_maps)
            todo = sorted(
                (f for f in known if f not in ps.covered and f != floor),
                key=lambda f: (-(prior_tables.floor(ps.goal, f) if prior_tables else 0.0), abs(f - floor), f),
            )
            for f in todo:
                if _go_to_floor(ps, f, pose, config, remember=False):
                    ps.target_floor = f
                    return
        ps.set_phase(PolicyPhase.DONE)
