"""Discrete-action simulator over a SceneSpec.

Poses are continuous (metres) with headings on a 30 degree lattice. Motion
follows the scene's stair rule, so floors change only by walking a stair strip
end to end. Observations come from 2D ray casting for the visible cell set and
a small 3D ray march for the depth patch used as the view's image.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .scene import CellKind, Episode, FLOOR_HEIGHT, SceneSpec, line_of_sight, SUCCESS_RADIUS

MAX_STEPS = 500
STEP_SIZE = 0.25
TURN_ANGLE = 30
FOV_DEG = 90.0
VFOV_DEG = 60.0
VIEW_RANGE = 5.0
LOOK_DOWN_RANGE = 2.0
CAMERA_HEIGHT = 0.88
PATCH_SIZE = 16
DROP_THRESHOLD = -0.2

_RAY_STEP = 0.05
_N_RAYS = 91
_WALL = 10.0  # finite stand-in for wall height inside the ray march


class Action(str, Enum):
    MOVE_FORWARD = "MoveForward"
    TURN_LEFT = "TurnLeft"
    TURN_RIGHT = "TurnRight"
    LOOK_UP = "LookUp"
    LOOK_DOWN = "LookDown"
    STOP = "Stop"


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class AgentPose:
    floor: int
    x: float
    y: float
    heading: int = 0
    tilt: int = 0

    @property
    def xy(self) -> tuple[float, float]:
        return (self.x, self.y)


@dataclass(frozen=True)
class DetectorConfig:
    goal_false_negative_rate: float = 0.0
    stair_confidence_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.goal_false_negative_rate <= 1.0:
            raise ValueError("goal_false_negative_rate must be in [0, 1]")
        if self.stair_confidence_noise < 0:
            raise ValueError("stair_confidence_noise must be >= 0")

    @classmethod
    def ideal(cls, seed: int = 0) -> "DetectorConfig":
        return cls(0.0, 0.0, seed)

    @classmethod
    def noisy(cls, seed: int = 0) -> "DetectorConfig":
        return cls(0.3, 0.1, seed)


@dataclass(frozen=True)
class StairCandidate:
    stair_id: int  # ground truth; the policy must not read it
    window_cells: tuple[tuple[int, int], ...]
    confidence: float
    stair_pixel_count: int
    total_pixel_count: int
    below_ground: bool
    depth_diff: float


@dataclass(frozen=True)
class GoalDetection:
    cell: tuple[int, int]
    category: str
    confidence: float


@dataclass(frozen=True, eq=False)
class Observation:
    pose: AgentPose
    cells: np.ndarray  # (N, 2) visible cells, row/col
    kinds: np.ndarray  # (N,) CellKind codes
    rel_depth: np.ndarray  # (N,) surface height relative to the current floor
    distance: np.ndarray  # (N,) metres from the agent to the cell centre
    rooms: tuple[str, ...]  # room type per visible cell ("" on walls)
    objects: dict = field(default_factory=dict)  # cell -> object names
    stair_candidates: tuple[StairCandidate, ...] = ()
    goal_detections: tuple[GoalDetection, ...] = ()
    patch: np.ndarray = field(default_factory=lambda: np.zeros((PATCH_SIZE, PATCH_SIZE), np.uint8))
    stair_mask: np.ndarray = field(default_factory=lambda: np.zeros((PATCH_SIZE, PATCH_SIZE), bool))
    collided: bool = False

    @property
    def visible(self) -> list[tuple[tuple[int, int], float, CellKind, str]]:
        return [
            ((int(r), int(c)), float(d), CellKind(int(k)), room)
            for (r, c), d, k, room in zip(self.cells, self.rel_depth, self.kinds, self.rooms)
        ]

    @property
    def room_types(self) -> tuple[str, ...]:
        return tuple(sorted({r for r in self.rooms if r}))

    @property
    def visible_objects(self) -> tuple[str, ...]:
        return tuple(sorted({n for names in self.objects.values() for n in names}))

    def fingerprint(self) -> tuple:
        """Hashable summary used for determinism checks."""
        return (
            self.pose,
            self.cells.tobytes(),
            self.kinds.tobytes(),
            self.rel_depth.tobytes(),
            self.rooms,
            tuple(sorted(self.objects.items())),
            self.stair_candidates,
            self.goal_detections,
            self.patch.tobytes(),
            self.collided,
        )


@dataclass(frozen=True)
class SimState:
    scene: SceneSpec
    episode: Episode
    detector: DetectorConfig
    pose: AgentPose
    step_count: int = 0
    done: bool = False
    stop_issued: bool = False
    travelled: float = 0.0
    max_steps: int = MAX_STEPS


def reset(scene: SceneSpec, episode: Episode, detector: DetectorConfig | None = None, max_steps: int = MAX_STEPS) -> SimState:
    if episode.scene_id != scene.scene_id:
        raise SimulationError(f"episode belongs to scene {episode.scene_id}, not {scene.scene_id}")
    x, y, heading = episode.start_pose
    pose = AgentPose(episode.start_floor, float(x), float(y), int(heading) % 360, 0)
    if not scene.is_passable(pose.floor, scene.cell_of(x, y)):
        raise SimulationError("episode start pose is not on a passable cell")
    return SimState(scene, episode, detector or DetectorConfig(), pose, max_steps=max_steps)


def _move(scene: SceneSpec, pose: AgentPose) -> AgentPose | None:
    th = math.radians(pose.heading)
    nx = round(pose.x + STEP_SIZE * math.cos(th), 9)
    ny = round(pose.y + STEP_SIZE * math.sin(th), 9)
    c0 = scene.cell_of(pose.x, pose.y)
    cm = scene.cell_of((pose.x + nx) / 2, (pose.y + ny) / 2)
    c1 = scene.cell_of(nx, ny)
    chain = [c0]
    for c in (cm, c1):
        if c != chain[-1]:
            chain.append(c)
    floor = pose.floor
    for a, b in zip(chain, chain[1:]):
        floor = scene.resolve_move(floor, a, b)
        if floor is None:
            return None
    return replace(pose, floor=floor, x=nx, y=ny)


def step(state: SimState, action: Action | str) -> tuple[SimState, Observation]:
    if state.done:
        raise SimulationError("episode already finished")
    action = Action(action)
    pose = state.pose
    collided = False
    travelled = state.travelled
    stop = False
    if action is Action.MOVE_FORWARD:
        moved = _move(state.scene, pose)
        if moved is None:
            collided = True
        else:
            travelled += math.hypot(moved.x - pose.x, moved.y - pose.y)
            pose = moved
    elif action is Action.TURN_LEFT:
        pose = replace(pose, heading=(pose.heading + TURN_ANGLE) % 360)
    elif action is Action.TURN_RIGHT:
        pose = replace(pose, heading=(pose.heading - TURN_ANGLE) % 360)
    elif action is Action.LOOK_UP:
        pose = replace(pose, tilt=min(pose.tilt + TURN_ANGLE, TURN_ANGLE))
    elif action is Action.LOOK_DOWN:
        pose = replace(pose, tilt=max(pose.tilt - TURN_ANGLE, -TURN_ANGLE))
    else:
        stop = True
    n = state.step_count + 1
    new = replace(
        state,
        pose=pose,
        step_count=n,
        travelled=travelled,
        stop_issued=state.stop_issued or stop,
        done=stop or n >= state.max_steps,
    )
    return new, observe(new, collided=collided)


def check_success(state: SimState, episode: Episode | None = None, radius: float = SUCCESS_RADIUS) -> bool:
    episode = episode or state.episode
    if not state.stop_issued:
        return False
    scene, pose = state.scene, state.pose
    for f, cell in episode.goal_instances:
        if f != pose.floor:
            continue
        gx, gy = scene.center_of(cell)
        if math.hypot(gx - pose.x, gy - pose.y) <= radius + 1e-9 and line_of_sight(scene.floors[f], pose.xy, (gx, gy)):
            return True
    return False


# ---------------------------------------------------------------------------
# perception


def _lookup(grid: np.ndarray, rows: np.ndarray, cols: np.ndarray, fill) -> np.ndarray:
    h, w = grid.shape
    ok = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
    out = np.full(rows.shape, fill, dtype=grid.dtype)
    out[ok] = grid[rows[ok], cols[ok]]
    return out


def visible_cells(scene: SceneSpec, pose: AgentPose) -> np.ndarray:
    """Cells hit by the fan of rays before (and including) the first wall."""
    grid = scene.floors[pose.floor]
    res = scene.resolution
    reach = LOOK_DOWN_RANGE if pose.tilt < 0 else VIEW_RANGE
    angles = np.radians(pose.heading + np.linspace(-FOV_DEG / 2, FOV_DEG / 2, _N_RAYS))
    t = np.arange(1, int(round(reach / _RAY_STEP)) + 1) * _RAY_STEP
    xs = pose.x + np.outer(np.cos(angles), t)
    ys = pose.y + np.outer(np.sin(angles), t)
    rows = np.floor(ys / res).astype(np.int64)
    cols = np.floor(xs / res).astype(np.int64)
    kind = _lookup(grid.kind, rows, cols, np.int8(CellKind.OBSTACLE))
    wall = kind == CellKind.OBSTACLE
    first = np.where(wall.any(axis=1), wall.argmax(axis=1), wall.shape[1] - 1)
    keep = np.arange(wall.shape[1])[None, :] <= first[:, None]
    inb = (rows >= 0) & (rows < grid.height) & (cols >= 0) & (cols < grid.width)
    keep &= inb
    orow, ocol = scene.cell_of(pose.x, pose.y)
    flat = np.unique(np.concatenate([[orow * grid.width + ocol], rows[keep] * grid.width + cols[keep]]))
    return np.stack([flat // grid.width, flat % grid.width], axis=1)


def render_patch(scene: SceneSpec, pose: AgentPose) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Depth patch (uint8), stair-id per pixel (-1 elsewhere) and pixel depth."""
    grid = scene.floors[pose.floor]
    res = scene.resolution
    surface = np.where(np.isinf(scene.surface[pose.floor]), _WALL, scene.surface[pose.floor])
    j = (np.arange(PATCH_SIZE) + 0.5) / PATCH_SIZE
    col_ang = np.radians(pose.heading + FOV_DEG / 2 - FOV_DEG * j)
    elev = np.radians(pose.tilt + VFOV_DEG / 2 - VFOV_DEG * j)
    t = np.arange(1, int(round(VIEW_RANGE / _RAY_STEP)) + 1) * _RAY_STEP
    xs = pose.x + np.outer(np.cos(col_ang), t)
    ys = pose.y + np.outer(np.sin(col_ang), t)
    rows = np.floor(ys / res).astype(np.int64)
    cols = np.floor(xs / res).astype(np.int64)
    h = _lookup(surface, rows, cols, _WALL)  # (cols, samples)
    sid = _lookup(grid.stair_id, rows, cols, np.int16(-1))
    z = CAMERA_HEIGHT + np.tan(elev)[:, None, None] * t[None, None, :]  # (rows, 1, samples)
    hit = z <= h[None, :, :]
    any_hit = hit.any(axis=2)
    idx = hit.argmax(axis=2)
    depth = np.where(any_hit, t[idx], VIEW_RANGE)
    stair = np.where(any_hit, sid[np.arange(PATCH_SIZE)[None, :], idx], -1)
    # a ray that dips below the floor plane over a stair before hitting anything
    # is looking into the stairwell, so the pixel belongs to that stair
    into_well = (z < 0) & (sid[None, :, :] >= 0) & (np.arange(t.size)[None, None, :] < idx[:, :, None])
    dipped = into_well.any(axis=2)
    first = into_well.argmax(axis=2)
    well = sid[np.arange(PATCH_SIZE)[None, :], first]
    stair = np.where((stair < 0) & dipped, well, stair)
    patch = np.clip(np.round(255.0 * (1.0 - depth / VIEW_RANGE)), 0, 255).astype(np.uint8)
    return patch, stair.astype(np.int16), depth


def _pixel_counts(stair_pixels: np.ndarray, sid: int) -> tuple[int, int]:
    mask = stair_pixels == sid
    if not mask.any():
        return 0, 0
    r = np.nonzero(mask.any(axis=1))[0]
    c = np.nonzero(mask.any(axis=0))[0]
    total = (r[-1] - r[0] + 1) * (c[-1] - c[0] + 1)
    return int(mask.sum()), int(total)


def observe(state: SimState, collided: bool = False) -> Observation:
    scene, pose, det = state.scene, state.pose, state.detector
    grid = scene.floors[pose.floor]
    res = scene.resolution
    cells = visible_cells(scene, pose)
    r, c = cells[:, 0], cells[:, 1]
    kinds = grid.kind[r, c].astype(np.int8)
    height = scene.surface[pose.floor][r, c]
    rel = np.where(np.isinf(height), FLOOR_HEIGHT, height)
    dist = np.hypot((c + 0.5) * res - pose.x, (r + 0.5) * res - pose.y)
    names = np.array(grid.room_types + ("",), dtype=object)  # room -1 lands on the trailing blank
    rooms = tuple(names[grid.room[r, c]].tolist())
    objects = {}
    for a, b in cells.tolist():
        names = grid.objects.get((a, b))
        if names:
            objects[(a, b)] = names

    rng = np.random.default_rng([det.seed, state.step_count])
    patch, stair_pixels, _ = render_patch(scene, pose)

    candidates = []
    sids = grid.stair_id[r, c]
    for sid in sorted(set(sids[sids >= 0].tolist())):
        stair = scene.stair_by_id[sid]
        sel = sids == sid
        window = tuple((int(a), int(b)) for a, b in cells[sel])
        depth_diff = float(rel[sel].min()) if pose.floor == stair.floor_hi else float(rel[sel].max())
        below = pose.floor == stair.floor_hi
        if below and not (pose.tilt < 0 and depth_diff < DROP_THRESHOLD):
            continue
        n_stair, n_total = _pixel_counts(stair_pixels, sid)
        if n_total == 0:
            continue
        noise = abs(rng.normal(0.0, det.stair_confidence_noise)) if det.stair_confidence_noise > 0 else 0.0
        conf = float(np.clip(1.0 - noise, 0.0, 1.0))
        candidates.append(StairCandidate(sid, window, conf, n_stair, n_total, below, depth_diff))

    detections = []
    goal = state.episode.goal_category
    for cell in sorted(objects):
        if goal in objects[cell]:
            if det.goal_false_negative_rate > 0 and rng.random() < det.goal_false_negative_rate:
                continue
            detections.append(GoalDetection(cell, goal, 1.0))

    for arr in (cells, kinds, rel, dist, patch):
        arr.setflags(write=False)
    mask = stair_pixels >= 0
    mask.setflags(write=False)
    return Observation(
        pose=pose,
        cells=cells,
        kinds=kinds,
        rel_depth=rel,
        distance=dist,
        rooms=rooms,
        objects=objects,
        stair_candidates=tuple(candidates),
        goal_detections=tuple(detections),
        patch=patch,
        stair_mask=mask,
        collided=collided,
    )
