"""Ground-truth multi-floor buildings.

A scene is a stack of equally sized occupancy grids joined by stair links.
Stairs are straight two-lane strips that occupy the same footprint on both
floors they connect. On the lower floor the strip is open at its low end and
walled at its high end; on the upper floor it is the other way round, so the
only way to leave the strip on the far side is to change floor. That single
rule drives the simulator's motion model, the connectivity check and the
shortest-path oracle below.
"""
from __future__ import annotations

import hashlib
import json
import math
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

RESOLUTION = 0.25
SUCCESS_RADIUS = 1.0
FLOOR_HEIGHT = 3.0
SCENE_FILE_VERSION = 1

DEFAULT_ROOM_VOCABULARY = (
    "bathroom",
    "bedroom",
    "kitchen",
    "living room",
    "dining room",
    "office",
    "hall",
    "garage",
    "laundry room",
)

_DIRS4 = ((-1, 0), (1, 0), (0, -1), (0, 1))
_ROOM_CODES = "0123456789abcdefghijklmnopqrstuvwxyz"

Cell = tuple[int, int]


class CellKind(IntEnum):
    FREE = 0
    OBSTACLE = 1
    STAIR = 2


class SceneError(ValueError):
    """Malformed or invariant-violating scene data."""


class SceneGenerationError(RuntimeError):
    def __init__(self, seed: int, attempts: int, reason: str):
        super().__init__(f"seed {seed}: {reason} after {attempts} attempts")
        self.seed = seed
        self.attempts = attempts


class EpisodeSamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class SemanticTag:
    room_type: str
    objects: frozenset = frozenset()


def _freeze(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(eq=False)
class FloorGrid:
    """One floor: cell kinds, stair ids, room partition and object markers."""

    width: int
    height: int
    resolution: float
    kind: np.ndarray  # (height, width) int8 CellKind codes
    stair_id: np.ndarray  # (height, width) int16, -1 off-stair
    room: np.ndarray  # (height, width) int16 room index, -1 on walls
    room_types: tuple[str, ...]
    objects: dict[Cell, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        _freeze(self.kind)
        _freeze(self.stair_id)
        _freeze(self.room)

    def __eq__(self, other):
        if not isinstance(other, FloorGrid):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and self.resolution == other.resolution
            and np.array_equal(self.kind, other.kind)
            and np.array_equal(self.stair_id, other.stair_id)
            and np.array_equal(self.room, other.room)
            and self.room_types == other.room_types
            and self.objects == other.objects
        )

    def in_bounds(self, cell: Cell) -> bool:
        return 0 <= cell[0] < self.height and 0 <= cell[1] < self.width

    def room_type_at(self, cell: Cell) -> str:
        idx = int(self.room[cell])
        return self.room_types[idx] if idx >= 0 else ""

    def semantic(self, cell: Cell) -> SemanticTag:
        return SemanticTag(self.room_type_at(cell), frozenset(self.objects.get(cell, ())))

    def cells_of(self, kind: CellKind) -> list[Cell]:
        rows, cols = np.nonzero(self.kind == kind)
        return list(zip(rows.tolist(), cols.tolist()))


@dataclass(frozen=True)
class StairLink:
    stair_id: int
    floor_lo: int
    floor_hi: int
    region_lo: tuple[Cell, ...]
    region_hi: tuple[Cell, ...]
    centroid_lo: Cell
    centroid_hi: Cell
    area: int
    corrupted: bool = False
    # unit step pointing from the low (entry on floor_lo) end to the high end
    axis: Cell = (0, 1)

    def region_on(self, floor: int) -> tuple[Cell, ...]:
        if floor == self.floor_lo:
            return self.region_lo
        if floor == self.floor_hi:
            return self.region_hi
        return ()

    def other_floor(self, floor: int) -> int:
        return self.floor_hi if floor == self.floor_lo else self.floor_lo

    def progress(self, cell: Cell) -> int:
        """0-based index of ``cell`` along the axis, counted from the low end."""
        ref = min(self.region_lo, key=lambda c: c[0] * self.axis[0] + c[1] * self.axis[1])
        return (cell[0] - ref[0]) * self.axis[0] + (cell[1] - ref[1]) * self.axis[1]

    @property
    def length(self) -> int:
        return max(self.progress(c) for c in self.region_lo) + 1


@dataclass(frozen=True)
class Episode:
    scene_id: str
    start_floor: int
    start_pose: tuple[float, float, int]  # x (m), y (m), heading (deg)
    goal_category: str
    goal_instances: tuple[tuple[int, Cell], ...]
    shortest_path_len: float

    @property
    def cross_floor(self) -> bool:
        return all(f != self.start_floor for f, _ in self.goal_instances)

    def to_json(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "start_floor": self.start_floor,
            "start_pose": list(self.start_pose),
            "goal_category": self.goal_category,
            "goal_instances": [[f, [r, c]] for f, (r, c) in self.goal_instances],
            "shortest_path_len": self.shortest_path_len,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Episode":
        x, y, h = d["start_pose"]
        return cls(
            scene_id=d["scene_id"],
            start_floor=int(d["start_floor"]),
            start_pose=(float(x), float(y), int(h)),
            goal_category=d["goal_category"],
            goal_instances=tuple((int(f), (int(r), int(c))) for f, (r, c) in d["goal_instances"]),
            shortest_path_len=float(d["shortest_path_len"]),
        )


# ---------------------------------------------------------------------------
# priors


@dataclass(frozen=True)
class PriorTables:
    floor_prior: dict[str, dict[int, float]] = field(default_factory=dict)
    area_prior: dict[str, dict[str, float]] = field(default_factory=dict)

    def __post_init__(self):
        for table in (self.floor_prior, self.area_prior):
            for goal, row in table.items():
                for key, p in row.items():
                    if not 0.0 <= p <= 1.0:
                        raise ValueError(f"prior {goal}/{key}={p} outside [0, 1]")
        for goal, row in self.floor_prior.items():
            total = sum(row.values())
            if row and abs(total - 1.0) > 1e-6:
                raise ValueError(f"floor prior for {goal!r} sums to {total}, expected 1")

    def floor(self, goal: str, floor: int) -> float:
        return self.floor_prior.get(goal, {}).get(floor, 0.0)

    def area(self, goal: str, room_type: str) -> float:
        return self.area_prior.get(goal, {}).get(room_type, 0.0)

    @property
    def goal_categories(self) -> tuple[str, ...]:
        return tuple(self.floor_prior)

    @property
    def object_categories(self) -> tuple[str, ...]:
        return tuple(self.area_prior)

    def to_json(self) -> dict:
        return {
            "floor_prior": {g: {str(f): p for f, p in row.items()} for g, row in self.floor_prior.items()},
            "area_prior": {g: dict(row) for g, row in self.area_prior.items()},
        }

    @classmethod
    def from_json(cls, d: dict) -> "PriorTables":
        floor = {g: {int(f): float(p) for f, p in row.items()} for g, row in d.get("floor_prior", {}).items()}
        area = {g: {str(r): float(p) for r, p in row.items()} for g, row in d.get("area_prior", {}).items()}
        return cls(floor, area)


def load_priors(path: str | Path) -> PriorTables:
    with open(path, encoding="utf-8") as fh:
        return PriorTables.from_json(json.load(fh))


def default_priors() -> PriorTables:
    text = resources.files("floornav").joinpath("data/priors.json").read_text(encoding="utf-8")
    return PriorTables.from_json(json.loads(text))


# ---------------------------------------------------------------------------
# scene


@dataclass(eq=False)
class SceneSpec:
    floors: list[FloorGrid]
    stairs: list[StairLink]
    seed: int
    room_vocabulary: tuple[str, ...] = DEFAULT_ROOM_VOCABULARY

    def __eq__(self, other):
        if not isinstance(other, SceneSpec):
            return NotImplemented
        return (
            self.floors == other.floors
            and self.stairs == other.stairs
            and self.seed == other.seed
            and tuple(self.room_vocabulary) == tuple(other.room_vocabulary)
        )

    @property
    def width(self) -> int:
        return self.floors[0].width

    @property
    def height(self) -> int:
        return self.floors[0].height

    @property
    def resolution(self) -> float:
        return self.floors[0].resolution

    @property
    def n_floors(self) -> int:
        return len(self.floors)

    @cached_property
    def scene_id(self) -> str:
        return hashlib.sha256(scene_to_json(self).encode("utf-8")).hexdigest()[:16]

    @cached_property
    def stair_by_id(self) -> dict[int, StairLink]:
        return {s.stair_id: s for s in self.stairs}

    @cached_property
    def passable(self) -> list[np.ndarray]:
        """Per-floor boolean grids of cells an agent may stand on."""
        out = []
        for grid in self.floors:
            ok = grid.kind == CellKind.FREE
            for s in self.stairs:
                if not s.corrupted:
                    for r, c in s.region_on(len(out)):
                        ok[r, c] = True
            out.append(_freeze(ok))
        return out

    @cached_property
    def surface(self) -> list[np.ndarray]:
        """Per-floor surface height relative to that floor (inf on walls)."""
        out = []
        for f, grid in enumerate(self.floors):
            h = np.where(grid.kind == CellKind.OBSTACLE, np.inf, 0.0)
            for s in self.stairs:
                n = s.length
                for cell in s.region_on(f):
                    p = s.progress(cell)
                    if f == s.floor_lo:
                        h[cell] = FLOOR_HEIGHT * (p + 1) / (n + 1)
                    else:
                        h[cell] = -FLOOR_HEIGHT * (n - p) / (n + 1)
            out.append(_freeze(h))
        return out

    def stair_at(self, floor: int, cell: Cell) -> StairLink | None:
        grid = self.floors[floor]
        if not grid.in_bounds(cell):
            return None
        sid = int(grid.stair_id[cell])
        return self.stair_by_id.get(sid) if sid >= 0 else None

    def is_passable(self, floor: int, cell: Cell) -> bool:
        grid = self.floors[floor]
        return grid.in_bounds(cell) and bool(self.passable[floor][cell])

    def resolve_move(self, floor: int, src: Cell, dst: Cell) -> int | None:
        """Floor the agent ends on after stepping from ``src`` to ``dst``, or None if blocked."""
        if self.is_passable(floor, dst):
            return floor
        stair = self.stair_at(floor, src)
        if stair is None or stair.corrupted:
            return None
        other = stair.other_floor(floor)
        if dst not in stair.region_on(other) and self.is_passable(other, dst):
            return other
        return None

    def neighbors(self, floor: int, cell: Cell) -> Iterable[tuple[int, Cell]]:
        r, c = cell
        for dr, dc in _DIRS4:
            dst = (r + dr, c + dc)
            g = self.resolve_move(floor, cell, dst)
            if g is not None:
                yield g, dst

    def cell_of(self, x: float, y: float) -> Cell:
        res = self.resolution
        return (int(math.floor(y / res)), int(math.floor(x / res)))

    def center_of(self, cell: Cell) -> tuple[float, float]:
        res = self.resolution
        return ((cell[1] + 0.5) * res, (cell[0] + 0.5) * res)

    def goal_cells(self, category: str) -> list[tuple[int, Cell]]:
        out = []
        for f, grid in enumerate(self.floors):
            for cell in sorted(grid.objects):
                if category in grid.objects[cell]:
                    out.append((f, cell))
        return out


def line_of_sight(grid: FloorGrid, p0: tuple[float, float], p1: tuple[float, float]) -> bool:
    """True when the segment p0-p1 (metres, x/y) crosses no obstacle cell."""
    dist = math.hypot(p1[0] - p0[0], p1[1] - p0[1])
    n = max(2, int(math.ceil(dist / (grid.resolution * 0.2))) + 1)
    xs = np.linspace(p0[0], p1[0], n)
    ys = np.linspace(p0[1], p1[1], n)
    rows = np.floor(ys / grid.resolution).astype(int)
    cols = np.floor(xs / grid.resolution).astype(int)
    if rows.min() < 0 or cols.min() < 0 or rows.max() >= grid.height or cols.max() >= grid.width:
        return False
    return not bool(np.any(grid.kind[rows, cols] == CellKind.OBSTACLE))


# ---------------------------------------------------------------------------
# graph queries


def _reachable(scene: SceneSpec, start: tuple[int, Cell]) -> set[tuple[int, Cell]]:
    seen = {start}
    queue = deque([start])
    while queue:
        f, cell = queue.popleft()
        for nxt in scene.neighbors(f, cell):
            if nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    return seen


def is_connected(scene: SceneSpec) -> bool:
    """Every Free cell reaches every other through Free cells and intact stairs."""
    free = [(f, c) for f, g in enumerate(scene.floors) for c in g.cells_of(CellKind.FREE)]
    if not free:
        return False
    reached = _reachable(scene, free[0])
    return all(node in reached for node in free)


def success_cells(scene: SceneSpec, goals: Sequence[tuple[int, Cell]], radius: float = SUCCESS_RADIUS) -> set[tuple[int, Cell]]:
    """Passable cells whose centre is within ``radius`` of a goal and sees it."""
    out = set()
    res = scene.resolution
    reach = int(math.ceil(radius / res))
    for f, (gr, gc) in goals:
        grid = scene.floors[f]
        gxy = scene.center_of((gr, gc))
        for r in range(gr - reach, gr + reach + 1):
            for c in range(gc - reach, gc + reach + 1):
                if not scene.is_passable(f, (r, c)):
                    continue
                if math.hypot((r - gr) * res, (c - gc) * res) > radius + 1e-9:
                    continue
                if line_of_sight(grid, scene.center_of((r, c)), gxy):
                    out.add((f, (r, c)))
    return out


def shortest_path_length(
    scene: SceneSpec,
    start: tuple[int, tuple[float, float]],
    goals: Sequence[tuple[int, Cell]],
    radius: float = SUCCESS_RADIUS,
    floors: Iterable[int] | None = None,
) -> float:
    """Geodesic metres from ``start`` (floor, (x, y)) to the nearest success cell.

    Unit-cost BFS over the multi-floor motion graph; stair strips are walked cell
    by cell exactly as the simulator moves. ``floors`` restricts the search to a
    subset of floors. Returns ``inf`` if unreachable.
    """
    if not goals:
        raise ValueError("goals must be nonempty")
    floor, pose = start
    x, y = pose[0], pose[1]
    allowed = None if floors is None else set(floors)
    src = (floor, scene.cell_of(x, y))
    if not scene.is_passable(*src):
        raise ValueError(f"start {src} is not on a passable cell")
    targets = success_cells(scene, goals, radius)
    if src in targets:
        return 0.0
    dist = {src: 0}
    queue = deque([src])
    while queue:
        node = queue.popleft()
        d = dist[node] + 1
        for nxt in scene.neighbors(*node):
            if nxt in dist or (allowed is not None and nxt[0] not in allowed):
                continue
            if nxt in targets:
                return d * scene.resolution
            dist[nxt] = d
            queue.append(nxt)
    return math.inf


# ---------------------------------------------------------------------------
# serialization


def _cell_char(kind: int, sid: int) -> str:
    if kind == CellKind.OBSTACLE:
        return "#"
    if kind == CellKind.STAIR:
        return str(sid)
    return "."


def scene_to_dict(scene: SceneSpec) -> dict:
    floors = []
    for g in scene.floors:
        rows = ["".join(_cell_char(int(k), int(s)) for k, s in zip(krow, srow)) for krow, srow in zip(g.kind, g.stair_id)]
        rooms = ["".join("-" if v < 0 else _ROOM_CODES[v] for v in row) for row in g.room.tolist()]
        objects = [[r, c, name] for (r, c), names in sorted(g.objects.items()) for name in names]
        floors.append({"cells": rows, "semantics": {"room_types": list(g.room_types), "rooms": rooms, "objects": objects}})
    stairs = [
        {
            "stair_id": s.stair_id,
            "floor_lo": s.floor_lo,
            "floor_hi": s.floor_hi,
            "region_lo": [list(c) for c in s.region_lo],
            "region_hi": [list(c) for c in s.region_hi],
            "centroid_lo": list(s.centroid_lo),
            "centroid_hi": list(s.centroid_hi),
            "area": s.area,
            "corrupted": s.corrupted,
            "axis": list(s.axis),
        }
        for s in scene.stairs
    ]
    return {
        "version": SCENE_FILE_VERSION,
        "width": scene.width,
        "height": scene.height,
        "resolution_m": scene.resolution,
        "seed": scene.seed,
        "room_vocabulary": list(scene.room_vocabulary),
        "floors": floors,
        "stairs": stairs,
    }


def scene_to_json(scene: SceneSpec) -> str:
    return json.dumps(scene_to_dict(scene), separators=(",", ":"))


def scene_from_dict(d: dict) -> SceneSpec:
    if d.get("version") != SCENE_FILE_VERSION:
        raise SceneError(f"unsupported scene file version {d.get('version')!r}")
    try:
        width, height, res = int(d["width"]), int(d["height"]), float(d["resolution_m"])
        vocab = tuple(d["room_vocabulary"])
        floors = []
        for fd in d["floors"]:
            rows = fd["cells"]
            if len(rows) != height or any(len(r) != width for r in rows):
                raise SceneError("floor dimensions disagree with header")
            kind = np.zeros((height, width), dtype=np.int8)
            sid = np.full((height, width), -1, dtype=np.int16)
            for r, row in enumerate(rows):
                for c, ch in enumerate(row):
                    if ch == "#":
                        kind[r, c] = CellKind.OBSTACLE
                    elif ch.isdigit():
                        kind[r, c] = CellKind.STAIR
                        sid[r, c] = int(ch)
                    elif ch != ".":
                        raise SceneError(f"unknown cell code {ch!r}")
            sem = fd["semantics"]
            room = np.array([[-1 if ch == "-" else _ROOM_CODES.index(ch) for ch in row] for row in sem["rooms"]], dtype=np.int16)
            if room.shape != (height, width):
                raise SceneError("room grid dimensions disagree with header")
            room_types = tuple(sem["room_types"])
            objects: dict[Cell, tuple[str, ...]] = {}
            for r, c, name in sem["objects"]:
                objects[(int(r), int(c))] = objects.get((int(r), int(c)), ()) + (str(name),)
            floors.append(FloorGrid(width, height, res, kind, sid, room, room_types, objects))
        stairs = [
            StairLink(
                stair_id=int(s["stair_id"]),
                floor_lo=int(s["floor_lo"]),
                floor_hi=int(s["floor_hi"]),
                region_lo=tuple((int(r), int(c)) for r, c in s["region_lo"]),
                region_hi=tuple((int(r), int(c)) for r, c in s["region_hi"]),
                centroid_lo=tuple(s["centroid_lo"]),
                centroid_hi=tuple(s["centroid_hi"]),
                area=int(s["area"]),
                corrupted=bool(s["corrupted"]),
                axis=tuple(s.get("axis", (0, 1))),
            )
            for s in d["stairs"]
        ]
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, SceneError):
            raise
        raise SceneError(f"malformed scene file: {exc}") from exc
    scene = SceneSpec(floors, stairs, int(d["seed"]), vocab)
    validate_scene(scene)
    return scene


def save_scene(scene: SceneSpec, path: str | Path) -> None:
    Path(path).write_text(json.dumps(scene_to_dict(scene), indent=1), encoding="utf-8")


def load_scene(path: str | Path) -> SceneSpec:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SceneError(f"{path}: not valid JSON ({exc})") from exc
    return scene_from_dict(d)


def save_episodes(episodes: Sequence[Episode], path: str | Path) -> None:
    Path(path).write_text(json.dumps([e.to_json() for e in episodes], indent=1), encoding="utf-8")


def load_episodes(path: str | Path) -> list[Episode]:
    return [Episode.from_json(d) for d in json.loads(Path(path).read_text(encoding="utf-8"))]


def _is_4connected(cells: Sequence[Cell]) -> bool:
    cellset = set(cells)
    if not cellset:
        return False
    first = next(iter(cellset))
    seen = {first}
    queue = deque([first])
    while queue:
        r, c = queue.popleft()
        for dr, dc in _DIRS4:
            n = (r + dr, c + dc)
            if n in cellset and n not in seen:
                seen.add(n)
                queue.append(n)
    return len(seen) == len(cellset)


def validate_scene(scene: SceneSpec) -> None:
    """Raise SceneError on any SceneSpec invariant violation."""
    if not scene.floors:
        raise SceneError("scene has no floors")
    shape = (scene.width, scene.height, scene.resolution)
    for f, g in enumerate(scene.floors):
        if (g.width, g.height, g.resolution) != shape:
            raise SceneError(f"floor {f} dimensions differ")
        border = np.concatenate([g.kind[0], g.kind[-1], g.kind[:, 0], g.kind[:, -1]])
        if np.any(border != CellKind.OBSTACLE):
            raise SceneError(f"floor {f} border is not closed")
        for t in g.room_types:
            if t not in scene.room_vocabulary:
                raise SceneError(f"room type {t!r} not in vocabulary")
    ids = set()
    for s in scene.stairs:
        if s.stair_id in ids or not 0 <= s.stair_id <= 9:
            raise SceneError(f"bad stair id {s.stair_id}")
        ids.add(s.stair_id)
        if s.floor_hi != s.floor_lo + 1 or s.floor_lo < 0 or s.floor_hi >= scene.n_floors:
            raise SceneError(f"stair {s.stair_id} references missing or non-adjacent floors")
        for f, region in ((s.floor_lo, s.region_lo), (s.floor_hi, s.region_hi)):
            if not _is_4connected(region):
                raise SceneError(f"stair {s.stair_id} region on floor {f} is empty or disconnected")
            g = scene.floors[f]
            for cell in region:
                if not g.in_bounds(cell) or g.stair_id[cell] != s.stair_id:
                    raise SceneError(f"stair {s.stair_id} region cell {cell} not labelled on floor {f}")
    for f, g in enumerate(scene.floors):
        for sid in np.unique(g.stair_id[g.stair_id >= 0]).tolist():
            stair = scene.stair_by_id.get(sid)
            if stair is None or f not in (stair.floor_lo, stair.floor_hi):
                raise SceneError(f"floor {f} cell references unknown stair {sid}")
    if not is_connected(scene):
        raise SceneError("traversability graph is not connected")


# ---------------------------------------------------------------------------
# procedural generation


@dataclass(frozen=True)
class GenerationConfig:
    n_floors: int = 2
    width: int = 32
    height: int = 32
    min_rooms: int = 3
    max_rooms: int = 6
    n_stairs: int | None = None  # defaults to n_floors - 1
    corrupted_prob: float = 0.0
    corrupted_stairs: tuple[int, ...] = ()  # stair ids forced corrupted
    stair_lengths: tuple[int, ...] = (4, 5, 6)
    instances_per_goal: tuple[int, int] = (1, 2)
    min_room_side: int = 4
    max_attempts: int = 20
    room_vocabulary: tuple[str, ...] = DEFAULT_ROOM_VOCABULARY
    priors: PriorTables | None = None

    @property
    def stair_count(self) -> int:
        return self.n_floors - 1 if self.n_stairs is None else self.n_stairs

    def validate(self) -> None:
        if not 1 <= self.n_floors <= 3:
            raise ValueError("n_floors must be 1-3")
        if self.width < 24 or self.height < 24:
            raise ValueError("grid must be at least 24x24")
        if not 1 <= self.min_rooms <= self.max_rooms:
            raise ValueError("need 1 <= min_rooms <= max_rooms")
        if self.stair_count < self.n_floors - 1 or self.stair_count > 10:
            raise ValueError("stair count must be in [n_floors - 1, 10]")
        if self.n_floors == 1 and self.stair_count:
            raise ValueError("a single floor cannot hold stairs")
        if not 0.0 <= self.corrupted_prob <= 1.0:
            raise ValueError("corrupted_prob must be in [0, 1]")


@dataclass
class _Rect:
    r0: int
    c0: int
    r1: int  # inclusive
    c1: int

    @property
    def h(self) -> int:
        return self.r1 - self.r0 + 1

    @property
    def w(self) -> int:
        return self.c1 - self.c0 + 1


def _split_rooms(rng: np.random.Generator, kind: np.ndarray, n_rooms: int, min_side: int) -> list[_Rect]:
    """Binary space partition of the interior; walls get a two-cell door each."""
    H, W = kind.shape
    leaves = [_Rect(1, 1, H - 2, W - 2)]
    while len(leaves) < n_rooms:
        order = sorted(range(len(leaves)), key=lambda i: -leaves[i].h * leaves[i].w)
        for i in order:
            rect = leaves[i]
            vertical = rect.w >= rect.h
            span = rect.w if vertical else rect.h
            lo, hi = min_side, span - min_side - 1  # wall offset within the rect
            if hi < lo:
                vertical = not vertical
                span = rect.w if vertical else rect.h
                hi = span - min_side - 1
                if hi < lo:
                    continue
            options = []
            for off in range(lo, hi + 1):
                if vertical:
                    c = rect.c0 + off
                    ends = [(rect.r0 - 1, c), (rect.r1 + 1, c)]
                else:
                    r = rect.r0 + off
                    ends = [(r, rect.c0 - 1), (r, rect.c1 + 1)]
                # never butt a new wall into an existing door
                if all(kind[e] == CellKind.OBSTACLE for e in ends):
                    options.append(off)
            if not options:
                continue
            off = int(rng.choice(options))
            if vertical:
                c = rect.c0 + off
                kind[rect.r0 : rect.r1 + 1, c] = CellKind.OBSTACLE
                d = int(rng.integers(rect.r0, rect.r1))
                kind[d : d + 2, c] = CellKind.FREE
                a, b = _Rect(rect.r0, rect.c0, rect.r1, c - 1), _Rect(rect.r0, c + 1, rect.r1, rect.c1)
            else:
                r = rect.r0 + off
                kind[r, rect.c0 : rect.c1 + 1] = CellKind.OBSTACLE
                d = int(rng.integers(rect.c0, rect.c1))
                kind[r, d : d + 2] = CellKind.FREE
                a, b = _Rect(rect.r0, rect.c0, r - 1, rect.c1), _Rect(r + 1, rect.c0, rect.r1, rect.c1)
            leaves[i : i + 1] = [a, b]
            break
        else:
            break
    return leaves


def _floor_connected(free: np.ndarray) -> bool:
    from scipy import ndimage

    _, n = ndimage.label(free)
    return n == 1


@dataclass
class _StairPlan:
    cells: list[Cell]
    axis: Cell
    sides: list[Cell]
    low_cap: list[Cell]
    high_cap: list[Cell]
    low_apron: list[Cell]
    high_apron: list[Cell]


def _plan_stair(r0: int, c0: int, length: int, axis: Cell) -> _StairPlan:
    ar, ac = axis
    pr, pc = abs(ac), abs(ar)  # perpendicular unit (points to the second lane)

    def at(p: int, lane: int) -> Cell:
        return (r0 + p * ar + lane * pr, c0 + p * ac + lane * pc)

    cells = [at(p, lane) for p in range(length) for lane in (0, 1)]
    sides = [at(p, lane) for p in range(-1, length + 1) for lane in (-1, 2)]
    return _StairPlan(
        cells=cells,
        axis=axis,
        sides=sides,
        low_cap=[at(-1, 0), at(-1, 1)],
        high_cap=[at(length, 0), at(length, 1)],
        low_apron=[at(-2, 0), at(-2, 1)],
        high_apron=[at(length + 1, 0), at(length + 1, 1)],
    )


def _try_place_stair(
    rng: np.random.Generator,
    kinds: list[np.ndarray],
    doors: list[np.ndarray],
    lo: int,
    lengths: Sequence[int],
    tries: int = 200,
) -> _StairPlan | None:
    H, W = kinds[0].shape
    hi = lo + 1
    axes = ((0, 1), (0, -1), (1, 0), (-1, 0))
    for _ in range(tries):
        length = int(rng.choice(lengths))
        axis = axes[int(rng.integers(4))]
        plan = _plan_stair(int(rng.integers(1, H - 1)), int(rng.integers(1, W - 1)), length, axis)
        every = plan.cells + plan.sides + plan.low_apron + plan.high_apron
        if any(not (1 <= r < H - 1 and 1 <= c < W - 1) for r, c in every):
            continue
        need_free = [(lo, c) for c in plan.cells + plan.low_cap + plan.low_apron]
        need_free += [(hi, c) for c in plan.cells + plan.high_cap + plan.high_apron]
        if any(kinds[f][c] != CellKind.FREE for f, c in need_free):
            continue
        if any(doors[f][c] for f in (lo, hi) for c in plan.cells + plan.sides):
            continue
        trial = [k.copy() for k in (kinds[lo], kinds[hi])]
        for c in plan.cells:
            trial[0][c] = trial[1][c] = CellKind.STAIR
        for c in plan.sides:
            trial[0][c] = trial[1][c] = CellKind.OBSTACLE
        for c in plan.high_cap:
            trial[0][c] = CellKind.OBSTACLE
        for c in plan.low_cap:
            trial[1][c] = CellKind.OBSTACLE
        if _floor_connected(trial[0] == CellKind.FREE) and _floor_connected(trial[1] == CellKind.FREE):
            kinds[lo][:] = trial[0]
            kinds[hi][:] = trial[1]
            return plan
    return None


def _centroid(cells: Sequence[Cell]) -> Cell:
    mr = sum(r for r, _ in cells) / len(cells)
    mc = sum(c for _, c in cells) / len(cells)
    return min(sorted(cells), key=lambda rc: (rc[0] - mr) ** 2 + (rc[1] - mc) ** 2)


def _weighted_choice(rng: np.random.Generator, items: Sequence, weights: Sequence[float]):
    w = np.asarray(weights, dtype=float)
    if w.sum() <= 0:
        return items[int(rng.integers(len(items)))]
    return items[int(rng.choice(len(items), p=w / w.sum()))]


def _attempt(config: GenerationConfig, priors: PriorTables, rng: np.random.Generator, seed: int) -> SceneSpec | None:
    H, W, nf = config.height, config.width, config.n_floors
    kinds, rooms_per_floor, doors = [], [], []
    for _ in range(nf):
        kind = np.full((H, W), CellKind.OBSTACLE, dtype=np.int8)
        kind[1:-1, 1:-1] = CellKind.FREE
        n_rooms = int(rng.integers(config.min_rooms, config.max_rooms + 1))
        before = kind.copy()
        rects = _split_rooms(rng, kind, n_rooms, config.min_room_side)
        # doors are cells the splitter left open inside a wall line
        interior = np.zeros((H, W), dtype=bool)
        for rc in rects:
            interior[rc.r0 : rc.r1 + 1, rc.c0 : rc.c1 + 1] = True
        door = (kind == CellKind.FREE) & ~interior & (before == CellKind.FREE)
        kinds.append(kind)
        rooms_per_floor.append(rects)
        doors.append(door)

    # stairs: one per adjacent floor pair first, extras on random pairs
    pairs = list(range(nf - 1))
    extra = config.stair_count - len(pairs)
    pairs += [int(rng.integers(nf - 1)) for _ in range(extra)]
    plans: list[tuple[int, _StairPlan]] = []
    for lo in pairs:
        plan = _try_place_stair(rng, kinds, doors, lo, config.stair_lengths)
        if plan is None:
            return None
        plans.append((lo, plan))

    stair_id = [np.full((H, W), -1, dtype=np.int16) for _ in range(nf)]
    stairs = []
    for sid, (lo, plan) in enumerate(plans):
        drawn = bool(rng.random() < config.corrupted_prob)  # always drawn so forcing ids keeps the layout
        corrupted = sid in config.corrupted_stairs or drawn
        for f in (lo, lo + 1):
            for c in plan.cells:
                stair_id[f][c] = sid
        region = tuple(sorted(plan.cells))
        cen = _centroid(region)
        stairs.append(StairLink(sid, lo, lo + 1, region, region, cen, cen, len(region), corrupted, plan.axis))

    # room labels and types
    vocab = list(config.room_vocabulary)
    order = [vocab[i] for i in rng.permutation(len(vocab))]
    floor_room_types: list[list[str]] = []
    room_grids = []
    k = 0
    for f in range(nf):
        room = np.full((H, W), -1, dtype=np.int16)
        for i, rc in enumerate(rooms_per_floor[f]):
            room[rc.r0 : rc.r1 + 1, rc.c0 : rc.c1 + 1] = i
        # door cells join the room on their lower/right side
        for r, c in zip(*np.nonzero(doors[f])):
            for dr, dc in _DIRS4:
                v = room[r + dr, c + dc]
                if v >= 0:
                    room[r, c] = v
                    break
        room[kinds[f] == CellKind.OBSTACLE] = -1
        room_grids.append(room)
        types = []
        for _ in rooms_per_floor[f]:
            types.append(order[k % len(order)])
            k += 1
        floor_room_types.append(types)

    # cells that may hold an object: plain free cells away from stair mouths
    blocked = [np.zeros((H, W), dtype=bool) for _ in range(nf)]
    for lo, plan in plans:
        for f in (lo, lo + 1):
            for c in plan.low_cap + plan.high_cap + plan.low_apron + plan.high_apron:
                blocked[f][c] = True
    objects: list[dict[Cell, tuple[str, ...]]] = [{} for _ in range(nf)]

    def free_cells(f: int, i: int) -> list[Cell]:
        mask = (room_grids[f] == i) & (kinds[f] == CellKind.FREE) & ~blocked[f] & ~doors[f]
        return list(zip(*(a.tolist() for a in np.nonzero(mask))))

    def put(f: int, cell: Cell, name: str) -> None:
        objects[f][cell] = objects[f].get(cell, ()) + (name,)

    for goal in priors.goal_categories:
        lo_n, hi_n = config.instances_per_goal
        for _ in range(int(rng.integers(lo_n, hi_n + 1))):
            fl = list(range(nf))
            f = _weighted_choice(rng, fl, [priors.floor(goal, i) for i in fl])
            types = floor_room_types[f]
            weights = [priors.area(goal, t) for t in types]
            if sum(weights) <= 0:
                table = priors.area_prior.get(goal, {})
                best = max(sorted(table), key=lambda t: table[t]) if table else None
                if best is None or best not in config.room_vocabulary:
                    best = types[int(rng.integers(len(types)))]
                j = int(rng.integers(len(types)))
                types[j] = best
                weights = [priors.area(goal, t) for t in types]
            i = _weighted_choice(rng, list(range(len(types))), weights)
            cells = free_cells(f, i)
            if not cells:
                return None
            put(f, cells[int(rng.integers(len(cells)))], goal)

    goals = set(priors.goal_categories)
    context = [o for o in priors.object_categories if o not in goals]
    for f in range(nf):
        for i, t in enumerate(floor_room_types[f]):
            cells = free_cells(f, i)
            for obj in context:
                if cells and rng.random() < priors.area(obj, t):
                    put(f, cells[int(rng.integers(len(cells)))], obj)

    floors = [
        FloorGrid(W, H, RESOLUTION, kinds[f], stair_id[f], room_grids[f], tuple(floor_room_types[f]), objects[f])
        for f in range(nf)
    ]
    scene = SceneSpec(floors, stairs, seed, tuple(config.room_vocabulary))
    return scene if is_connected(scene) else None


def generate_scene(config: GenerationConfig, seed: int) -> SceneSpec:
    """Build a random multi-floor building; deterministic in (config, seed)."""
    config.validate()
    priors = config.priors if config.priors is not None else default_priors()
    rng = np.random.default_rng(seed)
    for attempt in range(1, config.max_attempts + 1):
        scene = _attempt(config, priors, rng, seed)
        if scene is not None:
            validate_scene(scene)
            return scene
    raise SceneGenerationError(seed, config.max_attempts, "could not build a connected scene")


# ---------------------------------------------------------------------------
# episodes


def sample_episode(
    scene: SceneSpec,
    kind: str,
    seed: int,
    categories: Sequence[str] | None = None,
    max_tries: int = 200,
) -> Episode:
    """Draw a start pose and goal category for the requested floor relationship.

    ``categories`` lists the goal objects to choose from (default: the goal rows
    of the bundled prior table).
    """
    if kind not in ("same_floor", "cross_floor", "any"):
        raise ValueError(f"unknown episode kind {kind!r}")
    if kind == "cross_floor" and scene.n_floors < 2:
        raise EpisodeSamplingError("cross_floor episodes need at least two floors")
    wanted = default_priors().goal_categories if categories is None else categories
    present = {name for g in scene.floors for names in g.objects.values() for name in names}
    categories = sorted(c for c in set(wanted) if c in present)
    if not categories:
        raise EpisodeSamplingError("scene holds no instance of any goal category")
    instances = {cat: scene.goal_cells(cat) for cat in categories}
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        floor = int(rng.integers(scene.n_floors))
        if kind == "cross_floor":
            cands = [c for c in categories if all(f != floor for f, _ in instances[c])]
        elif kind == "same_floor":
            cands = [c for c in categories if any(f == floor for f, _ in instances[c])]
        else:
            cands = categories
        if not cands:
            continue
        cat = cands[int(rng.integers(len(cands)))]
        g = scene.floors[floor]
        starts = [c for c in g.cells_of(CellKind.FREE)]
        cell = starts[int(rng.integers(len(starts)))]
        x, y = scene.center_of(cell)
        heading = 30 * int(rng.integers(12))
        goals = instances[cat]
        spl = shortest_path_length(scene, (floor, (x, y)), goals)
        if not math.isfinite(spl) or spl <= 0:
            continue
        if kind == "same_floor":
            local = shortest_path_length(scene, (floor, (x, y)), goals, floors=[floor])
            if local != spl:
                continue
        return Episode(scene.scene_id, floor, (x, y, heading), cat, tuple(goals), spl)
    raise EpisodeSamplingError(f"no valid {kind} episode after {max_tries} tries (seed {seed})")
