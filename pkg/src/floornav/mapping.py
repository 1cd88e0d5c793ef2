"""Per-floor belief maps, frontier extraction and frontier scoring."""
from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .scene import CellKind, RESOLUTION
from .simulator import DROP_THRESHOLD, Observation

log = logging.getLogger(__name__)

UNKNOWN, FREE, OBSTACLE = -1, 0, 1
DEFAULT_D_THETA = 3.0

Cell = tuple[int, int]
_EIGHT = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class CachedTransition:
    entry: Cell  # first stair cell stepped on
    exit: Cell  # last stair cell before leaving
    dest_floor: int
    approach: Cell | None = None  # free cell the climb started from
    arrival: Cell | None = None  # free cell reached on the far floor


@dataclass(frozen=True)
class ViewRecord:
    step: int
    patch: np.ndarray
    room_types: tuple[str, ...]
    objects: dict  # cell -> names seen in this view
    rooms: dict  # cell -> room type for the view's cells that carry objects


@dataclass
class ObstacleMap:
    occupancy: np.ndarray
    stair_labels: dict[Cell, int] = field(default_factory=dict)
    blacklist: set[int] = field(default_factory=set)
    retired: set[Cell] = field(default_factory=set)  # cells of blacklisted records
    transition_cache: dict[int, CachedTransition] = field(default_factory=dict)
    room_seen: np.ndarray | None = None  # room type id per cell (-1 unknown)
    room_names: list[str] = field(default_factory=list)
    first_view: np.ndarray | None = None  # index into ``views``
    views: list[ViewRecord] = field(default_factory=list)
    objects: dict[Cell, tuple[str, ...]] = field(default_factory=dict)
    drops: np.ndarray | None = None  # cells seen below the floor plane but not yet explained
    stair_seen: np.ndarray | None = None  # stair-looking cells not yet tied to a record
    resolution: float = RESOLUTION

    @classmethod
    def empty(cls, shape: tuple[int, int], resolution: float = RESOLUTION) -> "ObstacleMap":
        return cls(
            occupancy=np.full(shape, UNKNOWN, dtype=np.int8),
            room_seen=np.full(shape, -1, dtype=np.int16),
            first_view=np.full(shape, -1, dtype=np.int32),
            drops=np.zeros(shape, dtype=bool),
            stair_seen=np.zeros(shape, dtype=bool),
            resolution=resolution,
        )

    @property
    def shape(self) -> tuple[int, int]:
        return self.occupancy.shape

    def in_bounds(self, cell: Cell) -> bool:
        return 0 <= cell[0] < self.shape[0] and 0 <= cell[1] < self.shape[1]

    def label_mask(self) -> np.ndarray:
        mask = np.zeros(self.shape, dtype=bool)
        for cell in self.stair_labels:
            mask[cell] = True
        return mask

    def stair_cells(self, record_id: int) -> list[Cell]:
        return sorted(c for c, rid in self.stair_labels.items() if rid == record_id)

    def room_name(self, cell: Cell) -> str:
        i = int(self.room_seen[cell])
        return self.room_names[i] if i >= 0 else ""

    def checksum(self) -> int:
        parts = (
            self.occupancy.tobytes(),
            self.room_seen.tobytes(),
            self.first_view.tobytes(),
            self.drops.tobytes(),
            self.stair_seen.tobytes(),
            repr(sorted(self.stair_labels.items())).encode(),
            repr(sorted(self.blacklist)).encode(),
            repr(sorted(self.transition_cache.items())).encode(),
            repr(len(self.views)).encode(),
        )
        return hash(parts)


@dataclass
class ValueMap:
    m_ss: np.ndarray
    visit_count: np.ndarray

    @classmethod
    def empty(cls, shape: tuple[int, int]) -> "ValueMap":
        return cls(np.zeros(shape, dtype=np.float64), np.zeros(shape, dtype=np.int32))

    def checksum(self) -> int:
        return hash((self.m_ss.tobytes(), self.visit_count.tobytes()))


@dataclass
class FloorSummary:
    room_types: set[str] = field(default_factory=set)
    objects: set[str] = field(default_factory=set)


@dataclass
class FloorMapStack:
    shape: tuple[int, int]
    resolution: float = RESOLUTION
    obs_maps: dict[int, ObstacleMap] = field(default_factory=dict)
    val_maps: dict[int, ValueMap] = field(default_factory=dict)
    floor_descriptions: dict[int, FloorSummary] = field(default_factory=dict)
    active: int = 0

    @classmethod
    def create(cls, shape: tuple[int, int], floor: int = 0, resolution: float = RESOLUTION) -> "FloorMapStack":
        stack = cls(tuple(shape), resolution)
        switch_active_floor(stack, floor)
        return stack

    @property
    def obs(self) -> ObstacleMap:
        return self.obs_maps[self.active]

    @property
    def val(self) -> ValueMap:
        return self.val_maps[self.active]


@dataclass
class Frontier:
    cell: Cell
    floor: int
    distance: float
    score: float = 0.0
    description: object | None = None
    patch: np.ndarray | None = None
    is_stair: bool = False
    stair_record: int | None = None
    size: int = 1


def switch_active_floor(stack: FloorMapStack, floor: int) -> FloorMapStack:
    if floor < 0:
        raise ValueError("floor index must be >= 0")
    if floor not in stack.obs_maps:
        stack.obs_maps[floor] = ObstacleMap.empty(stack.shape, stack.resolution)
        stack.val_maps[floor] = ValueMap.empty(stack.shape)
        stack.floor_descriptions[floor] = FloorSummary()
    stack.active = floor
    return stack


def perceived_obstacles(om: ObstacleMap, obs: Observation) -> np.ndarray:
    """Boolean per visible cell: treat as Obstacle in the belief."""
    if om.stair_labels:
        labelled = om.label_mask()[obs.cells[:, 0], obs.cells[:, 1]]
    else:
        labelled = np.zeros(len(obs.cells), dtype=bool)
    hazard = (obs.kinds == CellKind.STAIR) | (obs.rel_depth < DROP_THRESHOLD)
    return (obs.kinds == CellKind.OBSTACLE) | (hazard & ~labelled)


def integrate_observation(stack: FloorMapStack, obs: Observation, similarity: float, step: int = 0) -> FloorMapStack:
    """Fuse one observation into the active floor's maps."""
    om, vm = stack.obs, stack.val
    rows, cols = obs.cells[:, 0], obs.cells[:, 1]
    blocked = perceived_obstacles(om, obs)
    occ = om.occupancy
    occ[rows[blocked], cols[blocked]] = OBSTACLE
    looks_stair = blocked & (obs.kinds != CellKind.OBSTACLE)
    om.stair_seen[rows[looks_stair], cols[looks_stair]] = True
    free = ~blocked
    fr, fc = rows[free], cols[free]
    unknown = occ[fr, fc] == UNKNOWN
    occ[fr[unknown], fc[unknown]] = FREE

    if obs.pose.tilt == 0:
        drop = obs.rel_depth < DROP_THRESHOLD
        om.drops[rows[drop], cols[drop]] = True

    np.maximum.at(vm.m_ss, (rows, cols), float(np.clip(similarity, 0.0, 1.0)))
    np.add.at(vm.visit_count, (rows, cols), 1)

    index = {}
    for name in dict.fromkeys(obs.rooms):
        if name and name not in om.room_names:
            om.room_names.append(name)
        index[name] = om.room_names.index(name) if name else -1
    ids = np.array([index[name] for name in obs.rooms], dtype=np.int16)
    has = ids >= 0
    om.room_seen[rows[has], cols[has]] = ids[has]

    fresh = om.first_view[rows, cols] < 0
    if fresh.any():
        room_of = {(int(r), int(c)): n for r, c, n in zip(rows, cols, obs.rooms)}
        om.views.append(
            ViewRecord(
                step=step,
                patch=obs.patch,
                room_types=obs.room_types,
                objects=dict(obs.objects),
                rooms={cell: room_of.get(cell, "") for cell in obs.objects},
            )
        )
        om.first_view[rows[fresh], cols[fresh]] = len(om.views) - 1

    for cell, objs in obs.objects.items():
        om.objects[cell] = objs
    summary = stack.floor_descriptions[stack.active]
    summary.room_types.update(obs.room_types)
    summary.objects.update(obs.visible_objects)
    return stack


def frontier_value(m_ss: float, d_i: float, d_theta: float = DEFAULT_D_THETA) -> float:
    """Semantic value plus a distance bonus that only applies within ``d_theta``."""
    if d_i < 0 or d_theta <= 0:
        raise ValueError("need d_i >= 0 and d_theta > 0")
    return m_ss + math.exp(-d_i) if d_i <= d_theta else m_ss


def free_distances(om: ObstacleMap, start: Cell, include_labels: bool = False) -> np.ndarray:
    """4-connected BFS step counts over known Free cells (inf where unreachable)."""
    h, w = om.shape
    ok = om.occupancy == FREE
    if not include_labels:
        for cell in om.stair_labels:
            ok[cell] = False
    dist = np.full((h, w), np.inf)
    if not om.in_bounds(start):
        return dist
    dist[start] = 0
    queue = deque([start])
    while queue:
        r, c = queue.popleft()
        d = dist[r, c] + 1
        for nr, nc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
            if 0 <= nr < h and 0 <= nc < w and ok[nr, nc] and dist[nr, nc] == np.inf:
                dist[nr, nc] = d
                queue.append((nr, nc))
    return dist


def boundary_mask(om: ObstacleMap) -> np.ndarray:
    occ = om.occupancy
    unknown = occ == UNKNOWN
    near = np.zeros_like(unknown)
    near[1:, :] |= unknown[:-1, :]
    near[:-1, :] |= unknown[1:, :]
    near[:, 1:] |= unknown[:, :-1]
    near[:, :-1] |= unknown[:, 1:]
    return (occ == FREE) & near & ~om.label_mask()


def _chain_midpoint(cells: list[Cell]) -> Cell:
    cellset = set(cells)

    def sweep(src: Cell) -> dict[Cell, int]:
        dist = {src: 0}
        queue = deque([src])
        while queue:
            r, c = queue.popleft()
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    n = (r + dr, c + dc)
                    if n in cellset and n not in dist:
                        dist[n] = dist[(r, c)] + 1
                        queue.append(n)
        return dist

    d0 = sweep(min(cells))
    end = min(cells, key=lambda c: (-d0[c], c))
    d1 = sweep(end)
    order = sorted(cells, key=lambda c: (d1[c], c))
    return order[(len(order) - 1) // 2]


def extract_frontiers(
    om: ObstacleMap,
    agent_cell: Cell,
    floor: int = 0,
    euclidean: bool = False,
) -> list[Frontier]:
    """One frontier per 8-connected boundary chain plus one per usable stair record."""
    res = om.resolution
    dist = None if euclidean else free_distances(om, agent_cell)

    def metres(cell: Cell) -> float:
        if euclidean:
            return math.hypot(cell[0] - agent_cell[0], cell[1] - agent_cell[1]) * res
        return float(dist[cell]) * res

    out: list[Frontier] = []
    labels, n = ndimage.label(boundary_mask(om), structure=_EIGHT)
    if n:
        rows, cols = np.nonzero(labels)
        groups: dict[int, list[Cell]] = {}
        for r, c in zip(rows.tolist(), cols.tolist()):
            groups.setdefault(int(labels[r, c]), []).append((r, c))
        for lab in sorted(groups):
            chain = groups[lab]
            mid = _chain_midpoint(chain)
            patch = None
            v = int(om.first_view[mid])
            if v >= 0:
                patch = om.views[v].patch
            out.append(Frontier(mid, floor, metres(mid), patch=patch, size=len(chain)))

    by_record: dict[int, list[Cell]] = {}
    for cell, rid in om.stair_labels.items():
        by_record.setdefault(rid, []).append(cell)
    for rid in sorted(by_record):
        if rid in om.blacklist:
            continue
        cells = sorted(by_record[rid])
        cen = stair_centroid(cells)
        if euclidean:
            d = metres(cen)
        else:
            d = math.inf
            cellset = set(cells)
            for r, c in cells:
                for n in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
                    if n not in cellset and om.in_bounds(n):
                        d = min(d, (float(dist[n]) + 1) * res)
        v = int(om.first_view[cen])
        patch = om.views[v].patch if v >= 0 else None
        out.append(Frontier(cen, floor, d, patch=patch, is_stair=True, stair_record=rid, size=len(cells)))
    return out


def stair_centroid(cells: list[Cell]) -> Cell:
    mr = sum(r for r, _ in cells) / len(cells)
    mc = sum(c for _, c in cells) / len(cells)
    return min(sorted(cells), key=lambda rc: (rc[0] - mr) ** 2 + (rc[1] - mc) ** 2)


def mark_stair(om: ObstacleMap, record_id: int, cells) -> None:
    """Relabel validated stair cells as traversable and tag them with the record."""
    if record_id in om.blacklist:
        raise ValueError(f"stair record {record_id} is blacklisted")
    for cell in cells:
        cell = (int(cell[0]), int(cell[1]))
        om.occupancy[cell] = FREE
        om.stair_labels[cell] = record_id
        om.drops[cell] = False
        om.stair_seen[cell] = False


def attached_stair_cells(om: ObstacleMap, cells) -> list[Cell]:
    """Unlabelled stair-looking cells 4-connected to ``cells`` through each other.

    A window can miss a stretch of steps that was glimpsed on another frame;
    those cells sit in the map as hazards and would otherwise wall the stair in two.
    """
    seen = om.stair_seen
    todo = [(int(r), int(c)) for r, c in cells]
    found: set[Cell] = set()
    while todo:
        r, c = todo.pop()
        for n in ((r + 1, c), (r - 1, c), (r, c + 1), (r, c - 1)):
            if om.in_bounds(n) and seen[n] and n not in found and n not in om.stair_labels and n not in om.retired:
                found.add(n)
                todo.append(n)
    return sorted(found)


def blacklist_stair(om: ObstacleMap, record_id: int) -> bool:
    """Mark a record impassable. Refused (returns False) if the record is cached."""
    if record_id in om.transition_cache:
        log.warning("refusing to blacklist stair record %d: it has a cached traversal", record_id)
        return False
    om.blacklist.add(record_id)
    for cell in [c for c, rid in om.stair_labels.items() if rid == record_id]:
        om.occupancy[cell] = OBSTACLE
        om.drops[cell] = False
        om.stair_seen[cell] = False
        om.retired.add(cell)
        del om.stair_labels[cell]
    return True


def cache_transition(
    om: ObstacleMap,
    record_id: int,
    entry: Cell,
    exit: Cell,
    dest_floor: int,
    approach: Cell | None = None,
    arrival: Cell | None = None,
) -> None:
    if record_id in om.blacklist:
        raise ValueError(f"stair record {record_id} is blacklisted")
    om.transition_cache[record_id] = CachedTransition(entry, exit, dest_floor, approach, arrival)


def dump_map(om: ObstacleMap) -> str:
    chars = np.full(om.shape, "?", dtype="<U1")
    chars[om.occupancy == FREE] = "."
    chars[om.occupancy == OBSTACLE] = "#"
    for cell, rid in om.stair_labels.items():
        chars[cell] = str(rid % 10)
    return "\n".join("".join(row) for row in chars)
