from __future__ import annotations

import functools
import json
import os
import time
from collections import Counter

import pytest
from hypothesis import HealthCheck, settings
from hypothesis.internal import observability

from floornav.scene import GenerationConfig, SceneSpec, generate_scene, sample_episode, scene_from_dict

settings.register_profile(
    "floornav",
    max_examples=200,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("floornav")

PROPERTY_EXAMPLES = 200


def ascii_scene(floors, stairs=(), objects=(), room="hall", seed=0) -> SceneSpec:
    """Scene from row strings: '#' wall, '.' free, digit = stair id.

    ``stairs`` holds (stair_id, floor_lo, axis) and takes its cells from the
    grids; ``objects`` holds (floor, row, col, name).
    """
    height, width = len(floors[0]), len(floors[0][0])
    sem = []
    for rows in floors:
        rooms = ["".join("-" if ch == "#" else "0" for ch in row) for row in rows]
        sem.append({"room_types": [room], "rooms": rooms, "objects": []})
    for f, r, c, name in objects:
        sem[f]["objects"].append([r, c, name])
    links = []
    for sid, lo, axis in stairs:
        cells = [[r, c] for r, row in enumerate(floors[lo]) for c, ch in enumerate(row) if ch == str(sid)]
        links.append({
            "stair_id": sid, "floor_lo": lo, "floor_hi": lo + 1,
            "region_lo": cells, "region_hi": cells,
            "centroid_lo": cells[len(cells) // 2], "centroid_hi": cells[len(cells) // 2],
            "area": len(cells), "corrupted": False, "axis": list(axis),
        })
    d = {
        "version": 1, "width": width, "height": height, "resolution_m": 0.25, "seed": seed,
        "room_vocabulary": [room],
        "floors": [{"cells": list(rows), "semantics": s} for rows, s in zip(floors, sem)],
        "stairs": links,
    }
    return scene_from_dict(d)


@functools.lru_cache(maxsize=None)
def small_scene(seed: int, floors: int = 2, size: int = 24) -> SceneSpec:
    return generate_scene(GenerationConfig(n_floors=floors, width=size, height=size), seed)


@functools.lru_cache(maxsize=None)
def small_pair(seed: int, floors: int = 2, kind: str = "cross_floor"):
    scene = small_scene(seed, floors)
    return scene, sample_episode(scene, kind, seed)


@pytest.fixture(scope="session")
def two_floor_scene() -> SceneSpec:
    return small_scene(7, 2, 32)


# ---------------------------------------------------------------------------
# bookkeeping for the invariant-suite acceptance check: passed cases per
# property test, their outcomes and the wall time of the whole session

SESSION = {
    "start": time.monotonic(),
    "cases": Counter(),
    "properties": {},  # test function name -> (nodeid, max_examples)
    "outcomes": {},  # nodeid -> "passed" | "failed" | "skipped"
    "acceptance": [],  # one line per criterion
}
CASES_FILE_ENV = "FLOORNAV_CASES_FILE"
LAST = "test_invariant_suite"


def _observe(obs) -> None:
    if obs.type == "test_case" and obs.status == "passed":
        # under pytest the property is the node id; key by the bare function name
        SESSION["cases"][obs.property.rsplit("::", 1)[-1].split("[", 1)[0]] += 1


def pytest_configure(config):
    observability.OBSERVABILITY_COLLECT_COVERAGE = False  # counting only; tracing would slow every case
    observability.add_observability_callback(_observe)


def pytest_collection_modifyitems(session, config, items):
    for item in items:
        fn = getattr(item, "obj", None)
        if getattr(fn, "is_hypothesis_test", False):
            name = fn.__name__
            if name in SESSION["properties"] and SESSION["properties"][name][0] != item.nodeid:
                raise pytest.UsageError(f"two property tests are called {name}")
            SESSION["properties"][name] = (item.nodeid, fn._hypothesis_internal_use_settings.max_examples)
    items.sort(key=lambda item: item.name == LAST)


def pytest_runtest_logreport(report):
    if report.when == "call" or report.outcome != "passed":
        SESSION["outcomes"][report.nodeid] = report.outcome


def pytest_sessionfinish(session, exitstatus):
    path = os.environ.get(CASES_FILE_ENV)
    if path:
        with open(path, "w") as fh:
            json.dump(
                {"cases": SESSION["cases"], "properties": SESSION["properties"], "outcomes": SESSION["outcomes"],
                 "seconds": time.monotonic() - SESSION["start"]},
                fh,
            )


def pytest_terminal_summary(terminalreporter):
    if SESSION["acceptance"]:
        terminalreporter.section("acceptance criteria")
        for line in SESSION["acceptance"]:
            terminalreporter.write_line(line)
