"""Acceptance checks: seeded suites, batch comparisons and the numeric oracles behind them."""
from __future__ import annotations

import json
import math
import tempfile
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import shortest_path

from . import harness
from .harness import EpisodeResult, RunConfig, compute_metrics, compute_spl, run_episodes
from .llmclient import AREA_EXAMPLE, FLOOR_EXAMPLE, ResponseParseError, build_prompt, parse_response
from .mapping import frontier_value
from .scene import (
    EpisodeSamplingError,
    GenerationConfig,
    SceneGenerationError,
    SceneSpec,
    generate_scene,
    line_of_sight,
    sample_episode,
    shortest_path_length,
)
from .simulator import StairCandidate
from .stairnav import CLIMB_BUDGET, EPS1, EPS2, validate_stair

Pair = tuple  # (SceneSpec, Episode)

CROSS_FLOOR_SEED = 0
STRESS_SEED = 5000
SUITE_SIZE = 50
STRESS_SIZE = 20


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        mark = "PASS" if self.passed else "FAIL"
        return f"[{mark}] {self.number}. {self.name}: {self.detail} ({self.seconds:.1f}s)"


# ---------------------------------------------------------------------------
# suites


def cross_floor_suite(n: int = SUITE_SIZE, seed: int = CROSS_FLOOR_SEED, size: int = 32) -> list[Pair]:
    """Alternating 2- and 3-floor buildings, one cross-floor episode each."""
    pairs = []
    for i in range(n):
        scene = generate_scene(GenerationConfig(n_floors=2 + i % 2, width=size, height=size), seed + i)
        pairs.append((scene, sample_episode(scene, "cross_floor", i)))
    return pairs


def _stair_distance(scene: SceneSpec, episode, stair) -> float:
    f = episode.start_floor
    x, y, _ = episode.start_pose
    return shortest_path_length(scene, (f, (x, y)), [(f, c) for c in stair.region_on(f)], radius=0.0)


def stress_suite(n: int = STRESS_SIZE, seed: int = STRESS_SEED) -> list[Pair]:
    """Two-floor buildings with two stairs where the one nearer the start is broken.

    Each scene is first built intact to find which stair the agent would reach
    first; the same seed is then rebuilt with that stair corrupted, which keeps
    the layout and the episode identical.
    """
    pairs: list[Pair] = []
    s = seed
    while len(pairs) < n:
        s += 1
        try:
            intact = generate_scene(GenerationConfig(n_floors=2, n_stairs=2), s)
            episode = sample_episode(intact, "cross_floor", s)
        except (SceneGenerationError, EpisodeSamplingError):
            continue
        dist = [_stair_distance(intact, episode, st) for st in intact.stairs]
        if not all(math.isfinite(d) for d in dist) or dist[0] == dist[1]:
            continue
        near = int(np.argmin(dist))
        try:
            broken = generate_scene(GenerationConfig(n_floors=2, n_stairs=2, corrupted_stairs=(near,)), s)
            ep = sample_episode(broken, "cross_floor", s)
        except (SceneGenerationError, EpisodeSamplingError):
            continue  # the alternative alone does not connect the floors
        if ep.start_pose != episode.start_pose or ep.goal_category != episode.goal_category:
            continue
        pairs.append((broken, ep))
    return pairs


@dataclass
class SuiteRunner:
    """Runs each (suite, variant) once and hands the cached results to every criterion."""

    concurrency: int = 1
    suite_size: int = SUITE_SIZE
    stress_size: int = STRESS_SIZE
    _suites: dict = field(default_factory=dict)
    _results: dict = field(default_factory=dict)
    seconds: dict = field(default_factory=dict)

    def suite(self, name: str) -> list[Pair]:
        if name not in self._suites:
            if name == "cross_floor":
                self._suites[name] = cross_floor_suite(self.suite_size)
            elif name == "stress":
                self._suites[name] = stress_suite(self.stress_size)
            else:
                raise KeyError(name)
        return self._suites[name]

    def results(self, name: str, ablate: Sequence[str] = (), reference: bool = False) -> list[EpisodeResult]:
        key = (name, tuple(sorted(ablate)), reference)
        if key not in self._results:
            pairs = self.suite(name)
            run = RunConfig(ablate=tuple(ablate), reference_planner=reference, concurrency=self.concurrency)
            t0 = time.perf_counter()
            self._results[key] = run_episodes(pairs, run)
            self.seconds[key] = time.perf_counter() - t0
        return self._results[key]


# ---------------------------------------------------------------------------
# criteria

# boundary truth table for (confidence, stair pixels out of 10); both comparisons are strict
STAIR_TRUTH_TABLE = [
    (0.79, 4, False), (0.79, 5, False), (0.79, 6, False),
    (0.80, 4, False), (0.80, 5, False), (0.80, 6, False),
    (0.81, 4, False), (0.81, 5, False), (0.81, 6, True),
    (1.00, 10, True), (0.00, 0, False), (1.00, 5, False), (0.80, 10, False),
]


def check_formula(points: int = 1000, seed: int = 7) -> CriterionResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    m = rng.uniform(0.0, 1.0, points)
    d = rng.uniform(0.0, 6.0, points)
    theta = rng.uniform(0.1, 5.0, points)
    d[:50] = theta[:50]  # exactly on the threshold
    expected = np.where(d <= theta, m + np.exp(-d), m)
    got = np.array([frontier_value(float(a), float(b), float(c)) for a, b, c in zip(m, d, theta)])
    worst = float(np.max(np.abs(got - expected)))
    bad_rows = []
    for conf, stair, want in STAIR_TRUTH_TABLE:
        cand = StairCandidate(0, ((0, 0),), conf, stair, 10, False, 0.0)
        if validate_stair(cand, EPS1, EPS2) is not want:
            bad_rows.append((conf, stair))
    seconds = time.perf_counter() - t0
    ok = worst <= 1e-12 and not bad_rows and seconds < 1.0
    detail = f"max |error| {worst:.1e} over {points} points, {len(bad_rows)} truth-table mismatches"
    return CriterionResult(1, "formula fidelity", ok, detail, seconds)


def check_cross_floor(runner: SuiteRunner) -> CriterionResult:
    full = runner.results("cross_floor")
    cut = runner.results("cross_floor", ("cross-floor",))
    seconds = runner.seconds[("cross_floor", (), False)] + runner.seconds[("cross_floor", ("cross-floor",), False)]
    sr, sr_cut = compute_metrics(full).sr, compute_metrics(cut).sr
    ok = sr >= 80.0 and sr_cut <= 5.0 and seconds < 120.0
    return CriterionResult(2, "cross-floor capability", ok, f"SR {sr:.1f}% vs {sr_cut:.1f}% without transitions", seconds)


def check_oracle_efficiency(runner: SuiteRunner) -> CriterionResult:
    t0 = time.perf_counter()
    ours = compute_metrics(runner.results("cross_floor")).mean_oracle_calls
    ref = compute_metrics(runner.results("cross_floor", reference=True)).mean_oracle_calls
    ratio = ours / ref if ref > 0 else math.inf
    ok = ours <= 5.0 and ratio <= 0.10
    detail = f"{ours:.2f} calls per episode vs {ref:.2f} for the per-selection planner ({100 * ratio:.1f}%)"
    return CriterionResult(3, "oracle-call efficiency", ok, detail, time.perf_counter() - t0)


def check_ablations(runner: SuiteRunner) -> CriterionResult:
    t0 = time.perf_counter()
    full = compute_metrics(runner.results("cross_floor"))
    no_cost = compute_metrics(runner.results("cross_floor", ("cost-map",)))
    no_priors = compute_metrics(runner.results("cross_floor", ("priors",)))
    no_cross = compute_metrics(runner.results("cross_floor", ("cross-floor",)))
    ok = no_cost.mean_travelled > full.mean_travelled and no_priors.sr >= no_cross.sr
    detail = (
        f"travelled {full.mean_travelled:.2f} m -> {no_cost.mean_travelled:.2f} m without cost term; "
        f"SR without priors {no_priors.sr:.1f}% vs {no_cross.sr:.1f}% without transitions"
    )
    return CriterionResult(4, "ablation direction", ok, detail, time.perf_counter() - t0)


def check_stress(runner: SuiteRunner) -> CriterionResult:
    t0 = time.perf_counter()
    res = runner.results("stress")
    sr = compute_metrics(res).sr
    problems = []
    for r in res:
        if r.aborted_transitions > 1:
            problems.append(f"{r.episode_id}: {r.aborted_transitions} aborts")
        if r.aborted_transitions and not r.blacklisted:
            problems.append(f"{r.episode_id}: abort without blacklist")
        if any(w > CLIMB_BUDGET for w in r.wasted_climb_steps):
            problems.append(f"{r.episode_id}: {max(r.wasted_climb_steps)} wasted steps")
    aborted = sum(1 for r in res if r.aborted_transitions)
    ok = not problems and sr >= 70.0
    detail = f"SR {sr:.1f}%, {aborted}/{len(res)} episodes hit the broken stair"
    if problems:
        detail += "; " + ", ".join(problems[:3])
    return CriterionResult(5, "transition robustness", ok, detail, time.perf_counter() - t0)


def _result(success: bool, shortest: float, travelled: float) -> EpisodeResult:
    return EpisodeResult("e", "s", "cross_floor", success, 10, travelled, shortest, 0, 0)


# (success, shortest, travelled) rows and the SPL worked out by hand
SPL_CASES = [
    ([(True, 10.0, 10.0)], 100.0),
    ([(True, 5.0, 10.0), (False, 5.0, 3.0)], 25.0),
    ([(True, 4.0, 2.0)], 100.0),
    ([(False, 2.0, 2.0), (False, 1.0, 9.0), (False, 3.0, 3.0)], 0.0),
    ([(True, 3.0, 12.0), (True, 6.0, 8.0), (True, 1.0, 1.0), (False, 2.0, 2.0)], 50.0),
]


def traversal_graph(scene: SceneSpec):
    """(node index, sparse adjacency) of the motion graph, built straight from the grids."""
    nodes = [(f, (int(r), int(c))) for f, ok in enumerate(scene.passable) for r, c in zip(*np.nonzero(ok))]
    index = {n: i for i, n in enumerate(nodes)}
    rows, cols = [], []
    for (f, (r, c)), i in index.items():
        for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            j = index.get((f, (r + dr, c + dc)))
            if j is not None:
                rows.append(i)
                cols.append(j)
    # stepping off an intact stair onto ground its own floor lacks lands on the other floor
    for st in scene.stairs:
        if st.corrupted:
            continue
        region = set(st.region_lo)
        for f in (st.floor_lo, st.floor_hi):
            g = st.other_floor(f)
            for r, c in region:
                for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    dst = (r + dr, c + dc)
                    if dst in region or (f, dst) in index or (g, dst) not in index:
                        continue
                    rows.append(index[(f, (r, c))])
                    cols.append(index[(g, dst)])
    n = len(nodes)
    return index, coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n)).tocsr()


class BfsOracle:
    """Exhaustive all-pairs shortest paths over :func:`traversal_graph`."""

    def __init__(self, scene: SceneSpec):
        self.scene = scene
        self.index, graph = traversal_graph(scene)
        self.dist = shortest_path(graph, unweighted=True)

    def __call__(self, start: tuple[int, tuple[float, float]], goals, radius: float = 1.0) -> float:
        res = self.scene.resolution
        f0, (x, y) = start
        src = self.index[(f0, (int(math.floor(y / res)), int(math.floor(x / res))))]
        best = math.inf
        for gf, (gr, gc) in goals:
            gxy = ((gc + 0.5) * res, (gr + 0.5) * res)
            for (f, (r, c)), j in self.index.items():
                if f != gf:
                    continue
                cxy = ((c + 0.5) * res, (r + 0.5) * res)
                if math.dist(cxy, gxy) > radius + 1e-9 or not line_of_sight(self.scene.floors[f], cxy, gxy):
                    continue
                best = min(best, self.dist[src, j])
        return best * res


def small_scenes(count: int = 8) -> list[SceneSpec]:
    """Every scene used for the exhaustive path check: up to 24x24 and two floors."""
    return [generate_scene(GenerationConfig(n_floors=1 + i % 2, width=24, height=24), 100 + i) for i in range(count)]


def check_metrics(starts_per_scene: int = 12) -> CriterionResult:
    t0 = time.perf_counter()
    spl_bad = []
    for rows, want in SPL_CASES:
        got = compute_spl([_result(*row) for row in rows])
        if got != want:
            spl_bad.append((want, got))
    path_bad, checked = [], 0
    for scene in small_scenes():
        oracle = BfsOracle(scene)
        rng = np.random.default_rng(scene.seed)
        goals = sorted({g for f in scene.floors for names in f.objects.values() for g in names})
        for cat in goals[:3]:
            instances = scene.goal_cells(cat)
            for _ in range(starts_per_scene):
                f = int(rng.integers(scene.n_floors))
                free = list(zip(*np.nonzero(scene.passable[f])))
                r, c = free[int(rng.integers(len(free)))]
                xy = ((c + 0.5) * scene.resolution, (r + 0.5) * scene.resolution)
                want = oracle((f, xy), instances)
                got = shortest_path_length(scene, (f, xy), instances)
                checked += 1
                if not (got == want or abs(got - want) < 1e-9):
                    path_bad.append((scene.scene_id, cat, f, (int(r), int(c)), got, want))
    ok = not spl_bad and not path_bad
    detail = f"{len(SPL_CASES) - len(spl_bad)}/{len(SPL_CASES)} SPL sets exact, {checked - len(path_bad)}/{checked} path lengths agree"
    return CriterionResult(6, "metric correctness", ok, detail, time.perf_counter() - t0)


def _batch_bytes(data: Path, out: Path, concurrency: int) -> dict[str, bytes]:
    config = out.with_suffix(".json")
    run = RunConfig(concurrency=concurrency, trace_dir="traces")
    config.write_text(json.dumps({"data": str(data), "output": str(out), "run": run.to_json()}))
    harness.run_batch(config)
    results, _ = harness.load_results(out / "results.json")
    scenes = {s.scene_id: s for s, _ in harness.load_dataset(data)}
    for r in results:
        harness.write_renders(out / "renders", scenes[r.scene_id], r)
    files = sorted(p for p in out.rglob("*") if p.is_file())
    # traces and renders live under out/, whose name differs between runs
    blobs = {str(p.relative_to(out)): p.read_bytes() for p in files}
    blobs["results.json"] = blobs["results.json"].replace(str(out).encode(), b"<out>")
    return blobs


def check_determinism(n_scenes: int = 6, workdir: str | Path | None = None) -> CriterionResult:
    t0 = time.perf_counter()
    with tempfile.TemporaryDirectory(dir=workdir) as tmp:
        base = Path(tmp)
        harness.generate_dataset(base / "data", n_scenes, seed=300)
        runs = {
            f"c{c}-{k}": _batch_bytes(base / "data", base / f"c{c}-{k}", c)
            for c in (1, 8)
            for k in (0, 1)
        }
    ref = runs["c1-0"]
    diffs = [name for name, blobs in runs.items() if blobs != ref]
    ok = not diffs and bool(ref)
    detail = f"{len(ref)} files identical across 4 runs" if ok else f"runs differ: {', '.join(diffs)}"
    return CriterionResult(7, "determinism", ok, detail, time.perf_counter() - t0)


def golden_prompt(name: str) -> str:
    return resources.files("floornav").joinpath("data", "golden", f"{name}_prompt.txt").read_text()


RESPONSE_SHAPES = [
    ('{"Index": "1", "Reason": "Shower and towel in Bathroom indicate toilet location."}', (1, "Shower and towel in Bathroom indicate toilet location.")),
    ('Sure! ```json {"Index": 2}```', (2, "")),
    ("I think the bathroom.", None),
]


def check_prompts() -> CriterionResult:
    t0 = time.perf_counter()
    golden_ok = [build_prompt(AREA_EXAMPLE) == golden_prompt("area"), build_prompt(FLOOR_EXAMPLE) == golden_prompt("floor")]
    parsed_ok = []
    for text, want in RESPONSE_SHAPES:
        try:
            got = parse_response(text)
            parsed_ok.append(want is not None and (got.index, got.reason) == want)
        except ResponseParseError:
            parsed_ok.append(want is None)
    ok = all(golden_ok) and all(parsed_ok)
    detail = f"{sum(golden_ok)}/2 golden prompts equal, {sum(parsed_ok)}/3 response shapes handled"
    return CriterionResult(9, "prompt protocol", ok, detail, time.perf_counter() - t0)


def criteria(runner: SuiteRunner) -> dict[int, Callable[[], CriterionResult]]:
    """Criterion number -> check. The property-test criterion lives in the test suite."""
    return {
        1: check_formula,
        2: lambda: check_cross_floor(runner),
        3: lambda: check_oracle_efficiency(runner),
        4: lambda: check_ablations(runner),
        5: lambda: check_stress(runner),
        6: check_metrics,
        7: check_determinism,
        9: check_prompts,
    }


def run_all(numbers: Sequence[int] | None = None, concurrency: int = 1, echo: Callable[[str], None] | None = None) -> list[CriterionResult]:
    runner = SuiteRunner(concurrency=concurrency)
    checks = criteria(runner)
    out = []
    for n in sorted(checks if numbers is None else numbers):
        res = checks[n]()
        if echo:
            echo(res.line())
        out.append(res)
    return out
