"""Episode runner, metrics, batch evaluation and trajectory rendering."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import simulator as sim
from .policy import NavigationPolicy, PolicyConfig, PolicyPhase
from .reasoning import DecisionOracle, RuleBasedOracle
from .scene import (
    CellKind,
    Episode,
    GenerationConfig,
    PriorTables,
    SceneSpec,
    default_priors,
    generate_scene,
    load_episodes,
    load_scene,
    sample_episode,
    save_episodes,
    save_scene,
)

log = logging.getLogger(__name__)

RESULTS_VERSION = 1


@dataclass
class EpisodeResult:
    episode_id: str
    scene_id: str
    stratum: str  # "same_floor" | "cross_floor"
    success: bool
    steps: int
    travelled: float
    shortest: float
    oracle_calls: int
    transitions: int
    recoveries: list = field(default_factory=list)  # [event, directive, step, cost]
    trace_path: str = ""
    stopped: bool = False
    aborted_transitions: int = 0
    wasted_climb_steps: list = field(default_factory=list)
    blacklisted: int = 0
    transition_steps: list = field(default_factory=list)
    trajectory: list = field(default_factory=list)  # [floor, x, y, phase] per pose, start included
    phases: list = field(default_factory=list)

    def __post_init__(self):
        if self.travelled < 0:
            raise ValueError("travelled must be >= 0")
        if self.success and self.steps > sim.MAX_STEPS:
            raise ValueError("a successful episode cannot exceed the step limit")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "EpisodeResult":
        return cls(**d)


@dataclass(frozen=True)
class StratumMetrics:
    episodes: int
    sr: float
    spl: float
    mean_steps: float
    mean_oracle_calls: float


@dataclass(frozen=True)
class Metrics:
    episodes: int
    sr: float
    spl: float
    mean_steps: float
    mean_oracle_calls: float
    mean_travelled: float
    strata: dict = field(default_factory=dict)  # stratum -> StratumMetrics

    def to_json(self) -> dict:
        d = asdict(self)
        d["strata"] = {k: asdict(v) for k, v in sorted(self.strata.items())}
        return d


def spl_term(success: bool, shortest: float, travelled: float) -> float:
    if not success:
        return 0.0
    denom = max(travelled, shortest)
    return 1.0 if denom <= 0 else shortest / denom


def compute_spl(results: Sequence[EpisodeResult]) -> float:
    """Success weighted by path length, in percent."""
    if not results:
        return 0.0
    return 100.0 * math.fsum(spl_term(r.success, r.shortest, r.travelled) for r in results) / len(results)


def compute_sr(results: Sequence[EpisodeResult]) -> float:
    if not results:
        return 0.0
    return 100.0 * sum(r.success for r in results) / len(results)


def _mean(xs) -> float:
    xs = list(xs)
    return math.fsum(xs) / len(xs) if xs else 0.0


def compute_metrics(results: Sequence[EpisodeResult]) -> Metrics:
    """Aggregate results; the value does not depend on their order."""
    rs = sorted(results, key=lambda r: r.episode_id)
    strata = {}
    for name in sorted({r.stratum for r in rs}):
        sub = [r for r in rs if r.stratum == name]
        strata[name] = StratumMetrics(
            len(sub), compute_sr(sub), compute_spl(sub),
            _mean(r.steps for r in sub), _mean(r.oracle_calls for r in sub),
        )
    return Metrics(
        len(rs), compute_sr(rs), compute_spl(rs),
        _mean(r.steps for r in rs), _mean(r.oracle_calls for r in rs), _mean(r.travelled for r in rs), strata,
    )


# ---------------------------------------------------------------------------
# single episode


def run_episode(
    scene: SceneSpec,
    episode: Episode,
    config: PolicyConfig | None = None,
    oracle: DecisionOracle | None = None,
    detector: sim.DetectorConfig | None = None,
    priors: PriorTables | None = None,
    episode_id: str = "episode",
    trace_file: str | Path | None = None,
    max_steps: int = sim.MAX_STEPS,
) -> EpisodeResult:
    """Drive the policy in the simulator until the episode ends."""
    config = config or PolicyConfig()
    oracle = oracle or RuleBasedOracle()
    priors = priors or default_priors()
    state = sim.reset(scene, episode, detector, max_steps)
    obs = sim.observe(state)
    policy = NavigationPolicy(episode, (scene.height, scene.width), scene.resolution, priors, oracle, config)
    ps = policy.state
    trace = []
    traj = [[state.pose.floor, state.pose.x, state.pose.y, ps.phase.value]]
    while not state.done:
        start_phase = ps.phase
        action = policy.act(obs)
        state, obs = sim.step(state, action)
        phase = start_phase if ps.oracle_called else ps.phase
        traj.append([state.pose.floor, state.pose.x, state.pose.y, ps.phase.value])
        p = state.pose
        trace.append({
            "step": state.step_count,
            "phase": phase.value,
            "pose": [p.floor, round(p.x, 6), round(p.y, 6), p.heading, p.tilt],
            "action": action.value,
            "frontier_count": ps.frontier_count,
            "oracle_called": ps.oracle_called,
        })
    policy.force_done()
    for e in ps.events:
        if e["event"] in ("begin", "completed", "aborted", "cancelled"):
            trace.append({"step": e["step"], "event": e["event"], "stair_id": e["stair_id"],
                          "floor_from": e["floor_from"], "floor_to": e["floor_to"]})
    if trace_file is not None:
        path = Path(trace_file)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("".join(json.dumps(t, sort_keys=True) + "\n" for t in trace))
    completed = [e for e in ps.events if e["event"] == "completed"]
    aborted = [e for e in ps.events if e["event"] == "aborted"]
    # steps burnt on the stair itself before giving up; the walk there is ordinary travel
    wasted = [int(e["steps_used"]) for e in aborted]
    blacklisted = sum(
        1 for rec in ps.registry.records.values() if rec.status.value == "Blacklisted"
    )
    success = sim.check_success(state)
    return EpisodeResult(
        episode_id=episode_id,
        scene_id=scene.scene_id,
        stratum="cross_floor" if episode.cross_floor else "same_floor",
        success=success,
        steps=state.step_count,
        travelled=round(state.travelled, 9),
        shortest=episode.shortest_path_len,
        oracle_calls=ps.oracle_calls,
        transitions=len(completed),
        recoveries=[[r.event, r.directive, r.step, r.cost] for r in ps.recoveries],
        trace_path=str(trace_file) if trace_file is not None else "",
        stopped=state.stop_issued,
        aborted_transitions=len(aborted),
        wasted_climb_steps=wasted,
        blacklisted=blacklisted,
        transition_steps=[e["step"] for e in completed],
        trajectory=[[f, round(x, 6), round(y, 6), ph] for f, x, y, ph in traj],
        phases=[p.value for p in ps.phase_history],
    )


# ---------------------------------------------------------------------------
# batches


@dataclass(frozen=True)
class RunConfig:
    oracle: str = "rule"  # "rule" | "llm"
    detector: str = "ideal"  # "ideal" | "noisy"
    ablate: tuple[str, ...] = ()
    reference_planner: bool = False
    concurrency: int = 1
    max_steps: int = sim.MAX_STEPS
    detector_seed: int = 0
    trace_dir: str | None = None
    llm_endpoint: str | None = None
    llm_model: str | None = None

    def __post_init__(self):
        if self.oracle not in ("rule", "llm"):
            raise ValueError(f"unknown oracle {self.oracle!r}")
        if self.detector not in ("ideal", "noisy"):
            raise ValueError(f"unknown detector {self.detector!r}")
        if self.concurrency < 1:
            raise ValueError("concurrency must be >= 1")
        object.__setattr__(self, "ablate", tuple(sorted(set(self.ablate))))

    def policy_config(self) -> PolicyConfig:
        return PolicyConfig(ablate=frozenset(self.ablate), reference_planner=self.reference_planner)

    def detector_config(self, seed: int) -> sim.DetectorConfig:
        maker = sim.DetectorConfig.ideal if self.detector == "ideal" else sim.DetectorConfig.noisy
        return maker(self.detector_seed + seed)

    def make_oracle(self) -> DecisionOracle:
        if self.oracle == "rule":
            return RuleBasedOracle()
        from .llmclient import LlmConfig, LlmOracle

        kw = {}
        if self.llm_endpoint:
            kw["endpoint"] = self.llm_endpoint
        if self.llm_model:
            kw["model"] = self.llm_model
        return LlmOracle(LlmConfig(**kw))

    def to_json(self) -> dict:
        d = asdict(self)
        d["ablate"] = list(self.ablate)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "RunConfig":
        d = dict(d)
        d["ablate"] = tuple(d.get("ablate", ()))
        return cls(**d)


def _run_one(args) -> dict:
    index, scene, episode, run = args
    episode_id = f"ep{index:04d}"
    trace = None if run.trace_dir is None else Path(run.trace_dir) / f"{episode_id}.jsonl"
    oracle = run.make_oracle()
    try:
        res = run_episode(
            scene, episode, run.policy_config(), oracle, run.detector_config(index),
            episode_id=episode_id, trace_file=trace, max_steps=run.max_steps,
        )
    finally:
        close = getattr(oracle, "close", None)
        if close:
            close()
    return res.to_json()


def run_episodes(
    pairs: Sequence[tuple[SceneSpec, Episode]], run: RunConfig | None = None
) -> list[EpisodeResult]:
    """Run every (scene, episode) pair; results come back in input order."""
    run = run or RunConfig()
    tasks = [(i, s, e, run) for i, (s, e) in enumerate(pairs)]
    if run.concurrency == 1 or len(tasks) <= 1:
        out = [_run_one(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=run.concurrency) as pool:
            out = list(pool.map(_run_one, tasks, chunksize=1))
    return [EpisodeResult.from_json(d) for d in out]


def results_document(results: Sequence[EpisodeResult], run: RunConfig, extra: dict | None = None) -> dict:
    doc = {
        "version": RESULTS_VERSION,
        "config": {k: v for k, v in run.to_json().items() if k != "concurrency"},
        "metrics": compute_metrics(results).to_json(),
        "episodes": [r.to_json() for r in results],
    }
    if extra:
        doc.update(extra)
    return doc


def dumps_results(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


CSV_COLUMNS = ["stratum", "episodes", "SR", "SPL", "Steps", "LLM Calls"]


def metrics_csv(m: Metrics) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    w.writerow(["all", m.episodes, f"{m.sr:.2f}", f"{m.spl:.2f}", f"{m.mean_steps:.2f}", f"{m.mean_oracle_calls:.2f}"])
    for name, s in sorted(m.strata.items()):
        w.writerow([name, s.episodes, f"{s.sr:.2f}", f"{s.spl:.2f}", f"{s.mean_steps:.2f}", f"{s.mean_oracle_calls:.2f}"])
    return buf.getvalue()


@dataclass(frozen=True)
class DatasetEntry:
    scene_file: str
    episode: Episode


def generate_dataset(
    out_dir: str | Path,
    n_scenes: int,
    episodes_per_scene: int = 1,
    kind: str = "cross_floor",
    floors: Sequence[int] = (2, 3),
    size: int = 32,
    seed: int = 0,
    corrupted_prob: float = 0.0,
) -> list[Path]:
    """Write scene files and an episode list under ``out_dir``; return the scene paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths, episodes = [], []
    for i in range(n_scenes):
        n_floors = floors[i % len(floors)]
        cfg = GenerationConfig(n_floors=n_floors, width=size, height=size, corrupted_prob=corrupted_prob)
        scene = generate_scene(cfg, seed + i)
        path = out / f"scene_{i:04d}.json"
        save_scene(scene, path)
        paths.append(path)
        for j in range(episodes_per_scene):
            episodes.append(sample_episode(scene, kind, (seed + i) * 1000 + j))
    save_episodes(episodes, out / "episodes.json")
    return paths


def load_dataset(data_dir: str | Path) -> list[tuple[SceneSpec, Episode]]:
    d = Path(data_dir)
    scenes = {}
    for p in sorted(d.glob("scene_*.json")):
        s = load_scene(p)
        scenes[s.scene_id] = s
    pairs = []
    for ep in load_episodes(d / "episodes.json"):
        if ep.scene_id not in scenes:
            raise ValueError(f"episode refers to unknown scene {ep.scene_id}")
        pairs.append((scenes[ep.scene_id], ep))
    return pairs


def run_batch(config_file: str | Path) -> tuple[Metrics, Path]:
    """Run a batch described by a JSON file; writes results JSON and a CSV summary.

    The file holds ``{"data": dir, "output": dir, "run": {RunConfig fields}}``;
    relative paths resolve against the config file's directory.
    """
    cfg_path = Path(config_file)
    cfg = json.loads(cfg_path.read_text())
    base = cfg_path.parent
    data = base / cfg["data"]
    out = base / cfg.get("output", "results")
    run = RunConfig.from_json(cfg.get("run", {}))
    if run.trace_dir is not None:
        run = RunConfig.from_json({**run.to_json(), "trace_dir": str(out / run.trace_dir)})
    results = run_episodes(load_dataset(data), run)
    metrics = write_results(out, results, run)
    return metrics, out / "results.json"


def write_results(out_dir: str | Path, results: Sequence[EpisodeResult], run: RunConfig) -> Metrics:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = results_document(results, run)
    (out / "results.json").write_text(dumps_results(doc))
    metrics = compute_metrics(results)
    (out / "summary.csv").write_text(metrics_csv(metrics))
    return metrics


def load_results(path: str | Path) -> tuple[list[EpisodeResult], dict]:
    doc = json.loads(Path(path).read_text())
    return [EpisodeResult.from_json(e) for e in doc["episodes"]], doc


# ---------------------------------------------------------------------------
# rendering

PHASE_COLOURS = {
    PolicyPhase.EXPLORE.value: (30, 90, 220),
    PolicyPhase.TRANSIT.value: (230, 120, 20),
    PolicyPhase.APPROACH.value: (20, 170, 60),
    PolicyPhase.DONE.value: (20, 170, 60),
}
SCALE = 4


def _segments(result: EpisodeResult) -> list[tuple[int, list]]:
    """Split the trajectory into per-floor runs."""
    segs: list[tuple[int, list]] = []
    for f, x, y, ph in result.trajectory:
        if not segs or segs[-1][0] != f:
            segs.append((f, []))
        segs[-1][1].append((x, y, ph))
    return segs


def _draw_line(img: np.ndarray, p0, p1, colour) -> None:
    n = int(max(abs(p1[0] - p0[0]), abs(p1[1] - p0[1]))) + 1
    rs = np.rint(np.linspace(p0[0], p1[0], n)).astype(int)
    cs = np.rint(np.linspace(p0[1], p1[1], n)).astype(int)
    ok = (rs >= 0) & (rs < img.shape[0]) & (cs >= 0) & (cs < img.shape[1])
    img[rs[ok], cs[ok]] = colour


def render_trajectory(scene: SceneSpec, result: EpisodeResult, goal_cells=()) -> dict[int, bytes]:
    """One binary PPM per floor the trajectory touched, keyed by floor."""
    res = scene.resolution
    floors = sorted({f for f, *_ in result.trajectory})
    segs = _segments(result)
    images = {}
    for f in floors:
        grid = scene.floors[f]
        h, w = grid.kind.shape
        base = np.full((h, w, 3), 235, dtype=np.uint8)
        base[grid.kind == CellKind.OBSTACLE] = (40, 40, 40)
        stair = grid.kind == CellKind.STAIR
        rr, cc = np.indices((h, w))
        base[stair & ((rr + cc) % 2 == 0)] = (150, 110, 60)
        base[stair & ((rr + cc) % 2 == 1)] = (210, 180, 130)
        img = np.repeat(np.repeat(base, SCALE, axis=0), SCALE, axis=1)
        for gf, (r, c) in goal_cells:
            if gf == f:
                img[r * SCALE : (r + 1) * SCALE, c * SCALE : (c + 1) * SCALE] = (220, 20, 20)
        for sf, pts in segs:
            if sf != f:
                continue
            px = [(y / res * SCALE, x / res * SCALE, ph) for x, y, ph in pts]
            for a, b in zip(px, px[1:]):
                _draw_line(img, a[:2], b[:2], PHASE_COLOURS.get(b[2], (0, 0, 0)))
            if len(px) == 1:
                _draw_line(img, px[0][:2], px[0][:2], PHASE_COLOURS.get(px[0][2], (0, 0, 0)))
        header = f"P6\n{w * SCALE} {h * SCALE}\n255\n".encode()
        images[f] = header + img.tobytes()
    return images


def write_renders(out_dir: str | Path, scene: SceneSpec, result: EpisodeResult, goal_cells=()) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for f, data in render_trajectory(scene, result, goal_cells).items():
        p = out / f"{result.episode_id}_floor{f}.ppm"
        p.write_bytes(data)
        paths.append(p)
    return paths


def iter_trace(path: str | Path) -> Iterable[dict]:
    with open(path) as fh:
        for line in fh:
            if line.strip():
                yield json.loads(line)
