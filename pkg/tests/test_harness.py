import json
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import PROPERTY_EXAMPLES, ascii_scene, small_pair
from floornav import harness as hs
from floornav.harness import EpisodeResult, RunConfig, compute_metrics, compute_spl, compute_sr, run_episode
from floornav.scene import Episode, shortest_path_length
from floornav.simulator import MAX_STEPS, DetectorConfig

CORRIDOR = ["#" * 14, "#" + "." * 12 + "#", "#" * 14]


def result(success, shortest, travelled, stratum="same_floor", episode_id="e", calls=0, steps=10):
    return EpisodeResult(episode_id, "s", stratum, success, steps, travelled, shortest, calls, 0)


def corridor_episode(goal_col=9, placed="toilet"):
    s = ascii_scene([CORRIDOR], objects=[(0, 1, goal_col, placed)])
    x, y = s.center_of((1, 1))
    goals = ((0, (1, goal_col)),)
    return s, Episode(s.scene_id, 0, (x, y, 0), "toilet", goals, shortest_path_length(s, (0, (x, y)), goals))


# ---------------------------------------------------------------------------
# episodes


def test_goal_down_a_corridor_is_reached_quickly():
    s, ep = corridor_episode()
    r = run_episode(s, ep)
    assert r.success and r.stopped and r.steps < 15
    assert r.oracle_calls == 0 and r.transitions == 0


def test_goal_that_is_never_seen_fails():
    s, ep = corridor_episode(placed="sofa")
    r = run_episode(s, ep)
    assert not r.success and r.steps <= MAX_STEPS
    assert r.phases[-1] == "Done"


def test_same_inputs_give_the_same_result(tmp_path):
    scene, ep = small_pair(3)
    a = run_episode(scene, ep, trace_file=tmp_path / "a.jsonl")
    b = run_episode(scene, ep, trace_file=tmp_path / "b.jsonl")
    assert {**a.to_json(), "trace_path": ""} == {**b.to_json(), "trace_path": ""}
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_trace_lines_carry_the_step_fields(tmp_path):
    scene, ep = small_pair(1)
    r = run_episode(scene, ep, trace_file=tmp_path / "t.jsonl")
    lines = list(hs.iter_trace(tmp_path / "t.jsonl"))
    steps = [l for l in lines if "action" in l]
    assert len(steps) == r.steps
    assert set(steps[0]) == {"step", "phase", "pose", "action", "frontier_count", "oracle_called"}
    assert [l["step"] for l in steps] == list(range(1, r.steps + 1))


# ---------------------------------------------------------------------------
# metrics


def test_spl_of_half_efficient_success():
    assert compute_spl([result(True, 10.0, 20.0)]) == 50.0


def test_spl_of_a_perfect_path():
    assert compute_spl([result(True, 7.5, 7.5)]) == 100.0


def test_spl_of_a_failure_is_zero():
    assert compute_spl([result(False, 5.0, 5.0)]) == 0.0


def test_spl_caps_paths_shorter_than_the_geodesic():
    # the agent may stop inside the success radius before the shortest path ends
    assert compute_spl([result(True, 4.0, 3.0)]) == 100.0


def test_spl_and_sr_average_over_episodes():
    rs = [result(True, 10.0, 20.0), result(True, 6.0, 6.0), result(False, 3.0, 1.0), result(True, 9.0, 12.0)]
    assert compute_spl(rs) == pytest.approx(100 * (0.5 + 1.0 + 0.0 + 0.75) / 4)
    assert compute_sr(rs) == 75.0


def test_empty_results_give_zero():
    assert compute_spl([]) == compute_sr([]) == 0.0


def test_metrics_split_by_stratum():
    rs = [result(True, 1, 1, "same_floor", "a", calls=2), result(False, 1, 1, "cross_floor", "b", calls=4)]
    m = compute_metrics(rs)
    assert m.episodes == 2 and m.sr == 50.0 and m.mean_oracle_calls == 3.0
    assert m.strata["same_floor"].sr == 100.0 and m.strata["cross_floor"].sr == 0.0
    lines = hs.metrics_csv(m).splitlines()
    assert lines[0] == ",".join(hs.CSV_COLUMNS)
    assert [l.split(",")[0] for l in lines[1:]] == ["all", "cross_floor", "same_floor"]


def test_results_round_trip(tmp_path):
    rs = [result(True, 2.0, 3.0, episode_id="a"), result(False, 1.0, 4.0, episode_id="b")]
    hs.write_results(tmp_path, rs, RunConfig())
    back, doc = hs.load_results(tmp_path / "results.json")
    assert back == rs and doc["metrics"]["episodes"] == 2
    assert (tmp_path / "summary.csv").exists()


@pytest.mark.parametrize("kwargs", [{"oracle": "gpt"}, {"detector": "perfect"}, {"concurrency": 0}])
def test_run_config_validation(kwargs):
    with pytest.raises(ValueError):
        RunConfig(**kwargs)


def test_result_validation():
    with pytest.raises(ValueError):
        result(True, 1.0, -1.0)
    with pytest.raises(ValueError):
        result(True, 1.0, 1.0, steps=MAX_STEPS + 1)


# ---------------------------------------------------------------------------
# batches and renders


def test_batch_of_one(tmp_path):
    hs.generate_dataset(tmp_path / "data", 1, floors=(2,), size=24, seed=5)
    (tmp_path / "cfg.json").write_text(json.dumps({"data": "data", "output": "out"}))
    metrics, path = hs.run_batch(tmp_path / "cfg.json")
    assert metrics.episodes == 1 and path.exists()
    assert set(json.loads(path.read_text())) == {"version", "config", "metrics", "episodes"}


def test_parallel_batch_matches_serial(tmp_path):
    pairs = [small_pair(s) for s in range(4)]
    serial = hs.run_episodes(pairs, RunConfig(concurrency=1))
    parallel = hs.run_episodes(pairs, RunConfig(concurrency=3))
    assert serial == parallel
    assert [r.episode_id for r in serial] == ["ep0000", "ep0001", "ep0002", "ep0003"]


def test_single_floor_episode_renders_one_image():
    s, ep = corridor_episode()
    images = hs.render_trajectory(s, run_episode(s, ep))
    assert list(images) == [0]
    assert images[0].startswith(b"P6\n56 12\n255\n")
    assert len(images[0]) == len(b"P6\n56 12\n255\n") + 56 * 12 * 3


def test_cross_floor_episode_renders_each_visited_floor(tmp_path):
    scene, ep = small_pair(0)
    r = run_episode(scene, ep)
    assert r.transitions >= 1
    paths = hs.write_renders(tmp_path, scene, r, ep.goal_instances)
    assert len(paths) >= 2
    assert hs.render_trajectory(scene, r, ep.goal_instances) == hs.render_trajectory(scene, r, ep.goal_instances)


# ---------------------------------------------------------------------------
# properties

outcomes = st.builds(
    result,
    st.booleans(),
    st.floats(0, 50, allow_nan=False),
    st.floats(0, 80, allow_nan=False),
    st.sampled_from(["same_floor", "cross_floor"]),
    st.text("abcdef", min_size=1, max_size=4),
    st.integers(0, 20),
)


@settings(max_examples=PROPERTY_EXAMPLES)
@given(st.lists(outcomes, max_size=30), st.randoms(use_true_random=False))
def test_spl_never_exceeds_sr_and_order_does_not_matter(rs, rnd):
    assert compute_spl(rs) <= compute_sr(rs) + 1e-9
    shuffled = list(rs)
    rnd.shuffle(shuffled)
    # ids may repeat, so compare the order-free parts exactly and the sums to rounding
    a, b = compute_metrics(rs), compute_metrics(shuffled)
    assert (a.episodes, a.sr, a.mean_steps, a.mean_oracle_calls) == (b.episodes, b.sr, b.mean_steps, b.mean_oracle_calls)
    assert math.isclose(a.spl, b.spl, abs_tol=1e-9)


@settings(max_examples=PROPERTY_EXAMPLES)
@given(
    st.integers(0, 9),
    st.sampled_from(["cross_floor", "same_floor"]),
    st.integers(0, 3),
    st.integers(1, 150),
)
def test_trace_accounts_for_every_call_and_transition(tmp_path_factory, seed, kind, noise_seed, max_steps):
    scene, ep = small_pair(seed, 2, kind)
    trace = tmp_path_factory.mktemp("trace") / "t.jsonl"
    r = run_episode(scene, ep, detector=DetectorConfig.noisy(noise_seed), trace_file=trace, max_steps=max_steps)
    lines = list(hs.iter_trace(trace))
    steps = [l for l in lines if "action" in l]
    events = [l["event"] for l in lines if "event" in l]
    assert len(steps) == r.steps <= max_steps
    assert sum(l["oracle_called"] for l in steps) <= r.oracle_calls <= 2 * sum(l["oracle_called"] for l in steps)
    assert events.count("completed") == r.transitions and events.count("aborted") == r.aborted_transitions
    assert len(r.trajectory) == r.steps + 1
