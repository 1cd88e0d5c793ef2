import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import PROPERTY_EXAMPLES
from floornav.llmclient import AREA_EXAMPLE, FLOOR_EXAMPLE, FLOOR_EXAMPLE_RESPONSE, parse_response
from floornav.mapping import Frontier
from floornav.reasoning import (
    EXCLUDE_NOTE,
    CacheEntry,
    CoarseCache,
    DecisionRequest,
    DecisionResponse,
    FrontierDescription,
    Mode,
    build_inter_request,
    build_intra_request,
    coarse_select,
    dedup_frontiers,
    fine_decide_floor,
    fine_decide_frontier,
    rule_based_decide,
    semantic_similarity,
    should_invoke_fine,
    ssim,
)
from floornav.scene import PriorTables, default_priors


class Fixed:
    """Oracle that always answers the same thing and counts calls."""

    def __init__(self, response):
        self.response = response
        self.calls = 0

    def decide(self, request):
        self.calls += 1
        if isinstance(self.response, Exception):
            raise self.response
        return self.response


def ssim_by_hand(a, b):
    """Direct evaluation of the global SSIM formula with plain Python sums."""
    xs = [float(v) for v in np.ravel(a)]
    ys = [float(v) for v in np.ravel(b)]
    n = len(xs)
    ma, mb = sum(xs) / n, sum(ys) / n
    va = sum((x - ma) ** 2 for x in xs) / n
    vb = sum((y - mb) ** 2 for y in ys) / n
    cov = sum((x - ma) * (y - mb) for x, y in zip(xs, ys)) / n
    c1, c2 = (0.01 * 255) ** 2, (0.03 * 255) ** 2
    return (2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2))


def frontier(cell, distance, patch=None):
    return Frontier(cell, 0, distance, patch=patch)


# ---------------------------------------------------------------------------
# coarse stage


def test_bathroom_view_scores_its_toilet_prior():
    assert semantic_similarity(["bathroom"], [], "toilet", default_priors()) == 0.9


def test_empty_view_scores_zero():
    assert semantic_similarity([], [], "toilet", default_priors()) == 0.0


def test_visible_goal_scores_one():
    assert semantic_similarity(["garage"], ["car", "toilet"], "toilet", default_priors()) == 1.0


def test_ssim_of_equal_constant_patches_is_one():
    a = np.full((4, 4), 77, dtype=np.uint8)
    assert ssim(a, a.copy()) == 1.0


def test_ssim_black_against_white():
    a = np.zeros((2, 2))
    b = np.full((2, 2), 255.0)
    # means 0 and 255, no variance: c1 / (255^2 + c1)
    c1 = (0.01 * 255) ** 2
    assert ssim(a, b) == pytest.approx(c1 / (255.0**2 + c1), rel=1e-12)
    assert ssim(a, b) == pytest.approx(ssim_by_hand(a, b), rel=1e-12)


def test_ssim_rejects_mismatched_shapes():
    with pytest.raises(ValueError):
        ssim(np.zeros((2, 2)), np.zeros((2, 3)))


def test_dedup_with_empty_cache_keeps_everything():
    rows = np.repeat(np.arange(0, 256, 16, dtype=np.uint8)[:, None], 16, axis=1)
    cands = [frontier((0, 0), 1.0, rows), frontier((0, 1), 1.0, rows.T.copy()), frontier((1, 0), 1.0)]
    cache = []
    assert dedup_frontiers(cands, cache) == cands
    assert len(cache) == 2  # a frontier without a view adds nothing


def test_dedup_drops_an_already_cached_view():
    p = np.arange(16, dtype=np.uint8).reshape(4, 4)
    assert dedup_frontiers([frontier((0, 0), 1.0, p)], [p.copy()]) == []


def test_dedup_keeps_a_dissimilar_view():
    rows = np.repeat(np.arange(0, 256, 16, dtype=np.uint8)[:, None], 16, axis=1)
    cols = rows.T.copy()
    value = ssim_by_hand(rows, cols)
    assert value < 0.85
    assert ssim(rows, cols) == pytest.approx(value, abs=1e-12)
    f = frontier((0, 0), 1.0, cols)
    assert dedup_frontiers([f], [rows]) == [f]


def test_coarse_select_keeps_the_top_k():
    m = np.zeros((1, 5))
    m[0] = [0.1, 0.9, 0.5, 0.7, 0.3]
    fs = [frontier((0, c), 10.0) for c in range(5)]
    cache = coarse_select(fs, m, k=3)
    assert [e.frontier.cell for e in cache.entries] == [(0, 1), (0, 3), (0, 2)]


def test_coarse_select_breaks_ties_by_distance():
    m = np.full((1, 2), 0.4)
    near, far = frontier((0, 1), 4.0), frontier((0, 0), 5.0)
    assert [e.frontier for e in coarse_select([far, near], m).entries] == [near, far]


def test_coarse_select_with_fewer_than_k():
    m = np.zeros((1, 2))
    assert len(coarse_select([frontier((0, 0), 1.0), frontier((0, 1), 2.0)], m, k=3).entries) == 2


@pytest.mark.parametrize(
    "distances, expected",
    [([1.0, 4.0, 5.0], False), ([3.5, 4.0, 5.0], True), ([4.0, 5.0], False), ([3.0, 4.0, 5.0], False)],
)
def test_fine_trigger(distances, expected):
    assert should_invoke_fine([frontier((0, i), d) for i, d in enumerate(distances)], 3.0, 3) is expected


# ---------------------------------------------------------------------------
# fine stage


def test_floor_switch_is_gated_soon_after_a_transition():
    oracle = Fixed(FLOOR_EXAMPLE_RESPONSE)
    d = fine_decide_floor(FLOOR_EXAMPLE, oracle, last_transition_step=90, now=100, floor_fully_explored=False, current_floor=0)
    assert not d.switch and d.floor == 0 and oracle.calls == 0


def test_oracle_naming_the_current_floor_means_stay():
    d = fine_decide_floor(FLOOR_EXAMPLE, Fixed(DecisionResponse(1)), None, 100, False, 0)
    assert not d.switch and d.called


def test_covered_floor_lets_the_oracle_send_us_to_floor_three():
    d = fine_decide_floor(FLOOR_EXAMPLE, Fixed(FLOOR_EXAMPLE_RESPONSE), 90, 100, True, 0)
    assert d.switch and d.floor == 2  # wire label 3 is the third floor


def test_area_example_goes_to_the_bathroom():
    cache = CoarseCache([CacheEntry(frontier((0, i), 5.0), None, None, 1.0 - i / 10) for i in range(3)])
    chosen, called = fine_decide_frontier(AREA_EXAMPLE, Fixed(DecisionResponse(1)), cache)
    assert chosen.cell == (0, 0) and called


def test_out_of_range_answer_falls_back_to_the_top_entry():
    cache = CoarseCache([CacheEntry(frontier((0, i), 5.0), None, None, 1.0 - i / 10) for i in range(3)])
    chosen, called = fine_decide_frontier(AREA_EXAMPLE, Fixed(DecisionResponse(99)), cache)
    assert chosen.cell == (0, 0) and called


def test_single_entry_cache_skips_the_oracle():
    oracle = Fixed(DecisionResponse(1))
    cache = CoarseCache([CacheEntry(frontier((0, 0), 5.0), None, None, 1.0)])
    chosen, called = fine_decide_frontier(AREA_EXAMPLE, oracle, cache)
    assert chosen.cell == (0, 0) and not called and oracle.calls == 0


def test_rules_pick_the_bathroom_for_the_area_example():
    r = rule_based_decide(AREA_EXAMPLE)
    assert r.index == 1 and "bathroom" in r.reason


def test_rules_with_no_priors_pick_the_first_area():
    req = DecisionRequest("toilet", Mode.INTRA_FLOOR, area_descriptions={1: "a hall containing no objects", 2: "a garage containing no objects"})
    assert rule_based_decide(req).index == 1


def test_rules_never_return_an_excluded_floor():
    req = DecisionRequest(
        "bed", Mode.INTER_FLOOR, floor_priors={0: 10.0, 1: 80.0},
        floor_descriptions={0: "Current floor.", 1: f"Other floor. {EXCLUDE_NOTE}", 2: "Other floor."},
    )
    assert rule_based_decide(req).index != 2


def test_unknown_floors_share_the_leftover_prior():
    # floor 0 holds 10%, the other two get 45% each, and label 2 is excluded
    assert rule_based_decide(FLOOR_EXAMPLE).index == 3


def test_requests_need_the_right_descriptions():
    with pytest.raises(ValueError):
        DecisionRequest("bed", Mode.INTER_FLOOR)
    with pytest.raises(ValueError):
        DecisionRequest("bed", Mode.INTRA_FLOOR)


def test_request_builders_use_percent_priors():
    pri = default_priors()
    cache = CoarseCache([CacheEntry(frontier((0, 0), 1.0), None, FrontierDescription("bathroom", ("shower",)), 1.0)])
    intra = build_intra_request("toilet", pri, cache)
    assert intra.area_priors["bathroom"] == 90.0
    assert intra.area_descriptions == {1: "a bathroom containing objects: shower"}
    inter = build_inter_request("toilet", pri, {0: (["hall"], []), 1: ([], [])}, 0, {1})
    assert EXCLUDE_NOTE in inter.floor_descriptions[1] and inter.floor_descriptions[0].startswith("Current floor.")


# ---------------------------------------------------------------------------
# properties

patches = st.integers(1, 16).flatmap(
    lambda n: st.tuples(arrays(np.uint8, (n, n)), arrays(np.uint8, (n, n)))
)


@settings(max_examples=PROPERTY_EXAMPLES)
@given(patches)
def test_ssim_is_symmetric_and_one_on_itself(pair):
    a, b = pair
    assert abs(ssim(a, b) - ssim(b, a)) <= 1e-12
    assert ssim(a, a) == 1.0
    assert ssim(a, b) <= 1.0
    assert ssim(a, b) == pytest.approx(ssim_by_hand(a, b), rel=1e-9, abs=1e-12)


frontier_sets = st.lists(
    st.tuples(st.floats(0, 1), st.floats(0, 8)), min_size=1, max_size=8,
)


@settings(max_examples=PROPERTY_EXAMPLES)
@given(frontier_sets, st.floats(0, 5), st.integers(1, 5))
def test_shifting_semantic_values_keeps_the_ranking(items, shift, k):
    m = np.array([[v for v, _ in items]])
    base = [frontier((0, i), d) for i, (_, d) in enumerate(items)]
    first = coarse_select([Frontier(f.cell, 0, f.distance) for f in base], m, k=len(items))
    scores = sorted(e.score for e in first.entries)
    # only exact ties may reorder, and those are resolved by distance then cell either way
    assume(all(b - a == 0 or b - a > 1e-9 for a, b in zip(scores, scores[1:])))
    second = coarse_select([Frontier(f.cell, 0, f.distance) for f in base], m + shift, k=len(items))
    assert [e.frontier.cell for e in first.entries] == [e.frontier.cell for e in second.entries]
    top = coarse_select([Frontier(f.cell, 0, f.distance) for f in base], m, k=k)
    assert len(top.entries) == min(k, len(items))
    assert [e.score for e in top.entries] == sorted((e.score for e in top.entries), reverse=True)


@settings(max_examples=PROPERTY_EXAMPLES)
@given(st.lists(st.floats(0, 10), max_size=6), st.floats(0.1, 5), st.integers(1, 4))
def test_trigger_matches_its_definition(distances, d_theta, k):
    fs = [frontier((0, i), d) for i, d in enumerate(distances)]
    expected = len(fs) >= k and not any(d <= d_theta for d in distances)
    assert should_invoke_fine(fs, d_theta, k) is expected


@settings(max_examples=PROPERTY_EXAMPLES)
@given(st.integers(1, 5), st.one_of(st.text(max_size=80), st.integers(-10**6, 10**6).map(lambda i: f'{{"Index": "{i}", "Reason": ""}}')))
def test_any_oracle_answer_yields_a_cached_frontier(n, text):
    cache = CoarseCache([CacheEntry(frontier((0, i), 5.0), None, None, 1.0 - i / 10) for i in range(n)])

    class Wire:
        def decide(self, request):
            return parse_response(text)

    chosen, _ = fine_decide_frontier(AREA_EXAMPLE, Wire(), cache)
    assert chosen in [e.frontier for e in cache.entries]


@settings(max_examples=PROPERTY_EXAMPLES)
@given(
    st.dictionaries(st.sampled_from(["bathroom", "bedroom", "garage", "kitchen"]), st.floats(0, 100), max_size=4),
    st.lists(st.sampled_from(["bathroom", "bedroom", "garage", "kitchen", "hall"]), min_size=1, max_size=4),
)
def test_rule_oracle_answers_with_a_listed_area(area_priors, rooms):
    req = DecisionRequest("toilet", Mode.INTRA_FLOOR, area_priors=area_priors,
                          area_descriptions={i: f"a {r} containing no objects" for i, r in enumerate(rooms, start=1)})
    r = rule_based_decide(req)
    assert r.index in req.area_descriptions
    best = max(area_priors.get(room, 0.0) for room in rooms)
    assert area_priors.get(rooms[r.index - 1], 0.0) == best
    assert all(area_priors.get(rooms[j], 0.0) < best for j in range(r.index - 1))


def test_empty_prior_table_gives_zero_similarity():
    assert semantic_similarity(["bathroom"], [], "toilet", PriorTables()) == 0.0
    assert math.isclose(semantic_similarity(["bathroom", "bedroom"], [], "bed", default_priors()), default_priors().area("bed", "bedroom"))
