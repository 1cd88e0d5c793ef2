"""One test per acceptance criterion; each prints a single PASS/FAIL line."""
import json
import os
import subprocess
import sys
import time
from pathlib import Path

import pytest

from conftest import CASES_FILE_ENV, LAST, PROPERTY_EXAMPLES, SESSION
from floornav import acceptance
from floornav.acceptance import CriterionResult, SuiteRunner

SUITE_LIMIT_S = 300.0
TESTS = Path(__file__).parent


@pytest.fixture(scope="module")
def runner():
    return SuiteRunner()


def report(res: CriterionResult) -> None:
    line = res.line()
    print(line)
    SESSION["acceptance"].append(line)
    assert res.passed, line


def test_formula_fidelity():
    report(acceptance.check_formula())


def test_cross_floor_capability(runner):
    report(acceptance.check_cross_floor(runner))


def test_oracle_call_efficiency(runner):
    report(acceptance.check_oracle_efficiency(runner))


def test_ablation_direction(runner):
    report(acceptance.check_ablations(runner))


def test_transition_robustness(runner):
    report(acceptance.check_stress(runner))


def test_metric_correctness():
    report(acceptance.check_metrics())


def test_determinism(tmp_path):
    report(acceptance.check_determinism(workdir=tmp_path))


def test_prompt_protocol():
    report(acceptance.check_prompts())


def _property_run() -> dict:
    """Case counts from this session, or from a fresh run of the other modules if none were collected."""
    if SESSION["properties"]:
        return {
            "cases": SESSION["cases"],
            "properties": SESSION["properties"],
            "outcomes": SESSION["outcomes"],
            "seconds": time.monotonic() - SESSION["start"],
        }
    out = TESTS / ".property_run.json"
    env = {**os.environ, CASES_FILE_ENV: str(out)}
    subprocess.run(
        [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", str(TESTS), "--deselect",
         f"{TESTS / 'test_acceptance.py'}::{LAST}"],
        env=env, cwd=TESTS.parent, capture_output=True, check=False,
    )
    try:
        return json.loads(out.read_text())
    finally:
        out.unlink(missing_ok=True)


def test_invariant_suite():
    start = time.monotonic()
    run = _property_run()
    props = run["properties"]
    problems = []
    for name, (nodeid, max_examples) in sorted(props.items()):
        cases = run["cases"].get(name, 0)
        if run["outcomes"].get(nodeid) != "passed":
            problems.append(f"{name} {run['outcomes'].get(nodeid, 'not run')}")
        if max_examples < PROPERTY_EXAMPLES or cases < PROPERTY_EXAMPLES:
            problems.append(f"{name} {cases} cases")
    seconds = run["seconds"] + (time.monotonic() - start if not SESSION["properties"] else 0.0)
    if seconds >= SUITE_LIMIT_S:
        problems.append(f"suite took {seconds:.0f}s")
    fewest = min((run["cases"].get(n, 0) for n in props), default=0)
    detail = (
        f"{len(props)} property tests, fewest cases {fewest}, suite {seconds:.0f}s"
        + (f"; {', '.join(problems)}" if problems else "")
    )
    report(CriterionResult(8, "invariant suite", bool(props) and not problems, detail, time.monotonic() - start))
