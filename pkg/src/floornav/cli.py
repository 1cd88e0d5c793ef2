"""Command line entry point: generate, run, eval, render."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness
from .policy import ABLATIONS
from .simulator import MAX_STEPS

log = logging.getLogger("floornav")


def _floors(text: str) -> tuple[int, ...]:
    try:
        out = tuple(int(x) for x in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated floor counts, got {text!r}") from exc
    if not out or any(not 1 <= f <= 3 for f in out):
        raise argparse.ArgumentTypeError("floor counts must be 1-3")
    return out


def cmd_generate(args) -> int:
    paths = harness.generate_dataset(
        args.out, args.scenes, args.episodes_per_scene, args.kind, args.floors, args.size, args.seed,
        args.corrupted_prob,
    )
    print(f"wrote {len(paths)} scenes and {len(paths) * args.episodes_per_scene} episodes to {args.out}")
    return 0


def _run_config(args) -> harness.RunConfig:
    return harness.RunConfig(
        oracle=args.oracle,
        detector=args.detector,
        ablate=tuple(args.ablate),
        reference_planner=args.reference,
        concurrency=args.concurrency,
        max_steps=args.max_steps,
        detector_seed=args.detector_seed,
        trace_dir=args.trace_dir,
        llm_endpoint=args.llm_endpoint,
        llm_model=args.llm_model,
    )


def _print_metrics(m: harness.Metrics) -> None:
    sys.stdout.write(harness.metrics_csv(m))


def cmd_run(args) -> int:
    if args.config:
        metrics, path = harness.run_batch(args.config)
        _print_metrics(metrics)
        print(f"results: {path}")
    elif args.data:
        run = _run_config(args)
        results = harness.run_episodes(harness.load_dataset(args.data), run)
        metrics = harness.write_results(args.out, results, run)
        _print_metrics(metrics)
        print(f"results: {Path(args.out) / 'results.json'}")
    elif not args.check:
        print("nothing to run: pass --data, --config or --check", file=sys.stderr)
        return 2
    if args.check:
        from .acceptance import run_all

        checks = run_all(concurrency=args.concurrency, echo=print)
        failed = [c for c in checks if not c.passed]
        print(f"{len(checks) - len(failed)}/{len(checks)} acceptance checks passed")
        return 1 if failed else 0
    return 0


def cmd_eval(args) -> int:
    results, _ = harness.load_results(args.results)
    metrics = harness.compute_metrics(results)
    if args.json:
        print(json.dumps(metrics.to_json(), indent=1, sort_keys=True))
    else:
        _print_metrics(metrics)
    return 0


def cmd_render(args) -> int:
    results, _ = harness.load_results(args.results)
    scenes = {s.scene_id: s for s, _ in harness.load_dataset(args.data)}
    wanted = set(args.episode or ())
    written = 0
    for r in results:
        if wanted and r.episode_id not in wanted:
            continue
        if r.scene_id not in scenes:
            log.warning("no scene %s for %s", r.scene_id, r.episode_id)
            continue
        written += len(harness.write_renders(args.out, scenes[r.scene_id], r))
    print(f"wrote {written} images to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="floornav", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write scenes and episodes")
    g.add_argument("--out", required=True)
    g.add_argument("--scenes", type=int, default=50)
    g.add_argument("--episodes-per-scene", type=int, default=1)
    g.add_argument("--kind", choices=("cross_floor", "same_floor", "any"), default="cross_floor")
    g.add_argument("--floors", type=_floors, default=(2, 3), help="floor counts to cycle through, e.g. 2,3")
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--corrupted-prob", type=float, default=0.0)
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("run", help="run a batch of episodes")
    r.add_argument("--data", help="dataset directory from `generate`")
    r.add_argument("--config", help="batch config JSON with data, output and run settings")
    r.add_argument("--out", default="results")
    r.add_argument("--oracle", choices=("rule", "llm"), default="rule")
    r.add_argument("--detector", choices=("ideal", "noisy"), default="ideal")
    r.add_argument("--ablate", action="append", choices=sorted(ABLATIONS), default=[])
    r.add_argument("--reference", action="store_true", help="route every Explore selection through the oracle")
    r.add_argument("--concurrency", type=int, default=1)
    r.add_argument("--max-steps", type=int, default=MAX_STEPS)
    r.add_argument("--detector-seed", type=int, default=0)
    r.add_argument("--trace-dir")
    r.add_argument("--llm-endpoint")
    r.add_argument("--llm-model")
    r.add_argument("--check", action="store_true", help="also run the acceptance checks; exit 1 on any failure")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="metrics from a results file")
    e.add_argument("results")
    e.add_argument("--json", action="store_true")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("render", help="draw trajectories as PPM images, one per floor")
    v.add_argument("results")
    v.add_argument("--data", required=True)
    v.add_argument("--out", default="renders")
    v.add_argument("--episode", action="append", help="only these episode ids")
    v.set_defaults(func=cmd_render)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
