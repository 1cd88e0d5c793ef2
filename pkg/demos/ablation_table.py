"""Compare the full policy with each ablation on a small generated batch."""
import sys

from floornav.harness import RunConfig, compute_metrics, run_episodes
from floornav.policy import ABLATIONS
from floornav.scene import GenerationConfig, generate_scene, sample_episode


def batch(n: int):
    pairs = []
    for seed in range(n):
        scene = generate_scene(GenerationConfig(n_floors=2, width=24, height=24), seed)
        kind = "cross_floor" if seed % 2 == 0 else "same_floor"
        pairs.append((scene, sample_episode(scene, kind, seed)))
    return pairs


def main(n: int = 12) -> None:
    pairs = batch(n)
    print(f"{'variant':<12} {'SR':>6} {'SPL':>6} {'calls':>6}")
    for ablate in [()] + [(a,) for a in sorted(ABLATIONS)]:
        m = compute_metrics(run_episodes(pairs, RunConfig(ablate=ablate)))
        name = ablate[0] if ablate else "full"
        print(f"{name:<12} {m.sr:6.1f} {m.spl:6.1f} {m.mean_oracle_calls:6.2f}")


if __name__ == "__main__":
    main(*map(int, sys.argv[1:]))
