"""Run one cross-floor episode, print its summary and write one PPM per visited floor.

    python3 demos/cross_floor_episode.py [seed] [out_dir]
"""
import sys
from pathlib import Path

from floornav.harness import run_episode, write_renders
from floornav.scene import GenerationConfig, generate_scene, sample_episode


def main(seed: int = 0, out: str = "demo_out") -> None:
    scene = generate_scene(GenerationConfig(n_floors=2, width=24, height=24), seed)
    episode = sample_episode(scene, "cross_floor", seed)
    r = run_episode(scene, episode)
    print(f"goal {episode.goal_category!r} on floor {episode.goal_instances[0][0]}, start floor {episode.start_floor}")
    print(f"success={r.success} steps={r.steps} transitions={r.transitions} oracle calls={r.oracle_calls}")
    print(f"path {r.travelled:.2f} m against shortest {r.shortest:.2f} m")
    for p in write_renders(Path(out), scene, r, episode.goal_instances):
        print("wrote", p)


if __name__ == "__main__":
    main(*(int(a) if i == 0 else a for i, a in enumerate(sys.argv[1:])))
