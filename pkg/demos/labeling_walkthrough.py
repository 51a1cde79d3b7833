"""How a driving log becomes regression targets.

Drives across a strip of tall grass with a zero predictor, labels the log,
and prints how tau grows once the robot reaches the grass.

    python3 demos/labeling_walkthrough.py
"""

import numpy as np

from errornav.controller import MPPIConfig, NavConfig, ZeroPredictor, navigate
from errornav.labeling import LabelConfig, align, extract_samples
from errornav.terrain import uniform_map


def grass_strip():
    tmap = uniform_map(120, 40, 0.25)
    grid = tmap.grid.copy()
    grid[:, 60:80] = tmap.class_index("TallGrass")  # x in [15, 20)
    return type(tmap)(grid, tmap.resolution, tmap.origin, tmap.classes)


def main():
    tmap = grass_strip()
    res = navigate((3.0, 5.0, 0.0), (27.0, 5.0), tmap, ZeroPredictor(),
                   mppi_cfg=MPPIConfig(seed=0), nav_cfg=NavConfig(max_steps=600))
    print(f"outcome {res.outcome.value} after {res.steps} steps")

    samples = extract_samples(align(res.log), LabelConfig(stride=5))
    print(f"{len(samples)} labeled windows")
    print(" start x   tau (m)")
    for s in samples:
        print(f"{s.start_state[0]:8.2f}  {s.tau:8.3f}")
    # free-ground windows are exact; windows touching the grass lag behind
    free = [s.tau for s in samples if s.start_state[0] + 2.0 < 15.0]
    grass = [s.tau for s in samples if 15.0 <= s.start_state[0] < 18.0]
    print(f"max tau on free ground {max(free):.3g}, mean tau in grass {np.mean(grass):.3f}")


if __name__ == "__main__":
    main()
