"""A miniature on-policy campaign followed by a waypoint run.

Uses a small network and short rounds so it finishes in under a minute on
one core.  Writes round artifacts and an overhead SVG to ``demo_out/``.

    python3 demos/small_campaign.py [out_dir]
"""

import sys
from pathlib import Path

from errornav.controller import NetworkPredictor
from errornav.network import ArchConfig
from errornav.pipeline import (CampaignConfig, CourseSpec, MapSpec, course_length,
                               evaluate_waypoints, run_campaign)
from errornav.plotting import overhead_svg
from errornav.training import TrainConfig


def main(out=Path("demo_out")):
    cfg = CampaignConfig(
        map=MapSpec(seed=3),
        arch=ArchConfig(conv_channels=(4, 8, 8), action_hidden=8, action_embed=16,
                        hidden=32, head_hidden=32),
        train=TrainConfig(max_epochs=8),
        bootstrap_minutes=4.0, rounds=3, minutes_per_round=1.0, seed=3)
    result = run_campaign(cfg, out_dir=out / "rounds")
    for r in result.reports:
        print(f"round {r.round}: {r.goals_reached}/{r.goals_attempted} goals, "
              f"{r.collisions} collisions, {r.dataset_size} samples, val {r.best_val_loss:.4f}")

    course = CourseSpec()
    start, waypoints = course.resolve(result.tmap)
    print(f"course length {course_length(start, waypoints):.1f} m")
    run = evaluate_waypoints(NetworkPredictor(result.params, cfg.arch), result.tmap, start,
                             waypoints, cfg.reward, cfg.mppi, cfg.nav,
                             course.timeout_s)
    print("legs:", [o.value if o else "skipped" for o in run.legs])
    path = [start[:2]] + [tuple(s[:2]) for s in run.trajectory]
    svg = overhead_svg(result.tmap, path, waypoints, title="waypoint run")
    (out / "overhead.svg").write_text(svg)
    print(f"wrote {out / 'overhead.svg'}")


if __name__ == "__main__":
    main(Path(sys.argv[1]) if len(sys.argv) > 1 else Path("demo_out"))
