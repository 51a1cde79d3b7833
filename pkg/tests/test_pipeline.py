import json
from dataclasses import asdict, replace

import numpy as np
import pytest

from errornav.controller import ConstantPredictor, Outcome, ZeroPredictor
from errornav.labeling import label_logs
from errornav.network import init_params
from errornav.pipeline import (REFERENCE_COURSE, CampaignConfig, CourseSpec, MapSpec,
                               RoundReport, SimState, bootstrap_collect, collect_on_policy,
                               course_length, evaluate_waypoints, extend_campaign,
                               run_campaign, scaled_course)
from errornav.terrain import uniform_map
from maps import open_field, paint
from small import SMALL_ARCH, small_campaign


def test_rounds_must_be_positive():
    with pytest.raises(ValueError):
        CampaignConfig(rounds=0)


def test_inconsistent_shapes_rejected():
    from errornav.labeling import LabelConfig
    with pytest.raises(ValueError, match="label.horizon"):
        CampaignConfig(label=LabelConfig(horizon=10))


def test_bootstrap_record_count():
    cfg = CampaignConfig(bootstrap_minutes=15.0)
    logs = bootstrap_collect(cfg.map.build(), cfg)
    records = sum(len(lg.states) for lg in logs)
    assert records == pytest.approx(15 * 60 * 10, rel=0.01)
    assert any(lg.outcome == "Collision" for lg in logs)
    tags = set()
    tmap = cfg.map.build()
    for lg in logs:
        for x, y in lg.states[::10, :2]:
            tags.add(tmap.class_at(x, y).tag)
    assert {"Free", "TallGrass", "Slip"} <= tags


def test_bootstrap_deterministic():
    cfg = small_campaign()
    tmap = cfg.map.build()
    a, b = bootstrap_collect(tmap, cfg), bootstrap_collect(tmap, cfg)
    assert len(a) == len(b)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.states, y.states)
        np.testing.assert_array_equal(x.controls, y.controls)
        np.testing.assert_array_equal(x.observations, y.observations)


def test_bootstrap_without_rigid_cells_never_sticks():
    cfg = small_campaign(bootstrap_minutes=2.0)
    tmap = uniform_map(80, 60)
    logs = bootstrap_collect(tmap, cfg)
    assert len(logs) == 1 and logs[0].stuck_time is None and logs[0].outcome != "Collision"


def test_round_minutes_add_up():
    """Five three-minute rounds report fifteen minutes of driving."""
    cfg = small_campaign(minutes_per_round=3.0)
    tmap = cfg.map.build()
    params = init_params(SMALL_ARCH, 0)
    rng = np.random.default_rng(0)
    sim = SimState.start((10, 7, 0), 0)
    total = 0.0
    tail = cfg.nav.collision_tail_steps * cfg.dt / 60
    for k in range(1, 6):
        logs, rep = collect_on_policy(tmap, params, cfg, k, sim, rng)
        assert rep.minutes == pytest.approx(3.0, abs=tail + 0.01)
        assert rep.goals_reached + rep.collisions + rep.timeouts == rep.goals_attempted
        assert min(rep.goals_attempted, rep.goals_reached, rep.collisions) >= 0
        total += rep.minutes
    assert total == pytest.approx(15.0, abs=5 * tail + 0.05)


def test_campaign_layout_and_provenance(tmp_path):
    cfg = small_campaign(rounds=2)
    res = run_campaign(cfg, out_dir=tmp_path)
    assert [r.round for r in res.reports] == [1, 2]
    sizes = [r.dataset_size for r in res.reports]
    assert sizes == sorted(sizes) and sizes[-1] == res.dataset.N
    assert {p["round"] for p in res.dataset.provenance} == {0, 1, 2}
    for k in (0, 1, 2):
        d = tmp_path / "rounds" / str(k)
        assert (d / "logs").is_dir() and (d / "dataset" / "manifest.jsonl").is_file()
        assert (d / "checkpoint").is_file() and (d / "report.json").is_file()
    rep = json.loads((tmp_path / "rounds" / "2" / "report.json").read_text())
    assert set(rep) == set(asdict(res.reports[-1]))
    assert res.checkpoint == tmp_path / "rounds" / "2" / "checkpoint"


def test_extend_campaign_merges(tmp_path):
    cfg = small_campaign()
    tmap = cfg.map.build()
    logs = bootstrap_collect(tmap, cfg)
    ds = label_logs(logs, cfg.label)
    params, merged, res = extend_campaign(init_params(SMALL_ARCH, 0), ds, logs[:2], cfg, 6)
    assert merged.N > ds.N
    assert merged.provenance[-1]["round"] == 6


# ---------------------------------------------------------------- waypoints

def test_single_waypoint_at_start():
    res = evaluate_waypoints(ZeroPredictor(), open_field(10), (5, 5, 0), [(5, 5)])
    assert res.success and len(res.trajectory) == 0 and res.legs == [Outcome.REACHED]


def test_empty_waypoints_rejected():
    with pytest.raises(ValueError):
        evaluate_waypoints(ZeroPredictor(), open_field(10), (5, 5, 0), [])


def test_waypoint_inside_rigid_region_fails():
    tmap = paint(open_field(20), "Shrub", 12, 16, 8, 12)
    res = evaluate_waypoints(ZeroPredictor(), tmap, (5, 10, 0), [(14, 10), (5, 5)],
                             timeout_s=30)
    assert not res.success
    assert res.legs[0] is not Outcome.REACHED and res.legs[1] is None


def test_open_course_succeeds():
    tmap = open_field(30)
    wps = [(10, 10), (15, 12), (12, 16)]
    res = evaluate_waypoints(ZeroPredictor(), tmap, (5, 8, 0), wps)
    assert res.success
    for wp, lg in zip(wps, res.logs):
        assert np.hypot(*(lg.states[-1, :2] - wp)) <= 0.5


def test_reference_course_scaling():
    assert course_length((0, 0), REFERENCE_COURSE) == pytest.approx(69.5, abs=0.5)
    tmap = MapSpec().build()
    start, wps = CourseSpec().resolve(tmap)
    assert len(wps) == 5 and course_length(start, wps) >= 40
    assert min(w[0] for w in wps) >= 26 and start[0] >= 26
    for w in wps:
        assert not tmap.class_at(*w).rigid
    # explicit waypoints pass through untouched
    _, explicit = CourseSpec(waypoints=((30, 5), (31, 6))).resolve(tmap)
    assert explicit == [(30.0, 5.0), (31.0, 6.0)]
