import xml.etree.ElementTree as ET

import numpy as np
import pytest

from errornav.plotting import (ego_transform, overhead_svg, overhead_transform, overlay_svg,
                               parse_polyline)
from errornav.terrain import generate_map
from maps import open_field

NS = "{http://www.w3.org/2000/svg}"


def _count(svg, tag, cls=None):
    root = ET.fromstring(svg)
    return sum(1 for el in root.iter(NS + tag) if cls is None or el.get("class") == cls)


def test_single_point_has_only_start_marker():
    svg = overhead_svg(open_field(10), [[3.0, 4.0]])
    assert _count(svg, "polyline") == 0
    assert _count(svg, "rect", "start") == 1
    assert _count(svg, "circle") == 0 and _count(svg, "polygon") == 0


def test_three_point_path_roundtrip():
    tmap = open_field(10)
    path = np.array([[1.0, 1.0], [2.5, 3.25], [7.0, 2.0]])
    svg = overhead_svg(tmap, path, scale=12.0, margin=5.0)
    (pts,) = parse_polyline(svg, "path")
    # documented map: X = margin + scale (x - x0), Y = margin + scale (y1 - y)
    np.testing.assert_allclose(pts[:, 0], 5.0 + 12.0 * path[:, 0], atol=1e-3)
    np.testing.assert_allclose(pts[:, 1], 5.0 + 12.0 * (10.0 - path[:, 1]), atol=1e-3)
    x, y = overhead_transform(tmap, 12.0, 5.0).inverse(pts[:, 0], pts[:, 1])
    np.testing.assert_allclose(np.c_[x, y], path, atol=1e-3)


def test_markers():
    svg = overhead_svg(open_field(10), [[1, 1], [2, 2]], waypoints=[(3, 3), (4, 4), (5, 5)],
                       goal=(6, 6))
    assert _count(svg, "circle", "waypoint") == 3
    assert _count(svg, "polygon", "goal") == 1


def test_terrain_colours_present():
    tmap = generate_map(0, 40, 40, densities={"Shrub": 0.2})
    svg = overhead_svg(tmap, [[5, 5]])
    r, g, b = (int(round(255 * c)) for c in tmap.classes[tmap.class_index("Shrub")].color)
    assert f'fill="#{r:02x}{g:02x}{b:02x}"' in svg
    assert svg == overhead_svg(tmap, [[5, 5]])


def test_empty_path_rejected():
    with pytest.raises(ValueError):
        overhead_svg(open_field(10), np.zeros((0, 2)))


def test_overlay_counts():
    rng = np.random.default_rng(0)
    samples = rng.uniform([0, -1.5], [0.8, 1.5], (128, 20, 2))
    svg = overlay_svg(rng.uniform(0, 1, (3, 32, 32)), samples, samples.mean(axis=0))
    root = ET.fromstring(svg)
    lines = list(root.iter(NS + "polyline"))
    assert sum(el.get("stroke") == "#d62728" for el in lines) == 128
    assert sum(el.get("stroke") == "#1f77b4" for el in lines) == 1
    assert _count(svg, "polygon") == 32 * 32


def test_overlay_straight_plan_runs_up_the_middle():
    plan = np.tile([0.8, 0.0], (20, 1))
    svg = overlay_svg(np.zeros((3, 32, 32)), np.zeros((0, 20, 2)), plan)
    (pts,) = parse_polyline(svg, "chosen")
    tf = ego_transform()
    lat, fwd = tf.inverse(pts[:, 0], pts[:, 1])
    np.testing.assert_allclose(lat, 0, atol=1e-3)
    np.testing.assert_allclose(fwd, np.arange(21) * 0.08, atol=1e-3)
