"""SVG figures: overhead trajectory plots and ego-view sample overlays.

Overhead plots use the affine map

    X = margin + scale * (x - x0)
    Y = margin + scale * (y1 - y)

from world metres to SVG user units, where ``(x0, y1)`` is the top-left
corner of the map (minimum x, maximum y); :func:`overhead_transform`
returns it.  Ego overlays draw each observation pixel as the trapezoid of
ground it covers, in the robot frame (forward ``f``, left ``l``):

    X = margin + scale * (l_max - l)
    Y = margin + scale * (f_max - f)

so the robot sits at the bottom centre and looks up the page.
"""

from __future__ import annotations

from dataclasses import dataclass
from xml.sax.saxutils import escape

import numpy as np

from .dynamics import rollout_batch
from .terrain import ObservationConfig, TerrainMap

SAMPLE_COLOR = "#d62728"
CHOSEN_COLOR = "#1f77b4"


@dataclass(frozen=True)
class Affine:
    """``X = ox + sx * x``, ``Y = oy + sy * y``."""

    ox: float
    sx: float
    oy: float
    sy: float

    def __call__(self, x, y):
        return self.ox + self.sx * np.asarray(x, float), self.oy + self.sy * np.asarray(y, float)

    def inverse(self, X, Y):
        return (np.asarray(X, float) - self.ox) / self.sx, (np.asarray(Y, float) - self.oy) / self.sy


def _fmt(v) -> str:
    return f"{float(v):.3f}".rstrip("0").rstrip(".")


def _points(X, Y) -> str:
    return " ".join(f"{_fmt(a)},{_fmt(b)}" for a, b in zip(X, Y))


def _hex(rgb) -> str:
    r, g, b = (int(round(255 * float(np.clip(c, 0, 1)))) for c in rgb)
    return f"#{r:02x}{g:02x}{b:02x}"


def _svg(width, height, body, title=None) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{_fmt(width)}" '
            f'height="{_fmt(height)}" viewBox="0 0 {_fmt(width)} {_fmt(height)}">')
    parts = [head]
    if title:
        parts.append(f"<title>{escape(title)}</title>")
    parts.extend(body)
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _star(cx, cy, r) -> str:
    ang = np.pi / 2 + np.arange(10) * np.pi / 5
    rad = np.where(np.arange(10) % 2 == 0, r, 0.4 * r)
    return _points(cx + rad * np.cos(ang), cy - rad * np.sin(ang))


# ---------------------------------------------------------------- overhead

def overhead_transform(tmap: TerrainMap, scale: float = 10.0, margin: float = 10.0) -> Affine:
    x0, y0 = tmap.origin
    y1 = y0 + tmap.height * tmap.resolution
    return Affine(margin - scale * x0, scale, margin + scale * y1, -scale)


def _terrain_rects(tmap: TerrainMap, tf: Affine) -> list:
    """One rect per horizontal run of equal class, so files stay small."""
    out = []
    res = tmap.resolution
    colors = [_hex(c.color) for c in tmap.classes]
    for row in range(tmap.height):
        line = tmap.grid[row]
        edges = np.flatnonzero(np.diff(line)) + 1
        starts = np.concatenate([[0], edges])
        ends = np.concatenate([edges, [tmap.width]])
        y_top = tmap.origin[1] + (row + 1) * res
        for a, b in zip(starts, ends):
            X, Y = tf(tmap.origin[0] + a * res, y_top)
            out.append(f'<rect x="{_fmt(X)}" y="{_fmt(Y)}" width="{_fmt((b - a) * res * tf.sx)}" '
                       f'height="{_fmt(res * abs(tf.sy))}" fill="{colors[line[a]]}"/>')
    return out


def overhead_svg(tmap: TerrainMap, path, waypoints=(), goal=None, scale: float = 10.0,
                 margin: float = 10.0, title: str | None = None) -> str:
    """Terrain with the driven path.

    ``path`` is ``(T, >=2)`` world positions; its first row is the start
    (drawn as a square).  The path polyline is emitted only when ``T >= 2``.
    Waypoints are circles and ``goal`` a star.
    """
    path = np.atleast_2d(np.asarray(path, float))
    if path.size == 0:
        raise ValueError("path is empty")
    tf = overhead_transform(tmap, scale, margin)
    w = 2 * margin + tmap.width * tmap.resolution * scale
    h = 2 * margin + tmap.height * tmap.resolution * scale
    body = ['<g id="terrain">'] + _terrain_rects(tmap, tf) + ["</g>"]
    if len(path) >= 2:
        X, Y = tf(path[:, 0], path[:, 1])
        body.append(f'<polyline id="path" fill="none" stroke="{CHOSEN_COLOR}" '
                    f'stroke-width="2" points="{_points(X, Y)}"/>')
    mk = 0.3 * scale
    for i, wp in enumerate(waypoints):
        X, Y = tf(wp[0], wp[1])
        body.append(f'<circle class="waypoint" cx="{_fmt(X)}" cy="{_fmt(Y)}" r="{_fmt(mk)}" '
                    f'fill="white" stroke="black" stroke-width="1.5"><title>{i + 1}</title></circle>')
    if goal is not None:
        X, Y = tf(goal[0], goal[1])
        body.append(f'<polygon class="goal" points="{_star(X, Y, 1.5 * mk)}" fill="gold" '
                    f'stroke="black" stroke-width="1"/>')
    X, Y = tf(path[0, 0], path[0, 1])
    body.append(f'<rect class="start" x="{_fmt(X - mk)}" y="{_fmt(Y - mk)}" width="{_fmt(2 * mk)}" '
                f'height="{_fmt(2 * mk)}" fill="black"/>')
    return _svg(w, h, body, title)


# ---------------------------------------------------------------- ego overlay

def ego_transform(cfg: ObservationConfig = ObservationConfig(), scale: float = 60.0,
                  margin: float = 10.0) -> Affine:
    """Maps robot-frame ``(lateral, forward)`` metres to SVG units."""
    l_max = cfg.range_m * np.tan(np.radians(cfg.fov_deg) / 2)
    return Affine(margin + scale * l_max, -scale, margin + scale * cfg.range_m, -scale)


def _pixel_polygons(image, cfg: ObservationConfig, tf: Affine) -> list:
    h, w = image.shape[1:]
    f_edges = cfg.near_m + np.arange(h + 1) * (cfg.range_m - cfg.near_m) / h
    frac = 1.0 - 2.0 * np.arange(w + 1) / w
    tan = np.tan(np.radians(cfg.fov_deg) / 2)
    out = []
    for r in range(h):
        f0, f1 = f_edges[r], f_edges[r + 1]
        for c in range(w):
            lat = np.array([f0 * frac[c], f0 * frac[c + 1], f1 * frac[c + 1], f1 * frac[c]]) * tan
            fwd = np.array([f0, f0, f1, f1])
            X, Y = tf(lat, fwd)
            out.append(f'<polygon points="{_points(X, Y)}" fill="{_hex(image[:, r, c])}"/>')
    return out


def overlay_svg(image, samples, chosen, dt: float = 0.1,
                cfg: ObservationConfig = ObservationConfig(), scale: float = 60.0,
                margin: float = 10.0, title: str | None = None) -> str:
    """Ego observation with sampled (red) and chosen (blue) action sequences.

    ``samples`` is ``(K, H, 2)``, ``chosen`` is ``(H, 2)``; both are rolled
    out with the canonical model from the robot origin.
    """
    image = np.asarray(image, float)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"image must be (3, h, w), got {image.shape}")
    samples = np.asarray(samples, float).reshape(-1, *np.shape(chosen))
    tf = ego_transform(cfg, scale, margin)
    l_max = cfg.range_m * np.tan(np.radians(cfg.fov_deg) / 2)
    w = 2 * margin + 2 * l_max * scale
    h = 2 * margin + cfg.range_m * scale
    body = ['<g id="observation">'] + _pixel_polygons(image, cfg, tf) + ["</g>"]

    def line(traj, color, width, cls):
        X, Y = tf(traj[:, 1], traj[:, 0])
        return (f'<polyline class="{cls}" fill="none" stroke="{color}" stroke-width="{width}" '
                f'points="{_points(X, Y)}"/>')

    if len(samples):
        body.append('<g id="samples">')
        for traj in rollout_batch(np.zeros(3), samples, dt):
            body.append(line(traj, SAMPLE_COLOR, 0.6, "sample"))
        body.append("</g>")
    best = rollout_batch(np.zeros(3), np.asarray(chosen, float)[None], dt)[0]
    body.append(line(best, CHOSEN_COLOR, 2, "chosen"))
    return _svg(w, h, body, title)


def parse_polyline(svg: str, cls_or_id: str) -> list:
    """Vertices of every polyline whose class or id equals ``cls_or_id``."""
    import xml.etree.ElementTree as ET

    root = ET.fromstring(svg)
    out = []
    for el in root.iter("{http://www.w3.org/2000/svg}polyline"):
        if cls_or_id in (el.get("class"), el.get("id")):
            pts = [tuple(map(float, p.split(","))) for p in el.get("points").split()]
            out.append(np.array(pts))
    return out
