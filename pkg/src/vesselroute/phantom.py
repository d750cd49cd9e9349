"""Deterministic synthetic vessel scenes with planted projection crossings.

A scene holds one *main* vessel running from a source tip to a target tip and
one or more *decoy* vessels drawn over it. Where a decoy overlaps the main
vessel the mask shows an X-shaped crossing; the correct pairing at that
crossing continues the main vessel.

In a shortcut scene one decoy is a straight chord that crosses the main vessel
twice and carries a side branch at its middle, so following the decoy is a
strictly shorter pixel route from source to target. Every other decoy crosses
once and ends in free tips.

Decoys are fainter than the main vessel in the intensity image (different
depth, different opacity); overlaps add up as in a projection.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import GenerationError, InvalidParameter, ParseError
from .parallel import ordered_map
from .raster import load_image, save_image
from .vessel_graph import (ENDPOINT, BIFURCATION, NON_TRAVERSABLE, TRAVERSABLE, KeyNode, VesselEdge,
                           VesselGraph, deserialize_graph, finalize_graph, serialize_graph)

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class PhantomConfig:
    size: int = 256
    n_crossings: int = 2
    crossing_angle_range: tuple[float, float] = (20.0, 90.0)
    main_width_range: tuple[float, float] = (4.0, 7.0)
    decoy_width_jitter: float = 0.2
    shortcut_fraction: float = 0.5
    # Fraction of shortcut scenes whose first crossing is narrow and where the
    # main vessel bends and thins past it, so the decoy matches the incoming
    # vessel better than the true continuation does.
    narrow_fraction: float = 0.6
    main_contrast: float = 0.55
    decoy_contrast_range: tuple[float, float] = (0.18, 0.32)
    background: float = 0.08
    noise_sigma: float = 0.02
    blur_sigma: float = 1.0
    clearance: float = 6.0
    min_node_separation: float = 30.0
    max_retries: int = 400

    def validate(self) -> "PhantomConfig":
        if self.size < 128:
            raise InvalidParameter(f"image size must be >= 128, got {self.size}")
        if self.n_crossings < 0:
            raise InvalidParameter("n_crossings must be >= 0")
        lo, hi = self.crossing_angle_range
        if not 0 < lo <= hi <= 90:
            raise InvalidParameter(f"crossing angles must satisfy 0 < lo <= hi <= 90, got {self.crossing_angle_range}")
        if not 0.0 <= self.shortcut_fraction <= 1.0 or not 0.0 <= self.narrow_fraction <= 1.0:
            raise InvalidParameter("fractions must lie in [0, 1]")
        if self.main_width_range[0] <= 0 or self.main_width_range[0] > self.main_width_range[1]:
            raise InvalidParameter(f"bad main_width_range {self.main_width_range}")
        return self

    def to_dict(self) -> dict[str, Any]:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "PhantomConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ParseError(f"unknown phantom config keys: {sorted(extra)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw).validate()


@dataclass
class Crossing:
    node: int
    position: tuple[int, int]
    pairing: tuple[int, int]


@dataclass
class PhantomScene:
    seed: int
    config: PhantomConfig
    intensity: np.ndarray
    mask: np.ndarray
    truth_graph: VesselGraph
    true_path: list[int]
    crossings: list[Crossing]
    source: int
    target: int
    shortcut: bool
    false_route_shorter: bool
    meta: dict[str, Any] = field(default_factory=dict)

    def truth_document(self) -> dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "seed": self.seed,
            "config": self.config.to_dict(),
            "graph": serialize_graph(self.truth_graph),
            "true_path": list(self.true_path),
            "crossings": [{"node": c.node, "position": list(c.position), "pairing": list(c.pairing)}
                          for c in self.crossings],
            "source": self.source,
            "target": self.target,
            "shortcut": self.shortcut,
            "false_route_shorter": self.false_route_shorter,
            "meta": self.meta,
        }

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.mask, dtype=np.uint8).tobytes())
        h.update(np.ascontiguousarray(self.intensity, dtype=np.float64).tobytes())
        h.update(json.dumps(self.truth_document(), sort_keys=True).encode())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# geometry helpers (canonical frame: x right, y up)

def _dir(deg: float) -> np.ndarray:
    a = math.radians(deg)
    return np.array([math.cos(a), math.sin(a)])


def _bezier(p0, p1, p2, p3, step: float = 0.25) -> np.ndarray:
    p0, p1, p2, p3 = (np.asarray(p, dtype=float) for p in (p0, p1, p2, p3))
    rough = np.linalg.norm(p1 - p0) + np.linalg.norm(p2 - p1) + np.linalg.norm(p3 - p2)
    n = max(int(rough / step) * 2, 8)
    t = np.linspace(0.0, 1.0, n)[:, None]
    pts = ((1 - t) ** 3) * p0 + 3 * ((1 - t) ** 2) * t * p1 + 3 * (1 - t) * t ** 2 * p2 + t ** 3 * p3
    return _resample(pts, step)


def _circular_turn(start, heading_from: float, heading_to: float, length: float,
                   step: float = 0.25) -> np.ndarray:
    """Constant-curvature segment of the given arc length turning between two headings (degrees)."""
    n = max(int(math.ceil(length / step)), 1)
    s = np.linspace(0.0, length, n + 1)
    heading = np.radians(heading_from + (heading_to - heading_from) * s / length)
    d = np.column_stack([np.cos(heading), np.sin(heading)])
    mids = (d[:-1] + d[1:]) / 2 * np.diff(s)[:, None]
    return np.asarray(start, dtype=float) + np.vstack([[0.0, 0.0], np.cumsum(mids, axis=0)])


def _line(a, b, step: float = 0.25) -> np.ndarray:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    n = max(int(math.ceil(np.linalg.norm(b - a) / step)), 1)
    t = np.linspace(0.0, 1.0, n + 1)[:, None]
    return a + t * (b - a)


def _resample(pts: np.ndarray, step: float) -> np.ndarray:
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    n = max(int(math.ceil(s[-1] / step)), 1)
    targets = np.linspace(0.0, s[-1], n + 1)
    return np.column_stack([np.interp(targets, s, pts[:, 0]), np.interp(targets, s, pts[:, 1])])


@dataclass
class _Piece:
    """A drawn centreline: dense points, width, tree ('main' or 'decoyK'), node stops."""

    points: np.ndarray
    width: float
    tree: str
    traversable: bool
    stops: list[tuple[int, str]]  # (index into points, node key)


class _Builder:
    def __init__(self) -> None:
        self.pieces: list[_Piece] = []
        self.nodes: dict[str, np.ndarray] = {}
        self.kinds: dict[str, str] = {}

    def node(self, key: str, xy, kind: str) -> str:
        self.nodes[key] = np.asarray(xy, dtype=float)
        self.kinds[key] = kind
        return key

    def piece(self, pts: np.ndarray, width: float, tree: str, traversable: bool,
              stops: list[tuple[int, str]]) -> None:
        self.pieces.append(_Piece(pts, width, tree, traversable, sorted(stops)))


# ---------------------------------------------------------------------------
# scene layouts

def _single_decoy(b: _Builder, rng: np.random.Generator, cfg: PhantomConfig, main_pts: np.ndarray,
                  idx: int, w_dec: float, tag: str) -> None:
    lo, hi = cfg.crossing_angle_range
    p = main_pts[idx]
    tangent = main_pts[min(idx + 8, len(main_pts) - 1)] - main_pts[max(idx - 8, 0)]
    heading = math.degrees(math.atan2(tangent[1], tangent[0]))
    ang = heading + float(rng.choice([-1, 1])) * float(rng.uniform(lo, hi))
    t1, t2 = rng.uniform(32, 45, size=2)
    a = p - t1 * _dir(ang)
    c = p + t2 * _dir(ang)
    first = _line(a, p)
    pts = np.vstack([first, _line(p, c)[1:]])
    k_a = b.node(f"{tag}_a", a, ENDPOINT)
    k_c = b.node(f"{tag}_c", c, ENDPOINT)
    k_x = f"x_{tag}"
    b.node(k_x, p, BIFURCATION)
    b.piece(pts, w_dec, tree=tag, traversable=False,
            stops=[(0, k_a), (len(first) - 1, k_x), (len(pts) - 1, k_c)])


def _layout_plain(rng: np.random.Generator, cfg: PhantomConfig) -> tuple[_Builder, dict[str, Any]]:
    b = _Builder()
    w_main = float(rng.uniform(*cfg.main_width_range))
    span = float(rng.uniform(0.62, 0.74)) * cfg.size
    s = np.array([-span / 2, float(rng.uniform(-15, 15))])
    t = np.array([span / 2, float(rng.uniform(-15, 15))])
    bulge = float(rng.uniform(-0.25, 0.25)) * span
    c1 = s + np.array([span / 3, bulge + rng.uniform(-10, 10)])
    c2 = t + np.array([-span / 3, bulge + rng.uniform(-10, 10)])
    main = _bezier(s, c1, c2, t)
    b.node("src", s, ENDPOINT)
    b.node("tgt", t, ENDPOINT)
    stops = [(0, "src"), (len(main) - 1, "tgt")]
    n = cfg.n_crossings
    fracs = (np.arange(n) + 1) / (n + 1) + rng.uniform(-0.05, 0.05, size=n) if n else []
    for k, f in enumerate(fracs):
        idx = int(f * (len(main) - 1))
        tag = f"d{k}"
        wd = w_main * float(rng.uniform(1 - cfg.decoy_width_jitter, 1 + cfg.decoy_width_jitter))
        _single_decoy(b, rng, cfg, main, idx, wd, tag)
        stops.append((idx, f"x_{tag}"))
    b.piece(main, w_main, tree="main", traversable=True, stops=stops)
    return b, {"layout": "plain", "main_width": w_main}


def _taper(b: _Builder, pts: np.ndarray, w_from: float, w_to: float, hold: float, length: float,
           step: float = 0.25, n_steps: int = 4) -> None:
    """Overlay render-only pieces so a vessel keeps ``w_from`` for ``hold`` px, then narrows."""
    per = length / n_steps
    edges = [0.0, hold] + [hold + per * (k + 1) for k in range(n_steps)]
    widths = [w_from] + [w_from + (w_to - w_from) * (k + 0.5) / n_steps for k in range(n_steps)]
    for (s0, s1), w in zip(zip(edges[:-1], edges[1:]), widths):
        i0, i1 = int(s0 / step), min(int(s1 / step), len(pts) - 1)
        if i1 > i0:
            b.piece(pts[i0:i1 + 1], w, tree="main", traversable=True, stops=[])


_RUN = 30.0  # straight main-vessel run on either side of a narrow crossing


def _layout_shortcut(rng: np.random.Generator, cfg: PhantomConfig) -> tuple[_Builder, dict[str, Any]]:
    b = _Builder()
    lo, hi = cfg.crossing_angle_range
    w_lo, w_hi = cfg.main_width_range
    jit = cfg.decoy_width_jitter
    chord = float(rng.uniform(0.34, 0.42)) * cfg.size
    a = np.array([-chord / 2, 0.0])
    bb = np.array([chord / 2, 0.0])
    narrow = bool(rng.uniform() < cfg.narrow_fraction)
    if narrow:
        # Narrow crossing at A; just past A the main vessel bends away about
        # as far as the decoy diverges, and thins, while the decoy keeps the
        # incoming width.
        w_main = float(rng.uniform((w_lo + w_hi) / 2, w_hi))
        w_rest = max(w_main * float(rng.uniform(0.5, 0.62)), 3.0)
        w_dec = w_main * float(rng.uniform(max(1 - jit, 0.9), min(1 + jit, 1.1)))
        h_in = float(rng.uniform(lo, min(lo + 6.0, hi)))
        theta_a = h_in + float(rng.uniform(24.0, 32.0))
    else:
        w_main = float(rng.uniform(w_lo, w_hi))
        w_rest = w_main
        w_dec = w_main * float(rng.uniform(1 - jit, 1 + jit))
        h_in = float(rng.uniform(max(lo, 30.0), hi))
        theta_a = float(np.clip(h_in + rng.uniform(-12, 12), max(lo, 30.0), hi))
    theta_b = float(rng.uniform(max(lo, 30.0), hi))
    h_out = -float(np.clip(theta_b + rng.uniform(-12, 12), max(lo, 25.0), hi))
    k = chord * float(rng.uniform(0.4, 0.55))
    n_extra = max(cfg.n_crossings - 2, 0)
    n_in, n_out = (n_extra + 1) // 2, n_extra // 2
    # every extra decoy on a side lengthens that side of the main vessel
    l_in = float(rng.uniform(50, 70)) + 55.0 * n_in
    if narrow:
        # straight run into A, a short bend to theta_a, then straight again,
        # so both headings are well defined where the arms leave the crossing
        bend = _circular_turn(a, h_in, theta_a, length=12.0)
        run = bend[-1] + _RUN * _dir(theta_a)
        k2 = k * 0.7
        arc = np.vstack([bend, _line(bend[-1], run)[1:],
                         _bezier(run, run + k2 * _dir(theta_a), bb - k2 * _dir(-theta_b), bb)[1:]])
        pre = a - _RUN * _dir(h_in)
        rest_in = l_in - _RUN
        src = pre - rest_in * _dir(h_in + rng.uniform(-15, 15))
        main_in = np.vstack([_bezier(src, src + 0.5 * (pre - src), pre - 0.4 * rest_in * _dir(h_in), pre),
                             _line(pre, a)[1:]])
    else:
        arc = _bezier(a, a + k * _dir(theta_a), bb - k * _dir(-theta_b), bb)
        # incoming main arrives at A with heading h_in
        ctrl_in = a - 0.5 * l_in * _dir(h_in)
        src = ctrl_in - 0.5 * l_in * _dir(h_in + rng.uniform(-15, 15))
        main_in = _bezier(src, src + (ctrl_in - src) * 0.5, ctrl_in, a)
    l_out = float(rng.uniform(50, 70)) + 55.0 * n_out
    ctrl_out = bb + 0.5 * l_out * _dir(h_out)
    tgt = ctrl_out + 0.5 * l_out * _dir(h_out + rng.uniform(-15, 15))
    main_out = _bezier(bb, ctrl_out, ctrl_out + (tgt - ctrl_out) * 0.5, tgt)
    rest = np.vstack([arc, main_out[1:]])
    i_b = len(arc) - 1
    b.node("src", src, ENDPOINT)
    b.node("tgt", tgt, ENDPOINT)
    b.node("x_A", a, BIFURCATION)
    b.node("x_B", bb, BIFURCATION)
    in_stops = [(0, "src"), (len(main_in) - 1, "x_A")]
    rest_stops = [(0, "x_A"), (i_b, "x_B"), (len(rest) - 1, "tgt")]

    # A genuine side branch of the main vessel between A and B, so the true
    # route and the shortcut pass through the same number of junctions.
    i_m = int(rng.uniform(0.6, 0.75) * i_b)
    tangent = arc[min(i_m + 8, i_b)] - arc[max(i_m - 8, 0)]
    normal = np.array([-tangent[1], tangent[0]]) / np.hypot(*tangent)
    if np.dot(normal, arc[i_m] - (a + bb) / 2) < 0:
        normal = -normal
    side_end = arc[i_m] + float(rng.uniform(25, 35)) * normal
    side = _line(arc[i_m], side_end)
    b.node("m_split", arc[i_m], BIFURCATION)
    b.node("m_end", side_end, ENDPOINT)
    b.piece(side, max(w_rest * float(rng.uniform(0.6, 0.75)), 2.5), tree="main", traversable=True,
            stops=[(0, "m_split"), (len(side) - 1, "m_end")])
    rest_stops.append((i_m, "m_split"))

    # chord decoy with tails and a side branch below the chord
    t1, t2 = rng.uniform(28, 40, size=2)
    d_frac = float(rng.uniform(0.42, 0.58))
    dpt = a + d_frac * (bb - a)
    tail_a = a - np.array([t1, 0.0])
    tail_b = bb + np.array([t2, 0.0])
    seg1, seg2, seg3, seg4 = _line(tail_a, a), _line(a, dpt), _line(dpt, bb), _line(bb, tail_b)
    dec = np.vstack([seg1, seg2[1:], seg3[1:], seg4[1:]])
    j_a = len(seg1) - 1
    j_d = j_a + len(seg2) - 1
    j_b = j_d + len(seg3) - 1
    b.node("c_ta", tail_a, ENDPOINT)
    b.node("c_tb", tail_b, ENDPOINT)
    b.node("c_d", dpt, BIFURCATION)
    b.piece(dec, w_dec, tree="chord", traversable=False,
            stops=[(0, "c_ta"), (j_a, "x_A"), (j_d, "c_d"), (j_b, "x_B"), (len(dec) - 1, "c_tb")])
    br_ang = -90.0 + float(rng.uniform(-8, 8))
    br_end = dpt + float(rng.uniform(30, 40)) * _dir(br_ang)
    branch = _line(dpt, br_end)
    b.node("c_e", br_end, ENDPOINT)
    b.piece(branch, w_dec * float(rng.uniform(0.55, 0.7)), tree="chord", traversable=False,
            stops=[(0, "c_d"), (len(branch) - 1, "c_e")])

    for j in range(n_extra):
        tag = f"d{j}"
        if j % 2 == 0:
            frac = (j // 2 + float(rng.uniform(0.35, 0.6))) / n_in
            idx = int(frac * (len(main_in) - 1))
            _single_decoy(b, rng, cfg, main_in, idx, w_main * float(rng.uniform(1 - jit, 1 + jit)), tag)
            in_stops.append((idx, f"x_{tag}"))
        else:
            frac = (j // 2 + float(rng.uniform(0.35, 0.6))) / n_out
            idx = i_b + int(frac * (len(main_out) - 1))
            _single_decoy(b, rng, cfg, rest, idx, w_rest * float(rng.uniform(1 - jit, 1 + jit)), tag)
            rest_stops.append((idx, f"x_{tag}"))
    b.piece(main_in, w_main, tree="main", traversable=True, stops=in_stops)
    b.piece(rest, w_rest, tree="main", traversable=True, stops=rest_stops)
    if w_rest < w_main:
        # keep the crossing itself symmetric: full width for a while past A, then taper
        _taper(b, arc, w_main, w_rest, hold=12.0, length=12.0)
    meta = {"layout": "shortcut", "main_width": w_main, "rest_width": w_rest, "decoy_width": w_dec,
            "narrow": narrow, "h_in": h_in, "theta_a": theta_a, "theta_b": theta_b, "h_out": h_out}
    return b, meta


# ---------------------------------------------------------------------------
# placement, validation, rendering

def _place(b: _Builder, rng: np.random.Generator, size: int) -> np.ndarray:
    """Random rotation about the centroid, then centre in the image; returns (row, col) transform."""
    all_pts = np.vstack([p.points for p in b.pieces])
    centre = (all_pts.min(axis=0) + all_pts.max(axis=0)) / 2
    ang = float(rng.uniform(0, 2 * math.pi))
    rot = np.array([[math.cos(ang), -math.sin(ang)], [math.sin(ang), math.cos(ang)]])
    shift = rng.uniform(-6, 6, size=2)

    def to_rc(xy: np.ndarray) -> np.ndarray:
        q = (np.asarray(xy, dtype=float) - centre) @ rot.T
        return np.column_stack([size / 2 - q[..., 1] + shift[0], size / 2 + q[..., 0] + shift[1]]) \
            if q.ndim == 2 else np.array([size / 2 - q[1] + shift[0], size / 2 + q[0] + shift[1]])

    for p in b.pieces:
        p.points = to_rc(p.points)
    for k in list(b.nodes):
        b.nodes[k] = to_rc(b.nodes[k])
    return rot


def _render_piece(p: _Piece, shape: tuple[int, int], grow: float = 0.0) -> np.ndarray:
    r = p.width / 2 + grow
    lo = np.maximum(np.floor(p.points.min(axis=0) - r - 1), 0).astype(int)
    hi = np.minimum(np.ceil(p.points.max(axis=0) + r + 2), shape).astype(int)
    out = np.zeros(shape, dtype=bool)
    if np.any(hi <= lo):
        return out
    rr, cc = np.mgrid[lo[0]:hi[0], lo[1]:hi[1]]
    q = np.column_stack([rr.ravel(), cc.ravel()]).astype(float)
    d, _ = cKDTree(p.points).query(q, distance_upper_bound=r + 1)
    out[lo[0]:hi[0], lo[1]:hi[1]] = (d <= r).reshape(rr.shape)
    return out


def _validate(b: _Builder, cfg: PhantomConfig) -> str | None:
    """Return the violated constraint, or None when the layout is acceptable."""
    size = cfg.size
    margin = 6.0
    for p in b.pieces:
        r = p.width / 2 + margin
        if p.points.min() < r or p.points.max() > size - 1 - r:
            return "vessel leaves the image"
    keys = sorted(b.nodes)
    for i, k1 in enumerate(keys):
        for k2 in keys[i + 1:]:
            if np.linalg.norm(b.nodes[k1] - b.nodes[k2]) < cfg.min_node_separation:
                return f"nodes {k1} and {k2} closer than {cfg.min_node_separation}"
    shape = (size, size)
    trees: dict[str, list[_Piece]] = {}
    for p in b.pieces:
        trees.setdefault(p.tree, []).append(p)
    grown = {t: np.any([_render_piece(p, shape, cfg.clearance / 2) for p in ps], axis=0) for t, ps in trees.items()}
    names = sorted(trees)
    crossing_keys = [k for k in b.nodes if k.startswith("x_")]
    for i, t1 in enumerate(names):
        for t2 in names[i + 1:]:
            lab, n = ndimage.label(grown[t1] & grown[t2], structure=np.ones((3, 3)))
            shared = [k for k in crossing_keys
                      if any(k in [s[1] for s in p.stops] for p in trees[t1])
                      and any(k in [s[1] for s in p.stops] for p in trees[t2])]
            if n != len(shared):
                return f"trees {t1} and {t2} touch {n} times, expected {len(shared)}"
            hit = set()
            for k in shared:
                r, c = np.round(b.nodes[k]).astype(int)
                hit.add(int(lab[r, c]))
            if 0 in hit or len(hit) != len(shared):
                return f"overlap of {t1} and {t2} misses a planned crossing"
    return None


def _pixels_of(pts: np.ndarray) -> list[tuple[int, int]]:
    rc = np.round(pts).astype(int)
    out: list[tuple[int, int]] = []
    for r, c in rc:
        p = (int(r), int(c))
        if out and p == out[-1]:
            continue
        if len(out) >= 2 and p == out[-2]:
            out.pop()
            continue
        out.append(p)
    return out


def _truth_graph(b: _Builder, spacing=(1.0, 1.0)):
    keys = sorted(b.nodes)
    ids = {k: i for i, k in enumerate(keys)}
    nodes = []
    for k in keys:
        pos = tuple(int(v) for v in np.round(b.nodes[k]))
        nodes.append(KeyNode(id=ids[k], position=pos, kind=b.kinds[k], pixels=[pos]))
    edges = []
    tags = []
    for p in b.pieces:
        for (i0, k0), (i1, k1) in zip(p.stops[:-1], p.stops[1:]):
            pix = _pixels_of(p.points[i0:i1 + 1])
            p0 = nodes[ids[k0]].position
            p1 = nodes[ids[k1]].position
            chain = [q for q in pix if q != p0 and q != p1]
            label = TRAVERSABLE if p.traversable else NON_TRAVERSABLE
            edges.append(VesselEdge(-1, ids[k0], ids[k1], chain, label=label))
            tags.append((p.tree, k0, k1, chain[0] if chain else None))
    g = finalize_graph(nodes, edges, spacing, {"generator": "phantom"})
    key_by_id = {ids[k]: k for k in keys}
    # finalize renumbers nodes by position; map keys onto the new ids
    pos_to_new = {n.position: n.id for n in g.nodes}
    new_id = {k: pos_to_new[tuple(int(v) for v in np.round(b.nodes[k]))] for k in keys}
    return g, new_id, key_by_id


def _main_route(g: VesselGraph, src: int, tgt: int) -> list[int]:
    prev: dict[int, tuple[int, int]] = {}
    frontier = [src]
    seen = {src}
    while frontier:
        nxt = []
        for u in frontier:
            for e in g.incident(u):
                if e.label != TRAVERSABLE:
                    continue
                v = e.other(u)
                if v not in seen:
                    seen.add(v)
                    prev[v] = (u, e.id)
                    nxt.append(v)
        frontier = nxt
    if tgt not in seen:
        raise GenerationError("main vessel does not connect source and target")
    path = []
    cur = tgt
    while cur != src:
        u, e = prev[cur]
        path.append(e)
        cur = u
    return path[::-1]


def _shortest_is_false(g: VesselGraph, src: int, tgt: int, true_path: list[int]) -> bool:
    """True when the least arc-length route from source to target uses a decoy edge."""
    import heapq
    from .features import arc_length

    w = {e.id: arc_length(g.full_chain(e), g.spacing) for e in g.edges}
    best = {src: 0.0}
    via: dict[int, int] = {}
    heap = [(0.0, src)]
    while heap:
        d, u = heapq.heappop(heap)
        if d > best.get(u, math.inf):
            continue
        for e in g.incident(u):
            v = e.other(u)
            nd = d + w[e.id]
            if nd < best.get(v, math.inf) - 1e-9:
                best[v] = nd
                via[v] = e.id
                heapq.heappush(heap, (nd, v))
    true_len = sum(w[k] for k in true_path)
    return best[tgt] < true_len - 1e-9


def _render_intensity(b: _Builder, rng: np.random.Generator, cfg: PhantomConfig,
                      shape: tuple[int, int]) -> np.ndarray:
    img = np.full(shape, cfg.background, dtype=float)
    trees: dict[str, list[_Piece]] = {}
    for p in b.pieces:
        trees.setdefault(p.tree, []).append(p)
    for name in sorted(trees):
        m = np.any([_render_piece(p, shape) for p in trees[name]], axis=0)
        contrast = cfg.main_contrast if name == "main" else float(rng.uniform(*cfg.decoy_contrast_range))
        img += contrast * m
    img = ndimage.gaussian_filter(img, cfg.blur_sigma) if cfg.blur_sigma > 0 else img
    img = img + rng.normal(0.0, cfg.noise_sigma, size=shape)
    img = np.clip(img, 0.0, 1.0)
    # quantize to the 16-bit levels used on disk so in-memory and reloaded scenes agree
    return np.round(img * 65535.0) / 65535.0


def generate_scene(seed: int, config: PhantomConfig | None = None) -> PhantomScene:
    """Build one scene; identical seeds give identical scenes."""
    cfg = (config or PhantomConfig()).validate()
    rng = np.random.default_rng(seed)
    shortcut = cfg.n_crossings >= 2 and bool(rng.uniform() < cfg.shortcut_fraction)
    last = "no attempt"
    for _ in range(cfg.max_retries):
        b, meta = _layout_shortcut(rng, cfg) if shortcut else _layout_plain(rng, cfg)
        _place(b, rng, cfg.size)
        problem = _validate(b, cfg)
        if problem is not None:
            last = problem
            continue
        g, new_id, _ = _truth_graph(b)
        src, tgt = new_id["src"], new_id["tgt"]
        true_path = _main_route(g, src, tgt)
        false_shorter = _shortest_is_false(g, src, tgt, true_path)
        if shortcut and not false_shorter:
            last = "shortcut route is not shorter"
            continue
        shape = (cfg.size, cfg.size)
        mask = np.any([_render_piece(p, shape) for p in b.pieces], axis=0)
        intensity = _render_intensity(b, rng, cfg, shape)
        crossings = []
        path_set = set(true_path)
        for key in sorted(k for k in new_id if k.startswith("x_")):
            nid = new_id[key]
            pair = sorted(e.id for e in g.incident(nid) if e.id in path_set)
            crossings.append(Crossing(node=nid, position=g.node(nid).position, pairing=(pair[0], pair[1])))
        crossings.sort(key=lambda c: c.node)
        meta = {k: (round(v, 6) if isinstance(v, float) else v) for k, v in meta.items()}
        return PhantomScene(seed=int(seed), config=cfg, intensity=intensity, mask=mask, truth_graph=g,
                            true_path=true_path, crossings=crossings, source=src, target=tgt,
                            shortcut=shortcut, false_route_shorter=false_shorter, meta=meta)
    raise GenerationError(f"seed {seed}: no valid layout after {cfg.max_retries} attempts (last: {last})")


def derive_seeds(seed: int, n: int) -> list[int]:
    children = np.random.SeedSequence(seed).spawn(n)
    return [int(c.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1)) for c in children]


def _scene_or_error(index: int, seed: int, cfg: PhantomConfig) -> PhantomScene:
    try:
        return generate_scene(seed, cfg)
    except GenerationError as exc:
        raise GenerationError(f"scene {index}: {exc}") from exc


def generate_suite(seed: int, n_scenes: int, config: PhantomConfig | None = None, jobs: int = 1
                   ) -> tuple[list[PhantomScene], dict[str, Any]]:
    """``n_scenes`` scenes from independent child seeds of ``seed``, plus the manifest."""
    if n_scenes < 1:
        raise InvalidParameter("n_scenes must be >= 1")
    cfg = (config or PhantomConfig()).validate()
    items = [(i, s, cfg) for i, s in enumerate(derive_seeds(seed, n_scenes))]
    scenes = ordered_map(_scene_or_error, items, jobs)
    return scenes, build_manifest(seed, cfg, scenes)


def build_manifest(seed: int, cfg: PhantomConfig, scenes: list[PhantomScene]) -> dict[str, Any]:
    entries = [{"index": i, "seed": sc.seed, "shortcut": sc.shortcut,
                "false_route_shorter": sc.false_route_shorter, "n_crossings": len(sc.crossings),
                "narrow": bool(sc.meta.get("narrow", False)), "digest": sc.digest()}
               for i, sc in enumerate(scenes)]
    frac = sum(e["false_route_shorter"] for e in entries) / len(entries)
    body = {"schema_version": SCHEMA_VERSION, "suite_seed": int(seed), "n_scenes": len(scenes),
            "config": cfg.to_dict(), "false_route_shorter_fraction": frac, "scenes": entries}
    body["hash"] = hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()
    return body


# ---------------------------------------------------------------------------
# bundles on disk

def scene_dirname(index: int) -> str:
    return f"scene_{index:03d}"


def write_scene(scene: PhantomScene, directory: str | Path) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_image(d / "mask.png", scene.mask.astype(float), bits=8)
    save_image(d / "intensity.png", scene.intensity, bits=16)
    (d / "truth.json").write_text(json.dumps(scene.truth_document(), sort_keys=True, indent=1) + "\n",
                                  encoding="utf-8")


def write_suite(scenes: list[PhantomScene], manifest: dict[str, Any], out: str | Path) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for i, sc in enumerate(scenes):
        write_scene(sc, out / scene_dirname(i))
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return out / "manifest.json"


def read_scene(directory: str | Path) -> PhantomScene:
    d = Path(directory)
    try:
        doc = json.loads((d / "truth.json").read_text(encoding="utf-8"))
        mask = load_image(d / "mask.png") >= 0.5
        intensity = load_image(d / "intensity.png")
        cfg = PhantomConfig.from_dict(doc["config"])
        graph = deserialize_graph(doc["graph"])
        crossings = [Crossing(int(c["node"]), tuple(c["position"]), tuple(c["pairing"])) for c in doc["crossings"]]
        return PhantomScene(seed=int(doc["seed"]), config=cfg, intensity=intensity, mask=mask, truth_graph=graph,
                            true_path=[int(k) for k in doc["true_path"]], crossings=crossings,
                            source=int(doc["source"]), target=int(doc["target"]),
                            shortcut=bool(doc["shortcut"]), false_route_shorter=bool(doc["false_route_shorter"]),
                            meta=dict(doc.get("meta", {})))
    except (OSError, KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise ParseError(f"{d}: unreadable scene bundle ({exc})") from exc


def read_suite(directory: str | Path) -> tuple[list[PhantomScene], dict[str, Any]]:
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
        n = int(manifest["n_scenes"])
    except (OSError, KeyError, ValueError, json.JSONDecodeError) as exc:
        raise ParseError(f"{d}: unreadable manifest ({exc})") from exc
    scenes = []
    for i in range(n):
        try:
            scenes.append(read_scene(d / scene_dirname(i)))
        except ParseError as exc:
            raise ParseError(f"scene {i} ({scene_dirname(i)}): {exc}") from exc
    return scenes, manifest
