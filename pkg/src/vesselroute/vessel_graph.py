"""Skeleton to vessel graph: spur pruning, key-node detection, edge tracing, JSON I/O."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Any, Iterable, Iterator

import numpy as np
from scipy import ndimage

from .errors import IntegrityError, InvalidInput, InvalidParameter, ParseError
from .raster import Spacing, check_spacing, neighbor_count, remove_redundant

Pixel = tuple[int, int]

SCHEMA_VERSION = 1

ENDPOINT = "endpoint"
BIFURCATION = "bifurcation"
ANCHOR = "anchor"
ISOLATED = "isolated"
NODE_KINDS = (ENDPOINT, BIFURCATION, ANCHOR, ISOLATED)

TRAVERSABLE = "traversable"
NON_TRAVERSABLE = "non-traversable"

_STEPS = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))


@dataclass
class EdgeGeometry:
    turning_angle: float
    arc_length: float
    diameter: float


@dataclass
class KeyNode:
    id: int
    position: Pixel
    kind: str
    degree: int = 0
    pixels: list[Pixel] = field(default_factory=list)
    phi: np.ndarray | None = None


@dataclass
class VesselEdge:
    id: int
    u: int
    v: int
    chain: list[Pixel]
    geometry: EdgeGeometry | None = None
    probability: float | None = None
    label: str | None = None

    @property
    def endpoints(self) -> tuple[int, int]:
        return self.u, self.v

    def other(self, node: int) -> int:
        return self.v if node == self.u else self.u

    def oriented_chain(self, start: int) -> list[Pixel]:
        """Chain pixels ordered away from ``start``."""
        return list(self.chain) if start == self.u else list(reversed(self.chain))


@dataclass
class VesselGraph:
    nodes: list[KeyNode]
    edges: list[VesselEdge]
    spacing: Spacing = (1.0, 1.0)
    provenance: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self._index()

    def _index(self) -> None:
        self._node_pos = {n.id: k for k, n in enumerate(self.nodes)}
        self._edge_pos = {e.id: k for k, e in enumerate(self.edges)}
        self._incident: dict[int, list[int]] = {n.id: [] for n in self.nodes}
        for e in self.edges:
            if e.u not in self._incident or e.v not in self._incident:
                raise IntegrityError(f"edge {e.id} references unknown node")
            self._incident[e.u].append(e.id)
            if e.v != e.u:
                self._incident[e.v].append(e.id)

    def node(self, node_id: int) -> KeyNode:
        try:
            return self.nodes[self._node_pos[node_id]]
        except KeyError:
            raise InvalidInput(f"unknown node id {node_id}") from None

    def edge(self, edge_id: int) -> VesselEdge:
        try:
            return self.edges[self._edge_pos[edge_id]]
        except KeyError:
            raise InvalidInput(f"unknown edge id {edge_id}") from None

    def incident(self, node_id: int) -> list[VesselEdge]:
        return [self.edge(k) for k in self._incident[node_id]]

    def neighbors(self, node_id: int) -> list[int]:
        return sorted({e.other(node_id) for e in self.incident(node_id)})

    def degree(self, node_id: int) -> int:
        return sum(2 if e.u == e.v else 1 for e in self.incident(node_id))

    def full_chain(self, edge: VesselEdge, start: int | None = None) -> list[Pixel]:
        """Node position, chain pixels, node position, oriented from ``start``."""
        start = edge.u if start is None else start
        other = edge.other(start)
        pts = [self.node(start).position, *edge.oriented_chain(start), self.node(other).position]
        out = [pts[0]]
        for p in pts[1:]:
            if p != out[-1]:
                out.append(p)
        return out

    def copy(self) -> "VesselGraph":
        return deserialize_graph(serialize_graph(self))


def _neighbours(p: Pixel, shape: tuple[int, int]) -> Iterator[Pixel]:
    r, c = p
    h, w = shape
    for dr, dc in _STEPS:
        rr, cc = r + dr, c + dc
        if 0 <= rr < h and 0 <= cc < w:
            yield rr, cc


def _step_length(a: Pixel, b: Pixel, spacing: Spacing) -> float:
    sx, sy = spacing
    return math.hypot((b[1] - a[1]) * sx, (b[0] - a[0]) * sy)


def _terminal_branches(skel: np.ndarray, spacing: Spacing) -> list[tuple[float, Pixel, list[Pixel]]]:
    """Branches running from an endpoint to the first pixel of a junction.

    Returns ``(arc_length, endpoint, pixels_without_junction)``; free chains
    (endpoint to endpoint) are not branches.
    """
    nb = neighbor_count(skel) * skel
    out = []
    for r, c in zip(*np.nonzero(nb == 1)):
        start = (int(r), int(c))
        path = [start]
        prev: Pixel | None = None
        cur = start
        length = 0.0
        while True:
            nxt = [q for q in _neighbours(cur, skel.shape) if skel[q] and q != prev]
            if len(nxt) != 1:
                break
            q = nxt[0]
            length += _step_length(cur, q, spacing)
            if nb[q] >= 3:
                out.append((length, start, path))
                break
            if nb[q] == 1:
                break
            prev, cur = cur, q
            path.append(q)
    return out


def prune_spurs(skel: np.ndarray, l_min: float, spacing: Spacing = (1.0, 1.0)) -> np.ndarray:
    """Remove terminal branches shorter than ``l_min`` (physical units).

    Spurs are removed one at a time, shortest first, until none qualifies, so a
    junction whose arms are all short keeps its two longest arms.
    """
    if l_min < 0:
        raise InvalidParameter(f"l_min must be nonnegative, got {l_min}")
    spacing = check_spacing(spacing)
    s = np.asarray(skel, dtype=bool).copy()
    while True:
        spurs = [b for b in _terminal_branches(s, spacing) if b[0] < l_min]
        if not spurs:
            return s
        _, _, pixels = min(spurs, key=lambda b: (b[0], b[1]))
        for p in pixels:
            s[p] = False
        s = remove_redundant(s)


def _cluster_position(pixels: list[Pixel]) -> Pixel:
    arr = np.asarray(pixels, dtype=float)
    centre = arr.mean(axis=0)
    d = ((arr - centre) ** 2).sum(axis=1)
    best = min(range(len(pixels)), key=lambda k: (round(float(d[k]), 9), pixels[k]))
    return pixels[best]


def detect_key_nodes(skel: np.ndarray) -> list[KeyNode]:
    """Endpoints (one neighbour) and junction clusters (pixels with three or more neighbours).

    Each 8-connected cluster of junction pixels becomes one bifurcation node
    positioned at the cluster pixel nearest the centroid. Degree is the number
    of branches leaving the cluster. Node ids follow (row, col) of position.
    """
    s = np.asarray(skel, dtype=bool)
    nb = neighbor_count(s) * s
    found: list[tuple[Pixel, str, list[Pixel]]] = []
    for r, c in zip(*np.nonzero(s & (nb == 0))):
        found.append(((int(r), int(c)), ISOLATED, [(int(r), int(c))]))
    for r, c in zip(*np.nonzero(s & (nb == 1))):
        found.append(((int(r), int(c)), ENDPOINT, [(int(r), int(c))]))
    lab, n = ndimage.label(s & (nb >= 3), structure=np.ones((3, 3), dtype=bool))
    for k in range(1, n + 1):
        rows, cols = np.nonzero(lab == k)
        pix = sorted((int(a), int(b)) for a, b in zip(rows, cols))
        found.append((_cluster_position(pix), BIFURCATION, pix))
    found.sort(key=lambda t: t[0])
    nodes = []
    for i, (pos, kind, pix) in enumerate(found):
        members = set(pix)
        if kind == ENDPOINT:
            deg = 1
        elif kind == ISOLATED:
            deg = 0
        else:
            outside = {q for p in pix for q in _neighbours(p, s.shape) if s[q] and q not in members}
            deg = len(outside)
        nodes.append(KeyNode(id=i, position=pos, kind=kind, degree=deg, pixels=pix))
    return nodes


def _edge_sort_key(e: VesselEdge) -> tuple:
    first = e.chain[0] if e.chain else (-1, -1)
    return (min(e.u, e.v), max(e.u, e.v), first, len(e.chain))


def _normalise(e: VesselEdge) -> VesselEdge:
    if e.u > e.v or (e.u == e.v and len(e.chain) > 1 and e.chain[0] > e.chain[-1]):
        e.u, e.v = e.v, e.u
        e.chain = list(reversed(e.chain))
    return e


def finalize_graph(nodes: list[KeyNode], edges: list[VesselEdge], spacing: Spacing,
                   provenance: dict[str, Any] | None = None) -> VesselGraph:
    """Renumber nodes by position and edges by (endpoints, first chain pixel); recompute degrees."""
    order = sorted(nodes, key=lambda n: n.position)
    remap = {n.id: i for i, n in enumerate(order)}
    new_nodes = []
    for i, n in enumerate(order):
        new_nodes.append(KeyNode(id=i, position=n.position, kind=n.kind, degree=0,
                                 pixels=sorted(n.pixels), phi=n.phi))
    new_edges = [_normalise(VesselEdge(id=-1, u=remap[e.u], v=remap[e.v], chain=list(e.chain),
                                       geometry=e.geometry, probability=e.probability, label=e.label))
                 for e in edges]
    new_edges.sort(key=_edge_sort_key)
    for i, e in enumerate(new_edges):
        e.id = i
    g = VesselGraph(new_nodes, new_edges, spacing=spacing, provenance=dict(provenance or {}))
    for n in g.nodes:
        n.degree = g.degree(n.id)
    return g


def trace_edges(skel: np.ndarray, nodes: list[KeyNode], spacing: Spacing = (1.0, 1.0)) -> VesselGraph:
    """Walk every maximal degree-2 chain between node clusters.

    Parallel chains give parallel edges and a chain leaving and re-entering the
    same cluster gives a self-loop. A closed ring without any key node gets a
    synthesized anchor node (kind ``anchor``) at its first pixel in raster order.
    """
    s = np.asarray(skel, dtype=bool)
    spacing = check_spacing(spacing)
    nb = neighbor_count(s) * s
    owner: dict[Pixel, int] = {}
    nodes = [KeyNode(id=n.id, position=n.position, kind=n.kind, pixels=list(n.pixels) or [n.position])
             for n in nodes]
    for n in nodes:
        for p in n.pixels:
            if not (0 <= p[0] < s.shape[0] and 0 <= p[1] < s.shape[1]) or not s[p]:
                raise IntegrityError(f"node {n.id} pixel {p} is not on the skeleton")
            if p in owner:
                raise IntegrityError(f"pixel {p} claimed by nodes {owner[p]} and {n.id}")
            owner[p] = n.id
    for r, c in zip(*np.nonzero(s & (nb != 2))):
        if (int(r), int(c)) not in owner:
            raise IntegrityError(f"skeleton pixel {(int(r), int(c))} with {nb[r, c]} neighbours has no key node")

    visited: set[Pixel] = set()
    edges: list[VesselEdge] = []
    direct: set[frozenset] = set()

    def walk(node_id: int, first: Pixel, prev: Pixel) -> None:
        chain = [first]
        visited.add(first)
        cur = first
        while True:
            # cur has exactly two skeleton neighbours, one of which is prev
            nxt = [q for q in _neighbours(cur, s.shape) if s[q] and q != prev]
            if len(nxt) != 1:
                raise IntegrityError(f"chain pixel {cur} is not a simple chain pixel")
            q = nxt[0]
            if q in owner:
                edges.append(VesselEdge(-1, node_id, owner[q], chain))
                return
            if q in visited:
                raise IntegrityError(f"chain starting at {first} re-enters itself at {q}")
            prev, cur = cur, q
            chain.append(cur)
            visited.add(cur)

    def walk_from(n: KeyNode) -> None:
        members = set(n.pixels)
        for p in n.pixels:
            for q in _neighbours(p, s.shape):
                if not s[q] or q in members:
                    continue
                if q in owner:
                    key = frozenset((p, q))
                    if key not in direct and (n.kind == ENDPOINT or nodes_by_id[owner[q]].kind == ENDPOINT):
                        direct.add(key)
                        edges.append(VesselEdge(-1, n.id, owner[q], []))
                    continue
                if q not in visited:
                    walk(n.id, q, p)

    nodes_by_id = {n.id: n for n in nodes}
    for n in sorted(nodes, key=lambda n: n.id):
        walk_from(n)

    next_id = max((n.id for n in nodes), default=-1) + 1
    while True:
        left = [(int(r), int(c)) for r, c in zip(*np.nonzero(s)) if (int(r), int(c)) not in owner
                and (int(r), int(c)) not in visited]
        if not left:
            break
        anchor_px = left[0]
        warnings.warn(f"closed loop without key nodes; synthesizing anchor node at {anchor_px}", stacklevel=2)
        anchor = KeyNode(id=next_id, position=anchor_px, kind=ANCHOR, pixels=[anchor_px])
        next_id += 1
        nodes.append(anchor)
        nodes_by_id[anchor.id] = anchor
        owner[anchor_px] = anchor.id
        walk_from(anchor)

    # Direct endpoint-endpoint adjacency is found from both sides with the same key, so is already unique.
    g = finalize_graph(nodes, edges, spacing, {"anchors": sum(1 for n in nodes if n.kind == ANCHOR)})
    return g


def build_graph(skel: np.ndarray, spacing: Spacing = (1.0, 1.0)) -> VesselGraph:
    """detect_key_nodes followed by trace_edges on an already pruned skeleton."""
    return trace_edges(skel, detect_key_nodes(skel), spacing)


def _arm_line(points: list[Pixel], near: int, far: int) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares line through chain points ``near..far`` (indices), oriented away from the start."""
    pts = np.asarray(points, dtype=float)
    seg = pts[min(near, len(pts) - 2):min(far, len(pts) - 1) + 1]
    centre = seg.mean(axis=0)
    direction = np.linalg.svd(seg - centre)[2][0]
    if np.dot(direction, pts[-1] - pts[0]) < 0:
        direction = -direction
    return centre, direction


def _line_intersection(lines: list[tuple[np.ndarray, np.ndarray]]) -> np.ndarray | None:
    """Point minimizing the summed squared distance to the lines, or None if ill-conditioned."""
    a = np.zeros((2, 2))
    rhs = np.zeros(2)
    for centre, d in lines:
        proj = np.eye(2) - np.outer(d, d)
        a += proj
        rhs += proj @ centre
    if np.linalg.cond(a) > 1e3:
        return None
    return np.linalg.solve(a, rhs)


def merge_crossings(graph: VesselGraph, dmap: np.ndarray, ratio: float = 4.0,
                    near: int = 4, far: int = 16) -> VesselGraph:
    """Fuse pairs of degree-3 junctions joined by a short edge into one degree-4 node.

    Thinning splits the overlap of two vessels crossing at angle phi into two
    junctions about ``w * cot(phi / 2)`` apart, where w is the vessel width.
    At each junction phi is measured between its two outer arms (straight-line
    fits over chain points ``near..far``); the larger of the two angles is used.
    The pair is fused when the connecting edge is shorter than ``ratio`` times
    ``w * cot(phi / 2)``. Shortest candidates go first and each node fuses at
    most once.

    The fused node sits at the cluster pixel nearest the average of the
    junction midpoint and the least-squares intersection of the four outer
    arm lines.
    """
    from .features import arc_length, edge_diameter

    if ratio <= 0:
        return graph
    g = graph
    nodes = {n.id: KeyNode(n.id, n.position, n.kind, n.degree, list(n.pixels), n.phi) for n in g.nodes}
    edges = {e.id: VesselEdge(e.id, e.u, e.v, list(e.chain), e.geometry, e.probability, e.label) for e in g.edges}
    incident: dict[int, list[int]] = {n: [] for n in nodes}
    for e in edges.values():
        incident[e.u].append(e.id)
        if e.v != e.u:
            incident[e.v].append(e.id)

    def width_of(k: int) -> float:
        e = edges[k]
        try:
            return edge_diameter(e.chain or [nodes[e.u].position], dmap, g.spacing)
        except IntegrityError:
            return 0.0

    candidates = []
    for e in g.edges:
        a, b = e.u, e.v
        if a == b or nodes[a].kind != BIFURCATION or nodes[b].kind != BIFURCATION:
            continue
        if g.degree(a) != 3 or g.degree(b) != 3:
            continue
        if sum(1 for f in g.incident(a) if f.other(a) == b) != 1:
            continue
        lines = []
        cot = []
        for end in (a, b):
            arms = [f for f in g.incident(end) if f.id != e.id]
            fits = [_arm_line(g.full_chain(f, end), near, far) for f in arms]
            lines += fits
            phi = math.acos(max(-1.0, min(1.0, float(np.dot(fits[0][1], fits[1][1])))))
            cot.append(1.0 / math.tan(phi / 2) if phi > 1e-9 else math.inf)
        others = [f.id for f in g.incident(a) + g.incident(b) if f.id != e.id]
        width = max(width_of(k) for k in others)
        scale = width * min(cot)
        length = arc_length(g.full_chain(e), g.spacing)
        if scale > 0 and length < ratio * scale:
            candidates.append((length, e.id, lines))
    merged: set[int] = set()
    for _, k, lines in sorted(candidates, key=lambda c: (c[0], c[1])):
        e = edges[k]
        if e.u in merged or e.v in merged:
            continue
        a, b = nodes[e.u], nodes[e.v]
        pix = sorted(set(a.pixels) | set(b.pixels) | set(e.chain))
        estimate = (np.asarray(a.position, dtype=float) + np.asarray(b.position, dtype=float)) / 2
        crossing = _line_intersection(lines)
        if crossing is not None:
            estimate = (estimate + crossing) / 2
        d = ((np.asarray(pix, dtype=float) - estimate) ** 2).sum(axis=1)
        a.position = pix[min(range(len(pix)), key=lambda i: (round(float(d[i]), 9), pix[i]))]
        a.pixels = pix
        merged.update((a.id, b.id))
        del edges[k]
        for j in incident[b.id]:
            if j == k:
                continue
            f = edges[j]
            if f.u == b.id:
                f.u = a.id
            if f.v == b.id:
                f.v = a.id
            incident[a.id].append(j)
        incident[a.id] = [j for j in incident[a.id] if j != k]
        del nodes[b.id]
        del incident[b.id]
    if not merged:
        return g
    prov = dict(g.provenance)
    prov["merged_crossings"] = len(merged) // 2
    return finalize_graph(list(nodes.values()), list(edges.values()), g.spacing, prov)


def check_partition(graph: VesselGraph, skel: np.ndarray) -> None:
    """Raise IntegrityError unless node pixels and chains partition the skeleton exactly."""
    seen: dict[Pixel, str] = {}
    for n in graph.nodes:
        for p in n.pixels:
            if p in seen:
                raise IntegrityError(f"pixel {p} in node {n.id} and {seen[p]}")
            seen[p] = f"node {n.id}"
    for e in graph.edges:
        for p in e.chain:
            if p in seen:
                raise IntegrityError(f"pixel {p} in edge {e.id} and {seen[p]}")
            seen[p] = f"edge {e.id}"
    sk = {(int(r), int(c)) for r, c in zip(*np.nonzero(skel))}
    if set(seen) != sk:
        raise IntegrityError(f"partition mismatch: {len(set(seen) ^ sk)} pixels differ")


# ---------------------------------------------------------------------------
# JSON document

def _float_or_none(x: Any) -> float | None:
    return None if x is None else float(x)


def serialize_graph(graph: VesselGraph) -> dict[str, Any]:
    nodes = []
    for n in graph.nodes:
        d: dict[str, Any] = {"id": n.id, "position": list(n.position), "kind": n.kind,
                             "degree": n.degree, "pixels": [list(p) for p in n.pixels]}
        if n.phi is not None:
            d["phi"] = [float(x) for x in np.asarray(n.phi, dtype=float)]
        nodes.append(d)
    edges = []
    for e in graph.edges:
        d = {"id": e.id, "endpoints": [e.u, e.v], "chain": [list(p) for p in e.chain]}
        if e.geometry is not None:
            d["geometry"] = {"turning_angle": float(e.geometry.turning_angle),
                             "arc_length": float(e.geometry.arc_length),
                             "diameter": float(e.geometry.diameter)}
        if e.probability is not None:
            d["probability"] = float(e.probability)
        if e.label is not None:
            d["label"] = e.label
        edges.append(d)
    return {"schema_version": SCHEMA_VERSION, "spacing": [float(x) for x in graph.spacing],
            "provenance": graph.provenance, "nodes": nodes, "edges": edges}


def _need(obj: dict, key: str, where: str) -> Any:
    if not isinstance(obj, dict) or key not in obj:
        raise ParseError(f"{where}: missing required field '{key}'")
    return obj[key]


def _pixel(v: Any, where: str) -> Pixel:
    if not (isinstance(v, (list, tuple)) and len(v) == 2 and all(isinstance(x, int) for x in v)):
        raise ParseError(f"{where}: expected [row, col] integers, got {v!r}")
    return int(v[0]), int(v[1])


def deserialize_graph(doc: dict[str, Any] | str) -> VesselGraph:
    if isinstance(doc, str):
        try:
            doc = json.loads(doc)
        except json.JSONDecodeError as exc:
            raise ParseError(f"graph document: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    version = _need(doc, "schema_version", "graph document")
    if version != SCHEMA_VERSION:
        raise ParseError(f"graph document: unsupported schema_version {version!r}")
    spacing = tuple(float(x) for x in _need(doc, "spacing", "graph document"))
    nodes = []
    for i, nd in enumerate(_need(doc, "nodes", "graph document")):
        where = f"nodes[{i}]"
        kind = _need(nd, "kind", where)
        if kind not in NODE_KINDS:
            raise ParseError(f"{where}.kind: unknown kind {kind!r}")
        phi = nd.get("phi")
        nodes.append(KeyNode(
            id=int(_need(nd, "id", where)),
            position=_pixel(_need(nd, "position", where), f"{where}.position"),
            kind=kind,
            degree=int(_need(nd, "degree", where)),
            pixels=[_pixel(p, f"{where}.pixels[{j}]") for j, p in enumerate(_need(nd, "pixels", where))],
            phi=None if phi is None else np.asarray(phi, dtype=float),
        ))
    edges = []
    for i, ed in enumerate(_need(doc, "edges", "graph document")):
        where = f"edges[{i}]"
        ends = _need(ed, "endpoints", where)
        if not (isinstance(ends, list) and len(ends) == 2):
            raise ParseError(f"{where}.endpoints: expected two node ids")
        geo = ed.get("geometry")
        geometry = None
        if geo is not None:
            geometry = EdgeGeometry(float(_need(geo, "turning_angle", f"{where}.geometry")),
                                    float(_need(geo, "arc_length", f"{where}.geometry")),
                                    float(_need(geo, "diameter", f"{where}.geometry")))
        label = ed.get("label")
        if label not in (None, TRAVERSABLE, NON_TRAVERSABLE):
            raise ParseError(f"{where}.label: unknown label {label!r}")
        edges.append(VesselEdge(
            id=int(_need(ed, "id", where)), u=int(ends[0]), v=int(ends[1]),
            chain=[_pixel(p, f"{where}.chain[{j}]") for j, p in enumerate(_need(ed, "chain", where))],
            geometry=geometry, probability=_float_or_none(ed.get("probability")), label=label,
        ))
    try:
        return VesselGraph(nodes, edges, spacing=spacing, provenance=dict(doc.get("provenance") or {}))
    except IntegrityError as exc:
        raise ParseError(f"graph document: {exc}") from exc


def dump_graph(graph: VesselGraph, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(serialize_graph(graph), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_graph(path) -> VesselGraph:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return deserialize_graph(text)


def graphs_equal(a: VesselGraph, b: VesselGraph) -> bool:
    return json.dumps(serialize_graph(a), sort_keys=True) == json.dumps(serialize_graph(b), sort_keys=True)


def iter_labeled_edges(graph: VesselGraph) -> Iterable[VesselEdge]:
    return (e for e in graph.edges if e.label is not None)
