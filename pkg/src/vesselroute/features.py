"""Edge geometry, node aggregation, multi-scale patch descriptors and node feature vectors."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import IntegrityError, InvalidInput, LookupFailure, ParseError
from .raster import Spacing, check_spacing
from .vessel_graph import EdgeGeometry, Pixel, VesselGraph

__all__ = [
    "EdgeGeometry", "PatchDescriptorSpec", "NodeFeatures", "turning_angle", "arc_length",
    "edge_diameter", "edge_geometry", "annotate_geometry", "aggregate_node", "extract_patches",
    "patch_descriptor", "assemble_phi", "load_sidecar", "SCALES",
]

SCALES = (32, 64, 96)
BUILTIN_DIM = 12  # four raw-intensity statistics plus an 8-bin orientation histogram


@dataclass(frozen=True)
class PatchDescriptorSpec:
    """``builtin`` handcrafted descriptor or ``external`` precomputed embeddings.

    For ``external``, ``vectors`` maps node id to the concatenated per-scale
    embedding and ``dims`` gives the per-scale lengths.
    """

    kind: str = "builtin"
    dims: tuple[int, ...] = (BUILTIN_DIM,) * len(SCALES)
    vectors: dict[int, np.ndarray] = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        if self.kind not in ("builtin", "external"):
            raise InvalidInput(f"unknown descriptor kind {self.kind!r}")
        if self.kind == "builtin" and tuple(self.dims) != (BUILTIN_DIM,) * len(SCALES):
            raise InvalidInput(f"builtin descriptor has {BUILTIN_DIM} values per scale")

    @property
    def total_dim(self) -> int:
        return int(sum(self.dims))


@dataclass
class NodeFeatures:
    theta: float
    diameter: float
    length: float
    patch_embeddings: np.ndarray
    phi: np.ndarray


def _as_points(chain: Sequence[Pixel]) -> np.ndarray:
    pts = np.asarray(chain, dtype=float)
    if pts.size == 0:
        raise InvalidInput("chain is empty")
    return pts.reshape(-1, 2)


def turning_angle(chain: Sequence[Pixel]) -> float:
    """Mean angle between successive tangent steps; 0 for chains under three pixels."""
    pts = _as_points(chain)
    if len(pts) < 3:
        return 0.0
    u = np.diff(pts, axis=0)
    a, b = u[:-1], u[1:]
    cos = (a * b).sum(axis=1) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
    return float(np.mean(np.arccos(np.clip(cos, -1.0, 1.0))))


def arc_length(chain: Sequence[Pixel], spacing: Spacing = (1.0, 1.0)) -> float:
    """Sum of step lengths with column steps scaled by s_x and row steps by s_y."""
    sx, sy = check_spacing(spacing)
    pts = _as_points(chain)
    if len(pts) < 2:
        return 0.0
    u = np.diff(pts, axis=0)
    return float(np.hypot(u[:, 1] * sx, u[:, 0] * sy).sum())


def edge_diameter(chain: Sequence[Pixel], dmap: np.ndarray, spacing: Spacing = (1.0, 1.0)) -> float:
    """Twice the mean radius along the chain, radius = D(p) - half a pixel, floored at half a pixel."""
    sx, sy = check_spacing(spacing)
    half = 0.5 * min(sx, sy)
    pts = _as_points(chain).astype(int)
    d = np.asarray(dmap)[pts[:, 0], pts[:, 1]]
    if np.any(d <= 0):
        bad = pts[int(np.argmax(d <= 0))]
        raise IntegrityError(f"chain pixel {tuple(bad)} lies on background")
    r = np.maximum(d - half, half)
    return float(2.0 * r.mean())


def edge_geometry(graph: VesselGraph, edge, dmap: np.ndarray) -> EdgeGeometry:
    """Geometry for one graph edge.

    Arc length runs node position to node position; turning angle and
    diameter use the traced chain alone because junction clusters distort
    both. An empty chain falls back to the two node positions.
    """
    full = graph.full_chain(edge)
    chain = edge.chain if edge.chain else full
    return EdgeGeometry(turning_angle=turning_angle(chain),
                        arc_length=arc_length(full, graph.spacing),
                        diameter=edge_diameter(chain, dmap, graph.spacing))


def annotate_geometry(graph: VesselGraph, dmap: np.ndarray) -> VesselGraph:
    """Fill EdgeGeometry on every edge (in place) and return the graph."""
    for e in graph.edges:
        e.geometry = edge_geometry(graph, e, dmap)
    return graph


def aggregate_node(graph: VesselGraph, node_id: int) -> tuple[float, float, float]:
    """(mean turning angle, max diameter, mean arc length) over incident edges."""
    thetas, ds, ls = [], [], []
    for e in graph.incident(node_id):
        if e.geometry is None:
            raise InvalidInput(f"edge {e.id} has no geometry")
        times = 2 if e.u == e.v else 1
        thetas += [e.geometry.turning_angle] * times
        ds += [e.geometry.diameter] * times
        ls += [e.geometry.arc_length] * times
    if not thetas:
        raise InvalidInput(f"node {node_id} is isolated")
    return float(np.mean(thetas)), float(max(ds)), float(np.mean(ls))


@dataclass
class Patch:
    scale: int
    raw: np.ndarray
    normalized: np.ndarray


def extract_patches(image: np.ndarray, center: Pixel, scales: Sequence[int] = SCALES) -> list[Patch]:
    """s x s crops centred on ``center``, edge-replicated past the border, z-scored."""
    img = np.asarray(image, dtype=float)
    r, c = int(center[0]), int(center[1])
    out = []
    for s in scales:
        top, left = r - s // 2, c - s // 2
        rows = np.clip(np.arange(top, top + s), 0, img.shape[0] - 1)
        cols = np.clip(np.arange(left, left + s), 0, img.shape[1] - 1)
        raw = img[np.ix_(rows, cols)]
        sd = raw.std()
        norm = (raw - raw.mean()) / sd if sd > 1e-12 else np.zeros_like(raw)
        out.append(Patch(s, raw, norm))
    return out


def _orientation_histogram(norm: np.ndarray, bins: int = 8) -> np.ndarray:
    # Angle 0 points along increasing column; bin k is centred on k * 45 degrees.
    g_row, g_col = np.gradient(norm)
    mag = np.hypot(g_row, g_col)
    ang = np.mod(np.arctan2(g_row, g_col), 2 * np.pi)
    idx = np.floor((ang + np.pi / bins) / (2 * np.pi / bins)).astype(int) % bins
    hist = np.bincount(idx.ravel(), weights=mag.ravel(), minlength=bins)
    total = hist.sum()
    return hist / total if total > 1e-12 else np.zeros(bins)


def patch_descriptor(patch: Patch, spec: PatchDescriptorSpec | None = None, node_id: int | None = None,
                     scale_index: int | None = None) -> np.ndarray:
    spec = spec or PatchDescriptorSpec()
    if spec.kind == "external":
        if node_id is None or node_id not in spec.vectors:
            raise LookupFailure(f"no external embedding for node {node_id}")
        vec = spec.vectors[node_id]
        k = SCALES.index(patch.scale) if scale_index is None else scale_index
        start = sum(spec.dims[:k])
        return np.asarray(vec[start:start + spec.dims[k]], dtype=float)
    raw = patch.raw
    lo, hi = raw.min(), raw.max()
    var = raw.var() if hi > lo else 0.0  # exact zero for flat patches
    stats = np.array([raw.mean(), var, lo, hi])
    return np.concatenate([stats, _orientation_histogram(patch.normalized)])


def load_sidecar(path: str | Path) -> PatchDescriptorSpec:
    """Read an external-embedding sidecar: {"header": {"scales", "dims"}, "vectors": {id: [...]}}."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        header = doc["header"]
        dims = tuple(int(d) for d in header["dims"])
        scales = tuple(int(s) for s in header.get("scales", SCALES))
        raw = doc["vectors"]
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: malformed embedding sidecar ({exc})") from exc
    if scales != SCALES or len(dims) != len(SCALES):
        raise ParseError(f"{path}: header scales must be {list(SCALES)}")
    vectors = {}
    for key, vec in raw.items():
        v = np.asarray(vec, dtype=float)
        if v.shape != (sum(dims),):
            raise ParseError(f"{path}: vector for node {key} has length {v.size}, expected {sum(dims)}")
        vectors[int(key)] = v
    return PatchDescriptorSpec(kind="external", dims=dims, vectors=vectors)


def _standardize(col: np.ndarray) -> np.ndarray:
    sd = col.std()
    if col.size < 2 or sd < 1e-12:
        return np.zeros_like(col)
    return (col - col.mean()) / sd


def assemble_phi(graph: VesselGraph, image: np.ndarray, spec: PatchDescriptorSpec | None = None) -> np.ndarray:
    """Build phi for every node, store it on the nodes, and return the (N, D) matrix.

    Geometric columns are standardized within the graph; isolated nodes get
    zeros there.
    """
    spec = spec or PatchDescriptorSpec()
    n = len(graph.nodes)
    geo = np.zeros((n, 3))
    has = np.zeros(n, dtype=bool)
    for k, node in enumerate(graph.nodes):
        if graph.degree(node.id) > 0:
            geo[k] = aggregate_node(graph, node.id)
            has[k] = True
    if has.any():
        for j in range(3):
            geo[has, j] = _standardize(geo[has, j])
    rows = []
    for k, node in enumerate(graph.nodes):
        parts = [patch_descriptor(p, spec, node.id, i)
                 for i, p in enumerate(extract_patches(image, node.position))]
        rows.append(np.concatenate([geo[k], *parts]))
    dims = {r.size for r in rows}
    if len(dims) > 1:
        raise IntegrityError(f"feature dimensions differ across nodes: {sorted(dims)}")
    phi = np.vstack(rows) if rows else np.zeros((0, 3 + spec.total_dim))
    for k, node in enumerate(graph.nodes):
        node.phi = phi[k].copy()
    return phi


def node_features(graph: VesselGraph, node_id: int, image: np.ndarray,
                  spec: PatchDescriptorSpec | None = None) -> NodeFeatures:
    """Unstandardized per-node view; ``phi`` comes from the node if already assembled."""
    theta, d, l = aggregate_node(graph, node_id)
    node = graph.node(node_id)
    emb = np.concatenate([patch_descriptor(p, spec, node_id, i)
                          for i, p in enumerate(extract_patches(image, node.position))])
    phi = node.phi if node.phi is not None else np.concatenate([[theta, d, l], emb])
    return NodeFeatures(theta, d, l, emb, phi)


def direction_at(graph: VesselGraph, edge, node_id: int, near: int = 2, far: int = 14) -> np.ndarray:
    """Unit tangent of ``edge`` leaving ``node_id``.

    Measured between chain points ``near`` and ``far`` of the traced chain,
    which starts where the edge leaves the junction cluster, so a merged
    crossing whose node sits well inside the overlap does not skew the angle.
    Short chains fall back to the node-to-node chain.
    """
    pts = np.asarray(edge.oriented_chain(node_id), dtype=float)
    if len(pts) < near + 2:
        pts = np.asarray(graph.full_chain(edge, node_id), dtype=float)
    if len(pts) < 2:
        return np.zeros(2)
    a = pts[min(near, len(pts) - 2)]
    b = pts[min(far, len(pts) - 1)]
    v = b - a
    if not np.any(v):
        v = pts[-1] - pts[0]
    norm = math.hypot(*v)
    return v / norm if norm > 0 else np.zeros(2)
