"""Route selection on a scored vessel graph, plus the two reference planners.

Costs are ``-log p`` per edge with optional additive curvature and
thin-vessel priors. The least-cost search breaks exact cost ties by the
lexicographic order of the node-id sequence (then edge ids), so results are
fully reproducible.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .errors import IntegrityError, InvalidInput, NoPathError, ParseError
from .features import direction_at
from .vessel_graph import VesselGraph

PROB_MIN = 1e-6
PROB_MAX = 1.0 - 1e-6

PROPOSED = "proposed"
SHORTEST = "shortest"
HEURISTIC = "heuristic"
PLANNERS = (PROPOSED, SHORTEST, HEURISTIC)


@dataclass(frozen=True)
class PlanRequest:
    source: int
    target: int
    lambda_theta: float = 0.0
    lambda_d: float = 0.0

    def check(self, graph: VesselGraph) -> None:
        if self.source == self.target:
            raise InvalidInput("source and target must differ")
        for nid in (self.source, self.target):
            graph.node(nid)  # raises InvalidInput for unknown ids
        if self.lambda_theta < 0 or self.lambda_d < 0:
            raise InvalidInput("prior weights must be nonnegative")


@dataclass
class PlanResult:
    nodes: list[int]
    edges: list[int]
    probabilities: list[float | None]
    cost: float
    polyline: list[tuple[float, float]] = field(default_factory=list)
    planner: str = PROPOSED

    def to_dict(self) -> dict[str, Any]:
        return {
            "planner": self.planner,
            "nodes": list(self.nodes),
            "edges": list(self.edges),
            "probabilities": [None if p is None else float(p) for p in self.probabilities],
            "cost": float(self.cost),
            "polyline": [[float(r), float(c)] for r, c in self.polyline],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "PlanResult":
        try:
            return cls(nodes=[int(x) for x in d["nodes"]], edges=[int(x) for x in d["edges"]],
                       probabilities=[None if p is None else float(p) for p in d["probabilities"]],
                       cost=float(d["cost"]), polyline=[(float(r), float(c)) for r, c in d["polyline"]],
                       planner=str(d["planner"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"plan document: {exc}") from exc


def dump_plan(result: PlanResult, path: str | Path) -> None:
    Path(path).write_text(json.dumps(result.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_plan(path: str | Path) -> PlanResult:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc.msg})") from exc
    return PlanResult.from_dict(doc)


def clamp_probability(p: float) -> float:
    return float(min(max(p, PROB_MIN), PROB_MAX))


def edge_costs(graph: VesselGraph, lambda_theta: float = 0.0, lambda_d: float = 0.0) -> dict[int, float]:
    """``-log p + lambda_theta * theta + lambda_d / d`` for every edge."""
    costs = {}
    for e in graph.edges:
        if e.probability is None:
            raise IntegrityError(f"edge {e.id} has no probability")
        w = -math.log(clamp_probability(e.probability))
        if lambda_theta or lambda_d:
            if e.geometry is None:
                raise IntegrityError(f"edge {e.id} has no geometry for the prior terms")
            w += lambda_theta * e.geometry.turning_angle
            if lambda_d:
                w += lambda_d / max(e.geometry.diameter, 1e-12)
        costs[e.id] = w
    return costs


def least_cost_path(graph: VesselGraph, source: int, target: int,
                    cost: dict[int, float]) -> tuple[list[int], list[int], float]:
    """Dijkstra over positive edge costs with lexicographic tie-breaking.

    Labels are compared as ``(cost, node sequence, edge sequence)``; with
    positive costs no settled label is a prefix of a competing one, so the
    comparison is consistent with path extension.
    """
    if any(c <= 0 or not math.isfinite(c) for c in cost.values()):
        raise IntegrityError("edge costs must be finite and positive")
    best: dict[int, tuple[float, tuple[int, ...], tuple[int, ...]]] = {source: (0.0, (source,), ())}
    heap = [(0.0, (source,), ())]
    done: set[int] = set()
    while heap:
        c, nodes, edges = heapq.heappop(heap)
        u = nodes[-1]
        if u in done:
            continue
        done.add(u)
        if u == target:
            return list(nodes), list(edges), c
        for e in graph.incident(u):
            v = e.other(u)
            if v in done or e.u == e.v:
                continue
            label = (c + cost[e.id], nodes + (v,), edges + (e.id,))
            if v not in best or label < best[v]:
                best[v] = label
                heapq.heappush(heap, label)
    raise NoPathError(f"no path from node {source} to node {target}")


def _probabilities(graph: VesselGraph, edges: list[int]) -> list[float | None]:
    return [graph.edge(k).probability for k in edges]


def plan(graph: VesselGraph, request: PlanRequest, smooth: bool = True) -> PlanResult:
    """Most probable simple path from source to target (priors add to the cost)."""
    request.check(graph)
    cost = edge_costs(graph, request.lambda_theta, request.lambda_d)
    nodes, edges, total = least_cost_path(graph, request.source, request.target, cost)
    res = PlanResult(nodes, edges, _probabilities(graph, edges), total, planner=PROPOSED)
    if smooth:
        res.polyline = smooth_path(graph, res)
    return res


def shortest_path_baseline(graph: VesselGraph, request: PlanRequest, smooth: bool = True) -> PlanResult:
    """Least total arc length, ignoring probabilities."""
    request.check(graph)
    cost = {}
    for e in graph.edges:
        if e.geometry is None:
            raise IntegrityError(f"edge {e.id} has no arc length")
        cost[e.id] = e.geometry.arc_length
    nodes, edges, total = least_cost_path(graph, request.source, request.target, cost)
    res = PlanResult(nodes, edges, _probabilities(graph, edges), total, planner=SHORTEST)
    if smooth:
        res.polyline = smooth_path(graph, res)
    return res


def _angle(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return 0.0
    return float(math.acos(max(-1.0, min(1.0, float(np.dot(u, v) / (nu * nv))))))


def continuation_score(graph: VesselGraph, node: int, e_in: int, e_out: int,
                       angle_weight: float = 1.0, diameter_weight: float = 0.5) -> float:
    """Direction change at ``node`` plus relative diameter mismatch between two incident edges."""
    a, b = graph.edge(e_in), graph.edge(e_out)
    if a.geometry is None or b.geometry is None:
        raise IntegrityError("heuristic planner needs edge geometry")
    heading_in = -direction_at(graph, a, node)
    heading_out = direction_at(graph, b, node)
    d_in, d_out = a.geometry.diameter, b.geometry.diameter
    mismatch = abs(d_in - d_out) / max(d_in, d_out) if max(d_in, d_out) > 0 else 0.0
    return angle_weight * _angle(heading_in, heading_out) + diameter_weight * mismatch


def heuristic_baseline(graph: VesselGraph, request: PlanRequest, smooth: bool = True,
                       score: Callable[..., float] = continuation_score) -> PlanResult:
    """Greedy depth-first walk preferring the smoothest, best-matched continuation.

    At the source every incident edge scores 0 and edge id decides. A dead end
    pops back to the previous node and tries its next-best edge; a node is
    entered at most once.
    """
    request.check(graph)
    for e in graph.edges:
        if e.geometry is None:
            raise IntegrityError(f"edge {e.id} has no geometry")
    visited = {request.source}

    def options(node: int, e_in: int | None) -> list[tuple[float, int, int]]:
        out = []
        for e in graph.incident(node):
            v = e.other(node)
            if v in visited or e.u == e.v:
                continue
            s = 0.0 if e_in is None else score(graph, node, e_in, e.id)
            out.append((s, e.id, v))
        out.sort()
        return out

    nodes = [request.source]
    edges: list[int] = []
    stack = [options(request.source, None)]
    while stack:
        if nodes[-1] == request.target:
            res = PlanResult(nodes, edges, _probabilities(graph, edges),
                             float(sum(score(graph, n, a, b) for n, a, b in
                                       zip(nodes[1:-1], edges[:-1], edges[1:]))),
                             planner=HEURISTIC)
            if smooth:
                res.polyline = smooth_path(graph, res)
            return res
        choices = stack[-1]
        while choices and choices[0][2] in visited:
            choices.pop(0)
        if not choices:
            stack.pop()
            nodes.pop()
            if edges:
                edges.pop()
            continue
        _, eid, v = choices.pop(0)
        visited.add(v)
        nodes.append(v)
        edges.append(eid)
        stack.append(options(v, eid))
    raise NoPathError(f"greedy walk from node {request.source} never reached node {request.target}")


def path_chain(graph: VesselGraph, nodes: list[int], edges: list[int]) -> tuple[np.ndarray, list[int]]:
    """Concatenated pixel chain of a path and the indices of its key-node positions."""
    pts: list[tuple[int, int]] = [graph.node(nodes[0]).position]
    pins = [0]
    for start, eid in zip(nodes[:-1], edges):
        seg = graph.full_chain(graph.edge(eid), start)
        for p in seg[1:]:
            if p != pts[-1]:
                pts.append(p)
        pins.append(len(pts) - 1)
    return np.asarray(pts, dtype=float), pins


def _moving_average(pts: np.ndarray, pinned: np.ndarray, half: int) -> np.ndarray:
    n = len(pts)
    out = pts.copy()
    for i in range(n):
        if pinned[i]:
            continue
        h = min(half, i, n - 1 - i)
        out[i] = pts[i - h:i + h + 1].mean(axis=0)
    return out


def smooth_path(graph: VesselGraph, result: PlanResult, window: int = 5, passes: int = 2,
                max_shift: float = 2.0) -> list[tuple[float, float]]:
    """Moving-average smoothing of the path's pixel chain with key nodes pinned.

    Windows shrink symmetrically near the chain ends so collinear runs stay
    put. Each point is kept within ``max_shift`` pixels (Chebyshev) of its
    original position.
    """
    pts, pins = path_chain(graph, result.nodes, result.edges)
    if len(pts) < window:
        return [(float(r), float(c)) for r, c in pts]
    pinned = np.zeros(len(pts), dtype=bool)
    pinned[pins] = True
    out = pts
    for _ in range(passes):
        out = _moving_average(out, pinned, window // 2)
    out = np.clip(out, pts - max_shift, pts + max_shift)
    return [(float(r), float(c)) for r, c in out]


def run_planner(name: str, graph: VesselGraph, request: PlanRequest, smooth: bool = True) -> PlanResult:
    if name == PROPOSED:
        return plan(graph, request, smooth)
    if name == SHORTEST:
        return shortest_path_baseline(graph, request, smooth)
    if name == HEURISTIC:
        return heuristic_baseline(graph, request, smooth)
    raise InvalidInput(f"unknown planner {name!r}; choose from {', '.join(PLANNERS)}")
