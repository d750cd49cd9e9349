"""Scoring planners against phantom ground truth.

An extracted graph is matched to the truth graph node by node (same degree,
positions within a tolerance) and edge by edge. A plan on the extracted
graph is then judged on the truth graph:

* arrival: the path ends at the target and uses only traversable edges;
* disambiguation: at every crossing the path passes through, it leaves along
  the edge that continues the vessel it came in on.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from .errors import EvaluationError, NoPathError, VesselRouteError
from .features import PatchDescriptorSpec
from .gat import GatModel, score_edges
from .parallel import ordered_map
from .phantom import PhantomScene
from .pipeline import ExtractionConfig, extract_graph, graph_features
from .planner import HEURISTIC, PLANNERS, PROPOSED, SHORTEST, PlanRequest, PlanResult, run_planner
from .vessel_graph import TRAVERSABLE, VesselGraph

log = logging.getLogger(__name__)

PLANNER_TITLES = {
    SHORTEST: "Shortest path (arc length)",
    HEURISTIC: "Greedy continuation heuristic",
    PROPOSED: "Learned traversability (GAT)",
}


@dataclass
class GraphMatch:
    """``nodes`` maps truth node id to extracted node id; ``edges`` maps extracted edge id to truth edge id."""

    nodes: dict[int, int]
    edges: dict[int, int]

    def truth_node(self, extracted: int) -> int:
        inv = {v: k for k, v in self.nodes.items()}
        return inv[extracted]


def _chain_distance(a: np.ndarray, tree: cKDTree) -> float:
    return float(tree.query(a)[0].mean()) if len(a) else 0.0


def match_graphs(truth: VesselGraph, extracted: VesselGraph, tol: float = 3.0) -> GraphMatch:
    """Degree- and position-preserving isomorphism between two vessel graphs.

    Nodes are paired by a minimum-distance assignment restricted to equal
    degree and distance at most ``tol`` (pixels). Parallel edges between the
    same node pair are paired by mean chain distance.
    """
    if len(truth.nodes) != len(extracted.nodes):
        raise EvaluationError(f"node counts differ: truth {len(truth.nodes)}, extracted {len(extracted.nodes)}")
    if len(truth.edges) != len(extracted.edges):
        raise EvaluationError(f"edge counts differ: truth {len(truth.edges)}, extracted {len(extracted.edges)}")
    if not truth.nodes:
        return GraphMatch({}, {})
    tpos = np.array([n.position for n in truth.nodes], dtype=float)
    epos = np.array([n.position for n in extracted.nodes], dtype=float)
    dist = np.linalg.norm(tpos[:, None, :] - epos[None, :, :], axis=2)
    tdeg = np.array([truth.degree(n.id) for n in truth.nodes])
    edeg = np.array([extracted.degree(n.id) for n in extracted.nodes])
    ok = (dist <= tol) & (tdeg[:, None] == edeg[None, :])
    big = 1e6
    rows, cols = linear_sum_assignment(np.where(ok, dist, big))
    for r, c in zip(rows, cols):
        if not ok[r, c]:
            t = truth.nodes[r]
            raise EvaluationError(f"truth node {t.id} at {t.position} (degree {tdeg[r]}) has no extracted "
                                  f"node of equal degree within {tol} px")
    nodes = {truth.nodes[r].id: extracted.nodes[c].id for r, c in zip(rows, cols)}

    groups: dict[tuple[int, int], list[int]] = defaultdict(list)
    for e in truth.edges:
        key = tuple(sorted((nodes[e.u], nodes[e.v])))
        groups[key].append(e.id)
    egroups: dict[tuple[int, int], list[int]] = defaultdict(list)
    for e in extracted.edges:
        egroups[tuple(sorted((e.u, e.v)))].append(e.id)
    if Counter({k: len(v) for k, v in groups.items()}) != Counter({k: len(v) for k, v in egroups.items()}):
        raise EvaluationError("edge sets differ after node matching")
    edges: dict[int, int] = {}
    for key, tids in groups.items():
        eids = egroups[key]
        if len(tids) == 1:
            edges[eids[0]] = tids[0]
            continue
        cost = np.zeros((len(eids), len(tids)))
        for j, tid in enumerate(tids):
            tree = cKDTree(np.asarray(truth.full_chain(truth.edge(tid)), dtype=float))
            for i, eid in enumerate(eids):
                cost[i, j] = _chain_distance(np.asarray(extracted.edge(eid).chain, dtype=float), tree)
        r, c = linear_sum_assignment(cost)
        edges.update({eids[i]: tids[j] for i, j in zip(r, c)})
    return GraphMatch(nodes, edges)


def transfer_labels(truth: VesselGraph, extracted: VesselGraph, max_distance: float = 3.0) -> VesselGraph:
    """Copy of ``extracted`` whose edges take the majority label of nearby truth chains.

    Each chain pixel of an extracted edge votes with the label of the nearest
    truth chain pixel within ``max_distance``; edges with no votes stay
    unlabeled. Works without a full isomorphism, which makes it usable for
    training on imperfect extractions.
    """
    pts, labels = [], []
    for e in truth.edges:
        chain = truth.full_chain(e)
        pts.extend(chain)
        labels.extend([e.label] * len(chain))
    out = extracted.copy()
    if not pts:
        for e in out.edges:
            e.label = None
        return out
    tree = cKDTree(np.asarray(pts, dtype=float))
    for e in out.edges:
        chain = e.chain or out.full_chain(e)
        d, k = tree.query(np.asarray(chain, dtype=float))
        votes = Counter(labels[j] for dj, j in zip(np.atleast_1d(d), np.atleast_1d(k)) if dj <= max_distance)
        if votes:
            best = max(votes.items(), key=lambda kv: (kv[1], kv[0] == TRAVERSABLE))
            e.label = best[0]
        else:
            e.label = None
    return out


def _training_sample(index: int, scene: PhantomScene, extraction: ExtractionConfig | None,
                     descriptor: PatchDescriptorSpec | None) -> tuple[VesselGraph, np.ndarray]:
    try:
        graph, phi = prepare_scene(scene, extraction, descriptor)
    except VesselRouteError as exc:
        raise type(exc)(f"scene {index} (seed {scene.seed}): {exc}") from exc
    return transfer_labels(scene.truth_graph, graph), phi


def training_samples(scenes: Sequence[PhantomScene], extraction: ExtractionConfig | None = None,
                     descriptor: PatchDescriptorSpec | None = None,
                     jobs: int = 1) -> list[tuple[VesselGraph, np.ndarray]]:
    """Extracted graphs labeled from truth, with node features, one per scene."""
    items = [(i, sc, extraction, descriptor) for i, sc in enumerate(scenes)]
    return ordered_map(_training_sample, items, jobs)


@dataclass(frozen=True)
class Verdict:
    disambiguation_ok: bool
    arrival_ok: bool


def judge_scene(scene: PhantomScene, graph: VesselGraph, result: PlanResult,
                match: GraphMatch | None = None) -> Verdict:
    """Judge a plan made on ``graph`` (extracted from the scene) against the scene truth."""
    match = match or match_graphs(scene.truth_graph, graph)
    inv = {v: k for k, v in match.nodes.items()}
    try:
        tnodes = [inv[n] for n in result.nodes]
        tedges = [match.edges[e] for e in result.edges]
    except KeyError as exc:
        raise EvaluationError(f"plan refers to unmatched element {exc}") from exc
    truth = scene.truth_graph
    arrival = (bool(tnodes) and tnodes[-1] == scene.target
               and all(truth.edge(e).label == TRAVERSABLE for e in tedges))
    pairing = {c.node: set(c.pairing) for c in scene.crossings}
    disamb = True
    for i in range(1, len(tnodes) - 1):
        want = pairing.get(tnodes[i])
        if want is not None and {tedges[i - 1], tedges[i]} != want:
            disamb = False
            break
    return Verdict(disambiguation_ok=disamb, arrival_ok=arrival)


# ---------------------------------------------------------------------------
# whole-suite comparison

@dataclass
class SceneOutcome:
    index: int
    seed: int
    excluded: str | None = None
    verdicts: dict[str, Verdict] = field(default_factory=dict)
    paths: dict[str, list[int]] = field(default_factory=dict)
    errors: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "index": self.index,
            "seed": self.seed,
            "excluded": self.excluded,
            "planners": {name: {"disambiguation": v.disambiguation_ok, "arrival": v.arrival_ok,
                                "path": self.paths.get(name, []), "error": self.errors.get(name)}
                         for name, v in sorted(self.verdicts.items())},
        }


@dataclass
class EvalReport:
    planners: tuple[str, ...]
    scenes: list[SceneOutcome]

    @property
    def n_scenes(self) -> int:
        return len(self.scenes)

    @property
    def excluded(self) -> list[SceneOutcome]:
        return [s for s in self.scenes if s.excluded is not None]

    @property
    def judged(self) -> list[SceneOutcome]:
        return [s for s in self.scenes if s.excluded is None]

    def successes(self, planner: str, metric: str) -> int:
        attr = {"disambiguation": "disambiguation_ok", "arrival": "arrival_ok"}[metric]
        return sum(getattr(s.verdicts[planner], attr) for s in self.judged)

    def rate(self, planner: str, metric: str) -> float:
        n = len(self.judged)
        return self.successes(planner, metric) / n if n else float("nan")

    def rows(self) -> list[dict[str, Any]]:
        n = len(self.judged)
        return [{"planner": p, "metric": m, "successes": self.successes(p, m), "total": n,
                 "rate": round(self.rate(p, m), 6) if n else float("nan")}
                for p in self.planners for m in ("disambiguation", "arrival")]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=["planner", "metric", "successes", "total", "rate"], lineterminator="\n")
        w.writeheader()
        w.writerows(self.rows())
        return buf.getvalue()

    def to_dict(self) -> dict[str, Any]:
        return {"n_scenes": self.n_scenes, "n_excluded": len(self.excluded), "summary": self.rows(),
                "scenes": [s.to_dict() for s in self.scenes]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def table(self) -> str:
        n = len(self.judged)
        lines = [f"{'Method':<32} {'Disambiguation':>18} {'Target arrival':>18}"]
        for p in self.planners:
            cells = []
            for m in ("disambiguation", "arrival"):
                k = self.successes(p, m)
                cells.append(f"{k}/{n} ({100.0 * k / n:.1f}%)" if n else "n/a")
            lines.append(f"{PLANNER_TITLES.get(p, p):<32} {cells[0]:>18} {cells[1]:>18}")
        lines.append(f"excluded scenes: {len(self.excluded)} of {self.n_scenes}")
        for s in self.excluded:
            lines.append(f"  scene {s.index} (seed {s.seed}): {s.excluded}")
        return "\n".join(lines)

    def write(self, directory: str | Path, json_only: bool = False) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "report.json").write_text(self.to_json(), encoding="utf-8")
        if not json_only:
            (d / "report.csv").write_text(self.to_csv(), encoding="utf-8")


def prepare_scene(scene: PhantomScene, extraction: ExtractionConfig | None = None,
                  descriptor: PatchDescriptorSpec | None = None) -> tuple[VesselGraph, np.ndarray]:
    """Extracted graph with geometry, and its node features from the intensity image."""
    ext = extract_graph(scene.mask, extraction)
    phi = graph_features(ext.graph, scene.intensity, descriptor)
    return ext.graph, phi


def evaluate_scene(index: int, scene: PhantomScene, model: GatModel | None,
                   planners: Sequence[str] = PLANNERS, extraction: ExtractionConfig | None = None,
                   lambda_theta: float = 0.0, lambda_d: float = 0.0, tol: float = 3.0,
                   descriptor: PatchDescriptorSpec | None = None) -> SceneOutcome:
    out = SceneOutcome(index=index, seed=scene.seed)
    try:
        graph, phi = prepare_scene(scene, extraction, descriptor)
        match = match_graphs(scene.truth_graph, graph, tol)
        if model is not None:
            graph = score_edges(model, graph, phi).graph
    except VesselRouteError as exc:
        out.excluded = f"{type(exc).__name__}: {exc}"
        return out
    request = PlanRequest(match.nodes[scene.source], match.nodes[scene.target], lambda_theta, lambda_d)
    for name in planners:
        if name == PROPOSED and model is None:
            raise EvaluationError("the learned planner needs a model")
        try:
            res = run_planner(name, graph, request, smooth=False)
        except NoPathError as exc:
            out.verdicts[name] = Verdict(False, False)
            out.errors[name] = str(exc)
            continue
        out.paths[name] = list(res.nodes)
        out.verdicts[name] = judge_scene(scene, graph, res, match)
    return out


def run_comparison(scenes: Sequence[PhantomScene], model: GatModel | None,
                   planners: Sequence[str] = PLANNERS, extraction: ExtractionConfig | None = None,
                   lambda_theta: float = 0.0, lambda_d: float = 0.0, jobs: int = 1,
                   descriptor: PatchDescriptorSpec | None = None) -> EvalReport:
    """Run every planner on every scene; scenes that cannot be matched to truth are excluded.

    Results do not depend on ``jobs``.
    """
    items = [(i, sc, model, tuple(planners), extraction, lambda_theta, lambda_d, 3.0, descriptor)
             for i, sc in enumerate(scenes)]
    outcomes = ordered_map(evaluate_scene, items, jobs)
    for o in outcomes:
        if o.excluded:
            log.warning("scene %d excluded: %s", o.index, o.excluded)
    return EvalReport(tuple(planners), outcomes)
