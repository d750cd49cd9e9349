"""Command-line entry point: ``vesselroute <subcommand> ...``.

Settings come from built-in defaults, then a JSON config file (``--config``
or the ``VESSELROUTE_CONFIG`` environment variable), then explicit flags.

Exit status: 0 success, 1 domain failure (no path, generation or training
failure), 2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .errors import (EvaluationError, GenerationError, IntegrityError, InvalidInput, InvalidParameter, LoadError,
                     LookupFailure, NoPathError, ParseError, UnboundedDistance, VesselRouteError)

log = logging.getLogger("vesselroute")

CONFIG_ENV = "VESSELROUTE_CONFIG"
CONFIG_VERSION = 1

EXIT_OK = 0
EXIT_DOMAIN = 1
EXIT_USAGE = 2

_DOMAIN_ERRORS = (NoPathError, GenerationError, EvaluationError, InvalidInput, IntegrityError, UnboundedDistance)
_USAGE_ERRORS = (ParseError, LoadError, LookupFailure, InvalidParameter, OSError)


# ---------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class PipelineConfig:
    """Every tunable of the pipeline in one versioned document."""

    tau: float = 0.5
    close_kernel: int = 3
    min_branch: float | None = None
    merge_ratio: float = 4.0
    spacing: tuple[float, float] = (1.0, 1.0)
    descriptor: str = "builtin"
    hidden_dim: int = 16
    heads: tuple[int, ...] = (4, 4)
    negative_slope: float = 0.2
    learning_rate: float = 1e-2
    epochs: int = 500
    lambda_theta: float = 0.0
    lambda_d: float = 0.0
    seed: int = 0
    phantom: dict[str, Any] = field(default_factory=dict)

    def validate(self) -> "PipelineConfig":
        self.extraction().validate()
        self.gat().validate()
        self.phantom_config()
        if self.lambda_theta < 0 or self.lambda_d < 0:
            raise InvalidParameter("prior weights must be nonnegative")
        if self.descriptor != "builtin" and not Path(self.descriptor).suffix:
            raise InvalidParameter("descriptor must be 'builtin' or a sidecar JSON path")
        return self

    def extraction(self):
        from .pipeline import ExtractionConfig

        return ExtractionConfig(tau=self.tau, close_kernel=self.close_kernel, min_branch=self.min_branch,
                                merge_ratio=self.merge_ratio, spacing=tuple(self.spacing))

    def gat(self):
        from .gat import GatConfig

        return GatConfig(hidden_dim=self.hidden_dim, heads=tuple(self.heads), negative_slope=self.negative_slope,
                         learning_rate=self.learning_rate, epochs=self.epochs)

    def phantom_config(self):
        from .phantom import PhantomConfig

        return PhantomConfig.from_dict(self.phantom).validate()

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["spacing"] = list(self.spacing)
        d["heads"] = list(self.heads)
        return {"version": CONFIG_VERSION, **d}

    @classmethod
    def from_dict(cls, doc: dict[str, Any], base: "PipelineConfig | None" = None) -> "PipelineConfig":
        if not isinstance(doc, dict):
            raise ParseError("config must be a JSON object")
        doc = dict(doc)
        version = doc.pop("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ParseError(f"unsupported config version {version!r}")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ParseError(f"unknown config keys: {', '.join(unknown)}")
        if "spacing" in doc:
            doc["spacing"] = tuple(float(s) for s in doc["spacing"])
        if "heads" in doc:
            doc["heads"] = tuple(int(h) for h in doc["heads"])
        return replace(base or cls(), **doc)


def load_config(path: str | Path | None) -> PipelineConfig:
    """Defaults, overlaid with ``path`` or else the file named by the environment variable."""
    path = path or os.environ.get(CONFIG_ENV) or None
    if not path:
        return PipelineConfig()
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc.msg})") from exc
    try:
        return PipelineConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"{path}: {exc}") from exc


def _apply_flags(cfg: PipelineConfig, args: argparse.Namespace, names: Sequence[str]) -> PipelineConfig:
    changes = {n: getattr(args, n) for n in names if getattr(args, n, None) is not None}
    if "spacing" in changes:
        changes["spacing"] = tuple(changes["spacing"])
    if "heads" in changes:
        changes["heads"] = tuple(changes["heads"])
    return replace(cfg, **changes).validate()


# ---------------------------------------------------------------------------
# helpers

def _write_text(path: str | Path, text: str) -> None:
    p = Path(path)
    if p.parent and not p.parent.exists():
        p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(text, encoding="utf-8")


def _descriptor(cfg: PipelineConfig):
    from .features import PatchDescriptorSpec, load_sidecar

    return PatchDescriptorSpec() if cfg.descriptor == "builtin" else load_sidecar(cfg.descriptor)


def resolve_node(graph, spec: str) -> int:
    """A node id, or ``r,c`` snapped to the nearest key node (ties go to the lower id)."""
    text = spec.strip()
    if "," in text:
        try:
            r, c = (float(v) for v in text.split(","))
        except ValueError:
            raise InvalidParameter(f"cannot parse pixel coordinate {spec!r}; expected r,c") from None
        if not graph.nodes:
            raise InvalidInput("graph has no nodes")
        best = min(graph.nodes, key=lambda n: ((n.position[0] - r) ** 2 + (n.position[1] - c) ** 2, n.id))
        return best.id
    try:
        nid = int(text)
    except ValueError:
        raise InvalidParameter(f"cannot parse node {spec!r}; give an id or r,c") from None
    if nid not in {n.id for n in graph.nodes}:
        raise LookupFailure(f"no node with id {nid}; the graph has {len(graph.nodes)} nodes")
    return nid


def render_overlay(mask: np.ndarray, polyline: Sequence[tuple[float, float]], path: str | Path,
                   nodes: Sequence[tuple[int, int]] = ()) -> None:
    """8-bit overlay: background 0, vessel 96, planned path 255, path key nodes 176."""
    from PIL import Image, ImageDraw

    img = np.where(np.asarray(mask, dtype=bool), 96, 0).astype(np.uint8)
    im = Image.fromarray(img)
    draw = ImageDraw.Draw(im)
    pts = [(float(c), float(r)) for r, c in polyline]
    if len(pts) >= 2:
        draw.line(pts, fill=255, width=1)
    elif pts:
        draw.point(pts, fill=255)
    for r, c in nodes:
        draw.rectangle([c - 1, r - 1, c + 1, r + 1], fill=176)
    im.save(path, format="PNG", optimize=False, compress_level=6)


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_phantom(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    from .phantom import PhantomConfig, generate_suite, write_suite

    pc = cfg.phantom_config()
    overrides = {k: v for k, v in (("size", args.size), ("n_crossings", args.crossings),
                                   ("shortcut_fraction", args.shortcut_fraction),
                                   ("narrow_fraction", args.narrow_fraction)) if v is not None}
    pc = PhantomConfig.from_dict({**pc.to_dict(), **overrides}).validate()
    seed = cfg.seed if args.seed is None else args.seed
    scenes, manifest = generate_suite(seed, args.scenes, pc, jobs=args.jobs)
    path = write_suite(scenes, manifest, args.out)
    if not args.quiet:
        print(f"wrote {len(scenes)} scenes to {args.out}")
        print(f"shortcut scenes: {sum(s.shortcut for s in scenes)}; "
              f"false route shorter: {manifest['false_route_shorter_fraction']:.3f}")
        print(f"manifest {path} sha256 {manifest['hash']}")
    return EXIT_OK


def cmd_graph(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    from .pipeline import extract_graph
    from .raster import load_image
    from .vessel_graph import load_graph, serialize_graph

    if args.dump:
        graph = load_graph(args.dump)
    else:
        if not args.mask:
            raise InvalidParameter("give a mask image or --dump GRAPH")
        graph = extract_graph(load_image(args.mask), cfg.extraction()).graph
    text = json.dumps(serialize_graph(graph), sort_keys=True, indent=1) + "\n"
    if args.out:
        _write_text(args.out, text)
        print(f"{len(graph.nodes)} nodes, {len(graph.edges)} edges -> {args.out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_plan(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    from .gat import load_model, score_edges
    from .pipeline import extract_graph, graph_features
    from .planner import PROPOSED, PlanRequest, dump_plan, run_planner
    from .raster import load_image

    mask_img = load_image(args.mask)
    intensity = load_image(args.intensity) if args.intensity else None
    model = None
    if args.planner == PROPOSED:
        if not args.model:
            raise InvalidParameter("the proposed planner needs --model")
        model = load_model(args.model)
    if intensity is not None and intensity.shape != mask_img.shape:
        raise InvalidParameter(f"intensity image {intensity.shape} does not match mask {mask_img.shape}")
    ext = extract_graph(mask_img, cfg.extraction())
    graph = ext.graph
    if model is not None:
        image = intensity if intensity is not None else mask_img
        phi = graph_features(graph, image, _descriptor(cfg))
        graph = score_edges(model, graph, phi).graph
    src = resolve_node(graph, args.source)
    tgt = resolve_node(graph, args.target)
    request = PlanRequest(src, tgt, cfg.lambda_theta, cfg.lambda_d)
    result = run_planner(args.planner, graph, request, smooth=not args.no_smooth)
    if not result.polyline:
        from .planner import path_chain

        result.polyline = [(float(r), float(c)) for r, c in path_chain(graph, result.nodes, result.edges)[0]]
    if args.out:
        dump_plan(result, args.out)
    else:
        sys.stdout.write(json.dumps(result.to_dict(), indent=1, sort_keys=True) + "\n")
    if args.render:
        render_overlay(ext.mask, result.polyline, args.render, [graph.node(n).position for n in result.nodes])
    if args.out:
        print(f"{args.planner}: {len(result.edges)} edges, cost {result.cost:.6f} -> {args.out}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    from .evalx import training_samples
    from .gat import save_model, train
    from .phantom import read_suite

    scenes, _ = read_suite(args.suite)
    samples = training_samples(scenes, cfg.extraction(), _descriptor(cfg), jobs=args.jobs)
    held = None
    if args.held_out:
        held_scenes, _ = read_suite(args.held_out)
        held = training_samples(held_scenes, cfg.extraction(), _descriptor(cfg), jobs=args.jobs)
    if not any(e.label is not None for g, _ in samples for e in g.edges):
        raise InvalidInput(f"suite {args.suite} has no labeled edges")
    model, records = train(samples, cfg.gat(), seed=cfg.seed, held_out=held)
    save_model(model, args.out)
    log_path = args.log or str(Path(args.out).with_suffix("")) + "_train.csv"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "loss", "accuracy"])
    for r in records:
        w.writerow([r.epoch, repr(float(r.loss)), repr(float(r.accuracy))])
    _write_text(log_path, buf.getvalue())
    last = records[-1]
    print(f"trained on {len(samples)} scenes for {last.epoch} epochs: loss {last.loss:.6f}, "
          f"accuracy {last.accuracy:.4f}")
    print(f"model -> {args.out}; log -> {log_path}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    from .evalx import run_comparison
    from .gat import load_model
    from .phantom import read_suite
    from .planner import PLANNERS, PROPOSED

    planners = tuple(args.planners) if args.planners else PLANNERS
    model = load_model(args.model) if args.model else None
    if model is None and PROPOSED in planners:
        raise InvalidParameter("evaluating the proposed planner needs --model")
    scenes, _ = read_suite(args.suite)
    report = run_comparison(scenes, model, planners, cfg.extraction(), cfg.lambda_theta, cfg.lambda_d,
                            jobs=args.jobs, descriptor=_descriptor(cfg))
    report.write(args.out, json_only=args.json_only)
    if not args.json_only:
        print(report.table())
    return EXIT_OK


def cmd_losses(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    from .raster import load_image
    from .seg_losses import LossConfig, dice_loss, focal_tversky_loss, hybrid_total_loss

    pred = load_image(args.pred)
    aux = load_image(args.aux) if args.aux else pred
    target = load_image(args.target) >= 0.5
    lc = LossConfig(omega=tuple(args.omega), alpha=args.alpha, beta=args.beta, gamma=args.gamma,
                    epsilon=args.epsilon).validate()
    out = {"dice": dice_loss(pred, target, lc.epsilon),
           "focal_tversky": focal_tversky_loss(pred, target, lc.alpha, lc.beta, lc.gamma, lc.epsilon),
           "hybrid": hybrid_total_loss(pred, aux, target, lc)}
    for k, v in out.items():
        print(f"{k:<14} {v:.9f}")
    return EXIT_OK


def cmd_render(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    from .planner import load_plan
    from .raster import load_image

    mask = load_image(args.mask) >= cfg.tau
    plan = load_plan(args.plan)
    render_overlay(mask, plan.polyline, args.out)
    print(f"overlay -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

_EXTRACTION_FLAGS = ("tau", "close_kernel", "min_branch", "merge_ratio", "spacing", "descriptor")


def _extraction_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("extraction")
    g.add_argument("--tau", type=float, help="binarization threshold (default 0.5)")
    g.add_argument("--close-kernel", dest="close_kernel", type=int, help="closing kernel size (default 3)")
    g.add_argument("--min-branch", dest="min_branch", type=float,
                   help="spur pruning length in physical units (default 10 px at the finer spacing)")
    g.add_argument("--merge-ratio", dest="merge_ratio", type=float, help="crossing merge ratio (default 4)")
    g.add_argument("--spacing", type=float, nargs=2, metavar=("SX", "SY"), help="pixel spacing")
    g.add_argument("--descriptor", help="'builtin' or a patch-embedding sidecar JSON")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vesselroute", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--config", help=f"JSON config file (default: ${CONFIG_ENV} if set)")
    p.add_argument("--log-level", default="WARNING", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    g = sub.add_parser("gen-phantom", help="generate a synthetic scene suite")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int)
    g.add_argument("--scenes", type=int, default=50)
    g.add_argument("--size", type=int)
    g.add_argument("--crossings", type=int)
    g.add_argument("--shortcut-fraction", dest="shortcut_fraction", type=float)
    g.add_argument("--narrow-fraction", dest="narrow_fraction", type=float)
    g.add_argument("--jobs", type=int, default=1)
    g.add_argument("--quiet", action="store_true")
    g.set_defaults(func=cmd_gen_phantom, flags=("seed",))

    gr = sub.add_parser("graph", help="build a vessel graph from a mask, or dump a stored graph")
    gr.add_argument("mask", nargs="?")
    gr.add_argument("--dump", metavar="GRAPH_JSON")
    gr.add_argument("--out")
    _extraction_args(gr)
    gr.set_defaults(func=cmd_graph, flags=_EXTRACTION_FLAGS)

    pl = sub.add_parser("plan", help="plan a route on a mask")
    pl.add_argument("--mask", required=True)
    pl.add_argument("--intensity")
    pl.add_argument("--model")
    pl.add_argument("--source", required=True, help="node id or r,c")
    pl.add_argument("--target", required=True, help="node id or r,c")
    pl.add_argument("--planner", default="proposed", choices=("proposed", "shortest", "heuristic"))
    pl.add_argument("--out")
    pl.add_argument("--render", metavar="PNG")
    pl.add_argument("--no-smooth", dest="no_smooth", action="store_true")
    pl.add_argument("--lambda-theta", dest="lambda_theta", type=float)
    pl.add_argument("--lambda-d", dest="lambda_d", type=float)
    _extraction_args(pl)
    pl.set_defaults(func=cmd_plan, flags=_EXTRACTION_FLAGS + ("lambda_theta", "lambda_d"))

    t = sub.add_parser("train", help="train the edge scorer on a scene suite")
    t.add_argument("--suite", required=True)
    t.add_argument("--out", required=True, help="model path (.json, or .npz for binary)")
    t.add_argument("--log", help="training log CSV (default: <out>_train.csv)")
    t.add_argument("--held-out", dest="held_out", help="suite for the accuracy column")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", dest="learning_rate", type=float)
    t.add_argument("--hidden-dim", dest="hidden_dim", type=int)
    t.add_argument("--heads", type=int, nargs="+")
    t.add_argument("--seed", type=int)
    t.add_argument("--jobs", type=int, default=1)
    _extraction_args(t)
    t.set_defaults(func=cmd_train,
                   flags=_EXTRACTION_FLAGS + ("epochs", "learning_rate", "hidden_dim", "heads", "seed"))

    e = sub.add_parser("eval", help="compare planners on a scene suite")
    e.add_argument("--suite", required=True)
    e.add_argument("--model")
    e.add_argument("--out", required=True, help="report directory")
    e.add_argument("--planners", nargs="+", choices=("proposed", "shortest", "heuristic"))
    e.add_argument("--json-only", dest="json_only", action="store_true",
                   help="write only report.json and print no table")
    e.add_argument("--lambda-theta", dest="lambda_theta", type=float)
    e.add_argument("--lambda-d", dest="lambda_d", type=float)
    e.add_argument("--jobs", type=int, default=1)
    _extraction_args(e)
    e.set_defaults(func=cmd_eval, flags=_EXTRACTION_FLAGS + ("lambda_theta", "lambda_d"))

    lo = sub.add_parser("losses", help="evaluate segmentation losses on two images")
    lo.add_argument("--pred", required=True)
    lo.add_argument("--target", required=True)
    lo.add_argument("--aux")
    lo.add_argument("--omega", type=float, nargs=4, default=(1.0, 0.5, 1.0, 0.5))
    lo.add_argument("--alpha", type=float, default=0.7)
    lo.add_argument("--beta", type=float, default=0.3)
    lo.add_argument("--gamma", type=float, default=0.75)
    lo.add_argument("--epsilon", type=float, default=1e-6)
    lo.set_defaults(func=cmd_losses, flags=())

    r = sub.add_parser("render", help="draw a stored plan over its mask")
    r.add_argument("--mask", required=True)
    r.add_argument("--plan", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render, flags=())
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    try:
        if getattr(args, "jobs", 1) < 1:
            raise InvalidParameter("--jobs must be >= 1")
        cfg = _apply_flags(load_config(args.config), args, args.flags)
        return args.func(args, cfg)
    except _DOMAIN_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except _USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except VesselRouteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
