"""Mask-to-graph extraction shared by the command line, training and evaluation."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import raster
from .errors import InvalidParameter
from .features import PatchDescriptorSpec, annotate_geometry, assemble_phi
from .raster import Spacing
from .vessel_graph import VesselGraph, build_graph, merge_crossings, prune_spurs


@dataclass(frozen=True)
class ExtractionConfig:
    """Thresholds for turning a probability map or mask into a vessel graph.

    ``min_branch`` is the spur-pruning length in physical units; ``None``
    means ten pixels at the finer spacing.
    """

    tau: float = 0.5
    close_kernel: int = 3
    min_branch: float | None = None
    merge_ratio: float = 4.0
    spacing: Spacing = (1.0, 1.0)

    def validate(self) -> "ExtractionConfig":
        raster.check_spacing(self.spacing)
        if not 0.0 <= self.tau <= 1.0:
            raise InvalidParameter(f"tau must lie in [0, 1], got {self.tau}")
        if self.close_kernel < 1 or self.close_kernel % 2 == 0:
            raise InvalidParameter("close_kernel must be a positive odd integer")
        if self.min_branch is not None and self.min_branch < 0:
            raise InvalidParameter("min_branch must be nonnegative")
        if self.merge_ratio < 0:
            raise InvalidParameter("merge_ratio must be nonnegative")
        return self

    @property
    def branch_length(self) -> float:
        if self.min_branch is not None:
            return float(self.min_branch)
        return 10.0 * min(self.spacing)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["spacing"] = list(self.spacing)
        return d


@dataclass
class Extraction:
    mask: np.ndarray
    skeleton: np.ndarray
    distance: np.ndarray
    graph: VesselGraph


def extract_graph(image: np.ndarray, config: ExtractionConfig | None = None) -> Extraction:
    """Binarize, close, thin, prune, trace and merge crossings; edges get geometry.

    Boolean input is used as the mask directly.
    """
    cfg = (config or ExtractionConfig()).validate()
    img = np.asarray(image)
    mask = img.astype(bool) if img.dtype == bool else raster.binarize(img, cfg.tau)
    if cfg.close_kernel > 1:
        mask = raster.morphological_close(mask, cfg.close_kernel)
    skel = raster.skeletonize(mask)
    skel = prune_spurs(skel, cfg.branch_length, cfg.spacing)
    graph = build_graph(skel, cfg.spacing)
    dmap = raster.distance_transform(mask, cfg.spacing)
    graph = merge_crossings(graph, dmap, cfg.merge_ratio)
    annotate_geometry(graph, dmap)
    return Extraction(mask=mask, skeleton=skel, distance=dmap, graph=graph)


def graph_features(graph: VesselGraph, image: np.ndarray,
                   spec: PatchDescriptorSpec | None = None) -> np.ndarray:
    """Node feature matrix, rows in node order."""
    return assemble_phi(graph, image, spec)
