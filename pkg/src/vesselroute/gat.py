"""Graph attention network over key nodes with a bilinear edge scorer.

All computation is plain numpy on an edge-list view of the graph. Every node
attends to itself and to its distinct graph neighbours. Gradients are
derived by hand and checked against finite differences in the tests.

Layer ``l`` with ``K`` heads computes, for each head,

    z = x W,   e_ij = LeakyReLU(a_src . z_i + a_dst . z_j),
    alpha_ij = softmax_j(e_ij),   h_i = sum_j alpha_ij z_j

and returns ``ReLU(concat_k h_i)`` for hidden layers or ``ReLU(mean_k h_i)``
for the final layer. Edge ``(u, v)`` is scored ``sigmoid(h_u^T S h_v + b)``
with ``S`` the symmetric part of the learned matrix.
"""

from __future__ import annotations

import io
import json
import logging
import math
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import IntegrityError, InvalidInput, InvalidParameter, LoadError
from .vessel_graph import TRAVERSABLE, VesselGraph

log = logging.getLogger(__name__)

MODEL_FORMAT = "vesselroute-gat"
MODEL_VERSION = 1
PROB_MIN = 1e-6
PROB_MAX = 1.0 - 1e-6

CONCAT = "concat"
MEAN = "mean"


@dataclass(frozen=True)
class GatConfig:
    """Architecture and optimiser settings."""

    hidden_dim: int = 16
    heads: tuple[int, ...] = (4, 4)
    negative_slope: float = 0.2
    learning_rate: float = 1e-2
    epochs: int = 500

    def validate(self) -> "GatConfig":
        if self.hidden_dim < 1 or not self.heads or min(self.heads) < 1:
            raise InvalidParameter("hidden_dim and every head count must be positive")
        if self.learning_rate < 0 or self.epochs < 0:
            raise InvalidParameter("learning_rate and epochs must be nonnegative")
        if not 0 <= self.negative_slope < 1:
            raise InvalidParameter("negative_slope must lie in [0, 1)")
        return self

    def to_dict(self) -> dict:
        return {"hidden_dim": self.hidden_dim, "heads": list(self.heads),
                "negative_slope": self.negative_slope, "learning_rate": self.learning_rate,
                "epochs": self.epochs}

    @classmethod
    def from_dict(cls, d: dict) -> "GatConfig":
        return cls(hidden_dim=int(d["hidden_dim"]), heads=tuple(int(h) for h in d["heads"]),
                   negative_slope=float(d["negative_slope"]), learning_rate=float(d["learning_rate"]),
                   epochs=int(d["epochs"]))


@dataclass
class GatLayer:
    """Per-head projections ``weights[k]`` (in x out) and attention vectors ``attention[k]`` (2 out)."""

    weights: list[np.ndarray]
    attention: list[np.ndarray]
    combine: str = CONCAT

    @property
    def heads(self) -> int:
        return len(self.weights)

    @property
    def in_dim(self) -> int:
        return int(self.weights[0].shape[0])

    @property
    def head_dim(self) -> int:
        return int(self.weights[0].shape[1])

    @property
    def out_dim(self) -> int:
        return self.head_dim * self.heads if self.combine == CONCAT else self.head_dim

    def validate(self) -> None:
        if not self.weights or len(self.weights) != len(self.attention):
            raise IntegrityError("layer needs one attention vector per head")
        if self.combine not in (CONCAT, MEAN):
            raise IntegrityError(f"unknown head combination {self.combine!r}")
        shape = self.weights[0].shape
        for w, a in zip(self.weights, self.attention):
            if w.ndim != 2 or w.shape != shape:
                raise IntegrityError("all heads of a layer must share one projection shape")
            if a.shape != (2 * shape[1],):
                raise IntegrityError(f"attention vector has shape {a.shape}, expected ({2 * shape[1]},)")


@dataclass
class GatModel:
    layers: list[GatLayer]
    edge_weight: np.ndarray
    edge_bias: float = 0.0
    config: GatConfig = field(default_factory=GatConfig)
    input_shift: np.ndarray | None = None
    input_scale: np.ndarray | None = None

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def embed_dim(self) -> int:
        return self.layers[-1].out_dim

    def validate(self) -> "GatModel":
        if not self.layers:
            raise IntegrityError("model has no layers")
        for k, layer in enumerate(self.layers):
            layer.validate()
            if k and layer.in_dim != self.layers[k - 1].out_dim:
                raise IntegrityError(f"layer {k} expects {layer.in_dim} inputs but layer {k - 1} "
                                     f"produces {self.layers[k - 1].out_dim}")
        if self.edge_weight.shape != (self.embed_dim, self.embed_dim):
            raise IntegrityError(f"edge scorer is {self.edge_weight.shape}, embeddings have {self.embed_dim} dims")
        for name in ("input_shift", "input_scale"):
            v = getattr(self, name)
            if v is not None and v.shape != (self.in_dim,):
                raise IntegrityError(f"{name} has shape {v.shape}, expected ({self.in_dim},)")
        if self.input_scale is not None and np.any(self.input_scale <= 0):
            raise IntegrityError("input_scale must be positive")
        return self

    def copy(self) -> "GatModel":
        return GatModel(layers=[GatLayer([w.copy() for w in l.weights], [a.copy() for a in l.attention], l.combine)
                                for l in self.layers],
                        edge_weight=self.edge_weight.copy(), edge_bias=float(self.edge_bias), config=self.config,
                        input_shift=None if self.input_shift is None else self.input_shift.copy(),
                        input_scale=None if self.input_scale is None else self.input_scale.copy())

    def parameters(self) -> list[tuple[str, np.ndarray]]:
        """Named views of every trainable array, in a fixed order."""
        out = []
        for k, layer in enumerate(self.layers):
            for h in range(layer.heads):
                out.append((f"layer{k}.W{h}", layer.weights[h]))
                out.append((f"layer{k}.a{h}", layer.attention[h]))
        out.append(("edge.W", self.edge_weight))
        return out


def init_model(in_dim: int, config: GatConfig | None = None, seed: int = 0) -> GatModel:
    """Uniform initialisation in +-1/sqrt(fan_in); the bias starts at zero."""
    cfg = (config or GatConfig()).validate()
    if in_dim < 1:
        raise InvalidParameter("in_dim must be positive")
    rng = np.random.default_rng(seed)
    layers = []
    width = in_dim
    for k, heads in enumerate(cfg.heads):
        last = k == len(cfg.heads) - 1
        ws, atts = [], []
        for _ in range(heads):
            ws.append(rng.uniform(-1, 1, size=(width, cfg.hidden_dim)) / math.sqrt(width))
            atts.append(rng.uniform(-1, 1, size=2 * cfg.hidden_dim) / math.sqrt(2 * cfg.hidden_dim))
        layers.append(GatLayer(ws, atts, MEAN if last else CONCAT))
        width = layers[-1].out_dim
    edge_w = rng.uniform(-1, 1, size=(width, width)) / math.sqrt(width)
    return GatModel(layers, edge_w, 0.0, cfg).validate()


# ---------------------------------------------------------------------------
# graph index

@dataclass(frozen=True)
class GraphIndex:
    """Edge-list view: attention pairs (self-loops included) and scored edges.

    ``dst`` attends over ``src``: pair k contributes ``src[k]`` to node ``dst[k]``.
    Pairs are sorted by destination.
    """

    n_nodes: int
    dst: np.ndarray
    src: np.ndarray
    edge_u: np.ndarray
    edge_v: np.ndarray

    @classmethod
    def from_pairs(cls, n_nodes: int, edges: Iterable[tuple[int, int]]) -> "GraphIndex":
        edges = [(int(u), int(v)) for u, v in edges]
        nbr = {(i, i) for i in range(n_nodes)}
        for u, v in edges:
            if not (0 <= u < n_nodes and 0 <= v < n_nodes):
                raise InvalidInput(f"edge ({u}, {v}) outside 0..{n_nodes - 1}")
            nbr.add((u, v))
            nbr.add((v, u))
        pairs = np.array(sorted(nbr), dtype=np.int64).reshape(-1, 2)
        e = np.array(edges, dtype=np.int64).reshape(-1, 2)
        return cls(n_nodes, pairs[:, 0], pairs[:, 1], e[:, 0], e[:, 1])

    @classmethod
    def from_graph(cls, graph: VesselGraph) -> "GraphIndex":
        pos = {n.id: k for k, n in enumerate(graph.nodes)}
        return cls.from_pairs(len(graph.nodes), [(pos[e.u], pos[e.v]) for e in graph.edges])

    @staticmethod
    def union(parts: Sequence["GraphIndex"]) -> "GraphIndex":
        off = 0
        dst, src, eu, ev = [], [], [], []
        for p in parts:
            dst.append(p.dst + off)
            src.append(p.src + off)
            eu.append(p.edge_u + off)
            ev.append(p.edge_v + off)
            off += p.n_nodes
        cat = lambda xs: np.concatenate(xs) if xs else np.zeros(0, dtype=np.int64)
        return GraphIndex(off, cat(dst), cat(src), cat(eu), cat(ev))


# ---------------------------------------------------------------------------
# forward pass

def _leaky(x: np.ndarray, slope: float) -> np.ndarray:
    return np.where(x > 0, x, slope * x)


def _segment_softmax(logits: np.ndarray, seg: np.ndarray, n: int) -> np.ndarray:
    peak = np.full(n, -np.inf)
    np.maximum.at(peak, seg, logits)
    ex = np.exp(logits - peak[seg])
    total = np.zeros(n)
    np.add.at(total, seg, ex)
    return ex / total[seg]


def attention_coefficients(layer: GatLayer, features: np.ndarray, node: int, neighbors: Sequence[int],
                           head: int = 0, negative_slope: float = 0.2) -> np.ndarray:
    """Attention weights of ``node`` over ``neighbors`` (in the given order) for one head.

    The caller decides whether the node itself is among the neighbours.
    """
    nb = [int(j) for j in neighbors]
    if not nb:
        raise InvalidInput(f"node {node} has no neighbours to attend to")
    x = np.asarray(features, dtype=float)
    if x.ndim != 2 or x.shape[1] != layer.in_dim:
        raise IntegrityError(f"features have shape {x.shape}, layer expects {layer.in_dim} columns")
    w, a = layer.weights[head], layer.attention[head]
    f = w.shape[1]
    z = x @ w
    logits = _leaky(float(z[node] @ a[:f]) + z[nb] @ a[f:], negative_slope)
    ex = np.exp(logits - logits.max())
    return ex / ex.sum()


@dataclass
class _LayerCache:
    x: np.ndarray
    z: list[np.ndarray]
    pre: list[np.ndarray]
    alpha: list[np.ndarray]
    combined: np.ndarray


def layer_forward(layer: GatLayer, index: GraphIndex, x: np.ndarray,
                  negative_slope: float = 0.2) -> tuple[np.ndarray, _LayerCache]:
    """One attention layer; returns the activations and what backprop needs."""
    if x.ndim != 2 or x.shape != (index.n_nodes, layer.in_dim):
        raise IntegrityError(f"layer expects ({index.n_nodes}, {layer.in_dim}) inputs, got {x.shape}")
    n = index.n_nodes
    zs, pres, alphas, hs = [], [], [], []
    for w, a in zip(layer.weights, layer.attention):
        f = w.shape[1]
        z = x @ w
        pre = (z @ a[:f])[index.dst] + (z @ a[f:])[index.src]
        alpha = _segment_softmax(_leaky(pre, negative_slope), index.dst, n)
        h = np.zeros((n, f))
        np.add.at(h, index.dst, alpha[:, None] * z[index.src])
        zs.append(z)
        pres.append(pre)
        alphas.append(alpha)
        hs.append(h)
    combined = np.concatenate(hs, axis=1) if layer.combine == CONCAT else np.mean(hs, axis=0)
    return np.maximum(combined, 0.0), _LayerCache(x, zs, pres, alphas, combined)


def normalize_inputs(model: GatModel, features: np.ndarray) -> np.ndarray:
    x = np.asarray(features, dtype=float)
    if x.ndim != 2 or x.shape[1] != model.in_dim:
        raise IntegrityError(f"features have {x.shape[-1] if x.ndim else 0} columns, model expects {model.in_dim}")
    if model.input_shift is not None:
        x = x - model.input_shift
    if model.input_scale is not None:
        x = x / model.input_scale
    return x


def embed(model: GatModel, index: GraphIndex, features: np.ndarray) -> tuple[np.ndarray, list[_LayerCache]]:
    h = normalize_inputs(model, features)
    caches = []
    for layer in model.layers:
        h, cache = layer_forward(layer, index, h, model.config.negative_slope)
        caches.append(cache)
    return h, caches


def edge_logits(model: GatModel, index: GraphIndex, emb: np.ndarray) -> np.ndarray:
    sym = 0.5 * (model.edge_weight + model.edge_weight.T)
    hu, hv = emb[index.edge_u], emb[index.edge_v]
    return np.einsum("ij,jk,ik->i", hu, sym, hv) + model.edge_bias


def _sigmoid(s: np.ndarray) -> np.ndarray:
    out = np.empty_like(s, dtype=float)
    pos = s >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-s[pos]))
    ex = np.exp(s[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class ScoredGraph:
    graph: VesselGraph
    probabilities: np.ndarray
    embeddings: np.ndarray


def score_edges(model: GatModel, graph: VesselGraph, features: np.ndarray) -> ScoredGraph:
    """Traversability for every edge, clamped to [1e-6, 1 - 1e-6].

    Returns a copy of ``graph`` with ``probability`` set; array entries follow
    edge order.
    """
    x = np.asarray(features, dtype=float)
    if x.shape[0] != len(graph.nodes):
        raise IntegrityError(f"{x.shape[0]} feature rows for {len(graph.nodes)} nodes")
    index = GraphIndex.from_graph(graph)
    emb, _ = embed(model, index, x)
    p = np.clip(_sigmoid(edge_logits(model, index, emb)), PROB_MIN, PROB_MAX)
    out = graph.copy()
    for e, pe in zip(out.edges, p):
        e.probability = float(pe)
    return ScoredGraph(out, p, emb)


# ---------------------------------------------------------------------------
# loss and gradients

@dataclass
class Batch:
    """Disjoint union of training graphs with 0/1 labels on the scored edges."""

    index: GraphIndex
    features: np.ndarray
    labels: np.ndarray
    labeled: np.ndarray

    @property
    def n_labeled(self) -> int:
        return int(self.labeled.sum())


def make_batch(samples: Sequence[tuple[VesselGraph, np.ndarray]]) -> Batch:
    """Stack graphs whose edges carry ``label``; unlabeled edges are scored but not trained on."""
    parts, feats, labels, mask = [], [], [], []
    for graph, x in samples:
        x = np.asarray(x, dtype=float)
        if x.shape[0] != len(graph.nodes):
            raise IntegrityError(f"{x.shape[0]} feature rows for {len(graph.nodes)} nodes")
        parts.append(GraphIndex.from_graph(graph))
        feats.append(x)
        for e in graph.edges:
            labels.append(1.0 if e.label == TRAVERSABLE else 0.0)
            mask.append(e.label is not None)
    if not feats:
        raise InvalidInput("no training graphs")
    widths = {f.shape[1] for f in feats}
    if len(widths) != 1:
        raise IntegrityError(f"feature widths differ across graphs: {sorted(widths)}")
    return Batch(GraphIndex.union(parts), np.vstack(feats), np.array(labels, dtype=float),
                 np.array(mask, dtype=bool))


def _softplus(s: np.ndarray) -> np.ndarray:
    return np.maximum(s, 0) + np.log1p(np.exp(-np.abs(s)))


def loss_and_grads(model: GatModel, batch: Batch) -> tuple[float, dict[str, np.ndarray], float]:
    """Mean binary cross-entropy over labeled edges, its gradients and the edge-bias gradient.

    The loss is evaluated from logits, ``softplus(s) - y s``, which is the
    unclamped cross-entropy and stays smooth for confident predictions.
    """
    n_lab = batch.n_labeled
    if n_lab == 0:
        raise InvalidInput("no labeled edges to train on")
    idx = batch.index
    emb, caches = embed(model, idx, batch.features)
    s = edge_logits(model, idx, emb)
    y = batch.labels
    m = batch.labeled
    loss = float(np.sum((_softplus(s) - y * s)[m]) / n_lab)
    g_s = np.where(m, (_sigmoid(s) - y) / n_lab, 0.0)

    grads: dict[str, np.ndarray] = {}
    hu, hv = emb[idx.edge_u], emb[idx.edge_v]
    outer = hu.T @ (g_s[:, None] * hv)
    grads["edge.W"] = 0.5 * (outer + outer.T)
    g_b = float(g_s.sum())
    sym = 0.5 * (model.edge_weight + model.edge_weight.T)
    g_emb = np.zeros_like(emb)
    np.add.at(g_emb, idx.edge_u, g_s[:, None] * (hv @ sym))
    np.add.at(g_emb, idx.edge_v, g_s[:, None] * (hu @ sym))

    slope = model.config.negative_slope
    g_out = g_emb
    for k in range(len(model.layers) - 1, -1, -1):
        layer, cache = model.layers[k], caches[k]
        g_comb = g_out * (cache.combined > 0)
        f = layer.head_dim
        g_x = np.zeros_like(cache.x)
        for h in range(layer.heads):
            w, a = layer.weights[h], layer.attention[h]
            z, pre, alpha = cache.z[h], cache.pre[h], cache.alpha[h]
            g_h = g_comb[:, h * f:(h + 1) * f] if layer.combine == CONCAT else g_comb / layer.heads
            g_z = np.zeros_like(z)
            np.add.at(g_z, idx.src, alpha[:, None] * g_h[idx.dst])
            g_alpha = np.einsum("ij,ij->i", g_h[idx.dst], z[idx.src])
            weighted = np.zeros(idx.n_nodes)
            np.add.at(weighted, idx.dst, alpha * g_alpha)
            g_logit = alpha * (g_alpha - weighted[idx.dst])
            g_pre = g_logit * np.where(pre > 0, 1.0, slope)
            g_s1 = np.zeros(idx.n_nodes)
            g_s2 = np.zeros(idx.n_nodes)
            np.add.at(g_s1, idx.dst, g_pre)
            np.add.at(g_s2, idx.src, g_pre)
            g_z += np.outer(g_s1, a[:f]) + np.outer(g_s2, a[f:])
            grads[f"layer{k}.a{h}"] = np.concatenate([z.T @ g_s1, z.T @ g_s2])
            grads[f"layer{k}.W{h}"] = cache.x.T @ g_z
            g_x += g_z @ w.T
        g_out = g_x
    return loss, grads, g_b


# ---------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class TrainRecord:
    epoch: int
    loss: float
    accuracy: float


def edge_accuracy(model: GatModel, batch: Batch) -> float:
    """Fraction of labeled edges whose thresholded probability matches the label."""
    if batch.n_labeled == 0:
        return float("nan")
    emb, _ = embed(model, batch.index, batch.features)
    pred = edge_logits(model, batch.index, emb) > 0
    return float(np.mean(pred[batch.labeled] == (batch.labels[batch.labeled] > 0.5)))


def fit_input_normalization(model: GatModel, features: np.ndarray) -> GatModel:
    """Set per-column shift and scale from the training features (constant columns keep scale 1)."""
    x = np.asarray(features, dtype=float)
    sd = x.std(axis=0)
    model.input_shift = x.mean(axis=0)
    model.input_scale = np.where(sd > 1e-12, sd, 1.0)
    return model


def train(samples: Sequence[tuple[VesselGraph, np.ndarray]], config: GatConfig | None = None, seed: int = 0,
          held_out: Sequence[tuple[VesselGraph, np.ndarray]] | None = None,
          model: GatModel | None = None) -> tuple[GatModel, list[TrainRecord]]:
    """Full-batch gradient descent on the mean edge cross-entropy.

    A fresh model is initialised from ``seed`` unless one is given, and its
    input normalisation is fitted on the training features. Accuracy in the
    records is measured on ``held_out`` when given, else on the training set.
    Record 0 describes the initial model.
    """
    cfg = (config or (model.config if model else GatConfig())).validate()
    batch = make_batch(samples)
    if batch.n_labeled == 0:
        raise InvalidInput("no labeled edges to train on")
    if model is None:
        model = fit_input_normalization(init_model(batch.features.shape[1], cfg, seed), batch.features)
    else:
        model = model.copy()
        model.config = cfg
    model.validate()
    if batch.features.shape[1] != model.in_dim:
        raise IntegrityError(f"features have {batch.features.shape[1]} columns, model expects {model.in_dim}")
    check = make_batch(held_out) if held_out else batch

    loss, grads, g_b = loss_and_grads(model, batch)
    records = [TrainRecord(0, loss, edge_accuracy(model, check))]
    warned = False
    lr = cfg.learning_rate
    for epoch in range(1, cfg.epochs + 1):
        for name, param in model.parameters():
            param -= lr * grads[name]
        model.edge_bias -= lr * g_b
        new_loss, grads, g_b = loss_and_grads(model, batch)
        if new_loss > loss + 1e-12 and not warned:
            log.warning("training loss rose at epoch %d (%.6g -> %.6g); consider a smaller learning rate",
                        epoch, loss, new_loss)
            warned = True
        loss = new_loss
        records.append(TrainRecord(epoch, loss, edge_accuracy(model, check)))
    return model, records


# ---------------------------------------------------------------------------
# persistence

def _model_doc(model: GatModel) -> dict:
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "config": model.config.to_dict(),
        "in_dim": model.in_dim,
        "embed_dim": model.embed_dim,
        "layers": [{"combine": l.combine, "heads": l.heads, "in_dim": l.in_dim, "head_dim": l.head_dim}
                   for l in model.layers],
        "edge_bias": float(model.edge_bias),
    }


def _arrays(model: GatModel) -> dict[str, np.ndarray]:
    out = {name: np.asarray(p) for name, p in model.parameters()}
    if model.input_shift is not None:
        out["input.shift"] = model.input_shift
    if model.input_scale is not None:
        out["input.scale"] = model.input_scale
    return out


def _from_parts(doc: dict, arrays: dict[str, np.ndarray], where: str) -> GatModel:
    if doc.get("format") != MODEL_FORMAT:
        raise LoadError(f"{where}: not a model file")
    if doc.get("version") != MODEL_VERSION:
        raise LoadError(f"{where}: unsupported model version {doc.get('version')!r}")
    try:
        cfg = GatConfig.from_dict(doc["config"])
        layers = []
        for k, spec in enumerate(doc["layers"]):
            ws = [np.asarray(arrays[f"layer{k}.W{h}"], dtype=float) for h in range(int(spec["heads"]))]
            atts = [np.asarray(arrays[f"layer{k}.a{h}"], dtype=float) for h in range(int(spec["heads"]))]
            layer = GatLayer(ws, atts, spec["combine"])
            if layer.in_dim != int(spec["in_dim"]) or layer.head_dim != int(spec["head_dim"]):
                raise IntegrityError(f"layer {k} arrays do not match the declared dims")
            layers.append(layer)
        model = GatModel(layers, np.asarray(arrays["edge.W"], dtype=float), float(doc["edge_bias"]), cfg,
                         arrays.get("input.shift"), arrays.get("input.scale"))
        model.validate()
        if model.in_dim != int(doc["in_dim"]) or model.embed_dim != int(doc["embed_dim"]):
            raise IntegrityError("declared input/embedding dims do not match the arrays")
    except IntegrityError as exc:
        raise LoadError(f"{where}: model failed validation ({exc})") from exc
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise LoadError(f"{where}: malformed model ({exc!r})") from exc
    return model


def save_model(model: GatModel, path: str | Path) -> None:
    """Write ``.npz`` (binary, exact) or anything else as versioned JSON.

    Both encodings are byte-for-byte reproducible; JSON floats use the
    shortest round-tripping repr so they are exact too.
    """
    model.validate()
    path = Path(path)
    doc = _model_doc(model)
    arrays = _arrays(model)
    if path.suffix.lower() == ".npz":
        with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
            info = zipfile.ZipInfo("model.json", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, json.dumps(doc, sort_keys=True))
            for name in sorted(arrays):
                buf = io.BytesIO()
                np.save(buf, np.ascontiguousarray(arrays[name], dtype="<f8"), allow_pickle=False)
                zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())
        return
    doc["arrays"] = {name: arr.tolist() for name, arr in sorted(arrays.items())}
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def load_model(path: str | Path) -> GatModel:
    path = Path(path)
    where = str(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise LoadError(f"{where}: cannot read model ({exc.strerror})") from exc
    if raw[:2] == b"PK":
        try:
            with zipfile.ZipFile(io.BytesIO(raw)) as zf:
                doc = json.loads(zf.read("model.json"))
                arrays = {n[:-4]: np.load(io.BytesIO(zf.read(n)), allow_pickle=False)
                          for n in zf.namelist() if n.endswith(".npy")}
        except (zipfile.BadZipFile, KeyError, ValueError, EOFError, OSError) as exc:
            raise LoadError(f"{where}: corrupt binary model ({exc})") from exc
        return _from_parts(doc, arrays, where)
    try:
        doc = json.loads(raw.decode("utf-8"))
        arrays = {k: np.asarray(v, dtype=float) for k, v in doc["arrays"].items()}
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise LoadError(f"{where}: corrupt model file ({exc})") from exc
    return _from_parts(doc, arrays, where)
