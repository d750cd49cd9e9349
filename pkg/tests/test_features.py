import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import bar_mask
from oracles import brute_edt, loop_turning_angle
from vesselroute.errors import IntegrityError, InvalidInput, LookupFailure, ParseError
from vesselroute.features import (PatchDescriptorSpec, aggregate_node, arc_length, assemble_phi, edge_diameter,
                                  extract_patches, load_sidecar, patch_descriptor, turning_angle)
from vesselroute.pipeline import extract_graph
from vesselroute.vessel_graph import EdgeGeometry, KeyNode, VesselEdge, VesselGraph

STAIR = [(0, 0), (1, 0), (1, 1), (2, 1), (2, 2)]


# --- turning angle / arc length ----------------------------------------------

def test_turning_angle_examples():
    assert turning_angle([(3, c) for c in range(9)]) == 0.0
    assert abs(turning_angle(STAIR) - math.pi / 2) <= 1e-9
    assert turning_angle([(0, 0), (1, 1)]) == 0.0
    with pytest.raises(InvalidInput):
        turning_angle([])


def test_arc_length_examples():
    assert abs(arc_length([(0, c) for c in range(5)], (0.5, 0.5)) - 2.0) <= 1e-9
    assert abs(arc_length([(0, 0), (1, 1), (2, 2)]) - 2 * math.sqrt(2)) <= 1e-9
    # steps alternate column (x, scaled 1) and row (y, scaled 0.5)
    stair_xy = [(0, 0), (0, 1), (1, 1), (1, 2), (2, 2)]
    assert abs(arc_length(stair_xy, (1.0, 0.5)) - 3.0) <= 1e-9
    assert arc_length([(4, 4)]) == 0.0


steps = st.sampled_from([(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)])


@st.composite
def chains(draw, min_size=2):
    moves = draw(st.lists(steps, min_size=min_size - 1, max_size=40))
    pts = [(0, 0)]
    for dr, dc in moves:
        pts.append((pts[-1][0] + dr, pts[-1][1] + dc))
    return pts


@given(chains(3))
def test_turning_angle_matches_loop(chain):
    # back-and-forth steps make a zero-length tangent impossible (8-steps are never zero)
    assert abs(turning_angle(chain) - loop_turning_angle(chain)) <= 1e-9


@given(chains(), st.floats(0.1, 5.0), st.floats(0.1, 5.0), st.floats(0.1, 10.0))
def test_arc_length_reversal_and_scaling(chain, sx, sy, k):
    forward = arc_length(chain, (sx, sy))
    assert abs(arc_length(chain[::-1], (sx, sy)) - forward) <= 1e-9 * max(1.0, forward)
    assert abs(arc_length(chain, (k * sx, k * sy)) - k * forward) <= 1e-9 * max(1.0, k * forward)


# --- diameter -----------------------------------------------------------------

def test_diameter_examples():
    m = bar_mask(5)
    d = brute_edt(m)
    centre = [(8, c) for c in range(10, 60)]
    assert abs(edge_diameter(centre, d) - 5.0) <= 1e-9
    thin = np.zeros((5, 20), bool)
    thin[2, 2:18] = True
    assert abs(edge_diameter([(2, c) for c in range(4, 16)], brute_edt(thin)) - 1.0) <= 1e-9
    with pytest.raises(IntegrityError):
        edge_diameter([(0, 0)], d)


@pytest.mark.parametrize("width", [3, 5, 7, 9])
def test_bar_diameter_recovered_by_pipeline(width):
    g = extract_graph(bar_mask(width, length=80)).graph
    assert len(g.edges) == 1
    assert abs(g.edges[0].geometry.diameter - width) <= 1.0


# --- aggregation --------------------------------------------------------------

def _star(geoms):
    nodes = [KeyNode(0, (50, 50), "bifurcation" if len(geoms) >= 3 else "endpoint")]
    edges = []
    for k, g in enumerate(geoms, start=1):
        nodes.append(KeyNode(k, (50 + 10 * k, 50), "endpoint"))
        edges.append(VesselEdge(k - 1, 0, k, [], geometry=EdgeGeometry(*g)))
    return VesselGraph(nodes, edges)


def test_aggregate_examples():
    assert aggregate_node(_star([(0.4, 12.0, 3.0)]), 0) == pytest.approx((0.4, 3.0, 12.0))
    assert aggregate_node(_star([(0.2, 10.0, 2.0), (0.6, 30.0, 4.0)]), 0) == pytest.approx((0.4, 4.0, 20.0))
    sym = aggregate_node(_star([(0.3, 20.0, 5.0)] * 4), 0)
    assert sym[0] == pytest.approx(0.3)


def test_aggregate_isolated_node():
    g = VesselGraph([KeyNode(0, (1, 1), "isolated")], [])
    with pytest.raises(InvalidInput):
        aggregate_node(g, 0)


# --- patches ------------------------------------------------------------------

def test_patch_normalization(rng):
    img = rng.random((200, 200))
    for p in extract_patches(img, (100, 100)):
        assert p.normalized.shape == (p.scale, p.scale)
        assert abs(p.normalized.mean()) <= 1e-9 and abs(p.normalized.var() - 1) <= 1e-9
        top = 100 - p.scale // 2
        assert np.array_equal(p.raw, img[top:top + p.scale, top:top + p.scale])


def test_constant_and_corner_patches():
    for p in extract_patches(np.full((50, 50), 0.3), (25, 25)):
        assert not p.normalized.any()
        assert not patch_descriptor(p)[4:].any() and patch_descriptor(p)[1] == 0.0
    img = np.arange(2500, dtype=float).reshape(50, 50)
    for p in extract_patches(img, (0, 0)):
        assert p.raw.shape == (p.scale, p.scale)
        assert p.raw[0, 0] == img[0, 0]


def test_ramp_orientation_bin():
    ramp = np.tile(np.arange(100, dtype=float), (100, 1))
    desc = patch_descriptor(extract_patches(ramp, (50, 50), scales=(32,))[0])
    hist = desc[4:]
    assert hist[0] == pytest.approx(1.0)
    # brute-force forward differences point the same way
    g_col = np.diff(ramp, axis=1)
    assert (g_col > 0).all()


def _toy_graph():
    g = extract_graph(bar_mask(5, length=80)).graph
    return g


def test_phi_dimensions_and_single_node_standardization():
    g = _toy_graph()
    phi = assemble_phi(g, np.random.default_rng(0).random((17, 92)))
    # 3 geometric columns plus 12 descriptor values at each of three scales
    assert phi.shape == (2, 3 + 3 * 12)
    assert PatchDescriptorSpec().total_dim == 36
    one = VesselGraph([KeyNode(0, (5, 5), "endpoint"), KeyNode(1, (5, 30), "endpoint")],
                      [VesselEdge(0, 0, 1, [], geometry=EdgeGeometry(0.2, 25.0, 3.0))])
    phi1 = assemble_phi(one, np.zeros((20, 40)))
    assert not phi1[:, :3].any()


def test_phi_standardizes_theta():
    nodes = [KeyNode(0, (5, 5), "endpoint"), KeyNode(1, (5, 30), "endpoint"),
             KeyNode(2, (25, 5), "endpoint"), KeyNode(3, (25, 30), "endpoint")]
    edges = [VesselEdge(0, 0, 1, [], geometry=EdgeGeometry(0.2, 25.0, 3.0)),
             VesselEdge(1, 2, 3, [], geometry=EdgeGeometry(0.6, 25.0, 3.0))]
    phi = assemble_phi(VesselGraph(nodes, edges), np.zeros((40, 40)))
    assert phi[:, 0] == pytest.approx([-1, -1, 1, 1])


def test_external_sidecar(tmp_path):
    g = _toy_graph()
    vecs = {str(n.id): list(np.arange(6.0) + n.id) for n in g.nodes}
    path = tmp_path / "emb.json"
    path.write_text(json.dumps({"header": {"scales": [32, 64, 96], "dims": [1, 2, 3]}, "vectors": vecs}))
    spec = load_sidecar(path)
    phi = assemble_phi(g, np.zeros((17, 92)), spec)
    for n, row in zip(g.nodes, phi):
        assert np.array_equal(row[3:], np.arange(6.0) + n.id)
    missing = PatchDescriptorSpec("external", (1, 2, 3), {})
    with pytest.raises(LookupFailure):
        assemble_phi(g, np.zeros((17, 92)), missing)
    path.write_text(json.dumps({"header": {"dims": [1, 2, 3]}, "vectors": {"0": [1.0]}}))
    with pytest.raises(ParseError):
        load_sidecar(path)
