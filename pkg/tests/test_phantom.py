import json

import numpy as np
import pytest

from vesselroute.errors import GenerationError, InvalidParameter, ParseError
from vesselroute.evalx import match_graphs
from vesselroute.phantom import (PhantomConfig, derive_seeds, generate_scene, generate_suite, read_scene,
                                 read_suite, write_scene, write_suite)
from vesselroute.pipeline import extract_graph
from vesselroute.vessel_graph import BIFURCATION, ENDPOINT, TRAVERSABLE


@pytest.fixture(scope="module")
def suite50():
    return generate_suite(7, 50)


def walk_edges(graph, start, edge_ids):
    """Node sequence visited by following ``edge_ids`` from ``start``."""
    nodes = [start]
    for eid in edge_ids:
        e = graph.edge(eid)
        assert nodes[-1] in e.endpoints, f"edge {eid} does not continue the walk"
        nodes.append(e.other(nodes[-1]))
    return nodes


def test_no_crossings_gives_a_single_chain():
    sc = generate_scene(0, PhantomConfig(n_crossings=0))
    g = sc.truth_graph
    assert len(g.nodes) == 2 and len(g.edges) == 1
    assert sc.crossings == [] and sc.true_path == [0]
    ext = extract_graph(sc.mask).graph
    assert len(ext.nodes) == 2 and len(ext.edges) == 1
    assert all(n.kind == ENDPOINT for n in ext.nodes)


def test_one_crossing_gives_one_degree_four_node():
    sc = generate_scene(0, PhantomConfig(n_crossings=1))
    ext = extract_graph(sc.mask).graph
    degrees = sorted(ext.degree(n.id) for n in ext.nodes)
    assert degrees == [1, 1, 1, 1, 4]
    (c,) = sc.crossings
    hub = next(n for n in ext.nodes if ext.degree(n.id) == 4)
    assert np.hypot(*np.subtract(hub.position, c.position)) <= 3.0


def test_same_seed_same_scene():
    a, b = generate_scene(11), generate_scene(11)
    assert a.digest() == b.digest()
    assert np.array_equal(a.mask, b.mask) and np.array_equal(a.intensity, b.intensity)
    assert generate_scene(12).digest() != a.digest()


def test_suite_seeds_are_prefix_stable():
    assert derive_seeds(3, 10)[:4] == derive_seeds(3, 4)


@pytest.mark.parametrize("seed", range(8))
def test_scene_invariants(seed):
    sc = generate_scene(seed)
    g = sc.truth_graph
    nodes = walk_edges(g, sc.source, sc.true_path)
    assert nodes[-1] == sc.target
    assert len(set(nodes)) == len(nodes)
    assert all(g.edge(e).label == TRAVERSABLE for e in sc.true_path)
    assert g.node(sc.source).kind == ENDPOINT and g.node(sc.target).kind == ENDPOINT
    assert len(sc.crossings) == sc.config.n_crossings
    for c in sc.crossings:
        assert g.degree(c.node) == 4 and g.node(c.node).kind == BIFURCATION
        assert c.node in nodes[1:-1]
        i = nodes.index(c.node)
        assert set(c.pairing) == {sc.true_path[i - 1], sc.true_path[i]}
    assert sc.mask.dtype == bool and sc.mask.shape == (256, 256)
    assert 0.0 <= sc.intensity.min() and sc.intensity.max() <= 1.0


def test_intensity_separates_vessel_from_background():
    sc = generate_scene(4)
    assert sc.intensity[sc.mask].mean() > sc.intensity[~sc.mask].mean() + 0.1


def test_extraction_matches_truth_on_most_scenes(suite50):
    scenes, _ = suite50
    ok = 0
    for sc in scenes:
        try:
            match_graphs(sc.truth_graph, extract_graph(sc.mask).graph)
            ok += 1
        except Exception:
            pass
    assert ok >= 45


def test_false_route_shorter_in_enough_scenes(suite50):
    scenes, manifest = suite50
    k = sum(sc.false_route_shorter for sc in scenes)
    assert k >= 20
    assert manifest["false_route_shorter_fraction"] == k / 50
    assert all(sc.false_route_shorter for sc in scenes if sc.shortcut)


def test_manifest_is_stable(suite50):
    _, manifest = suite50
    again = generate_suite(7, 50)[1]
    assert again["hash"] == manifest["hash"]
    assert [e["digest"] for e in manifest["scenes"]] == [e["digest"] for e in again["scenes"]]
    assert generate_suite(8, 3)[1]["hash"] != manifest["hash"]


def test_single_scene_suite():
    scenes, manifest = generate_suite(1, 1)
    assert len(scenes) == 1 and manifest["n_scenes"] == 1


def test_jobs_do_not_change_suite():
    a = generate_suite(5, 3, jobs=1)[1]
    b = generate_suite(5, 3, jobs=2)[1]
    assert a["hash"] == b["hash"]


def test_crowded_layout_raises_generation_error():
    with pytest.raises(GenerationError, match="no valid layout"):
        generate_scene(3, PhantomConfig(size=128, n_crossings=6, max_retries=30))
    with pytest.raises(GenerationError, match="scene 0"):
        generate_suite(3, 1, PhantomConfig(size=128, n_crossings=6, max_retries=10))


@pytest.mark.parametrize("kw", [dict(size=64), dict(n_crossings=-1), dict(crossing_angle_range=(0.0, 40.0)),
                                dict(crossing_angle_range=(60.0, 30.0)), dict(shortcut_fraction=1.5),
                                dict(main_width_range=(5.0, 3.0))])
def test_invalid_config(kw):
    with pytest.raises(InvalidParameter):
        PhantomConfig(**kw).validate()


def test_config_from_dict_rejects_unknown_keys():
    d = PhantomConfig().to_dict()
    assert PhantomConfig.from_dict(d) == PhantomConfig()
    d["bogus"] = 1
    with pytest.raises((InvalidParameter, ParseError)):
        PhantomConfig.from_dict(d)


def test_suite_round_trip(tmp_path):
    scenes, manifest = generate_suite(2, 3)
    write_suite(scenes, manifest, tmp_path)
    back, man2 = read_suite(tmp_path)
    assert man2 == json.loads(json.dumps(manifest))
    for a, b in zip(scenes, back):
        assert a.digest() == b.digest()


def test_scene_files_are_byte_identical(tmp_path):
    sc = generate_scene(9)
    write_scene(sc, tmp_path / "a")
    write_scene(read_scene(tmp_path / "a"), tmp_path / "b")
    for name in ("mask.png", "intensity.png", "truth.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_corrupted_bundle_names_the_scene(tmp_path):
    scenes, manifest = generate_suite(2, 3)
    write_suite(scenes, manifest, tmp_path)
    (tmp_path / "scene_001" / "truth.json").write_text("{ not json")
    with pytest.raises(ParseError, match=r"scene 1 \(scene_001\)"):
        read_suite(tmp_path)
    (tmp_path / "manifest.json").unlink()
    with pytest.raises(ParseError, match="manifest"):
        read_suite(tmp_path)
