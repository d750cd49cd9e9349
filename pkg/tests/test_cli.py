import csv
import json
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from vesselroute.cli import EXIT_DOMAIN, EXIT_OK, EXIT_USAGE, PipelineConfig, load_config, main, resolve_node
from vesselroute.errors import InvalidParameter, ParseError
from vesselroute.evalx import training_samples
from vesselroute.gat import GatConfig, save_model, train
from vesselroute.phantom import read_suite
from vesselroute.raster import save_image
from vesselroute.seg_losses import LossConfig, dice_loss, focal_tversky_loss, hybrid_total_loss
from vesselroute.vessel_graph import KeyNode, VesselGraph, load_graph


def files_of(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen-phantom", "--out", str(d / "suite"), "--seed", "3", "--scenes", "4", "--quiet"]) == EXIT_OK
    assert main(["train", "--suite", str(d / "suite"), "--out", str(d / "model.json"),
                 "--epochs", "20", "--lr", "0.5", "--hidden-dim", "4", "--heads", "2", "2"]) == EXIT_OK
    return d


def two_bars(tmp_path):
    m = np.zeros((40, 60), bool)
    m[8:12, 5:55] = True
    m[28:32, 5:55] = True
    p = tmp_path / "bars.png"
    save_image(p, m.astype(float), bits=8)
    return p


# --- generation ---------------------------------------------------------------

def test_gen_phantom_is_byte_identical(tmp_path, workdir):
    assert main(["gen-phantom", "--out", str(tmp_path / "again"), "--seed", "3", "--scenes", "4",
                 "--quiet"]) == EXIT_OK
    assert files_of(tmp_path / "again") == files_of(workdir / "suite")


def test_gen_phantom_reports_manifest_hash(tmp_path, capsys):
    assert main(["gen-phantom", "--out", str(tmp_path / "s"), "--scenes", "1", "--crossings", "0"]) == EXIT_OK
    out = capsys.readouterr().out
    manifest = json.loads((tmp_path / "s" / "manifest.json").read_text())
    assert manifest["hash"] in out and manifest["config"]["n_crossings"] == 0


def test_gen_phantom_needs_out():
    with pytest.raises(SystemExit) as exc:
        main(["gen-phantom"])
    assert exc.value.code == EXIT_USAGE


def test_gen_phantom_invalid_size_is_usage_error(tmp_path):
    assert main(["gen-phantom", "--out", str(tmp_path / "s"), "--size", "64"]) == EXIT_USAGE


def test_gen_phantom_crowded_is_domain_error(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"phantom": {"size": 128, "n_crossings": 6, "max_retries": 5}}))
    code = main(["--config", str(cfg), "gen-phantom", "--out", str(tmp_path / "s"), "--scenes", "1"])
    assert code == EXIT_DOMAIN
    assert "scene 0" in capsys.readouterr().err


# --- training -----------------------------------------------------------------

def test_train_is_byte_identical(tmp_path, workdir):
    assert main(["train", "--suite", str(workdir / "suite"), "--out", str(tmp_path / "model.json"),
                 "--epochs", "20", "--lr", "0.5", "--hidden-dim", "4", "--heads", "2", "2"]) == EXIT_OK
    assert (tmp_path / "model.json").read_bytes() == (workdir / "model.json").read_bytes()
    assert (tmp_path / "model_train.csv").read_bytes() == (workdir / "model_train.csv").read_bytes()


def test_train_log_format(workdir):
    rows = list(csv.reader((workdir / "model_train.csv").open()))
    assert rows[0] == ["epoch", "loss", "accuracy"]
    assert [int(r[0]) for r in rows[1:]] == list(range(21))
    for r in rows[1:]:
        assert float(r[1]) > 0 and 0.0 <= float(r[2]) <= 1.0


def test_train_zero_epochs_equals_initialisation(tmp_path, workdir):
    assert main(["train", "--suite", str(workdir / "suite"), "--out", str(tmp_path / "m0.json"),
                 "--epochs", "0", "--seed", "4"]) == EXIT_OK
    scenes, _ = read_suite(workdir / "suite")
    init, records = train(training_samples(scenes), GatConfig(epochs=0), seed=4)
    assert len(records) == 1
    save_model(init, tmp_path / "lib.json")
    assert (tmp_path / "m0.json").read_bytes() == (tmp_path / "lib.json").read_bytes()


def test_train_npz_output(tmp_path, workdir):
    assert main(["train", "--suite", str(workdir / "suite"), "--out", str(tmp_path / "m.npz"),
                 "--epochs", "2"]) == EXIT_OK
    assert (tmp_path / "m.npz").stat().st_size > 0 and (tmp_path / "m_train.csv").exists()


def test_train_on_unlabeled_suite_fails(tmp_path, workdir, capsys):
    import shutil

    shutil.copytree(workdir / "suite", tmp_path / "suite")
    for truth in (tmp_path / "suite").glob("scene_*/truth.json"):
        doc = json.loads(truth.read_text())
        for e in doc["graph"]["edges"]:
            e["label"] = None
        truth.write_text(json.dumps(doc))
    code = main(["train", "--suite", str(tmp_path / "suite"), "--out", str(tmp_path / "m.json")])
    assert code == EXIT_DOMAIN
    assert "no labeled edges" in capsys.readouterr().err


def test_corrupted_suite_names_the_scene(tmp_path, workdir, capsys):
    import shutil

    shutil.copytree(workdir / "suite", tmp_path / "suite")
    (tmp_path / "suite" / "scene_002" / "mask.png").write_bytes(b"not a png")
    code = main(["train", "--suite", str(tmp_path / "suite"), "--out", str(tmp_path / "m.json")])
    assert code == EXIT_USAGE
    assert "scene 2 (scene_002)" in capsys.readouterr().err


# --- configuration ------------------------------------------------------------

def test_flags_override_config_file(tmp_path, workdir, monkeypatch):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"version": 1, "epochs": 3, "hidden_dim": 4, "heads": [2]}))
    assert main(["--config", str(cfg), "train", "--suite", str(workdir / "suite"),
                 "--out", str(tmp_path / "a.json")]) == EXIT_OK
    assert len((tmp_path / "a_train.csv").read_text().splitlines()) == 1 + 4
    assert main(["--config", str(cfg), "train", "--suite", str(workdir / "suite"),
                 "--out", str(tmp_path / "b.json"), "--epochs", "1"]) == EXIT_OK
    assert len((tmp_path / "b_train.csv").read_text().splitlines()) == 1 + 2
    monkeypatch.setenv("VESSELROUTE_CONFIG", str(cfg))
    assert main(["train", "--suite", str(workdir / "suite"), "--out", str(tmp_path / "c.json")]) == EXIT_OK
    assert (tmp_path / "c.json").read_bytes() == (tmp_path / "a.json").read_bytes()


def test_config_round_trip_and_rejections(tmp_path, monkeypatch):
    cfg = PipelineConfig(tau=0.4, heads=(2, 3), spacing=(0.5, 0.5))
    assert PipelineConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ParseError, match="unknown config keys"):
        PipelineConfig.from_dict({"taux": 1})
    with pytest.raises(ParseError, match="version"):
        PipelineConfig.from_dict({"version": 99})
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    with pytest.raises(ParseError):
        load_config(bad)
    with pytest.raises(InvalidParameter):
        PipelineConfig(lambda_d=-1.0).validate()
    monkeypatch.delenv("VESSELROUTE_CONFIG", raising=False)
    assert load_config(None) == PipelineConfig()


def test_bad_config_exits_usage(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nope": 1}))
    assert main(["--config", str(bad), "losses", "--pred", "x", "--target", "y"]) == EXIT_USAGE


# --- graph, plan, render ------------------------------------------------------

def test_graph_build_and_dump(tmp_path, workdir, capsys):
    mask = workdir / "suite" / "scene_000" / "mask.png"
    assert main(["graph", str(mask), "--out", str(tmp_path / "g.json")]) == EXIT_OK
    capsys.readouterr()
    assert main(["graph", "--dump", str(tmp_path / "g.json")]) == EXIT_OK
    dumped = capsys.readouterr().out
    assert dumped == (tmp_path / "g.json").read_text()
    g = load_graph(tmp_path / "g.json")
    assert len(g.nodes) >= 2
    assert main(["graph"]) == EXIT_USAGE


def test_plan_with_model_and_render(tmp_path, workdir):
    scene = workdir / "suite" / "scene_000"
    truth = json.loads((scene / "truth.json").read_text())
    pos = {n["id"]: n["position"] for n in truth["graph"]["nodes"]}
    src = "{},{}".format(*pos[truth["source"]])
    tgt = "{},{}".format(*pos[truth["target"]])
    args = ["plan", "--mask", str(scene / "mask.png"), "--intensity", str(scene / "intensity.png"),
            "--model", str(workdir / "model.json"), "--source", src, "--target", tgt,
            "--out", str(tmp_path / "p.json"), "--render", str(tmp_path / "p.png")]
    assert main(args) == EXIT_OK
    doc = json.loads((tmp_path / "p.json").read_text())
    assert doc["planner"] == "proposed" and len(doc["edges"]) >= 1
    assert len(doc["nodes"]) == len(doc["edges"]) + 1
    values = set(np.unique(np.asarray(Image.open(tmp_path / "p.png"))).tolist())
    assert values == {0, 96, 176, 255}
    first = (tmp_path / "p.json").read_bytes()
    assert main(args) == EXIT_OK
    assert (tmp_path / "p.json").read_bytes() == first

    assert main(["render", "--mask", str(scene / "mask.png"), "--plan", str(tmp_path / "p.json"),
                 "--out", str(tmp_path / "r.png")]) == EXIT_OK
    assert {0, 96, 255} <= set(np.unique(np.asarray(Image.open(tmp_path / "r.png"))).tolist())


def test_plan_proposed_needs_model(tmp_path):
    mask = two_bars(tmp_path)
    assert main(["plan", "--mask", str(mask), "--source", "0", "--target", "1"]) == EXIT_USAGE


def test_plan_without_route_is_domain_error(tmp_path, capsys):
    mask = two_bars(tmp_path)
    code = main(["plan", "--mask", str(mask), "--planner", "shortest", "--source", "10,5", "--target", "30,54"])
    assert code == EXIT_DOMAIN
    assert "error" in capsys.readouterr().err


def test_plan_on_one_bar_prints_json(tmp_path, capsys):
    mask = two_bars(tmp_path)
    code = main(["plan", "--mask", str(mask), "--planner", "heuristic", "--source", "10,5", "--target", "10,54"])
    assert code == EXIT_OK
    doc = json.loads(capsys.readouterr().out)
    assert doc["planner"] == "heuristic" and len(doc["edges"]) == 1


def test_missing_inputs_are_usage_errors(tmp_path, capsys):
    assert main(["plan", "--mask", str(tmp_path / "nope.png"), "--planner", "shortest",
                 "--source", "0", "--target", "1"]) == EXIT_USAGE
    assert capsys.readouterr().out == ""
    mask = two_bars(tmp_path)
    assert main(["plan", "--mask", str(mask), "--model", str(tmp_path / "nope.json"),
                 "--source", "0", "--target", "1"]) == EXIT_USAGE
    assert main(["plan", "--mask", str(mask), "--planner", "shortest", "--source", "99",
                 "--target", "0"]) == EXIT_USAGE
    assert main(["plan", "--mask", str(mask), "--planner", "shortest", "--source", "a,b",
                 "--target", "0"]) == EXIT_USAGE


def test_resolve_node_snaps_with_low_id_ties():
    g = VesselGraph([KeyNode(0, (0, 0), "endpoint"), KeyNode(1, (0, 10), "endpoint")], [])
    assert resolve_node(g, "0,4") == 0
    assert resolve_node(g, "0,6") == 1
    assert resolve_node(g, "0,5") == 0
    assert resolve_node(g, " 1 ") == 1


# --- eval ---------------------------------------------------------------------

def test_eval_outputs_and_determinism(tmp_path, workdir, capsys):
    base = ["eval", "--suite", str(workdir / "suite"), "--model", str(workdir / "model.json")]
    assert main(base + ["--out", str(tmp_path / "a")]) == EXIT_OK
    table = capsys.readouterr().out
    assert "Learned traversability" in table and "Shortest" in table
    assert main(base + ["--out", str(tmp_path / "b"), "--json-only"]) == EXIT_OK
    assert capsys.readouterr().out == ""
    assert sorted(files_of(tmp_path / "a")) == ["report.csv", "report.json"]
    assert sorted(files_of(tmp_path / "b")) == ["report.json"]
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()
    assert main(base + ["--out", str(tmp_path / "c"), "--jobs", "2"]) == EXIT_OK
    assert files_of(tmp_path / "c") == files_of(tmp_path / "a")


def test_eval_proposed_needs_model(tmp_path, workdir):
    assert main(["eval", "--suite", str(workdir / "suite"), "--out", str(tmp_path / "r")]) == EXIT_USAGE
    assert main(["eval", "--suite", str(workdir / "suite"), "--out", str(tmp_path / "r"),
                 "--planners", "shortest"]) == EXIT_OK


def test_jobs_must_be_positive(tmp_path, workdir):
    assert main(["eval", "--suite", str(workdir / "suite"), "--out", str(tmp_path / "r"),
                 "--planners", "shortest", "--jobs", "0"]) == EXIT_USAGE


# --- losses -------------------------------------------------------------------

def test_losses_match_library(tmp_path, capsys, rng):
    pred = rng.uniform(size=(16, 16))
    target = rng.uniform(size=(16, 16)) > 0.5
    save_image(tmp_path / "p.png", pred, bits=16)
    save_image(tmp_path / "t.png", target.astype(float), bits=8)
    assert main(["losses", "--pred", str(tmp_path / "p.png"), "--target", str(tmp_path / "t.png")]) == EXIT_OK
    out = dict(line.split() for line in capsys.readouterr().out.splitlines())
    p = np.round(pred * 65535) / 65535
    assert float(out["dice"]) == pytest.approx(dice_loss(p, target), abs=1e-9)
    assert float(out["focal_tversky"]) == pytest.approx(focal_tversky_loss(p, target), abs=1e-9)
    assert float(out["hybrid"]) == pytest.approx(hybrid_total_loss(p, p, target, LossConfig()), abs=1e-9)


def test_losses_shape_mismatch_is_domain_error(tmp_path):
    save_image(tmp_path / "p.png", np.zeros((8, 8)), bits=8)
    save_image(tmp_path / "t.png", np.zeros((8, 9)), bits=8)
    assert main(["losses", "--pred", str(tmp_path / "p.png"), "--target", str(tmp_path / "t.png")]) == EXIT_DOMAIN


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "vesselroute", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and "vesselroute" in out.stdout
