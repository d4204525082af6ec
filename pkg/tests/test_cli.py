import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from polyagg.cli import (
    EXIT_DATA,
    EXIT_NUMERICAL,
    EXIT_OK,
    EXIT_USAGE,
    UsageError,
    main,
    parse_h_target,
    resolve_config,
)
from polyagg.gnn.model import GnnModel, save_model
from polyagg.mesh import generate_mesh, load_mesh, save_mesh


@pytest.fixture
def work(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("POLYAGG_SEED", raising=False)
    return tmp_path


def echo(path):
    return json.loads((path.parent / (path.name + ".config.json")).read_text())


# -- configuration ----------------------------------------------------------------------
def test_train_defaults():
    cfg = resolve_config("train", {}, environ={})
    assert (cfg["lr"], cfg["l2"], cfg["batch"], cfg["epochs"]) == (1e-5, 1e-5, 4, 300)
    assert (cfg["train_per_type"], cfg["val_per_type"]) == (200, 50)
    assert cfg["seed"] == 0


def test_config_precedence(work):
    (work / "c.toml").write_text('seed = 3\nepochs = 7\n[train]\nepochs = 9\nlr = 0.5\n')
    cfg = resolve_config("train", {}, "c.toml", environ={"POLYAGG_SEED": "11"})
    assert (cfg["seed"], cfg["epochs"], cfg["lr"]) == (3, 9, 0.5)
    cfg = resolve_config("train", {"epochs": 2, "seed": 5}, "c.toml", environ={})
    assert (cfg["seed"], cfg["epochs"], cfg["lr"]) == (5, 2, 0.5)
    assert resolve_config("train", {}, environ={"POLYAGG_SEED": "11"})["seed"] == 11
    (work / "c.json").write_text('{"agglomerate": {"h-target": "2h0"}}')
    assert resolve_config("agglomerate", {}, "c.json", environ={})["h_target"] == "2h0"
    with pytest.raises(UsageError):
        resolve_config("train", {}, environ={"POLYAGG_SEED": "x"})


def test_parse_h_target():
    assert parse_h_target("4h0", 0.25) == 1.0
    assert parse_h_target("1.5h0", 2.0) == 3.0
    assert parse_h_target("0.3", 2.0) == 0.3
    for bad in ("h0", "-1", "0h0", "abc"):
        with pytest.raises(UsageError):
            parse_h_target(bad, 1.0)


# -- generate -----------------------------------------------------------------------------
def test_generate_single_mesh(work):
    assert main(["generate", "--kind", "voronoi", "--n", "30", "--seed", "4", "--out", "v.txt"]) == 0
    mesh = load_mesh("v.txt")
    assert mesh.n_cells == 30
    np.testing.assert_array_equal(mesh.vertices, generate_mesh("voronoi", 30, 4).vertices)
    assert echo(work / "v.txt")["seed"] == 4


def test_generate_dataset_and_rerun(work):
    args = ["generate", "--count", "2", "--out-dir", "d1", "--seed", "1", "--grid-range", "3,5",
            "--voronoi-range", "10,20"]
    assert main(args) == 0
    assert main(args[:4] + ["d2"] + args[5:]) == 0
    man = json.loads((work / "d1" / "manifest.json").read_text())
    assert man["version"] == 1 and len(man["meshes"]) == 8
    assert {e["kind"] for e in man["meshes"]} == {"squares", "triangles", "random-triangles",
                                                  "voronoi"}
    for e in man["meshes"]:
        assert (work / "d1" / e["file"]).read_bytes() == (work / "d2" / e["file"]).read_bytes()
        assert set(e) == {"file", "kind", "n", "seed"}
    assert (work / "d1" / "config.json").exists()


def test_generate_empty_manifest(work):
    assert main(["generate", "--count", "0", "--out-dir", "empty"]) == EXIT_OK
    assert json.loads((work / "empty" / "manifest.json").read_text())["meshes"] == []


def test_generate_usage_errors(work, capsys):
    assert main(["generate"]) == EXIT_USAGE
    assert main(["generate", "--count", "-1", "--out-dir", "x"]) == EXIT_USAGE
    assert main(["generate", "--kind", "hexagons", "--out", "x"]) == EXIT_USAGE
    assert main([]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE
    assert "error" in capsys.readouterr().err


# -- train ---------------------------------------------------------------------------------
def test_train_smoke(work):
    for name, seed in (("tr", 1), ("va", 2)):
        assert main(["generate", "--count", "1", "--out-dir", name, "--seed", str(seed),
                     "--grid-range", "3,4", "--voronoi-range", "10,15"]) == 0
    assert main(["train", "--train-manifest", "tr/manifest.json", "--val-manifest",
                 "va/manifest.json", "--epochs", "5", "--out", "m.json"]) == 0
    rows = list(csv.DictReader((work / "m.history.csv").open()))
    assert len(rows) == 5
    assert [int(r["epoch"]) for r in rows] == [1, 2, 3, 4, 5]
    assert all(np.isfinite(float(r["val_loss"])) for r in rows)
    assert (work / "m.final.json").exists()
    cfg = echo(work / "m.json")
    assert (cfg["lr"], cfg["l2"], cfg["batch"], cfg["epochs"]) == (1e-5, 1e-5, 4, 5)


def test_train_missing_manifest(work, capsys):
    assert main(["train", "--train-manifest", "nope.json", "--epochs", "1"]) == EXIT_DATA
    assert "nope.json" in capsys.readouterr().err
    (work / "bad.json").write_text("{not json")
    assert main(["train", "--train-manifest", "bad.json", "--epochs", "1"]) == EXIT_DATA
    assert "invalid manifest" in capsys.readouterr().err


def test_train_divergence_exit_code(work, capsys):
    code = main(["train", "--train-per-type", "1", "--val-per-type", "1", "--epochs", "2",
                 "--lr", "1e308", "--out", "m.json"])
    assert code == EXIT_NUMERICAL
    assert "numerical" in capsys.readouterr().err


# -- agglomerate / hierarchy / metrics ------------------------------------------------------
@pytest.fixture
def square_mesh(work):
    save_mesh(generate_mesh("squares", 16), work / "sq.txt")
    return work / "sq.txt"


@pytest.fixture
def model_file(work):
    save_model(GnnModel.init(seed=0), work / "model.json")
    return work / "model.json"


def test_agglomerate_kmeans_then_gnn(square_mesh, model_file, work):
    assert main(["agglomerate", "--mesh", "sq.txt", "--method", "kmeans", "--out", "k.json"]) == 0
    assert main(["agglomerate", "--mesh", "sq.txt", "--method", "gnn", "--model", "model.json",
                 "--out", "g.json"]) == 0
    k = json.loads((work / "k.json").read_text())
    g = json.loads((work / "g.json").read_text())
    assert k["version"] == 1 and k["method"] == "kmeans" and g["method"] == "gnn"
    assert len(k["levels"]) == 1 and len(k["levels"][0]["assignment"]) == 256
    assert k["levels"][0]["h_target"] == pytest.approx(4 * np.sqrt(2) / 16)
    assert len(set(k["levels"][0]["assignment"])) == 16
    for name in ("k.json", "g.json"):
        assert main(["metrics", "--mesh", "sq.txt", "--agg", name, "--out", name + ".m"]) == 0
    km = json.loads((work / "k.json.m").read_text())["levels"][0]
    assert km["uf_mean"] == pytest.approx(1.0, abs=1e-12)
    assert km["cr_mean"] == pytest.approx(1 / np.sqrt(2), rel=1e-3)


def test_agglomerate_errors(square_mesh, work, capsys):
    assert main(["agglomerate", "--mesh", "sq.txt", "--method", "gnn"]) == EXIT_USAGE
    assert main(["agglomerate", "--method", "kmeans"]) == EXIT_USAGE
    assert main(["agglomerate", "--mesh", "sq.txt", "--h-target", "bogus"]) == EXIT_USAGE
    assert main(["agglomerate", "--mesh", "missing.txt"]) == EXIT_DATA
    (work / "broken.txt").write_text("garbage\n")
    assert main(["agglomerate", "--mesh", "broken.txt"]) == EXIT_DATA
    (work / "junk.json").write_text('{"magic": "other"}')
    assert main(["agglomerate", "--mesh", "sq.txt", "--method", "gnn", "--model",
                 "junk.json"]) == EXIT_DATA
    capsys.readouterr()


def test_hierarchy_three_levels(square_mesh, work):
    assert main(["hierarchy", "--mesh", "sq.txt", "--factors", "2,4,8", "--out", "h.json"]) == 0
    doc = json.loads((work / "h.json").read_text())
    levels = [np.array(l["assignment"]) for l in doc["levels"]]
    assert [len(set(a.tolist())) for a in levels] == [64, 16, 4]
    for fine, coarse in zip(levels, levels[1:]):
        # every finer coarse cell lies inside one coarser cell
        for c in np.unique(fine):
            assert len(np.unique(coarse[fine == c])) == 1
    assert main(["hierarchy", "--mesh", "sq.txt", "--factors", "4,2"]) == EXIT_USAGE


def test_metrics_identity(work):
    save_mesh(generate_mesh("squares", 6), work / "s.txt")
    assert main(["metrics", "--mesh", "s.txt", "--out", "m.json"]) == 0
    lvl = json.loads((work / "m.json").read_text())["levels"][0]
    np.testing.assert_allclose(lvl["uf_values"], 1.0, rtol=1e-12)
    assert len(lvl["uf_values"]) == 36
    assert max(lvl["uf_values"]) == 1.0


def test_metrics_rejects_corrupt_agglomeration(square_mesh, work):
    (work / "a.json").write_text(json.dumps({"version": 1, "levels": [{"assignment": [0, 1]}]}))
    assert main(["metrics", "--mesh", "sq.txt", "--agg", "a.json"]) == EXIT_DATA
    (work / "b.json").write_text(json.dumps({"version": 2, "levels": []}))
    assert main(["metrics", "--mesh", "sq.txt", "--agg", "b.json"]) == EXIT_DATA


def test_metrics_table(work):
    assert main(["metrics", "--table", "--n", "8", "--voronoi-n", "60", "--out", "q.csv"]) == 0
    rows = list(csv.DictReader((work / "q.csv").open()))
    assert len(rows) == 8
    sq = {r["method"]: r for r in rows if r["mesh_kind"] == "squares"}
    assert float(sq["kmeans"]["uf_mean"]) == 1.0


# -- bench and reproducibility ---------------------------------------------------------------
def test_bench_csv(work):
    assert main(["bench", "--sizes", "25,50", "--samples", "2", "--out", "r.csv"]) == 0
    rows = list(csv.DictReader((work / "r.csv").open()))
    assert len(rows) == 2 * 2 * 2
    assert set(rows[0]) == {"method", "n_elements", "sample_idx", "seconds"}
    assert all(float(r["seconds"]) > 0 for r in rows)


def test_outputs_byte_identical(square_mesh, model_file, work, monkeypatch):
    monkeypatch.setenv("POLYAGG_SEED", "9")
    for out in ("a", "b"):
        assert main(["hierarchy", "--mesh", "sq.txt", "--method", "multilevel",
                     "--out", f"{out}.json"]) == 0
        assert main(["agglomerate", "--mesh", "sq.txt", "--method", "gnn", "--model",
                     "model.json", "--out", f"{out}g.json"]) == 0
    for x, y in (("a.json", "b.json"), ("ag.json", "bg.json")):
        assert (work / x).read_bytes() == (work / y).read_bytes()
    assert echo(work / "a.json")["seed"] == 9


def test_console_script_entry_point(work):
    out = subprocess.run([sys.executable, "-m", "polyagg.cli", "generate", "--n", "3",
                          "--out", "s.txt"], capture_output=True, text=True)
    assert out.returncode == 0, out.stderr
    assert load_mesh(work / "s.txt").n_cells == 9
    out = subprocess.run([sys.executable, "-m", "polyagg.cli", "train", "--bogus"],
                         capture_output=True, text=True)
    assert out.returncode == EXIT_USAGE
