import json

import pytest

from certiplan import stl
from certiplan.cli import main
from certiplan.stl import Affine, And, Atomic, Component


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def toy(tmp_path, capsys):
    w = tmp_path / "toy.json"
    code, _, _ = run(capsys, "train", "--model", "identity", "--task", "toy1d", "--seed", 0, "--out", w)
    assert code == 0
    return w


def test_usage_errors(tmp_path, capsys):
    assert run(capsys, "frobnicate")[0] == 2
    assert run(capsys, "certify", "--task", "toy1d")[0] == 2
    code, _, err = run(capsys, "certify", "--task", "toy1d", "--seed", 0,
                       "--weights", tmp_path / "missing.json", "--out", tmp_path / "r.json")
    assert code == 2 and "not found" in err
    assert run(capsys, "train", "--model", "identity", "--task", "umaze", "--seed", 0,
               "--out", tmp_path / "w.json")[0] == 2


def test_version(capsys):
    code, out, _ = run(capsys, "--version")
    assert code == 0 and out.startswith("certiplan ")


def test_toy_certify_pivot(toy, tmp_path, capsys):
    out = tmp_path / "r.json"
    code, stdout, _ = run(capsys, "certify", "--task", "toy1d", "--weights", toy, "--seed", 0,
                          "--pivot", "2", "--out", out)
    assert code == 0
    assert json.loads(stdout)["eps"] == [[1.995]]
    doc = json.loads(out.read_text())
    assert doc["regions"][0]["eps"] == [1.995]
    assert doc["meta"]["provenance"]["seed"] == 0


def test_toy_certify_search(toy, tmp_path, capsys):
    out = tmp_path / "r.json"
    assert run(capsys, "certify", "--task", "toy1d", "--weights", toy, "--seed", 1, "--L", 3,
               "--out", out)[0] == 0
    for r in json.loads(out.read_text())["regions"]:
        assert r["box"]["lower"][0] > 0


def test_unsatisfiable_formula_exits_domain(toy, tmp_path, capsys):
    f = tmp_path / "phi.json"
    f.write_text(stl.dumps(And(Atomic(Component(0)), Atomic(Affine([-1.0], 0.0)))))
    code, _, err = run(capsys, "certify", "--task", "toy1d", "--weights", toy, "--seed", 0, "--L", 3,
                       "--formula", f, "--out", tmp_path / "r.json")
    assert code == 1 and "B = ∅" in err
    assert not (tmp_path / "r.json").exists()


def test_config_hash_stable(toy, tmp_path, capsys):
    hashes = []
    for seed, name in ((0, "a"), (0, "b"), (1, "c")):
        out = tmp_path / f"{name}.json"
        run(capsys, "certify", "--task", "toy1d", "--weights", toy, "--seed", seed, "--L", 2, "--out", out)
        hashes.append(json.loads(out.read_text())["meta"]["provenance"]["config_hash"])
    assert hashes[0] == hashes[1] != hashes[2]


def test_parallel_via_environment(toy, tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("CERTIPLAN_THREADS", "3")
    out = tmp_path / "r.json"
    assert run(capsys, "certify", "--task", "toy1d", "--weights", toy, "--seed", 0, "--L", 4,
               "--out", out)[0] == 0
    monkeypatch.setenv("CERTIPLAN_THREADS", "many")
    assert run(capsys, "certify", "--task", "toy1d", "--weights", toy, "--seed", 0, "--L", 4,
               "--out", out)[0] == 2


def test_sample_loglik_eval_chain(toy, tmp_path, capsys):
    regions = tmp_path / "r.json"
    latents = tmp_path / "z.jsonl"
    report = tmp_path / "report.json"
    run(capsys, "certify", "--task", "toy1d", "--weights", toy, "--seed", 0, "--L", 3, "--out", regions)
    assert run(capsys, "sample", "--weights", toy, "--regions", regions, "--n", 300, "--seed", 4,
               "--out", latents)[0] == 0
    code, stdout, _ = run(capsys, "loglik", "--latents", latents, "--count", 200, "--regions", regions)
    assert code == 0
    ll = json.loads(stdout)
    assert len(ll["per_sample"]) == 200 and ll["provenance"]["command"] == "sample"
    assert ll["log_p_B"] < 0
    code, _, _ = run(capsys, "eval", "--task", "toy1d", "--weights", toy, "--regions", regions,
                     "--latents", latents, "--n", 50, "--seed", 0, "--out", report)
    assert code == 0
    rep = json.loads(report.read_text())
    assert rep["latents"]["violations"] == 0
    assert rep["latents"]["provenance"]["seed"] == 4
    assert rep["acceptance"]["certified"]["ratio"] == 1.0
    assert rep["acceptance"]["guidance"]["ratio"] == 1.0
    assert rep["acceptance"]["original"]["ratio"] < 1.0
    assert rep["provenance"]["inputs"]


def test_eval_without_regions_is_usage_error(toy, tmp_path, capsys):
    assert run(capsys, "eval", "--task", "toy1d", "--weights", toy, "--seed", 0,
               "--out", tmp_path / "o.json")[0] == 2
    assert run(capsys, "eval", "--task", "toy1d", "--weights", toy, "--seed", 0, "--methods", "bogus",
               "--out", tmp_path / "o.json")[0] == 2


def test_tampered_weights_rejected(toy, tmp_path, capsys):
    regions = tmp_path / "r.json"
    run(capsys, "certify", "--task", "toy1d", "--weights", toy, "--seed", 0, "--L", 2, "--out", regions)
    doc = json.loads(toy.read_text())
    doc["layers"][0]["W"][0][0] = 1.5
    toy.write_text(json.dumps(doc))
    code, _, err = run(capsys, "eval", "--task", "toy1d", "--weights", toy, "--regions", regions,
                       "--seed", 0, "--n", 5, "--out", tmp_path / "o.json")
    assert code == 1 and "hash mismatch" in err


def test_export_graph_and_verify(toy, tmp_path, capsys):
    graph = tmp_path / "g.json"
    box = tmp_path / "box.json"
    assert run(capsys, "export-graph", "--task", "toy1d", "--weights", toy, "--out", graph)[0] == 0
    box.write_text(json.dumps({"lower": [1.0], "upper": [3.0]}))
    code, stdout, _ = run(capsys, "verify", "--graph", graph, "--box", box)
    res = json.loads(stdout)
    assert code == 0 and (res["rob_lower"], res["rob_upper"]) == (1.0, 3.0) and res["bool_lower"] == 1
    code, stdout, _ = run(capsys, "verify", "--task", "toy1d", "--weights", toy, "--box", box,
                          "--method", "ibp")
    assert code == 0 and json.loads(stdout)["rob_lower"] == 1.0
    box.write_text(json.dumps({"lower": [1.0, 0.0], "upper": [3.0, 1.0]}))
    assert run(capsys, "verify", "--graph", graph, "--box", box)[0] == 2
    assert run(capsys, "verify", "--box", box)[0] == 2


def test_small_planning_pipeline(tmp_path, capsys):
    data = tmp_path / "d.jsonl"
    w = tmp_path / "w.json"
    assert run(capsys, "gen-data", "--task", "obstacles", "--seed", 0, "--n", 6, "--nodes", 150,
               "--out", data)[0] == 0
    assert run(capsys, "train", "--model", "gan", "--task", "obstacles", "--data", data, "--seed", 0,
               "--iters", 3, "--batch", 4, "--out", w)[0] == 0
    code, stdout, _ = run(capsys, "plot", "--task", "obstacles", "--data", data,
                          "--out-dir", tmp_path / "fig")
    assert code == 0 and json.loads(stdout)["svg"].endswith(".svg")
    assert run(capsys, "plot", "--task", "obstacles", "--report", data, "--out-dir", tmp_path / "fig")[0] == 2
    # a dataset for another task is refused
    code, _, err = run(capsys, "train", "--model", "ddim", "--task", "umaze", "--data", data, "--seed", 0,
                       "--iters", 1, "--out", w)
    assert code == 2 and "shape" in err
