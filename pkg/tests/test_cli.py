import csv
import json

import numpy as np
import pytest

from setret.aggregator import MODEL_VERSION
from setret.cli import main
from setret.engine import SetCollection
from setret.indexio import write_collection
from setret.synth import EmbeddingSpace, gen_gallery, sample_elements, write_gallery

TINY_TRAIN = ["--epochs", "2", "--batches-per-epoch", "3", "--batch-identities", "12", "--K", "4", "--D", "8"]

SMALL_BENCH = {
    "dim": 16, "K": 4, "D": 16,
    "n_train_identities": 60, "n_test_identities": 40, "n_distractor_identities": 12,
    "whitening_sample": 500,
    "stress": {"n_sets": 120, "n_queries": 6, "repeats": 1},
    "setnet": {"epochs": 2, "pretrain_epochs": 1, "batches_per_epoch": 3, "batch_identities": 12},
    "baseline": {"epochs": 1, "batches_per_epoch": 3, "batch_identities": 12},
}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def gallery_file(tmp_path):
    path = tmp_path / "gallery.jsonl"
    write_gallery(path, gen_gallery(30, 8, seed=3, space=EmbeddingSpace(8)))
    return path


@pytest.fixture
def toy(tmp_path, gallery_file, capsys):
    """Trained model plus a 3-set index over identities 0..5 of the gallery."""
    from setret.synth import read_gallery

    centers = np.array([g.center for g in read_gallery(gallery_file)])
    rng = np.random.default_rng(0)
    sets = [sample_elements(centers[[0, 1]], 0.1, rng), sample_elements(centers[[2, 3]], 0.1, rng),
            sample_elements(centers[[0, 4, 5]], 0.1, rng)]
    data = tmp_path / "toy.npz"
    write_collection(data, SetCollection.from_sets(sets, ids=["s01", "s23", "s045"]))
    model = tmp_path / "m.json"
    assert run(capsys, "train", "--gallery", gallery_file, "--out", model, *TINY_TRAIN)[0] == 0
    index = tmp_path / "toy.setn"
    elements = tmp_path / "toy.sete"
    code, _, err = run(capsys, "index", "--model", model, "--dataset", data, "--out", index, "--elements", elements)
    assert code == 0, err
    return {"model": model, "index": index, "elements": elements, "gallery": gallery_file}


class TestGen:
    args = ["gen", "--identities", 50, "--train-identities", 40, "--distractor-identities", 10,
            "--dim", 16, "--seed", 1, "--gallery-only"]

    def test_deterministic_and_line_counts(self, tmp_path, capsys):
        assert run(capsys, *self.args, "--out", tmp_path / "a")[0] == 0
        assert run(capsys, *self.args, "--out", tmp_path / "b")[0] == 0
        for name in ("gallery.jsonl", "train_gallery.jsonl", "distractors.jsonl"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        lines = (tmp_path / "a" / "gallery.jsonl").read_text().splitlines()
        assert len(lines) == 50
        assert len((tmp_path / "a" / "distractors.jsonl").read_text().splitlines()) == 10

    def test_refuses_to_overwrite(self, tmp_path, capsys):
        assert run(capsys, *self.args, "--out", tmp_path)[0] == 0
        code, out, err = run(capsys, *self.args, "--out", tmp_path)
        assert code == 2 and "--force" in err and out == ""
        assert run(capsys, *self.args, "--out", tmp_path, "--force")[0] == 0

    def test_stress_datasets_and_manifest(self, tmp_path, capsys):
        code, _, _ = run(capsys, "gen", "--config", write_config(tmp_path), "--distractors", "0,2",
                         "--out", tmp_path / "g")
        assert code == 0
        manifest = json.loads((tmp_path / "g" / "manifest.json").read_text())
        assert {"sets_d0.npz", "sets_d2.npz", "judgments.jsonl"} <= set(manifest["files"])
        assert manifest["config"]["stress"]["distractors"] == [0, 2]

    def test_bad_range(self, tmp_path, capsys):
        code, _, err = run(capsys, *self.args, "--out", tmp_path, "--distractors", "a..b")
        assert code == 2 and "range" in err


class TestTrain:
    def test_netvlad_model_file(self, tmp_path, gallery_file, capsys):
        out = tmp_path / "m.json"
        code, stdout, _ = run(capsys, "train", "--gallery", gallery_file, "--out", out, "--mode", "netvlad",
                              "--set-size", 3, *TINY_TRAIN, "--json")
        assert code == 0
        doc = json.loads(out.read_text())
        assert doc["mode"] == "netvlad" and doc["version"] == MODEL_VERSION
        assert doc["config"]["train"]["set_size"] == 3
        assert json.loads(stdout)["mode"] == "netvlad"

    def test_average_has_no_netvlad_block(self, tmp_path, gallery_file, capsys):
        out = tmp_path / "avg.json"
        assert run(capsys, "train", "--gallery", gallery_file, "--out", out, "--mode", "average", *TINY_TRAIN)[0] == 0
        doc = json.loads(out.read_text())
        assert doc["mode"] == "average"
        assert not {"K", "a", "b", "c", "W"} & set(doc)

    def test_log_epochs_are_consecutive(self, tmp_path, gallery_file, capsys):
        out = tmp_path / "m.json"
        assert run(capsys, "train", "--gallery", gallery_file, "--out", out, *TINY_TRAIN)[0] == 0
        with open(tmp_path / "m.log.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [int(r["epoch"]) for r in rows] == list(range(1, len(rows) + 1))

    def test_unknown_config_key(self, tmp_path, gallery_file, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text('{"epochz": 3}')
        code, _, err = run(capsys, "train", "--gallery", gallery_file, "--out", tmp_path / "m.json", "--config", cfg)
        assert code == 2 and "epochz" in err

    def test_missing_gallery(self, tmp_path, capsys):
        code, _, err = run(capsys, "train", "--gallery", tmp_path / "nope.jsonl", "--out", tmp_path / "m.json")
        assert code == 2 and "nope.jsonl" in err


class TestQuery:
    def test_toy_index(self, toy, capsys):
        code, out, _ = run(capsys, "query", "--model", toy["model"], "--index", toy["index"],
                           "--gallery", toy["gallery"], "--ids", "0,1", "--topk", 10,
                           "--strategy", "set", "--rerank", 0, "--json")
        assert code == 0
        res = json.loads(out)["results"]
        assert len(res) == 3
        scores = [r["score"] for r in res]
        assert scores == sorted(scores, reverse=True)
        assert res[0]["id"] == "s01"

    @pytest.mark.parametrize("extra", [["--strategy", "element"], ["--rerank", "3"], ["--query-agg"]])
    def test_other_strategies_rank_the_matching_set_first(self, toy, capsys, extra):
        code, out, err = run(capsys, "query", "--model", toy["model"], "--index", toy["index"],
                             "--elements", toy["elements"], "--gallery", toy["gallery"],
                             "--ids", "0,1", *extra)
        assert code == 0, err
        first = out.splitlines()[0].split("\t")
        assert first[:2] == ["1", "s01"]

    def test_pretag(self, toy, capsys):
        code, out, _ = run(capsys, "query", "--model", toy["model"], "--elements", toy["elements"],
                           "--gallery", toy["gallery"], "--ids", "0", "--strategy", "pretag", "--json")
        assert code == 0
        ids = {r["id"] for r in json.loads(out)["results"]}
        assert {"s01", "s045"} <= ids

    def test_pretag_unknown_identity_is_exit_2(self, toy, capsys):
        code, out, err = run(capsys, "query", "--model", toy["model"], "--elements", toy["elements"],
                             "--gallery", toy["gallery"], "--ids", "9999", "--strategy", "pretag")
        assert code == 2 and out == ""
        assert "9999" in err

    def test_model_version_mismatch(self, toy, tmp_path, capsys):
        doc = json.loads(toy["model"].read_text())
        doc["version"] = "setnet-model/0"
        other = tmp_path / "old.json"
        other.write_text(json.dumps(doc))
        code, _, err = run(capsys, "query", "--model", other, "--index", toy["index"],
                           "--gallery", toy["gallery"], "--ids", "0")
        assert code == 2
        assert "setnet-model/0" in err and MODEL_VERSION in err

    def test_index_built_by_other_model(self, toy, tmp_path, capsys):
        other = tmp_path / "other.json"
        run(capsys, "train", "--gallery", toy["gallery"], "--out", other, *TINY_TRAIN, "--seed", 5)
        code, _, err = run(capsys, "query", "--model", other, "--index", toy["index"],
                           "--gallery", toy["gallery"], "--ids", "0")
        assert code == 2 and "built with model" in err

    def test_rerank_needs_elements(self, toy, capsys):
        code, _, err = run(capsys, "query", "--model", toy["model"], "--index", toy["index"],
                           "--gallery", toy["gallery"], "--ids", "0", "--rerank", 2)
        assert code == 2 and "--elements" in err

    def test_reproducible(self, toy, capsys):
        argv = ["query", "--model", toy["model"], "--index", toy["index"], "--gallery", toy["gallery"],
                "--ids", "0,3", "--examples", 3, "--json"]
        assert run(capsys, *argv)[1] == run(capsys, *argv)[1]


def write_config(tmp_path):
    path = tmp_path / "bench.json"
    path.write_text(json.dumps(SMALL_BENCH))
    return path


class TestEval:
    def test_four_rows_per_method(self, tmp_path, capsys):
        code, _, err = run(capsys, "eval", "--config", write_config(tmp_path), "--distractors", "0..3",
                           "--no-timing", "--out", tmp_path / "ev")
        assert code == 0, err
        with open(tmp_path / "ev" / "results.csv") as fh:
            rows = list(csv.DictReader(fh))
        per = {}
        for r in rows:
            per.setdefault(r["method"], []).append(int(r["d"]))
        assert per and all(ds == [0, 1, 2, 3] for ds in per.values())
        assert all(0.0 <= float(r["ndcg10"]) <= 100.0 for r in rows)
        assert len((tmp_path / "ev" / "judgments.jsonl").read_text().splitlines()) == 6

    def test_unknown_method(self, tmp_path, capsys):
        code, _, err = run(capsys, "eval", "--config", write_config(tmp_path), "--methods", "setnet,magic",
                           "--out", tmp_path / "ev")
        assert code == 2 and "magic" in err


def test_gramdiff(tmp_path, gallery_file, capsys):
    model = tmp_path / "m.json"
    run(capsys, "train", "--gallery", gallery_file, "--out", model, *TINY_TRAIN)
    code, out, _ = run(capsys, "gramdiff", "--gallery", gallery_file, "--model", model, "--samples", 5, "--json")
    assert code == 0
    values = json.loads(out)
    assert set(values) == {"elements", "m"}
    assert all(v >= 0 for v in values.values())


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert MODEL_VERSION in capsys.readouterr().out
