from __future__ import annotations

import csv
import json

import numpy as np
import pytest

from conftest import ALC_0315
from lipidlm.cli import EXIT_CHECKPOINT, EXIT_CONFIG, EXIT_OK, main
from lipidlm.projection import pca_project

TINY = {
    "generator": {"n_lipids": 60, "seed": 7},
    "model": {"preset": "desk", "overrides": {"n_layers": 1, "hidden": 32, "n_heads": 2, "ffn_dim": 64,
                                              "regression_dims": [16, 16]}},
    "training": {"pretrain": {"epochs": 1, "batch_size": 32},
                 "finetune": {"epochs": 2, "batch_size": 32, "lr": 1e-3}},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    config = root / "run.json"
    config.write_text(json.dumps(TINY))
    assert main(["gen-corpus", "--config", str(config), "--out", str(root / "corpus")]) == EXIT_OK
    assert main(["pretrain", "--config", str(config), "--corpus", str(root / "corpus"),
                 "--tasks", "mlm,headtail", "--out", str(root / "pre")]) == EXIT_OK
    records = [json.loads(line) for line in (root / "corpus" / "corpus.jsonl").read_text().splitlines()]
    data = root / "labeled.jsonl"
    data.write_text("".join(json.dumps({"smiles": r["canonical_smiles"], "value": r["synth_property"]}) + "\n"
                            for r in records))
    return root, config, data


class TestGenCorpus:
    def test_outputs(self, workspace, capsys):
        root, *_ = workspace
        lines = (root / "corpus" / "corpus.jsonl").read_text().splitlines()
        assert len(lines) == 60
        assert set(json.loads(lines[0])) == {"id", "canonical_smiles", "n_tails", "connecting_atom",
                                             "atom_regions", "provenance", "synth_property"}
        manifest = json.loads((root / "corpus" / "split.json").read_text())
        assert [len(manifest[k]) for k in ("train", "validation", "test")] == [48, 6, 6]

    def test_resolved_reproduces(self, workspace, tmp_path):
        root, *_ = workspace
        resolved = root / "corpus.resolved.json"
        doc = json.loads(resolved.read_text())
        assert doc["generator"]["n_lipids"] == 60 and doc["io"]["log_level"] == "INFO"
        assert main(["gen-corpus", "--config", str(resolved), "--out", str(tmp_path / "again")]) == EXIT_OK
        assert (tmp_path / "again" / "corpus.jsonl").read_bytes() == \
            (root / "corpus" / "corpus.jsonl").read_bytes()

    def test_seed_flag(self, workspace, tmp_path):
        _, config, _ = workspace
        for name in ("a", "b"):
            assert main(["gen-corpus", "--config", str(config), "--seed", "3",
                         "--out", str(tmp_path / name)]) == EXIT_OK
        assert (tmp_path / "a" / "corpus.jsonl").read_bytes() == (tmp_path / "b" / "corpus.jsonl").read_bytes()

    def test_zero_lipids(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"generator": {"n_lipids": 0}}))
        assert main(["gen-corpus", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_CONFIG

    @pytest.mark.parametrize("doc", [{"generatr": {}}, {"generator": {"bogus": 1}},
                                     {"model": {"preset": "huge"}}, {"io": {"colour": True}}])
    def test_unknown_keys(self, tmp_path, doc):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps(doc))
        assert main(["gen-corpus", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_CONFIG


class TestPretrain:
    def test_outputs(self, workspace):
        root, *_ = workspace
        assert (root / "pre" / "checkpoint" / "params.bin").exists()
        assert (root / "pre.resolved.json").exists()
        lines = (root / "pre" / "metrics.jsonl").read_text().splitlines()
        assert "header" in json.loads(lines[0])

    def test_mlm_required(self, workspace):
        root, config, _ = workspace
        code = main(["pretrain", "--config", str(config), "--corpus", str(root / "corpus"),
                     "--tasks", "ntails", "--out", str(root / "x")])
        assert code == EXIT_CONFIG

    def test_missing_corpus(self, tmp_path):
        assert main(["pretrain", "--corpus", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == EXIT_CONFIG


class TestFinetune:
    def test_prints_r2(self, workspace, capsys):
        root, config, data = workspace
        code = main(["finetune", "--config", str(config), "--checkpoint", str(root / "pre" / "checkpoint"),
                     "--data", str(data), "--out", str(root / "ft")])
        assert code == EXIT_OK
        line = next(l for l in capsys.readouterr().out.splitlines() if l.startswith("best validation R2"))
        value = line.rsplit(" ", 1)[1]
        assert len(value.split(".")[1]) == 4

    def test_empty(self, workspace, tmp_path):
        root, config, _ = workspace
        empty = tmp_path / "empty.jsonl"
        empty.write_text("")
        code = main(["finetune", "--config", str(config), "--checkpoint", str(root / "pre" / "checkpoint"),
                     "--data", str(empty), "--out", str(tmp_path / "o")])
        assert code == EXIT_CONFIG

    def test_bad_checkpoint(self, workspace, tmp_path):
        _, config, data = workspace
        code = main(["finetune", "--config", str(config), "--checkpoint", str(tmp_path / "missing"),
                     "--data", str(data), "--out", str(tmp_path / "o")])
        assert code == EXIT_CHECKPOINT

    def test_evaluate(self, workspace, capsys):
        root, config, data = workspace
        if not (root / "ft" / "checkpoint").exists():
            pytest.skip("needs the fine-tune run")
        assert main(["evaluate", "--checkpoint", str(root / "ft" / "checkpoint"), "--data", str(data)]) == EXIT_OK
        report = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert report["n"] == 60 and "r2" in report
        assert main(["evaluate", "--config", str(config), "--checkpoint", str(root / "pre" / "checkpoint"),
                     "--corpus", str(root / "corpus")]) == EXIT_OK
        report = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert set(report["accuracy"]) >= {"mlm", "headtail"}


class TestAnalyze:
    def test_alc_0315(self, capsys):
        assert main(["analyze", "--smiles", ALC_0315, "--json"]) == EXIT_OK
        row = json.loads(capsys.readouterr().out)
        assert row["n_tails"] == 4

    def test_partial_failure(self, capsys):
        assert main(["analyze", "--smiles", "not-smiles", "CCO"]) == EXIT_OK
        out = capsys.readouterr().out.splitlines()
        assert "error" in out[0] and out[1].startswith("1\tCCO")

    def test_all_fail(self):
        assert main(["analyze", "--smiles", "not-smiles"]) == EXIT_CONFIG

    def test_corpus_file(self, workspace, capsys):
        root, *_ = workspace
        capsys.readouterr()
        assert main(["analyze", "--file", str(root / "corpus" / "corpus.jsonl"), "--json"]) == EXIT_OK
        rows = [json.loads(l) for l in capsys.readouterr().out.splitlines()]
        records = [json.loads(l) for l in (root / "corpus" / "corpus.jsonl").read_text().splitlines()]
        assert len(rows) == 60
        for row, rec in zip(rows, records):
            assert row["n_tails"] == rec["n_tails"]
            assert row["connecting_atom"] == rec["connecting_atom"]
            assert row["atom_regions"] == "".join(rec["atom_regions"])


class TestEmbedProject:
    def test_round_trip(self, workspace, tmp_path):
        root, *_ = workspace
        inputs = tmp_path / "in.txt"
        inputs.write_text("CCO\nCCCCCCCCN(CCCCCCCC)CCO\nCCO\n")
        emb = tmp_path / "emb.csv"
        assert main(["embed", "--checkpoint", str(root / "pre" / "checkpoint"), "--file", str(inputs),
                     "--out", str(emb)]) == EXIT_OK
        rows = list(csv.reader(emb.open()))
        assert len(rows) == 4 and len(rows[1]) == 33
        assert rows[1][1:] == rows[3][1:]
        proj = tmp_path / "xy.csv"
        assert main(["project", "--embeddings", str(emb), "--out", str(proj)]) == EXIT_OK
        xy = list(csv.reader(proj.open()))
        assert xy[0] == ["id", "x", "y"] and len(xy) == 4
        assert (tmp_path / "xy.csv.resolved.json").exists()

    def test_embed_bad_checkpoint(self, tmp_path):
        inputs = tmp_path / "in.txt"
        inputs.write_text("CCO\n")
        assert main(["embed", "--checkpoint", str(tmp_path), "--file", str(inputs),
                     "--out", str(tmp_path / "e.csv")]) == EXIT_CHECKPOINT


class TestProjection:
    def test_planar_distances(self):
        rng = np.random.default_rng(0)
        plane = rng.normal(size=(30, 2))
        basis = np.linalg.qr(rng.normal(size=(8, 2)))[0]
        x = plane @ basis.T + rng.normal(size=8)
        coords = pca_project(x, 2)
        d = lambda a: np.linalg.norm(a[:, None] - a[None], axis=-1)
        assert np.max(np.abs(d(coords) - d(plane))) < 1e-8

    def test_identical_rows(self):
        x = np.array([[1.0, 2.0, 3.0], [1.0, 2.0, 3.0], [0.0, 1.0, 5.0]])
        coords = pca_project(x)
        assert np.array_equal(coords[0], coords[1])

    def test_deterministic_sign(self):
        x = np.random.default_rng(1).normal(size=(10, 4))
        assert np.array_equal(pca_project(x), pca_project(x.copy()))
