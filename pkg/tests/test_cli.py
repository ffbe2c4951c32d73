"""Command-line interface: full gen/train/select/eval flows in a temp
directory, exit codes, and the single-line stderr error contract."""

import json
import re

import numpy as np
import pytest

from gcproto.cli import main
from gcproto.harness import load_prototypes
from gcproto.model import load_model

TINY_GCP = {
    "dim": 6, "n_blocks": 1, "n_heads": 2, "ffn_dim": 8, "dropout_rate": 0.0,
    "n_prototypes": 2, "n_cameras": 3, "batch_classes": 4,
    "instances_per_class": 4, "epochs": 2,
}

SMALL_SPEC = {
    "n_classes": 4, "instances_per_class": 6, "dim": 6, "n_cameras": 3,
    "class_center_scale": 6.0, "within_class_noise": 0.5,
    "camera_offset_scale": 0.3, "queries_per_class": 3, "seed": 9,
}


@pytest.fixture
def datadir(tmp_path):
    spec_path = tmp_path / "spec.json"
    spec_path.write_text(json.dumps(SMALL_SPEC), encoding="utf-8")
    rc = main(["gen", "--config", str(spec_path), "--out", str(tmp_path / "data")])
    assert rc == 0
    return tmp_path


def err_line(capsys):
    captured = capsys.readouterr()
    lines = captured.err.strip().splitlines()
    assert len(lines) == 1, f"expected exactly one stderr line, got: {lines!r}"
    return lines[0]


class TestGen:
    def test_writes_gallery_queries_and_spec_echo(self, datadir):
        out = datadir / "data"
        assert (out / "gallery.csv").exists()
        assert (out / "queries.csv").exists()
        echo = json.loads((out / "synthetic_spec.json").read_text())
        assert echo["n_classes"] == 4

    def test_preset_config(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"preset": "tradeoff"}), encoding="utf-8")
        rc = main(["gen", "--config", str(cfg), "--out", str(tmp_path / "d")])
        assert rc == 0
        assert (tmp_path / "d" / "gallery.csv").exists()

    def test_unknown_preset_fails_cleanly(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"preset": "mystery"}), encoding="utf-8")
        rc = main(["gen", "--config", str(cfg), "--out", str(tmp_path / "d")])
        assert rc == 1
        assert err_line(capsys).startswith("error:config: ")

    def test_seed_override_changes_data(self, tmp_path):
        for seed, name in ((1, "a"), (2, "b")):
            rc = main(["gen", "--seed", str(seed), "--out", str(tmp_path / name)])
            assert rc == 0
        a = (tmp_path / "a" / "gallery.csv").read_text()
        b = (tmp_path / "b" / "gallery.csv").read_text()
        assert a != b


class TestSelect:
    def test_centroid_prototype_file(self, datadir):
        out = datadir / "protos.json"
        rc = main([
            "select", "--data", str(datadir / "data" / "gallery.csv"),
            "--method", "centroid", "--out", str(out),
        ])
        assert rc == 0
        pset = load_prototypes(out)
        assert pset.counts_by_class() == {c: 1 for c in range(4)}

    def test_gcp_without_checkpoint_fails(self, datadir, capsys):
        rc = main([
            "select", "--data", str(datadir / "data" / "gallery.csv"),
            "--method", "gcp", "--out", str(datadir / "p.json"),
        ])
        assert rc == 1
        assert err_line(capsys).startswith("error:config: ")

    def test_missing_data_file_is_io_error(self, tmp_path, capsys):
        rc = main([
            "select", "--data", str(tmp_path / "absent.csv"),
            "--method", "centroid", "--out", str(tmp_path / "p.json"),
        ])
        assert rc == 1
        line = err_line(capsys)
        assert re.match(r"^error:[a-z-]+: ", line)


class TestTrainAndGcpFlow:
    def test_train_select_eval_round_trip(self, datadir, capsys):
        gallery = str(datadir / "data" / "gallery.csv")
        queries = str(datadir / "data" / "queries.csv")
        gcp_cfg = datadir / "gcp.json"
        gcp_cfg.write_text(json.dumps(TINY_GCP), encoding="utf-8")
        ckpt = str(datadir / "model.gcpm")

        rc = main(["train", "--data", gallery, "--config", str(gcp_cfg),
                   "--out", ckpt])
        assert rc == 0
        model = load_model(ckpt)
        assert model.config.epochs == 2

        rc = main(["select", "--data", gallery, "--method", "gcp",
                   "--checkpoint", ckpt, "--n", "2",
                   "--out", str(datadir / "gp.json")])
        assert rc == 0
        pset = load_prototypes(datadir / "gp.json")
        assert all(v == 2 for v in pset.counts_by_class().values())

        rc = main(["eval", "--data", gallery, "--queries", queries,
                   "--method", "gcp", "--checkpoint", ckpt,
                   "--protocol", "camera-filter",
                   "--out", str(datadir / "run")])
        assert rc == 0
        out = capsys.readouterr().out
        assert "top1=" in out and "map=" in out
        report = json.loads((datadir / "run" / "report.json").read_text())
        assert report["n_queries"] == 12


class TestEval:
    def test_flag_only_run(self, datadir, capsys):
        rc = main([
            "eval", "--data", str(datadir / "data" / "gallery.csv"),
            "--queries", str(datadir / "data" / "queries.csv"),
            "--method", "centroid",
        ])
        assert rc == 0
        assert "queries=12" in capsys.readouterr().out

    def test_incomplete_flags_fail(self, datadir, capsys):
        rc = main(["eval", "--data", str(datadir / "data" / "gallery.csv")])
        assert rc == 1
        assert err_line(capsys).startswith("error:config: ")

    def test_config_file_run(self, datadir, capsys):
        cfg = {
            "version": 1,
            "data": {"path": str(datadir / "data" / "gallery.csv")},
            "queries": {"path": str(datadir / "data" / "queries.csv")},
            "selector": {"method": "alphafps", "n": 2, "alpha": 0.25},
        }
        path = datadir / "exp.json"
        path.write_text(json.dumps(cfg), encoding="utf-8")
        rc = main(["eval", "--config", str(path)])
        assert rc == 0
        assert "top1=" in capsys.readouterr().out

    def test_flags_override_config(self, datadir, capsys):
        cfg = {
            "version": 1,
            "data": {"path": str(datadir / "data" / "gallery.csv")},
            "queries": {"path": str(datadir / "data" / "queries.csv")},
            "selector": {"method": "centroid"},
        }
        path = datadir / "exp.json"
        path.write_text(json.dumps(cfg), encoding="utf-8")
        rc = main(["eval", "--config", str(path), "--method", "instance",
                   "--out", str(datadir / "o")])
        assert rc == 0
        resolved = json.loads((datadir / "o" / "resolved_config.json").read_text())
        assert resolved["selector"]["method"] == "instance"

    def test_invalid_config_json(self, datadir, capsys):
        path = datadir / "broken.json"
        path.write_text("{oops", encoding="utf-8")
        rc = main(["eval", "--config", str(path)])
        assert rc == 1
        assert err_line(capsys).startswith("error:format: ")


class TestSweepAndGroup:
    def test_sweep_n(self, datadir, capsys):
        rc = main([
            "sweep-n", "--data", str(datadir / "data" / "gallery.csv"),
            "--queries", str(datadir / "data" / "queries.csv"),
            "--method", "kcentroid", "--values", "1,2",
            "--out", str(datadir / "sw"),
        ])
        assert rc == 0
        out = capsys.readouterr().out
        assert out.count("n=") == 2
        csv = (datadir / "sw" / "sweep_n.csv").read_text().splitlines()
        assert csv[0] == "n,top1,map"

    def test_sweep_n_bad_values(self, datadir, capsys):
        rc = main([
            "sweep-n", "--data", str(datadir / "data" / "gallery.csv"),
            "--queries", str(datadir / "data" / "queries.csv"),
            "--method", "kcentroid", "--values", "1,zebra",
        ])
        assert rc == 1
        assert err_line(capsys).startswith("error:config: ")

    def test_sweep_alpha(self, datadir, capsys):
        rc = main([
            "sweep-alpha", "--data", str(datadir / "data" / "gallery.csv"),
            "--queries", str(datadir / "data" / "queries.csv"),
            "--method", "alphafps", "--values", "0.0,0.5,1.0",
        ])
        assert rc == 0
        assert capsys.readouterr().out.count("alpha=") == 3

    def test_group_eval(self, datadir, capsys):
        rc = main([
            "group-eval", "--data", str(datadir / "data" / "gallery.csv"),
            "--queries", str(datadir / "data" / "queries.csv"),
            "--method", "centroid", "--buckets", "1-99,100+",
        ])
        assert rc == 0
        out = capsys.readouterr().out
        assert "bucket=1-99 count=12" in out
        assert "bucket=100+ count=0 map=absent" in out
