import json
import subprocess
import sys

import numpy as np
import pytest

from trojanscan.cli import build_parser, main
from trojanscan.features import parse_bags
from trojanscan.formats import read_pnm, write_pgm
from trojanscan.model import ModelArtifact, default_architecture, init_weights, save_model
from trojanscan.zoo import ZooManifest


@pytest.fixture(scope="module")
def five_class_model(tmp_path_factory):
    layers = default_architecture(3, 28, 28, 5)
    model = ModelArtifact(layers, init_weights(layers, np.random.default_rng(3)), (3, 28, 28), seed=3)
    path = tmp_path_factory.mktemp("model") / "m.nnm"
    save_model(model, path)
    return path


def test_zoo_twice_gives_identical_manifests(tmp_path):
    argv = ["zoo", "--count", "20", "--seed", "7", "--epochs", "1", "--workers", "1"]
    assert main(argv + ["--out", str(tmp_path / "a")]) == 0
    assert main(argv + ["--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "manifest.tsv").read_text()
    assert a == (tmp_path / "b" / "manifest.tsv").read_text()
    assert ZooManifest.load(tmp_path / "a" / "manifest.tsv").labels.sum() == 10


@pytest.mark.parametrize("flag", [["--trojan-fraction", "1.5"], ["--poison-rate", "-0.1"], ["--count", "0"]])
def test_zoo_rejects_bad_values(tmp_path, flag, capsys):
    assert main(["zoo", "--out", str(tmp_path), *flag]) == 1
    assert "error" in capsys.readouterr().err


def test_unknown_flag_is_a_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["zoo", "--bogus"])
    assert exc.value.code == 1
    assert "unrecognized arguments" in capsys.readouterr().err


@pytest.mark.parametrize("command", ["zoo", "recover", "detect", "dump-diagram", "reproduce"])
def test_help_lists_every_flag(command, capsys):
    with pytest.raises(SystemExit) as exc:
        main([command, "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    sub = build_parser()._subparsers._group_actions[0].choices[command]
    for action in sub._actions:
        for opt in action.option_strings:
            assert opt in text


def test_recover_writes_fifteen_candidates(tmp_path, five_class_model):
    out = tmp_path / "rec"
    assert main(["recover", str(five_class_model), "--out", str(out), "--iterations", "3"]) == 0
    assert len(list(out.glob("cand_*_mask.pgm"))) == 15
    assert len(list(out.glob("cand_*_pattern.ppm"))) == 15
    mask, maxval, _ = read_pnm(out / "cand_c0_r0_mask.pgm")
    assert mask.shape == (28, 28) and maxval == 65535
    lines = (out / "candidates.tsv").read_text().splitlines()
    assert len(lines) == 16 and lines[0].startswith("class\tround")
    (bag,) = parse_bags((out / "features.tsv").read_text())
    assert bag.local.shape == (15, 11)
    cfg = json.loads((out / "run_config.json").read_text())
    assert cfg["recovery"]["lambda_topo"] == 10.0 and cfg["recovery"]["n_rounds"] == 3


def test_recover_ablation_switches(tmp_path, five_class_model):
    out = tmp_path / "abl"
    argv = ["recover", str(five_class_model), "--out", str(out), "--iterations", "2", "--no-topo", "--nt", "1"]
    assert main(argv) == 0
    cfg = json.loads((out / "run_config.json").read_text())["recovery"]
    assert cfg["lambda_topo"] == 0.0 and cfg["n_rounds"] == 1
    assert len(list(out.glob("cand_*_mask.pgm"))) == 5
    assert main(["recover", str(five_class_model), "--out", str(out), "--nt", "0"]) == 1


def test_recover_is_byte_reproducible(tmp_path, five_class_model):
    for name in ("a", "b"):
        assert main(["recover", str(five_class_model), "--out", str(tmp_path / name), "--iterations", "3"]) == 0
    for f in ("candidates.tsv", "features.tsv", "cand_c2_r1_mask.pgm"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_missing_inputs_are_runtime_errors(tmp_path, capsys):
    assert main(["detect", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 2
    assert "no manifest" in capsys.readouterr().err
    assert main(["recover", str(tmp_path / "none.nnm"), "--out", str(tmp_path / "o")]) == 2


def test_dump_diagram_line_example(tmp_path, capsys):
    (tmp_path / "g.txt").write_text("0.9 0.1 0.8 0.2 0.0\n")
    assert main(["dump-diagram", str(tmp_path / "g.txt")]) == 0
    body = [l for l in capsys.readouterr().out.splitlines() if not l.startswith("#")]
    rows = [l.split("\t") for l in body]
    assert len(rows) == 2
    assert {(float(b), float(d), int(bp), int(dp)) for b, d, bp, dp in rows} == {(0.8, 0.1, 2, 1), (0.9, 0.0, 0, -1)}


def test_dump_diagram_constant_pgm_and_plot(tmp_path):
    write_pgm(tmp_path / "c.pgm", np.full((4, 4), 0.5))
    assert main(["dump-diagram", str(tmp_path / "c.pgm"), "--out", str(tmp_path / "d.tsv"),
                 "--plot", str(tmp_path / "p.ppm"), "--size", "64"]) == 0
    body = [l for l in (tmp_path / "d.tsv").read_text().splitlines() if not l.startswith("#")]
    assert len(body) == 1 and body[0].split("\t")[3] == "-1"
    img, maxval, comments = read_pnm(tmp_path / "p.ppm")
    assert img.shape == (64, 64, 3) and maxval == 255
    assert any("x = death" in c for c in comments)


def test_dump_diagram_rejects_ragged_text(tmp_path):
    (tmp_path / "r.txt").write_text("1 2\n3\n")
    assert main(["dump-diagram", str(tmp_path / "r.txt")]) == 1


def test_output_dir_from_environment(tmp_path, monkeypatch):
    (tmp_path / "g.txt").write_text("1 0 1\n")
    monkeypatch.setenv("TROJANSCAN_OUT", str(tmp_path / "envout"))
    monkeypatch.chdir(tmp_path)
    layers = default_architecture(3, 12, 12, 3)
    save_model(ModelArtifact(layers, init_weights(layers, np.random.default_rng(0)), (3, 12, 12)), tmp_path / "s.nnm")
    assert main(["recover", str(tmp_path / "s.nnm"), "--iterations", "1", "--nt", "1"]) == 0
    assert (tmp_path / "envout" / "candidates.tsv").is_file()


SMALL = ["--count", "8", "--epochs", "1", "--folds", "2", "--iterations", "3", "--max-epochs", "20", "--workers", "1"]


def test_reproduce_is_deterministic_and_detect_reuses_features(tmp_path, capsys):
    for name in ("a", "b"):
        assert main(["reproduce", "--seed", "5", "--out", str(tmp_path / name), *SMALL]) == 0
    for f in ("report.tsv", "features.tsv", "trigger_sizes.tsv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    report = (tmp_path / "a" / "report.tsv").read_text().splitlines()
    assert report[-2] == "mean_auc\tstd_auc\tmean_acc\tstd_acc" and len(report[-1].split("\t")) == 4
    capsys.readouterr()
    zoo = str(tmp_path / "a" / "zoo")
    argv = ["detect", zoo, "--seed", "5", "--folds", "2", "--max-epochs", "20", "--workers", "1"]
    assert main(argv + ["--out", str(tmp_path / "c"), "--features", str(tmp_path / "a" / "features.tsv")]) == 0
    assert (tmp_path / "c" / "report.tsv").read_bytes() == (tmp_path / "a" / "report.tsv").read_bytes()
    assert main(argv + ["--out", str(tmp_path / "m"), "--mad", "--iterations", "3"]) == 0
    assert (tmp_path / "m" / "mad_report.tsv").read_text().splitlines()[-2] == "auc"


def test_console_entry_point_runs():
    res = subprocess.run([sys.executable, "-m", "trojanscan.cli", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("trojanscan ")
