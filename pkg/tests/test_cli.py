import csv
import hashlib
import json
from pathlib import Path

import pytest
import torch

from mftrack.cli import ABLATION_COLUMNS, build_parser, consumed_keys, main
from mftrack.fusion import ABLATION_ROWS
from mftrack.network import TrackerNet
from mftrack.trainer import load_model

SMALL = """
[toy]
sequences = 2
frames = 12
height = 64
width = 64

[backbone]
block_channel_widths = 4, 8, 8, 8

[model]
feat_dim = 8
filter_size = 3
n_iter = 2
iou_dim = 8
iou_hidden = 16
out_size = 64

[train]
batch_size = 1
n_frames = 2
steps = 1
checkpoint_every = 1

[tracker]
init_iterations = 2
num_candidates = 3
refine_steps = 2
"""


def tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture
def workspace(tmp_path):
    cfg = tmp_path / "small.ini"
    cfg.write_text(SMALL)
    data = tmp_path / "data"
    assert main(["generate", "--toy", "--config", str(cfg), "--out", str(data), "--seed", "7"]) == 0
    return tmp_path, cfg, data


def test_generate_is_deterministic(workspace, tmp_path):
    _, cfg, data = workspace
    again = tmp_path / "again"
    assert main(["generate", "--toy", "--config", str(cfg), "--out", str(again), "--seed", "7"]) == 0
    assert tree_digest(data) == tree_digest(again)
    other = tmp_path / "other"
    assert main(["generate", "--toy", "--config", str(cfg), "--out", str(other), "--seed", "8"]) == 0
    assert tree_digest(data) != tree_digest(other)


def test_missing_input_names_path(tmp_path, capsys):
    missing = tmp_path / "does_not_exist"
    code = main(["generate", "--paired", "--in", str(missing), "--out", str(tmp_path / "o")])
    assert code != 0
    assert str(missing) in capsys.readouterr().err


def test_config_errors_listed_together(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[train]\nsteps = many\nbogus = 1\n[nosuch]\nx = 1\n")
    assert main(["train", "--config", str(bad)]) == 1
    err = capsys.readouterr().err
    assert "steps" in err and "bogus" in err and "nosuch" in err


def test_train_zero_steps_equals_init(workspace):
    root, cfg, data = workspace
    out = root / "train0"
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(out),
                 "--steps", "0", "--level", "feature"]) == 0
    net = load_model(out / "final")
    fresh = TrackerNet(net.fusion, net.config)
    for k, v in fresh.state_dict().items():
        assert torch.equal(v, net.state_dict()[k]), k
    assert (out / "losses.csv").read_text().startswith("step,L_cls,L_iou,L_total")


def test_track_and_eval_pipeline(workspace):
    root, cfg, data = workspace
    ckpt = root / "model"
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(ckpt)]) == 0
    results = root / "results"
    assert main(["track", "--config", str(cfg), "--checkpoint", str(ckpt / "final"),
                 "--data", str(data), "--results", str(results), "--runs", "2", "--seed", "5"]) == 0
    assert (results / "run_0").is_dir() and (results / "run_1").is_dir()
    report_dir = root / "report"
    assert main(["eval", "--config", str(cfg), "--results", str(results), "--data", str(data),
                 "--out", str(report_dir), "--runs", "2"]) == 0
    report = json.loads((report_dir / "report.json").read_text())
    assert 0 <= report["sr_auc"] <= 1 and len(report["per_run"]) == 2
    assert (report_dir / "success.csv").is_file() and (report_dir / "precision.csv").is_file()


def test_track_is_byte_identical(workspace):
    root, cfg, data = workspace
    ckpt = root / "model"
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(ckpt)]) == 0
    digests = []
    for k in range(2):
        res = root / f"res{k}"
        assert main(["track", "--config", str(cfg), "--checkpoint", str(ckpt / "final"),
                     "--data", str(data), "--results", str(res), "--runs", "1", "--seed", "3",
                     "--jobs", "1"]) == 0
        digests.append(tree_digest(res))
    assert digests[0] == digests[1]


def test_eval_vot_oracle(workspace):
    root, cfg, data = workspace
    from mftrack.data_model import load_dataset
    from mftrack.evaluation import write_run_results

    seqs = load_dataset(data)
    write_run_results(root / "oracle", [{s.name: list(s.groundtruth) for s in seqs}])
    assert main(["eval", "--config", str(cfg), "--results", str(root / "oracle"), "--data", str(data),
                 "--out", str(root / "rep"), "--protocol", "vot", "--runs", "1"]) == 0
    report = json.loads((root / "rep" / "report.json").read_text())
    assert report["eao"] == 1.0 and report["accuracy"] == 1.0 and report["robustness"] == 0.0


@pytest.mark.parametrize("command", ["generate", "train", "track", "eval", "ablate"])
def test_help_lists_consumed_keys(command, capsys):
    assert main([command, "--help"]) == 0
    text = capsys.readouterr().out
    keys = consumed_keys(command)
    assert keys
    for key in keys:
        assert key in text


def test_usage_errors_exit_1():
    assert main(["frobnicate"]) == 1
    assert main(["track", "--protocol", "sideways"]) == 1


def test_ablate_rows(workspace):
    root, cfg, data = workspace
    out = root / "ablate"
    code = main(["ablate", "--config", str(cfg), "--data", str(data), "--test-data", str(data),
                 "--out", str(out), "--rows", "single_rgb,single_tir,pixel", "--runs", "1"])
    assert code == 0
    with open(out / "ablation.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["row"] for r in rows] == ["single_rgb", "single_tir", "pixel"]
    assert tuple(rows[0]) == ABLATION_COLUMNS
    for r in rows:
        assert r["errors"] == ""
        assert 0 <= float(r["eao"]) <= 1 and 0 <= float(r["accuracy"]) <= 1


def test_ablate_unknown_row(workspace):
    root, cfg, data = workspace
    out = root / "ablate_bad"
    code = main(["ablate", "--config", str(cfg), "--data", str(data), "--test-data", str(data),
                 "--out", str(out), "--rows", "single_rgb,not_a_row", "--runs", "1"])
    assert code != 0
    with open(out / "ablation.csv") as fh:
        rows = {r["row"]: r for r in csv.DictReader(fh)}
    assert rows["single_rgb"]["errors"] == ""
    assert "not_a_row" in rows["not_a_row"]["errors"]
