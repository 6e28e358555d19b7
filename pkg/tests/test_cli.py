import hashlib
import json
import shutil
import subprocess
import sys
from pathlib import Path

import pytest

from v2lab.cli import main

TINY_CFG = """\
# tiny desk run
image_size=32
min_radius=5
max_radius=7
translation_range=4
pretrain_scenes=8
batch_size=4
max_steps=3
warmup_contrastive_steps=1
"""


def tree_hash(root: Path) -> str:
    h = hashlib.sha256()
    for f in sorted(p for p in root.rglob("*") if p.is_file() and p.name != "run_manifest.json"):
        h.update(str(f.relative_to(root)).encode())
        h.update(f.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "cfg.txt").write_text(TINY_CFG)
    assert main(["gen-data", "--config", str(root / "cfg.txt"), "--n-train", "6", "--n-test", "3", "--out", str(root / "data")]) == 0
    assert main(["train", "--config", str(root / "cfg.txt"), "--data", str(root / "data/train"), "--out", str(root / "run")]) == 0
    return root


def test_gen_data_layout_and_manifest(workspace):
    data = workspace / "data"
    assert len(list((data / "train").glob("pair_*"))) == 6
    assert len(list((data / "test").glob("pair_*"))) == 3
    assert "image_size=32" in (data / "scene_config.txt").read_text()
    man = json.loads((data / "run_manifest.json").read_text())
    assert man["command"] == "gen-data" and len(man["input_hash"]) == 64
    assert "scene_config.txt" in man["artifacts"]


def test_gen_data_is_reproducible(workspace, tmp_path):
    args = ["gen-data", "--config", str(workspace / "cfg.txt"), "--n-train", "6", "--n-test", "3"]
    assert main(args + ["--out", str(tmp_path / "again")]) == 0
    assert tree_hash(tmp_path / "again") == tree_hash(workspace / "data")
    assert main(args + ["--seed", "9", "--out", str(tmp_path / "other")]) == 0
    assert tree_hash(tmp_path / "other") != tree_hash(workspace / "data")


def test_unknown_config_key_is_a_usage_error(tmp_path, capsys):
    (tmp_path / "bad.txt").write_text("image_size=32\nwobble=3\n")
    assert main(["gen-data", "--config", str(tmp_path / "bad.txt"), "--out", str(tmp_path / "o")]) == 2
    assert "wobble" in capsys.readouterr().err


def test_anchor_training_is_refused(workspace, tmp_path, capsys):
    assert main(["train", "--data", str(workspace / "data/train"), "--expert", "anchor", "--out", str(tmp_path)]) == 2
    assert "training-free" in capsys.readouterr().err


def test_train_writes_logs_and_checkpoint(workspace):
    run = workspace / "run"
    assert (run / "model.v2ck").read_bytes()[:4] == b"V2CK"
    for name in ("log_pretrain.csv", "log_visual.csv", "log_fusion.csv"):
        lines = (run / name).read_text().splitlines()
        assert lines[0].startswith("step,lr,loss_total")
        assert len(lines) == 4


def test_train_resume_continues_steps(workspace, tmp_path):
    run = tmp_path / "resumed"
    shutil.copytree(workspace / "run", run)
    args = ["train", "--config", str(workspace / "cfg.txt"), "--data", str(workspace / "data/train"),
            "--expert", "visual", "--checkpoint", str(run / "model.v2ck"), "--steps", "2", "--out", str(run)]
    with pytest.warns(UserWarning, match="config hash"):
        assert main(args) == 0
    steps = [int(l.split(",")[0]) for l in (run / "log_visual.csv").read_text().splitlines()[1:]]
    assert steps == [0, 1, 2, 3, 4]


def test_infer_outputs(workspace, tmp_path):
    out = tmp_path / "pred"
    assert main(["infer", "--data", str(workspace / "data/test"), "--checkpoint", str(workspace / "run/model.v2ck"),
                 "--dump-all", "--overlay", "--out", str(out)]) == 0
    pdir = out / "pair_00000"
    names = {p.name for p in pdir.iterdir()}
    assert {"pred.pgm", "pred_anchor.pgm", "pred_visual.pgm", "pred_fusion.pgm", "overlay.ppm", "expert.txt"} <= names
    assert (pdir / "expert.txt").read_text().strip() in ("anchor", "visual", "fusion")
    assert (pdir / "overlay.ppm").read_bytes().startswith(b"P6\n64 32")


def test_infer_anchor_only(workspace, tmp_path):
    out = tmp_path / "pts"
    assert main(["infer", "--data", str(workspace / "data/test"), "--anchor-only", "--n-anchor-points", "3", "--out", str(out)]) == 0
    lines = (out / "pair_00000" / "anchor_points.csv").read_text().splitlines()
    assert lines[0] == "x,y,label" and 2 <= len(lines) <= 4
    assert all(l.endswith(",1") for l in lines[1:])


def test_select_csv(workspace, tmp_path, capsys):
    assert main(["select", "--data", str(workspace / "data/test"), "--checkpoint", str(workspace / "run/model.v2ck"),
                 "--out", str(tmp_path)]) == 0
    text = (tmp_path / "selections.csv").read_text()
    assert capsys.readouterr().out == text
    rows = [l.split(",") for l in text.splitlines()]
    assert rows[0] == ["pair_id", "expert", "score", "selected"]
    assert len(rows) == 1 + 3 * 3
    for pid in {r[0] for r in rows[1:]}:
        assert sum(int(r[3]) for r in rows[1:] if r[0] == pid) == 1


def test_eval_ground_truth_is_perfect(workspace, tmp_path, capsys):
    pred = tmp_path / "gt"
    for d in sorted((workspace / "data/test").glob("pair_*")):
        (pred / d.name).mkdir(parents=True)
        shutil.copy(d / "target_mask.pgm", pred / d.name / "pred.pgm")
    assert main(["eval", "--data", str(workspace / "data/test"), "--pred", str(pred), "--out", str(tmp_path / "m")]) == 0
    assert "IoU 1.0000  Loc.E 0.0000" in capsys.readouterr().out
    assert (tmp_path / "m" / "metrics.csv").read_text().splitlines()[1].endswith("1.000000,0.000000")


def test_eval_missing_prediction(workspace, tmp_path):
    assert main(["eval", "--data", str(workspace / "data/test"), "--pred", str(tmp_path), "--out", str(tmp_path / "m")]) == 2


def test_console_entry_point_help():
    r = subprocess.run([sys.executable, "-m", "v2lab.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for cmd in ("gen-data", "train", "infer", "select", "eval"):
        assert cmd in r.stdout
