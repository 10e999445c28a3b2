import csv
import json

import numpy as np
import pytest
from PIL import Image

from siammae.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main

TINY = {
    "scene": {"canvas": 16, "n_frames": 6, "size_range": [4, 6]},
    "data": {"n_clips": 6, "n_heldout": 2},
    "model": {"image_size": 16, "patch_size": 4, "dim": 16, "depth": 1, "heads": 2,
              "decoder_dim": 16, "decoder_depth": 1, "decoder_heads": 2},
    "train": {"total_steps": 3, "warmup_steps": 1, "batch_size": 2, "gap_range": [1, 3],
              "base_lr": 1e-3},
}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    assert main(["gen-data", "--config", str(cfg), "--seed", "3", "--out", str(root / "data"),
                 "-q"]) == EXIT_OK
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"),
                 "--out", str(root / "run"), "-q"]) == EXIT_OK
    return root, cfg


def _files(d):
    return {p.relative_to(d): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_gen_data_layout_and_determinism(tmp_path):
    args = ["gen-data", "--seed", "7", "--n-clips", "8", "--n-heldout", "2",
            "--override", "scene.canvas=32", "--override", "scene.n_frames=4",
            "--override", "scene.size_range=[6,10]", "-q"]
    assert main(args + ["--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(args + ["--out", str(tmp_path / "b")]) == EXIT_OK
    clip_dirs = [p for p in (tmp_path / "a").iterdir() if p.is_dir()]
    assert len(clip_dirs) == 8
    assert (tmp_path / "a" / "index.json").is_file()
    assert _files(tmp_path / "a") == _files(tmp_path / "b")


def test_gen_data_missing_spec_is_usage_error(tmp_path):
    assert main(["gen-data", "--spec", str(tmp_path / "nope.json"),
                 "--out", str(tmp_path / "d")]) == EXIT_USAGE


def test_train_outputs(work):
    root, _ = work
    run = root / "run"
    assert (run / "final" / "manifest.json").is_file()
    assert (run / "final" / "weights.bin").is_file()
    snap = json.loads((run / "config.json").read_text())
    assert snap["model"]["dim"] == 16
    rows = list(csv.reader(open(run / "loss.csv")))
    assert len(rows) == 4


@pytest.mark.parametrize("task,keys", [("seg", {"J_mean", "F_mean", "JF_mean"}),
                                       ("keypoints", {"PCK_01", "PCK_02"})])
def test_eval_checkpoint(work, task, keys):
    root, _ = work
    out = root / f"eval_{task}"
    assert main(["eval", "--checkpoint", str(root / "run" / "final"), "--data",
                 str(root / "data"), "--task", task, "--out", str(out), "-q"]) == EXIT_OK
    doc = json.loads((out / "metrics.json").read_text())
    assert keys <= set(doc["mean"])
    assert len(doc["clips"]) == 2
    assert all(0.0 <= v <= 1.0 for v in doc["mean"].values())


def test_eval_random_init_and_oracle(work):
    root, cfg = work
    for flag in ("--random-init", "--oracle"):
        out = root / f"eval{flag}"
        assert main(["eval", "--config", str(cfg), flag, "--data", str(root / "data"),
                     "--out", str(out), "-q"]) == EXIT_OK
        assert (out / "metrics.csv").is_file()


def test_eval_needs_exactly_one_source(work):
    root, cfg = work
    assert main(["eval", "--config", str(cfg), "--data", str(root / "data"),
                 "--out", str(root / "x")]) == EXIT_USAGE
    assert main(["eval", "--config", str(cfg), "--random-init", "--oracle",
                 "--data", str(root / "data"), "--out", str(root / "x")]) == EXIT_USAGE


def test_eval_missing_data_is_data_error(work, tmp_path):
    _, cfg = work
    assert main(["eval", "--config", str(cfg), "--random-init", "--data",
                 str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == EXIT_DATA


def test_ablate_marks_failed_rows(work):
    root, cfg = work
    grid = root / "grid.json"
    grid.write_text(json.dumps({"rows": [{"arch": "siamese,cross_self", "mask": "0.75a"},
                                         {"arch": "joint,joint", "mask": "0.5s"},
                                         {"arch": "siamese,cross_self", "mask": "1.5a"}]}))
    out = root / "ablate"
    assert main(["ablate", "--config", str(cfg), "--grid", str(grid), "--data",
                 str(root / "data"), "--out", str(out), "-q"]) == EXIT_OK
    rows = list(csv.DictReader(open(out / "ablation.csv")))
    assert [r["status"] for r in rows[:2]] == ["ok", "ok"]
    assert rows[2]["status"].startswith("failed") and rows[2]["J"] == ""
    assert float(rows[0]["J"]) >= 0
    assert list(rows[0])[:4] == ["row", "arch", "mask", "gap"]


def test_attn_viz(work):
    root, _ = work
    img = root / "img.png"
    Image.fromarray(np.random.default_rng(0).integers(0, 255, (20, 20, 3), np.uint8)).save(img)
    out = root / "viz"
    assert main(["attn-viz", "--checkpoint", str(root / "run" / "final"), "--image", str(img),
                 "--out", str(out), "-q"]) == EXIT_OK
    assert sorted(p.name for p in out.glob("head_*.png")) == ["head_00.png", "head_01.png"]
    assert (out / "overlay.png").is_file()
    maps = np.load(out / "attention.npy")
    assert maps.shape == (2, 4, 4)
    assert maps.min() == 0.0 and np.allclose(maps.max(axis=(1, 2)), 1.0)


@pytest.mark.parametrize("argv", [
    [],
    ["nonsense"],
    ["train", "--data", "x"],                                  # no --out
    ["train", "--data", "x", "--out", "o", "--override", "model.bogus=1"],
    ["train", "--data", "x", "--out", "o", "--override", "novalue"],
])
def test_usage_errors(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == EXIT_USAGE
