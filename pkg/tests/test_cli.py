import json
import shutil
import subprocess
import sys

import numpy as np
import pytest
import yaml
from PIL import Image

from paintmatch.cli import ENV_BACKBONE, ENV_CACHE, main
from paintmatch.segmentation import load_segment_map

PROC = ["--backbone", "procedural"]
METRICS = ["Acc", "Acc-Thresh", "Pix-Acc", "Pix-F-Acc", "Pix-B-MIoU"]


@pytest.fixture(scope="module")
def trained(toy_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_train")
    code = main(["train", str(toy_dataset), "-o", str(out / "ck"), *PROC, "--cache", str(out / "cache"),
                 "--epochs", "1", "--train-size", "0", "--lambda-dc", "0"])
    assert code == 0
    return out


def test_segment_writes_one_pair_per_image(toy_dataset, tmp_path):
    src = toy_dataset / "test/char00/clip00/line"
    assert main(["segment", str(src), str(tmp_path / "a")]) == 0
    assert sorted(p.name for p in (tmp_path / "a").glob("*.png")) == ["0000.png", "0001.png", "0002.png"]
    assert len(list((tmp_path / "a").glob("0*.json"))) == 3
    manifest = json.loads((tmp_path / "a/run_manifest.json").read_text())
    assert manifest["command"] == "segment" and str(src) in manifest["inputs"]
    assert set(manifest) >= {"config", "seed", "revision", "inputs", "outputs", "duration_s", "argv"}


def test_segment_mono_gives_identical_maps(tmp_path):
    src = tmp_path / "in"
    src.mkdir()
    img = np.full((24, 24, 3), 255, np.uint8)
    img[8, :] = (200, 0, 0)
    img[:, 12] = (0, 0, 180)
    Image.fromarray(img).save(src / "x.png")
    assert main(["segment", str(src), str(tmp_path / "a")]) == 0
    assert main(["segment", str(src), str(tmp_path / "b"), "--mono"]) == 0
    a, _ = load_segment_map(tmp_path / "a/x.png")
    b, _ = load_segment_map(tmp_path / "b/x.png")
    np.testing.assert_array_equal(a.labels, b.labels)
    assert a.segment_count == 4


def test_segment_with_gt_stores_colors(toy_dataset, tmp_path):
    clip = toy_dataset / "test/char00/clip00"
    assert main(["segment", str(clip / "line"), str(tmp_path / "a"), "--gt", str(clip / "gt")]) == 0
    _, pal = load_segment_map(tmp_path / "a/0000.png")
    assert pal is not None and pal.background_flags.any()


def test_segment_empty_dir_is_data_error(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert main(["segment", str(tmp_path / "empty"), str(tmp_path / "o")]) == 1
    assert "no inputs" in capsys.readouterr().err


def test_segment_unreadable_file(tmp_path):
    src = tmp_path / "in"
    src.mkdir()
    (src / "bad.png").write_bytes(b"nope")
    Image.fromarray(np.full((8, 8, 3), 255, np.uint8)).save(src / "good.png")
    assert main(["segment", str(src), str(tmp_path / "o")]) == 1
    errors = json.loads((tmp_path / "o/errors.json").read_text())
    assert [e["file"].endswith("bad.png") for e in errors] == [True]
    assert (tmp_path / "o/good.png").exists()


def test_precompute_uses_env_cache(toy_dataset, tmp_path, monkeypatch):
    monkeypatch.setenv(ENV_CACHE, str(tmp_path / "envcache"))
    assert main(["precompute", str(toy_dataset), *PROC]) == 0
    entries = json.loads((tmp_path / "envcache/manifest.json").read_text())["entries"]
    assert len(entries) == 12


def test_precompute_without_cache_is_usage_error(toy_dataset, monkeypatch):
    monkeypatch.delenv(ENV_CACHE, raising=False)
    assert main(["precompute", str(toy_dataset), *PROC]) == 2


def test_missing_backbone_is_data_error(toy_dataset, tmp_path, monkeypatch, capsys):
    monkeypatch.delenv(ENV_BACKBONE, raising=False)
    assert main(["precompute", str(toy_dataset), "--cache", str(tmp_path / "c")]) == 1
    assert "backbone unavailable" in capsys.readouterr().err


def test_train_ablation_arm_and_manifest(trained):
    ck = trained / "ck"
    import torch

    payload = torch.load(ck / "final.pt", weights_only=False)
    assert payload["config"]["arm"] == "wo_consistency" and payload["config"]["lambda_dc"] == 0.0
    manifest = json.loads((ck / "run_manifest.json").read_text())
    assert manifest["config"]["arm"] == "wo_consistency" and manifest["seed"] == 0
    assert yaml.safe_load((ck / "config.yaml").read_text())["lambda_dc"] == 0.0


def test_train_flags_override_config_file(toy_dataset, tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"epochs": 3, "lr": 0.5, "train_size": None, "max_steps": 1}))
    out = tmp_path / "ck"
    assert main(["train", str(toy_dataset), "-o", str(out), *PROC, "--config", str(cfg), "--lr", "1e-5"]) == 0
    resolved = json.loads((out / "run_manifest.json").read_text())["config"]
    assert resolved["lr"] == 1e-5 and resolved["epochs"] == 3 and resolved["max_steps"] == 1


def test_train_bad_config_is_usage_error(toy_dataset, tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("unknown_key: 1\n")
    assert main(["train", str(toy_dataset), "-o", str(tmp_path / "o"), *PROC, "--config", str(cfg)]) == 2


def test_eval_keyframe_report_schema(toy_dataset, trained, tmp_path):
    out = tmp_path / "r.json"
    code = main(["eval", str(toy_dataset), *PROC, "--cache", str(trained / "cache"),
                 "--checkpoint", str(trained / "ck/final.pt"), "--protocol", "keyframe", "--shots", "1",
                 "-o", str(out)])
    assert code == 0
    report = json.loads(out.read_text())
    assert list(report["mean"]) == METRICS
    assert all(set(f["metrics"]) == set(METRICS) for f in report["frames"])
    assert out.with_suffix(".txt").exists() and out.with_suffix(".manifest.json").exists()


@pytest.mark.parametrize("extra", [["--protocol", "consecutive", "--refs", "pm1"], ["--protocol", "clipwise"],
                                   ["--pooling", "fixed512", "--mono"]])
def test_eval_variants(toy_dataset, tmp_path, extra):
    out = tmp_path / "r.json"
    assert main(["eval", str(toy_dataset), *PROC, "--zero-shot", "-o", str(out), *extra]) == 0
    assert json.loads(out.read_text())["frame_count"] >= 1


def test_eval_usage_conflicts(toy_dataset, tmp_path):
    nosheets = tmp_path / "ds"
    shutil.copytree(toy_dataset, nosheets)
    shutil.rmtree(nosheets / "test/char00/sheet")
    base = ["eval", *PROC, "--zero-shot", "-o", str(tmp_path / "r.json")]
    assert main([*base[:1], str(nosheets), *base[1:], "--protocol", "consecutive", "--shots", "1"]) == 2
    assert main([base[0], str(toy_dataset), *base[1:], "--protocol", "keyframe", "--refs", "-1"]) == 2
    assert main([base[0], str(toy_dataset), *PROC, "-o", str(tmp_path / "r.json")]) == 2  # no checkpoint
    with pytest.raises(SystemExit) as exc:
        main([base[0], str(toy_dataset), *base[1:], "--shots", "zero"])
    assert exc.value.code == 2


def test_colorize_three_references_is_reproducible(toy_dataset, trained, tmp_path):
    clip, sheet = toy_dataset / "test/char00/clip00", toy_dataset / "test/char00/sheet"
    args = ["colorize", str(clip / "line/0002.png"), *PROC, "--checkpoint", str(trained / "ck/final.pt")]
    refs = ["--ref", str(clip / "line/0000.png"), str(clip / "gt/0000.png"),
            "--ref", str(clip / "line/0001.png"), str(clip / "gt/0001.png"),
            "--ref", str(sheet / "line/0000.png"), str(sheet / "gt/0000.png")]
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name / "out.png"
        assert main([*args, *refs, "-o", str(out)]) == 0
        outs.append(out)
    assert sorted(p.name for p in outs[0].parent.iterdir()) == ["out.json", "out.manifest.json", "out.png"]
    assert outs[0].read_bytes() == outs[1].read_bytes()
    assert outs[0].with_suffix(".json").read_bytes() == outs[1].with_suffix(".json").read_bytes()
    records = json.loads(outs[0].with_suffix(".json").read_text())
    assert {r["matched_reference"] for r in records} <= {1, 2, 3}
    assert set(records[0]) == {"segment_id", "rgb", "matched_reference", "matched_segment", "confidence"}


def test_colorize_requires_reference(toy_dataset, tmp_path):
    line = toy_dataset / "test/char00/clip00/line/0000.png"
    assert main(["colorize", str(line), *PROC, "--zero-shot", "-o", str(tmp_path / "o.png")]) == 2


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "paintmatch", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "colorize" in res.stdout
    res = subprocess.run([sys.executable, "-m", "paintmatch", "eval"], capture_output=True, text=True)
    assert res.returncode == 2 and "usage" in res.stderr
