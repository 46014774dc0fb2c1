import hashlib
import json
from pathlib import Path

import pytest

from sscxr.checkpoint import load_checkpoint
from sscxr.cli import main

ENC = {"image_size": 16, "patch_size": 4, "embed_dim": 16, "depth": 2, "num_heads": 2}


def _config(path, **values):
    path.write_text(json.dumps({**ENC, **values}))
    return path


@pytest.fixture(scope="module")
def datasets(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    for kind in ("recon", "cls2", "seg-shapes"):
        assert main(["synth", "--kind", kind, "--count", "4", "--out", str(root / kind), "--size", "16"]) == 0
    return root


def test_full_pipeline(datasets, tmp_path, capsys):
    pre = _config(tmp_path / "pre.json", manifest=str(datasets / "recon/manifest.csv"), batch_size=4, epochs=2,
                  decoder_hidden_dims=[16], decoder_bottleneck_dim=8)
    assert main(["pretrain", str(pre), "--out", str(tmp_path / "pre")]) == 0
    assert (tmp_path / "pre/loss.csv").read_text().startswith("step,loss\n1,")
    assert json.loads((tmp_path / "pre/resolved_config.json").read_text())["depth"] == 2

    ft = _config(tmp_path / "ft.json", manifest=str(datasets / "cls2/manifest.csv"), batch_size=4, epochs=2)
    ckpt = str(tmp_path / "pre/checkpoint.sscxr")
    assert main(["finetune", "cls", str(ft), "--init", ckpt, "--out", str(tmp_path / "ft")]) == 0
    assert (tmp_path / "ft/train_log.csv").exists()
    model = str(tmp_path / "ft/model.sscxr")
    init = load_checkpoint(model).meta["resolved_config"]["init"]
    assert init == "sha256:" + hashlib.sha256(Path(ckpt).read_bytes()).hexdigest()
    assert main(["eval", "cls", "--checkpoint", model, "--manifest", str(datasets / "cls2/manifest.csv"),
                 "--cohort", "train", "--out", str(tmp_path / "ev")]) == 0
    report = json.loads((tmp_path / "ev/report_train.json").read_text())
    assert report["task"] == "cls" and report["n_samples"] == 4
    assert (tmp_path / "ev/predictions_train.csv").read_text().startswith("path,label,prob_0,prob_1\n")

    assert main(["heatmap", "--checkpoint", ckpt, "--manifest", str(datasets / "cls2/manifest.csv"),
                 "--out", str(tmp_path / "hm")]) == 0
    assert len(list((tmp_path / "hm").glob("*_heatmap.png"))) == 4


def test_seg_pipeline(datasets, tmp_path):
    cfg = _config(tmp_path / "seg.json", manifest=str(datasets / "seg-shapes/manifest.csv"), batch_size=4,
                  epochs=2, seg_tap_layers=[1, 2], seg_feature_size=4)
    assert main(["finetune", "seg", str(cfg), "--out", str(tmp_path / "seg"), "--overlays"]) == 0
    assert len(list((tmp_path / "seg/overlays").glob("*.png"))) == 4
    assert main(["eval", "seg", "--checkpoint", str(tmp_path / "seg/model.sscxr"),
                 "--manifest", str(datasets / "seg-shapes/manifest.csv"), "--out", str(tmp_path / "ev")]) == 0
    rep = json.loads((tmp_path / "ev/report_manifest.json").read_text())
    assert set(rep) >= {"iou", "dice", "hd95", "hd95_excluded"}
    assert (tmp_path / "ev/pred_masks_manifest/manifest.csv").exists()


def test_unknown_config_key_exits_2(tmp_path, capsys):
    cfg = _config(tmp_path / "bad.json", manifest="x.csv", learning_rat=1.0)
    assert main(["pretrain", str(cfg), "--out", str(tmp_path)]) == 2
    assert "unknown config key 'learning_rat'" in capsys.readouterr().err


def test_set_override_type_checked(datasets, tmp_path, capsys):
    cfg = _config(tmp_path / "c.json", manifest=str(datasets / "recon/manifest.csv"))
    assert main(["pretrain", str(cfg), "--set", "epochs=many", "--out", str(tmp_path)]) == 2
    assert "epochs" in capsys.readouterr().err


def test_wrong_manifest_kind_exits_2(datasets, tmp_path):
    cfg = _config(tmp_path / "c.json", manifest=str(datasets / "recon/manifest.csv"), epochs=1)
    assert main(["finetune", "cls", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_class_count_mismatch_exits_2(datasets, tmp_path):
    cfg = _config(tmp_path / "c.json", manifest=str(datasets / "cls2/manifest.csv"), epochs=1, batch_size=4,
                  num_classes=3)
    assert main(["finetune", "cls", str(cfg), "--out", str(tmp_path / "o")]) == 0
    # a 3-class model on 2-class data is fine; a label beyond the head is not
    bad = tmp_path / "bad.csv"
    bad.write_text(f"{datasets / 'cls2/cls2_00000.png'},4\n")
    assert main(["eval", "cls", "--checkpoint", str(tmp_path / "o/model.sscxr"), "--manifest", str(bad),
                 "--out", str(tmp_path / "e")]) == 2


def test_missing_checkpoint_exits_1(tmp_path):
    assert main(["heatmap", "--checkpoint", str(tmp_path / "nope.sscxr"), "--out", str(tmp_path)]) == 1
