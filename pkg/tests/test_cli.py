import json

import numpy as np
import pytest
import yaml

from dewrinkle.checkpoint import load_checkpoint, save_checkpoint
from dewrinkle.cli import main
from dewrinkle.data import load_image, load_mask, save_image, save_mask
from dewrinkle.inpaintnet import InpaintGenerator
from dewrinkle.segnet import NestedUNet

TINY = {
    "seed": 1,
    "data": {"train_root": None, "val_fraction": 0.25},
    "seg": {"epochs": 1, "input_size": 64, "batch_size": 2, "base_channels": 4, "encoder_depth": 3},
    "inpaint": {"epochs": 1, "batch_size": 2, "crop_size": 40, "ngf": 4, "n_blocks": 1, "ndf": 4,
                "disc_layers": 2, "hrf_width": 4, "val_every": 1},
    "mask_policy": {"n_strokes": [1, 2], "points_per_stroke": [3, 5], "step_px": [4, 8], "thickness_px": [2, 3],
                    "target_coverage": [0.01, 0.3], "max_tries": 100},
    "pipeline": {"seg_input_size": 64},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["make-toy", "--output", str(root / "toy"), "--n", "4"]) == 0
    cfg = dict(TINY, data={**TINY["data"], "train_root": str(root / "toy")}, output_dir=str(root / "run"))
    (root / "tiny.yaml").write_text(yaml.safe_dump(cfg))
    return root


def _cfg(ws):
    return str(ws / "tiny.yaml")


def test_make_toy_layout(workspace):
    toy = workspace / "toy"
    assert (toy / "manifest.txt").read_text().count("\n") == 4
    assert len(list((toy / "images").glob("*.png"))) == 4


@pytest.mark.parametrize("argv", [[], ["train-seg"], ["no-such-command"], ["eval", "--config", "x.yaml"]])
def test_usage_errors_exit_one(argv, capsys):
    with pytest.raises(SystemExit) as info:
        main(argv)
    assert info.value.code == 1


def test_missing_config_exit_one(tmp_path, capsys):
    assert main(["train-seg", "--config", str(tmp_path / "none.yaml")]) == 1
    assert "none.yaml" in capsys.readouterr().err


def test_missing_dataset_names_path(tmp_path, capsys):
    cfg = dict(TINY, data={"train_root": str(tmp_path / "absent")}, output_dir=str(tmp_path / "o"))
    (tmp_path / "c.yaml").write_text(yaml.safe_dump(cfg))
    assert main(["train-seg", "--config", str(tmp_path / "c.yaml")]) == 1
    assert str(tmp_path / "absent") in capsys.readouterr().err


def test_train_inpaint_without_seg_checkpoint(workspace, tmp_path, capsys):
    code = main(["train-inpaint", "--config", _cfg(workspace), "--output", str(tmp_path / "fresh")])
    assert code == 1
    err = capsys.readouterr().err
    assert "seg_checkpoint" in err and str(tmp_path / "fresh" / "seg.pt") in err


def test_train_seg_deterministic(workspace, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["train-seg", "--config", _cfg(workspace), "--output", str(a)]) == 0
    assert main(["train-seg", "--config", _cfg(workspace), "--output", str(b)]) == 0
    assert (a / "seg.pt").is_file()
    assert (a / "seg_history.json").read_bytes() == (b / "seg_history.json").read_bytes()
    model, cfg = load_checkpoint(a / "seg.pt", "seg")
    assert isinstance(model, NestedUNet) and cfg["seed"] == 1


def test_seed_flag_changes_run(workspace, tmp_path):
    assert main(["train-seg", "--config", _cfg(workspace), "--output", str(tmp_path / "s1")]) == 0
    assert main(["train-seg", "--config", _cfg(workspace), "--output", str(tmp_path / "s2"), "--seed", "2"]) == 0
    assert (tmp_path / "s1" / "seg_history.json").read_text() != (tmp_path / "s2" / "seg_history.json").read_text()


def test_full_cycle(workspace):
    run = workspace / "run"
    assert main(["train-seg", "--config", _cfg(workspace)]) == 0
    assert main(["train-inpaint", "--config", _cfg(workspace)]) == 0
    hist = json.loads((run / "inpaint_history.json").read_text())
    for key in ("gen_adv", "disc", "hrfpl", "discpl", "r1", "ffl", "s"):
        assert np.isfinite(hist[0][key])
    assert (run / "gen.pt").is_file() and (run / "disc.pt").is_file()

    img = workspace / "toy" / "images" / sorted((workspace / "toy" / "images").iterdir())[0].name
    empty = workspace / "empty.png"
    save_mask(empty, np.zeros((64, 64), dtype=np.uint8))
    out = workspace / "out.png"
    assert main(["infer", "--config", _cfg(workspace), str(img), str(out), "--mask-override", str(empty)]) == 0
    assert np.array_equal(load_image(out), load_image(img))
    assert (workspace / "out_mask.png").is_file()

    out2 = workspace / "pred.png"
    assert main(["infer", "--config", _cfg(workspace), str(img), str(out2)]) == 0
    assert load_image(out2).shape == (64, 64, 3) and load_mask(workspace / "pred_mask.png").shape == (64, 64)

    assert main(["eval", "--config", _cfg(workspace), "--seg"]) == 0
    report = json.loads((run / "metrics_seg.json").read_text())
    assert report["config_hash"] and 0.0 <= report["iou"] <= 1.0
    assert main(["eval", "--config", _cfg(workspace), "--inpaint"]) == 0
    first = (run / "metrics_inpaint.json").read_bytes()
    assert main(["eval", "--config", _cfg(workspace), "--inpaint"]) == 0
    assert (run / "metrics_inpaint.json").read_bytes() == first
    assert json.loads(first)["mask_seed"] == 1


def test_weight_override_logged(workspace, tmp_path):
    src = tmp_path / "seg.pt"
    save_checkpoint(src, NestedUNet(base_channels=4, encoder_depth=3), "seg")
    cfg = dict(yaml.safe_load((workspace / "tiny.yaml").read_text()))
    cfg["weights"] = {"lambda_ffl": 0.25}
    cfg["output_dir"] = str(tmp_path / "w")
    cfg["inpaint"] = {**cfg["inpaint"], "seg_checkpoint": str(src)}
    (tmp_path / "w.yaml").write_text(yaml.safe_dump(cfg))
    assert main(["train-inpaint", "--config", str(tmp_path / "w.yaml")]) == 0
    hist = json.loads((tmp_path / "w" / "inpaint_history.json").read_text())
    assert hist[0]["weights"]["lambda_ffl"] == 0.25


def test_wrong_checkpoint_kind_is_config_error(workspace, tmp_path, capsys):
    save_checkpoint(tmp_path / "seg.pt", InpaintGenerator(ngf=4, n_blocks=1), "gen")
    save_image(tmp_path / "x.png", np.zeros((64, 64, 3), dtype=np.float32))
    code = main(["infer", "--config", _cfg(workspace), "--output", str(tmp_path), str(tmp_path / "x.png"),
                 str(tmp_path / "y.png")])
    assert code == 1
    assert "expected 'seg'" in capsys.readouterr().err


def test_runtime_failure_exit_two(workspace, tmp_path, monkeypatch, capsys):
    from dewrinkle import cli
    from dewrinkle.segnet import TrainingDivergedError

    def diverge(*args, **kwargs):
        raise TrainingDivergedError("non-finite segmentation loss at epoch 0", epoch=0)

    monkeypatch.setattr(cli, "train_segmentation", diverge)
    assert main(["train-seg", "--config", _cfg(workspace), "--output", str(tmp_path)]) == 2
    assert "non-finite" in capsys.readouterr().err
