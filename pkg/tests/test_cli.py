import json

import yaml

from rangeseg.cli import main
from rangeseg.config import preset, save_config
from rangeseg.scan_io import list_scans


def _toy_config(info, tmp_path, **overrides):
    cfg = preset("toy", str(info.root)).replaced({
        "optimizer.epochs": 1,
        "runtime.batch_size": 4,
        "runtime.checkpoint_dir": str(tmp_path / "run"),
        "runtime.early_stop_miou": None,
        "model.stage_channels": [4, 8, 8, 8],
        "model.head_channels": [8, 8],
        **overrides,
    })
    path = tmp_path / "cfg.yaml"
    save_config(cfg, path)
    return cfg, path


def test_cli_train_eval_infer_project(small_toy_dataset, tmp_path, capsys):
    cfg, cfg_path = _toy_config(small_toy_dataset, tmp_path)
    assert main(["train", "--config", str(cfg_path)]) == 0
    ckpt = tmp_path / "run" / "best.ckpt"
    assert ckpt.exists()

    out_json = tmp_path / "metrics.json"
    assert main(["eval", "--config", str(cfg_path), "--checkpoint", str(ckpt),
                 "--split", "val", "--out", str(out_json)]) == 0
    record = json.loads(out_json.read_text())
    assert "image_space" in record and "point_space" in record
    assert "miou" in record["image_space"]
    assert record["config"]["model"]["num_classes"] == 4

    scans = list_scans(small_toy_dataset.root, ["01"])
    glob_pat = str(small_toy_dataset.root / "sequences" / "01" / "velodyne" / "*.bin")
    assert main(["infer", "--config", str(cfg_path), "--checkpoint", str(ckpt),
                 "--scans", glob_pat, "--out", str(tmp_path / "pred")]) == 0
    assert len(list((tmp_path / "pred").glob("*.label"))) == len(scans)

    assert main(["project", "--config", str(cfg_path),
                 "--scan", str(scans[0].scan_path),
                 "--out", str(tmp_path / "dbg")]) == 0
    assert (tmp_path / "dbg").glob("*.png")
    capsys.readouterr()


def test_cli_benchmark(small_toy_dataset, tmp_path, capsys):
    cfg, cfg_path = _toy_config(small_toy_dataset, tmp_path)
    out = tmp_path / "bench.txt"
    fig = tmp_path / "bench.png"
    assert main(["benchmark", "--config", str(cfg_path),
                 "--resolutions", "64,128", "--kernels", "1",
                 "--out", str(out), "--figure", str(fig)]) == 0
    text = out.read_text()
    assert "Kernel Size" in text and "FPS" in text
    assert fig.stat().st_size > 0
    capsys.readouterr()


def test_cli_ablate(small_toy_dataset, tmp_path, capsys):
    cfg, cfg_path = _toy_config(small_toy_dataset, tmp_path)
    plan_path = tmp_path / "plan.yaml"
    plan_path.write_text(yaml.safe_dump({
        "name": "mini", "legs": [{"name": "base", "overrides": {}}]}))
    assert main(["ablate", "--config", str(cfg_path), "--plan", str(plan_path),
                 "--out", str(tmp_path / "ab")]) == 0
    assert (tmp_path / "ab" / "ablation.txt").exists()
    capsys.readouterr()


def test_cli_init_config(tmp_path, capsys):
    out = tmp_path / "kitti.yaml"
    assert main(["init-config", "--preset", "kitti", "--out", str(out)]) == 0
    data = yaml.safe_load(out.read_text())
    assert data["optimizer"]["epochs"] == 100
    capsys.readouterr()


def test_cli_exit_codes(small_toy_dataset, tmp_path, capsys):
    # missing config file -> config error -> 1
    assert main(["train", "--config", str(tmp_path / "none.yaml")]) == 1
    # unknown key in config -> 1
    bad = tmp_path / "bad.yaml"
    bad.write_text("model:\n  bogus: 1\n")
    assert main(["train", "--config", str(bad)]) == 1
    # infer with no matching scans -> data error -> 2
    cfg, cfg_path = _toy_config(small_toy_dataset, tmp_path)
    assert main(["infer", "--config", str(cfg_path),
                 "--checkpoint", str(tmp_path / "missing.ckpt"),
                 "--scans", str(tmp_path / "*.nothing"),
                 "--out", str(tmp_path / "x")]) == 2
    # train on an unreadable dataset root -> data error -> 2
    cfg2 = cfg.replaced({"dataset.root": str(small_toy_dataset.root)})
    broken = cfg2.replaced({"dataset.train_sequences": ["77"]})
    broken_path = tmp_path / "broken.yaml"
    save_config(broken, broken_path)
    assert main(["train", "--config", str(broken_path)]) == 2
    capsys.readouterr()


def test_cli_usage_error_exit_code(capsys):
    import pytest
    with pytest.raises(SystemExit) as exc:
        main(["train"])  # missing --config
    assert exc.value.code == 1
    capsys.readouterr()


def test_env_dataset_root_override(small_toy_dataset, tmp_path, monkeypatch,
                                   capsys):
    cfg, cfg_path = _toy_config(small_toy_dataset, tmp_path)
    wrong = cfg.replaced({"dataset.root": str(tmp_path / "not-here")})
    wrong_path = tmp_path / "wrong.yaml"
    save_config(wrong, wrong_path)
    monkeypatch.setenv("DATASET_ROOT", str(small_toy_dataset.root))
    assert main(["train", "--config", str(wrong_path)]) == 0
    capsys.readouterr()
