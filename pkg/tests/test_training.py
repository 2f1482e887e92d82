import json
import math

import numpy as np
import pytest
import torch

from rangeseg.config import preset
from rangeseg.errors import ConfigError, DataError
from rangeseg.metrics import ConfusionMatrix, iou
from rangeseg.network import load_checkpoint
from rangeseg.scan_io import list_scans, load_labels, load_scan
from rangeseg.training import (cosine_lr, cyclic_lr, evaluate_checkpoint,
                               run_ablation, run_inference,
                               run_projection_debug, scheduled_lr, train)


def _tiny_cfg(info, tmp_path, **overrides):
    base = {
        "optimizer.epochs": 1,
        "runtime.batch_size": 4,
        "runtime.checkpoint_dir": str(tmp_path / "run"),
        "runtime.early_stop_miou": None,
        "runtime.log_interval": 1,
        "model.stage_channels": [4, 8, 8, 8],
        "model.head_channels": [8, 8],
    }
    base.update(overrides)
    return preset("toy", str(info.root)).replaced(base)


# ---------------------------------------------------------------------------
# Schedules
# ---------------------------------------------------------------------------


def test_cosine_schedule_endpoints():
    assert cosine_lr(0, 10, 1e-2, 1e-5) == pytest.approx(1e-2)
    assert cosine_lr(9, 10, 1e-2, 1e-5) == pytest.approx(1e-5)
    # closed form halfway
    for e in range(10):
        t = e / 9
        want = 1e-5 + 0.5 * (1e-2 - 1e-5) * (1 + math.cos(math.pi * t))
        assert cosine_lr(e, 10, 1e-2, 1e-5) == pytest.approx(want, rel=1e-12)
    assert cosine_lr(0, 1, 3e-3, 0.0) == 3e-3


def test_cyclic_schedule_restarts():
    peak, floor, period = 1e-3, 1e-5, 45
    assert cyclic_lr(0, period, peak, floor) == pytest.approx(peak)
    assert cyclic_lr(period - 1, period, peak, floor) == pytest.approx(floor)
    assert cyclic_lr(period, period, peak, floor) == pytest.approx(peak)
    assert cyclic_lr(3 * period - 1, period, peak, floor) == pytest.approx(floor)
    for e in range(0, 3 * period):
        t = (e % period) / (period - 1)
        want = floor + 0.5 * (peak - floor) * (1 + math.cos(math.pi * t))
        assert cyclic_lr(e, period, peak, floor) == pytest.approx(want, rel=1e-12)


def test_scheduled_lr_dispatch():
    kitti = preset("kitti")
    assert scheduled_lr(kitti, 0) == pytest.approx(1e-2)
    assert scheduled_lr(kitti, 99) == pytest.approx(0.0)
    poss = preset("poss")
    assert scheduled_lr(poss, 0) == pytest.approx(1e-3)
    assert scheduled_lr(poss, 44) == pytest.approx(1e-5)
    assert scheduled_lr(poss, 45) == pytest.approx(1e-3)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def test_train_smoke_produces_checkpoint_and_metrics(small_toy_dataset, tmp_path):
    cfg = _tiny_cfg(small_toy_dataset, tmp_path)
    result = train(cfg)
    assert result.last_checkpoint.exists()
    assert result.best_checkpoint.exists()
    assert result.epochs_run == 1
    records = [json.loads(line)
               for line in result.metrics_log.read_text().splitlines()]
    loss_records = [r for r in records if r.get("type") == "loss"]
    assert loss_records
    expected_keys = {"step", "wce", "lovasz", "boundary", "main",
                     "aux_1", "aux_2", "aux_3", "total"}
    assert expected_keys <= set(loss_records[0])
    val_records = [r for r in records if r.get("type") == "val"]
    assert val_records and "val_image_miou" in val_records[0]
    payload = load_checkpoint(result.last_checkpoint)
    from rangeseg.training import resolve_config
    resolved, _ = resolve_config(cfg)
    assert payload["config"] == resolved.to_dict()
    assert payload["config"]["model"]["num_classes"] == 4
    assert payload["config"]["projection"]["means"] is not None


def test_resume_advances_epoch_and_matches_schedule(small_toy_dataset, tmp_path):
    # early_stop_miou = 0 halts after every epoch, emulating an interrupt
    cfg = _tiny_cfg(small_toy_dataset, tmp_path,
                    **{"optimizer.epochs": 3, "runtime.early_stop_miou": 0.0})
    first = train(cfg)
    assert load_checkpoint(first.last_checkpoint)["epoch"] == 0
    second = train(cfg, resume=first.last_checkpoint)
    payload = load_checkpoint(second.last_checkpoint)
    assert payload["epoch"] == 1
    lr_used = [json.loads(line)["lr"]
               for line in second.metrics_log.read_text().splitlines()
               if json.loads(line).get("type") == "loss"][-1]
    assert lr_used == pytest.approx(cosine_lr(1, 3, cfg.optimizer.lr,
                                              cfg.optimizer.lr_min), rel=1e-12)


def test_resume_refuses_mismatched_config(small_toy_dataset, tmp_path):
    cfg = _tiny_cfg(small_toy_dataset, tmp_path)
    result = train(cfg)
    changed = cfg.replaced({"loss.lambda_aux": 0.25})
    with pytest.raises(ConfigError, match="loss.lambda_aux"):
        train(changed, resume=result.last_checkpoint)


def test_two_runs_same_seed_identical(small_toy_dataset, tmp_path):
    cfg_a = _tiny_cfg(small_toy_dataset, tmp_path,
                      **{"runtime.checkpoint_dir": str(tmp_path / "a")})
    cfg_b = _tiny_cfg(small_toy_dataset, tmp_path,
                      **{"runtime.checkpoint_dir": str(tmp_path / "b")})
    miou_a = train(cfg_a).history[-1]["val_image_miou"]
    miou_b = train(cfg_b).history[-1]["val_image_miou"]
    assert abs(miou_a - miou_b) <= 1e-6


# ---------------------------------------------------------------------------
# Evaluation and inference
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def trained(small_toy_dataset, tmp_path_factory):
    tmp = tmp_path_factory.mktemp("trained")
    cfg = _tiny_cfg(small_toy_dataset, tmp,
                    **{"optimizer.epochs": 2, "optimizer.lr": 0.05})
    result = train(cfg)
    return cfg, result


def test_evaluate_deterministic(trained):
    cfg, result = trained
    a = evaluate_checkpoint(cfg, result.best_checkpoint, "val")
    b = evaluate_checkpoint(cfg, result.best_checkpoint, "val")
    assert a.to_dict() == b.to_dict()
    assert 0.0 <= a.image_miou <= 1.0
    assert not a.knn_enabled
    with_knn = evaluate_checkpoint(cfg, result.best_checkpoint, "val", knn=True)
    assert with_knn.knn_enabled


def test_evaluate_class_count_mismatch(trained, tmp_path):
    cfg, result = trained
    from rangeseg.toy_data import make_toy_dataset
    other = make_toy_dataset(tmp_path / "five", n_scans=2, n_classes=5, seed=1)
    other_cfg = cfg.replaced({"dataset.root": str(other.root)})
    with pytest.raises(ConfigError, match="classes"):
        evaluate_checkpoint(other_cfg, result.best_checkpoint, "val")


def test_infer_writes_label_files(trained, small_toy_dataset, tmp_path):
    cfg, result = trained
    records = list_scans(small_toy_dataset.root, ["01"], require_labels=True)
    scans = [r.scan_path for r in records[:3]]
    out = run_inference(cfg, result.best_checkpoint, scans, tmp_path / "pred")
    assert len(out["written"]) == len(scans) and not out["skipped"]
    for scan, pred_path in zip(scans, out["written"]):
        n = len(load_scan(scan))
        labels = load_labels(pred_path, small_toy_dataset.class_config,
                             expected_count=n)
        assert labels.shape == (n,)


def test_infer_order_independent(trained, small_toy_dataset, tmp_path):
    cfg, result = trained
    records = list_scans(small_toy_dataset.root, ["01"], require_labels=True)
    scans = [r.scan_path for r in records[:2]]
    a = run_inference(cfg, result.best_checkpoint, scans, tmp_path / "fwd")
    b = run_inference(cfg, result.best_checkpoint, scans[::-1], tmp_path / "rev")
    fwd = {p.name: p.read_bytes() for p in a["written"]}
    rev = {p.name: p.read_bytes() for p in b["written"]}
    assert fwd == rev


def test_infer_skips_unreadable(trained, small_toy_dataset, tmp_path):
    cfg, result = trained
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"\x01\x02\x03")
    records = list_scans(small_toy_dataset.root, ["01"], require_labels=True)
    out = run_inference(cfg, result.best_checkpoint,
                        [records[0].scan_path, bad], tmp_path / "o")
    assert len(out["written"]) == 1
    assert out["skipped"] == [str(bad)]


def test_offline_predictions_match_inprocess_eval(trained, small_toy_dataset,
                                                  tmp_path):
    cfg, result = trained
    pred_dir = tmp_path / "offline"
    in_process = evaluate_checkpoint(cfg, result.best_checkpoint, "val",
                                     predictions_dir=pred_dir)
    info = small_toy_dataset
    cm = ConfusionMatrix(info.class_config.num_classes,
                         info.class_config.ignore_id)
    for rec in list_scans(info.root, ["01"], require_labels=True):
        gt = load_labels(rec.label_path, info.class_config)
        pred = load_labels(pred_dir / rec.scan_path.with_suffix(".label").name,
                           info.class_config, expected_count=gt.size)
        cm.add(pred, gt)
    offline = iou(cm).miou
    assert abs(offline - in_process.point_miou) <= 1e-12


# ---------------------------------------------------------------------------
# Ablation and projection debug
# ---------------------------------------------------------------------------


def test_ablation_rows_and_failure_isolation(small_toy_dataset, tmp_path):
    cfg = _tiny_cfg(small_toy_dataset, tmp_path)
    plan = {"name": "demo", "legs": [
        {"name": "base", "overrides": {}},
        {"name": "broken", "overrides": {"model.stage_strides": [1, 2, 4, 3]}},
        {"name": "kernel3", "overrides": {"model.input_kernel": 3}},
    ]}
    rows = run_ablation(cfg, plan, tmp_path / "ablate")
    by_name = {r.name: r for r in rows}
    assert not by_name["base"].failed
    assert by_name["broken"].failed
    assert not by_name["kernel3"].failed
    from rangeseg.network import kernel_parameter_delta
    from rangeseg.config import class_config_for, model_config
    mc = model_config(cfg, class_config_for(cfg).num_classes)
    delta = by_name["kernel3"].train_params - by_name["base"].train_params
    assert delta == kernel_parameter_delta(mc)
    assert (tmp_path / "ablate" / "ablation.txt").exists()
    table = (tmp_path / "ablate" / "ablation.txt").read_text()
    assert "FAILED" in table


def test_projection_debug_outputs(small_toy_dataset, tmp_path):
    cfg = preset("toy", str(small_toy_dataset.root))
    rec = list_scans(small_toy_dataset.root, ["00"])[0]
    written = run_projection_debug(cfg, rec.scan_path, tmp_path / "dbg")
    suffixes = {p.suffix for p in written}
    assert suffixes == {".png", ".txt"}
    assert len(written) == 3  # range, labels, sidecar


def test_train_empty_split_raises(small_toy_dataset, tmp_path):
    cfg = _tiny_cfg(small_toy_dataset, tmp_path,
                    **{"dataset.train_sequences": ["01"],
                       "dataset.val_sequences": [],
                       "dataset.test_sequences": []})
    cfg2 = cfg.replaced({"dataset.train_sequences": ["09"]})
    with pytest.raises(DataError):
        train(cfg2)
