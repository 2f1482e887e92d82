import math

import numpy as np
import pytest
import torch
from torch import nn

from rangeseg.errors import DataError
from rangeseg.metrics import (ConfusionMatrix, benchmark_forward,
                              evaluate_split, iou, resolve_device)
from rangeseg.network import ModelConfig, SegmentationOutput
from rangeseg.projection import KnnConfig, ProjectionConfig
from rangeseg.scan_io import ScanRecord, write_labels, write_scan
from rangeseg.toy_data import toy_classes

from oracles import confusion_tally, iou_formula
from test_projection import _bijective_cloud

BENCH_CFG = ModelConfig(num_classes=4, stage_channels=(8, 8, 8, 8),
                        stage_blocks=(1, 1, 1, 1), head_channels=(8, 8))


def test_accumulate_diagonal_only():
    cm = ConfusionMatrix(3)
    labels = np.repeat([0, 1, 2], [30, 40, 30])
    cm.add(labels, labels)
    assert np.array_equal(np.diag(cm.counts), [30, 40, 30])
    assert cm.counts.sum() == 100


def test_accumulate_ignores_ignore_id():
    cm = ConfusionMatrix(3, ignore_id=0)
    cm.add(np.array([1, 2, 1]), np.array([0, 0, 0]))
    assert cm.counts.sum() == 0


def test_accumulate_tally_oracle(rng):
    pred = rng.integers(0, 4, 500)
    gt = rng.integers(-1, 4, 500)
    cm = ConfusionMatrix(4, ignore_id=-1).add(pred, gt)
    assert np.array_equal(cm.counts, confusion_tally(pred, gt, 4, -1))


def test_accumulate_length_mismatch():
    with pytest.raises(DataError):
        ConfusionMatrix(3).add(np.zeros(4, dtype=int), np.zeros(5, dtype=int))


def test_accumulate_rejects_out_of_range():
    with pytest.raises(DataError):
        ConfusionMatrix(3).add(np.array([7]), np.array([1]))


def test_iou_perfect_diagonal():
    cm = ConfusionMatrix(3)
    cm.counts = np.diag([5, 6, 7]).astype(np.int64)
    result = iou(cm)
    assert np.allclose(result.per_class[result.included], 1.0)
    assert result.miou == 1.0


def test_iou_fully_off_diagonal():
    cm = ConfusionMatrix(2)
    cm.counts = np.array([[0, 4], [6, 0]], dtype=np.int64)
    result = iou(cm)
    assert result.miou == 0.0
    assert np.allclose(result.per_class[result.included], 0.0)


def test_iou_formula_oracle(rng):
    for seed in range(5):
        counts = np.random.default_rng(seed).integers(0, 50, (3, 3))
        cm = ConfusionMatrix(3)
        cm.counts = counts.astype(np.int64)
        result = iou(cm)
        per, included, miou = iou_formula(counts, ignore_id=-1)
        assert np.array_equal(result.included, included)
        np.testing.assert_allclose(result.per_class[included], per[included])
        assert result.miou == pytest.approx(miou)


def test_iou_empty_matrix_undefined():
    result = iou(ConfusionMatrix(3))
    assert not result.defined
    assert math.isnan(result.miou)


def test_iou_excludes_ignore_class():
    cm = ConfusionMatrix(3, ignore_id=0)
    cm.add(np.array([0, 1, 2, 2]), np.array([1, 1, 2, 2]))
    result = iou(cm)
    assert not result.included[0]
    # class 1: tp=1, fn=1 (pred 0) -> 0.5; class 2: 1.0
    assert result.miou == pytest.approx((0.5 + 1.0) / 2)


def test_partition_invariance(rng):
    pred = rng.integers(0, 5, 2000)
    gt = rng.integers(0, 5, 2000)
    whole = ConfusionMatrix(5).add(pred, gt)
    for trial in range(10):
        cuts = np.sort(rng.integers(0, 2000, 6))
        parts = np.split(np.arange(2000), cuts)
        cm = ConfusionMatrix(5)
        for part in parts:
            if part.size:
                cm.add(pred[part], gt[part])
        assert np.array_equal(cm.counts, whole.counts)
        assert iou(cm).miou == iou(whole).miou


def test_merge_associative_commutative(rng):
    chunks = [(rng.integers(0, 3, 50), rng.integers(0, 3, 50))
              for _ in range(3)]
    def matrix(*idx):
        cm = ConfusionMatrix(3)
        for i in idx:
            cm.add(*chunks[i])
        return cm
    ab_c = matrix(0, 1).merge(matrix(2))
    a_bc = matrix(0).merge(matrix(1, 2))
    cba = matrix(2, 1, 0)
    assert np.array_equal(ab_c.counts, a_bc.counts)
    assert np.array_equal(ab_c.counts, cba.counts)


# ---------------------------------------------------------------------------
# evaluate_split
# ---------------------------------------------------------------------------


class _RemissionDiscriminant(nn.Module):
    """Classifies each pixel by the nearest remission band center: for
    bands mu_c, logits_c = r * mu_c - mu_c^2 / 2 is maximized by the
    nearest center."""

    def __init__(self, centers):
        super().__init__()
        self.centers = torch.tensor(centers, dtype=torch.float32)

    def forward(self, x):
        r = x[:, 4:5]
        logits = r * self.centers.view(1, -1, 1, 1) \
            - 0.5 * self.centers.view(1, -1, 1, 1) ** 2
        return SegmentationOutput(logits)


def _write_bijective_scan(tmp_path, cfg, num_classes=4, seed=0):
    """One point per pixel; labels form blocks whose depth bands differ by
    far more than the KNN range cutoff, so the range gate keeps the vote
    within each label region."""
    pc = _bijective_cloud(cfg, num_classes=num_classes, seed=seed)
    rng = np.random.default_rng(seed)
    vs = np.repeat(np.arange(cfg.height), cfg.width)
    us = np.tile(np.arange(cfg.width), cfg.height)
    labels = ((vs // 4 + us // 8) % num_classes).astype(np.int32)
    depth = 5.0 + 10.0 * labels + rng.uniform(-0.2, 0.2, labels.size)
    scale = depth / np.linalg.norm(pc.xyz.astype(np.float64), axis=1)
    pc.xyz = (pc.xyz * scale[:, None]).astype(np.float32)
    pc.labels = labels
    # remission determined by the label so the discriminant model is exact
    centers = [(c + 1.0) / (num_classes + 1.0) for c in range(num_classes)]
    pc.remission = np.asarray(centers, dtype=np.float32)[labels]
    scan_dir = tmp_path / "sequences" / "00" / "velodyne"
    label_dir = tmp_path / "sequences" / "00" / "labels"
    write_scan(scan_dir / "000000.bin", pc)
    write_labels(label_dir / "000000.label", labels.astype(np.uint32))
    return ScanRecord("00", scan_dir / "000000.bin",
                      label_dir / "000000.label"), centers


def test_evaluate_split_perfect_model(tmp_path):
    cfg = ProjectionConfig.from_degrees(16, 64, 3.0, 25.0)
    record, centers = _write_bijective_scan(tmp_path, cfg)
    classes = toy_classes(4)
    model = _RemissionDiscriminant(centers)
    identity = (np.zeros(5, dtype=np.float32), np.ones(5, dtype=np.float32))
    result = evaluate_split(model, [record], classes, cfg, None, identity)
    assert result.image_miou == pytest.approx(1.0)
    assert result.point_miou == pytest.approx(1.0)
    assert set(result.image_per_class) == set(classes.class_names)
    # bijective projection: KNN cleanup cannot change the score
    knn = evaluate_split(model, [record], classes, cfg,
                         KnnConfig(k=5, window=5), identity)
    assert knn.point_miou == pytest.approx(result.point_miou)


def test_evaluate_split_chance_level_recorded(tmp_path):
    """Untrained model on balanced data sits near chance; recorded, not
    asserted."""
    cfg = ProjectionConfig.from_degrees(16, 64, 3.0, 25.0)
    record, _ = _write_bijective_scan(tmp_path, cfg, seed=3)
    classes = toy_classes(4)
    torch.manual_seed(0)
    from rangeseg.network import build_model
    model = build_model(ModelConfig(num_classes=4,
                                    stage_channels=(8, 8, 8, 8),
                                    stage_blocks=(1, 1, 1, 1),
                                    head_channels=(8, 8)))
    identity = (np.zeros(5, dtype=np.float32), np.ones(5, dtype=np.float32))
    result = evaluate_split(model, [record], classes, cfg, None, identity)
    print(f"untrained 4-class model: image mIoU {result.image_miou:.4f} "
          f"(chance reference 1/C = 0.25 before IoU penalty)")
    assert 0.0 <= result.image_miou <= 1.0


def test_evaluate_split_requires_labels(tmp_path):
    cfg = ProjectionConfig.from_degrees(16, 64, 3.0, 25.0)
    record, centers = _write_bijective_scan(tmp_path, cfg)
    record = ScanRecord(record.sequence, record.scan_path, None)
    with pytest.raises(DataError):
        evaluate_split(_RemissionDiscriminant(centers), [record],
                       toy_classes(4), cfg, None,
                       (np.zeros(5, np.float32), np.ones(5, np.float32)))


# ---------------------------------------------------------------------------
# Benchmark
# ---------------------------------------------------------------------------


def test_benchmark_report_consistency():
    report = benchmark_forward(BENCH_CFG, resolutions=[64, 128],
                               kernels=[1, 3], height=32,
                               warmup=5, iters=20)
    assert len(report.records) == 4
    for rec in report.records:
        assert rec.timed_iters >= 20 and rec.warmup_iters >= 5
        assert rec.fps == pytest.approx(1000.0 / rec.latency_ms, rel=1e-6)
        assert rec.latency_ms > 0
    table = report.format_table()
    assert "Kernel Size" in table and "FPS" in table
    assert len(table.splitlines()) == 2 + 4 + 1  # device + header + rule + rows


def test_benchmark_enforces_iteration_floors():
    report = benchmark_forward(BENCH_CFG, resolutions=[64], kernels=[1],
                               height=32, warmup=0, iters=3)
    rec = report.records[0]
    assert rec.warmup_iters == 5 and rec.timed_iters == 20


def test_resolve_device():
    assert resolve_device("cpu") == "cpu"
    if not torch.cuda.is_available():
        assert resolve_device("cuda", fallback_to_cpu=True) == "cpu"
        with pytest.raises(RuntimeError):
            resolve_device("cuda")
