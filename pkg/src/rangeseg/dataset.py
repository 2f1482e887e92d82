"""Torch-facing dataset: loads scans, applies training augmentation with
per-sample deterministic seeds, projects to range images, and normalizes
the input channels. Every loader call is a pure function of
(record, config, epoch, index), so parallel workers cannot change results.
"""

from __future__ import annotations

import logging

import numpy as np
import torch
from torch.utils.data import Dataset

from .projection import ProjectionConfig, spherical_project
from .scan_io import (AugmentationConfig, ClassConfig, ScanRecord, augment,
                      derive_sample_seed, load_labels, load_scan)

log = logging.getLogger(__name__)


class ScanSegmentationDataset(Dataset):
    """Yields (input (5,H,W) float32, target (H,W) int64) per scan."""

    def __init__(self, records: list[ScanRecord], class_cfg: ClassConfig,
                 proj_cfg: ProjectionConfig,
                 normalization: tuple[np.ndarray, np.ndarray],
                 augmentation: AugmentationConfig | None = None,
                 global_seed: int = 0, strict_labels: bool = False):
        self.records = records
        self.class_cfg = class_cfg
        self.proj_cfg = proj_cfg
        self.means, self.stds = (np.asarray(normalization[0], dtype=np.float32),
                                 np.asarray(normalization[1], dtype=np.float32))
        self.augmentation = augmentation
        self.global_seed = global_seed
        self.strict_labels = strict_labels
        self.epoch = 0

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, index: int):
        rec = self.records[index]
        pc = load_scan(rec.scan_path)
        if rec.label_path is not None:
            labels = load_labels(rec.label_path, self.class_cfg,
                                 expected_count=len(pc),
                                 strict=self.strict_labels)
            pc = pc.with_labels(labels)
        if self.augmentation is not None:
            seed = derive_sample_seed(self.global_seed, self.epoch, index)
            pc = augment(pc, self.augmentation, seed)
        ri = spherical_project(pc, self.proj_cfg,
                               fill_label=self.class_cfg.ignore_id)
        x = (ri.channels - self.means[:, None, None]) / self.stds[:, None, None]
        x[:, ~ri.valid_mask] = 0.0
        target = (ri.label_image if ri.label_image is not None
                  else np.full((ri.height, ri.width), self.class_cfg.ignore_id,
                               dtype=np.int32))
        return (torch.from_numpy(x.astype(np.float32)),
                torch.from_numpy(target.astype(np.int64)))


def compute_channel_stats(records: list[ScanRecord], proj_cfg: ProjectionConfig,
                          max_scans: int = 50
                          ) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/std over valid pixels of (up to) the first scans of
    the split. Stds are floored at 1e-6 so constant channels stay finite."""
    total = np.zeros(5)
    total_sq = np.zeros(5)
    count = 0
    for rec in records[:max_scans]:
        ri = spherical_project(load_scan(rec.scan_path), proj_cfg)
        vals = ri.channels[:, ri.valid_mask].astype(np.float64)
        total += vals.sum(axis=1)
        total_sq += (vals ** 2).sum(axis=1)
        count += vals.shape[1]
    if count == 0:
        return np.zeros(5, dtype=np.float32), np.ones(5, dtype=np.float32)
    means = total / count
    variances = np.maximum(total_sq / count - means ** 2, 0.0)
    stds = np.maximum(np.sqrt(variances), 1e-6)
    return means.astype(np.float32), stds.astype(np.float32)


def compute_class_frequencies(records: list[ScanRecord], class_cfg: ClassConfig,
                              max_scans: int = 100) -> np.ndarray:
    """Share of points per train class over (up to) the first scans."""
    counts = np.zeros(class_cfg.num_classes, dtype=np.int64)
    for rec in records[:max_scans]:
        if rec.label_path is None:
            continue
        labels = load_labels(rec.label_path, class_cfg)
        valid = labels != class_cfg.ignore_id
        counts += np.bincount(labels[valid],
                              minlength=class_cfg.num_classes)[:class_cfg.num_classes]
        if 0 <= class_cfg.ignore_id < class_cfg.num_classes:
            counts[class_cfg.ignore_id] += int((~valid).sum())
    total = counts.sum()
    if total == 0:
        log.warning("no labels found while computing class frequencies")
        return np.full(class_cfg.num_classes, 1.0 / class_cfg.num_classes)
    return counts / total
