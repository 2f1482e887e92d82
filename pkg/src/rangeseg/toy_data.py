"""Synthetic desk-scale dataset generator.

Emits scans in the same on-disk layout as the real datasets (sequences 00 =
train, 01 = val, 02 = test). Scenes are built from analytic surfaces so that
the label of every point is a deterministic function of its geometry and
remission: a ground plane, a surrounding wall, and azimuth-sector obstacles
at class-specific distance bands. Remission is drawn from well-separated
class-keyed bands, so a correct model can reach near-perfect mIoU.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .scan_io import ClassConfig, PointCloud, SplitSpec, write_labels, write_scan

TOY_META_FILENAME = "toy_meta.json"

_SENSOR_HEIGHT = 1.7
_FOV_UP = math.radians(3.0)
_FOV_DOWN = math.radians(25.0)
_N_BEAMS = 64
_N_AZIMUTHS = 512
_N_SECTORS = 24
_REMISSION_NOISE_CLIP = 0.045   # < half the gap between remission bands


def _class_names(n_classes: int) -> list[str]:
    names = ["ground", "wall"]
    for i in range(n_classes - 2):
        names.append(f"object_{chr(ord('a') + i)}")
    return names[:n_classes]


def toy_classes(n_classes: int,
                frequencies: np.ndarray | None = None) -> ClassConfig:
    """ClassConfig for the synthetic dataset: identity remap, no ignore slot
    (ignore_id = -1 marks only empty range-image pixels)."""
    ident = {c: c for c in range(n_classes)}
    if frequencies is None:
        frequencies = np.full(n_classes, 1.0 / n_classes)
    return ClassConfig(num_classes=n_classes, remap=dict(ident),
                       inverse_remap=dict(ident), frequencies=frequencies,
                       ignore_id=-1, class_names=_class_names(n_classes))


def toy_split() -> SplitSpec:
    return SplitSpec(["00"], ["01"], ["02"])


@dataclass
class ToyDatasetInfo:
    root: Path
    n_classes: int
    seed: int
    scan_counts: dict[str, int]
    class_config: ClassConfig
    split: SplitSpec


def _generate_scan(rng: np.random.Generator, n_classes: int) -> PointCloud:
    """Cast one sweep of rays against the analytic scene."""
    k = n_classes
    elev_base = np.linspace(_FOV_UP, -_FOV_DOWN, _N_BEAMS)
    d_elev = (_FOV_UP + _FOV_DOWN) / (_N_BEAMS - 1)
    az_base = -math.pi + (np.arange(_N_AZIMUTHS) + 0.5) * (2 * math.pi / _N_AZIMUTHS)
    d_az = 2 * math.pi / _N_AZIMUTHS

    elev = elev_base[:, None] + rng.uniform(-0.3, 0.3, (_N_BEAMS, _N_AZIMUTHS)) * d_elev
    az = az_base[None, :] + rng.uniform(-0.3, 0.3, (_N_BEAMS, _N_AZIMUTHS)) * d_az
    sin_e, cos_e = np.sin(elev), np.cos(elev)

    inf = np.inf
    # candidate 0: ground plane at z = -sensor height
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ground = np.where(sin_e < -1e-6, -_SENSOR_HEIGHT / sin_e, inf)
    t_ground = np.where(t_ground <= 80.0, t_ground, inf)

    # candidate 1: surrounding wall, radius varying with azimuth per scan
    wall_r = rng.uniform(22.0, 30.0) + rng.uniform(4.0, 8.0) * np.sin(
        2.0 * az + rng.uniform(0.0, 2 * math.pi))
    with np.errstate(divide="ignore", invalid="ignore"):
        t_wall = wall_r / np.maximum(cos_e, 1e-6)
    z_wall = t_wall * sin_e
    t_wall = np.where((z_wall >= -_SENSOR_HEIGHT) & (z_wall <= 7.0), t_wall, inf)

    ranges = np.stack([t_ground, t_wall])
    classes = [0, 1]

    # candidates 2..k-1: azimuth-sector obstacles in class-keyed distance bands
    sector = np.floor((az + math.pi) / (2 * math.pi / _N_SECTORS)).astype(int)
    sector = np.clip(sector, 0, _N_SECTORS - 1)
    sector_class = np.full(_N_SECTORS, -1, dtype=int)
    obj_classes = list(range(2, k))
    if obj_classes:
        order = rng.permutation(_N_SECTORS)
        # two of every three sectors host an obstacle, round-robin by class
        occupied = order[: (2 * _N_SECTORS) // 3]
        for i, s in enumerate(np.sort(occupied)):
            sector_class[s] = obj_classes[i % len(obj_classes)]
    for c in obj_classes:
        lo = 6.0 + 7.0 * ((c - 2) % 2)        # alternate near/far bands
        rho = rng.uniform(lo, lo + 5.0, _N_SECTORS)
        height = rng.uniform(1.5, 3.2, _N_SECTORS)
        in_sector = sector_class[sector] == c
        with np.errstate(divide="ignore", invalid="ignore"):
            t_obj = rho[sector] / np.maximum(cos_e, 1e-6)
        z_obj = t_obj * sin_e
        hit = in_sector & (z_obj >= -_SENSOR_HEIGHT) & (z_obj <= height[sector])
        ranges = np.concatenate([ranges, np.where(hit, t_obj, inf)[None]])
        classes.append(c)

    winner = np.argmin(ranges, axis=0)
    t = np.take_along_axis(ranges, winner[None], axis=0)[0]
    returned = np.isfinite(t)

    label = np.asarray(classes)[winner][returned].astype(np.int32)
    t = t[returned] + rng.normal(0.0, 0.02, returned.sum())
    t = np.maximum(t, 0.5)
    se, ce, a = sin_e[returned], cos_e[returned], az[returned]
    xyz = np.stack([t * ce * np.cos(a), t * ce * np.sin(a), t * se], axis=1)

    base = (label + 1.0) / (k + 1.0)
    noise = np.clip(rng.normal(0.0, 0.015, label.shape),
                    -_REMISSION_NOISE_CLIP, _REMISSION_NOISE_CLIP)
    remission = np.clip(base + noise, 0.0, 1.0)
    return PointCloud(xyz.astype(np.float32), remission.astype(np.float32), label)


def make_toy_dataset(root: str | Path, n_scans: int, n_classes: int, seed: int,
                     val_scans: int | None = None,
                     test_scans: int | None = None) -> ToyDatasetInfo:
    """Write a synthetic dataset under ``root`` and return its metadata.

    Sequence 00 holds ``n_scans`` training scans; sequences 01/02 hold the
    val/test scans (default: one tenth of n_scans, at least 2 each). Files
    are byte-identical across calls with the same arguments.
    """
    if n_classes < 2:
        raise ValueError("n_classes must be >= 2")
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create dataset root {root}: {exc}") from exc

    if val_scans is None:
        val_scans = max(2, n_scans // 10)
    if test_scans is None:
        test_scans = max(2, n_scans // 10)
    scan_counts = {"00": n_scans, "01": val_scans, "02": test_scans}

    counts = np.zeros(n_classes, dtype=np.int64)
    for seq_index, (seq, count) in enumerate(sorted(scan_counts.items())):
        scan_dir = root / "sequences" / seq / "velodyne"
        label_dir = root / "sequences" / seq / "labels"
        for i in range(count):
            rng = np.random.default_rng((seed, seq_index, i))
            pc = _generate_scan(rng, n_classes)
            stem = f"{i:06d}"
            try:
                write_scan(scan_dir / f"{stem}.bin", pc)
                write_labels(label_dir / f"{stem}.label",
                             pc.labels.astype(np.uint32))
            except OSError as exc:
                raise DataError(f"cannot write toy dataset under {root}: {exc}") from exc
            counts += np.bincount(pc.labels, minlength=n_classes)

    frequencies = counts / counts.sum()
    meta = {
        "kind": "toy",
        "n_classes": n_classes,
        "seed": seed,
        "scan_counts": scan_counts,
        "class_names": _class_names(n_classes),
        "frequencies": frequencies.tolist(),
    }
    (root / TOY_META_FILENAME).write_text(json.dumps(meta, indent=2))
    cfg = toy_classes(n_classes, frequencies)
    return ToyDatasetInfo(root, n_classes, seed, scan_counts, cfg, toy_split())


def load_toy_meta(root: str | Path) -> ToyDatasetInfo:
    """Reconstruct ClassConfig and SplitSpec from a generated dataset."""
    root = Path(root)
    meta_path = root / TOY_META_FILENAME
    if not meta_path.exists():
        raise DataError(
            f"{meta_path} not found; generate the dataset with make_toy_dataset")
    meta = json.loads(meta_path.read_text())
    cfg = toy_classes(meta["n_classes"], np.asarray(meta["frequencies"]))
    return ToyDatasetInfo(root, meta["n_classes"], meta["seed"],
                          meta["scan_counts"], cfg, toy_split())
