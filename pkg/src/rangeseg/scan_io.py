"""Scan and label file I/O, class remapping, dataset splits, and augmentation.

File conventions (SemanticKITTI-style, shared by SemanticPOSS):

* Scan files (``velodyne/*.bin``): consecutive little-endian float32 records
  of ``(x, y, z, remission)``, 16 bytes per point.
* Label files (``labels/*.label``): consecutive little-endian uint32 records;
  the semantic class lives in the low 16 bits, the instance id in the high 16
  bits (discarded here).
* Directory layout: ``<root>/sequences/<SS>/velodyne/*.bin`` and
  ``<root>/sequences/<SS>/labels/*.label``, sorted lexicographically.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DataError

log = logging.getLogger(__name__)

POINT_RECORD_BYTES = 16
LABEL_RECORD_BYTES = 4
SEMANTIC_MASK = 0xFFFF


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass
class PointCloud:
    """A LiDAR sweep: coordinates in meters, 4th-field remission, optional
    per-point train-class labels."""

    xyz: np.ndarray                     # (N, 3) float32
    remission: np.ndarray               # (N,) float32
    labels: np.ndarray | None = None    # (N,) int32 train ids

    def __post_init__(self) -> None:
        self.xyz = np.ascontiguousarray(self.xyz, dtype=np.float32)
        self.remission = np.ascontiguousarray(self.remission, dtype=np.float32)
        if self.xyz.ndim != 2 or self.xyz.shape[1] != 3:
            raise ValueError(f"xyz must be (N, 3), got {self.xyz.shape}")
        if self.remission.shape != (self.xyz.shape[0],):
            raise ValueError("remission length must match xyz")
        if self.labels is not None:
            self.labels = np.ascontiguousarray(self.labels, dtype=np.int32)
            if self.labels.shape != (self.xyz.shape[0],):
                raise ValueError("labels length must match xyz")

    def __len__(self) -> int:
        return self.xyz.shape[0]

    @property
    def ranges(self) -> np.ndarray:
        """Euclidean distance of every point from the sensor origin."""
        return np.linalg.norm(self.xyz.astype(np.float64), axis=1)

    def with_labels(self, labels: np.ndarray) -> "PointCloud":
        return PointCloud(self.xyz.copy(), self.remission.copy(), labels)


@dataclass
class ClassConfig:
    """Label taxonomy: raw-id <-> train-id mapping, frequencies, ignore class.

    ``num_classes`` counts every logit slot, including an ignored slot when
    ``ignore_id`` falls inside ``[0, num_classes)`` (SemanticKITTI keeps the
    "unlabeled" class at train id 0). ``frequencies`` are the per-train-class
    shares of points and must sum to 1.
    """

    num_classes: int
    remap: dict[int, int]
    inverse_remap: dict[int, int]
    frequencies: np.ndarray
    ignore_id: int
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.frequencies = np.asarray(self.frequencies, dtype=np.float64)
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.frequencies.shape != (self.num_classes,):
            raise ValueError("frequencies must have one entry per class")
        if (self.frequencies < 0).any():
            raise ValueError("frequencies must be nonnegative")
        if abs(float(self.frequencies.sum()) - 1.0) > 1e-6:
            raise ValueError("frequencies must sum to 1 within 1e-6")
        if not self.class_names:
            self.class_names = [f"class_{c:02d}" for c in range(self.num_classes)]
        if len(self.class_names) != self.num_classes:
            raise ValueError("class_names must have one entry per class")
        for train_id, raw_id in self.inverse_remap.items():
            if train_id == self.ignore_id:
                continue
            if self.remap.get(raw_id) != train_id:
                raise ValueError(
                    f"inverse_remap is not a right inverse of remap at train id {train_id}"
                )
        self._lookup: np.ndarray | None = None

    @property
    def train_ids(self) -> list[int]:
        """Non-ignored train ids, ascending."""
        return [c for c in range(self.num_classes) if c != self.ignore_id]

    def remap_table(self) -> np.ndarray:
        """Dense raw->train lookup over the 16-bit semantic range.

        Unknown raw ids map to the sentinel -2 so callers can decide between
        strict failure and fold-to-ignore.
        """
        if self._lookup is None:
            table = np.full(SEMANTIC_MASK + 1, -2, dtype=np.int32)
            for raw, train in self.remap.items():
                table[raw] = train
            self._lookup = table
        return self._lookup

    def remap_raw(self, raw_semantics: np.ndarray, strict: bool = False) -> np.ndarray:
        """Map raw semantic ids to train ids; unknown ids either raise or
        fold into the ignore class."""
        mapped = self.remap_table()[raw_semantics]
        unknown = mapped == -2
        if unknown.any():
            ids = np.unique(raw_semantics[unknown])
            if strict:
                raise DataError(f"unknown raw label ids {ids.tolist()}")
            log.debug("folding %d points with unknown raw ids %s into ignore",
                      int(unknown.sum()), ids.tolist())
            mapped = np.where(unknown, self.ignore_id, mapped)
        return mapped.astype(np.int32)

    def unmap_train(self, train_labels: np.ndarray) -> np.ndarray:
        """Map train ids back to raw semantic ids for on-disk prediction files."""
        table = np.zeros(self.num_classes, dtype=np.uint32)
        for train, raw in self.inverse_remap.items():
            if 0 <= train < self.num_classes:
                table[train] = raw
        clipped = np.clip(train_labels, 0, self.num_classes - 1)
        out = table[clipped]
        ignored = train_labels == self.ignore_id
        if self.ignore_id in self.inverse_remap:
            out[ignored] = self.inverse_remap[self.ignore_id]
        else:
            out[ignored] = 0
        return out.astype(np.uint32)

    def with_frequencies(self, frequencies: np.ndarray) -> "ClassConfig":
        return replace(self, frequencies=np.asarray(frequencies, dtype=np.float64))


@dataclass
class SplitSpec:
    """Sequence ids per split; the three lists must be pairwise disjoint."""

    train_sequences: list[str]
    val_sequences: list[str]
    test_sequences: list[str]

    def __post_init__(self) -> None:
        tr, va, te = (set(self.train_sequences), set(self.val_sequences),
                      set(self.test_sequences))
        if tr & va or tr & te or va & te:
            raise ValueError("split sequence lists must be pairwise disjoint")

    def sequences(self, split: str) -> list[str]:
        try:
            return {"train": self.train_sequences,
                    "val": self.val_sequences,
                    "test": self.test_sequences}[split]
        except KeyError:
            raise ValueError(f"unknown split {split!r}") from None


@dataclass
class AugmentationConfig:
    """Training-time augmentation: yaw rotation, point dropout, xyz jitter.

    Dropout draws a per-scan probability uniformly from
    ``[drop_prob_min, drop_prob_max]`` and then drops each point
    independently; set both bounds equal for a fixed rate.
    """

    rotate: bool = True
    yaw_max: float = math.pi            # yaw ~ U[-yaw_max, yaw_max]
    dropout: bool = True
    drop_prob_min: float = 0.0
    drop_prob_max: float = 0.1
    jitter: bool = True
    jitter_sigma: float = 0.03          # meters, per axis
    jitter_clip: float = 0.1            # meters, absolute bound on noise

    def __post_init__(self) -> None:
        if not 0.0 <= self.drop_prob_min <= self.drop_prob_max < 1.0:
            raise ValueError("need 0 <= drop_prob_min <= drop_prob_max < 1")
        if self.jitter_sigma < 0:
            raise ValueError("jitter_sigma must be >= 0")
        if self.yaw_max < 0:
            raise ValueError("yaw_max must be >= 0")

    @classmethod
    def disabled(cls) -> "AugmentationConfig":
        return cls(rotate=False, dropout=False, jitter=False)


@dataclass(frozen=True)
class ScanRecord:
    """One scan on disk, with its (optional) label companion."""

    sequence: str
    scan_path: Path
    label_path: Path | None


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------


def load_scan(path: str | Path) -> PointCloud:
    """Read a binary scan file into a PointCloud.

    Rows containing non-finite coordinates are dropped (count logged).
    Raises DataError for unreadable files or byte lengths that are not a
    multiple of the 16-byte point record.
    """
    path = Path(path)
    try:
        nbytes = path.stat().st_size
        raw = np.fromfile(path, dtype="<f4")
    except OSError as exc:
        raise DataError(f"cannot read scan file {path}: {exc}") from exc
    if nbytes % POINT_RECORD_BYTES != 0:
        raise DataError(
            f"scan file {path} has {nbytes} bytes, not a multiple of "
            f"{POINT_RECORD_BYTES}")
    pts = raw.reshape(-1, 4)
    finite = np.isfinite(pts).all(axis=1)
    if not finite.all():
        log.warning("dropped %d non-finite points from %s",
                    int((~finite).sum()), path)
        pts = pts[finite]
    return PointCloud(pts[:, :3], pts[:, 3])


def write_scan(path: str | Path, pc: PointCloud) -> None:
    """Write a PointCloud in the binary scan layout read by load_scan."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    out = np.empty((len(pc), 4), dtype="<f4")
    out[:, :3] = pc.xyz
    out[:, 3] = pc.remission
    out.tofile(path)


def load_labels(path: str | Path, cfg: ClassConfig,
                expected_count: int | None = None,
                strict: bool = False) -> np.ndarray:
    """Read a binary label file and remap raw semantic ids to train ids.

    The instance id in the high 16 bits is discarded. ``expected_count``
    (normally the companion scan's point count) is enforced when given.
    """
    path = Path(path)
    try:
        nbytes = path.stat().st_size
        raw = np.fromfile(path, dtype="<u4")
    except OSError as exc:
        raise DataError(f"cannot read label file {path}: {exc}") from exc
    if nbytes % LABEL_RECORD_BYTES != 0:
        raise DataError(f"label file {path} has a truncated record")
    if expected_count is not None and raw.size != expected_count:
        raise DataError(
            f"label file {path} has {raw.size} records, expected {expected_count}")
    semantics = raw & SEMANTIC_MASK
    return cfg.remap_raw(semantics, strict=strict)


def write_labels(path: str | Path, train_labels: np.ndarray,
                 cfg: ClassConfig | None = None) -> None:
    """Write labels in the binary label format.

    With a ClassConfig, train ids are converted back to raw semantic ids
    (the on-disk convention for predictions); without one the values are
    written verbatim as uint32.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if cfg is not None:
        raw = cfg.unmap_train(np.asarray(train_labels))
    else:
        raw = np.asarray(train_labels, dtype=np.uint32)
    raw.astype("<u4").tofile(path)


def list_scans(root: str | Path, sequences: list[str],
               require_labels: bool = False) -> list[ScanRecord]:
    """Enumerate scan files for the given sequences, sorted lexicographically.

    Label paths are attached when the labels directory exists; with
    ``require_labels`` a missing label file raises DataError.
    """
    root = Path(root)
    records: list[ScanRecord] = []
    for seq in sequences:
        scan_dir = root / "sequences" / seq / "velodyne"
        if not scan_dir.is_dir():
            raise DataError(f"missing scan directory {scan_dir}")
        label_dir = root / "sequences" / seq / "labels"
        for scan_path in sorted(scan_dir.glob("*.bin")):
            label_path = label_dir / (scan_path.stem + ".label")
            if not label_path.exists():
                if require_labels:
                    raise DataError(f"missing label file {label_path}")
                label_path = None
            records.append(ScanRecord(seq, scan_path, label_path))
    return records


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


def derive_sample_seed(global_seed: int, epoch: int, index: int) -> int:
    """Deterministic per-sample seed so parallel loading never changes results."""
    ss = np.random.SeedSequence((global_seed, epoch, index))
    return int(ss.generate_state(1, np.uint64)[0])


def augment(pc: PointCloud, cfg: AugmentationConfig, sample_seed: int) -> PointCloud:
    """Apply yaw rotation, joint point/label dropout, and xyz jitter.

    Deterministic in (pc, cfg, sample_seed). Draw order is fixed: yaw,
    dropout probability, dropout mask, jitter; disabled stages draw nothing.
    """
    if not (cfg.rotate or cfg.dropout or cfg.jitter):
        return pc
    rng = np.random.default_rng(sample_seed)
    xyz = pc.xyz.astype(np.float64)
    remission = pc.remission
    labels = pc.labels

    if cfg.rotate:
        yaw = rng.uniform(-cfg.yaw_max, cfg.yaw_max)
        c, s = math.cos(yaw), math.sin(yaw)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        xyz = xyz @ rot.T

    if cfg.dropout and len(pc) > 0:
        p = rng.uniform(cfg.drop_prob_min, cfg.drop_prob_max)
        keep = rng.random(len(pc)) >= p
        xyz = xyz[keep]
        remission = remission[keep]
        if labels is not None:
            labels = labels[keep]

    if cfg.jitter and xyz.shape[0] > 0:
        noise = rng.normal(0.0, cfg.jitter_sigma, size=xyz.shape)
        np.clip(noise, -cfg.jitter_clip, cfg.jitter_clip, out=noise)
        xyz = xyz + noise

    return PointCloud(xyz.astype(np.float32), remission.copy(),
                      None if labels is None else labels.copy())


# ---------------------------------------------------------------------------
# Dataset presets
# ---------------------------------------------------------------------------

# SemanticKITTI: published benchmark mapping, 19 classes + ignored class 0.
_KITTI_NAMES = [
    "unlabeled", "car", "bicycle", "motorcycle", "truck", "other-vehicle",
    "person", "bicyclist", "motorcyclist", "road", "parking", "sidewalk",
    "other-ground", "building", "fence", "vegetation", "trunk", "terrain",
    "pole", "traffic-sign",
]

_KITTI_REMAP = {
    0: 0, 1: 0, 10: 1, 11: 2, 13: 5, 15: 3, 16: 5, 18: 4, 20: 5, 30: 6,
    31: 7, 32: 8, 40: 9, 44: 10, 48: 11, 49: 12, 50: 13, 51: 14, 52: 0,
    60: 9, 70: 15, 71: 16, 72: 17, 80: 18, 81: 19, 99: 0,
    # moving variants fold into their static classes
    252: 1, 253: 7, 254: 6, 255: 8, 256: 5, 257: 5, 258: 4, 259: 5,
}

_KITTI_INVERSE = {
    0: 0, 1: 10, 2: 11, 3: 15, 4: 18, 5: 20, 6: 30, 7: 31, 8: 32, 9: 40,
    10: 44, 11: 48, 12: 49, 13: 50, 14: 51, 15: 70, 16: 71, 17: 72,
    18: 80, 19: 81,
}

# SemanticPOSS: 13 classes + ignored class 0, de-facto devkit id assignment.
_POSS_NAMES = [
    "unlabeled", "person", "rider", "car", "truck", "plants", "traffic-sign",
    "pole", "trashcan", "building", "cone-stone", "fence", "bike", "ground",
]

_POSS_REMAP = {
    0: 0, 4: 1, 5: 1, 6: 2, 7: 3, 8: 4, 9: 5, 10: 6, 11: 6, 12: 6, 13: 7,
    14: 8, 15: 9, 16: 10, 17: 11, 21: 12, 22: 13,
}

_POSS_INVERSE = {
    0: 0, 1: 4, 2: 6, 3: 7, 4: 8, 5: 9, 6: 10, 7: 13, 8: 14, 9: 15,
    10: 16, 11: 17, 12: 21, 13: 22,
}


def semantic_kitti_classes() -> ClassConfig:
    """19 train classes plus ignored class 0.

    Frequencies default to uniform; compute them from the training split
    (see dataset.compute_class_frequencies) for data-driven loss weights.
    """
    n = 20
    return ClassConfig(num_classes=n, remap=dict(_KITTI_REMAP),
                       inverse_remap=dict(_KITTI_INVERSE),
                       frequencies=np.full(n, 1.0 / n), ignore_id=0,
                       class_names=list(_KITTI_NAMES))


def semantic_poss_classes() -> ClassConfig:
    """13 train classes plus ignored class 0."""
    n = 14
    return ClassConfig(num_classes=n, remap=dict(_POSS_REMAP),
                       inverse_remap=dict(_POSS_INVERSE),
                       frequencies=np.full(n, 1.0 / n), ignore_id=0,
                       class_names=list(_POSS_NAMES))


def kitti_default_split() -> SplitSpec:
    """Train 00-10 minus 08, validate on 08, test 11-21."""
    train = [f"{i:02d}" for i in range(11) if i != 8]
    test = [f"{i:02d}" for i in range(11, 22)]
    return SplitSpec(train, ["08"], test)


def poss_default_split() -> SplitSpec:
    """Part 2 held out for testing, the rest used for training."""
    return SplitSpec(["00", "01", "03", "04", "05"], [], ["02"])
