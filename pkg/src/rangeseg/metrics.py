"""Evaluation machinery: confusion-matrix accumulation, per-class IoU and
mIoU in both image space (pixel labels against the projected label image)
and point space (labels pushed back onto the 3D points, optionally cleaned
by the KNN vote), plus a forward-pass latency benchmark."""

from __future__ import annotations

import logging
import statistics
import time
from dataclasses import dataclass, field, replace as dc_replace

import numpy as np
import torch

from .errors import DataError
from .network import ModelConfig, RangeSegNet, build_model
from .projection import KnnConfig, ProjectionConfig, spherical_project, \
    unproject_labels, knn_postprocess
from .scan_io import ClassConfig, ScanRecord, load_labels, load_scan, write_labels

log = logging.getLogger(__name__)


class ConfusionMatrix:
    """C x C counts with ground truth on rows and predictions on columns.

    Elements whose ground truth equals ``ignore_id`` are skipped, so the
    total count always equals the number of evaluated elements. Merging is
    associative and commutative, which keeps sharded evaluation exact.
    """

    def __init__(self, num_classes: int, ignore_id: int = -1):
        self.num_classes = num_classes
        self.ignore_id = ignore_id
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def add(self, pred, gt) -> "ConfusionMatrix":
        pred = np.asarray(pred).reshape(-1)
        gt = np.asarray(gt).reshape(-1)
        if pred.shape != gt.shape:
            raise DataError(
                f"prediction length {pred.size} != ground-truth length {gt.size}")
        keep = gt != self.ignore_id
        pred, gt = pred[keep], gt[keep]
        if pred.size:
            if pred.min() < 0 or pred.max() >= self.num_classes:
                raise DataError("prediction labels outside [0, num_classes)")
            if gt.min() < 0 or gt.max() >= self.num_classes:
                raise DataError("ground-truth labels outside [0, num_classes)")
            flat = gt.astype(np.int64) * self.num_classes + pred.astype(np.int64)
            self.counts += np.bincount(
                flat, minlength=self.num_classes ** 2
            ).reshape(self.num_classes, self.num_classes)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes or other.ignore_id != self.ignore_id:
            raise DataError("cannot merge confusion matrices with different shapes")
        self.counts += other.counts
        return self

    def total(self) -> int:
        return int(self.counts.sum())

    def reset(self) -> None:
        self.counts[:] = 0


@dataclass
class IouResult:
    """Per-class IoU with nan at excluded classes; mIoU over the rest."""

    per_class: np.ndarray
    included: np.ndarray
    miou: float
    defined: bool


def iou(cm: ConfusionMatrix) -> IouResult:
    """IoU_c = TP / (TP + FP + FN). The ignored class and classes with a
    zero denominator are excluded from the mean; an empty matrix yields an
    undefined (nan) mIoU with ``defined`` False."""
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    denom = counts.sum(axis=0) + counts.sum(axis=1) - tp
    included = denom > 0
    if 0 <= cm.ignore_id < cm.num_classes:
        included[cm.ignore_id] = False
    per_class = np.full(cm.num_classes, np.nan)
    np.divide(tp, denom, out=per_class, where=denom > 0)
    per_class[~included] = np.nan
    defined = bool(included.any())
    miou = float(per_class[included].mean()) if defined else float("nan")
    return IouResult(per_class, included, miou, defined)


# ---------------------------------------------------------------------------
# Split evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalResult:
    """Both evaluation protocols over one split."""

    image_miou: float
    point_miou: float
    image_per_class: dict[str, float]
    point_per_class: dict[str, float]
    num_scans: int
    knn_enabled: bool
    config_echo: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "image_space": {"miou": self.image_miou,
                            "per_class_iou": self.image_per_class},
            "point_space": {"miou": self.point_miou,
                            "per_class_iou": self.point_per_class},
            "num_scans": self.num_scans,
            "knn": self.knn_enabled,
            "config": self.config_echo,
        }


def _per_class_dict(result: IouResult, names: list[str]) -> dict[str, float]:
    return {names[c]: float(result.per_class[c])
            for c in range(len(names)) if result.included[c]}


def predict_scan(model: RangeSegNet, ri, normalization, device) -> np.ndarray:
    """Forward one projected scan in eval mode; returns the (H, W) argmax."""
    means, stds = normalization
    x = (ri.channels - means[:, None, None]) / stds[:, None, None]
    x[:, ~ri.valid_mask] = 0.0
    inp = torch.from_numpy(x.astype(np.float32)).to(device)
    with torch.no_grad():
        out = model(inp.unsqueeze(0))
    return out.main_logits[0].argmax(dim=0).cpu().numpy().astype(np.int32)


def evaluate_split(model: RangeSegNet, records: list[ScanRecord],
                   class_cfg: ClassConfig, proj_cfg: ProjectionConfig,
                   knn_cfg: KnnConfig | None, normalization,
                   device: str = "cpu",
                   predictions_dir=None,
                   config_echo: dict | None = None) -> EvalResult:
    """Evaluate a model over labeled scans.

    Reports image-space mIoU (pixel predictions against the projected label
    image) and point-space mIoU (predictions pushed back to the points,
    optionally cleaned with the KNN vote). When ``predictions_dir`` is set,
    point predictions are written as binary label files with raw ids.
    """
    model = model.to(device).eval()
    cm_img = ConfusionMatrix(class_cfg.num_classes, class_cfg.ignore_id)
    cm_pt = ConfusionMatrix(class_cfg.num_classes, class_cfg.ignore_id)
    n = 0
    for rec in records:
        if rec.label_path is None:
            raise DataError(f"scan {rec.scan_path} has no labels to evaluate")
        pc = load_scan(rec.scan_path)
        labels = load_labels(rec.label_path, class_cfg, expected_count=len(pc))
        pc = pc.with_labels(labels)
        ri = spherical_project(pc, proj_cfg, fill_label=class_cfg.ignore_id)
        pred_img = predict_scan(model, ri, normalization, device)

        cm_img.add(pred_img, ri.label_image)
        if knn_cfg is not None:
            pred_pts = knn_postprocess(ri, pred_img, knn_cfg,
                                       num_classes=class_cfg.num_classes)
        else:
            pred_pts = unproject_labels(pred_img, ri)
        cm_pt.add(pred_pts, labels)
        if predictions_dir is not None:
            write_labels(
                f"{predictions_dir}/{rec.scan_path.stem}.label",
                pred_pts, class_cfg)
        n += 1

    r_img, r_pt = iou(cm_img), iou(cm_pt)
    return EvalResult(
        image_miou=r_img.miou, point_miou=r_pt.miou,
        image_per_class=_per_class_dict(r_img, class_cfg.class_names),
        point_per_class=_per_class_dict(r_pt, class_cfg.class_names),
        num_scans=n, knn_enabled=knn_cfg is not None,
        config_echo=config_echo or {})


# ---------------------------------------------------------------------------
# Latency benchmark
# ---------------------------------------------------------------------------

MIN_TIMED_ITERS = 20
MIN_WARMUP_ITERS = 5


@dataclass
class BenchmarkRecord:
    kernel_size: int
    height: int
    width: int
    warmup_iters: int
    timed_iters: int
    latency_ms: float       # median of chunk means over the timed iterations
    latency_std_ms: float
    fps: float


@dataclass
class BenchmarkReport:
    records: list[BenchmarkRecord] = field(default_factory=list)
    device: str = "cpu"

    def format_table(self) -> str:
        lines = [f"device: {self.device}",
                 f"{'Kernel Size':>11} | {'Input Resolution':>16} | "
                 f"{'Model Latency(ms)':>17} | {'FPS':>7}"]
        lines.append("-" * len(lines[-1]))
        for r in self.records:
            lines.append(
                f"{r.kernel_size}x{r.kernel_size:>9} | "
                f"{r.height} x {r.width:>10} | "
                f"{r.latency_ms:>17.3f} | {r.fps:>7.1f}")
        return "\n".join(lines)


def _sync(device: str) -> None:
    if device.startswith("cuda"):
        torch.cuda.synchronize()


def resolve_device(device: str, fallback_to_cpu: bool = False) -> str:
    if device.startswith("cuda") and not torch.cuda.is_available():
        if fallback_to_cpu:
            log.warning("device %s unavailable, falling back to cpu", device)
            return "cpu"
        raise RuntimeError(f"requested device {device} is not available")
    return device


def _time_forward(model: RangeSegNet, x: torch.Tensor, device: str,
                  warmup: int, iters: int) -> tuple[float, float]:
    with torch.no_grad():
        for _ in range(warmup):
            model(x)
        _sync(device)
        samples = []
        for _ in range(iters):
            t0 = time.perf_counter()
            model(x)
            _sync(device)
            samples.append((time.perf_counter() - t0) * 1000.0)
    # median of chunk means resists scheduler noise on shared machines
    n_chunks = 5
    chunk = max(1, len(samples) // n_chunks)
    means = [statistics.fmean(samples[i:i + chunk])
             for i in range(0, chunk * n_chunks, chunk)]
    return statistics.median(means), statistics.pstdev(samples)


def benchmark_forward(base_cfg: ModelConfig, resolutions: list[int],
                      kernels: list[int], device: str = "cpu",
                      height: int = 64, warmup: int = MIN_WARMUP_ITERS,
                      iters: int = MIN_TIMED_ITERS, batch: int = 1,
                      fallback_to_cpu: bool = False,
                      seed: int = 0) -> BenchmarkReport:
    """Time eval-mode forward passes for every (kernel, resolution) pair.

    Timing covers the forward pass only; projection and post-processing are
    excluded. Iteration floors (5 warmup / 20 timed) are enforced.
    """
    device = resolve_device(device, fallback_to_cpu)
    warmup = max(warmup, MIN_WARMUP_ITERS)
    iters = max(iters, MIN_TIMED_ITERS)
    report = BenchmarkReport(device=device)
    gen = torch.Generator().manual_seed(seed)
    for kernel in kernels:
        cfg = dc_replace(base_cfg, input_kernel=kernel, aux_mode="none")
        model = build_model(cfg).to(device).eval()
        for width in resolutions:
            x = torch.randn(batch, cfg.in_channels, height, width,
                            generator=gen).to(device)
            latency, std = _time_forward(model, x, device, warmup, iters)
            report.records.append(BenchmarkRecord(
                kernel_size=kernel, height=height, width=width,
                warmup_iters=warmup, timed_iters=iters,
                latency_ms=latency, latency_std_ms=std,
                fps=1000.0 / latency))
            log.info("benchmark k=%d %dx%d: %.3f ms (%.1f FPS)",
                     kernel, height, width, latency, 1000.0 / latency)
    return report
