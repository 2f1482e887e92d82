"""Training, evaluation, inference, ablation, and debug-projection
orchestration on top of the other modules.

Learning rates follow closed-form schedules (pure functions of the epoch),
which makes resumed runs land on exactly the rate an uninterrupted run
would have used. Checkpoints embed the fully resolved config echo; resuming
against a different config is refused with a key-by-key diff.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch.utils.data import DataLoader

from .config import (ExperimentConfig, class_config_for, config_diff,
                     knn_config, loss_config, model_config, projection_config,
                     split_for)
from .dataset import (ScanSegmentationDataset, compute_channel_stats,
                      compute_class_frequencies)
from .errors import ConfigError, DataError
from .losses import total_loss
from .metrics import EvalResult, benchmark_forward, evaluate_split, predict_scan
from .network import (build_model, count_parameters, load_checkpoint,
                      save_checkpoint)
from .projection import save_projection_debug, spherical_project, \
    unproject_labels, knn_postprocess
from .scan_io import AugmentationConfig, list_scans, load_labels, load_scan, \
    write_labels

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Learning-rate schedules (closed form in the epoch index)
# ---------------------------------------------------------------------------


def cosine_lr(epoch: int, total_epochs: int, lr_init: float,
              lr_min: float) -> float:
    """Half-cosine from lr_init (epoch 0) down to lr_min (last epoch)."""
    if total_epochs <= 1:
        return lr_init
    t = epoch / (total_epochs - 1)
    return lr_min + 0.5 * (lr_init - lr_min) * (1.0 + math.cos(math.pi * t))


def cyclic_lr(epoch: int, epochs_per_cycle: int, lr_peak: float,
              lr_min: float) -> float:
    """Cosine half-cycles restarting at lr_peak every ``epochs_per_cycle``."""
    pos = epoch % epochs_per_cycle
    if epochs_per_cycle <= 1:
        return lr_peak
    t = pos / (epochs_per_cycle - 1)
    return lr_min + 0.5 * (lr_peak - lr_min) * (1.0 + math.cos(math.pi * t))


def scheduled_lr(cfg: ExperimentConfig, epoch: int) -> float:
    opt = cfg.optimizer
    if opt.schedule == "cosine":
        return cosine_lr(epoch, opt.total_epochs, opt.lr, opt.lr_min)
    return cyclic_lr(epoch, opt.epochs, opt.lr, opt.lr_min)


# ---------------------------------------------------------------------------
# Shared resolution helpers
# ---------------------------------------------------------------------------


def _augmentation_for(cfg: ExperimentConfig) -> AugmentationConfig | None:
    d = cfg.dataset
    if not d.augment:
        return None
    return AugmentationConfig(
        rotate=True, yaw_max=d.augment_yaw_max,
        dropout=True, drop_prob_min=d.augment_drop_min,
        drop_prob_max=d.augment_drop_max,
        jitter=True, jitter_sigma=d.augment_jitter_sigma,
        jitter_clip=d.augment_jitter_clip)


def resolve_config(cfg: ExperimentConfig) -> tuple[ExperimentConfig, dict]:
    """Fill in computed fields (normalization stats, train-split class
    frequencies) so the returned config is a complete echo of the run."""
    class_cfg = class_config_for(cfg)
    split = split_for(cfg)
    overrides: dict[str, object] = {}
    context: dict = {"class_cfg": class_cfg, "split": split}

    if cfg.model.num_classes is None:
        overrides["model.num_classes"] = class_cfg.num_classes
    if cfg.projection.means is None or cfg.projection.stds is None:
        records = list_scans(cfg.dataset.root, split.train_sequences)
        means, stds = compute_channel_stats(records, projection_config(cfg))
        overrides["projection.means"] = [round(float(v), 6) for v in means]
        overrides["projection.stds"] = [round(float(v), 6) for v in stds]
    if cfg.dataset.compute_frequencies:
        records = list_scans(cfg.dataset.root, split.train_sequences,
                             require_labels=True)
        freqs = compute_class_frequencies(records, class_cfg)
        context["class_cfg"] = class_cfg.with_frequencies(freqs)
    if overrides:
        cfg = cfg.replaced(overrides)
    return cfg, context


def _normalization(cfg: ExperimentConfig) -> tuple[np.ndarray, np.ndarray]:
    return (np.asarray(cfg.projection.means, dtype=np.float32),
            np.asarray(cfg.projection.stds, dtype=np.float32))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    last_checkpoint: Path
    best_checkpoint: Path
    best_val_miou: float
    epochs_run: int
    metrics_log: Path
    history: list[dict] = field(default_factory=list)


def _append_jsonl(path: Path, record: dict) -> None:
    with path.open("a") as fh:
        fh.write(json.dumps(record) + "\n")


def train(cfg: ExperimentConfig, resume: str | Path | None = None) -> TrainResult:
    """Run the configured training, checkpointing every epoch plus best-on-val.

    Resuming restores model/optimizer state and continues at the next epoch;
    it refuses configs whose resolved echo differs from the checkpoint's.
    """
    cfg, context = resolve_config(cfg)
    class_cfg = context["class_cfg"]
    split = context["split"]
    echo = cfg.to_dict()

    torch.manual_seed(cfg.runtime.seed)
    device = cfg.runtime.device
    ckpt_dir = Path(cfg.runtime.checkpoint_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    metrics_log = ckpt_dir / "metrics.jsonl"
    last_path = ckpt_dir / "last.ckpt"
    best_path = ckpt_dir / "best.ckpt"

    train_records = list_scans(cfg.dataset.root, split.train_sequences,
                               require_labels=True)
    if not train_records:
        raise DataError("training split contains no scans")
    val_records = (list_scans(cfg.dataset.root, split.val_sequences,
                              require_labels=True)
                   if split.val_sequences else [])

    model_cfg = model_config(cfg, class_cfg.num_classes)
    loss_cfg = loss_config(cfg, class_cfg)
    model = build_model(model_cfg).to(device)
    opt = cfg.optimizer
    optimizer = torch.optim.SGD(model.parameters(), lr=opt.lr,
                                momentum=opt.momentum,
                                weight_decay=opt.weight_decay)

    start_epoch = 0
    best_miou = -1.0
    if resume is not None:
        payload = load_checkpoint(resume)
        diffs = config_diff(payload["config"], echo)
        if diffs:
            raise ConfigError(
                "refusing to resume: config differs from checkpoint:\n  "
                + "\n  ".join(diffs))
        model.load_state_dict(payload["model_state"])
        if payload["optimizer_state"] is not None:
            optimizer.load_state_dict(payload["optimizer_state"])
        start_epoch = payload["epoch"] + 1
        best_miou = payload["best_metric"] if payload["best_metric"] is not None else -1.0
        log.info("resumed from %s at epoch %d", resume, start_epoch)

    normalization = _normalization(cfg)
    dataset = ScanSegmentationDataset(
        train_records, class_cfg, projection_config(cfg), normalization,
        augmentation=_augmentation_for(cfg), global_seed=cfg.runtime.seed,
        strict_labels=cfg.dataset.unknown_raw_labels == "error")

    total_epochs = opt.total_epochs
    steps_per_epoch = math.ceil(len(dataset) / cfg.runtime.batch_size)
    history: list[dict] = []
    epochs_run = start_epoch

    for epoch in range(start_epoch, total_epochs):
        lr = scheduled_lr(cfg, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        dataset.set_epoch(epoch)
        order = np.random.default_rng(
            (cfg.runtime.seed, epoch)).permutation(len(dataset))
        loader = DataLoader(dataset, batch_size=cfg.runtime.batch_size,
                            sampler=order.tolist(),
                            num_workers=cfg.runtime.workers)
        model.train()
        epoch_t0 = time.perf_counter()
        for i, (x, y) in enumerate(loader):
            x, y = x.to(device), y.to(device)
            out = model(x)
            breakdown = total_loss(out, y, loss_cfg)
            optimizer.zero_grad()
            breakdown.total.backward()
            optimizer.step()
            step = epoch * steps_per_epoch + i
            if step % max(1, cfg.runtime.log_interval) == 0:
                rec = breakdown.as_record(step)
                rec.update({"type": "loss", "epoch": epoch, "lr": lr})
                _append_jsonl(metrics_log, rec)
                log.info("epoch %d step %d lr %.2e total %.4f "
                         "(wce %.4f lovasz %.4f boundary %.4f)",
                         epoch, step, lr, rec["total"], rec["wce"],
                         rec["lovasz"], rec["boundary"])

        entry = {"epoch": epoch, "lr": lr,
                 "seconds": round(time.perf_counter() - epoch_t0, 3)}
        if val_records:
            result = evaluate_split(model, val_records, class_cfg,
                                    projection_config(cfg), None,
                                    normalization, device=device,
                                    config_echo=echo)
            entry["val_image_miou"] = result.image_miou
            entry["val_point_miou"] = result.point_miou
            _append_jsonl(metrics_log, {"type": "val", **entry})
            log.info("epoch %d val image mIoU %.4f point mIoU %.4f",
                     epoch, result.image_miou, result.point_miou)
        history.append(entry)

        save_checkpoint(last_path, model, optimizer, epoch, echo,
                        best_metric=best_miou)
        current = entry.get("val_image_miou")
        if current is not None and current > best_miou:
            best_miou = current
            save_checkpoint(best_path, model, optimizer, epoch, echo,
                            best_metric=best_miou)
        epochs_run = epoch + 1
        stop_at = cfg.runtime.early_stop_miou
        if (stop_at is not None and current is not None and current >= stop_at):
            log.info("early stop: val image mIoU %.4f >= %.4f", current, stop_at)
            break

    if not best_path.exists():
        save_checkpoint(best_path, model, optimizer,
                        max(epochs_run - 1, 0), echo, best_metric=best_miou)
    return TrainResult(last_path, best_path, best_miou, epochs_run,
                       metrics_log, history)


# ---------------------------------------------------------------------------
# Evaluation / inference
# ---------------------------------------------------------------------------


def _load_model_for_eval(cfg: ExperimentConfig, checkpoint: str | Path):
    """Build the checkpoint's model and reconcile it against the current
    config; class-count mismatches are refused."""
    payload = load_checkpoint(checkpoint)
    ckpt_cfg = ExperimentConfig.from_dict(payload["config"])
    class_cfg = class_config_for(cfg)
    if ckpt_cfg.model.num_classes is None:
        raise ConfigError("checkpoint config echo lacks a resolved class count")
    if ckpt_cfg.model.num_classes != class_cfg.num_classes:
        raise ConfigError(
            f"checkpoint was trained with {ckpt_cfg.model.num_classes} "
            f"classes but the dataset defines {class_cfg.num_classes}")
    model = build_model(model_config(ckpt_cfg, class_cfg.num_classes))
    model.load_state_dict(payload["model_state"])

    if cfg.projection.means is not None and cfg.projection.stds is not None:
        normalization = _normalization(cfg)
    elif ckpt_cfg.projection.means is not None:
        normalization = _normalization(ckpt_cfg)
    else:
        raise ConfigError("no normalization statistics in config or checkpoint")
    return model, class_cfg, normalization, payload


def evaluate_checkpoint(cfg: ExperimentConfig, checkpoint: str | Path,
                        split: str, knn: bool = False,
                        predictions_dir: str | Path | None = None) -> EvalResult:
    """Evaluate a checkpoint over a named split, optionally with the KNN
    cleanup and optionally writing binary prediction files."""
    model, class_cfg, normalization, _ = _load_model_for_eval(cfg, checkpoint)
    sequences = split_for(cfg).sequences(split)
    if not sequences:
        raise DataError(f"split {split!r} has no sequences configured")
    records = list_scans(cfg.dataset.root, sequences, require_labels=True)
    if predictions_dir is not None:
        Path(predictions_dir).mkdir(parents=True, exist_ok=True)
    echo = cfg.to_dict()
    echo["projection"]["means"] = [float(v) for v in normalization[0]]
    echo["projection"]["stds"] = [float(v) for v in normalization[1]]
    echo["model"]["num_classes"] = class_cfg.num_classes
    return evaluate_split(model, records, class_cfg, projection_config(cfg),
                          knn_config(cfg) if knn else None, normalization,
                          device=cfg.runtime.device,
                          predictions_dir=predictions_dir, config_echo=echo)


def run_inference(cfg: ExperimentConfig, checkpoint: str | Path,
                  scan_paths: list[str | Path], out_dir: str | Path,
                  knn: bool = False) -> dict:
    """Project, segment, and back-project each scan; write one binary label
    file per scan. Unreadable scans are skipped and reported."""
    model, class_cfg, normalization, _ = _load_model_for_eval(cfg, checkpoint)
    model = model.to(cfg.runtime.device).eval()
    proj_cfg = projection_config(cfg)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written, skipped = [], []
    for path in scan_paths:
        t0 = time.perf_counter()
        try:
            pc = load_scan(path)
        except DataError as exc:
            log.warning("skipping %s: %s", path, exc)
            skipped.append(str(path))
            continue
        ri = spherical_project(pc, proj_cfg, fill_label=class_cfg.ignore_id)
        pred_img = predict_scan(model, ri, normalization, cfg.runtime.device)
        if knn:
            pred = knn_postprocess(ri, pred_img, knn_config(cfg),
                                   num_classes=class_cfg.num_classes)
        else:
            pred = unproject_labels(pred_img, ri)
        out_path = out_dir / (Path(path).stem + ".label")
        write_labels(out_path, pred, class_cfg)
        written.append(out_path)
        log.info("inferred %s -> %s (%.1f ms)", path, out_path,
                 (time.perf_counter() - t0) * 1000.0)
    return {"written": written, "skipped": skipped}


# ---------------------------------------------------------------------------
# Ablation matrix
# ---------------------------------------------------------------------------


@dataclass
class AblationRow:
    name: str
    miou: float | None
    train_params: int | None
    inference_params: int | None
    latency_ms: float | None
    failed: bool = False
    error: str = ""


def load_ablation_plan(path: str | Path) -> dict:
    import yaml
    data = yaml.safe_load(Path(path).read_text())
    if not isinstance(data, dict) or "legs" not in data:
        raise ConfigError(f"ablation plan {path} must define a 'legs' list")
    for leg in data["legs"]:
        if "name" not in leg:
            raise ConfigError("every ablation leg needs a name")
    return data


def run_ablation(base_cfg: ExperimentConfig, plan: dict,
                 out_dir: str | Path) -> list[AblationRow]:
    """Train and evaluate one leg per config delta; failures mark the row
    and the run continues. mIoU is validation image-space (the protocol the
    component study uses)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows: list[AblationRow] = []
    for leg in plan["legs"]:
        name = leg["name"]
        overrides = dict(leg.get("overrides", {}))
        overrides["runtime.checkpoint_dir"] = str(out_dir / name)
        try:
            cfg = base_cfg.replaced(overrides)
            result = train(cfg)
            payload = load_checkpoint(result.best_checkpoint)
            model_cfg = model_config(
                ExperimentConfig.from_dict(payload["config"]),
                class_config_for(cfg).num_classes)
            model = build_model(model_cfg)
            report = benchmark_forward(
                model_cfg, [cfg.projection.width], [model_cfg.input_kernel],
                device=cfg.runtime.device, height=cfg.projection.height)
            rows.append(AblationRow(
                name=name, miou=result.best_val_miou,
                train_params=count_parameters(model, "train"),
                inference_params=count_parameters(model, "inference"),
                latency_ms=report.records[0].latency_ms))
        except Exception as exc:  # noqa: BLE001 - a failed leg must not stop the matrix
            log.exception("ablation leg %s failed", name)
            rows.append(AblationRow(name=name, miou=None, train_params=None,
                                    inference_params=None, latency_ms=None,
                                    failed=True, error=str(exc)))
    table = format_ablation_table(rows)
    (out_dir / "ablation.txt").write_text(table)
    (out_dir / "ablation.json").write_text(json.dumps(
        [dataclasses.asdict(r) for r in rows], indent=2, default=str))
    return rows


def format_ablation_table(rows: list[AblationRow]) -> str:
    header = (f"{'Leg':<28} | {'mIoU':>7} | {'Params(M)':>9} | "
              f"{'InferParams(M)':>14} | {'Latency(ms)':>11}")
    lines = [header, "-" * len(header)]
    for r in rows:
        if r.failed:
            lines.append(f"{r.name:<28} | {'FAILED':>7} | {'-':>9} | "
                         f"{'-':>14} | {'-':>11}")
        else:
            lines.append(
                f"{r.name:<28} | {r.miou:>7.4f} | "
                f"{r.train_params / 1e6:>9.3f} | "
                f"{r.inference_params / 1e6:>14.3f} | {r.latency_ms:>11.3f}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Projection debugging
# ---------------------------------------------------------------------------


def run_projection_debug(cfg: ExperimentConfig, scan_path: str | Path,
                         out_dir: str | Path) -> list[Path]:
    """Project one scan and dump its range/label images plus a config sidecar."""
    scan_path = Path(scan_path)
    pc = load_scan(scan_path)
    label_path = scan_path.parent.parent / "labels" / (scan_path.stem + ".label")
    if label_path.exists():
        class_cfg = class_config_for(cfg)
        labels = load_labels(label_path, class_cfg, expected_count=len(pc))
        pc = pc.with_labels(labels)
    ri = spherical_project(pc, projection_config(cfg))
    return save_projection_debug(ri, projection_config(cfg), out_dir,
                                 stem=scan_path.stem)
