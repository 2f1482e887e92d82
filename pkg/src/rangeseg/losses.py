"""Composite segmentation loss: weighted cross-entropy, Lovász-Softmax,
and a boundary F-measure term, combined as

    main = alpha * wce + beta * lovasz + gamma * boundary
    total = main + lambda_aux * sum(aux terms)

where every auxiliary head contributes the same three-term combination
against its own target (full-resolution labels for plan_b, nearest-neighbor
downsampled labels for plan_a).

Every function accepts a single image -- logits/probabilities of shape
(C, H, W) with integer targets of shape (H, W) -- or a batch with a leading
batch dimension, in which case pixels pool across the batch. Pixels whose
target equals ``ignore_id`` contribute nothing anywhere.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

log = logging.getLogger(__name__)

BOUNDARY_EPS = 1e-7


@dataclass
class LossConfig:
    """Weights and hyperparameters of the composite loss."""

    alpha: float = 1.0          # cross-entropy weight
    beta: float = 1.5           # Lovász weight
    gamma: float = 1.0          # boundary weight
    lambda_aux: float = 1.0     # auxiliary-head weight
    theta0: int = 3             # boundary pooling window (odd)
    class_weights: tuple[float, ...] | None = None   # per-class, len C
    ignore_id: int = -1

    def __post_init__(self) -> None:
        if min(self.alpha, self.beta, self.gamma, self.lambda_aux) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.theta0 < 1 or self.theta0 % 2 == 0:
            raise ValueError("theta0 must be odd and >= 1")
        if self.class_weights is not None:
            self.class_weights = tuple(float(w) for w in self.class_weights)
            for c, w in enumerate(self.class_weights):
                if c != self.ignore_id and w <= 0:
                    raise ValueError("class weights must be positive for "
                                     "non-ignored classes")

    def weights_tensor(self, num_classes: int, dtype: torch.dtype,
                       device: torch.device) -> torch.Tensor:
        if self.class_weights is None:
            return torch.ones(num_classes, dtype=dtype, device=device)
        if len(self.class_weights) != num_classes:
            raise ValueError(
                f"got {len(self.class_weights)} class weights for "
                f"{num_classes} classes")
        return torch.tensor(self.class_weights, dtype=dtype, device=device)


def class_weights_from_frequencies(frequencies, ignore_id: int = -1
                                   ) -> tuple[float, ...]:
    """Inverse-log-frequency weighting: w_c = 1 / log(1.02 + f_c)."""
    return tuple(1.0 / math.log(1.02 + float(f)) for f in frequencies)


@dataclass
class LossBreakdown:
    """Scalar components of one loss evaluation (kept as tensors so the
    total stays differentiable)."""

    wce: torch.Tensor
    lovasz: torch.Tensor
    boundary: torch.Tensor
    main: torch.Tensor
    aux_terms: list[torch.Tensor] = field(default_factory=list)
    total: torch.Tensor | None = None

    def __post_init__(self) -> None:
        if self.total is None:
            self.total = self.main

    def as_record(self, step: int) -> dict:
        """Flat logging record: step, wce, lovasz, boundary, main, aux_i, total."""
        val = lambda t: float(t.detach()) if isinstance(t, torch.Tensor) else float(t)  # noqa: E731
        rec = {"step": int(step), "wce": val(self.wce),
               "lovasz": val(self.lovasz), "boundary": val(self.boundary),
               "main": val(self.main)}
        for i, t in enumerate(self.aux_terms, start=1):
            rec[f"aux_{i}"] = val(t)
        rec["total"] = val(self.total)
        return rec


def _zero_like(t: torch.Tensor) -> torch.Tensor:
    """Differentiable zero attached to t's graph."""
    return (t.reshape(-1)[0] * 0.0) if t.numel() else t.sum()


def _flatten_pixels(class_first: torch.Tensor,
                    target: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """(C, H, W)/(H, W) or (B, C, H, W)/(B, H, W) -> (C, P) and (P,)."""
    if class_first.dim() == 3:
        c = class_first.shape[0]
        return class_first.reshape(c, -1), target.reshape(-1)
    if class_first.dim() == 4:
        if class_first.shape[0] != target.shape[0]:
            raise ValueError("batch sizes of logits and target differ")
        c = class_first.shape[1]
        return (class_first.permute(1, 0, 2, 3).reshape(c, -1),
                target.reshape(-1))
    raise ValueError(f"expected 3 or 4 dims, got {class_first.dim()}")


def weighted_cross_entropy(logits: torch.Tensor, target: torch.Tensor,
                           cfg: LossConfig) -> torch.Tensor:
    """Mean over non-ignored pixels of w_t * (-log softmax(logits)_t).

    An all-ignored target yields 0 (logged).
    """
    logp = F.log_softmax(logits, dim=-3)
    flat, t = _flatten_pixels(logp, target)
    valid = t != cfg.ignore_id
    if not bool(valid.any()):
        log.warning("weighted_cross_entropy: every pixel ignored, returning 0")
        return _zero_like(logits)
    safe = torch.where(valid, t, torch.zeros_like(t)).long()
    nll = -flat.gather(0, safe.unsqueeze(0)).squeeze(0)
    w = cfg.weights_tensor(flat.shape[0], logits.dtype, logits.device)[safe]
    return (w * nll)[valid].sum() / valid.sum()


def _lovasz_grad(fg_sorted: torch.Tensor) -> torch.Tensor:
    """Discrete gradient of the Jaccard-loss Lovász extension along one
    descending-error ordering."""
    gts = fg_sorted.sum()
    intersection = gts - fg_sorted.cumsum(0)
    union = gts + (1.0 - fg_sorted).cumsum(0)
    jaccard = 1.0 - intersection / union
    if fg_sorted.numel() > 1:
        jaccard = torch.cat([jaccard[:1], jaccard[1:] - jaccard[:-1]])
    return jaccard


def lovasz_softmax(probs: torch.Tensor, target: torch.Tensor,
                   cfg: LossConfig) -> torch.Tensor:
    """Lovász-Softmax surrogate of the Jaccard loss, averaged over the
    classes present in the target. Ignored pixels are removed before
    sorting. ``probs`` must be a softmax output (nonnegative, channels
    summing to 1 per pixel).
    """
    detached = probs.detach()
    if float(detached.min()) < -1e-6:
        raise ValueError("probs must be nonnegative")
    if float((detached.sum(dim=-3) - 1.0).abs().max()) > 1e-4:
        raise ValueError("probs channels must sum to 1 per pixel")

    flat, t = _flatten_pixels(probs, target)
    valid = t != cfg.ignore_id
    if not bool(valid.any()):
        log.warning("lovasz_softmax: every pixel ignored, returning 0")
        return _zero_like(probs)
    vp = flat[:, valid]
    vt = t[valid]

    losses = []
    for cls in vt.unique(sorted=True):
        fg = (vt == cls).to(probs.dtype)
        errors = (fg - vp[int(cls)]).abs()
        errors_sorted, perm = torch.sort(errors, descending=True)
        grad = _lovasz_grad(fg[perm])
        losses.append(torch.dot(errors_sorted, grad))
    return torch.stack(losses).mean()


def boundary_map(y: torch.Tensor, theta0: int) -> torch.Tensor:
    """Pooling residual that extracts per-class boundaries:
    maxpool(1 - y, theta0, stride 1, shape-preserving padding) - (1 - y).

    Works identically on hard one-hot maps and soft probability maps, so
    predicted boundaries stay differentiable. Accepts (C, H, W) or
    (B, C, H, W).
    """
    if theta0 < 1 or theta0 % 2 == 0:
        raise ValueError("theta0 must be odd and >= 1")
    detached = y.detach()
    if float(detached.min()) < -1e-6 or float(detached.max()) > 1.0 + 1e-6:
        raise ValueError("boundary_map expects values in [0, 1]")
    if theta0 == 1:
        return torch.zeros_like(y)
    inv = 1.0 - y
    batched = inv if inv.dim() == 4 else inv.unsqueeze(0)
    pooled = F.max_pool2d(batched, kernel_size=theta0, stride=1,
                          padding=theta0 // 2)
    if inv.dim() == 3:
        pooled = pooled.squeeze(0)
    return pooled - inv


def one_hot_target(target: torch.Tensor, num_classes: int, ignore_id: int,
                   dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """One-hot encoding with the class dimension third from the right and
    all-zero vectors at ignored pixels. (H, W) -> (C, H, W);
    (B, H, W) -> (B, C, H, W)."""
    valid = target != ignore_id
    safe = torch.where(valid, target, torch.zeros_like(target)).long()
    onehot = F.one_hot(safe, num_classes).to(dtype).movedim(-1, -3)
    return onehot * valid.to(dtype).unsqueeze(-3)


def boundary_loss(pred_probs: torch.Tensor, target_onehot: torch.Tensor,
                  cfg: LossConfig) -> torch.Tensor:
    """Boundary F-measure loss.

    Per class c with a nonempty ground-truth boundary:
        P = sum(bp * bg) / sum(bp),  R = sum(bp * bg) / sum(bg)
        loss_c = 1 - 2 P R / (P + R)
    averaged over contributing classes; zero predicted boundary mass gives
    P = 0 and hence loss 1 under the epsilon guard. A scene with no class
    boundaries at all yields 0.
    """
    if pred_probs.shape != target_onehot.shape:
        raise ValueError(
            f"shape mismatch {tuple(pred_probs.shape)} vs "
            f"{tuple(target_onehot.shape)}")
    bp = boundary_map(pred_probs, cfg.theta0)
    bg = boundary_map(target_onehot, cfg.theta0)
    dims = tuple(d for d in range(bp.dim()) if d != bp.dim() - 3)
    tp = (bp * bg).sum(dim=dims)
    sp = bp.sum(dim=dims)
    sg = bg.sum(dim=dims)
    contributing = sg > 0
    if not bool(contributing.any()):
        log.warning("boundary_loss: no class has ground-truth boundaries, "
                    "returning 0")
        return _zero_like(pred_probs)
    precision = tp / (sp + BOUNDARY_EPS)
    recall = tp / (sg + BOUNDARY_EPS)
    fmeasure = 2.0 * precision * recall / (precision + recall + BOUNDARY_EPS)
    return (1.0 - fmeasure)[contributing].mean()


def combine_components(wce: torch.Tensor, lovasz: torch.Tensor,
                       boundary: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    """alpha * wce + beta * lovasz + gamma * boundary."""
    return cfg.alpha * wce + cfg.beta * lovasz + cfg.gamma * boundary


def main_loss(logits: torch.Tensor, target: torch.Tensor,
              cfg: LossConfig) -> LossBreakdown:
    """Three-term loss of one logit map; softmax computed once and shared
    by the Lovász and boundary terms."""
    c = logits.shape[-3]
    probs = F.softmax(logits, dim=-3)
    wce = weighted_cross_entropy(logits, target, cfg)
    lov = lovasz_softmax(probs, target, cfg)
    onehot = one_hot_target(target, c, cfg.ignore_id, dtype=logits.dtype)
    bd = boundary_loss(probs, onehot, cfg)
    return LossBreakdown(wce=wce, lovasz=lov, boundary=bd,
                         main=combine_components(wce, lov, bd, cfg))


def downsample_target(target: torch.Tensor, stride: int) -> torch.Tensor:
    """Nearest-neighbor label downsampling (top-left sample per cell), the
    plan_a auxiliary target."""
    if stride == 1:
        return target
    return target[..., ::stride, ::stride]


def total_loss(output, target: torch.Tensor, cfg: LossConfig) -> LossBreakdown:
    """Main loss plus lambda-weighted auxiliary terms.

    ``output`` is a SegmentationOutput (single image or batch). plan_a heads
    are scored against downsampled labels at their stride; plan_b heads
    against the full-resolution labels. Raises ValueError when the auxiliary
    logits disagree with the declared mode or strides.
    """
    breakdown = main_loss(output.main_logits, target, cfg)
    aux_terms: list[torch.Tensor] = []
    for logits, stride in zip(output.aux_logits, output.aux_strides,
                              strict=True):
        if output.aux_mode == "plan_a":
            aux_target = downsample_target(target, stride)
        elif output.aux_mode == "plan_b":
            aux_target = target
        else:
            raise ValueError(
                f"auxiliary logits present with aux_mode={output.aux_mode!r}")
        if tuple(logits.shape[-2:]) != tuple(aux_target.shape[-2:]):
            raise ValueError(
                f"aux logits {tuple(logits.shape)} inconsistent with target "
                f"{tuple(aux_target.shape)} at stride {stride}")
        aux_terms.append(main_loss(logits, aux_target, cfg).main)

    total = breakdown.main
    if aux_terms:
        total = total + cfg.lambda_aux * torch.stack(aux_terms).sum()
    return LossBreakdown(wce=breakdown.wce, lovasz=breakdown.lovasz,
                         boundary=breakdown.boundary, main=breakdown.main,
                         aux_terms=aux_terms, total=total)
