"""Spherical projection of point clouds to multi-channel range images,
the bookkeeping needed to push pixel predictions back to points, and the
range-gated KNN vote that cleans up re-projected labels.

Pixel convention: a point at yaw angle ``a = atan2(y, x)`` and pitch
``p = arcsin(z / d)`` maps to continuous coordinates

    u = 0.5 * (1 - a / pi) * W
    v = (1 - (p + fov_down) / (fov_up + fov_down)) * H

which are floored and clamped into ``[0, W-1] x [0, H-1]``. ``fov_up`` and
``fov_down`` are the positive magnitudes of the vertical field of view above
and below the horizon; the pitch range ``[-fov_down, +fov_up]`` therefore
spans rows ``H..0``. When several points land on one pixel the closest one
wins; ties break toward the lower point index.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .scan_io import PointCloud

log = logging.getLogger(__name__)


@dataclass
class ProjectionConfig:
    """Range-image geometry: grid size and vertical field of view (radians,
    both magnitudes positive)."""

    height: int = 64
    width: int = 512
    fov_up: float = math.radians(3.0)
    fov_down: float = math.radians(25.0)

    def __post_init__(self) -> None:
        if self.height < 1 or self.width < 1:
            raise ValueError("height and width must be >= 1")
        if self.fov_up + self.fov_down <= 0:
            raise ValueError("total vertical field of view must be positive")

    @property
    def fov_total(self) -> float:
        return self.fov_up + self.fov_down

    @classmethod
    def from_degrees(cls, height: int, width: int,
                     fov_up_deg: float, fov_down_deg: float) -> "ProjectionConfig":
        return cls(height, width, math.radians(fov_up_deg),
                   math.radians(fov_down_deg))


@dataclass
class KnnConfig:
    """Neighborhood vote parameters for point-label cleanup."""

    k: int = 5
    window: int = 5
    range_cutoff: float = 1.0       # meters
    gaussian_sigma: float = 1.0     # meters, weight falloff over |delta range|

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError("window must be odd and >= 1")
        if self.range_cutoff <= 0:
            raise ValueError("range_cutoff must be positive")
        if self.gaussian_sigma <= 0:
            raise ValueError("gaussian_sigma must be positive")


@dataclass
class RangeImage:
    """Projected sweep plus the bookkeeping required to invert it.

    channels: (5, H, W) float32 holding (x, y, z, d, remission); zeros at
        pixels no point reached (valid_mask is authoritative).
    valid_mask: (H, W) bool.
    pixel_of_point: (N, 2) int32 of (v, u) per input point; (-1, -1) for
        points dropped as degenerate (zero range).
    point_of_pixel: (H, W) int32 index of the winning point, -1 if none.
    point_range: (N,) float32 range of every input point.
    label_image: optional (H, W) int32 of the winning point's label;
        pixels without a point hold the fill label passed at projection.
    """

    channels: np.ndarray
    valid_mask: np.ndarray
    pixel_of_point: np.ndarray
    point_of_pixel: np.ndarray
    point_range: np.ndarray
    label_image: np.ndarray | None = None

    @property
    def height(self) -> int:
        return self.channels.shape[1]

    @property
    def width(self) -> int:
        return self.channels.shape[2]

    @property
    def num_points(self) -> int:
        return self.pixel_of_point.shape[0]


def continuous_coords(xyz: np.ndarray, cfg: ProjectionConfig
                      ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Continuous (u, v) image coordinates and range d for each point,
    before flooring and clamping."""
    xyz = np.asarray(xyz, dtype=np.float64)
    d = np.linalg.norm(xyz, axis=1)
    yaw = np.arctan2(xyz[:, 1], xyz[:, 0])
    with np.errstate(invalid="ignore", divide="ignore"):
        pitch = np.arcsin(np.clip(xyz[:, 2] / d, -1.0, 1.0))
    u = 0.5 * (1.0 - yaw / math.pi) * cfg.width
    v = (1.0 - (pitch + cfg.fov_down) / cfg.fov_total) * cfg.height
    return u, v, d


def spherical_project(pc: PointCloud, cfg: ProjectionConfig,
                      fill_label: int = -1) -> RangeImage:
    """Project a point cloud onto the (5, H, W) range-image grid.

    Points with zero range are dropped from the bookkeeping (their
    pixel_of_point entry is (-1, -1)). At contested pixels the point with
    the smallest range wins, ties broken by lower point index. When the
    cloud carries labels, label_image holds the winning point's label and
    ``fill_label`` elsewhere.
    """
    h, w = cfg.height, cfg.width
    n = len(pc)
    channels = np.zeros((5, h, w), dtype=np.float32)
    valid_mask = np.zeros((h, w), dtype=bool)
    point_of_pixel = np.full((h, w), -1, dtype=np.int32)
    pixel_of_point = np.full((n, 2), -1, dtype=np.int32)
    label_image = None
    if pc.labels is not None:
        label_image = np.full((h, w), fill_label, dtype=np.int32)

    u_f, v_f, d = continuous_coords(pc.xyz, cfg)
    point_range = d.astype(np.float32)
    keep = d > 0
    if not keep.all():
        log.debug("dropping %d zero-range points", int((~keep).sum()))
    if not keep.any():
        return RangeImage(channels, valid_mask, pixel_of_point,
                          point_of_pixel, point_range, label_image)

    u = np.zeros(n, dtype=np.int32)
    v = np.zeros(n, dtype=np.int32)
    u[keep] = np.clip(np.floor(u_f[keep]), 0, w - 1).astype(np.int32)
    v[keep] = np.clip(np.floor(v_f[keep]), 0, h - 1).astype(np.int32)
    pixel_of_point[keep, 0] = v[keep]
    pixel_of_point[keep, 1] = u[keep]

    idx = np.flatnonzero(keep)
    # write points from farthest/highest-index to nearest/lowest-index so
    # the winner of each contested pixel lands last
    order = idx[np.lexsort((idx, d[idx]))][::-1]
    vv, uu = v[order], u[order]
    channels[0, vv, uu] = pc.xyz[order, 0]
    channels[1, vv, uu] = pc.xyz[order, 1]
    channels[2, vv, uu] = pc.xyz[order, 2]
    channels[3, vv, uu] = d[order]
    channels[4, vv, uu] = pc.remission[order]
    point_of_pixel[vv, uu] = order
    valid_mask[vv, uu] = True
    if label_image is not None:
        label_image[vv, uu] = pc.labels[order]

    return RangeImage(channels, valid_mask, pixel_of_point, point_of_pixel,
                      point_range, label_image)


def unproject_labels(img_labels: np.ndarray, ri: RangeImage,
                     fill_label: int = 0) -> np.ndarray:
    """Give every point the label of its own pixel.

    Points without a pixel (dropped at projection) receive ``fill_label``.
    Raises ValueError if the label image shape disagrees with the range image.
    """
    img_labels = np.asarray(img_labels)
    if img_labels.shape != (ri.height, ri.width):
        raise ValueError(
            f"label image shape {img_labels.shape} does not match range image "
            f"({ri.height}, {ri.width})")
    v, u = ri.pixel_of_point[:, 0], ri.pixel_of_point[:, 1]
    ok = v >= 0
    out = np.full(ri.num_points, fill_label, dtype=img_labels.dtype)
    out[ok] = img_labels[v[ok], u[ok]]
    return out


def knn_postprocess(ri: RangeImage, img_labels: np.ndarray, cfg: KnnConfig,
                    num_classes: int | None = None,
                    fill_label: int = 0) -> np.ndarray:
    """Re-label points by a range-gated, Gaussian-weighted neighbor vote.

    For each point, candidate neighbors are the valid pixels inside the
    ``window`` centered on the point's own pixel whose stored range differs
    from the point's own range by at most ``range_cutoff``. The ``k``
    candidates with the smallest range difference (ties resolved in
    row-major window order) vote with weight exp(-dr^2 / (2 sigma^2));
    the highest-scoring label wins, ties toward the smaller label. Points
    with no surviving candidate keep their own pixel's label.
    """
    img_labels = np.asarray(img_labels)
    if img_labels.shape != (ri.height, ri.width):
        raise ValueError(
            f"label image shape {img_labels.shape} does not match range image "
            f"({ri.height}, {ri.width})")
    if num_classes is None:
        num_classes = int(img_labels.max(initial=0)) + 1

    v, u = ri.pixel_of_point[:, 0], ri.pixel_of_point[:, 1]
    ok = v >= 0
    out = np.full(ri.num_points, fill_label, dtype=np.int64)
    if not ok.any():
        return out
    vv, uu = v[ok].astype(np.int64), u[ok].astype(np.int64)
    own_d = ri.point_range[ok].astype(np.float64)

    half = cfg.window // 2
    dv, du = np.meshgrid(np.arange(-half, half + 1),
                         np.arange(-half, half + 1), indexing="ij")
    dv, du = dv.ravel(), du.ravel()          # row-major window order

    nv = vv[:, None] + dv[None, :]
    nu = uu[:, None] + du[None, :]
    inbounds = (nv >= 0) & (nv < ri.height) & (nu >= 0) & (nu < ri.width)
    nv_c, nu_c = np.clip(nv, 0, ri.height - 1), np.clip(nu, 0, ri.width - 1)
    neigh_valid = inbounds & ri.valid_mask[nv_c, nu_c]
    neigh_d = ri.channels[3, nv_c, nu_c].astype(np.float64)
    neigh_lab = img_labels[nv_c, nu_c].astype(np.int64)

    dr = np.abs(neigh_d - own_d[:, None])
    candidate = neigh_valid & (dr <= cfg.range_cutoff)
    dr_key = np.where(candidate, dr, np.inf)

    # stable sort keeps row-major order among equal range differences
    sel = np.argsort(dr_key, axis=1, kind="stable")[:, :cfg.k]
    rows = np.arange(sel.shape[0])[:, None]
    sel_candidate = np.take_along_axis(candidate, sel, axis=1)
    sel_dr = np.take_along_axis(dr, sel, axis=1)
    sel_lab = np.take_along_axis(neigh_lab, sel, axis=1)

    weight = np.exp(-(sel_dr ** 2) / (2.0 * cfg.gaussian_sigma ** 2))
    weight = np.where(sel_candidate, weight, 0.0)

    scores = np.zeros((sel.shape[0], num_classes), dtype=np.float64)
    np.add.at(scores, (np.broadcast_to(rows, sel_lab.shape).ravel(),
                       np.clip(sel_lab, 0, num_classes - 1).ravel()),
              weight.ravel())

    voted = np.argmax(scores, axis=1)
    has_vote = sel_candidate.any(axis=1)
    own_label = img_labels[vv, uu].astype(np.int64)
    out[ok] = np.where(has_vote, voted, own_label)
    return out


# ---------------------------------------------------------------------------
# Debug rendering
# ---------------------------------------------------------------------------

_PALETTE = np.array([
    (0, 0, 0), (245, 150, 100), (245, 230, 100), (150, 60, 30),
    (180, 30, 80), (255, 0, 0), (30, 30, 255), (200, 40, 255),
    (90, 30, 150), (255, 0, 255), (255, 150, 255), (75, 0, 75),
    (75, 0, 175), (0, 200, 255), (50, 120, 255), (0, 175, 0),
    (0, 60, 135), (80, 240, 150), (150, 240, 255), (0, 0, 255),
], dtype=np.uint8)


def save_projection_debug(ri: RangeImage, cfg: ProjectionConfig,
                          out_dir: str | Path, stem: str = "scan") -> list[Path]:
    """Write the range channel as grayscale and the label image as an
    indexed color image, plus a sidecar text file echoing the projection
    configuration. Returns the written paths."""
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    d = ri.channels[3]
    top = float(d.max()) if ri.valid_mask.any() else 1.0
    gray = np.zeros_like(d, dtype=np.uint8)
    if top > 0:
        gray[ri.valid_mask] = np.clip(
            255.0 * d[ri.valid_mask] / top, 0, 255).astype(np.uint8)
    depth_path = out_dir / f"{stem}_range.png"
    Image.fromarray(gray, mode="L").save(depth_path)
    written.append(depth_path)

    if ri.label_image is not None:
        lab = ri.label_image.copy()
        lab[lab < 0] = 0
        img = Image.fromarray((lab % 256).astype(np.uint8), mode="P")
        palette = np.tile(_PALETTE, (256 // len(_PALETTE) + 1, 1))[:256]
        img.putpalette(palette.astype(np.uint8).ravel().tolist())
        label_path = out_dir / f"{stem}_labels.png"
        img.save(label_path)
        written.append(label_path)

    sidecar = out_dir / f"{stem}_projection.txt"
    sidecar.write_text(json.dumps({
        "height": cfg.height, "width": cfg.width,
        "fov_up_deg": math.degrees(cfg.fov_up),
        "fov_down_deg": math.degrees(cfg.fov_down),
        "valid_pixels": int(ri.valid_mask.sum()),
        "points": int(ri.num_points),
    }, indent=2))
    written.append(sidecar)
    return written
