"""Bounding boxes, overlap measures and box regression losses.

Two layers live here. :class:`BoundingBox` is the validated, convention-aware
value type used at the edges (annotation files, predictions, metrics). The
``*_t`` tensor functions operate on ``(..., 4)`` tensors and are what the
training loop differentiates through.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .errors import ConfigError, DegenerateBoxError, SamplingInfeasibleError

_TOL = 1e-9


class Convention(enum.Enum):
    XYWH_TOPLEFT = "xywh"
    CXCYWH = "cxcywh"


@dataclass(frozen=True)
class Frame:
    """Coordinate frame: normalized unit square, or a pixel grid of given size."""

    width: Optional[float] = None
    height: Optional[float] = None

    @property
    def is_normalized(self) -> bool:
        return self.width is None

    @classmethod
    def pixel(cls, width: float, height: float) -> "Frame":
        if width is None or height is None or width <= 0 or height <= 0:
            raise ConfigError(f"pixel frame needs positive dimensions, got {width}x{height}")
        return cls(float(width), float(height))

    def __str__(self) -> str:
        return "NORMALIZED" if self.is_normalized else f"PIXEL({self.width:g},{self.height:g})"


NORMALIZED = Frame()


def _extent(frame: Frame) -> tuple[float, float]:
    return (1.0, 1.0) if frame.is_normalized else (frame.width, frame.height)


@dataclass(frozen=True)
class BoundingBox:
    coords: tuple[float, float, float, float]
    convention: Convention = Convention.CXCYWH
    frame: Frame = NORMALIZED

    def __post_init__(self):
        if len(self.coords) != 4:
            raise DegenerateBoxError(f"box needs 4 coordinates, got {len(self.coords)}")
        object.__setattr__(self, "coords", tuple(float(c) for c in self.coords))
        if not all(math.isfinite(c) for c in self.coords):
            raise DegenerateBoxError(f"non-finite box coordinates {self.coords}")
        w, h = self.coords[2], self.coords[3]
        if w <= 0 or h <= 0:
            raise DegenerateBoxError(f"box with non-positive size {self.coords}")
        fw, fh = _extent(self.frame)
        x0, y0, x1, y1 = self.xyxy()
        tol_w, tol_h = _TOL * max(1.0, fw), _TOL * max(1.0, fh)
        if x0 < -tol_w or y0 < -tol_h or x1 > fw + tol_w or y1 > fh + tol_h:
            raise DegenerateBoxError(f"box {self.coords} ({self.convention.name}) lies outside frame {self.frame}")

    @classmethod
    def from_xyxy(cls, x0: float, y0: float, x1: float, y1: float,
                  convention: Convention = Convention.CXCYWH, frame: Frame = NORMALIZED,
                  clip: bool = False) -> "BoundingBox":
        if clip:
            fw, fh = _extent(frame)
            x0, x1 = min(max(x0, 0.0), fw), min(max(x1, 0.0), fw)
            y0, y1 = min(max(y0, 0.0), fh), min(max(y1, 0.0), fh)
        if convention is Convention.CXCYWH:
            coords = ((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)
        else:
            coords = (x0, y0, x1 - x0, y1 - y0)
        return cls(coords, convention, frame)

    def xyxy(self) -> tuple[float, float, float, float]:
        a, b, w, h = self.coords
        if self.convention is Convention.CXCYWH:
            return (a - w / 2, b - h / 2, a + w / 2, b + h / 2)
        return (a, b, a + w, b + h)

    @property
    def area(self) -> float:
        return self.coords[2] * self.coords[3]

    def to(self, convention: Convention, frame: Optional[Frame] = None) -> "BoundingBox":
        return convert(self, convention, frame)


def convert(box: BoundingBox, convention: Convention, frame: Optional[Frame] = None) -> BoundingBox:
    """Re-express ``box`` in another convention and/or frame.

    ``frame=None`` keeps the current frame. Converting between a pixel frame
    and the normalized one needs the pixel dimensions, so converting a
    normalized box into a frame without them raises :class:`ConfigError`.
    """
    if frame is None:
        frame = box.frame
    if not isinstance(frame, Frame):
        raise ConfigError(f"unknown frame {frame!r}")
    if convention == box.convention and frame == box.frame:
        return box
    x0, y0, x1, y1 = box.xyxy()
    if frame != box.frame:
        sw, sh = _extent(box.frame)
        tw, th = _extent(frame)
        x0, x1 = x0 / sw * tw, x1 / sw * tw
        y0, y1 = y0 / sh * th, y1 / sh * th
    return BoundingBox.from_xyxy(x0, y0, x1, y1, convention, frame)


def _common_xyxy(a: BoundingBox, b: BoundingBox):
    if a.frame != b.frame:
        a = convert(a, a.convention, NORMALIZED)
        b = convert(b, b.convention, NORMALIZED)
    return a.xyxy(), b.xyxy()


def _overlap_terms(a: BoundingBox, b: BoundingBox):
    (ax0, ay0, ax1, ay1), (bx0, by0, bx1, by1) = _common_xyxy(a, b)
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    area_a = (ax1 - ax0) * (ay1 - ay0)
    area_b = (bx1 - bx0) * (by1 - by0)
    union = area_a + area_b - inter
    enclosing = (max(ax1, bx1) - min(ax0, bx0)) * (max(ay1, by1) - min(ay0, by0))
    return inter, union, enclosing


def iou(a: BoundingBox, b: BoundingBox) -> float:
    inter, union, _ = _overlap_terms(a, b)
    return inter / union


def giou(a: BoundingBox, b: BoundingBox) -> float:
    inter, union, enclosing = _overlap_terms(a, b)
    return inter / union - (enclosing - union) / enclosing


# ---------------------------------------------------------------------------
# tensor kernels
# ---------------------------------------------------------------------------

def cxcywh_to_xyxy_t(boxes: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = boxes.unbind(-1)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1)


def xyxy_to_cxcywh_t(boxes: torch.Tensor) -> torch.Tensor:
    x0, y0, x1, y1 = boxes.unbind(-1)
    return torch.stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], dim=-1)


def iou_giou_t(a_xyxy: torch.Tensor, b_xyxy: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Elementwise IoU and GIoU of two broadcastable ``(..., 4)`` xyxy tensors."""
    area_a = (a_xyxy[..., 2] - a_xyxy[..., 0]) * (a_xyxy[..., 3] - a_xyxy[..., 1])
    area_b = (b_xyxy[..., 2] - b_xyxy[..., 0]) * (b_xyxy[..., 3] - b_xyxy[..., 1])
    lt = torch.maximum(a_xyxy[..., :2], b_xyxy[..., :2])
    rb = torch.minimum(a_xyxy[..., 2:], b_xyxy[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a + area_b - inter
    iou_ = inter / union
    elt = torch.minimum(a_xyxy[..., :2], b_xyxy[..., :2])
    erb = torch.maximum(a_xyxy[..., 2:], b_xyxy[..., 2:])
    ewh = erb - elt
    enclosing = ewh[..., 0] * ewh[..., 1]
    return iou_, iou_ - (enclosing - union) / enclosing


def smooth_l1_t(pred: torch.Tensor, gt: torch.Tensor, beta: float = 1.0) -> torch.Tensor:
    """Smooth-L1 averaged over the trailing coordinate axis; shape ``(...)``."""
    d = (pred - gt).abs()
    per = torch.where(d < beta, 0.5 * d * d / beta, d - 0.5 * beta)
    return per.mean(dim=-1)


def box_loss_terms_t(pred_cxcywh: torch.Tensor, gt_cxcywh: torch.Tensor, lam: float = 1.0):
    """Per-sample ``(total, smooth_l1, 1 - giou)`` for normalized CXCYWH tensors."""
    l1 = smooth_l1_t(pred_cxcywh, gt_cxcywh)
    _, g = iou_giou_t(cxcywh_to_xyxy_t(pred_cxcywh), cxcywh_to_xyxy_t(gt_cxcywh))
    lg = 1.0 - g
    return l1 + lam * lg, l1, lg


def smooth_l1(pred: Sequence[float], gt: Sequence[float], beta: float = 1.0) -> float:
    p = torch.as_tensor(pred, dtype=torch.float64)
    g = torch.as_tensor(gt, dtype=torch.float64)
    return float(smooth_l1_t(p, g, beta))


def _as_norm_cxcywh(box: BoundingBox) -> torch.Tensor:
    return torch.tensor(convert(box, Convention.CXCYWH, NORMALIZED).coords, dtype=torch.float64)


def box_loss(pred: BoundingBox, gt: BoundingBox, lam: float = 1.0) -> float:
    """Smooth-L1 plus ``lam`` times the GIoU loss, on normalized CXCYWH coordinates.

    Pixel-frame boxes are normalized by their own frame first, so both boxes
    must describe the same image.
    """
    if lam < 0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")
    total, _, _ = box_loss_terms_t(_as_norm_cxcywh(pred), _as_norm_cxcywh(gt), lam)
    return float(total)


# ---------------------------------------------------------------------------
# negative sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NegativeBoxSet:
    boxes: tuple[BoundingBox, ...]
    iou_ceiling: float
    anchor: BoundingBox

    def __len__(self) -> int:
        return len(self.boxes)


def sample_negative_xyxy(anchor_xyxy: Sequence[float], k: int, rng: np.random.Generator,
                         iou_ceiling: float = 0.1, min_size: float = 0.05,
                         max_attempts: Optional[int] = None, chunk: int = 256) -> np.ndarray:
    """Rejection-sample ``k`` normalized xyxy boxes that stay clear of ``anchor_xyxy``.

    A candidate is accepted when the fraction of its own area covered by the
    anchor is at most ``iou_ceiling``. That fraction upper-bounds the IoU, so
    every accepted box also has IoU <= ``iou_ceiling``; it additionally rules
    out small boxes nested inside the anchor, which would pool the same
    visual tokens as the positive region.
    """
    if k < 1:
        raise ConfigError(f"K must be >= 1, got {k}")
    if not 0 <= iou_ceiling < 1:
        raise ConfigError(f"iou_ceiling must lie in [0, 1), got {iou_ceiling}")
    if not 0 < min_size <= 1:
        raise ConfigError(f"min_size must lie in (0, 1], got {min_size}")
    if max_attempts is None:
        max_attempts = 1000 * k
    ax0, ay0, ax1, ay1 = (float(v) for v in anchor_xyxy)
    out = np.empty((k, 4))
    found = attempts = 0
    while found < k:
        if attempts >= max_attempts:
            raise SamplingInfeasibleError(
                f"could only place {found}/{k} negatives after {attempts} attempts "
                f"for anchor xyxy=({ax0:.4f}, {ay0:.4f}, {ax1:.4f}, {ay1:.4f})")
        n = min(chunk, max_attempts - attempts)
        wh = rng.uniform(min_size, 1.0, size=(n, 2))
        c = wh / 2 + rng.uniform(size=(n, 2)) * (1.0 - wh)
        x0, y0 = c[:, 0] - wh[:, 0] / 2, c[:, 1] - wh[:, 1] / 2
        x1, y1 = x0 + wh[:, 0], y0 + wh[:, 1]
        iw = np.clip(np.minimum(x1, ax1) - np.maximum(x0, ax0), 0, None)
        ih = np.clip(np.minimum(y1, ay1) - np.maximum(y0, ay0), 0, None)
        ok = np.flatnonzero(iw * ih <= iou_ceiling * wh[:, 0] * wh[:, 1])
        if found + len(ok) >= k:
            # attempts count up to the k-th acceptance
            take = ok[:k - found]
            attempts += int(take[-1]) + 1
        else:
            take = ok
            attempts += n
        out[found:found + len(take)] = np.stack([x0, y0, x1, y1], axis=1)[take]
        found += len(take)
    return out


def sample_negative_boxes(anchor: BoundingBox, k: int, iou_ceiling: float = 0.1, min_size: float = 0.05,
                          rng: Optional[np.random.Generator] = None,
                          max_attempts: Optional[int] = None) -> NegativeBoxSet:
    if not anchor.frame.is_normalized:
        raise ConfigError("negative sampling expects a NORMALIZED anchor")
    rng = np.random.default_rng() if rng is None else rng
    xyxy = sample_negative_xyxy(anchor.xyxy(), k, rng, iou_ceiling, min_size, max_attempts)
    boxes = tuple(BoundingBox.from_xyxy(*row, convention=anchor.convention, clip=True) for row in xyxy)
    return NegativeBoxSet(boxes, iou_ceiling, anchor)
