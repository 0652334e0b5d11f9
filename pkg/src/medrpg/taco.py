"""Region-phrase contrastive alignment over fused embeddings and attention.

Regions are pooled from the visual part of the fused sequence: a grid cell
belongs to a box when its center lies inside the box (edges inclusive), and
the region vector is the mean over member cells. The same membership weights
pool embeddings (rows of ``H``) and attention (query rows of ``A``).
"""

from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch

from .errors import ConfigError
from .geometry import BoundingBox, Convention, NORMALIZED, NegativeBoxSet, convert
from .model import FusedOutput

#: Incremented whenever a fallback path is taken ("pool_snap", "zero_context").
warning_counts: Counter = Counter()


@dataclass
class RegionContext:
    h_box: torch.Tensor  # (..., C_vl)
    a_box: torch.Tensor  # (..., N_vl)
    box: Optional[BoundingBox] = None


@dataclass
class TacoInputs:
    fused: FusedOutput
    gt_box: BoundingBox
    negatives: NegativeBoxSet
    tau: float = 0.07
    mu: float = 0.05
    sample: int = 0

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if self.mu < 0:
            raise ConfigError(f"mu must be >= 0, got {self.mu}")


@dataclass
class LossReport:
    l_box: float
    l_l1: float
    l_giou: float
    l_fea: Optional[float]
    l_taco: Optional[float]
    total: float

    def to_record(self) -> dict:
        return asdict(self)


def cell_weights(boxes_xyxy: torch.Tensor, grid_shape: tuple[int, int]) -> torch.Tensor:
    """Mean-pooling weights ``(..., N_v)`` for normalized xyxy boxes ``(..., 4)``.

    A box containing no cell center is snapped to the cell nearest its center.
    """
    rows, cols = grid_shape
    dtype = boxes_xyxy.dtype if boxes_xyxy.is_floating_point() else torch.float32
    ys = (torch.arange(rows, dtype=dtype) + 0.5) / rows
    xs = (torch.arange(cols, dtype=dtype) + 0.5) / cols
    cy = ys.repeat_interleave(cols)
    cx = xs.repeat(rows)
    b = boxes_xyxy.detach().to(dtype)[..., None, :]
    inside = (cx >= b[..., 0]) & (cx <= b[..., 2]) & (cy >= b[..., 1]) & (cy <= b[..., 3])
    empty = ~inside.any(-1)
    if empty.any():
        warning_counts["pool_snap"] += int(empty.sum())
        bcx = (b[..., 0] + b[..., 2]) / 2
        bcy = (b[..., 1] + b[..., 3]) / 2
        nearest = ((cx - bcx) ** 2 + (cy - bcy) ** 2).argmin(-1)
        snap = torch.nn.functional.one_hot(nearest, rows * cols).bool()
        inside = torch.where(empty[..., None], snap, inside)
    w = inside.to(dtype)
    return w / w.sum(-1, keepdim=True)


def _xyxy_tensor(box: BoundingBox, dtype=torch.float64) -> torch.Tensor:
    return torch.tensor(convert(box, Convention.CXCYWH, NORMALIZED).xyxy(), dtype=dtype)


def pool_region(matrix: torch.Tensor, grid_shape: tuple[int, int], box: BoundingBox) -> torch.Tensor:
    """Mean of the visual rows of ``matrix`` (``H`` or ``A``, token-major) inside ``box``."""
    n_v = grid_shape[0] * grid_shape[1]
    w = cell_weights(_xyxy_tensor(box, matrix.dtype), grid_shape)
    return w @ matrix[..., :n_v, :]


def region_contexts(fused: FusedOutput, boxes_xyxy: torch.Tensor) -> RegionContext:
    """Pool ``(B, R, 4)`` normalized boxes into ``h_box (B, R, C)`` and ``a_box (B, R, N_vl)``."""
    w = cell_weights(boxes_xyxy.to(fused.H.dtype), fused.grid_shape)
    n_v = fused.n_visual
    return RegionContext(h_box=w @ fused.H[:, :n_v], a_box=w @ fused.A[:, :n_v])


def _check_tau(tau: float):
    if not tau > 0:
        raise ConfigError(f"temperature tau must be > 0, got {tau}")


def _nce(logits: torch.Tensor) -> torch.Tensor:
    # positive sits at index 0
    return torch.logsumexp(logits, dim=-1) - logits[..., 0]


def feature_alignment_loss(h_cls: torch.Tensor, h_box: torch.Tensor, tau: float) -> torch.Tensor:
    """InfoNCE of the phrase embedding against K+1 region embeddings, positive first.

    ``h_cls``: ``(..., C)``; ``h_box``: ``(..., K+1, C)``; returns ``(...)``.
    """
    _check_tau(tau)
    logits = (h_box * h_cls[..., None, :]).sum(-1) / tau
    return _nce(logits)


def joint_attention(a_cls: torch.Tensor, a_reg: torch.Tensor, a_box: torch.Tensor) -> torch.Tensor:
    """L2-normalized elementwise product of the three attention rows; zero if the product vanishes."""
    prod = a_cls[..., None, :] * a_reg[..., None, :] * a_box if a_box.dim() > a_cls.dim() else a_cls * a_reg * a_box
    norm = prod.norm(dim=-1, keepdim=True)
    zero = norm == 0
    if zero.any():
        warning_counts["zero_context"] += int(zero.sum())
    return torch.where(zero, torch.zeros_like(prod), prod / torch.where(zero, torch.ones_like(norm), norm))


def context_pooling(a_cls: torch.Tensor, a_reg: torch.Tensor, a_box: torch.Tensor, H: torch.Tensor) -> torch.Tensor:
    """Weighted sum of fused embeddings under the joint attention weights.

    Unbatched: ``a_* (N,)``, ``H (N, C)`` -> ``(C,)``. Batched: ``a_cls, a_reg
    (B, N)``, ``a_box (B, R, N)``, ``H (B, N, C)`` -> ``(B, R, C)``.
    """
    t = joint_attention(a_cls, a_reg, a_box)
    return t @ H


def taco_loss(h_cls: torch.Tensor, h_box: torch.Tensor, context: torch.Tensor, tau: float) -> torch.Tensor:
    """InfoNCE where each region k scores ``(h_cls + c_k) . (h_box_k + c_k)``."""
    _check_tau(tau)
    logits = ((h_cls[..., None, :] + context) * (h_box + context)).sum(-1) / tau
    return _nce(logits)


def total_loss(box_term, taco_term, mu: float = 0.05):
    if mu < 0:
        raise ConfigError(f"mu must be >= 0, got {mu}")
    return box_term + mu * taco_term


def alignment_losses(fused: FusedOutput, regions_xyxy: torch.Tensor, tau: float):
    """Per-sample ``(l_fea, l_taco)`` for ``(B, K+1, 4)`` boxes, positive first."""
    reg = region_contexts(fused, regions_xyxy)
    a_cls = fused.A[:, fused.cls_index]
    a_reg = fused.A[:, fused.reg_index]
    c = context_pooling(a_cls, a_reg, reg.a_box, fused.H)
    h_cls = fused.h_cls
    return feature_alignment_loss(h_cls, reg.h_box, tau), taco_loss(h_cls, reg.h_box, c, tau)


def evaluate_taco(inputs: TacoInputs) -> dict:
    """Loss fragment for one sample of a fused batch; values are tensors."""
    boxes = [inputs.gt_box, *inputs.negatives.boxes]
    xyxy = torch.stack([_xyxy_tensor(b, inputs.fused.H.dtype) for b in boxes])
    sl = slice(inputs.sample, inputs.sample + 1)
    fused = FusedOutput(inputs.fused.H[sl], inputs.fused.A[sl], inputs.fused.key_pad_mask[sl],
                        inputs.fused.grid_shape, inputs.fused.n_text)
    l_fea, l_taco = alignment_losses(fused, xyxy[None], inputs.tau)
    return {"l_fea": l_fea[0], "l_taco": l_taco[0], "weighted": inputs.mu * l_taco[0]}


def negatives_to_tensor(sets: list[np.ndarray], dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(np.stack(sets), dtype=dtype)
