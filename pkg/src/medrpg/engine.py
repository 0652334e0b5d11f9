"""Training, evaluation, seed aggregation and attention export."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .data import PreparedSplit
from .errors import ConfigError, DataError, NumericError
from .geometry import box_loss_terms_t, cxcywh_to_xyxy_t, sample_negative_xyxy
from .model import MedRPG, ModelConfig, load_checkpoint, save_checkpoint
from .taco import LossReport, alignment_losses

log = logging.getLogger(__name__)

GROUPS = ("vision", "text", "vlt")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 90
    lr_vision: float = 1e-5
    lr_text: float = 1e-5
    lr_vlt: float = 5e-5
    lr_drop_epoch: int = 60
    lr_drop_factor: float = 10.0
    weight_decay: float = 1e-4
    batch_size: int = 16
    seed: int = 0
    lam: float = 1.0
    mu: float = 0.05
    tau: float = 0.07
    k: int = 5
    iou_ceiling: float = 0.1
    neg_min_size: float = 0.05
    clip_grad_norm: float = 0.0
    checkpoint_dir: str = "runs/default"

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not self.lr_drop_epoch < self.epochs:
            raise ConfigError(f"lr_drop_epoch ({self.lr_drop_epoch}) must be < epochs ({self.epochs})")
        if min(self.lr_vision, self.lr_text, self.lr_vlt) <= 0:
            raise ConfigError("learning rates must be > 0")
        if self.lr_drop_factor <= 0:
            raise ConfigError("lr_drop_factor must be > 0")
        if self.tau <= 0 or self.mu < 0 or self.lam < 0:
            raise ConfigError("need tau > 0, mu >= 0, lam >= 0")
        if self.k < 1 or self.batch_size < 1:
            raise ConfigError("k and batch_size must be >= 1")

    @classmethod
    def toy(cls, **overrides) -> "TrainConfig":
        base = cls(epochs=30, lr_vision=5e-4, lr_text=5e-4, lr_vlt=5e-4, lr_drop_epoch=20, batch_size=32, tau=50.0)
        return replace(base, **overrides)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def base_lrs(self) -> dict[str, float]:
        return {"vision": self.lr_vision, "text": self.lr_text, "vlt": self.lr_vlt}


def lr_at_epoch(base_lr: float, epoch: int, cfg: TrainConfig) -> float:
    """Step schedule: ``base_lr`` until ``lr_drop_epoch``, divided by ``lr_drop_factor`` from then on."""
    return base_lr / cfg.lr_drop_factor if epoch >= cfg.lr_drop_epoch else base_lr


def build_optimizer(model: MedRPG, cfg: TrainConfig) -> torch.optim.AdamW:
    groups = model.param_groups()
    lrs = cfg.base_lrs()
    return torch.optim.AdamW([{"params": groups[g], "lr": lrs[g], "name": g} for g in GROUPS],
                             weight_decay=cfg.weight_decay)


def set_epoch_lr(opt: torch.optim.Optimizer, epoch: int, cfg: TrainConfig) -> dict[str, float]:
    lrs = cfg.base_lrs()
    for group in opt.param_groups:
        group["lr"] = lr_at_epoch(lrs[group["name"]], epoch, cfg)
    return {g["name"]: g["lr"] for g in opt.param_groups}


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass
class Metrics:
    acc: float
    miou: float
    n: int
    per_seed: Optional[list] = None

    def to_dict(self) -> dict:
        return asdict(self)

    def summary(self) -> str:
        return f"Acc {100 * self.acc:.2f}  mIoU {100 * self.miou:.2f}  (n={self.n})"


def metrics_from_ious(ious: Sequence[float]) -> Metrics:
    ious = [float(v) for v in ious]
    if not ious:
        raise DataError("cannot compute metrics over an empty sample list")
    hits = sum(1 for v in ious if v > 0.5)
    return Metrics(acc=hits / len(ious), miou=math.fsum(ious) / len(ious), n=len(ious))


def aggregate_seeds(runs: Sequence[Metrics]) -> Metrics:
    if not runs:
        raise DataError("no runs to aggregate")
    return Metrics(acc=math.fsum(r.acc for r in runs) / len(runs), miou=math.fsum(r.miou for r in runs) / len(runs),
                   n=sum(r.n for r in runs), per_seed=[{"acc": r.acc, "miou": r.miou, "n": r.n} for r in runs])


def pixel_iou(pred_xyxy: np.ndarray, gt_xyxy: np.ndarray) -> np.ndarray:
    """Row-wise IoU of xyxy arrays; empty predictions score 0."""
    pred = np.asarray(pred_xyxy, dtype=np.float64)
    gt = np.asarray(gt_xyxy, dtype=np.float64)
    iw = np.clip(np.minimum(pred[:, 2], gt[:, 2]) - np.maximum(pred[:, 0], gt[:, 0]), 0, None)
    ih = np.clip(np.minimum(pred[:, 3], gt[:, 3]) - np.maximum(pred[:, 1], gt[:, 1]), 0, None)
    inter = iw * ih
    area_p = np.clip(pred[:, 2] - pred[:, 0], 0, None) * np.clip(pred[:, 3] - pred[:, 1], 0, None)
    area_g = (gt[:, 2] - gt[:, 0]) * (gt[:, 3] - gt[:, 1])
    return inter / (area_p + area_g - inter)


@torch.no_grad()
def predict(model: MedRPG, images: torch.Tensor, tokens: torch.Tensor, batch_size: int = 64) -> torch.Tensor:
    was_training = model.training
    model.eval()
    out = [model(images[i:i + batch_size], tokens[i:i + batch_size])[0] for i in range(0, len(images), batch_size)]
    model.train(was_training)
    return torch.cat(out) if out else torch.empty(0, 4)


def evaluate(model: MedRPG, split: PreparedSplit, batch_size: int = 64) -> tuple[Metrics, list[dict]]:
    """Acc@0.5 (strict) and mIoU in each sample's original pixel frame, plus per-sample records."""
    if len(split) == 0:
        raise DataError("cannot evaluate an empty sample list")
    pred = cxcywh_to_xyxy_t(predict(model, split.images, split.tokens, batch_size).double()).numpy()
    rows = []
    for i, lb in enumerate(split.letterboxes):
        px = lb.inverse_xyxy(pred[i])
        px = np.clip(px, 0, [lb.src_w, lb.src_h, lb.src_w, lb.src_h])
        rows.append(px)
    pred_px = np.stack(rows)
    ious = pixel_iou(pred_px, split.gt_pixel_xyxy)
    records = [{"id": sid, "pred_xyxy": p.tolist(), "gt_xyxy": g.tolist(), "iou": float(v)}
               for sid, p, g, v in zip(split.ids, pred_px, split.gt_pixel_xyxy, ious)]
    return metrics_from_ious(ious), records


def metrics_from_records(records: Sequence[dict]) -> Metrics:
    """Recompute metrics from per-sample records, re-deriving IoU from the stored boxes."""
    if not records:
        raise DataError("empty predictions file")
    try:
        pred = np.array([r["pred_xyxy"] for r in records], dtype=np.float64)
        gt = np.array([r["gt_xyxy"] for r in records], dtype=np.float64)
    except KeyError as e:
        raise DataError(f"prediction record missing field {e}") from None
    return metrics_from_ious(pixel_iou(pred, gt))


def write_jsonl(path, records: Sequence[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")
    return path


def read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    best_checkpoint: Path
    last_checkpoint: Path
    log_path: Path
    best_val: Metrics
    best_epoch: int
    step_reports: list[LossReport] = field(default_factory=list)
    epoch_records: list[dict] = field(default_factory=list)


class Trainer:
    """Single-process trainer; owns the model, optimizer and the random streams."""

    def __init__(self, model_cfg: ModelConfig, cfg: TrainConfig, vocab: list[str], norm_stats=(0.0, 1.0)):
        self.model_cfg = model_cfg
        self.cfg = cfg
        self.vocab = vocab
        self.norm_stats = tuple(norm_stats)
        torch.manual_seed(cfg.seed)
        self.model = MedRPG(model_cfg)
        self.opt = build_optimizer(self.model, cfg)
        self.neg_rng = np.random.default_rng([cfg.seed, 1])
        self.shuffle = torch.Generator().manual_seed(cfg.seed)
        self.step = 0

    def sample_negatives(self, gt_cxcywh: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        anchors = cxcywh_to_xyxy_t(gt_cxcywh.detach().double()).numpy()
        negs = [sample_negative_xyxy(a, cfg.k, self.neg_rng, cfg.iou_ceiling, cfg.neg_min_size) for a in anchors]
        return torch.as_tensor(np.stack(negs), dtype=gt_cxcywh.dtype)

    def losses(self, images, tokens, gt):
        """Batch-mean loss terms; TaCo terms are skipped entirely when ``mu == 0``."""
        cfg = self.cfg
        pred, fused = self.model(images, tokens)
        l_box, l_l1, l_giou = (t.mean() for t in box_loss_terms_t(pred, gt, cfg.lam))
        out = {"l_box": l_box, "l_l1": l_l1, "l_giou": l_giou, "l_fea": None, "l_taco": None}
        total = l_box
        if cfg.mu > 0:
            regions = torch.cat([cxcywh_to_xyxy_t(gt)[:, None], self.sample_negatives(gt)], dim=1)
            l_fea, l_taco = alignment_losses(fused, regions, cfg.tau)
            out["l_fea"] = l_fea.mean().detach()
            out["l_taco"] = l_taco.mean()
            total = l_box + cfg.mu * out["l_taco"]
        out["total"] = total
        return out

    def train_step(self, images, tokens, gt, batch_ids=()) -> LossReport:
        self.model.train()
        terms = self.losses(images, tokens, gt)
        total = terms["total"]
        if not torch.isfinite(total):
            raise NumericError(f"non-finite loss at step {self.step} (batch ids {list(batch_ids)}): "
                               + ", ".join(f"{k}={None if v is None else float(v.detach())}" for k, v in terms.items()))
        self.opt.zero_grad(set_to_none=True)
        total.backward()
        if self.cfg.clip_grad_norm > 0:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.clip_grad_norm)
        self.opt.step()
        self.step += 1
        return LossReport(**{k: None if v is None else float(v.detach()) for k, v in terms.items()})

    def save(self, path, **extra) -> Path:
        return save_checkpoint(path, self.model, self.vocab, norm_stats=list(self.norm_stats),
                               train_config=asdict(self.cfg), **extra)

    def fit(self, train: PreparedSplit, val: PreparedSplit, on_epoch=None) -> TrainResult:
        cfg = self.cfg
        if len(train) == 0 or len(val) == 0:
            raise DataError("train and val splits must be non-empty")
        out_dir = Path(cfg.checkpoint_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "metrics.jsonl"
        best_path, last_path = out_dir / "best.pt", out_dir / "last.pt"
        best_key, best_val, best_epoch = None, None, -1
        reports, epochs = [], []
        with open(log_path, "w", encoding="utf-8") as fh:
            for epoch in range(cfg.epochs):
                lrs = set_epoch_lr(self.opt, epoch, cfg)
                perm = torch.randperm(len(train), generator=self.shuffle)
                t0 = time.perf_counter()
                epoch_totals = []
                for start in range(0, len(train), cfg.batch_size):
                    idx = perm[start:start + cfg.batch_size]
                    ids = [train.ids[i] for i in idx.tolist()]
                    rep = self.train_step(train.images[idx], train.tokens[idx], train.gt[idx], ids)
                    reports.append(rep)
                    epoch_totals.append(rep.total)
                    fh.write(json.dumps({"kind": "step", "step": self.step - 1, "epoch": epoch, **rep.to_record(),
                                         "lr": lrs}) + "\n")
                val_m, _ = evaluate(self.model, val)
                key = (val_m.acc, val_m.miou)
                improved = best_key is None or key > best_key
                if improved:
                    best_key, best_val, best_epoch = key, val_m, epoch
                    self.save(best_path, epoch=epoch, val=val_m.to_dict())
                rec = {"kind": "epoch", "epoch": epoch, "mean_total": float(np.mean(epoch_totals)),
                       "val": val_m.to_dict(), "best": improved, "lr": lrs,
                       "seconds": round(time.perf_counter() - t0, 3)}
                epochs.append(rec)
                fh.write(json.dumps(rec) + "\n")
                fh.flush()
                log.info("epoch %d  loss %.4f  val %s", epoch, rec["mean_total"], val_m.summary())
                if on_epoch is not None:
                    on_epoch(rec)
        self.save(last_path, epoch=cfg.epochs - 1)
        return TrainResult(best_path, last_path, log_path, best_val, best_epoch, reports, epochs)


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, train_split: PreparedSplit, val_split: PreparedSplit,
          vocab: list[str], norm_stats=(0.0, 1.0), on_epoch=None) -> TrainResult:
    return Trainer(model_cfg, train_cfg, vocab, norm_stats).fit(train_split, val_split, on_epoch)


def load_best(path) -> tuple[MedRPG, dict]:
    return load_checkpoint(path)


# ---------------------------------------------------------------------------
# attention export
# ---------------------------------------------------------------------------

@torch.no_grad()
def reg_attention_grid(model: MedRPG, image: torch.Tensor, tokens: torch.Tensor) -> np.ndarray:
    """The [REG] query row of the last fusion attention over visual tokens, shaped like the grid."""
    model.eval()
    _, fused = model(image[None], tokens[None])
    row = fused.A[0, fused.reg_index, :fused.n_visual]
    return row.reshape(fused.grid_shape).double().numpy()


def export_attention(model: MedRPG, image: torch.Tensor, tokens: torch.Tensor, out_path,
                     alpha: float = 0.5) -> tuple[Path, Path]:
    """Write a heatmap overlay PNG and the raw attention grid as a ``.txt`` sidecar.

    ``image`` is the preprocessed model input ``(C, S, S)``.
    """
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    grid = reg_attention_grid(model, image, tokens)
    sidecar = out_path.with_suffix(".txt")
    np.savetxt(sidecar, grid, fmt="%.10e")
    size = image.shape[-1]
    up = F.interpolate(torch.from_numpy(grid)[None, None], size=(size, size), mode="bilinear",
                       align_corners=False)[0, 0].numpy()
    heat = heatmap_values(up)
    base = image.mean(0).double().numpy()
    blo, bhi = base.min(), base.max()
    base = (base - blo) / (bhi - blo) if bhi > blo else np.zeros_like(base)
    color = np.stack([heat, 0.25 * np.sin(np.pi * heat), 1.0 - heat], axis=-1)
    rgb = (1 - alpha) * base[..., None] + alpha * color
    Image.fromarray(np.clip(np.round(rgb * 255), 0, 255).astype(np.uint8)).save(out_path)
    return out_path, sidecar


def heatmap_values(grid: np.ndarray) -> np.ndarray:
    """Min-max scaling used for display; a flat grid maps to zeros."""
    lo, hi = grid.min(), grid.max()
    return (grid - lo) / (hi - lo) if hi > lo else np.zeros_like(grid)
