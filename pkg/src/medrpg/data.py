"""Image-phrase-box triples: ingestion, preprocessing and patient-wise splits."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .errors import (BoxOutOfFrameError, ConfigError, DataError, DegenerateBoxError, DuplicateIdError,
                     ImageReadError, MissingFieldError)
from .geometry import BoundingBox, Convention, Frame, NORMALIZED, convert

REQUIRED_KEYS = ("id", "image", "width", "height", "patient_id", "phrase", "bbox")


@dataclass
class GroundingSample:
    id: str
    image: np.ndarray  # (H, W) or (H, W, 3), uint8 or uint16
    width: int
    height: int
    phrase: str
    gt_box: BoundingBox  # XYWH_TOPLEFT in PIXEL(width, height)
    patient_id: str

    def __post_init__(self):
        if not self.phrase or not self.phrase.strip():
            raise DataError(f"sample {self.id}: empty phrase")
        if self.image.shape[:2] != (self.height, self.width):
            raise DataError(f"sample {self.id}: image is {self.image.shape[1]}x{self.image.shape[0]}, "
                            f"record says {self.width}x{self.height}")
        if self.gt_box.frame != Frame.pixel(self.width, self.height):
            raise DataError(f"sample {self.id}: box frame {self.gt_box.frame} does not match image")


def make_box(bbox: Sequence[float], width: int, height: int, sample_id: str = "?") -> BoundingBox:
    try:
        return BoundingBox(tuple(bbox), Convention.XYWH_TOPLEFT, Frame.pixel(width, height))
    except DegenerateBoxError as e:
        raise BoxOutOfFrameError(f"record {sample_id}: {e}") from None


def read_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode in ("I;16", "I;16B", "I;16L", "I"):
                arr = np.asarray(im).astype(np.uint16)
            elif im.mode in ("L", "RGB"):
                arr = np.asarray(im)
            else:
                arr = np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as e:
        raise ImageReadError(f"cannot read image {path}: {e}") from None
    return arr


def load_annotations(path) -> list[GroundingSample]:
    """Parse a line-delimited JSON annotation file; image paths are relative to it."""
    path = Path(path)
    root = path.parent
    samples: list[GroundingSample] = []
    ids = Counter()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: malformed record ({e})") from None
            missing = [k for k in REQUIRED_KEYS if k not in rec]
            if missing:
                raise MissingFieldError(f"{path}:{lineno}: missing field(s) {missing}")
            rid = str(rec["id"])
            ids[rid] += 1
            bbox = rec["bbox"]
            if not isinstance(bbox, list) or len(bbox) != 4:
                raise DataError(f"{path}:{lineno}: record {rid}: bbox must be [x, y, w, h]")
            w, h = int(rec["width"]), int(rec["height"])
            box = make_box(bbox, w, h, rid)
            image = read_image(root / rec["image"])
            try:
                samples.append(GroundingSample(rid, image, w, h, str(rec["phrase"]), box, str(rec["patient_id"])))
            except DataError as e:
                raise DataError(f"{path}:{lineno}: {e}") from None
    dupes = sorted(k for k, n in ids.items() if n > 1)
    if dupes:
        raise DuplicateIdError(f"{path}: duplicate ids {dupes}")
    return samples


def write_annotations(samples: Sequence[GroundingSample], out_dir, image_dir: str = "images") -> Path:
    """Write PNG images plus ``annotations.jsonl`` in the ingestion format."""
    out_dir = Path(out_dir)
    (out_dir / image_dir).mkdir(parents=True, exist_ok=True)
    ann = out_dir / "annotations.jsonl"
    with open(ann, "w", encoding="utf-8") as fh:
        for s in samples:
            rel = f"{image_dir}/{s.id}.png"
            Image.fromarray(s.image).save(out_dir / rel)
            rec = {"id": s.id, "image": rel, "width": s.width, "height": s.height, "patient_id": s.patient_id,
                   "phrase": s.phrase, "bbox": [round(c, 6) for c in s.gt_box.coords]}
            fh.write(json.dumps(rec) + "\n")
    return ann


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)
    seed: int = 0

    def __post_init__(self):
        if len(self.ratios) != 3 or any(r < 0 for r in self.ratios) or not math.isclose(sum(self.ratios), 1.0,
                                                                                      abs_tol=1e-9):
            raise ConfigError(f"split ratios must be 3 non-negative numbers summing to 1, got {self.ratios}")


def _split_counts(n: int, ratios: Sequence[float]) -> list[int]:
    raw = [r * n for r in ratios]
    counts = [math.floor(x) for x in raw]
    order = sorted(range(len(raw)), key=lambda i: (counts[i] - raw[i], i))
    for i in order[:n - sum(counts)]:
        counts[i] += 1
    for i, r in enumerate(ratios):
        if r > 0 and counts[i] == 0:
            donor = max(range(len(counts)), key=lambda j: counts[j])
            counts[donor] -= 1
            counts[i] += 1
    return counts


def split_by_patient(samples: Sequence[GroundingSample], spec: SplitSpec = SplitSpec()):
    """Shuffle patients with ``spec.seed`` and cut them into train/val/test by ``spec.ratios``."""
    patients = sorted({s.patient_id for s in samples})
    n_splits = sum(1 for r in spec.ratios if r > 0)
    if len(patients) < n_splits:
        raise DataError(f"{len(patients)} patient(s) cannot fill {n_splits} splits")
    order = np.random.default_rng(spec.seed).permutation(len(patients))
    counts = _split_counts(len(patients), spec.ratios)
    assign = {}
    start = 0
    for split, c in enumerate(counts):
        for idx in order[start:start + c]:
            assign[patients[idx]] = split
        start += c
    out = ([], [], [])
    for s in samples:
        out[assign[s.patient_id]].append(s)
    return out


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Letterbox:
    """Aspect-preserving map from an original pixel frame onto a square canvas."""

    src_w: int
    src_h: int
    size: int

    @property
    def content(self) -> tuple[int, int]:
        s = self.size / max(self.src_w, self.src_h)
        return max(1, round(self.src_w * s)), max(1, round(self.src_h * s))

    @property
    def offset(self) -> tuple[int, int]:
        cw, ch = self.content
        return (self.size - cw) // 2, (self.size - ch) // 2

    def forward_xyxy(self, xyxy):
        """Original pixel xyxy -> normalized canvas xyxy (array-like ``(..., 4)``)."""
        cw, ch = self.content
        ox, oy = self.offset
        b = np.asarray(xyxy, dtype=np.float64)
        x = (b[..., [0, 2]] * cw / self.src_w + ox) / self.size
        y = (b[..., [1, 3]] * ch / self.src_h + oy) / self.size
        return np.stack([x[..., 0], y[..., 0], x[..., 1], y[..., 1]], axis=-1)

    def inverse_xyxy(self, xyxy):
        """Normalized canvas xyxy -> original pixel xyxy."""
        cw, ch = self.content
        ox, oy = self.offset
        b = np.asarray(xyxy, dtype=np.float64)
        x = (b[..., [0, 2]] * self.size - ox) * self.src_w / cw
        y = (b[..., [1, 3]] * self.size - oy) * self.src_h / ch
        return np.stack([x[..., 0], y[..., 0], x[..., 1], y[..., 1]], axis=-1)

    def forward_box(self, box: BoundingBox) -> BoundingBox:
        px = convert(box, Convention.XYWH_TOPLEFT, Frame.pixel(self.src_w, self.src_h))
        return BoundingBox.from_xyxy(*self.forward_xyxy(px.xyxy()), convention=Convention.CXCYWH, frame=NORMALIZED)

    def inverse_box(self, box: BoundingBox) -> BoundingBox:
        n = convert(box, Convention.CXCYWH, NORMALIZED)
        return BoundingBox.from_xyxy(*self.inverse_xyxy(n.xyxy()), convention=Convention.XYWH_TOPLEFT,
                                     frame=Frame.pixel(self.src_w, self.src_h), clip=True)


def to_unit_range(image: np.ndarray) -> np.ndarray:
    if image.dtype == np.uint8:
        return image.astype(np.float32) / 255.0
    if image.dtype == np.uint16:
        return image.astype(np.float32) / 65535.0
    return image.astype(np.float32)


def intensity_stats(samples: Sequence[GroundingSample]) -> tuple[float, float]:
    """Mean and std of unit-range intensities over ``samples`` (computed in float64)."""
    total = sq = 0.0
    n = 0
    for s in samples:
        x = to_unit_range(s.image).astype(np.float64)
        total += x.sum()
        sq += (x * x).sum()
        n += x.size
    if n == 0:
        raise DataError("cannot compute intensity statistics of an empty sample list")
    mean = total / n
    return float(mean), float(math.sqrt(max(sq / n - mean * mean, 1e-12)))


def preprocess(sample: GroundingSample, image_size: int, stats: tuple[float, float] = (0.0, 1.0),
               channels: int = 1):
    """Letterbox to ``image_size``, normalize intensities, map the box alongside.

    Returns ``(image (C, S, S) float32 tensor, gt normalized CXCYWH box, Letterbox)``.
    """
    lb = Letterbox(sample.width, sample.height, image_size)
    x = to_unit_range(sample.image)
    if x.ndim == 3 and channels == 1:
        x = x @ np.array([0.299, 0.587, 0.114], dtype=np.float32)
    if x.ndim == 2:
        x = x[..., None]
    mean, std = stats
    cw, ch = lb.content
    ox, oy = lb.offset
    canvas = np.full((image_size, image_size, x.shape[2]), mean, dtype=np.float32)
    if (cw, ch) == (sample.width, sample.height):
        canvas[oy:oy + ch, ox:ox + cw] = x
    else:
        for c in range(x.shape[2]):
            im = Image.fromarray(np.ascontiguousarray(x[..., c]), mode="F").resize((cw, ch), Image.BILINEAR)
            canvas[oy:oy + ch, ox:ox + cw, c] = np.asarray(im)
    canvas = (canvas - mean) / std
    if canvas.shape[2] == 1 and channels == 3:
        canvas = np.repeat(canvas, 3, axis=2)
    image = torch.from_numpy(np.ascontiguousarray(canvas.transpose(2, 0, 1)))
    return image, lb.forward_box(sample.gt_box), lb


@dataclass
class PreparedSplit:
    """Model-ready tensors for a list of samples."""

    ids: list[str]
    images: torch.Tensor  # (N, C, S, S)
    tokens: torch.Tensor  # (N, N_l) int64
    gt: torch.Tensor  # (N, 4) normalized CXCYWH on the letterboxed canvas
    letterboxes: list[Letterbox]
    gt_pixel_xyxy: np.ndarray  # (N, 4) in each sample's original frame
    phrases: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ids)


def prepare(samples: Sequence[GroundingSample], tokenizer, image_size: int, max_text_len: int,
            stats: tuple[float, float], channels: int = 1) -> PreparedSplit:
    images, gts, lbs, toks = [], [], [], []
    for s in samples:
        img, gt, lb = preprocess(s, image_size, stats, channels)
        images.append(img)
        gts.append(gt.coords)
        lbs.append(lb)
        toks.append(tokenizer.encode(s.phrase, max_text_len))
    return PreparedSplit(
        ids=[s.id for s in samples],
        images=torch.stack(images) if images else torch.empty(0, channels, image_size, image_size),
        tokens=torch.tensor(toks, dtype=torch.long).reshape(len(samples), max_text_len),
        gt=torch.tensor(gts, dtype=torch.float32).reshape(len(samples), 4),
        letterboxes=lbs,
        gt_pixel_xyxy=np.array([s.gt_box.xyxy() for s in samples], dtype=np.float64).reshape(len(samples), 4),
        phrases=[s.phrase for s in samples],
    )
