"""Synthetic findings benchmark.

Each image holds 2-5 non-overlapping shapes on a noisy, low-contrast
background. One shape is the target. In the default "full" phrase mode the
phrase spells out every attribute ("small bright circle in the upper left");
"minimal" mode keeps only enough attributes to single the target out among
the distractors ("blob" when the type alone is enough), which makes a much
harder benchmark because the position words are often dropped. Each image is queried more than once,
with a different target per query, so that the phrase and not the image
alone decides the answer.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .data import GroundingSample, intensity_stats, make_box, write_annotations
from .errors import ConfigError, GenerationError

SHAPES = ("square", "circle", "triangle", "blob")
SIZES = ("small", "large")
INTENSITIES = ("bright", "dim")
TEXTURES = ("smooth", "speckled")
VERTICAL = ("upper", "lower")
HORIZONTAL = ("left", "central", "right")
ATTRIBUTES = ("size", "intensity", "texture", "position")


@dataclass(frozen=True)
class SyntheticConfig:
    image_size: int = 64
    n_samples: int = 100
    min_shapes: int = 2
    max_shapes: int = 5
    noise: float = 0.04
    contrast: float = 0.45
    samples_per_patient: int = 4
    queries_per_image: int = 2
    phrase_mode: str = "full"  # "full" | "minimal"
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.min_shapes <= self.max_shapes:
            raise ConfigError("need 2 <= min_shapes <= max_shapes")
        if self.image_size < 32:
            raise ConfigError("image_size must be >= 32")
        if self.phrase_mode not in ("minimal", "full"):
            raise ConfigError(f"unknown phrase_mode {self.phrase_mode!r}")
        if self.samples_per_patient < 1 or self.n_samples < 1 or self.queries_per_image < 1:
            raise ConfigError("n_samples, samples_per_patient and queries_per_image must be >= 1")
        if self.samples_per_patient % self.queries_per_image:
            raise ConfigError("samples_per_patient must be a multiple of queries_per_image "
                              "so that every query of an image stays with one patient")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class Shape:
    kind: str
    size: str
    intensity: str
    texture: str
    vertical: str
    horizontal: str
    mask: np.ndarray  # (S, S) bool, geometric footprint

    def attributes(self) -> dict:
        return {"shape": self.kind, "size": self.size, "intensity": self.intensity, "texture": self.texture,
                "position": (self.vertical, self.horizontal)}

    def bbox(self) -> tuple[int, int, int, int]:
        """Tight pixel box ``(x, y, w, h)``: every side touches a footprint pixel."""
        ys, xs = np.nonzero(self.mask)
        return int(xs.min()), int(ys.min()), int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1)


def _footprint(kind: str, side: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side]
    c = (side - 1) / 2
    if kind == "square":
        return np.ones((side, side), dtype=bool)
    if kind == "circle":
        return (xx - c) ** 2 + (yy - c) ** 2 <= (side / 2) ** 2
    if kind == "triangle":
        # apex at the top row, base on the bottom row
        frac = (yy + 0.5) / side
        return np.abs(xx - c) <= frac * side / 2
    ang = np.arctan2(yy - c, xx - c)
    phase = rng.uniform(0, 2 * np.pi, 2)
    radius = side / 2 * (0.78 + 0.12 * np.sin(2 * ang + phase[0]) + 0.1 * np.sin(3 * ang + phase[1]))
    return (xx - c) ** 2 + (yy - c) ** 2 <= radius ** 2


def _crop(mask: np.ndarray) -> np.ndarray:
    ys, xs = np.nonzero(mask)
    return mask[ys.min():ys.max() + 1, xs.min():xs.max() + 1]


def _position_of(cx: float, cy: float, size: int) -> tuple[str, str]:
    return VERTICAL[int(cy >= size / 2)], HORIZONTAL[min(2, int(3 * cx / size))]


class SyntheticGenerator:
    def __init__(self, cfg: SyntheticConfig):
        self.cfg = cfg
        s = cfg.image_size
        self.small = (max(6, round(0.14 * s)), max(7, round(0.2 * s)))
        self.large = (max(10, round(0.28 * s)), max(11, round(0.38 * s)))

    def _place(self, rng, kind, size, occupied) -> Optional[tuple[np.ndarray, float, float]]:
        s = self.cfg.image_size
        lo, hi = self.small if size == "small" else self.large
        foot = _crop(_footprint(kind, int(rng.integers(lo, hi + 1)), rng))
        fh, fw = foot.shape
        margin = max(2, s // 32)
        for _ in range(40):
            x0 = int(rng.integers(1, s - fw))
            y0 = int(rng.integers(1, s - fh))
            cx, cy = x0 + fw / 2, y0 + fh / 2
            # keep centers away from position-cell borders so labels are unambiguous
            if abs(cy - s / 2) < margin or min(abs(cx - s / 3), abs(cx - 2 * s / 3)) < margin:
                continue
            if occupied[max(0, y0 - margin):y0 + fh + margin, max(0, x0 - margin):x0 + fw + margin].any():
                continue
            mask = np.zeros((s, s), dtype=bool)
            mask[y0:y0 + fh, x0:x0 + fw] = foot
            return mask, cx, cy
        return None

    def _draw_shapes(self, rng) -> list[Shape]:
        cfg = self.cfg
        s = cfg.image_size
        for _ in range(100):
            n = int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1))
            occupied = np.zeros((s, s), dtype=bool)
            shapes = []
            for _ in range(n):
                kind = SHAPES[rng.integers(len(SHAPES))]
                size = SIZES[rng.integers(len(SIZES))]
                placed = self._place(rng, kind, size, occupied)
                if placed is None:
                    break
                mask, cx, cy = placed
                occupied |= mask
                v, h = _position_of(cx, cy, s)
                shapes.append(Shape(kind, size, INTENSITIES[rng.integers(2)], TEXTURES[rng.integers(2)], v, h, mask))
            else:
                keys = [tuple(sorted(sh.attributes().items())) for sh in shapes]
                if len(set(keys)) == len(keys):
                    return shapes
        raise GenerationError("could not lay out a scene with distinguishable shapes; "
                              "image too small or too many shapes requested")

    def _render(self, rng, shapes: list[Shape]) -> np.ndarray:
        cfg = self.cfg
        s = cfg.image_size
        yy, xx = np.mgrid[0:s, 0:s] / s
        g = rng.uniform(-1, 1, 3)
        img = 0.3 + 0.05 * (g[0] * xx + g[1] * yy) + 0.03 * np.sin(2 * np.pi * (xx + g[2]))
        for sh in shapes:
            level = cfg.contrast * (1.0 if sh.intensity == "bright" else 0.55)
            fill = np.full((s, s), level)
            if sh.texture == "speckled":
                fill *= np.where(rng.random((s, s)) < 0.35, 0.35, 1.0)
            img = np.where(sh.mask, img + fill, img)
        img = img + rng.normal(0, cfg.noise, (s, s))
        return np.clip(np.round(img * 255), 0, 255).astype(np.uint8)

    def _phrase(self, rng, target: Shape, shapes: list[Shape]) -> str:
        attrs = target.attributes()
        chosen = {"shape"}
        others = [o.attributes() for o in shapes if o is not target]

        def ambiguous():
            return any(all(o[a] == attrs[a] for a in chosen) for o in others)

        if self.cfg.phrase_mode == "full":
            chosen |= set(ATTRIBUTES)
        else:
            for a in rng.permutation(ATTRIBUTES):
                if not ambiguous():
                    break
                chosen.add(str(a))
        if ambiguous():
            raise GenerationError("phrase vocabulary cannot disambiguate target")
        words = [attrs[a] for a in ("size", "intensity", "texture") if a in chosen] + [attrs["shape"]]
        phrase = " ".join(words)
        if "position" in chosen:
            v, h = attrs["position"]
            phrase += f" in the {v} {h}"
        return phrase

    def sample(self, index: int) -> tuple[GroundingSample, list[Shape], int]:
        """Sample ``index`` with its shapes and the target's position in that list.

        Consecutive indices share an image (``queries_per_image`` of them), each
        asking for a different shape while the image has unqueried shapes left.
        """
        cfg = self.cfg
        image_index, query = divmod(index, cfg.queries_per_image)
        rng = np.random.default_rng([cfg.seed, image_index])
        shapes = self._draw_shapes(rng)
        order = rng.permutation(len(shapes))
        image = self._render(rng, shapes)
        target = int(order[query % len(shapes)])
        phrase = self._phrase(np.random.default_rng([cfg.seed, image_index, query]), shapes[target], shapes)
        s = cfg.image_size
        sid = f"syn{cfg.seed:04d}_{index:06d}"
        box = make_box(shapes[target].bbox(), s, s, sid)
        patient = f"P{cfg.seed:04d}_{index // cfg.samples_per_patient:05d}"
        return GroundingSample(sid, image, s, s, phrase, box, patient), shapes, target


def generate_synthetic(cfg: SyntheticConfig) -> tuple[list[GroundingSample], dict]:
    gen = SyntheticGenerator(cfg)
    samples = [gen.sample(i)[0] for i in range(cfg.n_samples)]
    return samples, build_manifest(cfg, samples)


def build_manifest(cfg: SyntheticConfig, samples: list[GroundingSample]) -> dict:
    mean, std = intensity_stats(samples)
    return {
        "generator": "medrpg.synthetic",
        "config": asdict(cfg),
        "seed": cfg.seed,
        "n_samples": len(samples),
        "normalization": {"mean": round(mean, 10), "std": round(std, 10), "scope": "all samples"},
        "images": {s.id: hashlib.sha256(np.ascontiguousarray(s.image).tobytes()).hexdigest() for s in samples},
    }


def manifest_bytes(manifest: dict) -> bytes:
    return (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode("utf-8")


def write_dataset(cfg: SyntheticConfig, out_dir) -> Path:
    """Generate and write images, ``annotations.jsonl`` and ``manifest.json`` into ``out_dir``."""
    out_dir = Path(out_dir)
    samples, manifest = generate_synthetic(cfg)
    ann = write_annotations(samples, out_dir)
    (out_dir / "manifest.json").write_bytes(manifest_bytes(manifest))
    return ann


def attribute_counts(samples_shapes) -> dict[str, dict[str, int]]:
    """Tally attribute values over an iterable of shape lists (for distribution checks)."""
    out: dict[str, dict[str, int]] = {}
    for shapes in samples_shapes:
        for sh in shapes:
            for k, v in sh.attributes().items():
                key = "-".join(v) if isinstance(v, tuple) else v
                out.setdefault(k, {}).setdefault(key, 0)
                out[k][key] += 1
    return out

