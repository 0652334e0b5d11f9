"""Small builders shared by the engine, CLI and acceptance tests."""

import numpy as np
import torch
from torch import nn

from medrpg.data import Letterbox, PreparedSplit, intensity_stats, prepare
from medrpg.model import ModelConfig
from medrpg.synthetic import SyntheticConfig, generate_synthetic
from medrpg.tokenizer import WordTokenizer


def toy_splits(n_train, n_val=8, seed=0, **model_overrides):
    """Synthetic train/val splits plus a matching toy model config and vocab."""
    samples, _ = generate_synthetic(SyntheticConfig(n_samples=n_train + n_val, seed=seed))
    train, val = samples[:n_train], samples[n_train:]
    tok = WordTokenizer.from_corpus(s.phrase for s in train)
    stats = intensity_stats(train)
    cfg = ModelConfig.toy(text_vocab_size=tok.vocab_size, **model_overrides)
    splits = [prepare(x, tok, cfg.image_size, cfg.max_text_len, stats) for x in (train, val)]
    return splits[0], splits[1], cfg, tok, stats


class FixedBoxes(nn.Module):
    """Stands in for ``MedRPG``: returns preset normalized CXCYWH boxes in order."""

    def __init__(self, boxes):
        super().__init__()
        self.register_buffer("boxes", torch.as_tensor(boxes, dtype=torch.float32))
        self.cursor = 0

    def forward(self, images, tokens):
        out = self.boxes[self.cursor:self.cursor + len(images)]
        self.cursor += len(images)
        return out, None


# IoU against gt (0, 0, 10, 10) of a full-width box of height h, anchored at the top, is h / 10.
FIXTURE_HEIGHTS = (6.0, 4.0, 5.5)


def fixture_split(heights=FIXTURE_HEIGHTS, size=10):
    n = len(heights)
    return PreparedSplit(
        ids=[f"f{i}" for i in range(n)],
        images=torch.zeros(n, 1, size, size),
        tokens=torch.zeros(n, 4, dtype=torch.long),
        gt=torch.tensor([[0.5, 0.5, 1.0, 1.0]] * n),
        letterboxes=[Letterbox(size, size, size) for _ in range(n)],
        gt_pixel_xyxy=np.array([[0.0, 0.0, size, size]] * n),
    )


def fixture_model(heights=FIXTURE_HEIGHTS, size=10):
    return FixedBoxes([[0.5, h / (2 * size), 1.0, h / size] for h in heights])


def fixture_records(heights=FIXTURE_HEIGHTS, size=10):
    return [{"id": f"f{i}", "pred_xyxy": [0.0, 0.0, float(size), h], "gt_xyxy": [0.0, 0.0, float(size), float(size)]}
            for i, h in enumerate(heights)]
