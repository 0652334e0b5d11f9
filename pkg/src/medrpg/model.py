"""Grounding network: vision encoder, phrase encoder, fusion transformer, box head.

Fused sequences are laid out as ``[visual tokens | text tokens | REG]``. All
tensors are token-major, so ``FusedOutput.H`` has shape ``(B, N_vl, C_vl)``
(column ``j`` of the ``C_vl x N_vl`` embedding matrix is ``H[:, j]``).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, InputError, ShapeError
from .geometry import BoundingBox, Convention, cxcywh_to_xyxy_t


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    in_channels: int = 1
    vision_backbone_channels: int = 64
    vision_blocks: int = 3
    vision_stride: int = 8
    vision_tf_layers: int = 2
    vision_width: int = 64
    vision_heads: int = 4
    text_vocab_size: int = 64
    text_tf_layers: int = 2
    text_width: int = 64
    text_heads: int = 4
    max_text_len: int = 12
    fused_width: int = 64
    vlt_layers: int = 2
    vlt_heads: int = 4
    ffn_mult: int = 2
    mlp_hidden: int = 64
    dropout: float = 0.1
    norm_first: bool = True

    def __post_init__(self):
        s = self.vision_stride
        if s < 1 or s & (s - 1):
            raise ConfigError(f"vision_stride must be a power of two, got {s}")
        if self.image_size % s:
            raise ConfigError(f"image_size {self.image_size} not divisible by vision_stride {s}")
        for width, heads, name in ((self.fused_width, self.vlt_heads, "fused_width"),
                                   (self.vision_width, self.vision_heads, "vision_width"),
                                   (self.text_width, self.text_heads, "text_width")):
            if width % heads:
                raise ConfigError(f"{name}={width} not divisible by its head count {heads}")
        if self.max_text_len < 3:
            raise ConfigError("max_text_len must be >= 3")

    @property
    def grid_shape(self) -> tuple[int, int]:
        g = self.image_size // self.vision_stride
        return (g, g)

    @property
    def n_visual(self) -> int:
        r, c = self.grid_shape
        return r * c

    @property
    def n_fused(self) -> int:
        return self.n_visual + self.max_text_len + 1

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        return replace(cls(), **overrides)

    @classmethod
    def paper(cls, **overrides) -> "ModelConfig":
        base = cls(image_size=640, in_channels=3, vision_backbone_channels=2048, vision_blocks=5,
                   vision_stride=32, vision_tf_layers=6, vision_width=256, vision_heads=8,
                   text_vocab_size=30522, text_tf_layers=12, text_width=768, text_heads=12,
                   max_text_len=20, fused_width=256, vlt_layers=6, vlt_heads=8, ffn_mult=8,
                   mlp_hidden=256, dropout=0.1)
        return replace(base, **overrides)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class VisualFeatureGrid:
    tokens: torch.Tensor  # (B, N_v, C_v), row-major over the grid
    grid_shape: tuple[int, int]


@dataclass
class TextFeatures:
    tokens: torch.Tensor  # (B, N_l, C_l); position 0 is [CLS]
    pad_mask: torch.Tensor  # (B, N_l), True where padded


@dataclass
class FusedOutput:
    H: torch.Tensor  # (B, N_vl, C_vl)
    A: torch.Tensor  # (B, N_vl, N_vl) head-averaged attention of the last fusion layer
    key_pad_mask: torch.Tensor  # (B, N_vl)
    grid_shape: tuple[int, int]
    n_text: int

    @property
    def n_visual(self) -> int:
        return self.grid_shape[0] * self.grid_shape[1]

    @property
    def cls_index(self) -> int:
        return self.n_visual

    @property
    def reg_index(self) -> int:
        return self.n_visual + self.n_text

    @property
    def H_v(self) -> torch.Tensor:
        return self.H[:, :self.n_visual]

    @property
    def H_l(self) -> torch.Tensor:
        return self.H[:, self.n_visual:self.reg_index]

    @property
    def h_cls(self) -> torch.Tensor:
        return self.H[:, self.cls_index]

    @property
    def h_reg(self) -> torch.Tensor:
        return self.H[:, self.reg_index]


class SelfAttention(nn.Module):
    """Multi-head self-attention that also returns head-averaged probabilities.

    The returned probabilities are taken before attention dropout, and masked
    keys get exactly zero weight.
    """

    def __init__(self, width: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, key_pad_mask: Optional[torch.Tensor] = None):
        b, n, c = x.shape
        q, k, v = self.qkv(x).view(b, n, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        logits = q @ k.transpose(-2, -1) / math.sqrt(c // self.heads)
        if key_pad_mask is not None:
            logits = logits.masked_fill(key_pad_mask[:, None, None, :], float("-inf"))
        probs = logits.softmax(dim=-1)
        out = (self.drop(probs) @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out), probs.mean(dim=1)


class EncoderLayer(nn.Module):
    """Transformer encoder layer, pre-norm or post-norm."""

    def __init__(self, width: int, heads: int, ffn_mult: int, dropout: float, norm_first: bool = True):
        super().__init__()
        self.norm_first = norm_first
        self.attn = SelfAttention(width, heads, dropout)
        self.ffn = nn.Sequential(nn.Linear(width, ffn_mult * width), nn.GELU(), nn.Dropout(dropout),
                                 nn.Linear(ffn_mult * width, width))
        self.norm1 = nn.LayerNorm(width)
        self.norm2 = nn.LayerNorm(width)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, key_pad_mask=None):
        if self.norm_first:
            a, probs = self.attn(self.norm1(x), key_pad_mask)
            x = x + self.drop(a)
            return x + self.drop(self.ffn(self.norm2(x))), probs
        a, probs = self.attn(x, key_pad_mask)
        x = self.norm1(x + self.drop(a))
        x = self.norm2(x + self.drop(self.ffn(x)))
        return x, probs


class Encoder(nn.Module):
    """Stack of encoder layers; pre-norm stacks end with a LayerNorm."""

    def __init__(self, layers: int, width: int, heads: int, ffn_mult: int, dropout: float, norm_first: bool = True):
        super().__init__()
        self.layers = nn.ModuleList(EncoderLayer(width, heads, ffn_mult, dropout, norm_first) for _ in range(layers))
        self.final_norm = nn.LayerNorm(width) if norm_first and layers else nn.Identity()

    def forward(self, x, key_pad_mask=None):
        probs = None
        for layer in self.layers:
            x, probs = layer(x, key_pad_mask)
        return self.final_norm(x), probs


def sincos_2d(rows: int, cols: int, width: int) -> torch.Tensor:
    """2-D sine/cosine table ``(rows * cols, width)``, row-major; initial value for grid position embeddings."""
    quarter = width // 4
    span = math.log2(max(rows, cols, 2))
    freq = 2.0 ** (torch.arange(quarter, dtype=torch.float64) * span / max(quarter, 1))
    ys = (torch.arange(rows, dtype=torch.float64) + 0.5) / rows * math.pi
    xs = (torch.arange(cols, dtype=torch.float64) + 0.5) / cols * math.pi
    y = ys[:, None, None] * freq
    x = xs[None, :, None] * freq
    y, x = y.expand(rows, cols, quarter), x.expand(rows, cols, quarter)
    table = torch.cat([y.sin(), y.cos(), x.sin(), x.cos()], dim=-1).reshape(rows * cols, 4 * quarter)
    out = torch.zeros(rows * cols, width, dtype=torch.float64)
    out[:, :4 * quarter] = table
    return out.float()


def _groups(ch: int) -> int:
    return math.gcd(8, ch)


class ResidualBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.norm1 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.short = None
        if stride != 1 or cin != cout:
            self.short = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.GroupNorm(_groups(cout), cout))

    def forward(self, x):
        y = F.relu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return F.relu(y + (x if self.short is None else self.short(x)))


class VisionEncoder(nn.Module):
    """Residual conv stack (total stride ``vision_stride``), 1x1 projection, transformer."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        n_down = int(math.log2(cfg.vision_stride))
        n_blocks = max(cfg.vision_blocks, n_down, 1)
        top = cfg.vision_backbone_channels
        widths = [max(16, top >> (n_blocks - 1 - i)) for i in range(n_blocks)]
        stem = widths[0] // 2 if widths[0] >= 32 else widths[0]
        self.stem = nn.Sequential(nn.Conv2d(cfg.in_channels, stem, 3, 1, 1, bias=False),
                                  nn.GroupNorm(_groups(stem), stem), nn.ReLU())
        blocks, cin = [], stem
        for i, w in enumerate(widths):
            blocks.append(ResidualBlock(cin, w, 2 if i < n_down else 1))
            cin = w
        self.backbone = nn.Sequential(*blocks)
        self.proj = nn.Conv2d(cin, cfg.vision_width, 1)
        self.pos = nn.Parameter(sincos_2d(*cfg.grid_shape, cfg.vision_width))
        self.transformer = Encoder(cfg.vision_tf_layers, cfg.vision_width, cfg.vision_heads, cfg.ffn_mult,
                                   cfg.dropout, cfg.norm_first)
        self.cfg = cfg

    def forward(self, images: torch.Tensor) -> VisualFeatureGrid:
        cfg = self.cfg
        expected = (cfg.in_channels, cfg.image_size, cfg.image_size)
        if images.dim() != 4 or tuple(images.shape[1:]) != expected:
            raise ShapeError(f"expected images of shape (B, {expected[0]}, {expected[1]}, {expected[2]}), "
                             f"got {tuple(images.shape)}")
        f = self.proj(self.backbone(self.stem(images)))
        tokens = f.flatten(2).transpose(1, 2) + self.pos
        tokens, _ = self.transformer(tokens)
        return VisualFeatureGrid(tokens, cfg.grid_shape)


class TextEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.embed = nn.Embedding(cfg.text_vocab_size, cfg.text_width, padding_idx=0)
        self.pos = nn.Parameter(torch.randn(cfg.max_text_len, cfg.text_width) * 0.02)
        self.norm = nn.LayerNorm(cfg.text_width)
        self.transformer = Encoder(cfg.text_tf_layers, cfg.text_width, cfg.text_heads, cfg.ffn_mult, cfg.dropout, cfg.norm_first)
        self.cfg = cfg

    def forward(self, ids: torch.Tensor) -> TextFeatures:
        if ids.dim() != 2 or ids.shape[1] != self.cfg.max_text_len:
            raise ShapeError(f"expected ids of shape (B, {self.cfg.max_text_len}), got {tuple(ids.shape)}")
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= self.cfg.text_vocab_size):
            raise InputError(f"token id outside vocabulary [0, {self.cfg.text_vocab_size})")
        pad = ids == 0
        x = self.norm(self.embed(ids) + self.pos)
        x, _ = self.transformer(x, pad)
        return TextFeatures(x, pad)


class FusionTransformer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.vis_proj = nn.Linear(cfg.vision_width, cfg.fused_width)
        self.txt_proj = nn.Linear(cfg.text_width, cfg.fused_width)
        self.reg_token = nn.Parameter(torch.randn(cfg.fused_width) * 0.02)
        pos = torch.randn(cfg.n_fused, cfg.fused_width) * 0.02
        pos[:cfg.n_visual] = sincos_2d(*cfg.grid_shape, cfg.fused_width)
        self.pos = nn.Parameter(pos)
        self.transformer = Encoder(cfg.vlt_layers, cfg.fused_width, cfg.vlt_heads, cfg.ffn_mult, cfg.dropout, cfg.norm_first)
        self.cfg = cfg

    def forward(self, vis: VisualFeatureGrid, txt: TextFeatures) -> FusedOutput:
        cfg = self.cfg
        if vis.tokens.shape[-1] != cfg.vision_width or txt.tokens.shape[-1] != cfg.text_width:
            raise ShapeError(f"feature widths {vis.tokens.shape[-1]}/{txt.tokens.shape[-1]} do not match "
                             f"config {cfg.vision_width}/{cfg.text_width}")
        b = vis.tokens.shape[0]
        reg = self.reg_token.expand(b, 1, -1)
        x = torch.cat([self.vis_proj(vis.tokens), self.txt_proj(txt.tokens), reg], dim=1) + self.pos
        mask = torch.cat([torch.zeros(b, cfg.n_visual, dtype=torch.bool, device=x.device), txt.pad_mask,
                          torch.zeros(b, 1, dtype=torch.bool, device=x.device)], dim=1)
        H, A = self.transformer(x, mask)
        if A is None:
            keep = (~mask).to(x.dtype)
            A = (keep / keep.sum(-1, keepdim=True))[:, None, :].expand(b, x.shape[1], -1)
        return FusedOutput(H, A, mask, vis.grid_shape, txt.tokens.shape[1])


class BoxHead(nn.Module):
    """3-layer MLP emitting sigmoid-squashed normalized (cx, cy, w, h)."""

    def __init__(self, width: int, hidden: int):
        super().__init__()
        self.layers = nn.Sequential(nn.Linear(width, hidden), nn.ReLU(), nn.Linear(hidden, hidden), nn.ReLU(),
                                    nn.Linear(hidden, 4))

    def forward(self, h_reg):
        return self.layers(h_reg).sigmoid()


class MedRPG(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.vision = VisionEncoder(cfg)
        self.text = TextEncoder(cfg)
        self.fusion = FusionTransformer(cfg)
        self.head = BoxHead(cfg.fused_width, cfg.mlp_hidden)

    def encode_image(self, images: torch.Tensor) -> VisualFeatureGrid:
        return self.vision(images)

    def encode_phrase(self, ids: torch.Tensor) -> TextFeatures:
        return self.text(ids)

    def fuse(self, vis: VisualFeatureGrid, txt: TextFeatures) -> FusedOutput:
        return self.fusion(vis, txt)

    def predict(self, h_reg: torch.Tensor) -> torch.Tensor:
        return self.head(h_reg)

    def forward(self, images: torch.Tensor, ids: torch.Tensor) -> tuple[torch.Tensor, FusedOutput]:
        fused = self.fuse(self.encode_image(images), self.encode_phrase(ids))
        return self.predict(fused.h_reg), fused

    def param_groups(self) -> dict[str, list[nn.Parameter]]:
        """Parameters split into the vision / text / fusion optimizer groups."""
        return {
            "vision": list(self.vision.parameters()),
            "text": list(self.text.parameters()),
            "vlt": list(self.fusion.parameters()) + list(self.head.parameters()),
        }


def boxes_from_tensor(pred: torch.Tensor) -> list[BoundingBox]:
    """Wrap ``(B, 4)`` normalized CXCYWH predictions as boxes clipped to the unit frame."""
    xyxy = cxcywh_to_xyxy_t(pred.detach().double()).tolist()
    return [BoundingBox.from_xyxy(*row, convention=Convention.CXCYWH, clip=True) for row in xyxy]


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def save_checkpoint(path, model: MedRPG, vocab: list[str], **extra) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"model_config": model.cfg.to_dict(), "state_dict": model.state_dict(), "vocab": vocab, **extra},
               path)
    return path


def load_checkpoint(path, expected: Optional[ModelConfig] = None) -> tuple[MedRPG, dict]:
    """Rebuild a model from a checkpoint; ``expected`` must match the stored config if given."""
    blob = torch.load(Path(path), map_location="cpu", weights_only=True)
    cfg = ModelConfig.from_dict(blob["model_config"])
    if expected is not None and expected != cfg:
        diff = {k: (v, getattr(cfg, k)) for k, v in expected.to_dict().items() if getattr(cfg, k) != v}
        raise ConfigError(f"checkpoint config mismatch (expected, stored): {diff}")
    model = MedRPG(cfg)
    model.load_state_dict(blob["state_dict"], strict=True)
    model.eval()
    return model, blob
