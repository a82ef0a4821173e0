"""Hierarchical transformer segmentation network with an all-MLP decoder.

Four stages of overlapping patch embedding and efficient self-attention
produce a feature pyramid at strides 4/8/16/32; the decoder linearly projects
every stage to a shared width, bilinearly upsamples to the stride-4 grid,
fuses with an MLP and predicts per-pixel class logits at input resolution.
Inputs whose sides are not multiples of 32 are reflect-padded (replicate for
very small images) and the logits cropped back.

The first two pyramid stages double as semantic taps for the fusion network:
a linear projection to a shared tap width, upsampled to the fusion working
resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from ..config import SegNetConfig
from ..errors import ShapeMismatch

__all__ = ["FeatureMap", "HierarchicalEncoder", "MlpDecoder", "SemanticTaps", "SegNet"]


@dataclass
class FeatureMap:
    """Activations plus the stride of their grid relative to the input."""

    tensor: torch.Tensor  # (B, C, H, W)
    stride: int


class OverlapPatchEmbed(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int, stride: int):
        super().__init__()
        self.proj = nn.Conv2d(in_channels, out_channels, kernel, stride, padding=kernel // 2)
        self.norm = nn.LayerNorm(out_channels)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, int, int]:
        x = self.proj(x)
        _, _, h, w = x.shape
        tokens = x.flatten(2).transpose(1, 2)
        return self.norm(tokens), h, w


class EfficientAttention(nn.Module):
    """Softmax attention with keys/values on a spatially reduced grid."""

    def __init__(self, dim: int, heads: int, sr_ratio: int):
        super().__init__()
        if dim % heads != 0:
            raise ShapeMismatch(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.proj = nn.Linear(dim, dim)
        self.sr_ratio = sr_ratio
        if sr_ratio > 1:
            self.sr = nn.Conv2d(dim, dim, kernel_size=sr_ratio, stride=sr_ratio)
            self.sr_norm = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor, h: int, w: int) -> torch.Tensor:
        b, n, c = x.shape
        q = self.q(x).reshape(b, n, self.heads, c // self.heads).transpose(1, 2)
        if self.sr_ratio > 1:
            grid = x.transpose(1, 2).reshape(b, c, h, w)
            grid = self.sr(grid)
            reduced = grid.flatten(2).transpose(1, 2)
            reduced = self.sr_norm(reduced)
        else:
            reduced = x
        kv = self.kv(reduced).reshape(b, -1, 2, self.heads, c // self.heads)
        k = kv[:, :, 0].transpose(1, 2)
        v = kv[:, :, 1].transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-2, -1) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out)


class MixFfn(nn.Module):
    """Feed-forward with a 3x3 depthwise conv between the two linear layers."""

    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.dw = nn.Conv2d(hidden, hidden, 3, padding=1, groups=hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor, h: int, w: int) -> torch.Tensor:
        b, n, _ = x.shape
        x = self.fc1(x)
        x = x.transpose(1, 2).reshape(b, -1, h, w)
        x = self.dw(x)
        x = x.flatten(2).transpose(1, 2)
        return self.fc2(self.act(x))


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, heads: int, sr_ratio: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = EfficientAttention(dim, heads, sr_ratio)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = MixFfn(dim, dim * mlp_ratio)

    def forward(self, x: torch.Tensor, h: int, w: int) -> torch.Tensor:
        x = x + self.attn(self.norm1(x), h, w)
        x = x + self.ffn(self.norm2(x), h, w)
        return x


class HierarchicalEncoder(nn.Module):
    """Four-stage pyramid encoder; input sides must be divisible by 32."""

    def __init__(self, cfg: SegNetConfig, in_channels: int = 3):
        super().__init__()
        self.cfg = cfg
        self.embeds = nn.ModuleList()
        self.stages = nn.ModuleList()
        self.norms = nn.ModuleList()
        prev = in_channels
        for i, width in enumerate(cfg.widths):
            kernel, stride = (7, 4) if i == 0 else (3, 2)
            self.embeds.append(OverlapPatchEmbed(prev, width, kernel, stride))
            self.stages.append(
                nn.ModuleList(
                    TransformerBlock(width, cfg.heads[i], cfg.sr_ratios[i], cfg.mlp_ratio)
                    for _ in range(cfg.depths[i])
                )
            )
            self.norms.append(nn.LayerNorm(width))
            prev = width

    def forward(self, x: torch.Tensor) -> list[FeatureMap]:
        if x.dim() != 4 or x.shape[1] != 3:
            raise ShapeMismatch(f"encoder expects (B, 3, H, W), got {tuple(x.shape)}")
        if x.shape[-2] % 32 or x.shape[-1] % 32:
            raise ShapeMismatch("encoder input sides must be divisible by 32 (pad first)")
        maps = []
        stride = 1
        for embed, blocks, norm in zip(self.embeds, self.stages, self.norms):
            tokens, h, w = embed(x)
            for block in blocks:
                tokens = block(tokens, h, w)
            tokens = norm(tokens)
            x = tokens.transpose(1, 2).reshape(x.shape[0], -1, h, w)
            stride *= 4 if stride == 1 else 2
            maps.append(FeatureMap(x, stride))
        return maps


class MlpDecoder(nn.Module):
    """Project every stage to one width, fuse on the stride-4 grid, classify."""

    def __init__(self, widths: tuple[int, ...], decoder_width: int, num_classes: int):
        super().__init__()
        self.projs = nn.ModuleList(nn.Linear(w, decoder_width) for w in widths)
        self.fuse = nn.Linear(len(widths) * decoder_width, decoder_width)
        self.act = nn.ReLU()
        self.classify = nn.Linear(decoder_width, num_classes)

    def forward(self, pyramid: list[FeatureMap], out_hw: tuple[int, int]) -> torch.Tensor:
        target = pyramid[0].tensor.shape[-2:]
        planes = []
        for fmap, proj in zip(pyramid, self.projs):
            t = fmap.tensor
            b, c, h, w = t.shape
            t = proj(t.flatten(2).transpose(1, 2)).transpose(1, 2).reshape(b, -1, h, w)
            if (h, w) != target:
                t = F.interpolate(t, size=target, mode="bilinear", align_corners=False)
            planes.append(t)
        fused = torch.cat(planes, dim=1)
        b, c, h, w = fused.shape
        tokens = fused.flatten(2).transpose(1, 2)
        tokens = self.classify(self.act(self.fuse(tokens)))
        logits = tokens.transpose(1, 2).reshape(b, -1, h, w)
        return F.interpolate(logits, size=out_hw, mode="bilinear", align_corners=False)


class SemanticTaps(nn.Module):
    """Project the stride-4 and stride-8 stages to the fusion tap width."""

    def __init__(self, widths: tuple[int, ...], tap_channels: int):
        super().__init__()
        self.proj1 = nn.Linear(widths[0], tap_channels)
        self.proj2 = nn.Linear(widths[1], tap_channels)

    def forward(self, pyramid: list[FeatureMap], target_hw: tuple[int, int]) -> tuple[FeatureMap, FeatureMap]:
        taps = []
        for fmap, proj in ((pyramid[0], self.proj1), (pyramid[1], self.proj2)):
            t = fmap.tensor
            b, c, h, w = t.shape
            t = proj(t.flatten(2).transpose(1, 2)).transpose(1, 2).reshape(b, -1, h, w)
            t = F.interpolate(t, size=target_hw, mode="bilinear", align_corners=False)
            taps.append(FeatureMap(t, 1))
        return taps[0], taps[1]


def pad_to_multiple(x: torch.Tensor, multiple: int = 32) -> tuple[torch.Tensor, tuple[int, int]]:
    """Reflect-pad (B, C, H, W) up to the next multiple; returns original size."""
    h, w = x.shape[-2:]
    ph = (multiple - h % multiple) % multiple
    pw = (multiple - w % multiple) % multiple
    if ph == 0 and pw == 0:
        return x, (h, w)
    top, left = ph // 2, pw // 2
    pad = (left, pw - left, top, ph - top)
    # reflect requires pad < side; fall back to replicate for tiny inputs
    mode = "reflect" if max(pad) < min(h, w) else "replicate"
    return F.pad(x, pad, mode=mode), (h, w)


class SegNet(nn.Module):
    """Encoder + decoder wrapper handling the pad-and-crop policy."""

    def __init__(self, cfg: SegNetConfig, num_classes: int):
        super().__init__()
        self.encoder = HierarchicalEncoder(cfg)
        self.decoder = MlpDecoder(cfg.widths, cfg.decoder_width, num_classes)
        self.num_classes = num_classes

    def encode(self, x: torch.Tensor) -> tuple[list[FeatureMap], tuple[int, int]]:
        padded, orig = pad_to_multiple(x)
        return self.encoder(padded), orig

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        padded, (h, w) = pad_to_multiple(x)
        pyramid = self.encoder(padded)
        logits = self.decoder(pyramid, padded.shape[-2:])
        ph, pw = padded.shape[-2:]
        top = (ph - h) // 2
        left = (pw - w) // 2
        return logits[..., top : top + h, left : left + w]
