"""Cross-task attention bridging fusion features and semantic features.

Feature maps are flattened to token matrices (one token per pixel) and every
source is embedded twice - a semantic token and a modality token per pixel.
Attention is bilinear without softmax: keys and values of a source are
collapsed into a small per-head global context ``G = K^T V / mn``, which
queries then read out.  Two directions run in parallel:

* semantic queries attend into each modality's context (seg -> ir, seg -> vis),
* each modality's queries attend into the semantic context (ir -> seg,
  vis -> seg).

Per modality the two readouts are concatenated and passed through a two-layer
MLP whose final layer starts at zero, so an untrained block is exactly the
identity on its inputs (residual connection).
"""

from __future__ import annotations

import torch
from torch import nn

from ..errors import ConfigError, ShapeMismatch

__all__ = ["TokenEmbed", "InteractionBlock", "global_context", "tokens_from_map", "tokens_to_map"]


def tokens_from_map(fmap: torch.Tensor) -> torch.Tensor:
    """(B, C, H, W) -> (B, H*W, C) token matrix."""
    if fmap.dim() != 4:
        raise ShapeMismatch(f"expected (B, C, H, W), got {tuple(fmap.shape)}")
    b, c, h, w = fmap.shape
    return fmap.reshape(b, c, h * w).transpose(1, 2)


def tokens_to_map(tokens: torch.Tensor, hw: tuple[int, int]) -> torch.Tensor:
    b, n, c = tokens.shape
    h, w = hw
    if n != h * w:
        raise ShapeMismatch(f"{n} tokens cannot fill a {h}x{w} map")
    return tokens.transpose(1, 2).reshape(b, c, h, w)


def _split_heads(tokens: torch.Tensor, heads: int) -> torch.Tensor:
    b, n, c = tokens.shape
    if c % heads != 0:
        raise ConfigError(f"channels {c} not divisible by heads {heads}")
    return tokens.reshape(b, n, heads, c // heads).transpose(1, 2)  # (B, h, N, C/h)


def _merge_heads(tokens: torch.Tensor) -> torch.Tensor:
    b, h, n, ch = tokens.shape
    return tokens.transpose(1, 2).reshape(b, n, h * ch)


def global_context(
    keys: torch.Tensor,
    values: torch.Tensor,
    heads: int = 1,
    softmax_keys: bool = False,
) -> torch.Tensor:
    """Per-head context ``K^T V`` over tokens, (B, h, C/h, C/h).

    Default normalization divides by the token count; with ``softmax_keys``
    the keys are instead softmax-normalized along the token axis (which
    already sums to one, so no extra scale is applied).
    """
    if keys.shape != values.shape:
        raise ShapeMismatch(f"keys {tuple(keys.shape)} != values {tuple(values.shape)}")
    k = _split_heads(keys, heads)
    v = _split_heads(values, heads)
    if softmax_keys:
        k = torch.softmax(k, dim=2)
        return k.transpose(-2, -1) @ v
    return k.transpose(-2, -1) @ v / k.shape[2]


class TokenEmbed(nn.Module):
    """Two linear channel embeddings per source: semantic and modality tokens."""

    def __init__(self, in_channels: int, channels: int):
        super().__init__()
        self.semantic = nn.Linear(in_channels, channels)
        self.modality = nn.Linear(in_channels, channels)

    def forward(self, fmap: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        tokens = tokens_from_map(fmap)
        return self.semantic(tokens), self.modality(tokens)


class InteractionBlock(nn.Module):
    """One bridge block refining (ir, vis) fusion features with a semantic tap."""

    def __init__(
        self,
        modality_channels: int,
        semantic_channels: int,
        channels: int = 32,
        heads: int = 4,
        softmax_keys: bool = False,
        compute_unused_tokens: bool = False,
        activation: str = "gelu",
    ):
        super().__init__()
        if channels % heads != 0:
            raise ConfigError(f"channels {channels} not divisible by heads {heads}")
        self.heads = heads
        self.softmax_keys = softmax_keys
        self.compute_unused_tokens = compute_unused_tokens

        self.embed_ir = TokenEmbed(modality_channels, channels)
        self.embed_vis = TokenEmbed(modality_channels, channels)
        self.embed_seg = TokenEmbed(semantic_channels, channels)

        self.q_seg = nn.Linear(channels, channels)
        self.k_ir = nn.Linear(channels, channels)
        self.v_ir = nn.Linear(channels, channels)
        self.k_vis = nn.Linear(channels, channels)
        self.v_vis = nn.Linear(channels, channels)
        self.q_ir = nn.Linear(channels, channels)
        self.q_vis = nn.Linear(channels, channels)
        self.k_seg = nn.Linear(channels, channels)
        self.v_seg = nn.Linear(channels, channels)

        act: nn.Module = nn.GELU() if activation == "gelu" else nn.Identity()
        self.mlp_ir = nn.Sequential(
            nn.Linear(2 * channels, channels), act, nn.Linear(channels, modality_channels)
        )
        act2: nn.Module = nn.GELU() if activation == "gelu" else nn.Identity()
        self.mlp_vis = nn.Sequential(
            nn.Linear(2 * channels, channels), act2, nn.Linear(channels, modality_channels)
        )
        # Residual identity at initialization: the final projections start at zero.
        for mlp in (self.mlp_ir, self.mlp_vis):
            nn.init.zeros_(mlp[-1].weight)
            nn.init.zeros_(mlp[-1].bias)

    def semantic_query_attention(
        self, seg_sem: torch.Tensor, ir_mod: torch.Tensor, vis_mod: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Semantic tokens query each modality's global context."""
        q = _split_heads(self.q_seg(seg_sem), self.heads)
        g_ir = global_context(self.k_ir(ir_mod), self.v_ir(ir_mod), self.heads, self.softmax_keys)
        g_vis = global_context(self.k_vis(vis_mod), self.v_vis(vis_mod), self.heads, self.softmax_keys)
        return _merge_heads(q @ g_ir), _merge_heads(q @ g_vis)

    def modality_query_attention(
        self, seg_sem: torch.Tensor, ir_mod: torch.Tensor, vis_mod: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Each modality's tokens query the semantic global context."""
        g_seg = global_context(self.k_seg(seg_sem), self.v_seg(seg_sem), self.heads, self.softmax_keys)
        m_ir = _split_heads(self.q_ir(ir_mod), self.heads) @ g_seg
        m_vis = _split_heads(self.q_vis(vis_mod), self.heads) @ g_seg
        return _merge_heads(m_ir), _merge_heads(m_vis)

    def forward(
        self,
        f_ir: torch.Tensor,
        f_vis: torch.Tensor,
        f_seg: torch.Tensor,
    ) -> tuple[torch.Tensor, torch.Tensor, dict]:
        if f_ir.shape != f_vis.shape:
            raise ShapeMismatch(f"ir {tuple(f_ir.shape)} != vis {tuple(f_vis.shape)}")
        if f_ir.shape[-2:] != f_seg.shape[-2:]:
            raise ShapeMismatch("semantic tap spatial size differs from fusion features")
        hw = f_ir.shape[-2:]

        seg_sem, seg_mod = self.embed_seg(f_seg)
        ir_sem, ir_mod = None, None
        vis_sem, vis_mod = None, None
        if self.compute_unused_tokens:
            ir_sem, ir_mod = self.embed_ir(f_ir)
            vis_sem, vis_mod = self.embed_vis(f_vis)
        else:
            ir_mod = self.embed_ir.modality(tokens_from_map(f_ir))
            vis_mod = self.embed_vis.modality(tokens_from_map(f_vis))
            seg_mod = None  # only the semantic half of the seg source is consumed

        s_ir, s_vis = self.semantic_query_attention(seg_sem, ir_mod, vis_mod)
        m_ir, m_vis = self.modality_query_attention(seg_sem, ir_mod, vis_mod)

        d_ir = self.mlp_ir(torch.cat([s_ir, m_ir], dim=-1))
        d_vis = self.mlp_vis(torch.cat([s_vis, m_vis], dim=-1))
        out_ir = f_ir + tokens_to_map(d_ir, hw)
        out_vis = f_vis + tokens_to_map(d_vis, hw)

        with torch.no_grad():
            diag = {
                "s_ir_head_norms": _head_norms(s_ir, self.heads),
                "s_vis_head_norms": _head_norms(s_vis, self.heads),
                "m_ir_head_norms": _head_norms(m_ir, self.heads),
                "m_vis_head_norms": _head_norms(m_vis, self.heads),
            }
        _ = (ir_sem, vis_sem, seg_mod)
        return out_ir, out_vis, diag


def _head_norms(tokens: torch.Tensor, heads: int) -> list[float]:
    per_head = _split_heads(tokens, heads)
    return [float(per_head[:, h].norm()) for h in range(heads)]
