"""Fusion sub-network: dual dense extractors, fuse decoder, two-pass forward.

Each modality runs through its own dilated residual dense extractor at full
resolution.  A first decode pass produces a provisional fused image ``u_pre``;
the segmentation encoder looks at ``u_pre`` and its first two pyramid stages
are tapped, upsampled and fed to the cross-task attention blocks that refine
the modality features.  A second decode pass on the refined features yields
the final fused image ``u`` in [0, 1].

Both decode passes share one decoder, and the attention blocks start as exact
identities, so an untrained system returns ``u == u_pre`` bit for bit.
"""

from __future__ import annotations

import torch
from torch import nn

from ..config import Config
from ..errors import ConfigError, ShapeMismatch
from .interaction import InteractionBlock
from .segnet import FeatureMap, SegNet, SemanticTaps

__all__ = ["DilatedResidualDenseBlock", "DrdbExtractor", "FuseDecoder", "FusionSystem"]


class DilatedResidualDenseBlock(nn.Module):
    """Densely connected dilated 3x3 convs, 1x1 fusion, residual add."""

    def __init__(self, channels: int, growth: int, layers: int, dilation: int):
        super().__init__()
        self.convs = nn.ModuleList()
        width = channels
        for _ in range(layers):
            self.convs.append(
                nn.Conv2d(width, growth, 3, padding=dilation, dilation=dilation)
            )
            width += growth
        self.fuse = nn.Conv2d(width, channels, 1)
        self.act = nn.ReLU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        feats = [x]
        for conv in self.convs:
            feats.append(self.act(conv(torch.cat(feats, dim=1))))
        return x + self.fuse(torch.cat(feats, dim=1))


class DrdbExtractor(nn.Module):
    """Stem conv + dense block turning one gray plane into stride-1 features."""

    def __init__(self, channels: int = 32, growth: int = 16, layers: int = 3, dilation: int = 2):
        super().__init__()
        self.stem = nn.Conv2d(1, channels, 3, padding=1)
        self.block = DilatedResidualDenseBlock(channels, growth, layers, dilation)
        self.channels = channels

    def forward(self, x: torch.Tensor) -> FeatureMap:
        if x.dim() == 2:
            x = x.unsqueeze(0).unsqueeze(0)
        if x.dim() != 4 or x.shape[1] != 1:
            raise ShapeMismatch(f"extractor expects single-channel input, got {tuple(x.shape)}")
        return FeatureMap(self.block(self.stem(x)), 1)


class FuseDecoder(nn.Module):
    """Concatenate both feature stacks, two 3x3 convs, bounded 1-channel output."""

    def __init__(self, channels: int, widths: tuple[int, ...] = (32,)):
        super().__init__()
        if not widths:
            raise ConfigError("decoder needs at least one hidden width")
        layers: list[nn.Module] = []
        prev = 2 * channels
        for w in widths:
            layers += [nn.Conv2d(prev, w, 3, padding=1), nn.ReLU()]
            prev = w
        layers.append(nn.Conv2d(prev, 1, 3, padding=1))
        self.body = nn.Sequential(*layers)

    def forward(self, f_ir: FeatureMap, f_vis: FeatureMap) -> torch.Tensor:
        if f_ir.tensor.shape != f_vis.tensor.shape:
            raise ShapeMismatch("feature stacks differ in shape")
        return torch.sigmoid(self.body(torch.cat([f_ir.tensor, f_vis.tensor], dim=1)))


class FusionSystem(nn.Module):
    """Extractors, decoder, taps and attention blocks; seg net passed per call.

    The semantic tap projections live here (not in the segmentation
    parameter set) because they are trained during the fusion phase along
    with the attention blocks.
    """

    def __init__(self, cfg: Config):
        super().__init__()
        f = cfg.fusion
        i = cfg.interaction
        self.arrangement = i.arrangement
        self.drdb_ir = DrdbExtractor(f.channels, f.growth, f.dense_layers, f.dilation)
        self.drdb_vis = DrdbExtractor(f.channels, f.growth, f.dense_layers, f.dilation)
        self.decoder = FuseDecoder(f.channels, f.decoder_widths)
        self.taps = SemanticTaps(cfg.segnet.widths, i.tap_channels)
        self.block1 = InteractionBlock(
            f.channels, i.tap_channels, i.channels, i.heads, i.softmax_keys, i.compute_unused_tokens
        )
        self.block2 = InteractionBlock(
            f.channels, i.tap_channels, i.channels, i.heads, i.softmax_keys, i.compute_unused_tokens
        )

    def forward(
        self,
        x: torch.Tensor,
        y: torch.Tensor,
        segnet: SegNet,
        use_interaction: bool = True,
    ) -> tuple[torch.Tensor, dict]:
        """Fuse visible luma ``x`` with infrared ``y``; both (B, 1, H, W).

        Returns the fused image and a diagnostics dict (provisional image,
        taps, per-head attention norms).
        """
        if x.shape != y.shape:
            raise ShapeMismatch(f"x {tuple(x.shape)} != y {tuple(y.shape)}")
        f_vis = self.drdb_vis(x)
        f_ir = self.drdb_ir(y)
        u_pre = self.decoder(f_ir, f_vis)
        diag: dict = {"u_pre": u_pre.detach()}
        if not use_interaction:
            return u_pre, diag

        pyramid, _ = segnet.encode(u_pre.repeat(1, 3, 1, 1))
        tap1, tap2 = self.taps(pyramid, u_pre.shape[-2:])
        diag["taps"] = (tap1.tensor.detach(), tap2.tensor.detach())

        if self.arrangement == "sequential":
            r_ir, r_vis, d1 = self.block1(f_ir.tensor, f_vis.tensor, tap1.tensor)
            r_ir, r_vis, d2 = self.block2(r_ir, r_vis, tap2.tensor)
        else:  # parallel: both blocks read the original features, residuals add
            a_ir, a_vis, d1 = self.block1(f_ir.tensor, f_vis.tensor, tap1.tensor)
            b_ir, b_vis, d2 = self.block2(f_ir.tensor, f_vis.tensor, tap2.tensor)
            r_ir = a_ir + b_ir - f_ir.tensor
            r_vis = a_vis + b_vis - f_vis.tensor
        diag["attention"] = [d1, d2]

        u = self.decoder(FeatureMap(r_ir, 1), FeatureMap(r_vis, 1))
        return u, diag
