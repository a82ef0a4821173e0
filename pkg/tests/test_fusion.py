"""Fusion sub-network: dense blocks, decoder and the two-pass forward."""

from __future__ import annotations

import numpy as np
import pytest
import torch

from fuseseg.config import Config, desk_config
from fuseseg.errors import ShapeMismatch
from fuseseg.models.fusion import (
    DilatedResidualDenseBlock,
    DrdbExtractor,
    FuseDecoder,
    FusionSystem,
)
from fuseseg.models.segnet import SegNet


def small_config() -> Config:
    cfg = desk_config()
    cfg.fusion.channels = 8
    cfg.fusion.growth = 4
    cfg.fusion.dense_layers = 2
    cfg.interaction.channels = 8
    cfg.interaction.heads = 2
    cfg.interaction.tap_channels = 8
    cfg.segnet.widths = (8, 16, 32, 64)
    cfg.segnet.depths = (1, 1, 1, 1)
    return cfg


def build(cfg: Config) -> tuple[FusionSystem, SegNet]:
    torch.manual_seed(cfg.seed)
    return FusionSystem(cfg), SegNet(cfg.segnet, cfg.num_classes)


class TestDenseBlock:
    def test_preserves_shape_with_residual(self):
        block = DilatedResidualDenseBlock(8, growth=4, layers=3, dilation=2)
        x = torch.rand(2, 8, 20, 20)
        assert block(x).shape == x.shape

    def test_zeroed_block_reduces_to_residual_path(self):
        block = DilatedResidualDenseBlock(8, growth=4, layers=2, dilation=2)
        with torch.no_grad():
            for p in block.parameters():
                p.zero_()
        x = torch.rand(1, 8, 12, 12)
        assert torch.equal(block(x), x)

    def test_dilation_grows_receptive_field(self):
        # a centered impulse must influence pixels 2 steps away with dilation 2
        block = DilatedResidualDenseBlock(1, growth=1, layers=1, dilation=2)
        with torch.no_grad():
            for p in block.parameters():
                p.fill_(0.1)
        x = torch.zeros(1, 1, 9, 9)
        x[0, 0, 4, 4] = 1.0
        with torch.no_grad():
            out = block(x) - x  # remove the residual copy
        assert float(out[0, 0, 4, 2].abs()) > 0


class TestExtractorAndDecoder:
    def test_extractor_requires_single_channel(self):
        ext = DrdbExtractor(8, 4, 2, 2)
        with pytest.raises(ShapeMismatch):
            ext(torch.rand(1, 3, 16, 16))

    def test_extractor_feature_shape(self):
        ext = DrdbExtractor(8, 4, 2, 2)
        fmap = ext(torch.rand(2, 1, 24, 20))
        assert fmap.tensor.shape == (2, 8, 24, 20)
        assert fmap.stride == 1

    def test_decoder_output_in_unit_range(self):
        ext = DrdbExtractor(8, 4, 2, 2)
        dec = FuseDecoder(8, (8,))
        with torch.no_grad():
            u = dec(ext(torch.rand(1, 1, 16, 16)), ext(torch.rand(1, 1, 16, 16)))
        assert u.shape == (1, 1, 16, 16)
        assert float(u.min()) >= 0.0 and float(u.max()) <= 1.0


class TestFusionSystem:
    def test_interaction_disabled_equals_enabled_at_init_bitwise(self):
        cfg = small_config()
        fusion, segnet = build(cfg)
        x, y = torch.rand(2, 1, 96, 96), torch.rand(2, 1, 96, 96)
        with torch.no_grad():
            u_off, _ = fusion(x, y, segnet, use_interaction=False)
            u_on, diag = fusion(x, y, segnet, use_interaction=True)
        assert torch.equal(u_off, u_on)
        assert torch.equal(diag["u_pre"], u_on)

    def test_interaction_changes_output_once_blocks_are_nonzero(self):
        cfg = small_config()
        fusion, segnet = build(cfg)
        with torch.no_grad():
            for blk in (fusion.block1, fusion.block2):
                for mlp in (blk.mlp_ir, blk.mlp_vis):
                    mlp[-1].weight.uniform_(-0.2, 0.2)
                    mlp[-1].bias.uniform_(-0.2, 0.2)
        x, y = torch.rand(1, 1, 96, 96), torch.rand(1, 1, 96, 96)
        with torch.no_grad():
            u_off, _ = fusion(x, y, segnet, use_interaction=False)
            u_on, _ = fusion(x, y, segnet, use_interaction=True)
        assert not torch.equal(u_off, u_on)

    def test_two_pass_diagnostics_present(self):
        cfg = small_config()
        fusion, segnet = build(cfg)
        x, y = torch.rand(1, 1, 96, 96), torch.rand(1, 1, 96, 96)
        _, diag = fusion(x, y, segnet)
        assert set(diag) >= {"u_pre", "taps", "attention"}
        assert len(diag["attention"]) == 2
        assert diag["taps"][0].shape[-2:] == (96, 96)

    def test_parallel_arrangement_also_identity_at_init(self):
        cfg = small_config()
        cfg.interaction.arrangement = "parallel"
        fusion, segnet = build(cfg)
        x, y = torch.rand(1, 1, 64, 64), torch.rand(1, 1, 64, 64)
        with torch.no_grad():
            u_off, _ = fusion(x, y, segnet, use_interaction=False)
            u_on, _ = fusion(x, y, segnet, use_interaction=True)
        assert torch.equal(u_off, u_on)

    def test_odd_sizes_pass_through_tap_resize(self):
        cfg = small_config()
        fusion, segnet = build(cfg)
        x, y = torch.rand(1, 1, 50, 70), torch.rand(1, 1, 50, 70)
        u, _ = fusion(x, y, segnet)
        assert u.shape == (1, 1, 50, 70)

    def test_shape_mismatch_rejected(self):
        cfg = small_config()
        fusion, segnet = build(cfg)
        with pytest.raises(ShapeMismatch):
            fusion(torch.rand(1, 1, 32, 32), torch.rand(1, 1, 32, 48), segnet)

    def test_seg_parameters_not_owned_by_fusion(self):
        cfg = small_config()
        fusion, segnet = build(cfg)
        fusion_params = {id(p) for p in fusion.parameters()}
        seg_params = {id(p) for p in segnet.parameters()}
        assert fusion_params.isdisjoint(seg_params)
        # taps must belong to the fusion group so the fusion phase trains them
        assert any("taps" in name for name, _ in fusion.named_parameters())

    def test_zero_init_blocks_only_train_their_final_layers_first(self):
        cfg = small_config()
        fusion, segnet = build(cfg)
        x, y = torch.rand(1, 1, 64, 64), torch.rand(1, 1, 64, 64)
        u, _ = fusion(x, y, segnet)
        u.mean().backward()
        # the zero final projections block upstream flow at initialization ...
        tap_grads = [p.grad for n, p in fusion.named_parameters() if n.startswith("taps")]
        assert all(g is not None and float(g.abs().sum()) == 0.0 for g in tap_grads)
        # ... but themselves receive signal, so the bridge starts to train
        final_w = fusion.block1.mlp_ir[-1].weight.grad
        assert final_w is not None and float(final_w.abs().sum()) > 0

    def test_gradients_flow_through_interaction_path_once_nonzero(self):
        cfg = small_config()
        fusion, segnet = build(cfg)
        with torch.no_grad():
            for blk in (fusion.block1, fusion.block2):
                for mlp in (blk.mlp_ir, blk.mlp_vis):
                    mlp[-1].weight.uniform_(-0.2, 0.2)
                    mlp[-1].bias.uniform_(-0.2, 0.2)
        x, y = torch.rand(1, 1, 64, 64), torch.rand(1, 1, 64, 64)
        u, _ = fusion(x, y, segnet)
        u.mean().backward()
        tap_grads = [p.grad for n, p in fusion.named_parameters() if n.startswith("taps")]
        assert all(g is not None for g in tap_grads)
        assert any(float(g.abs().sum()) > 0 for g in tap_grads)
