import math

import pytest
import torch

from anovlm.heatmap import (ConvNeXtBlock, FusionBlock, HeatmapDecoder,
                            bce_loss, dice_ce_from_logits, dice_ce_loss,
                            dice_loss)


def test_dice_perfect_prediction_is_zero():
    mask = torch.zeros(2, 8, 8)
    mask[:, 2:5, 2:5] = 1.0
    assert float(dice_loss(mask.clone(), mask)) == pytest.approx(0.0, abs=1e-7)


def test_dice_hand_value():
    # pred all 0.5 on 4 px, one positive: inter=.5, sums 2+1
    # dice = 1 - (2*.5 + 1)/(2 + 1 + 1) = 0.5
    pred = torch.full((1, 2, 2), 0.5)
    mask = torch.tensor([[[1.0, 0.0], [0.0, 0.0]]])
    assert float(dice_loss(pred, mask)) == pytest.approx(0.5, abs=1e-7)
    # bce is -log(.5) everywhere
    assert float(bce_loss(pred, mask)) == pytest.approx(math.log(2.0), abs=1e-6)
    assert float(dice_ce_loss(pred, mask)) == pytest.approx(
        0.5 * (0.5 + math.log(2.0)), abs=1e-6)


def test_dice_empty_mask_finite():
    pred = torch.zeros(3, 8, 8)
    mask = torch.zeros(3, 8, 8)
    assert float(dice_loss(pred, mask)) == pytest.approx(0.0, abs=1e-7)
    assert float(dice_ce_loss(pred, mask)) == pytest.approx(0.0, abs=1e-5)


def test_losses_reject_soft_masks():
    pred = torch.rand(1, 4, 4)
    soft = torch.full((1, 4, 4), 0.3)
    for fn in (dice_loss, bce_loss, dice_ce_loss):
        with pytest.raises(ValueError):
            fn(pred, soft)
    with pytest.raises(ValueError):
        dice_ce_from_logits(torch.randn(1, 4, 4), soft)


def test_logit_form_matches_probability_form():
    torch.manual_seed(0)
    # float64: in float32 the saturated-sigmoid tails alone cost ~1e-6
    logits = (torch.randn(2, 16, 16) * 3).double()
    mask = (torch.rand(2, 16, 16) > 0.7).double()
    a = dice_ce_from_logits(logits, mask)
    b = dice_ce_loss(torch.sigmoid(logits), mask)
    assert float((a - b).abs()) < 1e-9


def test_fusion_block_shapes(cfg):
    torch.manual_seed(0)
    block = FusionBlock(cfg.model)
    grids = [torch.randn(2, 8, 8, cfg.model.d_model) for _ in range(4)]
    tokens = torch.randn(2, 16, cfg.model.d_lm)
    fused = block(grids, tokens)
    assert fused.shape == (2, 4 * cfg.model.d_model, 8, 8)


def test_fusion_is_residual(cfg):
    """Zero attention output (zero value tokens) must leave the grid intact."""
    torch.manual_seed(0)
    block = FusionBlock(cfg.model)
    grids = [torch.randn(1, 8, 8, cfg.model.d_model) for _ in range(4)]
    tokens = torch.zeros(1, 16, cfg.model.d_lm)
    for attn in block.attns:
        torch.nn.init.zeros_(attn.out_proj.bias)
    fused = block(grids, tokens)
    want = torch.cat(grids, dim=-1).permute(0, 3, 1, 2)
    assert torch.allclose(fused, want, atol=1e-6)


def test_convnext_block_preserves_shape():
    torch.manual_seed(0)
    block = ConvNeXtBlock(32)
    x = torch.randn(2, 32, 8, 8)
    assert block(x).shape == x.shape


def test_decoder_constant_input_gives_flat_map(cfg):
    """Replicate padding end to end: a spatially constant fused grid decodes
    to a spatially constant heatmap."""
    torch.manual_seed(0)
    dec = HeatmapDecoder(cfg.model, image_size=64, grid_size=8)
    fused = torch.randn(1, 4 * cfg.model.d_model, 1, 1).expand(-1, -1, 8, 8)
    with torch.no_grad():
        logits = dec.head(fused)
    assert logits.shape == (1, 64, 64)
    assert float(logits.max() - logits.min()) < 1e-5


def test_decoder_full_path_shapes(cfg):
    from anovlm.backbone import PatchEncoder

    torch.manual_seed(0)
    enc = PatchEncoder(cfg.model, 64, 8)
    dec = HeatmapDecoder(cfg.model, image_size=64, grid_size=8)
    feats = enc.encode(torch.rand(2, 64, 64))
    tokens = torch.randn(2, 16, cfg.model.d_lm)
    logits = dec(feats, tokens)
    assert logits.shape == (2, 64, 64)
    heat = dec.decode(feats, tokens)
    assert heat.min() >= 0 and heat.max() <= 1


def test_fresh_decoder_starts_near_empty(cfg):
    from anovlm.backbone import PatchEncoder

    torch.manual_seed(0)
    enc = PatchEncoder(cfg.model, 64, 8)
    dec = HeatmapDecoder(cfg.model, image_size=64, grid_size=8)
    feats = enc.encode(torch.rand(2, 64, 64))
    heat = dec.decode(feats, torch.randn(2, 16, cfg.model.d_lm) * 0.02)
    assert heat.mean() < 0.3  # output bias starts the map mostly off
