import numpy as np
import pytest
import torch

from corrseg.blocks import (
    AttentionFusion,
    BlockConfig,
    ConditionEmbedding,
    ConvBlock,
    EncoderTower,
    ResDilBlock,
    UpsampleConcat,
)

from fdcheck import assert_gradients_close


def _zero_all(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()


def test_block_config_validation():
    with pytest.raises(ValueError):
        BlockConfig(depth=1)
    with pytest.raises(ValueError):
        BlockConfig(kernel_size=4)
    with pytest.raises(ValueError):
        BlockConfig(dropout_rate=1.0)
    cfg = BlockConfig(base_filters=4, depth=3)
    assert [cfg.filters_at(l) for l in range(3)] == [4, 8, 16]


# -- ConvBlock ---------------------------------------------------------------


def test_conv_block_shape():
    torch.manual_seed(0)
    block = ConvBlock(4, 8)
    out = block(torch.randn(1, 4, 8, 8, 8))
    assert out.shape == (1, 8, 8, 8, 8)


def test_conv_block_zero_weights_constant_output():
    torch.manual_seed(0)
    block = ConvBlock(2, 4)
    _zero_all(block)
    out = block(torch.randn(1, 2, 6, 6, 6))
    assert torch.all(out == out.reshape(1, 4, -1)[:, :, :1].unsqueeze(-1).unsqueeze(-1))
    assert torch.all(out == 0)


def test_conv_block_channel_mismatch_raises():
    block = ConvBlock(2, 4)
    with pytest.raises(RuntimeError):
        block(torch.randn(1, 3, 6, 6, 6))


def test_conv_block_gradients():
    torch.manual_seed(1)
    block = ConvBlock(2, 3).double()
    x = torch.randn(1, 2, 4, 4, 4, dtype=torch.float64, requires_grad=True)
    tensors = [x, *block.parameters()]
    assert_gradients_close(lambda: 0.5 * block(x).pow(2).sum(), tensors)


# -- ResDilBlock -------------------------------------------------------------


def test_res_dil_identity_when_zeroed():
    torch.manual_seed(2)
    block = ResDilBlock(8)
    _zero_all(block.residual)
    x = torch.randn(1, 8, 8, 8, 8)
    assert torch.equal(block(x), x)


def test_res_dil_shape_and_projection():
    torch.manual_seed(3)
    block = ResDilBlock(8)
    assert block(torch.randn(1, 8, 8, 8, 8)).shape == (1, 8, 8, 8, 8)
    projected = ResDilBlock(8, in_channels=4)
    assert projected(torch.randn(1, 4, 8, 8, 8)).shape == (1, 8, 8, 8, 8)


def test_res_dil_receptive_field_larger_than_conv():
    # a centered input impulse must spread further than the plain conv spreads it
    torch.manual_seed(4)
    conv = ConvBlock(1, 1)
    res = ResDilBlock(1, dilation_rates=(2, 4))
    x = torch.zeros(1, 1, 17, 17, 17)
    x[0, 0, 8, 8, 8] = 1.0
    with torch.no_grad():
        # strip the norms: compare raw convolution reach along one axis
        reach_conv = torch.where(conv.conv(x)[0, 0, :, 8, 8] != 0)[0]
        g = res.residual
        reach_res = torch.where(g[3](g[0](x))[0, 0, :, 8, 8] != 0)[0]
    span_conv = int(reach_conv.max() - reach_conv.min())
    span_res = int(reach_res.max() - reach_res.min())
    assert span_res > span_conv


def test_res_dil_gradients():
    torch.manual_seed(5)
    block = ResDilBlock(2, dilation_rates=(1, 2)).double()
    x = torch.randn(1, 2, 4, 4, 4, dtype=torch.float64, requires_grad=True)
    assert_gradients_close(lambda: 0.5 * block(x).pow(2).sum(), [x, *block.parameters()])


# -- ConditionEmbedding --------------------------------------------------------


def test_condition_embedding_shape():
    torch.manual_seed(6)
    embed = ConditionEmbedding((4, 4, 4))
    assert embed(2).shape == (1, 1, 4, 4, 4)


def test_condition_embedding_rows_distinct():
    torch.manual_seed(7)
    embed = ConditionEmbedding((2, 2, 2))
    outs = [embed(i) for i in range(4)]
    for i in range(4):
        for j in range(i + 1, 4):
            assert (outs[i] - outs[j]).abs().max() > 0


def test_condition_embedding_rejects_bad_index():
    embed = ConditionEmbedding((2, 2, 2))
    with pytest.raises(ValueError):
        embed(4)
    with pytest.raises(ValueError):
        embed(-1)


def test_condition_embedding_gradients():
    torch.manual_seed(8)
    embed = ConditionEmbedding((2, 2, 2)).double()
    weight = torch.randn(1, 1, 2, 2, 2, dtype=torch.float64)

    def loss():
        return sum((embed(i) * weight).pow(2).sum() for i in range(4))

    assert_gradients_close(loss, list(embed.parameters()))


# -- AttentionFusion ------------------------------------------------------------


def test_fusion_equal_inputs_give_uniform_gates():
    torch.manual_seed(9)
    fusion = AttentionFusion(8, num_inputs=4)
    x = torch.randn(2, 8, 4, 4, 4)
    gates = fusion.modality_gates([x, x, x, x])
    assert gates.shape == (2, 4, 1)
    assert torch.allclose(gates, torch.full_like(gates, 0.25), atol=1e-6)


def test_fusion_output_shape():
    torch.manual_seed(10)
    fusion = AttentionFusion(8, num_inputs=3)
    feats = [torch.randn(2, 8, 4, 4, 4) for _ in range(3)]
    assert fusion(feats).shape == (2, 8, 4, 4, 4)


def test_fusion_shape_mismatch_raises():
    fusion = AttentionFusion(4, num_inputs=2)
    with pytest.raises(ValueError):
        fusion([torch.randn(1, 4, 4, 4, 4), torch.randn(1, 4, 2, 2, 2)])
    with pytest.raises(ValueError):
        fusion([torch.randn(1, 4, 4, 4, 4)])


def test_fusion_gradients():
    torch.manual_seed(11)
    fusion = AttentionFusion(2, num_inputs=3).double()
    feats = [torch.randn(1, 2, 3, 3, 3, dtype=torch.float64) for _ in range(3)]
    assert_gradients_close(
        lambda: 0.5 * fusion(feats).pow(2).sum(), list(fusion.parameters())
    )


# -- UpsampleConcat --------------------------------------------------------------


def test_upsample_concat_shape():
    torch.manual_seed(12)
    block = UpsampleConcat(16, 8, 8)
    out = block(torch.randn(1, 16, 2, 2, 2), torch.randn(1, 8, 4, 4, 4))
    assert out.shape == (1, 8, 4, 4, 4)


def test_upsample_concat_dimension_mismatch():
    block = UpsampleConcat(16, 8, 8)
    with pytest.raises(ValueError):
        block(torch.randn(1, 16, 2, 2, 2), torch.randn(1, 8, 5, 5, 5))


def test_upsample_concat_skip_only_when_up_path_zeroed():
    torch.manual_seed(13)
    block = UpsampleConcat(4, 4, 4)
    _zero_all(block.up_conv)
    skip = torch.randn(1, 4, 4, 4, 4)
    with torch.no_grad():
        out_a = block(torch.randn(1, 4, 2, 2, 2), skip)
        out_b = block(torch.randn(1, 4, 2, 2, 2) * 100, skip)
    assert torch.equal(out_a, out_b)


def test_upsample_concat_gradients():
    torch.manual_seed(14)
    block = UpsampleConcat(2, 2, 2, dilation_rates=(1, 2)).double()
    low = torch.randn(1, 2, 2, 2, 2, dtype=torch.float64, requires_grad=True)
    skip = torch.randn(1, 2, 4, 4, 4, dtype=torch.float64, requires_grad=True)
    assert_gradients_close(
        lambda: 0.5 * block(low, skip).pow(2).sum(),
        [low, skip, *block.parameters()],
        max_coords=60,
    )


# -- EncoderTower -----------------------------------------------------------------


def test_encoder_tower_level_shapes():
    torch.manual_seed(15)
    cfg = BlockConfig(base_filters=4, depth=3)
    tower = EncoderTower(cfg, use_condition=True)
    cond = torch.randn(1, 1, 8, 8, 8)
    feats = tower(torch.randn(2, 1, 16, 16, 16), cond)
    assert [tuple(f.shape) for f in feats] == [
        (2, 4, 16, 16, 16),
        (2, 8, 8, 8, 8),
        (2, 16, 4, 4, 4),
    ]


def test_encoder_tower_requires_condition_when_built_with_slot():
    cfg = BlockConfig(base_filters=2, depth=2)
    tower = EncoderTower(cfg, use_condition=True)
    with pytest.raises(ValueError):
        tower(torch.randn(1, 1, 8, 8, 8))


def test_encoder_tower_without_condition():
    torch.manual_seed(16)
    cfg = BlockConfig(base_filters=2, depth=2)
    tower = EncoderTower(cfg, use_condition=False)
    feats = tower(torch.randn(1, 1, 8, 8, 8))
    assert [tuple(f.shape) for f in feats] == [(1, 2, 8, 8, 8), (1, 4, 4, 4, 4)]


# -- generic properties ------------------------------------------------------------


@pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
def test_shape_arithmetic_random_configs(seed):
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    cfg = BlockConfig(
        base_filters=int(rng.choice([2, 4, 8])),
        depth=int(rng.choice([2, 3])),
        dilation_rates=tuple(rng.choice([1, 2, 4], size=2)),
        kernel_size=int(rng.choice([1, 3])),
    )
    side = int(rng.choice([8, 16])) * 2 ** (cfg.depth - 1) // 2 ** (cfg.depth - 1)
    side = max(side, 2 ** (cfg.depth - 1) * 2)
    tower = EncoderTower(cfg, use_condition=False)
    feats = tower(torch.randn(1, 1, side, side, side))
    for level, f in enumerate(feats):
        expected_side = side // 2**level
        assert tuple(f.shape) == (1, cfg.filters_at(level), *([expected_side] * 3))


def test_blocks_deterministic_in_eval_mode():
    torch.manual_seed(17)
    cfg = BlockConfig(base_filters=2, depth=2, dropout_rate=0.5)
    tower = EncoderTower(cfg, use_condition=False).eval()
    x = torch.randn(1, 1, 8, 8, 8)
    out1 = tower(x)[-1]
    out2 = tower(x)[-1]
    assert torch.equal(out1, out2)


def test_dropout_active_only_in_training_mode():
    torch.manual_seed(18)
    block = ResDilBlock(4, dropout_rate=0.5).train()
    x = torch.randn(2, 4, 8, 8, 8)
    torch.manual_seed(1)
    a = block(x)
    torch.manual_seed(2)
    b = block(x)
    assert not torch.equal(a, b)


def test_no_dead_parameters():
    torch.manual_seed(19)
    blocks = {
        "conv": (ConvBlock(2, 3), lambda m: m(torch.randn(2, 2, 5, 5, 5))),
        "res_dil": (ResDilBlock(3), lambda m: m(torch.randn(2, 3, 6, 6, 6))),
        "fusion": (
            AttentionFusion(3, 2),
            lambda m: m([torch.randn(2, 3, 4, 4, 4), torch.randn(2, 3, 4, 4, 4)]),
        ),
        "upsample": (
            UpsampleConcat(3, 3, 3),
            lambda m: m(torch.randn(1, 3, 2, 2, 2), torch.randn(1, 3, 4, 4, 4)),
        ),
        "embed": (
            ConditionEmbedding((2, 2, 2)),
            lambda m: torch.stack([m(i) for i in range(4)]),
        ),
    }
    for name, (module, run) in blocks.items():
        loss = run(module).pow(2).sum()
        loss.backward()
        for pname, p in module.named_parameters():
            assert p.grad is not None and p.grad.abs().sum() > 0, f"{name}.{pname} dead"
