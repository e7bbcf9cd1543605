import numpy as np
import pytest

from bnas.searchspace import (
    BIN_CONV_3X3,
    BIN_DIL_CONV_5X5,
    BIN_SEP_CONV_3X3,
    SEARCH_SPACE,
    ZEROISE,
    ConvBlock,
    OpCost,
    PoolBlock,
    SepConvBlock,
    Zeroise,
    apply,
    conv_cost,
    flops,
    layer_type,
    make_block,
    op_cost,
    pool_cost,
    search_space,
)
from bnas.tensor import Tensor


def test_default_space_order_and_size():
    assert [t.name for t in SEARCH_SPACE] == [
        "bin_conv_3x3",
        "bin_conv_5x5",
        "bin_dil_conv_3x3",
        "bin_dil_conv_5x5",
        "max_pool_3x3",
        "avg_pool_3x3",
        "zeroise",
    ]


def test_space_toggles_keep_order():
    names = [t.name for t in search_space(dilated=False, separable=True, zeroise=False)]
    assert names == ["bin_conv_3x3", "bin_conv_5x5", "bin_sep_conv_3x3", "max_pool_3x3", "avg_pool_3x3"]


def test_unknown_layer_name_is_an_error():
    with pytest.raises(ValueError, match="unknown layer type"):
        layer_type("bin_conv_7x7")


def test_dilated_padding_keeps_the_side():
    assert BIN_DIL_CONV_5X5.padding == 4
    assert layer_type("bin_dil_conv_3x3").padding == 2


@pytest.mark.parametrize("layer", [t.name for t in SEARCH_SPACE] + [BIN_SEP_CONV_3X3.name])
@pytest.mark.parametrize("stride,side,expected", [(1, 8, 8), (2, 8, 4), (2, 7, 4)])
def test_every_block_preserves_channels_and_maps_the_side(layer, stride, side, expected):
    x = Tensor(np.random.default_rng(0).standard_normal((2, 4, side, side)))
    out = apply(layer, x, stride, np.random.default_rng(1))
    assert out.shape == (2, 4, expected, expected)


@pytest.mark.parametrize("precision", ["binary", "float"])
def test_make_block_picks_the_block_class(precision):
    rng = np.random.default_rng(0)
    assert isinstance(make_block("bin_conv_5x5", 4, 1, rng, precision), ConvBlock)
    assert isinstance(make_block("bin_sep_conv_3x3", 4, 1, rng, precision), SepConvBlock)
    assert isinstance(make_block("avg_pool_3x3", 4, 2, rng, precision), PoolBlock)
    assert isinstance(make_block(ZEROISE, 4, 2, rng, precision), Zeroise)


def test_bad_stride_or_precision_is_rejected():
    with pytest.raises(ValueError, match="stride"):
        make_block(BIN_CONV_3X3, 4, 3)
    with pytest.raises(ValueError, match="precision"):
        make_block(BIN_CONV_3X3, 4, 1, precision="ternary")


def test_zeroise_emits_zeros_and_has_no_parameters():
    block = make_block(ZEROISE, 6, 2)
    out = block(Tensor(np.ones((1, 3, 8, 8))))
    assert out.shape == (1, 6, 4, 4)
    assert not out.data.any()
    assert block.parameters() == []


def test_binary_conv_block_has_non_affine_batch_norm():
    block = make_block(BIN_CONV_3X3, 4, 1, np.random.default_rng(0))
    assert [n for n, _ in block.named_parameters()] == ["conv.weight"]


def test_opcost_addition_and_flops():
    total = OpCost(128, 10, 7, 5) + OpCost(64, 5, 1, 1)
    assert total == OpCost(192, 15, 8, 6)
    assert flops(total) == 15 + 192 / 64
    assert total.float_param_bits == 2


def test_binary_conv_cost_by_hand():
    # 4 -> 4 channels, 3x3, side 8, stride 1
    cost = conv_cost(4, 4, 3, 8)
    macs = 4 * 4 * 9 * 64
    assert cost.binary_ops == macs
    # BN: 2 * 4 * 64; K smoothing 9 * 64; beta*K scaling 2 * 4 * 64
    assert cost.float_ops == 512 + 576 + 512
    assert cost.param_bits == 144 + 32 * 4
    assert cost.binary_param_bits == 144


def test_float_conv_cost_counts_every_mac_as_a_float_op():
    cost = conv_cost(4, 4, 3, 8, precision="float")
    assert cost.binary_ops == 0
    assert cost.float_ops == 4 * 4 * 9 * 64 + 2 * 4 * 64
    assert cost.param_bits == 32 * 144


def test_binary_edge_is_much_cheaper_than_the_float_edge():
    binary = op_cost(BIN_CONV_3X3, 32, 32, 16, 1)
    real = op_cost(BIN_CONV_3X3, 32, 32, 16, 1, precision="float")
    assert flops(real) / flops(binary) > 10
    assert real.param_bits / binary.param_bits > 20


def test_zeroise_is_free_and_pools_have_no_params():
    assert op_cost(ZEROISE, 16, 16, 8, 2) == OpCost()
    pool = pool_cost(layer_type("max_pool_3x3"), 4, 8, 2)
    assert pool.param_bits == 0
    # 4 channels * 4x4 outputs * 9 comparisons, plus BN on the output
    assert pool.float_ops == 4 * 16 * 9 + 2 * 4 * 16


def test_separable_edge_costs_less_than_the_full_conv():
    sep = op_cost(BIN_SEP_CONV_3X3, 16, 16, 8, 1)
    full = op_cost(BIN_CONV_3X3, 16, 16, 8, 1)
    assert sep.binary_ops < full.binary_ops
