import json
import struct

import numpy as np
import pytest

from bnas.binarize import BinConv2d, BinConvParams, ConvSpec, binconv_forward, signs
from bnas.cells import Genotype, uniform_genotype
from bnas.data import as_batch, synthetic_blobs
from bnas.deploy import (
    DEPLOY_MAGIC,
    PackedConv,
    cost_report,
    export_model,
    load_deployed,
    network_cost,
    pack,
    packed_binconv,
    packed_inference,
    popcount,
    reference_genotype,
    time_layers,
    unpack,
    xnor_dot,
)
from bnas.optim import save_checkpoint
from bnas.searchspace import flops, layer_type
from bnas.tensor import Tensor, no_grad
from bnas.trainer import NetworkConfig, build_network, predict

TINY = NetworkConfig("tiny", num_cells=3, init_channels=4, num_classes=2, image_side=8)


def _mixed_genotype():
    g = uniform_genotype("bin_conv_3x3")
    normal = list(g.normal)
    normal[1] = ((1, "zeroise"), (2, "bin_dil_conv_5x5"))
    reduce = list(g.reduce)
    reduce[0] = ((0, "max_pool_3x3"), (1, "zeroise"))
    return Genotype(tuple(normal), tuple(reduce), 3.0)


# --- packing --------------------------------------------------------------------------------


def test_pack_sets_a_bit_for_non_negative_entries():
    p = pack(np.array([0.5, -0.3, 0.0, -2.0]))
    assert p.n == 4
    assert int(p.words[0]) == 0b0101


def test_pack_spills_into_a_second_word_with_zero_padding():
    p = pack(np.ones(70))
    assert p.n_words == 2
    assert int(p.words[1]) == (1 << 6) - 1
    assert int(p.mask[1]) == (1 << 6) - 1


def test_unpack_recovers_the_signs():
    x = np.random.default_rng(0).standard_normal((3, 130))
    np.testing.assert_array_equal(unpack(pack(x)).data, signs(x))


def test_xnor_dot_hand_count():
    a = pack(np.array([1, -1, 1, 1, -1]))
    b = pack(np.array([1, 1, -1, 1, -1]))
    assert xnor_dot(a, b) == 1
    assert xnor_dot(a, a) == 5
    with pytest.raises(ValueError, match="length"):
        xnor_dot(a, pack(np.ones(6)))


@pytest.mark.parametrize("native", [True, False])
def test_xnor_dot_matches_the_float_dot_of_signs(native):
    rng = np.random.default_rng(1)
    a, b = rng.choice([-1.0, 1.0], 1000), rng.choice([-1.0, 1.0], 1000)
    assert xnor_dot(pack(a), pack(b), native=native) == int(a @ b)


def test_popcount_table_agrees_with_native():
    words = np.random.default_rng(2).integers(0, 2**63, size=50, dtype=np.uint64) * np.uint64(2) + np.uint64(1)
    np.testing.assert_array_equal(popcount(words, native=True), popcount(words, native=False))


# --- packed convolution ---------------------------------------------------------------------


@pytest.mark.parametrize("seed", [3, 17])
@pytest.mark.parametrize(
    "spec,k",
    [
        (ConvSpec(), 3),
        (ConvSpec(padding=1), 3),
        (ConvSpec(stride=2, padding=1), 3),
        (ConvSpec(padding=2, dilation=2), 3),
        (ConvSpec(padding=1, groups=4), 3),
        (ConvSpec(padding=2), 5),
        (ConvSpec(stride=2, padding=2), 5),
        (ConvSpec(padding=4, dilation=2), 5),
        (ConvSpec(stride=2, padding=4, dilation=2), 5),
    ],
)
def test_packed_conv_matches_the_float_binary_conv(spec, k, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 4, 8, 8)).astype(np.float32)
    w = rng.standard_normal((4, 4 // spec.groups, k, k)).astype(np.float32)
    expected = binconv_forward(Tensor(x), BinConvParams(Tensor(w)), spec).data
    got = packed_binconv(x, PackedConv.from_weight(w, spec)).data
    np.testing.assert_allclose(got, expected, rtol=1e-5, atol=1e-5)


def test_packed_conv_agrees_on_a_hundred_random_instances_of_every_conv_kind():
    rng = np.random.default_rng(5)
    kinds = [layer_type(name) for name in ("bin_conv_3x3", "bin_conv_5x5", "bin_dil_conv_3x3", "bin_dil_conv_5x5")]
    for i in range(100):
        kind, stride = kinds[i % 4], 1 + (i // 4) % 2
        c_in, c_out, side = rng.integers(1, 7), rng.integers(1, 7), rng.integers(5, 10)
        spec = ConvSpec(stride=stride, padding=kind.padding, dilation=kind.dilation)
        x = rng.standard_normal((2, c_in, side, side)).astype(np.float32)
        w = rng.standard_normal((c_out, c_in, kind.kernel_size, kind.kernel_size)).astype(np.float32)
        expected = binconv_forward(Tensor(x), BinConvParams(Tensor(w)), spec).data
        got = packed_binconv(x, PackedConv.from_weight(w, spec)).data
        assert np.max(np.abs(got - expected)) < 1e-5, (kind.name, stride, c_in, c_out, side)


def test_all_plus_one_patch_counts_nine():
    x = np.ones((1, 1, 3, 3), dtype=np.float32)
    w = np.ones((1, 1, 3, 3), dtype=np.float32)
    # beta = 1 and K = 1, so the output is the raw count
    assert packed_binconv(x, BinConvParams(Tensor(w)), ConvSpec()).data.item() == 9.0


def test_packed_conv_rejects_channel_mismatch():
    conv = PackedConv.from_weight(np.ones((2, 3, 1, 1), np.float32), ConvSpec())
    with pytest.raises(ValueError, match="channels"):
        packed_binconv(np.ones((1, 4, 2, 2), np.float32), conv)


def test_packed_weights_reconstruct_sign_times_beta():
    w = np.array([[[[0.5, -1.5], [2.0, -1.0]]]], dtype=np.float32)
    np.testing.assert_allclose(PackedConv.from_weight(w, ConvSpec()).to_weight(), [[[[1.25, -1.25], [1.25, -1.25]]]])


def test_packed_inference_agrees_with_the_float_path_and_cleans_up():
    net = build_network(_mixed_genotype(), TINY, seed=1)
    images = synthetic_blobs(classes=2, n=12, seed=2, side=8)
    expected = predict(net, images)
    with packed_inference(net) as packed:
        got = predict(packed, images)
    np.testing.assert_array_equal(got, expected)
    assert all(m.kernel is None for m in net.modules() if isinstance(m, BinConv2d))


def test_packed_network_predicts_like_the_float_network_on_a_full_batch():
    g = _mixed_genotype()
    normal = list(g.normal)
    normal[2] = ((0, "bin_conv_5x5"), (3, "bin_dil_conv_3x3"))
    net = build_network(Genotype(tuple(normal), g.reduce), TINY, seed=6)
    x = Tensor(as_batch(synthetic_blobs(classes=2, n=256, seed=7, side=8), np.arange(256)).images)
    net.eval()
    with no_grad():
        expected = net(x).data
    with packed_inference(net) as packed, no_grad():
        got = packed(x).data
    np.testing.assert_allclose(got, expected, rtol=1e-4, atol=1e-4)
    assert np.mean(got.argmax(axis=1) == expected.argmax(axis=1)) == 1.0


def test_time_layers_covers_every_binary_conv():
    net = build_network(uniform_genotype("bin_conv_3x3"), TINY)
    images = np.random.default_rng(0).standard_normal((2, 3, 8, 8)).astype(np.float32)
    timings = time_layers(net, images, repeats=1)
    expected = sum(isinstance(m, BinConv2d) for m in net.modules())
    assert len(timings) == expected
    assert all(t.float_ms >= 0 and t.packed_ms > 0 for t in timings)
    assert timings[0].input_shape[0] == 2


# --- cost -------------------------------------------------------------------------------------


def test_zeroise_edge_is_cheaper_than_the_conv_it_replaces():
    conv = uniform_genotype("bin_conv_3x3")
    normal = list(conv.normal)
    normal[2] = ((2, "zeroise"), (3, "bin_conv_3x3"))
    fewer = Genotype(tuple(normal), conv.reduce)
    a, b = network_cost(conv, TINY), network_cost(fewer, TINY)
    assert flops(b) < flops(a)
    assert b.param_bits < a.param_bits


def test_zeroise_genotype_beats_its_reference_on_savings_and_flops():
    g = _mixed_genotype()
    with_zeroise = cost_report(g, TINY)
    replaced = cost_report(reference_genotype(g), TINY)
    assert with_zeroise.memory_savings > replaced.memory_savings
    assert with_zeroise.flops < replaced.flops


def test_binary_network_with_small_float_parts_saves_over_twenty_times():
    cfg = NetworkConfig("toy", num_cells=10, init_channels=32, stem_group_conv=True, use_skip=False)
    report = cost_report(uniform_genotype("bin_conv_5x5"), cfg)
    assert 20 <= report.memory_savings < 32
    assert report.speedup > 1


def test_float_precision_network_saves_nothing():
    cfg = NetworkConfig("float", num_cells=3, init_channels=8, precision="float")
    report = cost_report(uniform_genotype("bin_conv_3x3"), cfg)
    assert report.memory_savings == pytest.approx(1.0)
    assert report.binary_ops == 0


def test_cost_report_json_has_every_field():
    report = cost_report(_mixed_genotype(), TINY)
    assert set(report.to_dict()) >= {"binary_ops", "float_ops", "flops", "memory_savings", "speedup"}
    assert report.param_bits == report.param_bits_binary + report.param_bits_float


# --- deployed file ----------------------------------------------------------------------------


def test_exported_model_reloads_with_the_same_predictions_and_cost(tmp_path):
    genotype = _mixed_genotype()
    net = build_network(genotype, TINY, seed=3)
    path = tmp_path / "model.bnas"
    report = export_model(path, net, TINY, genotype, seed=3)
    assert path.read_bytes().startswith(DEPLOY_MAGIC)
    deployed = load_deployed(path)
    assert deployed.cost == report
    assert deployed.genotype == genotype
    images = synthetic_blobs(classes=2, n=12, seed=4, side=8)
    np.testing.assert_array_equal(predict(deployed.network, images), predict(net, images))


def test_deployed_file_is_smaller_than_the_float_checkpoint(tmp_path):
    cfg = NetworkConfig("wide", num_cells=3, init_channels=16, num_classes=2, image_side=8)
    genotype = uniform_genotype("bin_conv_5x5")
    net = build_network(genotype, cfg)
    export_model(tmp_path / "model.bnas", net, cfg, genotype)
    save_checkpoint(tmp_path / "model.ckpt", net.state_dict())
    assert (tmp_path / "model.bnas").stat().st_size < (tmp_path / "model.ckpt").stat().st_size / 4


def test_load_deployed_rejects_foreign_and_truncated_files(tmp_path):
    path = tmp_path / "model.bnas"
    path.write_bytes(b"BNASCKPT" + b"\0" * 16)
    with pytest.raises(ValueError, match="not a deployed bnas model"):
        load_deployed(path)
    net = build_network(uniform_genotype("zeroise"), TINY)
    export_model(path, net, TINY, uniform_genotype("zeroise"))
    path.write_bytes(path.read_bytes()[:-7])
    with pytest.raises(ValueError, match="truncated"):
        load_deployed(path)


def test_deployed_header_without_a_network_config_is_a_value_error(tmp_path):
    path = tmp_path / "model.bnas"
    export_model(path, build_network(uniform_genotype("zeroise"), TINY), TINY, uniform_genotype("zeroise"))
    blob = path.read_bytes()
    start = len(DEPLOY_MAGIC) + 4
    (size,) = struct.unpack("<I", blob[start : start + 4])
    header = json.loads(blob[start + 4 : start + 4 + size])
    del header["network"]
    encoded = json.dumps(header).encode("utf-8")
    path.write_bytes(blob[:start] + struct.pack("<I", len(encoded)) + encoded + blob[start + 4 + size :])
    with pytest.raises(ValueError, match="lacks network"):
        load_deployed(path)
