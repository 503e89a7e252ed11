"""
Tests for MicroBotNet construction, accounting and inference
"""
import json

import numpy as np
import pytest

from microbench.errors import DomainError, StructuralError
from microbench.micronet import (
    CONVENTIONS,
    LayerSpec,
    MacConvention,
    NetworkSpec,
    build_microbotnet,
    compare_with_reference,
    convention_ledger,
    count_macs,
    forward,
    hard_activations,
    load_weights,
    make_divisible,
    random_weights,
    save_weights,
    softmax,
    tradeoff_table,
    weight_manifest,
    zero_weights,
)

LAYER_SHAPES = [
    (16, 16, 16), (8, 8, 24), (4, 4, 40), (4, 4, 40), (4, 4, 48), (4, 4, 48),
    (2, 2, 96), (2, 2, 96), (2, 2, 96), (2, 2, 96), (2, 2, 96),
    (2, 2, 576), (1, 1, 576), (1, 1, 1024), (1, 1, 10),
]


@pytest.fixture(scope="module")
def full():
    return build_microbotnet(1.0, 10)


@pytest.mark.parametrize("x, expected", [(-3, (0.0, 0.0)), (0, (0.5, 0.0)), (3, (1.0, 3.0)), (6, (1.0, 6.0))])
def test_hard_activations(x, expected):
    assert hard_activations(x) == pytest.approx(expected)


def test_softmax_is_a_distribution():
    p = softmax(np.array([1.0, 2.0, 3.0]))
    assert p.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(softmax(np.array([101.0, 102.0, 103.0])), p)


def test_make_divisible_rounds_to_multiples():
    assert make_divisible(16 * 0.25) == 8
    assert make_divisible(72 * 0.32) == 24
    assert make_divisible(100) == 104
    assert make_divisible(95) % 8 == 0


def test_first_layer(full):
    conv = full.layers[0]
    assert (conv.kind, conv.kernel, conv.stride) == ("conv", 3, 2)
    assert conv.in_shape == (32, 32, 3)
    assert conv.out_shape == (16, 16, 16)
    assert count_macs(full).layers[0].macs == 16 * 16 * 16 * 3 * 3 * 3 == 110_592


def test_four_wide_bottlenecks(full):
    wide = [layer for layer in full.layers
            if layer.kind == "bneck" and layer.exp_size == 576 and layer.in_shape == (2, 2, 96)]
    assert len(wide) == 4
    positions = [full.layers.index(layer) for layer in wide]
    assert positions == list(range(positions[0], positions[0] + 4))


def test_shape_chain_matches_layer_table(full):
    assert [layer.out_shape for layer in full.layers] == LAYER_SHAPES


def test_reference_parameter_total(full):
    report = count_macs(full)
    assert report.total_params == 2_044_298
    cmp = compare_with_reference(report)
    assert cmp["params_delta"] == 0
    assert cmp["reference_macs"] == 6_597_218
    assert sum(layer["macs_share"] for layer in cmp["layers"]) == pytest.approx(1.0)


def test_mac_ordering_around_one_million():
    macs = {a: count_macs(build_microbotnet(a, 10)).total_macs for a in (0.25, 0.32, 1.0)}
    assert macs[0.25] < macs[0.32] < 1_000_000 < macs[1.0]


def test_bottleneck_cost_by_hand(full):
    # 8x8x24 -> expand 96 -> depthwise 5x5 stride 2 -> SE(96, 24) -> project 40
    row = count_macs(full).layers[2]
    assert row.name == "bneck2"
    assert row.macs == 64 * 96 * 24 + 16 * 96 * 25 + 16 * 40 * 96 + 2 * 96 * 24 == 251_904
    assert row.params == 24 * 96 + 25 * 96 + 96 * 40 + 2 * (96 + 96 + 40) + 2 * 96 * 24 == 13_616


def test_totals_are_column_sums(full):
    report = count_macs(full)
    data = json.loads(report.to_json())
    assert data["total_macs"] == sum(layer["macs"] for layer in data["layers"])
    assert data["total_params"] == sum(layer["params"] for layer in data["layers"])
    assert isinstance(data["total_macs"], int)


def test_doubling_resolution_quadruples_plain_layers():
    small = count_macs(build_microbotnet(1.0, 10, input_size=32)).layers
    large = count_macs(build_microbotnet(1.0, 10, input_size=64)).layers
    for a, b in zip(small, large):
        if a.name in ("conv0", "bneck1", "pointwise11", "pointwise13", "pointwise14"):
            assert b.macs == 4 * a.macs, a.name


def test_table_literal_convention_adds_head_se(full):
    literal = count_macs(build_microbotnet(1.0, 10, MacConvention.table_literal()))
    default = count_macs(full)
    assert literal.total_params > default.total_params
    assert literal.layers[11].macs == default.layers[11].macs + 2 * 576 * 144


def test_thop_rules_charge_norm_pool_and_bias_work():
    row = count_macs(build_microbotnet(1.0, 10, MacConvention.thop())).layers[2]
    norm = 2 * (64 * 96 + 16 * 96 + 16 * 40)
    pool = (16 + 1) * 96
    bias = 24 + 96
    assert row.macs == 251_904 + norm + pool + bias == 270_296
    assert row.params == 13_616 + bias


@pytest.mark.parametrize("alpha, convention, macs, params", [
    (1.0, "thop", 6_006_152, 2_214_896),
    (0.32, "thop", 878_690, 255_506),
    (0.25, "thop", 651_992, 162_648),
    (0.32, "head", 929_824, 372_082),
    (0.25, "head", 702_592, 269_362),
])
def test_named_convention_totals(alpha, convention, macs, params):
    report = count_macs(build_microbotnet(alpha, 10, MacConvention.named(convention)))
    assert (report.total_macs, report.total_params) == (macs, params)


def test_unscaled_head_lands_near_reference_macs():
    for alpha in (0.32, 0.25):
        report = count_macs(build_microbotnet(alpha, 10, MacConvention.unscaled_head()))
        assert abs(compare_with_reference(report)["macs_relative"]) < 0.01
        assert report.layers[13].out_shape == (1, 1, 1024)


def test_ledger_covers_every_convention_and_layer():
    ledger = convention_ledger(1.0)
    assert [row["convention"] for row in ledger["totals"]] == list(CONVENTIONS)
    default = next(row for row in ledger["totals"] if row["convention"] == "default")
    assert default["params_relative"] == 0.0
    assert default["macs_relative"] == pytest.approx(5_641_504 / 6_597_218 - 1)
    assert len(ledger["layers"]) == 15
    assert sum(layer["thop_macs"] for layer in ledger["layers"]) == 6_006_152
    assert convention_ledger(0.5)["totals"][0]["macs_relative"] is None


def test_unknown_convention_is_rejected():
    with pytest.raises(DomainError):
        MacConvention.named("flops")


def test_tradeoff_table_lists_references():
    table = tradeoff_table()
    assert table["alpha"].tolist() == [0.25, 0.32, 1.0]
    assert table["reference_params"].tolist() == [160_162, 236_658, 2_044_298]
    assert table["top1"].isna().all()


def test_other_alpha_has_no_reference():
    assert compare_with_reference(count_macs(build_microbotnet(0.5, 10))) is None


def test_invalid_arguments():
    with pytest.raises(DomainError):
        build_microbotnet(0.0)
    with pytest.raises(DomainError):
        build_microbotnet(1.0, classes=0)
    with pytest.raises(StructuralError):
        LayerSpec("bad", "conv", 3, 8, 3, (8, 8, 3))


def test_chaining_mismatch_names_layer():
    a = LayerSpec("a", "conv", 3, 16, 2, (32, 32, 3))
    b = LayerSpec("b", "pointwise", 1, 8, 1, (8, 8, 16))
    with pytest.raises(StructuralError) as err:
        NetworkSpec(1.0, 10, (a, b))
    assert err.value.name == "b"


def test_parameter_count_matches_manifest(full):
    bundle = zero_weights(full)
    assert len(bundle) == len(weight_manifest(full))
    assert bundle.param_count() == count_macs(full).total_params


def test_zero_weights_give_zero_logits(full):
    image = np.random.default_rng(0).uniform(size=(32, 32, 3))
    np.testing.assert_array_equal(forward(full, zero_weights(full), image), np.zeros(10))


def test_forward_trace_follows_the_table(full):
    weights = random_weights(full, np.random.default_rng(1))
    images = np.random.default_rng(2).uniform(size=(2, 32, 32, 3))
    logits, shapes = forward(full, weights, images, trace=True)
    assert logits.shape == (2, 10)
    assert shapes == LAYER_SHAPES
    assert np.all(np.isfinite(logits))


def test_forward_rejects_wrong_input(full):
    with pytest.raises(StructuralError) as err:
        forward(full, zero_weights(full), np.zeros((28, 28, 3)))
    assert err.value.name == "input"


def test_saved_weights_load_bit_identical(tmp_path, full):
    bundle = random_weights(full, np.random.default_rng(3))
    path = str(tmp_path / "weights.txt")
    save_weights(bundle, path)
    assert load_weights(full, path).equals(bundle)


def test_truncated_blob_is_rejected(tmp_path, full):
    path = str(tmp_path / "weights.txt")
    save_weights(zero_weights(full), path)
    blob = tmp_path / "weights.txt.bin"
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(StructuralError):
        load_weights(full, path)


def test_width_mismatch_names_first_tensor(tmp_path, full):
    path = str(tmp_path / "weights.txt")
    save_weights(zero_weights(full), path)
    with pytest.raises(StructuralError) as err:
        load_weights(build_microbotnet(0.5, 10), path)
    assert err.value.name == "conv0.weight"
