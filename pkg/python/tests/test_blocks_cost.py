"""Blocks and analytic cost accounting."""

import numpy as np
import pytest

from aseg import (
    ASPP,
    EASPP,
    SSMA,
    AttentionConfig,
    ChannelAttention,
    ConfigError,
    EasppConfig,
    ResidualUnit,
    ShapeError,
    SsmaConfig,
    Tensor,
    UnitConfig,
    build_fusion,
    build_unimodal,
    count_flops,
    count_params,
    cost_report,
    grad_check,
    transfer_encoder,
)
from aseg.blocks import (
    aspp_forward,
    channel_attention_fuse,
    easpp_forward,
    multiscale_residual_forward,
    preact_residual_forward,
    ssma_forward,
)
from aseg.cost import CostReport
from aseg.ops import BN_EPS

ASPP_PARAMS = 15_532_032
EASPP_PARAMS = 2_039_808


def _head_config():
    return EasppConfig(in_channels=2048, branch_channels=256, dilations=[3, 6, 12])


@pytest.fixture(scope="module")
def heads():
    cfg = _head_config()
    return ASPP(cfg, dtype=np.float32), EASPP(cfg, dtype=np.float32)


# ======================================================
# ASPP vs eASPP
# ======================================================

@pytest.mark.unit
def test_aspp_parameter_count(heads):
    aspp, _ = heads
    assert count_params(aspp) == ASPP_PARAMS


@pytest.mark.unit
def test_easpp_parameter_count(heads):
    _, easpp = heads
    assert count_params(easpp) == EASPP_PARAMS


@pytest.mark.unit
def test_easpp_reduction_against_aspp(heads):
    aspp, easpp = heads
    reduction = 100.0 * (1.0 - count_params(easpp) / count_params(aspp))
    assert round(reduction, 2) == 86.87


@pytest.mark.unit
def test_head_flops_at_output_stride_16(heads):
    aspp, easpp = heads
    shape = (1, 2048, 24, 48)
    assert count_flops(aspp, shape) == pytest.approx(34.58e9, rel=1e-3)
    assert count_flops(easpp, shape) == pytest.approx(3.62e9, rel=0.05)


@pytest.mark.unit
def test_heads_need_in_channels():
    with pytest.raises(ConfigError):
        ASPP(EasppConfig())
    with pytest.raises(ConfigError):
        EASPP(EasppConfig())


@pytest.mark.unit
def test_easpp_config_validation():
    with pytest.raises(ConfigError):
        EasppConfig(dilations=[6, 3])
    with pytest.raises(ConfigError):
        EasppConfig(branch_channels=256, bottleneck_channels=48)
    assert EasppConfig(branch_channels=256).bottleneck == 64


@pytest.mark.unit
def test_easpp_forward_shape(rng):
    cfg = EasppConfig(in_channels=6, branch_channels=8, dilations=[1, 2], dropout=0.0)
    head = EASPP(cfg, rng)
    out = head(Tensor(rng.standard_normal((2, 6, 4, 5))))
    assert out.shape == (2, 8, 4, 5)
    with pytest.raises(ShapeError):
        head(Tensor(rng.standard_normal((2, 5, 4, 5))))


@pytest.mark.unit
def test_easpp_cost_matches_parameters(rng):
    cfg = EasppConfig(in_channels=6, branch_channels=8, dilations=[1, 2])
    head = EASPP(cfg, rng)
    report = CostReport()
    head.cost((1, 6, 4, 4), report)
    assert report.total_params == count_params(head, include_norm=True)


# ======================================================
# Residual units
# ======================================================

@pytest.mark.unit
def test_unit_needs_projection_when_shape_changes():
    with pytest.raises(ConfigError):
        UnitConfig(8, 2, 16)
    with pytest.raises(ConfigError):
        UnitConfig(8, 2, 8, stride=2)


@pytest.mark.unit
def test_multiscale_unit_needs_even_bottleneck():
    with pytest.raises(ConfigError):
        UnitConfig(8, 3, 8, dilations=(1, 2), multiscale=True)


@pytest.mark.unit
@pytest.mark.parametrize("multiscale", [False, True])
def test_residual_unit_shapes(rng, multiscale):
    cfg = UnitConfig(8, 4, 16, dilations=(1, 2), stride=2, projection=True, multiscale=multiscale)
    unit = ResidualUnit(cfg, rng)
    out = unit(Tensor(rng.standard_normal((2, 8, 6, 6))))
    assert out.shape == (2, 16, 3, 3)
    assert unit.shortcut_kind == "projection"
    expected = {"conv1", "conv2a", "conv2b", "conv3"} if multiscale else {"conv1", "conv2", "conv3"}
    assert set(unit.groups) == expected
    assert unit.groups["conv3"].masked


@pytest.mark.unit
def test_identity_unit_passes_shortcut_through(rng):
    unit = ResidualUnit(UnitConfig(8, 2, 8), rng=None)
    x = Tensor(rng.standard_normal((1, 8, 4, 4)))
    np.testing.assert_array_equal(unit(x).data, x.data)
    assert unit.shortcut_kind == "identity"


# ======================================================
# Fusion blocks
# ======================================================

@pytest.mark.unit
def test_ssma_bottleneck_width():
    assert SsmaConfig(channels=256, eta=16).bottleneck_channels == 32
    assert SsmaConfig(channels=24, eta=6).bottleneck_channels == 8
    assert SsmaConfig(channels=3, eta=16).bottleneck_channels == 1


@pytest.mark.unit
def test_ssma_gate_and_output(rng):
    block = SSMA(SsmaConfig(channels=4, eta=2), rng)
    xa = Tensor(rng.standard_normal((2, 4, 5, 5)))
    xb = Tensor(rng.standard_normal((2, 4, 5, 5)))
    fused, gate = block(xa, xb)
    assert fused.shape == (2, 4, 5, 5)
    assert gate.shape == (2, 8, 5, 5)
    assert np.all((gate.data > 0) & (gate.data < 1))
    with pytest.raises(ShapeError):
        block(xa, Tensor(rng.standard_normal((2, 4, 5, 4))))


@pytest.mark.unit
def test_channel_attention_scales_skip_channels(rng):
    block = ChannelAttention(AttentionConfig(decoder_channels=6, skip_channels=3), rng)
    block.eval()
    decoder = Tensor(rng.standard_normal((2, 6, 4, 4)))
    skip = Tensor(rng.standard_normal((2, 3, 4, 4)))
    out = block(decoder, skip)
    weights = block.weights(decoder).data
    np.testing.assert_allclose(out.data, skip.data * weights)
    assert np.all(weights >= 0)


@pytest.mark.unit
def test_ssma_with_zero_weights_gates_at_one_half(rng):
    block = SSMA(SsmaConfig(channels=3, eta=2), rng=None)
    block.eval()
    xa = Tensor(rng.standard_normal((1, 3, 4, 4)))
    xb = Tensor(rng.standard_normal((1, 3, 4, 4)))
    fused, gate = ssma_forward(block, xa, xb)
    np.testing.assert_array_equal(gate.data, np.full((1, 6, 4, 4), 0.5))
    np.testing.assert_array_equal(fused.data, np.zeros((1, 3, 4, 4)))


@pytest.mark.unit
def test_channel_attention_with_zero_weights_silences_skip(rng):
    block = ChannelAttention(AttentionConfig(decoder_channels=4, skip_channels=2), rng=None)
    block.eval()
    out = channel_attention_fuse(block, Tensor(np.zeros((1, 4, 3, 3))),
                                 Tensor(rng.standard_normal((1, 2, 3, 3))))
    np.testing.assert_array_equal(out.data, np.zeros((1, 2, 3, 3)))


# ======================================================
# Functional entry points
# ======================================================

@pytest.mark.unit
def test_residual_forward_functions_check_the_variant(rng):
    plain = ResidualUnit(UnitConfig(8, 4, 8), rng)
    multi = ResidualUnit(UnitConfig(8, 4, 8, dilations=(1, 2), multiscale=True), rng)
    plain.eval()
    multi.eval()
    x = Tensor(rng.standard_normal((1, 8, 5, 5)))
    np.testing.assert_array_equal(preact_residual_forward(plain, x).data, plain(x).data)
    np.testing.assert_array_equal(multiscale_residual_forward(multi, x).data, multi(x).data)
    with pytest.raises(ConfigError):
        preact_residual_forward(multi, x)
    with pytest.raises(ConfigError):
        multiscale_residual_forward(plain, x)


@pytest.mark.unit
def test_head_forward_functions(rng):
    cfg = EasppConfig(in_channels=6, branch_channels=8, dilations=[1, 2], dropout=0.0)
    x = Tensor(rng.standard_normal((1, 6, 4, 4)))
    for head, forward in ((ASPP(cfg, rng), aspp_forward), (EASPP(cfg, rng), easpp_forward)):
        head.eval()
        out = forward(head, x)
        assert out.shape == (1, 8, 4, 4)
        np.testing.assert_array_equal(out.data, head(x).data)


# ======================================================
# Hand-set constructions
# ======================================================

def _pass_only_stream_a(block):
    c = block.cfg.channels
    for conv in (block.gate1, block.gate2):
        conv.weight.data[...] = 0.0
        conv.bias.data[...] = 0.0
    block.gate2.bias.data[:c] = 40.0
    block.gate2.bias.data[c:] = -40.0


@pytest.mark.unit
def test_multiscale_unit_with_split_weights_matches_plain_unit(rng):
    plain = ResidualUnit(UnitConfig(8, 4, 8), rng)
    multi = ResidualUnit(UnitConfig(8, 4, 8, multiscale=True), rng=None)
    source = dict(plain.named_parameters())
    w = plain.conv2.weight.data
    for name, p in multi.named_parameters():
        if name == "conv2a.weight":
            p.data = w[:2].copy()
        elif name == "conv2b.weight":
            p.data = w[2:].copy()
        else:
            p.data = source[name].data.copy()
    assert count_params(multi) == count_params(plain)

    x = Tensor(rng.standard_normal((2, 8, 5, 5)))
    for training in (True, False):
        plain.train(training)
        multi.train(training)
        np.testing.assert_allclose(multi(x).data, plain(x).data, atol=1e-12)


@pytest.mark.unit
def test_ssma_with_suppressed_modality_b_ignores_it(rng):
    block = SSMA(SsmaConfig(channels=3, eta=2), rng)
    block.eval()
    _pass_only_stream_a(block)
    xa = Tensor(rng.standard_normal((2, 3, 4, 4)))
    fused, gate = block(xa, Tensor(rng.standard_normal((2, 3, 4, 4))))
    noisy, _ = block(xa, Tensor(rng.normal(0.0, 10.0, (2, 3, 4, 4))))
    assert np.all(gate.data[:, :3] > 1.0 - 1e-15)
    assert np.all(gate.data[:, 3:] < 1e-15)
    np.testing.assert_allclose(noisy.data, fused.data, atol=1e-12)


@pytest.mark.unit
def test_fusion_passing_only_stream_a_reproduces_unimodal_a(tiny_batch, fusion_config_factory):
    cfg = fusion_config_factory()
    unimodal = build_unimodal(cfg.stream_a, seed=3)
    fusion = build_fusion(cfg, seed=5)
    transfer_encoder(fusion, unimodal, "a")
    source = dict(unimodal.named_parameters())
    for name, p in fusion.named_parameters():
        if name.startswith("decoder."):
            p.data = source[name].data.copy()
        elif name.startswith("stream_b."):
            p.data[...] = 0.0
    for block in (fusion.ssma_latent, fusion.ssma_skip1, fusion.ssma_skip2):
        _pass_only_stream_a(block)
        centre = block.cfg.kernel_size // 2
        block.fuse.weight.data[...] = 0.0
        for i in range(block.cfg.channels):
            block.fuse.weight.data[i, i, centre, centre] = 1.0
        block.bn_fuse.gamma.data[...] = np.sqrt(1.0 + BN_EPS)
    for attention in (fusion.attention1, fusion.attention2):
        attention.reduce.weight.data[...] = 0.0
        attention.bn.beta.data[...] = 1.0

    unimodal.eval()
    fusion.eval()
    expected = unimodal.forward_batch(tiny_batch).main.data
    np.testing.assert_allclose(fusion.forward_batch(tiny_batch).main.data, expected, atol=1e-6)


# ======================================================
# Gradient checks
# ======================================================

BLOCKS = ["plain_unit", "multiscale_unit", "projection_unit", "easpp", "ssma", "attention"]


def _block_case(name, rng):
    """A block in training mode and input tensors for it."""
    if name == "plain_unit":
        block, shapes = ResidualUnit(UnitConfig(6, 4, 6, dilations=(2, 2)), rng), [(2, 6, 5, 5)]
    elif name == "multiscale_unit":
        block = ResidualUnit(UnitConfig(6, 4, 6, dilations=(1, 2), multiscale=True), rng)
        shapes = [(2, 6, 5, 5)]
    elif name == "projection_unit":
        block = ResidualUnit(UnitConfig(4, 2, 6, stride=2, projection=True), rng)
        shapes = [(2, 4, 6, 6)]
    elif name == "easpp":
        block = EASPP(EasppConfig(in_channels=64, branch_channels=8, dilations=[1, 2], dropout=0.0), rng)
        shapes = [(4, 64, 3, 3)]
    elif name == "ssma":
        block, shapes = SSMA(SsmaConfig(channels=3, eta=2), rng), [(2, 3, 4, 4), (2, 3, 4, 4)]
    else:
        block = ChannelAttention(AttentionConfig(decoder_channels=4, skip_channels=3), rng)
        shapes = [(4, 4, 3, 3), (4, 3, 3, 3)]
    return block, [Tensor(rng.standard_normal(s)) for s in shapes]


@pytest.mark.unit
@pytest.mark.parametrize("name", BLOCKS)
def test_block_gradients(rng, name):
    block, inputs = _block_case(name, rng)
    assert block.training
    n = len(inputs)
    params = [p for _, p in block.named_parameters()]

    def forward(*tensors):
        out = block(*tensors[:n])
        return out[0] if isinstance(out, tuple) else out

    assert grad_check(forward, inputs + params) < 1e-4


# ======================================================
# Whole-graph accounting
# ======================================================

@pytest.mark.unit
def test_unimodal_cost_covers_every_parameter(model_config_factory):
    graph = build_unimodal(model_config_factory(), seed=None)
    report = cost_report(graph, (3, 32, 32))
    assert report.total_params == count_params(graph, include_norm=True)
    assert report.total_flops > 0


@pytest.mark.unit
def test_fusion_cost_covers_every_parameter(fusion_config_factory):
    graph = build_fusion(fusion_config_factory(), seed=None)
    report = cost_report(graph, (3, 32, 32))
    assert report.total_params == count_params(graph, include_norm=True)


@pytest.mark.unit
def test_flops_scale_with_resolution(model_config_factory):
    graph = build_unimodal(model_config_factory(), seed=None)
    small = count_flops(graph, (1, 3, 32, 32))
    large = count_flops(graph, (1, 3, 64, 64))
    assert 3.5 * small < large < 4.5 * small


@pytest.mark.unit
def test_cost_csv_is_write_once(tmp_path, model_config_factory):
    graph = build_unimodal(model_config_factory(), seed=None)
    report = cost_report(graph, (3, 32, 32))
    path = tmp_path / "cost.csv"
    report.to_csv(str(path))
    lines = path.read_text().splitlines()
    assert lines[0] == "layer,name,params,flops"
    assert len(lines) == len(report.rows) + 1
    with pytest.raises(FileExistsError):
        report.to_csv(str(path))
