import math

import numpy as np
import pytest
import torch

from noisy_lf_saliency import gradcore
from noisy_lf_saliency.exceptions import ConfigError, DimensionError
from noisy_lf_saliency.fusion import (ArchitectureConfig, ChannelAttention, ConvLSTMCell, Encoder, Head,
                                      PixelGuidance, build_network, encode, refine_slices)


def _randomize(module, seed):
    gradcore.ParameterSet(module).initialize(seed)
    return module


def test_identical_slices_share_features(tiny_architecture):
    network, _ = build_network(tiny_architecture, seed=0, dtype=torch.float64)
    image = torch.rand(2, 1, 16, 16, dtype=torch.float64)
    stack = image.unsqueeze(1).repeat(1, 3, 1, 1, 1)
    features = encode(network, image, stack)
    assert features.levels == 2
    for F in features.F:
        assert torch.allclose(F[:, 0], F[:, 1], rtol=0, atol=1e-12)
        assert torch.allclose(F[:, 1], F[:, 2], rtol=0, atol=1e-12)
    assert features.R[0].shape == (2, 4, 8, 8)
    assert features.F[1].shape == (2, 3, 8, 4, 4)


def test_zero_input_with_zero_biases_gives_zero_features():
    encoder = _randomize(Encoder(1, (4, 8)), seed=1)
    with torch.no_grad():
        for name, p in encoder.named_parameters():
            if name.endswith("bias"):
                p.zero_()
    for level in encoder(torch.zeros(1, 1, 16, 16)):
        assert not level.any()


def test_encode_rejects_bad_shapes(tiny_architecture):
    network, _ = build_network(tiny_architecture, seed=0)
    with pytest.raises(DimensionError, match="divisible"):
        encode(network, torch.zeros(1, 1, 18, 16), torch.zeros(1, 3, 1, 18, 16))
    with pytest.raises(DimensionError) as info:
        encode(network, torch.zeros(1, 1, 16, 16), torch.zeros(1, 4, 1, 16, 16))
    assert "k" in info.value.axes
    with pytest.raises(DimensionError):
        encode(network, torch.zeros(1, 1, 16, 16), torch.zeros(1, 3, 1, 8, 8))


def test_equal_logits_give_uniform_attention():
    """Zeroed parameters make every group logit equal"""
    attention, weighted = ChannelAttention(4)(torch.rand(2, 4, 3, 3), torch.rand(2, 5, 4, 3, 3))
    assert torch.allclose(attention, torch.full((2, 6), 1 / 6))


def _channel_attention_oracle(module, R, F):
    ws = module.slice_logit.weight.detach().numpy().reshape(-1)
    bs = module.slice_logit.bias.item()
    wf = module.focus_logit.weight.detach().numpy().reshape(-1)
    bf = module.focus_logit.bias.item()
    R, F = R.numpy(), F.numpy()
    B, k, C = F.shape[:3]
    expected = np.zeros_like(F)
    weights = np.zeros((B, k + 1))
    for b in range(B):
        pooled_r = [R[b, c].mean() for c in range(C)]
        logits = [bf + sum(wf[c] * pooled_r[c] for c in range(C))]
        for i in range(k):
            pooled = [F[b, i, c].mean() for c in range(C)]
            logits.append(bs + sum(ws[c] * pooled[c] for c in range(C))
                          + sum(ws[C + c] * pooled_r[c] for c in range(C)))
        top = max(logits)
        exps = [math.exp(z - top) for z in logits]
        weights[b] = [e / sum(exps) for e in exps]
        for i in range(k):
            expected[b, i] = F[b, i] * weights[b, i + 1]
    return weights, expected


@pytest.mark.parametrize("seed", range(100))
def test_channel_attention_matches_oracle(seed):
    generator = torch.Generator().manual_seed(seed)
    module = _randomize(ChannelAttention(3), seed).double()
    R = torch.randn(2, 3, 4, 4, generator=generator, dtype=torch.float64)
    F = torch.randn(2, 4, 3, 4, 4, generator=generator, dtype=torch.float64)
    attention, weighted = module(R, F)
    weights, expected = _channel_attention_oracle(module, R, F)
    np.testing.assert_allclose(attention.detach().numpy(), weights, rtol=0, atol=1e-10)
    np.testing.assert_allclose(weighted.detach().numpy(), expected, rtol=0, atol=1e-10)


def test_channel_attention_follows_slice_order():
    """Permuting the slices permutes their weights; the all-focus weight is unchanged"""
    generator = torch.Generator().manual_seed(21)
    module = _randomize(ChannelAttention(3), 21).double()
    R = torch.randn(2, 3, 4, 4, generator=generator, dtype=torch.float64)
    F = torch.randn(2, 4, 3, 4, 4, generator=generator, dtype=torch.float64)
    order = torch.tensor([2, 0, 3, 1])
    attention, weighted = module(R, F)
    permuted, permuted_weighted = module(R, F[:, order])
    assert torch.allclose(permuted[:, 0], attention[:, 0], rtol=0, atol=1e-12)
    assert torch.allclose(permuted[:, 1:], attention[:, 1:][:, order], rtol=0, atol=1e-12)
    assert torch.allclose(permuted_weighted, weighted[:, order], rtol=0, atol=1e-12)


def test_zero_attention_zeroes_slice():
    module = ChannelAttention(2).double()
    with torch.no_grad():
        module.slice_logit.bias.fill_(-800.0)
    F = torch.rand(1, 3, 2, 4, 4, dtype=torch.float64)
    attention, weighted = module(torch.rand(1, 2, 4, 4, dtype=torch.float64), F)
    assert torch.all(attention[:, 1:] == 0)
    assert not weighted.any()


def test_convlstm_with_zero_parameters_stays_at_rest():
    """Gates sit at 0.5 and the candidate at 0, so a zero state stays zero"""
    cell = ConvLSTMCell(2, 3)
    state = cell(torch.rand(1, 2, 4, 4))
    assert not state.h.any()
    assert not state.c.any()


def test_convlstm_gate_equations():
    cell = _randomize(ConvLSTMCell(2, 3), seed=4).double()
    x = torch.rand(1, 2, 5, 5, dtype=torch.float64)
    first = cell(x)
    second = cell(x, first)
    z = gradcore.conv2d(torch.cat([x, first.h], dim=1), cell.gates.weight, cell.gates.bias, padding=1)
    i, f, o, g = torch.chunk(z, 4, dim=1)
    c = torch.sigmoid(f) * first.c + torch.sigmoid(i) * torch.tanh(g)
    assert torch.allclose(second.c, c, atol=1e-12)
    assert torch.allclose(second.h, torch.sigmoid(o) * torch.tanh(c), atol=1e-12)


def test_single_slice_recurrence_uses_that_slice_only():
    cell = _randomize(ConvLSTMCell(2, 2), seed=2).double()
    x = torch.rand(1, 1, 2, 4, 4, dtype=torch.float64)
    assert torch.equal(refine_slices(x, cell), cell(x[:, 0]).h)
    with pytest.raises(DimensionError):
        refine_slices(x[:, 0], cell)


def test_middle_slice_reaches_refined_features():
    """8x8, k = 3: the refined output depends on slice 1 with a correct gradient"""
    cell = _randomize(ConvLSTMCell(2, 2), seed=6).double()
    x = torch.rand(1, 3, 2, 8, 8, generator=torch.Generator().manual_seed(6),
                   dtype=torch.float64).requires_grad_(True)
    weights = torch.randn(1, 2, 8, 8, generator=torch.Generator().manual_seed(7), dtype=torch.float64)
    refine_slices(x, cell).mul(weights).sum().backward()
    assert x.grad[:, 1].abs().sum() > 0
    report = gradcore.grad_check(lambda: (refine_slices(x, cell) * weights).sum(), [x],
                                 max_elements=48)
    assert report.passed, report.max_relative_error


def test_uniform_pixel_attention():
    """Constant scores give a uniform softmax, so R' = R (1 + 1 / (h w))"""
    guidance = PixelGuidance(3)
    R = torch.rand(2, 4, 5, 6, dtype=torch.float64)
    out = guidance.double()(R, torch.rand(2, 3, 5, 6, dtype=torch.float64))
    assert torch.allclose(out, R * (1 + 1 / 30), atol=1e-12)
    assert not guidance(torch.zeros_like(R), torch.rand(2, 3, 5, 6, dtype=torch.float64)).any()


@pytest.mark.parametrize("seed", range(100))
@pytest.mark.parametrize("mode", ["softmax", "sigmoid"])
def test_pixel_guidance_matches_oracle(seed, mode):
    generator = torch.Generator().manual_seed(seed)
    module = _randomize(PixelGuidance(3, mode), seed).double()
    R = torch.randn(1, 2, 4, 5, generator=generator, dtype=torch.float64)
    refined = torch.randn(1, 3, 4, 5, generator=generator, dtype=torch.float64)
    w = module.score.weight.detach().numpy().reshape(-1)
    b = module.score.bias.item()
    scores = np.array([[b + sum(w[c] * refined[0, c, y, x].item() for c in range(3))
                        for x in range(5)] for y in range(4)])
    if mode == "softmax":
        att = np.exp(scores - scores.max())
        att /= att.sum()
    else:
        att = 1.0 / (1.0 + np.exp(-scores))
    expected = R[0].numpy() * att[None] + R[0].numpy()
    np.testing.assert_allclose(module(R, refined)[0].detach().numpy(), expected, rtol=0, atol=1e-10)


def test_pixel_guidance_rejects_mismatched_grids():
    with pytest.raises(DimensionError):
        PixelGuidance(2)(torch.zeros(1, 2, 4, 4), torch.zeros(1, 2, 2, 2))


def test_identical_heads_agree():
    first = _randomize(Head((4, 8), 4), seed=3).double()
    second = Head((4, 8), 4).double()
    second.load_state_dict(first.state_dict())
    features = [torch.rand(2, 4, 8, 8, dtype=torch.float64), torch.rand(2, 8, 4, 4, dtype=torch.float64)]
    s_f, s_r = first(features, (16, 16)), second(features, (16, 16))
    assert s_f.shape == (2, 16, 16)
    assert torch.equal(s_f, s_r)
    assert torch.all((s_f > 0) & (s_f < 1))
    with pytest.raises(DimensionError):
        first(features[:1], (16, 16))


def test_network_forward(tiny_architecture, float64_inputs):
    network, params = build_network(tiny_architecture, seed=0, dtype=torch.float64)
    all_focus, focal_stack, _ = float64_inputs
    triple = network(all_focus, focal_stack)
    for s in triple:
        assert s.shape == (3, 16, 16)
        assert torch.all((s > 0) & (s < 1))
    ones = torch.ones(3, 16, 16, dtype=torch.float64)
    assert torch.equal(network(all_focus, focal_stack, ones, ones).s_i, triple.s_i)
    assert len(params) == len(dict(network.named_parameters()))


def test_mffo_switch_removes_attention(tiny_architecture):
    plain, params = build_network(ArchitectureConfig(**{**tiny_architecture.to_dict(), "mffo": False}),
                                  seed=0)
    assert not hasattr(plain, "channel_attention")
    assert not any(n.startswith(("channel_attention", "pixel_guidance")) for n in params.names())
    full, full_params = build_network(tiny_architecture, seed=0)
    assert full_params.num_elements() > params.num_elements()


def test_deepest_encoder_stages_receive_gradient():
    config = ArchitectureConfig(k=3, channels=1, widths=(8, 8, 8, 8), levels=4, head_width=4)
    network, params = build_network(config, seed=2, dtype=torch.float64)
    generator = torch.Generator().manual_seed(9)
    all_focus = torch.rand(2, 1, 32, 32, generator=generator, dtype=torch.float64)
    focal_stack = torch.rand(2, 3, 1, 32, 32, generator=generator, dtype=torch.float64)
    sum(s.sum() for s in network(all_focus, focal_stack)).backward()
    for name in ("focus_encoder.stages.3.0.weight", "slice_encoder.stages.3.0.weight"):
        assert params[name].grad is not None and params[name].grad.abs().sum() > 0, name


def test_baseline_merges_slices_recurrently(tiny_architecture, float64_inputs):
    """Without mffo the unweighted slices still pass through the ConvLSTM in order"""
    config = ArchitectureConfig(**{**tiny_architecture.to_dict(), "mffo": False})
    network, params = build_network(config, seed=4, dtype=torch.float64)
    assert len(network.refiners) == config.levels
    assert not hasattr(network, "pixel_guidance")
    assert any(n.startswith("refiners") for n in params.names())
    all_focus, focal_stack, _ = float64_inputs
    s_f, _ = network.initial_predictions(all_focus, focal_stack)
    reversed_f, _ = network.initial_predictions(all_focus, focal_stack.flip(1))
    assert not torch.allclose(s_f, reversed_f)


def test_architecture_config_validation():
    assert ArchitectureConfig(levels=3).divisor == 8
    with pytest.raises(ConfigError):
        ArchitectureConfig(levels=5).validate()
    with pytest.raises(ConfigError):
        ArchitectureConfig(widths=(4,), levels=2).validate()
    with pytest.raises(ConfigError):
        ArchitectureConfig(fusion_kernel=2).validate()
    with pytest.raises(ConfigError):
        ArchitectureConfig(pixel_attention="cosine").validate()
    with pytest.raises(ConfigError):
        ArchitectureConfig.from_dict({"depth": 3})
    config = ArchitectureConfig(widths=(4, 8), levels=2)
    assert ArchitectureConfig.from_dict(config.to_dict()) == config
