import io
import math

import numpy as np
import pytest
import torch

from noisy_lf_saliency import gradcore
from noisy_lf_saliency.exceptions import DimensionError, TensorFormatError
from noisy_lf_saliency.fusion import ArchitectureConfig, build_network
from noisy_lf_saliency.noiseloss import PeerBatch, penalty_loss


def _dense_conv(x, w, b, stride, padding):
    """Nested-loop cross-correlation of one (C, H, W) input"""
    c_out, c_in, kh, kw = w.shape
    padded = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    oh = (padded.shape[1] - kh) // stride + 1
    ow = (padded.shape[2] - kw) // stride + 1
    out = np.zeros((c_out, oh, ow))
    for o in range(c_out):
        for i in range(oh):
            for j in range(ow):
                total = b[o]
                for c in range(c_in):
                    for di in range(kh):
                        for dj in range(kw):
                            total += w[o, c, di, dj] * padded[c, i * stride + di, j * stride + dj]
                out[o, i, j] = total
    return out


def _leaf(*shape, seed=0):
    generator = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=generator, dtype=torch.float64).requires_grad_(True)


def test_conv2d_identity_kernel():
    """A 1x1 kernel of value 1 returns its input"""
    x = torch.rand(1, 5, 5, dtype=torch.float64)
    out = gradcore.conv2d(x, torch.ones(1, 1, 1, 1, dtype=torch.float64),
                          torch.zeros(1, dtype=torch.float64))
    assert torch.equal(out, x)


def test_conv2d_constant_field():
    """All-ones 3x3 kernel on a constant field gives 9c in the interior"""
    x = torch.full((1, 6, 6), 0.7, dtype=torch.float64)
    out = gradcore.conv2d(x, torch.ones(1, 1, 3, 3, dtype=torch.float64), padding=1)
    assert out.shape == (1, 6, 6)
    assert out[0, 2, 3].item() == pytest.approx(9 * 0.7)
    assert out[0, 0, 0].item() == pytest.approx(4 * 0.7)


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
def test_conv2d_matches_dense_oracle(stride, padding):
    rng = np.random.default_rng(stride * 10 + padding)
    x = rng.standard_normal((2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    out = gradcore.conv2d(torch.from_numpy(x), torch.from_numpy(w), torch.from_numpy(b),
                          stride=stride, padding=padding)
    expected = _dense_conv(x, w, b, stride, padding)
    assert out.shape == expected.shape
    assert out.shape[-1] == (5 + 2 * padding - 3) // stride + 1
    np.testing.assert_allclose(out.numpy(), expected, rtol=0, atol=1e-12)


def test_conv2d_names_offending_axes():
    x = torch.zeros(1, 2, 5, 5)
    with pytest.raises(DimensionError) as info:
        gradcore.conv2d(x, torch.zeros(1, 3, 3, 3))
    assert info.value.axes == ("input.channels", "weights.in_channels")
    assert info.value.sizes == (2, 3)
    with pytest.raises(DimensionError):
        gradcore.conv2d(x, torch.zeros(1, 2, 7, 7))
    with pytest.raises(DimensionError):
        gradcore.conv2d(x, torch.zeros(1, 2, 3, 3), stride=0)


def test_softmax_examples():
    uniform = gradcore.softmax(torch.zeros(5, dtype=torch.float64), axis=0)
    assert torch.allclose(uniform, torch.full((5,), 0.2, dtype=torch.float64))

    out = gradcore.softmax(torch.tensor([0.0, math.log(3.0)], dtype=torch.float64), axis=0)
    assert out.tolist() == pytest.approx([0.25, 0.75], abs=1e-15)


def test_softmax_is_shift_invariant():
    x = torch.randn(3, 7, dtype=torch.float64)
    out = gradcore.softmax(x, axis=1)
    shifted = gradcore.softmax(x + 100.0, axis=1)
    assert torch.allclose(out, shifted, rtol=0, atol=1e-9)
    assert torch.all(out >= 0)
    assert torch.allclose(out.sum(dim=1), torch.ones(3, dtype=torch.float64), atol=1e-6)
    with pytest.raises(DimensionError):
        gradcore.softmax(x, axis=2)


@pytest.mark.parametrize("seed", range(20))
def test_softmax_stays_normalized_for_large_logits(seed):
    generator = torch.Generator().manual_seed(seed)
    x = 50.0 * (2.0 * torch.rand(4, 9, generator=generator, dtype=torch.float64) - 1.0)
    x[0, 0], x[1, 0] = 50.0, -50.0
    out = gradcore.softmax(x, axis=1)
    assert torch.isfinite(out).all()
    assert torch.allclose(out.sum(dim=1), torch.ones(4, dtype=torch.float64), rtol=0, atol=1e-6)


def test_elementwise_primitives():
    x = torch.tensor([-1.0, 0.0, 2.0], dtype=torch.float64)
    assert gradcore.relu(x).tolist() == [0.0, 0.0, 2.0]
    assert gradcore.sigmoid(torch.zeros(1)).item() == 0.5
    assert gradcore.tanh(torch.zeros(1)).item() == 0.0
    assert gradcore.add(x, torch.ones(1, dtype=torch.float64)).tolist() == [0.0, 1.0, 3.0]
    with pytest.raises(DimensionError):
        gradcore.mul(torch.zeros(2, 3), torch.zeros(4))


def test_concat_and_pooling():
    a, b = torch.ones(2, 1, 4, 4), torch.zeros(2, 3, 4, 4)
    out = gradcore.concat([a, b])
    assert out.shape == (2, 4, 4, 4)
    assert gradcore.global_avg_pool(out).shape == (2, 4, 1, 1)
    assert gradcore.global_avg_pool(out)[0, 0].item() == 1.0
    with pytest.raises(DimensionError):
        gradcore.concat([a, torch.zeros(2, 1, 5, 4)])
    with pytest.raises(DimensionError):
        gradcore.concat([])


def test_upsample_keeps_corners_and_constants():
    x = torch.rand(1, 3, 4, dtype=torch.float64)
    out = gradcore.upsample(x)
    assert out.shape == (1, 6, 8)
    assert out[0, 0, 0] == x[0, 0, 0]
    assert out[0, -1, -1] == x[0, -1, -1]
    const = gradcore.upsample(torch.full((1, 2, 2), 0.3, dtype=torch.float64), size=(5, 7))
    assert torch.allclose(const, torch.full((1, 5, 7), 0.3, dtype=torch.float64))
    with pytest.raises(DimensionError):
        gradcore.upsample(x, scale=3)


def test_primitive_set_lists_operators():
    assert set(gradcore.primitive_set()) == {"conv2d", "softmax", "sigmoid", "tanh", "relu", "add",
                                             "mul", "concat", "global_avg_pool", "upsample"}


@pytest.mark.parametrize("name,build", [
    ("conv2d", lambda t: gradcore.conv2d(t["x"], t["w"], t["b"], stride=2, padding=1)),
    ("softmax", lambda t: gradcore.softmax(t["x"], axis=1) * t["x"]),
    ("sigmoid", lambda t: gradcore.sigmoid(t["x"])),
    ("tanh", lambda t: gradcore.tanh(t["x"])),
    ("relu", lambda t: gradcore.relu(t["x"] + 5.0)),
    ("add", lambda t: gradcore.add(t["x"], t["b"].view(1, 3, 1, 1)[:, :2])),
    ("mul", lambda t: gradcore.mul(t["x"], t["x"])),
    ("concat", lambda t: gradcore.concat([t["x"], 2.0 * t["x"]])),
    ("global_avg_pool", lambda t: gradcore.global_avg_pool(t["x"] ** 2)),
    ("upsample", lambda t: gradcore.upsample(t["x"]) ** 2),
])
@pytest.mark.parametrize("seed", range(10))
def test_grad_check_passes_for_every_primitive(name, build, seed):
    tensors = {"x": _leaf(1, 2, 4, 4, seed=3 * seed + 1), "w": _leaf(3, 2, 3, 3, seed=3 * seed + 2),
               "b": _leaf(3, seed=3 * seed + 3)}
    weights = torch.randn(build(tensors).shape, generator=torch.Generator().manual_seed(100 + seed),
                          dtype=torch.float64)
    report = gradcore.grad_check(lambda: (build(tensors) * weights).sum(), tensors)
    assert report.passed, f"{name}: {report.max_relative_error}"


def test_grad_check_detects_wrong_gradient():
    class DoubledBackward(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            ctx.save_for_backward(x)
            return x * x

        @staticmethod
        def backward(ctx, grad):
            (x,) = ctx.saved_tensors
            return 4.0 * x * grad

    x = _leaf(6, seed=5)
    report = gradcore.grad_check(lambda: DoubledBackward.apply(x).sum(), [x])
    assert not report.passed
    assert report.worst == pytest.approx(0.5, rel=1e-3)


def test_grad_check_rejects_single_precision():
    x = torch.zeros(3, requires_grad=True)
    with pytest.raises(TypeError):
        gradcore.grad_check(lambda: x.sum(), [x])


def _fused_loss_setup(float64_inputs):
    config = ArchitectureConfig(k=3, channels=1, widths=(4, 8), levels=2, head_width=4)
    network, params = build_network(config, seed=3, dtype=torch.float64)
    all_focus, focal_stack, labels = float64_inputs
    generator = torch.Generator().manual_seed(11)
    m_f = torch.rand(3, 16, 16, generator=generator, dtype=torch.float64)
    m_r = torch.rand(3, 16, 16, generator=generator, dtype=torch.float64)
    pairs = torch.tensor([[[1, 2]], [[2, 0]], [[0, 1]]])

    def loss():
        triple = network(all_focus, focal_stack, m_f, m_r)
        return sum(penalty_loss(PeerBatch(s, labels, pairs, alpha=0.2, m_l=2)) for s in triple)

    return params, loss


def test_grad_check_full_fused_loss_output_layers(float64_inputs):
    """Gradient of the complete loss through fusion and both heads, 16x16, k = 3"""
    params, loss = _fused_loss_setup(float64_inputs)
    names = ["fusion.weight", "fusion.bias", "focal_head.readout.weight",
             "focus_head.readout.bias"]
    report = gradcore.grad_check(loss, {n: params[n] for n in names}, max_elements=6)
    assert report.passed, report.max_relative_error


def test_replayed_loss_is_bit_identical(float64_inputs):
    """The same forward and backward twice give equal values and gradients"""
    params, loss = _fused_loss_setup(float64_inputs)
    replays = []
    for _ in range(2):
        value = loss()
        grads = torch.autograd.grad(value, [p for _, p in params], allow_unused=True,
                                    materialize_grads=True)
        replays.append((value.detach(), grads))
    (first, first_grads), (second, second_grads) = replays
    assert torch.equal(first, second)
    assert all(torch.equal(a, b) for a, b in zip(first_grads, second_grads))


@pytest.mark.slow
def test_grad_check_full_fused_loss_every_parameter(float64_inputs):
    params, loss = _fused_loss_setup(float64_inputs)
    report = gradcore.grad_check(loss, dict(params), max_elements=4)
    assert report.passed, report.max_relative_error


def test_parameter_set_is_sorted_and_seeded():
    config = ArchitectureConfig(k=2, channels=1, widths=(4, 4), levels=2, head_width=4)
    _, first = build_network(config, seed=9, dtype=torch.float64)
    _, second = build_network(config, seed=9, dtype=torch.float64)
    assert first.names() == sorted(first.names())
    for (name, a), (_, b) in zip(first, second):
        assert torch.equal(a, b), name
        assert first.gradient(name).shape == a.shape
    weight = first["fusion.weight"]
    assert weight.abs().max() <= math.sqrt(1.0 / weight[0].numel())


def test_parameter_set_state_round_trip():
    config = ArchitectureConfig(k=2, channels=1, widths=(4, 4), levels=2, head_width=4)
    _, params = build_network(config, seed=1, dtype=torch.float64)
    _, other = build_network(config, seed=2, dtype=torch.float64)
    other.load_state(params.state())
    for (name, a), (_, b) in zip(params, other):
        assert torch.equal(a, b), name
    state = params.state()
    state.pop("fusion.bias")
    with pytest.raises(DimensionError):
        other.load_state(state)


def test_tensor_stream_is_deterministic():
    tensors = {"b": torch.arange(6, dtype=torch.float32).view(2, 3), "a": torch.tensor(1.5)}
    first, second = io.BytesIO(), io.BytesIO()
    gradcore.write_tensors(first, tensors)
    gradcore.write_tensors(second, dict(reversed(list(tensors.items()))))
    assert first.getvalue() == second.getvalue()
    assert first.getvalue().startswith(b'{"dtype": "float32", "name": "a", "shape": []}\n')
    first.seek(0)
    restored = gradcore.read_tensors(first)
    assert list(restored) == ["a", "b"]
    assert torch.equal(restored["b"], tensors["b"])


def test_tensor_stream_rejects_corruption():
    buffer = io.BytesIO()
    gradcore.write_tensors(buffer, {"x": torch.ones(4)})
    with pytest.raises(TensorFormatError):
        gradcore.read_tensors(io.BytesIO(buffer.getvalue()[:-3]))
    with pytest.raises(TensorFormatError):
        gradcore.read_tensors(io.BytesIO(b"not a header\n"))
