"""
Differentiable operator core
Primitive operators, the parameter store, a finite-difference gradient oracle and the tensor
stream format used by checkpoints.

Reverse-mode differentiation is delegated to torch autograd: the autograd graph recorded during
a forward pass is replayed backwards by ``Tensor.backward``. ``grad_check`` never uses autograd
for its numeric side, so it stays an independent check of every operator built here.
"""

import json
import logging
import math
from collections.abc import Callable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .exceptions import DimensionError, TensorFormatError

CHANNEL_AXIS = -3


def _with_batch(x: torch.Tensor, name: str) -> tuple[torch.Tensor, bool]:
    """Return a 4-axis view of x and whether a batch axis was added"""
    if x.dim() == 4:
        return x, False
    if x.dim() == 3:
        return x.unsqueeze(0), True
    raise DimensionError(f"{name} must have 3 or 4 axes", (f"{name}.ndim",), (x.dim(),))


def conv2d(input: torch.Tensor, weights: torch.Tensor, bias: torch.Tensor | None = None,
           stride: int = 1, padding: int = 0) -> torch.Tensor:
    """2-D cross-correlation with zero padding

    Args:
        input: (B, C, H, W) or (C, H, W) tensor
        weights: (C_out, C, kh, kw) kernel
        bias: Optional (C_out,) bias
        stride: Step between kernel applications, at least 1
        padding: Zero padding added on every side

    Returns:
        Tensor with spatial size floor((in + 2*padding - kernel) / stride) + 1
    """
    x, squeeze = _with_batch(input, "input")
    if weights.dim() != 4:
        raise DimensionError("weights must have 4 axes", ("weights.ndim",), (weights.dim(),))
    if stride < 1:
        raise DimensionError("stride must be at least 1", ("stride",), (stride,))
    if weights.shape[1] != x.shape[1]:
        raise DimensionError("input channels do not match kernel",
                             ("input.channels", "weights.in_channels"),
                             (x.shape[1], weights.shape[1]))
    if bias is not None and tuple(bias.shape) != (weights.shape[0],):
        raise DimensionError("bias does not match kernel output channels",
                             ("bias.size", "weights.out_channels"),
                             (bias.numel(), weights.shape[0]))
    for axis, size, k in (("height", x.shape[2], weights.shape[2]),
                          ("width", x.shape[3], weights.shape[3])):
        if size + 2 * padding < k:
            raise DimensionError("kernel does not fit the padded input",
                                 (f"input.{axis}+2*padding", f"weights.{axis}"),
                                 (size + 2 * padding, k))
    out = F.conv2d(x, weights, bias, stride=stride, padding=padding)
    return out.squeeze(0) if squeeze else out


def softmax(input: torch.Tensor, axis: int) -> torch.Tensor:
    """Softmax along one axis (max-shifted, so adding a constant leaves the output unchanged)"""
    if not -input.dim() <= axis < input.dim():
        raise DimensionError("softmax axis out of range", ("axis", "ndim"), (axis, input.dim()))
    return torch.softmax(input, dim=axis)


def sigmoid(input: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(input)


def tanh(input: torch.Tensor) -> torch.Tensor:
    return torch.tanh(input)


def relu(input: torch.Tensor) -> torch.Tensor:
    return torch.relu(input)


def _check_broadcast(a: torch.Tensor, b: torch.Tensor) -> None:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError as e:
        raise DimensionError(f"operands do not broadcast: {tuple(a.shape)} vs {tuple(b.shape)}",
                             ("lhs.shape", "rhs.shape")) from e


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check_broadcast(a, b)
    return a + b


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check_broadcast(a, b)
    return a * b


def concat(tensors: Sequence[torch.Tensor]) -> torch.Tensor:
    """Concatenate along the channel axis"""
    if not tensors:
        raise DimensionError("nothing to concatenate", ("count",), (0,))
    first = tensors[0]
    if first.dim() < 3:
        raise DimensionError("concat needs (C, H, W) or (B, C, H, W) tensors",
                             ("ndim",), (first.dim(),))
    for t in tensors[1:]:
        if t.dim() != first.dim():
            raise DimensionError("concat operands differ in rank", ("ndim", "ndim"),
                                 (first.dim(), t.dim()))
        rest_a = first.shape[:CHANNEL_AXIS] + first.shape[CHANNEL_AXIS + 1:]
        rest_b = t.shape[:CHANNEL_AXIS] + t.shape[CHANNEL_AXIS + 1:]
        if rest_a != rest_b:
            raise DimensionError(f"concat operands differ off the channel axis: "
                                 f"{tuple(first.shape)} vs {tuple(t.shape)}",
                                 ("batch", "height", "width"))
    return torch.cat(list(tensors), dim=CHANNEL_AXIS)


def global_avg_pool(input: torch.Tensor) -> torch.Tensor:
    """Average over the two spatial axes, keeping them as size 1"""
    if input.dim() < 2:
        raise DimensionError("pooling needs spatial axes", ("ndim",), (input.dim(),))
    return input.mean(dim=(-2, -1), keepdim=True)


def upsample(input: torch.Tensor, size: tuple[int, int] | None = None,
             scale: int | None = 2) -> torch.Tensor:
    """Bilinear upsampling with corner-aligned sampling

    Args:
        input: (B, C, H, W) or (C, H, W) tensor
        size: Target (height, width); takes precedence over scale
        scale: Integer factor, only 2 is supported

    Returns:
        Resampled tensor
    """
    x, squeeze = _with_batch(input, "input")
    if size is None:
        if scale != 2:
            raise DimensionError("only 2x upsampling or an explicit size is supported",
                                 ("scale",), (scale or 0,))
        size = (x.shape[2] * 2, x.shape[3] * 2)
    if size[0] < 1 or size[1] < 1:
        raise DimensionError("target size must be positive", ("height", "width"), tuple(size))
    if tuple(size) == tuple(x.shape[2:]):
        out = x
    else:
        out = F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=True)
    return out.squeeze(0) if squeeze else out


def primitive_set() -> dict[str, Callable[..., torch.Tensor]]:
    """Catalog of the differentiable primitives the network is built from"""
    return {
        "conv2d": conv2d,
        "softmax": softmax,
        "sigmoid": sigmoid,
        "tanh": tanh,
        "relu": relu,
        "add": add,
        "mul": mul,
        "concat": concat,
        "global_avg_pool": global_avg_pool,
        "upsample": upsample,
    }


class ParameterSet:
    """Named trainable tensors of a module with their gradient accumulators

    Names iterate in sorted order so initialization, serialization and updates do not depend
    on module construction order.
    """

    def __init__(self, module: nn.Module):
        self.module = module
        self._params = dict(module.named_parameters())

    def names(self) -> list[str]:
        return sorted(self._params)

    def __getitem__(self, name: str) -> nn.Parameter:
        return self._params[name]

    def __iter__(self) -> Iterator[tuple[str, nn.Parameter]]:
        for name in self.names():
            yield name, self._params[name]

    def __len__(self) -> int:
        return len(self._params)

    def num_elements(self) -> int:
        return sum(p.numel() for p in self._params.values())

    def gradient(self, name: str) -> torch.Tensor:
        """Gradient accumulator for name (zeros if nothing was accumulated yet)"""
        p = self._params[name]
        return p.grad if p.grad is not None else torch.zeros_like(p)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = torch.zeros_like(p)

    def _fan_in(self, name: str) -> int:
        p = self._params[name]
        if name.endswith("bias"):
            sibling = name[: -len("bias")] + "weight"
            if sibling in self._params:
                p = self._params[sibling]
        if p.dim() >= 2:
            return max(1, p[0].numel())
        return max(1, p.shape[-1]) if p.dim() else 1

    def initialize(self, seed: int) -> None:
        """Draw every entry uniformly from [-sqrt(1/fan_in), +sqrt(1/fan_in)]"""
        generator = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self:
                bound = math.sqrt(1.0 / self._fan_in(name))
                draw = torch.rand(p.shape, generator=generator, dtype=torch.float64)
                p.copy_((draw * 2.0 - 1.0) * bound)
        logging.debug(f"Initialized {len(self)} parameter tensors ({self.num_elements()} values) "
                      f"with seed {seed}")

    def state(self) -> dict[str, torch.Tensor]:
        return {name: p.detach().clone() for name, p in self}

    def load_state(self, state: Mapping[str, torch.Tensor]) -> None:
        missing = set(self._params) - set(state)
        unknown = set(state) - set(self._params)
        if missing or unknown:
            raise DimensionError(f"parameter names differ (missing={sorted(missing)}, "
                                 f"unknown={sorted(unknown)})", ("names",))
        with torch.no_grad():
            for name, p in self:
                value = state[name]
                if tuple(value.shape) != tuple(p.shape):
                    raise DimensionError(f"shape mismatch for parameter {name}",
                                         (f"{name}.stored", f"{name}.model"))
                p.copy_(value.to(p.dtype))


@dataclass
class GradCheckReport:
    """Outcome of a finite-difference gradient check"""
    max_relative_error: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4
    failure: str | None = None

    @property
    def passed(self) -> bool:
        return self.failure is None and all(
            e <= self.tolerance for e in self.max_relative_error.values())

    @property
    def worst(self) -> float:
        return max(self.max_relative_error.values(), default=0.0)


def grad_check(function: Callable[[], torch.Tensor],
               inputs: Sequence[torch.Tensor] | Mapping[str, torch.Tensor],
               step: float = 1e-5, tolerance: float = 1e-4,
               max_elements: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare reverse-mode gradients with central finite differences

    Args:
        function: Closure returning a scalar; it must read the tensors in inputs
        inputs: float64 leaf tensors with requires_grad set, as a list or a name mapping
        step: Finite-difference step h
        tolerance: Maximum allowed relative error
        max_elements: If set, check only this many randomly chosen elements per input
        seed: Seed for choosing the checked elements

    Returns:
        GradCheckReport with the worst relative error per input
    """
    named = dict(inputs) if isinstance(inputs, Mapping) else {
        str(i): t for i, t in enumerate(inputs)}
    for name, t in named.items():
        if t.dtype != torch.float64:
            raise TypeError(f"grad_check needs float64 inputs, {name} is {t.dtype}")
        if not t.requires_grad:
            raise TypeError(f"grad_check input {name} does not require grad")

    out = function()
    if out.numel() != 1:
        raise DimensionError("grad_check needs a scalar-valued function", ("output.size",),
                             (out.numel(),))
    tensors = list(named.values())
    analytic = torch.autograd.grad(out, tensors, allow_unused=True)

    report = GradCheckReport(tolerance=tolerance)
    generator = torch.Generator().manual_seed(seed)
    for (name, t), g in zip(named.items(), analytic):
        grad = (g if g is not None else torch.zeros_like(t)).detach().reshape(-1)
        if not torch.isfinite(grad).all():
            bad = int(torch.nonzero(~torch.isfinite(grad))[0])
            report.failure = f"non-finite analytic gradient for {name} at flat index {bad}"
            report.max_relative_error[name] = math.inf
            logging.error(report.failure)
            continue
        n = t.numel()
        if max_elements is not None and max_elements < n:
            indices = torch.randperm(n, generator=generator)[:max_elements].tolist()
        else:
            indices = range(n)
        flat = t.detach().view(-1)
        worst = 0.0
        with torch.no_grad():
            for j in indices:
                original = flat[j].item()
                flat[j] = original + step
                f_plus = function().item()
                flat[j] = original - step
                f_minus = function().item()
                flat[j] = original
                numeric = (f_plus - f_minus) / (2.0 * step)
                a = grad[j].item()
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, err)
        report.max_relative_error[name] = worst
    logging.debug(f"grad_check worst relative error {report.worst:.3e} "
                  f"({'PASS' if report.passed else 'FAIL'})")
    return report


def write_tensors(stream: BinaryIO, tensors: Mapping[str, torch.Tensor]) -> None:
    """Write tensors as JSON header lines each followed by little-endian float32 data"""
    for name in sorted(tensors):
        array = tensors[name].detach().cpu().to(torch.float32).contiguous().numpy()
        header = {"dtype": "float32", "name": name, "shape": list(array.shape)}
        stream.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        stream.write(array.astype("<f4").tobytes(order="C"))


def read_tensors(stream: BinaryIO) -> dict[str, torch.Tensor]:
    """Read a tensor stream written by write_tensors"""
    tensors: dict[str, torch.Tensor] = {}
    while True:
        line = stream.readline()
        if not line:
            break
        try:
            header = json.loads(line.decode("utf-8"))
            name, dtype, shape = header["name"], header["dtype"], [int(s) for s in header["shape"]]
        except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise TensorFormatError(f"bad tensor header after {len(tensors)} tensors") from e
        if dtype != "float32":
            raise TensorFormatError(f"unsupported dtype {dtype!r} for tensor {name}")
        count = int(np.prod(shape)) if shape else 1
        payload = stream.read(count * 4)
        if len(payload) != count * 4:
            raise TensorFormatError(f"tensor {name} truncated: expected {count * 4} bytes, "
                                    f"got {len(payload)}")
        array = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
        tensors[name] = torch.from_numpy(array.copy())
    return tensors


def save_tensors(path: str | Path, tensors: Mapping[str, torch.Tensor]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        write_tensors(fh, tensors)


def load_tensors(path: str | Path) -> dict[str, torch.Tensor]:
    with open(path, "rb") as fh:
        return read_tensors(fh)
