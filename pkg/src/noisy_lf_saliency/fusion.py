"""
Two-stream fusion network
Encoders for the all-focus image and the focal slices, channel attention over the focal stack
guided by the all-focus stream, recurrent refinement of the weighted slices, pixel attention
back onto the all-focus stream, and the two heads producing the initial predictions.
"""

import logging
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, fields
from enum import Enum
from typing import Any, NamedTuple

import torch
from torch import nn

from . import gradcore
from .exceptions import ConfigError, DimensionError
from .forgetting import GuidedFusion


class PixelAttentionMode(str, Enum):
    SOFTMAX = "softmax"
    SIGMOID = "sigmoid"


@dataclass
class ArchitectureConfig:
    """Shape of the network

    Attributes:
        k: Number of focal slices
        channels: Image channels (1 or 3)
        widths: Channel width of each encoder stage
        levels: Number of encoder stages used (2 to 4)
        head_width: Width every level is brought to before the heads
        pixel_attention: "softmax" over the spatial extent or per-pixel "sigmoid"
        fusion_kernel: Kernel size of the forgetting-guided fusion convolution
        mffo: Channel attention and pixel guidance enabled. The ConvLSTM slice refinement runs
            either way: without mffo it is the plain recurrent merge of the unweighted slices
    """
    k: int = 4
    channels: int = 1
    widths: tuple[int, ...] = (16, 32, 64, 64)
    levels: int = 4
    head_width: int = 16
    pixel_attention: str = PixelAttentionMode.SOFTMAX.value
    fusion_kernel: int = 3
    mffo: bool = True
    convs_per_stage: int = 2

    def __post_init__(self) -> None:
        self.widths = tuple(int(w) for w in self.widths)

    def validate(self) -> None:
        if self.k < 1:
            raise ConfigError(f"k must be at least 1, got {self.k}")
        if self.channels not in (1, 3):
            raise ConfigError(f"channels must be 1 or 3, got {self.channels}")
        if self.levels not in (2, 3, 4):
            raise ConfigError(f"levels must be 2, 3 or 4, got {self.levels}")
        if len(self.widths) < self.levels or min(self.widths) < 1:
            raise ConfigError(f"need {self.levels} positive widths, got {list(self.widths)}")
        if self.fusion_kernel < 1 or self.fusion_kernel % 2 == 0:
            raise ConfigError(f"fusion_kernel must be odd, got {self.fusion_kernel}")
        if self.convs_per_stage < 1:
            raise ConfigError("convs_per_stage must be at least 1")
        try:
            PixelAttentionMode(self.pixel_attention)
        except ValueError:
            raise ConfigError(f"unknown pixel attention mode {self.pixel_attention!r}") from None

    @property
    def divisor(self) -> int:
        """Image sides must be multiples of this"""
        return 2 ** self.levels

    @classmethod
    def from_dict(cls, data: Mapping[str, Any] | None) -> "ArchitectureConfig":
        data = dict(data or {})
        unknown = sorted(set(data) - {f.name for f in fields(cls)})
        if unknown:
            raise ConfigError(f"unknown architecture keys: {unknown}")
        config = cls(**data)
        config.validate()
        return config

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out["widths"] = list(self.widths)
        return out


@dataclass
class FeatureMapSet:
    """Encoder outputs, finest level first

    Attributes:
        R: Per level (B, C_m, h_m, w_m) all-focus features
        F: Per level (B, k, C_m, h_m, w_m) slice features
    """
    R: list[torch.Tensor]
    F: list[torch.Tensor]

    @property
    def levels(self) -> int:
        return len(self.R)


@dataclass
class RecurrentCellState:
    h: torch.Tensor
    c: torch.Tensor


class PredictionTriple(NamedTuple):
    """(B, H, W) maps in (0, 1)"""
    s_i: torch.Tensor
    s_f: torch.Tensor
    s_r: torch.Tensor


class ConvLayer(nn.Module):
    """Convolution whose parameters are filled by ParameterSet.initialize"""

    def __init__(self, in_channels: int, out_channels: int, kernel: int, stride: int = 1):
        super().__init__()
        self.stride = stride
        self.padding = kernel // 2
        self.weight = nn.Parameter(torch.zeros(out_channels, in_channels, kernel, kernel))
        self.bias = nn.Parameter(torch.zeros(out_channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return gradcore.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Encoder(nn.Module):
    """Stages of stride-2 convolution followed by stride-1 convolutions, ReLU after each"""

    def __init__(self, in_channels: int, widths: Sequence[int], convs_per_stage: int = 2):
        super().__init__()
        stages = []
        cin = in_channels
        for width in widths:
            layers = [ConvLayer(cin, width, 3, stride=2)]
            layers += [ConvLayer(width, width, 3) for _ in range(convs_per_stage - 1)]
            stages.append(nn.ModuleList(layers))
            cin = width
        self.stages = nn.ModuleList(stages)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        features = []
        for stage in self.stages:
            for layer in stage:
                x = gradcore.relu(layer(x))
            features.append(x)
        return features


class ChannelAttention(nn.Module):
    """Softmax weights over the k + 1 groups of C[R; f^1 ... f^k]

    Group 0 is the all-focus group; its weight is computed but not applied.
    """

    def __init__(self, width: int):
        super().__init__()
        self.width = width
        self.slice_logit = ConvLayer(2 * width, 1, 1)
        self.focus_logit = ConvLayer(width, 1, 1)

    def forward(self, R: torch.Tensor, F: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Args:
            R: (B, C, h, w)
            F: (B, k, C, h, w)

        Returns:
            (B, k + 1) attention and the (B, k, C, h, w) weighted slices
        """
        B, k, C = F.shape[:3]
        if R.shape != (B, C, *F.shape[3:]):
            raise DimensionError("all-focus and slice features differ in shape",
                                 ("R.shape", "F.shape"))
        stacked = gradcore.concat([R] + [F[:, i] for i in range(k)])
        pooled = gradcore.global_avg_pool(stacked).view(B, k + 1, C, 1, 1)
        focus = pooled[:, 0]
        guide = focus.unsqueeze(1).expand(B, k, C, 1, 1)
        slice_in = torch.cat([pooled[:, 1:], guide], dim=2).reshape(B * k, 2 * C, 1, 1)
        logits = torch.cat([
            self.focus_logit(focus).view(B, 1),
            self.slice_logit(slice_in).view(B, k),
        ], dim=1)
        attention = gradcore.softmax(logits, axis=1)
        weighted = gradcore.mul(F, attention[:, 1:].view(B, k, 1, 1, 1))
        return attention, weighted


class ConvLSTMCell(nn.Module):
    """Convolutional LSTM: sigmoid input/forget/output gates, tanh candidate"""

    def __init__(self, in_channels: int, hidden: int, kernel: int = 3):
        super().__init__()
        self.hidden = hidden
        self.gates = ConvLayer(in_channels + hidden, 4 * hidden, kernel)

    def initial_state(self, x: torch.Tensor) -> RecurrentCellState:
        zeros = x.new_zeros(x.shape[0], self.hidden, *x.shape[-2:])
        return RecurrentCellState(zeros, zeros.clone())

    def forward(self, x: torch.Tensor, state: RecurrentCellState | None = None) -> RecurrentCellState:
        if state is None:
            state = self.initial_state(x)
        z = self.gates(gradcore.concat([x, state.h]))
        i, f, o, g = torch.chunk(z, 4, dim=1)
        c = gradcore.add(gradcore.mul(gradcore.sigmoid(f), state.c),
                         gradcore.mul(gradcore.sigmoid(i), gradcore.tanh(g)))
        h = gradcore.mul(gradcore.sigmoid(o), gradcore.tanh(c))
        return RecurrentCellState(h, c)

    def run(self, sequence: Sequence[torch.Tensor]) -> torch.Tensor:
        """Feed the sequence in order and return the final hidden state"""
        state = None
        for x in sequence:
            state = self(x, state)
        assert state is not None
        return state.h


def refine_slices(weighted: torch.Tensor, cell: ConvLSTMCell) -> torch.Tensor:
    """Run the recurrence over slices 1..k of (B, k, C, h, w); returns (B, hidden, h, w)"""
    if weighted.dim() != 5 or weighted.shape[1] < 1:
        raise DimensionError("weighted slices must be (B, k, C, h, w) with k >= 1",
                             ("ndim",), (weighted.dim(),))
    return cell.run([weighted[:, i] for i in range(weighted.shape[1])])


class PixelGuidance(nn.Module):
    """R' = R * Att + R with Att from a 1-channel convolution of the refined slices"""

    def __init__(self, width: int, mode: str = PixelAttentionMode.SOFTMAX.value):
        super().__init__()
        self.mode = PixelAttentionMode(mode)
        self.score = ConvLayer(width, 1, 1)

    def attention(self, refined: torch.Tensor) -> torch.Tensor:
        s = self.score(refined)
        if self.mode is PixelAttentionMode.SIGMOID:
            return gradcore.sigmoid(s)
        return gradcore.softmax(s.flatten(start_dim=-2), axis=-1).view_as(s)

    def forward(self, R: torch.Tensor, refined: torch.Tensor) -> torch.Tensor:
        if R.shape[-2:] != refined.shape[-2:]:
            raise DimensionError("all-focus and refined features differ in size",
                                 ("R.size", "F'.size"))
        return gradcore.add(gradcore.mul(R, self.attention(refined)), R)


class Head(nn.Module):
    """Hierarchical readout of one stream

    Every level is brought to head width, upsampled to the finest grid and fed to one recurrent
    cell coarse to fine; the final hidden state is read out to a single sigmoid map.
    """

    def __init__(self, widths: Sequence[int], head_width: int):
        super().__init__()
        self.transitions = nn.ModuleList([ConvLayer(w, head_width, 1) for w in widths])
        self.cell = ConvLSTMCell(head_width, head_width)
        self.readout = ConvLayer(head_width, 1, 1)

    def forward(self, features: Sequence[torch.Tensor], out_size: tuple[int, int]) -> torch.Tensor:
        if len(features) != len(self.transitions):
            raise DimensionError("head received the wrong number of levels",
                                 ("levels", "expected"), (len(features), len(self.transitions)))
        grid = tuple(features[0].shape[-2:])
        sequence = [gradcore.upsample(t(f), size=grid)
                    for t, f in reversed(list(zip(self.transitions, features)))]
        h = self.cell.run(sequence)
        s = gradcore.sigmoid(self.readout(h))
        return gradcore.upsample(s, size=out_size).squeeze(1)


class SaliencyNetwork(nn.Module):
    """Full network mapping (all-focus, focal stack) to the prediction triple"""

    def __init__(self, config: ArchitectureConfig):
        super().__init__()
        config.validate()
        self.config = config
        widths = list(config.widths[:config.levels])
        self.focus_encoder = Encoder(config.channels, widths, config.convs_per_stage)
        self.slice_encoder = Encoder(config.channels, widths, config.convs_per_stage)
        if config.mffo:
            self.channel_attention = nn.ModuleList([ChannelAttention(w) for w in widths])
            self.pixel_guidance = nn.ModuleList(
                [PixelGuidance(w, config.pixel_attention) for w in widths])
        self.refiners = nn.ModuleList([ConvLSTMCell(w, w) for w in widths])
        self.focal_head = Head(widths, config.head_width)
        self.focus_head = Head(widths, config.head_width)
        self.fusion = GuidedFusion(config.fusion_kernel)

    def encode(self, all_focus: torch.Tensor, focal_stack: torch.Tensor) -> FeatureMapSet:
        """Args:
            all_focus: (B, C, H, W)
            focal_stack: (B, k, C, H, W); the slice encoder is shared across slices
        """
        if all_focus.dim() != 4 or focal_stack.dim() != 5:
            raise DimensionError("expected (B, C, H, W) and (B, k, C, H, W) inputs",
                                 ("all_focus.ndim", "focal_stack.ndim"),
                                 (all_focus.dim(), focal_stack.dim()))
        B, k, C, H, W = focal_stack.shape
        if all_focus.shape != (B, C, H, W):
            raise DimensionError("all-focus image and focal stack differ in shape",
                                 ("all_focus.shape", "focal_stack.shape"))
        if k != self.config.k or C != self.config.channels:
            raise DimensionError("input does not match the architecture",
                                 ("k", "config.k", "channels", "config.channels"),
                                 (k, self.config.k, C, self.config.channels))
        d = self.config.divisor
        if H % d or W % d:
            raise DimensionError(f"image sides must be divisible by {d}", ("height", "width"), (H, W))
        R = self.focus_encoder(all_focus)
        flat = self.slice_encoder(focal_stack.reshape(B * k, C, H, W))
        F = [f.view(B, k, *f.shape[1:]) for f in flat]
        return FeatureMapSet(R, F)

    def initial_predictions(self, all_focus: torch.Tensor,
                            focal_stack: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(s_f, s_r), each (B, H, W)"""
        features = self.encode(all_focus, focal_stack)
        refined, guided = [], []
        for m in range(features.levels):
            R, F = features.R[m], features.F[m]
            if self.config.mffo:
                _, F = self.channel_attention[m](R, F)
            F_refined = refine_slices(F, self.refiners[m])
            if self.config.mffo:
                R = self.pixel_guidance[m](R, F_refined)
            refined.append(F_refined)
            guided.append(R)
        out_size = tuple(all_focus.shape[-2:])
        return self.focal_head(refined, out_size), self.focus_head(guided, out_size)

    def forward(self, all_focus: torch.Tensor, focal_stack: torch.Tensor,
                m_f: torch.Tensor | None = None, m_r: torch.Tensor | None = None) -> PredictionTriple:
        """Predict; missing confidence weights default to 1 (no forgetting guidance)"""
        s_f, s_r = self.initial_predictions(all_focus, focal_stack)
        ones = torch.ones_like(s_f)
        s_i = self.fusion(s_f, s_r, ones if m_f is None else m_f, ones if m_r is None else m_r)
        return PredictionTriple(s_i, s_f, s_r)


def build_network(config: ArchitectureConfig, seed: int,
                  dtype: torch.dtype = torch.float32) -> tuple[SaliencyNetwork, gradcore.ParameterSet]:
    """Construct the network and initialize its parameters from seed"""
    network = SaliencyNetwork(config).to(dtype)
    params = gradcore.ParameterSet(network)
    params.initialize(seed)
    logging.info(f"Built network with {len(params)} tensors, {params.num_elements()} parameters "
                 f"(levels={config.levels}, k={config.k}, mffo={config.mffo})")
    return network, params


def encode(network: SaliencyNetwork, all_focus: torch.Tensor,
           focal_stack: torch.Tensor) -> FeatureMapSet:
    return network.encode(all_focus, focal_stack)
