"""Shared 3D network blocks: convolution and residual-dilated units, the
condition-index embedding, attention-based multi-branch fusion, and the
decoder upsample-merge step. All blocks preserve spatial dims unless a
stride is requested, and all are deterministic given parameters and input."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class BlockConfig:
    """Hyperparameters shared by every encoder/decoder tower.

    Channel width doubles per level: filters at level l = base_filters * 2**l.
    """

    base_filters: int = 8
    depth: int = 3
    dilation_rates: tuple[int, ...] = (2, 4)
    dropout_rate: float = 0.0
    kernel_size: int = 3

    def __post_init__(self):
        if self.base_filters < 1:
            raise ValueError("base_filters must be positive")
        if self.depth < 2:
            raise ValueError("depth must be at least 2")
        if not self.dilation_rates or min(self.dilation_rates) < 1:
            raise ValueError("dilation_rates must be positive integers")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd and positive")
        object.__setattr__(self, "dilation_rates", tuple(self.dilation_rates))

    def filters_at(self, level: int) -> int:
        return self.base_filters * 2**level


class ConvBlock(nn.Module):
    """3D convolution (same padding) + instance norm + leaky ReLU."""

    def __init__(self, in_channels: int, filters: int, kernel_size: int = 3, stride: int = 1):
        super().__init__()
        self.conv = nn.Conv3d(
            in_channels,
            filters,
            kernel_size,
            stride=stride,
            padding=kernel_size // 2,
            bias=False,  # the bias would be cancelled by the instance norm
        )
        self.norm = nn.InstanceNorm3d(filters, affine=True)
        self.act = nn.LeakyReLU(0.01)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.act(self.norm(self.conv(x)))


class ResDilBlock(nn.Module):
    """Residual unit with two stacked dilated convolutions: out = x + g(x).

    Inputs whose channel count differs from `filters` pass through a 1x1x1
    projection first. The dilations widen the receptive field well beyond a
    plain convolution of the same kernel size.
    """

    def __init__(
        self,
        filters: int,
        dilation_rates: tuple[int, ...] = (2, 4),
        kernel_size: int = 3,
        in_channels: int | None = None,
        dropout_rate: float = 0.0,
    ):
        super().__init__()
        in_channels = filters if in_channels is None else in_channels
        self.project = (
            nn.Conv3d(in_channels, filters, 1, bias=False) if in_channels != filters else None
        )
        layers: list[nn.Module] = []
        for i, dilation in enumerate(dilation_rates):
            layers.append(
                nn.Conv3d(
                    filters,
                    filters,
                    kernel_size,
                    padding=dilation * (kernel_size // 2),
                    dilation=dilation,
                    bias=False,
                )
            )
            layers.append(nn.InstanceNorm3d(filters, affine=True))
            layers.append(nn.LeakyReLU(0.01))
            if dropout_rate > 0 and i == 0:
                layers.append(nn.Dropout3d(dropout_rate))
        self.residual = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.project is not None:
            x = self.project(x)
        return x + self.residual(x)


class ConditionEmbedding(nn.Module):
    """Learned embedding of the missing-modality index, one row per modality,
    reshaped to a single spatial channel of the insertion level."""

    def __init__(self, target_shape: tuple[int, int, int]):
        super().__init__()
        self.target_shape = tuple(int(s) for s in target_shape)
        self.table = nn.Embedding(4, int(math.prod(self.target_shape)))

    def forward(self, missing_index: int) -> torch.Tensor:
        if not 0 <= int(missing_index) <= 3:
            raise ValueError(f"missing_index must be in 0..3, got {missing_index}")
        idx = torch.as_tensor([int(missing_index)], device=self.table.weight.device)
        return self.table(idx).reshape(1, 1, *self.target_shape)


class AttentionFusion(nn.Module):
    """Fuse same-shaped feature maps from several modality branches.

    A shared scorer on the global-average-pooled descriptor of each branch
    yields one logit per branch (softmax-normalized modality gates); a
    1-channel convolution over the channel concatenation yields a sigmoid
    spatial gate. Output: gated sum, spatially rescaled, then a 1x1x1
    projection back to the branch channel count.
    """

    def __init__(self, channels: int, num_inputs: int, kernel_size: int = 3):
        super().__init__()
        self.num_inputs = num_inputs
        # bias-free: a shared bias would shift all logits equally and vanish
        # in the softmax
        self.score = nn.Linear(channels, 1, bias=False)
        self.spatial = nn.Conv3d(
            channels * num_inputs, 1, kernel_size, padding=kernel_size // 2
        )
        self.project = nn.Conv3d(channels, channels, 1)

    def modality_gates(self, features: list[torch.Tensor]) -> torch.Tensor:
        descriptors = torch.stack([f.mean(dim=(2, 3, 4)) for f in features], dim=1)
        return torch.softmax(self.score(descriptors), dim=1)  # [N, m, 1]

    def forward(self, features: list[torch.Tensor]) -> torch.Tensor:
        if len(features) != self.num_inputs:
            raise ValueError(f"expected {self.num_inputs} inputs, got {len(features)}")
        shape = features[0].shape
        if any(f.shape != shape for f in features):
            raise ValueError("all fused features must share one shape")
        gates = self.modality_gates(features)
        mixed = sum(
            gates[:, i].reshape(-1, 1, 1, 1, 1) * f for i, f in enumerate(features)
        )
        spatial_map = torch.sigmoid(self.spatial(torch.cat(features, dim=1)))
        return self.project(mixed * spatial_map)


class UpsampleConcat(nn.Module):
    """Decoder step: x2 nearest upsample + convolution, concatenation with the
    skip features, a convolution to adjust channels, then a residual-dilated
    refinement."""

    def __init__(
        self,
        low_channels: int,
        skip_channels: int,
        filters: int,
        kernel_size: int = 3,
        dilation_rates: tuple[int, ...] = (2, 4),
        dropout_rate: float = 0.0,
    ):
        super().__init__()
        self.up_conv = ConvBlock(low_channels, filters, kernel_size)
        self.merge_conv = ConvBlock(filters + skip_channels, filters, kernel_size)
        self.refine = ResDilBlock(
            filters, dilation_rates, kernel_size, dropout_rate=dropout_rate
        )

    def forward(self, low: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        if tuple(2 * s for s in low.shape[2:]) != tuple(skip.shape[2:]):
            raise ValueError(
                f"low spatial dims {tuple(low.shape[2:])} must be half of "
                f"skip {tuple(skip.shape[2:])}"
            )
        up = F.interpolate(low, scale_factor=2, mode="nearest")
        up = self.up_conv(up)
        x = self.merge_conv(torch.cat([up, skip], dim=1))
        return self.refine(x)


class EncoderTower(nn.Module):
    """Per-modality encoder: one ConvBlock + ResDilBlock per level with
    stride-2 downsampling between levels. When built with a condition slot,
    the condition channel is concatenated onto the second-deepest level's
    features before the final downsampling."""

    def __init__(self, config: BlockConfig, in_channels: int = 1, use_condition: bool = True):
        super().__init__()
        self.config = config
        self.cond_level = config.depth - 2 if use_condition else None
        convs, refines = [], []
        for level in range(config.depth):
            filters = config.filters_at(level)
            if level == 0:
                level_in = in_channels
                stride = 1
            else:
                level_in = config.filters_at(level - 1)
                if self.cond_level == level - 1:
                    level_in += 1
                stride = 2
            convs.append(ConvBlock(level_in, filters, config.kernel_size, stride))
            refines.append(
                ResDilBlock(
                    filters,
                    config.dilation_rates,
                    config.kernel_size,
                    dropout_rate=config.dropout_rate,
                )
            )
        self.convs = nn.ModuleList(convs)
        self.refines = nn.ModuleList(refines)

    def forward(self, x: torch.Tensor, cond_map: torch.Tensor | None = None) -> list[torch.Tensor]:
        """Returns per-level features; the last entry is the bottleneck."""
        features = []
        for level, (conv, refine) in enumerate(zip(self.convs, self.refines)):
            x = refine(conv(x))
            features.append(x)
            if level == self.cond_level:
                if cond_map is None:
                    raise ValueError("encoder was built with a condition slot; cond_map missing")
                x = torch.cat([x, cond_map.expand(x.shape[0], -1, -1, -1, -1)], dim=1)
        return features
