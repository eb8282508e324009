"""Conditional multi-encoder generator for the missing modality.

Three per-modality encoder towers (shared with the segmentation network)
feed a single decoder. The missing modality's index enters as a learned
embedding channel concatenated at the second-deepest level of every active
encoder, so one decoder serves all four possible targets. The output head is
a 1-channel convolution with identity activation: targets live in normalized
intensity space and are unbounded.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .blocks import BlockConfig, ConditionEmbedding, EncoderTower, UpsampleConcat
from .volumes import MODALITIES, Modality


def _check_input_shape(config: BlockConfig, input_shape: tuple[int, int, int]):
    factor = 2 ** (config.depth - 1)
    if any(s % factor or s < 2 * factor for s in input_shape):
        raise ValueError(
            f"input shape {input_shape} must be divisible by {factor} "
            f"(depth {config.depth}) with at least 2 voxels at the bottleneck"
        )


def sorted_modalities(modalities) -> list[Modality]:
    return sorted(modalities, key=lambda m: m.condition_index)


class ConditionalGenerator(nn.Module):
    """Encoder-decoder that synthesizes the missing modality from the other
    three under the missing-modality condition index."""

    def __init__(self, config: BlockConfig, input_shape: tuple[int, int, int]):
        super().__init__()
        _check_input_shape(config, input_shape)
        self.config = config
        self.input_shape = tuple(int(s) for s in input_shape)
        self.encoders = nn.ModuleDict(
            {m.token: EncoderTower(config, in_channels=1, use_condition=True) for m in MODALITIES}
        )
        embed_level = config.depth - 2
        embed_shape = tuple(s // 2**embed_level for s in self.input_shape)
        self.embedding = ConditionEmbedding(embed_shape)
        ups = []
        for level in reversed(range(config.depth - 1)):
            low_channels = 3 * config.filters_at(config.depth - 1) if not ups else config.filters_at(level + 1)
            ups.append(
                UpsampleConcat(
                    low_channels,
                    3 * config.filters_at(level),
                    config.filters_at(level),
                    config.kernel_size,
                    config.dilation_rates,
                    config.dropout_rate,
                )
            )
        self.decoder = nn.ModuleList(ups)
        self.head = nn.Conv3d(config.filters_at(0), 1, 1)

    def _validate(self, available: dict[Modality, torch.Tensor], missing: Modality):
        if len(available) != 3:
            raise ValueError(f"expected exactly 3 available modalities, got {len(available)}")
        if missing in available:
            raise ValueError(f"missing modality {missing.token} is among the available ones")
        shape = (*next(iter(available.values())).shape[2:],)
        if shape != self.input_shape:
            raise ValueError(f"input spatial shape {shape} differs from {self.input_shape}")
        for m, x in available.items():
            if tuple(x.shape[2:]) != self.input_shape or x.shape[1] != 1:
                raise ValueError(f"{m.token}: expected [N, 1, {self.input_shape}] volumes")

    def encode_available(
        self, available: dict[Modality, torch.Tensor], missing: Modality
    ) -> dict[Modality, list[torch.Tensor]]:
        """Per-level features of each available modality's tower, conditioned
        on the missing index."""
        self._validate(available, missing)
        cond = self.embedding(missing.condition_index)
        return {
            m: self.encoders[m.token](available[m], cond)
            for m in sorted_modalities(available)
        }

    def generate(self, available: dict[Modality, torch.Tensor], missing: Modality) -> torch.Tensor:
        """Synthesize the missing modality volume, [N, 1, D, H, W]."""
        features = self.encode_available(available, missing)
        order = sorted_modalities(features)
        depth = self.config.depth
        skips = [
            torch.cat([features[m][level] for m in order], dim=1) for level in range(depth)
        ]
        x = skips[-1]
        for i, up in enumerate(self.decoder):
            x = up(x, skips[depth - 2 - i])
        return self.head(x)


def generation_loss(generated: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over voxels."""
    if generated.shape != target.shape:
        raise ValueError(
            f"shape mismatch: {tuple(generated.shape)} vs {tuple(target.shape)}"
        )
    return (generated - target).abs().mean()
