"""Multi-encoder segmentation network with attention fusion at every level
and deep supervision in the decoder.

Two assemblies cover the experiment arms:

* `SegmentationModel`: towers for the real input volumes only (three for the
  missing-modality arms, four for full-modality training), optionally with the
  correlation network on the bottleneck representations.
* `GeneratorSegmentationModel`: the full pipeline. The three available
  modalities run through the conditional generator's encoders (shared
  parameters), the generated volume runs through its own dedicated encoder,
  and the decoder consumes correlation-constrained bottleneck features.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import AttentionFusion, BlockConfig, EncoderTower, UpsampleConcat
from .correlation import CorrelationNetwork
from .generator import ConditionalGenerator, _check_input_shape, sorted_modalities
from .volumes import MODALITIES, NUM_CLASSES, Modality


@dataclass
class SegOutput:
    """Final logits plus the per-level deep-supervision logits.

    `aux_logits` is ordered from the full-resolution head down to the
    bottleneck head; `logits` is the average of all heads after
    upsampling to full resolution.
    """

    logits: torch.Tensor
    aux_logits: list[torch.Tensor]

    @property
    def probabilities(self) -> torch.Tensor:
        return torch.softmax(self.logits, dim=1)

    @property
    def aux_probabilities(self) -> list[torch.Tensor]:
        return [torch.softmax(t, dim=1) for t in self.aux_logits]

    def predicted_classes(self) -> torch.Tensor:
        return self.logits.argmax(dim=1)


class FusionDecoder(nn.Module):
    """Fuse the per-branch features at every level, decode with upsample-merge
    steps, and emit one segmentation head per decoder stage."""

    def __init__(self, config: BlockConfig, num_branches: int):
        super().__init__()
        self.config = config
        self.num_branches = num_branches
        depth = config.depth
        self.fusions = nn.ModuleList(
            [
                AttentionFusion(config.filters_at(level), num_branches, config.kernel_size)
                for level in range(depth)
            ]
        )
        self.ups = nn.ModuleList(
            [
                UpsampleConcat(
                    config.filters_at(level + 1),
                    config.filters_at(level),
                    config.filters_at(level),
                    config.kernel_size,
                    config.dilation_rates,
                    config.dropout_rate,
                )
                for level in reversed(range(depth - 1))
            ]
        )
        # one head per stage, deepest first
        self.heads = nn.ModuleList(
            [
                nn.Conv3d(config.filters_at(level), NUM_CLASSES, 1)
                for level in reversed(range(depth))
            ]
        )

    def forward(self, per_level_branches: list[list[torch.Tensor]]) -> SegOutput:
        depth = self.config.depth
        fused = [self.fusions[level](branches) for level, branches in enumerate(per_level_branches)]
        x = fused[-1]
        stage_logits = [self.heads[0](x)]
        for i, up in enumerate(self.ups):
            x = up(x, fused[depth - 2 - i])
            stage_logits.append(self.heads[i + 1](x))
        aux = list(reversed(stage_logits))
        full_res = aux[0].shape[2:]
        stacked = torch.stack(
            [aux[0]] + [F.interpolate(t, size=full_res, mode="nearest") for t in aux[1:]]
        )
        return SegOutput(logits=stacked.mean(dim=0), aux_logits=aux)


class SegmentationModel(nn.Module):
    """Segmentation from real input volumes only (no generator).

    `num_branches=3` is the missing-modality configuration; `num_branches=4`
    trains on the full modality set (the substitution arm replaces the missing
    volume with its most-correlated partner at evaluation time).
    """

    def __init__(
        self,
        config: BlockConfig,
        input_shape: tuple[int, int, int],
        num_branches: int = 3,
        use_correlation: bool = False,
    ):
        super().__init__()
        _check_input_shape(config, input_shape)
        if num_branches not in (3, 4):
            raise ValueError("num_branches must be 3 or 4")
        self.config = config
        self.input_shape = tuple(int(s) for s in input_shape)
        self.num_branches = num_branches
        self.encoders = nn.ModuleDict(
            {m.token: EncoderTower(config, in_channels=1, use_condition=False) for m in MODALITIES}
        )
        bottleneck_channels = config.filters_at(config.depth - 1)
        self.correlation = (
            CorrelationNetwork(bottleneck_channels, n_partners=num_branches - 1)
            if use_correlation
            else None
        )
        self.decoder = FusionDecoder(config, num_branches)

    def _validate(self, available: dict[Modality, torch.Tensor]):
        if len(available) != self.num_branches:
            raise ValueError(
                f"expected {self.num_branches} input modalities, got {len(available)}"
            )
        for m, x in available.items():
            if tuple(x.shape[2:]) != self.input_shape or x.shape[1] != 1:
                raise ValueError(f"{m.token}: expected [N, 1, {self.input_shape}] volumes")

    def encode(self, available: dict[Modality, torch.Tensor]) -> dict[Modality, list[torch.Tensor]]:
        self._validate(available)
        return {m: self.encoders[m.token](available[m]) for m in sorted_modalities(available)}

    def segment_direct(
        self, available: dict[Modality, torch.Tensor], use_correlation: bool | None = None
    ) -> SegOutput:
        seg, _, _ = self.forward_parts(available, use_correlation)
        return seg

    def forward_parts(
        self, available: dict[Modality, torch.Tensor], use_correlation: bool | None = None
    ):
        """Segmentation output plus the bottleneck features and (when the
        correlation path is active) their correlated counterparts."""
        if use_correlation is None:
            use_correlation = self.correlation is not None
        if use_correlation and self.correlation is None:
            raise ValueError("model was built without a correlation network")
        towers = self.encode(available)
        order = sorted_modalities(towers)
        depth = self.config.depth
        per_level = [[towers[m][level] for m in order] for level in range(depth)]
        features = {m: towers[m][-1] for m in order}
        correlated = None
        if use_correlation:
            correlated = self.correlation.correlated_representations(features)
            per_level[-1] = [correlated[m] for m in order]
        return self.decoder(per_level), features, correlated


class GeneratorSegmentationModel(nn.Module):
    """Full pipeline: conditional generation of the missing modality, a
    dedicated encoder for the generated volume, correlation constraints over
    the completed four-modality representation set, and the fused decoder.

    The three available modalities run through `generator.encoders`, so the
    generator and the segmentation path train the same tower parameters.
    """

    def __init__(self, config: BlockConfig, input_shape: tuple[int, int, int]):
        super().__init__()
        self.config = config
        self.input_shape = tuple(int(s) for s in input_shape)
        self.generator = ConditionalGenerator(config, input_shape)
        self.generated_encoder = EncoderTower(config, in_channels=1, use_condition=True)
        self.correlation = CorrelationNetwork(
            config.filters_at(config.depth - 1), n_partners=3
        )
        self.decoder = FusionDecoder(config, num_branches=4)

    def generate(self, available: dict[Modality, torch.Tensor], missing: Modality) -> torch.Tensor:
        return self.generator.generate(available, missing)

    def segment(
        self,
        available: dict[Modality, torch.Tensor],
        generated: torch.Tensor,
        missing: Modality,
        use_correlation: bool = True,
    ) -> SegOutput:
        seg, _, _ = self.forward_parts(available, generated, missing, use_correlation)
        return seg

    def forward_parts(
        self,
        available: dict[Modality, torch.Tensor],
        generated: torch.Tensor,
        missing: Modality,
        use_correlation: bool = True,
    ):
        self.generator._validate(available, missing)
        if generated.shape != next(iter(available.values())).shape:
            raise ValueError("generated volume shape must match the available volumes")
        cond = self.generator.embedding(missing.condition_index)
        towers: dict[Modality, list[torch.Tensor]] = {}
        for m in MODALITIES:
            if m is missing:
                towers[m] = self.generated_encoder(generated, cond)
            else:
                towers[m] = self.generator.encoders[m.token](available[m], cond)
        depth = self.config.depth
        per_level = [[towers[m][level] for m in MODALITIES] for level in range(depth)]
        features = {m: towers[m][-1] for m in MODALITIES}
        correlated = None
        if use_correlation:
            correlated = self.correlation.correlated_representations(features)
            per_level[-1] = [correlated[m] for m in MODALITIES]
        return self.decoder(per_level), features, correlated
