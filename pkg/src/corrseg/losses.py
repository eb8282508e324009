"""Training losses: multi-class Dice with deep supervision and the weighted
total objective combining segmentation, generation, and correlation terms."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .volumes import NUM_CLASSES

DICE_EPS = 1e-5


@dataclass(frozen=True)
class LossWeights:
    """Weights of the total objective: dice + 0.1 * generation + 0.1 * correlation."""

    w_dice: float = 1.0
    w_gen: float = 0.1
    w_cc: float = 0.1

    def __post_init__(self):
        if min(self.w_dice, self.w_gen, self.w_cc) < 0:
            raise ValueError("loss weights must be nonnegative")


def one_hot_labels(labels: torch.Tensor, num_classes: int = NUM_CLASSES) -> torch.Tensor:
    """[N, D, H, W] integer class map -> [N, C, D, H, W] float one-hot."""
    if labels.dim() != 4:
        raise ValueError(f"expected [N, D, H, W] labels, got {tuple(labels.shape)}")
    onehot = torch.nn.functional.one_hot(labels.long(), num_classes)
    return onehot.permute(0, 4, 1, 2, 3).contiguous().to(torch.get_default_dtype())


def dice_loss(probabilities: torch.Tensor, target_onehot: torch.Tensor) -> torch.Tensor:
    """1 minus the mean foreground-class Dice of a soft prediction.

    Per class c in {1, 2, 3}: 2*sum(p*q) / (sum(p) + sum(q) + eps), summed over
    batch and voxels. The smoothing sits in the denominator only, so zero
    overlap scores a full loss of 1 for the affected class.
    """
    if probabilities.shape != target_onehot.shape:
        raise ValueError(
            f"shape mismatch: {tuple(probabilities.shape)} vs {tuple(target_onehot.shape)}"
        )
    scores = []
    for c in range(1, probabilities.shape[1]):
        p = probabilities[:, c]
        q = target_onehot[:, c]
        inter = (p * q).sum()
        scores.append(2.0 * inter / (p.sum() + q.sum() + DICE_EPS))
    return 1.0 - torch.stack(scores).mean()


def _downsample_onehot(target_onehot: torch.Tensor, spatial: tuple[int, ...]) -> torch.Tensor:
    # Nearest-neighbor by stride sampling; head resolutions are powers of two
    # below the label resolution.
    full = target_onehot.shape[2:]
    factor = full[0] // spatial[0]
    if any(f // factor != s or f % factor for f, s in zip(full, spatial)):
        raise ValueError(f"head resolution {spatial} incompatible with labels {full}")
    return target_onehot[:, :, ::factor, ::factor, ::factor]


def deep_supervision_dice(
    head_probabilities: list[torch.Tensor], target_onehot: torch.Tensor
) -> torch.Tensor:
    """Mean Dice loss over supervision heads; deeper heads compare against
    stride-downsampled labels."""
    losses = [
        dice_loss(p, _downsample_onehot(target_onehot, tuple(p.shape[2:])))
        for p in head_probabilities
    ]
    return torch.stack(losses).mean()


def total_loss(l_dice, l_gen, l_cc, weights: LossWeights = LossWeights()):
    """Weighted sum of the three objective terms."""
    return weights.w_dice * l_dice + weights.w_gen * l_gen + weights.w_cc * l_cc
