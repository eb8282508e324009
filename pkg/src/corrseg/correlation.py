"""Cross-modality correlation machinery.

Each modality's bottleneck representation is mapped (via a two-layer fully
connected estimator over its pooled descriptor) to a set of per-channel
correlation parameters. Those parameters express the modality's representation
as an elementwise-weighted linear combination of the other modalities'
representations plus a bias, and a KL divergence between the original and the
linearly-expressed feature distributions penalizes the mismatch.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .volumes import MODALITIES, Modality


@dataclass(frozen=True)
class CorrelationParams:
    """Per-element weights for the linear correlation expression.

    `alpha`, `beta` (and `gamma` when there are three partners) multiply the
    partner representations in fixed ascending-condition-index order; `delta`
    is the additive bias. All tensors are shaped like the feature maps they
    apply to (per-channel values broadcast over the spatial dims).
    """

    alpha: torch.Tensor
    beta: torch.Tensor
    gamma: torch.Tensor | None
    delta: torch.Tensor

    @property
    def partner_weights(self) -> tuple[torch.Tensor, ...]:
        if self.gamma is None:
            return (self.alpha, self.beta)
        return (self.alpha, self.beta, self.gamma)


class ParamEstimator(nn.Module):
    """Two fully connected layers mapping a modality's pooled feature
    descriptor to its correlation parameters (one weight block per partner
    plus the bias block), broadcast over the spatial dims."""

    def __init__(self, channels: int, n_partners: int = 3):
        super().__init__()
        if n_partners not in (2, 3):
            raise ValueError(f"n_partners must be 2 or 3, got {n_partners}")
        self.channels = channels
        self.n_partners = n_partners
        self.fc1 = nn.Linear(channels, 2 * channels)
        self.act = nn.LeakyReLU(0.01)
        self.fc2 = nn.Linear(2 * channels, (n_partners + 1) * channels)

    def forward(self, f: torch.Tensor) -> CorrelationParams:
        n, c = f.shape[:2]
        if c != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {c}")
        descriptor = f.mean(dim=(2, 3, 4))
        blocks = self.fc2(self.act(self.fc1(descriptor)))
        blocks = blocks.reshape(n, self.n_partners + 1, c, 1, 1, 1).expand(
            n, self.n_partners + 1, *f.shape[1:]
        )
        gamma = blocks[:, 2] if self.n_partners == 3 else None
        return CorrelationParams(
            alpha=blocks[:, 0],
            beta=blocks[:, 1],
            gamma=gamma,
            delta=blocks[:, self.n_partners],
        )


def linear_correlation(
    params: CorrelationParams, partners: list[torch.Tensor]
) -> torch.Tensor:
    """Elementwise weighted sum of the partner representations plus the bias."""
    weights = params.partner_weights
    if len(partners) != len(weights):
        raise ValueError(
            f"params carry {len(weights)} partner weights, got {len(partners)} partners"
        )
    shape = partners[0].shape
    for t in (*partners, *weights, params.delta):
        if t.shape != shape:
            raise ValueError("all partner and parameter tensors must share one shape")
    out = params.delta
    for w, f in zip(weights, partners):
        out = out + w * f
    return out


def feature_distribution(f: torch.Tensor) -> torch.Tensor:
    """Softmax over the flattened feature elements, one simplex per sample."""
    return torch.softmax(f.reshape(f.shape[0], -1), dim=1)


def correlation_loss(
    originals: list[torch.Tensor],
    correlated: list[torch.Tensor],
    clamp: float = 1e-8,
) -> torch.Tensor:
    """Sum over modalities of KL(original distribution || correlated
    distribution), averaged over the batch. The correlated side is clamped
    away from zero before the log."""
    if len(originals) != len(correlated):
        raise ValueError("originals and correlated must pair up one-to-one")
    total = None
    for f, g in zip(originals, correlated):
        if f.shape != g.shape:
            raise ValueError(f"shape mismatch: {tuple(f.shape)} vs {tuple(g.shape)}")
        p = feature_distribution(f)
        q = feature_distribution(g).clamp_min(clamp)
        kl = (torch.special.xlogy(p, p) - torch.special.xlogy(p, q)).sum(dim=1).mean()
        total = kl if total is None else total + kl
    if total is None:
        raise ValueError("need at least one modality pair")
    return total


class CorrelationNetwork(nn.Module):
    """One parameter estimator per modality; orchestrates the linear
    correlation expression with the fixed ascending-condition-index partner
    order.

    With `n_partners=3` (the default) the full four-modality set is required.
    `n_partners=2` is the degraded variant for pipelines that run on the three
    available modalities only: each representation is expressed from its two
    partners within whatever three-modality set is passed in.
    """

    def __init__(self, channels: int, n_partners: int = 3):
        super().__init__()
        self.n_partners = n_partners
        self.estimators = nn.ModuleDict(
            {m.token: ParamEstimator(channels, n_partners) for m in MODALITIES}
        )

    def estimate_params(self, modality: Modality, f: torch.Tensor) -> CorrelationParams:
        return self.estimators[modality.token](f)

    def correlated_representations(
        self, features: dict[Modality, torch.Tensor]
    ) -> dict[Modality, torch.Tensor]:
        if len(features) != self.n_partners + 1:
            raise ValueError(
                f"expected {self.n_partners + 1} modalities, got {len(features)}"
            )
        order = sorted(features, key=lambda m: m.condition_index)
        out = {}
        for m in order:
            params = self.estimate_params(m, features[m])
            partners = [features[p] for p in order if p is not m]
            out[m] = linear_correlation(params, partners)
        return out

    def loss(
        self,
        features: dict[Modality, torch.Tensor],
        correlated: dict[Modality, torch.Tensor] | None = None,
    ) -> torch.Tensor:
        if correlated is None:
            correlated = self.correlated_representations(features)
        order = sorted(features, key=lambda m: m.condition_index)
        return correlation_loss(
            [features[m] for m in order], [correlated[m] for m in order]
        )
