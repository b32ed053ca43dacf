"""Channel disentangling: invariant/specific split, discriminator-gradient
channel scores, top-K suppression masks, and the classification head.

Masks are binary per-channel vectors built from how strongly each pooled
channel drives the domain discriminator toward the correct domain label.
They are constants with respect to differentiation: only the multiplicative
application participates in backpropagation.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


class DomainInvariantEncoder(nn.Module):
    """Channel-preserving conv block producing the invariant component.

    The specific component is defined as the exact residual, so the two
    always sum back to the backbone features.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(channels, channels, kernel_size=3, padding=1),
            nn.BatchNorm2d(channels),
            nn.LeakyReLU(0.1),
        )

    def forward(self, fb):
        return self.net(fb)

    def split(self, fb):
        """Return (invariant, specific) with invariant + specific == fb."""
        f_di = self.net(fb)
        f_ds = fb - f_di
        return f_di, f_ds


class DomainDiscriminator(nn.Module):
    """Pooled-feature domain classifier; one logit, sigmoid = P(source)."""

    def __init__(self, in_features: int, hidden: int = 64):
        super().__init__()
        if hidden > 0:
            self.net = nn.Sequential(
                nn.Linear(in_features, hidden),
                nn.LeakyReLU(0.1),
                nn.Linear(hidden, 1),
            )
        else:
            self.net = nn.Linear(in_features, 1)

    def forward(self, pooled):
        return self.net(pooled).squeeze(-1)


class ClassifierHead(nn.Module):
    """Global average pooling followed by an affine map to class logits."""

    def __init__(self, in_channels: int, num_classes: int):
        super().__init__()
        self.fc = nn.Linear(in_channels, num_classes)

    def forward(self, feature_map):
        return self.fc(gap(feature_map))


def gap(feature_map: torch.Tensor) -> torch.Tensor:
    """Per-sample, per-channel mean over all spatial positions."""
    return feature_map.mean(dim=(2, 3))


def channel_scores(discriminator: nn.Module, pooled: torch.Tensor,
                   is_source: torch.Tensor) -> torch.Tensor:
    """Per-channel domain-discriminability scores, averaged over the batch.

    For each sample the differentiated scalar is the log-likelihood the
    discriminator assigns to the sample's true domain label; the score of
    channel c is pooled[c] * d(scalar)/d(pooled[c]).  Gradients are taken
    with respect to the pooled features only; no parameter gradients
    accumulate and the result is detached from the training graph.

    is_source: boolean/float tensor, 1 for source samples, 0 for target.
    """
    p = pooled.detach().requires_grad_(True)
    with torch.enable_grad():
        logits = discriminator(p)
        labels = is_source.to(logits.dtype)
        loglik = -F.binary_cross_entropy_with_logits(logits, labels,
                                                     reduction="sum")
        (grad,) = torch.autograd.grad(loglik, p)
    return (p.detach() * grad).mean(dim=0)


def invariant_mask(scores, budget: int) -> np.ndarray:
    """Suppress the channels with the top `budget` scores, if positive.

    Ties break toward the lower channel index.  Channels whose score is
    not strictly positive are never suppressed.
    """
    w = np.asarray(scores if not torch.is_tensor(scores) else scores.detach().cpu().numpy(),
                   dtype=np.float64)
    _check_budget(budget, w.size)
    mask = np.ones(w.size, dtype=np.float32)
    order = np.lexsort((np.arange(w.size), -w))  # descending score, then index
    top = order[:budget]
    mask[top[w[top] > 0]] = 0.0
    return mask


def specific_mask(scores, budget: int) -> np.ndarray:
    """Suppress the `budget` channels with the smallest absolute scores.

    Ties break toward the lower channel index.
    """
    w = np.asarray(scores if not torch.is_tensor(scores) else scores.detach().cpu().numpy(),
                   dtype=np.float64)
    _check_budget(budget, w.size)
    mask = np.ones(w.size, dtype=np.float32)
    order = np.lexsort((np.arange(w.size), np.abs(w)))
    mask[order[:budget]] = 0.0
    return mask


def _check_budget(budget: int, width: int):
    if budget < 0 or budget > width:
        raise ValueError(f"suppression budget {budget} outside [0, {width}]")


def apply_mask(feature_map: torch.Tensor, mask) -> torch.Tensor:
    """Multiply channel c of every pixel by mask bit c (mask is constant)."""
    bits = torch.as_tensor(mask, dtype=feature_map.dtype,
                           device=feature_map.device)
    if bits.numel() != feature_map.shape[1]:
        raise ValueError(
            f"mask length {bits.numel()} != channel count {feature_map.shape[1]}")
    return feature_map * bits.detach().view(1, -1, 1, 1)
