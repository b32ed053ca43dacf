"""Composite training loss: source cross-entropy, orthogonality between the
refined branches, and an adversarial domain term driven by gradient
reversal."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class LossWeights:
    ortho: float = 0.1   # lambda_1
    domain: float = 1.0  # lambda_2

    def __post_init__(self):
        if self.ortho < 0 or self.domain < 0:
            raise ValueError("loss weights must be >= 0")


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        return x

    @staticmethod
    def backward(ctx, grad_output):
        return -grad_output


def grad_reverse(x: torch.Tensor) -> torch.Tensor:
    """Identity in the forward pass, sign-flipped gradient (coefficient 1)."""
    return _GradReverse.apply(x)


def cls_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood under softmax; labels are 0-based."""
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(
            f"labels must lie in [0, {logits.shape[1] - 1}], found "
            f"[{labels.min().item()}, {labels.max().item()}]")
    return F.cross_entropy(logits, labels)


def ortho_loss(f_di: torch.Tensor, f_ds: torch.Tensor) -> torch.Tensor:
    """Squared Frobenius norm of the cross-Gram matrix of the two branches.

    Each sample's map is flattened and L2-normalized (zero vectors stay
    zero); the loss is ||H_di H_ds^T||_F^2 / N^2.
    """
    if f_di.shape != f_ds.shape:
        raise ValueError(f"branch shapes differ: {f_di.shape} vs {f_ds.shape}")
    n = f_di.shape[0]
    h_di = _row_normalize(f_di.reshape(n, -1))
    h_ds = _row_normalize(f_ds.reshape(n, -1))
    gram = h_di @ h_ds.t()
    return (gram ** 2).sum() / (n * n)


def _row_normalize(h: torch.Tensor) -> torch.Tensor:
    norms = h.norm(dim=1, keepdim=True)
    return h / torch.where(norms > 0, norms, torch.ones_like(norms))


def domain_adv_loss(discriminator, p_di_src, p_di_tgt, p_ds_src, p_ds_tgt,
                    reverse: bool = True):
    """Domain-classification BCE over both branches.

    The invariant-branch term reaches the feature parameters through
    reversed gradients (adversarial); the specific-branch term propagates
    normally so the discriminator stays informative for its channel
    scores.  The discriminator itself receives standard minimizing
    gradients from both terms.  `reverse=False` disables the sign flip,
    which turns the value into a plain differentiable function of its
    inputs (used by the finite-difference harness).
    """
    flip = grad_reverse if reverse else (lambda x: x)
    di = torch.cat([flip(p_di_src), flip(p_di_tgt)], dim=0)
    ds = torch.cat([p_ds_src, p_ds_tgt], dim=0)
    labels_di = _source_labels(p_di_src, p_di_tgt)
    labels_ds = _source_labels(p_ds_src, p_ds_tgt)
    loss_di = F.binary_cross_entropy_with_logits(discriminator(di), labels_di)
    loss_ds = F.binary_cross_entropy_with_logits(discriminator(ds), labels_ds)
    return loss_di + loss_ds


def _source_labels(p_src, p_tgt):
    return torch.cat([
        torch.ones(p_src.shape[0], dtype=p_src.dtype, device=p_src.device),
        torch.zeros(p_tgt.shape[0], dtype=p_tgt.dtype, device=p_tgt.device),
    ])


def total_loss(cls: torch.Tensor, ortho: torch.Tensor, dom: torch.Tensor,
               weights: LossWeights) -> torch.Tensor:
    """Weighted sum cls + lambda_1 * ortho + lambda_2 * dom."""
    for name, value in (("cls", cls), ("ortho", ortho), ("dom", dom)):
        if not torch.isfinite(torch.as_tensor(value)).all():
            raise FloatingPointError(f"non-finite loss component: {name}")
    return cls + weights.ortho * ortho + weights.domain * dom
