"""Distribution-matching losses for body-attention supervision.

All functions take torch tensors shaped ``(H, W)``, ``(B, H, W)`` or
``(B, 1, H, W)``; statistics are per map and the result is the batch mean.
"""
from __future__ import annotations

import logging

import numpy as np
import torch

log = logging.getLogger(__name__)

KLD_EPS = 1e-8
VAR_EPS = 1e-12
# 8-bit 255 after rounding
PEAK_LEVEL = 254.5 / 255.0


def _flat(x):
    x = torch.as_tensor(x)
    if x.dim() < 2:
        raise ValueError(f"expected a map of at least 2 dimensions, got shape {tuple(x.shape)}")
    if x.dim() == 2:
        return x.reshape(1, -1)
    return x.reshape(x.shape[0], -1)


def _std(x):
    var = x.var(dim=1, unbiased=False, keepdim=True)
    if bool((var < VAR_EPS).any()):
        log.debug("near-constant map in loss; std guarded")
    return torch.sqrt(var + VAR_EPS)


def _standardize(x):
    return (x - x.mean(dim=1, keepdim=True)) / _std(x)


def peak_set(q):
    """Pixels of the target whose 8-bit value is 255."""
    mask = torch.as_tensor(np.asarray(q) if not torch.is_tensor(q) else q) >= PEAK_LEVEL
    if bool((_flat(mask).sum(dim=1) == 0).any()):
        raise ValueError("target has no saturated pixels; NSS' is undefined")
    return mask if torch.is_tensor(q) else mask.numpy()


def nss_prime(p, f):
    """Mean gap between the standardised peak mask and the standardised prediction on peak pixels."""
    p = _flat(p)
    f = _flat(f).to(p.dtype)
    n = f.sum(dim=1)
    if bool((n == 0).any()):
        raise ValueError("empty peak set")
    gap = (_standardize(f) - _standardize(p)) * f
    return (gap.sum(dim=1) / n).mean()


def cc(p, q):
    p = _flat(p)
    q = _flat(q).to(p.dtype)
    pc = p - p.mean(dim=1, keepdim=True)
    qc = q - q.mean(dim=1, keepdim=True)
    cov = (pc * qc).mean(dim=1, keepdim=True)
    return (cov / (_std(p) * _std(q))).mean()


def cc_prime(p, q):
    return 1 - cc(p, q)


def kld(p, q, eps=KLD_EPS):
    """KL divergence of the target from the prediction, both renormalised to sum 1."""
    p = _flat(p)
    q = _flat(q).to(p.dtype)
    p = p / p.sum(dim=1, keepdim=True).clamp_min(eps)
    q = q / q.sum(dim=1, keepdim=True).clamp_min(eps)
    pos = q > 0
    ratio = torch.where(pos, q, torch.ones_like(q)) / (p + eps)
    terms = torch.where(pos, q * torch.log(ratio), torch.zeros_like(q))
    return terms.sum(dim=1).mean()


def body_attention_loss(p, q):
    f = peak_set(q)
    return nss_prime(p, f) + cc_prime(p, q) + kld(p, q)


def total_locating_loss(stack, q):
    """Sum of body-attention losses over every supervision level against one target."""
    if len(stack) != 5:
        raise ValueError(f"expected 5 supervision maps, got {len(stack)}")
    f = peak_set(q)
    total = 0
    for p in stack:
        total = total + nss_prime(p, f) + cc_prime(p, q) + kld(p, q)
    return total


def balanced_bce(logits, target):
    """Class-balanced binary cross-entropy; positives weighted by the negative share."""
    target = target.to(logits.dtype)
    n = target.numel() / target.shape[0]
    pos = target.flatten(1).sum(dim=1).view(-1, *([1] * (target.dim() - 1)))
    w_pos = (n - pos) / n
    weight = torch.where(target > 0.5, w_pos, 1 - w_pos)
    return torch.nn.functional.binary_cross_entropy_with_logits(logits, target, weight=weight)
