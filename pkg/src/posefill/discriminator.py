"""Shallow patch discriminators and the adversarial objectives.

Each discriminator is three spectral-normalized convolutions over one
projected feature level and emits a logit grid at half the input resolution.
The mask-aware objective labels each patch of a composited fake by whether
it covers known (real) or generated (fake) pixels; masks are downsampled to
the logit grid with min-pooling so a patch touching any generated pixel is
labeled fake. Losses use the softplus form of the logistic objective, with
per-level patch means so magnitudes are resolution-invariant; a hinge mode
is available behind a flag.
"""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.parametrizations import spectral_norm

from .errors import (AllPatchesKnown, ChannelMismatch, EmptyLevelList,
                     LevelCountMismatch, ResolutionMismatch)


class PatchDiscriminator(nn.Module):
    """Three convs (3x3 stride 2, 3x3, 1x1) -> logits at ceil(h/2) x ceil(w/2)."""

    def __init__(self, in_channels, width=128, batchnorm=True, sn_iterations=1):
        super().__init__()
        self.in_channels = in_channels
        self.conv1 = spectral_norm(nn.Conv2d(in_channels, width, 3, stride=2, padding=1),
                                   n_power_iterations=sn_iterations)
        self.conv2 = spectral_norm(nn.Conv2d(width, width, 3, padding=1),
                                   n_power_iterations=sn_iterations)
        self.conv3 = spectral_norm(nn.Conv2d(width, 1, 1), n_power_iterations=sn_iterations)
        self.norm1 = nn.BatchNorm2d(width) if batchnorm else nn.Identity()
        self.norm2 = nn.BatchNorm2d(width) if batchnorm else nn.Identity()

    def forward(self, feat):
        if feat.shape[-3] != self.in_channels:
            raise ChannelMismatch(f"{feat.shape[-3]} channels, expected {self.in_channels}")
        squeeze = feat.dim() == 3
        if squeeze:
            feat = feat[None]
        h = F.leaky_relu(self.norm1(self.conv1(feat)), 0.2)
        h = F.leaky_relu(self.norm2(self.conv2(h)), 0.2)
        logits = self.conv3(h)[:, 0]
        return logits[0] if squeeze else logits


def _check_levels(*lists):
    lengths = {len(lst) for lst in lists if lst is not None}
    if 0 in lengths:
        raise EmptyLevelList("no discriminator levels")
    if len(lengths) > 1:
        raise LevelCountMismatch(f"level lists disagree: {sorted(lengths)}")


def loss_d_baseline(real_logits, fake_logits, kind="softplus"):
    """Discriminator loss with whole-image labels, summed over levels."""
    _check_levels(real_logits, fake_logits)
    total = 0.0
    for r, f in zip(real_logits, fake_logits):
        if kind == "hinge":
            total = total + F.relu(1.0 - r).mean() + F.relu(1.0 + f).mean()
        else:
            total = total + F.softplus(-r).mean() + F.softplus(f).mean()
    return total


def loss_d_mask_aware(real_logits, fake_logits, masks, kind="softplus"):
    """Discriminator loss with per-patch labels on composited fakes.

    Real images are all-real as usual. For fakes, a patch with mask 1 covers
    only known pixels and is labeled real; mask 0 patches are labeled fake.
    Reduces to the baseline loss when every mask is zero.
    """
    _check_levels(real_logits, fake_logits, masks)
    total = 0.0
    for r, f, m in zip(real_logits, fake_logits, masks):
        if m.shape != f.shape:
            raise ResolutionMismatch(f"mask {tuple(m.shape)} vs logits {tuple(f.shape)}")
        if kind == "hinge":
            fake_term = m * F.relu(1.0 - f) + (1.0 - m) * F.relu(1.0 + f)
            total = total + F.relu(1.0 - r).mean() + fake_term.mean()
        else:
            fake_term = m * F.softplus(-f) + (1.0 - m) * F.softplus(f)
            total = total + F.softplus(-r).mean() + fake_term.mean()
    return total


def loss_g(fake_logits, masks=None, mode="baseline", kind="softplus"):
    """Non-saturating generator loss.

    In mask-aware mode the per-level mean runs only over generated
    (mask 0) patches; levels whose patches are all known contribute
    nothing, and a batch where every patch at every level is known
    is rejected as degenerate.
    """
    if mode not in ("baseline", "mask_aware"):
        raise ValueError(f"unknown generator loss mode {mode!r}")
    if mode == "mask_aware" and masks is None:
        raise ValueError("mask-aware generator loss requires downsampled masks")
    _check_levels(fake_logits, masks if mode == "mask_aware" else None)
    total = 0.0
    any_generated = False
    for i, f in enumerate(fake_logits):
        per_patch = -f if kind == "hinge" else F.softplus(-f)
        if mode == "baseline":
            total = total + per_patch.mean()
            any_generated = True
            continue
        m = masks[i]
        if m.shape != f.shape:
            raise ResolutionMismatch(f"mask {tuple(m.shape)} vs logits {tuple(f.shape)}")
        weight = 1.0 - m
        denom = weight.sum()
        if denom.item() > 0:
            total = total + (weight * per_patch).sum() / denom
            any_generated = True
    if not any_generated:
        raise AllPatchesKnown("every patch at every level is in the known region")
    return total
