"""Known/missing mask arithmetic.

Masks are float tensors with values exactly 0 or 1; 1 marks a known pixel,
0 a pixel to be generated. Images live in [-1, 1].
"""
from __future__ import annotations

import math

import torch

from .errors import InvalidTarget, ShapeMismatch


def _check_spatial(a: torch.Tensor, b: torch.Tensor, what: str):
    if a.shape[-2:] != b.shape[-2:]:
        raise ShapeMismatch(f"{what}: {tuple(a.shape)} vs {tuple(b.shape)}")


def corrupt(image: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Zero out the missing region: elementwise product with the broadcast mask."""
    _check_spatial(image, mask, "image/mask spatial dims differ")
    return image * mask


def composite(raw_output: torch.Tensor, corrupted: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Overwrite generator output with known pixels.

    Known pixels come back bit-exact from `corrupted` and receive zero
    gradient with respect to `raw_output`.
    """
    if raw_output.shape != corrupted.shape:
        raise ShapeMismatch(f"raw {tuple(raw_output.shape)} vs corrupted {tuple(corrupted.shape)}")
    _check_spatial(raw_output, mask, "output/mask spatial dims differ")
    return raw_output * (1.0 - mask) + corrupted * mask


def minpool_mask(mask: torch.Tensor, target_h: int, target_w: int) -> torch.Tensor:
    """Downsample a mask by taking the min over adaptive windows.

    Window i covers source rows [floor(i*H/h), ceil((i+1)*H/h)); windows may
    overlap when the shapes do not divide evenly, so a single missing source
    pixel can poison more than one output cell. Reduces to standard pooling
    for divisible shapes and to the identity at the native resolution.
    """
    if mask.dim() != 2:
        raise ShapeMismatch(f"expected a 2-d mask, got shape {tuple(mask.shape)}")
    src_h, src_w = mask.shape
    if not (1 <= target_h <= src_h) or not (1 <= target_w <= src_w):
        raise InvalidTarget(f"target {target_h}x{target_w} invalid for source {src_h}x{src_w}")
    out = torch.empty((target_h, target_w), dtype=mask.dtype, device=mask.device)
    for i in range(target_h):
        r0 = math.floor(i * src_h / target_h)
        r1 = math.ceil((i + 1) * src_h / target_h)
        for j in range(target_w):
            c0 = math.floor(j * src_w / target_w)
            c1 = math.ceil((j + 1) * src_w / target_w)
            out[i, j] = mask[r0:r1, c0:c1].min()
    return out


def minpool_batch(masks: torch.Tensor, target_h: int, target_w: int) -> torch.Tensor:
    """minpool_mask over a batch of (N, H, W) masks."""
    return torch.stack([minpool_mask(m, target_h, target_w) for m in masks])


def missing_bbox_area(mask: torch.Tensor) -> float:
    """Area of the bounding box of the mask's zero region (the region to inpaint).

    Falls back to the full image area when nothing is missing.
    """
    missing = (mask == 0)
    if not missing.any():
        return float(mask.shape[-2] * mask.shape[-1])
    rows = missing.any(dim=-1).nonzero()
    cols = missing.any(dim=-2).nonzero()
    h = int(rows.max() - rows.min()) + 1
    w = int(cols.max() - cols.min()) + 1
    return float(h * w)
