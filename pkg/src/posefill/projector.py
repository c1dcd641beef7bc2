"""Frozen feature networks, fixed random projections and the input-blur schedule.

The discriminators never see pixels directly: images are blurred (with a
sigma that fades linearly over training), pushed through a frozen feature
network, and its four feature levels are mixed by fixed random projections.
Nothing in this module is ever trained; gradients flow only into the image.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import LevelCountMismatch

NUM_LEVELS = 4

PLUGIN_FORMAT = "posefill-fnet-1"


def blur_schedule(step_images: int, fade_budget: int, sigma_max: float) -> float:
    """Linear fade from sigma_max at step 0 to zero at the fade budget."""
    if fade_budget <= 0:
        raise ValueError("fade_budget must be positive")
    return sigma_max * max(0.0, 1.0 - step_images / fade_budget)


def gaussian_blur(image: torch.Tensor, sigma: float) -> torch.Tensor:
    """Separable Gaussian blur, kernel truncated at 3 sigma, replicate padding.

    No-op at sigma <= 0. Differentiable with respect to the image.
    """
    if sigma <= 0:
        return image
    squeeze = image.dim() == 3
    if squeeze:
        image = image[None]
    n, c, h, w = image.shape
    radius_h = min(math.ceil(3 * sigma), h - 1)
    radius_w = min(math.ceil(3 * sigma), w - 1)

    def kernel1d(radius):
        x = torch.arange(-radius, radius + 1, dtype=torch.float64)
        k = torch.exp(-(x ** 2) / (2.0 * sigma ** 2))
        return (k / k.sum()).to(image.dtype)

    kh = kernel1d(radius_h).view(1, 1, -1, 1).expand(c, 1, -1, 1)
    kw = kernel1d(radius_w).view(1, 1, 1, -1).expand(c, 1, 1, -1)
    out = F.pad(image, (0, 0, radius_h, radius_h), mode="replicate")
    out = F.conv2d(out, kh, groups=c)
    out = F.pad(out, (radius_w, radius_w, 0, 0), mode="replicate")
    out = F.conv2d(out, kw, groups=c)
    return out[0] if squeeze else out


@dataclass(frozen=True)
class FeaturePreprocess:
    """Resize rule plus optional channel normalization applied before extraction.

    resize: "none" leaves the image untouched, "native" resizes to `target`
    preserving the training aspect ratio, "square" resizes to target x target
    (224 by default, the usual fixed input of ViT-style networks).
    Normalization constants are given in [0, 1] space; images arrive in
    [-1, 1] and are remapped before normalizing.
    """

    resize: str = "none"
    target: tuple = ()
    mean: tuple = ()
    std: tuple = ()

    def apply(self, image: torch.Tensor) -> torch.Tensor:
        x = image
        if self.resize == "native" and self.target:
            x = F.interpolate(x, size=tuple(self.target), mode="bilinear", align_corners=False)
        elif self.resize == "square":
            side = self.target[0] if self.target else 224
            x = F.interpolate(x, size=(side, side), mode="bilinear", align_corners=False)
        elif self.resize != "none":
            raise ValueError(f"unknown resize mode {self.resize!r}")
        if self.mean:
            mean = x.new_tensor(self.mean).view(1, -1, 1, 1)
            std = x.new_tensor(self.std).view(1, -1, 1, 1)
            x = ((x + 1.0) / 2.0 - mean) / std
        return x


class _StagedConvNet(nn.Module):
    """Four stride-2 conv stages; returns every stage output."""

    def __init__(self, widths, in_channels=3):
        super().__init__()
        stages = []
        prev = in_channels
        for w in widths:
            stages.append(nn.Conv2d(prev, w, 3, stride=2, padding=1))
            prev = w
        self.stages = nn.ModuleList(stages)

    def forward(self, x):
        feats = []
        for conv in self.stages:
            x = F.leaky_relu(conv(x), 0.2)
            feats.append(x)
        return feats


class FrozenFeatureNetwork:
    """A feature extractor whose parameters never receive gradient updates."""

    def __init__(self, name: str, module: nn.Module, preprocess: FeaturePreprocess,
                 level_channels: tuple):
        if len(level_channels) != NUM_LEVELS:
            raise LevelCountMismatch(f"expected {NUM_LEVELS} levels, got {len(level_channels)}")
        self.name = name
        self.module = module
        self.preprocess = preprocess
        self.level_channels = tuple(level_channels)
        self.module.eval()
        for p in self.module.parameters():
            p.requires_grad_(False)

    def to_blob(self) -> dict:
        return {
            "format": PLUGIN_FORMAT,
            "name": self.name,
            "level_channels": list(self.level_channels),
            "state": self.module.state_dict(),
            "preprocess": {
                "resize": self.preprocess.resize,
                "target": list(self.preprocess.target),
                "mean": list(self.preprocess.mean),
                "std": list(self.preprocess.std),
            },
        }

    @classmethod
    def from_blob(cls, blob: dict) -> "FrozenFeatureNetwork":
        if blob.get("format") != PLUGIN_FORMAT:
            raise ValueError(f"not a feature-network archive: {blob.get('format')!r}")
        widths = tuple(blob["level_channels"])
        module = _StagedConvNet(widths)
        module.load_state_dict(blob["state"])
        pp = blob["preprocess"]
        preprocess = FeaturePreprocess(
            resize=pp["resize"], target=tuple(pp["target"]),
            mean=tuple(pp["mean"]), std=tuple(pp["std"]),
        )
        return cls(blob["name"], module, preprocess, widths)

    def to(self, dtype):
        self.module.to(dtype)
        return self

    def extract(self, image: torch.Tensor, blur_sigma: float = 0.0) -> list:
        """Blur, preprocess, extract; exactly four maps at strictly decreasing sizes."""
        squeeze = image.dim() == 3
        if squeeze:
            image = image[None]
        x = gaussian_blur(image, blur_sigma)
        x = self.preprocess.apply(x)
        feats = self.module(x)
        if len(feats) != NUM_LEVELS:
            raise LevelCountMismatch(f"feature network produced {len(feats)} levels")
        for lo, hi in zip(feats[1:], feats[:-1]):
            if lo.shape[-1] >= hi.shape[-1] or lo.shape[-2] >= hi.shape[-2]:
                raise LevelCountMismatch("feature levels must strictly decrease in size")
        return [f[0] for f in feats] if squeeze else feats

    def parameter_fingerprint(self) -> str:
        """Stable hash of all parameters; used to assert frozenness over a run."""
        import hashlib
        h = hashlib.sha256()
        for _, p in sorted(self.module.state_dict().items()):
            h.update(p.detach().cpu().numpy().tobytes())
        return h.hexdigest()

    def save_plugin(self, path):
        torch.save(self.to_blob(), path)


def _seeded_conv_init(conv: nn.Conv2d, gen: torch.Generator):
    fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
    with torch.no_grad():
        conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) / math.sqrt(fan_in))
        if conv.bias is not None:
            conv.bias.zero_()


def build_feature_network(seed: int, widths=(32, 64, 128, 256),
                          preprocess: FeaturePreprocess | None = None,
                          name: str | None = None) -> FrozenFeatureNetwork:
    """Fixed-seed random conv extractor; the desk-scale stand-in for pretrained nets."""
    gen = torch.Generator().manual_seed(seed)
    module = _StagedConvNet(widths)
    for conv in module.stages:
        _seeded_conv_init(conv, gen)
    return FrozenFeatureNetwork(
        name=name or f"randconv-{seed}",
        module=module,
        preprocess=preprocess or FeaturePreprocess(),
        level_channels=tuple(widths),
    )


def load_feature_network_plugin(path) -> FrozenFeatureNetwork:
    """Load a feature-network archive (weights + preprocessing descriptor)."""
    return FrozenFeatureNetwork.from_blob(torch.load(path, weights_only=False))


class _ProjectionWeights(nn.Module):
    """Bias-free fixed random 1x1 channel mixes, lateral adapters and 3x3 scale mixes."""

    def __init__(self, level_channels, seed):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.channel_mix = nn.ModuleList()
        self.scale_mix = nn.ModuleList()
        self.lateral = nn.ModuleList()
        for i, c in enumerate(level_channels):
            ccm = nn.Conv2d(c, c, 1, bias=False)
            _seeded_conv_init(ccm, gen)
            self.channel_mix.append(ccm)
            if i < len(level_channels) - 1:
                csm = nn.Conv2d(c, c, 3, padding=1, bias=False)
                _seeded_conv_init(csm, gen)
                self.scale_mix.append(csm)
                lat = nn.Conv2d(level_channels[i + 1], c, 1, bias=False)
                _seeded_conv_init(lat, gen)
                self.lateral.append(lat)


class ProjectionSet:
    """Four fixed random differentiable projections over one network's features.

    The deepest level is a plain channel mix; every other projected level
    mixes its own channels with the upsampled projection of the level below,
    so projection l depends on feature levels >= l. Weights are fixed at
    construction from the seed and never trained. An identity mode passes
    features through untouched (for ablations).
    """

    def __init__(self, level_channels, seed: int, identity: bool = False):
        self.seed = seed
        self.identity = identity
        self.level_channels = tuple(level_channels)
        self._weights = _ProjectionWeights(self.level_channels, seed)
        self._weights.eval()
        for p in self._weights.parameters():
            p.requires_grad_(False)

    def to(self, dtype):
        self._weights.to(dtype)
        return self

    def project(self, features: list) -> list:
        if len(features) != NUM_LEVELS:
            raise LevelCountMismatch(f"expected {NUM_LEVELS} feature maps, got {len(features)}")
        squeeze = features[0].dim() == 3
        feats = [f[None] if squeeze else f for f in features]
        if self.identity:
            return features
        w = self._weights
        mixed = [w.channel_mix[i](f) for i, f in enumerate(feats)]
        out = [None] * NUM_LEVELS
        out[-1] = mixed[-1]
        for i in range(NUM_LEVELS - 2, -1, -1):
            up = F.interpolate(out[i + 1], size=mixed[i].shape[-2:], mode="nearest")
            out[i] = w.scale_mix[i](mixed[i] + w.lateral[i](up))
        return [o[0] for o in out] if squeeze else out

    def parameter_fingerprint(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for _, p in sorted(self._weights.state_dict().items()):
            h.update(p.detach().cpu().numpy().tobytes())
        return h.hexdigest()
