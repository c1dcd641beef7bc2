"""Style-modulated U-Net generator with progressive growth and an EMA shadow.

The conditional input is the corrupted image, the known mask and the 23 pose
channels (27 channels total). Each conv unit applies instance normalization,
then a per-channel scale/shift derived from the style vector, then the
convolution. Residual sums are scaled by 1/sqrt(2), or 1/sqrt(3) when a
U-net skip joins the sum. Blocks added by growth instead gate their residual
branch with a per-channel LayerScale initialized to 1e-5, so a zero gate
leaves the trunk bit-exact; this replaces the variance-preserving divisor
for grown blocks. The decoder emits an image at every level; contributions
are upsampled and summed. The final output is composited so known pixels
are preserved exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import AlreadyAtMaxResolution, DimensionMismatch, ResolutionMismatch
from .masks import composite

LAYER_SCALE_INIT = 1e-5

CHECKPOINT_FORMAT = "posefill-ckpt-1"

# 3 image + 1 mask + 17 keypoint + 6 skeleton channels.
INPUT_CHANNELS = 27


@dataclass(frozen=True)
class GeneratorConfig:
    """Architecture hyperparameters; defaults are the CPU-trainable desk scale.

    The full-scale variant (resolutions up to 288x160, channels
    {18: 512, 36: 512, 72: 512, 144: 256, 288: 128}, style_dim 512,
    blocks_per_stage 2) is expressible through the same fields.
    """

    resolutions: tuple = ((18, 10), (36, 20), (72, 40))
    channels: dict = field(default_factory=lambda: {18: 128, 36: 128, 72: 64})
    blocks_per_stage: int = 1
    style_dim: int = 128
    latent_dim: int = 64
    lrelu_slope: float = 0.2

    def __post_init__(self):
        res = tuple(tuple(r) for r in self.resolutions)
        object.__setattr__(self, "resolutions", res)
        for (h0, w0), (h1, w1) in zip(res[:-1], res[1:]):
            if h1 != 2 * h0 or w1 != 2 * w0:
                raise ValueError(f"resolutions must double: {(h0, w0)} -> {(h1, w1)}")
        for h, _ in res:
            if self.channels.get(h, 0) <= 0:
                raise ValueError(f"missing or non-positive channel count for height {h}")
        if self.blocks_per_stage < 1:
            raise ValueError("blocks_per_stage must be >= 1")

    def channels_at(self, stage: int) -> int:
        return self.channels[self.resolutions[stage][0]]


class StyleMapper(nn.Module):
    """Two dense layers from the 64-dim latent to the style vector."""

    layer_count = 2

    def __init__(self, latent_dim=64, style_dim=128, slope=0.2):
        super().__init__()
        self.latent_dim = latent_dim
        self.style_dim = style_dim
        self.slope = slope
        self.fc1 = nn.Linear(latent_dim, style_dim)
        self.fc2 = nn.Linear(style_dim, style_dim)

    def forward(self, z):
        if z.shape[-1] != self.latent_dim:
            raise DimensionMismatch(f"latent of length {z.shape[-1]}, expected {self.latent_dim}")
        h = F.leaky_relu(self.fc1(z), self.slope)
        return F.leaky_relu(self.fc2(h), self.slope)


class ModulatedConv(nn.Module):
    """Instance normalization -> style scale/shift -> 3x3 conv -> leaky relu."""

    def __init__(self, in_ch, out_ch, style_dim, slope=0.2):
        super().__init__()
        self.norm = nn.InstanceNorm2d(in_ch, affine=False)
        self.affine = nn.Linear(style_dim, 2 * in_ch)
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.slope = slope

    def forward(self, x, w):
        scale, shift = self.affine(w).chunk(2, dim=-1)
        h = self.norm(x)
        h = h * (1.0 + scale[:, :, None, None]) + shift[:, :, None, None]
        return F.leaky_relu(self.conv(h), self.slope)


class ResidualBlock(nn.Module):
    """Two modulated convs around a residual path, optionally fed by a U-net skip.

    Base blocks: out = (x + f(x) [+ skip]) / sqrt(2 or 3).
    Grown blocks: out = x + gamma * (f(x) [+ skip]), gamma per channel.
    """

    def __init__(self, channels, style_dim, unet_skip=False, layer_scale=False, slope=0.2):
        super().__init__()
        self.conv1 = ModulatedConv(channels, channels, style_dim, slope)
        self.conv2 = ModulatedConv(channels, channels, style_dim, slope)
        self.unet_skip = unet_skip
        if layer_scale:
            self.gamma = nn.Parameter(torch.full((channels,), LAYER_SCALE_INIT))
        else:
            self.gamma = None

    def forward(self, x, w, skip=None):
        if (skip is not None) != self.unet_skip:
            raise ValueError("U-net skip wiring does not match block configuration")
        branch = self.conv2(self.conv1(x, w), w)
        if skip is not None:
            branch = branch + skip
        if self.gamma is not None:
            return x + self.gamma[None, :, None, None] * branch
        divisor = math.sqrt(3.0) if self.unet_skip else math.sqrt(2.0)
        return (x + branch) / divisor


class _Level(nn.Module):
    """One resolution level of the U-net.

    Owns the conditional entry conv (used only while this is the outermost
    level), the encoder/decoder residual blocks, the transitions to and from
    the level below, and the to-image branch of the output skip path.
    """

    def __init__(self, config: GeneratorConfig, index: int, grown: bool):
        super().__init__()
        ch = config.channels_at(index)
        sd = config.style_dim
        slope = config.lrelu_slope
        self.index = index
        self.grown = grown
        self.slope = slope
        self.from_input = nn.Conv2d(INPUT_CHANNELS, ch, 3, padding=1)
        self.enc = nn.ModuleList([
            ResidualBlock(ch, sd, unet_skip=False, layer_scale=grown, slope=slope)
            for _ in range(config.blocks_per_stage)
        ])
        # The first decoder block above the bottom level receives the U-net skip.
        self.dec = nn.ModuleList([
            ResidualBlock(ch, sd, unet_skip=(index > 0 and b == 0), layer_scale=grown, slope=slope)
            for b in range(config.blocks_per_stage)
        ])
        if index > 0:
            inner = config.channels_at(index - 1)
            self.down = nn.Conv2d(ch, inner, 1)
            self.up = nn.Conv2d(inner, ch, 1)
        self.to_image = nn.Conv2d(ch, 3, 1)

    def residual_blocks(self):
        return list(self.enc) + list(self.dec)


class Generator(nn.Module):
    """Conditional U-net generator; owns the style mapper, growth state and EMA."""

    def __init__(self, config: GeneratorConfig, start_stage=0, seed=0,
                 grown_flags=None, dtype=torch.float32):
        super().__init__()
        if not (0 <= start_stage < len(config.resolutions)):
            raise ValueError(f"start_stage {start_stage} out of range")
        if grown_flags is None:
            grown_flags = [False] * (start_stage + 1)
        if len(grown_flags) != start_stage + 1:
            raise ValueError("grown_flags must align with the built levels")
        torch.manual_seed(seed)  # deterministic parameter init
        self.config = config
        self.init_seed = seed
        self.active_stage = start_stage
        self.step_count = 0
        self.grown_flags = list(grown_flags)
        self.mapper = StyleMapper(config.latent_dim, config.style_dim, config.lrelu_slope)
        self.levels = nn.ModuleList([
            _Level(config, i, grown=flag) for i, flag in enumerate(grown_flags)
        ])
        self.to(dtype)
        self._dtype = dtype
        self.ema = {n: p.detach().clone() for n, p in self.named_parameters()}

    @property
    def resolution(self):
        return self.config.resolutions[self.active_stage]

    def forward(self, z, corrupted, mask, pose):
        """Batched synthesis: (N,64), (N,3,H,W), (N,1,H,W), (N,23,H,W) -> (N,3,H,W)."""
        h, w = self.resolution
        if corrupted.shape[-2:] != (h, w):
            raise ResolutionMismatch(f"inputs at {tuple(corrupted.shape[-2:])}, stage expects {(h, w)}")
        if mask.dim() == 3:
            mask = mask[:, None]
        x = torch.cat([corrupted, mask, pose], dim=1)
        if x.shape[1] != INPUT_CHANNELS:
            raise ResolutionMismatch(f"{x.shape[1]} input channels, expected {INPUT_CHANNELS}")
        style = self.mapper(z)

        x = F.leaky_relu(self.levels[self.active_stage].from_input(x), self.config.lrelu_slope)
        skips = {}
        for i in range(self.active_stage, -1, -1):
            level = self.levels[i]
            for block in level.enc:
                x = block(x, style)
            skips[i] = x
            if i > 0:
                x = F.leaky_relu(level.down(F.avg_pool2d(x, 2)), self.config.lrelu_slope)

        img = None
        for i in range(self.active_stage + 1):
            level = self.levels[i]
            if i > 0:
                x = F.interpolate(x, scale_factor=2, mode="nearest")
                x = F.leaky_relu(level.up(x), self.config.lrelu_slope)
            for b, block in enumerate(level.dec):
                skip = skips[i] if block.unet_skip else None
                x = block(x, style, skip=skip)
            y = level.to_image(x)
            img = y if img is None else F.interpolate(img, scale_factor=2, mode="nearest") + y

        return composite(img, corrupted, mask)

    def synthesize(self, z, corrupted, mask, pose):
        """Single-sample convenience wrapper around forward()."""
        out = self.forward(z[None], corrupted[None], mask[None, None], pose[None])
        return out[0]

    def grow(self):
        """Append a new outermost level; existing parameters are untouched.

        New residual blocks carry LayerScale gates at 1e-5 so the grown level
        initially contributes almost nothing. No parameters are frozen.
        """
        if self.active_stage >= len(self.config.resolutions) - 1:
            raise AlreadyAtMaxResolution(f"already at {self.resolution}")
        torch.manual_seed(self.init_seed + 1000 + len(self.levels))
        new = _Level(self.config, len(self.levels), grown=True).to(self._dtype)
        self.levels.append(new)
        self.grown_flags.append(True)
        self.active_stage += 1
        for n, p in self.named_parameters():
            if n not in self.ema:
                self.ema[n] = p.detach().clone()
        return self

    def ema_update(self, beta_target: float, warmup: "EmaWarmup | None" = None):
        """shadow <- beta*shadow + (1-beta)*params, beta ramped up during warmup."""
        if not (0.0 <= beta_target < 1.0):
            raise ValueError("beta_target must be in [0, 1)")
        beta = beta_target
        if warmup is not None:
            beta = min(beta_target, warmup.beta_at(self.step_count))
        with torch.no_grad():
            for n, p in self.named_parameters():
                self.ema[n].mul_(beta).add_(p.detach(), alpha=1.0 - beta)

    def ema_snapshot(self) -> "Generator":
        """A generator twin carrying the EMA weights; used for eval and sampling."""
        twin = Generator(self.config, start_stage=self.active_stage, seed=self.init_seed,
                         grown_flags=self.grown_flags, dtype=self._dtype)
        twin.load_state_dict(self.state_dict())
        with torch.no_grad():
            for n, p in twin.named_parameters():
                p.copy_(self.ema[n])
        twin.step_count = self.step_count
        twin.eval()
        return twin

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def checkpoint_dict(self) -> dict:
        from dataclasses import asdict
        return {
            "format": CHECKPOINT_FORMAT,
            "config": asdict(self.config),
            "seed": self.init_seed,
            "active_stage": self.active_stage,
            "grown_flags": list(self.grown_flags),
            "step_count": self.step_count,
            "state": self.state_dict(),
            "ema": {n: t.clone() for n, t in self.ema.items()},
        }

    @classmethod
    def from_checkpoint_dict(cls, blob: dict) -> "Generator":
        if blob.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unknown checkpoint format {blob.get('format')!r}")
        cfg = dict(blob["config"])
        cfg["resolutions"] = tuple(tuple(r) for r in cfg["resolutions"])
        cfg["channels"] = {int(k): int(v) for k, v in cfg["channels"].items()}
        gen = cls(GeneratorConfig(**cfg), start_stage=blob["active_stage"],
                  seed=blob["seed"], grown_flags=blob["grown_flags"])
        gen.load_state_dict(blob["state"])
        gen.ema = {n: t.clone() for n, t in blob["ema"].items()}
        gen.step_count = blob["step_count"]
        return gen


@dataclass(frozen=True)
class EmaWarmup:
    """Ramp beta(step) = (num_offset + step) / (den_offset + step), rising from ~0."""

    num_offset: float = 1.0
    den_offset: float = 10.0

    def beta_at(self, step: int) -> float:
        return (self.num_offset + step) / (self.den_offset + step)


def map_latent(mapper: StyleMapper, z: torch.Tensor) -> torch.Tensor:
    """Deterministic latent -> style vector mapping."""
    return mapper(z)
