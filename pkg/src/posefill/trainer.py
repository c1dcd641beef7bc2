"""Alternating adversarial training with blur fade, growth and exact resume.

Every random draw (batch indices, latents, flip coins) goes through explicit
torch generators owned by the TrainState, and batch indices are drawn
independently per step, so serializing and restoring a state resumes the run
bit-exactly. One discriminator update is followed by one generator update
and an EMA update per step.
"""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
from PIL import Image

from .data import resample_sample, unit_to_u8
from .discriminator import PatchDiscriminator, loss_d_baseline, loss_d_mask_aware, loss_g
from .errors import FinalStage, StageMismatch
from .generator import EmaWarmup, Generator, GeneratorConfig
from .masks import corrupt, minpool_batch
from .projector import ProjectionSet, blur_schedule, build_feature_network

TRAIN_CHECKPOINT_FORMAT = "posefill-train-ckpt-1"

METRIC_FIELDS = ("step", "stage", "objective", "d_loss", "g_loss", "blur_sigma", "images_seen")


@dataclass(frozen=True)
class TrainSchedule:
    """Optimizer, budget, blur, EMA and augmentation settings.

    stage_budgets counts images per resolution; non-progressive runs train
    only the final resolution and use only its budget. The published
    full-scale run uses lr=0.002, beta1=0.0 and budgets in the hundreds of
    millions; desk defaults scale the budgets down by roughly 1000x.
    """

    stage_budgets: tuple = (50_000, 50_000, 50_000)
    batch_size: int = 16
    lr: float = 0.002
    beta1: float = 0.0
    beta2: float = 0.99
    ema_beta: float = 0.9976
    ema_warmup: bool = True
    flip_prob: float = 0.5
    sigma_max_ref: float = 10.0
    sigma_ref_height: int = 288
    fade_budget: int = 50_000
    objective: str = "mask_aware"      # or "baseline"
    loss_kind: str = "softplus"        # or "hinge"
    g_loss_all_patches: bool = False
    progressive: bool = True
    d_width: int = 128
    d_batchnorm: bool = True
    checkpoint_every: int = 0          # steps; 0 = stage end only
    sample_every: int = 0              # steps; 0 = never

    def __post_init__(self):
        object.__setattr__(self, "stage_budgets", tuple(int(b) for b in self.stage_budgets))
        if any(b <= 0 for b in self.stage_budgets):
            raise ValueError("stage budgets must be positive")
        if self.objective not in ("baseline", "mask_aware"):
            raise ValueError(f"unknown objective {self.objective!r}")


class TrainState:
    """Everything the loop mutates: models, optimizers, counters, RNG streams."""

    def __init__(self, generator: Generator, discriminators, feature_networks,
                 projections, schedule: TrainSchedule, seed: int, config_hash=None):
        self.generator = generator
        self.discriminators = torch.nn.ModuleList(discriminators)
        self.feature_networks = feature_networks
        self.projections = projections
        self.schedule = schedule
        self.seed = seed
        self.config_hash = config_hash
        self.stage = generator.active_stage
        self.step = 0
        self.images_seen = [0] * len(generator.config.resolutions)
        self.rng_latent = torch.Generator().manual_seed(seed + 1)
        self.rng_aug = torch.Generator().manual_seed(seed + 2)
        self.rng_data = torch.Generator().manual_seed(seed + 3)
        self.g_opt = torch.optim.Adam(generator.parameters(), lr=schedule.lr,
                                      betas=(schedule.beta1, schedule.beta2))
        self.d_opt = torch.optim.Adam(self.discriminators.parameters(), lr=schedule.lr,
                                      betas=(schedule.beta1, schedule.beta2))

    @property
    def total_images_seen(self) -> int:
        return sum(self.images_seen)

    def current_resolution(self):
        return self.generator.config.resolutions[self.stage]

    def blur_sigma(self) -> float:
        h = self.current_resolution()[0]
        sigma_max = self.schedule.sigma_max_ref * h / self.schedule.sigma_ref_height
        return blur_schedule(self.total_images_seen, self.schedule.fade_budget, sigma_max)


def build_train_state(gen_config: GeneratorConfig, schedule: TrainSchedule, seed: int,
                      feature_seeds=(11,), feature_widths=(32, 64, 128, 256),
                      projection_seed: int = 7, identity_projection: bool = False,
                      config_hash=None) -> TrainState:
    start_stage = 0 if schedule.progressive else len(gen_config.resolutions) - 1
    generator = Generator(gen_config, start_stage=start_stage, seed=seed)
    fnets = [build_feature_network(s, widths=tuple(feature_widths)) for s in feature_seeds]
    projections = [ProjectionSet(f.level_channels, seed=projection_seed + i,
                                 identity=identity_projection)
                   for i, f in enumerate(fnets)]
    torch.manual_seed(seed + 500)  # discriminator init
    discriminators = []
    for fnet in fnets:
        for c in fnet.level_channels:
            discriminators.append(PatchDiscriminator(c, width=schedule.d_width,
                                                     batchnorm=schedule.d_batchnorm))
    return TrainState(generator, discriminators, fnets, projections, schedule, seed,
                      config_hash=config_hash)


def _flip_batch(state: TrainState, batch):
    out = []
    for sample in batch:
        coin = torch.rand((), generator=state.rng_aug).item()
        out.append(sample.flipped() if coin < state.schedule.flip_prob else sample)
    return out


def _stack_batch(batch):
    images = torch.stack([s.image for s in batch])
    masks = torch.stack([s.mask for s in batch])
    poses = torch.stack([s.pose.tensor() for s in batch])
    return images, masks, poses


def _all_logits(state: TrainState, images, sigma):
    """Blur -> frozen features -> fixed projections -> patch logits, all levels flat."""
    logits = []
    d_index = 0
    for fnet, pset in zip(state.feature_networks, state.projections):
        projected = pset.project(fnet.extract(images, blur_sigma=sigma))
        for feat in projected:
            logits.append(state.discriminators[d_index](feat))
            d_index += 1
    return logits


def _level_masks(masks, logits):
    return [minpool_batch(masks, lg.shape[-2], lg.shape[-1]) for lg in logits]


def train_step(state: TrainState, batch) -> dict:
    """One discriminator update, one generator update, one EMA update."""
    res = state.current_resolution()
    for sample in batch:
        if sample.resolution != res:
            raise StageMismatch(f"sample at {sample.resolution}, stage expects {res}")
    batch = _flip_batch(state, batch)
    images, masks, poses = _stack_batch(batch)
    n = images.shape[0]
    corrupted = corrupt(images, masks[:, None])
    sigma = state.blur_sigma()
    sched = state.schedule

    z_d = torch.randn(n, state.generator.config.latent_dim, generator=state.rng_latent)
    with torch.no_grad():
        fake_detached = state.generator(z_d, corrupted, masks[:, None], poses)
        real_feats = [state.projections[i].project(f.extract(images, blur_sigma=sigma))
                      for i, f in enumerate(state.feature_networks)]
        fake_feats = [state.projections[i].project(f.extract(fake_detached, blur_sigma=sigma))
                      for i, f in enumerate(state.feature_networks)]

    state.d_opt.zero_grad(set_to_none=True)
    d_real = [d(feat) for d, feat in
              zip(state.discriminators, [f for group in real_feats for f in group])]
    d_fake = [d(feat) for d, feat in
              zip(state.discriminators, [f for group in fake_feats for f in group])]
    if sched.objective == "mask_aware":
        level_masks = _level_masks(masks, d_fake)
        d_loss = loss_d_mask_aware(d_real, d_fake, level_masks, kind=sched.loss_kind)
    else:
        d_loss = loss_d_baseline(d_real, d_fake, kind=sched.loss_kind)
    d_loss.backward()
    state.d_opt.step()

    z_g = torch.randn(n, state.generator.config.latent_dim, generator=state.rng_latent)
    state.g_opt.zero_grad(set_to_none=True)
    fake = state.generator(z_g, corrupted, masks[:, None], poses)
    g_logits = _all_logits(state, fake, sigma)
    if sched.objective == "mask_aware" and not sched.g_loss_all_patches:
        level_masks = _level_masks(masks, g_logits)
        g_loss = loss_g(g_logits, level_masks, mode="mask_aware", kind=sched.loss_kind)
    else:
        g_loss = loss_g(g_logits, mode="baseline", kind=sched.loss_kind)
    g_loss.backward()
    state.g_opt.step()

    state.generator.step_count += n
    state.generator.ema_update(sched.ema_beta, EmaWarmup() if sched.ema_warmup else None)
    state.images_seen[state.stage] += n
    state.step += 1
    return {
        "step": state.step,
        "stage": state.stage,
        "objective": sched.objective,
        "d_loss": float(d_loss.detach()),
        "g_loss": float(g_loss.detach()),
        "blur_sigma": sigma,
        "images_seen": state.total_images_seen,
    }


class StageView:
    """Dataset resampled to one stage's resolution, materialized once."""

    def __init__(self, dataset, height, width):
        self.samples = [resample_sample(dataset[i], height, width) for i in range(len(dataset))]

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]


def draw_batch(state: TrainState, view) -> list:
    idx = torch.randint(len(view), (state.schedule.batch_size,), generator=state.rng_data)
    return [view[int(i)] for i in idx]


class MetricsWriter:
    """Append-only CSV of per-step metrics."""

    def __init__(self, path):
        self.path = Path(path)
        new = not self.path.exists()
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "a", newline="")
        self._writer = csv.DictWriter(self._fh, fieldnames=METRIC_FIELDS)
        if new:
            self._writer.writeheader()

    def write(self, row: dict):
        self._writer.writerow({k: row[k] for k in METRIC_FIELDS})
        self._fh.flush()

    def close(self):
        self._fh.close()


def run_stage(state: TrainState, dataset, out_dir=None, writer: MetricsWriter | None = None,
              eval_samples=None, max_steps=None) -> list:
    """Loop train_step until this stage's image budget is exhausted."""
    h, w = state.current_resolution()
    budget = state.schedule.stage_budgets[state.stage]
    view = StageView(dataset, h, w)
    rows = []
    steps = 0
    while state.images_seen[state.stage] < budget:
        if max_steps is not None and steps >= max_steps:
            break
        row = train_step(state, draw_batch(state, view))
        rows.append(row)
        if writer is not None:
            writer.write(row)
        steps += 1
        if out_dir is not None:
            every = state.schedule.checkpoint_every
            if every and state.step % every == 0:
                save_checkpoint(state, Path(out_dir) / "checkpoints" / f"step_{state.step}.pt")
            s_every = state.schedule.sample_every
            if s_every and state.step % s_every == 0:
                grid_path = Path(out_dir) / "samples" / f"step_{state.step}.png"
                render_sample_grid(state.generator.ema_snapshot(),
                                   eval_samples or [view[i] for i in range(min(4, len(view)))],
                                   grid_path, seed=state.seed + 9)
    if out_dir is not None:
        save_checkpoint(state, Path(out_dir) / "checkpoints" / f"stage_{state.stage}_final.pt")
    return rows


def advance_stage(state: TrainState):
    """Grow the generator and move the pipeline to the next resolution.

    Existing parameters and their optimizer moments are carried over;
    discriminators are rebuilt only if their input channel counts change
    (they are fully convolutional, so spatial growth alone reuses them).
    """
    if state.stage >= len(state.generator.config.resolutions) - 1:
        raise FinalStage("no further resolution to grow into")
    old_opt = state.g_opt
    state.generator.grow()
    state.stage += 1
    new_opt = torch.optim.Adam(state.generator.parameters(), lr=state.schedule.lr,
                               betas=(state.schedule.beta1, state.schedule.beta2))
    for p, st in old_opt.state.items():
        new_opt.state[p] = st
    state.g_opt = new_opt

    wanted = [c for f in state.feature_networks for c in f.level_channels]
    current = [d.in_channels for d in state.discriminators]
    if wanted != current:
        torch.manual_seed(state.seed + 600 + state.stage)
        state.discriminators = torch.nn.ModuleList([
            PatchDiscriminator(c, width=state.schedule.d_width,
                               batchnorm=state.schedule.d_batchnorm) for c in wanted])
        state.d_opt = torch.optim.Adam(state.discriminators.parameters(), lr=state.schedule.lr,
                                       betas=(state.schedule.beta1, state.schedule.beta2))
    return state


def run_training(state: TrainState, dataset, out_dir=None, writer=None, eval_samples=None):
    """Drive every remaining stage; growth happens between stages."""
    last = len(state.generator.config.resolutions) - 1
    while True:
        run_stage(state, dataset, out_dir=out_dir, writer=writer, eval_samples=eval_samples)
        if not state.schedule.progressive or state.stage >= last:
            break
        advance_stage(state)
    return state


def save_checkpoint(state: TrainState, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = {
        "format": TRAIN_CHECKPOINT_FORMAT,
        "generator": state.generator.checkpoint_dict(),
        "discriminators": [d.state_dict() for d in state.discriminators],
        "d_channels": [d.in_channels for d in state.discriminators],
        "schedule": asdict(state.schedule),
        "seed": state.seed,
        "config_hash": state.config_hash,
        "feature_networks": [f.to_blob() for f in state.feature_networks],
        "projection_seeds": [p.seed for p in state.projections],
        "identity_projection": any(p.identity for p in state.projections),
        "stage": state.stage,
        "step": state.step,
        "images_seen": list(state.images_seen),
        "g_opt": state.g_opt.state_dict(),
        "d_opt": state.d_opt.state_dict(),
        "rng": {
            "latent": state.rng_latent.get_state(),
            "aug": state.rng_aug.get_state(),
            "data": state.rng_data.get_state(),
        },
    }
    torch.save(blob, path)


def load_checkpoint(path) -> TrainState:
    blob = torch.load(path, weights_only=False)
    if blob.get("format") != TRAIN_CHECKPOINT_FORMAT:
        raise ValueError(f"unknown checkpoint format {blob.get('format')!r}")
    sched_fields = dict(blob["schedule"])
    schedule = TrainSchedule(**sched_fields)
    generator = Generator.from_checkpoint_dict(blob["generator"])

    from .projector import FrozenFeatureNetwork
    fnets = [FrozenFeatureNetwork.from_blob(b) for b in blob["feature_networks"]]
    projections = [ProjectionSet(f.level_channels, seed=int(ps),
                                 identity=blob["identity_projection"])
                   for f, ps in zip(fnets, blob["projection_seeds"])]
    discriminators = []
    for c, sd in zip(blob["d_channels"], blob["discriminators"]):
        d = PatchDiscriminator(c, width=schedule.d_width, batchnorm=schedule.d_batchnorm)
        d.load_state_dict(sd)
        discriminators.append(d)
    state = TrainState(generator, discriminators, fnets, projections, schedule,
                       seed=blob["seed"], config_hash=blob["config_hash"])
    state.stage = blob["stage"]
    state.step = blob["step"]
    state.images_seen = list(blob["images_seen"])
    state.g_opt.load_state_dict(blob["g_opt"])
    state.d_opt.load_state_dict(blob["d_opt"])
    state.rng_latent.set_state(blob["rng"]["latent"])
    state.rng_aug.set_state(blob["rng"]["aug"])
    state.rng_data.set_state(blob["rng"]["data"])
    return state


def render_sample_grid(generator, samples, path, seed=0, latents=None):
    """PNG grid of (corrupted | pose overlay | composited output) rows.

    Returns the latents used, so callers can log them for reproducibility.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rng = torch.Generator().manual_seed(seed)
    rows = []
    used = []
    for i, sample in enumerate(samples):
        if latents is not None:
            z = latents[i]
        else:
            z = torch.randn(generator.config.latent_dim, generator=rng)
        used.append(z)
        corrupted = corrupt(sample.image, sample.mask)
        with torch.no_grad():
            out = generator.synthesize(z, corrupted, sample.mask, sample.pose.tensor())
        overlay = corrupted * 0.35
        skel = sample.pose.skeleton_map.amax(dim=0)
        kp = sample.pose.keypoint_map.amax(dim=0)
        overlay = torch.where(skel[None] > 0, torch.full_like(overlay, 0.4), overlay)
        overlay = torch.where(kp[None] > 0, torch.full_like(overlay, 1.0), overlay)
        rows.append(torch.cat([corrupted, overlay, out], dim=-1))
    grid = torch.cat(rows, dim=-2)
    arr = unit_to_u8(grid.numpy()).transpose(1, 2, 0)
    Image.fromarray(arr, mode="RGB").save(path)
    return used


def config_hash_of(tree: dict) -> str:
    return hashlib.sha256(json.dumps(tree, sort_keys=True).encode()).hexdigest()[:16]
