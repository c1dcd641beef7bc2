"""Synthetic stick-figure data with exact ground truth, plus the on-disk format.

Every joint is rendered as a disk of a unique palette color, which makes the
pose of an image measurable by simple blob detection: the whole
keypoint-fidelity evaluation loop closes without any learned pose estimator.
Keypoints are generated at integer pixel centers so blob centroids of clean
renders coincide exactly with the ground truth.

On disk a dataset is
    root/manifest.json                {"schema_version": 1, "ids": [...]}
    root/images/{id}.png              8-bit RGB, lossless
    root/masks/{id}.png               8-bit gray, 255=known, 0=missing
    root/annotations/{id}.json        {"keypoints": [[x, y, v] x17]}
Pixel values map affinely between [0, 255] and [-1, 1]; synthesized images
are quantized to the 8-bit grid so saving and loading round-trips exactly.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import CorruptImage, InvalidTarget, MissingAnnotation, SchemaVersionMismatch
from .masks import minpool_mask
from .pose import (Keypoints17, NUM_KEYPOINTS, PoseMaps, SKELETON_EDGES,
                   bresenham_line, build_pose_maps)

SCHEMA_VERSION = 1


def u8_to_unit(values: np.ndarray) -> np.ndarray:
    """[0, 255] integers -> [-1, 1] float32."""
    return (np.asarray(values, dtype=np.float64) / 255.0 * 2.0 - 1.0).astype(np.float32)


def unit_to_u8(values: np.ndarray) -> np.ndarray:
    """[-1, 1] floats -> [0, 255] integers (round to nearest)."""
    scaled = (np.asarray(values, dtype=np.float64) + 1.0) / 2.0 * 255.0
    return np.rint(scaled).clip(0, 255).astype(np.uint8)


def _default_palette_u8() -> np.ndarray:
    """17 joint colors with at least two saturated channels each.

    Built from the corners and edge midpoints of the RGB cube (channel levels
    13/128/242 in 8-bit), so any two colors differ by >= 0.89 in some channel
    and every color sits far from the muted backgrounds and gray limbs.
    """
    lo, mid, hi = 13, 128, 242
    corners = [(r, g, b) for r in (lo, hi) for g in (lo, hi) for b in (lo, hi)]
    mids = []
    for axis in range(3):
        for a in (lo, hi):
            for b in (lo, hi):
                c = [a, b]
                c.insert(axis, mid)
                mids.append(tuple(c))
    colors = corners + mids
    return np.array(colors[:NUM_KEYPOINTS], dtype=np.uint8)


LIMB_COLOR_U8 = (64, 64, 64)


@dataclass(frozen=True)
class StickFigureSpec:
    """Rendering and pose-sampling parameters for synthetic figures."""

    palette: np.ndarray = field(default_factory=lambda: u8_to_unit(_default_palette_u8()))
    limb_color: tuple = field(default_factory=lambda: tuple(u8_to_unit(np.array(LIMB_COLOR_U8))))
    limb_width: int = 1
    background_amplitude: float = 0.2
    scale_range: tuple = (0.72, 0.88)
    joint_radius: int | None = None      # None: 1 at height >= 36, else 0
    min_separation: int | None = None    # None: 3 at height >= 72, 2 at >= 36, else 1
    max_pose_attempts: int = 200

    def __post_init__(self):
        pal = np.asarray(self.palette, dtype=np.float32)
        if pal.shape != (NUM_KEYPOINTS, 3):
            raise ValueError(f"palette must be (17, 3), got {pal.shape}")
        diffs = np.linalg.norm(pal[:, None, :] - pal[None, :, :], axis=-1)
        np.fill_diagonal(diffs, np.inf)
        if diffs.min() <= 0.3:
            raise ValueError(f"palette colors too close: min distance {diffs.min():.3f}")
        object.__setattr__(self, "palette", pal)

    def radius_for(self, height: int) -> int:
        if self.joint_radius is not None:
            return self.joint_radius
        return 1 if height >= 36 else 0

    def separation_for(self, height: int) -> int:
        if self.min_separation is not None:
            return self.min_separation
        return 3 if height >= 72 else (2 if height >= 36 else 1)


@dataclass
class MaskedSample:
    """One training/evaluation unit: image, known mask, keypoints, pose maps."""

    image: torch.Tensor      # (3, H, W) float32 in [-1, 1]
    mask: torch.Tensor       # (H, W) float32 in {0, 1}
    keypoints: Keypoints17
    pose: PoseMaps

    @property
    def resolution(self):
        return tuple(self.image.shape[-2:])

    def flipped(self) -> "MaskedSample":
        """Horizontal mirror; keypoint sides swap and pose maps are rebuilt."""
        h, w = self.resolution
        kps = self.keypoints.flipped(w)
        return MaskedSample(
            image=torch.flip(self.image, dims=[-1]),
            mask=torch.flip(self.mask, dims=[-1]),
            keypoints=kps,
            pose=build_pose_maps(kps, h, w),
        )


def _sample_pose(rng: np.random.Generator, height: int, width: int,
                 spec: StickFigureSpec, margin: int) -> np.ndarray:
    """One candidate pose as (17, 2) float (x, y) pixel coordinates."""
    h_fig = rng.uniform(*spec.scale_range) * height
    cx = width / 2.0 + rng.uniform(-0.08, 0.08) * width
    cy = height / 2.0 + rng.uniform(-0.03, 0.03) * height

    def jit(a):
        return rng.uniform(-a, a) * h_fig

    pts = np.zeros((NUM_KEYPOINTS, 2))
    nose = np.array([cx + jit(0.02), cy - 0.40 * h_fig])
    pts[0] = nose
    pts[1] = nose + [-0.06 * h_fig, -0.05 * h_fig + jit(0.005)]
    pts[2] = nose + [+0.06 * h_fig, -0.05 * h_fig + jit(0.005)]
    pts[3] = nose + [-0.115 * h_fig, -0.02 * h_fig + jit(0.005)]
    pts[4] = nose + [+0.115 * h_fig, -0.02 * h_fig + jit(0.005)]
    shoulder_y = cy - 0.26 * h_fig
    shoulder_w = (0.16 + rng.uniform(-0.015, 0.015)) * h_fig
    pts[5] = [cx - shoulder_w, shoulder_y + jit(0.01)]
    pts[6] = [cx + shoulder_w, shoulder_y + jit(0.01)]
    hip_y = cy + 0.08 * h_fig
    hip_w = (0.10 + rng.uniform(-0.01, 0.01)) * h_fig
    pts[11] = [cx - hip_w, hip_y + jit(0.01)]
    pts[12] = [cx + hip_w, hip_y + jit(0.01)]

    def limb(origin, length, angle):
        # angle 0 points straight down, positive rotates toward +x
        return origin + length * np.array([np.sin(angle), np.cos(angle)])

    for side, shoulder, hip in ((-1, 5, 11), (+1, 6, 12)):
        upper = rng.uniform(0.25, 1.25) * side
        pts[7 if side < 0 else 8] = limb(pts[shoulder], 0.17 * h_fig, upper)
        fore = upper + rng.uniform(-0.7, 0.7)
        pts[9 if side < 0 else 10] = limb(pts[7 if side < 0 else 8], 0.16 * h_fig, fore)
        thigh = rng.uniform(-0.15, 0.45) * side
        pts[13 if side < 0 else 14] = limb(pts[hip], 0.21 * h_fig, thigh)
        shin = thigh + rng.uniform(-0.35, 0.35)
        pts[15 if side < 0 else 16] = limb(pts[13 if side < 0 else 14], 0.20 * h_fig, shin)

    rounded = np.rint(pts)
    rounded[:, 0] = rounded[:, 0].clip(margin, width - 1 - margin)
    rounded[:, 1] = rounded[:, 1].clip(margin, height - 1 - margin)
    return rounded


def _min_separation(pts: np.ndarray) -> float:
    d = np.abs(pts[:, None, :] - pts[None, :, :]).max(axis=-1)
    np.fill_diagonal(d, np.inf)
    return float(d.min())


def _smooth_background(rng: np.random.Generator, height: int, width: int, amp: float) -> np.ndarray:
    coarse = rng.uniform(-amp, amp, size=(3, max(2, height // 6), max(2, width // 6)))
    t = torch.from_numpy(coarse[None]).float()
    up = F.interpolate(t, size=(height, width), mode="bilinear", align_corners=False)[0]
    return up.numpy().clip(-amp, amp)


def synth_sample(spec: StickFigureSpec, seed: int, height: int, width: int) -> MaskedSample:
    """Render one figure over a textured background; deterministic per seed.

    Joint positions are re-sampled until all pairs clear the minimum pixel
    separation for this resolution; after the attempt budget the most
    separated candidate is kept, so generation always terminates.
    """
    if height < 8 or width < 8:
        raise ValueError("figures need at least 8x8 pixels")
    rng = np.random.default_rng(seed)
    radius = spec.radius_for(height)
    separation = spec.separation_for(height)
    margin = max(1, radius)

    best, best_sep = None, -1.0
    for _ in range(spec.max_pose_attempts):
        pts = _sample_pose(rng, height, width, spec, margin)
        sep = _min_separation(pts)
        if sep > best_sep:
            best, best_sep = pts, sep
        if sep >= separation:
            break
    pts = best
    kps = Keypoints17(pts, np.ones(NUM_KEYPOINTS, dtype=bool))

    img = _smooth_background(rng, height, width, spec.background_amplitude)
    painted = np.zeros((height, width), dtype=bool)

    limb = np.array(spec.limb_color, dtype=np.float32)
    half = spec.limb_width // 2
    for edges in SKELETON_EDGES:
        for a, b in edges:
            r0, c0 = int(pts[a, 1]), int(pts[a, 0])
            r1, c1 = int(pts[b, 1]), int(pts[b, 0])
            for r, c in bresenham_line(r0, c0, r1, c1):
                for dr in range(-half, half + 1):
                    for dc in range(-half, half + 1):
                        rr, cc = r + dr, c + dc
                        if 0 <= rr < height and 0 <= cc < width:
                            img[:, rr, cc] = limb
                            painted[rr, cc] = True

    for k in range(NUM_KEYPOINTS):
        r, c = int(pts[k, 1]), int(pts[k, 0])
        for dr in range(-radius, radius + 1):
            for dc in range(-radius, radius + 1):
                rr, cc = r + dr, c + dc
                if 0 <= rr < height and 0 <= cc < width:
                    img[:, rr, cc] = spec.palette[k]
                    painted[rr, cc] = True

    rows, cols = np.nonzero(painted)
    mask = np.ones((height, width), dtype=np.float32)
    r0 = max(0, rows.min() - 2)
    r1 = min(height, rows.max() + 3)
    c0 = max(0, cols.min() - 2)
    c1 = min(width, cols.max() + 3)
    mask[r0:r1, c0:c1] = 0.0

    image = torch.from_numpy(u8_to_unit(unit_to_u8(img)))
    return MaskedSample(
        image=image,
        mask=torch.from_numpy(mask),
        keypoints=kps,
        pose=build_pose_maps(kps, height, width),
    )


def detect_pose_blobs(image: torch.Tensor, spec: StickFigureSpec,
                      tolerance: float = 0.25, min_area: int = 1) -> Keypoints17:
    """Find each joint as the centroid of pixels near its palette color.

    A joint is visible iff its blob covers at least `min_area` pixels.
    """
    img = image.detach().cpu().numpy()
    xy = np.zeros((NUM_KEYPOINTS, 2))
    visible = np.zeros(NUM_KEYPOINTS, dtype=bool)
    for k in range(NUM_KEYPOINTS):
        diff = np.abs(img - spec.palette[k][:, None, None]).max(axis=0)
        rows, cols = np.nonzero(diff <= tolerance)
        if rows.size >= min_area:
            xy[k] = (cols.mean(), rows.mean())
            visible[k] = True
    return Keypoints17(xy, visible)


def resample_sample(sample: MaskedSample, height: int, width: int) -> MaskedSample:
    """Downsample to an integer-divisor resolution; masks min-pool, images average."""
    src_h, src_w = sample.resolution
    if (src_h, src_w) == (height, width):
        return sample
    if src_h % height or src_w % width or src_h // height != src_w // width:
        raise InvalidTarget(f"{(src_h, src_w)} does not reduce to {(height, width)}")
    f = src_h // height
    image = F.avg_pool2d(sample.image[None], f)[0]
    mask = minpool_mask(sample.mask, height, width)
    xy = (sample.keypoints.xy + 0.5) / f - 0.5
    kps = Keypoints17(xy, sample.keypoints.visible.copy())
    return MaskedSample(image=image, mask=mask, keypoints=kps,
                        pose=build_pose_maps(kps, height, width))


def write_sample(root, sample_id: str, sample: MaskedSample):
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    (root / "annotations").mkdir(parents=True, exist_ok=True)
    rgb = unit_to_u8(sample.image.numpy()).transpose(1, 2, 0)
    Image.fromarray(rgb, mode="RGB").save(root / "images" / f"{sample_id}.png")
    m = (sample.mask.numpy() * 255).astype(np.uint8)
    Image.fromarray(m, mode="L").save(root / "masks" / f"{sample_id}.png")
    blob = {"keypoints": sample.keypoints.to_entries()}
    (root / "annotations" / f"{sample_id}.json").write_text(
        json.dumps(blob, sort_keys=True))


def write_manifest(root, ids):
    blob = {"schema_version": SCHEMA_VERSION, "ids": list(ids)}
    (Path(root) / "manifest.json").write_text(json.dumps(blob, sort_keys=True, indent=1))


class DiskDataset:
    """Lazy, ordered, seekable access to a dataset directory."""

    def __init__(self, root):
        self.root = Path(root)
        manifest_path = self.root / "manifest.json"
        if not manifest_path.exists():
            raise MissingAnnotation(f"no manifest at {manifest_path}")
        manifest = json.loads(manifest_path.read_text())
        if manifest.get("schema_version") != SCHEMA_VERSION:
            raise SchemaVersionMismatch(
                f"schema {manifest.get('schema_version')!r}, expected {SCHEMA_VERSION}")
        self.ids = list(manifest["ids"])
        self._cache = {}

    def __len__(self):
        return len(self.ids)

    def __getitem__(self, index: int) -> MaskedSample:
        sid = self.ids[index]
        if sid in self._cache:
            return self._cache[sid]
        sample = self._load(sid)
        self._cache[sid] = sample
        return sample

    def _load(self, sid: str) -> MaskedSample:
        ann_path = self.root / "annotations" / f"{sid}.json"
        if not ann_path.exists():
            raise MissingAnnotation(f"annotation missing for sample {sid!r}")
        blob = json.loads(ann_path.read_text())
        entries = blob.get("keypoints", [])
        if len(entries) != NUM_KEYPOINTS:
            raise SchemaVersionMismatch(f"sample {sid!r} has {len(entries)} keypoints, expected 17")
        kps = Keypoints17.from_entries(entries)

        img_path = self.root / "images" / f"{sid}.png"
        mask_path = self.root / "masks" / f"{sid}.png"
        try:
            rgb = np.asarray(Image.open(img_path).convert("RGB"))
            m = np.asarray(Image.open(mask_path).convert("L"))
        except FileNotFoundError as e:
            raise CorruptImage(f"missing image data for sample {sid!r}: {e}") from e
        except Exception as e:
            raise CorruptImage(f"unreadable image for sample {sid!r}: {e}") from e
        if not np.isin(m, (0, 255)).all():
            raise CorruptImage(f"mask for sample {sid!r} is not binary")
        if rgb.shape[:2] != m.shape:
            raise CorruptImage(f"image/mask shapes differ for sample {sid!r}")

        image = torch.from_numpy(u8_to_unit(rgb.transpose(2, 0, 1)))
        mask = torch.from_numpy((m > 127).astype(np.float32))
        h, w = mask.shape
        return MaskedSample(image=image, mask=mask, keypoints=kps,
                            pose=build_pose_maps(kps, h, w))

    def shuffled_indices(self, seed: int) -> list:
        rng = np.random.default_rng(seed)
        return [int(i) for i in rng.permutation(len(self.ids))]
