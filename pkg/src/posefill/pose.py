"""COCO-17 keypoints: spatial encoding, skeleton rasterization and the OKS metric.

Coordinates are (x, y) in pixels with x along the width axis. Continuous
coordinates map to grid cells via index = floor(v + 0.5); rounded locations
that fall outside the image are dropped (single keypoints) or clipped
(line segments).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import NoVisibleGroundTruth

NUM_KEYPOINTS = 17

# COCO-17 joint order.
NOSE, L_EYE, R_EYE, L_EAR, R_EAR = 0, 1, 2, 3, 4
L_SHOULDER, R_SHOULDER, L_ELBOW, R_ELBOW = 5, 6, 7, 8
L_WRIST, R_WRIST, L_HIP, R_HIP = 9, 10, 11, 12
L_KNEE, R_KNEE, L_ANKLE, R_ANKLE = 13, 14, 15, 16

KEYPOINT_NAMES = (
    "nose", "left_eye", "right_eye", "left_ear", "right_ear",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_hip", "right_hip",
    "left_knee", "right_knee", "left_ankle", "right_ankle",
)

# Standard per-keypoint falloff constants, nose through ankles.
COCO_SIGMAS = np.array([
    0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072,
    0.062, 0.062, 0.107, 0.107, 0.087, 0.087, 0.089, 0.089,
], dtype=np.float64)

# (left, right) index pairs swapped by a horizontal flip.
LEFT_RIGHT_PAIRS = ((1, 2), (3, 4), (5, 6), (7, 8), (9, 10), (11, 12), (13, 14), (15, 16))

NUM_SKELETON_CLASSES = 6
SKELETON_CLASSES = ("left_arm", "right_arm", "left_leg", "right_leg", "torso", "head")

# Standard skeleton partitioned into the 6 classes above. The head class
# additionally connects the nose to the shoulder midpoint when both
# shoulders are visible (handled in rasterize_skeleton).
SKELETON_EDGES = (
    ((L_SHOULDER, L_ELBOW), (L_ELBOW, L_WRIST)),
    ((R_SHOULDER, R_ELBOW), (R_ELBOW, R_WRIST)),
    ((L_HIP, L_KNEE), (L_KNEE, L_ANKLE)),
    ((R_HIP, R_KNEE), (R_KNEE, R_ANKLE)),
    ((L_SHOULDER, R_SHOULDER), (L_HIP, R_HIP), (L_SHOULDER, L_HIP), (R_SHOULDER, R_HIP)),
    ((NOSE, L_EYE), (NOSE, R_EYE), (L_EYE, L_EAR), (R_EYE, R_EAR)),
)


def grid_index(v: float) -> int:
    """Continuous coordinate -> integer grid index."""
    return math.floor(v + 0.5)


@dataclass(frozen=True)
class Keypoints17:
    """17 COCO-ordered keypoints; invisible entries carry no positional meaning."""

    xy: np.ndarray       # (17, 2) float64, columns are (x, y)
    visible: np.ndarray  # (17,) bool

    def __post_init__(self):
        xy = np.asarray(self.xy, dtype=np.float64)
        visible = np.asarray(self.visible, dtype=bool)
        if xy.shape != (NUM_KEYPOINTS, 2):
            raise ValueError(f"expected (17, 2) coordinates, got {xy.shape}")
        if visible.shape != (NUM_KEYPOINTS,):
            raise ValueError(f"expected (17,) visibility flags, got {visible.shape}")
        object.__setattr__(self, "xy", xy)
        object.__setattr__(self, "visible", visible)

    @classmethod
    def from_entries(cls, entries) -> "Keypoints17":
        """Build from [[x, y, v], ...] with v in {0, 1} (the on-disk schema)."""
        arr = np.asarray(entries, dtype=np.float64)
        if arr.shape != (NUM_KEYPOINTS, 3):
            raise ValueError(f"expected 17 [x, y, v] entries, got shape {arr.shape}")
        return cls(arr[:, :2], arr[:, 2] > 0.5)

    def to_entries(self) -> list:
        return [[float(x), float(y), int(v)] for (x, y), v in zip(self.xy, self.visible)]

    def flipped(self, width: int) -> "Keypoints17":
        """Mirror around the vertical axis and swap left/right joint labels."""
        xy = self.xy.copy()
        xy[:, 0] = (width - 1) - xy[:, 0]
        visible = self.visible.copy()
        for left, right in LEFT_RIGHT_PAIRS:
            xy[[left, right]] = xy[[right, left]]
            visible[[left, right]] = visible[[right, left]]
        return Keypoints17(xy, visible)


@dataclass(frozen=True)
class PoseMaps:
    """Binary conditioning maps: one channel per keypoint plus 6 skeleton classes."""

    keypoint_map: torch.Tensor  # (17, H, W) in {0, 1}
    skeleton_map: torch.Tensor  # (6, H, W) in {0, 1}

    def tensor(self) -> torch.Tensor:
        return torch.cat([self.keypoint_map, self.skeleton_map], dim=0)


def encode_keypoints(kps: Keypoints17, height: int, width: int) -> torch.Tensor:
    """One-hot spatial map per keypoint; out-of-bounds keypoints yield empty channels."""
    if height < 1 or width < 1:
        raise ValueError("image dimensions must be positive")
    maps = torch.zeros((NUM_KEYPOINTS, height, width), dtype=torch.float32)
    for k in range(NUM_KEYPOINTS):
        if not kps.visible[k]:
            continue
        col = grid_index(kps.xy[k, 0])
        row = grid_index(kps.xy[k, 1])
        if 0 <= row < height and 0 <= col < width:
            maps[k, row, col] = 1.0
    return maps


def bresenham_line(r0: int, c0: int, r1: int, c1: int) -> list[tuple[int, int]]:
    """All integer (row, col) points of the segment, endpoints included."""
    points = []
    dr = abs(r1 - r0)
    dc = abs(c1 - c0)
    sr = 1 if r0 <= r1 else -1
    sc = 1 if c0 <= c1 else -1
    err = dc - dr
    r, c = r0, c0
    while True:
        points.append((r, c))
        if r == r1 and c == c1:
            break
        e2 = 2 * err
        if e2 >= -dr:
            err -= dr
            c += sc
        if e2 <= dc:
            err += dc
            r += sr
    return points


def rasterize_skeleton(kps: Keypoints17, height: int, width: int) -> torch.Tensor:
    """Draw limb segments into 6 class channels; only fully visible edges are drawn."""
    if height < 1 or width < 1:
        raise ValueError("image dimensions must be positive")
    maps = torch.zeros((NUM_SKELETON_CLASSES, height, width), dtype=torch.float32)

    def draw(channel, xa, ya, xb, yb):
        r0, c0 = grid_index(ya), grid_index(xa)
        r1, c1 = grid_index(yb), grid_index(xb)
        for r, c in bresenham_line(r0, c0, r1, c1):
            if 0 <= r < height and 0 <= c < width:
                maps[channel, r, c] = 1.0

    for channel, edges in enumerate(SKELETON_EDGES):
        for a, b in edges:
            if kps.visible[a] and kps.visible[b]:
                draw(channel, kps.xy[a, 0], kps.xy[a, 1], kps.xy[b, 0], kps.xy[b, 1])
    # Neck line: nose to shoulder midpoint, part of the head class.
    head = SKELETON_CLASSES.index("head")
    if kps.visible[NOSE] and kps.visible[L_SHOULDER] and kps.visible[R_SHOULDER]:
        mx = (kps.xy[L_SHOULDER, 0] + kps.xy[R_SHOULDER, 0]) / 2.0
        my = (kps.xy[L_SHOULDER, 1] + kps.xy[R_SHOULDER, 1]) / 2.0
        draw(head, kps.xy[NOSE, 0], kps.xy[NOSE, 1], mx, my)
    return maps


def build_pose_maps(kps: Keypoints17, height: int, width: int) -> PoseMaps:
    return PoseMaps(
        keypoint_map=encode_keypoints(kps, height, width),
        skeleton_map=rasterize_skeleton(kps, height, width),
    )


def oks(pred: Keypoints17, gt: Keypoints17, scale: float) -> float:
    """Object keypoint similarity in [0, 1].

    Per ground-truth-visible keypoint i the similarity is
    exp(-d_i^2 / (2 * scale * k_i^2)) with k_i twice the standard falloff
    constant and scale the object area in square pixels. Keypoints the
    prediction marks invisible contribute 0.
    """
    if scale <= 0:
        raise ValueError("scale must be positive")
    vis = gt.visible
    if not vis.any():
        raise NoVisibleGroundTruth("no visible ground-truth keypoints")
    k = 2.0 * COCO_SIGMAS
    d2 = ((pred.xy - gt.xy) ** 2).sum(axis=1)
    per_kp = np.exp(-d2 / (2.0 * scale * k ** 2))
    per_kp = np.where(pred.visible, per_kp, 0.0)
    return float(per_kp[vis].mean())
