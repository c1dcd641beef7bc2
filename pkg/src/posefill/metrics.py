"""Sample-quality metrics: Frechet feature distance, path length, pose fidelity.

The Frechet engine is extractor-agnostic: any function mapping an image to a
pooled feature vector defines a variant of the metric. Stats accumulate in a
single streaming pass and merge associatively, so partial accumulators from
parallel workers combine exactly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import torch

from .errors import DimensionMismatch, EmptyDataset, NonPSD, TooFewSamples
from .masks import missing_bbox_area
from .pose import Keypoints17, oks

PSD_TOLERANCE = -1e-8


@dataclass(frozen=True)
class FeatureStats:
    """Gaussian fit of a feature distribution: mean, covariance, sample count."""

    mu: np.ndarray     # (d,)
    sigma: np.ndarray  # (d, d)
    n: int


class StatsAccumulator:
    """Streaming mean/covariance (Welford form) with exact parallel merge."""

    def __init__(self, dim: int):
        self.dim = dim
        self.n = 0
        self.mean = np.zeros(dim, dtype=np.float64)
        self.m2 = np.zeros((dim, dim), dtype=np.float64)

    def add(self, vec):
        x = np.asarray(vec, dtype=np.float64).ravel()
        if x.shape[0] != self.dim:
            raise DimensionMismatch(f"vector of dim {x.shape[0]}, expected {self.dim}")
        self.n += 1
        delta = x - self.mean
        self.mean += delta / self.n
        self.m2 += np.outer(delta, x - self.mean)

    def merge(self, other: "StatsAccumulator"):
        if other.dim != self.dim:
            raise DimensionMismatch(f"cannot merge dim {other.dim} into {self.dim}")
        if other.n == 0:
            return self
        if self.n == 0:
            self.n, self.mean, self.m2 = other.n, other.mean.copy(), other.m2.copy()
            return self
        n = self.n + other.n
        delta = other.mean - self.mean
        self.mean = (self.n * self.mean + other.n * other.mean) / n
        self.m2 = self.m2 + other.m2 + np.outer(delta, delta) * (self.n * other.n / n)
        self.n = n
        return self

    def finalize(self) -> FeatureStats:
        if self.n < 2:
            raise TooFewSamples(f"need at least 2 samples, saw {self.n}")
        return FeatureStats(self.mean.copy(), self.m2 / (self.n - 1), self.n)


def accumulate_stats(extract_fn, images) -> FeatureStats:
    """Fit feature stats over a stream of images in one pass."""
    acc = None
    for image in images:
        vec = np.asarray(extract_fn(image), dtype=np.float64).ravel()
        if acc is None:
            acc = StatsAccumulator(vec.shape[0])
        acc.add(vec)
    if acc is None:
        raise TooFewSamples("empty image stream")
    return acc.finalize()


def _check_psd(sigma: np.ndarray, name: str):
    eig = scipy.linalg.eigvalsh(0.5 * (sigma + sigma.T))
    if eig.min() < PSD_TOLERANCE:
        raise NonPSD(f"{name} covariance has eigenvalue {eig.min():.3e}")


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """|mu_a - mu_b|^2 + Tr(Sa + Sb - 2 (Sa Sb)^(1/2)).

    The square-root trace term comes from the eigendecomposition of the
    symmetrized product; tiny negative eigenvalues from roundoff are
    clamped to zero.
    """
    if a.mu.shape != b.mu.shape:
        raise DimensionMismatch(f"feature dims differ: {a.mu.shape[0]} vs {b.mu.shape[0]}")
    _check_psd(a.sigma, "first")
    _check_psd(b.sigma, "second")
    diff = a.mu - b.mu
    prod = a.sigma @ b.sigma
    eig = scipy.linalg.eigvalsh(0.5 * (prod + prod.T))
    sqrt_trace = np.sqrt(np.clip(eig, 0.0, None)).sum()
    return float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * sqrt_trace)


def pooled_feature_fn(fnet):
    """Image -> global-average-pooled deepest feature level, as a numpy vector."""

    def extract(image: torch.Tensor) -> np.ndarray:
        with torch.no_grad():
            feats = fnet.extract(image)
        return feats[-1].mean(dim=(-2, -1)).cpu().numpy()

    return extract


def masked_mse_distance(a: torch.Tensor, b: torch.Tensor, sample) -> float:
    """Mean squared pixel difference restricted to the generated region."""
    if sample is None or getattr(sample, "mask", None) is None:
        return float(((a - b) ** 2).mean())
    weight = (1.0 - sample.mask)[None]
    denom = weight.sum() * a.shape[0]
    if denom.item() == 0:
        return 0.0
    return float((((a - b) ** 2) * weight).sum() / denom)


def ppl(gen_fn, conditions, epsilon=1e-4, n_pairs=256, distance=masked_mse_distance,
        latent_dim=64, seed=0) -> float:
    """Perceptual path length: expected squared output change per unit latent step.

    For each pair, two latents are drawn, a position t is sampled uniformly
    in [0, 1), and the (squared) distance between outputs at t and t+epsilon
    is divided by epsilon^2. Conditions are held fixed per pair and cycled
    from `conditions`.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    rng = torch.Generator().manual_seed(seed)
    values = []
    for i in range(n_pairs):
        cond = conditions[i % len(conditions)]
        z1 = torch.randn(latent_dim, generator=rng)
        z2 = torch.randn(latent_dim, generator=rng)
        t = torch.rand((), generator=rng).item()
        za = z1 + t * (z2 - z1)
        zb = z1 + (t + epsilon) * (z2 - z1)
        out_a = gen_fn(za, cond)
        out_b = gen_fn(zb, cond)
        values.append(distance(out_a, out_b, cond) / epsilon ** 2)
    return float(np.mean(values))


def generator_ppl_fn(generator):
    """Adapt a trained generator to the (z, sample) -> image signature of ppl()."""
    from .masks import corrupt

    def gen_fn(z, sample):
        with torch.no_grad():
            corrupted = corrupt(sample.image, sample.mask)
            return generator.synthesize(z, corrupted, sample.mask, sample.pose.tensor())

    return gen_fn


def evaluate_oks(gen_fn, dataset, redetector, latent_dim=64, seed=0) -> float:
    """Mean OKS of re-detected keypoints on generated outputs vs ground truth.

    Latents are drawn from a fixed seed in dataset order, so the score is
    deterministic. `redetector(image, sample)` returns Keypoints17; one that
    marks every keypoint invisible scores 0 for that sample. The OKS scale
    is the bounding-box area of the region the sample asks to be inpainted.
    """
    if len(dataset) == 0:
        raise EmptyDataset("cannot evaluate on an empty dataset")
    rng = torch.Generator().manual_seed(seed)
    scores = []
    for i in range(len(dataset)):
        sample = dataset[i]
        z = torch.randn(latent_dim, generator=rng)
        out = gen_fn(z, sample)
        detected = redetector(out, sample)
        scale = missing_bbox_area(sample.mask)
        scores.append(oks(detected, sample.keypoints, scale))
    return float(np.mean(scores))
