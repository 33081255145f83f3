"""Sample-quality and reconstruction metrics.

Every metric that needs a feature network goes through an :class:`Embedder`,
so numbers are only comparable between reports that share an embedder id.
Images are normalized (N, C, H, W) tensors in [-1, 1].
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol

import numpy as np
import torch
from scipy.special import xlogy

from .latent import lerp, slerp
from .rng import RngStream

PIXEL_DISTANCE_REDUCTION = "mean over images of the per-image L2 norm in [-1, 1] pixel units"


class InsufficientSamples(ValueError):
    pass


class EmbedderUnavailable(RuntimeError):
    pass


class Embedder(Protocol):
    """What the metrics need from a feature network."""

    id: str

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """(N, F) vectors for Fréchet distance."""

    def probs(self, x: torch.Tensor) -> torch.Tensor:
        """(N, C) class probabilities for the Inception Score."""

    def feature_maps(self, x: torch.Tensor) -> torch.Tensor:
        """Activations of the perceptual layer, any trailing shape."""


class IdentityEmbedder:
    """Pixels as features. Useful as an analytic stub."""

    id = "identity"

    def features(self, x):
        return x.flatten(1)

    def probs(self, x):
        raise EmbedderUnavailable("the identity embedder has no classifier")

    def feature_maps(self, x):
        return x


# -- Gaussian statistics and Fréchet distance ----------------------------------

@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray

    @property
    def dim(self) -> int:
        return len(self.mean)


def fit_gaussian(features) -> GaussianStats:
    """Sample mean and unbiased (N - 1) sample covariance."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2:
        raise ValueError(f"expected (N, F) features, got shape {f.shape}")
    if len(f) < 2:
        raise ValueError("need at least 2 samples to fit a covariance")
    mean = f.mean(axis=0)
    centered = f - mean
    cov = centered.T @ centered / (len(f) - 1)
    return GaussianStats(mean, (cov + cov.T) / 2)


def sqrtm_psd(m: np.ndarray) -> np.ndarray:
    """Symmetric square root of a PSD matrix; negative eigenvalues clamped to 0."""
    m = np.asarray(m, dtype=np.float64)
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def trace_sqrt_product(c1: np.ndarray, c2: np.ndarray) -> float:
    """Tr((C1 C2)^{1/2}) via the symmetric form C1^{1/2} C2 C1^{1/2}."""
    s1 = sqrtm_psd(c1)
    m = s1 @ c2 @ s1
    w = np.linalg.eigvalsh((m + m.T) / 2)
    return float(np.sqrt(np.clip(w, 0.0, None)).sum())


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    diff = a.mean - b.mean
    value = diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * trace_sqrt_product(a.cov, b.cov)
    return max(float(value), 0.0)


# -- Inception Score -----------------------------------------------------------

def inception_score(probs, atol: float = 1e-6) -> float:
    """exp(mean_n KL(p(y|x_n) || p(y))), evaluated in log space."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or len(p) == 0:
        raise ValueError("expected a non-empty (N, C) probability matrix")
    if (p < -atol).any() or np.abs(p.sum(axis=1) - 1.0).max() > atol:
        raise ValueError("rows must be probability vectors summing to 1")
    p = np.clip(p, 0.0, None)
    marginal = p.mean(axis=0)
    kl = (xlogy(p, p) - xlogy(p, marginal)).sum(axis=1)
    return float(math.exp(kl.mean()))


# -- distances -----------------------------------------------------------------

def pixel_distance(x: torch.Tensor, x_hat: torch.Tensor) -> float:
    """Mean over images of ||x_i - x_hat_i||_2."""
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    diff = (x.double() - x_hat.double()).flatten(1)
    return float(diff.norm(dim=1).mean())


def _batched(fn: Callable, x: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    with torch.no_grad():
        return torch.cat([fn(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])


def perceptual_distance(x: torch.Tensor, x_hat: torch.Tensor, embedder: Embedder, batch_size: int = 256) -> float:
    """Mean squared difference of the embedder's perceptual-layer activations."""
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    fa = _batched(embedder.feature_maps, x, batch_size).double()
    fb = _batched(embedder.feature_maps, x_hat, batch_size).double()
    if fa.shape != fb.shape:
        raise ValueError("embedder returned mismatched feature shapes")
    return float((fa - fb).pow(2).mean())


def compute_fid(real_images: torch.Tensor, fake_images: torch.Tensor, embedder: Embedder,
                sample_count: int, allow_small: bool = False, batch_size: int = 256) -> float:
    """FID between two image sets; every image given is used.

    Both sets must hold at least ``sample_count`` images unless
    ``allow_small`` is set.
    """
    for name, imgs in (("real", real_images), ("fake", fake_images)):
        if len(imgs) < sample_count and not allow_small:
            raise InsufficientSamples(f"{name} set has {len(imgs)} images, fewer than sample_count={sample_count}")
    fr = _batched(embedder.features, real_images, batch_size).double().numpy()
    ff = _batched(embedder.features, fake_images, batch_size).double().numpy()
    return frechet_distance(fit_gaussian(fr), fit_gaussian(ff))


# -- perceptual path length ----------------------------------------------------

def _as_dtype(fn, dtype):
    if isinstance(fn, torch.nn.Module):
        return copy.deepcopy(fn).to(dtype).eval()
    return fn


def perceptual_path_length(decoder: Callable, embedder: Embedder, num_pairs: int, epsilon: float, rng: RngStream,
                           interp: str = "slerp", latent_dim: Optional[int] = None, batch_size: int = 128,
                           dtype: torch.dtype = torch.float64) -> float:
    """Full-path PPL: mean of d(G(i(z1, z2, t)), G(i(z1, z2, t + eps))) / eps**2, t ~ U[0, 1].

    ``d`` is the summed squared difference of the embedder's perceptual-layer
    activations. Decoder and embedder run in ``dtype`` (double by default)
    so that tiny steps are not swamped by rounding.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if num_pairs < 1:
        raise ValueError("num_pairs must be >= 1")
    if interp not in ("lerp", "slerp"):
        raise ValueError(f"interp must be 'lerp' or 'slerp', got {interp!r}")
    d = latent_dim if latent_dim is not None else decoder.latent_dim
    gen = rng.torch_generator()
    z1 = torch.randn(num_pairs, d, generator=gen, dtype=dtype)
    z2 = torch.randn(num_pairs, d, generator=gen, dtype=dtype)
    t = torch.rand(num_pairs, 1, generator=gen, dtype=dtype)
    step = lerp if interp == "lerp" else (lambda a, b, s: slerp(a, b, s, warn=False))
    dec = _as_dtype(decoder, dtype)
    fmaps = embedder.feature_maps
    if isinstance(embedder, torch.nn.Module):
        fmaps = _as_dtype(embedder, dtype).feature_maps
    total = torch.zeros((), dtype=torch.float64)
    with torch.no_grad():
        for i in range(0, num_pairs, batch_size):
            sl = slice(i, i + batch_size)
            za = step(z1[sl], z2[sl], t[sl])
            zb = step(z1[sl], z2[sl], t[sl] + epsilon)
            fa = fmaps(dec(za)).flatten(1).double()
            fb = fmaps(dec(zb)).flatten(1).double()
            total += ((fa - fb).pow(2).sum(dim=1) / epsilon ** 2).sum()
    return float(total / num_pairs)


# -- report ----------------------------------------------------------------------

TABLE_COLUMNS = ("fid_sampling", "is_sampling", "fid_reconstruction", "is_reconstruction",
                 "pixel_distance", "perceptual_distance")


@dataclass
class MetricsReport:
    fid_sampling: Optional[float] = None
    is_sampling: Optional[float] = None
    fid_reconstruction: Optional[float] = None
    is_reconstruction: Optional[float] = None
    pixel_distance: Optional[float] = None
    perceptual_distance: Optional[float] = None
    ppl: Optional[float] = None
    sample_counts: dict[str, int] = field(default_factory=dict)
    embedder_id: Optional[str] = None
    absent: dict[str, str] = field(default_factory=dict)  # metric -> reason
    pixel_distance_reduction: str = PIXEL_DISTANCE_REDUCTION

    @property
    def inception_score(self) -> Optional[float]:
        return self.is_sampling

    def as_record(self) -> dict:
        return dict(self.__dict__)

    def row(self) -> list[Optional[float]]:
        return [getattr(self, c) for c in TABLE_COLUMNS]
