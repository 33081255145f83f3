"""Latent-space tools: interpolation, attribute directions, editing, mixing and linear probes."""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F
from scipy import stats

from .data import Dataset, normalize
from .rng import derive_rng


class SlerpFallbackWarning(RuntimeWarning):
    """slerp met a zero or antipodal pair and used lerp for it."""


def _as_t(t, like: torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=like.dtype)
    if t.ndim == 1 and like.ndim == 2:
        t = t[:, None]
    return t


def lerp(z1: torch.Tensor, z2: torch.Tensor, t) -> torch.Tensor:
    t = _as_t(t, z1)
    return (1 - t) * z1 + t * z2


def slerp(z1: torch.Tensor, z2: torch.Tensor, t, warn: bool = True, eps: float = 1e-7) -> torch.Tensor:
    """Spherical interpolation along the last axis.

    Norms are interpolated linearly, so equal-norm endpoints stay on their
    sphere. Rows with a zero or (near-)antipodal endpoint fall back to lerp,
    raising :class:`SlerpFallbackWarning` when ``warn`` is set.
    """
    t = _as_t(t, z1)
    n1 = z1.norm(dim=-1, keepdim=True)
    n2 = z2.norm(dim=-1, keepdim=True)
    degenerate = (n1 <= eps) | (n2 <= eps)
    u1 = z1 / n1.clamp_min(eps)
    u2 = z2 / n2.clamp_min(eps)
    cos = (u1 * u2).sum(dim=-1, keepdim=True).clamp(-1.0, 1.0)
    degenerate = degenerate | (cos <= -1.0 + eps)
    omega = torch.acos(cos)
    so = torch.sin(omega)
    small = so.abs() < eps  # (nearly) parallel: sin weights -> linear weights
    so_safe = torch.where(small, torch.ones_like(so), so)
    w1 = torch.where(small, 1 - t, torch.sin((1 - t) * omega) / so_safe)
    w2 = torch.where(small, t, torch.sin(t * omega) / so_safe)
    direction = w1 * u1 + w2 * u2
    out = ((1 - t) * n1 + t * n2) * direction
    if bool(degenerate.any()):
        if warn:
            warnings.warn("slerp endpoint is zero or antipodal; using lerp", SlerpFallbackWarning, stacklevel=2)
        out = torch.where(degenerate, lerp(z1, z2, t), out)
    return out


# -- attribute directions and editing ------------------------------------------

@dataclass
class AttributeDirection:
    vector: np.ndarray
    num_positive: int
    num_negative: int
    label: str = ""

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if not np.isfinite(self.vector).all():
            raise ValueError("direction must be finite")
        if self.num_positive < 1 or self.num_negative < 1:
            raise ValueError("a direction needs at least one exemplar on each side")

    def save(self, path) -> None:
        Path(path).write_text(json.dumps({
            "label": self.label, "vector": self.vector.tolist(),
            "provenance": {"num_positive": self.num_positive, "num_negative": self.num_negative},
        }, indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "AttributeDirection":
        raw = json.loads(Path(path).read_text())
        prov = raw["provenance"]
        return cls(np.asarray(raw["vector"]), prov["num_positive"], prov["num_negative"], raw.get("label", ""))


def attribute_direction(pos_latents, neg_latents, label: str = "") -> AttributeDirection:
    """Difference of the exemplar means, mean(pos) - mean(neg)."""
    pos = np.asarray(pos_latents, dtype=np.float64)
    neg = np.asarray(neg_latents, dtype=np.float64)
    if pos.ndim != 2 or neg.ndim != 2 or len(pos) == 0 or len(neg) == 0:
        raise ValueError("need non-empty (P, d) and (Q, d) exemplar sets")
    if pos.shape[1] != neg.shape[1]:
        raise ValueError("exemplar sets have different latent dims")
    return AttributeDirection(pos.mean(axis=0) - neg.mean(axis=0), len(pos), len(neg), label)


def edit(z: torch.Tensor, direction, alpha: float) -> torch.Tensor:
    vec = direction.vector if isinstance(direction, AttributeDirection) else direction
    vec = torch.as_tensor(np.asarray(vec), dtype=z.dtype)
    if vec.shape[-1] != z.shape[-1]:
        raise ValueError(f"direction dim {vec.shape[-1]} != latent dim {z.shape[-1]}")
    return z + alpha * vec


def mix(z_a: torch.Tensor, z_b: torch.Tensor, mask) -> torch.Tensor:
    """Per-coordinate select: coordinates where ``mask`` is true come from ``z_b``."""
    mask = torch.as_tensor(mask, dtype=torch.bool)
    if z_a.shape != z_b.shape or mask.shape[-1] != z_a.shape[-1]:
        raise ValueError("latents and mask must agree in dimension")
    return torch.where(mask, z_b, z_a)


# -- linear probe ----------------------------------------------------------------

@dataclass
class LinearProbe:
    """Multinomial logistic regression on standardized features."""

    weight: torch.Tensor  # (d, C)
    bias: torch.Tensor  # (C,)
    mean: torch.Tensor
    std: torch.Tensor
    epochs_run: int = 0

    def logits(self, features) -> torch.Tensor:
        f = torch.as_tensor(np.asarray(features), dtype=torch.float64)
        return ((f - self.mean) / self.std) @ self.weight + self.bias

    def predict(self, features) -> np.ndarray:
        return self.logits(features).argmax(dim=1).numpy()


def fit_linear_probe(features, labels, num_classes: Optional[int] = None, seed: int = 0, *,
                     lr: float = 1e-2, weight_decay: float = 1e-4, batch_size: int = 256,
                     max_epochs: int = 200, tol: float = 1e-4) -> LinearProbe:
    """Fit on training features only.

    Minibatch Adam on the L2-regularized cross-entropy. Converged when one
    epoch improves the full-data objective by less than ``tol`` (relative),
    or after ``max_epochs``. ``seed`` sets initialization and shuffling.
    """
    x = torch.as_tensor(np.asarray(features), dtype=torch.float64)
    y = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    if x.ndim != 2 or len(x) != len(y) or len(x) == 0:
        raise ValueError("features must be (N, d) with one label per row")
    c = int(num_classes if num_classes is not None else int(y.max()) + 1)
    mean = x.mean(dim=0)
    std = x.std(dim=0).clamp_min(1e-8)
    xs = (x - mean) / std
    rng = derive_rng(seed, "probe")
    gen = rng.torch_generator()
    weight = (0.01 * torch.randn(x.shape[1], c, generator=gen, dtype=torch.float64)).requires_grad_()
    bias = torch.zeros(c, dtype=torch.float64, requires_grad=True)
    opt = torch.optim.Adam([weight, bias], lr=lr)

    def objective(xb, yb):
        return F.cross_entropy(xb @ weight + bias, yb) + 0.5 * weight_decay * weight.pow(2).sum()

    with torch.no_grad():
        prev = float(objective(xs, y))
    epoch = 0
    for epoch in range(1, max_epochs + 1):
        order = torch.as_tensor(rng.permutation(len(xs)))
        for i in range(0, len(xs), batch_size):
            idx = order[i:i + batch_size]
            opt.zero_grad()
            objective(xs[idx], y[idx]).backward()
            opt.step()
        with torch.no_grad():
            cur = float(objective(xs, y))
        if prev - cur < tol * abs(prev):
            break
        prev = cur
    return LinearProbe(weight.detach(), bias.detach(), mean, std, epoch)


@dataclass
class ProbeResult:
    error_rate: float
    latent_dim: int
    trial_seeds: list[int]
    trial_errors: list[float]
    half_width: Optional[float] = None  # 95% t-interval, reported for >= 5 trials
    num_train: int = 0
    num_test: int = 0
    representation: str = "posterior mean"
    extra: dict = field(default_factory=dict)

    def as_record(self) -> dict:
        return dict(self.__dict__)


def confidence_half_width(values, level: float = 0.95) -> float:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < 2:
        return float("nan")
    return float(stats.t.ppf(0.5 + level / 2, len(v) - 1) * v.std(ddof=1) / math.sqrt(len(v)))


def probe_latents(train_features, train_labels, test_features, test_labels, trials: int = 5, seed: int = 0,
                  num_classes: Optional[int] = None, **fit_kwargs) -> ProbeResult:
    """Fit ``trials`` probes (seeds ``seed .. seed + trials - 1``) and score them on the test set."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    train_labels = np.asarray(train_labels)
    test_labels = np.asarray(test_labels)
    if num_classes is None:
        num_classes = int(train_labels.max()) + 1
    seeds = [seed + i for i in range(trials)]
    errors = []
    for s in seeds:
        probe = fit_linear_probe(train_features, train_labels, num_classes, s, **fit_kwargs)
        errors.append(float((probe.predict(test_features) != test_labels).mean()))
    half = confidence_half_width(errors) if trials >= 5 else None
    return ProbeResult(float(np.mean(errors)), int(np.asarray(train_features).shape[1]), seeds, errors, half,
                       len(train_labels), len(test_labels))


def encode_means(encoder: Callable, dataset: Dataset, batch_size: int = 256) -> np.ndarray:
    """Posterior means for every image, computed in eval mode."""
    module = encoder if isinstance(encoder, torch.nn.Module) else None
    was_training = module.training if module is not None else False
    if module is not None:
        module.eval()
    try:
        out = []
        with torch.no_grad():
            for i in range(0, len(dataset), batch_size):
                mu, _ = encoder(normalize(dataset.images[i:i + batch_size]))
                out.append(mu.double())
        return torch.cat(out).numpy()
    finally:
        if module is not None:
            module.train(was_training)


def linear_probe(encoder: Callable, train: Dataset, test: Dataset, trials: int = 5, seed: int = 0,
                 **fit_kwargs) -> ProbeResult:
    """Probe posterior means: fit on ``train``, report error on ``test``."""
    if train.labels is None or test.labels is None:
        raise ValueError("linear probing needs a labeled dataset")
    num_classes = max(train.num_classes, int(test.labels.max()) + 1)
    return probe_latents(encode_means(encoder, train), train.labels, encode_means(encoder, test), test.labels,
                         trials, seed, num_classes, **fit_kwargs)
