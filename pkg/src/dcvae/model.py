"""Networks for the 32x32 backbone.

Encoder and discriminator share one residual trunk design (four pre-activation
blocks, the first two downsampling 32 -> 16 -> 8), spectrally normalized.
The decoder mirrors it with nearest-neighbour upsampling 4 -> 8 -> 16 -> 32
and ends in tanh. The discriminator exposes two contrast taps:

``tap_low``  output of the second residual block, (N, disc_width, 8, 8)
``tap_high`` output of the first linear layer after pooling, (N, disc_width)
"""
from __future__ import annotations

from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils import parametrize

from .rng import RngStream, derive_rng

SN_EPS = 1e-12


# -- spectral normalization ----------------------------------------------------

def spectral_normalize(weight: torch.Tensor, u: torch.Tensor, n_power_iterations: int = 1,
                       eps: float = SN_EPS) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Divide ``weight`` by a power-iteration estimate of its top singular value.

    ``weight`` is viewed as (out, fan_in). ``u`` is the stored left singular
    vector estimate; the updated estimate is returned alongside the
    normalized weight and sigma. Gradients flow through ``weight`` only.
    A zero matrix comes back unchanged (sigma clamped at ``eps``).
    """
    w = weight.reshape(weight.shape[0], -1)
    with torch.no_grad():
        for _ in range(n_power_iterations):
            v = F.normalize(w.t() @ u, dim=0, eps=eps)
            u = F.normalize(w @ v, dim=0, eps=eps)
        v = F.normalize(w.t() @ u, dim=0, eps=eps)
    sigma = torch.dot(u, w @ v)
    return weight / sigma.clamp_min(eps), u, sigma


class SpectralNorm(nn.Module):
    """Parametrization: one power iteration per forward while training."""

    def __init__(self, out_features: int, generator: torch.Generator | None = None, n_power_iterations: int = 1):
        super().__init__()
        self.n_power_iterations = n_power_iterations
        u = torch.randn(out_features, generator=generator)
        self.register_buffer("u", F.normalize(u, dim=0, eps=SN_EPS))

    def forward(self, weight):
        n = self.n_power_iterations if self.training else 0
        w_sn, u, _ = spectral_normalize(weight, self.u.to(weight.dtype), n)
        if self.training:
            self.u.copy_(u)
        return w_sn


def apply_spectral_norm(module: nn.Module, generator: torch.Generator) -> nn.Module:
    for sub in list(module.modules()):
        if isinstance(sub, (nn.Conv2d, nn.Linear)):
            parametrize.register_parametrization(sub, "weight", SpectralNorm(sub.weight.shape[0], generator))
    return module


# -- building blocks -----------------------------------------------------------

class DownBlock(nn.Module):
    def __init__(self, cin: int, cout: int, downsample: bool, first: bool = False):
        super().__init__()
        self.first = first
        self.downsample = downsample
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.shortcut = nn.Conv2d(cin, cout, 1) if (cin != cout or downsample) else None

    def forward(self, x):
        h = x if self.first else F.relu(x)
        h = self.conv2(F.relu(self.conv1(h)))
        if self.downsample:
            h = F.avg_pool2d(h, 2)
        s = x
        if self.shortcut is not None:
            if self.first:
                s = self.shortcut(F.avg_pool2d(s, 2))
            else:
                s = self.shortcut(s)
                if self.downsample:
                    s = F.avg_pool2d(s, 2)
        return h + s


class UpBlock(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.shortcut = nn.Conv2d(cin, cout, 1)

    def forward(self, x):
        h = F.interpolate(F.relu(self.bn1(x)), scale_factor=2, mode="nearest")
        h = self.conv2(F.relu(self.bn2(self.conv1(h))))
        return h + self.shortcut(F.interpolate(x, scale_factor=2, mode="nearest"))


class ResidualTrunk(nn.Module):
    """Four residual stages; returns per-stage outputs."""

    def __init__(self, in_channels: int, width: int):
        super().__init__()
        self.blocks = nn.ModuleList([
            DownBlock(in_channels, width, downsample=True, first=True),
            DownBlock(width, width, downsample=True),
            DownBlock(width, width, downsample=False),
            DownBlock(width, width, downsample=False),
        ])

    def forward(self, x):
        outs = []
        for block in self.blocks:
            x = block(x)
            outs.append(x)
        return outs


def _check_images(x: torch.Tensor, channels: int, size: int) -> None:
    if x.ndim != 4 or x.shape[1:] != (channels, size, size):
        raise ValueError(f"expected images of shape (N, {channels}, {size}, {size}), got {tuple(x.shape)}")


class Encoder(nn.Module):
    def __init__(self, channels: int, width: int, latent_dim: int, size: int = 32):
        super().__init__()
        self.channels, self.size, self.latent_dim = channels, size, latent_dim
        self.trunk = ResidualTrunk(channels, width)
        self.out = nn.Linear(width * (size // 4) ** 2, 2 * latent_dim)

    def forward(self, x):
        _check_images(x, self.channels, self.size)
        # flatten rather than pool: the spatial layout is what the decoder needs back
        h = F.relu(self.trunk(x)[-1]).flatten(1)
        mu, logvar = self.out(h).chunk(2, dim=1)
        return mu, logvar


class Decoder(nn.Module):
    def __init__(self, channels: int, width: int, latent_dim: int, size: int = 32):
        super().__init__()
        self.latent_dim, self.width = latent_dim, width
        self.bottom = size // 8
        self.fc = nn.Linear(latent_dim, self.bottom * self.bottom * width)
        self.blocks = nn.Sequential(UpBlock(width, width), UpBlock(width, width), UpBlock(width, width))
        self.bn = nn.BatchNorm2d(width)
        self.to_rgb = nn.Conv2d(width, channels, 3, padding=1)

    def forward(self, z):
        if z.ndim != 2 or z.shape[1] != self.latent_dim:
            raise ValueError(f"expected latents of shape (N, {self.latent_dim}), got {tuple(z.shape)}")
        h = self.fc(z).view(-1, self.width, self.bottom, self.bottom)
        h = self.blocks(h)
        return torch.tanh(self.to_rgb(F.relu(self.bn(h))))


class Discriminator(nn.Module):
    """Returns ``(logits, taps)``; ``taps`` maps tap id -> features."""

    def __init__(self, channels: int, width: int, size: int = 32):
        super().__init__()
        self.channels, self.size = channels, size
        self.trunk = ResidualTrunk(channels, width)
        self.fc1 = nn.Linear(width, width)
        self.logit = nn.Linear(width, 1)

    def forward(self, x):
        _check_images(x, self.channels, self.size)
        stages = self.trunk(x)
        pooled = F.relu(stages[-1]).sum(dim=(2, 3))
        high = self.fc1(pooled)
        logits = self.logit(F.relu(high)).squeeze(1)
        return logits, {"tap_low": stages[1], "tap_high": high}

    def logit_head_parameters(self):
        return list(self.logit.parameters())


def _standardize(norm: Optional[nn.BatchNorm1d], h: torch.Tensor) -> torch.Tensor:
    """Affine-free batch standardization; a single row falls back to the running statistics."""
    if norm is None:
        return h
    if norm.training and len(h) > 1:
        return norm(h)
    return F.batch_norm(h, norm.running_mean, norm.running_var, training=False, eps=norm.eps)


class ProjectionHead(nn.Module):
    """1x1 channel-reducing conv, then a linear layer; rows L2-normalized.

    With ``norm`` the linear output is batch-standardized before the L2
    normalization. Discriminator features share a large common component, so
    without it every image starts at nearly the same embedding.
    """

    def __init__(self, in_channels: int, spatial: int, reduce_channels: int, embed_dim: int, bias: bool = True,
                 norm: bool = False):
        super().__init__()
        self.reduce = nn.Conv2d(in_channels, reduce_channels, 1, bias=bias)
        self.fc = nn.Linear(reduce_channels * spatial * spatial, embed_dim, bias=bias)
        self.norm = nn.BatchNorm1d(embed_dim, affine=False) if norm else None

    def forward(self, feat):
        if feat.ndim == 2:
            feat = feat[:, :, None, None]
        h = self.fc(self.reduce(feat).flatten(1))
        return F.normalize(_standardize(self.norm, h), dim=1, eps=SN_EPS)


def sample_patch_embedding(tap_features: torch.Tensor, rng: RngStream) -> tuple[torch.Tensor, tuple[int, int]]:
    """Pick one spatial location (shared across the batch) and return its unit-norm fibers."""
    if tap_features.ndim != 4:
        raise ValueError("patch embeddings need a spatial (N, C, H, W) tap")
    _, _, h, w = tap_features.shape
    loc = (int(rng.integers(0, h)), int(rng.integers(0, w)))
    return patch_fibers(tap_features, loc), loc


def patch_fibers(tap_features: torch.Tensor, loc: tuple[int, int]) -> torch.Tensor:
    fib = tap_features[:, :, loc[0], loc[1]]
    return F.normalize(fib, dim=1, eps=SN_EPS)


# -- full model ------------------------------------------------------------------

TAP_SPATIAL = {"tap_low": 8, "tap_high": 1}


class DCVAE(nn.Module):
    def __init__(self, channels: int, latent_dim: int, embed_dim: int, enc_width: int, dec_width: int,
                 disc_width: int, head_channels: int, taps, head_bias: bool = True, head_norm: bool = False):
        super().__init__()
        self.latent_dim = latent_dim
        self.encoder = Encoder(channels, enc_width, latent_dim)
        self.decoder = Decoder(channels, dec_width, latent_dim)
        self.discriminator = Discriminator(channels, disc_width)
        self.heads = nn.ModuleDict({
            tap: ProjectionHead(disc_width, TAP_SPATIAL[tap], head_channels, embed_dim, head_bias, head_norm)
            for tap in taps
        })
        # the patch scheme has no head; it gets its own parameter-free normalizer
        self.patch_norm = nn.BatchNorm1d(disc_width, affine=False) if head_norm else None

    def encode(self, x):
        return self.encoder(x)

    def decode(self, z):
        return self.decoder(z)

    def discriminate(self, x):
        return self.discriminator(x)

    def project(self, tap_features, tap_id: str):
        if tap_id not in self.heads:
            raise KeyError(f"no projection head for tap {tap_id!r}")
        return self.heads[tap_id](tap_features)

    def project_patch(self, tap_features, loc: tuple[int, int]):
        """Unit-norm fibers at ``loc`` (standardized first when the heads are)."""
        fib = tap_features[:, :, loc[0], loc[1]]
        return F.normalize(_standardize(self.patch_norm, fib), dim=1, eps=SN_EPS)

    def min_player_parameters(self):
        return [*self.encoder.parameters(), *self.decoder.parameters(), *self.heads.parameters()]

    def max_player_parameters(self):
        return list(self.discriminator.parameters())


def _init_weights(model: nn.Module, gen: torch.Generator) -> None:
    for m in model.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu", generator=gen)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def image_channels(dataset_cfg) -> int:
    if dataset_cfg.name in ("mnist", "mnist5k"):
        return 1
    if dataset_cfg.name == "toy":
        return dataset_cfg.channels
    return 3


def init_parameters(cfg, seed: int | None = None) -> DCVAE:
    """Build the model for ``cfg`` with fan-in (He) initialization keyed by the seed."""
    seed = cfg.seed if seed is None else seed
    model = DCVAE(image_channels(cfg.dataset), cfg.latent_dim, cfg.embed_dim, cfg.model.enc_width,
                  cfg.model.dec_width, cfg.model.disc_width, cfg.model.head_channels, cfg.contrast_taps,
                  cfg.model.head_bias, cfg.model.head_norm)
    gen = derive_rng(seed, "init").torch_generator()
    _init_weights(model, gen)
    apply_spectral_norm(model.encoder.trunk, gen)  # the mu/logvar head stays unconstrained
    apply_spectral_norm(model.discriminator, gen)
    return model


def architecture_manifest(model: DCVAE) -> dict:
    """Names and shapes of every stored tensor, plus tap shapes."""
    disc_width = model.discriminator.fc1.parametrizations.weight.original.shape[0]
    return {
        "tensors": {k: list(v.shape) for k, v in model.state_dict().items()},
        "taps": {"tap_low": [disc_width, 8, 8], "tap_high": [disc_width]},
        "latent_dim": model.latent_dim,
    }
