"""Loss terms and their combination into the four training modes.

Conventions: images are (N, C, H, W); latents (N, d); contrast embeddings
are unit-norm rows. Scalar losses are batch means unless stated otherwise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import torch
import torch.nn.functional as F

from .config import LOSS_TERMS, MODE_TERMS
from .model import patch_fibers

LOG_FLOOR = math.log(1e-7)


# -- ELBO pieces -----------------------------------------------------------------

def kl_gaussian(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, diag(exp(logvar))) || N(0, I)), summed over dims, averaged over the batch."""
    per_dim = 0.5 * (logvar.exp() + mu.pow(2) - 1.0 - logvar)
    return per_dim.sum(dim=1).mean()


def reparameterize(mu: torch.Tensor, logvar: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    if eps.shape != mu.shape or logvar.shape != mu.shape:
        raise ValueError(f"shape mismatch: mu {tuple(mu.shape)}, logvar {tuple(logvar.shape)}, eps {tuple(eps.shape)}")
    return mu + torch.exp(0.5 * logvar) * eps


def pixel_reconstruction(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Mean squared error over every element."""
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    return (x - x_hat).pow(2).mean()


def feature_reconstruction(x, x_hat, discriminator: Callable, tap: str) -> torch.Tensor:
    """Mean squared difference of discriminator tap features of ``x`` and ``x_hat``."""
    _, real_taps = discriminator(x)
    _, fake_taps = discriminator(x_hat)
    if tap not in real_taps:
        raise KeyError(f"discriminator has no tap {tap!r}")
    return pixel_reconstruction(real_taps[tap], fake_taps[tap])


# -- contrastive -----------------------------------------------------------------

def cosine_critic(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    na, nb = a.norm(dim=-1), b.norm(dim=-1)
    if bool((na == 0).any()) or bool((nb == 0).any()):
        raise ValueError("cosine similarity of a zero vector is undefined")
    return (a * b).sum(dim=-1) / (na * nb)


def info_nce(anchor: torch.Tensor, positive: torch.Tensor, negatives: torch.Tensor,
             temperature: float = 1.0) -> torch.Tensor:
    """-log softmax probability of the positive among {positive} + negatives.

    ``anchor`` is the reconstruction's embedding; ``positive`` and
    ``negatives`` (M, e) are real-image embeddings.
    """
    if negatives.ndim != 2 or negatives.shape[0] < 1:
        raise ValueError("info_nce needs at least one negative")
    pos = cosine_critic(positive, anchor)
    neg = cosine_critic(negatives, anchor.expand_as(negatives))
    logits = torch.cat([pos.reshape(1), neg]) / temperature
    return torch.logsumexp(logits, dim=0) - logits[0]


def info_nce_batch(anchors: torch.Tensor, positives: torch.Tensor, negatives: Optional[torch.Tensor] = None, *,
                   ids=None, negative_ids=None, temperature: float = 1.0) -> torch.Tensor:
    """Batched InfoNCE with in-batch and bank negatives (rows assumed unit-norm).

    Row i scores anchor i against every positive in the batch (its own is the
    target, the others are negatives) and against every bank entry. Bank
    entries whose instance id equals ``ids[i]`` are masked out so an image is
    never its own negative.
    """
    logits = anchors @ positives.t()
    if negatives is not None and len(negatives):
        bank = anchors @ negatives.t()
        if ids is not None and negative_ids is not None:
            ids_t = torch.as_tensor(ids, dtype=torch.long).reshape(-1, 1)
            same = ids_t == torch.as_tensor(negative_ids, dtype=torch.long).reshape(1, -1)
            bank = bank.masked_fill(same, float("-inf"))
        logits = torch.cat([logits, bank], dim=1)
    target = torch.arange(len(anchors))
    return F.cross_entropy(logits / temperature, target)


class NegativeQueue:
    """FIFO bank of detached unit-norm embeddings (plus their instance ids)."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("queue capacity must be positive")
        self.capacity = capacity
        self._emb: Optional[torch.Tensor] = None
        self._ids: Optional[torch.Tensor] = None
        self._ptr = 0
        self.fill = 0

    def __len__(self) -> int:
        return self.fill

    def push(self, embeddings: torch.Tensor, ids=None) -> None:
        emb = embeddings.detach().to(torch.float32).cpu()
        if emb.ndim != 2:
            raise ValueError("queue expects (N, e) embeddings")
        if (emb.norm(dim=1) - 1).abs().max() > 1e-4:
            raise ValueError("queue embeddings must be unit-norm")
        ids = torch.full((len(emb),), -1, dtype=torch.long) if ids is None else torch.as_tensor(ids, dtype=torch.long)
        if self._emb is None:
            self._emb = torch.zeros(self.capacity, emb.shape[1])
            self._ids = torch.full((self.capacity,), -1, dtype=torch.long)
        elif emb.shape[1] != self._emb.shape[1]:
            raise ValueError(f"embedding dim {emb.shape[1]} != queue dim {self._emb.shape[1]}")
        if len(emb) >= self.capacity:
            self._emb.copy_(emb[-self.capacity:])
            self._ids.copy_(ids[-self.capacity:])
            self._ptr, self.fill = 0, self.capacity
            return
        end = self._ptr + len(emb)
        if end <= self.capacity:
            self._emb[self._ptr:end] = emb
            self._ids[self._ptr:end] = ids
        else:
            split = self.capacity - self._ptr
            self._emb[self._ptr:] = emb[:split]
            self._ids[self._ptr:] = ids[:split]
            self._emb[:end - self.capacity] = emb[split:]
            self._ids[:end - self.capacity] = ids[split:]
        self._ptr = end % self.capacity
        self.fill = min(self.capacity, self.fill + len(emb))

    def snapshot(self) -> tuple[torch.Tensor, torch.Tensor]:
        """Contents oldest-first, as copies."""
        if self._emb is None:
            return torch.zeros(0, 0), torch.zeros(0, dtype=torch.long)
        if self.fill < self.capacity:
            return self._emb[:self.fill].clone(), self._ids[:self.fill].clone()
        order = torch.cat([torch.arange(self._ptr, self.capacity), torch.arange(0, self._ptr)])
        return self._emb[order].clone(), self._ids[order].clone()

    def state_dict(self) -> dict:
        return {"capacity": self.capacity, "emb": self._emb, "ids": self._ids, "ptr": self._ptr, "fill": self.fill}

    def load_state_dict(self, state: dict) -> None:
        if state["capacity"] != self.capacity:
            raise ValueError(f"queue capacity {state['capacity']} != {self.capacity}")
        self._emb = None if state["emb"] is None else state["emb"].clone()
        self._ids = None if state["ids"] is None else state["ids"].clone()
        self._ptr, self.fill = int(state["ptr"]), int(state["fill"])


def queue_push(queue: NegativeQueue, embeddings, ids=None) -> NegativeQueue:
    queue.push(embeddings, ids)
    return queue


def queue_snapshot(queue: NegativeQueue) -> torch.Tensor:
    return queue.snapshot()[0]


def patch_key(tap: str) -> str:
    return f"patch@{tap}"


@dataclass
class InstanceTerms:
    losses: dict[str, torch.Tensor] = field(default_factory=dict)
    warm: dict[str, bool] = field(default_factory=dict)
    positives: dict[str, torch.Tensor] = field(default_factory=dict)

    def total(self) -> torch.Tensor:
        vals = [v for k, v in self.losses.items() if self.warm[k]]
        return torch.stack(vals).sum() if vals else torch.zeros(())


def instance_terms(real_taps: Mapping[str, torch.Tensor], recon_taps: Mapping[str, torch.Tensor], project: Callable,
                   queues: Mapping[str, NegativeQueue], step: int, *, ids=None, taps=("tap_low", "tap_high"),
                   patch_tap: Optional[str] = None, patch_start: int = 0, patch_loc=None,
                   temperature: float = 1.0, min_fill: int = 1,
                   project_patch: Optional[Callable] = None) -> InstanceTerms:
    """Per-tap InfoNCE from precomputed discriminator taps.

    Deep-supervision taps go through their projection head; the patch term
    (from ``patch_start`` on) uses the unit-norm fiber at ``patch_loc``. A
    tap whose queue holds fewer than ``min_fill`` entries reports a zero loss
    with ``warm[tap] = False``. ``project_patch(features, loc)`` overrides
    the plain fiber normalization of the patch term.
    """
    out = InstanceTerms()
    project_patch = project_patch or patch_fibers
    pairs = [(tap, project(real_taps[tap], tap), project(recon_taps[tap], tap)) for tap in taps]
    if patch_tap is not None and step >= patch_start:
        if patch_loc is None:
            raise ValueError("patch term active but no patch location given")
        pairs.append((patch_key(patch_tap), project_patch(real_taps[patch_tap], patch_loc),
                      project_patch(recon_taps[patch_tap], patch_loc)))
    for key, pos, anc in pairs:
        out.positives[key] = pos
        queue = queues.get(key)
        if queue is None or queue.fill < min_fill:
            out.losses[key] = torch.zeros((), dtype=anc.dtype)
            out.warm[key] = False
            continue
        neg, neg_ids = queue.snapshot()
        out.losses[key] = info_nce_batch(anc, pos, neg.to(anc.dtype), ids=ids, negative_ids=neg_ids,
                                         temperature=temperature)
        out.warm[key] = True
    return out


def instance_loss_multiscale(x, x_hat, model, queues, step, **kwargs) -> InstanceTerms:
    """Run the discriminator on ``x`` and ``x_hat`` and compute :func:`instance_terms`."""
    _, real_taps = model.discriminate(x)
    _, recon_taps = model.discriminate(x_hat)
    kwargs.setdefault("project_patch", getattr(model, "project_patch", None))
    return instance_terms(real_taps, recon_taps, model.project, queues, step, **kwargs)


# -- adversarial -----------------------------------------------------------------

def _log_d(logits):
    return F.logsigmoid(logits).clamp_min(LOG_FLOOR)


def _log_one_minus_d(logits):
    return F.logsigmoid(-logits).clamp_min(LOG_FLOOR)


def gan_losses(d_logits_real: torch.Tensor, d_logits_fake_sample: Optional[torch.Tensor],
               d_logits_fake_recon: Optional[torch.Tensor]) -> tuple[torch.Tensor, torch.Tensor]:
    """Three-stream GAN objective.

    Returns ``(L_D, L_G)``: ``L_D = log D(x) + log(1 - D(G(z_p))) + log(1 - D(G(z_q)))``
    (batch means), which the discriminator maximizes; ``L_G`` is the
    non-saturating surrogate ``-log D(G(z_p)) - log D(G(z_q))`` minimized by
    encoder and decoder. Missing fake streams are skipped. Log arguments are
    floored at 1e-7.
    """
    l_d = _log_d(d_logits_real).mean()
    l_g = torch.zeros((), dtype=d_logits_real.dtype)
    for fake in (d_logits_fake_sample, d_logits_fake_recon):
        if fake is None:
            continue
        l_d = l_d + _log_one_minus_d(fake).mean()
        l_g = l_g - _log_d(fake).mean()
    return l_d, l_g


# -- combination -----------------------------------------------------------------

# loss term -> component name in the breakdown
TERM_COMPONENT = {"kl": "kl", "pixel": "pixel_recon", "feature": "feature_recon", "instance": "instance", "gan": "gan_g"}


def mode_objective(mode: str, components: Mapping[str, torch.Tensor], weights: Mapping[str, float]):
    """Weighted sums for the two players.

    The min player gets every term the mode allows (``MODE_TERMS``); the max
    player gets only the GAN term, ``w_gan * L_D``. ``components['instance']``
    may be a scalar or a per-tap mapping, which is summed.
    """
    if mode not in MODE_TERMS:
        raise ValueError(f"unknown mode {mode!r}")
    allowed = MODE_TERMS[mode]
    for term in LOSS_TERMS:
        if term not in allowed and float(weights.get(term, 0.0)) != 0.0:
            raise ValueError(f"weight for {term!r} must be 0 in {mode} mode")
    min_total = torch.zeros(())
    for term in sorted(allowed):
        name = TERM_COMPONENT[term]
        if name not in components:
            raise ValueError(f"{mode} objective needs component {name!r}")
        value = components[name]
        if isinstance(value, Mapping):
            value = torch.stack(list(value.values())).sum() if value else torch.zeros(())
        min_total = min_total + float(weights.get(term, 0.0)) * value
    max_total = torch.zeros(())
    if "gan" in allowed:
        if "gan_d" not in components:
            raise ValueError(f"{mode} objective needs component 'gan_d'")
        max_total = float(weights.get("gan", 0.0)) * components["gan_d"]
    return min_total, max_total


@dataclass
class LossBreakdown:
    kl: float = 0.0
    pixel_recon: float = 0.0
    feature_recon: float = 0.0
    instance: dict[str, float] = field(default_factory=dict)
    gan_d: float = 0.0
    gan_g: float = 0.0
    total_min_player: float = 0.0
    total_max_player: float = 0.0

    def as_record(self) -> dict:
        return {
            "kl": self.kl, "pixel_recon": self.pixel_recon, "feature_recon": self.feature_recon,
            "instance": dict(self.instance), "gan_d": self.gan_d, "gan_g": self.gan_g,
            "total_min_player": self.total_min_player, "total_max_player": self.total_max_player,
        }

    def values(self) -> dict[str, float]:
        flat = {k: v for k, v in self.as_record().items() if k != "instance"}
        flat.update({f"instance/{k}": v for k, v in self.instance.items()})
        return flat
