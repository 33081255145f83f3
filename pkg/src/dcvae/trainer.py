"""The alternating min-max training loop.

One iteration is a discriminator ("max player") step followed by an
encoder/decoder/heads ("min player") step, then a push of the real-image
embeddings into the negative queues.

Randomness per iteration comes from streams labelled ``step/{iteration}``
and batches from :func:`dcvae.data.batch_at`, so the trajectory depends only
on the config and the saved state. That is what makes resuming exact.
"""
from __future__ import annotations

import copy
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import torch

from .config import MODE_TERMS, ExperimentConfig, save_config
from .data import Dataset, batch_at, load_dataset, normalize, prepare, spaced_indices
from .embedders import load_embedder, reference_embedder
from .metrics import (EmbedderUnavailable, InsufficientSamples, MetricsReport, compute_fid, inception_score,
                      perceptual_distance, perceptual_path_length, pixel_distance)
from .images import save_grid
from .model import DCVAE, architecture_manifest, init_parameters
from .objectives import (LossBreakdown, NegativeQueue, gan_losses, instance_terms, kl_gaussian, mode_objective,
                         pixel_reconstruction, reparameterize)
from .rng import derive_rng
from .store import MetricsLog, RunManifest, load_checkpoint, save_checkpoint, write_json

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    """A step produced NaN/Inf; the state was rolled back. ``component`` names the culprit."""

    def __init__(self, component: str, iteration: int):
        self.component = component
        self.iteration = iteration
        super().__init__(f"non-finite {component} at iteration {iteration}; step rejected")


@dataclass
class TrainState:
    config: ExperimentConfig
    model: DCVAE
    opt_min: torch.optim.Adam
    opt_max: torch.optim.Adam
    queues: dict[str, NegativeQueue] = field(default_factory=dict)
    iteration: int = 0

    def queue(self, key: str) -> NegativeQueue:
        if key not in self.queues:
            self.queues[key] = NegativeQueue(self.config.queue_capacity)
        return self.queues[key]

    def state_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "model": self.model.state_dict(),
            "optim_min": self.opt_min.state_dict(),
            "optim_max": self.opt_max.state_dict(),
            "queues": {k: q.state_dict() for k, q in self.queues.items()},
            "rng": {"root_seed": self.config.seed, "torch": torch.get_rng_state()},
            "config": self.config.to_dict(),
        }

    def load_state_dict(self, state: dict) -> None:
        self.iteration = int(state["iteration"])
        self.model.load_state_dict(state["model"])
        self.opt_min.load_state_dict(state["optim_min"])
        self.opt_max.load_state_dict(state["optim_max"])
        self.queues = {}
        for key, qs in state["queues"].items():
            self.queue(key).load_state_dict(qs)
        if "torch" in state.get("rng", {}):
            torch.set_rng_state(state["rng"]["torch"])


def create_state(cfg: ExperimentConfig) -> TrainState:
    model = init_parameters(cfg)
    betas = (cfg.adam_beta1, cfg.adam_beta2)
    opt_min = torch.optim.Adam(model.min_player_parameters(), lr=cfg.learning_rate, betas=betas)
    opt_max = torch.optim.Adam(model.max_player_parameters(), lr=cfg.learning_rate, betas=betas)
    return TrainState(cfg, model, opt_min, opt_max)


@dataclass
class StepReport:
    iteration: int
    losses: LossBreakdown
    grad_norm: dict[str, float]
    queue_fill: dict[str, int]
    warm: dict[str, bool]
    patch_loc: Optional[tuple[int, int]]
    wall_time: float

    def record(self) -> dict:
        # wall time is left out so that twin runs write identical logs
        rec = {"iter": self.iteration, "losses": self.losses.as_record(), "grad_norm": dict(self.grad_norm),
               "queue_fill": dict(self.queue_fill), "warm": dict(self.warm)}
        if self.patch_loc is not None:
            rec["patch_loc"] = list(self.patch_loc)
        return rec


# -- one iteration ---------------------------------------------------------------

def _snapshot(state: TrainState) -> dict:
    return {
        "model": {k: v.clone() for k, v in state.model.state_dict().items()},
        "opt_min": copy.deepcopy(state.opt_min.state_dict()),
        "opt_max": copy.deepcopy(state.opt_max.state_dict()),
    }


def _restore(state: TrainState, snap: dict) -> None:
    state.model.load_state_dict(snap["model"])
    state.opt_min.load_state_dict(snap["opt_min"])
    state.opt_max.load_state_dict(snap["opt_max"])


def _grad_norm(params) -> float:
    sq = [p.grad.detach().pow(2).sum() for p in params if p.grad is not None]
    return math.sqrt(float(torch.stack(sq).sum())) if sq else 0.0


def _scalar(value) -> float:
    return float(value.detach()) if isinstance(value, torch.Tensor) else float(value)


def _split(tensor, sizes):
    return list(torch.split(tensor, sizes))


def _split_taps(taps: dict, sizes) -> list[dict]:
    parts = {k: _split(v, sizes) for k, v in taps.items()}
    return [{k: parts[k][i] for k in taps} for i in range(len(sizes))]


def train_step(state: TrainState, x: torch.Tensor, ids=None) -> StepReport:
    """One max-player step then one min-player step on batch ``x``.

    On a non-finite loss, gradient or parameter the state is restored to
    what it was before the call and :class:`NonFiniteLossError` is raised.
    """
    start = time.perf_counter()
    cfg, model, t = state.config, state.model, state.iteration
    weights = cfg.weights
    allowed = MODE_TERMS[cfg.mode]
    use_gan, use_inst, use_feat = "gan" in allowed, "instance" in allowed, "feature" in allowed
    use_disc = use_gan or use_inst or use_feat
    n = len(x)
    ids = torch.arange(n) if ids is None else torch.as_tensor(ids, dtype=torch.long)

    rng = derive_rng(cfg.seed, f"step/{t}")
    gen = rng.torch_generator()
    eps = torch.randn(n, cfg.latent_dim, generator=gen)
    z_prior = torch.randn(n, cfg.latent_dim, generator=gen) if use_gan else None
    patch_on = use_inst and cfg.patch_tap is not None and t >= cfg.patch_start
    patch_loc = None
    if patch_on:
        side = model.discriminator.size // 4  # spatial size of tap_low
        patch_loc = (int(rng.integers(0, side)), int(rng.integers(0, side)))
    inst_kw = dict(ids=ids, taps=cfg.contrast_taps, patch_tap=cfg.patch_tap if patch_on else None,
                   patch_start=cfg.patch_start, patch_loc=patch_loc, temperature=cfg.temperature,
                   min_fill=cfg.batch_size, project_patch=model.project_patch)

    snap = _snapshot(state)

    def fail(component: str):
        _restore(state, snap)
        model.discriminator.train()
        raise NonFiniteLossError(component, t)

    def check(component: str, value):
        if not bool(torch.isfinite(torch.as_tensor(value)).all()):
            fail(component)

    model.train()
    mu, logvar = model.encode(x)
    z = reparameterize(mu, logvar, eps)
    if use_gan:
        decoded = model.decode(torch.cat([z, z_prior]))
        x_rec, x_smp = decoded[:n], decoded[n:]
    else:
        x_rec, x_smp = model.decode(z), None

    # -- max player: D ascends L_GAN; the trunk also descends the instance loss
    gan_d = torch.zeros(())
    grad_max = 0.0
    if use_gan or use_inst:
        state.opt_max.zero_grad(set_to_none=True)
        streams = [x, x_rec.detach()] + ([x_smp.detach()] if use_gan else [])
        logits, taps = model.discriminate(torch.cat(streams))
        sizes = [n] * len(streams)
        logit_parts = _split(logits, sizes)
        tap_parts = _split_taps(taps, sizes)
        d_loss = torch.zeros(())
        if use_gan:
            gan_d, _ = gan_losses(logit_parts[0], logit_parts[2], logit_parts[1])
            check("gan_d", gan_d)
            d_loss = d_loss - weights["gan"] * gan_d
        if use_inst:
            inst_d = instance_terms(tap_parts[0], tap_parts[1], model.project, state.queues, t, **inst_kw)
            for key, value in inst_d.losses.items():
                check(f"instance/{key}", value)
            d_loss = d_loss + weights["instance"] * inst_d.total()
        if d_loss.requires_grad:
            d_loss.backward()
            grad_max = _grad_norm(model.max_player_parameters())
            check("grad/max_player", grad_max)
            state.opt_max.step()

    # -- min player: encoder, decoder and heads descend the mode objective
    state.opt_min.zero_grad(set_to_none=True)
    components: dict = {"kl": kl_gaussian(mu, logvar), "pixel_recon": pixel_reconstruction(x, x_rec)}
    inst = None
    if use_disc:
        model.discriminator.eval()  # no power-iteration update outside the max step
        streams = [x, x_rec] + ([x_smp] if use_gan else [])
        logits, taps = model.discriminate(torch.cat(streams))
        sizes = [n] * len(streams)
        logit_parts = _split(logits, sizes)
        tap_parts = _split_taps(taps, sizes)
        if use_gan:
            _, gan_g = gan_losses(logit_parts[0], logit_parts[2], logit_parts[1])
            components["gan_g"] = gan_g
            components["gan_d"] = gan_d.detach()
        if use_feat:
            components["feature_recon"] = pixel_reconstruction(tap_parts[0][cfg.feature_tap].detach(),
                                                               tap_parts[1][cfg.feature_tap])
        if use_inst:
            inst = instance_terms(tap_parts[0], tap_parts[1], model.project, state.queues, t, **inst_kw)
            components["instance"] = {k: v for k, v in inst.losses.items() if inst.warm[k]}
    for name, value in components.items():
        if isinstance(value, dict):
            for key, v in value.items():
                check(f"{name}/{key}", v)
        else:
            check(name, value)
    min_total, max_total = mode_objective(cfg.mode, components, weights)
    check("total_min_player", min_total)
    min_total.backward()
    grad_min = _grad_norm(model.min_player_parameters())
    check("grad/min_player", grad_min)
    state.opt_min.step()
    model.discriminator.train()

    for p in model.parameters():
        if not bool(torch.isfinite(p).all()):
            fail("parameters")

    if inst is not None and weights["instance"] > 0:
        for key, emb in inst.positives.items():
            state.queue(key).push(emb.detach(), ids)

    losses = LossBreakdown(
        kl=_scalar(components["kl"]), pixel_recon=_scalar(components["pixel_recon"]),
        feature_recon=_scalar(components.get("feature_recon", 0.0)),
        instance={k: _scalar(v) for k, v in inst.losses.items()} if inst is not None else {},
        gan_d=_scalar(gan_d), gan_g=_scalar(components.get("gan_g", 0.0)),
        total_min_player=_scalar(min_total), total_max_player=_scalar(max_total),
    )
    state.iteration += 1
    return StepReport(t, losses, {"min": grad_min, "max": grad_max},
                      {k: q.fill for k, q in state.queues.items()},
                      dict(inst.warm) if inst is not None else {}, patch_loc, time.perf_counter() - start)


# -- evaluation ------------------------------------------------------------------

def _chunked(fn, x: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    return torch.cat([fn(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])


def reconstruct(model: DCVAE, x: torch.Tensor) -> torch.Tensor:
    """Decode the posterior mean."""
    return model.decode(model.encode(x)[0])


def sample(model: DCVAE, n: int, seed: int, label: str = "eval/prior") -> torch.Tensor:
    z = torch.randn(n, model.latent_dim, generator=derive_rng(seed, label).torch_generator())
    return model.decode(z)


def evaluate_model(model: DCVAE, cfg: ExperimentConfig, test: Dataset, embedder=None,
                   with_ppl: bool = False) -> MetricsReport:
    """Table-1 style metrics on the held-out split.

    Reconstructions decode the posterior mean; samples decode prior draws
    from a fixed eval stream. The live training mode is restored afterwards.
    """
    ev = cfg.eval
    count = min(len(test), ev.fid_sample_count)
    report = MetricsReport(embedder_id=getattr(embedder, "id", None))
    report.sample_counts = {"real": count, "reconstruction": count, "sampling": count}
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            real = normalize(test.images[spaced_indices(len(test), count)])
            recon = _chunked(lambda b: reconstruct(model, b), real)
            fake = sample(model, count, ev.seed)
        report.pixel_distance = pixel_distance(real, recon)
        if embedder is None:
            for name in ("fid_sampling", "fid_reconstruction", "is_sampling", "is_reconstruction",
                         "perceptual_distance", "ppl"):
                report.absent[name] = "no embedder"
            return report
        for name, imgs in (("sampling", fake), ("reconstruction", recon)):
            try:
                setattr(report, f"fid_{name}",
                        compute_fid(real, imgs, embedder, ev.fid_sample_count, allow_small=ev.allow_small))
            except InsufficientSamples as exc:
                report.absent[f"fid_{name}"] = str(exc)
            try:
                with torch.no_grad():
                    probs = _chunked(embedder.probs, imgs)
                setattr(report, f"is_{name}", inception_score(probs.double().numpy()))
            except EmbedderUnavailable as exc:
                report.absent[f"is_{name}"] = str(exc)
        report.perceptual_distance = perceptual_distance(real, recon, embedder)
        if with_ppl:
            report.ppl = perceptual_path_length(model.decoder, embedder, ev.ppl_sample_count, ev.ppl_epsilon,
                                                derive_rng(ev.seed, "eval/ppl"), ev.ppl_interp)
        return report
    finally:
        model.train(was_training)


def evaluate_during_training(state: TrainState, test: Dataset, embedder=None) -> MetricsReport:
    return evaluate_model(state.model, state.config, test, embedder)


def write_grids(model: DCVAE, cfg: ExperimentConfig, test: Dataset, directory, iteration: int) -> None:
    """Fixed-seed sample grid and an input/reconstruction grid, step-stamped."""
    k = cfg.eval.grid_size
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            samples = sample(model, k, cfg.eval.seed, "eval/grid")
            # evenly spaced so class-sorted splits still show variety
            inputs = normalize(test.images[spaced_indices(len(test), k // 2)])
            recon = reconstruct(model, inputs)
    finally:
        model.train(was_training)
    nrow = max(1, min(8, len(inputs)))
    save_grid(samples, Path(directory) / f"samples_{iteration:07d}.png", nrow=8)
    # input rows interleaved with their reconstruction rows
    rows = [torch.cat([inputs[i:i + nrow], recon[i:i + nrow]]) for i in range(0, len(inputs), nrow)]
    save_grid(torch.cat(rows), Path(directory) / f"recon_{iteration:07d}.png", nrow=nrow)


# -- full run ------------------------------------------------------------------

def default_cache_dir() -> Path:
    return Path(os.environ.get("DCVAE_CACHE_DIR", Path.home() / ".cache" / "dcvae"))


def resolve_embedder(cfg: ExperimentConfig, train_set: Dataset, cache_dir: Optional[Path] = None):
    """The configured embedder, or None (with a warning) if it cannot be had."""
    choice = cfg.eval.embedder
    if choice == "none":
        return None
    try:
        if choice == "reference":
            return reference_embedder(train_set, cfg.eval.seed, cfg.eval.embedder_epochs,
                                      cache_dir or default_cache_dir() / "embedders")
        return load_embedder(choice)
    except (OSError, ValueError, RuntimeError) as exc:
        log.warning("embedder %r unavailable (%s); embedder metrics will be absent", choice, exc)
        return None


def load_splits(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    size = cfg.dataset.image_size
    train_set = prepare(load_dataset(cfg.dataset, "train", cfg.dataset.seed), size)
    test_set = prepare(load_dataset(cfg.dataset, "test", cfg.dataset.seed), size)
    return train_set, test_set


def latest_checkpoint(run_dir) -> Optional[Path]:
    ckpts = sorted((Path(run_dir) / "checkpoints").glob("ckpt_*.pt"))
    return ckpts[-1] if ckpts else None


@dataclass
class TrainResult:
    run_dir: Path
    state: TrainState
    report: Optional[MetricsReport]
    checkpoint: Path
    reports: list[StepReport] = field(default_factory=list)


def train(cfg: ExperimentConfig, run_dir, *, resume: bool = False, embedder="auto",
          splits: Optional[tuple[Dataset, Dataset]] = None, final_eval: bool = True,
          with_ppl: bool = False) -> TrainResult:
    """Run ``cfg.total_iters`` iterations, writing everything under ``run_dir``.

    Layout: ``manifest.json``, ``config.yaml``, ``metrics.jsonl``,
    ``checkpoints/ckpt_{iter}.pt``, ``grids/`` and ``final_metrics.json``.
    With ``resume`` the latest checkpoint is loaded and log records past it
    are dropped before continuing.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    train_set, test_set = splits if splits is not None else load_splits(cfg)
    if embedder == "auto":
        embedder = resolve_embedder(cfg, train_set)

    state = create_state(cfg)
    expected = {k: list(v.shape) for k, v in state.model.state_dict().items()}
    metrics_log = MetricsLog(run_dir / "metrics.jsonl")
    ckpt = latest_checkpoint(run_dir) if resume else None
    if ckpt is not None:
        state.load_state_dict(load_checkpoint(ckpt, expected))
        metrics_log.truncate_after(state.iteration)
        log.info("resumed from %s at iteration %d", ckpt, state.iteration)
    else:
        if (run_dir / "manifest.json").exists() and not resume:
            raise FileExistsError(f"{run_dir} already holds a run; pass resume=True to continue it")
        RunManifest.create(cfg.to_dict(), train_set.fingerprint, cfg.seed).write(run_dir / "manifest.json")
        save_config(cfg, run_dir / "config.yaml")
        write_json(run_dir / "architecture.json", architecture_manifest(state.model))
        if metrics_log.path.exists():
            metrics_log.path.unlink()

    def checkpoint() -> Path:
        path = run_dir / "checkpoints" / f"ckpt_{state.iteration:07d}.pt"
        save_checkpoint(state.state_dict(), path)
        return path

    result = TrainResult(run_dir, state, None, run_dir / "checkpoints")
    while state.iteration < cfg.total_iters:
        t = state.iteration
        x, idx = batch_at(train_set, cfg.batch_size, cfg.seed, t, augment=cfg.augment)
        report = train_step(state, x, idx)
        if t % cfg.log_every == 0:
            record = report.record()
            if cfg.eval_every and t > 0 and t % cfg.eval_every == 0:
                record["metrics"] = evaluate_during_training(state, test_set, embedder).as_record()
                write_grids(state.model, cfg, test_set, run_dir / "grids", t)
            metrics_log.append(record)
            log.info("iter %d  min %.4f  max %.4f", t, report.losses.total_min_player,
                     report.losses.total_max_player)
        if cfg.checkpoint_every and state.iteration % cfg.checkpoint_every == 0 \
                and state.iteration < cfg.total_iters:
            checkpoint()
    result.checkpoint = checkpoint()
    if final_eval:
        result.report = evaluate_model(state.model, cfg, test_set, embedder, with_ppl=with_ppl)
        write_json(run_dir / "final_metrics.json", result.report.as_record())
        write_grids(state.model, cfg, test_set, run_dir / "grids", state.iteration)
    return result
