"""Acceptance criteria 1-9, one test each.

Each test records a one-line verdict that ``conftest.py`` prints in the
terminal summary. Criteria 6-8 train desk-scale MNIST models through the CLI;
runs are cached under ``DCVAE_ACCEPT_DIR`` (default ``~/.cache/dcvae/acceptance``)
by config digest, so only the first invocation pays the training cost.
"""
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from dcvae.cli import _load_run, main, mode_variant, run_name
from dcvae.config import load_config
from dcvae.data import make_toy_dataset, normalize
from dcvae.latent import linear_probe
from dcvae.metrics import (GaussianStats, IdentityEmbedder, frechet_distance, inception_score,
                           perceptual_path_length, sqrtm_psd)
from dcvae.model import spectral_normalize
from dcvae.objectives import gan_losses, info_nce, kl_gaussian, pixel_reconstruction
from dcvae.rng import derive_rng
from dcvae.trainer import create_state, load_splits, train, train_step

from conftest import record_verdict, tiny_config

D = torch.float64
ROOT = Path(__file__).resolve().parents[1]
DESK = str(ROOT / "configs" / "mnist_desk.yaml")
SEEDS = "0,1,2"
MODES = ("vae", "vae_gan", "vae_contrastive", "dc_vae")


def accept_dir() -> Path:
    return Path(os.environ.get("DCVAE_ACCEPT_DIR", Path.home() / ".cache" / "dcvae" / "acceptance"))


def verdict(n: int, ok: bool, detail: str):
    record_verdict(n, ok, detail)
    assert ok, f"criterion {n}: {detail}"


# -- 1. loss oracles -----------------------------------------------------------------

def test_criterion_1_loss_oracles():
    t0 = time.time()
    errs = []
    t = lambda v: torch.tensor(v, dtype=D)  # noqa: E731
    errs.append(abs(kl_gaussian(t([[0.0]]), t([[0.0]])).item()))
    errs.append(abs(kl_gaussian(t([[1.0]]), t([[0.0]])).item() - 0.5))
    closed = 0.5 * (4 - 1 - math.log(4))
    errs.append(abs(kl_gaussian(t([[0.0]]), t([[math.log(4)]])).item() - closed))
    # Monte-Carlo KL: E_q[log q(z) - log p(z)] with q = N(0, 4)
    z = 2.0 * torch.randn(1_000_000, generator=torch.Generator().manual_seed(0), dtype=D)
    mc = (-0.5 * z**2 / 4 - 0.5 * math.log(4) + 0.5 * z**2).mean().item()
    mc_err = abs(mc - kl_gaussian(t([[0.0]]), t([[math.log(4)]])).item())

    a = t([1.0, 0.0, 0.0])
    errs.append(abs(info_nce(a, a, a.expand(7, 3)).item() - math.log(8)))
    b = t([0.6, 0.8, 0.0])
    errs.append(abs(info_nce(a, b, b.expand(7, 3)).item() - math.log(8)))
    errs.append(abs(info_nce(a, a, -a.expand(2, 3)).item() - math.log(1 + 2 * math.exp(-2))))
    l_d, l_g = gan_losses(t([0.0] * 4), t([0.0] * 4), t([0.0] * 4))
    errs.append(abs(l_d.item() - 3 * math.log(0.5)))
    errs.append(abs(l_g.item() - 2 * math.log(2)))
    ok = max(errs) < 1e-9 and mc_err < 1e-2 and time.time() - t0 < 60
    verdict(1, ok, f"max closed-form error {max(errs):.1e}, Monte-Carlo KL error {mc_err:.1e}, "
                   f"{time.time() - t0:.1f}s")


# -- 2. gradient checks --------------------------------------------------------------

def central_difference(fn, inputs, h=1e-5):
    grads = []
    for i, x in enumerate(inputs):
        g = torch.zeros_like(x)
        flat, gflat = x.view(-1), g.view(-1)
        for j in range(flat.numel()):
            orig = flat[j].item()
            flat[j] = orig + h
            up = fn(*inputs).item()
            flat[j] = orig - h
            down = fn(*inputs).item()
            flat[j] = orig
            gflat[j] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def relative_error(analytic, numeric):
    a = torch.cat([g.flatten() for g in analytic])
    n = torch.cat([g.flatten() for g in numeric])
    return ((a - n).norm() / max(a.norm().item(), n.norm().item(), 1e-12)).item()



def gradient_cases(gen):
    n, d = 3, 4
    yield "kl_gaussian", kl_gaussian, [torch.randn(n, d, generator=gen, dtype=D),
                                       torch.randn(n, d, generator=gen, dtype=D)]
    yield "pixel_reconstruction", pixel_reconstruction, [torch.randn(2, 1, 3, 3, generator=gen, dtype=D),
                                                         torch.randn(2, 1, 3, 3, generator=gen, dtype=D)]
    # InfoNCE through the normalization, as it is used on projection-head outputs
    norm = torch.nn.functional.normalize
    yield "info_nce", (lambda a, p, q: info_nce(norm(a, dim=0), norm(p, dim=0), norm(q, dim=1))), \
        [torch.randn(5, generator=gen, dtype=D), torch.randn(5, generator=gen, dtype=D),
         torch.randn(6, 5, generator=gen, dtype=D)]
    yield "gan_d", (lambda r, s, q: gan_losses(r, s, q)[0]), [torch.randn(4, generator=gen, dtype=D) for _ in range(3)]
    # the generator term only sees the two fake streams
    real = torch.randn(4, generator=gen, dtype=D)
    yield "gan_g", (lambda s, q: gan_losses(real, s, q)[1]), [torch.randn(4, generator=gen, dtype=D) for _ in range(2)]


def test_criterion_2_gradient_checks():
    t0 = time.time()
    worst = {}
    gen = torch.Generator().manual_seed(2)
    for _ in range(20):
        for name, fn, inputs in gradient_cases(gen):
            leaves = [x.clone().requires_grad_(True) for x in inputs]
            analytic = torch.autograd.grad(fn(*leaves), leaves)
            numeric = central_difference(fn, [x.clone() for x in inputs])
            worst[name] = max(worst.get(name, 0.0), relative_error(analytic, numeric))
    ok = max(worst.values()) < 1e-4 and time.time() - t0 < 300
    verdict(2, ok, "worst relative error over 20 instances: "
            + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))


# -- 3. metric oracles ---------------------------------------------------------------

def test_criterion_3_metric_oracles():
    t0 = time.time()
    rng = np.random.default_rng(3)
    a = rng.standard_normal((6, 6))
    c = a @ a.T
    fid_errs = [
        abs(frechet_distance(GaussianStats(np.ones(6), c), GaussianStats(np.ones(6), c))),
        abs(frechet_distance(GaussianStats(np.zeros(3), np.eye(3)), GaussianStats(np.array([1.0, 2, -2]), np.eye(3)))
            - 9.0),
        abs(frechet_distance(GaussianStats(np.zeros(2), np.eye(2)), GaussianStats(np.zeros(2), 4 * np.eye(2))) - 2.0),
    ]
    m = rng.standard_normal((256, 256))
    m = m @ m.T
    s = sqrtm_psd(m)
    sqrt_err = np.linalg.norm(s @ s - m) / np.linalg.norm(m)

    p = rng.dirichlet(np.full(7, 0.4), size=30)
    marg = p.mean(0)
    naive = math.exp(np.mean([sum(p[i, j] * math.log(p[i, j] / marg[j]) for j in range(7)) for i in range(30)]))
    is_errs = [abs(inception_score(np.full((5, 4), 0.25)) - 1), abs(inception_score(np.eye(5)) - 5),
               abs(inception_score(p) - naive)]

    w = torch.randn(6, 4, generator=torch.Generator().manual_seed(0), dtype=D)
    dec = lambda z: z @ w.T  # noqa: E731
    gen = derive_rng(7, "ppl").torch_generator()
    z1, z2 = torch.randn(40, 4, generator=gen, dtype=D), torch.randn(40, 4, generator=gen, dtype=D)
    oracle = ((z2 - z1) @ w.T).pow(2).sum(1).mean().item()
    ppl = perceptual_path_length(dec, IdentityEmbedder(), 40, 1e-4, derive_rng(7, "ppl"), "lerp", latent_dim=4)
    ppl_err = abs(ppl - oracle) / oracle

    from dcvae.model import init_parameters
    model = init_parameters(tiny_config(latent_dim=8)).eval()
    vals = [perceptual_path_length(model.decoder, IdentityEmbedder(), 64, eps, derive_rng(0, "p"))
            for eps in (1e-4, 5e-5)]
    eps_drift = abs(vals[0] - vals[1]) / vals[0]

    ok = (max(fid_errs) < 1e-6 and sqrt_err < 1e-6 and is_errs[0] == 0 and is_errs[1] < 1e-12
          and is_errs[2] < 1e-8 and ppl_err < 1e-4 and eps_drift < 0.05 and time.time() - t0 < 300)
    verdict(3, ok, f"FID exact {max(fid_errs):.1e}, sqrtm {sqrt_err:.1e}, IS {max(is_errs):.1e}, "
                   f"PPL linear {ppl_err:.1e}, PPL eps drift {eps_drift:.2%}")


# -- 4. spectral normalization -------------------------------------------------------

def test_criterion_4_spectral_norm():
    worst = 0.0
    gen = torch.Generator().manual_seed(4)
    for rows, cols in ((256, 128), (128, 256), (64, 64), (10, 200), (200, 3)):
        w = torch.randn(rows, cols, generator=gen, dtype=D)
        u = torch.nn.functional.normalize(torch.randn(rows, generator=gen, dtype=D), dim=0)
        out, _, _ = spectral_normalize(w, u, 100)
        worst = max(worst, abs(torch.linalg.matrix_norm(out, ord=2).item() - 1.0))
    verdict(4, worst < 1e-3, f"max |sigma_max - 1| after 100 iterations: {worst:.1e}")


# -- 5. single-batch overfit ---------------------------------------------------------

def test_criterion_5_single_batch_overfit():
    t0 = time.time()
    cfg = tiny_config("vae", batch_size=8, queue_capacity=8, latent_dim=16, loss_weights={"kl": 1e-3},
                      model={"enc_width": 32, "dec_width": 32, "disc_width": 8, "head_channels": 4})
    state = create_state(cfg)
    x = normalize(make_toy_dataset(8, 0).images)
    ids = torch.arange(8)
    mse, steps = float("inf"), 0
    while steps < 2000 and mse >= 0.01:
        mse = train_step(state, x, ids).losses.pixel_recon
        steps += 1
    elapsed = time.time() - t0
    verdict(5, mse < 0.01 and elapsed < 600, f"pixel MSE {mse:.4f} after {steps} steps ({elapsed:.0f}s)")


# -- 6-8. desk-scale MNIST experiments ----------------------------------------------

def read_tsv(path: Path):
    lines = path.read_text().splitlines()
    header = lines[0].split("\t")
    return [dict(zip(header, line.split("\t"))) for line in lines[1:]]


def as_float(text):
    return float(text) if text not in ("", "None", "nan") else float("nan")


@pytest.fixture(scope="module")
def ablation():
    out = accept_dir()
    code = main(["ablation", "--config", DESK, "--seeds", SEEDS, "--out", str(out)])
    assert code == 0, "ablation runs failed; see ablation_failures.json"
    return {row["mode"]: row for row in read_tsv(out / "ablation.tsv")}, out


@pytest.mark.slow
def test_criterion_6_ablation_trend(ablation):
    table, _ = ablation
    fid = {m: as_float(table[m]["fid_sampling"]) for m in MODES}
    pix = {m: as_float(table[m]["pixel_distance"]) for m in MODES}
    dc_beats_vae = fid["dc_vae"] < fid["vae"]
    contrastive_worst = all(fid["vae_contrastive"] > fid[m] for m in MODES if m != "vae_contrastive")
    vae_lowest_pixel = all(pix["vae"] < pix[m] for m in MODES if m != "vae")
    ok = dc_beats_vae and contrastive_worst and vae_lowest_pixel
    verdict(6, ok, "median sampling FID " + ", ".join(f"{m} {fid[m]:.1f}" for m in MODES)
            + "; pixel distance " + ", ".join(f"{m} {pix[m]:.2f}" for m in MODES)
            + f" [dc<vae {dc_beats_vae}, contrastive worst {contrastive_worst}, vae lowest pixel {vae_lowest_pixel}]")


@pytest.mark.slow
def test_criterion_7_linear_probe(ablation):
    _, out = ablation
    base = load_config(DESK)
    errors = {}
    for mode in ("dc_vae", "vae"):
        cfg = mode_variant(base, mode)
        cfg.seed = 0
        _, model, _ = _load_run(str(out / "runs" / run_name(cfg)))
        train_set, test_set = load_splits(cfg)
        res = linear_probe(model.encoder, train_set, test_set, trials=5, seed=0)
        errors[mode] = res
    dc, vae = errors["dc_vae"], errors["vae"]
    ok = dc.error_rate <= 0.05 and dc.error_rate <= vae.error_rate + 0.01
    verdict(7, ok, f"probe error dc_vae {dc.error_rate:.2%} +/- {dc.half_width:.2%}, "
                   f"vae {vae.error_rate:.2%} +/- {vae.half_width:.2%} (5 trials, d_z={base.latent_dim})")


@pytest.mark.slow
def test_criterion_8_negative_sweep():
    out = accept_dir()  # K=512 runs are shared with the ablation
    code = main(["sweep-negatives", "--config", DESK, "--k", "64,512,4096", "--seeds", SEEDS, "--out", str(out)])
    assert code == 0
    entries = json.loads((out / "sweep_negatives.json").read_text())["entries"]
    ok = True
    for lo, hi in zip(entries, entries[1:]):
        pooled = math.sqrt((lo["std"] ** 2 + hi["std"] ** 2) / 2)
        ok &= hi["mean"] <= lo["mean"] + pooled
    verdict(8, ok, "test pixel MSE by K: " + ", ".join(f"K={e['K']} {e['mean']:.4f}+/-{e['std']:.4f}"
                                                       for e in entries))


# -- 9. reproducibility --------------------------------------------------------------

def test_criterion_9_reproducibility(tmp_path):
    def cfg():
        return tiny_config("dc_vae", total_iters=10, log_every=1, eval_every=5, checkpoint_every=5,
                           queue_capacity=32)

    train(cfg(), tmp_path / "a", embedder=IdentityEmbedder())
    train(cfg(), tmp_path / "b", embedder=IdentityEmbedder())
    log_a = (tmp_path / "a" / "metrics.jsonl").read_text()
    twins = log_a == (tmp_path / "b" / "metrics.jsonl").read_text()

    train(cfg(), tmp_path / "c", embedder=IdentityEmbedder())
    for p in (tmp_path / "c" / "checkpoints").iterdir():
        if p.name != "ckpt_0000005.pt":
            p.unlink()
    train(cfg(), tmp_path / "c", resume=True, embedder=IdentityEmbedder())
    resumed = (tmp_path / "c" / "metrics.jsonl").read_text() == log_a
    a = torch.load(tmp_path / "a" / "checkpoints" / "ckpt_0000010.pt", weights_only=False)
    c = torch.load(tmp_path / "c" / "checkpoints" / "ckpt_0000010.pt", weights_only=False)
    same_params = all(torch.equal(a["model"][k], c["model"][k]) for k in a["model"])
    ok = twins and resumed and same_params
    verdict(9, ok, f"twin logs identical {twins}, resumed log identical {resumed}, "
                   f"resumed parameters identical {same_params}")
