"""Command-line entry point: ``dcvae <command> ...``.

Exit codes: 0 success, 1 invalid config or arguments, 2 runtime failure
(including non-finite losses), 3 file or checkpoint problems.
"""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from multiprocessing import get_context
from pathlib import Path

import numpy as np
import torch

from .config import LOSS_TERMS, MODE_TERMS, MODES, ConfigError, ExperimentConfig, from_dict, load_config
from .data import DatasetError, normalize, spaced_indices
from .embedders import load_embedder
from .images import load_image_dir, save_grid
from .latent import AttributeDirection, attribute_direction, edit, encode_means, lerp, linear_probe, slerp
from .metrics import TABLE_COLUMNS, IdentityEmbedder, compute_fid, perceptual_distance, pixel_distance
from .model import init_parameters
from .objectives import pixel_reconstruction
from .store import CheckpointError, check_architecture, load_checkpoint, write_json, write_table
from .trainer import NonFiniteLossError, evaluate_model, load_splits, reconstruct, resolve_embedder, sample, train

log = logging.getLogger("dcvae")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_IO = 0, 1, 2, 3


# -- helpers -----------------------------------------------------------------

def _csv(kind):
    def parse(text: str):
        try:
            return [kind(v) for v in text.split(",") if v.strip()]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from exc
    return parse


def run_name(cfg: ExperimentConfig) -> str:
    return f"{cfg.mode}-{cfg.digest()}-s{cfg.seed}"


def mode_variant(cfg: ExperimentConfig, mode: str) -> ExperimentConfig:
    """``cfg`` switched to ``mode``: weights the mode forbids become 0, the rest are kept."""
    raw = cfg.to_dict()
    raw["mode"] = mode
    for term in LOSS_TERMS:
        if term not in MODE_TERMS[mode]:
            raw["loss_weights"][term] = 0.0
        elif term not in MODE_TERMS[cfg.mode]:
            raw["loss_weights"][term] = None  # unset: the mode default applies
    return from_dict(raw)


def _train_or_reuse(cfg: ExperimentConfig, out_root: Path, splits, embedder):
    """Train into ``out_root/run_name``; a finished run with the same config is reused."""
    run_dir = out_root / run_name(cfg)
    final = run_dir / "final_metrics.json"
    if final.exists():
        log.info("reusing finished run %s", run_dir)
        return run_dir, json.loads(final.read_text())
    if run_dir.exists():
        shutil.rmtree(run_dir)  # an unfinished run of this exact config
    result = train(cfg, run_dir, splits=splits, embedder=embedder)
    return run_dir, json.loads(final.read_text()) if result.report else {}


def _reuse_worker(cfg_dict: dict, out_root: str, with_embedder: bool):
    cfg = from_dict(cfg_dict)
    splits = load_splits(cfg)
    embedder = resolve_embedder(cfg, splits[0]) if with_embedder else None
    run_dir, metrics = _train_or_reuse(cfg, Path(out_root), splits, embedder)
    return str(run_dir), metrics


def _run_all(configs, out_root: Path, jobs: int, splits, embedder):
    """Train every config (sequentially, or in ``jobs`` worker processes).

    Returns one ``(run_dir, metrics)`` pair or exception per config, in order.
    """
    results = []
    if jobs <= 1:
        for cfg in configs:
            try:
                results.append(_train_or_reuse(cfg, out_root, splits, embedder))
            except (NonFiniteLossError, RuntimeError, ValueError) as exc:
                results.append(exc)
        return results
    # workers rebuild the (cached) embedder themselves; fork is unsafe with torch threads
    with ProcessPoolExecutor(jobs, mp_context=get_context("spawn")) as pool:
        futures = [pool.submit(_reuse_worker, cfg.to_dict(), str(out_root), embedder is not None)
                   for cfg in configs]
        for fut in futures:
            try:
                run_dir, metrics = fut.result()
                results.append((Path(run_dir), metrics))
            except (NonFiniteLossError, RuntimeError, ValueError) as exc:
                results.append(exc)
    return results


def _load_run(checkpoint: str):
    """Config and eval-mode model from a checkpoint file (or a run directory)."""
    path = Path(checkpoint)
    if path.is_dir():
        ckpts = sorted((path / "checkpoints").glob("ckpt_*.pt"))
        if not ckpts:
            raise CheckpointError(f"no checkpoints under {path}")
        path = ckpts[-1]
    state = load_checkpoint(path)
    cfg = from_dict(state["config"])
    model = init_parameters(cfg)
    expected = {k: list(v.shape) for k, v in model.state_dict().items()}
    check_architecture(state["architecture"], expected)
    model.load_state_dict(state["model"])
    return cfg, model.eval(), path


def _out_dir(args, ckpt_path: Path, command: str) -> Path:
    out = Path(args.out) if args.out else ckpt_path.parent.parent / command
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- commands ----------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_config(args.config, args.override)
    run_dir = Path(args.out) / run_name(cfg)
    if run_dir.exists() and not (args.resume or args.force):
        log.error("%s exists; use --resume to continue or --force to start over", run_dir)
        return EXIT_IO
    if args.force and run_dir.exists():
        shutil.rmtree(run_dir)
    result = train(cfg, run_dir, resume=args.resume)
    print(run_dir)
    if result.report is not None:
        print(json.dumps({c: getattr(result.report, c) for c in TABLE_COLUMNS}))
    return EXIT_OK


def _median(values):
    vals = [v for v in values if v is not None]
    return statistics.median(vals) if vals else None


def cmd_ablation(args) -> int:
    base = load_config(args.config, args.override)
    modes = args.modes or list(MODES)
    bad = [m for m in modes if m not in MODES]
    if bad:
        raise ConfigError("modes", f"unknown modes {bad}")
    seeds = args.seeds or [base.seed]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    splits = load_splits(base)
    embedder = resolve_embedder(base, splits[0])
    configs = []
    for mode in modes:
        for seed in seeds:
            cfg = mode_variant(base, mode)
            cfg.seed = seed
            configs.append(cfg)
    results = iter(_run_all(configs, out / "runs", args.jobs, splits, embedder))
    rows, runs, failures = [], [], {}
    for mode in modes:
        per_seed = []
        for seed in seeds:
            res = next(results)
            if isinstance(res, Exception):
                failures[f"{mode}/s{seed}"] = str(res)
                log.error("%s seed %d failed: %s", mode, seed, res)
                continue
            run_dir, metrics = res
            per_seed.append(metrics)
            runs.append([mode, seed, *[metrics.get(c) for c in TABLE_COLUMNS], run_dir.name])
            if seed == seeds[0]:
                for kind in ("samples", "recon"):
                    grids = sorted((run_dir / "grids").glob(f"{kind}_*.png"))
                    if grids:
                        (out / "grids").mkdir(exist_ok=True)
                        shutil.copyfile(grids[-1], out / "grids" / f"{mode}_{kind}.png")
        rows.append([mode, *[_median(m.get(c) for m in per_seed) for c in TABLE_COLUMNS]])
    write_table(out / "ablation.tsv", ["mode", *TABLE_COLUMNS], rows)
    write_table(out / "ablation_runs.tsv", ["mode", "seed", *TABLE_COLUMNS, "run"], runs)
    write_json(out / "ablation_failures.json", failures)
    print((out / "ablation.tsv").read_text(), end="")
    return EXIT_RUNTIME if failures else EXIT_OK


def held_out_pixel_error(run_dir: Path, test) -> float:
    """Pixel MSE of posterior-mean reconstructions on the test split."""
    cfg, model, _ = _load_run(str(run_dir))
    with torch.no_grad():
        x = normalize(test.images)
        recon = torch.cat([reconstruct(model, x[i:i + 256]) for i in range(0, len(x), 256)])
    return float(pixel_reconstruction(x, recon))


def cmd_sweep_negatives(args) -> int:
    base = mode_variant(load_config(args.config, args.override), "dc_vae")
    seeds = args.seeds or [base.seed]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    small = [k for k in args.k if k < base.batch_size]
    if small:
        raise ConfigError("k", f"queue sizes {small} are below batch_size {base.batch_size}")
    splits = load_splits(base)
    configs = []
    for k in args.k:
        for seed in seeds:
            raw = base.to_dict()
            raw["queue_capacity"], raw["seed"] = k, seed
            configs.append(from_dict(raw))
    # same run layout as ablation, so matching configs are trained once
    embedder = resolve_embedder(base, splits[0])
    results = iter(_run_all(configs, out / "runs", args.jobs, splits, embedder))
    entries = []
    for k in args.k:
        errors = []
        for seed in seeds:
            res = next(results)
            if isinstance(res, Exception):
                raise res
            errors.append(held_out_pixel_error(res[0], splits[1]))
        entries.append({"K": k, "seeds": seeds, "errors": errors, "mean": float(np.mean(errors)),
                        "std": float(np.std(errors, ddof=1)) if len(errors) > 1 else 0.0})
    write_json(out / "sweep_negatives.json", {"metric": "test pixel MSE", "entries": entries})
    write_table(out / "sweep_negatives.tsv", ["K", "mean", "std", "n"],
                [[e["K"], e["mean"], e["std"], len(e["errors"])] for e in entries])
    print((out / "sweep_negatives.tsv").read_text(), end="")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg, model, path = _load_run(args.checkpoint)
    train_set, test_set = load_splits(cfg)
    embedder = resolve_embedder(cfg, train_set)
    report = evaluate_model(model, cfg, test_set, embedder, with_ppl=args.ppl)
    out = _out_dir(args, path, "eval")
    write_json(out / "metrics.json", report.as_record())
    print(json.dumps({c: getattr(report, c) for c in (*TABLE_COLUMNS, "ppl")}))
    return EXIT_OK


def cmd_sample(args) -> int:
    cfg, model, path = _load_run(args.checkpoint)
    with torch.no_grad():
        images = sample(model, args.n, args.seed, "cli/sample")
    out = _out_dir(args, path, "sample")
    print(save_grid(images, out / f"samples_n{args.n}_s{args.seed}.png", nrow=8))
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    cfg, model, path = _load_run(args.checkpoint)
    _, test_set = load_splits(cfg)
    picks = spaced_indices(len(test_set), args.n)
    n = len(picks)
    with torch.no_grad():
        x = normalize(test_set.images[picks])
        recon = reconstruct(model, x)
    nrow = min(args.nrow, n)
    rows = [torch.cat([x[i:i + nrow], recon[i:i + nrow]]) for i in range(0, n, nrow)]
    out = _out_dir(args, path, "reconstruct")
    print(save_grid(torch.cat(rows), out / f"reconstruct_n{n}.png", nrow=nrow))
    return EXIT_OK


def cmd_interpolate(args) -> int:
    if args.steps < 2:
        raise ConfigError("steps", "need at least the two endpoints")
    cfg, model, path = _load_run(args.checkpoint)
    _, test_set = load_splits(cfg)
    with torch.no_grad():
        mu, _ = model.encode(normalize(test_set.images[spaced_indices(len(test_set), 2 * args.pairs)]))
        z1, z2 = mu[0::2], mu[1::2]
        ts = torch.linspace(0, 1, args.steps, dtype=mu.dtype)
        fn = lerp if args.interp == "lerp" else slerp
        rows = [model.decode(torch.stack([fn(z1[p], z2[p], t) for t in ts])) for p in range(len(z1))]
    out = _out_dir(args, path, "interpolate")
    print(save_grid(torch.cat(rows), out / f"interpolate_{args.interp}_{args.steps}.png", nrow=args.steps))
    return EXIT_OK


def cmd_direction(args) -> int:
    """Attribute direction from labels: class ``positive`` against every other class."""
    cfg, model, path = _load_run(args.checkpoint)
    train_set, _ = load_splits(cfg)
    if train_set.labels is None:
        raise ConfigError("dataset", "directions from labels need a labeled dataset")
    order = np.arange(len(train_set))
    pos = order[train_set.labels == args.positive][:args.count]
    neg = order[train_set.labels != args.positive][:args.count]
    z_pos = encode_means(model.encoder, train_set.subset(pos))
    z_neg = encode_means(model.encoder, train_set.subset(neg))
    direction = attribute_direction(z_pos, z_neg, label=f"class {args.positive}")
    out = _out_dir(args, path, "direction")
    target = out / f"direction_class{args.positive}.json"
    direction.save(target)
    print(target)
    return EXIT_OK


def cmd_edit(args) -> int:
    if not Path(args.direction).exists():
        raise FileNotFoundError(f"direction file {args.direction} not found")
    direction = AttributeDirection.load(args.direction)
    cfg, model, path = _load_run(args.checkpoint)
    if len(direction.vector) != cfg.latent_dim:
        raise ConfigError("direction", f"dimension {len(direction.vector)} != latent_dim {cfg.latent_dim}")
    _, test_set = load_splits(cfg)
    with torch.no_grad():
        mu, _ = model.encode(normalize(test_set.images[spaced_indices(len(test_set), args.n)]))
        rows = [model.decode(torch.stack([edit(z, direction, a) for a in args.alphas])) for z in mu]
    out = _out_dir(args, path, "edit")
    print(save_grid(torch.cat(rows), out / f"edit_{Path(args.direction).stem}.png", nrow=len(args.alphas)))
    return EXIT_OK


def cmd_probe(args) -> int:
    cfg, model, path = _load_run(args.checkpoint)
    train_set, test_set = load_splits(cfg)
    result = linear_probe(model.encoder, train_set, test_set, trials=args.trials, seed=args.seed)
    out = _out_dir(args, path, "probe")
    write_json(out / f"probe_t{args.trials}_s{args.seed}.json", result.as_record())
    print(json.dumps({"error_rate": result.error_rate, "half_width": result.half_width}))
    return EXIT_OK


def cmd_score(args) -> int:
    real = load_image_dir(args.real)
    fake = load_image_dir(args.fake)
    if args.embedder == "identity":
        embedder = IdentityEmbedder()
    else:
        embedder = load_embedder(args.embedder)
    xr, xf = normalize(real.images), normalize(fake.images)
    report = {"embedder_id": embedder.id, "counts": {"real": len(xr), "fake": len(xf)},
              "fid": compute_fid(xr, xf, embedder, args.sample_count, allow_small=args.allow_small)}
    if len(xr) == len(xf) and args.paired:
        report["pixel_distance"] = pixel_distance(xr, xf)
        report["perceptual_distance"] = perceptual_distance(xr, xf, embedder)
    if args.out:
        write_json(args.out, report)
    print(json.dumps(report))
    return EXIT_OK


# -- parser ------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    """Usage errors are validation errors: exit 1 rather than argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dcvae", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", required=True)
        sp.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config key, e.g. loss_weights.kl=0.01 (repeatable)")
        sp.add_argument("--out", default="runs")

    def with_checkpoint(sp):
        sp.add_argument("--checkpoint", required=True, help="checkpoint file or run directory")
        sp.add_argument("--out", default=None)

    sp = sub.add_parser("train", help="train one run")
    with_config(sp)
    sp.add_argument("--resume", action="store_true")
    sp.add_argument("--force", action="store_true", help="discard an existing run directory")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("ablation", help="train and compare modes at equal budget")
    with_config(sp)
    sp.add_argument("--modes", type=_csv(str), default=None)
    sp.add_argument("--seeds", type=_csv(int), default=None)
    sp.add_argument("--jobs", type=int, default=1, help="train sub-runs in this many processes")
    sp.set_defaults(fn=cmd_ablation)

    sp = sub.add_parser("sweep-negatives", help="test reconstruction error against queue size")
    with_config(sp)
    sp.add_argument("--k", type=_csv(int), required=True)
    sp.add_argument("--seeds", type=_csv(int), default=None)
    sp.add_argument("--jobs", type=int, default=1, help="train sub-runs in this many processes")
    sp.set_defaults(fn=cmd_sweep_negatives)

    sp = sub.add_parser("eval", help="metrics for a checkpoint")
    with_checkpoint(sp)
    sp.add_argument("--ppl", action="store_true")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("sample", help="grid of prior samples")
    with_checkpoint(sp)
    sp.add_argument("--n", type=int, default=64)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(fn=cmd_sample)

    sp = sub.add_parser("reconstruct", help="input rows above reconstruction rows")
    with_checkpoint(sp)
    sp.add_argument("--n", type=int, default=16)
    sp.add_argument("--nrow", type=int, default=8)
    sp.set_defaults(fn=cmd_reconstruct)

    sp = sub.add_parser("interpolate", help="latent traversal between test-image pairs")
    with_checkpoint(sp)
    sp.add_argument("--steps", type=int, default=8)
    sp.add_argument("--pairs", type=int, default=4)
    sp.add_argument("--interp", choices=("lerp", "slerp"), default="slerp")
    sp.set_defaults(fn=cmd_interpolate)

    sp = sub.add_parser("direction", help="attribute direction from class labels")
    with_checkpoint(sp)
    sp.add_argument("--positive", type=int, required=True)
    sp.add_argument("--count", type=int, default=20)
    sp.set_defaults(fn=cmd_direction)

    sp = sub.add_parser("edit", help="grid over alpha along an attribute direction")
    with_checkpoint(sp)
    sp.add_argument("--direction", required=True)
    sp.add_argument("--alphas", type=_csv(float), default=[-2.0, -1.0, 0.0, 1.0, 2.0])
    sp.add_argument("--n", type=int, default=4)
    sp.set_defaults(fn=cmd_edit)

    sp = sub.add_parser("probe", help="linear probe on posterior means")
    with_checkpoint(sp)
    sp.add_argument("--trials", type=int, default=5)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(fn=cmd_probe)

    sp = sub.add_parser("score", help="FID (and paired distances) between two image directories")
    sp.add_argument("real")
    sp.add_argument("fake")
    sp.add_argument("--embedder", required=True, help="saved embedder file, or 'identity'")
    sp.add_argument("--sample-count", type=int, default=10_000)
    sp.add_argument("--allow-small", action="store_true")
    sp.add_argument("--paired", action="store_true", help="also report pixel and perceptual distance")
    sp.add_argument("--out", default=None)
    sp.set_defaults(fn=cmd_score)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, DatasetError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NonFiniteLossError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
