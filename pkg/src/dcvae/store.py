"""On-disk artifacts: run manifest, checkpoints and the metrics log.

File formats
------------
manifest.json
    Written once, at run start, with exclusive-create mode. Keys:
    ``config``, ``started``, ``version``, ``dataset_fingerprint``, ``root_seed``.
checkpoint (``*.pt``)
    A ``torch.save`` container holding ``format``, ``iteration``,
    ``architecture`` (name -> shape), ``model`` (named tensors),
    ``optim_min``/``optim_max``, ``queues`` and ``rng``.
metrics.jsonl
    One JSON object per line: ``{"iter": int, "losses": {...},
    "grad_norm": {...}, "queue_fill": {...}}`` plus an optional
    ``"metrics"`` object on evaluation steps. No wall-clock values, so twin
    runs write byte-identical logs.
"""
from __future__ import annotations

import datetime as _dt
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable

import numpy as np
import torch

from . import __version__

CHECKPOINT_FORMAT = "dcvae-checkpoint/1"


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class RunManifest:
    config: dict
    started: str
    version: str
    dataset_fingerprint: str
    root_seed: int

    @classmethod
    def create(cls, config: dict, dataset_fingerprint: str, root_seed: int) -> "RunManifest":
        now = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
        return cls(config, now, __version__, dataset_fingerprint, int(root_seed))

    def write(self, path) -> None:
        # "x" mode: a manifest is never overwritten
        with open(path, "x") as fh:
            json.dump(self.__dict__, fh, indent=2, sort_keys=True)

    @classmethod
    def read(cls, path) -> "RunManifest":
        with open(path) as fh:
            return cls(**json.load(fh))


def architecture_of(state_dict: dict[str, torch.Tensor]) -> dict[str, list[int]]:
    return {k: list(v.shape) for k, v in state_dict.items()}


def save_checkpoint(state: dict[str, Any], path) -> None:
    """Atomically write a checkpoint; ``state['model']`` must be a state dict."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = dict(state)
    payload["format"] = CHECKPOINT_FORMAT
    payload.setdefault("architecture", architecture_of(state["model"]))
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path, expected_architecture: dict[str, list[int]] | None = None) -> dict[str, Any]:
    """Read a checkpoint, optionally checking it against an architecture manifest."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no checkpoint at {path}")
    try:
        state = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # truncated zip, bad pickle, ...
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if not isinstance(state, dict) or state.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if expected_architecture is not None:
        check_architecture(state["architecture"], expected_architecture)
    return state


def check_architecture(found: dict, expected: dict) -> None:
    missing = sorted(set(expected) - set(found))
    extra = sorted(set(found) - set(expected))
    if missing or extra:
        raise CheckpointError(f"parameter names differ: missing={missing[:5]} unexpected={extra[:5]}")
    for name, shape in expected.items():
        if list(found[name]) != list(shape):
            raise CheckpointError(f"shape mismatch for {name}: checkpoint {list(found[name])} vs config {list(shape)}")


def _clean(value):
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, (torch.Tensor, np.generic)):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


class MetricsLog:
    """Append-only JSON-lines log."""

    def __init__(self, path):
        self.path = Path(path)

    def append(self, record: dict) -> None:
        line = json.dumps(_clean(record), sort_keys=True)
        with open(self.path, "a") as fh:
            fh.write(line + "\n")

    def truncate_after(self, iteration: int) -> None:
        """Drop records beyond ``iteration`` (used when resuming)."""
        if not self.path.exists():
            return
        keep = [r for r in self.read() if r["iter"] < iteration]
        with open(self.path, "w") as fh:
            for r in keep:
                fh.write(json.dumps(r, sort_keys=True) + "\n")

    def read(self) -> list[dict]:
        if not self.path.exists():
            return []
        with open(self.path) as fh:
            return [json.loads(line) for line in fh if line.strip()]


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")


def write_table(path, header: Iterable[str], rows: Iterable[Iterable[Any]], delimiter: str = "\t") -> None:
    """Delimited text table; missing cells are written as ``NA``."""
    def fmt(v):
        if v is None:
            return "NA"
        if isinstance(v, float):
            return f"{v:.6g}"
        return str(v)

    lines = [delimiter.join(header)]
    lines += [delimiter.join(fmt(v) for v in row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n")
