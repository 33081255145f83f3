"""Image grids and image-directory I/O."""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .data import Dataset, denormalize

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


def make_grid(batch: torch.Tensor, nrow: int | None = None, pad: int = 2) -> np.ndarray:
    """Tile normalized (N, C, H, W) images into one uint8 (H', W', C) array."""
    imgs = denormalize(batch)
    n, h, w, c = imgs.shape
    nrow = nrow or math.ceil(math.sqrt(n))
    rows = math.ceil(n / nrow)
    grid = np.zeros((rows * (h + pad) + pad, nrow * (w + pad) + pad, c), dtype=np.uint8)
    for i in range(n):
        r, col = divmod(i, nrow)
        y, x = pad + r * (h + pad), pad + col * (w + pad)
        grid[y:y + h, x:x + w] = imgs[i]
    return grid


def save_grid(batch: torch.Tensor, path, nrow: int | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    grid = make_grid(batch, nrow)
    Image.fromarray(grid[..., 0] if grid.shape[-1] == 1 else grid).save(path)
    return path


def load_image_dir(directory, name: str = "") -> Dataset:
    """Every image file in ``directory`` (sorted by name) as an unlabeled dataset."""
    files = sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise FileNotFoundError(f"no images in {directory}")
    arrays = []
    for p in files:
        arr = np.asarray(Image.open(p))
        arrays.append(arr[..., None] if arr.ndim == 2 else arr[..., :3])
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"images in {directory} have differing shapes {sorted(shapes)}")
    return Dataset(np.stack(arrays).astype(np.uint8), None, "images", name or Path(directory).name)
