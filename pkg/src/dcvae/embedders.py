"""The reference embedder: a small CNN classifier trained on a dataset's train split.

Its penultimate layer gives FID features, its softmax gives IS
probabilities and its last convolutional activation (N, 4w, 8, 8) is the
perceptual layer. Training is deterministic per (dataset fingerprint, seed,
epochs), and the result is cached on disk under that key.
"""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from .data import Dataset, normalize
from .rng import derive_rng

log = logging.getLogger(__name__)


class ReferenceEmbedder(nn.Module):
    def __init__(self, channels: int, num_classes: int, width: int = 32, feat_dim: int = 128, ident: str = ""):
        super().__init__()
        w = width
        self.convs = nn.Sequential(
            nn.Conv2d(channels, w, 3, padding=1), nn.ReLU(),
            nn.Conv2d(w, w, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(w, 2 * w, 3, padding=1), nn.ReLU(),
            nn.Conv2d(2 * w, 2 * w, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(2 * w, 4 * w, 3, padding=1), nn.ReLU(),
        )
        self.fc = nn.Linear(4 * w, feat_dim)
        self.cls = nn.Linear(feat_dim, num_classes)
        self.id = ident or f"reference-c{channels}-k{num_classes}-w{width}"
        self.config = {"channels": channels, "num_classes": num_classes, "width": width, "feat_dim": feat_dim}

    def _penultimate(self, maps):
        return F.relu(self.fc(maps.mean(dim=(2, 3))))

    def forward(self, x):
        return self.cls(self._penultimate(self.convs(x)))

    def feature_maps(self, x):
        return self.convs(x)

    def features(self, x):
        return self._penultimate(self.convs(x))

    def probs(self, x):
        return F.softmax(self(x).double(), dim=1)


def embedder_id(dataset: Dataset, seed: int, epochs: int) -> str:
    return f"reference-{dataset.name}-{dataset.fingerprint[:8]}-s{seed}-e{epochs}"


def train_reference_embedder(dataset: Dataset, seed: int = 0, epochs: int = 3, batch_size: int = 128,
                             lr: float = 1e-3) -> ReferenceEmbedder:
    if dataset.labels is None:
        raise ValueError("the reference embedder needs a labeled dataset")
    channels = dataset.images.shape[-1]
    model = ReferenceEmbedder(channels, dataset.num_classes, ident=embedder_id(dataset, seed, epochs))
    gen = derive_rng(seed, "embedder/init").torch_generator()
    for m in model.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, nonlinearity="relu", generator=gen)
            nn.init.zeros_(m.bias)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    labels = torch.as_tensor(dataset.labels, dtype=torch.long)
    model.train()
    for epoch in range(epochs):
        order = derive_rng(seed, f"embedder/epoch{epoch}").permutation(len(dataset))
        for i in range(0, len(order), batch_size):
            idx = order[i:i + batch_size]
            loss = F.cross_entropy(model(normalize(dataset.images[idx])), labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
        log.info("embedder epoch %d loss %.4f", epoch, loss.item())
    return model.eval()


def save_embedder(model: ReferenceEmbedder, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"id": model.id, "config": model.config, "state": model.state_dict()}, path)


def load_embedder(path) -> ReferenceEmbedder:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    model = ReferenceEmbedder(**blob["config"], ident=blob["id"])
    model.load_state_dict(blob["state"])
    return model.eval()


def reference_embedder(dataset: Dataset, seed: int = 0, epochs: int = 3,
                       cache_dir: Optional[Path] = None) -> ReferenceEmbedder:
    """Load the cached embedder for this key, training it on first use."""
    ident = embedder_id(dataset, seed, epochs)
    path = Path(cache_dir) / f"{ident}.pt" if cache_dir is not None else None
    if path is not None and path.exists():
        return load_embedder(path)
    model = train_reference_embedder(dataset, seed, epochs)
    if path is not None:
        save_embedder(model, path)
    return model
