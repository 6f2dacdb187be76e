"""Loading manifest records into memory-resident tensors for training.

Benchmarks at this scale fit in RAM, so a bundle eagerly decodes every
record once; batch order is driven by a caller-owned seeded generator so a
run's data order is a pure function of its config.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ValidationError
from .manifest import DatasetManifest
from .pngio import read_image, read_instances, read_labels
from .synthetic import DEPTH_MAX, DEPTH_MIN


@dataclass
class SceneBundle:
    """Decoded split: NCHW float tensors plus integer label/instance maps."""

    names: list[str]
    clean: torch.Tensor       # (N, 3, H, W) float32 in [0, 1]
    hazy: torch.Tensor        # (N, 3, H, W) float32 in [0, 1]
    labels: torch.Tensor      # (N, H, W) int64, 255 = ignore
    instances: np.ndarray     # (N, H, W) int64, 0 = none
    manifest_hash: str

    def __len__(self) -> int:
        return len(self.names)

    @property
    def image_size(self) -> int:
        return int(self.clean.shape[-1])


def _to_nchw(img: np.ndarray) -> np.ndarray:
    return np.transpose(img, (2, 0, 1)).astype(np.float32)


def load_bundle(manifest: DatasetManifest) -> SceneBundle:
    """Decode every record of a split manifest (requires hazy + labels)."""
    if not manifest.records:
        raise ValidationError(f"split '{manifest.split}' of '{manifest.name}' is empty")
    names, clean, hazy, labels, instances = [], [], [], [], []
    for r in manifest.records:
        if r.hazy is None or r.labels is None or r.instances is None:
            raise ValidationError(f"record {r.clean} lacks hazy/labels/instances fields")
        names.append(r.clean)
        clean.append(_to_nchw(read_image(manifest.resolve(r.clean))))
        hazy.append(_to_nchw(read_image(manifest.resolve(r.hazy))))
        labels.append(read_labels(manifest.resolve(r.labels)).astype(np.int64))
        instances.append(read_instances(manifest.resolve(r.instances)))
    return SceneBundle(
        names=names,
        clean=torch.from_numpy(np.stack(clean)),
        hazy=torch.from_numpy(np.stack(hazy)),
        labels=torch.from_numpy(np.stack(labels)),
        instances=np.stack(instances),
        manifest_hash=manifest.content_hash,
    )


def batch_indices(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Seed-determined shuffled batches; the last one may be short."""
    if batch_size < 1:
        raise ValidationError(f"batch_size must be >= 1, got {batch_size}")
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]
