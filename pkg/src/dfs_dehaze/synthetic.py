"""Procedural benchmark: scenes of colored shapes with depth, labels, and
instance annotations, plus physically modeled hazy renders.

A desk-scale stand-in for indoor/street datasets: each scene places 1-5
shape instances (disk, box, wedge, bar) over a gradient background. Colors
are class-coded with per-instance jitter so segmentation is learnable at
32x32; shapes sit nearer than the background so haze hits them unevenly.
Scenes are drawn back-to-front, so color, depth, label, and instance rasters
agree about occlusion. All randomness flows from one seed; regenerating
with the same arguments reproduces identical files.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .haze import HazeParams, depth_to_transmission, synthesize_haze
from .labels import SYNTHETIC_SCHEMA, LabelSchema
from .manifest import (
    DatasetManifest,
    ManifestRecord,
    write_kv_config,
    write_manifest,
)
from .pngio import (
    read_depth,
    read_image,
    write_depth,
    write_image,
    write_instances,
    write_labels,
)

DEPTH_MIN = 0.0
DEPTH_MAX = 10.0
BETA_GRID = (0.4, 0.7, 1.0)
AIRLIGHT_GRID = (0.7, 0.8, 0.9)

_CLASS_COLORS = np.asarray(SYNTHETIC_SCHEMA.palette, dtype=np.float64) / 255.0


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_counts(n: int) -> tuple[int, int, int]:
    """(train, val, test) under the 80/20-then-80/20 protocol.

    The 20% side of each split is rounded to the nearest count (half up),
    the 80% side takes the remainder: n=64 -> (41, 10, 13).
    """
    if n < 8:
        raise ValidationError(f"benchmark needs n >= 8 scenes, got {n}")
    test = round_half_up(0.2 * n)
    pool = n - test
    val = round_half_up(0.2 * pool)
    train = pool - val
    return train, val, test


@dataclass
class Scene:
    clean: np.ndarray      # (H, W, 3) float in [0, 1]
    depth: np.ndarray      # (H, W) meters
    labels: np.ndarray     # (H, W) uint8 class IDs
    instances: np.ndarray  # (H, W) int instance IDs, 0 = none


def _shape_mask(kind: int, size: int, cx: float, cy: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    dx, dy = xx - cx, yy - cy
    if kind == 1:  # disk
        return dx**2 + dy**2 <= r**2
    if kind == 2:  # box
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if kind == 3:  # wedge (isoceles triangle pointing up)
        return (np.abs(dx) <= (dy + r) / 2.0) & (np.abs(dy) <= r)
    if kind == 4:  # bar (wide, thin)
        return (np.abs(dx) <= r) & (np.abs(dy) <= r / 3.0)
    raise ValidationError(f"unknown shape kind {kind}")


def generate_scene(rng: np.random.Generator, size: int = 32) -> Scene:
    """One scene: gradient background plus 1-5 nearer shape instances.

    Depths stay within ~4.5 m so the densest grid setting (beta 1.0) leaves
    t >= ~0.01 everywhere: heavy haze, but nothing is fully destroyed.
    Shape classes cycle through a per-scene shuffled order (keeps class
    frequencies balanced across small splits) and placements are resampled
    when a new shape would occlude most of an already placed instance, so
    every instance keeps a usable visible mask.
    """
    top = rng.uniform(0.30, 0.45)
    bottom = rng.uniform(0.45, 0.60)
    ramp = np.linspace(top, bottom, size)[:, None]
    tint = rng.uniform(-0.05, 0.05, size=3)
    clean = np.clip(ramp[:, :, None] + tint[None, None, :], 0.0, 1.0) * np.ones((size, size, 3))

    # Background recedes from bottom (2 m) to top (4.5 m).
    depth = np.linspace(4.5, 2.0, size)[:, None] * np.ones((size, size))
    labels = np.zeros((size, size), dtype=np.uint8)
    instances = np.zeros((size, size), dtype=np.int64)

    n_shapes = int(rng.integers(1, 6))
    kinds = [int(k) for k in rng.permutation([1, 2, 3, 4])]
    zs = np.sort(rng.uniform(0.5, 2.0, size=n_shapes))[::-1]  # far first
    visible: list[np.ndarray] = []
    for idx in range(1, n_shapes + 1):
        kind = kinds[(idx - 1) % 4]
        jitter = rng.uniform(-0.08, 0.08, size=3)
        mask = None
        for _ in range(12):
            cx = float(rng.uniform(0.15 * size, 0.85 * size))
            cy = float(rng.uniform(0.15 * size, 0.85 * size))
            r = float(rng.uniform(0.12 * size, 0.28 * size))
            cand = _shape_mask(kind, size, cx, cy, r)
            if cand.sum() < 12:
                continue
            if all((v & cand).sum() <= 0.5 * v.sum() for v in visible):
                mask = cand
                break
        if mask is None:
            continue
        color = np.clip(_CLASS_COLORS[kind] + jitter, 0.0, 1.0)
        z = float(zs[idx - 1])
        clean[mask] = color
        depth[mask] = z
        labels[mask] = kind
        instances[mask] = idx
        visible = [v & ~mask for v in visible]
        visible.append(mask.copy())
    return Scene(clean=clean, depth=depth, labels=labels, instances=instances)


def _pick_params(rng: np.random.Generator) -> HazeParams:
    beta = float(rng.choice(BETA_GRID))
    level = float(rng.choice(AIRLIGHT_GRID))
    return HazeParams.gray(beta, level)


def build_synthetic_benchmark(
    out_dir: str | Path,
    n: int,
    seed: int,
    size: int = 32,
    segnet_n: int | None = None,
    force: bool = False,
    schema: LabelSchema = SYNTHETIC_SCHEMA,
) -> dict[str, DatasetManifest]:
    """Generate the full benchmark tree and return its split manifests.

    The main ``n`` scenes split train/val/test per :func:`split_counts`;
    ``segnet_n`` extra scenes (default n // 2) form the disjoint
    ``segnet-train`` split used to pretrain the segmentation network. Hazy
    renders are recomputed from the *saved* clean/depth PNGs so the stored
    bytes are bit-reproducible from the stored inputs.
    """
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise ValidationError(f"output directory {out_dir} is not empty (use force)")
    train_n, val_n, test_n = split_counts(n)
    if segnet_n is None:
        segnet_n = n // 2
    rng = np.random.default_rng(seed)

    for sub in ("clean", "depth", "hazy", "labels", "instances"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)

    total = n + segnet_n
    records: list[ManifestRecord] = []
    for i in range(total):
        scene = generate_scene(rng, size=size)
        params = _pick_params(rng)
        stem = f"s{i:04d}.png"
        write_image(out_dir / "clean" / stem, scene.clean)
        write_depth(out_dir / "depth" / stem, scene.depth, DEPTH_MIN, DEPTH_MAX)
        write_labels(out_dir / "labels" / stem, scene.labels)
        write_instances(out_dir / "instances" / stem, scene.instances)
        clean = read_image(out_dir / "clean" / stem)
        depth = read_depth(out_dir / "depth" / stem, DEPTH_MIN, DEPTH_MAX)
        hazy = synthesize_haze(clean, depth_to_transmission(depth, params), params)
        write_image(out_dir / "hazy" / stem, hazy)
        records.append(
            ManifestRecord(
                clean=f"clean/{stem}",
                depth=f"depth/{stem}",
                hazy=f"hazy/{stem}",
                labels=f"labels/{stem}",
                instances=f"instances/{stem}",
                params=params,
            )
        )

    main = records[:n]
    order = rng.permutation(n)
    split_records = {
        "train": [main[i] for i in order[:train_n]],
        "val": [main[i] for i in order[train_n : train_n + val_n]],
        "test": [main[i] for i in order[train_n + val_n :]],
        "segnet-train": records[n:],
    }
    manifests: dict[str, DatasetManifest] = {}
    name = f"synthetic-{n}x{size}-seed{seed}"
    for split, recs in split_records.items():
        m = DatasetManifest(name=name, split=split, root=out_dir, records=recs).seal()
        write_manifest(m, out_dir / f"{split}.manifest")
        write_kv_config(
            out_dir / f"{split}.meta",
            {
                "name": name,
                "split": split,
                "image_size": size,
                "n_records": len(recs),
                "depth_min": DEPTH_MIN,
                "depth_max": DEPTH_MAX,
                "beta_grid": ",".join(str(b) for b in BETA_GRID),
                "airlight_grid": ",".join(str(a) for a in AIRLIGHT_GRID),
                "schema": schema.name,
                "seed": seed,
            },
        )
        manifests[split] = m
    return manifests
