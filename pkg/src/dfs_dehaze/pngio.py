"""PNG readers/writers for every raster kind the pipeline touches.

Conventions (bit-exact, toolchain-neutral):
  * clean/hazy images: 8-bit RGB, decoded to float64 in [0, 1] via v = u8 / 255
  * depth maps: 16-bit grayscale, scaled linearly to a declared [dmin, dmax]
  * label maps: 8-bit grayscale, raw class IDs (255 = ignore)
  * instance maps: 16-bit grayscale, raw instance IDs (0 = no instance)
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ValidationError

DEPTH_MAX_CODE = 65535


def read_image(path: str | Path) -> np.ndarray:
    """Read an 8-bit RGB PNG as float64 (H, W, 3) in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def write_image(path: str | Path, img: np.ndarray) -> None:
    """Write a float image in [0, 1] as an 8-bit RGB PNG."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValidationError(f"expected (H, W, 3) image, got shape {img.shape}")
    if not np.isfinite(img).all():
        raise ValidationError("image contains non-finite values")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValidationError(
            f"image values outside [0, 1]: min={img.min():.4g} max={img.max():.4g}"
        )
    u8 = np.rint(img * 255.0).astype(np.uint8)
    Image.fromarray(u8, mode="RGB").save(path)


def read_depth(path: str | Path, dmin: float, dmax: float) -> np.ndarray:
    """Read a 16-bit grayscale PNG as a metric depth map (H, W) float64."""
    if dmax <= dmin:
        raise ValidationError(f"invalid depth range [{dmin}, {dmax}]")
    with Image.open(path) as im:
        if im.mode != "I;16":
            im = im.convert("I")
        arr = np.asarray(im, dtype=np.float64)
    return dmin + arr / DEPTH_MAX_CODE * (dmax - dmin)


def write_depth(path: str | Path, depth: np.ndarray, dmin: float, dmax: float) -> None:
    """Write a metric depth map as a 16-bit grayscale PNG scaled to [dmin, dmax]."""
    depth = np.asarray(depth, dtype=np.float64)
    if dmax <= dmin:
        raise ValidationError(f"invalid depth range [{dmin}, {dmax}]")
    if not np.isfinite(depth).all():
        raise ValidationError("depth contains non-finite values")
    if depth.min() < dmin or depth.max() > dmax:
        raise ValidationError(
            f"depth values outside declared [{dmin}, {dmax}]:"
            f" min={depth.min():.4g} max={depth.max():.4g}"
        )
    codes = np.rint((depth - dmin) / (dmax - dmin) * DEPTH_MAX_CODE)
    im = Image.fromarray(codes.astype(np.uint16))
    im.save(path)


def read_labels(path: str | Path) -> np.ndarray:
    """Read an 8-bit grayscale PNG of class IDs (H, W) uint8."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.uint8)
    return arr


def write_labels(path: str | Path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() > 255:
        raise ValidationError("label IDs must fit in uint8")
    Image.fromarray(labels.astype(np.uint8), mode="L").save(path)


def read_instances(path: str | Path) -> np.ndarray:
    """Read a 16-bit grayscale PNG of instance IDs (H, W) int64."""
    with Image.open(path) as im:
        if im.mode != "I;16":
            im = im.convert("I")
        arr = np.asarray(im, dtype=np.int64)
    return arr


def write_instances(path: str | Path, ids: np.ndarray) -> None:
    ids = np.asarray(ids)
    if ids.min() < 0 or ids.max() > DEPTH_MAX_CODE:
        raise ValidationError("instance IDs must fit in uint16")
    Image.fromarray(ids.astype(np.uint16)).save(path)
