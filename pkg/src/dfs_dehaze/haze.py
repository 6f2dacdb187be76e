"""Physically based haze synthesis on clean image + depth pairs.

Uses the single-scattering model throughout:

    t(x) = exp(-beta * d(x))
    I(x) = J(x) * t(x) + A * (1 - t(x))

with per-pixel transmission t in (0, 1], scene radiance J, airlight A. The
analytic inverse is provided as a round-trip oracle for the learned dehazer.
All functions are pure; callers may run them from any number of workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class HazeParams:
    """Scattering parameters: attenuation beta (1/m) and airlight per channel."""

    beta: float
    airlight: tuple[float, float, float]

    def __post_init__(self) -> None:
        if not np.isfinite(self.beta) or self.beta <= 0.0:
            raise ValidationError(f"beta must be finite and > 0, got {self.beta}")
        a = np.asarray(self.airlight, dtype=np.float64)
        if a.shape != (3,) or not np.isfinite(a).all() or a.min() < 0.0 or a.max() > 1.0:
            raise ValidationError(f"airlight channels must lie in [0, 1], got {self.airlight}")

    @classmethod
    def gray(cls, beta: float, level: float) -> "HazeParams":
        return cls(beta=beta, airlight=(level, level, level))

    @property
    def airlight_array(self) -> np.ndarray:
        return np.asarray(self.airlight, dtype=np.float64)


@dataclass
class ClipCounter:
    """Counts pixels the [0, 1] safety clip actually touched.

    On valid inputs (clean in [0, 1], airlight in [0, 1]) the count stays 0;
    tests assert that the clip is a dead safety net, not a silent fixup.
    """

    clipped: int = 0


def validate_depth(depth: np.ndarray) -> np.ndarray:
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim != 2:
        raise ValidationError(f"depth must be (H, W), got shape {depth.shape}")
    bad = np.count_nonzero(~np.isfinite(depth) | (depth < 0.0))
    if bad:
        raise ValidationError(f"depth has {bad} non-finite or negative pixel(s)")
    return depth


def validate_transmission(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 2:
        raise ValidationError(f"transmission must be (H, W), got shape {t.shape}")
    bad = np.count_nonzero(~np.isfinite(t) | (t <= 0.0) | (t > 1.0))
    if bad:
        raise ValidationError(f"transmission has {bad} pixel(s) outside (0, 1]")
    return t


def depth_to_transmission(depth: np.ndarray, params: HazeParams) -> np.ndarray:
    """t(x) = exp(-beta * d(x)), elementwise over the depth map."""
    depth = validate_depth(depth)
    return np.exp(-params.beta * depth)


def synthesize_haze(
    clean: np.ndarray,
    t: np.ndarray,
    params: HazeParams,
    clip_counter: ClipCounter | None = None,
) -> np.ndarray:
    """Compose a hazy image: out = clean * t + airlight * (1 - t), per channel."""
    clean = np.asarray(clean, dtype=np.float64)
    t = validate_transmission(t)
    if clean.ndim != 3 or clean.shape[2] != 3 or clean.shape[:2] != t.shape:
        raise ValidationError(
            f"shape mismatch: clean {clean.shape} vs transmission {t.shape}"
        )
    if not np.isfinite(clean).all() or clean.min() < 0.0 or clean.max() > 1.0:
        raise ValidationError("clean image values must be finite and in [0, 1]")
    t3 = t[:, :, None]
    out = clean * t3 + params.airlight_array * (1.0 - t3)
    if clip_counter is not None:
        clip_counter.clipped += int(np.count_nonzero((out < 0.0) | (out > 1.0)))
    return np.clip(out, 0.0, 1.0)


def dehaze_analytic(
    hazy: np.ndarray,
    t: np.ndarray,
    params: HazeParams,
    tmin: float = 1e-3,
) -> np.ndarray:
    """Invert the scattering model: J = (I - A * (1 - t)) / t, clipped to [0, 1].

    Requires t >= tmin everywhere; below that the inversion is
    ill-conditioned and refused rather than amplified into garbage.
    """
    hazy = np.asarray(hazy, dtype=np.float64)
    t = validate_transmission(t)
    if hazy.ndim != 3 or hazy.shape[2] != 3 or hazy.shape[:2] != t.shape:
        raise ValidationError(f"shape mismatch: hazy {hazy.shape} vs transmission {t.shape}")
    low = np.count_nonzero(t < tmin)
    if low:
        raise ValidationError(
            f"ill-conditioned inversion: {low} pixel(s) with transmission < {tmin}"
        )
    t3 = t[:, :, None]
    j = (hazy - params.airlight_array * (1.0 - t3)) / t3
    return np.clip(j, 0.0, 1.0)
