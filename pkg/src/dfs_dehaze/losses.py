"""Generator/discriminator loss terms and their weighted composition.

The generator objective is

    total = gan + lambda1 * pixel + lambda2 * percep + lambda3 * seg

where lambda3 = 0 disables the segmentation term and recovers the plain
dehazing objective. Discriminator scores are raw logits; probabilities are
their sigmoid. The pixel term is L1 by default (L2 behind a switch), the
adversarial term is the vanilla sigmoid-BCE patch loss (least-squares
behind a switch), and the segmentation term is the mean squared error
between softmax class probabilities and the one-hot ground truth over
non-ignored pixels, which keeps the term differentiable.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import IO

import torch
import torch.nn.functional as F

from .errors import NumericError, ValidationError
from .labels import IGNORE_LABEL


@dataclass(frozen=True)
class LossWeights:
    """(lambda1, lambda2, lambda3) for the pixel / perceptual / seg terms."""

    lambda1: float = 10.0
    lambda2: float = 10.0
    lambda3: float = 0.0

    def __post_init__(self) -> None:
        for name in ("lambda1", "lambda2", "lambda3"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0.0:
                raise ValidationError(f"{name} must be finite and >= 0, got {v}")


@dataclass
class LossBreakdown:
    """Per-term values plus the weighted total (floats or 0-dim tensors)."""

    gan: float | torch.Tensor
    pixel: float | torch.Tensor
    percep: float | torch.Tensor
    seg: float | torch.Tensor
    total: float | torch.Tensor

    def detach(self) -> "LossBreakdown":
        def item(v):
            return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)

        return LossBreakdown(*(item(getattr(self, k)) for k in ("gan", "pixel", "percep", "seg", "total")))


def _require_finite(t: torch.Tensor, what: str) -> None:
    if not torch.isfinite(t).all():
        raise NumericError(f"{what} contains non-finite values")


def gan_generator_loss(disc_scores_on_fake: torch.Tensor, kind: str = "vanilla") -> torch.Tensor:
    """Adversarial term: how far the discriminator is from calling fakes real."""
    _require_finite(disc_scores_on_fake, "discriminator scores")
    if kind == "vanilla":
        target = torch.ones_like(disc_scores_on_fake)
        return F.binary_cross_entropy_with_logits(disc_scores_on_fake, target)
    if kind == "lsgan":
        return F.mse_loss(torch.sigmoid(disc_scores_on_fake), torch.ones_like(disc_scores_on_fake))
    raise ValidationError(f"unknown gan loss kind '{kind}'")


def gan_discriminator_loss(
    scores_real: torch.Tensor, scores_fake: torch.Tensor, kind: str = "vanilla"
) -> torch.Tensor:
    """Average of BCE(real -> 1) and BCE(fake -> 0) over patch scores."""
    _require_finite(scores_real, "real scores")
    _require_finite(scores_fake, "fake scores")
    if kind == "vanilla":
        loss_real = F.binary_cross_entropy_with_logits(scores_real, torch.ones_like(scores_real))
        loss_fake = F.binary_cross_entropy_with_logits(scores_fake, torch.zeros_like(scores_fake))
    elif kind == "lsgan":
        loss_real = F.mse_loss(torch.sigmoid(scores_real), torch.ones_like(scores_real))
        loss_fake = F.mse_loss(torch.sigmoid(scores_fake), torch.zeros_like(scores_fake))
    else:
        raise ValidationError(f"unknown gan loss kind '{kind}'")
    return 0.5 * (loss_real + loss_fake)


def pixel_loss(fake: torch.Tensor, real: torch.Tensor, kind: str = "l1") -> torch.Tensor:
    """Reconstruction loss on raw pixel values (L1 default, L2 for ablation)."""
    if fake.shape != real.shape:
        raise ValidationError(f"shape mismatch: {tuple(fake.shape)} vs {tuple(real.shape)}")
    if kind == "l1":
        return torch.mean(torch.abs(fake - real))
    if kind == "l2":
        return torch.mean((fake - real) ** 2)
    raise ValidationError(f"unknown pixel loss kind '{kind}'")


def perceptual_loss(fake: torch.Tensor, real: torch.Tensor, extractor) -> torch.Tensor:
    """Mean squared feature distance, averaged over the extractor's taps.

    No gradient flows into the extractor parameters (they are frozen); the
    graph through the fake image is preserved.
    """
    if fake.shape != real.shape:
        raise ValidationError(f"shape mismatch: {tuple(fake.shape)} vs {tuple(real.shape)}")
    taps_fake = extractor(fake)
    with torch.no_grad():
        taps_real = extractor(real)
    losses = [F.mse_loss(f, r) for f, r in zip(taps_fake, taps_real)]
    return torch.stack(losses).mean()


def seg_loss(seg_scores_on_fake: torch.Tensor, gt_labels: torch.Tensor) -> torch.Tensor:
    """MSE between softmax class probabilities and one-hot GT labels.

    ``seg_scores_on_fake`` is (N, K, H, W) raw scores; ``gt_labels`` is
    (N, H, W) integer classes with 255 = ignore. Averages over non-ignored
    pixels and all K class coordinates.
    """
    if seg_scores_on_fake.ndim != 4:
        raise ValidationError(f"expected (N, K, H, W) scores, got {tuple(seg_scores_on_fake.shape)}")
    n, k, h, w = seg_scores_on_fake.shape
    if gt_labels.shape != (n, h, w):
        raise ValidationError(
            f"labels shape {tuple(gt_labels.shape)} does not match scores {tuple(seg_scores_on_fake.shape)}"
        )
    valid = gt_labels != IGNORE_LABEL
    labels_checked = gt_labels[valid]
    if labels_checked.numel() == 0:
        raise ValidationError("no non-ignored pixels in segmentation target")
    if labels_checked.min() < 0 or labels_checked.max() >= k:
        raise ValidationError(f"label values outside [0, {k})")
    probs = F.softmax(seg_scores_on_fake, dim=1)
    onehot = F.one_hot(torch.where(valid, gt_labels, 0).long(), num_classes=k)
    onehot = onehot.permute(0, 3, 1, 2).to(probs.dtype)
    sq = (probs - onehot) ** 2
    sq = sq * valid.unsqueeze(1)
    return sq.sum() / (valid.sum() * k)


def composite_generator_loss(
    gan: float | torch.Tensor,
    pixel: float | torch.Tensor,
    percep: float | torch.Tensor,
    seg: float | torch.Tensor | None,
    weights: LossWeights,
) -> LossBreakdown:
    """Weighted linear combination of the four generator terms.

    ``seg=None`` (or lambda3 = 0) drops the segmentation term entirely, so
    the composite equals the plain dehazing objective on identical parts.
    """
    parts = [gan, pixel, percep] + ([] if seg is None else [seg])
    for p in parts:
        if isinstance(p, torch.Tensor):
            _require_finite(p, "loss part")
        elif not math.isfinite(p):
            raise NumericError("loss part is non-finite")
    if seg is None and weights.lambda3 > 0.0:
        raise ValidationError("lambda3 > 0 requires a segmentation loss value")
    total = gan + weights.lambda1 * pixel + weights.lambda2 * percep
    if seg is not None and weights.lambda3 > 0.0:
        total = total + weights.lambda3 * seg
    seg_value = seg if seg is not None else 0.0
    return LossBreakdown(gan=gan, pixel=pixel, percep=percep, seg=seg_value, total=total)


LOSS_LOG_COLUMNS = ("step", "gan", "pixel", "percep", "seg", "total")


def open_loss_log(path: str | Path) -> IO[str]:
    fh = open(path, "w", newline="")
    csv.writer(fh).writerow(LOSS_LOG_COLUMNS)
    return fh


def append_loss_row(fh: IO[str], step: int, breakdown: LossBreakdown) -> None:
    b = breakdown.detach()
    csv.writer(fh).writerow(
        [step, repr(b.gan), repr(b.pixel), repr(b.percep), repr(b.seg), repr(b.total)]
    )
