"""Evaluation stack: image quality metrics and segmentation metrics.

Image metrics operate on float rasters in [0, 1] (MAX = 1):
  * mse, psnr (capped at 99 dB for identical inputs; the cap is part of the
    metric definition so tables stay comparable, not a config knob)
  * ssim with a uniform 8x8 sliding window (stride 1) by default, constants
    C1 = 0.01^2 and C2 = 0.03^2; an 11x11 Gaussian window (sigma 1.5) is
    available behind the ``window`` switch for literature comparability.
    Color inputs are converted to luma first (ITU-R BT.601 weights).

Segmentation metrics accumulate a ConfusionMatrix (rows = ground truth,
cols = prediction) and reduce it to IoU / instance-weighted iIoU at class or
category level. iIoU weights each TP/FN pixel by
(class mean instance size) / (size of the pixel's GT instance); FP pixels
carry weight 1 since they have no GT instance to weight by.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .errors import ValidationError
from .labels import IGNORE_LABEL, LabelSchema, render_labels

PSNR_CAP_DB = 99.0
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
LUMA_WEIGHTS = (0.299, 0.587, 0.114)  # ITU-R BT.601
UNIFORM_WINDOW = 8
GAUSSIAN_WINDOW = 11
GAUSSIAN_SIGMA = 1.5

ARMS = ("hazy", "dehaze", "dfs", "gt")


def _check_image_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch: {a.shape} vs {b.shape}")
    for name, img in (("first", a), ("second", b)):
        if not np.isfinite(img).all():
            raise ValidationError(f"{name} image contains non-finite values")
        if img.min() < 0.0 or img.max() > 1.0:
            raise ValidationError(f"{name} image values outside [0, 1]")
    return a, b


def mse(a: np.ndarray, b: np.ndarray) -> float:
    """Mean squared difference over all pixels and channels."""
    a, b = _check_image_pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 * log10(1 / mse) in dB; identical inputs return the 99 dB cap."""
    err = mse(a, b)
    if err == 0.0:
        return PSNR_CAP_DB
    return float(10.0 * np.log10(1.0 / err))


def to_gray(img: np.ndarray) -> np.ndarray:
    """Luma conversion with BT.601 weights; grayscale passes through."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[2] == 3:
        w = np.asarray(LUMA_WEIGHTS)
        return img @ w
    raise ValidationError(f"expected (H, W) or (H, W, 3), got {img.shape}")


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(a: np.ndarray, b: np.ndarray, window: str = "uniform8") -> float:
    """Mean local SSIM over all (stride 1) windows.

    Per window, with population moments mu, sigma^2, sigma_ab:

        ((2 mu_a mu_b + C1) (2 sigma_ab + C2))
        / ((mu_a^2 + mu_b^2 + C1) (sigma_a^2 + sigma_b^2 + C2))

    ``window`` selects "uniform8" (default) or "gaussian11" weighting.
    """
    a, b = _check_image_pair(a, b)
    ga, gb = to_gray(a), to_gray(b)
    if window == "uniform8":
        size = UNIFORM_WINDOW
        weights = np.full((size, size), 1.0 / (size * size))
    elif window == "gaussian11":
        size = GAUSSIAN_WINDOW
        weights = _gaussian_kernel(size, GAUSSIAN_SIGMA)
    else:
        raise ValidationError(f"unknown ssim window '{window}'")
    h, w = ga.shape
    if h < size or w < size:
        raise ValidationError(f"image {h}x{w} smaller than {size}x{size} ssim window")

    wa = np.lib.stride_tricks.sliding_window_view(ga, (size, size))
    wb = np.lib.stride_tricks.sliding_window_view(gb, (size, size))
    mu_a = np.tensordot(wa, weights, axes=([2, 3], [0, 1]))
    mu_b = np.tensordot(wb, weights, axes=([2, 3], [0, 1]))
    e_aa = np.tensordot(wa * wa, weights, axes=([2, 3], [0, 1]))
    e_bb = np.tensordot(wb * wb, weights, axes=([2, 3], [0, 1]))
    e_ab = np.tensordot(wa * wb, weights, axes=([2, 3], [0, 1]))
    var_a = e_aa - mu_a**2
    var_b = e_bb - mu_b**2
    cov = e_ab - mu_a * mu_b

    num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# Segmentation metrics
# ---------------------------------------------------------------------------


@dataclass
class ConfusionMatrix:
    """Pixel confusion counts plus optional instance-weighted counts.

    ``counts[g, p]`` is the number of evaluated pixels with GT class g
    predicted as p. ``wcounts`` holds the same tally with each pixel scaled
    by its instance weight; it is present only when instance maps were
    supplied. Keeping the weighted tally as a full matrix lets category
    grouping collapse rows/columns without revisiting pixels.
    """

    counts: np.ndarray
    wcounts: np.ndarray | None = None

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def weighted_tp(self) -> np.ndarray:
        self._require_weights()
        return np.diag(self.wcounts).copy()

    @property
    def weighted_fn(self) -> np.ndarray:
        self._require_weights()
        return self.wcounts.sum(axis=1) - np.diag(self.wcounts)

    def _require_weights(self) -> None:
        if self.wcounts is None:
            raise ValidationError(
                "instance-weighted counts absent; supply an InstanceMap to confusion()"
            )

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if self.n_classes != other.n_classes:
            raise ValidationError("cannot merge confusion matrices of different sizes")
        if (self.wcounts is None) != (other.wcounts is None):
            raise ValidationError("cannot merge weighted and unweighted confusion matrices")
        w = None if self.wcounts is None else self.wcounts + other.wcounts
        return ConfusionMatrix(self.counts + other.counts, w)


def instance_sizes(
    gt: np.ndarray, instances: np.ndarray, n_classes: int
) -> dict[int, tuple[int, int]]:
    """Map instance ID -> (class, pixel count) over non-ignored GT pixels.

    Raises if one instance ID spans more than one GT class.
    """
    gt = np.asarray(gt)
    instances = np.asarray(instances)
    if gt.shape != instances.shape:
        raise ValidationError(f"shape mismatch: labels {gt.shape} vs instances {instances.shape}")
    mask = (gt != IGNORE_LABEL) & (instances > 0)
    out: dict[int, tuple[int, int]] = {}
    ids = instances[mask]
    classes = gt[mask]
    for inst in np.unique(ids):
        cls = np.unique(classes[ids == inst])
        if len(cls) != 1:
            raise ValidationError(f"instance {int(inst)} spans classes {cls.tolist()}")
        out[int(inst)] = (int(cls[0]), int(np.count_nonzero(ids == inst)))
    return out


def mean_instance_sizes(sizes: dict[int, tuple[int, int]], n_classes: int) -> np.ndarray:
    """Per-class mean GT instance size (NaN for classes with no instances)."""
    means = np.full(n_classes, np.nan)
    for cls in range(n_classes):
        s = [px for c, px in sizes.values() if c == cls]
        if s:
            means[cls] = float(np.mean(s))
    return means


def confusion(
    pred: np.ndarray,
    gt: np.ndarray,
    n_classes: int,
    instances: np.ndarray | None = None,
    class_mean_sizes: np.ndarray | None = None,
) -> ConfusionMatrix:
    """Accumulate one image pair into a confusion matrix.

    Pixels with GT label 255 are ignored. When ``instances`` is given, the
    weighted tally uses per-pixel weight
    (class mean instance size) / (pixel's GT instance size); the mean size
    defaults to this image's GT instances, or pass ``class_mean_sizes``
    (indexed by class) precomputed over a corpus for benchmark-style
    evaluation. Pixels of classes without instances carry weight 1.
    """
    pred = np.asarray(pred).astype(np.int64)
    gt = np.asarray(gt).astype(np.int64)
    if pred.shape != gt.shape:
        raise ValidationError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    if np.any(pred == IGNORE_LABEL):
        raise ValidationError("prediction contains ignore labels")
    if pred.min() < 0 or pred.max() >= n_classes:
        raise ValidationError(f"prediction labels outside [0, {n_classes})")
    valid = gt != IGNORE_LABEL
    gv = gt[valid]
    if gv.size and (gv.min() < 0 or gv.max() >= n_classes):
        raise ValidationError(f"ground-truth labels outside [0, {n_classes})")
    pv = pred[valid]

    flat = gv * n_classes + pv
    counts = np.bincount(flat, minlength=n_classes * n_classes)
    counts = counts.reshape(n_classes, n_classes).astype(np.int64)

    wcounts = None
    if instances is not None:
        sizes = instance_sizes(gt, instances, n_classes)
        means = (
            np.asarray(class_mean_sizes, dtype=np.float64)
            if class_mean_sizes is not None
            else mean_instance_sizes(sizes, n_classes)
        )
        iv = np.asarray(instances)[valid]
        weights = np.ones(gv.shape, dtype=np.float64)
        for inst, (cls, px) in sizes.items():
            if np.isnan(means[cls]):
                continue
            weights[iv == inst] = means[cls] / px
        wcounts = np.zeros((n_classes, n_classes), dtype=np.float64)
        np.add.at(wcounts, (gv, pv), weights)
    return ConfusionMatrix(counts, wcounts)


def _group_table(m: ConfusionMatrix, grouping: str, schema: LabelSchema) -> list[tuple[int, ...]]:
    if schema.n_classes != m.n_classes:
        raise ValidationError("schema does not match confusion matrix size")
    if grouping == "classes":
        return [(c,) for c in range(m.n_classes)]
    if grouping == "categories":
        return [schema.classes_of_category(cat) for cat in range(len(schema.category_names))]
    raise ValidationError(f"unknown grouping '{grouping}'")


def iou_from_confusion(m: ConfusionMatrix, grouping: str, schema: LabelSchema) -> float:
    """Mean TP / (TP + FP + FN) over groups with any GT or predicted pixels."""
    if m.total == 0:
        raise ValidationError("empty confusion matrix")
    values = []
    for members in _group_table(m, grouping, schema):
        idx = list(members)
        tp = m.counts[np.ix_(idx, idx)].sum()
        gt_px = m.counts[idx, :].sum()
        pred_px = m.counts[:, idx].sum()
        union = gt_px + pred_px - tp
        if union == 0:
            continue
        values.append(tp / union)
    if not values:
        raise ValidationError("no group has any ground-truth or predicted pixels")
    return float(np.mean(values))


def iiou_from_confusion(m: ConfusionMatrix, grouping: str, schema: LabelSchema) -> float:
    """Instance-weighted IoU: mean wTP / (wTP + FP + wFN) over instance groups."""
    if m.total == 0:
        raise ValidationError("empty confusion matrix")
    m._require_weights()
    groups = _group_table(m, grouping, schema)
    if grouping == "classes":
        keep = [g for g in groups if g[0] in schema.instance_classes]
    else:
        cats = schema.instance_categories
        keep = [
            g
            for cat, g in enumerate(groups)
            if cat in cats
        ]
    values = []
    for members in keep:
        idx = list(members)
        rest = [c for c in range(m.n_classes) if c not in members]
        wtp = m.wcounts[np.ix_(idx, idx)].sum()
        wfn = m.wcounts[np.ix_(idx, rest)].sum()
        fp = m.counts[np.ix_(rest, idx)].sum()
        denom = wtp + fp + wfn
        if denom == 0:
            continue
        values.append(wtp / denom)
    if not values:
        raise ValidationError("no instance-annotated group has any pixels")
    return float(np.mean(values))


def segmap_psnr_ssim(
    pred: np.ndarray, gt: np.ndarray, schema: LabelSchema
) -> tuple[float, float]:
    """PSNR and SSIM of the two label maps rendered through the schema palette."""
    img_pred = render_labels(pred, schema)
    img_gt = render_labels(gt, schema)
    return psnr(img_pred, img_gt), ssim(img_pred, img_gt)


def pixel_accuracy(pred: np.ndarray, gt: np.ndarray) -> float:
    """Fraction of non-ignored pixels predicted correctly."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValidationError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    valid = gt != IGNORE_LABEL
    if not valid.any():
        raise ValidationError("no non-ignored pixels to score")
    return float(np.mean(pred[valid] == gt[valid]))


# ---------------------------------------------------------------------------
# Report rows
# ---------------------------------------------------------------------------


@dataclass
class MetricsReport:
    """One evaluation row, keyed by experiment arm.

    ``psnr``/``ssim``/``mse`` compare images against the clean ground truth;
    ``seg_psnr``/``seg_ssim`` compare palette-rendered segmentation outputs
    (the protocol behind segmentation-quality PSNR/SSIM tables); ``seg_loss``
    is the training-time segmentation loss evaluated on held-out data. The
    last three fields are artifact additions next to the four IoU columns.
    NaN marks metrics that were not computed for an arm.
    """

    arm: str
    psnr: float = float("nan")
    ssim: float = float("nan")
    mse: float = float("nan")
    seg_psnr: float = float("nan")
    seg_ssim: float = float("nan")
    seg_loss: float = float("nan")
    iou_cl: float = float("nan")
    iiou_cl: float = float("nan")
    iou_ca: float = float("nan")
    iiou_ca: float = float("nan")

    def __post_init__(self) -> None:
        if self.arm not in ARMS:
            raise ValidationError(f"unknown arm '{self.arm}', expected one of {ARMS}")

    def as_dict(self) -> dict[str, float | str]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


REPORT_COLUMNS = tuple(f.name for f in fields(MetricsReport))
REPORT_SCHEMA_VERSION = 1
