"""Training regimes and evaluation protocols.

Three regimes share one loop skeleton: ``segnet`` pretrains the
segmentation network on clean images, ``dehaze`` trains the conditional
GAN with the pixel + perceptual objective, and ``dfs`` adds the
segmentation term computed through a frozen pretrained segnet. On top sit
the lambda grid search and the five-seed protocol that averages the best
validation checkpoint of each run over the test set.

Determinism contract: a run's parameter initialization and batch order are
pure functions of its config seed, so identical configs reproduce
bit-identical loss logs on a fixed platform/precision.
"""

from __future__ import annotations

import copy
import dataclasses
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import losses as L
from . import metrics as M
from .datasets import SceneBundle, batch_indices
from .errors import DehazeError, NumericError, ValidationError
from .labels import SYNTHETIC_SCHEMA, LabelSchema
from .manifest import DatasetManifest, assert_disjoint, write_kv_config
from .models import (
    PROFILES,
    Generator,
    PatchDiscriminator,
    PerceptualExtractor,
    PerceptualExtractorSpec,
    SegNet,
    load_checkpoint,
    parameter_checksum,
    save_checkpoint,
)

REGIMES = ("segnet", "dehaze", "dfs")

# Regime defaults: (epochs, batch size). At paper scale the GAN optimizer
# follows the conditional image-to-image convention (2e-4, betas 0.5/0.999);
# at tiny scale those settings descend too slowly for smoke-length runs, so
# the GAN uses 1.5e-3 with betas 0.9/0.999 there. The segnet pretrainer uses
# plain Adam defaults at 1e-3 on both.
_PAPER_DEFAULTS = {"dehaze": (200, 16), "dfs": (100, 8), "segnet": (40, 16)}
_TINY_DEFAULTS = {"dehaze": (40, 16), "dfs": (40, 16), "segnet": (80, 8)}
_TINY_GAN_OPTIMIZER = dict(lr=1.5e-3, betas=(0.9, 0.999))


@dataclass(frozen=True)
class OptimizerConfig:
    name: str = "adam"
    lr: float = 2e-4
    betas: tuple[float, float] = (0.5, 0.999)

    def __post_init__(self) -> None:
        if self.name != "adam":
            raise ValidationError(f"unsupported optimizer '{self.name}'")
        if self.lr <= 0:
            raise ValidationError(f"learning rate must be positive, got {self.lr}")

    def build(self, params) -> torch.optim.Optimizer:
        return torch.optim.Adam(params, lr=self.lr, betas=self.betas)


@dataclass(frozen=True)
class TrainConfig:
    regime: str
    epochs: int
    batch_size: int
    optimizer: OptimizerConfig
    weights: L.LossWeights
    seed: int
    profile: str
    extractor_source: str | None = None  # None = profile default
    pixel_kind: str = "l1"
    gan_kind: str = "vanilla"

    def __post_init__(self) -> None:
        if self.regime not in REGIMES:
            raise ValidationError(f"unknown regime '{self.regime}'")
        if self.profile not in PROFILES:
            raise ValidationError(f"unknown profile '{self.profile}'")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValidationError("epochs must be >= 0 and batch_size >= 1")
        if self.regime == "dehaze" and self.weights.lambda3 != 0.0:
            raise ValidationError("dehaze regime requires lambda3 = 0")
        if self.regime == "dfs" and self.weights.lambda3 <= 0.0:
            raise ValidationError("dfs regime requires lambda3 > 0")

    @classmethod
    def defaults(cls, regime: str, profile: str, seed: int = 0) -> "TrainConfig":
        table = _PAPER_DEFAULTS if profile == "paper" else _TINY_DEFAULTS
        if regime not in table:
            raise ValidationError(f"unknown regime '{regime}'")
        epochs, batch = table[regime]
        if regime == "segnet":
            opt = OptimizerConfig(lr=1e-3, betas=(0.9, 0.999))
            weights = L.LossWeights(0.0, 0.0, 0.0)
        else:
            opt = OptimizerConfig() if profile == "paper" else OptimizerConfig(**_TINY_GAN_OPTIMIZER)
            weights = L.LossWeights(10.0, 10.0, 5.0 if regime == "dfs" else 0.0)
        return cls(
            regime=regime,
            epochs=epochs,
            batch_size=batch,
            optimizer=opt,
            weights=weights,
            seed=seed,
            profile=profile,
        )

    def echo(self) -> dict[str, object]:
        return {
            "regime": self.regime,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "optimizer": self.optimizer.name,
            "lr": self.optimizer.lr,
            "beta1": self.optimizer.betas[0],
            "beta2": self.optimizer.betas[1],
            "lambda1": self.weights.lambda1,
            "lambda2": self.weights.lambda2,
            "lambda3": self.weights.lambda3,
            "seed": self.seed,
            "profile": self.profile,
            "extractor_source": self.extractor_source or "",
            "pixel_kind": self.pixel_kind,
            "gan_kind": self.gan_kind,
        }


@dataclass
class RunRecord:
    """Everything one training run produced, enough to re-derive selection."""

    config_echo: dict[str, object]
    loss_rows: list[tuple[int, L.LossBreakdown]] = field(default_factory=list)
    epoch_rows: list[dict[str, float]] = field(default_factory=list)
    best_epoch: int | None = None
    checkpoints: dict[str, Path] = field(default_factory=dict)
    freeze_checksums: dict[str, tuple[str, str]] = field(default_factory=dict)
    run_dir: Path | None = None
    train_manifest_hash: str = ""

    def loss_totals(self) -> list[float]:
        return [b.total for _, b in self.loss_rows]

    def save_logs(self) -> None:
        if self.run_dir is None:
            return
        self.run_dir.mkdir(parents=True, exist_ok=True)
        write_kv_config(self.run_dir / "config.txt", self.config_echo)
        with L.open_loss_log(self.run_dir / "loss_log.csv") as fh:
            for step, b in self.loss_rows:
                L.append_loss_row(fh, step, b)
        if self.epoch_rows:
            import csv

            with open(self.run_dir / "epoch_log.csv", "w", newline="") as fh:
                writer = csv.DictWriter(fh, fieldnames=list(self.epoch_rows[0].keys()))
                writer.writeheader()
                writer.writerows(self.epoch_rows)


def _seed_everything(seed: int) -> np.random.Generator:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)
    return np.random.default_rng(seed)


def _build_extractor(cfg: TrainConfig) -> PerceptualExtractor:
    profile = PROFILES[cfg.profile]
    spec = profile.extractor
    if cfg.extractor_source and cfg.extractor_source != spec.weights_source:
        taps = ("pool2", "pool4") if "vgg" in cfg.extractor_source else ("stage1", "stage2")
        spec = PerceptualExtractorSpec(layer_taps=taps, weights_source=cfg.extractor_source)
    return PerceptualExtractor(spec)


# ---------------------------------------------------------------------------
# SEG-NET pretraining
# ---------------------------------------------------------------------------


def train_segnet(
    cfg: TrainConfig,
    data: SceneBundle,
    dehaze_manifests: tuple[DatasetManifest, ...] = (),
    segnet_manifest: DatasetManifest | None = None,
    run_dir: str | Path | None = None,
    n_classes: int | None = None,
    base_width: int | None = None,
) -> RunRecord:
    """Pretrain a segmentation network on clean images with pixel CE loss.

    The training subset must be disjoint from every dehazing split; passing
    the manifests asserts that (an overlap is a data leak, not a warning).
    ``base_width`` overrides the profile width, used to build the held-out
    evaluator variant from the same code path.
    """
    if cfg.regime != "segnet":
        raise ValidationError(f"train_segnet needs regime 'segnet', got '{cfg.regime}'")
    if segnet_manifest is not None and dehaze_manifests:
        assert_disjoint([segnet_manifest, *dehaze_manifests])
    if n_classes is None:
        n_classes = int(data.labels[data.labels != 255].max()) + 1
    profile = PROFILES[cfg.profile]
    rng = _seed_everything(cfg.seed)
    spec = profile.segnet_spec(n_classes)
    if base_width is not None:
        spec = dataclasses.replace(spec, base_width=base_width)
    net = SegNet(spec)
    optimizer = cfg.optimizer.build(net.parameters())
    ce = torch.nn.CrossEntropyLoss(ignore_index=255)

    record = RunRecord(
        config_echo=cfg.echo(),
        run_dir=Path(run_dir) if run_dir else None,
        train_manifest_hash=data.manifest_hash,
    )
    step = 0
    for epoch in range(cfg.epochs):
        epoch_loss, n_batches = 0.0, 0
        for idx in batch_indices(len(data), cfg.batch_size, rng):
            images = data.clean[idx]
            labels = data.labels[idx]
            optimizer.zero_grad()
            loss = ce(net(images), labels)
            if not torch.isfinite(loss):
                raise NumericError(f"segnet loss became non-finite at step {step}")
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.detach())
            n_batches += 1
            step += 1
        with torch.no_grad():
            pred = net(data.clean).argmax(dim=1)
        acc = M.pixel_accuracy(pred.numpy(), data.labels.numpy())
        record.epoch_rows.append(
            {"epoch": epoch, "train_loss": epoch_loss / n_batches, "train_pixel_acc": acc}
        )
    record.best_epoch = cfg.epochs - 1 if cfg.epochs else None
    if record.run_dir is not None:
        ckpt = record.run_dir / "segnet.npz"
        save_checkpoint(ckpt, "segnet", net)
        record.checkpoints["segnet"] = ckpt
        record.save_logs()
    record.model = net  # type: ignore[attr-defined]
    return record


# ---------------------------------------------------------------------------
# Dehazer training (plain and DFS)
# ---------------------------------------------------------------------------


def _validation_metrics(
    generator: Generator,
    val: SceneBundle,
    segnet: SegNet | None,
    batch_size: int,
) -> dict[str, float]:
    psnrs, ssims, seg_losses = [], [], []
    with torch.no_grad():
        for start in range(0, len(val), batch_size):
            hazy = val.hazy[start : start + batch_size]
            clean = val.clean[start : start + batch_size]
            fake = generator(hazy)
            for i in range(fake.shape[0]):
                a = fake[i].permute(1, 2, 0).numpy().astype(np.float64).clip(0.0, 1.0)
                b = clean[i].permute(1, 2, 0).numpy().astype(np.float64)
                psnrs.append(M.psnr(a, b))
                ssims.append(M.ssim(a, b))
            if segnet is not None:
                scores = segnet(fake)
                seg_losses.append(float(L.seg_loss(scores, val.labels[start : start + batch_size])))
    out = {"val_psnr": float(np.mean(psnrs)), "val_ssim": float(np.mean(ssims))}
    out["val_seg_loss"] = float(np.mean(seg_losses)) if seg_losses else float("nan")
    return out


def _selection_score(regime: str, row: dict[str, float], n_classes: int) -> float:
    # dehaze selects on val SSIM; dfs on SSIM minus the seg loss normalized
    # by its worst case (2 / n_classes). Both ingredients are logged.
    if regime == "dfs" and not math.isnan(row.get("val_seg_loss", float("nan"))):
        return row["val_ssim"] - row["val_seg_loss"] * n_classes / 2.0
    return row["val_ssim"]


def train_dehazer(
    cfg: TrainConfig,
    train: SceneBundle,
    val: SceneBundle | None = None,
    segnet: SegNet | None = None,
    run_dir: str | Path | None = None,
    lambda3_override: float | None = None,
) -> RunRecord:
    """Adversarial dehazer training, one generator and one discriminator
    step per batch.

    ``regime='dfs'`` requires a pretrained ``segnet``; it stays frozen (its
    parameter checksum is recorded before and after as proof). The
    perceptual extractor is likewise frozen. ``lambda3_override`` is an
    audit/ablation hook that replaces the configured lambda3 at run time
    (echoed in the record); with an effective lambda3 of 0 the segmentation
    term is skipped entirely, which makes a dfs-regime run executable as an
    exact replica of a dehaze-regime run.
    """
    if cfg.regime not in ("dehaze", "dfs"):
        raise ValidationError(f"train_dehazer needs regime dehaze/dfs, got '{cfg.regime}'")
    if cfg.regime == "dfs" and segnet is None:
        raise ValidationError("dfs regime requires a pretrained segnet checkpoint")
    lambda3 = cfg.weights.lambda3 if lambda3_override is None else float(lambda3_override)
    weights = L.LossWeights(cfg.weights.lambda1, cfg.weights.lambda2, lambda3)
    use_seg = weights.lambda3 > 0.0
    if use_seg and segnet is None:
        raise ValidationError("lambda3 > 0 requires a segnet")

    profile = PROFILES[cfg.profile]
    rng = _seed_everything(cfg.seed)
    generator = Generator(profile.generator)
    discriminator = PatchDiscriminator(profile.discriminator)
    extractor = _build_extractor(cfg)
    if segnet is not None:
        segnet.eval()
        for p in segnet.parameters():
            p.requires_grad_(False)

    opt_g = cfg.optimizer.build(generator.parameters())
    opt_d = cfg.optimizer.build(discriminator.parameters())

    record = RunRecord(
        config_echo={**cfg.echo(), "lambda3_effective": weights.lambda3},
        run_dir=Path(run_dir) if run_dir else None,
        train_manifest_hash=train.manifest_hash,
    )
    pre = {"extractor": parameter_checksum(extractor)}
    if segnet is not None:
        pre["segnet"] = parameter_checksum(segnet)

    n_classes = segnet.spec.n_classes if segnet is not None else 2
    best_score = -math.inf
    best_state: dict[str, torch.Tensor] | None = None
    step = 0
    last_finite: tuple[int, L.LossBreakdown] | None = None
    for epoch in range(cfg.epochs):
        for idx in batch_indices(len(train), cfg.batch_size, rng):
            hazy = train.hazy[idx]
            clean = train.clean[idx]
            labels = train.labels[idx]

            fake = generator(hazy)

            # Discriminator step (candidate detached).
            opt_d.zero_grad()
            d_loss = L.gan_discriminator_loss(
                discriminator(hazy, clean), discriminator(hazy, fake.detach()), cfg.gan_kind
            )
            d_loss.backward()
            opt_d.step()

            # Generator step.
            opt_g.zero_grad()
            gan = L.gan_generator_loss(discriminator(hazy, fake), cfg.gan_kind)
            pixel = L.pixel_loss(fake, clean, cfg.pixel_kind)
            percep = L.perceptual_loss(fake, clean, extractor)
            seg = L.seg_loss(segnet(fake), labels) if use_seg else None
            breakdown = L.composite_generator_loss(gan, pixel, percep, seg, weights)
            if not torch.isfinite(breakdown.total):
                detail = (
                    f"last finite step {last_finite[0]}: {last_finite[1]}"
                    if last_finite
                    else "no finite step recorded"
                )
                raise NumericError(f"generator loss non-finite at step {step}; {detail}")
            breakdown.total.backward()
            opt_g.step()

            logged = breakdown.detach()
            record.loss_rows.append((step, logged))
            last_finite = (step, logged)
            step += 1

        if val is not None:
            row = {"epoch": float(epoch)}
            row.update(_validation_metrics(generator, val, segnet, cfg.batch_size))
            row["selection_score"] = _selection_score(cfg.regime, row, n_classes)
            record.epoch_rows.append(row)
            if row["selection_score"] > best_score:
                best_score = row["selection_score"]
                record.best_epoch = epoch
                best_state = {k: v.clone() for k, v in generator.state_dict().items()}
                if record.run_dir is not None:
                    best = record.run_dir / "generator_best.npz"
                    save_checkpoint(best, "generator", generator)
                    record.checkpoints["generator_best"] = best

    post = {"extractor": parameter_checksum(extractor)}
    if segnet is not None:
        post["segnet"] = parameter_checksum(segnet)
    record.freeze_checksums = {k: (pre[k], post[k]) for k in pre}
    for name, (before, after) in record.freeze_checksums.items():
        if before != after:
            raise DehazeError(f"freeze contract broken: {name} parameters changed")

    if record.run_dir is not None:
        for name, module in (("generator", generator), ("discriminator", discriminator)):
            path = record.run_dir / f"{name}_final.npz"
            save_checkpoint(path, name, module)
            record.checkpoints[f"{name}_final"] = path
        if "generator_best" not in record.checkpoints:
            best = record.run_dir / "generator_best.npz"
            save_checkpoint(best, "generator", generator)
            record.checkpoints["generator_best"] = best
        record.save_logs()
    record.model = generator  # type: ignore[attr-defined]
    record.discriminator = discriminator  # type: ignore[attr-defined]
    record.best_state = best_state  # type: ignore[attr-defined]
    return record


# ---------------------------------------------------------------------------
# Arm evaluation
# ---------------------------------------------------------------------------


def corpus_mean_instance_sizes(bundle: SceneBundle, n_classes: int) -> np.ndarray:
    """Per-class mean GT instance size across the whole bundle."""
    sizes: list[tuple[int, int]] = []
    for i in range(len(bundle)):
        per_image = M.instance_sizes(bundle.labels[i].numpy(), bundle.instances[i], n_classes)
        sizes.extend(per_image.values())
    means = np.full(n_classes, np.nan)
    for cls in range(n_classes):
        s = [px for c, px in sizes if c == cls]
        if s:
            means[cls] = float(np.mean(s))
    return means


def _tensor_to_image(t: torch.Tensor) -> np.ndarray:
    return t.permute(1, 2, 0).numpy().astype(np.float64).clip(0.0, 1.0)


def evaluate_arm(
    arm: str,
    images: torch.Tensor,
    bundle: SceneBundle,
    segnet: SegNet | None,
    evaluator: SegNet | None,
    schema: LabelSchema,
    batch_size: int = 8,
) -> M.MetricsReport:
    """Full metrics row for one arm's images against the bundle's truth.

    Image quality compares against the clean images; seg_psnr/seg_ssim and
    seg_loss go through the training segnet (the network the DFS loss
    optimizes); IoU/iIoU go through the held-out evaluator with
    corpus-level mean instance sizes.
    """
    if images.shape != bundle.clean.shape:
        raise ValidationError("arm images do not match bundle shape")
    psnrs, ssims, mses = [], [], []
    for i in range(len(bundle)):
        a = _tensor_to_image(images[i])
        b = _tensor_to_image(bundle.clean[i])
        psnrs.append(M.psnr(a, b))
        ssims.append(M.ssim(a, b))
        mses.append(M.mse(a, b))
    report = M.MetricsReport(
        arm=arm,
        psnr=float(np.mean(psnrs)),
        ssim=float(np.mean(ssims)),
        mse=float(np.mean(mses)),
    )
    if segnet is not None:
        seg_psnrs, seg_ssims, seg_losses = [], [], []
        with torch.no_grad():
            for start in range(0, len(bundle), batch_size):
                chunk = images[start : start + batch_size]
                labels = bundle.labels[start : start + batch_size]
                scores = segnet(chunk)
                seg_losses.append(float(L.seg_loss(scores, labels)))
                pred = scores.argmax(dim=1).numpy()
                for i in range(pred.shape[0]):
                    p, s = M.segmap_psnr_ssim(pred[i], labels[i].numpy(), schema)
                    seg_psnrs.append(p)
                    seg_ssims.append(s)
        report.seg_psnr = float(np.mean(seg_psnrs))
        report.seg_ssim = float(np.mean(seg_ssims))
        report.seg_loss = float(np.mean(seg_losses))
    if evaluator is not None:
        means = corpus_mean_instance_sizes(bundle, evaluator.spec.n_classes)
        total: M.ConfusionMatrix | None = None
        with torch.no_grad():
            pred = evaluator.predict_labels(images).numpy()
        for i in range(len(bundle)):
            cm = M.confusion(
                pred[i],
                bundle.labels[i].numpy(),
                evaluator.spec.n_classes,
                instances=bundle.instances[i],
                class_mean_sizes=means,
            )
            total = cm if total is None else total + cm
        report.iou_cl = M.iou_from_confusion(total, "classes", schema)
        report.iiou_cl = M.iiou_from_confusion(total, "classes", schema)
        report.iou_ca = M.iou_from_confusion(total, "categories", schema)
        report.iiou_ca = M.iiou_from_confusion(total, "categories", schema)
    return report


def generate_outputs(generator: Generator, bundle: SceneBundle, batch_size: int = 8) -> torch.Tensor:
    outs = []
    with torch.no_grad():
        for start in range(0, len(bundle), batch_size):
            outs.append(generator(bundle.hazy[start : start + batch_size]).clamp(0.0, 1.0))
    return torch.cat(outs)


def evaluate_arms(
    bundle: SceneBundle,
    dehaze_generator: Generator | None,
    dfs_generator: Generator | None,
    segnet: SegNet | None,
    evaluator: SegNet | None,
    schema: LabelSchema = SYNTHETIC_SCHEMA,
) -> dict[str, M.MetricsReport]:
    """Reports for the four arms {hazy, dehaze, dfs, gt} on one bundle."""
    arms: dict[str, torch.Tensor] = {"hazy": bundle.hazy, "gt": bundle.clean}
    if dehaze_generator is not None:
        arms["dehaze"] = generate_outputs(dehaze_generator, bundle)
    if dfs_generator is not None:
        arms["dfs"] = generate_outputs(dfs_generator, bundle)
    return {
        arm: evaluate_arm(arm, images, bundle, segnet, evaluator, schema)
        for arm, images in arms.items()
    }


# ---------------------------------------------------------------------------
# Lambda grid search
# ---------------------------------------------------------------------------


def lambda_grid(n: int = 10, lo: float = 1.0, hi: float = 50.0) -> list[float]:
    """n log-spaced candidate weights spanning [lo, hi], endpoints exact."""
    grid = np.exp(np.linspace(np.log(lo), np.log(hi), n))
    grid[0], grid[-1] = lo, hi
    return [float(v) for v in grid]


@dataclass
class GridSearchResult:
    table: list[tuple[float, float]]  # (candidate, val score), sorted best first
    best_value: float
    best_config: TrainConfig


def grid_search_lambda(
    base: TrainConfig,
    which: set[str],
    train: SceneBundle,
    val: SceneBundle | None,
    segnet: SegNet | None = None,
    candidates: list[float] | None = None,
    epochs_override: int | None = None,
) -> GridSearchResult:
    """Sweep one shared candidate value over the selected lambdas.

    Every candidate trains a fresh run from the same seed and is scored by
    the regime's validation criterion; the winner is echoed into a derived
    config. Shortened epochs are allowed for desk-scale sweeps.
    """
    bad = which - {"lambda1", "lambda2", "lambda3"}
    if bad:
        raise ValidationError(f"unknown lambda names {sorted(bad)}")
    if not which:
        raise ValidationError("grid search needs at least one lambda to sweep")
    if val is None or len(val) == 0:
        raise ValidationError("grid search requires a non-empty validation set")
    if candidates is None:
        candidates = lambda_grid()
    rows = []
    for value in candidates:
        w = {name: getattr(base.weights, name) for name in ("lambda1", "lambda2", "lambda3")}
        for name in which:
            w[name] = value
        cfg = replace(
            base,
            weights=L.LossWeights(**w),
            epochs=epochs_override if epochs_override is not None else base.epochs,
        )
        record = train_dehazer(cfg, train, val, segnet=segnet)
        if not record.epoch_rows:
            raise ValidationError("grid search run produced no validation rows")
        score = max(r["selection_score"] for r in record.epoch_rows)
        rows.append((float(value), float(score)))
    rows.sort(key=lambda t: -t[1])
    best_value = rows[0][0]
    w = {name: getattr(base.weights, name) for name in ("lambda1", "lambda2", "lambda3")}
    for name in which:
        w[name] = best_value
    best_config = replace(base, weights=L.LossWeights(**w))
    return GridSearchResult(table=rows, best_value=best_value, best_config=best_config)


# ---------------------------------------------------------------------------
# Five-run protocol
# ---------------------------------------------------------------------------


@dataclass
class FiveRunResult:
    seeds: list[int]
    per_run: list[dict[str, M.MetricsReport]]
    mean: dict[str, M.MetricsReport]
    std: dict[str, M.MetricsReport]
    test_manifest_hash: str


def derive_seeds(seed: int, n: int = 5) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n)]


def _aggregate(reports: list[M.MetricsReport], arm: str) -> tuple[M.MetricsReport, M.MetricsReport]:
    mean = M.MetricsReport(arm=arm)
    std = M.MetricsReport(arm=arm)
    for f in dataclasses.fields(M.MetricsReport):
        if f.name == "arm":
            continue
        values = np.asarray([getattr(r, f.name) for r in reports], dtype=np.float64)
        setattr(mean, f.name, float(np.mean(values)))
        setattr(std, f.name, float(np.std(values)))
    return mean, std


def five_run_protocol(
    cfg: TrainConfig,
    train: SceneBundle,
    val: SceneBundle,
    test: SceneBundle,
    segnet: SegNet,
    evaluator: SegNet,
    run_dir: str | Path | None = None,
    schema: LabelSchema = SYNTHETIC_SCHEMA,
) -> FiveRunResult:
    """Train the dehaze and dfs arms under five derived seeds and average
    the best-validation checkpoints' test metrics per arm.

    Any failed run aborts the whole protocol; there is no partial averaging.
    """
    if cfg.regime != "dfs":
        raise ValidationError("five_run_protocol expects a dfs base config")
    seeds = derive_seeds(cfg.seed)
    per_run: list[dict[str, M.MetricsReport]] = []
    run_dir = Path(run_dir) if run_dir else None
    for i, seed in enumerate(seeds):
        try:
            cfg_dfs = replace(cfg, seed=seed)
            cfg_dehaze = replace(
                cfg,
                regime="dehaze",
                seed=seed,
                weights=L.LossWeights(cfg.weights.lambda1, cfg.weights.lambda2, 0.0),
            )
            sub = (run_dir / f"run{i}") if run_dir else None
            rec_dehaze = train_dehazer(
                cfg_dehaze, train, val, segnet=segnet, run_dir=(sub / "dehaze") if sub else None
            )
            rec_dfs = train_dehazer(
                cfg_dfs, train, val, segnet=segnet, run_dir=(sub / "dfs") if sub else None
            )
            gen_dehaze = _best_generator(rec_dehaze)
            gen_dfs = _best_generator(rec_dfs)
            per_run.append(
                evaluate_arms(test, gen_dehaze, gen_dfs, segnet, evaluator, schema)
            )
        except Exception as exc:
            raise DehazeError(
                f"five-run protocol aborted at run {i} (seed {seed}): {exc}"
            ) from exc
    arms = per_run[0].keys()
    mean, std = {}, {}
    for arm in arms:
        mean[arm], std[arm] = _aggregate([r[arm] for r in per_run], arm)
    return FiveRunResult(
        seeds=seeds,
        per_run=per_run,
        mean=mean,
        std=std,
        test_manifest_hash=test.manifest_hash,
    )


def save_five_run(result: FiveRunResult, path: str | Path) -> Path:
    """Persist a five-run aggregate as a versioned CSV (run, arm, metrics)."""
    import csv

    path = Path(path)
    with open(path, "w", newline="") as fh:
        fh.write(f"# seeds={','.join(str(s) for s in result.seeds)}\n")
        fh.write(f"# test_manifest_hash={result.test_manifest_hash}\n")
        fh.write(f"# schema_version={M.REPORT_SCHEMA_VERSION}\n")
        writer = csv.writer(fh)
        writer.writerow(("run", *M.REPORT_COLUMNS))

        def emit(tag: str, reports: dict[str, M.MetricsReport]) -> None:
            for arm in sorted(reports):
                r = reports[arm]
                writer.writerow(
                    [tag] + [getattr(r, c) if c == "arm" else repr(getattr(r, c)) for c in M.REPORT_COLUMNS]
                )

        for i, arms in enumerate(result.per_run):
            emit(str(i), arms)
        emit("mean", result.mean)
        emit("std", result.std)
    return path


def load_five_run(path: str | Path) -> FiveRunResult:
    import csv

    path = Path(path)
    header: dict[str, str] = {}
    rows: list[list[str]] = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#"):
                key, _, value = line.lstrip("#").strip().partition("=")
                header[key] = value
            else:
                rows.append(line.rstrip("\n"))
    reader = csv.reader(rows)
    columns = next(reader)
    if tuple(columns) != ("run", *M.REPORT_COLUMNS):
        raise ValidationError(f"{path}: unexpected five-run CSV columns")
    if header.get("schema_version") != str(M.REPORT_SCHEMA_VERSION):
        raise ValidationError(f"{path}: unsupported schema version {header.get('schema_version')}")
    buckets: dict[str, dict[str, M.MetricsReport]] = {}
    for cells in reader:
        if not cells:
            continue
        tag = cells[0]
        values = dict(zip(M.REPORT_COLUMNS, cells[1:]))
        report = M.MetricsReport(
            arm=values["arm"],
            **{k: float(v) for k, v in values.items() if k != "arm"},
        )
        buckets.setdefault(tag, {})[report.arm] = report
    run_tags = sorted(t for t in buckets if t not in ("mean", "std"))
    return FiveRunResult(
        seeds=[int(s) for s in header.get("seeds", "").split(",") if s],
        per_run=[buckets[t] for t in run_tags],
        mean=buckets.get("mean", {}),
        std=buckets.get("std", {}),
        test_manifest_hash=header.get("test_manifest_hash", ""),
    )


def load_loss_log(path: str | Path) -> list[tuple[int, L.LossBreakdown]]:
    import csv

    with open(path) as fh:
        reader = csv.DictReader(fh)
        rows = []
        for row in reader:
            rows.append(
                (
                    int(row["step"]),
                    L.LossBreakdown(
                        gan=float(row["gan"]),
                        pixel=float(row["pixel"]),
                        percep=float(row["percep"]),
                        seg=float(row["seg"]),
                        total=float(row["total"]),
                    ),
                )
            )
    return rows


def _best_generator(record: RunRecord) -> Generator:
    if "generator_best" in record.checkpoints:
        _, module = load_checkpoint(record.checkpoints["generator_best"])
        return module
    best_state = getattr(record, "best_state", None)
    if best_state is not None:
        gen = copy.deepcopy(record.model)
        gen.load_state_dict(best_state)
        return gen
    return record.model  # no validation ran; final weights are all there is


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------


def resize_bilinear(img: np.ndarray, size: int) -> np.ndarray:
    """Channel-wise bilinear resize of a float image to size x size."""
    img = np.asarray(img, dtype=np.float64)
    if img.shape[0] == size and img.shape[1] == size:
        return img.copy()
    channels = []
    for c in range(img.shape[2]):
        im = Image.fromarray(img[:, :, c].astype(np.float32), mode="F")
        channels.append(np.asarray(im.resize((size, size), Image.BILINEAR), dtype=np.float64))
    return np.clip(np.stack(channels, axis=2), 0.0, 1.0)


def preprocess(img: np.ndarray, profile: str, layout: str = "square") -> list[np.ndarray]:
    """Split/resize an input image into the profile's training resolution.

    ``layout='wide'`` expects a 2:1 panorama under the paper profile and
    produces the left and right square crops (pixel columns [0, H) and
    [H, 2H)) resized to the profile size; ``layout='square'`` resizes the
    whole frame. The tiny profile always resizes the whole frame.
    """
    if profile not in PROFILES:
        raise ValidationError(f"unknown profile '{profile}'")
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValidationError(f"expected (H, W, 3) image, got {img.shape}")
    size = PROFILES[profile].image_size
    if profile == "tiny" or layout == "square":
        return [resize_bilinear(img, size)]
    if layout != "wide":
        raise ValidationError(f"unknown layout '{layout}'")
    h, w = img.shape[:2]
    if w != 2 * h:
        raise ValidationError(f"paper-profile wide layout expects 2:1 aspect, got {h}x{w}")
    left, right = img[:, :h], img[:, h:]
    return [resize_bilinear(left, size), resize_bilinear(right, size)]
