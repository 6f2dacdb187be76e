"""Experiment configuration: one flat key=value file drives a training run.

Unknown keys are hard errors (no silent typos), the version field must
match the tool version, and every referenced file must exist at load time.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from . import __version__
from .errors import ValidationError
from .losses import LossWeights
from .manifest import DatasetManifest, load_kv_config, read_manifest
from .training import OptimizerConfig, TrainConfig

CONFIG_KEYS = {
    "version",
    "data_dir",
    "out_dir",
    "epochs",
    "batch_size",
    "lr",
    "beta1",
    "beta2",
    "lambda1",
    "lambda2",
    "lambda3",
    "seed",
    "profile",
    "extractor_source",
    "pixel_kind",
    "gan_kind",
    "segnet_ckpt",
    "evaluator_ckpt",
    "segnet_width",
    "grid_epochs",
}


@dataclass
class ExperimentConfig:
    data_dir: Path
    out_dir: Path
    train: TrainConfig
    segnet_ckpt: Path | None = None
    evaluator_ckpt: Path | None = None
    segnet_width: int | None = None
    grid_epochs: int | None = None

    def manifest(self, split: str) -> DatasetManifest:
        path = self.data_dir / f"{split}.manifest"
        if not path.exists():
            raise ValidationError(f"missing manifest {path}")
        return read_manifest(path)


def load_experiment_config(
    path: str | Path,
    regime: str,
    seed_override: int | None = None,
    profile_override: str | None = None,
) -> ExperimentConfig:
    raw = load_kv_config(path, CONFIG_KEYS)
    base = Path(path).parent

    version = raw.get("version")
    if version != __version__:
        raise ValidationError(
            f"config version '{version}' does not match tool version '{__version__}'"
        )
    for key in ("data_dir", "out_dir"):
        if key not in raw:
            raise ValidationError(f"config missing required key '{key}'")

    def resolve(value: str) -> Path:
        p = Path(value)
        return p if p.is_absolute() else base / p

    profile = profile_override or raw.get("profile", "tiny")
    seed = seed_override if seed_override is not None else int(raw.get("seed", 0))
    cfg = TrainConfig.defaults(regime, profile, seed=seed)

    epochs = int(raw["epochs"]) if "epochs" in raw else cfg.epochs
    batch_size = int(raw["batch_size"]) if "batch_size" in raw else cfg.batch_size
    opt = OptimizerConfig(
        lr=float(raw.get("lr", cfg.optimizer.lr)),
        betas=(
            float(raw.get("beta1", cfg.optimizer.betas[0])),
            float(raw.get("beta2", cfg.optimizer.betas[1])),
        ),
    )
    weights = LossWeights(
        lambda1=float(raw.get("lambda1", cfg.weights.lambda1)),
        lambda2=float(raw.get("lambda2", cfg.weights.lambda2)),
        lambda3=float(raw.get("lambda3", cfg.weights.lambda3)),
    )
    train = TrainConfig(
        regime=regime,
        epochs=epochs,
        batch_size=batch_size,
        optimizer=opt,
        weights=weights,
        seed=seed,
        profile=profile,
        extractor_source=raw.get("extractor_source") or None,
        pixel_kind=raw.get("pixel_kind", "l1"),
        gan_kind=raw.get("gan_kind", "vanilla"),
    )

    data_dir = resolve(raw["data_dir"])
    if not data_dir.is_dir():
        raise ValidationError(f"data_dir {data_dir} does not exist")
    exp = ExperimentConfig(
        data_dir=data_dir,
        out_dir=resolve(raw["out_dir"]),
        train=train,
        segnet_ckpt=resolve(raw["segnet_ckpt"]) if raw.get("segnet_ckpt") else None,
        evaluator_ckpt=resolve(raw["evaluator_ckpt"]) if raw.get("evaluator_ckpt") else None,
        segnet_width=int(raw["segnet_width"]) if raw.get("segnet_width") else None,
        grid_epochs=int(raw["grid_epochs"]) if raw.get("grid_epochs") else None,
    )
    for name, ckpt in (("segnet_ckpt", exp.segnet_ckpt), ("evaluator_ckpt", exp.evaluator_ckpt)):
        if ckpt is not None and not ckpt.exists():
            raise ValidationError(f"{name} {ckpt} does not exist")
    return exp
