"""The four networks: dehazing generator, patch discriminator, segmentation
network, and frozen perceptual feature extractor.

Everything is size-parameterized by a spec dataclass so the 32x32 "tiny"
profile and the 256x256 "paper" profile run the same code path. Checkpoints
are single-file ``.npz`` archives carrying a spec echo, flat named tensors,
a mandatory format version, and an integrity checksum.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .errors import CheckpointError, ValidationError, WeightsUnavailableError

CHECKPOINT_VERSION = 1

FIXED_RANDOM_SOURCE = "fixed-random-v1"
VGG16_SOURCE = "vgg16-torchvision"
_FIXED_RANDOM_SEED = 0x5EED


# ---------------------------------------------------------------------------
# Specs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GeneratorSpec:
    input_channels: int = 3
    base_width: int = 8
    n_down: int = 1
    n_res: int = 2
    norm_kind: str = "instance"
    output_activation: str = "tanh_rescaled"

    def __post_init__(self) -> None:
        if self.n_down < 1 or self.n_res < 1 or self.base_width < 4:
            raise ValidationError("generator needs n_down >= 1, n_res >= 1, base_width >= 4")
        if self.norm_kind not in ("instance", "batch"):
            raise ValidationError(f"unknown norm kind '{self.norm_kind}'")
        if self.output_activation != "tanh_rescaled":
            raise ValidationError(f"unknown output activation '{self.output_activation}'")


@dataclass(frozen=True)
class DiscriminatorSpec:
    input_channels: int = 3
    patch_levels: int = 2
    base_width: int = 8
    norm_kind: str = "instance"

    def __post_init__(self) -> None:
        if self.patch_levels < 2:
            raise ValidationError("patch discriminator needs patch_levels >= 2")
        if self.norm_kind not in ("instance", "batch"):
            raise ValidationError(f"unknown norm kind '{self.norm_kind}'")


@dataclass(frozen=True)
class SegNetSpec:
    n_classes: int
    base_width: int = 8
    n_down: int = 2

    def __post_init__(self) -> None:
        if self.n_classes < 2 or self.base_width < 4 or self.n_down < 1:
            raise ValidationError("segnet needs n_classes >= 2, base_width >= 4, n_down >= 1")


@dataclass(frozen=True)
class PerceptualExtractorSpec:
    layer_taps: tuple[str, ...] = ("stage1", "stage2")
    weights_source: str = FIXED_RANDOM_SOURCE


# ---------------------------------------------------------------------------
# Shared building blocks
# ---------------------------------------------------------------------------


def _norm(kind: str, channels: int) -> nn.Module:
    if kind == "instance":
        return nn.InstanceNorm2d(channels, affine=False, track_running_stats=False)
    return nn.BatchNorm2d(channels)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int, norm_kind: str):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, kernel_size=3),
            _norm(norm_kind, channels),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, kernel_size=3),
            _norm(norm_kind, channels),
        )

    def forward(self, x):
        return x + self.body(x)


def _check_divisible(x: torch.Tensor, n_down: int, who: str) -> None:
    multiple = 2**n_down
    h, w = int(x.shape[-2]), int(x.shape[-1])
    if h % multiple or w % multiple:
        raise ValidationError(
            f"{who} input {h}x{w} must have spatial dims divisible by {multiple}"
        )


# ---------------------------------------------------------------------------
# Generator: downsampling -> residual -> upsampling, tanh head into [0, 1]
# ---------------------------------------------------------------------------


class Generator(nn.Module):
    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        w = spec.base_width
        layers: list[nn.Module] = [
            nn.ReflectionPad2d(3),
            nn.Conv2d(spec.input_channels, w, kernel_size=7),
            _norm(spec.norm_kind, w),
            nn.ReLU(inplace=True),
        ]
        ch = w
        for _ in range(spec.n_down):
            layers += [
                nn.Conv2d(ch, ch * 2, kernel_size=3, stride=2, padding=1),
                _norm(spec.norm_kind, ch * 2),
                nn.ReLU(inplace=True),
            ]
            ch *= 2
        for _ in range(spec.n_res):
            layers.append(ResidualBlock(ch, spec.norm_kind))
        for _ in range(spec.n_down):
            layers += [
                nn.ConvTranspose2d(ch, ch // 2, kernel_size=3, stride=2, padding=1, output_padding=1),
                _norm(spec.norm_kind, ch // 2),
                nn.ReLU(inplace=True),
            ]
            ch //= 2
        layers += [
            nn.ReflectionPad2d(3),
            nn.Conv2d(ch, spec.input_channels, kernel_size=7),
            nn.Tanh(),
        ]
        self.body = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_divisible(x, self.spec.n_down, "generator")
        return (self.body(x) + 1.0) * 0.5


# ---------------------------------------------------------------------------
# Conditional patch discriminator (condition and candidate concatenated)
# ---------------------------------------------------------------------------


class PatchDiscriminator(nn.Module):
    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        self.spec = spec
        w = spec.base_width
        layers: list[nn.Module] = [
            nn.Conv2d(2 * spec.input_channels, w, kernel_size=4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
        ]
        ch = w
        for _ in range(spec.patch_levels - 1):
            layers += [
                nn.Conv2d(ch, ch * 2, kernel_size=4, stride=2, padding=1),
                _norm(spec.norm_kind, ch * 2),
                nn.LeakyReLU(0.2, inplace=True),
            ]
            ch *= 2
        layers.append(nn.Conv2d(ch, 1, kernel_size=3, stride=1, padding=1))
        self.body = nn.Sequential(*layers)

    def forward(self, condition: torch.Tensor, candidate: torch.Tensor) -> torch.Tensor:
        """Score map of real/fake logits, one per receptive-field patch."""
        if condition.shape != candidate.shape:
            raise ValidationError(
                f"shape mismatch: condition {tuple(condition.shape)}"
                f" vs candidate {tuple(candidate.shape)}"
            )
        return self.body(torch.cat([condition, candidate], dim=1))


def score_map_size(spec: DiscriminatorSpec, h: int, w: int) -> tuple[int, int]:
    """Spatial size of the discriminator score map for an h x w input."""
    def conv(n: int, k: int, s: int, p: int) -> int:
        return (n + 2 * p - k) // s + 1

    for _ in range(spec.patch_levels):
        h, w = conv(h, 4, 2, 1), conv(w, 4, 2, 1)
    return conv(h, 3, 1, 1), conv(w, 3, 1, 1)


def receptive_field(spec: DiscriminatorSpec) -> int:
    """Input pixels covered by one score-map cell (must stay below image size)."""
    rf, jump = 1, 1
    for _ in range(spec.patch_levels):
        rf += 3 * jump
        jump *= 2
    return rf + 2 * jump


# ---------------------------------------------------------------------------
# Segmentation network: symmetric encoder-decoder with skip connections
# ---------------------------------------------------------------------------


def _conv_block(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1),
        nn.InstanceNorm2d(out_ch),
        nn.ReLU(inplace=True),
        nn.Conv2d(out_ch, out_ch, kernel_size=3, padding=1),
        nn.InstanceNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


class SegNet(nn.Module):
    """U-Net style segmenter emitting an (N, n_classes, H, W) score map."""

    def __init__(self, spec: SegNetSpec):
        super().__init__()
        self.spec = spec
        w = spec.base_width
        self.stem = _conv_block(3, w)
        downs, blocks = [], []
        ch = w
        for _ in range(spec.n_down):
            downs.append(nn.Conv2d(ch, ch * 2, kernel_size=3, stride=2, padding=1))
            blocks.append(_conv_block(ch * 2, ch * 2))
            ch *= 2
        self.downs = nn.ModuleList(downs)
        self.down_blocks = nn.ModuleList(blocks)
        ups, ublocks = [], []
        for _ in range(spec.n_down):
            ups.append(
                nn.ConvTranspose2d(ch, ch // 2, kernel_size=3, stride=2, padding=1, output_padding=1)
            )
            ublocks.append(_conv_block(ch, ch // 2))  # after skip concat
            ch //= 2
        self.ups = nn.ModuleList(ups)
        self.up_blocks = nn.ModuleList(ublocks)
        self.head = nn.Conv2d(w, spec.n_classes, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_divisible(x, self.spec.n_down, "segnet")
        feats = [self.stem(x)]
        h = feats[0]
        for down, block in zip(self.downs, self.down_blocks):
            h = block(down(h))
            feats.append(h)
        for i, (up, block) in enumerate(zip(self.ups, self.up_blocks)):
            skip = feats[-(i + 2)]
            h = block(torch.cat([up(h), skip], dim=1))
        return self.head(h)

    def predict_labels(self, x: torch.Tensor) -> torch.Tensor:
        """Argmax class map (N, H, W) without gradients."""
        with torch.no_grad():
            return self.forward(x).argmax(dim=1)


# ---------------------------------------------------------------------------
# Frozen perceptual feature extractor
# ---------------------------------------------------------------------------


class PerceptualExtractor(nn.Module):
    """Frozen feature stack returning one feature map per layer tap.

    Two weight sources exist. ``fixed-random-v1`` is a seeded random conv
    stack (no download, repeatable bit-for-bit); ``vgg16-torchvision`` loads
    the pretrained VGG-16 snapshot and taps the 2nd and 4th pooling stages,
    normalizing inputs with the ImageNet statistics that snapshot expects.
    A missing snapshot raises; there is no silent random fallback.
    """

    def __init__(self, spec: PerceptualExtractorSpec):
        super().__init__()
        self.spec = spec
        if spec.weights_source == FIXED_RANDOM_SOURCE:
            self.stages = self._build_fixed_random(spec)
            mean = torch.zeros(1, 3, 1, 1)
            std = torch.ones(1, 3, 1, 1)
        elif spec.weights_source == VGG16_SOURCE:
            self.stages = self._build_vgg16(spec)
            mean = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
            std = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)
        else:
            raise WeightsUnavailableError(
                f"unknown weights source '{spec.weights_source}';"
                f" expected '{FIXED_RANDOM_SOURCE}' or '{VGG16_SOURCE}'"
            )
        self.register_buffer("input_mean", mean)
        self.register_buffer("input_std", std)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    @staticmethod
    def _build_fixed_random(spec: PerceptualExtractorSpec) -> nn.ModuleList:
        if len(spec.layer_taps) != 2:
            raise ValidationError("fixed-random extractor defines exactly 2 taps")
        gen = torch.Generator().manual_seed(_FIXED_RANDOM_SEED)
        stage1 = nn.Sequential(
            nn.Conv2d(3, 16, kernel_size=3, padding=1),
            nn.ReLU(inplace=True),
            nn.AvgPool2d(2),
        )
        stage2 = nn.Sequential(
            nn.Conv2d(16, 32, kernel_size=3, padding=1),
            nn.ReLU(inplace=True),
            nn.AvgPool2d(2),
        )
        # std 0.4 keeps feature magnitudes O(1) so the perceptual distance
        # carries weight comparable to real pretrained features
        for stage in (stage1, stage2):
            for m in stage.modules():
                if isinstance(m, nn.Conv2d):
                    nn.init.normal_(m.weight, mean=0.0, std=0.4, generator=gen)
                    nn.init.zeros_(m.bias)
        return nn.ModuleList([stage1, stage2])

    @staticmethod
    def _build_vgg16(spec: PerceptualExtractorSpec) -> nn.ModuleList:
        try:
            from torchvision.models import VGG16_Weights, vgg16

            features = vgg16(weights=VGG16_Weights.IMAGENET1K_V1).features
        except Exception as exc:  # download/import failures surface loudly
            raise WeightsUnavailableError(
                f"could not load pretrained VGG-16 snapshot: {exc}"
            ) from exc
        if len(spec.layer_taps) != 2:
            raise ValidationError("vgg16 extractor defines exactly 2 taps")
        # features[0:10] ends at the 2nd pool, features[10:24] at the 4th.
        return nn.ModuleList([features[:10], features[10:24]])

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        h = (x - self.input_mean) / self.input_std
        taps = []
        for stage in self.stages:
            h = stage(h)
            taps.append(h)
        return taps

    def train(self, mode: bool = True) -> "PerceptualExtractor":
        # Extractor stays frozen in eval mode for its whole lifetime.
        return super().train(False)


# ---------------------------------------------------------------------------
# Parameter accounting, checksums, checkpoints
# ---------------------------------------------------------------------------


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def parameter_checksum(module: nn.Module) -> str:
    """SHA-256 over all named parameters and buffers, order-stable."""
    digest = hashlib.sha256()
    state = module.state_dict()
    for name in sorted(state):
        tensor = state[name]
        digest.update(name.encode())
        digest.update(str(tuple(tensor.shape)).encode())
        digest.update(tensor.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


_SPEC_KINDS = {
    "generator": (GeneratorSpec, Generator),
    "discriminator": (DiscriminatorSpec, PatchDiscriminator),
    "segnet": (SegNetSpec, SegNet),
}


def save_checkpoint(path: str | Path, kind: str, module: nn.Module) -> None:
    """Write a single-file archive: spec echo + flat named tensors + checksum."""
    if kind not in _SPEC_KINDS:
        raise CheckpointError(f"unknown checkpoint kind '{kind}'")
    spec = module.spec
    state = module.state_dict()
    arrays = {name: t.detach().cpu().numpy() for name, t in state.items()}
    meta = {
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "spec": asdict(spec),
        "checksum": parameter_checksum(module),
    }
    payload = dict(arrays)
    payload["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path: str | Path) -> tuple[str, nn.Module]:
    """Load an archive written by save_checkpoint; verifies the checksum."""
    try:
        with np.load(path) as data:
            if "__meta__" not in data:
                raise CheckpointError(f"{path}: not a checkpoint archive (no metadata)")
            meta = json.loads(bytes(data["__meta__"]).decode())
            arrays = {k: data[k] for k in data.files if k != "__meta__"}
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint: {exc}") from exc
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {meta.get('version')} != {CHECKPOINT_VERSION}"
        )
    kind = meta["kind"]
    if kind not in _SPEC_KINDS:
        raise CheckpointError(f"{path}: unknown checkpoint kind '{kind}'")
    spec_cls, module_cls = _SPEC_KINDS[kind]
    spec_dict = dict(meta["spec"])
    for key, value in spec_dict.items():
        if isinstance(value, list):
            spec_dict[key] = tuple(value)
    module = module_cls(spec_cls(**spec_dict))
    state = {name: torch.from_numpy(arr.copy()) for name, arr in arrays.items()}
    module.load_state_dict(state)
    if parameter_checksum(module) != meta["checksum"]:
        raise CheckpointError(f"{path}: integrity checksum mismatch")
    return kind, module


# ---------------------------------------------------------------------------
# Size profiles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Profile:
    name: str
    image_size: int
    generator: GeneratorSpec
    discriminator: DiscriminatorSpec
    segnet_base_width: int
    segnet_n_down: int
    evaluator_base_width: int
    extractor: PerceptualExtractorSpec

    def segnet_spec(self, n_classes: int) -> SegNetSpec:
        return SegNetSpec(n_classes=n_classes, base_width=self.segnet_base_width, n_down=self.segnet_n_down)

    def evaluator_spec(self, n_classes: int) -> SegNetSpec:
        return SegNetSpec(
            n_classes=n_classes, base_width=self.evaluator_base_width, n_down=self.segnet_n_down
        )


PROFILES: dict[str, Profile] = {
    "tiny": Profile(
        name="tiny",
        image_size=32,
        generator=GeneratorSpec(base_width=16, n_down=1, n_res=3),
        discriminator=DiscriminatorSpec(patch_levels=2, base_width=8),
        segnet_base_width=8,
        segnet_n_down=2,
        evaluator_base_width=12,
        extractor=PerceptualExtractorSpec(weights_source=FIXED_RANDOM_SOURCE),
    ),
    "paper": Profile(
        name="paper",
        image_size=256,
        generator=GeneratorSpec(base_width=64, n_down=2, n_res=9),
        discriminator=DiscriminatorSpec(patch_levels=3, base_width=64),
        segnet_base_width=32,
        segnet_n_down=4,
        evaluator_base_width=48,
        extractor=PerceptualExtractorSpec(
            layer_taps=("pool2", "pool4"), weights_source=VGG16_SOURCE
        ),
    ),
}
