"""Dataset manifests and flat key=value config files.

Manifests are the single source of dataset truth: no operation reads an
image file that is not listed in one. The on-disk format is line-oriented
text, one record per line with tab-separated fields

    clean  depth  hazy  labels  instances  params

("-" marks an absent field), preceded by a single "#" header carrying
name/split/version/hash. Paths are relative to the manifest's directory.
The content hash is a SHA-256 over the bytes of every listed file in record
order, so it changes iff any listed file's bytes change.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .haze import HazeParams
from .pngio import read_depth, read_image, read_instances, read_labels

MANIFEST_VERSION = 1
SPLITS = ("train", "val", "test", "segnet-train")


def format_params(params: HazeParams) -> str:
    a = params.airlight
    return f"beta={params.beta!r};airlight={a[0]!r},{a[1]!r},{a[2]!r}"


def parse_params(text: str) -> HazeParams:
    try:
        fields_ = dict(part.split("=", 1) for part in text.split(";"))
        beta = float(fields_["beta"])
        airlight = tuple(float(v) for v in fields_["airlight"].split(","))
    except (KeyError, ValueError) as exc:
        raise ValidationError(f"malformed haze params '{text}': {exc}") from exc
    return HazeParams(beta=beta, airlight=airlight)  # type: ignore[arg-type]


@dataclass(frozen=True)
class ManifestRecord:
    clean: str
    depth: str | None = None
    hazy: str | None = None
    labels: str | None = None
    instances: str | None = None
    params: HazeParams | None = None

    def paths(self) -> list[str]:
        return [p for p in (self.clean, self.depth, self.hazy, self.labels, self.instances) if p]


@dataclass
class DatasetManifest:
    name: str
    split: str
    root: Path
    records: list[ManifestRecord]
    content_hash: str = ""

    def __post_init__(self) -> None:
        if self.split not in SPLITS:
            raise ValidationError(f"unknown split '{self.split}', expected one of {SPLITS}")
        self.root = Path(self.root)

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    def clean_identities(self) -> set[str]:
        return {r.clean for r in self.records}

    def compute_hash(self) -> str:
        digest = hashlib.sha256()
        for record in self.records:
            for rel in record.paths():
                digest.update(self.resolve(rel).read_bytes())
        return digest.hexdigest()

    def seal(self) -> "DatasetManifest":
        self.content_hash = self.compute_hash()
        return self


def write_manifest(m: DatasetManifest, path: str | Path) -> Path:
    path = Path(path)
    lines = [
        f"# name={m.name}\tsplit={m.split}\tversion={MANIFEST_VERSION}\thash={m.content_hash}"
    ]
    for r in m.records:
        cells = [
            r.clean,
            r.depth or "-",
            r.hazy or "-",
            r.labels or "-",
            r.instances or "-",
            format_params(r.params) if r.params else "-",
        ]
        lines.append("\t".join(cells))
    path.write_text("\n".join(lines) + "\n")
    return path


def read_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise ValidationError(f"cannot read manifest {path}: {exc}") from exc
    if not lines or not lines[0].startswith("#"):
        raise ValidationError(f"{path}: missing manifest header")
    header = {}
    for cell in lines[0].lstrip("#").strip().split("\t"):
        if "=" not in cell:
            raise ValidationError(f"{path}: malformed header cell '{cell}'")
        k, v = cell.split("=", 1)
        header[k] = v
    for key in ("name", "split", "version", "hash"):
        if key not in header:
            raise ValidationError(f"{path}: header missing '{key}'")
    if int(header["version"]) != MANIFEST_VERSION:
        raise ValidationError(
            f"{path}: manifest version {header['version']} != {MANIFEST_VERSION}"
        )
    records = []
    for i, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split("\t")
        if len(cells) != 6:
            raise ValidationError(f"{path}:{i}: expected 6 tab-separated fields, got {len(cells)}")

        def opt(c: str) -> str | None:
            return None if c == "-" else c

        records.append(
            ManifestRecord(
                clean=cells[0],
                depth=opt(cells[1]),
                hazy=opt(cells[2]),
                labels=opt(cells[3]),
                instances=opt(cells[4]),
                params=parse_params(cells[5]) if cells[5] != "-" else None,
            )
        )
    return DatasetManifest(
        name=header["name"],
        split=header["split"],
        root=path.parent,
        records=records,
        content_hash=header["hash"],
    )


# ---------------------------------------------------------------------------
# Manifest validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    rule: str
    path: str
    detail: str

    def __str__(self) -> str:
        return f"{self.rule}: {self.path} ({self.detail})"


def validate_manifest(
    m: DatasetManifest,
    others: tuple[DatasetManifest, ...] = (),
    n_classes: int | None = None,
    depth_range: tuple[float, float] = (0.0, 10.0),
    check_hash: bool = True,
) -> list[Violation]:
    """File existence, shape agreement, label ranges, split disjointness.

    Returns the list of violations (empty = intact); rule IDs are stable:
    FILE_MISSING, DEPTH_MISSING, SHAPE_MISMATCH, LABEL_RANGE, SPLIT_LEAK,
    HASH_MISMATCH.
    """
    out: list[Violation] = []
    for r in m.records:
        if r.depth is None and (r.hazy is not None or r.params is not None):
            out.append(Violation("DEPTH_MISSING", r.clean, "hazy render listed without depth"))
        missing = [rel for rel in r.paths() if not m.resolve(rel).exists()]
        for rel in missing:
            rule = "DEPTH_MISSING" if rel == r.depth else "FILE_MISSING"
            out.append(Violation(rule, str(m.resolve(rel)), "listed file does not exist"))
        if missing:
            continue
        try:
            shape = read_image(m.resolve(r.clean)).shape[:2]
            for rel, reader in (
                (r.depth, lambda p: read_depth(p, *depth_range)),
                (r.hazy, read_image),
                (r.labels, read_labels),
                (r.instances, read_instances),
            ):
                if rel is None:
                    continue
                other_shape = np.asarray(reader(m.resolve(rel))).shape[:2]
                if other_shape != shape:
                    out.append(
                        Violation("SHAPE_MISMATCH", str(m.resolve(rel)), f"{other_shape} != {shape}")
                    )
            if r.labels is not None and n_classes is not None:
                labels = read_labels(m.resolve(r.labels))
                bad = np.unique(labels[(labels != 255) & (labels >= n_classes)])
                if bad.size:
                    out.append(
                        Violation(
                            "LABEL_RANGE",
                            str(m.resolve(r.labels)),
                            f"labels {bad.tolist()} outside [0, {n_classes})",
                        )
                    )
        except (ValidationError, OSError) as exc:
            out.append(Violation("FILE_MISSING", r.clean, f"unreadable record: {exc}"))
    for other in others:
        overlap = m.clean_identities() & other.clean_identities()
        for rel in sorted(overlap):
            out.append(
                Violation("SPLIT_LEAK", rel, f"appears in both '{m.split}' and '{other.split}'")
            )
    if check_hash and m.content_hash:
        actual = m.compute_hash()
        if actual != m.content_hash:
            out.append(
                Violation("HASH_MISMATCH", str(m.root), f"{actual[:12]}... != {m.content_hash[:12]}...")
            )
    return out


def assert_disjoint(manifests: list[DatasetManifest]) -> None:
    """Hard error on any clean-identity overlap between split manifests."""
    for i, a in enumerate(manifests):
        for b in manifests[i + 1 :]:
            overlap = a.clean_identities() & b.clean_identities()
            if overlap:
                raise ValidationError(
                    f"data leak: splits '{a.split}' and '{b.split}' share {sorted(overlap)[:3]}"
                )


# ---------------------------------------------------------------------------
# Flat key=value configs
# ---------------------------------------------------------------------------


def load_kv_config(path: str | Path, known_keys: set[str]) -> dict[str, str]:
    """Parse a flat key=value config; unknown keys are hard errors."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from exc
    out: dict[str, str] = {}
    for i, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{i}: expected key=value, got '{line}'")
        key, value = line.split("=", 1)
        key = key.strip()
        if key not in known_keys:
            raise ValidationError(f"{path}:{i}: unknown config key '{key}'")
        if key in out:
            raise ValidationError(f"{path}:{i}: duplicate config key '{key}'")
        out[key] = value.strip()
    return out


def write_kv_config(path: str | Path, values: dict[str, object]) -> Path:
    path = Path(path)
    lines = [f"{k}={v}" for k, v in values.items()]
    path.write_text("\n".join(lines) + "\n")
    return path
