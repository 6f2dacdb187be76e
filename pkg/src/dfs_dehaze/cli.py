"""Command-line umbrella: dataset construction, training, evaluation, reports.

Exit codes: 0 success, 1 validation failure (bad inputs, bad usage, manifest
violations), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DehazeError, ValidationError


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # usage errors are validation failures
        raise ValidationError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="dfs-dehaze", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synthesize", help="render hazy images from clean + depth pairs")
    p.add_argument("--clean", required=True, help="directory of clean RGB PNGs")
    p.add_argument("--depth", required=True, help="directory of 16-bit depth PNGs (same stems)")
    p.add_argument("--beta", required=True, type=float, help="attenuation coefficient (1/m)")
    p.add_argument("--airlight", required=True, type=float, help="gray airlight level in [0, 1]")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--depth-min", type=float, default=0.0)
    p.add_argument("--depth-max", type=float, default=10.0)

    p = sub.add_parser("build-benchmark", help="generate the procedural shapes benchmark")
    p.add_argument("--n", required=True, type=int, help="number of main scenes (>= 8)")
    p.add_argument("--seed", required=True, type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--segnet-n", type=int, default=None, help="extra segnet-train scenes (default n // 2)")
    p.add_argument("--force", action="store_true", help="write into a non-empty directory")

    p = sub.add_parser("validate-manifest", help="check manifests for integrity violations")
    p.add_argument("manifests", nargs="+", help="manifest files (validated jointly for leaks)")
    p.add_argument("--n-classes", type=int, default=None)
    p.add_argument("--skip-hash", action="store_true", help="skip content hash verification")

    for name, extra in (
        ("train-segnet", "pretrain the segmentation network on clean images"),
        ("train-dehaze", "train the dehazing generator (add --dfs for the segmentation loss)"),
        ("grid-search", "sweep lambda candidates and report validation scores"),
        ("five-run", "train both arms under five derived seeds and aggregate test metrics"),
    ):
        p = sub.add_parser(name, help=extra)
        p.add_argument("--config", required=True, help="flat key=value experiment config")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--profile", choices=("tiny", "paper"), default=None)
        if name == "train-segnet":
            p.add_argument("--role", choices=("train", "evaluator"), default="train")
        if name == "train-dehaze":
            p.add_argument("--dfs", action="store_true", help="enable the segmentation loss term")
        if name == "grid-search":
            p.add_argument(
                "--which",
                default="lambda3",
                help="comma-separated lambdas to sweep (default lambda3)",
            )

    p = sub.add_parser("evaluate", help="metrics for prediction directories against ground truth")
    p.add_argument("--pred", required=True, help="predictions directory (or parent of arm subdirs)")
    p.add_argument("--gt", required=True, help="ground-truth directory")
    p.add_argument("--instances", default=None, help="instance map directory (enables iIoU)")
    p.add_argument("--report", required=True, help="output CSV path")
    p.add_argument("--kind", choices=("images", "labels"), default="images")
    p.add_argument("--arm", default="dehaze", help="arm name when --pred has no arm subdirs")

    p = sub.add_parser("report", help="emit result tables and plots from five-run outputs")
    p.add_argument("--five-run", required=True, nargs="+", help="five_run_metrics.csv files")
    p.add_argument("--out", required=True)
    p.add_argument("--loss-logs", nargs="*", default=(), help="loss_log.csv files to plot")

    return parser


# ---------------------------------------------------------------------------
# Command implementations
# ---------------------------------------------------------------------------


def _cmd_synthesize(args) -> int:
    from .haze import HazeParams, depth_to_transmission, synthesize_haze
    from .manifest import DatasetManifest, ManifestRecord, write_kv_config, write_manifest
    from .pngio import read_depth, read_image, write_image

    clean_dir, depth_dir, out_dir = Path(args.clean), Path(args.depth), Path(args.out)
    params = HazeParams.gray(args.beta, args.airlight)
    stems = sorted(p.name for p in clean_dir.glob("*.png"))
    if not stems:
        raise ValidationError(f"no PNG files in {clean_dir}")
    (out_dir / "hazy").mkdir(parents=True, exist_ok=True)
    records = []
    for stem in stems:
        depth_path = depth_dir / stem
        if not depth_path.exists():
            raise ValidationError(f"no depth map for {stem} in {depth_dir}")
        clean = read_image(clean_dir / stem)
        depth = read_depth(depth_path, args.depth_min, args.depth_max)
        if depth.shape != clean.shape[:2]:
            raise ValidationError(f"{stem}: depth {depth.shape} != image {clean.shape[:2]}")
        hazy = synthesize_haze(clean, depth_to_transmission(depth, params), params)
        write_image(out_dir / "hazy" / stem, hazy)
        records.append(
            ManifestRecord(
                clean=str((clean_dir / stem).resolve()),
                depth=str(depth_path.resolve()),
                hazy=f"hazy/{stem}",
                params=params,
            )
        )
    manifest = DatasetManifest(
        name=f"synthesized-{out_dir.name}", split="test", root=out_dir, records=records
    ).seal()
    write_manifest(manifest, out_dir / "synthesized.manifest")
    write_kv_config(
        out_dir / "synthesized.meta",
        {
            "beta": args.beta,
            "airlight": args.airlight,
            "depth_min": args.depth_min,
            "depth_max": args.depth_max,
            "n_records": len(records),
        },
    )
    print(f"wrote {len(records)} hazy images and manifest under {out_dir}")
    return 0


def _cmd_build_benchmark(args) -> int:
    from .synthetic import build_synthetic_benchmark

    manifests = build_synthetic_benchmark(
        args.out, n=args.n, seed=args.seed, size=args.size, segnet_n=args.segnet_n, force=args.force
    )
    for split, m in manifests.items():
        print(f"{split}: {len(m.records)} scenes ({m.content_hash[:12]}...)")
    return 0


def _cmd_validate_manifest(args) -> int:
    from .manifest import read_manifest, validate_manifest

    manifests = [read_manifest(p) for p in args.manifests]
    all_violations = []
    for i, m in enumerate(manifests):
        others = tuple(manifests[:i] + manifests[i + 1 :])
        violations = validate_manifest(
            m, others=others, n_classes=args.n_classes, check_hash=not args.skip_hash
        )
        for v in violations:
            print(f"{m.split}: {v}")
        all_violations.extend(violations)
    if all_violations:
        print(f"{len(all_violations)} violation(s)")
        return 1
    print("all manifests intact")
    return 0


def _load_segnet(path: Path):
    from .models import load_checkpoint

    kind, module = load_checkpoint(path)
    if kind != "segnet":
        raise ValidationError(f"{path} is a '{kind}' checkpoint, expected segnet")
    return module


def _cmd_train_segnet(args) -> int:
    import dataclasses

    from .config import load_experiment_config
    from .datasets import load_bundle
    from .labels import SYNTHETIC_SCHEMA
    from .models import PROFILES
    from .training import train_segnet

    exp = load_experiment_config(args.config, "segnet", args.seed, args.profile)
    cfg = exp.train
    profile = PROFILES[cfg.profile]
    width = exp.segnet_width
    if args.role == "evaluator":
        width = width or profile.evaluator_base_width
        # held-out evaluator trains under a shifted seed and its own width
        cfg = dataclasses.replace(cfg, seed=cfg.seed + 1000)
    segnet_manifest = exp.manifest("segnet-train")
    dehaze_manifests = tuple(exp.manifest(s) for s in ("train", "val", "test"))
    bundle = load_bundle(segnet_manifest)
    run_dir = exp.out_dir / f"segnet-{args.role}"
    record = train_segnet(
        cfg,
        bundle,
        dehaze_manifests=dehaze_manifests,
        segnet_manifest=segnet_manifest,
        run_dir=run_dir,
        n_classes=SYNTHETIC_SCHEMA.n_classes,
        base_width=width,
    )
    acc = record.epoch_rows[-1]["train_pixel_acc"] if record.epoch_rows else float("nan")
    print(f"segnet ({args.role}) trained: final pixel accuracy {acc:.3f}")
    print(f"checkpoint: {record.checkpoints.get('segnet')}")
    return 0


def _cmd_train_dehaze(args) -> int:
    from .config import load_experiment_config
    from .datasets import load_bundle
    from .training import train_dehazer

    regime = "dfs" if args.dfs else "dehaze"
    exp = load_experiment_config(args.config, regime, args.seed, args.profile)
    segnet = _load_segnet(exp.segnet_ckpt) if exp.segnet_ckpt else None
    if regime == "dfs" and segnet is None:
        raise ValidationError("dfs training requires segnet_ckpt in the config")
    train = load_bundle(exp.manifest("train"))
    val = load_bundle(exp.manifest("val"))
    run_dir = exp.out_dir / f"{regime}-seed{exp.train.seed}"
    record = train_dehazer(exp.train, train, val, segnet=segnet, run_dir=run_dir)
    totals = record.loss_totals()
    print(f"{regime} run finished: {len(totals)} steps, best epoch {record.best_epoch}")
    if totals:
        print(f"loss first/last: {totals[0]:.4f} / {totals[-1]:.4f}")
    print(f"run dir: {run_dir}")
    return 0


def _cmd_grid_search(args) -> int:
    from .config import load_experiment_config
    from .datasets import load_bundle
    from .training import grid_search_lambda

    which = {w.strip() for w in args.which.split(",") if w.strip()}
    regime = "dfs" if "lambda3" in which else "dehaze"
    exp = load_experiment_config(args.config, regime, args.seed, args.profile)
    segnet = _load_segnet(exp.segnet_ckpt) if exp.segnet_ckpt else None
    train = load_bundle(exp.manifest("train"))
    val = load_bundle(exp.manifest("val"))
    result = grid_search_lambda(
        exp.train, which, train, val, segnet=segnet, epochs_override=exp.grid_epochs
    )
    print(f"{'lambda':>10} {'val score':>12}")
    for value, score in result.table:
        print(f"{value:>10.4f} {score:>12.6f}")
    print(f"winner: {result.best_value:.4f}")
    exp.out_dir.mkdir(parents=True, exist_ok=True)
    out = exp.out_dir / "grid_search.csv"
    with open(out, "w") as fh:
        fh.write("lambda,val_score\n")
        for value, score in result.table:
            fh.write(f"{value!r},{score!r}\n")
    print(f"table: {out}")
    return 0


def _cmd_five_run(args) -> int:
    from .config import load_experiment_config
    from .datasets import load_bundle
    from .report import report_tables
    from .training import five_run_protocol, save_five_run

    exp = load_experiment_config(args.config, "dfs", args.seed, args.profile)
    if exp.segnet_ckpt is None or exp.evaluator_ckpt is None:
        raise ValidationError("five-run requires segnet_ckpt and evaluator_ckpt in the config")
    segnet = _load_segnet(exp.segnet_ckpt)
    evaluator = _load_segnet(exp.evaluator_ckpt)
    train = load_bundle(exp.manifest("train"))
    val = load_bundle(exp.manifest("val"))
    test = load_bundle(exp.manifest("test"))
    run_dir = exp.out_dir / "five-run"
    result = five_run_protocol(exp.train, train, val, test, segnet, evaluator, run_dir=run_dir)
    csv_path = save_five_run(result, run_dir / "five_run_metrics.csv")
    paths = report_tables(result, run_dir / "report")
    print(f"five-run metrics: {csv_path}")
    for name, path in paths.items():
        print(f"{name}: {path}")
    return 0


def _cmd_evaluate(args) -> int:
    from . import metrics as M
    from .labels import SYNTHETIC_SCHEMA
    from .pngio import read_image, read_instances, read_labels

    pred_root = Path(args.pred)
    gt_dir = Path(args.gt)
    if not pred_root.is_dir() or not gt_dir.is_dir():
        raise ValidationError("--pred and --gt must be directories")
    arm_dirs = {
        d.name: d for d in sorted(pred_root.iterdir()) if d.is_dir() and d.name in M.ARMS
    }
    if not arm_dirs:
        arm_dirs = {args.arm: pred_root}

    schema = SYNTHETIC_SCHEMA
    rows: list[M.MetricsReport] = []
    for arm, arm_dir in arm_dirs.items():
        names = sorted(p.name for p in arm_dir.glob("*.png"))
        if not names:
            raise ValidationError(f"no PNG files in {arm_dir}")
        psnrs, ssims, mses = [], [], []
        confusion_total = None
        seg_psnrs, seg_ssims = [], []
        for name in names:
            gt_path = gt_dir / name
            if not gt_path.exists():
                raise ValidationError(f"no ground truth for {name} in {gt_dir}")
            if args.kind == "images":
                a = read_image(arm_dir / name)
                b = read_image(gt_path)
                psnrs.append(M.psnr(a, b))
                ssims.append(M.ssim(a, b))
                mses.append(M.mse(a, b))
            else:
                pred = read_labels(arm_dir / name)
                gt = read_labels(gt_path)
                inst = None
                if args.instances:
                    inst_path = Path(args.instances) / name
                    if not inst_path.exists():
                        raise ValidationError(f"no instance map for {name} in {args.instances}")
                    inst = read_instances(inst_path)
                cm = M.confusion(pred, gt, schema.n_classes, instances=inst)
                confusion_total = cm if confusion_total is None else confusion_total + cm
                p, s = M.segmap_psnr_ssim(pred, gt, schema)
                seg_psnrs.append(p)
                seg_ssims.append(s)
        report = M.MetricsReport(arm=arm)
        if args.kind == "images":
            report.psnr = float(np.mean(psnrs))
            report.ssim = float(np.mean(ssims))
            report.mse = float(np.mean(mses))
        else:
            report.seg_psnr = float(np.mean(seg_psnrs))
            report.seg_ssim = float(np.mean(seg_ssims))
            report.iou_cl = M.iou_from_confusion(confusion_total, "classes", schema)
            report.iou_ca = M.iou_from_confusion(confusion_total, "categories", schema)
            if args.instances:
                report.iiou_cl = M.iiou_from_confusion(confusion_total, "classes", schema)
                report.iiou_ca = M.iiou_from_confusion(confusion_total, "categories", schema)
        rows.append(report)

    import csv

    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    with open(report_path, "w", newline="") as fh:
        fh.write(f"# schema_version={M.REPORT_SCHEMA_VERSION}\n")
        writer = csv.writer(fh)
        writer.writerow(M.REPORT_COLUMNS)
        for r in rows:
            writer.writerow([r.as_dict()[c] for c in M.REPORT_COLUMNS])
        writer.writerow(
            [
                "corpus" if c == "arm" else float(np.mean([r.as_dict()[c] for r in rows]))
                for c in M.REPORT_COLUMNS
            ]
        )
    print(f"wrote {len(rows)} arm row(s) + corpus aggregate to {report_path}")
    return 0


def _cmd_report(args) -> int:
    from .report import plot_loss_curves, report_tables
    from .training import RunRecord, load_five_run, load_loss_log

    results = [load_five_run(p) for p in args.five_run]
    hashes = {r.test_manifest_hash for r in results}
    if len(hashes) > 1:
        raise ValidationError("five-run results use different test manifests; refusing to aggregate")
    merged = results[0]
    for extra in results[1:]:
        merged.per_run.extend(extra.per_run)
        merged.seeds.extend(extra.seeds)
    if len(results) > 1:
        from .training import _aggregate

        arms = merged.per_run[0].keys()
        merged.mean, merged.std = {}, {}
        for arm in arms:
            merged.mean[arm], merged.std[arm] = _aggregate([r[arm] for r in merged.per_run], arm)
    paths = report_tables(merged, args.out)
    if args.loss_logs:
        records = []
        for p in args.loss_logs:
            rec = RunRecord(config_echo={"regime": Path(p).parent.name, "seed": ""})
            rec.loss_rows = load_loss_log(p)
            records.append(rec)
        paths["loss_plot"] = plot_loss_curves(records, Path(args.out) / "loss_curves.png")
    for name, path in paths.items():
        print(f"{name}: {path}")
    return 0


_COMMANDS = {
    "synthesize": _cmd_synthesize,
    "build-benchmark": _cmd_build_benchmark,
    "validate-manifest": _cmd_validate_manifest,
    "train-segnet": _cmd_train_segnet,
    "train-dehaze": _cmd_train_dehaze,
    "grid-search": _cmd_grid_search,
    "five-run": _cmd_five_run,
    "evaluate": _cmd_evaluate,
    "report": _cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DehazeError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
