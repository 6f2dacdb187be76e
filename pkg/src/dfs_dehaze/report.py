"""Result tables and plots.

Emits the two benchmark tables with arms as columns in the fixed order
Hazy / Dehaze / DFS / GT: segmentation-quality PSNR/SSIM (via the training
segnet) and IoU-cl / iIoU-cl / IoU-ca / iIoU-ca (via the held-out
evaluator), plus an image-quality table and loss-curve plots. Report
generation is a pure function of the run records passed in.
"""

from __future__ import annotations

import csv
from pathlib import Path

from .errors import ValidationError
from .metrics import MetricsReport
from .training import FiveRunResult, RunRecord

ARM_ORDER = ("hazy", "dehaze", "dfs", "gt")
ARM_TITLES = {"hazy": "Hazy", "dehaze": "Dehaze", "dfs": "DFS", "gt": "GT"}

TABLE_IMAGE_ROWS = (("PSNR", "psnr"), ("SSIM", "ssim"), ("MSE", "mse"))
TABLE_SEG_ROWS = (("PSNR", "seg_psnr"), ("SSIM", "seg_ssim"))
TABLE_IOU_ROWS = (
    ("IoU-cl", "iou_cl"),
    ("iIoU-cl", "iiou_cl"),
    ("IoU-ca", "iou_ca"),
    ("iIoU-ca", "iiou_ca"),
)


def _write_table(
    path: Path,
    rows: tuple[tuple[str, str], ...],
    reports: dict[str, MetricsReport],
) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["Metrics", *(ARM_TITLES[a] for a in ARM_ORDER)])
        for title, attr in rows:
            writer.writerow(
                [title, *(f"{getattr(reports[a], attr):.6g}" for a in ARM_ORDER)]
            )


def _format_text(reports: dict[str, MetricsReport]) -> str:
    lines = []
    width = 10
    header = "Metrics".ljust(width) + "".join(ARM_TITLES[a].rjust(width) for a in ARM_ORDER)
    for caption, rows in (
        ("Image quality (vs clean ground truth)", TABLE_IMAGE_ROWS),
        ("Segmentation quality, training segnet (rendered maps)", TABLE_SEG_ROWS),
        ("Segmentation accuracy, held-out evaluator", TABLE_IOU_ROWS),
    ):
        lines.append(caption)
        lines.append(header)
        for title, attr in rows:
            cells = "".join(f"{getattr(reports[a], attr):.4f}".rjust(width) for a in ARM_ORDER)
            lines.append(title.ljust(width) + cells)
        lines.append("")
    return "\n".join(lines)


def report_tables(
    result: FiveRunResult,
    out_dir: str | Path,
    loss_runs: list[RunRecord] | None = None,
) -> dict[str, Path]:
    """Write table CSVs, a readable summary, and loss-curve plots.

    Refuses to aggregate runs that were evaluated against different test
    manifests (their metrics are not comparable).
    """
    if not result.per_run:
        raise ValidationError("no runs to report")
    missing = [a for a in ARM_ORDER if a not in result.mean]
    if missing:
        raise ValidationError(f"aggregate is missing arms {missing}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    paths = {
        "table_image": out_dir / "table_image_quality.csv",
        "table_seg": out_dir / "table_seg_quality.csv",
        "table_iou": out_dir / "table_iou.csv",
        "summary": out_dir / "report.txt",
    }
    _write_table(paths["table_image"], TABLE_IMAGE_ROWS, result.mean)
    _write_table(paths["table_seg"], TABLE_SEG_ROWS, result.mean)
    _write_table(paths["table_iou"], TABLE_IOU_ROWS, result.mean)

    text = [
        f"Five-run aggregate over seeds {result.seeds}",
        f"test manifest hash: {result.test_manifest_hash}",
        "",
        _format_text(result.mean),
        "Standard deviations",
        "",
        _format_text(result.std),
    ]
    paths["summary"].write_text("\n".join(text))

    if loss_runs:
        hashes = {r.train_manifest_hash for r in loss_runs}
        if len(hashes) > 1:
            raise ValidationError("runs trained on different manifests; refusing to aggregate")
        paths["loss_plot"] = plot_loss_curves(loss_runs, out_dir / "loss_curves.png")
    return paths


def plot_loss_curves(runs: list[RunRecord], path: str | Path) -> Path:
    if not runs:
        raise ValidationError("no runs to plot")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    for i, run in enumerate(runs):
        steps = [s for s, _ in run.loss_rows]
        totals = [b.total for _, b in run.loss_rows]
        label = f"{run.config_echo.get('regime', 'run')}-{i} (seed {run.config_echo.get('seed')})"
        ax.plot(steps, totals, label=label, linewidth=1.0)
    ax.set_xlabel("generator step")
    ax.set_ylabel("composite loss")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
