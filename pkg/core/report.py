"""CSV/JSON tables and PNG figures for recovery and reconstruction experiments."""
from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from core.errors import DataError
from core.logger import logger
from core.metrics import MetricRow

IMAGE_METRICS = ("nrmse", "ssim", "psnr")
DEFAULT_SLICE = 19

# metric -> (limit, "min" | "max")
ACCEPTANCE_LIMITS = {
    "share_beats_trilinear": (0.7, "min"),
    "nrmse_over_zero_filled": (0.5, "max"),
    "phantom_nrmse_ratio": (1.5, "max"),
}


def _cell(value):
    if isinstance(value, float):
        return repr(value)
    return value


def _parse(value: str):
    try:
        return int(value)
    except ValueError:
        pass
    try:
        return float(value)
    except ValueError:
        return value


def write_csv(path, rows: list[dict], fieldnames: list[str] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fieldnames is None:
        fieldnames = list(rows[0].keys()) if rows else []
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=fieldnames, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _cell(v) for k, v in row.items()})
    logger.info(f"CSV written | path={path} rows={len(rows)}")
    return path


def read_csv(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"CSV file not found: {path}")
    with open(path, newline="", encoding="utf-8") as f:
        return [{k: _parse(v) for k, v in row.items()} for row in csv.DictReader(f)]


def write_component_csv(path, rows: list[dict]) -> Path:
    return write_csv(path, rows, ["k", "frequency", "snr", "nrmse"])


def write_metrics_csv(path, rows: list[MetricRow]) -> Path:
    return write_csv(path, [{"subject": r.subject, "metric": r.metric, "value": float(r.value)} for r in rows],
                     ["subject", "metric", "value"])


def read_metrics_csv(path) -> list[MetricRow]:
    rows = []
    for row in read_csv(path):
        if not {"subject", "metric", "value"} <= row.keys():
            raise DataError(f"{path}: not a metrics CSV (need subject, metric, value)")
        rows.append(MetricRow(str(row["subject"]), str(row["metric"]), float(row["value"])))
    return rows


def write_loss_curve(path, curve) -> Path:
    return write_csv(path, [
        {"iteration": r.iteration, "train_mse": r.train_mse, "val_mse": r.val_mse, "val_nrmse": r.val_nrmse}
        for r in curve
    ], ["iteration", "train_mse", "val_mse", "val_nrmse"])


def subject_id(method: str, phantom: str) -> str:
    return f"{method}:{phantom}"


def summary_table(rows: list[MetricRow]) -> dict:
    """
    Nest image metrics as {method: {phantom: {metric: value}, "average": {...}}}.

    Subjects are "method:phantom"; rows for other subjects are ignored.
    """
    table: dict = defaultdict(lambda: defaultdict(dict))
    for r in rows:
        if ":" not in r.subject or r.metric not in IMAGE_METRICS:
            continue
        method, phantom = r.subject.split(":", 1)
        table[method][phantom][r.metric] = r.value
    out = {}
    for method in sorted(table):
        phantoms = dict(sorted(table[method].items()))
        average = {}
        for metric in IMAGE_METRICS:
            values = [p[metric] for p in phantoms.values() if metric in p]
            if values:
                average[metric] = float(np.mean(values)) if all(math.isfinite(v) for v in values) else math.inf
        out[method] = {**phantoms, "average": average}
    return out


def write_summary(out_dir, rows: list[MetricRow]) -> tuple[Path, Path]:
    """JSON mirror of the nested table plus a flat CSV with one row per method."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = summary_table(rows)
    json_path = out_dir / "summary.json"
    json_path.write_text(json.dumps(table, indent=2), encoding="utf-8")

    phantoms = sorted({p for method in table.values() for p in method if p != "average"})
    columns = [f"{p}_{m}" for p in phantoms + ["average"] for m in IMAGE_METRICS]
    flat = []
    for method, entries in table.items():
        row = {"method": method}
        for p in phantoms + ["average"]:
            for m in IMAGE_METRICS:
                row[f"{p}_{m}"] = entries.get(p, {}).get(m, math.nan)
        flat.append(row)
    csv_path = write_csv(out_dir / "summary.csv", flat, ["method"] + columns)
    logger.info(f"Table written | methods={len(table)} phantoms={phantoms}")
    return json_path, csv_path


def snr_scatter_png(path, reports: dict[str, list[dict]]) -> Path:
    """SNR (log) against component NRMSE, one series per method."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4), dpi=120)
    for label, rows in reports.items():
        pts = [(r["snr"], r["nrmse"]) for r in rows if r.get("k") != "mean"]
        if not pts:
            continue
        snr, err = np.array(pts, dtype=np.float64).T
        snr = np.where(np.isfinite(snr), snr, np.nan)
        ax.scatter(snr, err, s=6, alpha=0.6, label=label)
    ax.set_xscale("log")
    ax.set_xlabel("SNR")
    ax.set_ylabel("NRMSE")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    logger.info(f"Scatter plot written | path={path} series={list(reports)}")
    return path


def image_slice_png(path, images: dict, z: int = DEFAULT_SLICE) -> Path:
    """Side-by-side z-slices of several concentration images on a shared colour scale."""
    if not images:
        raise DataError("no images to plot")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    first = next(iter(images.values()))
    zi = int(np.clip(z, 0, first.dims[0] - 1))
    vmax = max(float(img.values[zi].max()) for img in images.values()) or 1.0
    fig, axes = plt.subplots(1, len(images), figsize=(3 * len(images), 3), dpi=120, squeeze=False)
    for ax, (label, img) in zip(axes[0], images.items()):
        ax.imshow(img.values[zi], cmap="gray", vmin=0.0, vmax=vmax, origin="lower")
        ax.set_title(label, fontsize=8)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    logger.info(f"Slice panel written | path={path} z={zi} panels={len(images)}")
    return path


def timing_ratio(cs_seconds: float, net_seconds: float) -> dict:
    ratio = cs_seconds / net_seconds if net_seconds > 0 else math.inf
    logger.info(f"Timing | cs={cs_seconds:.3f}s net={net_seconds:.3f}s ratio={ratio:.2f}")
    return {"cs_seconds": float(cs_seconds), "net_seconds": float(net_seconds), "cs_over_net": float(ratio)}


def safe_ratio(num: float, den: float) -> float:
    if den > 0:
        return float(num / den)
    return 1.0 if num == 0 else math.inf


def comparison_rows(reports: dict[str, list[dict]]) -> list[MetricRow]:
    """Share of components where the network beats trilinear, and mean CS over mean zero-filled NRMSE."""

    def per_component(method):
        return np.array([r["nrmse"] for r in reports[method] if r["k"] != "mean"], dtype=np.float64)

    rows = []
    if "smrnet" in reports and "trilinear" in reports:
        net, tri = per_component("smrnet"), per_component("trilinear")
        if net.size == 0 or net.size != tri.size:
            raise DataError(f"cannot compare {net.size} network components with {tri.size} trilinear ones")
        rows.append(MetricRow("smrnet", "share_beats_trilinear", float(np.mean(net < tri))))
    if "cs" in reports and "zero-filled" in reports:
        cs, zf = per_component("cs"), per_component("zero-filled")
        if cs.size:
            rows.append(MetricRow("cs", "nrmse_over_zero_filled", safe_ratio(cs.mean(), zf.mean())))
    for r in rows:
        logger.info(f"Comparison | {r.subject} {r.metric}={r.value:.4f}")
    return rows


def acceptance_summary(rows: list[MetricRow]) -> dict:
    """{metric: {subject: {value, limit, passed}}} for every row that has a limit."""
    out: dict = {}
    for r in rows:
        if r.metric not in ACCEPTANCE_LIMITS:
            continue
        limit, side = ACCEPTANCE_LIMITS[r.metric]
        passed = r.value >= limit if side == "min" else r.value <= limit
        out.setdefault(r.metric, {})[r.subject] = {"value": r.value, "limit": limit, "passed": bool(passed)}
    return out


def write_acceptance(path, rows: list[MetricRow]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    summary = acceptance_summary(rows)
    path.write_text(json.dumps(summary, indent=2, sort_keys=True), encoding="utf-8")
    failed = [f"{m}:{s}" for m, subjects in summary.items() for s, v in subjects.items() if not v["passed"]]
    logger.info(f"Acceptance written | path={path} figures={sum(map(len, summary.values()))} failed={failed}")
    return path
