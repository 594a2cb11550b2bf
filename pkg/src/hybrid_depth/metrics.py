"""Depth error and accuracy metrics with capping, masking and median scaling."""
from __future__ import annotations

import csv
import os
from dataclasses import astuple, dataclass, fields
from typing import Sequence

import numpy as np

# Table column order: errors (lower is better) then inlier ratios (higher is better).
CSV_COLUMNS = ("abs_rel", "sq_rel", "rmse", "rmse_log", "a1", "a2", "a3")
DEFAULT_MIN_DEPTH = 1e-3
DEFAULT_MAX_DEPTH = 80.0


@dataclass(frozen=True)
class DepthMetricsRecord:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float
    n_pixels: int = 0

    def as_row(self) -> dict[str, float]:
        return dict(zip(CSV_COLUMNS, astuple(self)[:7]))


def valid_mask(gt: np.ndarray, min_depth: float, max_depth: float, crop: tuple[int, int, int, int] | None = None) -> np.ndarray:
    """gt inside (min_depth, max_depth); ``crop`` is (top, bottom, left, right) in pixels."""
    mask = (gt > min_depth) & (gt < max_depth)
    if crop is not None:
        top, bottom, left, right = crop
        region = np.zeros_like(mask)
        region[top:bottom, left:right] = True
        mask &= region
    return mask


def median_scale(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Scale ``pred`` so its median over ``mask`` matches that of ``gt``."""
    if mask is None:
        mask = gt > 0
    if not mask.any():
        raise ValueError("median_scale: empty mask")
    return pred * (np.median(gt[mask]) / np.median(pred[mask]))


def compute_metrics(
    pred: np.ndarray,
    gt: np.ndarray,
    min_depth: float = DEFAULT_MIN_DEPTH,
    max_depth: float = DEFAULT_MAX_DEPTH,
    median_scaling: bool = False,
    crop: tuple[int, int, int, int] | None = None,
) -> DepthMetricsRecord:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    mask = valid_mask(gt, min_depth, max_depth, crop)
    if not mask.any():
        raise ValueError("compute_metrics: no valid ground-truth pixels after capping")
    p, g = pred[mask], gt[mask]
    if median_scaling:
        p = p * (np.median(g) / np.median(p))
    p = np.clip(p, min_depth, max_depth)

    thresh = np.maximum(p / g, g / p)
    diff = p - g
    return DepthMetricsRecord(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff**2 / g)),
        rmse=float(np.sqrt(np.mean(diff**2))),
        rmse_log=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        delta1=float(np.mean(thresh < 1.25)),
        delta2=float(np.mean(thresh < 1.25**2)),
        delta3=float(np.mean(thresh < 1.25**3)),
        n_pixels=int(mask.sum()),
    )


def aggregate(records: Sequence[DepthMetricsRecord], weighting: str = "image") -> DepthMetricsRecord:
    """Combine per-image records by per-image mean (default) or pixel-weighted mean.

    Pixel weighting pools RMSE terms as root of the weighted mean square.
    """
    if not records:
        raise ValueError("aggregate: no records")
    if weighting not in ("image", "pixel"):
        raise ValueError(f"unknown weighting {weighting!r}")
    table = np.array([astuple(r)[:7] for r in records], dtype=np.float64)
    if weighting == "image":
        w = np.ones(len(records))
    else:
        w = np.array([r.n_pixels for r in records], dtype=np.float64)
        if w.sum() <= 0:
            raise ValueError("pixel weighting needs n_pixels > 0")
    w = w / w.sum()
    mean = w @ table
    if weighting == "pixel":
        mean[2] = np.sqrt(w @ table[:, 2] ** 2)
        mean[3] = np.sqrt(w @ table[:, 3] ** 2)
    names = [f.name for f in fields(DepthMetricsRecord)][:7]
    return DepthMetricsRecord(**dict(zip(names, map(float, mean))), n_pixels=sum(r.n_pixels for r in records))


def write_metrics_csv(path: str | os.PathLike, records: Sequence[DepthMetricsRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for r in records:
            writer.writerow({k: f"{v:.6f}" for k, v in r.as_row().items()})


def read_metrics_csv(path: str | os.PathLike) -> list[dict[str, float]]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]
