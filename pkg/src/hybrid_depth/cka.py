"""Linear CKA between feature matrices and the texture-shift bias report."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

CKA_TOLERANCE = 1e-8
CSV_FIELDS = ("model", "shift", "batch_index", "m", "cka")


class DegenerateFeaturesError(ValueError):
    pass


def _as_features(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2:
        z = z.reshape(z.shape[0], -1)
    if z.shape[0] < 2:
        raise ValueError(f"need at least 2 samples, got {z.shape[0]}")
    if not np.isfinite(z).all():
        raise ValueError("feature matrix has non-finite entries")
    return z


def gram(z) -> np.ndarray:
    """K = z z^T for an (m, f) feature matrix, in double precision."""
    z = np.asarray(z, dtype=np.float64)
    return z @ z.T


def centering_matrix(m: int) -> np.ndarray:
    return np.eye(m) - np.full((m, m), 1.0 / m)


def hsic(K: np.ndarray, L: np.ndarray) -> float:
    """trace(K H L H) / (m - 1)^2."""
    K = np.asarray(K, dtype=np.float64)
    L = np.asarray(L, dtype=np.float64)
    m = K.shape[0]
    if m < 2:
        raise ValueError("hsic needs m >= 2")
    if K.shape != (m, m) or L.shape != (m, m):
        raise ValueError(f"kernel shapes {K.shape} and {L.shape} must both be ({m}, {m})")
    H = centering_matrix(m)
    return float(np.trace(K @ H @ L @ H) / (m - 1) ** 2)


def cka(z_a, z_b) -> float:
    """Linear CKA of two feature matrices over the same m samples, in [0, 1]."""
    z_a, z_b = _as_features(z_a), _as_features(z_b)
    if z_a.shape[0] != z_b.shape[0]:
        raise ValueError(f"sample counts differ: {z_a.shape[0]} vs {z_b.shape[0]}")
    # H K H = gram(H z): centering first is exact and avoids cancellation; the
    # max-abs rescale (CKA is scale invariant) avoids under- and overflow
    za_c, zb_c = z_a - z_a.mean(0), z_b - z_b.mean(0)
    sa, sb = np.abs(za_c).max(), np.abs(zb_c).max()
    if not (sa > 1e-12 * np.abs(z_a).max() and sb > 1e-12 * np.abs(z_b).max()):
        raise DegenerateFeaturesError("degenerate features: a feature matrix is constant across samples")
    K, L = gram(za_c / sa), gram(zb_c / sb)
    denom = np.sqrt(hsic(K, K) * hsic(L, L))
    if not denom > 0:
        raise DegenerateFeaturesError("degenerate features: zero self-similarity")
    value = hsic(K, L) / denom
    if value < -CKA_TOLERANCE or value > 1 + CKA_TOLERANCE:
        raise ArithmeticError(f"CKA {value!r} outside [0, 1] beyond tolerance")
    return float(min(max(value, 0.0), 1.0))


# ---------------------------------------------------------------- bias report


@dataclass
class CKAReport:
    values: dict[tuple[str, str], list[float]] = field(default_factory=dict)
    batch_sizes: dict[tuple[str, str], list[int]] = field(default_factory=dict)

    def add(self, model: str, shift: str, value: float, m: int) -> None:
        self.values.setdefault((model, shift), []).append(value)
        self.batch_sizes.setdefault((model, shift), []).append(m)

    def quartiles(self) -> dict[tuple[str, str], dict[str, float]]:
        out = {}
        for key, vals in self.values.items():
            q = np.percentile(np.asarray(vals), [0, 25, 50, 75, 100])
            out[key] = dict(zip(("min", "q1", "median", "q3", "max"), map(float, q)))
        return out

    def rows(self) -> list[dict]:
        rows = []
        for (model, shift), vals in self.values.items():
            for i, (v, m) in enumerate(zip(vals, self.batch_sizes[(model, shift)])):
                rows.append({"model": model, "shift": shift, "batch_index": i, "m": m, "cka": v})
        return rows

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
            writer.writeheader()
            for row in self.rows():
                writer.writerow({**row, "cka": repr(row["cka"])})

    @classmethod
    def read_csv(cls, path: str | os.PathLike) -> "CKAReport":
        report = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                report.add(row["model"], row["shift"], float(row["cka"]), int(row["m"]))
        return report

    def plot(self, path: str | os.PathLike) -> None:
        """Box-and-whisker plot, one box per (model, shift)."""
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        keys = sorted(self.values)
        fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(keys)), 3.5))
        ax.boxplot([self.values[k] for k in keys], showfliers=True)
        ax.set_xticks(range(1, len(keys) + 1))
        ax.set_xticklabels([f"{m}\n{s}" for m, s in keys], fontsize=8)
        ax.set_ylabel("CKA")
        ax.set_ylim(-0.02, 1.02)
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)


def batch_slices(n: int, batch_size: int | None) -> list[slice]:
    """Contiguous batches of ``batch_size``; a trailing batch smaller than 2 is merged into its predecessor."""
    if n < 2:
        raise ValueError("need at least 2 images for CKA")
    if batch_size is None or batch_size >= n:
        return [slice(0, n)]
    if batch_size < 2:
        raise ValueError("batch_size must be >= 2")
    starts = list(range(0, n, batch_size))
    slices = [slice(s, min(s + batch_size, n)) for s in starts]
    if slices[-1].stop - slices[-1].start < 2:
        last = slices.pop()
        slices[-1] = slice(slices[-1].start, last.stop)
    return slices


def bias_report(
    feature_fn: Callable[[np.ndarray], np.ndarray],
    original: np.ndarray,
    shifted: Mapping[str, np.ndarray],
    batch_size: int | None = None,
    model_name: str = "model",
    report: CKAReport | None = None,
) -> CKAReport:
    """Per-batch CKA between features of aligned original and shifted image stacks.

    ``original`` and each ``shifted[kind]`` are (n, 3, H, W) arrays with row i
    of every stack showing the same scene.
    """
    report = report if report is not None else CKAReport()
    n = len(original)
    for kind, images in shifted.items():
        if len(images) != n:
            raise ValueError(f"shift {kind!r} has {len(images)} images, original has {n}")
    slices = batch_slices(n, batch_size)
    for sl in slices:
        z_a = feature_fn(original[sl])
        for kind, images in shifted.items():
            z_b = feature_fn(images[sl])
            report.add(model_name, kind, cka(z_a, z_b), sl.stop - sl.start)
    return report



def extract_features(model, images, layer: int = -1, pool: bool = False, batch_size: int = 16) -> np.ndarray:
    """Flattened encoder-layer features, one row per image, as float64.

    ``model`` is a DepthNet or HybridEncoder; ``layer`` is 1-based (or -1 for
    the last layer). The special token is dropped; ``pool`` averages over
    tokens instead of flattening.
    """
    import torch

    encoder = getattr(model, "encoder", model)
    num_layers = encoder.config.num_layers
    if layer == -1:
        layer = num_layers
    if not 1 <= layer <= num_layers:
        raise ValueError(f"layer {layer} out of range 1..{num_layers}")
    was_training = encoder.training
    encoder.eval()
    param = next(encoder.parameters())
    rows = []
    try:
        with torch.no_grad():
            for start in range(0, len(images), batch_size):
                x = torch.as_tensor(np.asarray(images[start : start + batch_size]), dtype=param.dtype)
                _, tokens = encoder(x)
                z = tokens[layer - 1][:, 1:]
                z = z.mean(1) if pool else z.reshape(z.shape[0], -1)
                rows.append(z.double().cpu().numpy())
    finally:
        encoder.train(was_training)
    return np.concatenate(rows, 0)
