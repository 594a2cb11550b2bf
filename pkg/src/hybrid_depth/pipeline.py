"""Training loop, evaluation and CKA analysis behind the command-line tool."""
from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .acm_ffd import DepthNet, disp_to_depth
from .checkpoint import build_models, load_checkpoint, save_checkpoint
from .cka import CKAReport, bias_report, extract_features
from .config import RunConfig
from .datasets import SequenceDataset, list_images, load_depth_frames, read_image, save_depth
from .losses import total_loss
from .metrics import CSV_COLUMNS, DepthMetricsRecord, aggregate, compute_metrics, read_metrics_csv, write_metrics_csv
from .texture_shift import MANIFEST_NAME, Manifest

log = logging.getLogger(__name__)

STEP_FIELDS = ("step", "epoch", "total", "photometric", "smoothness")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainingLog:
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)

    def add_step(self, row: dict) -> None:
        if self.steps and row["step"] <= self.steps[-1]["step"]:
            raise ValueError("step counter must increase")
        self.steps.append(row)

    def totals(self) -> np.ndarray:
        return np.array([r["total"] for r in self.steps])


@dataclass
class TrainResult:
    output_dir: Path
    checkpoints: list[Path]
    log: TrainingLog
    depth_net: DepthNet
    pose_net: torch.nn.Module


def make_optimizer(config: RunConfig, depth_net, pose_net) -> torch.optim.Adam:
    opt = config.optimizer
    return torch.optim.Adam(
        [
            {"params": list(depth_net.parameters()), "lr": opt.lr_depth, "name": "depth"},
            {"params": list(pose_net.parameters()), "lr": opt.lr_pose, "name": "pose"},
        ],
        betas=opt.betas,
    )


class _TensorCache:
    """Whole desk-scale dataset held as tensors."""

    def __init__(self, dataset: SequenceDataset):
        if len(dataset) == 0:
            raise ValueError(f"dataset {dataset.root} has no usable samples")
        samples = list(dataset)
        self.targets = torch.from_numpy(np.stack([s.target for s in samples]))
        n_src = len(samples[0].sources)
        self.sources = [torch.from_numpy(np.stack([s.sources[k] for s in samples])) for k in range(n_src)]
        self.K = torch.from_numpy(np.stack([s.intrinsics.matrix() for s in samples])).float()

    def __len__(self):
        return len(self.targets)


def _seed_everything(seed: int) -> torch.Generator:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    return torch.Generator().manual_seed(seed)


def train(config: RunConfig, dataset: SequenceDataset | None = None) -> TrainResult:
    """Self-supervised training; writes per-epoch checkpoints and logs under ``config.output_dir``.

    Stops after ``config.epochs`` epochs or ``config.max_steps`` steps,
    whichever comes first. A non-finite loss aborts the run, leaving the last
    saved checkpoint untouched.
    """
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.save(out / "config.yaml")
    if dataset is None:
        if config.data.train_root is None:
            raise ValueError("config.data.train_root is not set")
        dataset = SequenceDataset(
            config.data.train_root, config.data.split, config.data.frame_stride, config.encoder.image_size
        )
    data = _TensorCache(dataset)
    gen = _seed_everything(config.seed)
    depth_net, pose_net = build_models(config)
    optimizer = make_optimizer(config, depth_net, pose_net)
    depth_net.train()
    pose_net.train()

    log_rows = TrainingLog()
    checkpoints: list[Path] = []
    step = 0
    with open(out / "train_log.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=STEP_FIELDS)
        writer.writeheader()
        for epoch in range(1, config.epochs + 1):
            order = torch.randperm(len(data), generator=gen)
            for start in range(0, len(order), config.batch_size):
                idx = order[start : start + config.batch_size]
                target = data.targets[idx]
                sources = [s[idx] for s in data.sources]
                disps = depth_net(target)
                poses = [pose_net(target, s) for s in sources]
                loss, terms = total_loss(
                    target, sources, data.K[idx], disps, poses, config.loss, config.min_depth, config.max_depth
                )
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(
                        f"non-finite loss at step {step + 1}; last good checkpoint: {checkpoints[-1] if checkpoints else None}"
                    )
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                optimizer.step()
                step += 1
                row = {"step": step, "epoch": epoch, **{k: float(v) for k, v in terms.items()}}
                log_rows.add_step(row)
                writer.writerow(row)
                if config.max_steps is not None and step >= config.max_steps:
                    break
            fh.flush()
            ckpt = out / f"checkpoint_epoch{epoch:03d}.pt"
            save_checkpoint(ckpt, config, depth_net, pose_net, epoch=epoch, step=step)
            checkpoints.append(ckpt)
            if config.data.val_root:
                summary, _ = run_inference_metrics(depth_net, config, config.data.val_root)
                log_rows.epochs.append({"epoch": epoch, **summary.as_row()})
            if config.max_steps is not None and step >= config.max_steps:
                break
    last = out / "last.pt"
    save_checkpoint(last, config, depth_net, pose_net, epoch=epoch, step=step)
    checkpoints.append(last)
    if log_rows.epochs:
        with open(out / "epoch_metrics.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=("epoch", *CSV_COLUMNS))
            writer.writeheader()
            writer.writerows(log_rows.epochs)
    return TrainResult(out, checkpoints, log_rows, depth_net, pose_net)


# ---------------------------------------------------------------- evaluation


def predict_depth(depth_net: DepthNet, images: np.ndarray, min_depth: float, max_depth: float, batch_size: int = 8) -> np.ndarray:
    """Full-resolution depth (meters) from the finest disparity output."""
    depth_net.eval()
    param = next(depth_net.parameters())
    out = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            x = torch.as_tensor(np.asarray(images[start : start + batch_size]), dtype=param.dtype)
            disp = depth_net(x)[0]
            out.append(disp_to_depth(disp, min_depth, max_depth)[:, 0].double().numpy())
    return np.concatenate(out, 0)


def _resize_depth(depth: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if depth.shape == tuple(shape):
        return depth
    t = torch.from_numpy(depth)[None, None]
    return torch.nn.functional.interpolate(t, size=shape, mode="bilinear", align_corners=False)[0, 0].numpy()


def run_inference_metrics(
    depth_net: DepthNet,
    config: RunConfig,
    root,
    median_scaling: bool = True,
    split=None,
    crop=None,
):
    frames = load_depth_frames(root, split, config.encoder.image_size)
    if not frames:
        raise ValueError(f"no frames with ground-truth depth under {root}")
    preds = predict_depth(depth_net, np.stack([f.image for f in frames]), config.min_depth, config.max_depth)
    records, depths = [], []
    for f, pred in zip(frames, preds):
        pred = _resize_depth(pred, f.gt_depth.shape)
        depths.append(pred)
        records.append(
            compute_metrics(pred, f.gt_depth, config.eval_min_depth, config.eval_max_depth, median_scaling, crop)
        )
    return aggregate(records), list(zip(frames, records, depths))


def evaluate(
    checkpoint,
    dataset_root,
    out_dir,
    median_scaling: bool = True,
    dump_depth: bool = True,
    colorize: bool = False,
    split=None,
    config: RunConfig | None = None,
    min_depth: float | None = None,
    max_depth: float | None = None,
    crop=None,
) -> tuple[DepthMetricsRecord, list[DepthMetricsRecord]]:
    """Run a checkpoint over every frame with ground truth and write metrics.

    Writes ``metrics.csv`` (one aggregate row, table column order),
    ``per_image.csv`` and, if requested, ``pred_depth/<seq>/depth/<frame>.npz``
    dumps laid out like the dataset so :func:`~hybrid_depth.datasets.load_eval_pairs`
    can match them against it.
    """
    config, depth_net, _, _ = load_checkpoint(checkpoint, config)
    if min_depth is not None:
        config.eval_min_depth = min_depth
    if max_depth is not None:
        config.eval_max_depth = max_depth
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary, rows = run_inference_metrics(depth_net, config, dataset_root, median_scaling, split, crop)
    write_metrics_csv(out / "metrics.csv", [summary])
    with open(out / "per_image.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("name", *CSV_COLUMNS))
        for frame, rec, _ in rows:
            writer.writerow((frame.name, *(f"{v:.6f}" for v in rec.as_row().values())))
    if dump_depth or colorize:
        for frame, _, depth in rows:
            seq, stem = frame.name.rsplit("/", 1)
            if dump_depth:
                path = out / "pred_depth" / seq / "depth" / f"{stem}.npz"
                path.parent.mkdir(parents=True, exist_ok=True)
                save_depth(path, depth)
            if colorize:
                path = out / "pred_color" / seq / f"{stem}.png"
                path.parent.mkdir(parents=True, exist_ok=True)
                _save_colorized(path, depth)
    return summary, [r for _, r, _ in rows]


def _save_colorized(path: Path, depth: np.ndarray) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    disp = 1.0 / depth
    vmax = np.percentile(disp, 95)
    plt.imsave(path, disp, cmap="magma", vmin=disp.min(), vmax=vmax)


def evaluate_pairs(pred_dir, gt_dir, out_dir, median_scaling: bool = True, min_depth: float = 1e-3, max_depth: float = 80.0):
    """Metrics for precomputed depth files matched by name against ground truth."""
    from .datasets import load_eval_pairs

    pairs = load_eval_pairs(pred_dir, gt_dir)
    records = [compute_metrics(p.pred, p.gt, min_depth, max_depth, median_scaling) for p in pairs]
    summary = aggregate(records)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out / "metrics.csv", [summary])
    return summary, records


# ------------------------------------------------------------------ analysis


def _shift_kind(root: Path) -> str:
    manifest = root / MANIFEST_NAME
    if manifest.is_file():
        return Manifest.read(manifest).spec.kind
    return root.name


def load_aligned_images(original_root, shifted_roots: Sequence, image_size) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Stack the original images and every shifted dataset in the same order.

    Raises if any shifted dataset does not list exactly the original frames.
    """
    original_root = Path(original_root)
    names = list_images(original_root)
    if len(names) < 2:
        raise ValueError(f"need at least 2 images under {original_root}")
    original = np.stack([read_image(original_root / n, image_size) for n in names])
    shifted = {}
    for root in map(Path, shifted_roots):
        other = list_images(root)
        if other != names:
            missing = sorted(set(names) - set(other))
            extra = sorted(set(other) - set(names))
            raise ValueError(f"shifted dataset {root} is misaligned: missing {missing[:5]}, extra {extra[:5]}")
        kind = _shift_kind(root)
        key, k = kind, 2
        while key in shifted:
            key, k = f"{kind}_{k}", k + 1
        shifted[key] = np.stack([read_image(root / n, image_size) for n in names])
    return original, shifted


def analyze(
    checkpoints: Sequence,
    original_root,
    shifted_roots: Sequence,
    out_dir,
    batch_size: int | None = None,
    pool: bool = False,
    eval_csvs: Sequence | None = None,
    model_names: Sequence[str] | None = None,
) -> CKAReport:
    """CKA between last-encoder-layer features on original vs shifted datasets.

    Writes ``cka.csv`` (model, shift, batch_index, m, cka), ``cka_summary.csv``
    with quartiles, ``cka_boxplot.png`` and, when one evaluation CSV per
    checkpoint is given, ``cka_vs_absrel.png``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = CKAReport()
    names = list(model_names) if model_names else [Path(c).stem if Path(c).stem != "last" else Path(c).parent.name for c in checkpoints]
    if len(set(names)) != len(names):
        names = [f"{n}_{i}" for i, n in enumerate(names)]
    for ckpt, name in zip(checkpoints, names):
        config, depth_net, _, _ = load_checkpoint(ckpt)
        original, shifted = load_aligned_images(original_root, shifted_roots, config.encoder.image_size)
        bias_report(lambda x: extract_features(depth_net, x, pool=pool), original, shifted, batch_size, name, report)
    report.write_csv(out / "cka.csv")
    with open(out / "cka_summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("model", "shift", "min", "q1", "median", "q3", "max"))
        for (model, shift), q in sorted(report.quartiles().items()):
            writer.writerow((model, shift, *(repr(v) for v in q.values())))
    report.plot(out / "cka_boxplot.png")
    if eval_csvs:
        if len(eval_csvs) != len(names):
            raise ValueError("pass one evaluation CSV per checkpoint")
        _plot_cka_vs_error(report, dict(zip(names, eval_csvs)), out / "cka_vs_absrel.png")
    return report


def _plot_cka_vs_error(report: CKAReport, eval_csvs: dict, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    q = report.quartiles()
    for model, csv_path in eval_csvs.items():
        abs_rel = read_metrics_csv(csv_path)[0]["abs_rel"]
        meds = [v["median"] for (m, _), v in q.items() if m == model]
        ax.scatter([abs_rel], [float(np.mean(meds))], label=model)
    ax.set_xlabel("Abs Rel")
    ax.set_ylabel("mean of median CKA over shifts")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def moving_average(values: np.ndarray, window: int = 10) -> np.ndarray:
    if len(values) < window:
        raise ValueError(f"need at least {window} values")
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")


def loss_reduction(log: TrainingLog, window: int = 10) -> float:
    """1 - (final moving average / moving average over the first ``window`` steps)."""
    ma = moving_average(log.totals(), window)
    if not math.isfinite(ma[0]) or ma[0] == 0:
        raise ValueError("initial loss average is zero or non-finite")
    return float(1.0 - ma[-1] / ma[0])
