"""Sequence datasets on disk and analytic synthetic scenes.

On-disk layout, one directory per sequence::

    root/
      seq_00/
        intrinsics.txt        # "fx fy cx cy" at the stored image resolution
        000000.png 000001.png ...
        depth/000000.npz ...  # optional, keys: depth (float32, HxW), unit ("m")
        poses.txt             # optional, "index rx ry rz tx ty tz" camera-to-world

Split files are newline-separated relative frame paths (``seq_00/000003.png``).
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np
from PIL import Image

from .geometry import CameraIntrinsics, Pose6DoF, relative_pose

log = logging.getLogger(__name__)

IMAGE_EXTS = (".png", ".jpg", ".jpeg")
INTRINSICS_FILE = "intrinsics.txt"
POSES_FILE = "poses.txt"
DEPTH_DIR = "depth"
FRAME_DIGITS = 6


class DatasetError(RuntimeError):
    pass


@dataclass
class SequenceSample:
    target: np.ndarray  # (3, H, W) in [0, 1]
    sources: list[np.ndarray]
    intrinsics: CameraIntrinsics
    gt_depth: np.ndarray | None = None  # (H, W) meters
    gt_relative_poses: list[Pose6DoF] | None = None  # target -> source, one per source
    name: str = ""

    def __post_init__(self):
        if not self.sources:
            raise ValueError("a sample needs at least one source frame")
        shape = self.target.shape
        for src in self.sources:
            if src.shape != shape:
                raise ValueError(f"source frame shape {src.shape} != target shape {shape}")
        if self.gt_depth is not None and self.gt_depth.shape != shape[1:]:
            raise ValueError(f"gt_depth shape {self.gt_depth.shape} != frame size {shape[1:]}")


# --------------------------------------------------------------------------- io


def frame_name(index: int, ext: str = ".png") -> str:
    return f"{index:0{FRAME_DIGITS}d}{ext}"


def read_image(path: str | os.PathLike, size: tuple[int, int] | None = None, dtype=np.float32) -> np.ndarray:
    """Decode an RGB image to a (3, H, W) array in [0, 1], optionally area-resized to ``size=(H, W)``."""
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if size is not None and (im.height, im.width) != tuple(size):
                im = im.resize((size[1], size[0]), Image.BOX)
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot read image {path}: {exc}") from exc
    return np.ascontiguousarray(arr.transpose(2, 0, 1)).astype(dtype)


def write_image(path: str | os.PathLike, image: np.ndarray) -> None:
    """Write a (3, H, W) [0, 1] array as an 8-bit PNG."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0).transpose(1, 2, 0)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8)).save(path)


def save_depth(path: str | os.PathLike, depth: np.ndarray) -> None:
    with open(path, "wb") as fh:
        np.savez(fh, depth=np.asarray(depth, dtype=np.float32), unit=np.array("m"))


def load_depth(path: str | os.PathLike) -> np.ndarray:
    with np.load(path) as data:
        unit = str(data["unit"]) if "unit" in data else None
        if unit != "m":
            raise DatasetError(f"{path}: depth unit must be 'm', found {unit!r}")
        depth = data["depth"]
    if depth.ndim != 2:
        raise DatasetError(f"{path}: depth must be a single-channel 2-D array, got shape {depth.shape}")
    return depth


def read_intrinsics(seq_dir: Path) -> CameraIntrinsics:
    path = seq_dir / INTRINSICS_FILE
    if not path.is_file():
        raise DatasetError(f"missing intrinsics file {path}")
    values = path.read_text().split()
    if len(values) != 4:
        raise DatasetError(f"{path}: expected 'fx fy cx cy', got {len(values)} values")
    fx, fy, cx, cy = map(float, values)
    frames = _list_frames(seq_dir)
    if not frames:
        raise DatasetError(f"{seq_dir}: no frames to infer image size from")
    with Image.open(frames[min(frames)]) as im:
        width, height = im.size
    return CameraIntrinsics(fx, fy, cx, cy, width, height)


def write_intrinsics(seq_dir: Path, K: CameraIntrinsics) -> None:
    (seq_dir / INTRINSICS_FILE).write_text(f"{K.fx!r} {K.fy!r} {K.cx!r} {K.cy!r}\n")


def read_poses(seq_dir: Path) -> dict[int, Pose6DoF] | None:
    path = seq_dir / POSES_FILE
    if not path.is_file():
        return None
    poses = {}
    for line in path.read_text().splitlines():
        if line.strip():
            vals = line.split()
            poses[int(vals[0])] = Pose6DoF.from_vector([float(v) for v in vals[1:7]])
    return poses


def write_sequence(
    root: str | os.PathLike,
    name: str,
    frames: Sequence[np.ndarray],
    intrinsics: CameraIntrinsics,
    depths: Sequence[np.ndarray] | None = None,
    camera_poses: Sequence[Pose6DoF] | None = None,
) -> Path:
    """Write one sequence in the on-disk layout; returns the sequence directory."""
    seq_dir = Path(root) / name
    seq_dir.mkdir(parents=True, exist_ok=True)
    write_intrinsics(seq_dir, intrinsics)
    for i, frame in enumerate(frames):
        write_image(seq_dir / frame_name(i), frame)
    if depths is not None:
        (seq_dir / DEPTH_DIR).mkdir(exist_ok=True)
        for i, depth in enumerate(depths):
            save_depth(seq_dir / DEPTH_DIR / frame_name(i, ".npz"), depth)
    if camera_poses is not None:
        lines = [
            f"{i} " + " ".join(repr(float(v)) for v in pose.as_vector())
            for i, pose in enumerate(camera_poses)
        ]
        (seq_dir / POSES_FILE).write_text("\n".join(lines) + "\n")
    return seq_dir


def _list_frames(seq_dir: Path) -> dict[int, Path]:
    frames = {}
    for p in seq_dir.iterdir():
        if p.suffix.lower() in IMAGE_EXTS and p.stem.isdigit():
            frames[int(p.stem)] = p
    return frames


def list_images(root: str | os.PathLike) -> list[str]:
    """All frame paths below ``root`` relative to it, sorted."""
    root = Path(root)
    out = []
    for seq_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for idx, path in sorted(_list_frames(seq_dir).items()):
            out.append(path.relative_to(root).as_posix())
    return out


def read_split(split: str | os.PathLike | Sequence[str] | None, root: Path) -> list[str]:
    if split is None:
        return list_images(root)
    if isinstance(split, (str, os.PathLike)):
        lines = Path(split).read_text().splitlines()
        return [ln.strip() for ln in lines if ln.strip()]
    return list(split)


# ---------------------------------------------------------------------- loading


class SequenceDataset:
    """Indexed view over (target, neighbors) samples of an on-disk dataset.

    Entries whose neighbors at ``frame_stride`` are missing are dropped with a
    warning when the index is built; intrinsics problems raise immediately.
    """

    def __init__(
        self,
        root: str | os.PathLike,
        split=None,
        frame_stride: int = 1,
        image_size: tuple[int, int] | None = None,
        dtype=np.float32,
    ):
        if frame_stride < 1:
            raise ValueError("frame_stride must be >= 1")
        self.root = Path(root)
        if not self.root.is_dir():
            raise DatasetError(f"dataset root {self.root} does not exist")
        self.frame_stride = frame_stride
        self.image_size = tuple(image_size) if image_size is not None else None
        self.dtype = dtype
        self._seq_cache: dict[str, tuple[CameraIntrinsics, dict[int, Path], dict | None]] = {}
        self.entries: list[tuple[str, int]] = []
        for rel in read_split(split, self.root):
            rel_path = Path(rel)
            seq, stem = rel_path.parent.as_posix(), rel_path.stem
            if not stem.isdigit():
                raise DatasetError(f"frame name {rel!r} is not a zero-padded index")
            _, frames, _ = self._sequence(seq)
            idx = int(stem)
            missing = [j for j in (idx - frame_stride, idx, idx + frame_stride) if j not in frames]
            if missing:
                log.warning("skipping %s: missing frame(s) %s at stride %d", rel, missing, frame_stride)
                continue
            self.entries.append((seq, idx))

    def _sequence(self, seq: str):
        if seq not in self._seq_cache:
            seq_dir = self.root / seq
            K = read_intrinsics(seq_dir)
            self._seq_cache[seq] = (K, _list_frames(seq_dir), read_poses(seq_dir))
        return self._seq_cache[seq]

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[SequenceSample]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> SequenceSample:
        seq, idx = self.entries[i]
        K, frames, poses = self._sequence(seq)
        size = self.image_size
        if size is not None:
            K_out = K.scaled(size[1], size[0])
        else:
            K_out = K
        src_ids = [idx - self.frame_stride, idx + self.frame_stride]
        target = read_image(frames[idx], size, self.dtype)
        sources = [read_image(frames[j], size, self.dtype) for j in src_ids]

        gt_depth = None
        depth_path = self.root / seq / DEPTH_DIR / frame_name(idx, ".npz")
        if depth_path.is_file():
            gt_depth = load_depth(depth_path)
            if gt_depth.shape != (K.height, K.width):
                raise DatasetError(f"{depth_path}: shape {gt_depth.shape} != image {(K.height, K.width)}")
            if size is not None and gt_depth.shape != tuple(size):
                gt_depth = _resize_nearest(gt_depth, size)
        rel_poses = None
        if poses is not None and all(j in poses for j in [idx, *src_ids]):
            rel_poses = [relative_pose(poses[idx], poses[j]) for j in src_ids]
        return SequenceSample(
            target=target,
            sources=sources,
            intrinsics=K_out,
            gt_depth=gt_depth,
            gt_relative_poses=rel_poses,
            name=f"{seq}/{frame_name(idx, '')}",
        )


def _resize_nearest(depth: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    h, w = depth.shape
    rows = np.minimum((np.arange(size[0]) + 0.5) * h / size[0], h - 1).astype(int)
    cols = np.minimum((np.arange(size[1]) + 0.5) * w / size[1], w - 1).astype(int)
    return depth[np.ix_(rows, cols)]


def load_sequence_dataset(root, split=None, frame_stride: int = 1, image_size=None, dtype=np.float32):
    """Open a sequence dataset; see :class:`SequenceDataset`."""
    return SequenceDataset(root, split, frame_stride, image_size, dtype)


class EvalPair(NamedTuple):
    name: str
    pred: np.ndarray
    gt: np.ndarray


def load_eval_pairs(pred_dir: str | os.PathLike, gt_dir: str | os.PathLike) -> list[EvalPair]:
    """Match predicted and ground-truth depth files by name (recursively, ``*.npz``)."""
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    preds = {p.relative_to(pred_dir).as_posix(): p for p in pred_dir.rglob("*.npz")}
    gts = {p.relative_to(gt_dir).as_posix(): p for p in gt_dir.rglob("*.npz")}
    only_pred = sorted(set(preds) - set(gts))
    only_gt = sorted(set(gts) - set(preds))
    if only_pred or only_gt:
        raise DatasetError(
            f"unmatched depth files: only in predictions {only_pred}, only in ground truth {only_gt}"
        )
    pairs = []
    for name in sorted(preds):
        pred, gt = load_depth(preds[name]), load_depth(gts[name])
        if pred.shape != gt.shape:
            raise DatasetError(f"{name}: prediction shape {pred.shape} != ground truth shape {gt.shape}")
        pairs.append(EvalPair(name, pred, gt))
    return pairs


# -------------------------------------------------------------- synthetic scenes


@dataclass
class TextureSpec:
    kind: str = "checker"  # checker | noise | stripes
    frequency: float = 1.0  # cycles per meter

    def __post_init__(self):
        if self.kind not in ("checker", "noise", "stripes"):
            raise ValueError(f"unknown texture kind {self.kind!r}")
        if self.frequency <= 0:
            raise ValueError("texture frequency must be positive")


def translating_path(num_frames: int, step: Sequence[float], start: Sequence[float] = (0.0, 0.0, 0.0)) -> list[Pose6DoF]:
    """Camera-to-world poses moving by ``step`` meters per frame with fixed orientation."""
    start = np.asarray(start, dtype=np.float64)
    step = np.asarray(step, dtype=np.float64)
    return [Pose6DoF(np.zeros(3), start + i * step) for i in range(num_frames)]


@dataclass
class SyntheticSceneConfig:
    layout: str = "textured_plane"  # textured_plane | boxes_on_ground
    texture: TextureSpec = field(default_factory=TextureSpec)
    camera_path: list[Pose6DoF] = field(default_factory=lambda: translating_path(3, (0.0, 0.0, 0.0)))
    image_size: tuple[int, int] = (96, 128)
    depth_range: tuple[float, float] = (1.0, 40.0)
    plane_depth: float = 10.0
    plane_tilt: float = 0.0  # radians, rotation of the plane normal about the x axis
    num_boxes: int = 4
    ground_height: float = 1.5  # meters below the camera (y points down)
    focal_scale: float = 0.8  # fx = fy = focal_scale * width
    supersample: int = 3

    def __post_init__(self):
        if self.layout not in ("textured_plane", "boxes_on_ground"):
            raise ValueError(f"unknown layout {self.layout!r}")
        if not self.depth_range[0] > 0 or self.depth_range[1] <= self.depth_range[0]:
            raise ValueError(f"invalid depth_range {self.depth_range}")
        if len(self.camera_path) < 3:
            raise ValueError("camera_path needs at least 3 poses")
        if self.layout == "textured_plane" and not (
            self.depth_range[0] <= self.plane_depth < self.depth_range[1]
        ):
            raise ValueError("plane_depth must lie inside depth_range")

    def intrinsics(self) -> CameraIntrinsics:
        h, w = self.image_size
        f = self.focal_scale * w
        return CameraIntrinsics(f, f, (w - 1) / 2.0, (h - 1) / 2.0, w, h)


@dataclass
class SyntheticGroundTruth:
    frames: list[np.ndarray]
    depths: list[np.ndarray]
    camera_poses: list[Pose6DoF]  # camera-to-world
    intrinsics: CameraIntrinsics


@dataclass
class _Surface:
    kind: str  # plane | box
    a: np.ndarray  # plane point / box min
    b: np.ndarray  # plane normal / box max
    tint: np.ndarray


class _ValueNoise:
    def __init__(self, rng: np.random.Generator):
        self.perm = rng.permutation(256)
        self.values = rng.random(256)

    def _lattice(self, ix, iy, iz):
        p = self.perm
        return self.values[p[(p[(p[ix % 256] + iy) % 256] + iz) % 256]]

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        base = np.floor(pts)
        frac = pts - base
        s = frac * frac * (3.0 - 2.0 * frac)
        i = base.astype(np.int64)
        out = 0.0
        for dx in (0, 1):
            wx = s[:, 0] if dx else 1.0 - s[:, 0]
            for dy in (0, 1):
                wy = s[:, 1] if dy else 1.0 - s[:, 1]
                for dz in (0, 1):
                    wz = s[:, 2] if dz else 1.0 - s[:, 2]
                    out = out + wx * wy * wz * self._lattice(i[:, 0] + dx, i[:, 1] + dy, i[:, 2] + dz)
        return out


def _texture_value(spec: TextureSpec, pts: np.ndarray, noise: _ValueNoise) -> np.ndarray:
    f = spec.frequency
    if spec.kind == "checker":
        return (np.floor(f * pts).astype(np.int64).sum(-1) % 2).astype(np.float64)
    if spec.kind == "stripes":
        return 0.5 + 0.5 * np.sin(2 * np.pi * f * (pts[:, 0] + 0.6 * pts[:, 1] + 0.8 * pts[:, 2]))
    return 0.65 * noise(f * pts) + 0.35 * noise(2.0 * f * pts + 17.0)


def _build_surfaces(config: SyntheticSceneConfig, rng: np.random.Generator) -> list[_Surface]:
    far = config.depth_range[1]
    tint = lambda: rng.uniform(0.35, 1.0, 3)  # noqa: E731
    surfaces = []
    if config.layout == "textured_plane":
        t = config.plane_tilt
        normal = np.array([0.0, np.sin(t), -np.cos(t)])
        surfaces.append(_Surface("plane", np.array([0.0, 0.0, config.plane_depth]), normal, tint()))
    else:
        surfaces.append(_Surface("plane", np.array([0.0, config.ground_height, 0.0]), np.array([0.0, -1.0, 0.0]), tint()))
        near = max(config.depth_range[0] + 2.0, 4.0)
        for _ in range(config.num_boxes):
            size = rng.uniform([0.8, 0.8, 0.8], [2.0, 2.5, 2.0])
            cz = rng.uniform(near, min(far * 0.6, near + 14.0))
            cx = rng.uniform(-0.5, 0.5) * cz * 0.8
            lo = np.array([cx - size[0] / 2, config.ground_height - size[1], cz - size[2] / 2])
            surfaces.append(_Surface("box", lo, lo + size, tint()))
    # back wall bounds every ray
    surfaces.append(_Surface("plane", np.array([0.0, 0.0, far]), np.array([0.0, 0.0, -1.0]), tint()))
    return surfaces


def _check_camera(surfaces: list[_Surface], pos: np.ndarray, config: SyntheticSceneConfig) -> None:
    for s in surfaces:
        if s.kind == "plane":
            if np.dot(pos - s.a, s.b) <= 0:
                raise ValueError(f"camera at {pos.tolist()} lies behind or on a scene plane")
        elif np.all(pos >= s.a) and np.all(pos <= s.b):
            raise ValueError(f"camera at {pos.tolist()} lies inside a box")


def _intersect(surfaces: list[_Surface], origin: np.ndarray, dirs: np.ndarray):
    n = dirs.shape[0]
    best_t = np.full(n, np.inf)
    best_id = np.full(n, -1)
    shade = np.ones(n)
    with np.errstate(divide="ignore", invalid="ignore"):
        for k, s in enumerate(surfaces):
            if s.kind == "plane":
                denom = dirs @ s.b
                t = ((s.a - origin) @ s.b) / denom
                t = np.where(denom < -1e-12, t, np.inf)
                face_shade = np.full(n, 0.85 + 0.15 * abs(s.b[1]))
            else:
                t1 = (s.a - origin) / dirs
                t2 = (s.b - origin) / dirs
                tmin_axes = np.minimum(t1, t2)
                tmin = np.nanmax(tmin_axes, axis=1)
                tmax = np.nanmin(np.maximum(t1, t2), axis=1)
                hit = (tmax >= tmin) & (tmin > 0)
                t = np.where(hit, tmin, np.inf)
                axis = np.nanargmax(tmin_axes, axis=1)
                face_shade = np.array([0.7, 1.0, 0.85])[axis]
            closer = t < best_t
            best_t = np.where(closer, t, best_t)
            best_id = np.where(closer, k, best_id)
            shade = np.where(closer, face_shade, shade)
    return best_t, best_id, shade


def _render(config, surfaces, noise, pose: Pose6DoF, K: CameraIntrinsics):
    h, w = config.image_size
    rot = pose.matrix()[:3, :3]
    origin = pose.translation
    kinv = np.linalg.inv(K.matrix())
    ss = config.supersample
    offsets = (np.arange(ss) + 0.5) / ss - 0.5
    color = np.zeros((h * w, 3))
    tints = np.stack([s.tint for s in surfaces])
    v, u = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    for oy in offsets:
        for ox in offsets:
            pix = np.stack([u.ravel() + ox, v.ravel() + oy, np.ones(h * w)], 0)
            dirs = (rot @ (kinv @ pix)).T
            t, ids, shade = _intersect(surfaces, origin, dirs)
            pts = origin + t[:, None] * dirs
            val = _texture_value(config.texture, pts, noise)
            color += tints[ids] * (0.3 + 0.7 * val)[:, None] * shade[:, None]
    color /= ss * ss
    # depth from the pixel-center ray; camera-frame ray has unit z so t is the depth
    pix = np.stack([u.ravel(), v.ravel(), np.ones(h * w)], 0)
    dirs = (rot @ (kinv @ pix)).T
    t, _, _ = _intersect(surfaces, origin, dirs)
    image = np.clip(color, 0.0, 1.0).reshape(h, w, 3).transpose(2, 0, 1)
    return np.ascontiguousarray(image), t.reshape(h, w)


def generate_synthetic_scene(config: SyntheticSceneConfig, seed: int = 0, dtype=np.float32):
    """Render every camera of ``config.camera_path``; a pure function of (config, seed).

    Returns ``(samples, ground_truth)`` where each sample uses frames i-1 and i+1
    as sources for target i.
    """
    rng = np.random.default_rng(seed)
    surfaces = _build_surfaces(config, rng)
    noise = _ValueNoise(rng)
    K = config.intrinsics()
    frames, depths = [], []
    for pose in config.camera_path:
        _check_camera(surfaces, pose.translation, config)
        image, depth = _render(config, surfaces, noise, pose, K)
        frames.append(image.astype(dtype))
        depths.append(depth.astype(dtype))
    samples = []
    poses = config.camera_path
    for i in range(1, len(poses) - 1):
        src = [i - 1, i + 1]
        samples.append(
            SequenceSample(
                target=frames[i],
                sources=[frames[j] for j in src],
                intrinsics=K,
                gt_depth=depths[i],
                gt_relative_poses=[relative_pose(poses[i], poses[j]) for j in src],
                name=f"synthetic/{frame_name(i, '')}",
            )
        )
    return samples, SyntheticGroundTruth(frames, depths, list(poses), K)


def write_synthetic_dataset(root, config: SyntheticSceneConfig, seed: int = 0, name: str = "seq_00") -> Path:
    """Render a synthetic scene and store it in the on-disk layout."""
    _, gt = generate_synthetic_scene(config, seed)
    return write_sequence(root, name, gt.frames, gt.intrinsics, gt.depths, gt.camera_poses)


class DepthFrame(NamedTuple):
    name: str  # relative frame path without extension, e.g. "seq_00/000003"
    image: np.ndarray
    gt_depth: np.ndarray | None


def load_depth_frames(root, split=None, image_size=None, dtype=np.float32, require_depth: bool = True) -> list[DepthFrame]:
    """Single frames (no neighbors needed) with ground-truth depth where available.

    Ground truth stays at its stored resolution; metrics are computed there.
    """
    root = Path(root)
    frames = []
    for rel in read_split(split, root):
        rel_path = Path(rel)
        depth_path = root / rel_path.parent / DEPTH_DIR / (rel_path.stem + ".npz")
        gt = load_depth(depth_path) if depth_path.is_file() else None
        if gt is None and require_depth:
            continue
        image = read_image(root / rel_path, image_size, dtype)
        frames.append(DepthFrame(rel_path.with_suffix("").as_posix(), image, gt))
    return frames
