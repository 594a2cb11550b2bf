"""Texture-shifted dataset variants: watercolor, pencil sketch, style transfer.

Images are (3, H, W) float arrays in [0, 1]. Every generator keeps the image
size, and :func:`shift_dataset` copies geometry files (intrinsics, depth,
poses) byte for byte, so a shifted dataset differs from its source only in
appearance.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import kernels
from .datasets import IMAGE_EXTS, read_image, write_image

log = logging.getLogger(__name__)

SHIFT_KINDS = ("watercolor", "pencil_sketch", "style_transfer")
MANIFEST_NAME = "manifest.jsonl"
LUMA = np.array([0.299, 0.587, 0.114])


# ---------------------------------------------------------------- watercolor


def _domain_transform_smooth(img: np.ndarray, sigma_spatial: float, sigma_range: float, iterations: int) -> np.ndarray:
    """Recursive-filter domain transform (edge-aware smoothing) of an (H, W, C) image."""
    out = np.ascontiguousarray(img, dtype=np.float64).copy()
    ratio = sigma_spatial / sigma_range
    dhdx = np.ones(out.shape[:2])
    dhdy = np.ones(out.shape[:2])
    dhdx[:, 1:] += ratio * np.abs(np.diff(out, axis=1)).sum(-1)
    dhdy[1:, :] += ratio * np.abs(np.diff(out, axis=0)).sum(-1)
    dhdy_t = np.ascontiguousarray(dhdy.T)
    n = iterations
    for i in range(n):
        sigma_h = sigma_spatial * np.sqrt(3.0) * 2.0 ** (n - i - 1) / np.sqrt(4.0**n - 1.0)
        a = np.exp(-np.sqrt(2.0) / sigma_h)
        kernels.recursive_filter_rows(out, np.ascontiguousarray(a**dhdx))
        out_t = np.ascontiguousarray(out.transpose(1, 0, 2))
        kernels.recursive_filter_rows(out_t, np.ascontiguousarray(a**dhdy_t))
        out = np.ascontiguousarray(out_t.transpose(1, 0, 2))
    return out


def watercolor(image: np.ndarray, sigma_spatial: float = 60.0, sigma_range: float = 0.45, iterations: int = 3) -> np.ndarray:
    """Edge-preserving smoothing that flattens texture but keeps color regions."""
    if sigma_spatial <= 0:
        raise ValueError("sigma_spatial must be positive")
    if not 0 < sigma_range < 1:
        raise ValueError("sigma_range must lie in (0, 1)")
    img = np.asarray(image, dtype=np.float64).transpose(1, 2, 0)
    out = _domain_transform_smooth(img, sigma_spatial, sigma_range, iterations)
    return np.clip(out, 0.0, 1.0).transpose(2, 0, 1).astype(np.asarray(image).dtype, copy=False)


# -------------------------------------------------------------- pencil sketch


def grayscale(image: np.ndarray) -> np.ndarray:
    return np.tensordot(LUMA, np.asarray(image, dtype=np.float64), axes=(0, 0))


def color_dodge(base: np.ndarray, blend: np.ndarray) -> np.ndarray:
    """base / (1 - blend), saturating at 1."""
    return np.minimum(1.0, base / np.maximum(1.0 - blend, 1e-6))


def pencil_sketch(image: np.ndarray, blur_sigma: float | None = None, shade: float = 0.05) -> np.ndarray:
    """Gray dodge sketch, darkened by ``shade`` in proportion to the original darkness.

    ``blur_sigma`` defaults to a 24th of the image width. All three output
    channels are equal.
    """
    image = np.asarray(image)
    if blur_sigma is None:
        blur_sigma = image.shape[-1] / 24.0
    g = grayscale(image)
    blurred_inv = gaussian_filter(1.0 - g, sigma=blur_sigma, mode="reflect")
    sketch = np.clip(color_dodge(g, blurred_inv) - shade * (1.0 - g), 0.0, 1.0)
    return np.repeat(sketch[None], 3, axis=0).astype(image.dtype, copy=False)


# ------------------------------------------------------------- style transfer


def radial_frequency(h: int, w: int) -> np.ndarray:
    """|f| in cycles per pixel for an h x w FFT grid (Nyquist = 0.5)."""
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    return np.sqrt(fx**2 + fy**2)


def spectral_swap(content: np.ndarray, style: np.ndarray, cutoff: float = 0.1) -> np.ndarray:
    """Replace the content's Fourier amplitude above ``cutoff`` (cycles/pixel) with the style's.

    Phase is kept from the content, so layout survives while fine-scale
    texture statistics come from the style. A cheap stand-in for optimization
    based style transfer.
    """
    content = np.asarray(content)
    style = np.asarray(style, dtype=np.float64)
    if style.shape != content.shape:
        raise ValueError(f"style shape {style.shape} != content shape {content.shape}")
    c = content.astype(np.float64)
    fc = np.fft.fft2(c, axes=(-2, -1))
    fs = np.fft.fft2(style, axes=(-2, -1))
    high = radial_frequency(*c.shape[-2:]) > cutoff
    amp = np.where(high, np.abs(fs), np.abs(fc))
    out = np.fft.ifft2(amp * np.exp(1j * np.angle(fc)), axes=(-2, -1)).real
    return np.clip(out, 0.0, 1.0).astype(content.dtype, copy=False)


def procedural_style(shape: tuple[int, int, int], seed: int) -> np.ndarray:
    """Seeded colored-noise style image used when no style image is given."""
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(shape)
    noise = gaussian_filter(noise, sigma=(0, 1.0, 1.0))
    noise /= noise.std() + 1e-12
    return np.clip(0.5 + 0.15 * noise, 0.0, 1.0)


def _resize_to(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    if image.shape[-2:] == tuple(size):
        return image
    from PIL import Image

    arr = np.clip(image.transpose(1, 2, 0), 0, 1)
    out = [
        np.asarray(Image.fromarray(arr[..., c].astype(np.float32), mode="F").resize((size[1], size[0]), Image.BICUBIC))
        for c in range(arr.shape[-1])
    ]
    return np.clip(np.stack(out, 0), 0.0, 1.0).astype(np.float64)


def stylize_pairs(
    content_dir: str | os.PathLike,
    out_dir: str | os.PathLike,
    stylized_dir: str | os.PathLike | None = None,
    style_image: str | os.PathLike | np.ndarray | None = None,
    cutoff: float = 0.1,
    seed: int = 0,
) -> dict:
    """Build a style-transferred copy of every image under ``content_dir``.

    Ingestion mode (``stylized_dir`` given) copies externally stylized images
    with matching relative paths; builtin mode applies :func:`spectral_swap`
    against ``style_image`` (or a seeded procedural style). Returns metadata
    describing the mode.
    """
    content_dir, out_dir = Path(content_dir), Path(out_dir)
    names = _image_files(content_dir)
    if stylized_dir is not None:
        stylized_dir = Path(stylized_dir)
        styled = _image_files(stylized_dir)
        missing, extra = sorted(set(names) - set(styled)), sorted(set(styled) - set(names))
        if missing or extra:
            raise FileNotFoundError(f"unmatched stylized images: missing {missing}, unexpected {extra}")
        for name in names:
            dst = out_dir / name
            dst.parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(stylized_dir / name, dst)
        return {"mode": "ingest", "stylized_dir": str(stylized_dir), "approximation": False}
    style = _load_style(style_image)
    for name in names:
        img = read_image(content_dir / name, dtype=np.float64)
        dst = out_dir / name
        dst.parent.mkdir(parents=True, exist_ok=True)
        write_image(dst, spectral_swap(img, _style_for(style, img.shape, seed), cutoff))
    return {"mode": "builtin_spectral_swap", "cutoff": cutoff, "approximation": True}


def _load_style(style_image):
    if style_image is None or isinstance(style_image, np.ndarray):
        return style_image
    return read_image(style_image, dtype=np.float64)


def _style_for(style, shape, seed):
    if style is None:
        return procedural_style(shape, seed)
    return _resize_to(style, shape[-2:])


# ---------------------------------------------------------------- datasets


@dataclass
class ShiftSpec:
    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SHIFT_KINDS:
            raise ValueError(f"unknown shift kind {self.kind!r}; expected one of {SHIFT_KINDS}")
        allowed = {
            "watercolor": {"sigma_spatial", "sigma_range", "iterations"},
            "pencil_sketch": {"blur_sigma", "shade"},
            "style_transfer": {"style_image", "stylized_dir", "cutoff"},
        }[self.kind]
        unknown = set(self.params) - allowed
        if unknown:
            raise ValueError(f"unknown {self.kind} parameters {sorted(unknown)}")
        p = self.params
        if self.kind == "watercolor":
            if p.get("sigma_spatial", 60.0) <= 0 or not 0 < p.get("sigma_range", 0.45) < 1:
                raise ValueError("watercolor needs sigma_spatial > 0 and sigma_range in (0, 1)")
        elif self.kind == "pencil_sketch":
            if p.get("blur_sigma") is not None and p["blur_sigma"] <= 0:
                raise ValueError("blur_sigma must be positive")
            if not 0 <= p.get("shade", 0.05) <= 1:
                raise ValueError("shade must lie in [0, 1]")
        elif not 0 < p.get("cutoff", 0.1) <= 0.5 * np.sqrt(2):
            raise ValueError("cutoff must lie in (0, Nyquist diagonal]")

    def apply(self, image: np.ndarray, style: np.ndarray | None = None) -> np.ndarray:
        p = self.params
        if self.kind == "watercolor":
            return watercolor(image, **p)
        if self.kind == "pencil_sketch":
            return pencil_sketch(image, **p)
        return spectral_swap(image, _style_for(style, image.shape, self.seed), p.get("cutoff", 0.1))


@dataclass
class Manifest:
    spec: ShiftSpec
    entries: list[dict]
    copied: list[str]

    @property
    def failed(self) -> list[dict]:
        return [e for e in self.entries if e["status"] != "ok"]

    def write(self, path: str | os.PathLike) -> None:
        header = {
            "type": "spec",
            "kind": self.spec.kind,
            "params": self.spec.params,
            "seed": self.spec.seed,
            "approximation": self.spec.kind == "style_transfer" and "stylized_dir" not in self.spec.params,
            "copied": self.copied,
        }
        with open(path, "w") as fh:
            fh.write(json.dumps(header, sort_keys=True) + "\n")
            for e in self.entries:
                fh.write(json.dumps({"type": "file", **e}, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path: str | os.PathLike) -> "Manifest":
        lines = [json.loads(ln) for ln in Path(path).read_text().splitlines() if ln.strip()]
        head = lines[0]
        spec = ShiftSpec(head["kind"], head["params"], head["seed"])
        entries = [{k: v for k, v in ln.items() if k != "type"} for ln in lines[1:]]
        return cls(spec, entries, head.get("copied", []))


def sha256_file(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _image_files(root: Path) -> list[str]:
    return sorted(
        p.relative_to(root).as_posix()
        for p in root.rglob("*")
        if p.is_file() and p.suffix.lower() in IMAGE_EXTS
    )


def shift_dataset(root: str | os.PathLike, spec: ShiftSpec, out_root: str | os.PathLike) -> Manifest:
    """Write a texture-shifted mirror of ``root`` into ``out_root`` plus ``manifest.jsonl``.

    Per-file failures are recorded in the manifest with status ``failed``
    rather than aborting the run; check :attr:`Manifest.failed`.
    """
    root, out_root = Path(root), Path(out_root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    out_root.mkdir(parents=True, exist_ok=True)
    images = _image_files(root)
    copied = []
    for p in sorted(root.rglob("*")):
        rel = p.relative_to(root).as_posix()
        if p.is_file() and rel not in images and rel != MANIFEST_NAME:
            dst = out_root / rel
            dst.parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(p, dst)
            copied.append(rel)

    params = spec.params
    stylized_dir = Path(params["stylized_dir"]) if spec.kind == "style_transfer" and params.get("stylized_dir") else None
    if stylized_dir is not None:
        styled = set(_image_files(stylized_dir))
        missing, extra = sorted(set(images) - styled), sorted(styled - set(images))
        if missing or extra:
            raise FileNotFoundError(f"unmatched stylized images: missing {missing}, unexpected {extra}")
    style = _load_style(params.get("style_image")) if spec.kind == "style_transfer" else None

    entries = []
    for rel in images:
        src, dst = root / rel, out_root / rel
        dst.parent.mkdir(parents=True, exist_ok=True)
        entry = {"input": rel, "output": rel, "input_sha256": sha256_file(src)}
        try:
            if stylized_dir is not None:
                shutil.copyfile(stylized_dir / rel, dst)
            else:
                img = read_image(src, dtype=np.float64)
                write_image(dst, spec.apply(img, style))
            entry.update(status="ok", sha256=sha256_file(dst))
        except Exception as exc:  # recorded per file, reported via Manifest.failed
            log.error("shift failed for %s: %s", rel, exc)
            entry.update(status="failed", error=str(exc), sha256=None)
        entries.append(entry)
    manifest = Manifest(spec, entries, copied)
    manifest.write(out_root / MANIFEST_NAME)
    return manifest

