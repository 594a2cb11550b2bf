"""Self-supervised objective: SSIM + L1 photometric error and edge-aware smoothness."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .acm_ffd import disp_to_depth
from .geometry import WarpResult, inverse_warp

log = logging.getLogger(__name__)

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
# ties between warped and identity costs go to the warped source
IDENTITY_OFFSET = 1e-5


@dataclass
class LossWeights:
    ssim_w: float = 0.85
    l1_w: float = 0.15
    smooth_w: float = 0.001
    min_reprojection: bool = True
    automask: bool = True

    def __post_init__(self):
        if min(self.ssim_w, self.l1_w, self.smooth_w) < 0:
            raise ValueError("loss weights must be nonnegative")
        if abs(self.ssim_w + self.l1_w - 1.0) > 1e-12:
            raise ValueError(f"ssim_w + l1_w must equal 1, got {self.ssim_w + self.l1_w}")


def ssim(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-pixel SSIM over 3x3 windows with reflection padding; same shape as the inputs."""
    if a.shape != b.shape:
        raise ValueError(f"ssim shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    a = F.pad(a, (1, 1, 1, 1), mode="reflect")
    b = F.pad(b, (1, 1, 1, 1), mode="reflect")
    mu_a = F.avg_pool2d(a, 3, 1)
    mu_b = F.avg_pool2d(b, 3, 1)
    var_a = F.avg_pool2d(a * a, 3, 1) - mu_a**2
    var_b = F.avg_pool2d(b * b, 3, 1) - mu_b**2
    cov = F.avg_pool2d(a * b, 3, 1) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return num / den


def reprojection_cost(target: torch.Tensor, pred: torch.Tensor, weights: LossWeights) -> torch.Tensor:
    """(B, 1, H, W) per-pixel cost ssim_w * (1 - SSIM) / 2 + l1_w * |diff|, channel-averaged."""
    l1 = (target - pred).abs().mean(1, keepdim=True)
    dssim = ((1.0 - ssim(target, pred)) / 2.0).mean(1, keepdim=True)
    return weights.ssim_w * dssim + weights.l1_w * l1


def photometric_loss(
    target: torch.Tensor,
    warp_results: list[WarpResult],
    weights: LossWeights | None = None,
    sources: list[torch.Tensor] | None = None,
) -> torch.Tensor:
    """Masked photometric reprojection loss.

    With ``weights.min_reprojection`` the per-pixel minimum over sources is used,
    otherwise the mean over valid sources. When ``sources`` (unwarped) are given
    and ``weights.automask`` is on, pixels where an unwarped source already
    explains the target better are dropped.
    """
    weights = weights or LossWeights()
    if not warp_results:
        raise ValueError("photometric_loss needs at least one warped source")
    big = torch.finfo(target.dtype).max / 16
    costs, valids = [], []
    for res in warp_results:
        cost = reprojection_cost(target, res.warped, weights)
        valid = res.valid_mask > 0.5
        costs.append(torch.where(valid, cost, torch.full_like(cost, big)))
        valids.append(valid)
    costs = torch.cat(costs, 1)
    valids = torch.cat(valids, 1)
    any_valid = valids.any(1, keepdim=True)

    if weights.min_reprojection:
        per_pixel = costs.min(1, keepdim=True).values
    else:
        masked = torch.where(valids, costs, torch.zeros_like(costs))
        per_pixel = masked.sum(1, keepdim=True) / valids.sum(1, keepdim=True).clamp(min=1)
    mask = any_valid
    if weights.automask and sources is not None:
        ident = torch.cat([reprojection_cost(target, s, weights) for s in sources], 1).min(1, keepdim=True).values
        mask = mask & (per_pixel <= ident + IDENTITY_OFFSET)

    n = mask.sum()
    if n == 0:
        log.warning("photometric_loss: no valid pixels, returning 0")
        return (costs * 0).sum()
    return torch.where(mask, per_pixel, torch.zeros_like(per_pixel)).sum() / n


def smoothness_loss(disp: torch.Tensor, image: torch.Tensor) -> torch.Tensor:
    """Edge-aware first-order smoothness of mean-normalized disparity."""
    if disp.shape[-2:] != image.shape[-2:]:
        raise ValueError(f"disparity {tuple(disp.shape)} and image {tuple(image.shape)} differ in size")
    d = disp / disp.mean(dim=(2, 3), keepdim=True)
    dx = (d[..., :, :-1] - d[..., :, 1:]).abs()
    dy = (d[..., :-1, :] - d[..., 1:, :]).abs()
    ix = (image[..., :, :-1] - image[..., :, 1:]).abs().mean(1, keepdim=True)
    iy = (image[..., :-1, :] - image[..., 1:, :]).abs().mean(1, keepdim=True)
    return (dx * torch.exp(-ix)).mean() + (dy * torch.exp(-iy)).mean()


def total_loss(
    target: torch.Tensor,
    sources: list[torch.Tensor],
    K,
    disparities: list[torch.Tensor],
    poses: list[torch.Tensor],
    weights: LossWeights | None = None,
    min_depth: float = 0.1,
    max_depth: float = 100.0,
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Photometric + smooth_w * smoothness, summed over output scales.

    disparities: per-scale (B, 1, h, w) maps (upsampled to full size here if
    needed); poses: one (B, 6) target->source motion per source.
    """
    weights = weights or LossWeights()
    if len(poses) != len(sources):
        raise ValueError(f"{len(sources)} sources but {len(poses)} poses")
    size = target.shape[-2:]
    photo_total = target.new_zeros(())
    smooth_total = target.new_zeros(())
    idents = sources if weights.automask else None
    for disp in disparities:
        if disp.shape[-2:] != size:
            disp = F.interpolate(disp, size=size, mode="bilinear", align_corners=False)
        depth = disp_to_depth(disp, min_depth, max_depth)
        warps = [inverse_warp(src, depth, pose, K) for src, pose in zip(sources, poses)]
        photo_total = photo_total + photometric_loss(target, warps, weights, idents)
        smooth_total = smooth_total + smoothness_loss(disp, target)
    total = photo_total + weights.smooth_w * smooth_total
    return total, {"photometric": photo_total.detach(), "smoothness": smooth_total.detach(), "total": total.detach()}
