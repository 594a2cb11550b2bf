"""Attention connection module, feature fusion decoder and disparity head.

Attention inputs are token features with the special token already removed,
laid out channel-first as (B, C, N). Both attention maps come back as
(B, C, N) attention-weighted features.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .networks import EncoderConfig, HybridEncoder, ResidualBlock, init_weights

MAX_DECODER_UPSAMPLINGS = 3
NUM_OUTPUT_SCALES = 4


def position_attention(
    z: torch.Tensor,
    w_q: torch.Tensor,
    b_q: torch.Tensor | None,
    w_k: torch.Tensor,
    b_k: torch.Tensor | None,
    w_v: torch.Tensor,
    b_v: torch.Tensor | None,
) -> torch.Tensor:
    """A^p = softmax(Q K^T) V over spatial positions; Q, K, V are 1x1 convolutions of z.

    z: (B, C, N); w_q, w_k: (C_qk, C); w_v: (C, C). No temperature is applied.
    """
    def proj(w, b):
        out = torch.einsum("oc,bcn->bno", w, z)
        return out if b is None else out + b

    q, k, v = proj(w_q, b_q), proj(w_k, b_k), proj(w_v, b_v)
    attn = torch.softmax(q @ k.transpose(1, 2), dim=-1)  # (B, N, N), rows are queries
    return (attn @ v).transpose(1, 2)


def channel_attention(z: torch.Tensor) -> torch.Tensor:
    """A^c = softmax(Z Z^T) Z with the softmax over the second index of the C x C gram."""
    attn = torch.softmax(z @ z.transpose(1, 2), dim=-1)
    return attn @ z


@dataclass
class FusionParams:
    w_p: torch.Tensor
    w_c: torch.Tensor
    alpha: torch.Tensor  # (C,)
    beta: torch.Tensor
    gamma: torch.Tensor
    conv_weight: torch.Tensor  # (C, C, k, k)
    conv_bias: torch.Tensor | None = None


def channel_gate(x_hat: torch.Tensor, alpha, beta, gamma, eps: float = 1e-5) -> torch.Tensor:
    """1 + tanh(gamma * CN(alpha * ||x_hat||_2 + beta)), one multiplier per (sample, channel)."""
    shape = (1, -1, 1, 1)
    norm = (x_hat.pow(2).sum(dim=(2, 3), keepdim=True) + eps).sqrt()
    s = alpha.reshape(shape) * norm + beta.reshape(shape)
    cn = s / (s.pow(2).mean(dim=1, keepdim=True) + eps).sqrt()
    return 1.0 + torch.tanh(gamma.reshape(shape) * cn)


def ffd_fuse(
    z: torch.Tensor,
    a_p: torch.Tensor,
    a_c: torch.Tensor,
    x_prev: torch.Tensor,
    params: FusionParams,
) -> torch.Tensor:
    """X = X_hat * gate(X_hat), X_hat = Conv(w_p A^p + w_c A^c + Z) + X_prev.

    All four feature inputs are (B, C, h, w) at the stage resolution.
    """
    if not (z.shape == a_p.shape == a_c.shape == x_prev.shape):
        raise ValueError(
            "ffd_fuse shape mismatch: "
            f"z {tuple(z.shape)}, a_p {tuple(a_p.shape)}, a_c {tuple(a_c.shape)}, x_prev {tuple(x_prev.shape)}"
        )
    mixed = params.w_p * a_p + params.w_c * a_c + z
    pad = params.conv_weight.shape[-1] // 2
    x_hat = F.conv2d(mixed, params.conv_weight, params.conv_bias, padding=pad) + x_prev
    return x_hat * channel_gate(x_hat, params.alpha, params.beta, params.gamma)


# ------------------------------------------------------------------- modules


class AttentionConnection(nn.Module):
    """Position and channel attention for one encoder layer."""

    def __init__(self, channels: int):
        super().__init__()
        qk = max(1, channels // 8)
        self.query = nn.Conv2d(channels, qk, 1)
        self.key = nn.Conv2d(channels, qk, 1)
        self.value = nn.Conv2d(channels, channels, 1)

    def forward(self, grid: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        b, c, h, w = grid.shape
        z = grid.reshape(b, c, h * w)
        a_p = position_attention(
            z,
            self.query.weight[:, :, 0, 0], self.query.bias,
            self.key.weight[:, :, 0, 0], self.key.bias,
            self.value.weight[:, :, 0, 0], self.value.bias,
        )
        a_c = channel_attention(z)
        return a_p.reshape(b, c, h, w), a_c.reshape(b, c, h, w)


class FusionStage(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.w_p = nn.Parameter(torch.zeros(()))
        self.w_c = nn.Parameter(torch.zeros(()))
        self.alpha = nn.Parameter(torch.ones(channels))
        self.beta = nn.Parameter(torch.zeros(channels))
        self.gamma = nn.Parameter(torch.zeros(channels))

    def params(self) -> FusionParams:
        return FusionParams(self.w_p, self.w_c, self.alpha, self.beta, self.gamma, self.conv.weight, self.conv.bias)

    def forward(self, z, a_p, a_c, x_prev):
        return ffd_fuse(z, a_p, a_c, x_prev, self.params())


def disp_to_depth(disp, min_depth: float, max_depth: float):
    """depth = 1 / (a * disp + b) with disp=1 -> min_depth and disp=0 -> max_depth."""
    if min_depth <= 0:
        raise ValueError(f"min_depth must be positive, got {min_depth}")
    if max_depth <= min_depth:
        raise ValueError(f"max_depth {max_depth} must exceed min_depth {min_depth}")
    min_disp, max_disp = 1.0 / max_depth, 1.0 / min_depth
    return 1.0 / (min_disp + (max_disp - min_disp) * disp)


def depth_to_disp(depth, min_depth: float, max_depth: float):
    """Inverse of :func:`disp_to_depth`."""
    min_disp, max_disp = 1.0 / max_depth, 1.0 / min_depth
    return (1.0 / depth - min_disp) / (max_disp - min_disp)


def predict_disparity(x: torch.Tensor, head: nn.Conv2d, out_size: tuple[int, int]) -> torch.Tensor:
    """Sigmoid disparity in (0, 1), bilinearly upsampled to ``out_size``."""
    disp = torch.sigmoid(head(x))
    if tuple(disp.shape[-2:]) != tuple(out_size):
        disp = F.interpolate(disp, size=out_size, mode="bilinear", align_corners=False)
    return disp


class DepthNet(nn.Module):
    """Encoder + per-layer attention connections + fusion decoder + disparity heads.

    Decoder stage l fuses encoder layer l with the previous decoder output; each
    stage doubles the resolution up to three times. ``forward`` returns the
    disparity maps of the last min(L, 4) stages at input resolution, finest first.
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        c = config.embed_dim
        self.encoder = HybridEncoder(config)
        self.residual_in = ResidualBlock(c)
        self.acm = nn.ModuleList(AttentionConnection(c) for _ in range(config.num_layers))
        self.fusion = nn.ModuleList(FusionStage(c) for _ in range(config.num_layers))
        self.num_scales = min(config.num_layers, NUM_OUTPUT_SCALES)
        self.heads = nn.ModuleList(nn.Conv2d(c, 1, 3, padding=1) for _ in range(self.num_scales))
        for module in (self.residual_in, self.acm, self.fusion, self.heads):
            module.apply(init_weights)

    def decode(self, tokens: list[torch.Tensor]) -> list[torch.Tensor]:
        """Fused decoder features X_{L-1}, ..., X_0 (coarse to fine)."""
        grids = [self.encoder.tokens_to_grid(z) for z in tokens]
        x = self.residual_in(grids[-1])
        outputs = []
        for l, (grid, acm, stage) in enumerate(zip(grids, self.acm, self.fusion)):
            a_p, a_c = acm(grid)
            size = tuple(s * 2 ** min(l, MAX_DECODER_UPSAMPLINGS) for s in grid.shape[-2:])
            if size != tuple(grid.shape[-2:]):
                grid, a_p, a_c = (F.interpolate(t, size=size, mode="bilinear", align_corners=False) for t in (grid, a_p, a_c))
            if size != tuple(x.shape[-2:]):
                x = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
            x = stage(grid, a_p, a_c, x)
            outputs.append(x)
        return outputs

    def forward(self, image: torch.Tensor) -> list[torch.Tensor]:
        _, tokens = self.encoder(image)
        feats = self.decode(tokens)[::-1][: self.num_scales]
        size = tuple(image.shape[-2:])
        return [predict_disparity(x, head, size) for x, head in zip(feats, self.heads)]
