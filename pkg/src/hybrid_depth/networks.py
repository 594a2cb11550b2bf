"""Hybrid CNN-Transformer encoder and the 6-DoF pose network.

Images are (B, 3, H, W) tensors. A token sequence is (B, N + 1, C) with the
special token at index 0 followed by N patch tokens in raster order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

STEM_STRIDE = 4
POSE_SCALE = 0.01


@dataclass
class EncoderConfig:
    num_layers: int = 4
    num_heads: int = 4
    head_dim: int = 16
    embed_dim: int = 64
    patch_size: int = 4
    stem_channels: list[int] = field(default_factory=lambda: [16, 32])
    image_size: tuple[int, int] = (96, 128)
    mlp_ratio: float = 4.0

    def __post_init__(self):
        self.image_size = tuple(self.image_size)
        self.stem_channels = list(self.stem_channels)
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if self.num_heads < 1 or self.head_dim < 1:
            raise ValueError("num_heads and head_dim must be >= 1")
        if len(self.stem_channels) != 2:
            raise ValueError("stem_channels lists the widths of the two strided stages")
        step = STEM_STRIDE * self.patch_size
        h, w = self.image_size
        if h % step or w % step:
            raise ValueError(f"image size {self.image_size} must be divisible by {step} (stem stride x patch size)")

    @property
    def grid_size(self) -> tuple[int, int]:
        step = STEM_STRIDE * self.patch_size
        return self.image_size[0] // step, self.image_size[1] // step

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid_size
        return gh * gw


def _trunc_normal_(weight: torch.Tensor, std: float = 0.02) -> None:
    nn.init.trunc_normal_(weight, std=std, a=-2 * std, b=2 * std)


def init_weights(module: nn.Module) -> None:
    """Truncated normal (std 0.02) for linear layers, He init for convolutions."""
    if isinstance(module, (nn.Linear, nn.Conv2d)):
        if isinstance(module, nn.Conv2d):
            nn.init.kaiming_normal_(module.weight, mode="fan_out", nonlinearity="relu")
        else:
            _trunc_normal_(module.weight)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


# ------------------------------------------------------------------ functional


def self_attention_head(z: torch.Tensor, w_q: torch.Tensor, w_k: torch.Tensor, w_v: torch.Tensor) -> torch.Tensor:
    """softmax(Q K^T / sqrt(d)) V with Q = z W_q, K = z W_k, V = z W_v.

    z is (..., T, C); weights are (C, d) for one head or (M, C, d) for M heads,
    in which case the result is (..., M, T, d).
    """
    if w_q.dim() == 3:
        z = z.unsqueeze(-3)
    q, k, v = z @ w_q, z @ w_k, z @ w_v
    scores = q @ k.transpose(-1, -2) / math.sqrt(w_q.shape[-1])
    return torch.softmax(scores, dim=-1) @ v


def patchify(feature: torch.Tensor, patch_size: int) -> torch.Tensor:
    """(B, C, H, W) -> (B, N, C * p * p), patches in raster order, channel-major inside a patch."""
    b, c, h, w = feature.shape
    if h % patch_size or w % patch_size:
        raise ValueError(f"feature map {h}x{w} not divisible by patch size {patch_size}")
    return F.unfold(feature, kernel_size=patch_size, stride=patch_size).transpose(1, 2)


def patchify_and_embed(
    feature: torch.Tensor,
    proj_weight: torch.Tensor,
    proj_bias: torch.Tensor | None,
    special_token: torch.Tensor,
    pos_embed: torch.Tensor | None,
    patch_size: int,
) -> torch.Tensor:
    """Z_0 = [t_s; p_1 E; ...; p_N E] (+ positional embedding).

    proj_weight is (C * p * p, C_embed); special_token is (C_embed,) and
    pos_embed (N + 1, C_embed).
    """
    patches = patchify(feature, patch_size)
    tokens = patches @ proj_weight
    if proj_bias is not None:
        tokens = tokens + proj_bias
    special = special_token.reshape(1, 1, -1).expand(tokens.shape[0], 1, -1)
    z = torch.cat([special, tokens], dim=1)
    if pos_embed is not None:
        z = z + pos_embed
    return z


# ---------------------------------------------------------------------- stem


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return F.gelu(x + self.conv2(F.gelu(self.conv1(x))))


class CNNStem(nn.Module):
    """Reduced residual CNN: two stride-2 stages and a projection stage to C channels."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        c1, c2 = config.stem_channels
        c = config.embed_dim
        self.image_size = config.image_size
        self.stage1 = nn.Sequential(nn.Conv2d(3, c1, 3, stride=2, padding=1), nn.GELU(), ResidualBlock(c1))
        self.stage2 = nn.Sequential(nn.Conv2d(c1, c2, 3, stride=2, padding=1), nn.GELU(), ResidualBlock(c2))
        self.stage3 = nn.Sequential(nn.Conv2d(c2, c, 3, padding=1), nn.GELU(), ResidualBlock(c))

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        if tuple(image.shape[-2:]) != self.image_size or image.shape[-3] != 3:
            raise ValueError(f"expected (B, 3, {self.image_size[0]}, {self.image_size[1]}) image, got {tuple(image.shape)}")
        return self.stage3(self.stage2(self.stage1(image)))


# --------------------------------------------------------------- transformer


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, embed_dim: int, num_heads: int, head_dim: int):
        super().__init__()
        self.w_q = nn.Parameter(torch.empty(num_heads, embed_dim, head_dim))
        self.w_k = nn.Parameter(torch.empty(num_heads, embed_dim, head_dim))
        self.w_v = nn.Parameter(torch.empty(num_heads, embed_dim, head_dim))
        self.out = nn.Linear(num_heads * head_dim, embed_dim)
        for w in (self.w_q, self.w_k, self.w_v):
            _trunc_normal_(w)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        heads = self_attention_head(z, self.w_q, self.w_k, self.w_v)  # (B, M, T, d)
        b, m, t, d = heads.shape
        return self.out(heads.transpose(1, 2).reshape(b, t, m * d))


class TransformerLayer(nn.Module):
    """MSA = Z + MSA(LN(Z)) W; Z' = MLP(LN(MSA)) + MSA."""

    def __init__(self, embed_dim: int, num_heads: int, head_dim: int, mlp_ratio: float = 4.0):
        super().__init__()
        hidden = int(round(embed_dim * mlp_ratio))
        self.norm1 = nn.LayerNorm(embed_dim)
        self.attn = MultiHeadSelfAttention(embed_dim, num_heads, head_dim)
        self.norm2 = nn.LayerNorm(embed_dim)
        self.mlp = nn.Sequential(nn.Linear(embed_dim, hidden), nn.GELU(), nn.Linear(hidden, embed_dim))

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        msa = z + self.attn(self.norm1(z))
        return self.mlp(self.norm2(msa)) + msa


class HybridEncoder(nn.Module):
    """CNN stem, patch embedding and L transformer layers.

    ``forward`` returns the stem feature map and the outputs of every layer.
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        c, p = config.embed_dim, config.patch_size
        self.stem = CNNStem(config)
        self.patch_proj = nn.Linear(c * p * p, c)
        self.special_token = nn.Parameter(torch.zeros(c))
        self.pos_embed = nn.Parameter(torch.zeros(config.num_patches + 1, c))
        self.layers = nn.ModuleList(
            TransformerLayer(c, config.num_heads, config.head_dim, config.mlp_ratio) for _ in range(config.num_layers)
        )
        self.apply(init_weights)
        _trunc_normal_(self.special_token)
        _trunc_normal_(self.pos_embed)

    def embed(self, feature: torch.Tensor) -> torch.Tensor:
        return patchify_and_embed(
            feature,
            self.patch_proj.weight.t(),
            self.patch_proj.bias,
            self.special_token,
            self.pos_embed,
            self.config.patch_size,
        )

    def forward(self, image: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        feature = self.stem(image)
        z = self.embed(feature)
        outputs = []
        for layer in self.layers:
            z = layer(z)
            outputs.append(z)
        return feature, outputs

    def tokens_to_grid(self, z: torch.Tensor) -> torch.Tensor:
        """Strip the special token and fold (B, N + 1, C) to (B, C, h, w)."""
        gh, gw = self.config.grid_size
        return z[:, 1:].transpose(1, 2).reshape(z.shape[0], z.shape[2], gh, gw)


# ------------------------------------------------------------------------ pose


class PoseNet(nn.Module):
    """Seven convolutions over a channel-stacked (target, source) pair.

    Output is a (B, 6) target->source motion ``[axis-angle, translation]``,
    global-average-pooled and scaled by 0.01. The final convolution starts at
    zero so an untrained network predicts identity motion.
    """

    def __init__(self, channels: tuple[int, ...] = (16, 32, 64, 64, 128, 128)):
        super().__init__()
        kernels = (7, 5, 3, 3, 3, 3)
        layers = []
        prev = 6
        for ch, k in zip(channels, kernels):
            layers += [nn.Conv2d(prev, ch, k, stride=2, padding=k // 2), nn.GELU()]
            prev = ch
        self.features = nn.Sequential(*layers)
        self.head = nn.Conv2d(prev, 6, 1)
        self.apply(init_weights)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, target: torch.Tensor, source: torch.Tensor) -> torch.Tensor:
        if target.shape != source.shape:
            raise ValueError(f"pose input shapes differ: {tuple(target.shape)} vs {tuple(source.shape)}")
        x = self.head(self.features(torch.cat([target, source], dim=1)))
        return POSE_SCALE * x.mean(dim=(2, 3))


def estimate_pose(net: PoseNet, target: torch.Tensor, source: torch.Tensor) -> torch.Tensor:
    return net(target, source)
