"""Rigid-body poses, camera intrinsics and differentiable inverse warping.

Conventions: camera frame is x right, y down, z forward. A pose stored as a
6-vector is ``[rx, ry, rz, tx, ty, tz]`` (axis-angle radians, meters). The pose
passed to :func:`inverse_warp` maps points from the target camera frame into the
source camera frame.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from scipy.spatial.transform import Rotation


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]], dtype=np.float64
        )

    def scaled(self, width: int, height: int) -> "CameraIntrinsics":
        """Intrinsics for the same camera after resizing the image to ``width`` x ``height``.

        Uses the pixel-center convention, so ``cx`` maps as ``(cx + 0.5) * s - 0.5``.
        """
        sx = width / self.width
        sy = height / self.height
        return CameraIntrinsics(
            fx=self.fx * sx,
            fy=self.fy * sy,
            cx=(self.cx + 0.5) * sx - 0.5,
            cy=(self.cy + 0.5) * sy - 0.5,
            width=width,
            height=height,
        )


@dataclass
class Pose6DoF:
    rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.isfinite(self.rotation).all() and np.isfinite(self.translation).all()):
            raise ValueError("pose must be finite")

    @classmethod
    def from_vector(cls, vec) -> "Pose6DoF":
        vec = np.asarray(vec, dtype=np.float64).reshape(6)
        return cls(vec[:3], vec[3:])

    @classmethod
    def from_matrix(cls, mat: np.ndarray) -> "Pose6DoF":
        mat = np.asarray(mat, dtype=np.float64)
        return cls(Rotation.from_matrix(mat[:3, :3]).as_rotvec(), mat[:3, 3])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.rotation, self.translation])

    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = Rotation.from_rotvec(self.rotation).as_matrix()
        out[:3, 3] = self.translation
        return out

    def inverse(self) -> "Pose6DoF":
        return Pose6DoF.from_matrix(np.linalg.inv(self.matrix()))

    def compose(self, other: "Pose6DoF") -> "Pose6DoF":
        """``self ∘ other``: apply ``other`` first."""
        return Pose6DoF.from_matrix(self.matrix() @ other.matrix())


def relative_pose(cam_to_world_target: Pose6DoF, cam_to_world_source: Pose6DoF) -> Pose6DoF:
    """Transform taking target-camera coordinates to source-camera coordinates."""
    return cam_to_world_source.inverse().compose(cam_to_world_target)


def _skew(v: torch.Tensor) -> torch.Tensor:
    zero = torch.zeros_like(v[..., 0])
    x, y, z = v.unbind(-1)
    return torch.stack(
        [
            torch.stack([zero, -z, y], -1),
            torch.stack([z, zero, -x], -1),
            torch.stack([-y, x, zero], -1),
        ],
        -2,
    )


def axis_angle_to_matrix(rotvec: torch.Tensor) -> torch.Tensor:
    """Rodrigues formula, (..., 3) -> (..., 3, 3); Taylor branch near zero angle."""
    theta2 = (rotvec * rotvec).sum(-1, keepdim=True).unsqueeze(-1)
    small = theta2 < 1e-8
    safe2 = torch.where(small, torch.ones_like(theta2), theta2)
    theta = safe2.sqrt()
    a = torch.where(small, 1.0 - theta2 / 6.0, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta2 / 24.0, (1.0 - torch.cos(theta)) / safe2)
    k = _skew(rotvec)
    eye = torch.eye(3, dtype=rotvec.dtype, device=rotvec.device).expand_as(k)
    return eye + a * k + b * (k @ k)


def pose_vec_to_matrix(pose: torch.Tensor) -> torch.Tensor:
    """(B, 6) pose vectors -> (B, 4, 4) homogeneous transforms."""
    rot = axis_angle_to_matrix(pose[..., :3])
    trans = pose[..., 3:].unsqueeze(-1)
    top = torch.cat([rot, trans], -1)
    bottom = torch.zeros_like(top[..., :1, :])
    bottom[..., 0, 3] = 1.0
    return torch.cat([top, bottom], -2)


class WarpResult(NamedTuple):
    warped: torch.Tensor
    valid_mask: torch.Tensor


def _as_batched_k(K, batch: int, dtype, device) -> torch.Tensor:
    if isinstance(K, CameraIntrinsics):
        K = K.matrix()
    K = torch.as_tensor(K, dtype=dtype, device=device)
    if K.dim() == 2:
        K = K.unsqueeze(0)
    return K.expand(batch, 3, 3)


def inverse_warp(source: torch.Tensor, depth: torch.Tensor, pose: torch.Tensor, K) -> WarpResult:
    """Synthesize the target view by sampling ``source`` through target depth and pose.

    source: (B, C, H, W); depth: (B, 1, H, W) target depth in meters;
    pose: (B, 6) target->source transform; K: 3x3, (B, 3, 3) or CameraIntrinsics.

    Out-of-bounds samples are border-clamped (keeps gradients finite) and
    flagged 0 in ``valid_mask``.
    """
    if (depth <= 0).any():
        raise ValueError("inverse_warp requires strictly positive depth")
    b, _, h, w = source.shape
    if depth.shape != (b, 1, h, w):
        raise ValueError(f"depth shape {tuple(depth.shape)} does not match source {tuple(source.shape)}")
    dtype, device = source.dtype, source.device
    K = _as_batched_k(K, b, dtype, device)
    if pose.dim() == 1:
        pose = pose.unsqueeze(0).expand(b, 6)

    v, u = torch.meshgrid(
        torch.arange(h, dtype=dtype, device=device),
        torch.arange(w, dtype=dtype, device=device),
        indexing="ij",
    )
    pix = torch.stack([u, v, torch.ones_like(u)], 0).reshape(1, 3, -1)
    rays = torch.linalg.inv(K) @ pix
    points = rays * depth.reshape(b, 1, -1)

    transform = pose_vec_to_matrix(pose)
    points = transform[:, :3, :3] @ points + transform[:, :3, 3:]
    proj = K @ points
    z = proj[:, 2:3]
    in_front = z > 1e-6
    z = z.clamp(min=1e-6)
    uv = proj[:, :2] / z
    px, py = uv[:, 0].reshape(b, h, w), uv[:, 1].reshape(b, h, w)

    slack = 1e-4
    valid = (
        (px >= -slack) & (px <= w - 1 + slack) & (py >= -slack) & (py <= h - 1 + slack)
        & in_front.reshape(b, h, w)
    )
    grid = torch.stack([2.0 * px / (w - 1) - 1.0, 2.0 * py / (h - 1) - 1.0], -1)
    warped = F.grid_sample(source, grid, mode="bilinear", padding_mode="border", align_corners=True)
    return WarpResult(warped, valid.unsqueeze(1).to(dtype))
