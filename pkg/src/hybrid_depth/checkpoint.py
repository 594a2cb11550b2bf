"""Checkpoint container: format version, resolved run config and both networks' parameters."""
from __future__ import annotations

import os

import torch

from .acm_ffd import DepthNet
from .config import RunConfig
from .networks import PoseNet

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def build_models(config: RunConfig) -> tuple[DepthNet, PoseNet]:
    return DepthNet(config.encoder), PoseNet()


def save_checkpoint(path: str | os.PathLike, config: RunConfig, depth_net: DepthNet, pose_net: PoseNet, **meta) -> None:
    payload = {
        "format_version": FORMAT_VERSION,
        "config": config.to_dict(),
        "depth_net": {k: v.detach().clone() for k, v in depth_net.state_dict().items()},
        "pose_net": {k: v.detach().clone() for k, v in pose_net.state_dict().items()},
        "meta": meta,
    }
    tmp = f"{path}.tmp"
    torch.save(payload, tmp)
    os.replace(tmp, path)


def _check_shapes(module: torch.nn.Module, state: dict, prefix: str) -> None:
    expected = module.state_dict()
    for name, tensor in expected.items():
        if name not in state:
            raise CheckpointError(f"checkpoint is missing parameter {prefix}.{name}")
        if tuple(state[name].shape) != tuple(tensor.shape):
            raise CheckpointError(
                f"shape mismatch for {prefix}.{name}: model {tuple(tensor.shape)}, checkpoint {tuple(state[name].shape)}"
            )
    extra = sorted(set(state) - set(expected))
    if extra:
        raise CheckpointError(f"checkpoint has unexpected parameter {prefix}.{extra[0]}")


def load_checkpoint(path: str | os.PathLike, config: RunConfig | None = None):
    """Rebuild (config, depth_net, pose_net, meta) from a checkpoint.

    With ``config`` given, the networks are built from it instead of the stored
    config, and any parameter shape disagreement is reported by name.
    """
    payload = torch.load(path, map_location="cpu", weights_only=True)
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format version {version!r}")
    config = config or RunConfig.from_dict(payload["config"])
    depth_net, pose_net = build_models(config)
    _check_shapes(depth_net, payload["depth_net"], "depth_net")
    _check_shapes(pose_net, payload["pose_net"], "pose_net")
    depth_net.load_state_dict(payload["depth_net"])
    pose_net.load_state_dict(payload["pose_net"])
    return config, depth_net, pose_net, payload.get("meta", {})
