"""Checkpoint container shared by all networks.

A checkpoint is a ``torch.save`` dict holding the architecture arguments, the
named parameter arrays and a snapshot of the training config.
"""

from __future__ import annotations

from pathlib import Path

import torch
import torch.nn as nn

from .inpaintnet import InpaintGenerator, PatchDiscriminator
from .segnet import NestedUNet

FORMAT = "dewrinkle-checkpoint"
VERSION = 1

_KINDS: dict[str, type[nn.Module]] = {
    "seg": NestedUNet,
    "gen": InpaintGenerator,
    "disc": PatchDiscriminator,
}


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path: str | Path, model: nn.Module, kind: str, config: dict | None = None) -> None:
    if kind not in _KINDS:
        raise ValueError(f"unknown checkpoint kind {kind!r}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = {k: v.detach().cpu() for k, v in model.state_dict().items()}
    torch.save(
        {"format": FORMAT, "version": VERSION, "kind": kind, "arch": dict(model.arch), "state_dict": state, "config": config or {}},
        path,
    )


def read_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(blob, dict) or blob.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a {FORMAT} file")
    if blob.get("version") != VERSION:
        raise CheckpointError(f"{path} has format version {blob.get('version')}, expected {VERSION}")
    return blob


def load_checkpoint(path: str | Path, kind: str, device: str | torch.device = "cpu") -> tuple[nn.Module, dict]:
    """Rebuild the network stored at ``path``; returns ``(model, config_snapshot)``."""
    blob = read_checkpoint(path)
    if blob["kind"] != kind:
        raise CheckpointError(f"{path} holds a {blob['kind']!r} network, expected {kind!r}")
    model = _KINDS[kind](**blob["arch"])
    try:
        model.load_state_dict(blob["state_dict"])
    except RuntimeError as exc:
        raise CheckpointError(f"{path} does not match the {kind!r} architecture: {exc}") from exc
    model.to(device).eval()
    return model, blob.get("config", {})
