"""Wrinkle segmentation: a nested-skip (Unet++) encoder-decoder, its trainer and IoU."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import AugmentConfig, Sample, SampleBatch, augment, resize_sample
from .losses import dice_loss

logger = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, epoch: int | None = None, step: int | None = None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step


def _conv_bn_relu(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


class ResNeXtBlock(nn.Module):
    """Aggregated-residual bottleneck: 1x1 -> grouped 3x3 (strided) -> 1x1."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1, cardinality: int = 4):
        super().__init__()
        width = max(cardinality, (out_ch // 2) // cardinality * cardinality)
        self.body = nn.Sequential(
            nn.Conv2d(in_ch, width, 1, bias=False),
            nn.BatchNorm2d(width),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, width, 3, stride=stride, padding=1, groups=cardinality, bias=False),
            nn.BatchNorm2d(width),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, out_ch, 1, bias=False),
            nn.BatchNorm2d(out_ch),
        )
        self.shortcut = nn.Identity()
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.relu(self.body(x) + self.shortcut(x))


class NestedUNet(nn.Module):
    """Unet++ with a ResNeXt-style encoder.

    Level ``i`` works at resolution ``1 / 2**i``; node ``X[i][j]`` receives
    ``X[i][0..j-1]`` and the upsampled ``X[i+1][j-1]``. The network therefore
    needs inputs divisible by ``2**encoder_depth``. ``forward`` returns logits.
    """

    def __init__(
        self,
        in_channels: int = 3,
        base_channels: int = 16,
        encoder_depth: int = 5,
        cardinality: int = 4,
        max_channels: int = 512,
    ):
        super().__init__()
        if encoder_depth < 1:
            raise ValueError("encoder_depth must be >= 1")
        self.encoder_depth = encoder_depth
        self.base_channels = base_channels
        self.arch = dict(
            in_channels=in_channels,
            base_channels=base_channels,
            encoder_depth=encoder_depth,
            cardinality=cardinality,
            max_channels=max_channels,
        )
        ch = [min(base_channels * 2**i, max_channels) for i in range(encoder_depth + 1)]
        self.channels = ch

        self.stem = _conv_bn_relu(in_channels, ch[0])
        self.encoder = nn.ModuleList(
            [ResNeXtBlock(ch[i - 1], ch[i], stride=2, cardinality=cardinality) for i in range(1, encoder_depth + 1)]
        )
        # nodes[f"{i}_{j}"] for j >= 1, i + j <= depth
        self.nodes = nn.ModuleDict()
        for j in range(1, encoder_depth + 1):
            for i in range(0, encoder_depth + 1 - j):
                in_ch = ch[i] * j + ch[i + 1]
                self.nodes[f"{i}_{j}"] = nn.Sequential(_conv_bn_relu(in_ch, ch[i]), _conv_bn_relu(ch[i], ch[i]))
        self.head = nn.Conv2d(ch[0], 1, 1)

    @property
    def downsampling_factor(self) -> int:
        return 2**self.encoder_depth

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        f = self.downsampling_factor
        if x.shape[-2] % f or x.shape[-1] % f:
            raise ValueError(f"input dims {tuple(x.shape[-2:])} must be divisible by {f}")
        grid = [[None] * (self.encoder_depth + 1) for _ in range(self.encoder_depth + 1)]
        grid[0][0] = self.stem(x)
        for i, block in enumerate(self.encoder, start=1):
            grid[i][0] = block(grid[i - 1][0])
        for j in range(1, self.encoder_depth + 1):
            for i in range(0, self.encoder_depth + 1 - j):
                up = F.interpolate(grid[i + 1][j - 1], scale_factor=2, mode="nearest")
                grid[i][j] = self.nodes[f"{i}_{j}"](torch.cat([*grid[i][:j], up], dim=1))
        return self.head(grid[0][self.encoder_depth])


SegModel = NestedUNet


def image_to_tensor(image: np.ndarray, device: str | torch.device = "cpu", dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(np.ascontiguousarray(np.asarray(image).transpose(2, 0, 1)), dtype=dtype, device=device)[None]


def seg_forward(model: NestedUNet, image: np.ndarray) -> np.ndarray:
    """Wrinkle probability map of ``image`` (``H x W x 3`` in [0, 1])."""
    h, w = image.shape[:2]
    f = model.downsampling_factor
    if h % f or w % f:
        raise ValueError(f"image dims {h}x{w} must be divisible by {f}; pad the image first")
    p = next(model.parameters())
    model.eval()
    with torch.no_grad():
        logits = model(image_to_tensor(image, p.device, p.dtype))
    return torch.sigmoid(logits)[0, 0].detach().cpu().numpy()


def seg_forward_padded(model: NestedUNet, image: np.ndarray) -> np.ndarray:
    """Like :func:`seg_forward` but reflect-pads to the network factor and crops back."""
    h, w = image.shape[:2]
    f = model.downsampling_factor
    ph, pw = (-h) % f, (-w) % f
    if ph or pw:
        image = np.pad(image, ((0, ph), (0, pw), (0, 0)), mode="reflect")
    return seg_forward(model, image)[:h, :w]


def threshold_mask(p: np.ndarray, t: float = 0.5) -> np.ndarray:
    if not 0.0 < t < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {t}")
    return (np.asarray(p) > t).astype(np.uint8)


def iou(m: np.ndarray, m_hat: np.ndarray) -> float:
    m, m_hat = np.asarray(m) > 0, np.asarray(m_hat) > 0
    if m.shape != m_hat.shape:
        raise ValueError(f"mask dims differ: {m.shape} vs {m_hat.shape}")
    union = np.logical_or(m, m_hat).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(m, m_hat).sum() / union)


@dataclass
class SegTrainConfig:
    epochs: int = 200
    lr: float = 1e-3
    lr_decay_epoch: int = 100
    lr_decay_factor: float = 0.5
    input_size: int = 512
    batch_size: int = 8
    seed: int = 0
    base_channels: int = 16
    encoder_depth: int = 5
    cardinality: int = 4
    threshold: float = 0.5
    augment: AugmentConfig | None = None

    def __post_init__(self) -> None:
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 < self.lr_decay_factor <= 1.0:
            raise ValueError("lr_decay_factor must be in (0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def build_seg_model(cfg: SegTrainConfig) -> NestedUNet:
    return NestedUNet(base_channels=cfg.base_channels, encoder_depth=cfg.encoder_depth, cardinality=cfg.cardinality)


def mean_iou(model: NestedUNet, samples: Sequence[Sample], threshold: float = 0.5) -> float:
    scores = [iou(s.wrinkle_mask, threshold_mask(seg_forward_padded(model, s.image), threshold)) for s in samples]
    return float(np.mean(scores))


def train_segmentation(
    train: Sequence[Sample],
    val: Sequence[Sample] | None,
    cfg: SegTrainConfig,
    on_epoch: Callable[[dict], None] | None = None,
    device: str | torch.device = "cpu",
) -> tuple[NestedUNet, list[dict]]:
    """Minimize the Dice loss with Adam and a step learning-rate decay.

    Returns the model holding the best-validation-IoU weights (the last weights
    when ``val`` is empty) and one history record per epoch.
    """
    if not train:
        raise ValueError("training set is empty")
    torch.manual_seed(cfg.seed)
    model = build_seg_model(cfg).to(device)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones=[cfg.lr_decay_epoch], gamma=cfg.lr_decay_factor)
    train = [resize_sample(s, cfg.input_size) for s in train]
    val = [resize_sample(s, cfg.input_size) for s in (val or [])]
    aug = cfg.augment or AugmentConfig()

    history: list[dict] = []
    best_iou, best_state = -1.0, None
    for epoch in range(cfg.epochs):
        model.train()
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(train))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch = SampleBatch.from_samples(
                [augment(train[i], aug, seed=int(rng.integers(2**31))) for i in idx]
            )
            x = torch.from_numpy(batch.images).to(device)
            m = torch.from_numpy(batch.masks).to(device)
            loss = dice_loss(m, torch.sigmoid(model(x)))
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite segmentation loss at epoch {epoch}", epoch=epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item() * len(idx))
        sched.step()
        record = {"epoch": epoch, "train_loss": sum(losses) / len(train), "lr": opt.param_groups[0]["lr"]}
        if val:
            record["val_iou"] = mean_iou(model, val, cfg.threshold)
            if record["val_iou"] > best_iou:
                best_iou = record["val_iou"]
                best_state = copy.deepcopy(model.state_dict())
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
        logger.info("seg epoch %d: %s", epoch, record)

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return model, history


def freeze(model: nn.Module) -> nn.Module:
    """Put ``model`` in eval mode and disable gradients on all its parameters."""
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def pad_to_multiple(x: torch.Tensor, factor: int) -> tuple[torch.Tensor, tuple[int, int]]:
    h, w = x.shape[-2:]
    ph, pw = (-h) % factor, (-w) % factor
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph), mode="reflect")
    return x, (h, w)

