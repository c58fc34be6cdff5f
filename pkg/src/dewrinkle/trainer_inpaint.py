"""Adversarial training of the inpainting generator against a patch discriminator.

The segmentation network is trained beforehand and only used, frozen, inside
the wrinkle loss.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn

from .data import AugmentConfig, Sample, SampleBatch, augment, save_image, save_mask
from .inpaintnet import InpaintGenerator, PatchDiscriminator, composite_tensor, inpaint_image, stack_input_tensor
from .losses import (
    LossWeights,
    NonFiniteLossError,
    discriminator_loss,
    disc_feature_matching,
    ffl,
    generator_adv_loss,
    hrfpl,
    r1_penalty,
    wrinkle_loss,
)
from .evaluate import default_lpips, evaluation_masks
from .maskgen import MaskPlacementError, MaskPolicy, generate_polyline_mask
from .segnet import TrainingDivergedError, freeze

logger = logging.getLogger(__name__)


class HRFFeatureExtractor(nn.Module):
    """Frozen dilated-convolution feature network used by the perceptual loss.

    Without a weight file the weights are drawn from a fixed seed, so the loss
    acts as a random-projection perceptual distance.
    """

    def __init__(self, width: int = 16, dilations: Sequence[int] = (1, 2, 4, 8), seed: int = 0, weights: str | None = None):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers = []
        prev = 3
        for d in dilations:
            conv = nn.Conv2d(prev, width, 3, padding=d, dilation=d, padding_mode="reflect")
            with torch.no_grad():
                fan_in = prev * 9
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * math.sqrt(2.0 / fan_in))
                conv.bias.zero_()
            layers.append(conv)
            prev = width
        self.layers = nn.ModuleList(layers)
        if weights is not None:
            self.load_state_dict(torch.load(weights, map_location="cpu", weights_only=True))
        freeze(self)

    def train(self, mode: bool = True) -> "HRFFeatureExtractor":
        return super().train(False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for conv in self.layers:
            x = torch.relu(conv(x))
            feats.append(x)
        return feats


@dataclass
class InpaintTrainConfig:
    epochs: int = 300
    lr_gen: float = 1e-4
    lr_disc: float = 1e-4
    batch_size: int = 16
    crop_size: int = 256
    seed: int = 0
    mask_policy: MaskPolicy = field(default_factory=MaskPolicy)
    weights: LossWeights = field(default_factory=LossWeights)
    seg_checkpoint: str = ""
    ngf: int = 64
    n_blocks: int = 9
    ffc_global_fraction: float = 0.5
    ndf: int = 64
    disc_layers: int = 3
    augment: AugmentConfig = field(default_factory=lambda: AugmentConfig(flip_vertical=0.5, rotation_deg_max=10.0))
    val_every: int = 10
    hrf_width: int = 16

    def __post_init__(self) -> None:
        if isinstance(self.mask_policy, dict):
            self.mask_policy = MaskPolicy(**self.mask_policy)
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.crop_size % 8:
            raise ValueError(f"crop_size must be divisible by 8, got {self.crop_size}")
        if self.lr_gen <= 0 or self.lr_disc <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def build_generator(cfg: InpaintTrainConfig) -> InpaintGenerator:
    return InpaintGenerator(ngf=cfg.ngf, n_blocks=cfg.n_blocks, ffc_global_fraction=cfg.ffc_global_fraction)


def build_discriminator(cfg: InpaintTrainConfig) -> PatchDiscriminator:
    return PatchDiscriminator(ndf=cfg.ndf, n_layers=cfg.disc_layers)


def _requires_grad(module: nn.Module, flag: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(flag)


def _finite_or_raise(terms: dict[str, torch.Tensor], step: int) -> dict[str, float]:
    values = {k: float(v.detach()) for k, v in terms.items()}
    for k, v in values.items():
        if not math.isfinite(v):
            err = NonFiniteLossError(k, v, values)
            raise TrainingDivergedError(f"step {step}: {err} (terms: {values})", step=step) from err
    return values


class InpaintTrainer:
    """Holds generator, discriminator, frozen segmenter, feature net and optimizers.

    Each :meth:`train_step` draws random polyline masks, unions them with the
    wrinkle masks, then runs one discriminator update followed by one
    generator update.
    """

    def __init__(
        self,
        gen: InpaintGenerator,
        disc: PatchDiscriminator,
        seg: nn.Module,
        cfg: InpaintTrainConfig,
        hrf: nn.Module | None = None,
        device: str | torch.device = "cpu",
    ):
        self.cfg = cfg
        self.device = torch.device(device)
        self.gen = gen.to(self.device)
        self.disc = disc.to(self.device)
        self.seg = freeze(seg.to(self.device))
        self.hrf = (hrf or HRFFeatureExtractor(width=cfg.hrf_width)).to(self.device)
        self.opt_g = torch.optim.Adam(self.gen.parameters(), lr=cfg.lr_gen)
        self.opt_d = torch.optim.Adam(self.disc.parameters(), lr=cfg.lr_disc)
        self.step_count = 0
        self.mask_failures = 0

    def generated_masks(self, n: int, h: int, w: int) -> np.ndarray:
        masks = np.zeros((n, 1, h, w), dtype=np.float32)
        for i in range(n):
            seed = int(np.random.default_rng([self.cfg.seed, self.step_count, i]).integers(2**31))
            try:
                masks[i, 0] = generate_polyline_mask(h, w, self.cfg.mask_policy, seed)
            except MaskPlacementError:
                self.mask_failures += 1
        return masks

    def inpaint(self, x: torch.Tensor, m_I: torch.Tensor) -> torch.Tensor:
        raw = self.gen(stack_input_tensor(x, m_I))
        return composite_tensor(x, raw, m_I)

    def discriminator_objective(self, x: torch.Tensor, x_hat: torch.Tensor, m_I: torch.Tensor) -> dict[str, torch.Tensor]:
        real_logits, _ = self.disc(x)
        fake_logits, _ = self.disc(x_hat.detach())
        return {
            "disc": discriminator_loss(real_logits, fake_logits, m_I),
            "r1": r1_penalty(self.disc, x),
        }

    def generator_objective(self, x: torch.Tensor, x_hat: torch.Tensor, m_w: torch.Tensor) -> dict[str, torch.Tensor]:
        fake_logits, _ = self.disc(x_hat)
        return {
            "gen_adv": generator_adv_loss(fake_logits),
            "hrfpl": hrfpl(x, x_hat, m_w, self.hrf),
            "discpl": disc_feature_matching(self.disc, x, x_hat),
            "ffl": ffl(x, x_hat),
            "s": wrinkle_loss(self.seg, x_hat),
        }

    def weighted_generator_loss(self, terms: dict[str, torch.Tensor]) -> torch.Tensor:
        w = self.cfg.weights
        return (
            w.lambda_adv * terms["gen_adv"]
            + w.lambda_hrfpl * terms["hrfpl"]
            + w.lambda_discpl * terms["discpl"]
            + w.lambda_ffl * terms["ffl"]
            + w.lambda_s * terms["s"]
        )

    def train_step(self, x: torch.Tensor, m_w: torch.Tensor, m_g: torch.Tensor | None = None) -> dict[str, float]:
        """One alternating update on a batch of images ``x`` and wrinkle masks ``m_w`` (N1HW)."""
        cfg, w = self.cfg, self.cfg.weights
        x, m_w = x.to(self.device), m_w.to(self.device)
        if m_g is None:
            m_g = torch.from_numpy(self.generated_masks(x.shape[0], *x.shape[-2:]))
        m_I = torch.maximum(m_w, m_g.to(self.device))
        self.gen.train()
        self.disc.train()

        x_hat = self.inpaint(x, m_I)

        # discriminator step
        _requires_grad(self.disc, True)
        d_terms = self.discriminator_objective(x, x_hat, m_I)
        d_loss = d_terms["disc"] + w.lambda_r1 * d_terms["r1"]
        d_values = _finite_or_raise({**d_terms, "d_total": d_loss}, self.step_count)
        self.opt_d.zero_grad(set_to_none=True)
        d_loss.backward()
        self.opt_d.step()

        # generator step; discriminator weights receive no gradient
        _requires_grad(self.disc, False)
        g_terms = self.generator_objective(x, x_hat, m_w)
        g_loss = self.weighted_generator_loss(g_terms)
        g_values = _finite_or_raise({**g_terms, "g_total": g_loss}, self.step_count)
        self.opt_g.zero_grad(set_to_none=True)
        g_loss.backward()
        self.opt_g.step()
        _requires_grad(self.disc, True)

        self.step_count += 1
        log = {**d_values, **g_values}
        log["adv"] = log["disc"] + log["gen_adv"]
        return log


def train_inpainting(
    train: Sequence[Sample],
    val: Sequence[Sample] | None,
    seg: nn.Module,
    cfg: InpaintTrainConfig,
    device: str | torch.device = "cpu",
    preview_dir: str | Path | None = None,
    on_epoch: Callable[[dict], None] | None = None,
    lpips_fn: Callable[[np.ndarray, np.ndarray], float] | None = None,
) -> tuple[InpaintGenerator, PatchDiscriminator, list[dict]]:
    """Train for ``cfg.epochs`` epochs; return (generator, discriminator, history).

    Every ``cfg.val_every`` epochs the validation crops are inpainted under
    fixed clean-skin masks and scored with LPIPS; the generator weights with
    the lowest validation LPIPS are the ones returned.
    """
    if not train:
        raise ValueError("training set is empty")
    torch.manual_seed(cfg.seed)
    gen, disc = build_generator(cfg), build_discriminator(cfg)
    trainer = InpaintTrainer(gen, disc, seg, cfg, device=device)
    aug = AugmentConfig(**{**cfg.augment.__dict__, "crop_size": cfg.crop_size})
    val = list(val or [])
    lpips_fn = lpips_fn or default_lpips
    val_masks = evaluation_masks(val, cfg.mask_policy, seed=cfg.seed)

    history: list[dict] = []
    best_lpips, best_state = math.inf, None
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, 1, epoch])
        order = rng.permutation(len(train))
        sums: dict[str, float] = {}
        n_steps = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch = SampleBatch.from_samples([augment(train[i], aug, seed=int(rng.integers(2**31))) for i in idx])
            log = trainer.train_step(torch.from_numpy(batch.images), torch.from_numpy(batch.masks))
            for k, v in log.items():
                sums[k] = sums.get(k, 0.0) + v
            n_steps += 1
        record = {"epoch": epoch, **{k: v / n_steps for k, v in sums.items()}}
        record["weights"] = cfg.weights.as_dict()

        last = epoch == cfg.epochs - 1
        if val and ((epoch + 1) % cfg.val_every == 0 or last):
            scores = []
            for k, (s, m) in enumerate(zip(val, val_masks)):
                if m is None:
                    continue
                out = inpaint_image(trainer.gen, s.image, m)
                scores.append(lpips_fn(s.image, out))
                if preview_dir is not None:
                    save_image(Path(preview_dir) / f"epoch{epoch:04d}_{s.id}.png", out)
                    if epoch == cfg.val_every - 1:
                        save_mask(Path(preview_dir) / f"mask_{s.id}.png", m)
            if scores:
                record["val_lpips"] = float(np.mean(scores))
                if record["val_lpips"] < best_lpips:
                    best_lpips = record["val_lpips"]
                    best_state = copy.deepcopy(trainer.gen.state_dict())
                    record["best"] = True
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
        logger.info("inpaint epoch %d: %s", epoch, record)

    if best_state is not None:
        trainer.gen.load_state_dict(best_state)
    trainer.gen.eval()
    trainer.disc.eval()
    return trainer.gen, trainer.disc, history


__all__ = [
    "HRFFeatureExtractor",
    "InpaintTrainConfig",
    "InpaintTrainer",
    "build_discriminator",
    "build_generator",
    "train_inpainting",
]
