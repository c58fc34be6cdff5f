"""Training objectives for segmentation and inpainting.

All losses take NCHW tensors. Discriminators are any callable returning
``(score_logits, feature_list)``; feature extractors return a list of maps.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Callable, Mapping, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

DICE_EPS = 1e-6
LOG_EPS = 1e-8

Discriminator = Callable[[torch.Tensor], tuple[torch.Tensor, list[torch.Tensor]]]


class NonFiniteLossError(RuntimeError):
    def __init__(self, term: str, value: float, breakdown: Mapping[str, float] | None = None):
        super().__init__(f"loss term {term!r} is not finite ({value})")
        self.term = term
        self.value = value
        self.breakdown = dict(breakdown or {})


@dataclass
class LossWeights:
    """Coefficients of the weighted inpainting objective.

    The defaults are engineering choices (the published recipe of the
    inpainting baseline plus a small weight for the wrinkle loss).
    """

    lambda_adv: float = 10.0
    lambda_hrfpl: float = 30.0
    lambda_discpl: float = 100.0
    lambda_r1: float = 0.001
    lambda_ffl: float = 1.0
    lambda_s: float = 0.1

    def __post_init__(self) -> None:
        for f in fields(self):
            v = float(getattr(self, f.name))
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{f.name} must be finite and >= 0, got {v}")
            setattr(self, f.name, v)

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


TERM_WEIGHTS = {
    "adv": "lambda_adv",
    "hrfpl": "lambda_hrfpl",
    "discpl": "lambda_discpl",
    "r1": "lambda_r1",
    "ffl": "lambda_ffl",
    "s": "lambda_s",
}


def _check_same(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def dice_loss(m: torch.Tensor, m_hat: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """``1 - (2 sum(m m_hat) + eps) / (sum(m^2) + sum(m_hat^2) + eps)``, averaged over the batch.

    Inputs with three or more dims are batched along the first one; 1-D and
    2-D inputs count as a single mask.
    """
    _check_same(m, m_hat)
    m = m.to(m_hat.dtype)
    if m.dim() <= 2:
        m, m_hat = m.reshape(1, -1), m_hat.reshape(1, -1)
    m, m_hat = m.flatten(1), m_hat.flatten(1)
    num = 2 * (m * m_hat).sum(1) + eps
    den = (m * m).sum(1) + (m_hat * m_hat).sum(1) + eps
    return (1 - num / den).mean()


def resize_mask(mask: torch.Tensor, size: Sequence[int]) -> torch.Tensor:
    """Nearest-neighbour resize of an N1HW mask to ``size``."""
    if tuple(mask.shape[-2:]) == tuple(size):
        return mask
    return F.interpolate(mask, size=tuple(size), mode="nearest")


def _two_stage_mean(
    feats_a: Sequence[torch.Tensor],
    feats_b: Sequence[torch.Tensor],
    exclude: torch.Tensor | None = None,
) -> torch.Tensor:
    per_layer = []
    for fa, fb in zip(feats_a, feats_b, strict=True):
        sq = (fa - fb) ** 2
        if exclude is not None:
            sq = sq * (1 - resize_mask(exclude.to(sq.dtype), sq.shape[-2:]))
        per_layer.append(sq.mean())
    return torch.stack(per_layer).mean()


def hrfpl(x: torch.Tensor, x_hat: torch.Tensor, m_w: torch.Tensor, phi: Callable) -> torch.Tensor:
    """Perceptual loss on frozen features, with wrinkle pixels excluded.

    ``m_w`` is the wrinkle annotation only; randomly generated holes have
    ground truth and stay supervised.
    """
    _check_same(x, x_hat)
    if m_w.shape[-2:] != x.shape[-2:]:
        raise ValueError(f"mask dims {tuple(m_w.shape[-2:])} do not match image {tuple(x.shape[-2:])}")
    with torch.no_grad():
        target = [f.detach() for f in phi(x)]
    return _two_stage_mean(target, phi(x_hat), exclude=m_w)


def disc_feature_matching(d: Discriminator, x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Squared feature distance over discriminator activations (real features detached)."""
    _check_same(x, x_hat)
    with torch.no_grad():
        _, real_feats = d(x)
    _, fake_feats = d(x_hat)
    return _two_stage_mean([f.detach() for f in real_feats], fake_feats)


def _safe_log(p: torch.Tensor) -> torch.Tensor:
    return torch.log(p.clamp_min(LOG_EPS))


def discriminator_loss(real_logits: torch.Tensor, fake_logits: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    """Masked patch objective: real images and unmasked fake patches are real, masked fake patches are fake."""
    m = resize_mask(m.to(fake_logits.dtype), fake_logits.shape[-2:])
    d_real = torch.sigmoid(real_logits)
    d_fake = torch.sigmoid(fake_logits)
    return (
        -_safe_log(d_real).mean()
        - (_safe_log(1 - d_fake) * m).mean()
        - (_safe_log(d_fake) * (1 - m)).mean()
    )


def generator_adv_loss(fake_logits: torch.Tensor) -> torch.Tensor:
    return -_safe_log(torch.sigmoid(fake_logits)).mean()


def adversarial_losses(
    d: Discriminator, x: torch.Tensor, x_hat: torch.Tensor, m: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Return ``(L_D, L_G)`` for one batch. ``m`` is the inpaint mask (1 = hole)."""
    real_logits, _ = d(x)
    fake_logits, _ = d(x_hat)
    return discriminator_loss(real_logits, fake_logits, m), generator_adv_loss(fake_logits)


def r1_penalty(d: Discriminator, x: torch.Tensor, create_graph: bool = True) -> torch.Tensor:
    """Squared input-gradient norm of the summed real scores, averaged over the batch."""
    x = x.detach().requires_grad_(True)
    scores, _ = d(x)
    if not scores.requires_grad:
        return torch.zeros((), dtype=x.dtype, device=x.device)
    (grad,) = torch.autograd.grad(scores.sum(), x, create_graph=create_graph, allow_unused=True)
    if grad is None:
        return torch.zeros((), dtype=x.dtype, device=x.device)
    return grad.pow(2).flatten(1).sum(1).mean()


def ffl_weight(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Spectral weight matrix ``|F_x - F_x_hat|``, detached."""
    with torch.no_grad():
        return (torch.fft.fft2(x) - torch.fft.fft2(x_hat)).abs()


def ffl(x: torch.Tensor, x_hat: torch.Tensor, weight: torch.Tensor | None = None) -> torch.Tensor:
    """Focal frequency loss with the unnormalized 2-D DFT.

    Each channel's spectrum error is weighted by its own magnitude (treated as
    a constant) and averaged over frequencies, then over channels and batch.
    Passing ``weight`` fixes the weight matrix explicitly.
    """
    _check_same(x, x_hat)
    diff = torch.fft.fft2(x) - torch.fft.fft2(x_hat)
    sq = diff.real.pow(2) + diff.imag.pow(2)
    if weight is None:
        weight = sq.detach().sqrt()
    return (weight * sq).mean()


def wrinkle_loss(seg: nn.Module, x_hat: torch.Tensor) -> torch.Tensor:
    """Spatial mean of the frozen segmentation network's wrinkle probabilities on ``x_hat``."""
    if any(p.requires_grad for p in seg.parameters()):
        raise RuntimeError("segmentation model must be frozen (requires_grad=False) for the wrinkle loss")
    if seg.training:
        raise RuntimeError("segmentation model must be in eval mode for the wrinkle loss")
    factor = getattr(seg, "downsampling_factor", 1)
    h, w = x_hat.shape[-2:]
    ph, pw = (-h) % factor, (-w) % factor
    inp = F.pad(x_hat, (0, pw, 0, ph), mode="reflect") if (ph or pw) else x_hat
    prob = torch.sigmoid(seg(inp))[..., :h, :w]
    return prob.mean()


def total_loss(terms: Mapping[str, torch.Tensor | float], w: LossWeights) -> torch.Tensor | float:
    """Weighted sum over whichever of the six terms are present in ``terms``.

    Keys are ``adv``, ``hrfpl``, ``discpl``, ``r1``, ``ffl`` and ``s``.
    """
    breakdown = {k: float(v.detach()) if torch.is_tensor(v) else float(v) for k, v in terms.items()}
    total: torch.Tensor | float = 0.0
    for name, value in terms.items():
        if name not in TERM_WEIGHTS:
            raise KeyError(f"unknown loss term {name!r}")
        if not math.isfinite(breakdown[name]):
            raise NonFiniteLossError(name, breakdown[name], breakdown)
        total = total + getattr(w, TERM_WEIGHTS[name]) * value
    return total
