"""Quantitative evaluation: segmentation IoU, LPIPS and FID under clean-skin masks.

Inpainting has no wrinkle-free ground truth, so evaluation masks are placed on
skin away from annotated wrinkles, inpainted, and compared to the original.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn

from .data import Sample
from .inpaintnet import InpaintGenerator, inpaint_image
from .maskgen import MaskPlacementError, MaskPolicy, synth_eval_masks
from .segnet import NestedUNet, iou, seg_forward_padded, threshold_mask

logger = logging.getLogger(__name__)


class RandomConvFeatures(nn.Module):
    """Small frozen strided-conv network with seeded weights.

    Stands in for a pretrained perceptual / Inception network when no weight
    file is supplied: scores are comparable across runs of this package but
    not with published numbers.
    """

    def __init__(self, widths: Sequence[int] = (16, 32, 64), seed: int = 1234):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        convs, prev = [], 3
        for i, width in enumerate(widths):
            conv = nn.Conv2d(prev, width, 3, stride=1 if i == 0 else 2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=g) * math.sqrt(2.0 / (prev * 9)))
                conv.bias.zero_()
            convs.append(conv)
            prev = width
        self.convs = nn.ModuleList(convs)
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for conv in self.convs:
            x = torch.relu(conv(x))
            feats.append(x)
        return feats


class IdentityFeatures(nn.Module):
    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        return [x]


_DEFAULT_FEATURES: RandomConvFeatures | None = None


def default_features() -> RandomConvFeatures:
    global _DEFAULT_FEATURES
    if _DEFAULT_FEATURES is None:
        _DEFAULT_FEATURES = RandomConvFeatures()
    return _DEFAULT_FEATURES


def _feature_dtype(feat) -> torch.dtype:
    if isinstance(feat, nn.Module):
        p = next(feat.parameters(), None)
        if p is not None:
            return p.dtype
    return torch.float64


def _to_batch(image: np.ndarray, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    return torch.as_tensor(np.ascontiguousarray(np.asarray(image).transpose(2, 0, 1)), dtype=dtype)[None]


def _unit_normalize(f: torch.Tensor, eps: float = 1e-10) -> torch.Tensor:
    return f / (f.pow(2).sum(dim=1, keepdim=True).sqrt() + eps)


def compute_lpips(
    x: np.ndarray,
    y: np.ndarray,
    feat: Callable[[torch.Tensor], list[torch.Tensor]] | None = None,
    unit_weights: Sequence[Sequence[float]] | None = None,
) -> float:
    """Perceptual distance between two images.

    Per layer: unit-normalize each position's channel vector, square the
    difference, weight channels (default 1), sum over channels and average
    over positions; layers are summed.
    """
    x, y = np.asarray(x), np.asarray(y)
    if x.shape != y.shape:
        raise ValueError(f"image dims differ: {x.shape} vs {y.shape}")
    feat = feat or default_features()
    dtype = _feature_dtype(feat)
    with torch.no_grad():
        fx, fy = feat(_to_batch(x, dtype)), feat(_to_batch(y, dtype))
    total = 0.0
    for layer, (a, b) in enumerate(zip(fx, fy, strict=True)):
        d = (_unit_normalize(a) - _unit_normalize(b)) ** 2
        if unit_weights is not None:
            w = torch.as_tensor(unit_weights[layer], dtype=d.dtype).view(1, -1, 1, 1)
            d = d * w
        total += float(d.sum(dim=1).mean())
    return total


def default_lpips(x: np.ndarray, y: np.ndarray) -> float:
    return compute_lpips(x, y)


def _sqrtm_psd(a: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((a + a.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def compute_fid(features_a: np.ndarray, features_b: np.ndarray) -> float:
    """Fréchet distance between Gaussian fits of two feature sets (rows are samples)."""
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    a = a[:, None] if a.ndim == 1 else a
    b = b[:, None] if b.ndim == 1 else b
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("features contain non-finite values")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"feature dims differ: {a.shape[1]} vs {b.shape[1]}")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("need at least two samples per set")
    mu_a, mu_b = a.mean(0), b.mean(0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False, ddof=1))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False, ddof=1))
    # tr sqrt(A B) == tr sqrt(sqrt(A) B sqrt(A)), and the latter is symmetric PSD
    root_a = _sqrtm_psd(cov_a)
    cross = np.sqrt(np.clip(np.linalg.eigvalsh(root_a @ cov_b @ root_a), 0.0, None)).sum()
    fid = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2.0 * cross)
    return max(fid, 0.0)


def pooled_features(images: Sequence[np.ndarray], feat: Callable | None = None) -> np.ndarray:
    """Global-average-pooled features of every layer, concatenated per image."""
    feat = feat or default_features()
    rows = []
    with torch.no_grad():
        for im in images:
            t = _to_batch(im, _feature_dtype(feat))
            rows.append(torch.cat([f.mean(dim=(2, 3)) for f in feat(t)], dim=1)[0].double().numpy())
    return np.stack(rows)


@dataclass
class MetricsReport:
    iou: float | None = None
    lpips_mean: float | None = None
    fid: float | None = None
    n_samples: int = 0
    mask_seed: int | None = None
    config_hash: str = ""
    n_skipped: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "MetricsReport":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))

    def table(self) -> str:
        def fmt(v):
            return "-" if v is None else f"{v:.6f}"

        rows = [
            ("IoU", fmt(self.iou)),
            ("LPIPS", fmt(self.lpips_mean)),
            ("FID", fmt(self.fid)),
            ("samples", str(self.n_samples)),
            ("skipped", str(self.n_skipped)),
            ("mask_seed", "-" if self.mask_seed is None else str(self.mask_seed)),
            ("config_hash", self.config_hash[:16] or "-"),
        ]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


def psnr(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if mask is not None:
        sel = np.asarray(mask) > 0
        a, b = a[sel], b[sel]
    mse = float(np.mean((a - b) ** 2))
    return float("inf") if mse == 0 else 10.0 * math.log10(1.0 / mse)


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


InpaintFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


def evaluation_masks(dataset: Sequence[Sample], policy: MaskPolicy, seed: int) -> list[np.ndarray | None]:
    """One clean-skin mask per sample (seed ``seed + index``); ``None`` where placement fails."""
    masks = []
    for i, s in enumerate(dataset):
        try:
            masks.append(synth_eval_masks(s.wrinkle_mask, policy, seed=seed + i))
        except MaskPlacementError as exc:
            logger.warning("no evaluation mask for %s: %s", s.id, exc)
            masks.append(None)
    return masks


def evaluate_inpainting(
    gen: InpaintGenerator | InpaintFn,
    dataset: Sequence[Sample],
    policy: MaskPolicy,
    feat: Callable | None = None,
    seed: int = 0,
    config: dict | None = None,
) -> MetricsReport:
    """Inpaint clean-skin masks and compare against the originals.

    ``gen`` is a generator module or any ``(image, mask) -> image`` callable.
    Samples whose mask cannot be placed are skipped and counted; the masks
    used are reproducible with :func:`evaluation_masks`.
    """
    inpaint = (lambda x, m: inpaint_image(gen, x, m)) if isinstance(gen, nn.Module) else gen
    originals, outputs, lpips_scores = [], [], []
    masks = evaluation_masks(dataset, policy, seed)
    for s, m in zip(dataset, masks):
        if m is None:
            continue
        out = inpaint(s.image, m)
        originals.append(s.image)
        outputs.append(out)
        lpips_scores.append(compute_lpips(s.image, out, feat))
    fid = None
    if len(originals) >= 2:
        fid = compute_fid(pooled_features(originals, feat), pooled_features(outputs, feat))
    return MetricsReport(
        lpips_mean=float(np.mean(lpips_scores)) if lpips_scores else None,
        fid=fid,
        n_samples=len(originals),
        mask_seed=seed,
        config_hash=config_hash({"policy": asdict(policy), "seed": seed, **(config or {})}),
        n_skipped=sum(m is None for m in masks),
    )


def evaluate_segmentation(
    seg: NestedUNet | Callable[[np.ndarray], np.ndarray],
    dataset: Sequence[Sample],
    threshold: float = 0.5,
    config: dict | None = None,
) -> MetricsReport:
    """Mean IoU at ``threshold``; ``seg`` is a model or an ``image -> probmap`` callable."""
    predict = (lambda im: seg_forward_padded(seg, im)) if isinstance(seg, nn.Module) else seg
    scores = [iou(s.wrinkle_mask, threshold_mask(predict(s.image), threshold)) for s in dataset]
    return MetricsReport(
        iou=float(np.mean(scores)) if scores else None,
        n_samples=len(scores),
        config_hash=config_hash({"threshold": threshold, **(config or {})}),
    )
