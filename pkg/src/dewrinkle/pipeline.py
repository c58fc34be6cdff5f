"""End-to-end inference: segment, threshold, dilate, inpaint, composite."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .data import check_image, check_mask
from .inpaintnet import InpaintGenerator, inpaint_image
from .maskgen import dilate
from .segnet import NestedUNet, seg_forward_padded, threshold_mask


@dataclass
class PipelineOptions:
    seg_input_size: int | None = 512
    threshold: float = 0.5
    dilate_px: int = 2
    mask_override: np.ndarray | None = None

    def __post_init__(self) -> None:
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must be in (0, 1), got {self.threshold}")
        if self.dilate_px < 0:
            raise ValueError("dilate_px must be >= 0")


def _resize(arr: np.ndarray, size: tuple[int, int], mode: str) -> np.ndarray:
    t = torch.as_tensor(np.ascontiguousarray(arr), dtype=torch.float32)
    t = t.permute(2, 0, 1)[None] if t.dim() == 3 else t[None, None]
    kwargs = {"align_corners": False, "antialias": True} if mode == "bilinear" else {}
    out = F.interpolate(t, size=size, mode=mode, **kwargs)[0]
    return out.permute(1, 2, 0).numpy() if arr.ndim == 3 else out[0].numpy()


def predict_wrinkle_mask(x: np.ndarray, seg: NestedUNet, opts: PipelineOptions) -> np.ndarray:
    """Probability map at ``seg_input_size``, nearest-upsampled to native size, thresholded and dilated."""
    h, w = x.shape[:2]
    size = opts.seg_input_size
    if size is None or (h, w) == (size, size):
        prob = seg_forward_padded(seg, x)
    else:
        small = np.clip(_resize(x, (size, size), "bilinear"), 0.0, 1.0)
        prob = _resize(seg_forward_padded(seg, small), (h, w), "nearest")
    return dilate(threshold_mask(prob, opts.threshold), opts.dilate_px)


def remove_wrinkles(
    x: np.ndarray,
    seg: NestedUNet | None,
    gen: InpaintGenerator,
    opts: PipelineOptions | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(x_hat, mask)``; ``x_hat`` equals ``x`` bit-for-bit outside ``mask``.

    A ``mask_override`` is used as given (no dilation) and the segmentation
    network is not run.
    """
    opts = opts or PipelineOptions()
    check_image(x)
    if opts.mask_override is not None:
        mask = check_mask(opts.mask_override, x.shape[:2], name="mask override")
    else:
        if seg is None:
            raise ValueError("a segmentation model is required without a mask override")
        mask = predict_wrinkle_mask(x, seg, opts)
    return inpaint_image(gen, x, mask), mask
