"""Synthetic desk-scale data: periodic skin-like texture with dark line "wrinkles"."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Sample
from .maskgen import MaskPolicy, generate_polyline_mask

# thin, short strokes sized for 64 px images
TOY_WRINKLE_POLICY = MaskPolicy(
    n_strokes=(1, 3),
    points_per_stroke=(3, 6),
    step_px=(6.0, 12.0),
    turn_deg_max=30.0,
    thickness_px=(2, 3),
    target_coverage=(0.01, 0.12),
    max_tries=100,
)


@dataclass
class ToySample:
    sample: Sample
    clean: np.ndarray


def periodic_texture(size: int, rng: np.random.Generator) -> np.ndarray:
    """Skin-toned base colour modulated by two random plane waves."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    base = np.array([0.78, 0.60, 0.50]) + rng.uniform(-0.04, 0.04, size=3)
    tex = np.zeros((size, size))
    for _ in range(2):
        period = rng.choice([8.0, 16.0])
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        tex += 0.5 * np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period + phase)
    img = base[None, None, :] + 0.08 * tex[..., None] * np.array([1.0, 0.9, 0.8])
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def make_toy_samples(n: int = 16, size: int = 64, seed: int = 0, darkening: float = 0.45) -> list[ToySample]:
    """``n`` toy samples; each keeps its wrinkle-free ``clean`` image for reference."""
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        clean = periodic_texture(size, rng)
        mask = generate_polyline_mask(size, size, TOY_WRINKLE_POLICY, seed=int(rng.integers(2**31)))
        image = clean * (1.0 - darkening * mask[..., None].astype(np.float32))
        out.append(ToySample(Sample(image=image.astype(np.float32), wrinkle_mask=mask, id=f"toy_{seed}_{k:03d}"), clean))
    return out


def toy_dataset(n: int = 16, size: int = 64, seed: int = 0) -> list[Sample]:
    return [t.sample for t in make_toy_samples(n, size, seed)]
