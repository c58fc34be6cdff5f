"""Wrinkle-shaped random masks.

Training masks are the union of the annotated wrinkles and random polygonal
chains. Evaluation masks are polygonal chains placed on clean skin only, away
from a dilated copy of the wrinkle annotation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import cv2
import numpy as np


class MaskPlacementError(RuntimeError):
    """Raised when no mask satisfying the policy was found within ``max_tries``."""

    def __init__(self, message: str, achieved_coverage: float | None = None):
        super().__init__(message)
        self.achieved_coverage = achieved_coverage


def _as_range(value, name: str, cast=float) -> tuple:
    lo, hi = (cast(v) for v in value)
    if lo > hi:
        raise ValueError(f"{name} range is empty: [{lo}, {hi}]")
    return lo, hi


@dataclass
class MaskPolicy:
    """Random polyline sampler parameters. Every range is inclusive ``(min, max)``."""

    n_strokes: tuple[int, int] = (1, 4)
    points_per_stroke: tuple[int, int] = (4, 12)
    step_px: tuple[float, float] = (8.0, 32.0)
    turn_deg_max: float = 45.0
    thickness_px: tuple[int, int] = (2, 8)
    target_coverage: tuple[float, float] = (0.005, 0.08)
    max_tries: int = 50

    def __post_init__(self) -> None:
        self.n_strokes = _as_range(self.n_strokes, "n_strokes", int)
        self.points_per_stroke = _as_range(self.points_per_stroke, "points_per_stroke", int)
        self.step_px = _as_range(self.step_px, "step_px")
        self.thickness_px = _as_range(self.thickness_px, "thickness_px", int)
        self.target_coverage = _as_range(self.target_coverage, "target_coverage")
        if self.n_strokes[0] < 0 or self.points_per_stroke[0] < 2:
            raise ValueError("need n_strokes >= 0 and points_per_stroke >= 2")
        if self.step_px[0] <= 0 or self.thickness_px[0] < 1:
            raise ValueError("step_px and thickness_px must be positive")
        lo, hi = self.target_coverage
        if not (0.0 < lo and hi < 0.5):
            raise ValueError(f"target_coverage must lie inside (0, 0.5), got {self.target_coverage}")
        if self.max_tries < 1:
            raise ValueError("max_tries must be >= 1")


def _draw_stroke(h: int, w: int, policy: MaskPolicy, rng: np.random.Generator) -> np.ndarray:
    """Rasterize one random walk with bounded turning angle and a round brush."""
    canvas = np.zeros((h, w), dtype=np.uint8)
    n_points = int(rng.integers(policy.points_per_stroke[0], policy.points_per_stroke[1] + 1))
    thickness = int(rng.integers(policy.thickness_px[0], policy.thickness_px[1] + 1))
    y, x = rng.uniform(0, h), rng.uniform(0, w)
    heading = rng.uniform(0, 2 * math.pi)
    max_turn = math.radians(policy.turn_deg_max)
    points = [(x, y)]
    for _ in range(n_points - 1):
        heading += rng.uniform(-max_turn, max_turn)
        step = rng.uniform(*policy.step_px)
        x = float(np.clip(x + step * math.cos(heading), 0, w - 1))
        y = float(np.clip(y + step * math.sin(heading), 0, h - 1))
        points.append((x, y))
    pts = np.rint(np.array(points)).astype(np.int32)
    for p, q in zip(pts[:-1], pts[1:]):
        cv2.line(canvas, tuple(int(v) for v in p), tuple(int(v) for v in q), 1, thickness, lineType=cv2.LINE_8)
    radius = max(thickness // 2, 0)
    for p in pts:
        cv2.circle(canvas, tuple(int(v) for v in p), radius, 1, -1)
    return canvas


def _sample_mask(h: int, w: int, policy: MaskPolicy, seed: int, forbidden: np.ndarray | None) -> np.ndarray:
    if h < 32 or w < 32:
        raise ValueError(f"mask dims must be >= 32, got {h}x{w}")
    if policy.n_strokes[1] == 0:
        return np.zeros((h, w), dtype=np.uint8)
    rng = np.random.default_rng(seed)
    lo, hi = policy.target_coverage
    best = None
    for _ in range(policy.max_tries):
        mask = np.zeros((h, w), dtype=np.uint8)
        n = int(rng.integers(policy.n_strokes[0], policy.n_strokes[1] + 1))
        for _ in range(n):
            for _ in range(policy.max_tries):
                stroke = _draw_stroke(h, w, policy, rng)
                if forbidden is None or not np.any(stroke & forbidden):
                    mask |= stroke
                    break
        coverage = float(mask.mean())
        if lo <= coverage <= hi:
            return mask
        if best is None or abs(coverage - np.clip(coverage, lo, hi)) < abs(best - np.clip(best, lo, hi)):
            best = coverage
    raise MaskPlacementError(
        f"could not reach coverage in [{lo:.4f}, {hi:.4f}] within {policy.max_tries} tries "
        f"(closest achieved coverage {best:.4f})",
        achieved_coverage=best,
    )


def generate_polyline_mask(h: int, w: int, policy: MaskPolicy, seed: int) -> np.ndarray:
    """Random wrinkle-shaped mask with coverage inside ``policy.target_coverage``.

    A policy with ``n_strokes == (0, 0)`` yields the empty mask without a
    coverage check.
    """
    return _sample_mask(h, w, policy, seed, forbidden=None)


def build_inpaint_mask(m_w: np.ndarray, m_g: np.ndarray) -> np.ndarray:
    """Pixelwise union of the wrinkle mask and the generated mask."""
    m_w, m_g = np.asarray(m_w), np.asarray(m_g)
    if m_w.shape != m_g.shape:
        raise ValueError(f"mask dims differ: {m_w.shape} vs {m_g.shape}")
    return ((m_w > 0) | (m_g > 0)).astype(np.uint8)


def disk(radius: int) -> np.ndarray:
    return cv2.getStructuringElement(cv2.MORPH_ELLIPSE, (2 * radius + 1, 2 * radius + 1))


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    mask = (np.asarray(mask) > 0).astype(np.uint8)
    if radius <= 0:
        return mask
    return cv2.dilate(mask, disk(radius))


def exclusion_zone(m_w: np.ndarray, policy: MaskPolicy) -> np.ndarray:
    return dilate(m_w, policy.thickness_px[1])


def synth_eval_masks(m_w: np.ndarray, policy: MaskPolicy, seed: int) -> np.ndarray:
    """Wrinkle-shaped mask on clean skin: never touches ``m_w`` dilated by the max brush thickness."""
    m_w = np.asarray(m_w)
    h, w = m_w.shape
    forbidden = exclusion_zone(m_w, policy)
    if not forbidden.any():
        return _sample_mask(h, w, policy, seed, forbidden=None)
    free = 1.0 - float(forbidden.mean())
    if free < policy.target_coverage[0]:
        raise MaskPlacementError(
            f"only {free:.4f} of the image is outside the wrinkle exclusion zone; "
            f"coverage of {policy.target_coverage[0]:.4f} is unattainable",
            achieved_coverage=0.0,
        )
    return _sample_mask(h, w, policy, seed, forbidden=forbidden)
