"""Dataset ingestion, augmentation and splitting for image + wrinkle-mask pairs.

Images are float32 ``H x W x 3`` arrays in ``[0, 1]``; masks are uint8 ``H x W``
arrays in ``{0, 1}``. On disk a dataset is a directory holding ``images/<id>.png``,
``masks/<id>.png`` and optionally a ``manifest.txt`` listing ids one per line.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

logger = logging.getLogger(__name__)

MIN_SIDE = 32
MASK_THRESHOLD = 127


class DataError(ValueError):
    """Raised for missing, unreadable or inconsistent dataset files."""


def check_image(image: np.ndarray, name: str = "image") -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DataError(f"{name} must be H x W x 3, got shape {image.shape}")
    if image.shape[0] < MIN_SIDE or image.shape[1] < MIN_SIDE:
        raise DataError(f"{name} must be at least {MIN_SIDE}x{MIN_SIDE}, got {image.shape[:2]}")
    if not np.all(np.isfinite(image)):
        raise DataError(f"{name} contains non-finite values")
    if image.min() < 0.0 or image.max() > 1.0:
        raise DataError(f"{name} values must lie in [0, 1]")
    return image


def check_mask(mask: np.ndarray, shape: tuple[int, int] | None = None, name: str = "mask") -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise DataError(f"{name} must be H x W, got shape {mask.shape}")
    if shape is not None and mask.shape != tuple(shape):
        raise DataError(f"{name} shape {mask.shape} does not match {tuple(shape)}")
    if not np.isin(mask, (0, 1)).all():
        raise DataError(f"{name} must be binary")
    return mask.astype(np.uint8, copy=False)


@dataclass
class Sample:
    image: np.ndarray
    wrinkle_mask: np.ndarray
    id: str = ""

    def __post_init__(self) -> None:
        check_image(self.image)
        self.wrinkle_mask = check_mask(self.wrinkle_mask, self.image.shape[:2], name=f"mask of {self.id!r}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape[:2]


@dataclass
class AugmentConfig:
    """Spatial augmentation applied identically to image and mask.

    ``random_shift_px`` translates by up to that many pixels on each axis with
    reflection at the border. ``crop_size`` takes a random square crop.
    """

    flip_horizontal: float = 0.0
    flip_vertical: float = 0.0
    random_shift_px: int = 0
    rotation_deg_max: float = 0.0
    crop_size: int | None = None

    def __post_init__(self) -> None:
        for name in ("flip_horizontal", "flip_vertical"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be a probability, got {p}")
        if self.random_shift_px < 0:
            raise ValueError("random_shift_px must be >= 0")
        if self.rotation_deg_max < 0:
            raise ValueError("rotation_deg_max must be >= 0")
        if self.crop_size is not None and self.crop_size < 1:
            raise ValueError("crop_size must be positive")


def _read_png(path: Path, mode: str) -> np.ndarray:
    if not path.is_file():
        raise DataError(f"missing file: {path}")
    try:
        with PILImage.open(path) as im:
            im.load()
            if mode == "RGB" and im.mode not in ("RGB", "RGBA", "P", "L"):
                raise DataError(f"unsupported image mode {im.mode!r} in {path}")
            return np.asarray(im.convert(mode))
    except DataError:
        raise
    except Exception as exc:  # PIL raises a zoo of exception types
        raise DataError(f"unreadable image {path}: {exc}") from exc


def load_image(path: str | Path) -> np.ndarray:
    arr = _read_png(Path(path), "RGB")
    return arr.astype(np.float32) / 255.0


def load_mask(path: str | Path) -> np.ndarray:
    """Read an 8-bit mask and binarize it (value > 127 is a wrinkle pixel)."""
    arr = _read_png(Path(path), "L")
    return (arr > MASK_THRESHOLD).astype(np.uint8)


def load_sample(image_path: str | Path, mask_path: str | Path, sample_id: str | None = None) -> Sample:
    image_path, mask_path = Path(image_path), Path(mask_path)
    image = load_image(image_path)
    mask = load_mask(mask_path)
    if image.shape[:2] != mask.shape:
        raise DataError(
            f"dimension mismatch: {image_path} is {image.shape[1]}x{image.shape[0]}, "
            f"{mask_path} is {mask.shape[1]}x{mask.shape[0]}"
        )
    try:
        check_image(image, name=str(image_path))
    except DataError as exc:
        raise DataError(f"{image_path}: {exc}") from exc
    return Sample(image=image, wrinkle_mask=mask, id=sample_id or image_path.stem)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_image(path: str | Path, image: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(to_uint8(image), mode="RGB").save(path)


def save_mask(path: str | Path, mask: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L").save(path)


def read_manifest(path: str | Path) -> list[str]:
    """Ids listed one per line; blank lines and ``#`` comments are ignored."""
    ids = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            ids.append(line)
    return ids


def write_manifest(path: str | Path, ids: Iterable[str]) -> None:
    Path(path).write_text("".join(f"{i}\n" for i in ids), encoding="utf-8")


def load_dataset(root: str | Path, manifest: str | Path | None = None) -> list[Sample]:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root not found: {root}")
    if manifest is None and (root / "manifest.txt").is_file():
        manifest = root / "manifest.txt"
    if manifest is not None:
        ids = read_manifest(manifest)
    else:
        ids = sorted(p.stem for p in (root / "images").glob("*.png"))
    if not ids:
        raise DataError(f"no samples found under {root}")
    return [load_sample(root / "images" / f"{i}.png", root / "masks" / f"{i}.png", sample_id=i) for i in ids]


def save_dataset(root: str | Path, samples: Sequence[Sample]) -> None:
    root = Path(root)
    for s in samples:
        save_image(root / "images" / f"{s.id}.png", s.image)
        save_mask(root / "masks" / f"{s.id}.png", s.wrinkle_mask)
    write_manifest(root / "manifest.txt", [s.id for s in samples])


def _rotate(image: np.ndarray, mask: np.ndarray, angle: float) -> tuple[np.ndarray, np.ndarray]:
    image = ndimage.rotate(image, angle, axes=(1, 0), reshape=False, order=1, mode="reflect")
    mask = ndimage.rotate(mask, angle, axes=(1, 0), reshape=False, order=0, mode="reflect")
    return np.clip(image, 0.0, 1.0).astype(np.float32), mask.astype(np.uint8)


def _shift(arr: np.ndarray, dy: int, dx: int) -> np.ndarray:
    h, w = arr.shape[:2]
    pad = [(abs(dy), abs(dy)), (abs(dx), abs(dx))] + [(0, 0)] * (arr.ndim - 2)
    padded = np.pad(arr, pad, mode="reflect")
    y0, x0 = abs(dy) - dy, abs(dx) - dx
    return padded[y0 : y0 + h, x0 : x0 + w]


def augment(sample: Sample, cfg: AugmentConfig, seed: int) -> Sample:
    """Apply a random spatial transform to image and mask alike.

    Deterministic in ``seed``. Masks use nearest-neighbour resampling so they
    stay binary; images use bilinear resampling.
    """
    h, w = sample.shape
    if cfg.crop_size is not None and cfg.crop_size > min(h, w):
        raise ValueError(f"crop_size {cfg.crop_size} exceeds image size {h}x{w} of sample {sample.id!r}")
    rng = np.random.default_rng(seed)
    image, mask = sample.image, sample.wrinkle_mask

    if rng.random() < cfg.flip_horizontal:
        image, mask = image[:, ::-1], mask[:, ::-1]
    if rng.random() < cfg.flip_vertical:
        image, mask = image[::-1], mask[::-1]
    if cfg.random_shift_px > 0:
        s = min(cfg.random_shift_px, h - 1, w - 1)
        dy, dx = (int(v) for v in rng.integers(-s, s + 1, size=2))
        image, mask = _shift(image, dy, dx), _shift(mask, dy, dx)
    if cfg.rotation_deg_max > 0:
        angle = float(rng.uniform(-cfg.rotation_deg_max, cfg.rotation_deg_max))
        image, mask = _rotate(image, mask, angle)
    if cfg.crop_size is not None:
        c = cfg.crop_size
        y = int(rng.integers(0, h - c + 1))
        x = int(rng.integers(0, w - c + 1))
        image, mask = image[y : y + c, x : x + c], mask[y : y + c, x : x + c]

    return replace(sample, image=np.ascontiguousarray(image), wrinkle_mask=np.ascontiguousarray(mask))


def resize_sample(sample: Sample, size: int) -> Sample:
    """Resize to ``size x size``: bilinear for the image, nearest for the mask."""
    if sample.shape == (size, size):
        return sample
    image = PILImage.fromarray(to_uint8(sample.image)).resize((size, size), PILImage.BILINEAR)
    mask = PILImage.fromarray(sample.wrinkle_mask).resize((size, size), PILImage.NEAREST)
    return replace(sample, image=np.asarray(image, dtype=np.float32) / 255.0, wrinkle_mask=np.asarray(mask))


def split_dataset(ids: Sequence[str], val_fraction: float, seed: int) -> tuple[list[str], list[str]]:
    if not ids:
        raise ValueError("cannot split an empty id list")
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if list(ids).count(i) > 1})
        raise ValueError(f"duplicate ids: {dupes}")
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must be in (0, 1), got {val_fraction}")
    n_val = int(round(val_fraction * len(ids)))
    order = np.random.default_rng(seed).permutation(len(ids))
    val = {ids[i] for i in order[:n_val]}
    # keep the caller's ordering inside each split
    return [i for i in ids if i not in val], [i for i in ids if i in val]


@dataclass
class SampleBatch:
    """A stacked batch as NCHW float tensors-to-be (kept in numpy here)."""

    images: np.ndarray
    masks: np.ndarray
    ids: list[str] = field(default_factory=list)

    @classmethod
    def from_samples(cls, samples: Sequence[Sample]) -> "SampleBatch":
        # strided arrays crash some torch conv backward kernels; keep C order
        images = np.ascontiguousarray(np.stack([s.image.transpose(2, 0, 1) for s in samples]), dtype=np.float32)
        masks = np.ascontiguousarray(np.stack([s.wrinkle_mask[None] for s in samples]), dtype=np.float32)
        return cls(images=images, masks=masks, ids=[s.id for s in samples])
