"""Image decoding/encoding, paired-dataset indexing, crops and color conversion.

Images travel through the package as ``float`` numpy arrays of shape
``(H, W, C)`` with values in ``[0, 1]``; ``C`` is 3 for scenes and
reflectance, 1 for illumination maps.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import (
    EmptyDatasetError,
    ImageFormatError,
    PairingError,
    ShapeError,
)

PathLike = Union[str, os.PathLike]

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")

# D65 reference white, CIE 1931 2 degree observer.
D65_WHITE = np.array([0.95047, 1.0, 1.08883])

_SRGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_XYZ_TO_SRGB = np.linalg.inv(_SRGB_TO_XYZ)

_LAB_EPSILON = 216.0 / 24389.0
_LAB_KAPPA = 24389.0 / 27.0


@dataclass
class CropWindow:
    row: int
    col: int
    size: int
    hflip: bool = False
    vflip: bool = False


@dataclass
class PairedSample:
    low: np.ndarray
    high: np.ndarray
    id: str
    window: Optional[CropWindow] = None

    def __post_init__(self):
        if self.low.shape != self.high.shape:
            raise ShapeError(
                f"pair {self.id!r}: low {self.low.shape} != high {self.high.shape}"
            )


@dataclass
class DatasetIndex:
    root: Path
    pairs: list = field(default_factory=list)  # (low_path, high_path, id)
    split: str = "train"

    def __len__(self):
        return len(self.pairs)

    @property
    def ids(self):
        return [p[2] for p in self.pairs]


def load_image(path: PathLike) -> np.ndarray:
    """Decode an 8-bit PNG/JPEG into an ``(H, W, 3)`` float64 array in [0, 1].

    Grayscale and palette images are expanded to RGB, alpha is dropped.
    Anything deeper than 8 bits per channel raises :class:`ImageFormatError`
    instead of being truncated.
    """
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("I;16", "I;16B", "I;16L", "I", "F") or mode.startswith("I;"):
                raise ImageFormatError(f"{path}: unsupported bit depth (mode {mode})")
            if mode not in ("RGB", "L", "RGBA", "P", "LA", "1", "CMYK", "YCbCr"):
                raise ImageFormatError(f"{path}: unsupported image mode {mode}")
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except UnidentifiedImageError as exc:
        raise ImageFormatError(f"{path}: not a decodable image") from exc
    return arr.astype(np.float64) / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and quantize with round-half-up."""
    x = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.floor(x * 255.0 + 0.5).astype(np.uint8)


def save_image(img: np.ndarray, path: PathLike) -> None:
    """Write a 1- or 3-channel image as an 8-bit PNG (whatever the suffix)."""
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[..., None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ShapeError(f"save_image expects H x W x {{1,3}}, got {img.shape}")
    data = to_uint8(img)
    pil = Image.fromarray(data[..., 0], mode="L") if data.shape[2] == 1 else Image.fromarray(data, mode="RGB")
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    pil.save(path, format="PNG")


def _image_files(directory: Path) -> dict:
    return {
        p.stem: p
        for p in sorted(directory.iterdir())
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
    }


def match_basenames(dir_a: PathLike, dir_b: PathLike) -> list:
    """Pair image files of two directories by basename, sorted by id.

    Raises :class:`PairingError` listing every basename present on one side
    only and :class:`EmptyDatasetError` when nothing matches.
    """
    a, b = Path(dir_a), Path(dir_b)
    for d in (a, b):
        if not d.is_dir():
            raise EmptyDatasetError(f"{d} is not a directory")
    files_a, files_b = _image_files(a), _image_files(b)
    offenders = set(files_a) ^ set(files_b)
    if offenders:
        raise PairingError(offenders)
    if not files_a:
        raise EmptyDatasetError(f"no images found under {a} and {b}")
    return [(files_a[k], files_b[k], k) for k in sorted(files_a)]


def index_paired_dataset(root: PathLike, split: str = "train") -> DatasetIndex:
    root = Path(root)
    if split not in ("train", "eval"):
        raise ValueError(f"split must be 'train' or 'eval', got {split!r}")
    pairs = match_basenames(root / "low", root / "high")
    return DatasetIndex(root=root, pairs=pairs, split=split)


class PairedImageDataset(Sequence):
    """Lazy ``Sequence[PairedSample]`` over a :class:`DatasetIndex`."""

    def __init__(self, index: DatasetIndex):
        self.index = index

    def __len__(self):
        return len(self.index.pairs)

    def __getitem__(self, i):
        low_path, high_path, sid = self.index.pairs[i]
        return PairedSample(load_image(low_path), load_image(high_path), sid)


def random_crop_pair(
    sample: PairedSample,
    size: int,
    rng: np.random.Generator,
    flips: bool = True,
) -> PairedSample:
    """Crop the same ``size`` x ``size`` window from both images.

    Horizontal and vertical flips (each p=0.5) are drawn once and applied to
    both halves of the pair. The window actually used is recorded on the
    returned sample.
    """
    h, w = sample.low.shape[:2]
    if size > min(h, w) or size < 1:
        raise ShapeError(f"crop size {size} does not fit image {h}x{w}")
    r = int(rng.integers(0, h - size + 1))
    c = int(rng.integers(0, w - size + 1))
    hflip = vflip = False
    if flips:
        hflip = bool(rng.random() < 0.5)
        vflip = bool(rng.random() < 0.5)

    def apply(img):
        out = img[r : r + size, c : c + size]
        if hflip:
            out = out[:, ::-1]
        if vflip:
            out = out[::-1, :]
        return np.ascontiguousarray(out)

    return PairedSample(
        apply(sample.low),
        apply(sample.high),
        sample.id,
        CropWindow(r, c, size, hflip, vflip),
    )


def _require_rgb(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim < 1 or img.shape[-1] != 3:
        raise ShapeError(f"expected 3 channels in the last axis, got shape {img.shape}")
    return img


def srgb_to_linear(img):
    img = np.asarray(img, dtype=np.float64)
    return np.where(img <= 0.04045, img / 12.92, ((img + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(img):
    img = np.asarray(img, dtype=np.float64)
    return np.where(
        img <= 0.0031308,
        img * 12.92,
        1.055 * np.power(np.maximum(img, 0.0), 1 / 2.4) - 0.055,
    )


def srgb_to_lab(img: np.ndarray) -> np.ndarray:
    """sRGB in [0, 1] to CIE L*a*b* (D65). Works on any ``(..., 3)`` array."""
    img = _require_rgb(img)
    xyz = srgb_to_linear(img) @ _SRGB_TO_XYZ.T
    t = xyz / D65_WHITE
    f = np.where(t > _LAB_EPSILON, np.cbrt(t), (_LAB_KAPPA * t + 16.0) / 116.0)
    L = 116.0 * f[..., 1] - 16.0
    a = 500.0 * (f[..., 0] - f[..., 1])
    b = 200.0 * (f[..., 1] - f[..., 2])
    return np.stack([L, a, b], axis=-1)


def lab_to_srgb(lab: np.ndarray) -> np.ndarray:
    lab = _require_rgb(lab)
    fy = (lab[..., 0] + 16.0) / 116.0
    fx = fy + lab[..., 1] / 500.0
    fz = fy - lab[..., 2] / 200.0
    f = np.stack([fx, fy, fz], axis=-1)
    t = np.where(f**3 > _LAB_EPSILON, f**3, (116.0 * f - 16.0) / _LAB_KAPPA)
    xyz = t * D65_WHITE
    return linear_to_srgb(xyz @ _XYZ_TO_SRGB.T)
