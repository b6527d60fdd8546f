from __future__ import annotations
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Tuple, Union
import numpy as np
import pandas as pd
from PIL import Image
import stringworks

logger = logging.getLogger(__name__)


class ImagingException(Exception): pass
class ImageSmallerThanPatchException(ImagingException): pass
class UnsupportedDimException(ImagingException): pass
class DimensionMismatchException(ImagingException): pass
class EmptyTissueMaskException(ImagingException): pass
class FeatureFileException(ImagingException): pass


DESCRIPTOR_DIM = 64
INTENSITY_BINS = 16
GRADIENT_BINS = 8
EDGE_THRESHOLD = 32
SOFT_DICE_EPS = 1e-6
BCE_CLAMP = 1e-7


@dataclass
class RasterImage:
    pixels: np.ndarray # (height, width, 3) uint8, row-major RGB

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"RGB raster expected, got shape {self.pixels.shape}")
        if self.height < 1 or self.width < 1:
            raise ValueError("raster must be at least 1x1")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass
class Mask:
    values: np.ndarray # (height, width) float64 in [0, 1]

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        if self.values.ndim != 2:
            raise ValueError(f"2-D mask expected, got shape {self.values.shape}")
        if np.any(self.values < 0) or np.any(self.values > 1):
            raise ValueError("mask values must lie within [0, 1]")

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def binary(self) -> np.ndarray:
        return self.values >= 0.5


@dataclass
class Patch:
    origin_x: int
    origin_y: int
    size: int
    pixels: np.ndarray
    tissue_fraction: float


# region [raster files]

def load_image(path: str) -> RasterImage:
    """
    Read a binary PPM (P6, 8-bit) raster
    """
    with Image.open(path) as image:
        return RasterImage(np.array(image.convert("RGB")))

def save_image(image: RasterImage, path: str) -> None:
    Image.fromarray(image.pixels).save(path, format="PPM")

def load_mask(path: str) -> Mask:
    """
    Read a binary PGM (P5, 8-bit) mask; value v maps to probability v/255
    """
    with Image.open(path) as image:
        return Mask(np.array(image.convert("L"), dtype=np.float64) / 255.0)

def save_mask(mask: Mask, path: str) -> None:
    levels = np.rint(mask.values * 255.0).astype(np.uint8)
    Image.fromarray(levels).save(path, format="PPM")

# endregion


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if np.shape(a) != np.shape(b):
        raise DimensionMismatchException(f"shapes {np.shape(a)} and {np.shape(b)} differ")

def _values(mask: Union[Mask, np.ndarray, float, Sequence[float]]) -> np.ndarray:
    if isinstance(mask, Mask):
        return mask.values
    return np.asarray(mask, dtype=np.float64)

def detect_tissue(image: RasterImage, white_threshold: int = 220) -> Mask:
    """
    Binary tissue mask: a pixel is background when all three channels exceed `white_threshold`
    """
    background = image.pixels.min(axis=2) > white_threshold
    return Mask((~background).astype(np.float64))

def tile_image(
        image: RasterImage,
        tissue: Mask,
        patch_size: int = 1024,
        min_tissue_fraction: float = 0.25
    ) -> list[Patch]:
    """
    Cut the image into grid-aligned, non-overlapping square patches.
    Partial edge tiles are dropped, as are tiles with too little tissue.

    :return: patches ordered by (origin_y, origin_x)
    :raises: ImageSmallerThanPatchException if not even one full tile fits
    """
    if patch_size < 1:
        raise ValueError("patch_size must be at least 1")
    if (tissue.height, tissue.width) != (image.height, image.width):
        raise DimensionMismatchException(
            f"tissue mask {tissue.width}x{tissue.height} does not match image {image.width}x{image.height}"
        )
    if image.width < patch_size or image.height < patch_size:
        raise ImageSmallerThanPatchException(
            f"image {image.width}x{image.height} is smaller than patch size {patch_size}"
        )

    patches = []
    for y in range(0, image.height - patch_size + 1, patch_size):
        for x in range(0, image.width - patch_size + 1, patch_size):
            fraction = float(tissue.binary[y:y + patch_size, x:x + patch_size].mean())
            if fraction < min_tissue_fraction:
                continue
            patches.append(Patch(
                origin_x=x,
                origin_y=y,
                size=patch_size,
                pixels=image.pixels[y:y + patch_size, x:x + patch_size].copy(),
                tissue_fraction=fraction
            ))
    return patches

def _normalized_histogram(values: np.ndarray, bins: int, bin_width: int) -> np.ndarray:
    indices = np.minimum(values.astype(np.int64) // bin_width, bins - 1)
    counts = np.bincount(indices.ravel(), minlength=bins).astype(np.float64)
    return counts / counts.sum()

def patch_descriptor(patch: Patch, dim: int = DESCRIPTOR_DIM) -> np.ndarray:
    """
    Deterministic 64-d colour/texture descriptor of a patch.

    Layout: 16-bin intensity histograms for R, G, B (48); channel means then
    channel standard deviations scaled to [0, 1] (6); 8-bin histogram of
    horizontal-difference gradient magnitudes (8); tissue fraction (1);
    edge density (1).

    :raises: UnsupportedDimException for any other `dim`
    """
    if dim != DESCRIPTOR_DIM:
        raise UnsupportedDimException(
            f"built-in descriptor is {DESCRIPTOR_DIM}-d; supply {dim}-d features through features.csv"
        )
    pixels = np.asarray(patch.pixels)
    channels = pixels.astype(np.float64)

    histograms = [_normalized_histogram(pixels[:, :, c], INTENSITY_BINS, 256 // INTENSITY_BINS)
                  for c in range(3)]
    means = channels.reshape(-1, 3).mean(axis=0) / 255.0
    # 127.5 is the largest possible std of 8-bit values
    stds = channels.reshape(-1, 3).std(axis=0) / 127.5

    gray = channels.mean(axis=2)
    # last column has no right neighbour and gets magnitude 0
    gradient = np.zeros_like(gray)
    gradient[:, :-1] = np.abs(np.diff(gray, axis=1))
    gradient_histogram = _normalized_histogram(gradient, GRADIENT_BINS, 256 // GRADIENT_BINS)
    edge_density = float(np.mean(gradient > EDGE_THRESHOLD))

    return np.concatenate([
        *histograms,
        means,
        stds,
        gradient_histogram,
        [patch.tissue_fraction, edge_density]
    ])

def describe_patches(patches: Sequence[Patch], dim: int = DESCRIPTOR_DIM, workers: int = 1) -> np.ndarray:
    """
    Descriptors for many patches, one row per patch in (origin_y, origin_x) order
    """
    ordered = sorted(patches, key=lambda p: (p.origin_y, p.origin_x))
    if not ordered:
        return np.zeros((0, dim))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(lambda p: patch_descriptor(p, dim), ordered))
    else:
        rows = [patch_descriptor(p, dim) for p in ordered]
    return np.vstack(rows)


# region [segmentation losses and metrics]

def dice_score(a: Mask, b: Mask) -> float:
    """
    Dice overlap 2|A∩B|/(|A|+|B|) of two binary masks; two empty masks score 1.0
    """
    _check_same_shape(a.values, b.values)
    a_bin, b_bin = a.binary, b.binary
    total = int(a_bin.sum()) + int(b_bin.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a_bin, b_bin).sum()) / total

def mean_dice(pairs: Iterable[Tuple[Mask, Mask]]) -> float:
    scores = [dice_score(pred, truth) for pred, truth in pairs]
    if not scores:
        raise ValueError("no mask pairs given")
    return float(np.mean(scores))

def dice_loss(pred: Mask, truth: Mask) -> float:
    """
    Soft Dice loss 1 − (2Σpt + ε)/(Σp + Σt + ε)
    """
    p, t = _values(pred), _values(truth)
    _check_same_shape(p, t)
    return 1.0 - (2.0 * float(np.sum(p * t)) + SOFT_DICE_EPS) / \
        (float(np.sum(p)) + float(np.sum(t)) + SOFT_DICE_EPS)

def bce_loss(pred, truth) -> float:
    """
    Mean binary cross-entropy; predictions are clamped to [1e-7, 1 − 1e-7]
    """
    p, t = _values(pred), _values(truth)
    _check_same_shape(p, t)
    p = np.clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    return float(np.mean(-(t * np.log(p) + (1.0 - t) * np.log(1.0 - p))))

def multitask_loss(
        whole_seg: Tuple[Mask, Mask],
        class_logit: Tuple[float, float],
        tumor_seg: Optional[Tuple[Mask, Mask]] = None,
        weights: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    ) -> float:
    """
    Weighted sum of the three branch losses: whole-tissue segmentation,
    tumor segmentation (tumor-positive samples only, otherwise 0) and slide classification.

    :param whole_seg: (prediction, truth) masks
    :param class_logit: (probability, label)
    :param tumor_seg: (prediction, truth) masks, or None for negative samples
    :param weights: (w1, w2, w3)
    """
    w1, w2, w3 = weights
    whole_term = dice_loss(*whole_seg) + bce_loss(*whole_seg)
    tumor_term = 0.0 if tumor_seg is None else dice_loss(*tumor_seg) + bce_loss(*tumor_seg)
    class_term = bce_loss(*class_logit)
    return w1 * whole_term + w2 * tumor_term + w3 * class_term

def tumor_area_fraction(seg: Mask, tissue: Mask) -> float:
    """
    Share of the tissue area covered by the tumor segmentation

    :raises: EmptyTissueMaskException if the tissue mask has no pixels
    """
    _check_same_shape(seg.values, tissue.values)
    tissue_bin = tissue.binary
    tissue_pixels = int(tissue_bin.sum())
    if tissue_pixels == 0:
        raise EmptyTissueMaskException("tissue mask is empty")
    return int(np.logical_and(seg.binary, tissue_bin).sum()) / tissue_pixels

def slide_positive(fraction: float, threshold: float = 0.05) -> bool:
    """
    Slide is called tumor-positive when the tumor occupies more than `threshold` of the tissue
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction {fraction} outside [0, 1]")
    return fraction > threshold

# endregion


# region [features.csv]

def write_features_csv(rows: Iterable[Tuple[str, int, int, np.ndarray]], path: str) -> None:
    """
    Write `slide_id,patch_x,patch_y,f0,...,f{d-1}` rows

    :param rows: (slide_id, patch_x, patch_y, feature vector) tuples
    """
    rows = list(rows)
    dim = len(rows[0][3]) if rows else DESCRIPTOR_DIM
    columns = ["slide_id", "patch_x", "patch_y"] + [f"f{i}" for i in range(dim)]
    records = []
    for slide_id, x, y, features in rows:
        if len(features) != dim:
            raise FeatureFileException(f"slide {slide_id}: feature width {len(features)} != {dim}")
        records.append([slide_id, str(int(x)), str(int(y))] +
                       [stringworks.format_float(v) for v in features])
    pd.DataFrame(records, columns=columns).to_csv(path, index=False, encoding="utf-8")

def read_features_csv(path: str) -> dict[str, Tuple[np.ndarray, np.ndarray]]:
    """
    Read features.csv; the feature width is inferred from the header

    :return: slide_id -> (coords n×2 as (x, y), features n×d), slides in sorted order
    :raises: FeatureFileException on a malformed header or non-finite values
    """
    table = pd.read_csv(path, dtype={"slide_id": str}, keep_default_na=False, encoding="utf-8")
    head = list(table.columns[:3])
    feature_columns = list(table.columns[3:])
    if head != ["slide_id", "patch_x", "patch_y"] or \
       feature_columns != [f"f{i}" for i in range(len(feature_columns))] or not feature_columns:
        raise FeatureFileException(f"{path}: header must be `slide_id,patch_x,patch_y,f0,...,f{{d-1}}`")

    features = table[feature_columns].to_numpy(dtype=np.float64)
    if not np.all(np.isfinite(features)):
        raise FeatureFileException(f"{path}: non-finite feature values")
    coords = table[["patch_x", "patch_y"]].to_numpy(dtype=np.int64)
    slide_ids = table["slide_id"].astype(str).to_numpy()

    slides = {}
    for slide_id in sorted(set(slide_ids)):
        rows = slide_ids == slide_id
        slides[slide_id] = (coords[rows], features[rows])
    return slides

# endregion
