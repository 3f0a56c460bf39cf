"""Hand-crafted colour and shape measurements that make up the phenotype vector.

Skin and hair colour are summarised by three channel means over a region
mask: HSV value (melanin proxy, lighter is higher), HSV saturation (greyness
proxy) and the full-range BT.601 Cr channel (redness proxy). Eye, nose and
mouth shape come from embeddings of 64x64 patches cut around landmarks.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from PIL import Image
from scipy.spatial import ConvexHull

from phenofactor import kernels
from phenofactor.errors import (
    DimensionMismatch,
    EmbedderDimensionMismatch,
    EmptyMask,
    ImageTooSmall,
    MissingLandmarks,
)

PATCH_SIZE = 64

# Attribute order and block widths of the phenotype vector.
THETA_DIMS: dict[str, int] = {
    "skin": 3,
    "hair": 3,
    "left_eye": 125,
    "right_eye": 125,
    "nose": 128,
    "mouth": 128,
}
SHAPE_REGIONS = ("left_eye", "right_eye", "nose", "mouth")
COLOR_REGIONS = ("skin", "hair")

DEFAULT_CLASSES: dict[str, int] = {
    "background": 0,
    "skin": 1,
    "hair": 2,
    "eye": 3,
    "nose": 4,
    "mouth": 5,
}


@dataclass(frozen=True)
class LandmarkIndexMap:
    """Which landmark indices belong to which facial region.

    Defaults follow the common 68-point layout. ``left_eye`` is the eye on the
    image-left side (points 36-41).
    """

    regions: Mapping[str, Sequence[int]] = field(
        default_factory=lambda: {
            "jaw": tuple(range(0, 17)),
            "brows": tuple(range(17, 27)),
            "nose": tuple(range(27, 36)),
            "left_eye": tuple(range(36, 42)),
            "right_eye": tuple(range(42, 48)),
            "mouth": tuple(range(48, 60)),
            "inner_mouth": tuple(range(60, 68)),
        }
    )
    skin_hull: Sequence[str] = ("jaw", "brows")
    skin_exclude: Sequence[str] = ("left_eye", "right_eye", "mouth")

    @property
    def n_points(self) -> int:
        return 1 + max(i for idx in self.regions.values() for i in idx)

    def indices(self, *names: str) -> list[int]:
        out: list[int] = []
        for name in names:
            if name not in self.regions:
                raise MissingLandmarks(f"no landmark group named {name!r}")
            out.extend(self.regions[name])
        return out


DEFAULT_INDEX_MAP = LandmarkIndexMap()


@dataclass(frozen=True)
class ColorStats:
    v_mean: float
    s_mean: float
    cr_mean: float

    def as_array(self) -> np.ndarray:
        return np.array([self.v_mean, self.s_mean, self.cr_mean], dtype=np.float64)


@dataclass
class RegionMask:
    bits: np.ndarray
    region_kind: str

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def count(self) -> int:
        return int(self.bits.sum())


@dataclass
class FacePatch:
    pixels: np.ndarray
    region_kind: str
    source_center: tuple[float, float]


@dataclass
class PhenotypeVector:
    skin: np.ndarray
    hair: np.ndarray
    left_eye: np.ndarray
    right_eye: np.ndarray
    nose: np.ndarray
    mouth: np.ndarray

    def __post_init__(self):
        for name, dim in THETA_DIMS.items():
            block = np.asarray(getattr(self, name), dtype=np.float64)
            if block.shape != (dim,):
                raise DimensionMismatch(f"{name} block has shape {block.shape}, expected ({dim},)")
            setattr(self, name, block)

    def block(self, name: str) -> np.ndarray:
        return getattr(self, name)

    def flatten(self) -> np.ndarray:
        return np.concatenate([getattr(self, name) for name in THETA_DIMS])

    @classmethod
    def from_flat(cls, values) -> "PhenotypeVector":
        values = np.asarray(values, dtype=np.float64)
        total = sum(THETA_DIMS.values())
        if values.shape != (total,):
            raise DimensionMismatch(f"expected {total} values, got shape {values.shape}")
        blocks, offset = {}, 0
        for name, dim in THETA_DIMS.items():
            blocks[name] = values[offset:offset + dim]
            offset += dim
        return cls(**blocks)


def region_color_stats(image: np.ndarray, mask: RegionMask | np.ndarray) -> ColorStats:
    bits = mask.bits if isinstance(mask, RegionMask) else np.asarray(mask)
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DimensionMismatch(f"expected an H x W x 3 image, got {image.shape}")
    if bits.shape != image.shape[:2]:
        raise DimensionMismatch(f"mask {bits.shape} does not match image {image.shape[:2]}")
    image = np.clip(np.rint(image), 0, 255).astype(np.uint8) if image.dtype != np.uint8 else image
    count, sv, ss, scr = kernels.masked_color_sums(image, bits.astype(np.uint8))
    if count == 0:
        raise EmptyMask("region mask has no set pixels")
    return ColorStats(sv / count, ss / count, scr / count)


def convex_hull_polygon(points: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    hull = ConvexHull(points)
    return points[hull.vertices]


def hull_mask(points: np.ndarray, height: int, width: int) -> np.ndarray:
    return kernels.fill_convex_polygon(height, width, convex_hull_polygon(points))


def _check_landmarks(landmarks: np.ndarray, index_map: LandmarkIndexMap) -> np.ndarray:
    landmarks = np.asarray(landmarks, dtype=np.float64)
    if landmarks.ndim != 2 or landmarks.shape[1] != 2 or landmarks.shape[0] < index_map.n_points:
        raise MissingLandmarks(
            f"need {index_map.n_points} (x, y) landmarks, got array of shape {landmarks.shape}"
        )
    return landmarks


def skin_region(
    segmentation: np.ndarray,
    landmarks: np.ndarray,
    classes: Mapping[str, int] = DEFAULT_CLASSES,
    index_map: LandmarkIndexMap = DEFAULT_INDEX_MAP,
) -> RegionMask:
    """Skin-class pixels inside the jaw/brow hull, minus eye and mouth hulls."""
    landmarks = _check_landmarks(landmarks, index_map)
    h, w = segmentation.shape
    bits = segmentation == classes["skin"]
    if not bits.any():
        raise EmptyMask("segmentation has no skin pixels")
    bits &= hull_mask(landmarks[index_map.indices(*index_map.skin_hull)], h, w)
    for name in index_map.skin_exclude:
        bits &= ~hull_mask(landmarks[index_map.indices(name)], h, w)
    if not bits.any():
        raise EmptyMask("restricted skin region is empty")
    return RegionMask(bits, "skin")


def hair_region(segmentation: np.ndarray, classes: Mapping[str, int] = DEFAULT_CLASSES) -> RegionMask:
    bits = segmentation == classes["hair"]
    if not bits.any():
        raise EmptyMask("segmentation has no hair pixels")
    return RegionMask(bits, "hair")


def patch_window(center: tuple[float, float], height: int, width: int, size: int = PATCH_SIZE):
    """Top-left (row, col) of a ``size`` window centred on ``center``, clamped in-bounds."""
    if height < size or width < size:
        raise ImageTooSmall(f"image {height}x{width} is smaller than a {size}px patch")
    cx, cy = center
    col = int(np.floor(cx - size / 2 + 0.5))
    row = int(np.floor(cy - size / 2 + 0.5))
    col = min(max(col, 0), width - size)
    row = min(max(row, 0), height - size)
    return row, col


def extract_patch(
    image: np.ndarray,
    landmarks: np.ndarray,
    region_kind: str,
    index_map: LandmarkIndexMap = DEFAULT_INDEX_MAP,
) -> FacePatch:
    landmarks = np.asarray(landmarks, dtype=np.float64)
    idx = index_map.indices(region_kind)
    if landmarks.ndim != 2 or landmarks.shape[0] <= max(idx):
        raise MissingLandmarks(f"landmarks for {region_kind!r} are missing")
    cx, cy = landmarks[idx].mean(axis=0)
    h, w = image.shape[:2]
    row, col = patch_window((cx, cy), h, w)
    pixels = np.ascontiguousarray(image[row:row + PATCH_SIZE, col:col + PATCH_SIZE, :3])
    return FacePatch(pixels, region_kind, (float(cx), float(cy)))


def resize_for_patches(image: np.ndarray, landmarks: np.ndarray, resolution: int):
    """Resample a square image and its landmarks into the patch working frame."""
    h, w = image.shape[:2]
    if (h, w) == (resolution, resolution):
        return image, np.asarray(landmarks, dtype=np.float64)
    resized = Image.fromarray(np.asarray(image, dtype=np.uint8)).resize(
        (resolution, resolution), Image.BILINEAR
    )
    scale = np.array([resolution / w, resolution / h])
    return np.asarray(resized), np.asarray(landmarks, dtype=np.float64) * scale


def compute_phenotype(
    record,
    embedders: Mapping[str, object],
    *,
    classes: Mapping[str, int] | None = None,
    index_map: LandmarkIndexMap = DEFAULT_INDEX_MAP,
    patch_resolution: int = 256,
) -> PhenotypeVector:
    """Assemble the full phenotype vector for one face record.

    Colour blocks are measured on the record's own pixels. Shape patches are
    cut after resampling to ``patch_resolution`` so a 64px patch covers the
    same fraction of the face regardless of the record's resolution.
    """
    if record.segmentation is None or record.landmarks is None:
        raise MissingLandmarks("record needs a segmentation and landmarks")
    classes = classes or record.classes or DEFAULT_CLASSES
    image = record.image
    blocks = {
        "skin": region_color_stats(image, skin_region(record.segmentation, record.landmarks, classes, index_map)).as_array(),
        "hair": region_color_stats(image, hair_region(record.segmentation, classes)).as_array(),
    }
    work_img, work_lm = resize_for_patches(image, record.landmarks, patch_resolution)
    for region in SHAPE_REGIONS:
        if region not in embedders:
            raise EmbedderDimensionMismatch(f"no embedder supplied for {region!r}")
        embedder = embedders[region]
        if embedder.embed_dim != THETA_DIMS[region]:
            raise EmbedderDimensionMismatch(
                f"{region} embedder has width {embedder.embed_dim}, expected {THETA_DIMS[region]}"
            )
        patch = extract_patch(work_img, work_lm, region, index_map)
        blocks[region] = np.asarray(embedder.embed(patch), dtype=np.float64)
    return PhenotypeVector(**blocks)
