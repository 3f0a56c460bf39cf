"""Face records, landmark alignment, JSONL manifests and batch loading."""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

from phenofactor import kernels
from phenofactor.errors import BatchTooLarge, DegenerateLandmarks, EmptyManifest
from phenofactor.phenotype import PhenotypeVector

log = logging.getLogger(__name__)

CANONICAL_FRAME = Path(__file__).parent / "data" / "canonical_68.json"


@dataclass
class FaceRecord:
    image: np.ndarray
    landmarks: np.ndarray | None = None
    segmentation: np.ndarray | None = None
    classes: dict[str, int] | None = None
    theta: PhenotypeVector | None = None
    split: str = "train"
    image_path: str | None = None
    attributes: dict[str, float] = field(default_factory=dict)
    ground_truth: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def resolution(self) -> int:
        return self.image.shape[0]


@dataclass
class ManifestEntry:
    path: str
    landmarks_path: str
    mask_path: str | None = None
    theta: list[float] | None = None
    split: str = "train"
    attributes: dict[str, float] | None = None

    def to_json(self) -> str:
        d = {"path": self.path, "landmarks_path": self.landmarks_path}
        if self.mask_path is not None:
            d["mask_path"] = self.mask_path
        if self.theta is not None:
            d["theta"] = [float(v) for v in self.theta]
        d["split"] = self.split
        if self.attributes:
            d["attributes"] = {k: float(v) for k, v in sorted(self.attributes.items())}
        return json.dumps(d)


@dataclass
class Manifest:
    """Immutable list of records sharing one resolution; paths are relative to ``root``."""

    entries: list[ManifestEntry]
    resolution: int
    supervised: bool
    source_name: str
    root: Path = Path(".")
    skipped: list[tuple[str, str]] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def __post_init__(self):
        paths = [e.path for e in self.entries]
        if len(set(paths)) != len(paths):
            raise ValueError("manifest contains duplicate paths")

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    def split(self, name: str) -> "Manifest":
        return Manifest(
            [e for e in self.entries if e.split == name],
            self.resolution,
            self.supervised,
            self.source_name,
            self.root,
        )

    def load_record(self, i: int) -> FaceRecord:
        e = self.entries[i]
        image = np.asarray(Image.open(self.resolve(e.path)).convert("RGB"))
        landmarks = read_landmarks(self.resolve(e.landmarks_path))
        seg = classes = None
        if e.mask_path is not None:
            seg, classes = read_mask(self.resolve(e.mask_path))
        theta = PhenotypeVector.from_flat(e.theta) if e.theta is not None else None
        return FaceRecord(
            image=image,
            landmarks=landmarks,
            segmentation=seg,
            classes=classes,
            theta=theta,
            split=e.split,
            image_path=e.path,
            attributes=dict(e.attributes or {}),
        )

    def load_images(self) -> np.ndarray:
        """All images as an N x H x W x 3 uint8 array."""
        return np.stack([
            np.asarray(Image.open(self.resolve(e.path)).convert("RGB")) for e in self.entries
        ])

    def thetas(self) -> np.ndarray:
        return np.stack([np.asarray(e.theta, dtype=np.float64) for e in self.entries])

    def write(self, path: str | os.PathLike) -> None:
        path = Path(path)
        header = {
            "resolution": self.resolution,
            "supervised": self.supervised,
            "source_name": self.source_name,
        }
        with open(path, "w") as fh:
            fh.write(json.dumps({"manifest": header}) + "\n")
            for e in self.entries:
                fh.write(e.to_json() + "\n")

    @classmethod
    def read(cls, path: str | os.PathLike) -> "Manifest":
        path = Path(path)
        entries, header = [], {}
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                d = json.loads(line)
                if "manifest" in d:
                    header = d["manifest"]
                    continue
                entries.append(ManifestEntry(
                    path=d["path"],
                    landmarks_path=d["landmarks_path"],
                    mask_path=d.get("mask_path"),
                    theta=d.get("theta"),
                    split=d.get("split", "train"),
                    attributes=d.get("attributes"),
                ))
        if not entries:
            raise EmptyManifest(f"{path} has no records")
        return cls(
            entries,
            int(header.get("resolution", 0)),
            bool(header.get("supervised", all(e.theta is not None for e in entries))),
            header.get("source_name", path.stem),
            path.parent,
        )

    def with_thetas(self, thetas) -> "Manifest":
        entries = [
            ManifestEntry(e.path, e.landmarks_path, e.mask_path, list(map(float, t)), e.split, e.attributes)
            for e, t in zip(self.entries, thetas)
        ]
        return Manifest(entries, self.resolution, True, self.source_name, self.root)


def read_landmarks(path) -> np.ndarray:
    with open(path) as fh:
        return np.asarray(json.load(fh), dtype=np.float64)


def write_landmarks(path, landmarks) -> None:
    with open(path, "w") as fh:
        json.dump([[round(float(x), 6), round(float(y), 6)] for x, y in landmarks], fh)


def read_mask(path) -> tuple[np.ndarray, dict[str, int]]:
    path = Path(path)
    labels = np.asarray(Image.open(path)).astype(np.int64)
    sidecar = path.parent / "classes.json"
    classes = None
    if sidecar.exists():
        with open(sidecar) as fh:
            classes = {name: int(v) for name, v in json.load(fh).items()}
    return labels, classes


def write_mask(path, labels, classes=None) -> None:
    path = Path(path)
    Image.fromarray(np.asarray(labels, dtype=np.uint8), mode="L").save(path)
    if classes is not None:
        sidecar = path.parent / "classes.json"
        if not sidecar.exists():
            with open(sidecar, "w") as fh:
                json.dump(dict(sorted(classes.items(), key=lambda kv: kv[1])), fh, indent=1)


def load_reference_landmarks(path=CANONICAL_FRAME, resolution: int = 256) -> np.ndarray:
    """Canonical landmark frame (stored in unit coordinates) scaled to ``resolution``."""
    with open(path) as fh:
        pts = np.asarray(json.load(fh)["landmarks"], dtype=np.float64)
    return pts * resolution


# -- alignment ---------------------------------------------------------------

def similarity_transform(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Least-squares rotation + uniform scale + translation taking ``src`` onto ``dst``.

    Returns a 2 x 3 matrix. Closed-form Umeyama solution without reflection.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2:
        raise DegenerateLandmarks(f"landmark arrays must match and be N x 2: {src.shape} vs {dst.shape}")
    if src.shape[0] < 3:
        raise DegenerateLandmarks("need at least three correspondences")
    mu_s, mu_d = src.mean(0), dst.mean(0)
    sc, dc = src - mu_s, dst - mu_d
    var_s = (sc ** 2).sum() / len(src)
    if var_s < 1e-12 or np.linalg.matrix_rank(sc, tol=1e-9) < 2:
        raise DegenerateLandmarks("source landmarks are coincident or collinear")
    if np.linalg.matrix_rank(dc, tol=1e-9) < 2:
        raise DegenerateLandmarks("reference landmarks are coincident or collinear")
    cov = dc.T @ sc / len(src)
    u, s, vt = np.linalg.svd(cov)
    d = np.ones(2)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        d[-1] = -1
    rot = u @ np.diag(d) @ vt
    scale = (s * d).sum() / var_s
    t = mu_d - scale * rot @ mu_s
    return np.hstack([scale * rot, t[:, None]])


def apply_transform(matrix: np.ndarray, points: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    return points @ matrix[:, :2].T + matrix[:, 2]


def invert_transform(matrix: np.ndarray) -> np.ndarray:
    a = matrix[:, :2]
    ainv = np.linalg.inv(a)
    return np.hstack([ainv, (-ainv @ matrix[:, 2])[:, None]])


def align_face(image, landmarks, reference_landmarks, out_resolution: int):
    """Warp ``image`` so its landmarks best match the reference frame.

    Returns the aligned image (same dtype as the input) and the landmarks mapped
    through the same transform.
    """
    landmarks = np.asarray(landmarks, dtype=np.float64)
    reference_landmarks = np.asarray(reference_landmarks, dtype=np.float64)
    n = min(len(landmarks), len(reference_landmarks))
    m = similarity_transform(landmarks[:n], reference_landmarks[:n])
    warped = kernels.warp_affine_bilinear(
        np.asarray(image, dtype=np.float64), invert_transform(m), out_resolution, out_resolution
    )
    if np.asarray(image).dtype == np.uint8:
        warped = np.clip(np.rint(warped), 0, 255).astype(np.uint8)
    return warped, apply_transform(m, landmarks)


def warp_labels(labels, landmarks, reference_landmarks, out_resolution: int) -> np.ndarray:
    """Nearest-neighbour warp of a label map with the same transform ``align_face`` uses."""
    landmarks = np.asarray(landmarks, dtype=np.float64)
    n = min(len(landmarks), len(reference_landmarks))
    m = invert_transform(similarity_transform(landmarks[:n], np.asarray(reference_landmarks)[:n]))
    ys, xs = np.mgrid[0:out_resolution, 0:out_resolution] + 0.5
    sx = np.clip(np.floor(m[0, 0] * xs + m[0, 1] * ys + m[0, 2]), 0, labels.shape[1] - 1).astype(np.intp)
    sy = np.clip(np.floor(m[1, 0] * xs + m[1, 1] * ys + m[1, 2]), 0, labels.shape[0] - 1).astype(np.intp)
    return np.asarray(labels)[sy, sx]


# -- manifests -----------------------------------------------------------------

def _stem_index(directory: Path, suffixes: tuple[str, ...]) -> dict[str, Path]:
    if directory is None or not directory.exists():
        return {}
    return {p.stem: p for p in sorted(directory.iterdir()) if p.suffix.lower() in suffixes}


def build_manifest(
    image_dir,
    landmark_dir,
    mask_dir=None,
    theta: dict[str, list[float]] | None = None,
    resolution: int = 64,
    *,
    root=None,
    source_name: str | None = None,
    val_every: int = 0,
) -> Manifest:
    """One record per image whose required sidecars exist; the rest are skipped.

    ``theta`` maps image stems to phenotype vectors; when given, the manifest is
    supervised and images without a vector are skipped.
    """
    image_dir = Path(image_dir)
    landmark_dir = Path(landmark_dir)
    mask_dir = Path(mask_dir) if mask_dir is not None else None
    root = Path(root) if root is not None else image_dir.parent
    images = _stem_index(image_dir, (".png", ".jpg", ".jpeg"))
    lms = _stem_index(landmark_dir, (".json",))
    masks = _stem_index(mask_dir, (".png",)) if mask_dir is not None else {}
    entries, skipped = [], []
    for k, (stem, img_path) in enumerate(images.items()):
        if stem not in lms:
            skipped.append((stem, "missing landmarks"))
            continue
        if mask_dir is not None and stem not in masks:
            skipped.append((stem, "missing mask"))
            continue
        if theta is not None and stem not in theta:
            skipped.append((stem, "missing theta"))
            continue
        split = "val" if val_every and (k + 1) % val_every == 0 else "train"
        entries.append(ManifestEntry(
            path=os.path.relpath(img_path, root),
            landmarks_path=os.path.relpath(lms[stem], root),
            mask_path=os.path.relpath(masks[stem], root) if mask_dir is not None else None,
            theta=list(theta[stem]) if theta is not None else None,
            split=split,
        ))
    for stem, reason in skipped:
        log.info("skipping %s: %s", stem, reason)
    if not entries:
        raise EmptyManifest(f"no usable records under {image_dir}")
    return Manifest(entries, resolution, theta is not None, source_name or image_dir.name, root, skipped)


# -- batches -------------------------------------------------------------------

@dataclass
class Batch:
    images: np.ndarray          # N x H x W x 3 uint8
    theta: np.ndarray | None    # N x 512 or None
    indices: np.ndarray


class BatchLoader:
    """Seeded shuffling with epoch semantics over preloaded arrays."""

    def __init__(self, images: np.ndarray, batch_size: int, rng: np.random.Generator,
                 thetas: np.ndarray | None = None):
        if batch_size > len(images):
            raise BatchTooLarge(f"batch size {batch_size} exceeds {len(images)} records")
        self.images = images
        self.thetas = thetas
        self.batch_size = batch_size
        self.rng = rng
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0
        self.epoch = 0

    @classmethod
    def from_manifest(cls, manifest: Manifest, batch_size: int, rng: np.random.Generator):
        thetas = manifest.thetas() if manifest.supervised else None
        return cls(manifest.load_images(), batch_size, rng, thetas)

    def _reshuffle(self):
        self._order = self.rng.permutation(len(self.images))
        self._pos = 0
        self.epoch += 1

    def next(self) -> Batch:
        # drops the ragged tail so each epoch holds whole batches of distinct records
        if self._pos + self.batch_size > len(self._order):
            self._reshuffle()
        idx = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        theta = self.thetas[idx] if self.thetas is not None else None
        return Batch(self.images[idx], theta, idx)

    def epoch_batches(self) -> Iterator[Batch]:
        """One full epoch, including a short final batch when sizes don't divide."""
        self._reshuffle()
        while self._pos < len(self._order):
            idx = self._order[self._pos:self._pos + self.batch_size]
            self._pos += len(idx)
            theta = self.thetas[idx] if self.thetas is not None else None
            yield Batch(self.images[idx], theta, idx)

    def state(self) -> dict:
        return {
            "rng": self.rng.bit_generator.state,
            "order": self._order.tolist(),
            "pos": self._pos,
            "epoch": self.epoch,
        }

    def load_state(self, state: dict) -> None:
        self.rng.bit_generator.state = state["rng"]
        self._order = np.asarray(state["order"], dtype=np.int64)
        self._pos = state["pos"]
        self.epoch = state["epoch"]


def load_batch(manifest: Manifest, batch_size: int, rng: np.random.Generator) -> Batch:
    """Single shuffled batch (see ``BatchLoader`` for multi-epoch iteration)."""
    if batch_size > len(manifest):
        raise BatchTooLarge(f"batch size {batch_size} exceeds {len(manifest)} records")
    return BatchLoader.from_manifest(manifest, batch_size, rng).next()
