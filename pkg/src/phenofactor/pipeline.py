"""Manifest-level glue shared by the CLI and the end-to-end tests: patch
extraction, embedder and feature-net training, and phenotype computation."""
from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np

from phenofactor.dataset import Manifest
from phenofactor.embedders import AttributeEmbedder, EmbedderConfig, train_embedder
from phenofactor.features import FeatureNet, train_feature_net
from phenofactor.networks import images_to_tensor
from phenofactor.phenotype import SHAPE_REGIONS, THETA_DIMS, compute_phenotype, extract_patch, resize_for_patches

log = logging.getLogger(__name__)

# attribute key in the manifest -> binary label per shape region; the first
# key found wins, so toy and real-data names can coexist
LABEL_KEYS = {
    "left_eye": ("narrow_eye_l", "Narrow_Eyes"),
    "right_eye": ("narrow_eye_r", "Narrow_Eyes"),
    "nose": ("big_nose", "Big_Nose"),
    "mouth": ("big_lips", "Big_Lips"),
}
FEATURE_TARGETS = ("skin_tone", "hair_tone", "eye_width_l", "eye_width_r", "nose_scale", "mouth_scale")


def region_patches(manifest: Manifest, region: str, patch_resolution: int = 256) -> np.ndarray:
    out = []
    for i in range(len(manifest)):
        rec = manifest.load_record(i)
        img, lm = resize_for_patches(rec.image, rec.landmarks, patch_resolution)
        out.append(extract_patch(img, lm, region).pixels)
    return np.stack(out)


def region_labels(manifest: Manifest, region: str) -> np.ndarray:
    keys = LABEL_KEYS[region]
    labels = []
    for e in manifest.entries:
        attrs = e.attributes or {}
        key = next((k for k in keys if k in attrs), None)
        if key is None:
            raise KeyError(f"{e.path} has none of the label attributes {keys}")
        labels.append(float(attrs[key] > 0.5))
    return np.asarray(labels)


def train_region_embedders(manifest: Manifest, config: EmbedderConfig | None = None,
                           out_dir=None) -> dict[str, AttributeEmbedder]:
    config = config or EmbedderConfig()
    embedders = {}
    for k, region in enumerate(SHAPE_REGIONS):
        cfg = EmbedderConfig(**{**config.__dict__, "seed": config.seed + k})
        model = train_embedder(region_patches(manifest, region), region_labels(manifest, region),
                               region, THETA_DIMS[region], cfg, LABEL_KEYS[region][-1])
        log.info("%s embedder: final training loss %.4f", region, model.final_loss)
        embedders[region] = model
    if out_dir is not None:
        save_embedders(embedders, out_dir)
    return embedders


def save_embedders(embedders: dict, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for region, model in embedders.items():
        model.save(out_dir / f"{region}.pt")


def load_embedders(directory) -> dict[str, AttributeEmbedder]:
    directory = Path(directory)
    return {region: AttributeEmbedder.load(directory / f"{region}.pt") for region in SHAPE_REGIONS}


def feature_targets(manifest: Manifest) -> np.ndarray:
    rows = []
    for e in manifest.entries:
        attrs = e.attributes or {}
        rows.append([float(attrs[k]) for k in FEATURE_TARGETS if k in attrs])
    widths = {len(r) for r in rows}
    if widths != {len(FEATURE_TARGETS)}:
        raise KeyError(f"feature-net targets {FEATURE_TARGETS} missing from some records")
    return np.asarray(rows)


def train_manifest_feature_net(manifest: Manifest, epochs: int = 40, seed: int = 0) -> FeatureNet:
    images = images_to_tensor(manifest.load_images())
    return train_feature_net(images, feature_targets(manifest), epochs=epochs, seed=seed)


def compute_manifest_thetas(manifest: Manifest, embedders) -> Manifest:
    thetas = [compute_phenotype(manifest.load_record(i), embedders).flatten() for i in range(len(manifest))]
    return manifest.with_thetas(thetas)


def write_json(path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def prepare_dataset(image_dir, landmark_dir, out_dir, resolution: int, mask_dir=None,
                    attributes: dict | None = None, val_every: int = 0) -> Manifest:
    """Align every image with landmarks to the canonical frame and write a manifest.

    Records lacking a landmark (or, when masks are requested, a mask) file are
    skipped and listed in the manifest's ``skipped`` field.
    """
    from PIL import Image

    from phenofactor.dataset import (
        align_face,
        build_manifest,
        load_reference_landmarks,
        read_landmarks,
        read_mask,
        warp_labels,
        write_landmarks,
        write_mask,
    )

    image_dir, landmark_dir = Path(image_dir), Path(landmark_dir)
    out_dir = Path(out_dir)
    for sub in ("images", "landmarks", "masks"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    reference = load_reference_landmarks(resolution=resolution)
    for img_path in sorted(image_dir.iterdir()):
        if img_path.suffix.lower() not in (".png", ".jpg", ".jpeg"):
            continue
        lm_path = landmark_dir / f"{img_path.stem}.json"
        mask_path = Path(mask_dir) / f"{img_path.stem}.png" if mask_dir is not None else None
        if not lm_path.exists() or (mask_path is not None and not mask_path.exists()):
            continue
        image = np.asarray(Image.open(img_path).convert("RGB"))
        landmarks = read_landmarks(lm_path)
        aligned, aligned_lm = align_face(image, landmarks, reference, resolution)
        Image.fromarray(aligned).save(out_dir / "images" / f"{img_path.stem}.png")
        write_landmarks(out_dir / "landmarks" / f"{img_path.stem}.json", aligned_lm)
        if mask_path is not None:
            labels, classes = read_mask(mask_path)
            write_mask(out_dir / "masks" / f"{img_path.stem}.png",
                       warp_labels(labels, landmarks, reference, resolution), classes)
    manifest = build_manifest(image_dir, landmark_dir, mask_dir, resolution=resolution, val_every=val_every)
    # re-point the surviving records at the aligned copies
    entries = []
    for e in manifest.entries:
        stem = Path(e.path).stem
        e.path = f"images/{stem}.png"
        e.landmarks_path = f"landmarks/{stem}.json"
        e.mask_path = f"masks/{stem}.png" if mask_dir is not None else None
        if attributes is not None and stem in attributes:
            e.attributes = dict(attributes[stem])
        entries.append(e)
    out = Manifest(entries, resolution, False, manifest.source_name, out_dir, manifest.skipped)
    out.write(out_dir / "manifest.jsonl")
    return out
