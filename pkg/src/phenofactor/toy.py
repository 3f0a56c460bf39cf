"""Desk-scale end-to-end experiment on the toy corpus: corpus generation,
embedders, phenotype vectors, both training stages and the colour sweeps."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.stats import spearmanr

from phenofactor.dataset import Manifest
from phenofactor.embedders import EmbedderConfig
from phenofactor.control import set_attribute_from_theta
from phenofactor.evaluation import RegionValuePredictor
from phenofactor.features import FeatureNet
from phenofactor.networks import NetworkBundle, images_to_tensor
from phenofactor.phenotype import hair_region, region_color_stats, skin_region
from phenofactor.pipeline import (
    compute_manifest_thetas,
    load_embedders,
    train_manifest_feature_net,
    train_region_embedders,
)
from phenofactor.synthetic import ToyFaceParams, hair_color, render_toy_face, skin_color, write_toy_corpus
from phenofactor.training import TrainConfig, child_rng, configure_determinism, train_stage1, train_stage2

log = logging.getLogger(__name__)

SWEEP_TONES = (0.0, 0.25, 0.5, 0.75, 1.0)


def neutral_params(skin_tone: float = 0.5, hair_tone: float = 0.5) -> ToyFaceParams:
    return ToyFaceParams(skin_color(skin_tone), hair_color(hair_tone), 1.0, 1.0, 1.0, 1.0, (0.0, 0.0), 0)


def color_theta_sweep(attribute: str, tones=SWEEP_TONES, resolution: int = 32) -> np.ndarray:
    """Colour-statistic θ blocks measured on neutral faces rendered at each tone."""
    rows = []
    for t in tones:
        if attribute == "skin":
            rec = render_toy_face(neutral_params(skin_tone=t), resolution)
            mask = skin_region(rec.segmentation, rec.landmarks, rec.classes)
        elif attribute == "hair":
            rec = render_toy_face(neutral_params(hair_tone=t), resolution)
            mask = hair_region(rec.segmentation, rec.classes)
        else:
            raise ValueError(f"colour sweep is defined for skin and hair, not {attribute!r}")
        rows.append(region_color_stats(rec.image, mask).as_array())
    return np.stack(rows)


def color_predictors(manifest: Manifest) -> dict[str, RegionValuePredictor]:
    """Mean HSV value over each source image's skin and hair masks."""
    skin, hair = [], []
    for i in range(len(manifest)):
        rec = manifest.load_record(i)
        skin.append(skin_region(rec.segmentation, rec.landmarks, rec.classes).bits)
        hair.append(hair_region(rec.segmentation, rec.classes).bits)
    return {"skin": RegionValuePredictor(np.stack(skin)), "hair": RegionValuePredictor(np.stack(hair))}


@dataclass
class SweepResult:
    attribute: str
    levels: list[float]
    responses: dict[str, list[float]]   # predictor -> mean value per level
    spearman: float
    md: dict[str, float]                # other predictor -> mean |extreme difference|

    def to_dict(self) -> dict:
        return {"attribute": self.attribute, "levels": self.levels, "responses": self.responses,
                "spearman": self.spearman, "md": self.md}


@torch.no_grad()
def sweep_attribute(nets: NetworkBundle, images, attribute: str, theta_blocks, predictors,
                    batch_size: int = 32) -> SweepResult:
    """Set ``attribute`` to each θ block on every image and record predictor means."""
    x_all = images_to_tensor(np.asarray(images))
    per_level = {k: [] for k in predictors}
    per_image = {k: [] for k in predictors}
    for block in theta_blocks:
        vals = {k: [] for k in predictors}
        for start in range(0, len(x_all), batch_size):
            idx = np.arange(start, min(len(x_all), start + batch_size))
            z = set_attribute_from_theta(nets, nets.E_F(x_all[idx]), attribute, block)
            out = nets.G(nets.E_map(z), noise_mode="const")
            for k, pred in predictors.items():
                vals[k].append(pred(out, idx).double().numpy())
        for k in predictors:
            v = np.concatenate(vals[k])
            per_image[k].append(v)
            per_level[k].append(float(v.mean()))
    rho = float(spearmanr(np.arange(len(theta_blocks)), per_level[attribute]).statistic)
    md = {k: float(np.mean(np.abs(per_image[k][-1] - per_image[k][0]))) for k in predictors if k != attribute}
    return SweepResult(attribute, list(range(len(theta_blocks))), per_level, rho, md)


@dataclass
class ToyRun:
    root: Path
    manifest: Path
    embedders: Path
    feature_net: Path
    stage1: Path
    stage2: Path
    timings: dict[str, float] = field(default_factory=dict)

    @property
    def loss_logs(self) -> dict[str, Path]:
        return {"1": self.root / "stage1" / "stage1_losses.csv", "2": self.root / "stage2" / "stage2_losses.csv"}


def toy_train_config(seed: int = 0, stage: str = "1", steps: int | None = None, **overrides) -> TrainConfig:
    from phenofactor.config import preset_train_config

    if steps is not None:
        overrides["steps"] = steps
    return preset_train_config("toy", stage=stage, seed=seed, **overrides)


def run_toy_pipeline(out_dir, seed: int = 0, n: int = 200, resolution: int = 32,
                     stage1: TrainConfig | None = None, stage2: TrainConfig | None = None,
                     embedder_epochs: int = 12, feature_epochs: int = 40) -> ToyRun:
    """synth -> train-embedders -> metrics -> train stage 1 -> train stage 2."""
    configure_determinism(1)
    root = Path(out_dir)
    timings = {}
    t0 = time.perf_counter()
    data = root / "data"
    write_toy_corpus(data, n, resolution, child_rng(seed, "synth"))
    manifest = Manifest.read(data / "manifest.jsonl")
    train = manifest.split("train")
    timings["synth"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    emb_dir = root / "embedders"
    train_region_embedders(train, EmbedderConfig(epochs=embedder_epochs, seed=seed), emb_dir)
    feature_net = train_manifest_feature_net(train, epochs=feature_epochs, seed=seed)
    feature_net.save(emb_dir / "feature_net.pt")
    timings["embedders"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    supervised = compute_manifest_thetas(manifest, load_embedders(emb_dir))
    supervised.write(data / "manifest_theta.jsonl")
    timings["metrics"] = time.perf_counter() - t0

    supervised = Manifest.read(data / "manifest_theta.jsonl")
    train_c = supervised.split("train")
    feature_net = FeatureNet.load(emb_dir / "feature_net.pt")
    stage1 = stage1 or toy_train_config(seed, "1")
    stage2 = stage2 or toy_train_config(seed, "2")
    t0 = time.perf_counter()
    ck1 = train_stage1(stage1, train_c, train_c, feature_net, root / "stage1")
    timings["stage1"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    ck2 = train_stage2(stage2, ck1, train_c, train_c, feature_net, root / "stage2")
    timings["stage2"] = time.perf_counter() - t0
    return ToyRun(root, data / "manifest_theta.jsonl", emb_dir, emb_dir / "feature_net.pt", ck1, ck2, timings)
