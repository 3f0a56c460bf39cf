"""Photorealism (Frechet distance between Gaussian feature fits) and the
swap-based controllability protocol."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from phenofactor.errors import DegenerateInput, InsufficientImages
from phenofactor.features import feature_extract
from phenofactor.latent import swap_factor
from phenofactor.networks import NetworkBundle, images_to_tensor

log = logging.getLogger(__name__)

# bar-chart colours: target attribute on I+ / I-, and MD for the rest
SERIES_COLORS = {"c_pred_plus": "blue", "c_pred_minus": "orange", "md": "gray"}


def psd_sqrt(m: np.ndarray) -> np.ndarray:
    """Square root of a symmetric matrix: symmetrise, eigendecompose, clip negatives to 0."""
    m = 0.5 * (m + m.T)
    vals, vecs = np.linalg.eigh(m)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def product_sqrt(sigma_a: np.ndarray, sigma_b: np.ndarray) -> np.ndarray:
    """Symmetric square root S of sqrt(A) B sqrt(A).

    That matrix is similar to A B, so trace(S) is the trace of (A B)^(1/2)
    while every step stays in symmetric arithmetic.
    """
    ra = psd_sqrt(sigma_a)
    return psd_sqrt(ra @ sigma_b @ ra)


def gaussian_fit(features) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 2:
        raise DegenerateInput(f"need at least 2 feature rows, got {x.shape[0]}")
    return x.mean(axis=0), np.atleast_2d(np.cov(x, rowvar=False))


def frechet_distance(mu_a, sigma_a, mu_b, sigma_b) -> float:
    diff = np.asarray(mu_a) - np.asarray(mu_b)
    covmean_trace = np.trace(product_sqrt(sigma_a, sigma_b))
    return float(diff @ diff + np.trace(sigma_a) + np.trace(sigma_b) - 2.0 * covmean_trace)


def fid(features_a, features_b) -> float:
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    a = a[:, None] if a.ndim == 1 else a
    b = b[:, None] if b.ndim == 1 else b
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise DegenerateInput(f"need at least 2 rows per set, got {a.shape[0]} and {b.shape[0]}")
    if a.shape[1] != b.shape[1]:
        raise DegenerateInput(f"feature widths differ: {a.shape[1]} vs {b.shape[1]}")
    d = a.shape[1]
    if a.shape[0] <= d or b.shape[0] <= d:
        log.warning("FID with %d/%d samples in %d dims: covariance is rank-deficient", a.shape[0], b.shape[0], d)
    mu_a, s_a = gaussian_fit(a)
    mu_b, s_b = gaussian_fit(b)
    return frechet_distance(mu_a, s_a, mu_b, s_b)


def image_fid(images_a, images_b, feature_net) -> float:
    return fid(feature_extract(images_a, feature_net), feature_extract(images_b, feature_net))


# -- controllability ------------------------------------------------------------------

class RegionValuePredictor:
    """Mean HSV value over a region mask: a differentiable melanin proxy.

    ``masks`` holds one boolean H x W mask per source image. Called with
    generator-range images and the source indices they came from.
    """

    def __init__(self, masks):
        m = np.asarray(masks, dtype=bool)
        self.masks = torch.as_tensor(m[None] if m.ndim == 2 else m)

    def __call__(self, images: torch.Tensor, indices=None) -> torch.Tensor:
        v = ((images + 1.0) / 2.0).clamp(0, 1).amax(dim=1)
        if indices is None:
            masks = self.masks[:1].expand(len(images), -1, -1)
        else:
            masks = self.masks[torch.as_tensor(np.asarray(indices), dtype=torch.long)]
        masks = masks.to(v.dtype)
        return (v * masks).flatten(1).sum(1) / masks.flatten(1).sum(1).clamp_min(1.0)


@dataclass
class ControlReport:
    attribute: str
    c_pred_plus: float
    c_pred_minus: float
    md: dict[str, float] = field(default_factory=dict)
    n_images: int = 0

    def __post_init__(self):
        if self.attribute in self.md:
            raise ValueError("MD entries must exclude the target attribute")
        for k, v in [("c_pred_plus", self.c_pred_plus), ("c_pred_minus", self.c_pred_minus), *self.md.items()]:
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{k} = {v} lies outside [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def chart_rows(self) -> list[dict]:
        rows = [
            {"attribute": self.attribute, "series": "c_pred_plus", "color": SERIES_COLORS["c_pred_plus"],
             "label": f"C_pred(I+) {self.attribute}", "value": self.c_pred_plus},
            {"attribute": self.attribute, "series": "c_pred_minus", "color": SERIES_COLORS["c_pred_minus"],
             "label": f"C_pred(I-) {self.attribute}", "value": self.c_pred_minus},
        ]
        for other, v in sorted(self.md.items()):
            rows.append({"attribute": self.attribute, "series": "md", "color": SERIES_COLORS["md"],
                         "label": f"MD {other}", "value": v})
        return rows


def write_chart_csv(reports, path) -> None:
    """Bar-chart data: one row per bar, grouped by target attribute."""
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["attribute", "series", "color", "label", "value"])
        writer.writeheader()
        for r in reports:
            for row in r.chart_rows():
                writer.writerow({**row, "value": repr(float(row["value"]))})


@torch.no_grad()
def swapped_images(nets: NetworkBundle, x: torch.Tensor, attribute: str, theta_block) -> torch.Tensor:
    z = nets.E_F(x)
    block = torch.as_tensor(np.asarray(theta_block), dtype=z.dtype)
    code = nets.E_C.encode_block(attribute, block)
    return nets.G(nets.E_map(swap_factor(z, attribute, code, nets.scheme)), noise_mode="const")


@torch.no_grad()
def controllability_protocol(nets: NetworkBundle, images, attribute: str, v_plus_theta, v_minus_theta,
                             predictors: dict, n: int | None = 1000, batch_size: int = 32) -> ControlReport:
    """Swap ``attribute`` to v+ and v- for each image and score both outputs.

    ``predictors`` maps attribute name -> callable(images, source_indices)
    returning values in [0, 1]; the entry for ``attribute`` gives C_pred and
    the rest give MD.
    """
    if attribute not in predictors:
        raise KeyError(f"no predictor for target attribute {attribute!r}")
    x_all = images if isinstance(images, torch.Tensor) else images_to_tensor(np.asarray(images))
    n = len(x_all) if n is None else n
    if n < 1 or len(x_all) < n:
        raise InsufficientImages(f"protocol needs {n} images, {len(x_all)} given")
    dtype = next(nets.G.parameters()).dtype
    plus = {k: [] for k in predictors}
    minus = {k: [] for k in predictors}
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(n, start + batch_size))
        x = x_all[idx].to(dtype)
        i_plus = swapped_images(nets, x, attribute, v_plus_theta)
        i_minus = swapped_images(nets, x, attribute, v_minus_theta)
        for name, pred in predictors.items():
            plus[name].append(torch.as_tensor(pred(i_plus, idx)).double().numpy())
            minus[name].append(torch.as_tensor(pred(i_minus, idx)).double().numpy())
    plus = {k: np.concatenate(v) for k, v in plus.items()}
    minus = {k: np.concatenate(v) for k, v in minus.items()}
    md = {k: float(np.mean(np.abs(plus[k] - minus[k]))) for k in predictors if k != attribute}
    return ControlReport(
        attribute=attribute,
        c_pred_plus=float(np.mean(plus[attribute])),
        c_pred_minus=float(np.mean(minus[attribute])),
        md=md,
        n_images=n,
    )


class PatchPredictor:
    """Attribute-classifier probability on a region patch of generated images.

    Each generated image is resized to the patch working frame and the window
    is cut around the source image's landmark centroid for ``region``, the same
    way the phenotype metrics cut patches from real images.
    """

    def __init__(self, embedder, landmarks, region: str, resolution: int, patch_resolution: int = 256):
        from phenofactor.phenotype import PATCH_SIZE, DEFAULT_INDEX_MAP, patch_window

        self.embedder = embedder
        self.patch_resolution = patch_resolution
        self.size = PATCH_SIZE
        lms = np.asarray(landmarks, dtype=np.float64)
        lms = lms[None] if lms.ndim == 2 else lms
        scale = patch_resolution / resolution
        idx = DEFAULT_INDEX_MAP.indices(region)
        self.windows = [patch_window(tuple(lm[idx].mean(axis=0) * scale), patch_resolution, patch_resolution)
                        for lm in lms]

    def __call__(self, images: torch.Tensor, indices=None) -> torch.Tensor:
        import torch.nn.functional as F

        up = F.interpolate((images + 1.0) / 2.0, size=(self.patch_resolution,) * 2, mode="bilinear",
                           align_corners=False)
        idx = range(len(images)) if indices is None else np.asarray(indices)
        patches = []
        for k, i in enumerate(idx):
            r, c = self.windows[0 if indices is None else int(i)]
            patches.append(up[k, :, r:r + self.size, c:c + self.size])
        return torch.sigmoid(self.embedder(torch.stack(patches).clamp(0, 1)))
