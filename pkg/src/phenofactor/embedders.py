"""Compact binary-attribute classifiers whose bottleneck activations serve as
shape embeddings (eyes, nose, mouth) and whose outputs serve as attribute
predictors during evaluation."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from phenofactor.errors import EmptyDataset, ShapeMismatch, SingleClassDataset
from phenofactor.phenotype import PATCH_SIZE, FacePatch

log = logging.getLogger(__name__)

EMBEDDER_FORMAT_VERSION = 1
DEFAULT_LABELS = {
    "left_eye": "Narrow_Eyes",
    "right_eye": "Narrow_Eyes",
    "nose": "Big_Nose",
    "mouth": "Big_Lips",
}


@dataclass
class EmbedderConfig:
    epochs: int = 12
    batch_size: int = 32
    lr: float = 2e-3
    weight_decay: float = 1e-4
    seed: int = 0
    normalize_input: bool = True
    hflip: bool = False


class InvertedResidual(nn.Module):
    def __init__(self, in_ch, out_ch, stride, expand=4):
        super().__init__()
        hidden = in_ch * expand
        self.use_res = stride == 1 and in_ch == out_ch
        self.block = nn.Sequential(
            nn.Conv2d(in_ch, hidden, 1, bias=False),
            nn.GroupNorm(1, hidden),
            nn.ReLU6(),
            nn.Conv2d(hidden, hidden, 3, stride, 1, groups=hidden, bias=False),
            nn.GroupNorm(1, hidden),
            nn.ReLU6(),
            nn.Conv2d(hidden, out_ch, 1, bias=False),
            nn.GroupNorm(1, out_ch),
        )

    def forward(self, x):
        y = self.block(x)
        return x + y if self.use_res else y


class AttributeEmbedder(nn.Module):
    """Small inverted-residual classifier: 64x64 RGB -> embed_dim bottleneck -> one logit."""

    def __init__(self, region_kind: str, embed_dim: int, label_name: str = "",
                 normalize_input: bool = True):
        super().__init__()
        self.region_kind = region_kind
        self.embed_dim = embed_dim
        self.label_name = label_name
        self.normalize_input = normalize_input
        self.features = nn.Sequential(
            nn.Conv2d(3, 16, 3, 2, 1, bias=False),      # 32
            nn.GroupNorm(1, 16),
            nn.ReLU6(),
            InvertedResidual(16, 24, 2),                  # 16
            InvertedResidual(24, 24, 1),
            InvertedResidual(24, 32, 2),                  # 8
            InvertedResidual(32, 64, 2),                  # 4
        )
        self.bottleneck = nn.Linear(64, embed_dim)
        self.classifier = nn.Linear(embed_dim, 1)

    def prepare(self, x: torch.Tensor) -> torch.Tensor:
        """Float N x 3 x H x W in [0, 1] -> network input at 64x64."""
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeMismatch(f"expected N x 3 x H x W input, got {tuple(x.shape)}")
        if x.shape[2:] != (PATCH_SIZE, PATCH_SIZE):
            x = F.interpolate(x, size=(PATCH_SIZE, PATCH_SIZE), mode="bilinear", align_corners=False)
        if self.normalize_input:
            mu = x.mean(dim=(2, 3), keepdim=True)
            sd = x.std(dim=(2, 3), keepdim=True)
            return (x - mu) / (sd + 0.05)
        return x * 2.0 - 1.0

    def conv_features(self, x: torch.Tensor) -> list[torch.Tensor]:
        x = self.prepare(x)
        feats = []
        for i, layer in enumerate(self.features):
            x = layer(x)
            if i >= 3:
                feats.append(x)
        return feats

    def embedding(self, x: torch.Tensor) -> torch.Tensor:
        h = self.features(self.prepare(x)).mean(dim=(2, 3))
        return torch.tanh(self.bottleneck(h))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.embedding(x)).squeeze(1)

    # numpy-facing API ---------------------------------------------------------

    def _as_tensor(self, patch) -> torch.Tensor:
        pixels = patch.pixels if isinstance(patch, FacePatch) else patch
        arr = np.asarray(pixels)
        if arr.ndim == 3:
            arr = arr[None]
        if arr.ndim != 4 or arr.shape[-1] != 3:
            raise ShapeMismatch(f"expected H x W x 3 pixels, got {arr.shape}")
        p = next(self.parameters())
        return torch.as_tensor(arr.astype(np.float32) / 255.0, dtype=p.dtype).permute(0, 3, 1, 2)

    @torch.no_grad()
    def embed(self, patch) -> np.ndarray:
        arr = np.asarray(patch.pixels if isinstance(patch, FacePatch) else patch)
        if arr.shape[-3:] != (PATCH_SIZE, PATCH_SIZE, 3):
            raise ShapeMismatch(f"patch must be {PATCH_SIZE}x{PATCH_SIZE}x3, got {arr.shape}")
        was_training = self.training
        self.eval()
        out = self.embedding(self._as_tensor(arr)).double().numpy()
        self.train(was_training)
        return out[0] if arr.ndim == 3 else out

    @torch.no_grad()
    def predict(self, patch_or_image) -> float | np.ndarray:
        arr = np.asarray(patch_or_image.pixels if isinstance(patch_or_image, FacePatch) else patch_or_image)
        was_training = self.training
        self.eval()
        out = torch.sigmoid(self(self._as_tensor(arr))).double().numpy()
        self.train(was_training)
        return float(out[0]) if arr.ndim == 3 else out

    def predict_tensor(self, images: torch.Tensor) -> torch.Tensor:
        """Differentiable prediction on generator-range images (N x 3 x H x W in [-1, 1])."""
        return torch.sigmoid(self((images + 1.0) / 2.0))

    # persistence ----------------------------------------------------------------

    def save(self, path) -> None:
        torch.save({
            "format_version": EMBEDDER_FORMAT_VERSION,
            "region_kind": self.region_kind,
            "embed_dim": self.embed_dim,
            "label_name": self.label_name,
            "normalize_input": self.normalize_input,
            "state_dict": self.state_dict(),
        }, path)

    @classmethod
    def load(cls, path) -> "AttributeEmbedder":
        state = torch.load(path, map_location="cpu", weights_only=False)
        if state.get("format_version") != EMBEDDER_FORMAT_VERSION:
            raise ValueError(f"unsupported embedder checkpoint version {state.get('format_version')}")
        m = cls(state["region_kind"], state["embed_dim"], state["label_name"], state["normalize_input"])
        m.load_state_dict(state["state_dict"])
        return m.eval()


def train_embedder(
    patches: np.ndarray,
    labels: np.ndarray,
    region_kind: str,
    embed_dim: int,
    config: EmbedderConfig | None = None,
    label_name: str | None = None,
) -> AttributeEmbedder:
    """Fit a binary classifier on N x 64 x 64 x 3 uint8 patches (or larger images)."""
    config = config or EmbedderConfig()
    patches = np.asarray(patches)
    labels = np.asarray(labels, dtype=np.float32)
    if len(patches) == 0:
        raise EmptyDataset("no training patches")
    if len(np.unique(labels)) < 2:
        raise SingleClassDataset(f"labels for {region_kind} contain a single class")
    if len(patches) != len(labels):
        raise ShapeMismatch(f"{len(patches)} patches but {len(labels)} labels")

    gen = torch.Generator().manual_seed(config.seed)
    with torch.random.fork_rng():
        torch.manual_seed(config.seed)
        model = AttributeEmbedder(region_kind, embed_dim, label_name or DEFAULT_LABELS.get(region_kind, ""),
                                  config.normalize_input)
    x_all = torch.as_tensor(patches.astype(np.float32) / 255.0).permute(0, 3, 1, 2).contiguous()
    y_all = torch.as_tensor(labels)
    opt = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    n = len(x_all)
    steps_per_epoch = max(1, int(np.ceil(n / config.batch_size)))
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=config.lr,
                                                total_steps=config.epochs * steps_per_epoch)
    model.train()
    last = float("nan")
    for epoch in range(config.epochs):
        order = torch.randperm(n, generator=gen)
        total = 0.0
        for k in range(steps_per_epoch):
            idx = order[k * config.batch_size:(k + 1) * config.batch_size]
            xb, yb = x_all[idx], y_all[idx]
            if config.hflip:
                flip = torch.rand(len(idx), generator=gen) < 0.5
                xb = torch.where(flip[:, None, None, None], xb.flip(3), xb)
            loss = F.binary_cross_entropy_with_logits(model(xb), yb)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            total += float(loss.detach()) * len(idx)
        last = total / n
        log.debug("%s embedder epoch %d loss %.4f", region_kind, epoch, last)
    model.final_loss = last
    return model.eval()


def embed(embedder: AttributeEmbedder, patch) -> np.ndarray:
    return embedder.embed(patch)


def predict(embedder: AttributeEmbedder, patch_or_image):
    return embedder.predict(patch_or_image)
