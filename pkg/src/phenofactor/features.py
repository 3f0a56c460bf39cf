"""Feature networks used by the perceptual losses and the FID front end.

``FeatureNet`` is the desk-scale stand-in for a pretrained image classifier:
a three-stage conv net trained to regress scalar face attributes, whose conv
activations feed the perceptual loss and whose 64-d penultimate layer feeds
FID. Any object with a ``features(x) -> list[Tensor]`` method can be used as
a perceptual network.
"""
from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from phenofactor.errors import EmptyDataset

FEATURE_FORMAT_VERSION = 1


class FeatureNet(nn.Module):
    def __init__(self, n_targets: int = 1, width: int = 16, embed_dim: int = 64, include_pixels: bool = True):
        super().__init__()
        self.conv1 = nn.Conv2d(3, width, 3, 1, 1)
        self.conv2 = nn.Conv2d(width, 2 * width, 3, 2, 1)
        self.conv3 = nn.Conv2d(2 * width, 4 * width, 3, 2, 1)
        self.fc = nn.Linear(4 * width, embed_dim)
        self.head = nn.Linear(embed_dim, n_targets)
        self.include_pixels = include_pixels
        self.embed_dim = embed_dim
        self.n_targets = n_targets
        self.width = width

    def _trunk(self, x):
        h1 = F.leaky_relu(self.conv1(x), 0.2)
        h2 = F.leaky_relu(self.conv2(h1), 0.2)
        h3 = F.leaky_relu(self.conv3(h2), 0.2)
        return h1, h2, h3

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Activations compared by the perceptual loss (input in [-1, 1])."""
        feats = list(self._trunk(x))
        return [x, *feats] if self.include_pixels else feats

    def embedding(self, x: torch.Tensor) -> torch.Tensor:
        h3 = self._trunk(x)[2]
        return F.leaky_relu(self.fc(h3.mean(dim=(2, 3))), 0.2)

    def forward(self, x):
        return self.head(self.embedding(x))

    def save(self, path) -> None:
        torch.save({
            "format_version": FEATURE_FORMAT_VERSION,
            "n_targets": self.n_targets,
            "width": self.width,
            "embed_dim": self.embed_dim,
            "include_pixels": self.include_pixels,
            "state_dict": self.state_dict(),
        }, path)

    @classmethod
    def load(cls, path) -> "FeatureNet":
        state = torch.load(path, map_location="cpu", weights_only=False)
        m = cls(state["n_targets"], state["width"], state["embed_dim"], state["include_pixels"])
        m.load_state_dict(state["state_dict"])
        return m.eval()


class EmbedderFeatures:
    """Perceptual-network adapter over an attribute embedder's conv stages."""

    def __init__(self, embedder):
        self.embedder = embedder

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        return self.embedder.conv_features((x + 1.0) / 2.0)


def train_feature_net(images: torch.Tensor, targets: np.ndarray, *, epochs: int = 40,
                      batch_size: int = 32, lr: float = 2e-3, seed: int = 0) -> FeatureNet:
    """Regress standardised ``targets`` (N x T) from images in [-1, 1]."""
    if len(images) == 0:
        raise EmptyDataset("no images to train the feature network on")
    y = torch.as_tensor(np.asarray(targets, dtype=np.float32))
    if y.ndim == 1:
        y = y[:, None]
    y = (y - y.mean(0)) / y.std(0).clamp_min(1e-6)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        net = FeatureNet(n_targets=y.shape[1])
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    n = len(images)
    for _ in range(epochs):
        order = torch.randperm(n, generator=gen)
        for k in range(0, n, batch_size):
            idx = order[k:k + batch_size]
            loss = F.mse_loss(net(images[idx]), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    for p in net.parameters():
        p.requires_grad_(False)
    return net.eval()


@torch.no_grad()
def feature_extract(images, feature_net, batch_size: int = 256) -> np.ndarray:
    """n x d feature matrix (penultimate activations) for FID."""
    from phenofactor.networks import images_to_tensor

    x = images if isinstance(images, torch.Tensor) else images_to_tensor(images)
    dtype = next(feature_net.parameters()).dtype
    rows = [feature_net.embedding(x[k:k + batch_size].to(dtype)) for k in range(0, len(x), batch_size)]
    return torch.cat(rows).double().numpy()
