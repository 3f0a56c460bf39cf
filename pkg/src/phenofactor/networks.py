"""Neural components: image encoder, mapping network, style-based generator,
image discriminators and the latent domain discriminator.

All components are built from one ``NetworkConfig`` so the same code serves
the 4px gradient-check configuration, the 32px toy runs and the 256px preset.
Discriminators return raw logits; ``discriminate`` applies the logistic squash.
"""
from __future__ import annotations

import copy
import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from phenofactor.errors import MissingCheckpoint, ShapeMismatch
from phenofactor.latent import FactorizationScheme, FactorizedLatent, SupervisedEncoder, default_scheme

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class NetworkConfig:
    resolution: int = 32
    latent_dim: int = 512
    mapping_layers: int = 8
    mapping_lr_mul: float = 0.01
    channel_base: int = 1024
    channel_max: int = 64
    encoder_channel_max: int = 64
    latent_disc_hidden: int = 256
    use_pretrained_encoder_backbone: bool = False
    noise_inputs: bool = True

    def __post_init__(self):
        r = self.resolution
        if r < 4 or r & (r - 1):
            raise ValueError(f"resolution must be a power of two >= 4, got {r}")
        if self.mapping_layers < 1:
            raise ValueError("mapping_layers must be >= 1")

    @property
    def log2_res(self) -> int:
        return int(math.log2(self.resolution))

    def channels(self, res: int, cap: int | None = None) -> int:
        return max(8, min(self.channel_base // res, cap or self.channel_max))

    @classmethod
    def preset(cls, name: str) -> "NetworkConfig":
        presets = {
            "micro": dict(resolution=4, channel_base=32, channel_max=8, encoder_channel_max=8,
                          mapping_layers=2, latent_disc_hidden=16),
            "toy": dict(resolution=32, channel_max=32, encoder_channel_max=32),
            "toy64": dict(resolution=64),
            "paper256": dict(resolution=256, channel_base=16384, channel_max=512,
                             encoder_channel_max=512, latent_disc_hidden=512,
                             use_pretrained_encoder_backbone=True),
        }
        return cls(**presets[name])


# -- layers ----------------------------------------------------------------------

class EqualizedLinear(nn.Module):
    """Linear layer with runtime weight scaling and a learning-rate multiplier."""

    def __init__(self, in_features, out_features, bias=True, bias_init=0.0, lr_mul=1.0):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_features, in_features) / lr_mul)
        self.bias = nn.Parameter(torch.full((out_features,), float(bias_init))) if bias else None
        self.w_scale = lr_mul / math.sqrt(in_features)
        self.lr_mul = lr_mul

    def forward(self, x):
        b = self.bias * self.lr_mul if self.bias is not None else None
        return F.linear(x, self.weight * self.w_scale, b)


class EqualizedConv2d(nn.Module):
    def __init__(self, in_ch, out_ch, kernel_size, padding=0, bias=True):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_ch, in_ch, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.zeros(out_ch)) if bias else None
        self.w_scale = 1.0 / math.sqrt(in_ch * kernel_size * kernel_size)
        self.padding = padding

    def forward(self, x):
        return F.conv2d(x, self.weight * self.w_scale, self.bias, padding=self.padding)


class MappingNetwork(nn.Module):
    """Fully-connected z -> w map applied after second-moment normalisation of z."""

    def __init__(self, dim: int, n_layers: int = 8, lr_mul: float = 0.01):
        super().__init__()
        layers = []
        for _ in range(n_layers):
            layers += [EqualizedLinear(dim, dim, lr_mul=lr_mul), nn.LeakyReLU(0.2)]
        self.net = nn.Sequential(*layers)
        self.dim = dim

    def forward(self, z):
        z = z * torch.rsqrt(z.pow(2).mean(dim=1, keepdim=True) + 1e-8)
        return self.net(z)


class AdaIN(nn.Module):
    """Instance-normalise features, then scale and shift them with a style from w."""

    def __init__(self, channels: int, w_dim: int):
        super().__init__()
        self.affine = EqualizedLinear(w_dim, 2 * channels)
        with torch.no_grad():
            self.affine.bias[:channels] = 1.0

    def forward(self, x, w):
        style = self.affine(w)
        scale, shift = style.chunk(2, dim=1)
        mu = x.mean(dim=(2, 3), keepdim=True)
        var = x.var(dim=(2, 3), keepdim=True, unbiased=False)
        x = (x - mu) * torch.rsqrt(var + 1e-8)
        return x * scale[:, :, None, None] + shift[:, :, None, None]


class StyleLayer(nn.Module):
    """conv 3x3 -> per-pixel noise -> bias + leaky ReLU -> AdaIN."""

    def __init__(self, in_ch, out_ch, w_dim, res, noise_inputs=True):
        super().__init__()
        self.conv = EqualizedConv2d(in_ch, out_ch, 3, padding=1, bias=False)
        self.bias = nn.Parameter(torch.zeros(out_ch))
        self.noise_inputs = noise_inputs
        if noise_inputs:
            self.noise_strength = nn.Parameter(torch.zeros(()))
            self.register_buffer("noise_const", torch.randn(1, 1, res, res))
        self.adain = AdaIN(out_ch, w_dim)

    def forward(self, x, w, noise_mode="const", generator=None):
        x = self.conv(x)
        if self.noise_inputs and noise_mode != "none":
            if noise_mode == "random":
                noise = torch.randn(x.shape[0], 1, x.shape[2], x.shape[3], generator=generator,
                                    dtype=x.dtype, device=x.device)
            else:
                noise = self.noise_const
            x = x + noise * self.noise_strength
        x = F.leaky_relu(x + self.bias[None, :, None, None], 0.2)
        return self.adain(x, w)


class StyleGenerator(nn.Module):
    """Learned 4x4 constant, two style layers per resolution, summed RGB skips, tanh output."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        w_dim = cfg.latent_dim
        c4 = cfg.channels(4)
        self.const = nn.Parameter(torch.randn(1, c4, 4, 4))
        self.layers = nn.ModuleList([StyleLayer(c4, c4, w_dim, 4, cfg.noise_inputs)])
        self.to_rgb = nn.ModuleList([EqualizedConv2d(c4, 3, 1)])
        in_ch = c4
        for lg in range(3, cfg.log2_res + 1):
            res = 2 ** lg
            ch = cfg.channels(res)
            self.layers.append(StyleLayer(in_ch, ch, w_dim, res, cfg.noise_inputs))
            self.layers.append(StyleLayer(ch, ch, w_dim, res, cfg.noise_inputs))
            self.to_rgb.append(EqualizedConv2d(ch, 3, 1))
            in_ch = ch

    def forward(self, w, noise_mode="const", generator=None):
        if w.ndim != 2 or w.shape[1] != self.cfg.latent_dim:
            raise ShapeMismatch(f"w must be N x {self.cfg.latent_dim}, got {tuple(w.shape)}")
        x = self.const.expand(w.shape[0], -1, -1, -1)
        x = self.layers[0](x, w, noise_mode, generator)
        rgb = self.to_rgb[0](x)
        for i in range(1, len(self.to_rgb)):
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            x = self.layers[2 * i - 1](x, w, noise_mode, generator)
            x = self.layers[2 * i](x, w, noise_mode, generator)
            rgb = F.interpolate(rgb, scale_factor=2, mode="bilinear", align_corners=False) + self.to_rgb[i](x)
        return torch.tanh(rgb)


class ResidualDown(nn.Module):
    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.conv1 = EqualizedConv2d(in_ch, in_ch, 3, padding=1)
        self.conv2 = EqualizedConv2d(in_ch, out_ch, 3, padding=1)
        self.skip = EqualizedConv2d(in_ch, out_ch, 1, bias=False)

    def forward(self, x):
        y = F.leaky_relu(self.conv1(x), 0.2)
        y = F.leaky_relu(self.conv2(y), 0.2)
        y = F.avg_pool2d(y, 2)
        s = F.avg_pool2d(self.skip(x), 2)
        return (y + s) / math.sqrt(2)


class ConvTrunk(nn.Module):
    """Residual downsampling stack from the input resolution to 4x4, then a dense head."""

    def __init__(self, cfg: NetworkConfig, out_dim: int, cap: int):
        super().__init__()
        res = cfg.resolution
        ch = cfg.channels(res, cap)
        self.from_rgb = EqualizedConv2d(3, ch, 1)
        blocks = []
        while res > 4:
            nxt = cfg.channels(res // 2, cap)
            blocks.append(ResidualDown(ch, nxt))
            ch, res = nxt, res // 2
        self.blocks = nn.Sequential(*blocks)
        self.conv = EqualizedConv2d(ch, ch, 3, padding=1)
        self.fc = EqualizedLinear(ch * 16, ch)
        self.out = EqualizedLinear(ch, out_dim)
        self.resolution = cfg.resolution

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2:] != (self.resolution, self.resolution):
            raise ShapeMismatch(
                f"expected N x 3 x {self.resolution} x {self.resolution} images, got {tuple(x.shape)}"
            )
        x = F.leaky_relu(self.from_rgb(x), 0.2)
        x = self.blocks(x)
        x = F.leaky_relu(self.conv(x), 0.2)
        x = F.leaky_relu(self.fc(x.flatten(1)), 0.2)
        return self.out(x)


class ImageEncoder(ConvTrunk):
    """E_F: image -> factorised latent z_F."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__(cfg, cfg.latent_dim, cfg.encoder_channel_max)
        if cfg.use_pretrained_encoder_backbone:
            # no pretrained weights ship with the package; the trunk starts from scratch
            log.warning("use_pretrained_encoder_backbone is set but no pretrained weights are bundled; "
                        "E_F is randomly initialised")


class Discriminator(ConvTrunk):
    """Image discriminator returning one logit per image (no cross-batch statistics)."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__(cfg, 1, cfg.channel_max)

    def forward(self, x):
        return super().forward(x).squeeze(1)


class LatentDiscriminator(nn.Module):
    """D_DA: logit that a latent came from the supervised encoder's distribution."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        h = cfg.latent_disc_hidden
        self.net = nn.Sequential(
            EqualizedLinear(cfg.latent_dim, h), nn.LeakyReLU(0.2),
            EqualizedLinear(h, h), nn.LeakyReLU(0.2),
            EqualizedLinear(h, 1),
        )

    def forward(self, z):
        return self.net(z).squeeze(1)


# -- functional helpers ------------------------------------------------------------

def images_to_tensor(images, dtype=torch.float32) -> torch.Tensor:
    """uint8 N x H x W x 3 (or one H x W x 3) -> float N x 3 x H x W in [-1, 1]."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    t = torch.as_tensor(arr.astype(np.float32)).permute(0, 3, 1, 2).to(dtype)
    return t / 127.5 - 1.0


def tensor_to_images(x: torch.Tensor) -> np.ndarray:
    """float N x 3 x H x W in [-1, 1] -> uint8 N x H x W x 3."""
    arr = ((x.detach().clamp(-1, 1) + 1.0) * 127.5).permute(0, 2, 3, 1).cpu().numpy()
    return np.clip(np.rint(arr), 0, 255).astype(np.uint8)


def encode_image(E_F: ImageEncoder, image, scheme: FactorizationScheme | None = None) -> FactorizedLatent:
    x = image if isinstance(image, torch.Tensor) else images_to_tensor(image)
    if x.ndim == 3:
        x = x[None]
    return FactorizedLatent(E_F(x), scheme or default_scheme())


def map_latent(E_map: MappingNetwork, z) -> torch.Tensor:
    z = z.values if isinstance(z, FactorizedLatent) else z
    if z.shape[-1] != E_map.dim:
        raise ShapeMismatch(f"z must have {E_map.dim} entries, got {z.shape[-1]}")
    return E_map(z if z.ndim == 2 else z[None])


def generate(G: StyleGenerator, w, noise_mode="const") -> torch.Tensor:
    return G(w, noise_mode=noise_mode)


def discriminate(D: nn.Module, image) -> torch.Tensor:
    x = image if isinstance(image, torch.Tensor) else images_to_tensor(image)
    return torch.sigmoid(D(x))


def discriminate_latent(D_DA: LatentDiscriminator, z) -> torch.Tensor:
    z = z.values if isinstance(z, FactorizedLatent) else z
    return torch.sigmoid(D_DA(z if z.ndim == 2 else z[None]))


# -- bundle & persistence ------------------------------------------------------------

COMPONENTS = ("E_F", "E_C", "E_map", "G", "D_F", "D_C", "D", "D_DA")


@dataclass
class NetworkBundle:
    config: NetworkConfig
    scheme: FactorizationScheme
    E_F: ImageEncoder
    E_C: SupervisedEncoder
    E_map: MappingNetwork
    G: StyleGenerator
    D_F: Discriminator
    D_C: Discriminator
    D: Discriminator
    D_DA: LatentDiscriminator
    stage: str = "1"
    extra: dict = field(default_factory=dict)

    @classmethod
    def build(cls, config: NetworkConfig, scheme: FactorizationScheme | None = None,
              seed: int = 0, dtype=torch.float32) -> "NetworkBundle":
        scheme = scheme or default_scheme()
        if scheme.total_dim != config.latent_dim:
            raise ShapeMismatch(f"scheme covers {scheme.total_dim} dims, config latent_dim is {config.latent_dim}")
        g = torch.random.fork_rng()
        with g:
            torch.manual_seed(seed)
            bundle = cls(
                config=config,
                scheme=scheme,
                E_F=ImageEncoder(config),
                E_C=SupervisedEncoder(scheme),
                E_map=MappingNetwork(config.latent_dim, config.mapping_layers, config.mapping_lr_mul),
                G=StyleGenerator(config),
                D_F=Discriminator(config),
                D_C=Discriminator(config),
                D=Discriminator(config),
                D_DA=LatentDiscriminator(config),
            )
        for m in bundle.modules().values():
            m.to(dtype)
        return bundle

    def modules(self) -> dict[str, nn.Module]:
        return {name: getattr(self, name) for name in COMPONENTS}

    def parameter_counts(self) -> dict[str, int]:
        return {name: sum(p.numel() for p in m.parameters()) for name, m in self.modules().items()}

    def eval(self) -> "NetworkBundle":
        for m in self.modules().values():
            m.eval()
        return self

    def copy(self) -> "NetworkBundle":
        return copy.deepcopy(self)

    def state(self) -> dict:
        return {
            "format_version": CHECKPOINT_VERSION,
            "config": asdict(self.config),
            "scheme": self.scheme.to_list(),
            "stage": self.stage,
            "modules": {name: m.state_dict() for name, m in self.modules().items()},
            "extra": self.extra,
        }

    @classmethod
    def from_state(cls, state: dict) -> "NetworkBundle":
        if state.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {state.get('format_version')}")
        config = NetworkConfig(**state["config"])
        scheme = FactorizationScheme.from_list(state["scheme"])
        bundle = cls.build(config, scheme)
        for name, sd in state["modules"].items():
            getattr(bundle, name).load_state_dict(sd)
        bundle.stage = state["stage"]
        bundle.extra = state.get("extra", {})
        return bundle

    def save(self, path, **extra_state) -> None:
        state = self.state()
        state.update(extra_state)
        torch.save(state, path)

    @classmethod
    def load(cls, path) -> "NetworkBundle":
        try:
            state = torch.load(path, map_location="cpu", weights_only=False)
        except FileNotFoundError:
            raise MissingCheckpoint(f"no checkpoint at {path}") from None
        return cls.from_state(state)


def state_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
