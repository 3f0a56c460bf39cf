"""Factorisation of the latent vector into per-attribute index ranges, and the
supervised encoder that writes each range from its phenotype block."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np
import torch
from torch import nn

from phenofactor.errors import LengthMismatch, ShapeMismatch, UnknownAttribute
from phenofactor.phenotype import THETA_DIMS


@dataclass(frozen=True)
class FactorEntry:
    name: str
    offset: int
    length: int

    @property
    def stop(self) -> int:
        return self.offset + self.length


class FactorizationScheme:
    """Ordered, contiguous attribute ranges that tile ``[0, total_dim)``."""

    def __init__(self, entries: Iterable[tuple[str, int, int]], total_dim: int = 512):
        self.entries = tuple(FactorEntry(n, int(o), int(l)) for n, o, l in entries)
        self.total_dim = int(total_dim)
        self._validate()
        self._by_name = {e.name: e for e in self.entries}

    def _validate(self):
        if not self.entries:
            raise ValueError("scheme needs at least one entry")
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate attribute names in {names}")
        pos = 0
        for e in self.entries:
            if e.length <= 0:
                raise ValueError(f"{e.name} has non-positive length {e.length}")
            if e.offset != pos:
                raise ValueError(f"{e.name} starts at {e.offset}; ranges must be contiguous from {pos}")
            pos = e.stop
        if pos != self.total_dim:
            raise ValueError(f"ranges cover [0, {pos}) but total_dim is {self.total_dim}")

    @classmethod
    def from_lengths(cls, lengths: Mapping[str, int]) -> "FactorizationScheme":
        entries, pos = [], 0
        for name, n in lengths.items():
            entries.append((name, pos, n))
            pos += n
        return cls(entries, pos)

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, name: str) -> FactorEntry:
        try:
            return self._by_name[name]
        except KeyError:
            raise UnknownAttribute(f"no latent factor named {name!r}") from None

    def slice(self, name: str) -> slice:
        e = self[name]
        return slice(e.offset, e.stop)

    def to_list(self) -> list[list]:
        return [[e.name, e.offset, e.length] for e in self.entries]

    @classmethod
    def from_list(cls, items) -> "FactorizationScheme":
        items = [tuple(x) for x in items]
        return cls(items, sum(x[2] for x in items))

    def __eq__(self, other):
        return isinstance(other, FactorizationScheme) and self.entries == other.entries

    def __repr__(self):
        body = ", ".join(f"{e.name}:[{e.offset},{e.stop})" for e in self.entries)
        return f"FactorizationScheme({body})"


def default_scheme() -> FactorizationScheme:
    return FactorizationScheme.from_lengths(THETA_DIMS)


def factor_slice(z, attribute: str, scheme: FactorizationScheme | None = None):
    scheme = scheme or default_scheme()
    if z.shape[-1] != scheme.total_dim:
        raise ShapeMismatch(f"latent has {z.shape[-1]} entries, scheme expects {scheme.total_dim}")
    return z[..., scheme.slice(attribute)]


def swap_factor(z, attribute: str, replacement, scheme: FactorizationScheme | None = None):
    """Copy of ``z`` whose ``attribute`` range is replaced; ``z`` itself is untouched."""
    scheme = scheme or default_scheme()
    sl = scheme.slice(attribute)
    if z.shape[-1] != scheme.total_dim:
        raise ShapeMismatch(f"latent has {z.shape[-1]} entries, scheme expects {scheme.total_dim}")
    if replacement.shape[-1] != sl.stop - sl.start:
        raise LengthMismatch(
            f"{attribute} range has length {sl.stop - sl.start}, replacement has {replacement.shape[-1]}"
        )
    if isinstance(z, torch.Tensor):
        replacement = torch.as_tensor(replacement, dtype=z.dtype, device=z.device)
        head, tail = z[..., :sl.start], z[..., sl.stop:]
        replacement = replacement.expand(*z.shape[:-1], replacement.shape[-1])
        return torch.cat([head, replacement, tail], dim=-1)
    out = np.array(z, copy=True)
    out[..., sl] = replacement
    return out


@dataclass
class FactorizedLatent:
    values: torch.Tensor
    scheme: FactorizationScheme

    def __post_init__(self):
        if self.values.shape[-1] != self.scheme.total_dim:
            raise ShapeMismatch(
                f"latent has {self.values.shape[-1]} entries, scheme expects {self.scheme.total_dim}"
            )

    def slice(self, attribute: str):
        return factor_slice(self.values, attribute, self.scheme)

    def swap(self, attribute: str, replacement) -> "FactorizedLatent":
        return FactorizedLatent(swap_factor(self.values, attribute, replacement, self.scheme), self.scheme)


class AttributeMLP(nn.Module):
    """Two hidden layers of width twice the output range, SiLU activations."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        hidden = 2 * out_dim
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden),
            nn.SiLU(),
            nn.Linear(hidden, hidden),
            nn.SiLU(),
            nn.Linear(hidden, out_dim),
        )

    def forward(self, x):
        return self.net(x)


class SupervisedEncoder(nn.Module):
    """One perceptron per attribute mapping its phenotype block to its latent range.

    Inputs are standardised per dimension with statistics stored as buffers
    (set them with ``fit_normalization``); this keeps blocks independent.
    """

    def __init__(self, scheme: FactorizationScheme | None = None, input_dims: Mapping[str, int] | None = None):
        super().__init__()
        self.scheme = scheme or default_scheme()
        self.input_dims = dict(input_dims or {e.name: e.length for e in self.scheme.entries})
        self.mlps = nn.ModuleDict({
            e.name: AttributeMLP(self.input_dims[e.name], e.length) for e in self.scheme.entries
        })
        n_in = sum(self.input_dims.values())
        self.register_buffer("theta_mean", torch.zeros(n_in))
        self.register_buffer("theta_std", torch.ones(n_in))

    @property
    def input_offsets(self) -> dict[str, slice]:
        out, pos = {}, 0
        for e in self.scheme.entries:
            n = self.input_dims[e.name]
            out[e.name] = slice(pos, pos + n)
            pos += n
        return out

    @torch.no_grad()
    def fit_normalization(self, thetas) -> None:
        t = torch.as_tensor(np.asarray(thetas), dtype=self.theta_mean.dtype)
        self.theta_mean.copy_(t.mean(0))
        self.theta_std.copy_(t.std(0).clamp_min(1e-3))

    def encode_block(self, attribute: str, block: torch.Tensor) -> torch.Tensor:
        if attribute not in self.mlps:
            raise UnknownAttribute(f"no latent factor named {attribute!r}")
        sl = self.input_offsets[attribute]
        if block.shape[-1] != sl.stop - sl.start:
            raise ShapeMismatch(f"{attribute} block needs {sl.stop - sl.start} values, got {block.shape[-1]}")
        block = (block - self.theta_mean[sl]) / self.theta_std[sl]
        return self.mlps[attribute](block)

    def forward(self, theta: torch.Tensor) -> torch.Tensor:
        n_in = sum(self.input_dims.values())
        if theta.shape[-1] != n_in:
            raise ShapeMismatch(f"theta has {theta.shape[-1]} entries, encoder expects {n_in}")
        parts = [self.encode_block(name, theta[..., sl]) for name, sl in self.input_offsets.items()]
        return torch.cat(parts, dim=-1)


def encode_supervised(encoder: SupervisedEncoder, theta) -> FactorizedLatent:
    """z_C for one phenotype vector or a batch of flattened vectors."""
    if hasattr(theta, "flatten") and not isinstance(theta, (torch.Tensor, np.ndarray)):
        theta = theta.flatten()
    p = next(encoder.parameters())
    t = torch.as_tensor(np.asarray(theta) if not isinstance(theta, torch.Tensor) else theta,
                        dtype=p.dtype, device=p.device)
    return FactorizedLatent(encoder(t), encoder.scheme)
