import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from phenofactor.errors import LengthMismatch, ShapeMismatch, UnknownAttribute
from phenofactor.latent import (
    FactorizationScheme,
    FactorizedLatent,
    SupervisedEncoder,
    default_scheme,
    encode_supervised,
    factor_slice,
    swap_factor,
)
from phenofactor.phenotype import PhenotypeVector

NAMES = ["skin", "hair", "left_eye", "right_eye", "nose", "mouth"]


def test_default_scheme():
    s = default_scheme()
    assert s.names == NAMES
    assert [(e.offset, e.stop) for e in s.entries] == [(0, 3), (3, 6), (6, 131), (131, 256), (256, 384), (384, 512)]
    assert s.total_dim == 512 and len(s) == 6
    assert FactorizationScheme.from_list(s.to_list()) == s


@pytest.mark.parametrize("entries,total", [
    ([("a", 0, 3), ("b", 4, 4)], 8),     # gap
    ([("a", 0, 3), ("b", 2, 6)], 8),     # overlap
    ([("a", 0, 3), ("b", 3, 4)], 8),     # short
    ([("a", 0, 3), ("a", 3, 5)], 8),     # duplicate name
    ([("a", 0, 0), ("b", 0, 8)], 8),     # empty range
])
def test_invalid_schemes(entries, total):
    with pytest.raises(ValueError):
        FactorizationScheme(entries, total)


@settings(max_examples=200, deadline=None)
@given(lengths=st.lists(st.integers(1, 40), min_size=1, max_size=8))
def test_any_lengths_partition(lengths):
    s = FactorizationScheme.from_lengths({f"f{i}": n for i, n in enumerate(lengths)})
    covered = np.zeros(s.total_dim, int)
    for e in s.entries:
        covered[s.slice(e.name)] += 1
    assert np.all(covered == 1)


@settings(max_examples=300, deadline=None)
@given(seed=st.integers(0, 2**31), attr=st.sampled_from(NAMES), use_torch=st.booleans())
def test_swap_slice_roundtrip(seed, attr, use_torch):
    r = np.random.default_rng(seed)
    s = default_scheme()
    z = r.normal(size=512)
    rep = r.normal(size=s[attr].length)
    if use_torch:
        z, rep = torch.as_tensor(z), torch.as_tensor(rep)
    z_before = z.clone() if use_torch else z.copy()
    z2 = swap_factor(z, attr, rep)
    assert np.array_equal(np.asarray(factor_slice(z2, attr)), np.asarray(rep))
    # input untouched; difference confined to the range
    assert np.array_equal(np.asarray(z), np.asarray(z_before))
    diff = np.asarray(z2) != np.asarray(z)
    outside = np.ones(512, bool)
    outside[s.slice(attr)] = False
    assert not diff[outside].any()
    back = swap_factor(z2, attr, factor_slice(z, attr))
    assert np.array_equal(np.asarray(back), np.asarray(z))


def test_swap_errors():
    z = np.zeros(512)
    with pytest.raises(LengthMismatch):
        swap_factor(z, "skin", np.zeros(4))
    with pytest.raises(UnknownAttribute):
        swap_factor(z, "beard", np.zeros(3))
    with pytest.raises(UnknownAttribute):
        factor_slice(z, "beard")
    with pytest.raises(ShapeMismatch):
        factor_slice(np.zeros(500), "skin")
    with pytest.raises(KeyError):
        default_scheme()["beard"]


def test_factorized_latent():
    z = FactorizedLatent(torch.zeros(512), default_scheme())
    z2 = z.swap("hair", torch.ones(3))
    assert z2.slice("hair").tolist() == [1.0, 1.0, 1.0] and z.values.sum() == 0
    with pytest.raises(ShapeMismatch):
        FactorizedLatent(torch.zeros(10), default_scheme())


@pytest.fixture(scope="module")
def encoder():
    torch.manual_seed(0)
    enc = SupervisedEncoder()
    enc.fit_normalization(np.random.default_rng(0).normal(size=(20, 512)))
    return enc.double().eval()


def test_encoder_shapes(encoder):
    theta = PhenotypeVector.from_flat(np.random.default_rng(1).random(512))
    z = encode_supervised(encoder, theta)
    assert z.values.shape == (512,)
    with torch.no_grad():
        block = encoder.encode_block("nose", torch.as_tensor(theta.nose))
    assert torch.equal(z.slice("nose").detach(), block)
    assert torch.equal(encode_supervised(encoder, theta).values, z.values)
    with pytest.raises(ShapeMismatch):
        encoder(torch.zeros(511, dtype=torch.float64))


@settings(max_examples=500, deadline=None)
@given(seed=st.integers(0, 2**31), attr=st.sampled_from(NAMES))
def test_encoder_block_independence(encoder, seed, attr):
    r = np.random.default_rng(seed)
    theta = torch.as_tensor(r.normal(size=512))
    offs = encoder.input_offsets[attr]
    theta2 = theta.clone()
    theta2[offs] += torch.as_tensor(r.normal(size=offs.stop - offs.start))
    with torch.no_grad():
        z1, z2 = encoder(theta), encoder(theta2)
    sl = default_scheme().slice(attr)
    keep = torch.ones(512, dtype=torch.bool)
    keep[sl] = False
    assert torch.equal(z1[keep], z2[keep])
