import numpy as np
import pytest
import torch

from phenofactor.control import (
    encode,
    fine_grained_modify,
    one_shot_finetune,
    reconstruct,
    render,
    set_attribute_from_theta,
)
from phenofactor.features import FeatureNet
from phenofactor.networks import file_hash, state_hash

NAMES = ["skin", "hair", "left_eye", "right_eye", "nose", "mouth"]


@pytest.fixture
def image():
    return np.random.default_rng(0).integers(0, 256, (4, 4, 3), dtype=np.uint8)


@pytest.fixture
def fnet():
    torch.manual_seed(0)
    return FeatureNet(width=4).eval()


def test_reconstruct_shapes(micro_nets, image):
    out = reconstruct(micro_nets, image)
    assert out.shape == image.shape and out.dtype == np.uint8
    batch = reconstruct(micro_nets, np.stack([image, image]))
    assert batch.shape == (2, 4, 4, 3)
    assert np.array_equal(batch[0], out)


@pytest.mark.parametrize("attr", NAMES)
def test_set_attribute_locality_and_idempotence(micro_nets, image, attr):
    z = encode(micro_nets, image)
    block = np.random.default_rng(1).random(micro_nets.scheme[attr].length)
    z1 = set_attribute_from_theta(micro_nets, z, attr, block)
    sl = micro_nets.scheme.slice(attr)
    keep = torch.ones(512, dtype=torch.bool)
    keep[sl] = False
    assert torch.equal(z1[..., keep], z[..., keep])
    assert torch.equal(set_attribute_from_theta(micro_nets, z1, attr, block), z1)


def test_finetune_zero_steps_is_identity(micro_nets, image, fnet):
    G0 = state_hash(micro_nets.G)
    G2, z2 = one_shot_finetune(micro_nets, image, 0, fnet)
    assert state_hash(G2) == G0
    assert torch.equal(z2, encode(micro_nets, image))


def test_finetune_leaves_shared_networks(tmp_path, micro_nets, image, fnet):
    path = tmp_path / "shared.pt"
    micro_nets.save(path)
    before = file_hash(path)
    hashes = {k: state_hash(m) for k, m in micro_nets.modules().items()}
    res = one_shot_finetune(micro_nets, image, 10, fnet)
    assert file_hash(path) == before
    assert {k: state_hash(m) for k, m in micro_nets.modules().items()} == hashes
    assert all(p.grad is None for m in micro_nets.modules().values() for p in m.parameters())
    assert state_hash(res.generator) != hashes["G"]
    assert len(res.perceptual_history) == 11
    assert res.perceptual_history[-1] < res.perceptual_history[0]


def brightness(y):
    return ((y + 1) / 2).clamp(0, 1).mean(dim=(1, 2, 3))


@pytest.mark.parametrize("attr", ["skin", "nose"])
def test_fine_grained_modify(micro_nets, image, attr):
    z = encode(micro_nets, image)
    start = float(brightness(render(micro_nets, z)))
    target = min(1.0, start + 0.1)
    res = fine_grained_modify(micro_nets, z, attr, target, brightness, max_iters=30, mu=1e-4)
    h = res.objective_history
    assert all(b <= a for a, b in zip(h, h[1:]))
    assert res.status in ("converged", "max_iters", "no_progress", "line_search_failed")
    assert abs(res.prediction - target) < abs(start - target)
    keep = torch.ones(512, dtype=torch.bool)
    keep[micro_nets.scheme.slice(attr)] = False
    assert torch.equal(res.z[..., keep], z[..., keep])
    assert all(p.requires_grad for p in micro_nets.G.parameters())


def test_fine_grained_converged_immediately(micro_nets, image):
    z = encode(micro_nets, image)
    start = float(brightness(render(micro_nets, z)))
    res = fine_grained_modify(micro_nets, z, "skin", start, brightness)
    assert res.status == "converged" and res.iterations == 0
    assert torch.equal(res.z, z)


def test_fine_grained_rejects_bad_target(micro_nets, image):
    with pytest.raises(ValueError):
        fine_grained_modify(micro_nets, encode(micro_nets, image), "skin", 1.5, brightness)
