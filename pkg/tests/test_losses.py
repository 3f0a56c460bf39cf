import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn

from fdcheck import input_gradcheck, param_gradcheck
from phenofactor.features import FeatureNet
from phenofactor.losses import (
    EPS,
    LossReport,
    LossWeights,
    gan_disc_loss,
    gan_gen_loss,
    log_one_minus,
    perceptual_loss,
    r1_penalty,
    term_weights,
)


def test_gen_loss_at_half():
    assert abs(gan_gen_loss(0.5) - math.log(2)) <= 1e-9
    assert abs(float(gan_gen_loss(torch.full((5,), 0.5, dtype=torch.float64))) - math.log(2)) <= 1e-12


def test_clamping_keeps_losses_finite():
    assert gan_gen_loss(0.0) == pytest.approx(-math.log(EPS))
    assert math.isfinite(log_one_minus(1.0))
    assert gan_gen_loss(1.0) == 0.0
    t = torch.tensor([0.0, 1.0])
    assert torch.isfinite(gan_disc_loss(t, t))


@settings(max_examples=200, deadline=None)
@given(p=st.floats(1e-6, 1 - 1e-6), q=st.floats(1e-6, 1 - 1e-6))
def test_disc_loss_formula(p, q):
    assert gan_disc_loss(p, q) == pytest.approx(-math.log(p) - math.log(1 - q), rel=1e-9)


class LinearCritic(nn.Module):
    def __init__(self, c):
        super().__init__()
        self.c = c

    def forward(self, x):
        return self.c * x.sum(dim=(1, 2, 3))


@pytest.mark.parametrize("c", [0.0, 0.5, 2.0])
def test_r1_linear_closed_form(c):
    x = torch.randn(4, 3, 5, 5, dtype=torch.float64)
    # gradient of c * sum(x) is c everywhere: 0.5 * c^2 * pixel count
    assert float(r1_penalty(LinearCritic(c), x)) == pytest.approx(0.5 * c * c * 75, abs=1e-12)


def test_r1_constant_critic_is_zero():
    class Const(nn.Module):
        def forward(self, x):
            return torch.zeros(len(x))

    assert float(r1_penalty(Const(), torch.randn(2, 3, 4, 4))) == 0.0


class SmallCritic(nn.Module):
    def __init__(self):
        super().__init__()
        self.conv = nn.Conv2d(3, 4, 3, padding=1)
        self.fc = nn.Linear(4 * 16, 1)

    def forward(self, x):
        return self.fc(torch.tanh(self.conv(x)).flatten(1)).squeeze(1)


def test_r1_parameter_gradients_match_finite_differences():
    torch.manual_seed(0)
    D = SmallCritic().double()
    x = torch.randn(3, 3, 4, 4, dtype=torch.float64)
    param_gradcheck(list(D.parameters()), lambda: r1_penalty(D, x), n_coords=10)


@pytest.fixture(scope="module")
def feature_net():
    torch.manual_seed(0)
    return FeatureNet(width=4).double().eval()


def test_perceptual_gradients_match_finite_differences(feature_net):
    a = torch.rand(2, 3, 8, 8, dtype=torch.float64) * 2 - 1
    b = torch.rand(2, 3, 8, 8, dtype=torch.float64) * 2 - 1
    input_gradcheck(a, lambda x: perceptual_loss(x, b, feature_net), n_coords=10)


@torch.no_grad()
def test_perceptual_identity_and_symmetry(feature_net):
    a = torch.rand(3, 3, 8, 8, dtype=torch.float64)
    b = torch.rand(3, 3, 8, 8, dtype=torch.float64)
    assert float(perceptual_loss(a, a, feature_net)) == 0.0
    assert float(perceptual_loss(a, b, feature_net)) == pytest.approx(float(perceptual_loss(b, a, feature_net)))
    assert float(perceptual_loss(a, b, feature_net)) > 0


@torch.no_grad()
def test_perceptual_grows_with_noise(feature_net):
    g = torch.Generator().manual_seed(0)
    a = torch.rand(4, 3, 16, 16, dtype=torch.float64, generator=g)
    noise = torch.randn(4, 3, 16, 16, dtype=torch.float64, generator=g)
    vals = [float(perceptual_loss(a, a + s * noise, feature_net)) for s in (0.01, 0.1, 0.5)]
    assert vals[0] < vals[1] < vals[2]


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(lambda_DA=-1)


def test_report_ledger():
    w = term_weights("2", LossWeights())
    r = LossReport(3, "2", {"g_adv_F": 1.0, "perc_F": 0.5}, {"d_img": 2.0, "r1_img": 0.1}, w)
    assert r.ledger_ok()
    assert r.gen_total == pytest.approx(1.0 + 10.0 * 0.5)
    assert r.disc_total == pytest.approx(2.0 + 10.0 * 0.1)
    bad = LossReport(3, "2", {"g_adv_F": 1.0}, {}, w, gen_total=5.0)
    assert not bad.ledger_ok()
    names = [row[1] for row in r.rows()]
    assert names[-2:] == ["gen_total", "disc_total"]
    assert LossReport(0, "1", {"g_adv_F": float("nan")}, {}, w).is_finite() is False


def test_term_weights_per_stage():
    w1, w2 = term_weights("1", LossWeights()), term_weights("2", LossWeights())
    assert {"d_F", "d_C", "r1_F"} <= set(w1) and "perc_F" not in w1
    assert {"perc_F", "align_DA", "d_img"} <= set(w2) and "d_F" not in w2
    assert w1["g_adv_DA"] == w2["g_adv_DA"] == 5.0
    assert term_weights("1", LossWeights(), r1_scale=4)["r1_F"] == 40.0
    assert w2["align_DA"] == 1.0
    assert term_weights("2", LossWeights(lambda_align=20.0))["align_DA"] == 20.0
