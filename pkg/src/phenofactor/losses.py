"""Adversarial, gradient-penalty and perceptual loss terms, and the loss ledger."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch

EPS = 1e-7


@dataclass
class LossWeights:
    lambda_DA: float = 5.0
    lambda_R1: float = 10.0
    lambda_perc_stage1: float = 0.00005
    lambda_perc_stage2: float = 10.0
    adversarial: float = 1.0
    lambda_align: float = 1.0      # stage-2 log(1 - D_DA(z_F)) term

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"{k} must be >= 0, got {v}")


def _safe_log(p):
    if isinstance(p, torch.Tensor):
        return torch.log(p.clamp(EPS, 1.0))
    return math.log(min(max(float(p), EPS), 1.0))


def gan_gen_loss(score):
    """-log(score), with the score clamped to [1e-7, 1]; batch tensors are averaged."""
    out = -_safe_log(score)
    return out.mean() if isinstance(out, torch.Tensor) else out


def log_one_minus(score):
    """log(1 - score), clamped the same way; the alignment term of the second stage."""
    if isinstance(score, torch.Tensor):
        return _safe_log(1.0 - score).mean()
    return _safe_log(1.0 - float(score))


def gan_disc_loss(real_score, fake_score):
    """Non-saturating discriminator objective: -log D(real) - log(1 - D(fake))."""
    return gan_gen_loss(real_score) - log_one_minus(fake_score)


def r1_penalty(D, real: torch.Tensor, create_graph: bool = True) -> torch.Tensor:
    """0.5 * batch mean of the squared norm of d logit / d input, on real samples."""
    x = real.detach().requires_grad_(True)
    logits = D(x)
    if not logits.requires_grad:
        return torch.zeros((), dtype=real.dtype)
    (grad,) = torch.autograd.grad(logits.sum(), x, create_graph=create_graph)
    return 0.5 * grad.pow(2).flatten(1).sum(1).mean()


def perceptual_loss(img_a: torch.Tensor, img_b: torch.Tensor, feature_net, layers=None) -> torch.Tensor:
    """Sum over layers of the mean squared difference between feature activations."""
    fa = feature_net.features(img_a)
    fb = feature_net.features(img_b)
    if layers is not None:
        fa = [fa[i] for i in layers]
        fb = [fb[i] for i in layers]
    total = img_a.new_zeros(())
    for a, b in zip(fa, fb):
        total = total + (a - b).pow(2).mean()
    return total


@dataclass
class LossReport:
    """Per-term values with the weights used to total them.

    Generator and discriminator terms are kept apart; each total is the
    weighted sum of its own terms.
    """

    step: int
    stage: str
    gen_terms: dict[str, float]
    disc_terms: dict[str, float]
    weights: dict[str, float]
    gen_total: float | None = None
    disc_total: float | None = None

    def __post_init__(self):
        # totals passed in are the values actually back-propagated
        if self.gen_total is None:
            self.gen_total = sum(self.weights[k] * v for k, v in self.gen_terms.items())
        if self.disc_total is None:
            self.disc_total = sum(self.weights[k] * v for k, v in self.disc_terms.items())

    def ledger_ok(self, tol: float = 1e-6) -> bool:
        """Totals equal the weighted term sums, to ``tol`` relative to the summed magnitudes.

        The relative scale absorbs float32 rounding in the back-propagated totals.
        """
        def close(terms, total):
            parts = [self.weights[k] * v for k, v in terms.items()]
            return abs(sum(parts) - total) <= tol * max(1.0, sum(abs(p) for p in parts))

        return close(self.gen_terms, self.gen_total) and close(self.disc_terms, self.disc_total)

    def is_finite(self) -> bool:
        vals = [*self.gen_terms.values(), *self.disc_terms.values(), self.gen_total, self.disc_total]
        return all(math.isfinite(v) for v in vals)

    def rows(self):
        for k, v in self.gen_terms.items():
            yield self.step, k, v
        for k, v in self.disc_terms.items():
            yield self.step, k, v
        yield self.step, "gen_total", self.gen_total
        yield self.step, "disc_total", self.disc_total


def term_weights(stage: str, weights: LossWeights, r1_scale: float = 1.0) -> dict[str, float]:
    """Weight applied to every named term in the given stage.

    The domain-adversarial term carries lambda_DA in both stages.
    """
    adv = weights.adversarial
    w = {
        "g_adv_F": adv,
        "g_adv_C": adv,
        "g_adv_DA": weights.lambda_DA,
        "perc_C": weights.lambda_perc_stage1,
        "d_DA": 1.0,
        "r1_DA": weights.lambda_R1 * r1_scale,
    }
    if stage == "1":
        w.update({"d_F": adv, "d_C": adv, "r1_F": weights.lambda_R1 * r1_scale,
                  "r1_C": weights.lambda_R1 * r1_scale})
    else:
        w.update({"perc_F": weights.lambda_perc_stage2, "align_DA": weights.lambda_align, "d_img": adv,
                  "r1_img": weights.lambda_R1 * r1_scale})
    return w
