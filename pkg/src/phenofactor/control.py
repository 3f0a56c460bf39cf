"""Inference-time editing: reconstruction, per-image generator fine-tuning,
attribute setting from phenotype values and predictor-driven factor edits.

None of these functions modify the networks they are given.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from phenofactor.errors import NonFiniteLoss, ShapeMismatch
from phenofactor.latent import FactorizedLatent, swap_factor
from phenofactor.losses import gan_gen_loss, log_one_minus, perceptual_loss
from phenofactor.networks import NetworkBundle, images_to_tensor, tensor_to_images


def _as_batch(nets: NetworkBundle, image) -> torch.Tensor:
    dtype = next(nets.G.parameters()).dtype
    x = image if isinstance(image, torch.Tensor) else images_to_tensor(image, dtype)
    return x[None] if x.ndim == 3 else x


def _values(z) -> torch.Tensor:
    return z.values if isinstance(z, FactorizedLatent) else z


@torch.no_grad()
def encode(nets: NetworkBundle, image) -> torch.Tensor:
    return nets.E_F(_as_batch(nets, image))


@torch.no_grad()
def render(nets: NetworkBundle, z, G=None) -> torch.Tensor:
    """G(E_map(z)) in generator range, with fixed noise."""
    z = _values(z)
    G = G or nets.G
    return G(nets.E_map(z if z.ndim == 2 else z[None]), noise_mode="const")


def reconstruct(nets: NetworkBundle, image) -> np.ndarray:
    """Encode, map and regenerate; returns uint8 images shaped like the input."""
    image_arr = None if isinstance(image, torch.Tensor) else np.asarray(image)
    out = tensor_to_images(render(nets, encode(nets, image)))
    if image_arr is not None and image_arr.ndim == 3:
        return out[0]
    return out


@dataclass
class FinetuneResult:
    generator: torch.nn.Module
    z: torch.Tensor
    loss_history: list[float] = field(default_factory=list)
    perceptual_history: list[float] = field(default_factory=list)

    def __iter__(self):
        # allows ``G2, z2 = one_shot_finetune(...)``
        return iter((self.generator, self.z))


def finetune_objective(nets, G, z, target, feature_net, face_net=None):
    """Per-image loss: adversarial + latent alignment + perceptual + face-embedding terms.

    Returns (total, perceptual term) as tensors.
    """
    y = G(nets.E_map(z), noise_mode="const")
    adv = gan_gen_loss(torch.sigmoid(nets.D(y)))
    align = log_one_minus(torch.sigmoid(nets.D_DA(z)))
    perc = perceptual_loss(y, target, feature_net)
    face = perceptual_loss(y, target, face_net) if face_net is not None else y.new_zeros(())
    return adv + align + perc + face, perc


def one_shot_finetune(nets: NetworkBundle, image, steps: int, feature_net, face_net=None,
                      lr_g: float = 5e-4, lr_z: float = 5e-3) -> FinetuneResult:
    """Optimise a private copy of G together with the image's latent.

    The latent starts at E_F(image). Discriminators, E_map and the shared G are
    only read; gradients are taken explicitly so no ``.grad`` buffer on the
    shared networks is touched.
    """
    target = _as_batch(nets, image)
    G = copy.deepcopy(nets.G)
    z = encode(nets, target).clone().requires_grad_(True)
    params = [p for p in G.parameters()]
    for p in params:
        p.requires_grad_(True)
    result = FinetuneResult(G, z)
    if steps <= 0:
        with torch.no_grad():
            total, perc = finetune_objective(nets, G, z, target, feature_net, face_net)
        result.loss_history.append(float(total.detach()))
        result.perceptual_history.append(float(perc.detach()))
        result.z = z.detach()
        return result
    opt = torch.optim.Adam([{"params": params, "lr": lr_g}, {"params": [z], "lr": lr_z}], betas=(0.0, 0.99))
    for step in range(steps + 1):
        total, perc = finetune_objective(nets, G, z, target, feature_net, face_net)
        if not torch.isfinite(total):
            raise NonFiniteLoss(f"fine-tuning step {step}: loss {float(total.detach())} "
                                f"(perceptual {float(perc.detach())})")
        result.loss_history.append(float(total.detach()))
        result.perceptual_history.append(float(perc.detach()))
        if step == steps:
            break
        grads = torch.autograd.grad(total, [*params, z])
        for p, g in zip([*params, z], grads):
            p.grad = g
        opt.step()
    for p in params:
        p.requires_grad_(False)
    result.z = z.detach()
    return result


def set_attribute_from_theta(nets: NetworkBundle, z, attribute: str, theta_block) -> torch.Tensor:
    """Replace ``attribute``'s latent range with E_C's encoding of ``theta_block``."""
    values = _values(z)
    dtype = values.dtype
    block = torch.as_tensor(np.asarray(theta_block) if not isinstance(theta_block, torch.Tensor) else theta_block,
                            dtype=dtype)
    with torch.no_grad():
        encoded = nets.E_C.encode_block(attribute, block)
    return swap_factor(values, attribute, encoded, nets.scheme)


@dataclass
class ModifyResult:
    z: torch.Tensor
    prediction: float
    objective_history: list[float]
    iterations: int
    status: str          # "converged", "max_iters", "no_progress" or "line_search_failed"


def fine_grained_modify(nets: NetworkBundle, z, attribute: str, target: float, predictor,
                        max_iters: int = 100, tol: float = 1e-4, mu: float = 0.01,
                        step_size: float = 1.0, G=None, patience: int = 20) -> ModifyResult:
    """Gradient descent on one factor toward a predictor target.

    Minimises (predictor(G(E_map(z))) - target)^2 + mu * ||s - s0||^2 over the
    attribute slice s only, with a halving backtracking line search (at most
    10 halvings). Coordinates outside the slice are never written. Stops when
    the squared prediction error falls below ``tol``; reports ``no_progress``
    when the objective improves by less than 1e-6 over ``patience`` iterations.
    """
    if not 0.0 <= target <= 1.0:
        raise ValueError(f"target must lie in [0, 1], got {target}")
    G = G or nets.G
    z0 = _values(z).detach()
    if z0.ndim == 1:
        z0 = z0[None]
    if z0.shape[-1] != nets.scheme.total_dim:
        raise ShapeMismatch(f"latent has {z0.shape[-1]} entries, scheme expects {nets.scheme.total_dim}")
    sl = nets.scheme.slice(attribute)
    s0 = z0[..., sl].clone()
    modules = [G, nets.E_map]
    saved = [(p, p.requires_grad) for m in modules for p in m.parameters()]
    for p, _ in saved:
        p.requires_grad_(False)

    def evaluate(s):
        y = G(nets.E_map(swap_factor(z0, attribute, s, nets.scheme)), noise_mode="const")
        pred = predictor(y).mean()
        err = (pred - target) ** 2
        return err + mu * (s - s0).pow(2).sum(), err, pred

    try:
        s = s0.clone().requires_grad_(True)
        f, err, pred = evaluate(s)
        history = [float(f.detach())]
        status = "max_iters"
        it = 0
        for it in range(1, max_iters + 1):
            if float(err.detach()) <= tol:
                status = "converged"
                it -= 1
                break
            (g,) = torch.autograd.grad(f, s)
            lr, accepted = step_size, False
            for _ in range(11):
                cand = (s - lr * g).detach().requires_grad_(True)
                f_new, err_new, pred_new = evaluate(cand)
                if float(f_new.detach()) <= float(f.detach()):
                    accepted = True
                    break
                lr *= 0.5
            if not accepted:
                status = "line_search_failed"
                break
            s, f, err, pred = cand, f_new, err_new, pred_new
            history.append(float(f.detach()))
            if len(history) > patience and history[-patience - 1] - history[-1] < 1e-6:
                status = "no_progress"
                break
        if status == "max_iters" and float(err.detach()) <= tol:
            status = "converged"
        z_new = swap_factor(z0, attribute, s.detach(), nets.scheme)
        if not math.isfinite(float(pred.detach())):
            raise NonFiniteLoss("predictor returned a non-finite value")
        return ModifyResult(z_new, float(pred.detach()), history, it, status)
    finally:
        for p, flag in saved:
            p.requires_grad_(flag)
