"""Two-stage adversarial training.

Stage 1 trains E_C, E_map, G with separate image discriminators D_F (for
images generated from prior samples) and D_C (for images generated from
phenotype vectors), plus the latent discriminator D_DA that pushes E_C's
outputs toward the prior. Stage 2 adds the image encoder E_F, replaces D_F
and D_C by one discriminator D initialised from D_F, and aligns E_F's latent
distribution with E_C's.
"""
from __future__ import annotations

import csv
import logging
import math
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from phenofactor.dataset import Batch, BatchLoader, Manifest
from phenofactor.errors import MissingCheckpoint, NonFiniteLoss, StageMismatch
from phenofactor.losses import (
    LossReport,
    LossWeights,
    gan_disc_loss,
    gan_gen_loss,
    log_one_minus,
    perceptual_loss,
    r1_penalty,
    term_weights,
)
from phenofactor.networks import NetworkBundle, NetworkConfig, images_to_tensor, state_hash

log = logging.getLogger(__name__)

LOG_HEADER = ("step", "term", "value")


def child_rng(seed: int, label: str) -> np.random.Generator:
    """Independent stream derived from the root seed and a subsystem label."""
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(label.encode())]))


def child_torch_generator(seed: int, label: str) -> torch.Generator:
    s = int(child_rng(seed, label).integers(0, 2**62))
    return torch.Generator().manual_seed(s)


def configure_determinism(threads: int = 1) -> None:
    torch.set_num_threads(threads)
    if threads == 1:
        torch.use_deterministic_algorithms(True)


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr_g: float = 2e-3
    lr_d: float = 2e-3
    lr_enc: float = 2e-4
    betas: tuple[float, float] = (0.0, 0.99)
    weights: LossWeights = field(default_factory=LossWeights)
    r1_interval: int = 1
    seed: int = 0
    checkpoint_every: int = 0
    log_every: int = 1
    freeze_ec_stage2: bool = False
    noise_mode: str = "random"
    threads: int = 1
    network: dict = field(default_factory=lambda: asdict(NetworkConfig.preset("toy")))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "weights" in d and not isinstance(d["weights"], LossWeights):
            d["weights"] = LossWeights(**d["weights"])
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def _set_requires_grad(modules, flag: bool):
    for m in modules:
        for p in m.parameters():
            p.requires_grad_(flag)


def _real_term(D, real, with_r1: bool):
    """(probability on reals, R1 value or None) sharing one forward pass."""
    if not with_r1:
        return torch.sigmoid(D(real)), None
    x = real.detach().requires_grad_(True)
    logits = D(x)
    (grad,) = torch.autograd.grad(logits.sum(), x, create_graph=True)
    return torch.sigmoid(logits), 0.5 * grad.pow(2).flatten(1).sum(1).mean()


def forward_pass(stage: str, nets: NetworkBundle, real_F, theta, z_F=None, noise_mode="const",
                 generator=None) -> dict:
    """Latents and generated images for one step.

    Stage 1 uses the supplied prior samples ``z_F``; stage 2 encodes ``real_F``.
    """
    if stage == "2":
        z_F = nets.E_F(real_F)
    elif z_F is None:
        raise ValueError("stage 1 needs prior samples z_F")
    z_C = nets.E_C(theta)
    x_F = nets.G(nets.E_map(z_F), noise_mode=noise_mode, generator=generator)
    x_C = nets.G(nets.E_map(z_C), noise_mode=noise_mode, generator=generator)
    return {"z_F": z_F, "z_C": z_C, "x_F": x_F, "x_C": x_C}


def disc_terms(stage: str, nets: NetworkBundle, fw: dict, real_C, real_F, with_r1: bool = True) -> dict:
    """Discriminator-side terms on detached fakes (and R1 on reals when requested)."""
    n = nets
    out = {}
    if stage == "1":
        p_real, r1_f = _real_term(n.D_F, real_F, with_r1)
        out["d_F"] = gan_disc_loss(p_real, torch.sigmoid(n.D_F(fw["x_F"].detach())))
        p_real, r1_c = _real_term(n.D_C, real_C, with_r1)
        out["d_C"] = gan_disc_loss(p_real, torch.sigmoid(n.D_C(fw["x_C"].detach())))
        # latent real/fake: prior samples vs. supervised-encoder outputs
        p_real, r1_da = _real_term(n.D_DA, fw["z_F"].detach(), with_r1)
        out["d_DA"] = gan_disc_loss(p_real, torch.sigmoid(n.D_DA(fw["z_C"].detach())))
        if with_r1:
            out.update(r1_F=r1_f, r1_C=r1_c, r1_DA=r1_da)
    else:
        reals = torch.cat([real_F, real_C])
        fakes = torch.cat([fw["x_F"], fw["x_C"]]).detach()
        p_real, r1_img = _real_term(n.D, reals, with_r1)
        out["d_img"] = gan_disc_loss(p_real, torch.sigmoid(n.D(fakes)))
        # latent real/fake: supervised-encoder outputs vs. image-encoder outputs
        p_real, r1_da = _real_term(n.D_DA, fw["z_C"].detach(), with_r1)
        out["d_DA"] = gan_disc_loss(p_real, torch.sigmoid(n.D_DA(fw["z_F"].detach())))
        if with_r1:
            out.update(r1_img=r1_img, r1_DA=r1_da)
    return out


def gen_terms(stage: str, nets: NetworkBundle, fw: dict, real_C, real_F, feature_net) -> dict:
    n = nets
    D_F, D_C = (n.D_F, n.D_C) if stage == "1" else (n.D, n.D)
    out = {
        "g_adv_F": gan_gen_loss(torch.sigmoid(D_F(fw["x_F"]))),
        "g_adv_DA": gan_gen_loss(torch.sigmoid(n.D_DA(fw["z_C"]))),
        "g_adv_C": gan_gen_loss(torch.sigmoid(D_C(fw["x_C"]))),
        "perc_C": perceptual_loss(fw["x_C"], real_C, feature_net),
    }
    if stage == "2":
        out["perc_F"] = perceptual_loss(fw["x_F"], real_F, feature_net)
        out["align_DA"] = log_one_minus(torch.sigmoid(n.D_DA(fw["z_F"])))
    return out


def _report(step, stage, g_terms, d_terms, wts, g_total=None, d_total=None) -> LossReport:
    return LossReport(
        step=step,
        stage=stage,
        gen_terms={k: float(v.detach()) for k, v in g_terms.items()},
        disc_terms={k: float(v.detach()) for k, v in d_terms.items()},
        weights={k: wts[k] for k in [*g_terms, *d_terms]},
        gen_total=None if g_total is None else float(g_total.detach()),
        disc_total=None if d_total is None else float(d_total.detach()),
    )


def _as_batch_tensors(nets, batch_C: Batch, batch_F: Batch | None):
    dtype = next(nets.G.parameters()).dtype
    real_C = images_to_tensor(batch_C.images, dtype)
    real_F = images_to_tensor(batch_F.images, dtype) if batch_F is not None else real_C
    return real_C, real_F, torch.as_tensor(batch_C.theta, dtype=dtype)


def stage1_losses(batch_C: Batch, z_F, nets: NetworkBundle, weights: LossWeights, feature_net,
                  batch_F: Batch | None = None, with_r1: bool = True) -> LossReport:
    """Evaluate every stage-1 term once, without updating anything.

    ``batch_F`` supplies the reals for D_F; when omitted the supervised images
    stand in. Generator noise is held at its fixed buffers.
    """
    if nets.stage != "1":
        raise StageMismatch(f"stage-1 losses need stage-1 networks, got stage {nets.stage}")
    real_C, real_F, theta = _as_batch_tensors(nets, batch_C, batch_F)
    z_F = torch.as_tensor(np.asarray(z_F) if not isinstance(z_F, torch.Tensor) else z_F, dtype=real_C.dtype)
    fw = forward_pass("1", nets, real_F, theta, z_F)
    wts = term_weights("1", weights)
    return _report(0, "1", gen_terms("1", nets, fw, real_C, real_F, feature_net),
                   disc_terms("1", nets, fw, real_C, real_F, with_r1), wts)


def stage2_losses(batch_C: Batch, batch_F: Batch, nets: NetworkBundle, weights: LossWeights, feature_net,
                  with_r1: bool = True) -> LossReport:
    if nets.stage != "2":
        raise StageMismatch(f"stage-2 losses need stage-2 networks, got stage {nets.stage}")
    real_C, real_F, theta = _as_batch_tensors(nets, batch_C, batch_F)
    fw = forward_pass("2", nets, real_F, theta)
    wts = term_weights("2", weights)
    return _report(0, "2", gen_terms("2", nets, fw, real_C, real_F, feature_net),
                   disc_terms("2", nets, fw, real_C, real_F, with_r1), wts)


class Trainer:
    """Owns networks, optimisers, loaders and the loss log for one stage."""

    def __init__(self, stage: str, nets: NetworkBundle, config: TrainConfig, feature_net,
                 loader_C: BatchLoader, loader_F: BatchLoader, out_dir, log_path=None):
        if stage not in ("1", "2"):
            raise StageMismatch(f"unknown stage {stage!r}")
        self.stage = stage
        self.nets = nets
        self.cfg = config
        self.feature_net = feature_net
        self.loader_C = loader_C
        self.loader_F = loader_F
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.log_path = Path(log_path) if log_path else self.out_dir / f"stage{stage}_losses.csv"
        self.step = 0
        self.gen = child_torch_generator(config.seed, f"stage{stage}/latents")
        self.reports: list[LossReport] = []
        b = config.betas
        n = nets
        if stage == "1":
            self.d_modules = [n.D_F, n.D_C, n.D_DA]
            self.enc_modules = [n.E_C]
        else:
            self.d_modules = [n.D, n.D_DA]
            self.enc_modules = [n.E_F] if config.freeze_ec_stage2 else [n.E_F, n.E_C]
            if config.freeze_ec_stage2:
                _set_requires_grad([n.E_C], False)
        self.g_modules = [n.G, n.E_map]
        self.opt_g = torch.optim.Adam([p for m in self.g_modules for p in m.parameters()], lr=config.lr_g, betas=b)
        self.opt_enc = torch.optim.Adam([p for m in self.enc_modules for p in m.parameters()],
                                        lr=config.lr_enc, betas=b)
        self.opt_d = torch.optim.Adam([p for m in self.d_modules for p in m.parameters()], lr=config.lr_d, betas=b)
        self.weights = term_weights(stage, config.weights)
        self.weights_r1 = term_weights(stage, config.weights, r1_scale=config.r1_interval)

    # -- one step ----------------------------------------------------------------

    def _batch_tensors(self, bC: Batch, bF: Batch):
        return _as_batch_tensors(self.nets, bC, bF)

    def train_step(self) -> LossReport:
        n, cfg = self.nets, self.cfg
        bC, bF = self.loader_C.next(), self.loader_F.next()
        real_C, real_F, theta = self._batch_tensors(bC, bF)
        with_r1 = cfg.weights.lambda_R1 > 0 and self.step % cfg.r1_interval == 0
        wts = self.weights_r1 if with_r1 else self.weights

        # generator-side forward pass, reused (detached) by the discriminator step
        z_F = None
        if self.stage == "1":
            z_F = torch.randn(real_C.shape[0], n.config.latent_dim, generator=self.gen, dtype=real_C.dtype)
        fw = forward_pass(self.stage, n, real_F, theta, z_F, cfg.noise_mode, self.gen)

        _set_requires_grad(self.d_modules, True)
        d_terms = disc_terms(self.stage, n, fw, real_C, real_F, with_r1)
        d_total = sum(wts[k] * v for k, v in d_terms.items())
        self._check_finite("discriminator", d_total, d_terms)
        self.opt_d.zero_grad(set_to_none=True)
        d_total.backward()
        self.opt_d.step()

        # generator / encoder step through the updated discriminators
        _set_requires_grad(self.d_modules, False)
        g_terms = gen_terms(self.stage, n, fw, real_C, real_F, self.feature_net)
        g_total = sum(wts[k] * v for k, v in g_terms.items())
        self._check_finite("generator", g_total, g_terms)
        self.opt_g.zero_grad(set_to_none=True)
        self.opt_enc.zero_grad(set_to_none=True)
        g_total.backward()
        self.opt_g.step()
        self.opt_enc.step()
        _set_requires_grad(self.d_modules, True)

        report = _report(self.step, self.stage, g_terms, d_terms, wts, g_total, d_total)
        self.step += 1
        return report

    def _check_finite(self, side, total, terms):
        if not torch.isfinite(total):
            detail = ", ".join(f"{k}={float(v.detach()):.6g}" for k, v in terms.items())
            raise NonFiniteLoss(f"stage {self.stage} step {self.step}: non-finite {side} loss ({detail})")

    # -- loop / persistence ---------------------------------------------------------

    def run(self, steps: int | None = None) -> Path:
        steps = self.cfg.steps if steps is None else steps
        new_file = self.step == 0 or not self.log_path.exists()
        with open(self.log_path, "w" if new_file else "a", newline="") as fh:
            writer = csv.writer(fh)
            if new_file:
                writer.writerow(LOG_HEADER)
            while self.step < steps:
                report = self.train_step()
                self.reports.append(report)
                if report.step % self.cfg.log_every == 0:
                    for row in report.rows():
                        writer.writerow((row[0], row[1], repr(row[2])))
                if report.step % 100 == 0:
                    log.info("stage %s step %d gen %.4f disc %.4f", self.stage, report.step,
                             report.gen_total, report.disc_total)
                if self.cfg.checkpoint_every and self.step % self.cfg.checkpoint_every == 0:
                    fh.flush()
                    self.save(self.out_dir / f"stage{self.stage}_step{self.step:06d}.pt")
        final = self.out_dir / f"stage{self.stage}.pt"
        self.save(final)
        return final

    def save(self, path) -> None:
        self.nets.stage = self.stage
        self.nets.save(path, train={
            "stage": self.stage,
            "step": self.step,
            "config": self.cfg.to_dict(),
            "opt_g": self.opt_g.state_dict(),
            "opt_enc": self.opt_enc.state_dict(),
            "opt_d": self.opt_d.state_dict(),
            "loader_C": self.loader_C.state(),
            "loader_F": self.loader_F.state(),
            "generator": self.gen.get_state(),
        })

    def load_train_state(self, state: dict) -> None:
        t = state["train"]
        if t["stage"] != self.stage:
            raise StageMismatch(f"checkpoint is stage {t['stage']}, trainer is stage {self.stage}")
        self.step = t["step"]
        self.opt_g.load_state_dict(t["opt_g"])
        self.opt_enc.load_state_dict(t["opt_enc"])
        self.opt_d.load_state_dict(t["opt_d"])
        self.loader_C.load_state(t["loader_C"])
        self.loader_F.load_state(t["loader_F"])
        self.gen.set_state(t["generator"])


def _loaders(config: TrainConfig, manifest_C: Manifest, manifest_F: Manifest):
    if not manifest_C.supervised:
        raise ValueError("the supervised manifest has no phenotype vectors; run `metrics` first")
    loader_C = BatchLoader.from_manifest(manifest_C, config.batch_size, child_rng(config.seed, "data/supervised"))
    images_F = manifest_F.load_images()
    loader_F = BatchLoader(images_F, config.batch_size, child_rng(config.seed, "data/unsupervised"))
    return loader_C, loader_F


def train_stage1(config: TrainConfig, manifest_C: Manifest, manifest_F: Manifest, feature_net,
                 out_dir, resume_from=None) -> Path:
    configure_determinism(config.threads)
    loader_C, loader_F = _loaders(config, manifest_C, manifest_F)
    if resume_from is not None:
        state = _load_state(resume_from)
        nets = NetworkBundle.from_state(state)
    else:
        nets = NetworkBundle.build(NetworkConfig(**config.network), seed=int(child_rng(config.seed, "init").integers(2**31)))
        nets.E_C.fit_normalization(loader_C.thetas)
    trainer = Trainer("1", nets, config, feature_net, loader_C, loader_F, out_dir)
    if resume_from is not None:
        trainer.load_train_state(state)
    return trainer.run()


def init_stage2(stage1: NetworkBundle, seed: int) -> NetworkBundle:
    """Stage-2 starting point: D copies D_F's weights, E_F and D_DA start fresh."""
    if stage1.stage != "1":
        raise StageMismatch(f"stage 2 starts from a stage-1 checkpoint, got stage {stage1.stage}")
    nets = stage1.copy()
    fresh = NetworkBundle.build(stage1.config, stage1.scheme, seed=seed)
    nets.D.load_state_dict(stage1.D_F.state_dict())
    nets.E_F.load_state_dict(fresh.E_F.state_dict())
    nets.D_DA.load_state_dict(fresh.D_DA.state_dict())
    nets.extra["D_init_hash"] = state_hash(stage1.D_F)
    nets.stage = "2"
    return nets


def train_stage2(config: TrainConfig, stage1_ckpt, manifest_C: Manifest, manifest_F: Manifest,
                 feature_net, out_dir, resume_from=None) -> Path:
    configure_determinism(config.threads)
    loader_C, loader_F = _loaders(config, manifest_C, manifest_F)
    if resume_from is not None:
        state = _load_state(resume_from)
        nets = NetworkBundle.from_state(state)
    else:
        nets = init_stage2(NetworkBundle.from_state(_load_state(stage1_ckpt)),
                           seed=int(child_rng(config.seed, "init/stage2").integers(2**31)))
    trainer = Trainer("2", nets, config, feature_net, loader_C, loader_F, out_dir)
    if resume_from is not None:
        trainer.load_train_state(state)
    return trainer.run()


def resume_trainer(checkpoint, config: TrainConfig, manifest_C, manifest_F, feature_net, out_dir) -> Trainer:
    """Rebuild a trainer mid-stage from a periodic checkpoint."""
    configure_determinism(config.threads)
    state = _load_state(checkpoint)
    loader_C, loader_F = _loaders(config, manifest_C, manifest_F)
    nets = NetworkBundle.from_state(state)
    trainer = Trainer(state["train"]["stage"], nets, config, feature_net, loader_C, loader_F, out_dir)
    trainer.load_train_state(state)
    return trainer


def _load_state(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise MissingCheckpoint(f"no checkpoint at {path}")
    return torch.load(path, map_location="cpu", weights_only=False)


def read_loss_log(path) -> dict[str, np.ndarray]:
    """term -> array of (step, value) rows."""
    out: dict[str, list] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["term"], []).append((int(row["step"]), float(row["value"])))
    return {k: np.asarray(v) for k, v in out.items()}


def moving_average(values, window: int = 50) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if len(values) < window:
        window = max(1, len(values))
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")


def moving_average_at(trace: np.ndarray, step: int, window: int = 50) -> float:
    """Mean of the ``window`` logged values ending at ``step`` (inclusive)."""
    steps, values = trace[:, 0], trace[:, 1]
    sel = values[(steps <= step) & (steps > step - window)]
    if len(sel) == 0 or not all(math.isfinite(v) for v in sel):
        raise ValueError(f"no finite values logged near step {step}")
    return float(sel.mean())
