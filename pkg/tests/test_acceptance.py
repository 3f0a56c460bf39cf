"""End-to-end acceptance checks, one test per numbered criterion.

Each test records a PASS/FAIL line (printed, and repeated in the terminal
summary). The toy training run is shared by criteria 2, 6, 7 and 8.
"""
import csv
import math
import time

import numpy as np
import pytest
import scipy.linalg
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import record_criterion
from fdcheck import input_gradcheck, param_gradcheck
from phenofactor.control import one_shot_finetune
from phenofactor.dataset import Manifest
from phenofactor.features import FeatureNet
from phenofactor.latent import FactorizationScheme, SupervisedEncoder, default_scheme, factor_slice, swap_factor
from phenofactor.losses import LossWeights, gan_gen_loss, perceptual_loss, r1_penalty, term_weights
from phenofactor.networks import NetworkBundle, NetworkConfig, file_hash, images_to_tensor
from phenofactor.evaluation import fid
from phenofactor.phenotype import region_color_stats
from phenofactor.toy import color_predictors, color_theta_sweep, run_toy_pipeline, sweep_attribute, toy_train_config
from phenofactor.training import TrainConfig, moving_average_at, read_loss_log, stage1_losses

SEED = 0
STAGE1_STEPS = 1500
STAGE2_STEPS = 2000
SHORT_STEPS = 60          # determinism re-runs (criterion 8)


def brute_force_stats(image, mask):
    import colorsys

    vs, ss, crs = [], [], []
    for i, j in zip(*np.nonzero(mask)):
        r, g, b = (int(c) for c in image[i, j])
        _, s, v = colorsys.rgb_to_hsv(r / 255.0, g / 255.0, b / 255.0)
        vs.append(v)
        ss.append(s)
        crs.append(min(max(0.5 * r - 0.4187 * g - 0.0813 * b + 128.0, 0.0), 255.0) / 255.0)
    return np.array([np.mean(vs), np.mean(ss), np.mean(crs)])


def test_criterion_1_color_oracle():
    t0 = time.perf_counter()
    r = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        h, w = r.integers(4, 48, size=2)
        img = r.integers(0, 256, (h, w, 3), dtype=np.uint8)
        mask = r.random((h, w)) < r.uniform(0.05, 1.0)
        mask[r.integers(h), r.integers(w)] = True
        got = region_color_stats(img, mask).as_array()
        worst = max(worst, float(np.max(np.abs(got - brute_force_stats(img, mask)))))
    ones = np.ones((3, 3), bool)
    white = region_color_stats(np.full((3, 3, 3), 255, np.uint8), ones).as_array().tolist()
    red = np.zeros((3, 3, 3), np.uint8)
    red[..., 0] = 255
    red = region_color_stats(red, ones).as_array().tolist()
    black = region_color_stats(np.zeros((3, 3, 3), np.uint8), ones).as_array().tolist()
    exact = white == [1.0, 0.0, 128 / 255] and red == [1.0, 1.0, 1.0] and black == [0.0, 0.0, 128 / 255]
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-6 and exact and elapsed < 10
    record_criterion(1, ok, f"max |err| {worst:.2e}, analytic cases exact={exact}, {elapsed:.1f}s")
    assert ok


class NoFeatures:
    def features(self, x):
        return []


def _half(nets):
    with torch.no_grad():
        for layer in (nets.D_F.out, nets.D_C.out, nets.D.out, nets.D_DA.net[-1]):
            layer.weight.zero_()
            layer.bias.zero_()
    return nets


@pytest.mark.slow
def test_criterion_2_loss_arithmetic(toy_run):
    ln2 = gan_gen_loss(0.5)
    from phenofactor.dataset import Batch

    nets = _half(NetworkBundle.build(NetworkConfig.preset("micro"), seed=1, dtype=torch.float64))
    r = np.random.default_rng(0)
    batch = Batch(r.integers(0, 256, (4, 4, 4, 3), dtype=np.uint8), r.random((4, 512)), np.arange(4))
    rep = stage1_losses(batch, torch.randn(4, 512, dtype=torch.float64), nets, LossWeights(), NoFeatures())
    total_ok = abs(rep.gen_total - 7 * math.log(2)) <= 1e-6

    # ledger identity on every logged row of both toy stages, recomputed from the CSV
    bad = 0
    rows = 0
    for stage, path in toy_run.loss_logs.items():
        cfg = toy_train_config(SEED, stage)
        by_step = {}
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                by_step.setdefault(int(row["step"]), {})[row["term"]] = float(row["value"])
        for step, terms in by_step.items():
            scale = cfg.r1_interval if step % cfg.r1_interval == 0 else 1
            w = term_weights(stage, cfg.weights, r1_scale=scale)
            g = sum(w[k] * v for k, v in terms.items() if k in w and not k.startswith(("d_", "r1_")))
            d = sum(w[k] * v for k, v in terms.items() if k.startswith(("d_", "r1_")))
            for part, total in ((g, terms["gen_total"]), (d, terms["disc_total"])):
                if abs(part - total) > 1e-6 * max(1.0, abs(total)):
                    bad += 1
            rows += 1
    ok = abs(ln2 - math.log(2)) <= 1e-9 and total_ok and bad == 0 and rows > 0
    record_criterion(2, ok, f"ln2 err {abs(ln2 - math.log(2)):.1e}, 7ln2 total {rep.gen_total:.8f}, "
                            f"ledger mismatches {bad}/{rows} logged steps")
    assert ok


def test_criterion_3_gradients():
    t0 = time.perf_counter()
    torch.manual_seed(0)
    nets = NetworkBundle.build(NetworkConfig.preset("micro"), seed=2, dtype=torch.float64)
    nets.E_C.fit_normalization(np.random.default_rng(0).random((10, 512)))
    g = torch.Generator().manual_seed(0)
    x = torch.rand(2, 3, 4, 4, dtype=torch.float64, generator=g) * 2 - 1
    x2 = torch.rand(2, 3, 4, 4, dtype=torch.float64, generator=g) * 2 - 1
    z = torch.randn(2, 512, dtype=torch.float64, generator=g)
    theta = torch.rand(2, 512, dtype=torch.float64, generator=g)
    proj = {}

    def weighted(out, key):
        if key not in proj:
            proj[key] = torch.randn(out.shape, dtype=out.dtype, generator=torch.Generator().manual_seed(len(proj)))
        return (out * proj[key]).sum()

    fnet = FeatureNet(width=4).double()
    checks = {
        "r1_penalty": (list(nets.D.parameters()), lambda: r1_penalty(nets.D, x)),
        "perceptual_loss": (list(fnet.parameters()), lambda: perceptual_loss(x, x2, fnet)),
        "E_F": (list(nets.E_F.parameters()), lambda: weighted(nets.E_F(x), "E_F")),
        "E_C": (list(nets.E_C.parameters()), lambda: weighted(nets.E_C(theta), "E_C")),
        "E_map": (list(nets.E_map.parameters()), lambda: weighted(nets.E_map(z), "E_map")),
        "G": (list(nets.G.parameters()), lambda: weighted(nets.G(z, noise_mode="const"), "G")),
        "D_F": (list(nets.D_F.parameters()), lambda: weighted(nets.D_F(x), "D_F")),
        "D_C": (list(nets.D_C.parameters()), lambda: weighted(nets.D_C(x), "D_C")),
        "D": (list(nets.D.parameters()), lambda: weighted(nets.D(x), "D")),
        "D_DA": (list(nets.D_DA.parameters()), lambda: weighted(nets.D_DA(z), "D_DA")),
    }
    failed = []
    worst = 0.0
    for name, (params, fn) in checks.items():
        try:
            pairs = param_gradcheck(params, fn, n_coords=10, seed=3)
            worst = max(worst, max(abs(a - n) / max(abs(a), abs(n), 1e-12) for a, n in pairs))
        except AssertionError:
            failed.append(name)
    try:
        input_gradcheck(x, lambda v: perceptual_loss(v, x2, fnet), n_coords=10)
    except AssertionError:
        failed.append("perceptual_loss/input")
    elapsed = time.perf_counter() - t0
    ok = not failed and elapsed < 120
    record_criterion(3, ok, f"{len(checks) + 1} checks x 10 coords, worst rel err {worst:.1e}, "
                            f"failed {failed or 'none'}, {elapsed:.1f}s")
    assert ok


ENCODER = None


def _encoder():
    global ENCODER
    if ENCODER is None:
        torch.manual_seed(0)
        ENCODER = SupervisedEncoder().double().eval()
        ENCODER.fit_normalization(np.random.default_rng(0).normal(size=(20, 512)))
    return ENCODER


CRIT4_CASES = []


@settings(max_examples=1000, deadline=None, derandomize=True)
@given(seed=st.integers(0, 2**31), attr=st.sampled_from(["skin", "hair", "left_eye", "right_eye", "nose", "mouth"]))
def _criterion_4_case(seed, attr):
    r = np.random.default_rng(seed)
    scheme = default_scheme()
    z = r.normal(size=512)
    rep = r.normal(size=scheme[attr].length)
    z2 = swap_factor(z, attr, rep)
    assert np.array_equal(factor_slice(z2, attr), rep)
    assert np.array_equal(swap_factor(z2, attr, factor_slice(z, attr)), z)
    enc = _encoder()
    theta = torch.as_tensor(r.normal(size=512))
    theta2 = theta.clone()
    offs = enc.input_offsets[attr]
    theta2[offs] = torch.as_tensor(r.normal(size=offs.stop - offs.start))
    with torch.no_grad():
        a, b = enc(theta), enc(theta2)
    keep = torch.ones(512, dtype=torch.bool)
    keep[scheme.slice(attr)] = False
    assert torch.equal(a[keep], b[keep])
    CRIT4_CASES.append(seed)


def test_criterion_4_factorization():
    s = default_scheme()
    lengths = tuple(e.length for e in s.entries)
    cover = np.zeros(512, int)
    for e in s.entries:
        cover[s.slice(e.name)] += 1
    partition = lengths == (3, 3, 125, 125, 128, 128) and np.all(cover == 1) and s.total_dim == 512
    CRIT4_CASES.clear()
    try:
        _criterion_4_case()
        props = True
    except AssertionError:
        props = False
    ok = partition and props and len(CRIT4_CASES) >= 1000
    record_criterion(4, ok, f"blocks {lengths}, exact cover {bool(np.all(cover == 1))}, "
                            f"{len(CRIT4_CASES)} property cases passed={props}")
    assert ok


def test_criterion_5_fid():
    t0 = time.perf_counter()
    r = np.random.default_rng(0)
    x = r.normal(size=(1000, 8))
    ident = fid(x, x)
    one_d = fid(r.normal(0, 1, 100_000), r.normal(3, 1, 100_000))
    a = r.normal(size=(8, 8))
    s1 = a @ a.T + 0.1 * np.eye(8)
    b = r.normal(size=(8, 8))
    s2 = b @ b.T + 0.1 * np.eye(8)
    mu1, mu2 = r.normal(size=8), r.normal(size=8) + 1.5
    exact = float(np.sum((mu1 - mu2) ** 2) + np.trace(s1 + s2 - 2 * scipy.linalg.sqrtm(s1 @ s2).real))
    sampled = fid(r.multivariate_normal(mu1, s1, 50_000), r.multivariate_normal(mu2, s2, 50_000))
    rel = abs(sampled - exact) / exact
    sym, perm = True, True
    for _ in range(20):
        p, q = r.normal(size=(80, 5)), r.normal(size=(70, 5)) * 1.5 + 0.5
        sym &= math.isclose(fid(p, q), fid(q, p), rel_tol=1e-8, abs_tol=1e-10)
        perm &= math.isclose(fid(p[r.permutation(80)], q[r.permutation(70)]), fid(p, q), rel_tol=1e-8, abs_tol=1e-10)
    elapsed = time.perf_counter() - t0
    ok = abs(ident) <= 1e-6 and abs(one_d - 9.0) <= 0.15 and rel <= 0.02 and sym and perm and elapsed < 60
    record_criterion(5, ok, f"identical {ident:.1e}, 1-d {one_d:.4f}, 8-d rel err {rel:.4f}, "
                            f"symmetric {sym}, permutation-invariant {perm}, {elapsed:.1f}s")
    assert ok


# -- shared toy run ----------------------------------------------------------------

@pytest.fixture(scope="session")
def toy_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy_run")
    t0 = time.perf_counter()
    run = run_toy_pipeline(root, seed=SEED, n=200, resolution=32,
                           stage1=toy_train_config(SEED, "1", steps=STAGE1_STEPS),
                           stage2=toy_train_config(SEED, "2", steps=STAGE2_STEPS))
    run.timings["total"] = time.perf_counter() - t0
    return run


@pytest.mark.slow
def test_criterion_6_toy_controllability(toy_run):
    nets = NetworkBundle.load(toy_run.stage2).eval()
    val = Manifest.read(toy_run.manifest).split("val")
    images = val.load_images()
    preds = color_predictors(val)
    skin = sweep_attribute(nets, images, "skin", color_theta_sweep("skin"), preds)
    hair = sweep_attribute(nets, images, "hair", color_theta_sweep("hair"), preds)

    logs = {s: read_loss_log(p) for s, p in toy_run.loss_logs.items()}
    # global step 100 lies in stage 1, where perc_C is the reconstruction term;
    # "end" is the last stage-2 step
    sup1, sup2 = logs["1"]["perc_C"], logs["2"]["perc_C"]
    ratio = moving_average_at(sup2, int(sup2[-1, 0])) / moving_average_at(sup1, 100)
    recon = logs["2"]["perc_F"]
    ratio_f = moving_average_at(recon, int(recon[-1, 0])) / moving_average_at(recon, 100)
    with torch.no_grad():
        z_f = nets.E_F(images_to_tensor(images))
        align = float((torch.sigmoid(nets.D_DA(z_f)) - 0.5).abs().mean())

    a = ratio < 0.5
    b = skin.spearman >= 0.8 and skin.md["hair"] < 0.1
    c = hair.spearman >= 0.8 and hair.md["skin"] < 0.1
    minutes = toy_run.timings["total"] / 60
    ok = a and b and c and minutes <= 45
    record_criterion(6, ok, f"(a) perc_C MA end/step100 {ratio:.3f} (stage-2 perc_F alone {ratio_f:.3f}); "
                            f"(b) skin rho {skin.spearman:.2f} v_mean {np.round(skin.responses['skin'], 3).tolist()} "
                            f"hair MD {skin.md['hair']:.4f}; (c) hair rho {hair.spearman:.2f} "
                            f"skin MD {hair.md['skin']:.4f}; mean |D_DA(z_F)-0.5| {align:.3f}; {minutes:.1f} min")
    assert ok


@pytest.mark.slow
def test_criterion_7_one_shot_finetune(toy_run):
    t0 = time.perf_counter()
    before = file_hash(toy_run.stage2)
    nets = NetworkBundle.load(toy_run.stage2).eval()
    feature_net = FeatureNet.load(toy_run.feature_net)
    image = Manifest.read(toy_run.manifest).split("val").load_record(0).image
    res = one_shot_finetune(nets, image, 200, feature_net)
    drop = 1.0 - res.perceptual_history[-1] / res.perceptual_history[0]
    unchanged = file_hash(toy_run.stage2) == before
    elapsed = time.perf_counter() - t0
    ok = drop >= 0.2 and unchanged and elapsed < 300
    record_criterion(7, ok, f"perceptual {res.perceptual_history[0]:.4f} -> {res.perceptual_history[-1]:.4f} "
                            f"({100 * drop:.1f}% lower), checkpoint hash unchanged {unchanged}, {elapsed:.1f}s")
    assert ok


def _short_run(root):
    return run_toy_pipeline(root, seed=SEED, n=200, resolution=32,
                            stage1=toy_train_config(SEED, "1", steps=SHORT_STEPS),
                            stage2=toy_train_config(SEED, "2", steps=SHORT_STEPS))


def _prefix(path, n_steps):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return [r for r in rows if r[0] == "step" or int(r[0]) < n_steps]


@pytest.mark.slow
def test_criterion_8_determinism(toy_run, tmp_path):
    a, b = _short_run(tmp_path / "a"), _short_run(tmp_path / "b")
    files = ["data/manifest.jsonl", "data/manifest_theta.jsonl", "stage1/stage1_losses.csv",
             "stage2/stage2_losses.csv"]
    same = all((a.root / f).read_bytes() == (b.root / f).read_bytes() for f in files)
    # the long run shares seed and code path: identical manifests and identical stage-1 loss prefix
    manifests = all((a.root / f).read_bytes() == (toy_run.root / f).read_bytes() for f in files[:2])
    prefix = _prefix(a.loss_logs["1"], SHORT_STEPS) == _prefix(toy_run.loss_logs["1"], SHORT_STEPS)
    ok = same and manifests and prefix
    record_criterion(8, ok, f"repeat runs byte-identical {same}; long-run manifests identical {manifests}, "
                            f"stage-1 loss prefix identical {prefix}")
    assert ok
