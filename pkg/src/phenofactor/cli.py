"""Command-line entry point: ``phenofactor <subcommand> ...``.

Logs go to standard error; JSON/CSV outputs are written only to the paths
given on the command line. Exit status is 0 on success, 2 on usage errors and
1 on runtime errors.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("phenofactor")


class UsageError(Exception):
    pass


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML config layered over the built-in defaults")
    p.add_argument("--seed", type=int, help="root seed (overrides the config)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="config override, e.g. stage1.steps=500 (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="phenofactor", description="Factorised-latent face phenotype editing.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a toy face corpus")
    _common(p)
    p.add_argument("--n", type=int)
    p.add_argument("--res", type=int)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--val-every", type=int)

    p = sub.add_parser("prepare", help="align images to the canonical frame and write a manifest")
    _common(p)
    p.add_argument("--images", type=Path, required=True)
    p.add_argument("--landmarks", type=Path, required=True)
    p.add_argument("--masks", type=Path)
    p.add_argument("--attributes", type=Path, help="JSON mapping image stem -> attribute dict")
    p.add_argument("--res", type=int, default=64)
    p.add_argument("--val-every", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("train-embedders", help="train region embedders and the perceptual feature net")
    _common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--feature-epochs", type=int)

    p = sub.add_parser("metrics", help="compute phenotype vectors for a manifest")
    _common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--embedders", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="output manifest path")

    p = sub.add_parser("train", help="run one training stage")
    _common(p)
    p.add_argument("--stage", choices=["1", "2"], required=True)
    p.add_argument("--manifest", type=Path, required=True, help="manifest with phenotype vectors")
    p.add_argument("--unsupervised", type=Path, help="manifest of unlabelled images (default: --manifest)")
    p.add_argument("--feature-net", type=Path, required=True)
    p.add_argument("--stage1-ckpt", type=Path, help="stage-1 checkpoint (stage 2 only)")
    p.add_argument("--resume", type=Path, help="periodic checkpoint to continue from")
    p.add_argument("--steps", type=int)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("finetune", help="per-image generator fine-tuning")
    _common(p)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--feature-net", type=Path, required=True)
    p.add_argument("--face-embedder", type=Path, help="embedder checkpoint used for the face-identity term")
    p.add_argument("--steps", type=int)
    p.add_argument("--out", type=Path, required=True, help="output .pt holding the tuned generator and latent")

    p = sub.add_parser("edit", help="edit one attribute of an image and write a comparison grid")
    _common(p)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--attr", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--theta", help="comma-separated θ block for the attribute")
    g.add_argument("--target", type=float, help="predictor target in [0, 1]")
    p.add_argument("--finetune-steps", type=int, default=0)
    p.add_argument("--feature-net", type=Path, help="needed when --finetune-steps > 0")
    p.add_argument("--mask", type=Path, help="segmentation of the input (colour targets)")
    p.add_argument("--landmarks", type=Path, help="landmarks of the input (skin and shape targets)")
    p.add_argument("--embedders", type=Path, help="embedder directory (shape targets)")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("eval", help="photorealism or controllability evaluation")
    _common(p)
    p.add_argument("kind", choices=["fid", "control"])
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--feature-net", type=Path, help="FID feature network (fid)")
    p.add_argument("--embedders", type=Path, help="embedder directory; adds shape predictors (control)")
    p.add_argument("--attr", action="append", help="target attribute(s) (control; default skin and hair)")
    p.add_argument("--split", default="val")
    p.add_argument("--n", type=int)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("scheme", help="show the latent factorisation")
    _common(p)
    p.add_argument("--ckpt", type=Path)
    p.add_argument("--out", type=Path, help="write the scheme as JSON")

    p = sub.add_parser("inspect", help="summarise a checkpoint or manifest")
    _common(p)
    p.add_argument("path", type=Path)
    p.add_argument("--out", type=Path, help="write the summary as JSON")
    return parser


# -- subcommands ---------------------------------------------------------------

def cmd_synth(args, cfg):
    from phenofactor.synthetic import write_toy_corpus
    from phenofactor.training import child_rng

    s = cfg["synth"]
    n = args.n if args.n is not None else s["n"]
    res = args.res if args.res is not None else s["res"]
    val_every = args.val_every if args.val_every is not None else s["val_every"]
    m = write_toy_corpus(args.out, n, res, child_rng(cfg["seed"], "synth"), val_every=val_every)
    log.info("wrote %d toy faces at %dpx to %s", len(m), res, args.out)


def cmd_prepare(args, cfg):
    from phenofactor.pipeline import prepare_dataset

    attrs = json.loads(args.attributes.read_text()) if args.attributes else None
    m = prepare_dataset(args.images, args.landmarks, args.out, args.res, args.masks, attrs, args.val_every)
    log.info("aligned %d images (%d skipped) into %s", len(m), len(m.skipped), args.out)


def cmd_train_embedders(args, cfg):
    from phenofactor.dataset import Manifest
    from phenofactor.embedders import EmbedderConfig
    from phenofactor.pipeline import train_manifest_feature_net, train_region_embedders

    e = cfg["embedders"]
    manifest = Manifest.read(args.manifest).split("train")
    config = EmbedderConfig(epochs=args.epochs or e["epochs"], batch_size=e["batch_size"], lr=e["lr"],
                            seed=cfg["seed"])
    train_region_embedders(manifest, config, args.out)
    net = train_manifest_feature_net(manifest, epochs=args.feature_epochs or e["feature_epochs"], seed=cfg["seed"])
    net.save(args.out / "feature_net.pt")
    log.info("embedders and feature net written to %s", args.out)


def cmd_metrics(args, cfg):
    from phenofactor.dataset import Manifest
    from phenofactor.pipeline import compute_manifest_thetas, load_embedders

    manifest = Manifest.read(args.manifest)
    # record paths are relative to the manifest's directory
    if args.out.parent.resolve() != manifest.root.resolve():
        raise UsageError("--out must sit next to the input manifest so relative paths stay valid")
    out = compute_manifest_thetas(manifest, load_embedders(args.embedders))
    out.write(args.out)
    log.info("phenotype vectors for %d records written to %s", len(out), args.out)


def cmd_train(args, cfg):
    from phenofactor.config import stage_train_config
    from phenofactor.dataset import Manifest
    from phenofactor.features import FeatureNet
    from phenofactor.training import resume_trainer, train_stage1, train_stage2

    config = stage_train_config(cfg, args.stage)
    if args.steps is not None:
        config.steps = args.steps
    manifest_c = Manifest.read(args.manifest).split("train")
    manifest_f = Manifest.read(args.unsupervised).split("train") if args.unsupervised else manifest_c
    feature_net = FeatureNet.load(args.feature_net)
    if args.resume is not None:
        trainer = resume_trainer(args.resume, config, manifest_c, manifest_f, feature_net, args.out)
        ckpt = trainer.run()
    elif args.stage == "1":
        ckpt = train_stage1(config, manifest_c, manifest_f, feature_net, args.out)
    else:
        if args.stage1_ckpt is None:
            raise UsageError("stage 2 needs --stage1-ckpt")
        ckpt = train_stage2(config, args.stage1_ckpt, manifest_c, manifest_f, feature_net, args.out)
    log.info("stage %s checkpoint: %s", args.stage, ckpt)


def _load_image(path, resolution):
    from PIL import Image

    img = np.asarray(Image.open(path).convert("RGB"))
    if img.shape[:2] != (resolution, resolution):
        raise UsageError(f"{path} is {img.shape[1]}x{img.shape[0]}; the networks expect {resolution}x{resolution}")
    return img


def _load_stage2(path):
    from phenofactor.errors import StageMismatch
    from phenofactor.networks import NetworkBundle

    nets = NetworkBundle.load(path).eval()
    if nets.stage != "2":
        raise StageMismatch(f"{path} holds stage-{nets.stage} networks; editing needs a stage-2 checkpoint")
    return nets


def _face_net(path):
    if path is None:
        return None
    from phenofactor.embedders import AttributeEmbedder
    from phenofactor.features import EmbedderFeatures

    return EmbedderFeatures(AttributeEmbedder.load(path))


def cmd_finetune(args, cfg):
    import torch

    from phenofactor.control import one_shot_finetune
    from phenofactor.features import FeatureNet
    from phenofactor.networks import tensor_to_images
    from PIL import Image

    nets = _load_stage2(args.ckpt)
    image = _load_image(args.input, nets.config.resolution)
    f = cfg["finetune"]
    steps = args.steps if args.steps is not None else f["steps"]
    res = one_shot_finetune(nets, image, steps, FeatureNet.load(args.feature_net), _face_net(args.face_embedder),
                            lr_g=f["lr_g"], lr_z=f["lr_z"])
    args.out.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"generator": res.generator.state_dict(), "z": res.z,
                "perceptual_history": res.perceptual_history}, args.out)
    with torch.no_grad():
        y = res.generator(nets.E_map(res.z), noise_mode="const")
    Image.fromarray(tensor_to_images(y)[0]).save(args.out.with_suffix(".png"))
    log.info("perceptual error %.5f -> %.5f after %d steps", res.perceptual_history[0],
             res.perceptual_history[-1], steps)


def _edit_predictor(args, nets, image):
    from phenofactor.dataset import read_landmarks, read_mask
    from phenofactor.evaluation import PatchPredictor, RegionValuePredictor
    from phenofactor.phenotype import COLOR_REGIONS, hair_region, skin_region

    if args.attr in COLOR_REGIONS:
        if args.mask is None:
            raise UsageError(f"--target on {args.attr} needs --mask")
        labels, classes = read_mask(args.mask)
        if args.attr == "hair":
            mask = hair_region(labels, classes).bits
        else:
            if args.landmarks is None:
                raise UsageError("--target on skin needs --landmarks")
            mask = skin_region(labels, read_landmarks(args.landmarks), classes).bits
        pred = RegionValuePredictor(mask)
        return lambda x: pred(x, None)
    if args.embedders is None or args.landmarks is None:
        raise UsageError(f"--target on {args.attr} needs --embedders and --landmarks")
    from phenofactor.embedders import AttributeEmbedder

    emb = AttributeEmbedder.load(args.embedders / f"{args.attr}.pt")
    pred = PatchPredictor(emb, read_landmarks(args.landmarks), args.attr, nets.config.resolution)
    return lambda x: pred(x, None)


def cmd_edit(args, cfg):
    from PIL import Image

    from phenofactor.control import encode, fine_grained_modify, one_shot_finetune, render, set_attribute_from_theta
    from phenofactor.features import FeatureNet
    from phenofactor.networks import tensor_to_images

    nets = _load_stage2(args.ckpt)
    nets.scheme[args.attr]  # raises UnknownAttribute early
    image = _load_image(args.input, nets.config.resolution)
    G = nets.G
    z = encode(nets, image)
    if args.finetune_steps > 0:
        if args.feature_net is None:
            raise UsageError("--finetune-steps needs --feature-net")
        G, z = one_shot_finetune(nets, image, args.finetune_steps, FeatureNet.load(args.feature_net),
                                 lr_g=cfg["finetune"]["lr_g"], lr_z=cfg["finetune"]["lr_z"])
    recon = render(nets, z, G)
    if args.theta is not None:
        block = np.array([float(v) for v in args.theta.split(",")])
        z_edit = set_attribute_from_theta(nets, z, args.attr, block)
    else:
        e = cfg["edit"]
        result = fine_grained_modify(nets, z, args.attr, args.target, _edit_predictor(args, nets, image),
                                     max_iters=e["max_iters"], tol=e["tol"], mu=e["mu"], G=G)
        log.info("fine-grained edit: %s after %d iterations, prediction %.4f", result.status,
                 result.iterations, result.prediction)
        z_edit = result.z
    edited = render(nets, z_edit, G)
    panels = [image, tensor_to_images(recon)[0], tensor_to_images(edited)[0]]
    args.out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.concatenate(panels, axis=1)).save(args.out)
    log.info("original | reconstruction | edited grid written to %s", args.out)


def cmd_eval(args, cfg):
    import torch

    from phenofactor.dataset import Manifest
    from phenofactor.networks import NetworkBundle

    nets = NetworkBundle.load(args.ckpt).eval()
    manifest = Manifest.read(args.manifest)
    if args.split != "all":
        manifest = manifest.split(args.split)
    n = min(args.n or cfg["eval"]["n"], len(manifest))
    args.out.mkdir(parents=True, exist_ok=True)
    if args.kind == "fid":
        from phenofactor.evaluation import image_fid
        from phenofactor.features import FeatureNet
        from phenofactor.networks import images_to_tensor, tensor_to_images
        from phenofactor.training import child_torch_generator

        if args.feature_net is None:
            raise UsageError("eval fid needs --feature-net")
        feature_net = FeatureNet.load(args.feature_net)
        real = manifest.load_images()[:n]
        with torch.no_grad():
            z_prior = torch.randn(n, nets.config.latent_dim, generator=child_torch_generator(cfg["seed"], "eval/fid"))
            samples = tensor_to_images(nets.G(nets.E_map(z_prior), noise_mode="const"))
            report = {"n": n, "prior_samples": image_fid(real, samples, feature_net)}
            if manifest.supervised:
                theta = torch.as_tensor(manifest.thetas()[:n], dtype=torch.float32)
                report["supervised"] = image_fid(real, tensor_to_images(nets.G(nets.E_map(nets.E_C(theta)))),
                                                 feature_net)
            if nets.stage == "2":
                recon = nets.G(nets.E_map(nets.E_F(images_to_tensor(real))), noise_mode="const")
                report["reconstruction"] = image_fid(real, tensor_to_images(recon), feature_net)
        with open(args.out / "fid.json", "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
        log.info("FID report: %s", report)
        return

    from phenofactor.evaluation import PatchPredictor, controllability_protocol, write_chart_csv
    from phenofactor.phenotype import SHAPE_REGIONS
    from phenofactor.toy import color_predictors, color_theta_sweep

    sub = Manifest(manifest.entries[:n], manifest.resolution, manifest.supervised, manifest.source_name,
                   manifest.root)
    images = sub.load_images()
    predictors = dict(color_predictors(sub))
    shape_theta = {}
    if args.embedders is not None:
        from phenofactor.pipeline import load_embedders, region_labels

        embedders = load_embedders(args.embedders)
        lms = np.stack([sub.load_record(i).landmarks for i in range(len(sub))])
        for region in SHAPE_REGIONS:
            predictors[region] = PatchPredictor(embedders[region], lms, region, sub.resolution)
        if manifest.supervised:
            sl = {e.name: nets.scheme.slice(e.name) for e in nets.scheme.entries}
            thetas = manifest.thetas()
            for region in SHAPE_REGIONS:
                labels = region_labels(manifest, region)
                shape_theta[region] = (thetas[labels > 0.5][:, sl[region]].mean(0),
                                       thetas[labels < 0.5][:, sl[region]].mean(0))
    targets = args.attr or ["skin", "hair"]
    reports = []
    for attr in targets:
        if attr in ("skin", "hair"):
            sweep = color_theta_sweep(attr, resolution=manifest.resolution)
            v_plus, v_minus = sweep[-1], sweep[0]
        elif attr in shape_theta:
            v_plus, v_minus = shape_theta[attr]
        else:
            raise UsageError(f"no reference θ values for {attr!r} (shape attributes need --embedders "
                             "and a manifest with phenotype vectors)")
        reports.append(controllability_protocol(nets, images, attr, v_plus, v_minus, predictors, n=n))
    with open(args.out / "control.json", "w") as fh:
        json.dump([r.to_dict() for r in reports], fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_chart_csv(reports, args.out / "control_chart.csv")
    for r in reports:
        log.info("%s: C_pred(I+)=%.3f C_pred(I-)=%.3f MD=%s", r.attribute, r.c_pred_plus, r.c_pred_minus, r.md)


def cmd_scheme(args, cfg):
    from phenofactor.latent import default_scheme
    from phenofactor.networks import NetworkBundle

    scheme = NetworkBundle.load(args.ckpt).scheme if args.ckpt else default_scheme()
    for e in scheme.entries:
        print(f"{e.name:<10} [{e.offset:>3}, {e.stop:>3})  length {e.length}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"total_dim": scheme.total_dim, "entries": scheme.to_list()}, fh, indent=2)
            fh.write("\n")


def cmd_inspect(args, cfg):
    from phenofactor.dataset import Manifest
    from phenofactor.networks import NetworkBundle, file_hash, state_hash

    if args.path.suffix == ".jsonl":
        m = Manifest.read(args.path)
        splits = {}
        for e in m.entries:
            splits[e.split] = splits.get(e.split, 0) + 1
        summary = {"kind": "manifest", "records": len(m), "resolution": m.resolution,
                   "supervised": m.supervised, "source_name": m.source_name, "splits": splits}
    else:
        nets = NetworkBundle.load(args.path)
        summary = {
            "kind": "checkpoint",
            "stage": nets.stage,
            "config": nets.config.__dict__,
            "scheme": nets.scheme.to_list(),
            "parameters": nets.parameter_counts(),
            "module_hashes": {k: state_hash(m) for k, m in nets.modules().items()},
            "file_sha256": file_hash(args.path),
        }
    for k, v in summary.items():
        if k not in ("module_hashes", "scheme"):
            print(f"{k}: {v}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")


COMMANDS = {
    "synth": cmd_synth,
    "prepare": cmd_prepare,
    "train-embedders": cmd_train_embedders,
    "metrics": cmd_metrics,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "edit": cmd_edit,
    "eval": cmd_eval,
    "scheme": cmd_scheme,
    "inspect": cmd_inspect,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    from phenofactor.config import load_config
    from phenofactor.errors import PhenofactorError
    from phenofactor.training import configure_determinism

    try:
        cfg = load_config(args.config, args.overrides, args.seed)
        configure_determinism(int(cfg.get("threads", 1)))
        COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"phenofactor {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (PhenofactorError, OSError, ValueError, KeyError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
