"""Procedural toy faces with exact masks and landmarks.

Faces are flat-coloured layered ellipses (hair cap, skin oval, eyes, nose,
mouth) drawn without anti-aliasing, so every mask the renderer emits is exact
and the colour statistics of any region are known in closed form.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from phenofactor import kernels
from phenofactor.dataset import (
    FaceRecord,
    Manifest,
    ManifestEntry,
    write_landmarks,
    write_mask,
)
from phenofactor.errors import UnsupportedResolution
from phenofactor.phenotype import DEFAULT_CLASSES, compute_phenotype

RESOLUTIONS = (32, 64, 128, 256)
SCALE_RANGE = (0.5, 1.5)
JITTER_RANGE = (-4.0, 4.0)  # pixels in the 256px reference frame

SKIN_DARK = np.array([75.0, 50.0, 35.0])
SKIN_LIGHT = np.array([245.0, 205.0, 175.0])
HAIR_DARK = np.array([22.0, 16.0, 12.0])
HAIR_LIGHT = np.array([235.0, 200.0, 130.0])
COLOR_JITTER = 8.0

BACKGROUND_RGB = (90, 110, 140)
EYE_RGB = (40, 32, 32)
LIP_RGB = (165, 60, 70)
NOSE_SHADE = 0.82

# Geometry in unit coordinates of the reference frame: (cx, cy, rx, ry).
FACE = (0.5, 0.55, 0.30, 0.38)
HAIR = (0.5, 0.45, 0.38, 0.40)
FRINGE_Y = 0.30
BROW_Y = 0.41
EYE_CENTERS = ((0.38, 0.48), (0.62, 0.48))
EYE_RADII = (0.055, 0.032)
NOSE = (0.5, 0.60, 0.045, 0.06)
MOUTH = (0.5, 0.76, 0.09, 0.03)


@dataclass(frozen=True)
class ToyFaceParams:
    skin_rgb: tuple[int, int, int]
    hair_rgb: tuple[int, int, int]
    eye_width_l: float
    eye_width_r: float
    nose_scale: float
    mouth_scale: float
    pose_jitter: tuple[float, float]
    seed: int

    def __post_init__(self):
        for name in ("eye_width_l", "eye_width_r", "nose_scale", "mouth_scale"):
            v = getattr(self, name)
            if not SCALE_RANGE[0] <= v <= SCALE_RANGE[1]:
                raise ValueError(f"{name}={v} outside {SCALE_RANGE}")
        for name in ("skin_rgb", "hair_rgb"):
            if any(not 0 <= c <= 255 for c in getattr(self, name)):
                raise ValueError(f"{name} outside [0, 255]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ToyFaceParams":
        return cls(
            skin_rgb=tuple(int(c) for c in d["skin_rgb"]),
            hair_rgb=tuple(int(c) for c in d["hair_rgb"]),
            eye_width_l=float(d["eye_width_l"]),
            eye_width_r=float(d["eye_width_r"]),
            nose_scale=float(d["nose_scale"]),
            mouth_scale=float(d["mouth_scale"]),
            pose_jitter=tuple(float(c) for c in d["pose_jitter"]),
            seed=int(d["seed"]),
        )


def _tone_color(dark, light, tone, offset=None):
    rgb = dark + tone * (light - dark)
    if offset is not None:
        rgb = rgb + offset
    return tuple(int(c) for c in np.clip(np.rint(rgb), 0, 255))


def skin_color(tone: float) -> tuple[int, int, int]:
    """Skin colour on the dark (0) to light (1) axis, without jitter."""
    return _tone_color(SKIN_DARK, SKIN_LIGHT, tone)


def hair_color(tone: float) -> tuple[int, int, int]:
    return _tone_color(HAIR_DARK, HAIR_LIGHT, tone)


def sample_toy_params(rng: np.random.Generator) -> ToyFaceParams:
    skin_tone, hair_tone = rng.uniform(0.0, 1.0, size=2)
    skin_off = rng.uniform(-COLOR_JITTER, COLOR_JITTER, size=3)
    hair_off = rng.uniform(-COLOR_JITTER, COLOR_JITTER, size=3)
    scales = rng.uniform(*SCALE_RANGE, size=4)
    jitter = rng.uniform(*JITTER_RANGE, size=2)
    return ToyFaceParams(
        skin_rgb=_tone_color(SKIN_DARK, SKIN_LIGHT, skin_tone, skin_off),
        hair_rgb=_tone_color(HAIR_DARK, HAIR_LIGHT, hair_tone, hair_off),
        eye_width_l=float(scales[0]),
        eye_width_r=float(scales[1]),
        nose_scale=float(scales[2]),
        mouth_scale=float(scales[3]),
        pose_jitter=(float(jitter[0]), float(jitter[1])),
        seed=int(rng.integers(0, 2**31 - 1)),
    )


def _ellipse_points(cx, cy, rx, ry, angles):
    angles = np.asarray(angles, dtype=np.float64)
    return np.stack([cx + rx * np.cos(angles), cy + ry * np.sin(angles)], axis=1)


@dataclass(frozen=True)
class _Geometry:
    face: tuple
    hair: tuple
    eyes: tuple
    nose: tuple
    mouth: tuple
    fringe_y: float
    brow_y: float
    shift: tuple[float, float]


def _geometry(params: ToyFaceParams) -> _Geometry:
    # unit coordinates; the jitter is specified at 256px
    dx, dy = params.pose_jitter[0] / 256.0, params.pose_jitter[1] / 256.0
    (lx, ly), (rx_, ry_) = EYE_CENTERS
    ew, eh = EYE_RADII
    eyes = (
        (lx + dx, ly + dy, ew * params.eye_width_l, eh),
        (rx_ + dx, ry_ + dy, ew * params.eye_width_r, eh),
    )
    n = params.nose_scale
    m = params.mouth_scale
    return _Geometry(
        face=(FACE[0] + dx, FACE[1] + dy, FACE[2], FACE[3]),
        hair=(HAIR[0] + dx, HAIR[1] + dy, HAIR[2], HAIR[3]),
        eyes=eyes,
        nose=(NOSE[0] + dx, NOSE[1] + dy, NOSE[2] * n, NOSE[3] * n),
        mouth=(MOUTH[0] + dx, MOUTH[1] + dy, MOUTH[2] * m, MOUTH[3] * m),
        fringe_y=FRINGE_Y + dy,
        brow_y=BROW_Y + dy,
        shift=(dx, dy),
    )


def toy_landmarks(params: ToyFaceParams, resolution: int) -> np.ndarray:
    """68 landmarks (pixel units) consistent with the rendered geometry."""
    g = _geometry(params)
    fx, fy, frx, fry = g.face
    pts = []
    # jaw 0-16: face oval from image-left through the chin to image-right
    pts.append(_ellipse_points(fx, fy, frx, fry, np.linspace(np.pi, 0.0, 17)))
    # brows 17-26 on a line just above the eyes
    brow_y = g.brow_y
    pts.append(np.stack([np.linspace(0.24, 0.46, 5) + g.shift[0], np.full(5, brow_y)], axis=1))
    pts.append(np.stack([np.linspace(0.54, 0.76, 5) + g.shift[0], np.full(5, brow_y)], axis=1))
    # nose 27-35: bridge along the vertical axis, base along the horizontal axis
    nx, ny, nrx, nry = g.nose
    bridge = np.stack([np.full(4, nx), ny + nry * np.array([-0.75, -0.25, 0.25, 0.75])], axis=1)
    base = np.stack([nx + nrx * np.array([-1.0, -0.5, 0.0, 0.5, 1.0]), np.full(5, ny)], axis=1)
    pts += [bridge, base]
    # eyes 36-47: corner, two upper, corner, two lower
    eye_angles = np.pi + np.arange(6) * np.pi / 3
    for ex, ey, erx, ery in g.eyes:
        pts.append(_ellipse_points(ex, ey, erx, ery, eye_angles))
    # mouth 48-59 outer contour, 60-67 inner contour
    mx, my, mrx, mry = g.mouth
    pts.append(_ellipse_points(mx, my, mrx, mry, np.pi + np.arange(12) * np.pi / 6))
    pts.append(_ellipse_points(mx, my, 0.8 * mrx, 0.3 * mry, np.pi + np.arange(8) * np.pi / 4))
    return np.concatenate(pts, axis=0) * resolution


def class_colors(params: ToyFaceParams) -> dict[int, tuple[int, int, int]]:
    skin = np.asarray(params.skin_rgb, dtype=np.float64)
    return {
        DEFAULT_CLASSES["background"]: BACKGROUND_RGB,
        DEFAULT_CLASSES["skin"]: tuple(params.skin_rgb),
        DEFAULT_CLASSES["hair"]: tuple(params.hair_rgb),
        DEFAULT_CLASSES["eye"]: EYE_RGB,
        DEFAULT_CLASSES["nose"]: tuple(int(c) for c in np.rint(skin * NOSE_SHADE)),
        DEFAULT_CLASSES["mouth"]: LIP_RGB,
    }


def render_toy_face(params: ToyFaceParams, resolution: int = 64) -> FaceRecord:
    if resolution not in RESOLUTIONS:
        raise UnsupportedResolution(f"resolution must be one of {RESOLUTIONS}, got {resolution}")
    r = resolution
    g = _geometry(params)

    def ellipse(spec):
        cx, cy, rx, ry = spec
        return kernels.fill_ellipse(r, r, cx * r, cy * r, rx * r, ry * r, 0.0)

    rows = (np.arange(r) + 0.5)[:, None] * np.ones((1, r))
    c = DEFAULT_CLASSES
    labels = np.full((r, r), c["background"], dtype=np.uint8)
    hair = ellipse(g.hair)
    face = ellipse(g.face)
    labels[hair] = c["hair"]
    labels[face] = c["skin"]
    fringe = hair & face & (rows < g.fringe_y * r)
    labels[fringe] = c["hair"]
    left_eye, right_eye = (ellipse(e) for e in g.eyes)
    nose = ellipse(g.nose)
    mouth = ellipse(g.mouth)
    labels[left_eye | right_eye] = c["eye"]
    labels[nose] = c["nose"]
    labels[mouth] = c["mouth"]

    palette = np.zeros((256, 3), dtype=np.uint8)
    for label, rgb in class_colors(params).items():
        palette[label] = rgb
    image = palette[labels]

    skin_class = labels == c["skin"]
    truth = {
        "skin_class": skin_class,
        "skin": skin_class & (rows >= g.brow_y * r),
        "hair": labels == c["hair"],
        "left_eye": left_eye,
        "right_eye": right_eye,
        "nose": nose,
        "mouth": mouth,
    }
    return FaceRecord(
        image=image,
        landmarks=toy_landmarks(params, r),
        segmentation=labels.astype(np.int64),
        classes=dict(DEFAULT_CLASSES),
        attributes=toy_attributes(params),
        ground_truth=truth,
    )


def toy_attributes(params: ToyFaceParams) -> dict[str, float]:
    """Scalar labels for a toy face; the binary shape labels mirror the attribute names used for real data."""
    skin = np.asarray(params.skin_rgb, dtype=np.float64)
    hair = np.asarray(params.hair_rgb, dtype=np.float64)
    skin_tone = float(np.mean((skin - SKIN_DARK) / (SKIN_LIGHT - SKIN_DARK)))
    hair_tone = float(np.mean((hair - HAIR_DARK) / (HAIR_LIGHT - HAIR_DARK)))
    return {
        "skin_tone": skin_tone,
        "hair_tone": hair_tone,
        "eye_width_l": params.eye_width_l,
        "eye_width_r": params.eye_width_r,
        "nose_scale": params.nose_scale,
        "mouth_scale": params.mouth_scale,
        "narrow_eye_l": float(params.eye_width_l < 1.0),
        "narrow_eye_r": float(params.eye_width_r < 1.0),
        "big_nose": float(params.nose_scale > 1.0),
        "big_lips": float(params.mouth_scale > 1.0),
    }


def toy_ground_truth_theta(params: ToyFaceParams, embedders, resolution: int = 64):
    return compute_phenotype(render_toy_face(params, resolution), embedders)


def write_toy_corpus(
    out_dir,
    n: int,
    resolution: int,
    rng: np.random.Generator,
    *,
    val_every: int = 10,
) -> Manifest:
    """Render ``n`` toy faces to disk and write ``manifest.jsonl`` next to them."""
    out_dir = Path(out_dir)
    for sub in ("images", "landmarks", "masks"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    entries = []
    params_out = []
    for i in range(n):
        params = sample_toy_params(rng)
        rec = render_toy_face(params, resolution)
        stem = f"face_{i:05d}"
        Image.fromarray(rec.image).save(out_dir / "images" / f"{stem}.png")
        write_landmarks(out_dir / "landmarks" / f"{stem}.json", rec.landmarks)
        write_mask(out_dir / "masks" / f"{stem}.png", rec.segmentation, rec.classes)
        entries.append(ManifestEntry(
            path=f"images/{stem}.png",
            landmarks_path=f"landmarks/{stem}.json",
            mask_path=f"masks/{stem}.png",
            split="val" if val_every and (i + 1) % val_every == 0 else "train",
            attributes=rec.attributes,
        ))
        params_out.append(params.to_dict())
    manifest = Manifest(entries, resolution, False, "toy", out_dir)
    manifest.write(out_dir / "manifest.jsonl")
    with open(out_dir / "params.jsonl", "w") as fh:
        for p in params_out:
            fh.write(json.dumps(p) + "\n")
    return manifest


def read_toy_params(path) -> list[ToyFaceParams]:
    with open(path) as fh:
        return [ToyFaceParams.from_dict(json.loads(line)) for line in fh if line.strip()]
