"""Synthetic fundus-like two-domain image generator.

Each sample is a textured background with a bright elliptical optic disc that
contains a brighter cup. Geometry is drawn from a seed-only stream, so every
domain renders the same anatomy for the same seed; domains differ only in
their style parameters.
"""

import csv
import math
import os
from dataclasses import dataclass, field, fields, asdict

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from .errors import ConfigError

BACKGROUND_RGB = (0.55, 0.24, 0.14)
DISC_RGB = (0.84, 0.60, 0.36)
CUP_RGB = (0.95, 0.84, 0.64)

MANIFEST_NAME = "manifest.csv"
MANIFEST_FIELDS = ["filename", "domain", "seed", "mask_filename"]


@dataclass(frozen=True)
class DomainSpec:
    name: str
    hue_shift: float = 0.0
    contrast: float = 1.0
    brightness: float = 0.0
    texture_amp: float = 0.0
    vignette: float = 0.0
    blur_sigma: float = 0.0

    def __post_init__(self):
        checks = [
            (-0.5 <= self.hue_shift <= 0.5, "hue_shift must lie in [-0.5, 0.5]"),
            (self.contrast > 0, "contrast must be > 0"),
            (-0.3 <= self.brightness <= 0.3, "brightness must lie in [-0.3, 0.3]"),
            (self.texture_amp >= 0, "texture_amp must be >= 0"),
            (0 <= self.vignette <= 1, "vignette must lie in [0, 1]"),
            (self.blur_sigma >= 0, "blur_sigma must be >= 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(f"DomainSpec {self.name!r}: {msg}")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown DomainSpec keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


DEFAULT_DOMAINS = {
    "source": DomainSpec("source", hue_shift=0.0, contrast=1.0, brightness=0.0,
                         texture_amp=0.06, vignette=0.15, blur_sigma=0.4),
    "targetA": DomainSpec("targetA", hue_shift=0.10, contrast=0.55, brightness=-0.15,
                          texture_amp=0.20, vignette=0.6, blur_sigma=1.0),
    "targetB": DomainSpec("targetB", hue_shift=-0.08, contrast=1.3, brightness=0.08,
                          texture_amp=0.02, vignette=0.0, blur_sigma=0.0),
}


@dataclass
class FundusSample:
    image: torch.Tensor  # (3, H, W) in [0, 1]
    mask: torch.Tensor  # (2, H, W) {0, 1}; channel 0 cup, channel 1 disc
    domain: str
    seed: int
    provenance: dict = field(default_factory=dict)


def check_size(size):
    if size < 32 or size % 32 != 0:
        raise ConfigError(f"image size must be >= 32 and divisible by 32, got {size}")


def _geometry(size, seed):
    rng = np.random.default_rng([seed, 0])
    cy, cx = size / 2 + rng.uniform(-0.12, 0.12, size=2) * size
    r_disc = rng.uniform(0.17, 0.25) * size
    aspect = rng.uniform(0.85, 1.15)
    theta = rng.uniform(0, math.pi)
    cup_ratio = rng.uniform(0.35, 0.7)
    cup_off = rng.uniform(-0.12, 0.12, size=2) * r_disc
    return dict(cy=cy, cx=cx, a=r_disc * aspect, b=r_disc / aspect, theta=theta,
                cup_ratio=cup_ratio, cup_dy=cup_off[0], cup_dx=cup_off[1])


def _ellipse(size, cy, cx, a, b, theta):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(theta), math.sin(theta)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _masks(size, g):
    disc = _ellipse(size, g["cy"], g["cx"], g["a"], g["b"], g["theta"])
    cup = _ellipse(size, g["cy"] + g["cup_dy"], g["cx"] + g["cup_dx"],
                   g["a"] * g["cup_ratio"], g["b"] * g["cup_ratio"], g["theta"])
    return cup & disc, disc


def value_noise(size, rng, octaves=(4, 8)):
    """Two-octave bilinear value noise in roughly [0, 1]."""
    out = np.zeros((size, size))
    weight_total = 0.0
    for i, cells in enumerate(octaves):
        grid = rng.uniform(0, 1, size=(cells + 1, cells + 1))
        coords = (np.arange(size) + 0.5) / size * cells
        yy, xx = np.meshgrid(coords, coords, indexing="ij")
        w = 0.5 ** i
        out += w * ndimage.map_coordinates(grid, [yy, xx], order=1, mode="nearest")
        weight_total += w
    return out / weight_total


def _rotate_hue(img, turns):
    # rotation of the chroma plane in YIQ space
    to_yiq = np.array([[0.299, 0.587, 0.114],
                       [0.596, -0.274, -0.322],
                       [0.211, -0.523, 0.312]])
    ang = 2 * math.pi * turns
    rot = np.array([[1, 0, 0],
                    [0, math.cos(ang), -math.sin(ang)],
                    [0, math.sin(ang), math.cos(ang)]])
    m = np.linalg.inv(to_yiq) @ rot @ to_yiq
    return np.einsum("ij,jhw->ihw", m, img)


def render_sample(spec: DomainSpec, size: int, seed: int) -> FundusSample:
    check_size(size)
    geo = _geometry(size, seed)
    cup, disc = _masks(size, geo)

    img = np.empty((3, size, size))
    for ch in range(3):
        img[ch] = np.where(cup, CUP_RGB[ch], np.where(disc, DISC_RGB[ch], BACKGROUND_RGB[ch]))

    # style stream is seeded identically across domains; only amplitudes differ
    rng = np.random.default_rng([seed, 1])
    noise = value_noise(size, rng)
    if spec.texture_amp > 0:
        img = img + spec.texture_amp * (noise - 0.5)[None]
    if spec.vignette > 0:
        yy, xx = np.mgrid[0:size, 0:size] + 0.5
        r2 = ((yy - size / 2) ** 2 + (xx - size / 2) ** 2) / (size / 2) ** 2 / 2
        img = img * (1 - spec.vignette * r2)[None]
    if spec.hue_shift != 0:
        img = _rotate_hue(img, spec.hue_shift)
    if spec.contrast != 1:
        img = (img - 0.5) * spec.contrast + 0.5
    if spec.brightness != 0:
        img = img + spec.brightness
    if spec.blur_sigma > 0:
        img = np.stack([ndimage.gaussian_filter(c, spec.blur_sigma, mode="nearest") for c in img])
    img = np.clip(img, 0.0, 1.0)

    mask = np.stack([cup, disc]).astype(np.float32)
    return FundusSample(
        image=torch.from_numpy(img.astype(np.float32)),
        mask=torch.from_numpy(mask),
        domain=spec.name,
        seed=seed,
    )


def make_dataset(spec: DomainSpec, n: int, size: int, seed: int) -> list:
    if n < 1:
        raise ConfigError("dataset size must be >= 1")
    return [render_sample(spec, size, seed + i) for i in range(n)]


def few_shot_subset(dataset, k: int, seed: int) -> list:
    """Draw ``k`` images without replacement and drop their masks."""
    if not 1 <= k <= len(dataset):
        raise ValueError(f"k must lie in [1, {len(dataset)}], got {k}")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(dataset), size=k, replace=False)
    return [dataset[i].image.clone() for i in idx]


def stack_images(samples):
    return torch.stack([s.image if isinstance(s, FundusSample) else s for s in samples])


def stack_masks(samples):
    return torch.stack([s.mask for s in samples])


# ---------------------------------------------------------------- persistence

def _to_png(img):
    arr = (img.clamp(0, 1).permute(1, 2, 0).numpy() * 255.0).round().astype(np.uint8)
    return Image.fromarray(arr, mode="RGB")


def _mask_to_png(mask):
    # 0 background, 1 disc rim, 2 cup
    label = mask[1].numpy().astype(np.uint8) + mask[0].numpy().astype(np.uint8)
    return Image.fromarray(label, mode="L")


def save_dataset(samples, directory, images_only=False):
    """Write PNG files plus a CSV manifest; provenance keys become extra columns."""
    os.makedirs(directory, exist_ok=True)
    extra = sorted({k for s in samples if isinstance(s, FundusSample) for k in s.provenance})
    rows = []
    for i, s in enumerate(samples):
        if not isinstance(s, FundusSample):
            s = FundusSample(image=s, mask=None, domain="unknown", seed=-1)
        fname = f"img_{i:05d}.png"
        _to_png(s.image).save(os.path.join(directory, fname))
        mname = ""
        if s.mask is not None and not images_only:
            mname = f"mask_{i:05d}.png"
            _mask_to_png(s.mask).save(os.path.join(directory, mname))
        row = {"filename": fname, "domain": s.domain, "seed": s.seed, "mask_filename": mname}
        row.update({k: s.provenance.get(k, "") for k in extra})
        rows.append(row)
    with open(os.path.join(directory, MANIFEST_NAME), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS + extra)
        writer.writeheader()
        writer.writerows(rows)


def load_dataset(directory):
    """Load any directory that follows the manifest schema.

    This is also the ingestion hook for real images: drop RGB files and
    label PNGs (0 background, 1 disc, 2 cup) next to a manifest and they load
    the same way. Images are not resized; callers must keep sizes
    consistent.
    """
    path = os.path.join(directory, MANIFEST_NAME)
    if not os.path.exists(path):
        raise FileNotFoundError(f"no manifest in {directory}")
    samples = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            missing = set(MANIFEST_FIELDS) - set(row)
            if missing:
                raise ValueError(f"manifest missing columns {sorted(missing)}")
            arr = np.asarray(Image.open(os.path.join(directory, row["filename"])).convert("RGB"))
            image = torch.from_numpy(arr.astype(np.float32) / 255.0).permute(2, 0, 1).contiguous()
            mask = None
            if row["mask_filename"]:
                label = np.asarray(Image.open(os.path.join(directory, row["mask_filename"])))
                mask = torch.from_numpy(np.stack([label >= 2, label >= 1]).astype(np.float32))
            prov = {k: v for k, v in row.items() if k not in MANIFEST_FIELDS}
            samples.append(FundusSample(image=image, mask=mask, domain=row["domain"],
                                        seed=int(row["seed"]), provenance=prov))
    return samples
