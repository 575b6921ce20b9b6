"""Image/mask ingestion, flip augmentation, and a synthetic crack generator.

Dataset directory layout:

    <root>/images/<stem>.png (or .jpg)
    <root>/masks/<stem>.png
    <root>/manifest.tsv        lines of `stem<TAB>split`
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .tensor import ShapeError, Tensor


class DataError(IOError):
    """A sample could not be loaded or decoded."""


@dataclass
class SamplePair:
    image: Tensor  # (1, 3, H, W), values in [0, 1]
    mask: Tensor   # (1, 1, H, W), values in {0, 1}
    source: str = ""

    def validate(self):
        if self.image.shape[2:] != self.mask.shape[2:]:
            raise ShapeError(f"image {self.image.shape} vs mask {self.mask.shape}")
        vals = np.unique(self.mask.data)
        if not np.all(np.isin(vals, (0, 1))):
            raise ValueError("mask must be strictly binary")


@dataclass
class ManifestEntry:
    stem: str
    image_path: str
    mask_path: str
    split: str = "train"


@dataclass
class DatasetManifest:
    entries: list = field(default_factory=list)
    target: tuple | None = None  # (W, H)

    def split(self, name):
        return [e for e in self.entries if e.split == name]


# ---------------------------------------------------------------------------
# Loading


MASK_THRESHOLD = 128  # of 255


def load_sample(image_path, mask_path, target=None) -> SamplePair:
    """Load an image/mask pair, optionally resizing to target (W, H).

    The image is resized bilinearly and scaled to [0,1]; the mask is resized
    with nearest-neighbour and thresholded at 128/255 to {0,1}.
    """
    try:
        img = Image.open(image_path).convert("RGB")
        msk = Image.open(mask_path).convert("L")
    except (OSError, ValueError) as e:
        raise DataError(f"cannot decode {image_path!r} / {mask_path!r}: {e}") from e
    if img.width == 0 or img.height == 0:
        raise DataError(f"zero-size image {image_path!r}")
    if target is not None:
        w, h = target
        img = img.resize((w, h), Image.BILINEAR)
        msk = msk.resize((w, h), Image.NEAREST)
    image = np.asarray(img, dtype=np.float32) / 255.0          # (H, W, 3)
    mask = (np.asarray(msk) >= MASK_THRESHOLD).astype(np.float32)
    stem = os.path.splitext(os.path.basename(image_path))[0]
    return SamplePair(
        image=Tensor(image.transpose(2, 0, 1)[None]),
        mask=Tensor(mask[None, None]),
        source=stem)


def augment_flips(sample: SamplePair):
    """Identity, horizontal flip, vertical flip, both — image and mask alike."""
    out = []
    for tag, axes in (("", ()), ("_hflip", (3,)), ("_vflip", (2,)),
                      ("_hvflip", (2, 3))):
        img = sample.image.data
        msk = sample.mask.data
        if axes:
            img = np.flip(img, axis=axes).copy()
            msk = np.flip(msk, axis=axes).copy()
        out.append(SamplePair(Tensor(img.copy()), Tensor(msk.copy()),
                              source=sample.source + tag))
    return out


def pad_to_multiple(arr, multiple=16):
    """Edge-replicate pad an (N,C,H,W) array so H and W divide `multiple`.
    Returns the padded array and the original (H, W) for cropping back."""
    h, w = arr.shape[2], arr.shape[3]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph or pw:
        arr = np.pad(arr, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge")
    return arr, (h, w)


def crop_to(arr, hw):
    h, w = hw
    return arr[:, :, :h, :w]


# ---------------------------------------------------------------------------
# Synthetic crack imagery


@dataclass
class SynthParams:
    crack_count: tuple = (1, 2)      # inclusive range
    thickness: tuple = (1, 3)        # crack thickness in px
    blob_count: tuple = (0, 3)       # distractor blobs
    background: tuple = (0.50, 0.75)
    noise_scale: float = 0.05
    crack_level: tuple = (0.05, 0.25)  # crack intensity (darker than background)


def _smooth(img, passes=2):
    for _ in range(passes):
        p = np.pad(img, 1, mode="edge")
        img = (p[:-2, :-2] + p[:-2, 1:-1] + p[:-2, 2:]
               + p[1:-1, :-2] + p[1:-1, 1:-1] + p[1:-1, 2:]
               + p[2:, :-2] + p[2:, 1:-1] + p[2:, 2:]) / 9.0
    return img


def _dilate(mask, radius):
    if radius <= 0:
        return mask
    h, w = mask.shape
    out = mask.copy()
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if dy * dy + dx * dx > radius * radius or (dy == 0 and dx == 0):
                continue
            src = mask[max(0, -dy):h - max(0, dy), max(0, -dx):w - max(0, dx)]
            out[max(0, dy):h - max(0, -dy), max(0, dx):w - max(0, -dx)] |= src
    return out


def _draw_polyline(rng, h, w):
    """Rasterize a random-walk polyline spanning the image; boolean mask."""
    mask = np.zeros((h, w), dtype=bool)
    if rng.random() < 0.5:  # left-to-right
        y, x = rng.uniform(0.15 * h, 0.85 * h), 0.0
        heading = rng.uniform(-0.5, 0.5)
    else:  # top-to-bottom
        y, x = 0.0, rng.uniform(0.15 * w, 0.85 * w)
        heading = rng.uniform(-0.5, 0.5) + np.pi / 2
    total = 1.3 * max(h, w)
    walked = 0.0
    while walked < total:
        seg = rng.uniform(0.08, 0.20) * max(h, w)
        ny = y + seg * np.sin(heading)
        nx = x + seg * np.cos(heading)
        steps = max(2, int(2 * seg))
        ys = np.clip(np.linspace(y, ny, steps).round().astype(int), 0, h - 1)
        xs = np.clip(np.linspace(x, nx, steps).round().astype(int), 0, w - 1)
        mask[ys, xs] = True
        y, x = ny, nx
        walked += seg
        heading += rng.uniform(-0.6, 0.6)
        if y < -2 or y > h + 2 or x < -2 or x > w + 2:
            break
    return mask


def synth_crack(seed, size=(64, 64), params: SynthParams | None = None) -> SamplePair:
    """Deterministic synthetic crack image: smooth noisy background, a few
    distractor blobs, and dark dilated polyline cracks; the mask is exactly
    the rendered crack pixels."""
    params = params or SynthParams()
    w, h = size
    if w % 16 or h % 16:
        raise ShapeError(f"synthetic size must be divisible by 16, got {w}x{h}")
    rng = np.random.default_rng(seed)

    coarse = rng.normal(0.0, params.noise_scale,
                        (h // 8 + 2, w // 8 + 2))
    noise = np.kron(coarse, np.ones((8, 8)))[:h, :w]
    bg = rng.uniform(*params.background) + _smooth(noise)
    bg += rng.normal(0.0, params.noise_scale / 3, (h, w))

    yy, xx = np.mgrid[0:h, 0:w]
    n_blobs = int(rng.integers(params.blob_count[0], params.blob_count[1] + 1))
    for _ in range(n_blobs):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ry, rx = rng.uniform(2, 7), rng.uniform(2, 7)
        delta = rng.uniform(0.06, 0.15) * rng.choice((-1, 1))
        blob = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        bg[blob] += delta

    n_cracks = int(rng.integers(params.crack_count[0], params.crack_count[1] + 1))
    crack = np.zeros((h, w), dtype=bool)
    for _ in range(n_cracks):
        line = _draw_polyline(rng, h, w)
        t = int(rng.integers(params.thickness[0], params.thickness[1] + 1))
        crack |= _dilate(line, t // 2)

    level = rng.uniform(*params.crack_level)
    img = bg.copy()
    img[crack] = level + rng.normal(0.0, 0.02, int(crack.sum()))

    channels = img[None] + rng.normal(0.0, 0.008, (3, h, w))
    channels = np.clip(channels, 0.0, 1.0).astype(np.float32)
    mask = crack.astype(np.float32)[None, None]
    return SamplePair(Tensor(channels[None]), Tensor(mask), source=f"synth{seed:05d}")


# ---------------------------------------------------------------------------
# Dataset directories


def save_pair(pair: SamplePair, root, stem):
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    os.makedirs(os.path.join(root, "masks"), exist_ok=True)
    img = (pair.image.data[0].transpose(1, 2, 0) * 255).round().astype(np.uint8)
    msk = (pair.mask.data[0, 0] * 255).astype(np.uint8)
    Image.fromarray(img).save(os.path.join(root, "images", f"{stem}.png"))
    Image.fromarray(msk).save(os.path.join(root, "masks", f"{stem}.png"))


def write_manifest(root, stems_splits):
    path = os.path.join(root, "manifest.tsv")
    with open(path, "w") as f:
        for stem, split in stems_splits:
            f.write(f"{stem}\t{split}\n")
    return path


def synth_dataset(root, count, size=(64, 64), seed=0, val_count=0,
                  params=None):
    """Write `count` train pairs plus `val_count` validation pairs."""
    stems = []
    for k in range(count + val_count):
        pair = synth_crack(seed * 100003 + k, size=size, params=params)
        stem = f"synth{k:04d}"
        save_pair(pair, root, stem)
        stems.append((stem, "train" if k < count else "val"))
    write_manifest(root, stems)
    return stems


IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")


def read_manifest(root) -> DatasetManifest:
    """Build the manifest from manifest.tsv, or by scanning the layout."""
    images_dir = os.path.join(root, "images")
    masks_dir = os.path.join(root, "masks")
    if not os.path.isdir(images_dir) or not os.path.isdir(masks_dir):
        raise DataError(f"{root!r} lacks the images/ + masks/ layout")
    splits = {}
    mpath = os.path.join(root, "manifest.tsv")
    if os.path.exists(mpath):
        with open(mpath) as f:
            for line in f:
                line = line.strip()
                if line:
                    stem, _, split = line.partition("\t")
                    splits[stem] = split or "train"
    entries = []
    for fname in sorted(os.listdir(images_dir)):
        stem, ext = os.path.splitext(fname)
        if ext.lower() not in IMAGE_EXTENSIONS:
            continue
        mask_path = os.path.join(masks_dir, f"{stem}.png")
        if not os.path.exists(mask_path):
            raise DataError(f"image {fname!r} has no mask {stem}.png")
        entries.append(ManifestEntry(stem, os.path.join(images_dir, fname),
                                     mask_path, splits.get(stem, "train")))
    if not entries:
        raise DataError(f"no images found under {images_dir!r}")
    return DatasetManifest(entries=entries)


def load_dataset(root, target=None, split=None):
    manifest = read_manifest(root)
    entries = manifest.entries if split is None else manifest.split(split)
    samples = []
    for e in entries:
        s = load_sample(e.image_path, e.mask_path, target=target)
        s.source = e.stem
        samples.append(s)
    return samples
