"""Synthetic fundus-like images, preprocessing, noise models and dataset I/O.

On disk a dataset split is a directory holding ``manifest.csv`` (columns
``id,file,label``) and binary 8-bit PPM (``P6``) images; file paths in the
manifest are relative to the split directory.
"""

from __future__ import annotations

import csv
import io
import json
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

CLASS_NAMES = ("normal disc+vessels", "lesion blobs", "hemorrhage streaks")
SPLITS = ("train", "test", "ood")


class DatasetError(ValueError):
    """Malformed dataset directory, manifest or image file."""


@dataclass
class ImageSample:
    pixels: np.ndarray  # H x W x 3, values in [0, 1]
    label: int
    id: str

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"{self.id}: expected H x W x 3 pixels, got {self.pixels.shape}")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise ValueError(f"{self.id}: pixel values outside [0, 1]")


@dataclass(frozen=True)
class PreprocessConfig:
    crop: int = 32
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD

    def __post_init__(self):
        if any(s <= 0 for s in self.std):
            raise ValueError("normalisation std must be positive")

    @property
    def lower(self) -> np.ndarray:
        """Per-channel value of a black pixel after normalisation."""
        return (0.0 - np.array(self.mean)) / np.array(self.std)

    @property
    def upper(self) -> np.ndarray:
        return (1.0 - np.array(self.mean)) / np.array(self.std)


@dataclass(frozen=True)
class NoiseSpec:
    kind: Literal["gaussian", "salt_pepper", "speckle"]
    amount: float = 0.0  # sigma for gaussian/speckle, density for salt_pepper

    def __post_init__(self):
        if self.kind not in ("gaussian", "salt_pepper", "speckle"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.amount < 0 or (self.kind == "salt_pepper" and self.amount > 1):
            raise ValueError(f"noise parameter {self.amount} out of range for {self.kind}")

    @classmethod
    def parse(cls, text: str) -> "NoiseSpec":
        """Parse ``kind:amount``, e.g. ``gaussian:0.1`` or ``salt_pepper:0.05``."""
        kind, _, amount = text.partition(":")
        try:
            return cls(kind.strip().replace("-", "_"), float(amount) if amount else 0.0)
        except (TypeError, ValueError) as exc:
            raise ValueError(f"bad noise spec {text!r}: {exc}") from exc

    def __str__(self) -> str:
        return f"{self.kind}:{self.amount:g}"


# -- preprocessing -------------------------------------------------------


def center_crop(pixels: np.ndarray, crop: int) -> np.ndarray:
    h, w = pixels.shape[:2]
    if h < crop or w < crop:
        raise ValueError(f"image {h}x{w} is smaller than crop {crop}")
    top, left = (h - crop) // 2, (w - crop) // 2
    return pixels[top : top + crop, left : left + crop]


def preprocess(img: ImageSample, cfg: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    """Center crop then per-channel standardisation; returns channel-first (3, crop, crop)."""
    x = center_crop(img.pixels, cfg.crop)
    x = (x - np.array(cfg.mean)) / np.array(cfg.std)
    return np.ascontiguousarray(x.transpose(2, 0, 1))


# -- noise in pixel space ------------------------------------------------


def add_gaussian(img: ImageSample, sigma: float, rng: np.random.Generator) -> ImageSample:
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return ImageSample(img.pixels.copy(), img.label, img.id)
    noisy = img.pixels + rng.normal(0.0, sigma, size=img.pixels.shape)
    return ImageSample(np.clip(noisy, 0.0, 1.0), img.label, img.id)


def _salt_pepper_masks(shape: tuple[int, int], density: float, rng) -> tuple[np.ndarray, np.ndarray]:
    u = rng.random(shape)
    salt = u < density / 2
    pepper = (u >= density / 2) & (u < density)
    return salt, pepper


def add_salt_pepper(img: ImageSample, density: float, rng: np.random.Generator) -> ImageSample:
    """Each pixel (all channels together) turns white or black with probability density/2 each."""
    if not 0.0 <= density <= 1.0:
        raise ValueError("density must lie in [0, 1]")
    out = img.pixels.copy()
    if density == 0:
        return ImageSample(out, img.label, img.id)
    salt, pepper = _salt_pepper_masks(out.shape[:2], density, rng)
    out[salt] = 1.0
    out[pepper] = 0.0
    return ImageSample(out, img.label, img.id)


def add_speckle(img: ImageSample, sigma: float, rng: np.random.Generator) -> ImageSample:
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return ImageSample(img.pixels.copy(), img.label, img.id)
    noisy = img.pixels * (1.0 + rng.normal(0.0, sigma, size=img.pixels.shape))
    return ImageSample(np.clip(noisy, 0.0, 1.0), img.label, img.id)


# -- noise on preprocessed tensors ---------------------------------------


def add_noise_normalized(
    x: np.ndarray, spec: NoiseSpec, rng: np.random.Generator, cfg: PreprocessConfig = PreprocessConfig()
) -> np.ndarray:
    """Apply ``spec`` to a normalised (3, H, W) tensor.

    Noise amounts are in pixel units, so sigma means the same thing as in
    :func:`add_gaussian`; clipping uses the per-channel normalised images of
    0 and 1.  Zero-parameter noise returns an exact copy.
    """
    x = np.asarray(x, dtype=np.float64)
    if spec.amount == 0:
        return x.copy()
    std = np.array(cfg.std)[:, None, None]
    shift = (np.array(cfg.mean) / np.array(cfg.std))[:, None, None]
    lo, hi = cfg.lower[:, None, None], cfg.upper[:, None, None]
    hwc = x.transpose(1, 2, 0).shape
    if spec.kind == "gaussian":
        n = rng.normal(0.0, spec.amount, size=hwc).transpose(2, 0, 1)
        out = x + n / std
    elif spec.kind == "speckle":
        n = rng.normal(0.0, spec.amount, size=hwc).transpose(2, 0, 1)
        out = x + (x + shift) * n
    else:
        salt, pepper = _salt_pepper_masks(hwc[:2], spec.amount, rng)
        out = np.where(salt[None], hi, np.where(pepper[None], lo, x))
    return np.clip(out, lo, hi)


# -- synthetic generation ------------------------------------------------


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return yy + 0.5, xx + 0.5


def _curve_distance(yy, xx, pts: np.ndarray) -> np.ndarray:
    d2 = (yy[..., None] - pts[:, 0]) ** 2 + (xx[..., None] - pts[:, 1]) ** 2
    return np.sqrt(d2.min(axis=-1))


def render_fundus(rng: np.random.Generator, label: int, size: int = 40, shift: str | None = None,
                  brightness: float = 0.3) -> np.ndarray:
    """Render one image (size x size x 3, quantised to 8 bits) for class ``label``.

    class 0: dark disc with bright curved vessels; class 1 adds 2-5 bright
    Gaussian blobs; class 2 adds 2-4 dark elongated streaks.
    """
    yy, xx = _grid(size)
    half = size / 2.0
    center = half + rng.uniform(-2.0, 2.0, size=2)
    r = np.hypot(yy - center[0], xx - center[1]) / half
    background = np.array([0.62, 0.30, 0.14])
    img = background * np.clip(1.0 - 0.45 * r**2, 0.2, 1.0)[..., None]

    tex = np.zeros((size, size))
    amp = 0.03 if shift != "texture_swap" else 0.12
    for _ in range(3):
        k = rng.uniform(0.15, 0.6, size=2)
        tex += amp * np.sin(k[0] * yy + k[1] * xx + rng.uniform(0, 2 * np.pi))
    img = img + tex[..., None] * np.array([1.0, 0.6, 0.4])

    disc = center + rng.uniform(-6.0, 6.0, size=2)
    radius = rng.uniform(3.5, 5.0)
    d = np.hypot(yy - disc[0], xx - disc[1])
    img = img * (1.0 - 0.45 * np.clip(radius - d + 0.5, 0.0, 1.0))[..., None]

    vessel_sign = -1.0 if shift == "texture_swap" else 1.0
    t = np.linspace(0.0, 1.0, 60)[:, None]
    for _ in range(rng.integers(3, 6)):
        angle = rng.uniform(0, 2 * np.pi)
        length = rng.uniform(14.0, 22.0)
        end = disc + length * np.array([np.sin(angle), np.cos(angle)])
        normal = np.array([np.cos(angle), -np.sin(angle)])
        ctrl = (disc + end) / 2 + rng.uniform(-6.0, 6.0) * normal
        pts = (1 - t) ** 2 * disc + 2 * (1 - t) * t * ctrl + t**2 * end
        v = np.exp(-((_curve_distance(yy, xx, pts) / 0.8) ** 2))
        img = img + vessel_sign * v[..., None] * np.array([0.22, 0.08, 0.04])

    lo, hi = 8.0, size - 8.0
    if label == 1:
        for _ in range(rng.integers(2, 6)):
            c = rng.uniform(lo, hi, size=2)
            s = rng.uniform(1.3, 2.0)
            blob = np.exp(-((yy - c[0]) ** 2 + (xx - c[1]) ** 2) / (2 * s * s))
            img = img + blob[..., None] * np.array([0.45, 0.42, 0.22])
    elif label == 2:
        for _ in range(rng.integers(2, 5)):
            c = rng.uniform(lo, hi, size=2)
            angle = rng.uniform(0, np.pi)
            half_len = rng.uniform(3.5, 6.0)
            direction = np.array([np.sin(angle), np.cos(angle)])
            pts = c + np.linspace(-half_len, half_len, 24)[:, None] * direction
            s = np.exp(-((_curve_distance(yy, xx, pts) / 0.9) ** 2))
            img = img * (1.0 - 0.6 * s)[..., None]
    elif label != 0:
        raise ValueError(f"synthetic generator supports classes 0-2, got {label}")

    img = img + rng.normal(0.0, 0.015, size=img.shape)
    if shift == "brightness_shift":
        img = img + brightness
    return quantize(np.clip(img, 0.0, 1.0))


def quantize(pixels: np.ndarray) -> np.ndarray:
    return np.round(pixels * 255.0) / 255.0


@dataclass(frozen=True)
class SyntheticConfig:
    seed: int
    n_classes: int = 3
    per_class_counts: Sequence[int] = (267, 267, 266)
    ood_per_class_counts: Sequence[int] = (67, 67, 66)
    image_size: int = 40
    test_fraction: float = 0.25
    ood_shift: str = "brightness_shift"
    brightness_shift: float = 0.3
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 2 <= self.n_classes <= len(CLASS_NAMES):
            raise ValueError(f"n_classes must be in [2, {len(CLASS_NAMES)}]")
        for counts in (self.per_class_counts, self.ood_per_class_counts):
            if len(counts) != self.n_classes or any(c < 1 for c in counts):
                raise ValueError("need one count >= 1 per class")

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "n_classes": self.n_classes,
            "per_class_counts": list(self.per_class_counts),
            "ood_per_class_counts": list(self.ood_per_class_counts),
            "image_size": self.image_size,
            "test_fraction": self.test_fraction,
            "ood_shift": self.ood_shift,
            "brightness_shift": self.brightness_shift,
        }


def synthesize(cfg: SyntheticConfig) -> dict[str, list[ImageSample]]:
    """In-memory train/test/ood splits; a pure function of ``cfg``."""
    pool: list[tuple[int, int]] = [(c, i) for c in range(cfg.n_classes) for i in range(cfg.per_class_counts[c])]
    split_rng = np.random.default_rng([cfg.seed, 7])
    train_keys, test_keys = [], []
    for c in range(cfg.n_classes):
        idx = split_rng.permutation(cfg.per_class_counts[c])
        n_test = int(round(cfg.per_class_counts[c] * cfg.test_fraction))
        test_keys += [(c, int(i)) for i in idx[:n_test]]
        train_keys += [(c, int(i)) for i in idx[n_test:]]
    ood_keys = [(c, i) for c in range(cfg.n_classes) for i in range(cfg.ood_per_class_counts[c])]
    assert len(train_keys) + len(test_keys) == len(pool)

    def make(split: str, keys, code: int, shift: str | None) -> list[ImageSample]:
        order = np.random.default_rng([cfg.seed, 8, code]).permutation(len(keys))
        out = []
        for k, j in enumerate(order):
            c, i = keys[j]
            rng = np.random.default_rng([cfg.seed, code if shift else 0, c, i])
            pixels = render_fundus(rng, c, cfg.image_size, shift, cfg.brightness_shift)
            out.append(ImageSample(pixels, c, f"{split}-{k:04d}"))
        return out

    return {
        "train": make("train", train_keys, 0, None),
        "test": make("test", test_keys, 1, None),
        "ood": make("ood", ood_keys, 2, cfg.ood_shift),
    }


# -- PPM / PGM -----------------------------------------------------------


def encode_ppm(pixels: np.ndarray) -> bytes:
    arr = np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = arr.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + arr.tobytes()


def encode_pgm(values: np.ndarray) -> bytes:
    arr = np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = arr.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + arr.tobytes()


def _header_tokens(raw: bytes, n: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < n:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated header")
        tokens.append(raw[start:pos])
    return tokens, pos + 1


def decode_pnm(raw: bytes, name: str = "<bytes>") -> np.ndarray:
    """Decode 8-bit P6 (H x W x 3) or P5 (H x W) data to floats in [0, 1]."""
    try:
        (magic, w, h, maxval), offset = _header_tokens(raw, 4)
        w, h, maxval = int(w), int(h), int(maxval)
    except (ValueError, IndexError) as exc:
        raise DatasetError(f"{name}: corrupt PNM header ({exc})") from None
    if magic not in (b"P6", b"P5"):
        raise DatasetError(f"{name}: unsupported magic {magic!r}, expected P6 or P5")
    if maxval != 255 or w < 1 or h < 1:
        raise DatasetError(f"{name}: only 8-bit images with maxval 255 are supported")
    channels = 3 if magic == b"P6" else 1
    body = raw[offset : offset + w * h * channels]
    if len(body) != w * h * channels:
        raise DatasetError(f"{name}: truncated pixel data")
    arr = np.frombuffer(body, dtype=np.uint8).astype(np.float64) / 255.0
    return arr.reshape(h, w, 3) if channels == 3 else arr.reshape(h, w)


# -- dataset directories -------------------------------------------------


def write_split(samples: Sequence[ImageSample], directory: str | Path) -> Path:
    directory = Path(directory)
    images = directory / "images"
    images.mkdir(parents=True, exist_ok=True)
    for stale in images.glob("*.ppm"):
        stale.unlink()
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["id", "file", "label"])
    for s in samples:
        rel = f"images/{s.id}.ppm"
        (directory / rel).write_bytes(encode_ppm(s.pixels))
        writer.writerow([s.id, rel, s.label])
    (directory / "manifest.csv").write_text(buf.getvalue(), encoding="utf-8")
    return directory


def generate_synthetic(cfg: SyntheticConfig, root: str | Path) -> dict[str, Path]:
    """Write train/test/ood split directories plus a provenance copy of ``cfg``."""
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
        splits = synthesize(cfg)
        out = {name: write_split(samples, root / name) for name, samples in splits.items()}
        (root / "generation_config.json").write_text(
            json.dumps(cfg.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    except OSError as exc:
        raise DatasetError(f"cannot write dataset under {root}: {exc}") from exc
    return out


def load_dataset(path: str | Path) -> Iterator[ImageSample]:
    """Stream samples in manifest order."""
    path = Path(path)
    manifest = path / "manifest.csv"
    if not manifest.is_file():
        raise DatasetError(f"{manifest}: manifest not found")
    with manifest.open(encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["id", "file", "label"]:
            raise DatasetError(f"{manifest}: expected header id,file,label, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise DatasetError(f"{manifest}:{lineno}: expected 3 columns, got {len(row)}")
            sid, rel, label = row
            try:
                label = int(label)
            except ValueError:
                raise DatasetError(f"{manifest}:{lineno}: label {label!r} is not an integer") from None
            if label < 0:
                raise DatasetError(f"{manifest}:{lineno}: negative label")
            file = path / rel
            if not file.is_file():
                raise DatasetError(f"{file}: image listed in manifest is missing")
            pixels = decode_pnm(file.read_bytes(), str(file))
            if pixels.ndim != 3:
                raise DatasetError(f"{file}: expected a colour (P6) image")
            yield ImageSample(pixels, label, sid)


def count_rows(path: str | Path) -> int:
    with (Path(path) / "manifest.csv").open(encoding="utf-8") as fh:
        return sum(1 for _ in fh) - 1
