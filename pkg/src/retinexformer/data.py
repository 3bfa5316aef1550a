"""Synthetic low/normal-light pairs, PPM/PGM I/O and paired augmentation."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, UsageError
from .orf import DegradationConfig
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class ImagePair:
    low: Tensor
    reference: Tensor
    illumination: Tensor | None = None  # H x W x 1, before clamping

    def __post_init__(self):
        if self.low.shape != self.reference.shape:
            raise ConfigError(f"pair shapes differ: {self.low.shape} vs {self.reference.shape}")

    def check(self):
        for name, t in (("low", self.low), ("reference", self.reference)):
            if t.data.min() < 0 or t.data.max() > 1:
                raise ConfigError(f"{name} image leaves [0, 1]")


# --------------------------------------------------------------------------
# Degradation


def _interp_matrix(n_out, n_in):
    pos = np.linspace(0, n_in - 1, n_out)
    return np.stack([np.interp(pos, np.arange(n_in), np.eye(n_in)[i]) for i in range(n_in)], axis=1)


def _bilinear(coarse, h, w):
    """Align-corners bilinear upsampling of a small grid to ``h x w``."""
    gy, gx = coarse.shape
    return _interp_matrix(h, gy) @ coarse @ _interp_matrix(w, gx).T


def illumination_field(h, w, cfg: DegradationConfig, rng):
    """Smooth field in ``[l_min, l_max]``: upsampled coarse uniform noise."""
    if cfg.l_min == cfg.l_max:
        return np.full((h, w), cfg.l_min)
    coarse = rng.uniform(cfg.l_min, cfg.l_max, size=(cfg.grid, cfg.grid))
    return _bilinear(coarse, h, w)


def synth_pair(clean, cfg: DegradationConfig, seed: int) -> ImagePair:
    """Darken and corrupt ``clean`` with the perturbed Retinex model."""
    clean = clean.data if isinstance(clean, Tensor) else np.asarray(clean)
    if clean.ndim != 3 or clean.shape[-1] != 3:
        raise ConfigError(f"clean image must be H x W x 3, got {clean.shape}")
    if clean.min() < 0 or clean.max() > 1:
        raise ConfigError("clean image must lie in [0, 1]")
    h, w, _ = clean.shape
    rng = np.random.default_rng(seed)
    illum = illumination_field(h, w, cfg, rng)
    if cfg.jitter > 0:
        coarse = rng.uniform(-1.0, 1.0, size=(cfg.grid, cfg.grid))
        illum_hat = cfg.jitter * _bilinear(coarse, h, w)
    else:
        illum_hat = 0.0
    noise = rng.normal(0.0, cfg.sigma, size=clean.shape) if cfg.sigma > 0 else 0.0
    low = np.clip((clean + noise) * (illum + illum_hat)[..., None], 0.0, 1.0)
    return ImagePair(
        low=Tensor(low, dtype=np.float64),
        reference=Tensor(clean, dtype=np.float64),
        illumination=Tensor(illum[..., None], dtype=np.float64),
    )


def procedural_clean_image(h, w, seed):
    """Well-exposed stand-in scene: shaded background, flat shapes, texture."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    base = rng.uniform(0.25, 0.75, size=3)
    slope = rng.uniform(-0.3, 0.3, size=(2, 3))
    img = base + yy[..., None] * slope[0] + xx[..., None] * slope[1]
    for _ in range(rng.integers(3, 8)):
        colour = rng.uniform(0.05, 0.95, size=3)
        cy, cx = rng.uniform(0, 1, size=2)
        ry, rx = rng.uniform(0.05, 0.3, size=2)
        if rng.random() < 0.5:
            mask = (np.abs(yy - cy) < ry) & (np.abs(xx - cx) < rx)
        else:
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 < 1
        img[mask] = colour
    freq = rng.uniform(4, 16, size=2)
    phase = rng.uniform(0, 2 * np.pi)
    img += 0.05 * np.sin(2 * np.pi * (freq[0] * yy + freq[1] * xx) + phase)[..., None]
    return np.clip(img, 0.02, 0.98)


# --------------------------------------------------------------------------
# Augmentation


def rotate90(arr, k=1):
    return np.rot90(arr, k, axes=(0, 1))


def random_crop_augment(pair: ImagePair, size: int, seed: int) -> ImagePair:
    """Same crop window, rotation (0/90/180/270) and h-flip on every member."""
    h, w = pair.low.shape[:2]
    if size > min(h, w):
        raise UsageError(f"crop size {size} exceeds image size {h}x{w}")
    if size % 4:
        raise UsageError(f"crop size {size} must be divisible by 4")
    rng = np.random.default_rng(seed)
    y0 = int(rng.integers(0, h - size + 1))
    x0 = int(rng.integers(0, w - size + 1))
    turns = int(rng.integers(0, 4))
    flip = bool(rng.integers(0, 2))

    def apply(t):
        if t is None:
            return None
        a = rotate90(t.data[y0 : y0 + size, x0 : x0 + size], turns)
        if flip:
            a = a[:, ::-1]
        return Tensor(a, dtype=t.dtype)

    return ImagePair(apply(pair.low), apply(pair.reference), apply(pair.illumination))


# --------------------------------------------------------------------------
# Netpbm I/O (binary P6 colour, P5 grey), 8-bit only


def _parse_netpbm(blob, magic, channels):
    if blob[:2] != magic:
        raise FormatError(f"expected {magic.decode()} magic", offset=0)
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and blob[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError("malformed header field", offset=start)
        fields.append(int(blob[start:pos]))
    if pos >= len(blob) or not blob[pos : pos + 1].isspace():
        raise FormatError("header must end with a single whitespace byte", offset=pos)
    pos += 1
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise FormatError(f"invalid dimensions {width}x{height}", offset=2)
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}", offset=pos - 1)
    need = width * height * channels
    if len(blob) - pos < need:
        raise FormatError(
            f"truncated payload: need {need} bytes, have {len(blob) - pos}", offset=len(blob)
        )
    pixels = np.frombuffer(blob, dtype=np.uint8, count=need, offset=pos)
    return pixels.reshape(height, width, channels)


def _to_bytes(values):
    return np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def load_image(path) -> Tensor:
    """Read a binary PPM (P6, maxval 255) into an H x W x 3 tensor in [0, 1]."""
    return Tensor(_parse_netpbm(Path(path).read_bytes(), b"P6", 3) / 255.0)


def save_image(image, path):
    data = image.data if isinstance(image, Tensor) else np.asarray(image)
    if data.ndim != 3 or data.shape[-1] != 3:
        raise UsageError(f"save_image needs H x W x 3, got {data.shape}")
    h, w, _ = data.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + _to_bytes(data).tobytes())


def load_gray(path) -> Tensor:
    return Tensor(_parse_netpbm(Path(path).read_bytes(), b"P5", 1) / 255.0)


def save_gray(image, path):
    data = image.data if isinstance(image, Tensor) else np.asarray(image)
    data = data.reshape(data.shape[0], data.shape[1])
    h, w = data.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + _to_bytes(data).tobytes())


# --------------------------------------------------------------------------
# Dataset directory: pairs/NNNN_low.ppm, pairs/NNNN_ref.ppm, optional
# pairs/NNNN_illum.pgm, plus index.txt listing the NNNN basenames.


def write_dataset(out_dir, pairs, names=None):
    out = Path(out_dir)
    (out / "pairs").mkdir(parents=True, exist_ok=True)
    names = names or [f"{i:04d}" for i in range(len(pairs))]
    for name, pair in zip(names, pairs):
        save_image(pair.low, out / "pairs" / f"{name}_low.ppm")
        save_image(pair.reference, out / "pairs" / f"{name}_ref.ppm")
        if pair.illumination is not None:
            save_gray(pair.illumination, out / "pairs" / f"{name}_illum.pgm")
    (out / "index.txt").write_text("".join(f"{n}\n" for n in names))
    return names


def read_dataset(root):
    """Return ``[(name, ImagePair), ...]`` in manifest order."""
    root = Path(root)
    index = root / "index.txt"
    if not index.is_file():
        raise FileNotFoundError(f"no index.txt in {root}")
    items = []
    for name in index.read_text().split():
        base = root / "pairs" / name
        illum_path = Path(f"{base}_illum.pgm")
        illum = load_gray(illum_path) if illum_path.exists() else None
        items.append(
            (name, ImagePair(load_image(f"{base}_low.ppm"), load_image(f"{base}_ref.ppm"), illum))
        )
    return items


def synthesize_dataset(cleans, count, cfg: DegradationConfig, seed):
    """``count`` pairs cycling through ``cleans``; one derived seed per sample."""
    if not cleans:
        raise UsageError("need at least one clean image")
    seeds = np.random.SeedSequence(seed).spawn(count)
    pairs = []
    for i in range(count):
        sample_seed = int(seeds[i].generate_state(1)[0])
        pairs.append(synth_pair(cleans[i % len(cleans)], cfg, sample_seed))
    return pairs
