"""Bayer RAW handling and the synthetic RAW/RGB data generator."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import imageio
from .errors import ShapeError
from .serialize import atomic_write

CFA_PHASES = ("RGGB", "GRBG", "GBRG", "BGGR")

# (row, col) of R, G1 (green in the red row), G2, B inside the 2x2 tile
_SITES = {
    "RGGB": ((0, 0), (0, 1), (1, 0), (1, 1)),
    "GRBG": ((0, 1), (0, 0), (1, 1), (1, 0)),
    "GBRG": ((1, 0), (1, 1), (0, 0), (0, 1)),
    "BGGR": ((1, 1), (1, 0), (0, 1), (0, 0)),
}
_PLANE_TO_RGB = (0, 1, 1, 2)

DEFAULT_GAINS = (2.0, 1.0, 1.8)


@dataclass
class BayerFrame:
    data: np.ndarray
    cfa_phase: str = "RGGB"
    black_level: int = 64
    white_level: int = 1023

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 2:
            raise ShapeError(f"BayerFrame data must be 2-D, got {self.data.shape}")
        h, w = self.data.shape
        if h % 2 or w % 2:
            raise ShapeError(f"BayerFrame dims must be even, got h={h}, w={w}")
        if self.cfa_phase not in CFA_PHASES:
            raise ValueError(f"unknown CFA phase {self.cfa_phase!r}; choose from {CFA_PHASES}")
        if not 0 <= self.black_level < self.white_level:
            raise ValueError(f"need 0 <= black_level < white_level, got {self.black_level}, {self.white_level}")

    @property
    def shape(self):
        return self.data.shape

    def normalized(self):
        """Float32 mosaic mapped so black -> 0 and white -> 1, clamped."""
        v = (self.data.astype(np.float32) - self.black_level) / np.float32(self.white_level - self.black_level)
        return np.clip(v, 0, 1)


@dataclass
class PatchPair:
    raw: np.ndarray   # (1, 4, s/2, s/2)
    rgb: np.ndarray   # (1, 3, s, s)
    offset: tuple = (0, 0)


@dataclass
class SynthParams:
    gains: tuple = DEFAULT_GAINS
    read_noise: float = 0.01
    shot_noise: float = 0.01
    cfa_phase: str = "RGGB"
    black_level: int = 64
    white_level: int = 1023

    def __post_init__(self):
        if len(self.gains) != 3 or min(self.gains) <= 0:
            raise ValueError(f"gains must be three positive values, got {self.gains}")
        if self.read_noise < 0 or self.shot_noise < 0:
            raise ValueError("noise parameters must be >= 0")
        if self.cfa_phase not in CFA_PHASES:
            raise ValueError(f"unknown CFA phase {self.cfa_phase!r}")
        if not 0 <= self.black_level < self.white_level <= 65535:
            raise ValueError("need 0 <= black_level < white_level <= 65535")


def pack_bayer(frame: BayerFrame, normalize=True):
    """Mosaic -> (1, 4, h/2, w/2) tensor with planes (R, G1, G2, B)."""
    data = frame.normalized() if normalize else frame.data.astype(np.float32)
    planes = [data[r::2, c::2] for r, c in _SITES[frame.cfa_phase]]
    return np.stack(planes)[None].astype(np.float32)


def unpack_bayer(packed, cfa_phase="RGGB", black_level=64, white_level=1023, normalized=True):
    """Inverse of :func:`pack_bayer`; returns a BayerFrame of uint16 counts."""
    p = np.asarray(packed)
    if p.ndim == 4:
        p = p[0]
    if p.ndim != 3 or p.shape[0] != 4:
        raise ShapeError(f"packed Bayer tensor must be (4, h, w), got {p.shape}")
    _, h, w = p.shape
    mosaic = np.zeros((2 * h, 2 * w), dtype=np.float64)
    for plane, (r, c) in zip(p, _SITES[cfa_phase]):
        mosaic[r::2, c::2] = plane
    if normalized:
        mosaic = black_level + mosaic * (white_level - black_level)
    counts = np.clip(np.rint(mosaic), 0, 65535).astype(np.uint16)
    return BayerFrame(counts, cfa_phase, black_level, white_level)


def cfa_channel_map(h, w, cfa_phase="RGGB"):
    """(h, w) array of 0/1/2 naming the colour sensed at each site."""
    out = np.empty((h, w), dtype=np.int64)
    for plane, (r, c) in enumerate(_SITES[cfa_phase]):
        out[r::2, c::2] = _PLANE_TO_RGB[plane]
    return out


def srgb_to_linear(v):
    v = np.asarray(v, dtype=np.float64)
    return np.where(v <= 0.04045, v / 12.92, ((v + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(v):
    v = np.clip(np.asarray(v, dtype=np.float64), 0, 1)
    return np.where(v <= 0.0031308, v * 12.92, 1.055 * v ** (1 / 2.4) - 0.055)


def _as_rgb(rgb):
    a = np.asarray(rgb, dtype=np.float64)
    if a.ndim == 4:
        if a.shape[0] != 1:
            raise ShapeError(f"expected one image, got batch {a.shape[0]}")
        a = a[0]
    if a.ndim != 3 or a.shape[0] != 3:
        raise ShapeError(f"expected (3, h, w) RGB, got {a.shape}")
    return a


def synth_raw(rgb, params: SynthParams | None = None, seed=0):
    """sRGB image in [0, 1] -> noisy quantized Bayer mosaic (deterministic in ``seed``)."""
    params = params or SynthParams()
    a = _as_rgb(rgb)
    if a.min() < 0 or a.max() > 1:
        raise ValueError("rgb values must lie in [0, 1]")
    _, h, w = a.shape
    if h % 2 or w % 2:
        raise ShapeError(f"image dims must be even, got h={h}, w={w}")
    lin = srgb_to_linear(a) / np.asarray(params.gains, dtype=np.float64)[:, None, None]
    chan = cfa_channel_map(h, w, params.cfa_phase)
    v = np.take_along_axis(lin, chan[None], axis=0)[0]
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(v.shape)
    sigma = np.sqrt(params.read_noise ** 2 + params.shot_noise * np.maximum(v, 0))
    v = v + sigma * z
    span = params.white_level - params.black_level
    counts = np.clip(np.rint(params.black_level + v * span), params.black_level, params.white_level)
    return BayerFrame(counts.astype(np.uint16), params.cfa_phase, params.black_level, params.white_level)


def _correlate3(img, kernel):
    p = np.pad(img, 1, mode="reflect")
    h, w = img.shape
    out = np.zeros_like(img)
    for dy in range(3):
        for dx in range(3):
            if kernel[dy][dx]:
                out += kernel[dy][dx] * p[dy:dy + h, dx:dx + w]
    return out


_K_RB = ((0.25, 0.5, 0.25), (0.5, 1.0, 0.5), (0.25, 0.5, 0.25))
_K_G = ((0.0, 0.25, 0.0), (0.25, 1.0, 0.25), (0.0, 0.25, 0.0))


def demosaic_bilinear(frame: BayerFrame, gains=DEFAULT_GAINS, gamma="srgb"):
    """Classical bilinear CFA interpolation, white-balance gains, then gamma.

    ``gamma="srgb"`` applies the sRGB transfer curve (the inverse of what
    :func:`synth_raw` removes); a number applies a pure power 1/gamma.
    Returns (1, 3, h, w) float32 in [0, 1].
    """
    m = frame.normalized().astype(np.float64)
    h, w = m.shape
    chan = cfa_channel_map(h, w, frame.cfa_phase)
    out = np.empty((3, h, w))
    for c, kernel in ((0, _K_RB), (1, _K_G), (2, _K_RB)):
        out[c] = _correlate3(np.where(chan == c, m, 0.0), kernel)
    out *= np.asarray(gains, dtype=np.float64)[:, None, None]
    out = np.clip(out, 0, 1)
    if gamma == "srgb":
        out = linear_to_srgb(out)
    else:
        out = out ** (1.0 / float(gamma))
    return np.clip(out, 0, 1)[None].astype(np.float32)


def extract_patches(frame: BayerFrame, rgb, size=256, stride=None, seed=None, count=None):
    """Cut aligned RAW/RGB patch pairs.

    Grid mode (``count`` is None) walks offsets with ``stride`` (default
    ``size``); a ``seed`` shuffles the resulting order. Random mode draws
    ``count`` crops with ``seed``. Offsets are snapped to even coordinates so
    every raw crop keeps the frame's CFA phase.
    """
    if size % 2:
        raise ValueError(f"patch size must be even, got {size}")
    a = _as_rgb(rgb)
    h, w = frame.shape
    if a.shape[1:] != (h, w):
        raise ShapeError(f"RAW {frame.shape} and RGB {a.shape[1:]} are not aligned")
    if size > h or size > w:
        raise ShapeError(f"patch size {size} larger than image ({h}, {w})")
    rng = np.random.default_rng(seed)
    if count is None:
        stride = size if stride is None else stride
        ys = sorted({y - y % 2 for y in range(0, h - size + 1, stride)})
        xs = sorted({x - x % 2 for x in range(0, w - size + 1, stride)})
        offsets = [(y, x) for y in ys for x in xs]
        if seed is not None:
            offsets = [offsets[i] for i in rng.permutation(len(offsets))]
    else:
        offsets = [(2 * int(rng.integers(0, (h - size) // 2 + 1)),
                    2 * int(rng.integers(0, (w - size) // 2 + 1))) for _ in range(count)]
    packed = pack_bayer(frame)
    out = []
    for y, x in offsets:
        raw = packed[:, :, y // 2:(y + size) // 2, x // 2:(x + size) // 2].copy()
        out.append(PatchPair(raw, a[None, :, y:y + size, x:x + size].astype(np.float32), (y, x)))
    return out


def mask_patches(raw, cell=3, fraction=0.5, seed=0):
    """Zero a seeded random ``fraction`` of cell x cell tiles.

    Returns (masked copy, mask) where mask is a boolean (n, 1, h, w) array,
    True on zeroed pixels. Each batch item gets its own draw.
    """
    if not 0 <= fraction <= 1:
        raise ValueError(f"fraction must be in [0, 1], got {fraction}")
    x = np.asarray(raw)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    n, c, h, w = x.shape
    gh, gw = -(-h // cell), -(-w // cell)
    k = int(round(fraction * gh * gw))
    rng = np.random.default_rng(seed)
    mask = np.zeros((n, 1, h, w), dtype=bool)
    for i in range(n):
        cells = np.zeros(gh * gw, dtype=bool)
        cells[rng.permutation(gh * gw)[:k]] = True
        grid = cells.reshape(gh, gw).repeat(cell, axis=0).repeat(cell, axis=1)
        mask[i, 0] = grid[:h, :w]
    masked = np.where(mask, 0, x).astype(x.dtype)
    if squeeze:
        return masked[0], mask[0]
    return masked, mask


# ---------------------------------------------------------------------------
# synthetic scenes and on-disk datasets


def _supersampled(fn, size, ss=2):
    """Evaluate a boolean coverage function on a finer grid and box-filter it."""
    t = (np.arange(size * ss) + 0.5) / (size * ss)
    yy, xx = np.meshgrid(t, t, indexing="ij")
    cov = fn(yy, xx).astype(np.float64)
    return cov.reshape(size, ss, size, ss).mean(axis=(1, 3))


def synth_scene(size=256, seed=0):
    """Procedural RGB test scene in [0, 1]: gradient backdrop, shapes, gratings, texture."""
    rng = np.random.default_rng(seed)
    t = (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(t, t, indexing="ij")
    c0, c1 = rng.random(3), rng.random(3)
    angle = rng.uniform(0, np.pi)
    ramp = (np.cos(angle) * xx + np.sin(angle) * yy)
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9)
    img = c0[:, None, None] * (1 - ramp) + c1[:, None, None] * ramp
    for _ in range(int(rng.integers(4, 9))):
        color = rng.random(3)
        kind = rng.integers(0, 3)
        cy, cx = rng.random(2)
        ry, rx = rng.uniform(0.04, 0.3, 2)
        if kind == 0:
            cov = _supersampled(lambda Y, X: (np.abs(Y - cy) < ry) & (np.abs(X - cx) < rx), size)
        elif kind == 1:
            cov = _supersampled(lambda Y, X: ((Y - cy) / ry) ** 2 + ((X - cx) / rx) ** 2 < 1, size)
        else:
            freq = rng.uniform(6, 40)
            theta = rng.uniform(0, np.pi)
            phase = np.cos(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy))
            box = _supersampled(lambda Y, X: (np.abs(Y - cy) < ry) & (np.abs(X - cx) < rx), size)
            cov = box * (0.5 + 0.5 * phase)
        img = img * (1 - cov) + color[:, None, None] * cov
    texture = rng.standard_normal((3, size // 8 + 1, size // 8 + 1)) * 0.04
    texture = texture.repeat(8, axis=1).repeat(8, axis=2)[:, :size, :size]
    return np.clip(img + texture, 0, 1)[None].astype(np.float32)


MANIFEST_COLUMNS = ("id", "seed", "gains", "read_noise", "shot_noise", "cfa_phase", "black_level", "white_level")


def image_seed(seed, index):
    return int(seed) ^ int(index)


def make_pair(index, size, seed, params: SynthParams):
    """Deterministic (BayerFrame, 8-bit-quantized RGB) pair for one dataset index."""
    s = image_seed(seed, index)
    rgb = synth_scene(size, seed=np.random.SeedSequence([s, 0]))
    rgb = (np.rint(rgb.astype(np.float64) * 255) / 255).astype(np.float32)
    frame = synth_raw(rgb, params, seed=np.random.SeedSequence([s, 1]))
    return frame, rgb


def write_dataset(out_dir, count, size=256, seed=0, split="train", params: SynthParams | None = None):
    """Write ``<out>/<split>/<id>.pgm`` + ``<id>.png`` + ``manifest.tsv``."""
    params = params or SynthParams()
    root = Path(out_dir) / split
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(count):
        frame, rgb = make_pair(i, size, seed, params)
        ident = f"{i:05d}"
        imageio.write_pgm16(root / f"{ident}.pgm", frame.data, maxval=params.white_level)
        imageio.write_png(root / f"{ident}.png", rgb)
        rows.append([ident, str(image_seed(seed, i)), ",".join(repr(float(g)) for g in params.gains),
                     repr(float(params.read_noise)), repr(float(params.shot_noise)), params.cfa_phase,
                     str(params.black_level), str(params.white_level)])
    buf = io.StringIO()
    writer = csv.writer(buf, delimiter="\t", lineterminator="\n")
    writer.writerow(MANIFEST_COLUMNS)
    writer.writerows(rows)
    atomic_write(root / "manifest.tsv", buf.getvalue().encode())
    return root


def load_dataset(data_dir, split="train"):
    """Read a dataset written by :func:`write_dataset` -> list of (BayerFrame, rgb)."""
    root = Path(data_dir) / split
    if not (root / "manifest.tsv").exists() and (Path(data_dir) / "manifest.tsv").exists():
        root = Path(data_dir)
    with open(root / "manifest.tsv", newline="") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    out = []
    for row in rows:
        data = imageio.read_pgm16(root / f"{row['id']}.pgm")
        frame = BayerFrame(data, row["cfa_phase"], int(row["black_level"]), int(row["white_level"]))
        out.append((frame, imageio.read_png(root / f"{row['id']}.png")))
    return out


def pairs_to_patches(pairs, size, seed=0, per_image=1):
    """Random aligned crops from each (frame, rgb) pair, seeded per image."""
    patches = []
    for i, (frame, rgb) in enumerate(pairs):
        if frame.shape[0] == size and frame.shape[1] == size:
            patches.extend(extract_patches(frame, rgb, size))
        else:
            patches.extend(extract_patches(frame, rgb, size, seed=image_seed(seed, i), count=per_image))
    return patches
