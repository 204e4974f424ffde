"""Image fidelity metrics and the loss terms used for training and scoring.

Everything is evaluated in float64 on (n, c, h, w) or (c, h, w) arrays.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import ShapeError

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
PATCH_EXP_CLAMP = 80.0


def _pair(pred, target):
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeError(f"prediction {p.shape} and target {t.shape} differ in shape")
    if p.ndim == 3:
        p, t = p[None], t[None]
    if p.ndim != 4:
        raise ShapeError(f"expected (n, c, h, w) or (c, h, w) images, got {p.shape}")
    return p, t


def psnr(pred, target):
    """10 log10(1 / MSE) for unit dynamic range; identical images give PSNR_CAP."""
    p, t = _pair(pred, target)
    mse = float(np.mean((p - t) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _blur(x, g):
    """Separable filtering of (n, c, h, w) with reflect padding; output keeps h, w."""
    r = len(g) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (r, r), (r, r)), mode="reflect")
    h, w = x.shape[2:]
    rows = sum(g[i] * xp[:, :, i:i + h, :] for i in range(len(g)))
    return sum(g[i] * rows[:, :, :, i:i + w] for i in range(len(g)))


def ssim_map(pred, target):
    p, t = _pair(pred, target)
    if min(p.shape[2:]) < SSIM_WINDOW:
        raise ShapeError(f"ssim needs spatial dims >= {SSIM_WINDOW}, got {p.shape[2:]}")
    g = gaussian_window()
    mu_p, mu_t = _blur(p, g), _blur(t, g)
    var_p = _blur(p * p, g) - mu_p ** 2
    var_t = _blur(t * t, g) - mu_t ** 2
    cov = _blur(p * t, g) - mu_p * mu_t
    num = (2 * mu_p * mu_t + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_p ** 2 + mu_t ** 2 + SSIM_C1) * (var_p + var_t + SSIM_C2)
    return num / den


def ssim(pred, target):
    """Single-scale SSIM, mean over pixels, channels and batch."""
    return float(np.mean(ssim_map(pred, target)))


def l1(pred, target):
    p, t = _pair(pred, target)
    return float(np.mean(np.abs(p - t)))


def mse(pred, target):
    p, t = _pair(pred, target)
    return float(np.mean((p - t) ** 2))


def charbonnier(pred, target, eps=1e-3):
    """mean(sqrt(d^2 + eps^2)) - eps: shifted so identical images score exactly 0."""
    if eps <= 0:
        raise ValueError(f"charbonnier eps must be > 0, got {eps}")
    p, t = _pair(pred, target)
    return float(np.mean(np.sqrt((p - t) ** 2 + eps * eps))) - eps


def cosine_loss(pred, target, eps=1e-8):
    """Mean over pixels of 1 - cos(angle) between per-pixel RGB vectors.

    The norm product is floored at ``eps`` rather than offset by it, so
    identical images give 0 up to rounding.
    """
    p, t = _pair(pred, target)
    if p.shape[1] != 3:
        raise ShapeError(f"cosine loss needs 3-channel images, got {p.shape[1]}")
    dot = np.sum(p * t, axis=1)
    norm = np.sqrt(np.sum(p * p, axis=1)) * np.sqrt(np.sum(t * t, axis=1))
    return float(np.mean(1.0 - dot / np.maximum(norm, eps)))


PATCH_MODES = ("rectified", "literal")


def _patch_view(d, p):
    n, c, h, w = d.shape
    if h % p or w % p:
        raise ShapeError(f"patch size {p} must divide image dims ({h}, {w})")
    return d.reshape(n, c, h // p, p, w // p, p)


def patch_weights(pred, target, p=8, eps=1e-2, mode="rectified"):
    """Unnormalized per-patch weights, shape (n, c, h/p, w/p).

    Patches are p x p tiles of each channel. ``rectified`` uses
    exp(|m| + v); ``literal`` uses exp(1/(|m|+eps) + 1/(v+eps)). The
    exponent is clamped at PATCH_EXP_CLAMP in both modes.
    """
    if eps <= 0:
        raise ValueError(f"patch loss eps must be > 0, got {eps}")
    if mode not in PATCH_MODES:
        raise ValueError(f"unknown patch mode {mode!r}; choose from {PATCH_MODES}")
    a, b = _pair(pred, target)
    tiles = _patch_view(a - b, p)
    m = tiles.mean(axis=(3, 5))
    v = tiles.var(axis=(3, 5))
    if mode == "rectified":
        expo = np.abs(m) + v
    else:
        expo = 1.0 / (np.abs(m) + eps) + 1.0 / (v + eps)
    return np.exp(np.minimum(expo, PATCH_EXP_CLAMP))


def patch_loss(pred, target, p=8, eps=1e-2, mode="rectified"):
    """Patch-weighted L1, normalized by the mean patch weight."""
    w = patch_weights(pred, target, p, eps, mode)
    a, b = _pair(pred, target)
    per_patch = np.abs(_patch_view(a - b, p)).mean(axis=(3, 5))
    return float(np.mean(w * per_patch) / np.mean(w))


def soft_histogram(x, bins=32, sigma=None):
    """(n, c, h, w) -> (n, c, bins) Gaussian-kernel histogram, each row summing to 1."""
    if bins < 2:
        raise ValueError(f"histogram needs bins >= 2, got {bins}")
    sigma = 1.0 / bins if sigma is None else sigma
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 3:
        a = a[None]
    n, c = a.shape[:2]
    v = a.reshape(n, c, -1, 1)
    centers = (np.arange(bins) + 0.5) / bins
    hist = np.exp(-((v - centers) ** 2) / (2 * sigma * sigma)).mean(axis=2)
    return hist / hist.sum(axis=-1, keepdims=True)


def histogram_loss(pred, target, bins=32, sigma=None):
    """Sum over channels of the L1 distance between soft histograms (batch mean)."""
    p, t = _pair(pred, target)
    diff = np.abs(soft_histogram(p, bins, sigma) - soft_histogram(t, bins, sigma))
    return float(diff.sum(axis=(1, 2)).mean())


def gradient_magnitude(x):
    x = np.asarray(x, dtype=np.float64)
    gx = ops.fixed_filter(x, "sobel_x")
    gy = ops.fixed_filter(x, "sobel_y")
    return np.sqrt(gx * gx + gy * gy + 1e-12)


def edge_loss(pred, target):
    p, t = _pair(pred, target)
    return float(np.mean(np.abs(gradient_magnitude(p) - gradient_magnitude(t))))


# ---------------------------------------------------------------------------
# loss specifications

TERMS = {
    "l1": (l1, {}),
    "mse": (mse, {}),
    "charbonnier": (charbonnier, {"eps": 1e-3}),
    "ssim": (lambda p, t: 1.0 - ssim(p, t), {}),
    "cosine": (cosine_loss, {"eps": 1e-8}),
    "patch": (patch_loss, {"p": 8, "eps": 1e-2, "mode": "rectified"}),
    "histogram": (histogram_loss, {"bins": 32, "sigma": None}),
    "edge": (edge_loss, {}),
}


@dataclass(frozen=True)
class LossTerm:
    name: str
    weight: float = 1.0
    params: dict = field(default_factory=dict)

    def value(self, pred, target):
        fn, defaults = TERMS[self.name]
        return fn(pred, target, **{**defaults, **self.params})

    def label(self):
        if not self.params:
            return self.name
        inner = " ".join(f"{k}={v}" for k, v in sorted(self.params.items()))
        return f"{self.name}({inner})"


def _convert(key, text):
    if key == "mode":
        return text
    if key in ("p", "bins"):
        return int(text)
    return float(text)


_TERM_RE = re.compile(r"^\s*([a-z0-9_]+)\s*(?:\(([^)]*)\))?\s*(?::\s*([^\s]+))?\s*$")


@dataclass(frozen=True)
class LossSpec:
    terms: tuple

    def __post_init__(self):
        if not self.terms:
            raise ValueError("a loss spec needs at least one term")
        for term in self.terms:
            if term.name not in TERMS:
                raise ValueError(f"unknown loss term {term.name!r}; choose from {sorted(TERMS)}")
            if term.weight < 0:
                raise ValueError(f"loss weight for {term.name!r} must be >= 0, got {term.weight}")
            unknown = set(term.params) - set(TERMS[term.name][1])
            if unknown:
                raise ValueError(f"unknown parameter(s) {sorted(unknown)} for loss term {term.name!r}")

    @classmethod
    def parse(cls, text):
        """Parse ``"l1:1,ssim:0.2,patch(p=8 mode=literal):0.5"``; a missing weight means 1."""
        parts, depth, cur = [], 0, ""
        for ch in text:
            depth += (ch == "(") - (ch == ")")
            if ch == "," and depth == 0:
                parts.append(cur)
                cur = ""
            else:
                cur += ch
        parts.append(cur)
        terms = []
        for part in parts:
            if not part.strip():
                continue
            m = _TERM_RE.match(part)
            if not m:
                raise ValueError(f"cannot parse loss term {part!r}")
            name, inner, weight = m.groups()
            params = {}
            for item in (inner or "").replace(";", " ").split():
                if "=" not in item:
                    raise ValueError(f"loss parameter {item!r} must be key=value")
                k, v = item.split("=", 1)
                params[k] = _convert(k, v)
            try:
                w = 1.0 if weight is None else float(weight)
            except ValueError:
                raise ValueError(f"bad weight {weight!r} for loss term {name!r}") from None
            terms.append(LossTerm(name, w, params))
        return cls(tuple(terms))

    def __str__(self):
        return ",".join(f"{t.label()}:{t.weight:g}" for t in self.terms)


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    terms: dict
    total: float

    def as_row(self):
        return {"psnr": self.psnr, "ssim": self.ssim, "loss": self.total, **self.terms}


def evaluate(pred, target, spec: LossSpec | str = "l1:1"):
    """Weighted sum of loss terms plus PSNR/SSIM (SSIM is NaN for images under 11 px)."""
    if isinstance(spec, str):
        spec = LossSpec.parse(spec)
    _pair(pred, target)
    terms, total = {}, 0.0
    for term in spec.terms:
        v = term.value(pred, target)
        terms[term.label()] = v
        total += term.weight * v
    p = np.asarray(pred)
    s = ssim(pred, target) if min(p.shape[-2:]) >= SSIM_WINDOW else float("nan")
    return MetricReport(psnr(pred, target), s, terms, total)
