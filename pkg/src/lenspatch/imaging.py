"""Image helpers and similarity metrics.

Images are ``(H, W, 3)`` float arrays with intensities in ``[0, 1]``. On disk
they are stored as 8-bit PNG; raw tensors go to little-endian float32 files
with a JSON sidecar describing the shape.
"""
from __future__ import annotations

import functools
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image as PILImage
from scipy.ndimage import correlate1d

from .errors import DomainError, ShapeError

MIN_SIDE = 8
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
PERCEPTUAL_SEED = 0
PERCEPTUAL_WIDTHS = (16, 32, 64)


def check_image(x, name="image"):
    """Validate an image array and return it as a float array."""
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[2] != 3:
        raise ShapeError(f"{name} must have shape (H, W, 3), got {x.shape}")
    if x.shape[0] < MIN_SIDE or x.shape[1] < MIN_SIDE:
        raise ShapeError(f"{name} must be at least {MIN_SIDE}x{MIN_SIDE}, got {x.shape[:2]}")
    if not np.all(np.isfinite(x)):
        raise DomainError(f"{name} contains non-finite values")
    if x.min() < 0.0 or x.max() > 1.0:
        raise DomainError(f"{name} values must lie in [0, 1]")
    return x


def _same_shape(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def quantize8(x):
    """Round unit-range intensities to the nearest 8-bit level."""
    return np.round(np.clip(x, 0.0, 1.0) * 255.0) / 255.0


def to_uint8(x):
    return np.round(np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def from_uint8(x):
    return np.asarray(x, dtype=np.float64) / 255.0


def save_png(path, x):
    PILImage.fromarray(to_uint8(x)).save(path)


def load_png(path):
    with PILImage.open(path) as im:
        return from_uint8(np.array(im.convert("RGB")))


def save_tensor(path, x):
    """Write ``x`` as raw little-endian float32 plus a ``.json`` shape sidecar."""
    path = Path(path)
    x = np.ascontiguousarray(x, dtype="<f4")
    path.write_bytes(x.tobytes())
    path.with_suffix(path.suffix + ".json").write_text(json.dumps({"shape": list(x.shape)}))


def load_tensor(path):
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    return np.frombuffer(path.read_bytes(), dtype="<f4").reshape(meta["shape"]).copy()


def mse(a, b):
    a, b = _same_shape(a, b)
    return float(np.mean((a - b) ** 2))


def psnr_from_mse(m):
    if m == 0:
        return math.inf
    return -10.0 * math.log10(m)


def psnr(a, b):
    """Peak signal-to-noise ratio in dB for unit-range images; ``inf`` if equal."""
    return psnr_from_mse(mse(a, b))


@functools.lru_cache(maxsize=None)
def _gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    r = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return w / w.sum()


def _filter_valid(x, w):
    pad = len(w) // 2
    y = correlate1d(x, w, axis=0, mode="constant")
    y = correlate1d(y, w, axis=1, mode="constant")
    return y[pad:-pad, pad:-pad]


def ssim(a, b):
    """Mean structural similarity with an 11x11 Gaussian window (sigma 1.5).

    Statistics are taken only where the window fits inside the image, then
    averaged over positions and channels.
    """
    a, b = _same_shape(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ShapeError(f"image {a.shape[:2]} smaller than the {SSIM_WINDOW}px SSIM window")
    w = _gaussian_window()
    vals = []
    for c in range(a.shape[2]):
        x, y = a[..., c], b[..., c]
        mx, my = _filter_valid(x, w), _filter_valid(y, w)
        sxx = _filter_valid(x * x, w) - mx * mx
        syy = _filter_valid(y * y, w) - my * my
        sxy = _filter_valid(x * y, w) - mx * my
        num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
        den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


class PerceptualNet(nn.Module):
    """Fixed random convolutional feature pyramid used as a perceptual distance.

    Three stride-2 stages; the weights are drawn once from ``seed`` and never
    trained. ``forward(a, b)`` takes NCHW batches in ``[0, 1]`` and returns the
    per-sample distance.
    """

    def __init__(self, seed=PERCEPTUAL_SEED, widths=PERCEPTUAL_WIDTHS):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        layers = []
        cin = 3
        for cout in widths:
            conv = nn.Conv2d(cin, cout, 3, stride=2, padding=1)
            std = math.sqrt(2.0 / (cin * 9))
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=g) * std)
                conv.bias.zero_()
            layers.append(conv)
            cin = cout
        self.stages = nn.ModuleList(layers)
        self.seed = seed
        self.requires_grad_(False)

    def features(self, x):
        feats = []
        h = 2.0 * x - 1.0
        for conv in self.stages:
            h = F.relu(conv(h))
            feats.append(h)
        return feats

    def forward(self, a, b):
        total = 0.0
        fa, fb = self.features(a), self.features(b)
        for ya, yb in zip(fa, fb):
            ya = ya / (ya.norm(dim=1, keepdim=True) + 1e-10)
            yb = yb / (yb.norm(dim=1, keepdim=True) + 1e-10)
            total = total + ((ya - yb) ** 2).sum(dim=1).mean(dim=(1, 2))
        return total / len(fa)


@functools.lru_cache(maxsize=4)
def perceptual_net(seed=PERCEPTUAL_SEED):
    return PerceptualNet(seed).eval()


def to_nchw(x):
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 3:
        x = x[None]
    return torch.from_numpy(np.ascontiguousarray(x.transpose(0, 3, 1, 2)))


def to_nhwc(t):
    return t.detach().cpu().numpy().transpose(0, 2, 3, 1).astype(np.float64)


def perceptual_distance(a, b, seed=PERCEPTUAL_SEED):
    a, b = _same_shape(a, b)
    with torch.no_grad():
        d = perceptual_net(seed)(to_nchw(a), to_nchw(b))
    return float(d[0])


@dataclass(frozen=True)
class MetricReport:
    mse: float
    psnr: float
    ssim: float
    perceptual: float

    def as_dict(self):
        return asdict(self)


def compare(a, b):
    m = mse(a, b)
    return MetricReport(mse=m, psnr=psnr_from_mse(m), ssim=ssim(a, b), perceptual=perceptual_distance(a, b))


def mean_report(reports):
    """Average per-pair reports field by field (PSNR averaged in dB)."""
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to average")
    return MetricReport(
        mse=float(np.mean([r.mse for r in reports])),
        psnr=float(np.mean([r.psnr for r in reports])),
        ssim=float(np.mean([r.ssim for r in reports])),
        perceptual=float(np.mean([r.perceptual for r in reports])),
    )
