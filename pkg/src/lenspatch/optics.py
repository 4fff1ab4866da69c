"""Simulated optical channel and scene synthesis.

The oracle camera-display transfer function maps a digital perturbation to
its camera-side appearance. Scenes are built by warping a sign onto a
background, and frames are formed by mixing the scene (scaled by ambient
brightness) with the perturbation (scaled by its visibility at that
illuminance).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import gaussian_filter

from .errors import DomainError, ShapeError
from .imaging import load_png, save_png
from .utils import read_json, stable_hash, write_json

PERSPECTIVE_LIMIT = 30.0
ROTATION_LIMIT = 5.0
SCALE_RANGE = (0.3, 1.0)
LUX_RANGE = (30.0, 60000.0)
# camera distance in sign half-widths, used by the foreshortening homography
VIEW_DISTANCE = 3.0


def _default_color_matrix():
    return ((0.9, 0.05, 0.05), (0.05, 0.9, 0.05), (0.05, 0.05, 0.9))


@dataclass(frozen=True)
class OpticsConfig:
    blur_sigma: float = 2.0
    color_matrix: tuple = field(default_factory=_default_color_matrix)
    channel_gains: tuple = (0.9, 1.0, 0.8)
    beam_split: float = 0.5
    display_gamma: float = 1.2
    noise_sigma: float = 0.01
    e_half: float = 1000.0
    e_nominal: float = 600.0
    nd_transmission: float = 0.1

    def __post_init__(self):
        m = np.asarray(self.color_matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise ShapeError("color_matrix must be 3x3")
        object.__setattr__(self, "color_matrix", tuple(tuple(float(v) for v in row) for row in m))
        object.__setattr__(self, "channel_gains", tuple(float(v) for v in self.channel_gains))
        if len(self.channel_gains) != 3 or min(self.channel_gains) <= 0:
            raise DomainError("channel_gains must be three positive values")
        if self.blur_sigma < 0 or self.noise_sigma < 0:
            raise DomainError("blur_sigma and noise_sigma must be non-negative")
        if self.display_gamma <= 0 or self.e_half <= 0 or self.e_nominal <= 0:
            raise DomainError("display_gamma, e_half and e_nominal must be positive")
        if not 0 < self.beam_split <= 1 or not 0 < self.nd_transmission <= 1:
            raise DomainError("beam_split and nd_transmission must lie in (0, 1]")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["color_matrix"] = tuple(tuple(r) for r in d["color_matrix"])
        d["channel_gains"] = tuple(d["channel_gains"])
        return cls(**d)

    def hash(self):
        return stable_hash(self.to_dict())


@dataclass(frozen=True)
class EnvSample:
    perspective_deg: float = 0.0
    rotation_deg: float = 0.0
    scale: float = 1.0
    background_id: int = 0
    illuminance: float = 600.0
    nd_filter: bool = False

    def __post_init__(self):
        if abs(self.perspective_deg) > PERSPECTIVE_LIMIT:
            raise DomainError(f"perspective {self.perspective_deg} outside [-30, 30] degrees")
        if abs(self.rotation_deg) > ROTATION_LIMIT:
            raise DomainError(f"rotation {self.rotation_deg} outside [-5, 5] degrees")
        if not SCALE_RANGE[0] <= self.scale <= SCALE_RANGE[1]:
            raise DomainError(f"scale {self.scale} outside [0.3, 1.0]")
        if not LUX_RANGE[0] <= self.illuminance <= LUX_RANGE[1]:
            raise DomainError(f"illuminance {self.illuminance} outside [30, 60000] lux")
        if self.background_id < 0:
            raise DomainError("background_id must be non-negative")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class EnvRanges:
    perspective: tuple = (-30.0, 30.0)
    rotation: tuple = (-5.0, 5.0)
    scale: tuple = (0.3, 1.0)
    illuminance: tuple = (30.0, 3000.0)
    n_backgrounds: int = 16
    nd_filter: bool = False

    def __post_init__(self):
        for name in ("perspective", "rotation", "scale", "illuminance"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise DomainError(f"{name} range is empty")
            object.__setattr__(self, name, (float(lo), float(hi)))
        if self.n_backgrounds < 1:
            raise DomainError("need at least one background")

    def to_dict(self):
        return asdict(self)


def sample_envs(ranges, n, rng):
    """Draw ``n`` independent uniform EnvSamples from a numpy Generator."""
    p = rng.uniform(*ranges.perspective, n)
    r = rng.uniform(*ranges.rotation, n)
    s = rng.uniform(*ranges.scale, n)
    b = rng.integers(0, ranges.n_backgrounds, n)
    e = rng.uniform(*ranges.illuminance, n)
    return [
        EnvSample(float(p[i]), float(r[i]), float(s[i]), int(b[i]), float(e[i]), ranges.nd_filter)
        for i in range(n)
    ]


def sample_env(ranges, seed):
    return sample_envs(ranges, 1, np.random.default_rng(seed))[0]


# -- oracle channel ---------------------------------------------------------

def oracle_cdtf(i_d, cfg, seed=0):
    """Camera-side appearance of a displayed perturbation.

    Stages, in order: display gamma, Gaussian blur (zero outside the display),
    color mixing and per-channel gains, beam-splitter attenuation, additive
    sensor noise, clamp to ``[0, 1]``.
    """
    x = np.asarray(i_d, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != 3:
        raise ShapeError(f"perturbation must be (H, W, 3), got {x.shape}")
    x = np.clip(x, 0.0, 1.0) ** cfg.display_gamma
    if cfg.blur_sigma > 0:
        x = gaussian_filter(x, sigma=(cfg.blur_sigma, cfg.blur_sigma, 0), mode="constant")
    x = x @ np.asarray(cfg.color_matrix).T * np.asarray(cfg.channel_gains)
    x = x * cfg.beam_split
    if cfg.noise_sigma > 0:
        x = x + np.random.default_rng(seed).normal(0.0, cfg.noise_sigma, x.shape)
    return np.clip(x, 0.0, 1.0)


# -- illumination -------------------------------------------------------------

def effective_lux(illuminance, nd_filter, cfg):
    return illuminance * (cfg.nd_transmission if nd_filter else 1.0)


def brightness(lux, cfg):
    """Scene gain at the camera's fixed exposure."""
    return np.clip(np.asarray(lux, dtype=np.float64) / cfg.e_nominal, 0.3, 1.0)


def visibility(lux, cfg):
    """Fraction of the perturbation that survives the ambient light."""
    return 1.0 / (1.0 + np.asarray(lux, dtype=np.float64) / cfg.e_half)


def frame_gains(envs, cfg):
    """``(brightness, visibility)`` arrays for a list of EnvSamples."""
    lux = np.array([effective_lux(e.illuminance, e.nd_filter, cfg) for e in envs])
    return brightness(lux, cfg), visibility(lux, cfg)


def compose_frame(scene, i_p, env, cfg, seed=0):
    scene = np.asarray(scene, dtype=np.float64)
    i_p = np.asarray(i_p, dtype=np.float64)
    if scene.shape != i_p.shape:
        raise ShapeError(f"scene {scene.shape} and perturbation {i_p.shape} differ")
    lux = effective_lux(env.illuminance, env.nd_filter, cfg)
    out = brightness(lux, cfg) * scene + visibility(lux, cfg) * i_p
    if cfg.noise_sigma > 0:
        out = out + np.random.default_rng(seed).normal(0.0, cfg.noise_sigma, out.shape)
    return np.clip(out, 0.0, 1.0)


def compose_torch(scenes, i_p, b, v, noise=None):
    """Batched, differentiable frame composition.

    ``scenes`` is NCHW, ``i_p`` CHW or NCHW, ``b``/``v`` are length-N gains.
    """
    b = torch.as_tensor(b, dtype=scenes.dtype).view(-1, 1, 1, 1)
    v = torch.as_tensor(v, dtype=scenes.dtype).view(-1, 1, 1, 1)
    out = b * scenes + v * i_p
    if noise is not None:
        out = out + noise
    return out.clamp(0.0, 1.0)


# -- scene geometry -------------------------------------------------------------

def placement_offset(background_id):
    """Deterministic offset in ``[-1, 1]^2`` (row, col) derived from the background id."""
    return np.random.default_rng([int(background_id), 0x5157]).uniform(-1.0, 1.0, 2)


def sign_layout(env, frame_shape):
    """Center ``(row, col)`` in edge coordinates and side length of the sign in pixels."""
    h, w = frame_shape
    side = env.scale * h
    off = placement_offset(env.background_id)
    cy = h / 2.0 + off[0] * max(h - side, 0.0) / 2.0
    cx = w / 2.0 + off[1] * max(w - side, 0.0) / 2.0
    return cy, cx, side


def _sampling_grid(env, frame_shape):
    h, w = frame_shape
    cy, cx, side = sign_layout(env, frame_shape)
    ys = (np.arange(h) + 0.5 - cy) / (side / 2.0)
    xs = (np.arange(w) + 0.5 - cx) / (side / 2.0)
    dy, dx = np.meshgrid(ys, xs, indexing="ij")
    t = math.radians(env.rotation_deg)
    # undo in-plane rotation
    rx = math.cos(t) * dx + math.sin(t) * dy
    ry = -math.sin(t) * dx + math.cos(t) * dy
    # undo horizontal foreshortening (rotation of the sign plane about its vertical axis)
    phi = math.radians(env.perspective_deg)
    z0 = VIEW_DISTANCE
    u = rx * z0 / (z0 * math.cos(phi) - rx * math.sin(phi))
    v = ry * (z0 + u * math.sin(phi)) / z0
    return np.stack([u, v], axis=-1)


def warp_signs(signs, envs, frame_shape):
    """Warp RGBA signs (N, S, S, 4) into frame coordinates; returns NCHW RGBA tensor."""
    signs = torch.as_tensor(np.asarray(signs, dtype=np.float32)).permute(0, 3, 1, 2)
    grid = torch.as_tensor(np.stack([_sampling_grid(e, frame_shape) for e in envs]), dtype=torch.float32)
    return F.grid_sample(signs, grid, mode="bilinear", padding_mode="zeros", align_corners=False)


def transform_scenes(signs, backgrounds, envs):
    """Batched :func:`transform_scene`; returns ``(scenes NHWC, alpha NHW)`` numpy arrays."""
    backgrounds = np.asarray(backgrounds, dtype=np.float64)
    if backgrounds.ndim != 4 or backgrounds.shape[3] != 3:
        raise ShapeError("backgrounds must be (N, H, W, 3)")
    signs = np.asarray(signs, dtype=np.float64)
    if signs.shape[3] == 3:
        signs = np.concatenate([signs, np.ones(signs.shape[:3] + (1,))], axis=3)
    if signs.shape[1] != signs.shape[2]:
        raise ShapeError("sign images must be square")
    warped = warp_signs(signs, envs, backgrounds.shape[1:3]).numpy().astype(np.float64).transpose(0, 2, 3, 1)
    alpha = np.clip(warped[..., 3:], 0.0, 1.0)
    # sign colors are premultiplied by the sampled coverage
    out = warped[..., :3] + (1.0 - alpha) * backgrounds
    return np.clip(out, 0.0, 1.0), alpha[..., 0]


def transform_scene(sign, background, env, mask=None):
    """Composite a square sign onto ``background`` under the geometry of ``env``.

    ``sign`` is ``(S, S, 3)`` (opaque) or ``(S, S, 4)`` with alpha in the last
    channel; ``mask`` may supply the alpha separately.
    """
    if not isinstance(env, EnvSample):
        raise TypeError("env must be an EnvSample")
    sign = np.asarray(sign, dtype=np.float64)
    if mask is not None:
        sign = np.concatenate([sign[..., :3], np.asarray(mask, dtype=np.float64)[..., None]], axis=2)
    scenes, _ = transform_scenes(premultiply(sign)[None], np.asarray(background)[None], [env])
    return scenes[0]


def premultiply(rgba):
    rgba = np.asarray(rgba, dtype=np.float64)
    if rgba.shape[-1] == 3:
        return np.concatenate([rgba, np.ones(rgba.shape[:-1] + (1,))], axis=-1)
    out = rgba.copy()
    out[..., :3] *= out[..., 3:]
    return out


# -- backgrounds ----------------------------------------------------------------

def make_backgrounds(n, shape=(64, 64), seed=0):
    """Procedural roadside backgrounds: sky gradient, ground, blocky clutter, grain."""
    rng = np.random.default_rng(seed)
    h, w = shape
    out = np.empty((n, h, w, 3))
    rows = np.arange(h)[:, None]
    for i in range(n):
        horizon = rng.uniform(0.35, 0.65) * h
        sky_top, sky_bot = rng.uniform(0.45, 0.95, 3), rng.uniform(0.5, 1.0, 3)
        ground = rng.uniform(0.15, 0.55, 3)
        t = np.clip(rows / max(horizon, 1.0), 0, 1)[..., None]
        img = np.where((rows < horizon)[..., None], (1 - t) * sky_top + t * sky_bot, ground)
        img = np.broadcast_to(img, (h, w, 3)).copy()
        for _ in range(rng.integers(2, 6)):
            bw, bh = rng.integers(w // 10, w // 3), rng.integers(h // 8, h // 2)
            x0 = rng.integers(0, w - bw)
            y1 = int(horizon + rng.uniform(-0.1, 0.1) * h)
            y0 = max(0, y1 - bh)
            img[y0:max(y1, y0 + 1), x0:x0 + bw] = rng.uniform(0.05, 0.7, 3)
        img += rng.normal(0, 0.03, img.shape)
        out[i] = np.clip(img, 0.0, 1.0)
    return out


class BackgroundPool:
    """Indexed set of background images, persisted as PNGs plus ``manifest.json``."""

    def __init__(self, images, ids=None):
        self.images = np.asarray(images, dtype=np.float64)
        self.ids = list(range(len(self.images))) if ids is None else [int(i) for i in ids]
        self._index = {bid: k for k, bid in enumerate(self.ids)}

    def __len__(self):
        return len(self.ids)

    def __getitem__(self, background_id):
        return self.images[self._index[background_id]]

    def take(self, background_ids):
        return self.images[[self._index[b] for b in background_ids]]

    @property
    def shape(self):
        return self.images.shape[1:3]

    @classmethod
    def generate(cls, n, shape=(64, 64), seed=0):
        return cls(make_backgrounds(n, shape, seed))

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        files = []
        for bid, img in zip(self.ids, self.images):
            name = f"bg_{bid:04d}.png"
            save_png(directory / name, img)
            files.append(name)
        write_json(directory / "manifest.json", {"ids": self.ids, "files": files})

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        manifest = read_json(directory / "manifest.json")
        images = [load_png(directory / f) for f in manifest["files"]]
        return cls(np.stack(images), manifest["ids"])


def with_illuminance(env, lux, nd_filter=None):
    return replace(env, illuminance=float(lux), nd_filter=env.nd_filter if nd_filter is None else nd_filter)
