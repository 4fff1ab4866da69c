"""Dot-based digital perturbations.

A perturbation is a superposition of soft colored dots. Each dot ``k`` adds
``alpha_max * exp(-beta * d_k) * rgb_k`` to every pixel, where ``d_k`` is the
squared distance to the dot center divided by ``r_k ** 2``. The summed image is
clamped to ``[0, 1]`` per channel.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import DomainError, ShapeError


@dataclass(frozen=True)
class DotSpec:
    n: int = 100
    radius_fraction: float = 0.1
    alpha_max: float = 1.0
    beta: float = 1.0
    canvas: tuple = (64, 64)

    def __post_init__(self):
        if self.n < 0:
            raise DomainError("dot count must be >= 0")
        if not 0.0 < self.radius_fraction <= 0.5:
            raise DomainError("radius_fraction must lie in (0, 0.5]")
        if not 0.0 < self.alpha_max <= 1.0 or self.beta <= 0:
            raise DomainError("alpha_max must lie in (0, 1] and beta must be positive")

    @property
    def radius(self):
        return self.radius_fraction * self.canvas[0]


@dataclass(frozen=True, eq=False)
class DotParams:
    """Free and fixed parameters of a dot perturbation.

    ``centers`` is ``(n, 2)`` in continuous ``(row, col)`` pixel coordinates,
    ``radii`` is ``(n,)`` and ``colors`` is ``(n, 3)``.
    """

    centers: np.ndarray
    radii: np.ndarray
    colors: np.ndarray
    alpha_max: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=np.float64).reshape(-1, 2)
        r = np.asarray(self.radii, dtype=np.float64).reshape(-1)
        g = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if not len(c) == len(r) == len(g):
            raise ShapeError("centers, radii and colors must have the same length")
        for name, arr in (("centers", c), ("radii", r), ("colors", g)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n(self):
        return len(self.radii)

    @classmethod
    def empty(cls, alpha_max=1.0, beta=1.0):
        return cls(np.zeros((0, 2)), np.zeros(0), np.zeros((0, 3)), alpha_max, beta)

    def replace(self, centers=None, colors=None):
        return DotParams(
            self.centers if centers is None else centers,
            self.radii,
            self.colors if colors is None else colors,
            self.alpha_max,
            self.beta,
        )

    def append(self, center, radius, color):
        return DotParams(
            np.vstack([self.centers, np.reshape(center, (1, 2))]),
            np.append(self.radii, radius),
            np.vstack([self.colors, np.reshape(color, (1, 3))]),
            self.alpha_max,
            self.beta,
        )

    def validate(self, canvas):
        h, w = canvas
        if self.n and (np.any(self.centers[:, 0] < 0) or np.any(self.centers[:, 0] >= h)
                       or np.any(self.centers[:, 1] < 0) or np.any(self.centers[:, 1] >= w)):
            raise DomainError(f"dot center outside the {h}x{w} canvas")
        if np.any(self.radii <= 0):
            raise DomainError("dot radii must be positive")
        if np.any(self.colors < 0) or np.any(self.colors > 1):
            raise DomainError("dot colors must lie in [0, 1]")
        if not 0 < self.alpha_max <= 1 or self.beta <= 0:
            raise DomainError("alpha_max must lie in (0, 1] and beta must be positive")
        return self

    def project(self, canvas):
        """Clip centers onto the canvas and colors into the unit cube."""
        h, w = canvas
        c = self.centers.copy()
        c[:, 0] = np.clip(c[:, 0], 0.0, h - 1.0)
        c[:, 1] = np.clip(c[:, 1], 0.0, w - 1.0)
        return self.replace(centers=c, colors=np.clip(self.colors, 0.0, 1.0))

    def to_dict(self):
        return {
            "n": self.n,
            "alpha_max": float(self.alpha_max),
            "beta": float(self.beta),
            "dots": [
                {"row": float(c[0]), "col": float(c[1]), "r": float(r), "rgb": [float(v) for v in g]}
                for c, r, g in zip(self.centers, self.radii, self.colors)
            ],
        }

    @classmethod
    def from_dict(cls, d):
        dots = d["dots"]
        if len(dots) != d["n"]:
            raise ShapeError(f"expected {d['n']} dots, found {len(dots)}")
        return cls(
            np.array([[k["row"], k["col"]] for k in dots], dtype=np.float64).reshape(-1, 2),
            np.array([k["r"] for k in dots], dtype=np.float64),
            np.array([k["rgb"] for k in dots], dtype=np.float64).reshape(-1, 3),
            d["alpha_max"],
            d["beta"],
        )

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, s):
        return cls.from_dict(json.loads(s))

    def __eq__(self, other):
        if not isinstance(other, DotParams):
            return NotImplemented
        return (
            np.array_equal(self.centers, other.centers)
            and np.array_equal(self.radii, other.radii)
            and np.array_equal(self.colors, other.colors)
            and self.alpha_max == other.alpha_max
            and self.beta == other.beta
        )


def _weights(params, canvas):
    # (n, H, W) alpha weights and the pixel-center offsets they were built from
    h, w = canvas
    rows = np.arange(h, dtype=np.float64)[None, :, None] - params.centers[:, 0, None, None]
    cols = np.arange(w, dtype=np.float64)[None, None, :] - params.centers[:, 1, None, None]
    r2 = (params.radii ** 2)[:, None, None]
    d = (rows ** 2 + cols ** 2) / r2
    return params.alpha_max * np.exp(-params.beta * d), rows, cols, r2


def render_raw(params, canvas):
    """Unclamped dot sum, shape ``(H, W, 3)``."""
    params.validate(canvas)
    if params.n == 0:
        return np.zeros((*canvas, 3))
    wk, *_ = _weights(params, canvas)
    return np.einsum("khw,kc->hwc", wk, params.colors)


def render(params, canvas):
    return np.minimum(render_raw(params, canvas), 1.0)


def render_grad(params, canvas, upstream):
    """Backpropagate ``upstream`` (dL/dI_d) to dot centers and colors.

    Returns ``(grad_centers, grad_colors)`` of shapes ``(n, 2)`` and ``(n, 3)``.
    Pixels where the clamp is active contribute nothing.
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (*canvas, 3):
        raise ShapeError(f"upstream gradient must have shape {(*canvas, 3)}, got {upstream.shape}")
    params.validate(canvas)
    if params.n == 0:
        return np.zeros((0, 2)), np.zeros((0, 3))
    wk, rows, cols, r2 = _weights(params, canvas)
    raw = np.einsum("khw,kc->hwc", wk, params.colors)
    g = np.where(raw > 1.0, 0.0, upstream)
    grad_colors = np.einsum("hwc,khw->kc", g, wk)
    # dI/d(center) = w_k * rgb_k * 2 beta (x - x_k) / r_k^2
    s = np.einsum("hwc,kc->khw", g, params.colors) * wk * (2.0 * params.beta / r2)
    grad_centers = np.stack([(s * rows).sum(axis=(1, 2)), (s * cols).sum(axis=(1, 2))], axis=1)
    return grad_centers, grad_colors


def sample_random(spec, seed):
    rng = np.random.default_rng(seed)
    h, w = spec.canvas
    centers = np.column_stack([rng.uniform(0, h - 1, spec.n), rng.uniform(0, w - 1, spec.n)])
    colors = rng.uniform(0.0, 1.0, (spec.n, 3))
    return DotParams(centers, np.full(spec.n, spec.radius), colors, spec.alpha_max, spec.beta)


class _RenderFn(torch.autograd.Function):
    @staticmethod
    def forward(ctx, centers, colors, radii, alpha_max, beta, canvas):
        p = DotParams(centers.detach().double().numpy(), radii, colors.detach().double().numpy(), alpha_max, beta)
        ctx.params, ctx.canvas = p, canvas
        return torch.from_numpy(render(p, canvas)).to(centers.dtype)

    @staticmethod
    def backward(ctx, grad_out):
        gc, gg = render_grad(ctx.params, ctx.canvas, grad_out.detach().double().numpy())
        dtype = grad_out.dtype
        return torch.from_numpy(gc).to(dtype), torch.from_numpy(gg).to(dtype), None, None, None, None


def render_torch(centers, colors, params, canvas):
    """Differentiable render (HWC tensor) with respect to ``centers`` and ``colors``.

    Fixed quantities (radii, alpha_max, beta) are taken from ``params``; the
    backward pass uses :func:`render_grad`.
    """
    return _RenderFn.apply(centers, colors, params.radii, params.alpha_max, params.beta, tuple(canvas))
