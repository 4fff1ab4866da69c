"""Learned digital-to-physical mapping (the surrogate channel model).

Pairs of rendered dot perturbations and their oracle-channel appearance are
used to fit an image-to-image network with a mixed MSE / perceptual loss.
Three architectures are available: ``skip-unet`` (encoder-decoder with skip
connections), ``plain-autoencoder`` (same depth, no skips) and ``mlp``
(a per-pixel color mapping with no spatial context).
"""
from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import param_checksum, read_checkpoint, save_checkpoint
from .errors import ConfigurationError, DomainError, ShapeError, TrainingError
from .imaging import compare, load_png, mean_report, perceptual_net, save_png
from .optics import oracle_cdtf
from .perturb import DotSpec, render, sample_random
from .utils import read_json, stable_hash, write_json

ARCHITECTURES = ("skip-unet", "plain-autoencoder", "mlp")


@dataclass
class PairDataset:
    digital: np.ndarray  # (N, H, W, 3) float32
    physical: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.digital.shape != self.physical.shape:
            raise ShapeError("digital and physical stacks differ in shape")

    def __len__(self):
        return len(self.digital)

    @property
    def resolution(self):
        return tuple(self.digital.shape[1:3])

    def split(self, train_fraction):
        """Deterministic leading/trailing split into (train, validation)."""
        if not 0 < train_fraction < 1:
            raise DomainError("train_fraction must lie in (0, 1)")
        k = int(round(len(self) * train_fraction))
        k = min(max(k, 1), len(self) - 1)
        return (PairDataset(self.digital[:k], self.physical[:k], self.meta),
                PairDataset(self.digital[k:], self.physical[k:], self.meta))

    def hash(self):
        h = hashlib.sha256(np.ascontiguousarray(self.digital, dtype="<f4").tobytes())
        h.update(np.ascontiguousarray(self.physical, dtype="<f4").tobytes())
        return stable_hash({"meta": self.meta, "data": h.hexdigest()})

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        files = []
        for i, (d, p) in enumerate(zip(self.digital, self.physical)):
            a, b = f"pair_{i:06d}_digital.png", f"pair_{i:06d}_physical.png"
            save_png(directory / a, d)
            save_png(directory / b, p)
            files.append([a, b])
        write_json(directory / "manifest.json", {"meta": self.meta, "pairs": files})

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        manifest = read_json(directory / "manifest.json")
        d = np.stack([load_png(directory / a) for a, _ in manifest["pairs"]]).astype(np.float32)
        p = np.stack([load_png(directory / b) for _, b in manifest["pairs"]]).astype(np.float32)
        return cls(d, p, manifest["meta"])


def gen_pairs(count, dot_spec, optics_cfg, seed, dot_counts=None):
    """Render ``count`` random perturbations and pass each through the oracle channel.

    ``dot_counts`` optionally lists dot counts to cycle through uniformly at
    random (e.g. ``(10, 30, 50)``); otherwise ``dot_spec.n`` is used.
    """
    if count < 1:
        raise DomainError("count must be >= 1")
    rng = np.random.default_rng(seed)
    counts = rng.choice(dot_counts, count) if dot_counts else np.full(count, dot_spec.n)
    dot_seeds = rng.integers(0, 2 ** 62, count)
    noise_seeds = rng.integers(0, 2 ** 62, count)
    h, w = dot_spec.canvas
    digital = np.empty((count, h, w, 3), dtype=np.float32)
    physical = np.empty_like(digital)
    for i in range(count):
        spec = DotSpec(int(counts[i]), dot_spec.radius_fraction, dot_spec.alpha_max, dot_spec.beta, dot_spec.canvas)
        i_d = render(sample_random(spec, int(dot_seeds[i])), dot_spec.canvas)
        digital[i] = i_d
        physical[i] = oracle_cdtf(i_d, optics_cfg, int(noise_seeds[i]))
    meta = {
        "seed": int(seed),
        "dot_counts": [int(c) for c in counts],
        "dot_seeds": [int(s) for s in dot_seeds],
        "noise_seeds": [int(s) for s in noise_seeds],
        "dot_spec": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(dot_spec).items() if k != "n"},
        "optics_hash": optics_cfg.hash(),
    }
    return PairDataset(digital, physical, meta)


# -- architectures ------------------------------------------------------------------

def _block(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU(),
        nn.Conv2d(cout, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU(),
    )


class SkipUNet(nn.Module):
    """Three down/up stages with skip concatenation at every resolution."""

    def __init__(self, widths=(8, 16, 32, 64)):
        super().__init__()
        c1, c2, c3, c4 = widths
        self.enc1, self.enc2, self.enc3, self.mid = _block(3, c1), _block(c1, c2), _block(c2, c3), _block(c3, c4)
        self.up3, self.dec3 = nn.Conv2d(c4, c3, 3, padding=1), _block(2 * c3, c3)
        self.up2, self.dec2 = nn.Conv2d(c3, c2, 3, padding=1), _block(2 * c2, c2)
        self.up1, self.dec1 = nn.Conv2d(c2, c1, 3, padding=1), _block(2 * c1, c1)
        self.out = nn.Conv2d(c1, 3, 1)

    @staticmethod
    def _up(conv, x):
        return F.relu(conv(F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)))

    def forward(self, x):
        e1 = self.enc1(x)
        e2 = self.enc2(F.max_pool2d(e1, 2))
        e3 = self.enc3(F.max_pool2d(e2, 2))
        m = self.mid(F.max_pool2d(e3, 2))
        d3 = self.dec3(torch.cat([self._up(self.up3, m), e3], 1))
        d2 = self.dec2(torch.cat([self._up(self.up2, d3), e2], 1))
        d1 = self.dec1(torch.cat([self._up(self.up1, d2), e1], 1))
        return self.out(d1)


class PlainAutoencoder(nn.Module):
    """Same depth as :class:`SkipUNet` without skip connections."""

    def __init__(self, widths=(8, 17, 34, 66)):
        super().__init__()
        c1, c2, c3, c4 = widths
        self.enc1, self.enc2, self.enc3, self.mid = _block(3, c1), _block(c1, c2), _block(c2, c3), _block(c3, c4)
        self.up3, self.dec3 = nn.Conv2d(c4, c3, 3, padding=1), _block(c3, c3)
        self.up2, self.dec2 = nn.Conv2d(c3, c2, 3, padding=1), _block(c2, c2)
        self.up1, self.dec1 = nn.Conv2d(c2, c1, 3, padding=1), _block(c1, c1)
        self.out = nn.Conv2d(c1, 3, 1)

    def forward(self, x):
        up = SkipUNet._up
        h = self.enc1(x)
        h = self.enc2(F.max_pool2d(h, 2))
        h = self.enc3(F.max_pool2d(h, 2))
        h = self.mid(F.max_pool2d(h, 2))
        h = self.dec3(up(self.up3, h))
        h = self.dec2(up(self.up2, h))
        h = self.dec1(up(self.up1, h))
        return self.out(h)


class PixelMLP(nn.Module):
    """Per-pixel color mapping: a fully connected network applied to every RGB value alone.

    It has no spatial extent, so it cannot represent blur.
    """

    pointwise = True

    def __init__(self, widths=(363, 363)):
        super().__init__()
        layers, cin = [], 3
        for h in widths:
            layers += [nn.Conv2d(cin, h, 1), nn.ReLU()]
            cin = h
        layers.append(nn.Conv2d(cin, 3, 1))
        self.mlp = nn.Sequential(*layers)

    def forward(self, x):
        return self.mlp(x)


DEFAULT_WIDTHS = {
    "skip-unet": (8, 16, 32, 64),
    "plain-autoencoder": (8, 17, 34, 66),
    "mlp": (363, 363),
}


def build_network(arch, widths=None):
    if arch not in ARCHITECTURES:
        raise DomainError(f"unknown architecture {arch!r}; choose from {ARCHITECTURES}")
    widths = tuple(widths or DEFAULT_WIDTHS[arch])
    if arch == "skip-unet":
        return SkipUNet(widths)
    if arch == "plain-autoencoder":
        return PlainAutoencoder(widths)
    return PixelMLP(widths)


def count_parameters(net):
    return sum(p.numel() for p in net.parameters())


# -- model wrapper -------------------------------------------------------------------

@dataclass
class SurrogateModel:
    arch: str
    net: nn.Module
    resolution: tuple
    seed: int = 0
    widths: tuple = ()
    optics_hash: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.net.eval()
        self.net.requires_grad_(False)
        self.resolution = tuple(self.resolution)

    def forward_torch(self, x):
        """NCHW tensor in, clamped NCHW tensor out; differentiable in ``x``."""
        return self.net(x).clamp(0.0, 1.0)

    def predict_batch(self, digital, batch=64):
        digital = np.asarray(digital, dtype=np.float32)
        if tuple(digital.shape[1:3]) != self.resolution:
            raise ShapeError(f"surrogate expects {self.resolution}, got {digital.shape[1:3]}")
        out = []
        with torch.no_grad():
            for s in range(0, len(digital), batch):
                x = torch.from_numpy(digital[s:s + batch]).permute(0, 3, 1, 2)
                out.append(self.forward_torch(x).permute(0, 2, 3, 1).numpy())
        return np.concatenate(out).astype(np.float64)

    def checksum(self):
        return param_checksum(self.net)

    def save(self, path):
        save_checkpoint(path, self.net, {
            "model": "surrogate",
            "architecture": self.arch,
            "widths": list(self.widths),
            "resolution": list(self.resolution),
            "seed": self.seed,
            "optics_hash": self.optics_hash,
            "meta": self.meta,
        })

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"surrogate checkpoint not found: {path}")
        header, state = read_checkpoint(path)
        if header.get("model") != "surrogate":
            raise ConfigurationError(f"{path} is not a surrogate checkpoint")
        net = build_network(header["architecture"], header["widths"])
        net.load_state_dict(state)
        return cls(header["architecture"], net, tuple(header["resolution"]), header["seed"],
                   tuple(header["widths"]), header["optics_hash"], header.get("meta", {}))


def predict(model, i_d):
    """Surrogate appearance of a single HWC perturbation."""
    return model.predict_batch(np.asarray(i_d)[None])[0]


def predict_backward(model, i_d, grad_out):
    """d(sum(grad_out * T(i_d)))/d(i_d) with the surrogate weights frozen."""
    i_d = np.asarray(i_d, dtype=np.float64)
    if tuple(i_d.shape[:2]) != model.resolution:
        raise ShapeError(f"surrogate expects {model.resolution}, got {i_d.shape[:2]}")
    net = copy.deepcopy(model.net).double()
    x = torch.from_numpy(i_d).permute(2, 0, 1)[None].clone().requires_grad_(True)
    y = net(x).clamp(0.0, 1.0)
    g = torch.from_numpy(np.asarray(grad_out, dtype=np.float64)).permute(2, 0, 1)[None]
    (y * g).sum().backward()
    return x.grad[0].permute(1, 2, 0).numpy()


# -- training ------------------------------------------------------------------------

@dataclass(frozen=True)
class SurrogateHyper:
    loss_mix: float = 0.0004
    learning_rate: float = 0.003
    batch: int = 32
    epochs: int = 100
    train_fraction: float = 0.8
    pixel_fraction: float = 1 / 16  # pointwise models only

    def __post_init__(self):
        if not 0 < self.pixel_fraction <= 1:
            raise DomainError("pixel_fraction must lie in (0, 1]")
        if not 0 <= self.loss_mix <= 1:
            raise DomainError("loss_mix must lie in [0, 1]")
        if not 0 < self.train_fraction < 1:
            raise DomainError("train_fraction must lie in (0, 1)")
        if self.batch < 1 or self.epochs < 0 or self.learning_rate <= 0:
            raise DomainError("batch, epochs and learning_rate must be positive")


def _nchw(a):
    return torch.from_numpy(np.ascontiguousarray(np.asarray(a, dtype=np.float32))).permute(0, 3, 1, 2)


def _evaluate(net, pnet, data, a, batch=128):
    tot_loss = tot_mse = 0.0
    with torch.no_grad():
        for s in range(0, len(data), batch):
            x, y = _nchw(data.digital[s:s + batch]), _nchw(data.physical[s:s + batch])
            out = net(x)
            m = F.mse_loss(out, y, reduction="none").mean(dim=(1, 2, 3))
            loss = (1 - a) * m + (a * pnet(out, y) if a > 0 else 0.0)
            tot_loss += float(loss.sum())
            tot_mse += float(m.sum())
    return tot_loss / len(data), tot_mse / len(data)


def train_surrogate(data, arch, hyper=SurrogateHyper(), seed=0, widths=None, log=None):
    """Fit a surrogate; returns ``(model, history)``.

    ``history`` holds one dict per epoch (epoch 0 is the untrained network)
    with train/validation loss and MSE. The returned weights are those of the
    epoch with the lowest validation loss.
    """
    if len(data) < 2:
        raise DomainError("need at least two pairs to split into train and validation")
    train, val = data.split(hyper.train_fraction)
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    net = build_network(arch, widths)
    pnet = perceptual_net()
    a = hyper.loss_mix
    opt = torch.optim.Adam(net.parameters(), lr=hyper.learning_rate)
    # per-epoch cosine decay to zero; the final epochs then settle instead of bouncing
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(hyper.epochs, 1))
    pointwise = getattr(net, "pointwise", False) and hyper.pixel_fraction < 1
    n_pix = data.resolution[0] * data.resolution[1]
    n_sub = max(1, int(round(n_pix * hyper.pixel_fraction)))
    net.eval()
    v_loss, v_mse = _evaluate(net, pnet, val, a)
    t_loss, t_mse = _evaluate(net, pnet, train, a)
    history = [{"epoch": 0, "train_loss": t_loss, "train_mse": t_mse, "val_loss": v_loss, "val_mse": v_mse}]
    best = (v_loss, 0, copy.deepcopy(net.state_dict()))
    for epoch in range(1, hyper.epochs + 1):
        net.train()
        order = rng.permutation(len(train))
        sum_loss = sum_mse = 0.0
        for s in range(0, len(order), hyper.batch):
            idx = np.sort(order[s:s + hyper.batch])
            x, y = _nchw(train.digital[idx]), _nchw(train.physical[idx])
            if pointwise:
                # every pixel is an independent sample for a pointwise model, so a random
                # pixel subset gives an unbiased MSE estimate at a fraction of the cost
                pos = torch.from_numpy(rng.choice(n_pix, n_sub, replace=False))
                x, y = x.flatten(2)[:, :, pos, None], y.flatten(2)[:, :, pos, None]
            out = net(x)
            m = F.mse_loss(out, y, reduction="none").mean(dim=(1, 2, 3))
            loss = (1 - a) * m + (a * pnet(out, y) if a > 0 and not pointwise else 0.0)
            total = loss.mean()
            if not torch.isfinite(total):
                raise TrainingError("surrogate loss is not finite", epoch)
            opt.zero_grad()
            total.backward()
            opt.step()
            sum_loss += float(loss.detach().sum())
            sum_mse += float(m.detach().sum())
        sched.step()
        net.eval()
        v_loss, v_mse = _evaluate(net, pnet, val, a)
        if not math.isfinite(v_loss):
            raise TrainingError("surrogate validation loss is not finite", epoch)
        history.append({"epoch": epoch, "train_loss": sum_loss / len(train), "train_mse": sum_mse / len(train),
                        "val_loss": v_loss, "val_mse": v_mse})
        if log:
            log(history[-1])
        if v_loss < best[0]:
            best = (v_loss, epoch, copy.deepcopy(net.state_dict()))
    net.load_state_dict(best[2])
    model = SurrogateModel(arch, net, data.resolution, seed, tuple(widths or DEFAULT_WIDTHS[arch]),
                           data.meta.get("optics_hash", ""),
                           {"best_epoch": best[1], "best_val_loss": best[0], "parameters": count_parameters(net),
                            "hyper": asdict(hyper)})
    return model, history


def eval_surrogate(model, data):
    """Mean per-pair metrics between the model's prediction and the physical image.

    ``model`` is a SurrogateModel or any callable mapping an (N, H, W, 3)
    stack of digital perturbations to predicted appearances.
    """
    pred = model.predict_batch(data.digital) if isinstance(model, SurrogateModel) else model(data.digital)
    return mean_report(compare(np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64))
                       for p, q in zip(pred, data.physical))
