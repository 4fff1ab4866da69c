"""Synthetic traffic signs and the small victim models attacked by the pipeline."""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import read_checkpoint, save_checkpoint
from .defenses import DefenseConfig, randomize_batch
from .errors import ConfigurationError, QualityError, ShapeError, UsageError
from .imaging import load_png, quantize8, save_png
from .optics import EnvRanges, OpticsConfig, frame_gains, sample_envs, transform_scenes
from .utils import read_json, write_json

NUM_CLASSES = 17
GRID = 8

RED = (0.85, 0.10, 0.12)
WHITE = (0.95, 0.95, 0.95)
BLACK = (0.08, 0.08, 0.08)
YELLOW = (0.95, 0.85, 0.10)
BLUE = (0.10, 0.30, 0.80)
GREEN = (0.10, 0.55, 0.25)
ORANGE = (0.95, 0.50, 0.08)


@dataclass(frozen=True)
class SignClass:
    id: int
    name: str
    shape: str
    base_color: tuple
    border_color: tuple
    glyph: str
    glyph_color: tuple


SIGN_CLASSES = (
    SignClass(0, "stop", "octagon", RED, WHITE, "hbar", WHITE),
    SignClass(1, "yield", "triangle-down", WHITE, RED, "none", WHITE),
    SignClass(2, "speed-limit", "circle", WHITE, RED, "vbar", BLACK),
    SignClass(3, "one-way", "rectangle", WHITE, BLACK, "hbar", BLACK),
    SignClass(4, "warning", "diamond", YELLOW, BLACK, "none", BLACK),
    SignClass(5, "crossroad", "diamond", YELLOW, BLACK, "cross", BLACK),
    SignClass(6, "signal-ahead", "triangle-up", YELLOW, BLACK, "dot", BLACK),
    SignClass(7, "keep-right", "circle", BLUE, WHITE, "diag", WHITE),
    SignClass(8, "guide", "rectangle", GREEN, WHITE, "chevron", WHITE),
    SignClass(9, "no-entry", "circle", RED, WHITE, "cross", WHITE),
    SignClass(10, "parking", "rectangle", BLUE, WHITE, "vbar", WHITE),
    SignClass(11, "work-zone", "diamond", ORANGE, BLACK, "hbar", BLACK),
    SignClass(12, "pedestrian", "triangle-up", WHITE, RED, "vbar", BLACK),
    SignClass(13, "all-way", "octagon", BLUE, WHITE, "dot", WHITE),
    SignClass(14, "roundabout", "circle", ORANGE, BLACK, "ring", BLACK),
    SignClass(15, "detour", "rectangle", ORANGE, BLACK, "diag", BLACK),
    SignClass(16, "merge", "triangle-down", YELLOW, BLACK, "dot", BLACK),
)


def _polygon_mask(x, y, verts):
    # convex polygon, vertices counter-clockwise in (x, y) with y pointing down
    inside = np.ones_like(x, dtype=bool)
    n = len(verts)
    for i in range(n):
        (x0, y0), (x1, y1) = verts[i], verts[(i + 1) % n]
        inside &= (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0) <= 0
    return inside


def _shape_mask(shape, x, y, s=1.0):
    if shape == "circle":
        return x ** 2 + y ** 2 <= s ** 2
    if shape == "diamond":
        return np.abs(x) + np.abs(y) <= s
    if shape == "rectangle":
        return (np.abs(x) <= 0.75 * s) & (np.abs(y) <= 0.95 * s)
    if shape == "octagon":
        a = [math.radians(22.5 + 45 * k) for k in range(8)]
        verts = [(s * math.cos(t), -s * math.sin(t)) for t in a]
        return _polygon_mask(x, y, verts)
    if shape == "triangle-up":
        return _polygon_mask(x, y, [(0, -s), (-s, 0.8 * s), (s, 0.8 * s)])
    if shape == "triangle-down":
        return _polygon_mask(x, y, [(-s, -0.8 * s), (0, s), (s, -0.8 * s)])
    raise ValueError(f"unknown shape {shape!r}")


def _glyph_mask(glyph, x, y):
    if glyph == "none":
        return np.zeros_like(x, dtype=bool)
    if glyph == "hbar":
        return (np.abs(x) <= 0.5) & (np.abs(y) <= 0.13)
    if glyph == "vbar":
        return (np.abs(x) <= 0.13) & (np.abs(y) <= 0.45)
    if glyph == "cross":
        return ((np.abs(x) <= 0.45) & (np.abs(y) <= 0.11)) | ((np.abs(x) <= 0.11) & (np.abs(y) <= 0.45))
    if glyph == "dot":
        return x ** 2 + (y - 0.1) ** 2 <= 0.2 ** 2
    if glyph == "diag":
        return (np.abs(x - y) <= 0.18) & (np.abs(x + y) <= 0.9)
    if glyph == "ring":
        r = np.sqrt(x ** 2 + y ** 2)
        return (r <= 0.45) & (r >= 0.27)
    if glyph == "chevron":
        return (np.abs(y - 0.35 + np.abs(x)) <= 0.13) & (np.abs(x) <= 0.5)
    raise ValueError(f"unknown glyph {glyph!r}")


def render_sign(cls, size=64, supersample=4):
    """RGBA image (straight alpha) of a sign class."""
    n = size * supersample
    c = (np.arange(n) + 0.5) / n * 2 - 1
    y, x = np.meshgrid(c, c, indexing="ij")
    outer = _shape_mask(cls.shape, x, y, 0.98)
    inner = _shape_mask(cls.shape, x, y, 0.82)
    glyph = _glyph_mask(cls.glyph, x, y) & inner
    rgb = np.zeros((n, n, 3))
    rgb[outer] = cls.border_color
    rgb[inner] = cls.base_color
    rgb[glyph] = cls.glyph_color
    rgba = np.concatenate([rgb * outer[..., None], outer[..., None].astype(np.float64)], axis=2)
    rgba = rgba.reshape(size, supersample, size, supersample, 4).mean(axis=(1, 3))
    # stored straight (un-premultiplied)
    a = rgba[..., 3:]
    rgba[..., :3] = np.where(a > 0, rgba[..., :3] / np.maximum(a, 1e-12), 0.0)
    return rgba


class SignWorld:
    """Everything needed to synthesize camera frames of signs.

    Holds the sign templates, the background pool, the optical configuration
    and the environment ranges. ``frames`` produces 8-bit-quantized camera
    frames with an optional perturbation appearance ``i_p`` mixed in.
    """

    def __init__(self, backgrounds, optics=None, ranges=None, sign_size=64):
        self.backgrounds = backgrounds
        self.optics = optics or OpticsConfig()
        self.ranges = ranges or EnvRanges(n_backgrounds=len(backgrounds))
        if self.ranges.n_backgrounds > len(backgrounds):
            raise ConfigurationError("env ranges reference more backgrounds than the pool holds")
        self.frame_shape = tuple(backgrounds.shape)
        templates = np.stack([render_sign(c, sign_size) for c in SIGN_CLASSES])
        templates[..., :3] *= templates[..., 3:]
        self.templates = templates

    def sample_envs(self, n, rng, **overrides):
        envs = sample_envs(self.ranges, n, rng)
        if overrides:
            from dataclasses import replace
            envs = [replace(e, **overrides) for e in envs]
        return envs

    def scenes(self, class_ids, envs):
        """Unlit scenes ``(N, H, W, 3)`` and sign coverage ``(N, H, W)``; class -1 means no sign."""
        class_ids = np.asarray(class_ids)
        signs = self.templates[np.clip(class_ids, 0, None)].copy()
        signs[class_ids < 0] = 0.0
        bgs = self.backgrounds.take([e.background_id for e in envs])
        return transform_scenes(signs, bgs, envs)

    def frames(self, class_ids, envs, i_p=None, seed=0, scenes=None):
        if scenes is None:
            scenes, _ = self.scenes(class_ids, envs)
        b, v = frame_gains(envs, self.optics)
        out = b[:, None, None, None] * scenes
        if i_p is not None:
            out = out + v[:, None, None, None] * np.asarray(i_p)
        if self.optics.noise_sigma > 0:
            out = out + np.random.default_rng(seed).normal(0.0, self.optics.noise_sigma, out.shape)
        return quantize8(out)


def cell_occupancy(alpha, grid=GRID, min_cover=0.5):
    """Per-cell ground truth from sign coverage maps ``(N, H, W)``."""
    n, h, w = alpha.shape
    cover = alpha.reshape(n, grid, h // grid, grid, w // grid).mean(axis=(2, 4))
    return cover >= min_cover


@dataclass
class SignDataset:
    frames: np.ndarray  # uint8 (N, H, W, 3)
    labels: np.ndarray  # -1 marks an empty scene
    occupancy: np.ndarray  # bool (N, GRID, GRID)
    envs: list = field(default_factory=list)
    seed: int = 0

    def __len__(self):
        return len(self.labels)

    def float_frames(self, idx=None):
        f = self.frames if idx is None else self.frames[idx]
        return f.astype(np.float32) / 255.0

    def subset(self, idx):
        return SignDataset(self.frames[idx], self.labels[idx], self.occupancy[idx],
                           [self.envs[i] for i in idx] if self.envs else [], self.seed)

    def save(self, directory):
        directory = Path(directory)
        entries = []
        for i, (f, y) in enumerate(zip(self.frames, self.labels)):
            sub = directory / (f"class_{int(y):02d}" if y >= 0 else "empty")
            sub.mkdir(parents=True, exist_ok=True)
            name = f"{sub.name}/frame_{i:06d}.png"
            save_png(directory / name, f / 255.0)
            entries.append({
                "file": name,
                "label": int(y),
                "occupancy": self.occupancy[i].astype(int).tolist(),
                "env": self.envs[i].to_dict() if self.envs else None,
            })
        write_json(directory / "labels.json", {"seed": self.seed, "frames": entries})

    @classmethod
    def load(cls, directory):
        from .optics import EnvSample

        directory = Path(directory)
        meta = read_json(directory / "labels.json")
        entries = meta["frames"]
        frames = np.stack([np.round(load_png(directory / e["file"]) * 255).astype(np.uint8) for e in entries])
        return cls(
            frames,
            np.array([e["label"] for e in entries]),
            np.array([e["occupancy"] for e in entries], dtype=bool),
            [EnvSample(**e["env"]) for e in entries if e["env"] is not None],
            meta["seed"],
        )


def gen_sign_dataset(world, per_class, seed, empty_fraction=0.0, chunk=512):
    """``per_class`` frames of every class (plus optional empty scenes), shuffled."""
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(NUM_CLASSES), per_class)
    n_empty = int(round(empty_fraction * len(labels)))
    labels = np.concatenate([labels, -np.ones(n_empty, dtype=int)])
    labels = labels[rng.permutation(len(labels))]
    envs = world.sample_envs(len(labels), rng)
    frames, occ = [], []
    for s in range(0, len(labels), chunk):
        sl = slice(s, s + chunk)
        scenes, alpha = world.scenes(labels[sl], envs[sl])
        frames.append(world.frames(labels[sl], envs[sl], seed=int(rng.integers(2 ** 62)), scenes=scenes))
        occ.append(cell_occupancy(alpha) & (labels[sl] >= 0)[:, None, None])
    frames = np.round(np.concatenate(frames) * 255).astype(np.uint8)
    return SignDataset(frames, labels, np.concatenate(occ), envs, seed)


# -- networks ---------------------------------------------------------------------

class Backbone(nn.Module):
    def __init__(self, widths=(16, 32, 64)):
        super().__init__()
        self.widths = tuple(widths)
        a, b, c = widths
        self.body = nn.Sequential(
            nn.Conv2d(3, a, 3, padding=1), nn.ReLU(),
            nn.Conv2d(a, a, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(a, b, 3, padding=1), nn.ReLU(),
            nn.Conv2d(b, b, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(b, c, 3, padding=1), nn.ReLU(),
            nn.Conv2d(c, c, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
        )
        self.out_channels = c

    def forward(self, x):
        return self.body(x)


class SignClassifier(nn.Module):
    def __init__(self, num_classes=NUM_CLASSES, widths=(16, 32, 64)):
        super().__init__()
        self.backbone = Backbone(widths)
        c = self.backbone.out_channels
        self.head = nn.Sequential(nn.Linear(2 * c, 64), nn.ReLU(), nn.Linear(64, num_classes))

    def forward(self, x):
        h = self.backbone(x)
        h = torch.cat([h.mean(dim=(2, 3)), h.amax(dim=(2, 3))], dim=1)
        return self.head(h)


class GridDetector(nn.Module):
    """Single-stage detector: objectness and class logits on a GRID x GRID lattice."""

    def __init__(self, num_classes=NUM_CLASSES, widths=(16, 32, 64)):
        super().__init__()
        self.backbone = Backbone(widths)
        c = self.backbone.out_channels
        self.neck = nn.Sequential(nn.Conv2d(c, c, 3, padding=1), nn.ReLU())
        self.head = nn.Conv2d(c, 1 + num_classes, 1)

    def forward(self, x):
        return self.head(self.neck(self.backbone(x)))


# -- victim wrapper -----------------------------------------------------------------

@dataclass
class VictimModel:
    kind: str
    net: nn.Module
    num_classes: int = NUM_CLASSES
    input_size: int = 64
    input_sizes: tuple = (64,)
    threshold: float = 0.6
    seed: int = 0
    accuracy: float = float("nan")
    meta: dict = field(default_factory=dict)
    holdout_idx: np.ndarray = None

    def __post_init__(self):
        self.net.eval()
        self.net.requires_grad_(False)

    def _tensor(self, frames):
        x = np.asarray(frames, dtype=np.float32)
        if x.ndim == 3:
            x = x[None]
        if x.shape[1] != x.shape[2] or x.shape[1] not in self.input_sizes:
            raise ShapeError(f"{self.kind} accepts {self.input_sizes}px square frames, got {x.shape[1:3]}")
        return torch.from_numpy(x).permute(0, 3, 1, 2)

    def _batched(self, frames, fn, batch=512):
        frames = np.asarray(frames)
        if frames.ndim == 3:
            frames = frames[None]
        with torch.no_grad():
            return np.concatenate([fn(self._tensor(frames[i:i + batch])) for i in range(0, len(frames), batch)])

    def probabilities(self, frames):
        self._require("classifier")
        return self._batched(frames, lambda x: F.softmax(self.net(x).double(), dim=1).numpy())

    def predict(self, frames):
        return self.probabilities(frames).argmax(axis=1)

    def grid_outputs(self, frames):
        """``(objectness (N,S,S), class probabilities (N,S,S,K))``."""
        self._require("detector")
        raw = self._batched(frames, lambda x: self.net(x).double().numpy())
        obj = 1.0 / (1.0 + np.exp(-raw[:, 0]))
        logits = raw[:, 1:].transpose(0, 2, 3, 1)
        logits = logits - logits.max(axis=-1, keepdims=True)
        p = np.exp(logits)
        return obj, p / p.sum(axis=-1, keepdims=True)

    def detected(self, frames, labels, threshold=None):
        thr = self.threshold if threshold is None else threshold
        obj, p = self.grid_outputs(frames)
        hit = (obj > thr) & (p.argmax(axis=-1) == np.asarray(labels)[:, None, None])
        return hit.any(axis=(1, 2))

    def detection_count(self, frame, threshold=None):
        thr = self.threshold if threshold is None else threshold
        obj, _ = self.grid_outputs(frame)
        return int((obj[0] > thr).sum())

    def success(self, frames, labels):
        """Per-frame attack success: misclassification or missed detection."""
        labels = np.asarray(labels)
        if self.kind == "classifier":
            return self.predict(frames) != labels
        return ~self.detected(frames, labels)

    def _require(self, kind):
        if self.kind != kind:
            raise UsageError(f"operation needs a {kind}, model is a {self.kind}")

    def save(self, path):
        save_checkpoint(path, self.net, {
            "model": "victim",
            "kind": self.kind,
            "num_classes": self.num_classes,
            "input_size": self.input_size,
            "input_sizes": list(self.input_sizes),
            "threshold": self.threshold,
            "seed": self.seed,
            "accuracy": self.accuracy,
            "widths": list(self.net.backbone.widths),
            "meta": self.meta,
        })

    @classmethod
    def load(cls, path):
        header, state = read_checkpoint(path)
        if header.get("model") != "victim":
            raise ConfigurationError(f"{path} is not a victim checkpoint")
        net_cls = SignClassifier if header["kind"] == "classifier" else GridDetector
        net = net_cls(header["num_classes"], tuple(header["widths"]))
        net.load_state_dict(state)
        return cls(header["kind"], net, header["num_classes"], header["input_size"], tuple(header["input_sizes"]),
                   header["threshold"], header["seed"], header["accuracy"], header.get("meta", {}))


def class_probabilities(model, frame):
    return model.probabilities(frame)[0]


def class_probabilities_backward(model, frame, grad_probs):
    """d(sum(grad_probs * p(frame)))/d(frame) for a single HWC frame."""
    model._require("classifier")
    x = model._tensor(frame).double().requires_grad_(True)
    p = F.softmax(_double(model.net)(x), dim=1)[0]
    (p * torch.as_tensor(np.asarray(grad_probs, dtype=np.float64))).sum().backward()
    return x.grad[0].permute(1, 2, 0).numpy()


def box_scores(model, frame, class_id, threshold=None):
    """Class-``class_id`` scores of every cell whose objectness exceeds the threshold."""
    obj, p = model.grid_outputs(frame)
    thr = model.threshold if threshold is None else threshold
    return p[0][obj[0] > thr][:, class_id].tolist()


def _double(net):
    return copy.deepcopy(net).double()


def box_score_torch(model, x, class_id, net=None):
    """Per-frame mean class score over above-threshold cells (0 when there are none).

    ``x`` is an NCHW tensor; differentiable through the class scores, with the
    cell selection treated as fixed.
    """
    raw = (net or model.net)(x)
    obj = torch.sigmoid(raw[:, 0])
    p = F.softmax(raw[:, 1:], dim=1)[:, class_id]
    sel = (obj > model.threshold).to(p.dtype).detach()
    count = sel.sum(dim=(1, 2))
    return torch.where(count > 0, (p * sel).sum(dim=(1, 2)) / count.clamp(min=1), torch.zeros_like(count))


def mean_box_score_backward(model, frame, class_id):
    """Gradient of the mean above-threshold class score with respect to one HWC frame."""
    model._require("detector")
    x = model._tensor(frame).double().requires_grad_(True)
    box_score_torch(model, x, class_id, net=_double(model.net)).sum().backward()
    return x.grad[0].permute(1, 2, 0).numpy()


# -- training ---------------------------------------------------------------------

@dataclass(frozen=True)
class VictimTraining:
    epochs: int = 12
    batch: int = 64
    lr: float = 2e-3
    holdout: float = 0.2
    squeeze_prob: float = 0.2
    randomize_prob: float = 0.15
    randomize: DefenseConfig = DefenseConfig(kind="randomize")
    min_accuracy: float = 0.90
    widths: tuple = (16, 32, 64)
    # uniform-noise frames appended per batch (fraction of batch), trained towards uniform output
    noise_fraction: float = 0.1
    noise_weight: float = 0.5


def _augment(x, cfg, rng):
    u = rng.uniform()
    if u < cfg.squeeze_prob:
        bits = rng.integers(1, 8, len(x))
        levels = torch.as_tensor(2.0 ** bits - 1, dtype=x.dtype).view(-1, 1, 1, 1)
        return torch.round(x * levels) / levels
    if u < cfg.squeeze_prob + cfg.randomize_prob:
        return randomize_batch(x, cfg.randomize, rng)
    return x


def _split(n, holdout, rng):
    perm = rng.permutation(n)
    k = int(round(n * holdout))
    return perm[k:], perm[:k]


def train_classifier(dataset, seed, cfg=VictimTraining()):
    """Train the sign classifier; returns a VictimModel with held-out accuracy set."""
    keep = np.flatnonzero(dataset.labels >= 0)
    if len(np.unique(dataset.labels[keep])) < NUM_CLASSES:
        raise ConfigurationError("classifier dataset must cover all sign classes")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    train_idx, test_idx = _split(len(keep), cfg.holdout, rng)
    train_idx, test_idx = keep[train_idx], keep[test_idx]
    net = SignClassifier(widths=cfg.widths)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, cfg.epochs * math.ceil(len(train_idx) / cfg.batch))
    labels = torch.as_tensor(dataset.labels)
    for epoch in range(cfg.epochs):
        net.train()
        order = train_idx[rng.permutation(len(train_idx))]
        for s in range(0, len(order), cfg.batch):
            idx = order[s:s + cfg.batch]
            x = torch.from_numpy(dataset.float_frames(idx)).permute(0, 3, 1, 2)
            x = _augment(x, cfg, rng)
            k = math.ceil(cfg.noise_fraction * len(idx))
            if k:
                x = torch.cat([x, torch.from_numpy(rng.uniform(size=(k,) + tuple(x.shape[1:])).astype(np.float32))])
            logits = net(x)
            loss = F.cross_entropy(logits[:len(idx)], labels[idx])
            if k:
                loss = loss - cfg.noise_weight * F.log_softmax(logits[len(idx):], dim=1).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
    sizes = tuple(sorted({64, cfg.randomize.pad_target})) if cfg.randomize_prob > 0 else (64,)
    model = VictimModel("classifier", net, input_size=dataset.frames.shape[1], input_sizes=sizes, seed=seed,
                        meta={"train_frames": int(len(train_idx)), "test_frames": int(len(test_idx))})
    model.holdout_idx = test_idx
    model.accuracy = float(np.mean(model.predict(dataset.float_frames(test_idx)) == dataset.labels[test_idx]))
    if model.accuracy < cfg.min_accuracy:
        raise QualityError(f"classifier held-out accuracy {model.accuracy:.3f} < {cfg.min_accuracy}")
    return model


def train_detector(dataset, seed, cfg=VictimTraining(squeeze_prob=0.0, randomize_prob=0.0), threshold=0.6):
    """Train the grid detector on frames carrying cell occupancy ground truth."""
    if not dataset.occupancy.any():
        raise ConfigurationError("detector dataset carries no occupied cells")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    train_idx, test_idx = _split(len(dataset), cfg.holdout, rng)
    net = GridDetector(widths=cfg.widths)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, cfg.epochs * math.ceil(len(train_idx) / cfg.batch))
    occ = torch.as_tensor(dataset.occupancy, dtype=torch.float32)
    cls = torch.as_tensor(np.clip(dataset.labels, 0, None))
    for epoch in range(cfg.epochs):
        net.train()
        order = train_idx[rng.permutation(len(train_idx))]
        for s in range(0, len(order), cfg.batch):
            idx = order[s:s + cfg.batch]
            x = torch.from_numpy(dataset.float_frames(idx)).permute(0, 3, 1, 2)
            out = net(x)
            obj_loss = F.binary_cross_entropy_with_logits(out[:, 0], occ[idx])
            target = cls[idx].view(-1, 1, 1).expand(-1, GRID, GRID)
            ce = F.cross_entropy(out[:, 1:], target, reduction="none")
            pos = occ[idx]
            cls_loss = (ce * pos).sum() / pos.sum().clamp(min=1.0)
            loss = obj_loss + cls_loss
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
    model = VictimModel("detector", net, input_size=dataset.frames.shape[1], threshold=threshold, seed=seed,
                        meta={"train_frames": int(len(train_idx)), "test_frames": int(len(test_idx))})
    test = test_idx[dataset.labels[test_idx] >= 0]
    model.accuracy = float(np.mean(model.detected(dataset.float_frames(test), dataset.labels[test])))
    if model.accuracy < cfg.min_accuracy:
        raise QualityError(f"detector held-out detection rate {model.accuracy:.3f} < {cfg.min_accuracy}")
    model.holdout_idx = test_idx
    return model
