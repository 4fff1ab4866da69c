"""Crafting universal dot perturbations against a victim model.

A perturbation is built in two phases. ``greedy_init`` places dots one at a
time from a coarse grid of candidate centers and a small color palette.
``refine`` then takes sign-gradient steps on every dot's center and color,
backpropagating through victim, frame composition, surrogate channel and
renderer. ``craft_uap`` ties both together and implements the ablation modes.
"""
from __future__ import annotations

import copy
import itertools
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigurationError, DomainError, OptimizationError
from .optics import frame_gains
from .perturb import DotParams, DotSpec, render, render_raw, render_torch, sample_random
from .utils import derive_seed, stable_hash
from .victim import NUM_CLASSES

MODES = ("full", "no_tnet", "random", "static_env")
OBJECTIVES = ("classifier", "detector")
ALL = "ALL"


def _default_palette():
    return tuple(itertools.product((0.0, 0.5, 1.0), repeat=3))


@dataclass(frozen=True)
class AttackConfig:
    n_dots: int = 100
    radius_fraction: float = 0.1
    alpha_max: float = 1.0
    beta: float = 1.0
    lr_centers: float = 1.0
    lr_colors: float = 0.1
    lr_decay_every: int = 200
    lr_decay_factor: float = 10.0
    max_epochs: int = 500
    batch: int = 16
    block_grid: tuple = (10, 10)
    palette: tuple = field(default_factory=_default_palette)
    convergence_tol: float = 1e-4
    convergence_window: int = 20
    mode: str = "full"
    objective_kind: str = "classifier"
    ce_epsilon: float = 1e-6
    greedy_batch: int = 16
    holdout_batch: int = 32
    n_random: int = 20
    static_lux: float = 120.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise DomainError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if self.objective_kind not in OBJECTIVES:
            raise DomainError(f"unknown objective {self.objective_kind!r}")
        if self.lr_centers < 0 or self.lr_colors < 0 or self.ce_epsilon <= 0 or self.lr_decay_factor <= 0:
            raise DomainError("learning rates, decay factor and ce_epsilon must be positive")
        if self.n_dots < 0 or self.max_epochs < 0 or min(self.batch, self.greedy_batch, self.holdout_batch) < 1:
            raise DomainError("dot count, epochs and batch sizes must be positive")
        if self.lr_decay_every < 1 or self.convergence_window < 1 or self.n_random < 1:
            raise DomainError("decay period, convergence window and n_random must be >= 1")
        object.__setattr__(self, "block_grid", tuple(int(v) for v in self.block_grid))
        if len(self.block_grid) != 2 or min(self.block_grid) < 1:
            raise DomainError("block_grid must be two positive integers")
        pal = tuple(tuple(float(c) for c in col) for col in self.palette)
        if not pal or any(len(c) != 3 or min(c) < 0 or max(c) > 1 for c in pal):
            raise DomainError("palette must be a non-empty list of RGB triples in [0, 1]")
        object.__setattr__(self, "palette", pal)

    def dot_spec(self, canvas=(64, 64)):
        return DotSpec(self.n_dots, self.radius_fraction, self.alpha_max, self.beta, tuple(canvas))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def hash(self):
        return stable_hash(self.to_dict())


@dataclass(frozen=True, eq=False)
class PerturbationRecord:
    target_class: object  # int class id or ALL
    dot_params: DotParams
    train_asr: float
    config_hash: str
    seeds: dict
    mode: str = "full"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.target_class != ALL and not (isinstance(self.target_class, (int, np.integer))
                                             and 0 <= self.target_class < NUM_CLASSES):
            raise DomainError(f"target_class must be a class id or {ALL!r}")
        if not 0.0 <= self.train_asr <= 1.0:
            raise DomainError("train_asr must lie in [0, 1]")

    @property
    def key(self):
        return ALL if self.target_class == ALL else f"{int(self.target_class):02d}"

    @property
    def record_id(self):
        return f"{self.key}-{stable_hash(self.to_dict(), 8)}"

    def to_dict(self):
        return {
            "target_class": self.target_class if self.target_class == ALL else int(self.target_class),
            "dot_params": self.dot_params.to_dict(),
            "train_asr": float(self.train_asr),
            "config_hash": self.config_hash,
            "seeds": dict(self.seeds),
            "mode": self.mode,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["target_class"], DotParams.from_dict(d["dot_params"]), d["train_asr"], d["config_hash"],
                   d["seeds"], d.get("mode", "full"), d.get("meta", {}))

    def __eq__(self, other):
        return isinstance(other, PerturbationRecord) and self.to_dict() == other.to_dict()


# -- objectives ---------------------------------------------------------------------

def _check_labels(labels, num_classes):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise DomainError(f"labels must lie in [0, {num_classes})")
    return labels


def classifier_objective_torch(logits, labels, ce_epsilon=1e-6):
    """Per-frame reciprocal cross-entropy."""
    ce = F.cross_entropy(logits, labels, reduction="none")
    return 1.0 / (ce + ce_epsilon)


def detector_objective_torch(raw, labels, threshold):
    """Per-frame mean class score over above-threshold cells, 0 when there are none."""
    obj = torch.sigmoid(raw[:, 0])
    p = F.softmax(raw[:, 1:], dim=1)
    p = p.gather(1, labels.view(-1, 1, 1, 1).expand(-1, 1, *p.shape[2:]))[:, 0]
    sel = (obj > threshold).to(p.dtype).detach()
    count = sel.sum(dim=(1, 2))
    return torch.where(count > 0, (p * sel).sum(dim=(1, 2)) / count.clamp(min=1), torch.zeros_like(count))


def attack_objective_classifier(frames, true_labels, model, ce_epsilon=1e-6):
    """Mean over frames of ``1 / (CE + ce_epsilon)``; lower means a stronger attack."""
    model._require("classifier")
    labels = _check_labels(true_labels, model.num_classes)
    with torch.no_grad():
        logits = model.net(model._tensor(frames)).double()
        return float(classifier_objective_torch(logits, torch.as_tensor(labels, dtype=torch.long), ce_epsilon).mean())


def attack_objective_detector(frames, class_id, model):
    """Mean over frames of the mean above-threshold score for ``class_id``."""
    model._require("detector")
    x = model._tensor(frames)
    labels = _check_labels(np.broadcast_to(np.asarray(class_id), (x.shape[0],)), model.num_classes)
    with torch.no_grad():
        raw = model.net(x).double()
        return float(detector_objective_torch(raw, torch.as_tensor(labels, dtype=torch.long), model.threshold).mean())


# -- differentiable pipeline ------------------------------------------------------------

class Pipeline:
    """Perturbation parameters -> frames -> per-frame objective, differentiable end to end.

    ``surrogate=None`` maps the rendered perturbation straight onto the frame
    (the ``no_tnet`` ablation).
    """

    def __init__(self, victim, surrogate, world, cfg, dtype=torch.float32):
        if cfg.objective_kind != victim.kind:
            raise ConfigurationError(f"objective {cfg.objective_kind!r} does not fit a {victim.kind} victim")
        self.victim, self.surrogate, self.world, self.cfg, self.dtype = victim, surrogate, world, cfg, dtype
        self.vnet = victim.net if dtype == torch.float32 else copy.deepcopy(victim.net).to(dtype)
        self.snet = None
        if surrogate is not None:
            self.snet = surrogate.net if dtype == torch.float32 else copy.deepcopy(surrogate.net).to(dtype)
        self.canvas = tuple(world.frame_shape)

    def batch(self, class_ids, envs, noise_rng=None):
        """Fixed per-batch tensors: scenes, gains, labels and optional sensor noise."""
        scenes, _ = self.world.scenes(class_ids, envs)
        b, v = frame_gains(envs, self.world.optics)
        noise = None
        if noise_rng is not None and self.world.optics.noise_sigma > 0:
            noise = torch.as_tensor(noise_rng.normal(0.0, self.world.optics.noise_sigma, scenes.shape),
                                    dtype=self.dtype).permute(0, 3, 1, 2)
        return {
            "scenes": torch.as_tensor(scenes, dtype=self.dtype).permute(0, 3, 1, 2),
            "b": torch.as_tensor(b, dtype=self.dtype).view(-1, 1, 1, 1),
            "v": torch.as_tensor(v, dtype=self.dtype).view(-1, 1, 1, 1),
            "labels": torch.as_tensor(np.asarray(class_ids), dtype=torch.long),
            "noise": noise,
        }

    def appearance(self, i_d):
        """NCHW rendered perturbations -> NCHW camera-side appearance."""
        if self.snet is None:
            return i_d
        return self.snet(i_d).clamp(0.0, 1.0)

    def objective_from_appearance(self, i_p, batch):
        """Per-frame objective, shape (K, N) for K appearances and N batch frames."""
        k = i_p.shape[0]
        n = batch["scenes"].shape[0]
        frames = batch["b"][None] * batch["scenes"][None] + batch["v"][None] * i_p[:, None]
        if batch["noise"] is not None:
            frames = frames + batch["noise"][None]
        frames = frames.clamp(0.0, 1.0).reshape(k * n, *frames.shape[2:])
        labels = batch["labels"].repeat(k)
        out = self.vnet(frames)
        if self.cfg.objective_kind == "classifier":
            per = classifier_objective_torch(out, labels, self.cfg.ce_epsilon)
        else:
            per = detector_objective_torch(out, labels, self.victim.threshold)
        return per.reshape(k, n)

    def objective(self, centers, colors, params, batch):
        """Mean objective of one perturbation; differentiable in ``centers`` and ``colors``."""
        i_d = render_torch(centers, colors, params, self.canvas).permute(2, 0, 1)[None]
        return self.objective_from_appearance(self.appearance(i_d), batch)[0].mean()

    def evaluate(self, params, batch):
        """Mean objective of fixed DotParams (no gradient)."""
        i_d = torch.as_tensor(render(params, self.canvas), dtype=self.dtype).permute(2, 0, 1)[None]
        with torch.no_grad():
            return float(self.objective_from_appearance(self.appearance(i_d), batch)[0].mean())

    def success_rate(self, params, batch):
        """Fraction of batch frames the victim gets wrong (8-bit quantized frames)."""
        i_d = torch.as_tensor(render(params, self.canvas), dtype=self.dtype).permute(2, 0, 1)[None]
        with torch.no_grad():
            i_p = self.appearance(i_d)[0]
            frames = batch["b"] * batch["scenes"] + batch["v"] * i_p
            if batch["noise"] is not None:
                frames = frames + batch["noise"]
            frames = torch.round(frames.clamp(0.0, 1.0) * 255.0) / 255.0
        return float(self.victim.success(frames.permute(0, 2, 3, 1).numpy(), batch["labels"].numpy()).mean())


def _class_ids(class_id, n, rng):
    if class_id == ALL:
        return rng.integers(0, NUM_CLASSES, n)
    return np.full(n, int(class_id))


def _envs(pipe, class_id, n, rng, static_env=None):
    ids = _class_ids(class_id, n, rng)
    envs = [static_env] * n if static_env is not None else pipe.world.sample_envs(n, rng)
    return ids, envs


def block_centers(block_grid, canvas):
    """Centers of the candidate blocks in row-major order."""
    bh, bw = block_grid
    h, w = canvas
    return [((r + 0.5) * h / bh, (c + 0.5) * w / bw) for r in range(bh) for c in range(bw)]


# -- greedy initialization -----------------------------------------------------------------

def greedy_candidates(cfg, canvas):
    """``[None] + [(center, color), ...]``: the null candidate first, then blocks row-major by palette."""
    return [None] + [(c, col) for c in block_centers(cfg.block_grid, canvas) for col in cfg.palette]


def greedy_init(victim, surrogate, world, class_id, cfg, seed, return_trace=False, pipeline=None,
                static_env=None, chunk=64):
    """Place up to ``cfg.n_dots`` dots by exhaustive scan over the candidate set.

    Every candidate is scored on one fixed batch of ``cfg.greedy_batch``
    environment samples. The null candidate leaves the perturbation unchanged
    and comes first, so a dot is only accepted when it strictly lowers the
    objective; ties among dots go to the earliest candidate. The scan stops
    once the null candidate has won twice in a row.
    """
    pipe = pipeline or Pipeline(victim, surrogate, world, cfg)
    canvas = pipe.canvas
    rng = np.random.default_rng(derive_seed(seed, "greedy"))
    ids, envs = _envs(pipe, class_id, cfg.greedy_batch, rng, static_env)
    batch = pipe.batch(ids, envs, noise_rng=rng)
    radius = cfg.radius_fraction * canvas[0]
    cands = greedy_candidates(cfg, canvas)
    unit = [render_raw(DotParams([c], [radius], [col], cfg.alpha_max, cfg.beta), canvas) for c, col in
            ((c, col) for c, col in cands[1:])]

    params = DotParams.empty(cfg.alpha_max, cfg.beta)
    raw = np.zeros(canvas + (3,))
    trace = [pipe.evaluate(params, batch)]
    null_wins = 0
    while params.n < cfg.n_dots and null_wins < 2:
        if null_wins == 1:
            # fixed batch and unchanged state: the rescan would repeat exactly
            null_wins = 2
            trace.append(trace[-1])
            break
        scores = []
        imgs = np.stack([np.minimum(raw + u, 1.0) for u in unit])
        with torch.no_grad():
            for s in range(0, len(imgs), chunk):
                i_d = torch.as_tensor(imgs[s:s + chunk], dtype=pipe.dtype).permute(0, 3, 1, 2)
                scores.append(pipe.objective_from_appearance(pipe.appearance(i_d), batch).mean(dim=1).double().numpy())
        scores = np.concatenate(scores)
        best = int(np.argmin(scores))  # first minimum wins
        # the null candidate scores the current objective and precedes every dot, so a
        # dot must strictly improve on it
        if not scores[best] < trace[-1]:
            null_wins += 1
            trace.append(trace[-1])
            continue
        null_wins = 0
        center, color = cands[best + 1]
        params = params.append(center, radius, color)
        raw = raw + unit[best]
        trace.append(float(scores[best]))
    return (params, trace) if return_trace else params


# -- refinement -------------------------------------------------------------------------------

def refine(theta0, victim, surrogate, world, class_id, cfg, seed, return_history=False, pipeline=None,
           static_env=None, callback=None):
    """Sign-gradient refinement of dot centers and colors.

    Each epoch draws a fresh batch of environment samples, steps every
    parameter by ``-lr * sign(grad)`` and projects back onto the canvas and
    color cube. Learning rates shrink by ``lr_decay_factor`` every
    ``lr_decay_every`` epochs. The parameters with the lowest objective on a
    fixed held-out batch are returned. ``callback(epoch, theta)`` is called
    after every projected step.
    """
    pipe = pipeline or Pipeline(victim, surrogate, world, cfg)
    canvas = pipe.canvas
    theta0.validate(canvas)
    rng = np.random.default_rng(derive_seed(seed, "refine"))
    hold_rng = np.random.default_rng(derive_seed(seed, "holdout"))
    h_ids, h_envs = _envs(pipe, class_id, cfg.holdout_batch, hold_rng, static_env)
    hold = pipe.batch(h_ids, h_envs, noise_rng=hold_rng)

    theta = theta0
    best_val = pipe.evaluate(theta, hold)
    best = theta
    history = [{"epoch": 0, "train": float("nan"), "holdout": best_val}]
    if theta.n == 0:
        return (best, history) if return_history else best
    for epoch in range(1, cfg.max_epochs + 1):
        decay = cfg.lr_decay_factor ** ((epoch - 1) // cfg.lr_decay_every)
        lr_c, lr_g = cfg.lr_centers / decay, cfg.lr_colors / decay
        ids, envs = _envs(pipe, class_id, cfg.batch, rng, static_env)
        batch = pipe.batch(ids, envs, noise_rng=rng)
        centers = torch.tensor(theta.centers, dtype=pipe.dtype, requires_grad=True)
        colors = torch.tensor(theta.colors, dtype=pipe.dtype, requires_grad=True)
        loss = pipe.objective(centers, colors, theta, batch)
        loss.backward()
        gc, gg = centers.grad.double().numpy(), colors.grad.double().numpy()
        if not (np.all(np.isfinite(gc)) and np.all(np.isfinite(gg)) and math.isfinite(float(loss.detach()))):
            raise OptimizationError("non-finite objective or gradient during refinement", epoch)
        theta = theta.replace(centers=theta.centers - lr_c * np.sign(gc),
                              colors=theta.colors - lr_g * np.sign(gg)).project(canvas)
        if callback:
            callback(epoch, theta)
        val = pipe.evaluate(theta, hold)
        history.append({"epoch": epoch, "train": float(loss.detach()), "holdout": val})
        if val < best_val:
            best_val, best = val, theta
        w = cfg.convergence_window
        if epoch >= w:
            prev = history[epoch - w]["holdout"]
            if abs(val - prev) <= cfg.convergence_tol * max(abs(prev), 1e-12):
                break
    return (best, history) if return_history else best


# -- full craft ---------------------------------------------------------------------------------

def static_environment(world, seed, lux):
    """The single environment sample used throughout a ``static_env`` craft."""
    env = world.sample_envs(1, np.random.default_rng(derive_seed(seed, "static_env")))[0]
    return replace(env, illuminance=float(lux))


def craft_uap(class_id, victim, surrogate, world, cfg, seed, log=None):
    """Craft one universal perturbation for ``class_id`` (or ALL classes)."""
    if class_id != ALL and not (isinstance(class_id, (int, np.integer)) and 0 <= class_id < NUM_CLASSES):
        raise DomainError(f"class_id must be a class id or {ALL!r}")
    if cfg.mode in ("full", "static_env") and surrogate is None:
        raise ConfigurationError(f"mode {cfg.mode!r} needs a trained surrogate")
    if surrogate is not None and tuple(surrogate.resolution) != tuple(world.frame_shape):
        raise ConfigurationError(f"surrogate resolution {surrogate.resolution} differs from frames {world.frame_shape}")
    use_surrogate = surrogate if cfg.mode != "no_tnet" else None
    pipe = Pipeline(victim, use_surrogate, world, cfg)
    static_env = static_environment(world, seed, cfg.static_lux) if cfg.mode == "static_env" else None
    seeds = {"master": int(seed), "greedy": derive_seed(seed, "greedy"), "refine": derive_seed(seed, "refine")}
    meta = {"victim_seed": victim.seed, "surrogate": None if surrogate is None else surrogate.arch}

    if cfg.mode == "random":
        hold_rng = np.random.default_rng(derive_seed(seed, "holdout"))
        h_ids, h_envs = _envs(pipe, class_id, cfg.holdout_batch, hold_rng)
        hold = pipe.batch(h_ids, h_envs, noise_rng=hold_rng)
        spec = cfg.dot_spec(world.frame_shape)
        base = derive_seed(seed, "random")
        cands = [sample_random(spec, base + i) for i in range(cfg.n_random)]
        scores = [pipe.evaluate(p, hold) for p in cands]
        theta = cands[int(np.argmin(scores))]
        meta["random_scores"] = scores
        seeds["random"] = base
    else:
        theta, trace = greedy_init(victim, surrogate, world, class_id, cfg, seed, return_trace=True,
                                   pipeline=pipe, static_env=static_env)
        if log:
            log(f"greedy: {theta.n} dots, objective {trace[0]:.4g} -> {trace[-1]:.4g}")
        theta, history = refine(theta, victim, surrogate, world, class_id, cfg, seed, return_history=True,
                                pipeline=pipe, static_env=static_env)
        if log:
            log(f"refine: {len(history) - 1} epochs, holdout objective {min(h['holdout'] for h in history):.4g}")
        meta["greedy_trace"] = trace
        meta["refine_epochs"] = len(history) - 1
        hold = None

    if hold is None:
        hold_rng = np.random.default_rng(derive_seed(seed, "holdout"))
        h_ids, h_envs = _envs(pipe, class_id, cfg.holdout_batch, hold_rng, static_env)
        hold = pipe.batch(h_ids, h_envs, noise_rng=hold_rng)
    asr = pipe.success_rate(theta, hold)
    return PerturbationRecord(class_id if class_id == ALL else int(class_id), theta, asr, cfg.hash(), seeds,
                              cfg.mode, meta)
