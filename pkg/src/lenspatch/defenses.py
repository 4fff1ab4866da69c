"""Input-transformation defenses: bit-depth squeezing and random resize-and-pad."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigurationError, DomainError


@dataclass(frozen=True)
class DefenseConfig:
    kind: str = "squeeze"
    bits: int = 8
    scale_range: tuple = (64, 80)
    pad_target: int = 80
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("squeeze", "randomize"):
            raise DomainError(f"unknown defense kind {self.kind!r}")
        if not (isinstance(self.bits, (int, np.integer)) and 1 <= self.bits <= 8):
            raise DomainError(f"bits must be an integer in [1, 8], got {self.bits!r}")
        lo, hi = self.scale_range
        if not 0 < lo <= hi <= self.pad_target:
            raise DomainError(f"scale_range {self.scale_range} must satisfy 0 < lo <= hi <= pad_target")
        object.__setattr__(self, "scale_range", (int(lo), int(hi)))

    def to_dict(self):
        return asdict(self)


def feature_squeeze(x, bits):
    """Reduce every channel to ``bits`` bits of depth."""
    if not (isinstance(bits, (int, np.integer)) and 1 <= bits <= 8):
        raise DomainError(f"bits must be an integer in [1, 8], got {bits!r}")
    levels = 2 ** int(bits) - 1
    return np.round(np.asarray(x, dtype=np.float64) * levels) / levels


def _resize(x, side):
    t = torch.as_tensor(np.asarray(x, dtype=np.float64)).permute(2, 0, 1)[None]
    return F.interpolate(t, size=(side, side), mode="bilinear", align_corners=False)[0].permute(1, 2, 0).numpy()


def input_randomize(x, cfg, seed, return_params=False):
    """Rescale to a random side in ``cfg.scale_range`` then zero-pad to ``cfg.pad_target``.

    With ``return_params`` the tuple ``(side, top, left)`` is returned as well.
    """
    lo, hi = cfg.scale_range
    if hi > cfg.pad_target:
        raise DomainError("pad_target must be at least the largest rescaled side")
    rng = np.random.default_rng(seed)
    side = int(rng.integers(lo, hi + 1))
    slack = cfg.pad_target - side
    top, left = int(rng.integers(0, slack + 1)), int(rng.integers(0, slack + 1))
    out = np.zeros((cfg.pad_target, cfg.pad_target, 3))
    out[top:top + side, left:left + side] = _resize(x, side)
    out = np.clip(out, 0.0, 1.0)
    return (out, (side, top, left)) if return_params else out


def undo_randomize(y, params, shape):
    side, top, left = params
    crop = y[top:top + side, left:left + side]
    t = torch.as_tensor(crop).permute(2, 0, 1)[None]
    return F.interpolate(t, size=tuple(shape), mode="bilinear", align_corners=False)[0].permute(1, 2, 0).numpy()


def randomize_batch(x, cfg, rng):
    """Torch NCHW version of :func:`input_randomize` with one draw per sample."""
    lo, hi = cfg.scale_range
    out = x.new_zeros((x.shape[0], x.shape[1], cfg.pad_target, cfg.pad_target))
    for i in range(x.shape[0]):
        side = int(rng.integers(lo, hi + 1))
        slack = cfg.pad_target - side
        top, left = int(rng.integers(0, slack + 1)), int(rng.integers(0, slack + 1))
        out[i, :, top:top + side, left:left + side] = F.interpolate(
            x[i:i + 1], size=(side, side), mode="bilinear", align_corners=False
        )[0]
    return out.clamp(0.0, 1.0)


def apply_defense(frames, cfg, seed):
    """Apply a defense to an (N, H, W, 3) stack; per-frame seeds derive from ``seed``."""
    frames = np.asarray(frames, dtype=np.float64)
    if cfg.kind == "squeeze":
        return feature_squeeze(frames, cfg.bits)
    seeds = np.random.default_rng(seed).integers(0, 2 ** 63 - 1, len(frames))
    return np.stack([input_randomize(f, cfg, int(s)) for f, s in zip(frames, seeds)])


def eval_defense(defense, records, victim, world, lux_levels, frames_per_level=100, seed=0):
    """ASR per lux level with and without ``defense`` applied before inference.

    Returns a list of row dicts with keys ``defense, lux, asr, baseline_asr,
    adv_acc, benign_acc, baseline_benign_acc, n_frames``. For a classifier,
    adversarial accuracy is ``1 - asr``.
    """
    from .serving import attack_frames

    if defense.kind == "randomize" and defense.pad_target not in victim.input_sizes:
        raise ConfigurationError(
            f"victim accepts inputs {victim.input_sizes}, defense produces {defense.pad_target}px frames"
        )
    records = list(records)
    rows = []
    for li, lux in enumerate(lux_levels):
        adv, benign, labels = [], [], []
        for ri, rec in enumerate(records):
            s = seed + 1000 * li + ri
            a, b, y = attack_frames(rec, world, frames_per_level, s, lux=lux)
            adv.append(a)
            benign.append(b)
            labels.append(y)
        adv, benign, labels = np.concatenate(adv), np.concatenate(benign), np.concatenate(labels)
        base_adv = victim.success(adv, labels)
        base_ben = victim.success(benign, labels)
        d_adv = victim.success(apply_defense(adv, defense, seed + li), labels)
        d_ben = victim.success(apply_defense(benign, defense, seed + li + 7), labels)
        rows.append({
            "defense": defense.kind if defense.kind == "randomize" else f"squeeze{defense.bits}",
            "lux": float(lux),
            "asr": float(d_adv.mean()),
            "baseline_asr": float(base_adv.mean()),
            "adv_acc": float(1.0 - d_adv.mean()),
            "benign_acc": float(1.0 - d_ben.mean()),
            "baseline_benign_acc": float(1.0 - base_ben.mean()),
            "n_frames": int(len(labels)),
        })
    return rows
