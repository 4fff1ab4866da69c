"""Train a small sign classifier, craft a universal dot perturbation for one
class and measure attack success across illuminance, with and without an ND filter.

Takes ten to twenty minutes on one CPU core.

    python demos/02_attack.py
"""
import numpy as np

from lenspatch.attack import AttackConfig, craft_uap
from lenspatch.optics import BackgroundPool, OpticsConfig
from lenspatch.perturb import DotSpec
from lenspatch.serving import eval_asr
from lenspatch.surrogate import SurrogateHyper, gen_pairs, train_surrogate
from lenspatch.victim import SignWorld, VictimTraining, gen_sign_dataset, train_classifier

TARGET = 3
LUX = [120, 300, 600, 1500, 3000]

world = SignWorld(BackgroundPool.generate(16, seed=0))
signs = gen_sign_dataset(world, 300, seed=1)
victim = train_classifier(signs, seed=0, cfg=VictimTraining(epochs=10, min_accuracy=0.0))
print(f"victim held-out accuracy {victim.accuracy:.3f}")

pairs = gen_pairs(600, DotSpec(), OpticsConfig(), seed=2, dot_counts=(10, 30, 50))
surrogate, _ = train_surrogate(pairs, "skip-unet", SurrogateHyper(epochs=8), seed=0)

cfg = AttackConfig(n_dots=16, block_grid=(4, 4), palette=((1, 0, 0), (0, 1, 0), (0, 0, 1), (1, 1, 1)),
                   greedy_batch=8, batch=16, max_epochs=60, lr_decay_every=30)
record = craft_uap(TARGET, victim, surrogate, world, cfg, seed=0,
                   log=lambda msg: print("  ", msg))
trace = record.meta["greedy_trace"]
print(f"greedy objective {trace[0]:.3f} -> {trace[-1]:.3f} over {len(trace) - 1} steps")

print("lux     ASR   ASR (ND filter)")
plain = eval_asr(record, victim, world, LUX, frames_per_level=60, seed=5)
nd = eval_asr(record, victim, world, LUX, frames_per_level=60, seed=5, nd_filter=True)
for a, b in zip(plain, nd):
    print(f"{a['lux']:6.0f}  {a['asr']:.2f}  {b['asr']:.2f}")
clean = eval_asr(None, victim, world, [600], frames_per_level=60, seed=5)[0]["asr"]
print(f"no perturbation at 600 lux: {clean:.2f} error rate")
