"""Render a dot perturbation, push it through the simulated camera-display
channel and see how well a small surrogate learns that channel.

    python demos/01_channel.py [outdir]
"""
import sys
from pathlib import Path

import numpy as np

from lenspatch.imaging import compare, save_png
from lenspatch.optics import OpticsConfig, oracle_cdtf
from lenspatch.perturb import DotSpec, render, sample_random
from lenspatch.surrogate import SurrogateHyper, eval_surrogate, gen_pairs, predict, train_surrogate

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo-out")
out.mkdir(exist_ok=True)

# one random 30-dot perturbation and its camera-side appearance
spec, optics = DotSpec(n=30), OpticsConfig()
i_d = render(sample_random(spec, seed=0), spec.canvas)
i_p = oracle_cdtf(i_d, optics, seed=0)
save_png(out / "digital.png", i_d)
save_png(out / "physical.png", i_p)
print("digital vs physical:", compare(i_d, i_p))

# a few hundred pairs and a short training run are enough to beat the identity map
data = gen_pairs(300, spec, optics, seed=1, dot_counts=(10, 30, 50))
model, history = train_surrogate(data, "skip-unet", SurrogateHyper(epochs=5), seed=0)
_, val = data.split(0.8)
print("identity model :", eval_surrogate(lambda d: d, val))
print("skip-unet      :", eval_surrogate(model, val))
print("val MSE by epoch:", [round(h["val_mse"], 5) for h in history])

save_png(out / "predicted.png", predict(model, i_d))
print("wrote", sorted(p.name for p in out.glob("*.png")), "to", out)
