"""Attraction effects: a third alternative c changes how people split between a and b.

Trains an MNL and a small PCMC-Net on sets {a, b, c} drawn from the context
oracle, then compares expected KL to the oracle and draws preference heatmaps
as PGM images in ./demo_output. Run with ``python demos/context_effects.py``
(a few minutes).
"""

from pathlib import Path

import numpy as np

from pcmcnet.baselines import fit_mnl
from pcmcnet.datagen import A_POINT, B_POINT, ContextOracle, context_generator, context_schema, sample_sessions
from pcmcnet.metrics import expected_kl, heatmap, write_heatmap
from pcmcnet.net import synthetic_preset
from pcmcnet.train import train

out = Path("demo_output")
out.mkdir(exist_ok=True)
oracle = ContextOracle()

print(f"a = {A_POINT}, b = {B_POINT}; P(a) / (P(a) + P(b)) as the decoy c moves:")
for c in [(3.0, 5.0), (5.0, 3.0), (5.0, 5.0), (4.0, 6.0), (8.0, 8.0)]:
    p = oracle(c)
    print(f"  c = {c}: {p[0] / (p[0] + p[1]):.3f}")

sessions = sample_sessions(oracle, context_generator, 5000, seed=0)
mnl = fit_mnl(sessions, context_schema())
net = train(sessions, context_schema(),
            synthetic_preset(hidden_layers=2, batch_size=16, learning_rate=0.003, max_epochs=20, seed=0)).model

for name, model in [("oracle", oracle), ("mnl", mnl), ("pcmc-net", net)]:
    H = heatmap(model, 64)
    write_heatmap(out / f"heatmap_{name}", H)
    kl = 0.0 if model is oracle else expected_kl(oracle, model, n_mc=2000)
    print(f"{name:>9}: expected KL {kl:.4f}, preference range {np.ptp(H):.3f}")

print(f"heatmaps written to {out.resolve()} (lighter = stronger preference for a)")
print("the MNL map is flat: under IIA the a:b ratio cannot depend on c")
