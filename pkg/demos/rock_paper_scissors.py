"""Cyclic preferences: a PCMC can say rock > paper > scissors > rock, an MNL cannot.

Run with ``python demos/rock_paper_scissors.py`` (about a minute).
"""

import itertools

import numpy as np

from pcmcnet.baselines import fit_mnl
from pcmcnet.core import choice_distribution
from pcmcnet.data import item_schema, item_session
from pcmcnet.datagen import rps_model, rps_sessions
from pcmcnet.mle import aggregate_counts, fit_mle
from pcmcnet.net import synthetic_preset
from pcmcnet.train import train

NAMES = ["rock", "paper", "scissors"]
SETS = [S for k in (2, 3) for S in itertools.combinations(range(3), k)]


def show(label, distribution):
    print(f"\n{label}")
    for S in SETS:
        p = distribution(S)
        print("  {" + ", ".join(NAMES[i] for i in S) + "}: " + "  ".join(f"{NAMES[i]} {q:.3f}" for i, q in zip(S, p)))


Q = rps_model(0.75)
show("ground truth, alpha = 0.75", lambda S: choice_distribution(Q, S))

sessions = rps_sessions(0.75, 20000, seed=0)
print(f"\nsampled {len(sessions)} choices over all pairs and the triple")

mnl = fit_mnl(sessions, item_schema(3))
show("MNL: one weight per item, so no cycle is possible",
     lambda S: mnl.predict_proba([item_session(S, 0)])[0])

mle = fit_mle(aggregate_counts(sessions, 3), 3, restarts=5)
show("PCMC by maximum likelihood", lambda S: choice_distribution(mle.Q, S))

config = synthetic_preset(hidden_layers=1, nodes_per_layer=16, categorical_encoding="onehot",
                          batch_size=16, learning_rate=0.01, max_epochs=20, seed=0)
net = train(sessions, item_schema(3), config).model
show("PCMC-Net with one hidden layer of 16 units",
     lambda S: net.predict_proba([item_session(S, 0)])[0])

single = synthetic_preset(hidden_layers=0, categorical_encoding="onehot", batch_size=16,
                          learning_rate=0.01, max_epochs=10, seed=0)
lone = train(sessions, item_schema(3), single).model
show("PCMC-Net whose rate function is a single linear unit (additive in i and j: cannot cycle)",
     lambda S: lone.predict_proba([item_session(S, 0)])[0])
print(f"\nlargest pair error of the single unit: "
      f"{max(np.abs(lone.predict_proba([item_session(S, 0)])[0] - choice_distribution(Q, S)).max() for S in SETS[:3]):.3f}")
