"""Walkthrough: the Hawkes oracle and a hand-built constant-hazard NHP.

Run with ``python3 notebooks/01_oracle_and_constant_hazard.py``.
"""
import math

import numpy as np

from hyperhawkes import evaluate as ev
from hyperhawkes import hawkes, nhp
from hyperhawkes.model import HawkesModel
from hyperhawkes.seqdata import TEST
from hyperhawkes.train import EventSet

# %% A seeded corpus: descriptors map to (mu, alpha, decay) through a random log-linear link
records, truth, link = hawkes.synthetic_corpus(8, descriptor_dim=3, window_end=10.0, seed=0)
for seq, desc in records[:4]:
    p = truth[seq.id]
    print(f"{seq.id}: {len(seq.timestamps):4d} events  mu={p.mu:7.3f} alpha={p.alpha:.3f} "
          f"decay={p.decay:.3f}  branching={p.branching_ratio:.2f}")

# %% Per-event log-likelihood under the generating parameters (the best any model can do)
for seq, _ in records[:4]:
    ll = hawkes.sequence_loglik(truth[seq.id], seq)
    print(f"{seq.id}: oracle MNLL {-ll.mean():8.3f} over {ll.size} scored events")

# %% An NHP whose hazard is exactly constant: its likelihood matches the exponential one
c = 2.5
model = HawkesModel.init("fnhp", 0, activation="softplus")
model.params["haz"] = nhp.constant_hazard_weights(model.topology, c).raw

seq, _ = records[3]
events = EventSet.from_roles([records[3]], None, TEST)
gaps = np.diff(seq.timestamps)
closed_form = -np.mean(math.log(c) - c * gaps)
print(f"NHP MNLL {ev.mnll(model, events):.12f}  closed form {closed_form:.12f}")

# %% Its median next-event time is ln2 / c after the last event
pred = ev.predict(model, events)
print("largest offset error:", np.max(np.abs(pred.tau - math.log(2) / c)))
