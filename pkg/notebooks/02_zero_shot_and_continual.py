"""Walkthrough: zero-shot comparison of the four model kinds and a short continual run.

The budgets here are small so the script finishes in about a minute. The
acceptance suite uses the full ones.
"""
from hyperhawkes import evaluate as ev
from hyperhawkes import hawkes, seqdata
from hyperhawkes.train import TrainConfig

# %% Zero-shot: train on seen descriptors, test on sequences whose descriptors were never seen
records, _, _ = hawkes.synthetic_corpus(30, seed=11)
split = seqdata.make_split(records, "zero-shot", seed=0)
cfg = TrainConfig(lr=3e-3, epochs=150, patience=30)

# an undertrained tanh model can have a cumulative hazard that levels off below ln 2;
# such predictions are counted as failures and left out of the MAE
reports = []
for kind in ("fnhp", "fnhp-descriptor", "hyper-fnn", "hyper-fnn-rnn"):
    report, _ = ev.run_setup(records, split, kind, cfg)
    reports.append(report)
    print(f"{report.model:20s} MNLL {report.mnll:8.4f}  MAE {report.mae:.4f}  failures {report.failures}")

print(ev.headline_csv(reports))

# %% Continual learning over a drifting stream, with and without the weight regularizer
stream, _, _ = hawkes.synthetic_corpus(6, seed=11, drift=True)
summary = ev.run_cl(stream, TrainConfig(lr=1e-3, cl_epochs=100, variant="hyper-fnn-rnn"), [0.3])
for beta, run in sorted(summary.runs.items()):
    print(f"beta={beta:<4g} average test MNLL per stage:", [round(x, 3) for x in run.curve_mnll])
print("best beta:", summary.best_beta)
