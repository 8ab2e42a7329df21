#!/usr/bin/env python3
"""Three overfitting regimes of attention token selection.

Trains the one-layer attention model on the signal/noise data model at
three (dimension, signal norm) points with 20% label noise and prints how
training/test accuracy and the per-sample softmax trajectories differ:

  harmful         d=5000, ||mu||=5    fits everything, test accuracy drops
  benign          d=2000, ||mu||=20   fits everything, test accuracy stays
  not-overfitting d=1000, ||mu||=100  fits only the clean samples

Runs in about a minute on a laptop core.  Step budgets are reduced from the
acceptance settings; see README for the full-scale numbers.
"""
import numpy as np

from attnsim.data import DataConfig, a8_sigma
from attnsim.experiments import ExperimentConfig, ModelParams, execute
from attnsim.train import TrainConfig

SETTINGS = [
    ("harmful", 5000, 5.0, 8000),
    ("benign", 2000, 20.0, 8000),
    ("not-overfitting", 1000, 100.0, 800),
]

print(f"{'regime':>16s} {'train acc':>10s} {'train(true)':>12s} {'test acc':>9s}"
      f" {'lambda+':>8s}")
traces = {}
for name, d, mu, steps in SETTINGS:
    data = DataConfig(n=20, T=8, d=d, mu_norm=mu, sigma_eps=1.0, eta=0.2,
                      rho=0.1)
    s = 3.0 * a8_sigma(data)
    cfg = ExperimentConfig(
        data=data,
        train=TrainConfig(alpha=5e-3, steps=steps, log_every=50, test_size=500),
        model=ModelParams(sigma_w=s, sigma_p=s),
        seed=0,
    )
    tr = execute(cfg).trace
    traces[name] = tr
    print(f"{name:>16s} {tr.train_acc[-1]:10.2f} {tr.train_acc_true[-1]:12.2f}"
          f" {tr.test_acc[-1]:9.3f} {tr.lambda_plus[-1]:8.2f}")

print()
print("Softmax probability of each token, first clean vs first noisy sample")
print("(token 1 = relevant, token 2 = confusing weak signal)")
for name, tr in traces.items():
    i = tr.clean_idx[0]
    j = tr.noisy_idx[0]
    print(f"\n--- {name}")
    print(f"{'step':>6s}  clean s1..s8{'':22s} noisy s1..s8")
    for k in np.linspace(0, tr.n_logged - 1, 6).astype(int):
        ci = " ".join(f"{v:.2f}" for v in tr.probs[k, i])
        nj = " ".join(f"{v:.2f}" for v in tr.probs[k, j])
        print(f"{tr.steps[k]:6d}  {ci}   {nj}")

print("""
Reading the trajectories: clean samples concentrate on token 1 in every
regime.  Noisy samples suppress token 1 and concentrate on whichever token
fits the flipped label -- the confusing token 2 when its weak class signal
beats the noise scores, an irrelevant token otherwise (common in the
harmful regime).  In the not-overfitting regime the noisy samples also end
on token 1: the class signal wins and they stay misfit.""")
