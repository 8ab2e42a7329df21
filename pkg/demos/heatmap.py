#!/usr/bin/env python3
"""Loss heatmap over (dimension, signal norm).

Sweeps a small grid of d and ||mu|| at fixed n, T, eta, rho and prints the
seed-averaged train and test losses.  High test loss concentrates where the
dimension is large relative to the signal (low SNR); the boundary tracks
d ~ ||mu||^2 at fixed n.
"""
from attnsim.data import DataConfig
from attnsim.experiments import ExperimentConfig, SweepSpec, sweep
from attnsim.train import TrainConfig

base = ExperimentConfig(
    data=DataConfig(n=20, T=8, d=1000, mu_norm=20.0, sigma_eps=1.0, eta=0.2,
                    rho=0.1),
    train=TrainConfig(alpha=5e-3, steps=1000, log_every=250, test_size=300),
    seed=0,
)
spec = SweepSpec(d_values=(500, 1000, 2000, 4000),
                 mu_values=(5.0, 15.0, 45.0, 100.0),
                 seeds=(0, 1), base=base)
rows, mean_rows = sweep(spec, threads=4)

for metric in ("train_loss", "test_loss"):
    print(f"\n{metric} (rows: d, columns: ||mu||)")
    print(" " * 8 + "".join(f"{mu:>9.0f}" for mu in spec.mu_values))
    for d in spec.d_values:
        cells = [next(r for r in mean_rows
                      if r["d"] == d and r["mu_norm"] == mu)[metric]
                 for mu in spec.mu_values]
        print(f"d={d:5d} " + "".join(f"{v:9.3f}" for v in cells))

print("\nyellow-corner check: the weakest-signal, largest-d cell should have"
      " the worst test loss of the four corners")
corners = {(d, mu): next(r for r in mean_rows
                         if r["d"] == d and r["mu_norm"] == mu)["test_loss"]
           for d in (spec.d_values[0], spec.d_values[-1])
           for mu in (spec.mu_values[0], spec.mu_values[-1])}
for (d, mu), v in sorted(corners.items(), key=lambda kv: kv[1]):
    print(f"  d={d:5d} mu={mu:5.0f}  test loss {v:.3f}")
