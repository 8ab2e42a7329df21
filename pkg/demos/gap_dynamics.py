#!/usr/bin/env python3
"""The g-transformed attention gaps grow linearly in training time.

The attention gap of sample i between token 1 and token t is
Lambda_{i,t} = (x_1 - x_t)^T W^T p.  Its raw trajectory slows down as the
softmax saturates, but the image under g(x) = 2x + 2 sinh(x - log T) moves
at a constant rate: clean samples up, noisy samples down during the
suppression phase, and the confusing-token gaps Gamma_{j,u} up once the
takeover starts.  This script fits those lines on a benign-regime run.
"""
import numpy as np

from attnsim.data import DataConfig, a8_sigma
from attnsim.experiments import ExperimentConfig, ModelParams, execute
from attnsim.theory import (g, g_linearity, noisy_stage_windows,
                            pre_saturation_window)
from attnsim.train import TrainConfig

data = DataConfig(n=20, T=8, d=2000, mu_norm=20.0, sigma_eps=1.0, eta=0.2,
                  rho=0.1)
s = 3.0 * a8_sigma(data)
cfg = ExperimentConfig(
    data=data,
    train=TrainConfig(alpha=5e-3, steps=12000, log_every=10, test_size=200),
    model=ModelParams(sigma_w=s, sigma_p=s),
    seed=0,
)
tr = execute(cfg).trace

window = pre_saturation_window(tr)
fit = g_linearity(tr, tr.clean_idx, "Lambda", window)
print(f"clean samples, window {window}:")
print(f"  pooled slope {fit.pooled.slope:+.4f}  R^2 {fit.pooled.r2:.4f}")
slopes = [f.slope for f in fit.per_series]
print(f"  per-series slopes {min(slopes):+.4f} .. {max(slopes):+.4f}")

early, late = noisy_stage_windows(tr)
fit_n = g_linearity(tr, tr.noisy_idx, "Lambda", early)
print(f"noisy samples, suppression window {early}:")
print(f"  pooled slope {fit_n.pooled.slope:+.4f}  R^2 {fit_n.pooled.r2:.4f}")

staged = tr.noisy_idx[(tr.probs[:, tr.noisy_idx, 1] >= 0.5).any(axis=0)]
fit_g = g_linearity(tr, staged, "Gamma", late)
print(f"noisy samples in stage 2 ({len(staged)}/{len(tr.noisy_idx)}), "
      f"takeover window {late}:")
print(f"  pooled Gamma slope {fit_g.pooled.slope:+.4f}  R^2 {fit_g.pooled.r2:.4f}")

print("\nmean g(Lambda) over clean samples (should be a straight line):")
mask = (tr.steps >= window[0]) & (tr.steps <= window[1])
steps = tr.steps[mask]
gz = g(tr.Lambda[mask][:, tr.clean_idx, :], tr.T).mean(axis=(1, 2))
for k in np.linspace(0, len(steps) - 1, 10).astype(int):
    bar = "#" * int((gz[k] - gz[0]) / (gz[-1] - gz[0] + 1e-9) * 50)
    print(f"  step {steps[k]:6d}  g {gz[k]:8.2f}  {bar}")
