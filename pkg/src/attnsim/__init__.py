"""Token selection in a one-layer attention model under label noise.

A numpy library for simulating the signal/noise sequence data model,
training the attention parameters with full-batch gradient descent, and
checking the dynamical laws that govern token selection: g-linear growth of
attention gaps, one-step update identities, softmax concentration brackets,
finite-scale good-run events, grokking, and SNR-based overfitting regimes.
"""
from .data import (AssumptionCheck, AssumptionReport, ConfigError, DataConfig,
                   Dataset, Role, Sample, SignalBasis, a8_sigma,
                   check_assumptions, generate_dataset, make_signals,
                   sample_from_p_star, snr)
from .model import (EvalResult, ForwardResult, ModelState, evaluate, forward,
                    init_params, make_head, predict, softmax)
from .multiclass import (MulticlassConfig, MulticlassDataset, MulticlassState,
                         generate_multiclass_dataset, grad_wv,
                         head_gradient_estimate, make_class_signals,
                         multiclass_loss_and_grads)
from .rng import cell_seed, stream
from .theory import (AttentionDiagnostics, CheckResult, GLinearityResult,
                     GoodRunReport, GoodRunTolerances, GrokkingTimes,
                     InitThresholds, InteractionTerms, Regime, TheoryReport,
                     classify_regime, compute_diagnostics,
                     compute_interactions, etf_gradient_check, g, g_linearity,
                     good_run_check, init_checks, loss_derivative_balance,
                     measure_grokking, noisy_stage_windows,
                     pre_saturation_window, signal_growth_check,
                     softmax_bound_check, softmax_bound_scan,
                     token_score_check, verify_update_identity)
from .train import (DivergenceError, TrainConfig, TrainResult, TrainTrace,
                    empirical_loss, finite_diff_grad, gd_step, grad_p, grad_w,
                    loss_derivative, output_grads, train)

__version__ = "0.1.0"
