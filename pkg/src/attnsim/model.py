"""One-layer attention classifier with a fixed linear head.

The predictor is f(X) = nu^T X^T softmax(X W^T p): the softmax over
attention scores X W^T p selects tokens, and the output is the resulting
affine combination of per-token scores gamma_t = nu^T x_t.  Only W and p
are trainable; nu is fixed at construction.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import Dataset, SignalBasis

__all__ = [
    "ModelState",
    "ForwardResult",
    "EvalResult",
    "init_params",
    "make_head",
    "softmax",
    "forward",
    "predict",
    "evaluate",
]


@dataclass
class ModelState:
    """Trainable key-query matrix W (d x d), tunable token p (d,), and the
    fixed head nu (d,).  The trainer replaces W and p; nu is frozen."""

    W: np.ndarray
    p: np.ndarray
    nu: np.ndarray

    def __post_init__(self):
        d = self.p.shape[0]
        if self.W.shape != (d, d) or self.nu.shape != (d,):
            raise ValueError(
                f"inconsistent shapes: W {self.W.shape}, p {self.p.shape}, "
                f"nu {self.nu.shape}")
        for name, arr in (("W", self.W), ("p", self.p), ("nu", self.nu)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")
        self.nu = self.nu.copy()
        self.nu.setflags(write=False)

    @property
    def d(self) -> int:
        return self.p.shape[0]


def init_params(d: int, sigma_w: float, sigma_p: float,
                rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian initialization: W_ij ~ N(0, sigma_w^2), p_i ~ N(0, sigma_p^2)."""
    if sigma_w < 0 or sigma_p < 0:
        raise ValueError("initialization scales must be >= 0")
    W = rng.normal(0.0, sigma_w, size=(d, d)) if sigma_w > 0 else np.zeros((d, d))
    p = rng.normal(0.0, sigma_p, size=d) if sigma_p > 0 else np.zeros(d)
    return W, p


def make_head(signals: SignalBasis, scale="inverse_mu") -> np.ndarray:
    """Head aligned with the signal difference: nu = c (mu_+ - mu_-)/||.||.

    ``scale`` picks c: "inverse_mu" gives c = 1/||mu|| (keeps token scores
    order-one), "unit" gives c = 1, and a float gives that value.  The
    resulting head has cosine 1/sqrt(2) with either class signal.
    """
    diff = signals.mu_plus - signals.mu_minus
    nrm = float(np.linalg.norm(diff))
    if nrm == 0.0:
        raise ValueError("degenerate signals: mu_plus equals mu_minus")
    if scale == "inverse_mu":
        c = 1.0 / signals.mu_norm
    elif scale == "unit":
        c = 1.0
    elif isinstance(scale, (int, float)):
        c = float(scale)
    else:
        raise ValueError(f"unknown head scale {scale!r}")
    return c * diff / nrm


def softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-subtracted softmax along ``axis``; rejects non-finite input."""
    v = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(v)):
        raise ValueError("softmax input must be finite")
    shifted = v - v.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass(frozen=True)
class ForwardResult:
    attn_scores: np.ndarray   # (T,)  X W^T p
    probs: np.ndarray         # (T,)  softmax(attn_scores)
    token_scores: np.ndarray  # (T,)  gamma_t = nu^T x_t
    output: float             # <probs, token_scores>


def forward(X: np.ndarray, state: ModelState) -> ForwardResult:
    if X.ndim != 2 or X.shape[1] != state.d:
        raise ValueError(f"token matrix shape {X.shape} incompatible with d={state.d}")
    attn = X @ (state.W.T @ state.p)
    probs = softmax(attn)
    gamma = X @ state.nu
    return ForwardResult(attn_scores=attn, probs=probs, token_scores=gamma,
                         output=float(probs @ gamma))


def predict(output: float) -> int:
    """Sign of the output; an exact zero maps to -1 (and is scored as an
    error against any label, so ties never inflate accuracy)."""
    if not math.isfinite(output):
        raise ValueError("non-finite model output")
    return 1 if output > 0 else -1


@dataclass(frozen=True)
class EvalResult:
    acc_train: float          # 0-1 accuracy against training labels
    acc_true: float           # against true labels
    loss: float               # mean logistic loss against training labels
    outputs: np.ndarray       # (n,) raw f(X)
    fit_train: np.ndarray     # (n,) bool, strict-sign match with y_train
    fit_true: np.ndarray      # (n,) bool


def batch_outputs(X: np.ndarray, state: ModelState) -> np.ndarray:
    """Model outputs for stacked sequences X (n, T, d)."""
    n, T, d = X.shape
    attn = (X.reshape(n * T, d) @ (state.W.T @ state.p)).reshape(n, T)
    probs = softmax(attn, axis=-1)
    gamma = (X.reshape(n * T, d) @ state.nu).reshape(n, T)
    return np.einsum("it,it->i", probs, gamma)


def evaluate(dataset: Dataset, state: ModelState) -> EvalResult:
    """Accuracies and mean logistic loss over a dataset.

    A zero output counts as an error for both label conventions, matching
    the tie rule in :func:`predict`.
    """
    if dataset.n == 0:
        raise ValueError("cannot evaluate an empty dataset")
    out = batch_outputs(dataset.X, state)
    fit_train = (out != 0) & (np.sign(out) == dataset.y_train)
    fit_true = (out != 0) & (np.sign(out) == dataset.y_true)
    loss = float(np.mean(np.logaddexp(0.0, -dataset.y_train * out)))
    return EvalResult(
        acc_train=float(fit_train.mean()),
        acc_true=float(fit_true.mean()),
        loss=loss,
        outputs=out,
        fit_train=fit_train,
        fit_true=fit_true,
    )
