"""Diagnostics and empirical checks for the token-selection dynamics.

Everything here is a pure function of model snapshots, datasets, or traces:
attention gaps and their g-transformed linear growth, one-step update
identities for signal/noise attention, softmax concentration brackets,
high-probability ("good run") events at finite scale, initialization
uniformity, regime classification from the signal-to-noise ratio, grokking
times, and the ETF geometry of the head gradient at zero initialization.
Checks report measured values and margins; pass flags use explicit caller
tolerances.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import DataConfig, Dataset, Role, SignalBasis, snr as data_snr
from .model import ModelState, softmax
from .multiclass import MulticlassConfig, head_gradient_estimate
from .train import (TrainTrace, gamma_token_indices, gd_step, grad_p, grad_w,
                    lambda_token_indices, loss_derivative)

__all__ = [
    "CheckResult",
    "TheoryReport",
    "AttentionDiagnostics",
    "InteractionTerms",
    "Regime",
    "g",
    "rel_err",
    "compute_diagnostics",
    "compute_interactions",
    "verify_update_identity",
    "token_score_check",
    "softmax_bound_check",
    "softmax_bound_scan",
    "GoodRunTolerances",
    "GoodRunEvent",
    "GoodRunReport",
    "good_run_check",
    "GLinearityResult",
    "g_linearity",
    "pre_saturation_window",
    "noisy_stage_windows",
    "signal_growth_check",
    "classify_regime",
    "measure_grokking",
    "etf_gradient_check",
    "init_checks",
    "loss_derivative_balance",
]


def rel_err(a, b, floor: float = 1e-12):
    """|a - b| / max(|a|, |b|, floor), elementwise."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return np.abs(a - b) / denom


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: dict
    threshold: dict | float | None = None
    note: str = ""

    def to_json(self) -> dict:
        return {"name": self.name, "pass": self.passed,
                "measured": self.measured, "threshold": self.threshold,
                "note": self.note}


@dataclass
class TheoryReport:
    checks: list[CheckResult] = field(default_factory=list)
    config_hash: str = ""
    seed: int | None = None

    @property
    def passed_all(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def failing(self) -> list[str]:
        return [c.name for c in self.checks if not c.passed]

    def extend(self, other: "TheoryReport"):
        self.checks.extend(other.checks)

    def to_json(self) -> list[dict]:
        out = []
        for c in self.checks:
            row = c.to_json()
            row["config_hash"] = self.config_hash
            row["seed"] = self.seed
            out.append(row)
        return out


# --------------------------------------------------------------------------
# The g-function and attention diagnostics
# --------------------------------------------------------------------------

def g(x, T: int):
    """Integrated rate law of the attention-gap dynamics:
    g(x) = 2x + 2 sinh(x - log T).  Strictly increasing; g(log T) = 2 log T.
    """
    if T < 2:
        raise ValueError("g requires T >= 2")
    x = np.asarray(x, dtype=float)
    out = 2.0 * x + 2.0 * np.sinh(x - math.log(T))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class AttentionDiagnostics:
    """Signal/noise attention and both attention-gap families at one state.

    lambda_plus/minus: <W mu_k, p>.  rho_attn[i, t]: <W eps_t^(i), p>.
    Lambda[i, j]: score gap of token 1 over token lambda_token_indices(T)[j];
    Gamma[i, j]: gap of token 2 over token gamma_token_indices(T)[j].
    ``Gamma[:, 0] == -Lambda[:, 0]`` exactly (both compare tokens 1 and 2).
    """

    lambda_plus: float
    lambda_minus: float
    rho_attn: np.ndarray
    Lambda: np.ndarray
    Gamma: np.ndarray
    attn_scores: np.ndarray


def compute_diagnostics(state: ModelState, dataset: Dataset,
                        signals: SignalBasis) -> AttentionDiagnostics:
    n, T, d = dataset.X.shape
    q = state.W.T @ state.p
    u = (dataset.X.reshape(n * T, d) @ q).reshape(n, T)
    rho_attn = (dataset.noise.reshape(n * T, d) @ q).reshape(n, T)
    return AttentionDiagnostics(
        lambda_plus=float(signals.mu_plus @ q),
        lambda_minus=float(signals.mu_minus @ q),
        rho_attn=rho_attn,
        Lambda=u[:, :1] - u[:, lambda_token_indices(T)],
        Gamma=u[:, 1:2] - u[:, gamma_token_indices(T)],
        attn_scores=u,
    )


class InteractionTerms:
    """Softmax- and score-weighted inner products driving the updates.

    All seven families reduce to inner products with the per-sample
    aggregated direction c_i = sum_t s_t (gamma_t - f_i) x_t:

        I_{i,+-}    = <c_i, mu_+->          I_{i,j,u}   = <c_i, eps_u^(j)>
        Iw_{i,+-}   = <W c_i, W mu_+->      Iw_{i,j,u}  = <W c_i, W eps_u^(j)>
        Ip_i        = <W c_i, p>

    Noise-indexed families are computed lazily per requested (j, u) to keep
    memory at O(n d) instead of O(n^2 T) tensors times d-sized work.
    """

    def __init__(self, state: ModelState, dataset: Dataset,
                 signals: SignalBasis):
        n, T, d = dataset.X.shape
        flat = dataset.X.reshape(n * T, d)
        u = (flat @ (state.W.T @ state.p)).reshape(n, T)
        probs = softmax(u, axis=-1)
        gamma = (flat @ state.nu).reshape(n, T)
        out = np.einsum("it,it->i", probs, gamma)
        self.omega = probs * (gamma - out[:, None])
        self.outputs = out
        self.probs = probs
        self.c = np.einsum("it,itd->id", self.omega, dataset.X)
        self.Wc = self.c @ state.W.T
        self._W = state.W
        self._p = state.p
        self._noise = dataset.noise
        self.I_plus = self.c @ signals.mu_plus
        self.I_minus = self.c @ signals.mu_minus
        self.Iw_plus = self.Wc @ (state.W @ signals.mu_plus)
        self.Iw_minus = self.Wc @ (state.W @ signals.mu_minus)
        self.I_p = self.Wc @ state.p

    def I_noise(self, j: int, u: int) -> np.ndarray:
        return self.c @ self._noise[j, u]

    def Iw_noise(self, j: int, u: int) -> np.ndarray:
        return self.Wc @ (self._W @ self._noise[j, u])

    def noise_tensor(self) -> np.ndarray:
        """All I_{i,j,u}, shape (n, n, T).  Materialize only at small scale."""
        n, T, d = self._noise.shape
        return (self.c @ self._noise.reshape(n * T, d).T).reshape(n, n, T)

    def noise_tensor_w(self) -> np.ndarray:
        n, T, d = self._noise.shape
        WE = self._noise.reshape(n * T, d) @ self._W.T
        return (self.Wc @ WE.T).reshape(n, n, T)


def compute_interactions(state: ModelState, dataset: Dataset,
                         signals: SignalBasis) -> InteractionTerms:
    return InteractionTerms(state, dataset, signals)


# --------------------------------------------------------------------------
# One-step update identities
# --------------------------------------------------------------------------

def verify_update_identity(state: ModelState, dataset: Dataset,
                           signals: SignalBasis, alpha: float,
                           tol: float = 1e-9) -> TheoryReport:
    """Check that one GD step moves every tracked bilinear quantity by its
    interaction-term expression (first order in alpha) plus the exact
    alpha^2 cross term.

    Covers the signal/noise attention updates (lambda_+1, lambda_-1, every
    rho_{j,u}), the squared norm of p, and the squared norms / pairwise
    inner products of W applied to both signals and every noise vector.
    """
    n, T, d = dataset.X.shape
    inter = compute_interactions(state, dataset, signals)
    y = dataset.y_train
    lp = loss_derivative(y * inter.outputs)
    a_coef = (-lp) * y / n                     # (n,)
    gw = grad_w(dataset, state)
    gp = grad_p(dataset, state)
    new = gd_step(state, dataset, alpha)

    pp = float(state.p @ state.p)
    E = dataset.noise.reshape(n * T, d)         # noise vectors, row-major (j,u)
    I_noise = (inter.c @ E.T)                   # (n, nT)
    WE0 = E @ state.W.T
    WE1 = E @ new.W.T
    Iw_noise = inter.Wc @ WE0.T                 # (n, nT)
    q0 = state.W.T @ state.p
    q1 = new.W.T @ new.p
    cross = gw.T @ gp                           # (d,) since gw is rank one

    report = TheoryReport()

    def add(name, lhs, rhs):
        err = float(np.max(rel_err(lhs, rhs))) if np.size(lhs) else 0.0
        report.checks.append(CheckResult(
            name=name, passed=err <= tol,
            measured={"max_rel_err": err}, threshold=tol))

    # signal and noise attention
    for nm, mu, Iw, I in (("update_lambda_plus", signals.mu_plus,
                           inter.Iw_plus, inter.I_plus),
                          ("update_lambda_minus", signals.mu_minus,
                           inter.Iw_minus, inter.I_minus)):
        lhs = float(mu @ q1) - float(mu @ q0)
        rhs = alpha * float(a_coef @ (Iw + pp * I)) \
            + alpha * alpha * float(mu @ cross)
        add(nm, lhs, rhs)

    lhs_rho = E @ q1 - E @ q0                                   # (nT,)
    rhs_rho = alpha * (a_coef @ (Iw_noise + pp * I_noise)) \
        + alpha * alpha * (E @ cross)
    add("update_rho", lhs_rho, rhs_rho)

    # squared norm of p
    lhs = float(new.p @ new.p) - pp
    rhs = 2 * alpha * float(a_coef @ inter.I_p) \
        + alpha * alpha * float(gp @ gp)
    add("update_p_norm", lhs, rhs)

    # norms and inner products through W
    lam = {"+": float(signals.mu_plus @ q0), "-": float(signals.mu_minus @ q0)}
    Wmu0 = {"+": state.W @ signals.mu_plus, "-": state.W @ signals.mu_minus}
    Wmu1 = {"+": new.W @ signals.mu_plus, "-": new.W @ signals.mu_minus}
    gwmu = {"+": gw @ signals.mu_plus, "-": gw @ signals.mu_minus}
    I_sig = {"+": inter.I_plus, "-": inter.I_minus}

    for k in ("+", "-"):
        lhs = float(Wmu1[k] @ Wmu1[k]) - float(Wmu0[k] @ Wmu0[k])
        rhs = 2 * alpha * lam[k] * float(a_coef @ I_sig[k]) \
            + alpha * alpha * float(gwmu[k] @ gwmu[k])
        add(f"update_w_norm_mu_{k}", lhs, rhs)

    rho0 = E @ q0                                               # (nT,)
    gwE = E @ gw.T                                              # (nT, d)
    lhs_wn = np.einsum("md,md->m", WE1, WE1) - np.einsum("md,md->m", WE0, WE0)
    rhs_wn = 2 * alpha * rho0 * (a_coef @ I_noise) \
        + alpha * alpha * np.einsum("md,md->m", gwE, gwE)
    add("update_w_norm_eps", lhs_wn, rhs_wn)

    lhs = float(Wmu1["+"] @ Wmu1["-"]) - float(Wmu0["+"] @ Wmu0["-"])
    rhs = alpha * float(a_coef @ (I_sig["-"] * lam["+"] + I_sig["+"] * lam["-"])) \
        + alpha * alpha * float(gwmu["+"] @ gwmu["-"])
    add("update_w_cross_mu", lhs, rhs)

    for k in ("+", "-"):
        lhs_c = WE1 @ Wmu1[k] - WE0 @ Wmu0[k]                   # (nT,)
        rhs_c = alpha * ((a_coef @ I_noise) * lam[k]
                         + float(a_coef @ I_sig[k]) * rho0) \
            + alpha * alpha * (gwE @ gwmu[k])
        add(f"update_w_cross_mu_{k}_eps", lhs_c, rhs_c)

    # pairwise noise-noise inner products
    lhs_pair = WE1 @ WE1.T - WE0 @ WE0.T                        # (nT, nT)
    s_vec = a_coef @ I_noise                                    # (nT,)
    rhs_pair = np.outer(rho0, s_vec) + np.outer(s_vec, rho0)
    rhs_pair *= alpha
    rhs_pair += alpha * alpha * (gwE @ gwE.T)
    mask = ~np.eye(n * T, dtype=bool)
    add("update_w_cross_eps_pairs", lhs_pair[mask], rhs_pair[mask])

    return report


# --------------------------------------------------------------------------
# Token scores
# --------------------------------------------------------------------------

def _phi(x: float) -> float:
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def token_score_check(dataset: Dataset, nu: np.ndarray,
                      binom_sigmas: float = 3.0) -> TheoryReport:
    """Verify the sign/scale pattern of token scores gamma_t = nu^T x_t.

    For clean samples the relevant token score matches the label, same-class
    weak tokens match, and the confusing token opposes; for noisy samples the
    pattern flips.  Pass thresholds are the Gaussian-noise success
    probabilities minus ``binom_sigmas`` binomial standard errors, so the
    check is exact at sigma_eps = 0 and statistical otherwise.
    """
    n, T, d = dataset.X.shape
    gamma = (dataset.X.reshape(n * T, d) @ nu).reshape(n, T)
    signal_score = ((dataset.X - dataset.noise).reshape(n * T, d) @ nu).reshape(n, T)
    noise_score = gamma - signal_score
    sigma_nu = dataset.config.sigma_eps * float(np.linalg.norm(nu))

    roles = dataset.roles
    cols = {Role.RELEVANT: [t for t, r in enumerate(roles) if r == Role.RELEVANT],
            Role.WEAK_CONFUSING: [t for t, r in enumerate(roles)
                                  if r == Role.WEAK_CONFUSING],
            Role.WEAK_SAME: [t for t, r in enumerate(roles) if r == Role.WEAK_SAME]}
    report = TheoryReport()
    abs_noise = np.abs(noise_score)
    quantiles = {"median_abs_noise": float(np.median(abs_noise)),
                 "p95_abs_noise": float(np.quantile(abs_noise, 0.95))}

    def frac_and_expected(idx, col_list, sign):
        if len(idx) == 0 or not col_list:
            return None
        ys = dataset.y_train[idx][:, None]
        got = sign * ys * gamma[np.ix_(idx, col_list)] > 0
        margin = np.abs(signal_score[np.ix_(idx, col_list)])
        if sigma_nu == 0:
            expected = 1.0
        else:
            expected = float(np.mean([_phi(m / sigma_nu) for m in margin.ravel()]))
        count = got.size
        slack = binom_sigmas * math.sqrt(max(expected * (1 - expected), 0.0) / count)
        return float(got.mean()), expected, slack, float(np.mean(margin))

    cases = [
        ("token_score_relevant_clean", dataset.clean_idx, cols[Role.RELEVANT], +1),
        ("token_score_confusing_clean", dataset.clean_idx,
         cols[Role.WEAK_CONFUSING], -1),
        ("token_score_weak_same_clean", dataset.clean_idx, cols[Role.WEAK_SAME], +1),
        ("token_score_relevant_noisy", dataset.noisy_idx, cols[Role.RELEVANT], -1),
        ("token_score_confusing_noisy", dataset.noisy_idx,
         cols[Role.WEAK_CONFUSING], +1),
    ]
    for name, idx, col_list, sign in cases:
        stats = frac_and_expected(idx, col_list, sign)
        if stats is None:
            report.checks.append(CheckResult(name, True, {"count": 0},
                                             note="no samples in this class"))
            continue
        frac, expected, slack, margin = stats
        report.checks.append(CheckResult(
            name, passed=frac >= expected - slack - 1e-9,
            measured={"fraction": frac, "expected": expected,
                      "mean_signal_margin": margin, **quantiles},
            threshold={"min_fraction": expected - slack}))
    return report


# --------------------------------------------------------------------------
# Softmax concentration
# --------------------------------------------------------------------------

def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax_bound_check(probs: np.ndarray, Lambda: np.ndarray,
                        identity_tol: float = 1e-12,
                        saturation_gap: float = 500.0) -> TheoryReport:
    """At one state: (a) the exact rewriting of s_1 (1 - s_1) in terms of
    attention gaps, (b) the cosh bracket with the measured gap-ratio
    constant c = c'^3 T / (T - 1), and (c) s_u (1 - s_u) <= s_t (1 - s_t)
    for the best-attended token t.

    Rows whose gaps exceed ``saturation_gap`` in magnitude are skipped by
    the bracket (exp underflow makes both sides zero).
    """
    n, Tm1 = Lambda.shape
    T = Tm1 + 1
    lhs = probs[:, 0] * probs[:, 1:].sum(axis=1)
    # rhs = sig(L) * sig(-L) with L = log sum_t exp(-Lambda_t), stably
    neg = -Lambda
    m = neg.max(axis=1, keepdims=True)
    L = (m + np.log(np.exp(neg - m).sum(axis=1, keepdims=True))).ravel()
    rhs = _sigmoid(L) * _sigmoid(-L)
    id_err = float(np.max(rel_err(lhs, rhs, floor=1e-300)))

    cprime = np.exp(Lambda.max(axis=1) - Lambda.min(axis=1))
    c = cprime ** 3 * T / (T - 1)
    denom = 2.0 + 2.0 * np.cosh(np.clip(Lambda - math.log(T), -700, 700))
    bound = 1.0 / denom
    live = np.abs(Lambda).max(axis=1) <= saturation_gap
    ok_upper = lhs[live, None] <= c[live, None] * bound[live] * (1 + 1e-9)
    ok_lower = lhs[live, None] * (1 + 1e-9) >= bound[live] / c[live, None]
    bracket_ok = bool(np.all(ok_upper) and np.all(ok_lower))

    sq = probs * (1.0 - probs)
    best = sq[np.arange(n), probs.argmax(axis=1)]
    d2_ok = bool(np.all(sq <= best[:, None] * (1 + 1e-12) + 1e-300))

    report = TheoryReport()
    report.checks.append(CheckResult(
        "softmax_identity", passed=id_err <= identity_tol,
        measured={"max_rel_err": id_err}, threshold=identity_tol))
    report.checks.append(CheckResult(
        "softmax_bracket", passed=bracket_ok,
        measured={"max_gap_ratio": float(cprime.max()),
                  "skipped_saturated_rows": int(np.sum(~live))},
        threshold="c'^3 T/(T-1) bracket"))
    report.checks.append(CheckResult(
        "softmax_best_token_dominates", passed=d2_ok, measured={}))
    return report


def softmax_bound_scan(trace: TrainTrace,
                       identity_tol: float = 1e-12) -> TheoryReport:
    """Run :func:`softmax_bound_check` at every logged step of a trace and
    aggregate the worst case."""
    worst_id = 0.0
    bracket_all = True
    d2_all = True
    skipped = 0
    for k in range(trace.n_logged):
        rep = softmax_bound_check(trace.probs[k], trace.Lambda[k],
                                  identity_tol=identity_tol)
        worst_id = max(worst_id, rep.checks[0].measured["max_rel_err"])
        bracket_all &= rep.checks[1].passed
        skipped += rep.checks[1].measured["skipped_saturated_rows"]
        d2_all &= rep.checks[2].passed
    report = TheoryReport()
    report.checks.append(CheckResult(
        "softmax_identity_full_trace", passed=worst_id <= identity_tol,
        measured={"max_rel_err": worst_id}, threshold=identity_tol))
    report.checks.append(CheckResult(
        "softmax_bracket_full_trace", passed=bracket_all,
        measured={"skipped_saturated_rows": skipped}))
    report.checks.append(CheckResult(
        "softmax_best_token_full_trace", passed=d2_all, measured={}))
    return report


# --------------------------------------------------------------------------
# Good-run events
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class GoodRunTolerances:
    norm_rtol: float = 0.10      # two-sided band around each norm scale
    inner_c: float = 5.0         # multiplier on the inner-product caps
    delta: float = 0.01          # failure probability inside log terms


@dataclass(frozen=True)
class GoodRunEvent:
    name: str
    measured: float              # worst case over the indexed family
    lo: float | None
    hi: float | None
    vacuous: bool = False

    @property
    def holds(self) -> bool:
        if self.vacuous:
            return True
        if self.lo is not None and self.measured < self.lo:
            return False
        if self.hi is not None and self.measured > self.hi:
            return False
        return True


@dataclass
class GoodRunReport:
    events: list[GoodRunEvent]

    def __getitem__(self, name: str) -> GoodRunEvent:
        for e in self.events:
            if e.name == name:
                return e
        raise KeyError(name)

    @property
    def holds_all(self) -> bool:
        return all(e.holds for e in self.events)

    def to_json(self) -> list[dict]:
        return [{"name": e.name, "measured": e.measured, "lo": e.lo,
                 "hi": e.hi, "holds": e.holds, "vacuous": e.vacuous}
                for e in self.events]


ALL_GOOD_RUN_GROUPS = ("noise_norms", "noise_inner", "init_norms",
                       "init_inner", "signal_noise_inner", "counts")


def good_run_check(dataset: Dataset, init_state: ModelState | None,
                   signals: SignalBasis, sigma_w: float = 0.0,
                   sigma_p: float = 0.0,
                   tol: GoodRunTolerances = GoodRunTolerances(),
                   groups=ALL_GOOD_RUN_GROUPS) -> GoodRunReport:
    """Finite-scale concentration events over one realized dataset and
    initialization: noise-norm bands, inner-product caps scaled by
    ``tol.inner_c``, and clean/noisy class-count brackets.

    Events whose natural scale is zero (for instance noise events at
    sigma_eps = 0) are reported as vacuous rather than pass/fail.
    """
    cfg = dataset.config
    n, T, d = dataset.X.shape
    sig = cfg.sigma_eps
    mu = cfg.mu_norm
    log_term = math.log(T * n / tol.delta)
    events: list[GoodRunEvent] = []
    E = dataset.noise.reshape(n * T, d)

    def band(name, values, scale, vacuous=False):
        if vacuous or scale == 0.0:
            events.append(GoodRunEvent(name, float(np.max(np.abs(values))),
                                       None, None, vacuous=True))
            return
        dev = float(np.max(np.abs(values / scale - 1.0)))
        events.append(GoodRunEvent(name, dev, None, tol.norm_rtol))

    def cap(name, worst, bound, vacuous=False):
        if vacuous:
            events.append(GoodRunEvent(name, worst, None, None, vacuous=True))
            return
        events.append(GoodRunEvent(name, worst, None, bound))

    if "noise_norms" in groups:
        band("norm_eps", np.linalg.norm(E, axis=1), sig * math.sqrt(d),
             vacuous=(sig == 0))

    if "noise_inner" in groups:
        if sig == 0:
            cap("inner_eps_eps", 0.0, None, vacuous=True)
        else:
            gram = E @ E.T
            off = gram[~np.eye(n * T, dtype=bool)]
            cap("inner_eps_eps", float(np.max(np.abs(off))),
                tol.inner_c * sig * sig * math.sqrt(d) * log_term)

    need_W = init_state is not None and any(
        grp in groups for grp in ("init_norms", "init_inner"))
    if need_W:
        W0, p0 = init_state.W, init_state.p
        Wmu_p = W0 @ signals.mu_plus
        Wmu_m = W0 @ signals.mu_minus
        WE = E @ W0.T
        if "init_norms" in groups:
            band("norm_W_mu_plus", np.linalg.norm(Wmu_p),
                 sigma_w * mu * math.sqrt(d), vacuous=(sigma_w == 0))
            band("norm_W_mu_minus", np.linalg.norm(Wmu_m),
                 sigma_w * mu * math.sqrt(d), vacuous=(sigma_w == 0))
            band("norm_W_eps", np.linalg.norm(WE, axis=1), sigma_w * sig * d,
                 vacuous=(sigma_w == 0 or sig == 0))
            band("norm_p", np.linalg.norm(p0), sigma_p * math.sqrt(d),
                 vacuous=(sigma_p == 0))
        if "init_inner" in groups:
            sw2 = sigma_w * sigma_w
            vac_w = sigma_w == 0
            cap("inner_Wmu_Wmu", abs(float(Wmu_p @ Wmu_m)),
                tol.inner_c * sw2 * mu * mu * math.sqrt(d) * log_term,
                vacuous=vac_w)
            cap("inner_Wmu_Weps",
                float(np.max(np.abs(np.concatenate([WE @ Wmu_p, WE @ Wmu_m]))))
                if sig > 0 else 0.0,
                tol.inner_c * sw2 * sig * mu * d * log_term,
                vacuous=vac_w or sig == 0)
            if sig > 0 and not vac_w:
                gw = WE @ WE.T
                cap("inner_Weps_Weps",
                    float(np.max(np.abs(gw[~np.eye(n * T, dtype=bool)]))),
                    tol.inner_c * sw2 * sig * sig * d ** 1.5 * log_term)
            else:
                cap("inner_Weps_Weps", 0.0, None, vacuous=True)
            cap("inner_Wmu_p",
                max(abs(float(Wmu_p @ p0)), abs(float(Wmu_m @ p0))),
                tol.inner_c * sigma_w * sigma_p * mu * math.sqrt(d) * log_term,
                vacuous=vac_w or sigma_p == 0)
            cap("inner_Weps_p", float(np.max(np.abs(WE @ p0))) if sig > 0 else 0.0,
                tol.inner_c * sigma_w * sigma_p * sig * d * log_term,
                vacuous=vac_w or sigma_p == 0 or sig == 0)

    if "signal_noise_inner" in groups:
        if sig == 0:
            cap("inner_mu_eps", 0.0, None, vacuous=True)
            cap("inner_nu_eps", 0.0, None, vacuous=True)
        else:
            worst_mu = float(np.max(np.abs(
                np.concatenate([E @ signals.mu_plus, E @ signals.mu_minus]))))
            cap("inner_mu_eps", worst_mu,
                tol.inner_c * sig * mu * math.sqrt(log_term))
            if init_state is not None:
                nu_norm = float(np.linalg.norm(init_state.nu))
                cap("inner_nu_eps", float(np.max(np.abs(E @ init_state.nu))),
                    tol.inner_c * sig * nu_norm * math.sqrt(log_term),
                    vacuous=(nu_norm == 0))

    if "counts" in groups:
        eta = cfg.eta
        for name, count in (("count_clean_pos", len(dataset.clean_pos)),
                            ("count_clean_neg", len(dataset.clean_neg))):
            events.append(GoodRunEvent(name, float(count),
                                       (2 - 3 * eta) * n / 4,
                                       (2 - eta) * n / 4))
        for name, count in (("count_noisy_pos", len(dataset.noisy_pos)),
                            ("count_noisy_neg", len(dataset.noisy_neg))):
            events.append(GoodRunEvent(name, float(count),
                                       eta * n / 4, 3 * eta * n / 4))

    return GoodRunReport(events=events)


# --------------------------------------------------------------------------
# g-linearity and trace-level measurements
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SeriesFit:
    slope: float
    intercept: float
    r2: float
    degenerate: bool = False


@dataclass(frozen=True)
class GLinearityResult:
    pooled: SeriesFit
    per_series: list[SeriesFit]
    n_points: int
    window: tuple[int, int]


def _ols(x: np.ndarray, y: np.ndarray) -> SeriesFit:
    if len(x) < 2:
        raise ValueError("need at least 2 points for a line fit")
    xm, ym = x.mean(), y.mean()
    sxx = float(((x - xm) ** 2).sum())
    sst = float(((y - ym) ** 2).sum())
    if sxx == 0.0:
        raise ValueError("window contains a single distinct step")
    slope = float(((x - xm) * (y - ym)).sum()) / sxx
    intercept = ym - slope * xm
    if sst == 0.0:
        return SeriesFit(slope=0.0, intercept=ym, r2=math.nan, degenerate=True)
    ssr = float(((y - (intercept + slope * x)) ** 2).sum())
    return SeriesFit(slope=slope, intercept=intercept, r2=1.0 - ssr / sst)


def g_linearity(trace: TrainTrace, sample_indices, quantity: str,
                window: tuple[int, int],
                pooled: str = "mean") -> GLinearityResult:
    """Least-squares fit of g(attention gap) against the step index.

    ``quantity`` selects the gap family: "Lambda" (token 1 against every
    other token), "Gamma" (token 2 against tokens 3..T), or
    "Gamma_relevant_shifted" (token 2 against token 1, shifted down by
    log(1/rho) so the comparison is on the weak-signal scale).

    The pooled fit targets the common rate law: by default it fits the mean
    of the selected series, which measures linearity in time without being
    diluted by the constant-factor slope spread between samples and tokens
    (per-series fits are returned alongside).  ``pooled="stacked"`` fits all
    points jointly instead.
    """
    samples = np.asarray(sample_indices, dtype=int)
    lo, hi = window
    mask = (trace.steps >= lo) & (trace.steps <= hi)
    if mask.sum() < 2:
        raise ValueError(f"window {window} selects fewer than 2 logged points")
    x = trace.steps[mask].astype(float)
    T = trace.T
    if quantity == "Lambda":
        vals = trace.Lambda[np.ix_(mask, samples)]
    elif quantity == "Gamma":
        vals = trace.Gamma[np.ix_(mask, samples)][:, :, 1:]
    elif quantity == "Gamma_relevant_shifted":
        rho = trace.meta["rho"]
        vals = trace.Gamma[np.ix_(mask, samples)][:, :, :1] - math.log(1.0 / rho)
    else:
        raise ValueError(f"unknown quantity {quantity!r}")
    gv = g(vals, T)
    series = gv.reshape(len(x), -1)
    if series.shape[1] == 0:
        raise ValueError("no gap series selected (empty samples or T too small)")
    fits = [_ols(x, series[:, k]) for k in range(series.shape[1])]
    if pooled == "mean":
        pooled_fit = _ols(x, series.mean(axis=1))
    elif pooled == "stacked":
        pooled_fit = _ols(np.repeat(x, series.shape[1]), series.ravel())
    else:
        raise ValueError(f"unknown pooled mode {pooled!r}")
    return GLinearityResult(pooled=pooled_fit, per_series=fits,
                            n_points=int(mask.sum()), window=(lo, hi))


def pre_saturation_window(trace: TrainTrace, level: float = 0.99) -> tuple[int, int]:
    """From the first logged step after 0 until the relevant-token softmax
    of any sample first exceeds ``level`` (the dynamics saturate beyond)."""
    s1_max = trace.probs[:, :, 0].max(axis=1)
    start = int(trace.steps[1]) if trace.n_logged > 1 else int(trace.steps[0])
    crossed = np.nonzero(s1_max > level)[0]
    end = int(trace.steps[crossed[0]]) if len(crossed) else int(trace.steps[-1])
    if end <= start:
        end = int(trace.steps[-1])
    return start, end


def noisy_stage_windows(trace: TrainTrace, s1_floor: float = 0.02,
                        s2_takeover: float = 0.50,
                        s2_saturation: float = 0.99) -> tuple[tuple[int, int],
                                                              tuple[int, int]]:
    """Empirical stage split for noisy samples.

    Stage 1 is the relevant-token suppression phase: it starts where the
    mean noisy s_1 peaks (at moderate SNR the shared signal growth lifts s_1
    first) and ends when the mean drops below ``s1_floor`` (suppression
    exhausted).  Stage 2 covers the confusing-token takeover: from the last
    crossing of ``s2_takeover`` among samples that ever cross it, to their
    saturation at ``s2_saturation``.  Returns (early, late) in raw steps.
    """
    noisy = trace.noisy_idx
    if len(noisy) == 0:
        raise ValueError("trace has no noisy samples")
    L = trace.n_logged
    s1 = trace.probs[:, noisy, 0].mean(axis=1)
    s2 = trace.probs[:, noisy, 1]
    onset = int(s1.argmax())
    below = np.nonzero(s1[onset:] < s1_floor)[0]
    floor_idx = onset + int(below[0]) if len(below) else L - 1
    onset = min(onset, L - 2)
    if floor_idx <= onset:
        floor_idx = min(onset + 1, L - 1)
    early = (int(trace.steps[onset]), int(trace.steps[floor_idx]))

    takeover = []
    for j in range(len(noisy)):
        hit = np.nonzero(s2[:, j] >= s2_takeover)[0]
        if len(hit):
            takeover.append(int(hit[0]))
    if takeover:
        late_start = min(max(takeover), L - 2)
        crossed = s2[:, [j for j in range(len(noisy))
                         if len(np.nonzero(s2[:, j] >= s2_takeover)[0])]]
        sat = np.nonzero(crossed.min(axis=1) >= s2_saturation)[0]
        late_end = int(sat[0]) if len(sat) else L - 1
        if late_end <= late_start:
            late_end = L - 1
    else:
        late_start, late_end = max(floor_idx, L - 2), L - 1
    late = (int(trace.steps[late_start]), int(trace.steps[late_end]))
    return early, late


def signal_growth_check(trace: TrainTrace, burn_in: float = 0.1) -> TheoryReport:
    """Growth of the class-signal attention lambda_k(tau).

    Reports whether both lambdas rise after a burn-in, the fraction of
    increasing steps, and the slope of lambda against log(tau)."""
    report = TheoryReport()
    k0 = max(1, int(burn_in * trace.n_logged))
    steps = trace.steps.astype(float)
    n_snr2 = None
    meta = trace.meta
    if all(k in meta for k in ("n", "d", "mu_norm", "sigma_eps")):
        if meta["sigma_eps"] > 0:
            n_snr2 = meta["n"] * (meta["mu_norm"] ** 2
                                  / (meta["sigma_eps"] ** 2 * meta["d"]))
    for name, lam in (("lambda_plus", trace.lambda_plus),
                      ("lambda_minus", trace.lambda_minus)):
        tail = lam[k0:]
        diffs = np.diff(tail)
        frac_up = float((diffs > 0).mean()) if len(diffs) else math.nan
        rise = float(tail[-1] - tail[0]) if len(tail) else math.nan
        pos = steps[k0:] > 0
        fit = _ols(np.log(steps[k0:][pos]), tail[pos]) if pos.sum() >= 2 else None
        measured = {"rise_after_burn_in": rise, "fraction_increasing": frac_up,
                    "log_tau_slope": fit.slope if fit else math.nan,
                    "n_snr2": n_snr2}
        report.checks.append(CheckResult(
            f"signal_growth_{name}",
            passed=bool(rise > 0 and frac_up > 0.5),
            measured=measured))
    return report


class Regime:
    HARMFUL = "harmful"
    BENIGN = "benign"
    NOT_OVERFITTING = "not-overfitting"


def classify_regime(config: DataConfig, n: int | None = None,
                    theta_benign: float = 1.0,
                    theta_harmful: float = 1.0) -> str:
    """Advisory regime from the signal-to-noise ratio.

    Harmful when SNR^2 sqrt(d) < theta_harmful (even noise-noise overlaps
    drown the signal); otherwise not-overfitting when n SNR^2 > theta_benign
    (signal learning dominates); benign in between.  The thresholds stand in
    for asymptotic constants and are deliberately exposed.
    """
    if n is None:
        n = config.n
    s2 = data_snr(config) ** 2
    if s2 * math.sqrt(config.d) < theta_harmful:
        return Regime.HARMFUL
    if n * s2 > theta_benign:
        return Regime.NOT_OVERFITTING
    return Regime.BENIGN


@dataclass(frozen=True)
class GrokkingTimes:
    tau_fit: int | None
    tau_gen: int | None


def measure_grokking(trace: TrainTrace, fit_threshold: float,
                     gen_threshold: float) -> GrokkingTimes:
    """First logged steps at which training accuracy (against the noisy
    labels) and test accuracy cross their thresholds; None if never."""
    for name, v in (("fit_threshold", fit_threshold),
                    ("gen_threshold", gen_threshold)):
        if not (0.0 < v <= 1.0):
            raise ValueError(f"{name} must lie in (0, 1]")
    fit_hits = np.nonzero(trace.train_acc >= fit_threshold)[0]
    gen_hits = np.nonzero(trace.test_acc >= gen_threshold)[0]
    return GrokkingTimes(
        tau_fit=int(trace.steps[fit_hits[0]]) if len(fit_hits) else None,
        tau_gen=int(trace.steps[gen_hits[0]]) if len(gen_hits) else None,
    )


def etf_gradient_check(config: MulticlassConfig, mus: np.ndarray,
                       mc_samples: int, rng: np.random.Generator) -> np.ndarray:
    """Cosine similarity between the Monte Carlo head-gradient direction at
    zero initialization and the centered class signal mu_k - mean(mu), one
    entry per class.  Label noise rescales but does not rotate the target.
    """
    if mc_samples < 1000:
        raise ValueError("need at least 1000 Monte Carlo samples")
    est = head_gradient_estimate(config, mus, mc_samples, rng)   # (d, K)
    target = mus - mus.mean(axis=0, keepdims=True)               # (K, d)
    cos = np.empty(config.K)
    for k in range(config.K):
        e, t = est[:, k], target[k]
        cos[k] = float(e @ t / (np.linalg.norm(e) * np.linalg.norm(t)))
    return cos


@dataclass(frozen=True)
class InitThresholds:
    s_uniformity: float = 0.25    # max_t |s_t(0) - 1/T| * T
    lambda_gap: float = 0.5       # max |Lambda(0)|
    gamma_gap: float = 0.5        # max |Gamma(0)|
    first_step_drift: float = 0.1  # max |delta lambda|, |delta rho|


def init_checks(state0: ModelState, dataset: Dataset, signals: SignalBasis,
                alpha: float,
                thresholds: InitThresholds = InitThresholds()) -> TheoryReport:
    """Near-uniform softmax and vanishing attention gaps at initialization,
    plus smallness of the first gradient step's attention drift."""
    T = dataset.T
    d0 = compute_diagnostics(state0, dataset, signals)
    probs = softmax(d0.attn_scores, axis=-1)
    s_dev = float(np.max(np.abs(probs - 1.0 / T)) * T)
    lam_gap = float(np.max(np.abs(d0.Lambda)))
    gam_gap = float(np.max(np.abs(d0.Gamma)))
    d1 = compute_diagnostics(gd_step(state0, dataset, alpha), dataset, signals)
    dlam = max(abs(d1.lambda_plus - d0.lambda_plus),
               abs(d1.lambda_minus - d0.lambda_minus))
    drho = float(np.max(np.abs(d1.rho_attn - d0.rho_attn)))
    th = thresholds
    report = TheoryReport()
    report.checks.append(CheckResult(
        "init_softmax_uniformity", s_dev <= th.s_uniformity,
        {"max_scaled_deviation": s_dev}, th.s_uniformity))
    report.checks.append(CheckResult(
        "init_lambda_gap", lam_gap <= th.lambda_gap,
        {"max_abs": lam_gap}, th.lambda_gap))
    report.checks.append(CheckResult(
        "init_gamma_gap", gam_gap <= th.gamma_gap,
        {"max_abs": gam_gap}, th.gamma_gap))
    report.checks.append(CheckResult(
        "init_first_step_drift", max(dlam, drho) <= th.first_step_drift,
        {"max_dlambda": float(dlam), "max_drho": drho}, th.first_step_drift))
    return report


def loss_derivative_balance(trace: TrainTrace) -> CheckResult:
    """The per-sample loss derivatives stay within the constant factor
    implied by the largest observed |f|: max|l'| / min|l'| is bounded by
    (1 + e^c) / (1 + e^{-c}) with c = max |output| over the run."""
    z = trace.y_train[None, :] * trace.outputs
    lp = np.abs(loss_derivative(z))
    ratio = float(np.max(lp.max(axis=1) / lp.min(axis=1)))
    c = float(np.max(np.abs(trace.outputs)))
    bound = (1.0 + math.exp(c)) / (1.0 + math.exp(-c))
    return CheckResult(
        "loss_derivative_balance", passed=ratio <= bound * (1 + 1e-12),
        measured={"max_ratio": ratio, "max_abs_output": c}, threshold=bound)
