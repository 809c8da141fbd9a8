"""Penalized mixture-of-durations estimation by a quasi-Newton EM.

The observed data are right-censored durations with covariates. Each
subject belongs to one of K latent risk classes; class membership
follows a multinomial logistic model on the covariates (class 0 is the
reference with a zero coefficient vector) and the duration within class
k follows a parametric distribution, geometric or discrete Weibull.
Class coefficient vectors carry an elastic-net penalty; intercepts are
free. Estimation alternates posterior computation with exact or
quasi-Newton parameter updates, and the penalized objective is
guaranteed not to increase from one iteration to the next.
"""

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import fmin_l_bfgs_b
from scipy.special import expit, log_expit, logsumexp

from .distributions import KaplanMeierCurve

ALPHA_MIN = 1e-10
INTERCEPT_BOUND = 30.0
DESCENT_SLACK = 1e-10
SOLVER_MEMORY = 10
SOLVER_MAX_ITER = 100
SOLVER_PGTOL = 1e-8
WEIBULL_LOGIT_PHI_BOUND = 16.0
WEIBULL_LOG_SHAPE_BOUNDS = (-3.0, 2.5)


class DescentViolation(RuntimeError):
    """The penalized objective increased beyond slack; signals a solver bug."""


@dataclass
class FitConfig:
    """Settings for :func:`fit`.

    Parameters
    ----------
    gamma : `float`
        Penalty strength, non-negative.

    eta : `float`
        Elastic-net mixing in [0, 1): weight ``1 - eta`` on the l1 term
        and ``eta`` on the squared l2 term.

    max_iter : `int`
        Outer iteration cap.

    rel_tol : `float`
        Stop when the relative objective change falls below this.

    parameterization : `str`
        "geometric" or "weibull" within-class durations.

    cure_mode : `bool`
        Freeze the lowest-risk class at a zero event rate so that its
        members never fail (geometric only).

    n_classes : `int`
        Number of latent classes, at least 2 (weibull supports 2).
    """

    gamma: float
    eta: float = 0.1
    max_iter: int = 500
    rel_tol: float = 1e-6
    parameterization: str = "geometric"
    cure_mode: bool = False
    n_classes: int = 2

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative, got %r" % self.gamma)
        if not 0 <= self.eta < 1:
            raise ValueError("eta must lie in [0, 1), got %r" % self.eta)
        if self.max_iter < 1:
            raise ValueError("max_iter must be positive")
        if self.rel_tol <= 0:
            raise ValueError("rel_tol must be positive")
        if self.parameterization not in ("geometric", "weibull"):
            raise ValueError("parameterization must be 'geometric' or 'weibull'")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if self.parameterization == "weibull":
            if self.n_classes != 2:
                raise ValueError("the weibull parameterization supports exactly 2 classes")
            if self.cure_mode:
                raise ValueError("cure mode requires the geometric parameterization")


@dataclass
class CmixParams:
    """Model parameters.

    Parameters
    ----------
    alphas : `np.ndarray`
        Duration parameters. Geometric: shape (K,) event rates sorted
        ascending at initialization, class 0 is the lowest risk; a zero
        first rate encodes the cure variant. Weibull: shape (K, 2) rows
        (phi, mu_k) with the scale phi shared across classes.

    betas : `np.ndarray`, shape=(K - 1, n_features)
        Logistic coefficients of the non-reference classes.

    intercepts : `np.ndarray`, shape=(K - 1,)
        Unpenalized intercepts of the non-reference classes.

    parameterization : `str`
        "geometric" or "weibull".

    cure_mode : `bool`
        Whether class 0 is frozen as never-failing.
    """

    alphas: np.ndarray
    betas: np.ndarray
    intercepts: np.ndarray
    parameterization: str = "geometric"
    cure_mode: bool = False

    def __post_init__(self):
        self.alphas = np.asarray(self.alphas, dtype=np.float64)
        self.betas = np.atleast_2d(np.asarray(self.betas, dtype=np.float64))
        self.intercepts = np.asarray(self.intercepts, dtype=np.float64)
        k = self.n_classes
        if k < 2:
            raise ValueError("need at least two classes")
        if self.betas.shape[0] != k - 1 or self.intercepts.shape != (k - 1,):
            raise ValueError("betas/intercepts must cover the %d non-reference classes" % (k - 1))
        if self.parameterization == "geometric":
            if self.alphas.ndim != 1:
                raise ValueError("geometric rates must be a vector")
            low = self.alphas[1:] if self.cure_mode else self.alphas
            if self.cure_mode and self.alphas[0] != 0.0:
                raise ValueError("cure mode freezes the first rate at zero")
            if np.any(low <= 0) or np.any(self.alphas >= 1):
                raise ValueError("geometric rates must lie in (0, 1)")
        elif self.parameterization == "weibull":
            if self.cure_mode:
                raise ValueError("cure mode requires the geometric parameterization")
            if self.alphas.shape != (k, 2):
                raise ValueError("weibull parameters must have shape (K, 2)")
            phi = self.alphas[:, 0]
            if not np.all(phi == phi[0]):
                raise ValueError("the weibull scale must be shared across classes")
            if not 0 < phi[0] < 1 or np.any(self.alphas[:, 1] <= 0):
                raise ValueError("weibull scale in (0, 1) and shapes positive required")
        else:
            raise ValueError("parameterization must be 'geometric' or 'weibull'")

    @property
    def n_classes(self):
        return self.alphas.shape[0]

    @property
    def n_features(self):
        return self.betas.shape[1]

    def copy(self):
        return CmixParams(self.alphas.copy(), self.betas.copy(), self.intercepts.copy(),
                          self.parameterization, self.cure_mode)

    def to_dict(self):
        return {
            "parameterization": self.parameterization,
            "K": int(self.n_classes),
            "alphas": self.alphas.tolist(),
            "betas": self.betas.tolist(),
            "intercepts": self.intercepts.tolist(),
            "cure_mode": bool(self.cure_mode),
        }

    @classmethod
    def from_dict(cls, doc):
        return cls(np.asarray(doc["alphas"], dtype=np.float64),
                   np.asarray(doc["betas"], dtype=np.float64),
                   np.asarray(doc["intercepts"], dtype=np.float64),
                   doc["parameterization"], bool(doc["cure_mode"]))


@dataclass
class FitTrace:
    """Convergence record of one :func:`fit` run."""

    objective_history: list
    n_iter: int
    converged: bool
    flags: list = field(default_factory=list)

    def to_dict(self):
        return {
            "objective_history": [float(v) for v in self.objective_history],
            "n_iter": int(self.n_iter),
            "converged": bool(self.converged),
            "flags": list(self.flags),
        }


def duration_days(y):
    """Round durations to whole positive days, half-days rounding up."""
    y = np.asarray(y, dtype=np.float64)
    if np.any(~np.isfinite(y)) or np.any(y <= 0):
        raise ValueError("durations must be finite and positive")
    return np.maximum(np.floor(y + 0.5), 1.0)


def _class_scores(betas, intercepts, x):
    betas = np.atleast_2d(np.asarray(betas, dtype=np.float64))
    intercepts = np.atleast_1d(np.asarray(intercepts, dtype=np.float64))
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    scores = np.empty((x.shape[0], betas.shape[0] + 1))
    scores[:, 0] = 0.0
    scores[:, 1:] = x @ betas.T + intercepts
    return scores


def mixture_weights(betas, intercepts, x):
    """Class membership probabilities under the logistic model.

    Parameters
    ----------
    betas : `np.ndarray`, shape=(K - 1, n_features)
        Non-reference class coefficients.

    intercepts : `np.ndarray`, shape=(K - 1,)
        Non-reference class intercepts.

    x : `np.ndarray`, shape=(n_samples, n_features)
        Covariates.

    Returns
    -------
    output : `np.ndarray`, shape=(n_samples, K)
        Rows are softmax weights over classes, summing to one; class 0
        is the zero-score reference.
    """
    scores = _class_scores(betas, intercepts, x)
    scores -= scores.max(axis=1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=1, keepdims=True)
    return scores


def _log_mixture_weights(betas, intercepts, x):
    scores = _class_scores(betas, intercepts, x)
    return scores - logsumexp(scores, axis=1, keepdims=True)


def _log_duration_terms(params, t, delta):
    """Per-class log contribution of each duration: the log probability
    mass at t for events, the log strict survival past t otherwise."""
    t = np.asarray(t, dtype=np.float64)
    event = np.asarray(delta) == 1
    out = np.empty((t.size, params.n_classes))
    if params.parameterization == "geometric":
        for k, alpha in enumerate(params.alphas):
            if alpha == 0.0:
                out[:, k] = np.where(event, -np.inf, 0.0)
            else:
                log_keep = np.log1p(-alpha)
                out[:, k] = np.where(event, np.log(alpha) + (t - 1.0) * log_keep,
                                     t * log_keep)
    else:
        b = np.log1p(-params.alphas[0, 0])
        for k in range(params.n_classes):
            mu = params.alphas[k, 1]
            head = b * t ** mu
            tail = b * (t + 1.0) ** mu
            log_pmf = head + np.log(-np.expm1(tail - head))
            out[:, k] = np.where(event, log_pmf, tail)
    return out


def e_step(params, t, delta, x):
    """Posterior class responsibilities given current parameters.

    Parameters
    ----------
    params : `CmixParams`
        Current parameters.

    t : `np.ndarray`, shape=(n_samples,)
        Durations in whole days (see :func:`duration_days`).

    delta : `np.ndarray`, shape=(n_samples,)
        Event indicators in {0, 1}.

    x : `np.ndarray`, shape=(n_samples, n_features)
        Covariates.

    Returns
    -------
    output : `np.ndarray`, shape=(n_samples, K)
        Rows sum to one. In cure mode an observed event forces a zero
        responsibility on the cured class.
    """
    log_weights = _log_mixture_weights(params.betas, params.intercepts, x)
    log_joint = log_weights + _log_duration_terms(params, t, delta)
    norm = logsumexp(log_joint, axis=1)
    impossible = ~np.isfinite(norm)
    if np.any(impossible):
        warnings.warn("%d observations had zero likelihood under every class; "
                      "assigning them to the highest-risk class" % int(impossible.sum()))
        log_joint[impossible] = -np.inf
        log_joint[impossible, -1] = 0.0
        norm[impossible] = 0.0
    return np.exp(log_joint - norm[:, None])


def neg_log_likelihood(params, t, delta, x):
    """Average negative log-likelihood of the observed durations.

    Constant factors from the censoring distribution are dropped: they
    do not depend on the parameters.
    """
    log_weights = _log_mixture_weights(params.betas, params.intercepts, x)
    log_joint = log_weights + _log_duration_terms(params, t, delta)
    return float(-logsumexp(log_joint, axis=1).mean())


def elastic_net_penalty(betas, gamma, eta):
    """Penalty sum over classes: gamma ((1 - eta) l1 + eta / 2 squared l2)."""
    betas = np.atleast_2d(np.asarray(betas, dtype=np.float64))
    l1 = np.abs(betas).sum()
    l2 = (betas * betas).sum()
    return float(gamma * ((1.0 - eta) * l1 + 0.5 * eta * l2))


def penalized_objective(params, t, delta, x, gamma, eta):
    """The quantity :func:`fit` minimizes; intercepts are not penalized."""
    return neg_log_likelihood(params, t, delta, x) + elastic_net_penalty(params.betas, gamma, eta)


def class_risk(beta, x, q_k, other_scores=None, intercept=0.0):
    """Responsibility-weighted negative log mixture weight of one class.

    Parameters
    ----------
    beta : `np.ndarray`, shape=(n_features,)
        Coefficients of the class under study.

    x : `np.ndarray`, shape=(n_samples, n_features)
        Covariates.

    q_k : `np.ndarray`, shape=(n_samples,)
        Responsibilities of the class, in [0, 1].

    other_scores : `np.ndarray`, shape=(n_samples, K - 1) or None
        Fixed linear scores of the remaining classes, reference
        included. None means a two-class model (a single zero column).

    intercept : `float`
        Intercept of the class under study.

    Returns
    -------
    output : `float`
        - mean(q_k * log pi_k) with pi_k the softmax weight.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    q_k = np.asarray(q_k, dtype=np.float64)
    u = x @ np.asarray(beta, dtype=np.float64) + intercept
    if other_scores is None:
        log_pi = log_expit(u)
    else:
        lse = logsumexp(np.column_stack([other_scores, u]), axis=1)
        log_pi = u - lse
    return float(-(q_k * log_pi).mean())


def class_risk_grad(beta, x, q_k, other_scores=None, intercept=0.0):
    """Exact gradient of :func:`class_risk` in ``beta``.

    Returns
    -------
    output : `np.ndarray`, shape=(n_features,)
        - mean over samples of q_k (1 - pi_k) x.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    q_k = np.asarray(q_k, dtype=np.float64)
    u = x @ np.asarray(beta, dtype=np.float64) + intercept
    if other_scores is None:
        pi_k = expit(u)
    else:
        lse = logsumexp(np.column_stack([other_scores, u]), axis=1)
        pi_k = np.exp(u - lse)
    return -(x.T @ (q_k * (1.0 - pi_k))) / x.shape[0]


def m_step_geometric(q, t, delta, alphas, cure_mode=False):
    """Exact rate update for geometric within-class durations.

    The update maximizes the responsibility-weighted complete
    likelihood in closed form: new rate = weighted events / weighted
    exposure. Rates are clamped away from 0 and 1; a class with zero
    weighted exposure keeps its previous rate and is flagged.

    Parameters
    ----------
    q : `np.ndarray`, shape=(n_samples, K)
        Responsibilities.

    t : `np.ndarray`, shape=(n_samples,)
        Durations in whole days.

    delta : `np.ndarray`, shape=(n_samples,)
        Event indicators.

    alphas : `np.ndarray`, shape=(K,)
        Current rates, returned unchanged where the update is undefined.

    cure_mode : `bool`
        Keep class 0 frozen at rate zero.

    Returns
    -------
    alphas : `np.ndarray`, shape=(K,)
        Updated rates.

    flags : `list` of `str`
        Diagnostics for classes that kept their previous value.
    """
    q = np.asarray(q, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    new = np.asarray(alphas, dtype=np.float64).copy()
    flags = []
    start = 1 if cure_mode else 0
    events = delta * t ** 0  # delta as float
    for k in range(start, q.shape[1]):
        exposure = float(q[:, k] @ t)
        if exposure <= 0.0:
            flags.append("class %d has zero exposure, rate kept" % k)
            continue
        new[k] = np.clip(float(q[:, k] @ events) / exposure, ALPHA_MIN, 1.0 - ALPHA_MIN)
    return new, flags


def _weibull_value_grad(z, t, delta, q, shapes_free):
    """Objective and gradient of the weighted complete negative
    log-likelihood in (logit scale, log shape_0, log shape_1)."""
    n, n_classes = q.shape
    phi = expit(z[0])
    b = log_expit(-z[0])  # log(1 - phi)
    event = delta == 1
    tp1 = t + 1.0
    log_t = np.where(t > 0, np.log(np.maximum(t, 1.0)), 0.0)
    log_tp1 = np.log(tp1)
    value = 0.0
    grad = np.zeros_like(z)
    for k in range(n_classes):
        mu = np.exp(z[1 + k])
        t1 = t ** mu
        t2 = tp1 ** mu
        head = b * t1
        tail = b * t2
        diff = tail - head  # negative
        one_minus = -np.expm1(diff)
        log_pmf = head + np.log(one_minus)
        term = np.where(event, log_pmf, tail)
        qk = q[:, k]
        value -= float(qk @ term)
        # d log pmf = (1 - r) dA + r dB with r = -exp(diff) / (1 - exp(diff))
        r = np.where(event, -np.exp(diff) / one_minus, 1.0)
        w_head = np.where(event, 1.0 - r, 0.0)
        w_tail = r
        d_phi = w_head * (-phi * t1) + w_tail * (-phi * t2)
        grad[0] -= float(qk @ d_phi)
        if shapes_free:
            d_shape = w_head * (b * t1 * log_t * mu) + w_tail * (b * t2 * log_tp1 * mu)
            grad[1 + k] -= float(qk @ d_shape)
    return value / n, grad / n


def m_step_weibull(q, t, delta, alphas, optimize_shapes=True):
    """Quasi-Newton update of the shared-scale discrete Weibull classes.

    Minimizes the responsibility-weighted complete negative
    log-likelihood over (phi, mu_0, mu_1) in a bounded reparameterized
    space. If the solver fails to improve on the current point, the
    current parameters are returned unchanged and flagged.

    Parameters
    ----------
    q : `np.ndarray`, shape=(n_samples, 2)
        Responsibilities.

    t : `np.ndarray`, shape=(n_samples,)
        Durations in whole days (zero allowed at this level).

    delta : `np.ndarray`, shape=(n_samples,)
        Event indicators.

    alphas : `np.ndarray`, shape=(2, 2)
        Current (phi, mu_k) rows, phi shared.

    optimize_shapes : `bool`
        When False the shapes are pinned and only phi moves.

    Returns
    -------
    alphas : `np.ndarray`, shape=(2, 2)
        Updated parameters.

    flags : `list` of `str`
        Solver diagnostics.
    """
    q = np.asarray(q, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    delta = np.asarray(delta)
    alphas = np.asarray(alphas, dtype=np.float64)
    lo, hi = WEIBULL_LOG_SHAPE_BOUNDS
    z0 = np.empty(3)
    z0[0] = np.clip(np.log(alphas[0, 0] / (1.0 - alphas[0, 0])),
                    -WEIBULL_LOGIT_PHI_BOUND, WEIBULL_LOGIT_PHI_BOUND)
    z0[1:] = np.clip(np.log(alphas[:, 1]), lo, hi)
    bounds = [(-WEIBULL_LOGIT_PHI_BOUND, WEIBULL_LOGIT_PHI_BOUND)]
    if optimize_shapes:
        bounds += [(lo, hi)] * 2
    else:
        bounds += [(z0[1], z0[1]), (z0[2], z0[2])]

    value0, _ = _weibull_value_grad(z0, t, delta, q, optimize_shapes)
    z_hat, value_hat, info = fmin_l_bfgs_b(
        _weibull_value_grad, z0, args=(t, delta, q, optimize_shapes),
        bounds=bounds, m=SOLVER_MEMORY, maxiter=SOLVER_MAX_ITER,
        pgtol=SOLVER_PGTOL, factr=10.0)
    flags = []
    if info["warnflag"] != 0:
        flags.append("weibull update stopped early (warnflag %d)" % info["warnflag"])
    if value_hat > value0:
        flags.append("weibull update failed to improve, parameters kept")
        return alphas.copy(), flags
    phi = float(expit(z_hat[0]))
    new = np.array([[phi, float(np.exp(z_hat[1]))],
                    [phi, float(np.exp(z_hat[2]))]])
    return new, flags


def _subproblem_value(beta, intercept, x, q_k, other_scores, gamma, eta):
    """Full class-k objective: smooth softmax cross-entropy restricted
    to the class block plus the elastic-net penalty on beta."""
    u = x @ beta + intercept
    if other_scores is None:
        lse = np.logaddexp(0.0, u)
    else:
        lse = logsumexp(np.column_stack([other_scores, u]), axis=1)
    smooth = float((lse - q_k * u).mean())
    return smooth + gamma * ((1.0 - eta) * np.abs(beta).sum() + 0.5 * eta * beta @ beta)


def _solve_intercept(intercept, xb, q_k, other_scores):
    """One-dimensional Newton solve of the unpenalized intercept, with
    bisection safeguards; the optimum matches mean weight to mean
    responsibility."""
    target = float(q_k.mean())
    lo, hi = -INTERCEPT_BOUND, INTERCEPT_BOUND
    c = float(np.clip(intercept, lo, hi))
    for _ in range(60):
        u = xb + c
        if other_scores is None:
            pi = expit(u)
        else:
            pi = np.exp(u - logsumexp(np.column_stack([other_scores, u]), axis=1))
        gap = float(pi.mean()) - target
        if abs(gap) < 1e-13:
            break
        if gap > 0:
            hi = c
        else:
            lo = c
        curvature = float((pi * (1.0 - pi)).mean())
        if curvature > 1e-16:
            c_new = c - gap / curvature
        else:
            c_new = 0.5 * (lo + hi)
        if not lo < c_new < hi:
            c_new = 0.5 * (lo + hi)
        if c_new == c:
            break
        c = c_new
    return c


def beta_subproblem(k, q_k, x, params, gamma, eta):
    """Update one class's coefficients and intercept.

    Minimizes the class block of the responsibility-weighted softmax
    cross-entropy plus the elastic-net penalty, holding the other
    classes fixed. The l1 term is handled by splitting the coefficients
    into non-negative positive and negative parts, which turns the
    problem into a smooth box-constrained one solved by a bounded
    quasi-Newton method. The intercept is solved to optimality first so
    that a start at zero stays exactly zero whenever zero satisfies the
    optimality conditions.

    Parameters
    ----------
    k : `int`
        Class index in 1..K-1.

    q_k : `np.ndarray`, shape=(n_samples,)
        Responsibilities of class k.

    x : `np.ndarray`, shape=(n_samples, n_features)
        Covariates.

    params : `CmixParams`
        Current parameters; only read, not modified.

    gamma, eta : `float`
        Penalty strength and elastic-net mixing.

    Returns
    -------
    beta : `np.ndarray`, shape=(n_features,)
        Updated coefficients.

    intercept : `float`
        Updated intercept.

    flags : `list` of `str`
        Solver diagnostics; on failure to improve, the incoming values
        are returned and flagged.
    """
    n, d = x.shape
    beta_in = params.betas[k - 1]
    c_in = float(params.intercepts[k - 1])
    if params.n_classes == 2:
        other_scores = None
    else:
        others = [r for r in range(1, params.n_classes) if r != k]
        other_scores = np.empty((n, len(others) + 1))
        other_scores[:, 0] = 0.0
        for col, r in enumerate(others, start=1):
            other_scores[:, col] = x @ params.betas[r - 1] + params.intercepts[r - 1]

    flags = []
    total = float(q_k.sum())
    if total <= 0.0 or total >= n:
        flags.append("class %d has degenerate responsibilities, coefficients kept" % k)
        return beta_in.copy(), c_in, flags

    value_in = _subproblem_value(beta_in, c_in, x, q_k, other_scores, gamma, eta)
    c0 = _solve_intercept(c_in, x @ beta_in, q_k, other_scores)

    l1_weight = gamma * (1.0 - eta)

    def value_grad(z):
        c = z[0]
        beta = z[1:d + 1] - z[d + 1:]
        u = x @ beta + c
        if other_scores is None:
            lse = np.logaddexp(0.0, u)
            pi = expit(u)
        else:
            stacked = np.column_stack([other_scores, u])
            lse = logsumexp(stacked, axis=1)
            pi = np.exp(u - lse)
        value = float((lse - q_k * u).mean()) \
            + l1_weight * (z[1:].sum()) + 0.5 * gamma * eta * float(beta @ beta)
        residual = (pi - q_k) / n
        g_beta = x.T @ residual + gamma * eta * beta
        grad = np.concatenate(([residual.sum()], g_beta + l1_weight, -g_beta + l1_weight))
        return value, grad

    z0 = np.concatenate(([c0], np.maximum(beta_in, 0.0), np.maximum(-beta_in, 0.0)))
    bounds = [(-INTERCEPT_BOUND, INTERCEPT_BOUND)] + [(0.0, None)] * (2 * d)
    z_hat, _, info = fmin_l_bfgs_b(value_grad, z0, bounds=bounds, m=SOLVER_MEMORY,
                                   maxiter=SOLVER_MAX_ITER, pgtol=SOLVER_PGTOL,
                                   factr=10.0)
    if info["warnflag"] != 0:
        flags.append("class %d coefficient update stopped early (warnflag %d)"
                     % (k, info["warnflag"]))
    beta_out = z_hat[1:d + 1] - z_hat[d + 1:]
    c_out = float(z_hat[0])
    value_out = _subproblem_value(beta_out, c_out, x, q_k, other_scores, gamma, eta)
    if value_out > value_in:
        flags.append("class %d coefficient update failed to improve, kept" % k)
        return beta_in.copy(), c_in, flags
    return beta_out, c_out, flags


def subproblem_kkt_residual(beta, intercept, x, q_k, gamma, eta, other_scores=None):
    """Max norm of the first-order optimality residual of the class
    sub-problem at (beta, intercept); zero coefficients are optimal when
    the smooth gradient fits inside the l1 threshold."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    beta = np.asarray(beta, dtype=np.float64)
    u = x @ beta + intercept
    if other_scores is None:
        pi = expit(u)
    else:
        pi = np.exp(u - logsumexp(np.column_stack([other_scores, u]), axis=1))
    residual = (pi - q_k) / x.shape[0]
    g = x.T @ residual + gamma * eta * beta
    threshold = gamma * (1.0 - eta)
    active = beta != 0
    res = np.where(active, np.abs(g + threshold * np.sign(beta)),
                   np.maximum(np.abs(g) - threshold, 0.0))
    return float(max(res.max(), abs(residual.sum())))


def _covariate_free_em(t, delta, config, alphas0, max_iter=200, tol=1e-9):
    """Mixture EM on durations alone; the class weight vector plays the
    role of the logistic model and is updated as the mean responsibility."""
    k = config.n_classes
    alphas = alphas0.copy()
    pi = np.full(k, 1.0 / k)
    shim = _DurationShim(alphas, config.parameterization, config.cure_mode, k)
    for _ in range(max_iter):
        log_joint = np.log(np.maximum(pi, 1e-300)) + _log_duration_terms(shim, t, delta)
        norm = logsumexp(log_joint, axis=1)
        bad = ~np.isfinite(norm)
        if np.any(bad):
            log_joint[bad] = -np.inf
            log_joint[bad, -1] = 0.0
            norm[bad] = 0.0
        q = np.exp(log_joint - norm[:, None])
        if config.parameterization == "geometric":
            new_alphas, _ = m_step_geometric(q, t, delta, alphas, config.cure_mode)
        else:
            new_alphas, _ = m_step_weibull(q, t, delta, alphas)
        new_pi = np.clip(q.mean(axis=0), 1e-12, 1.0)
        new_pi /= new_pi.sum()
        moved = np.max(np.abs(new_alphas - alphas)) + np.max(np.abs(new_pi - pi))
        alphas, pi = new_alphas, new_pi
        shim.alphas = alphas
        if moved < tol:
            break
    return alphas, pi


class _DurationShim:
    """Duck-typed stand-in for CmixParams inside the covariate-free EM."""

    def __init__(self, alphas, parameterization, cure_mode, n_classes):
        self.alphas = alphas
        self.parameterization = parameterization
        self.cure_mode = cure_mode
        self.n_classes = n_classes


def _sorted_rates(alphas, parameterization):
    order_key = alphas if parameterization == "geometric" else alphas[:, 1]
    order = np.argsort(order_key, kind="stable")
    return alphas[order]


def _collapsed(alphas, parameterization):
    key = np.sort(alphas if parameterization == "geometric" else alphas[:, 1])
    gaps = np.diff(key)
    return bool(np.any(gaps < 1e-8 * np.maximum(np.abs(key[1:]), 1e-3)))


def _perturb(alphas, parameterization):
    k = alphas.shape[0]
    factors = np.linspace(0.9, 1.1, k)
    out = alphas.copy()
    if parameterization == "geometric":
        live = out > 0
        out[live] = np.clip(out[live] * factors[live], ALPHA_MIN, 1.0 - ALPHA_MIN)
    else:
        out[:, 1] = out[:, 1] * factors
    return out


def initialize(dataset, config):
    """Starting point for :func:`fit`.

    Duration parameters come from a covariate-free censored mixture EM
    on the durations; classes are then sorted by increasing risk so
    class 0 is the slowest-failing one. Coefficients and intercepts
    start at zero. If the covariate-free classes collapse onto each
    other, they are perturbed by 10 percent and the EM retried once;
    if they collapse again the perturbed values are returned.

    Parameters
    ----------
    dataset : `SurvivalDataset`
        Observed data.

    config : `FitConfig`
        Settings; only the model structure fields are read.

    Returns
    -------
    output : `CmixParams`
        A valid starting point.
    """
    t = duration_days(dataset.y)
    delta = dataset.delta
    k = config.n_classes
    if config.parameterization == "geometric":
        probs = 1.0 - (np.arange(k) + 0.5) / k
        with np.errstate(divide="ignore"):
            alphas0 = 1.0 / np.quantile(t, probs)
        alphas0 = np.sort(np.clip(alphas0, ALPHA_MIN, 1.0 - ALPHA_MIN))
        if config.cure_mode:
            alphas0[0] = 0.0
    else:
        pooled = np.clip(float(delta.sum()) / float((t + 1.0).sum()), 1e-6, 1.0 - 1e-6)
        alphas0 = np.array([[pooled, 0.8], [pooled, 1.25]])

    alphas, _ = _covariate_free_em(t, delta, config, alphas0)
    alphas = _sorted_rates(alphas, config.parameterization)
    if _collapsed(alphas, config.parameterization):
        retry = _perturb(alphas, config.parameterization)
        alphas, _ = _covariate_free_em(t, delta, config, retry)
        alphas = _sorted_rates(alphas, config.parameterization)
        if _collapsed(alphas, config.parameterization):
            alphas = _sorted_rates(_perturb(alphas, config.parameterization),
                                   config.parameterization)
    if config.parameterization == "geometric" and config.cure_mode:
        alphas[0] = 0.0
    betas = np.zeros((k - 1, dataset.n_features))
    intercepts = np.zeros(k - 1)
    return CmixParams(alphas, betas, intercepts, config.parameterization, config.cure_mode)


def fit(dataset, config, init=None):
    """Estimate the penalized mixture by monotone EM iterations.

    Each iteration recomputes responsibilities, applies the duration
    M-step (exact for geometric rates, quasi-Newton for the shared
    Weibull block) and then updates each class's coefficients. Every
    sub-step is guarded never to increase its own objective, which
    makes the penalized objective non-increasing across iterations; a
    violation beyond a tiny slack aborts with diagnostics since it can
    only come from a solver bug.

    Parameters
    ----------
    dataset : `SurvivalDataset`
        Observed data.

    config : `FitConfig`
        Estimation settings.

    init : `CmixParams` or None
        Warm start; defaults to :func:`initialize`.

    Returns
    -------
    params : `CmixParams`
        The fitted parameters.

    trace : `FitTrace`
        Objective history and diagnostics.
    """
    t = duration_days(dataset.y)
    delta = dataset.delta
    x = dataset.x
    if init is None:
        params = initialize(dataset, config)
    else:
        if init.parameterization != config.parameterization or init.cure_mode != config.cure_mode:
            raise ValueError("warm start does not match the configured model structure")
        if init.n_features != dataset.n_features or init.n_classes != config.n_classes:
            raise ValueError("warm start shape does not match the data or class count")
        params = init.copy()

    objective = penalized_objective(params, t, delta, x, config.gamma, config.eta)
    history = [objective]
    flags = []
    converged = False
    iteration = 0
    for iteration in range(1, config.max_iter + 1):
        q = e_step(params, t, delta, x)
        if config.parameterization == "geometric":
            params.alphas, step_flags = m_step_geometric(q, t, delta, params.alphas,
                                                         config.cure_mode)
        else:
            params.alphas, step_flags = m_step_weibull(q, t, delta, params.alphas)
        for msg in step_flags:
            if msg not in flags:
                flags.append(msg)
        for k in range(1, config.n_classes):
            beta_k, c_k, sub_flags = beta_subproblem(k, q[:, k], x, params,
                                                     config.gamma, config.eta)
            params.betas[k - 1] = beta_k
            params.intercepts[k - 1] = c_k
            for msg in sub_flags:
                if msg not in flags:
                    flags.append(msg)
        new_objective = penalized_objective(params, t, delta, x, config.gamma, config.eta)
        history.append(new_objective)
        if new_objective > objective + DESCENT_SLACK:
            raise DescentViolation(
                "objective increased from %.17g to %.17g at iteration %d "
                "(gamma=%g, eta=%g, parameterization=%s, cure=%s)"
                % (objective, new_objective, iteration, config.gamma, config.eta,
                   config.parameterization, config.cure_mode))
        if abs(new_objective - objective) <= config.rel_tol * max(abs(objective), 1.0):
            converged = True
            objective = new_objective
            break
        objective = new_objective
    return params, FitTrace(history, iteration, converged, flags)


def predict_scores(params, x):
    """Per-subject probability of the highest-risk class.

    Parameters
    ----------
    params : `CmixParams`
        Fitted parameters; classes are ordered by increasing risk at
        initialization so the last one is the fastest-failing.

    x : `np.ndarray`, shape=(n_samples, n_features)
        Covariates.

    Returns
    -------
    output : `np.ndarray`, shape=(n_samples,)
        Values in (0, 1), usable directly as a risk marker.
    """
    return mixture_weights(params.betas, params.intercepts, x)[:, -1]


def predict_survival(params, x, km_low, km_high, t):
    """Predicted survival blending the two risk subgroups' curves.

    Parameters
    ----------
    params : `CmixParams`
        Fitted two-class parameters.

    x : `np.ndarray`, shape=(n_samples, n_features)
        Covariates.

    km_low, km_high : `KaplanMeierCurve`
        Survival curves estimated on the predicted low- and high-risk
        subgroups of the training data.

    t : `float`
        Horizon, non-negative.

    Returns
    -------
    output : `np.ndarray`, shape=(n_samples,)
        score * S_high(t) + (1 - score) * S_low(t).
    """
    scores = predict_scores(params, x)
    return scores * km_high.at(t) + (1.0 - scores) * km_low.at(t)


MODEL_SCHEMA_VERSION = 1


def save_model(path, params, trace=None, column_names=None, survival_curves=None):
    """Serialize fitted parameters (and optional context) as JSON."""
    doc = {"schema": MODEL_SCHEMA_VERSION}
    doc.update(params.to_dict())
    doc["trace"] = trace.to_dict() if trace is not None else None
    if column_names is not None:
        doc["column_names"] = list(column_names)
    if survival_curves is not None:
        low, high = survival_curves
        doc["survival_curves"] = {"low": low.to_dict(), "high": high.to_dict()}
    with open(path, "w") as handle:
        json.dump(doc, handle, indent=2)
        handle.write("\n")


def load_model(path):
    """Read a model written by :func:`save_model`.

    Returns
    -------
    params : `CmixParams`
        The deserialized parameters.

    doc : `dict`
        The full document, including trace and optional curves.
    """
    with open(path) as handle:
        doc = json.load(handle)
    schema = doc.get("schema")
    if schema != MODEL_SCHEMA_VERSION:
        raise ValueError("unsupported model schema %r, expected %d"
                         % (schema, MODEL_SCHEMA_VERSION))
    return CmixParams.from_dict(doc), doc


def load_model_curves(doc):
    """Rebuild the optional survival curves stored in a model document."""
    if "survival_curves" not in doc:
        return None
    stored = doc["survival_curves"]
    return (KaplanMeierCurve.from_dict(stored["low"]),
            KaplanMeierCurve.from_dict(stored["high"]))
