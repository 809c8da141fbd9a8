"""Censoring-adjusted concordance and AUC metrics for risk predictions."""

import warnings

import numpy as np

from .distributions import kaplan_meier


def _check_inputs(y, delta, scores):
    y = np.asarray(y, dtype=np.float64)
    delta = np.asarray(delta)
    scores = np.asarray(scores, dtype=np.float64)
    if not (y.shape == delta.shape == scores.shape) or y.ndim != 1:
        raise ValueError("y, delta and scores must be one-dimensional with equal length")
    if np.any(y <= 0):
        raise ValueError("durations must be positive")
    if not np.all((delta == 0) | (delta == 1)):
        raise ValueError("delta entries must be 0 or 1")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    return y, delta.astype(np.float64), scores


def default_tau(y):
    """Default concordance horizon: the 95th percentile of observed durations."""
    return float(np.quantile(np.asarray(y, dtype=np.float64), 0.95))


def default_time_grid(y, delta, n_times=20):
    """Evaluation times for AUC(t): quantiles of observed event times.

    Returns up to ``n_times`` distinct event-time quantiles strictly
    inside the observed follow-up range (min(y), max(y)).
    """
    y, delta, _ = _check_inputs(y, delta, np.zeros_like(y))
    event_times = y[delta == 1]
    if event_times.size == 0:
        raise ValueError("no events, cannot build a time grid")
    probs = (np.arange(n_times) + 1.0) / (n_times + 1.0)
    grid = np.quantile(event_times, probs)
    lo, hi = y.min(), y.max()
    grid = np.unique(grid[(grid > lo) & (grid < hi)])
    if grid.size == 0:
        raise ValueError("no candidate times strictly inside the follow-up range")
    return grid


def _pair_counts(case_scores, control_scores):
    """For each case score, controls strictly below plus half the ties."""
    order = np.sort(control_scores)
    below = np.searchsorted(order, case_scores, side="left")
    below_or_equal = np.searchsorted(order, case_scores, side="right")
    return below + 0.5 * (below_or_equal - below)


def _binary_auc(labels, scores):
    """Mann-Whitney AUC with ties counted one half."""
    pos = scores[labels]
    neg = scores[~labels]
    if pos.size == 0 or neg.size == 0:
        raise ValueError("need both positive and negative labels to compute an AUC")
    return float(_pair_counts(pos, neg).sum() / (pos.size * neg.size))


def c_index_ipcw(y, delta, scores, tau=None):
    """Censoring-weighted concordance index on a truncated horizon.

    Estimates P[M_i > M_j | Y_i < Y_j, Y_i < tau]: the probability that
    of two comparable subjects, the one failing first carries the
    higher marker. Comparable pairs require an observed event for the
    early subject; each pair is weighted by the inverse squared
    Kaplan-Meier estimate of the censoring survival, taken as a left
    limit at the event time.

    Parameters
    ----------
    y : `np.ndarray`, shape=(n_samples,)
        Observed durations.

    delta : `np.ndarray`, shape=(n_samples,)
        Event indicators in {0, 1}.

    scores : `np.ndarray`, shape=(n_samples,)
        Risk markers; larger means expected earlier failure.

    tau : `float` or None
        Horizon; pairs with Y_i >= tau are ignored. Defaults to the
        95th percentile of ``y``.

    Returns
    -------
    output : `float`
        The weighted concordance fraction, ties in the marker counting
        one half.
    """
    y, delta, scores = _check_inputs(y, delta, scores)
    if tau is None:
        tau = default_tau(y)
    tau = float(tau)

    g_curve = kaplan_meier(y, delta, target="censoring")
    g_left = g_curve.at_left(y)

    i_mask = (delta == 1) & (y < tau)
    if not np.any(i_mask):
        raise ValueError("no events before the horizon, concordance undefined")
    yi = y[i_mask]
    si = scores[i_mask]
    gi = g_left[i_mask]
    usable = gi > 0
    if not np.all(usable):
        warnings.warn("dropping %d events with zero censoring-survival weight"
                      % int((~usable).sum()))
        yi, si, gi = yi[usable], si[usable], gi[usable]
    weights = gi ** -2.0

    comparable = yi[:, None] < y[None, :]
    if not np.any(comparable):
        raise ValueError("no comparable pairs, concordance undefined")
    concordant = (si[:, None] > scores[None, :]) + 0.5 * (si[:, None] == scores[None, :])
    num = float((weights[:, None] * comparable * concordant).sum())
    den = float((weights[:, None] * comparable).sum())
    return num / den


def auc_t(y, delta, scores, times=None):
    """Cumulative/dynamic AUC with inverse-censoring weights.

    At each time t, cases are subjects with an observed event by t,
    weighted by 1 / G(y-), and controls are subjects still under
    observation after t, uniformly weighted. Times where either group
    is empty yield NaN.

    Parameters
    ----------
    y, delta, scores : `np.ndarray`, shape=(n_samples,)
        Durations, event indicators and risk markers.

    times : `np.ndarray` or None
        Strictly inside (min(y), max(y)); defaults to
        :func:`default_time_grid`.

    Returns
    -------
    times : `np.ndarray`, shape=(n_times,)
        The evaluation grid actually used.

    aucs : `np.ndarray`, shape=(n_times,)
        The estimate at each time, NaN where undefined.
    """
    y, delta, scores = _check_inputs(y, delta, scores)
    if times is None:
        times = default_time_grid(y, delta)
    times = np.atleast_1d(np.asarray(times, dtype=np.float64))
    if np.any(times <= y.min()) or np.any(times >= y.max()):
        raise ValueError("evaluation times must lie strictly inside the follow-up range")

    g_curve = kaplan_meier(y, delta, target="censoring")
    g_left = g_curve.at_left(y)

    aucs = np.full(times.size, np.nan)
    for idx, t in enumerate(times):
        case = (y <= t) & (delta == 1)
        control = y > t
        if not (np.any(case) and np.any(control)):
            continue
        gw = g_left[case]
        if np.any(gw <= 0):
            warnings.warn("dropping cases with zero censoring-survival weight at t=%g" % t)
            keep = gw > 0
            case_scores = scores[case][keep]
            gw = gw[keep]
            if case_scores.size == 0:
                continue
        else:
            case_scores = scores[case]
        w = 1.0 / gw
        wins = _pair_counts(case_scores, scores[control])
        aucs[idx] = float((w * wins).sum() / (w.sum() * control.sum()))
    return times, aucs


def horizon_survival_auc(y, delta, survival_probs, epsilon):
    """AUC of predicted survival against survival-past-a-horizon labels.

    Subjects observed beyond ``epsilon`` are labelled 1, subjects with
    an event by ``epsilon`` are labelled 0, and subjects censored by
    ``epsilon`` have an unknown label and are excluded.

    Parameters
    ----------
    y, delta : `np.ndarray`, shape=(n_samples,)
        Durations and event indicators.

    survival_probs : `np.ndarray`, shape=(n_samples,)
        Predicted probability of surviving past ``epsilon``.

    epsilon : `float`
        The horizon, positive.

    Returns
    -------
    output : `float`
        Mann-Whitney AUC, ties counting one half.
    """
    y, delta, survival_probs = _check_inputs(y, delta, survival_probs)
    epsilon = float(epsilon)
    if epsilon <= 0:
        raise ValueError("horizon must be positive")
    known = (y > epsilon) | (delta == 1)
    if not np.any(known):
        raise ValueError("no subjects with a known label at the horizon")
    labels = y[known] > epsilon
    if labels.all() or not labels.any():
        raise ValueError("labels are single-class at the horizon, AUC undefined")
    return _binary_auc(labels, survival_probs[known])


def selection_auc(beta_hat, beta_true):
    """AUC of normalized coefficient magnitudes against true support.

    Parameters
    ----------
    beta_hat : `np.ndarray`, shape=(n_features,)
        Estimated coefficients.

    beta_true : `np.ndarray`, shape=(n_features,)
        Ground truth; nonzero entries mark active covariates.

    Returns
    -------
    output : `float`
        How well |beta_hat| / max|beta_hat| ranks active covariates
        above inactive ones; 0.5 when every estimate is zero.
    """
    beta_hat = np.asarray(beta_hat, dtype=np.float64)
    beta_true = np.asarray(beta_true, dtype=np.float64)
    if beta_hat.shape != beta_true.shape or beta_hat.ndim != 1:
        raise ValueError("beta_hat and beta_true must be one-dimensional with equal length")
    active = beta_true != 0
    if active.all() or not active.any():
        raise ValueError("need both active and inactive covariates")
    top = np.abs(beta_hat).max()
    if top == 0.0:
        return 0.5
    return _binary_auc(active, np.abs(beta_hat) / top)
