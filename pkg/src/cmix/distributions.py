"""Discrete duration distributions and Kaplan-Meier estimation."""

import numpy as np


def _check_rate(alpha, allow_zero=False):
    alpha = float(alpha)
    low_ok = alpha >= 0.0 if allow_zero else alpha > 0.0
    if not (low_ok and alpha < 1.0):
        bound = "[0, 1)" if allow_zero else "(0, 1)"
        raise ValueError("rate parameter must lie in %s, got %r" % (bound, alpha))
    return alpha


def _check_times(t, minimum):
    t = np.asarray(t, dtype=np.float64)
    if t.size == 0:
        raise ValueError("empty time array")
    if np.any(t < minimum) or np.any(t != np.floor(t)):
        raise ValueError("times must be integers >= %d" % minimum)
    return t


def geometric_pmf(alpha, t):
    """Probability of a duration of exactly ``t`` trials.

    Parameters
    ----------
    alpha : `float`
        Success rate in [0, 1). A rate of zero encodes the degenerate
        "no finite duration" distribution used by the cure variant.

    t : `int` or `np.ndarray`
        Times with support {1, 2, ...}.

    Returns
    -------
    output : `float` or `np.ndarray`
        alpha * (1 - alpha)**(t - 1) evaluated elementwise.
    """
    alpha = _check_rate(alpha, allow_zero=True)
    t = _check_times(t, 1)
    return alpha * (1.0 - alpha) ** (t - 1.0)


def geometric_log_pmf(alpha, t):
    """Logarithm of :func:`geometric_pmf`, -inf when alpha is zero."""
    alpha = _check_rate(alpha, allow_zero=True)
    t = _check_times(t, 1)
    if alpha == 0.0:
        return np.full_like(t, -np.inf)
    return np.log(alpha) + (t - 1.0) * np.log1p(-alpha)


def geometric_survival(alpha, t):
    """Strict survival P(T > t) = (1 - alpha)**t for t >= 0.

    This is the factor a right-censored observation contributes to the
    likelihood when the recorded duration is ``t``.
    """
    alpha = _check_rate(alpha, allow_zero=True)
    t = _check_times(t, 0)
    return (1.0 - alpha) ** t


def geometric_log_survival(alpha, t):
    """Logarithm of :func:`geometric_survival`."""
    alpha = _check_rate(alpha, allow_zero=True)
    t = _check_times(t, 0)
    return t * np.log1p(-alpha)


def dweibull_pmf(phi, mu, t):
    """Discrete Weibull probability of a duration of exactly ``t``.

    Parameters
    ----------
    phi : `float`
        Scale parameter in (0, 1); equals P(T = 0) for every shape.

    mu : `float`
        Shape parameter, positive. ``mu = 1`` recovers a geometric
        distribution shifted onto the support {0, 1, ...}.

    t : `int` or `np.ndarray`
        Times with support {0, 1, ...}.

    Returns
    -------
    output : `float` or `np.ndarray`
        (1 - phi)**(t**mu) - (1 - phi)**((t + 1)**mu) elementwise.
    """
    phi = _check_rate(phi)
    mu = float(mu)
    if mu <= 0:
        raise ValueError("shape parameter must be positive, got %r" % mu)
    t = _check_times(t, 0)
    one = 1.0 - phi
    return one ** (t ** mu) - one ** ((t + 1.0) ** mu)


def dweibull_log_pmf(phi, mu, t):
    """Logarithm of :func:`dweibull_pmf`, computed without underflow."""
    phi = _check_rate(phi)
    mu = float(mu)
    if mu <= 0:
        raise ValueError("shape parameter must be positive, got %r" % mu)
    t = _check_times(t, 0)
    b = np.log1p(-phi)
    head = b * t ** mu
    # b < 0 and (t+1)**mu > t**mu, so the increment below is negative
    # and expm1 keeps the tail accurate when it is close to zero.
    return head + np.log(-np.expm1(b * ((t + 1.0) ** mu - t ** mu)))


def dweibull_survival(phi, mu, t):
    """Survival P(T >= t) = (1 - phi)**(t**mu) for t >= 0.

    The strict survival P(T > t) used for censored observations is
    this function evaluated at ``t + 1``, matching the geometric
    convention of :func:`geometric_survival`.
    """
    phi = _check_rate(phi)
    mu = float(mu)
    if mu <= 0:
        raise ValueError("shape parameter must be positive, got %r" % mu)
    t = _check_times(t, 0)
    return (1.0 - phi) ** (t ** mu)


def dweibull_log_survival(phi, mu, t):
    """Logarithm of :func:`dweibull_survival`."""
    phi = _check_rate(phi)
    mu = float(mu)
    if mu <= 0:
        raise ValueError("shape parameter must be positive, got %r" % mu)
    t = _check_times(t, 0)
    return np.log1p(-phi) * t ** mu


def sample_dweibull(phi, mu, size, rng):
    """Draw discrete Weibull variates by inverting the survival function."""
    phi = _check_rate(phi)
    u = rng.random(size)
    # T = max{t >= 0 : u <= (1 - phi)**(t**mu)}
    return np.floor((np.log(u) / np.log1p(-phi)) ** (1.0 / float(mu)))


class KaplanMeierCurve:
    """Right-continuous product-limit survival estimate.

    Parameters
    ----------
    times : `np.ndarray`, shape=(n_steps,)
        Strictly increasing times at which the curve drops.

    survival : `np.ndarray`, shape=(n_steps,)
        Estimated survival just after each time; non-increasing.

    variance : `np.ndarray`, shape=(n_steps,) or None
        Greenwood variance accumulator sum d / (r (r - d)), used for the
        optional log-log confidence bands.
    """

    def __init__(self, times, survival, variance=None):
        self.times = np.asarray(times, dtype=np.float64)
        self.survival = np.asarray(survival, dtype=np.float64)
        self.variance = None if variance is None else np.asarray(variance, dtype=np.float64)
        if self.times.shape != self.survival.shape:
            raise ValueError("times and survival must have the same shape")
        if self.times.size and np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")

    def at(self, t):
        """Evaluate S(t); the curve is 1 before the first drop."""
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < 0):
            raise ValueError("cannot evaluate survival at negative times")
        idx = np.searchsorted(self.times, t, side="right")
        padded = np.concatenate(([1.0], self.survival))
        out = padded[idx]
        return float(out) if np.isscalar(t) or t.ndim == 0 else out

    def at_left(self, t):
        """Evaluate the left limit S(t-)."""
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < 0):
            raise ValueError("cannot evaluate survival at negative times")
        idx = np.searchsorted(self.times, t, side="left")
        padded = np.concatenate(([1.0], self.survival))
        out = padded[idx]
        return float(out) if np.isscalar(t) or t.ndim == 0 else out

    def confidence_bands(self, level=0.95):
        """Pointwise log-log bands (lower, upper) at each step time."""
        from scipy.stats import norm

        if self.variance is None:
            raise ValueError("curve was built without variance information")
        z = norm.ppf(0.5 + level / 2.0)
        lower = np.ones_like(self.survival)
        upper = np.ones_like(self.survival)
        with np.errstate(divide="ignore", invalid="ignore"):
            s = self.survival
            inside = (s > 0) & (s < 1)
            log_s = np.log(s[inside])
            se = np.sqrt(self.variance[inside]) / np.abs(log_s)
            theta = z * se
            lower[inside] = s[inside] ** np.exp(theta)
            upper[inside] = s[inside] ** np.exp(-theta)
        lower[s == 0] = 0.0
        upper[s == 0] = 0.0
        return lower, upper

    def to_dict(self, bands=False, level=0.95):
        out = {
            "times": [float(v) for v in self.times],
            "survival": [float(v) for v in self.survival],
        }
        if bands:
            lower, upper = self.confidence_bands(level)
            out["lower"] = [float(v) for v in lower]
            out["upper"] = [float(v) for v in upper]
            out["level"] = level
        return out

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["times"]), np.asarray(d["survival"]))


def kaplan_meier(y, delta, target="event"):
    """Product-limit estimate of the duration or censoring distribution.

    Parameters
    ----------
    y : `np.ndarray`, shape=(n_samples,)
        Observed durations, positive.

    delta : `np.ndarray`, shape=(n_samples,)
        Event indicators: 1 when the duration is an event, 0 when it is
        censored.

    target : `str`, either "event" or "censoring"
        Which distribution to estimate. For "censoring" the roles are
        flipped and, at tied times, events are processed before
        censorings so that subjects censored at an event time remain at
        risk for censoring after the event has been removed.

    Returns
    -------
    output : `KaplanMeierCurve`
        The estimated survival curve with step times at the target's
        observed occurrence times.
    """
    y = np.asarray(y, dtype=np.float64)
    delta = np.asarray(delta)
    if y.shape != delta.shape or y.ndim != 1:
        raise ValueError("y and delta must be one-dimensional with equal length")
    if np.any(y <= 0):
        raise ValueError("durations must be positive")
    if not np.all((delta == 0) | (delta == 1)):
        raise ValueError("delta entries must be 0 or 1")
    if target not in ("event", "censoring"):
        raise ValueError("target must be 'event' or 'censoring'")

    times = np.unique(y)
    # counts per unique time
    order = np.searchsorted(times, y)
    n_at = np.bincount(order, minlength=times.size).astype(np.float64)
    d_event = np.bincount(order, weights=(delta == 1), minlength=times.size)
    d_cens = n_at - d_event
    # subjects still at risk just before each time
    at_risk = n_at[::-1].cumsum()[::-1]
    if target == "event":
        drops = d_event
        risk = at_risk
    else:
        drops = d_cens
        risk = at_risk - d_event

    keep = drops > 0
    risk_k = risk[keep]
    drops_k = drops[keep]
    keep_times = times[keep]
    factors = 1.0 - drops_k / risk_k
    survival = np.cumprod(factors)
    with np.errstate(divide="ignore", invalid="ignore"):
        greenwood_terms = drops_k / (risk_k * (risk_k - drops_k))
    greenwood_terms[~np.isfinite(greenwood_terms)] = 0.0
    variance = np.cumsum(greenwood_terms)
    return KaplanMeierCurve(keep_times, survival, variance)
