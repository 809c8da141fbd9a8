"""Dataset container, CSV I/O and concordance-based covariate screening."""

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .metrics import c_index_ipcw, default_tau

COX_MAX_ABS_COEF = 20.0
COX_MAX_ITER = 100
COX_SCORE_TOL = 1e-8


class DataError(ValueError):
    """Raised for malformed input files or invalid dataset contents."""


@dataclass
class SurvivalDataset:
    """Right-censored covariate data.

    Parameters
    ----------
    x : `np.ndarray`, shape=(n_samples, n_features)
        Covariate matrix, finite.

    y : `np.ndarray`, shape=(n_samples,)
        Observed durations, positive.

    delta : `np.ndarray`, shape=(n_samples,)
        Event indicators: 1 for an observed event, 0 for censoring.

    column_names : `tuple` of `str`
        One name per covariate column.
    """

    x: np.ndarray
    y: np.ndarray
    delta: np.ndarray
    column_names: tuple = ()

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=np.float64))
        self.y = np.asarray(self.y, dtype=np.float64)
        self.delta = np.asarray(self.delta, dtype=np.int64)
        if not self.column_names:
            self.column_names = tuple("x%d" % j for j in range(self.x.shape[1]))
        self.column_names = tuple(str(c) for c in self.column_names)
        n, d = self.x.shape
        if n < 2:
            raise DataError("need at least two observations, got %d" % n)
        if d < 1:
            raise DataError("need at least one covariate column")
        if self.y.shape != (n,) or self.delta.shape != (n,):
            raise DataError("y and delta must have one entry per row of x")
        if len(self.column_names) != d:
            raise DataError("expected %d column names, got %d" % (d, len(self.column_names)))
        if not np.all(np.isfinite(self.x)):
            raise DataError("covariates must be finite")
        if not np.all(np.isfinite(self.y)) or np.any(self.y <= 0):
            raise DataError("durations must be finite and positive")
        if not np.all((self.delta == 0) | (self.delta == 1)):
            raise DataError("delta entries must be 0 or 1")

    @property
    def n_samples(self):
        return self.x.shape[0]

    @property
    def n_features(self):
        return self.x.shape[1]

    def subset(self, idx):
        return SurvivalDataset(self.x[idx], self.y[idx], self.delta[idx], self.column_names)

    def select_columns(self, cols):
        cols = np.asarray(cols, dtype=np.int64)
        names = tuple(self.column_names[j] for j in cols)
        return SurvivalDataset(self.x[:, cols], self.y, self.delta, names)

    def standardized(self):
        """Return a copy with each covariate centered and scaled to unit sd."""
        mean = self.x.mean(axis=0)
        sd = self.x.std(axis=0)
        if np.any(sd == 0):
            raise DataError("cannot standardize constant columns: %s"
                            % [self.column_names[j] for j in np.where(sd == 0)[0]])
        return SurvivalDataset((self.x - mean) / sd, self.y, self.delta, self.column_names)


def load_csv(path, duration_col="y", event_col="delta"):
    """Read a dataset from a CSV file.

    The header must start with the duration and event columns followed
    by one column per covariate. Parse failures report the offending
    row and column.
    """
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("%s: empty file" % path) from None
        header = [h.strip() for h in header]
        if len(header) < 3 or header[0] != duration_col or header[1] != event_col:
            raise DataError("%s: header must be %s,%s,<covariate names>, got %r"
                            % (path, duration_col, event_col, ",".join(header)))
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError("%s: row %d has %d fields, expected %d"
                                % (path, line_no, len(row), len(header)))
            parsed = []
            for col_no, (name, cell) in enumerate(zip(header, row), start=1):
                try:
                    parsed.append(float(cell))
                except ValueError:
                    raise DataError("%s: row %d, column %d (%s): not a number: %r"
                                    % (path, line_no, col_no, name, cell)) from None
            rows.append((line_no, parsed))

    if len(rows) < 2:
        raise DataError("%s: need at least two data rows" % path)
    for line_no, parsed in rows:
        if not parsed[0] > 0:
            raise DataError("%s: row %d, column 1 (%s): duration must be positive, got %r"
                            % (path, line_no, duration_col, parsed[0]))
        if parsed[1] not in (0.0, 1.0):
            raise DataError("%s: row %d, column 2 (%s): indicator must be 0 or 1, got %r"
                            % (path, line_no, event_col, parsed[1]))
    table = np.asarray([parsed for _, parsed in rows], dtype=np.float64)
    return SurvivalDataset(table[:, 2:], table[:, 0], table[:, 1],
                           tuple(header[2:]))


def save_csv(dataset, path, duration_col="y", event_col="delta"):
    """Write a dataset as CSV with round-trip exact float formatting."""
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow([duration_col, event_col, *dataset.column_names])
        for i in range(dataset.n_samples):
            writer.writerow([repr(float(dataset.y[i])), int(dataset.delta[i]),
                             *[repr(float(v)) for v in dataset.x[i]]])


def fit_univariate_cox(y, delta, x_col):
    """Fit a one-covariate proportional hazards coefficient.

    Uses a safeguarded Newton iteration on the Breslow partial
    likelihood starting from zero. In separable configurations where
    the likelihood is monotone, the coefficient is capped at
    +-COX_MAX_ABS_COEF with a warning.

    Parameters
    ----------
    y : `np.ndarray`, shape=(n_samples,)
        Observed durations.

    delta : `np.ndarray`, shape=(n_samples,)
        Event indicators in {0, 1}.

    x_col : `np.ndarray`, shape=(n_samples,)
        A single covariate, not constant.

    Returns
    -------
    output : `float`
        The estimated coefficient.
    """
    y = np.asarray(y, dtype=np.float64)
    delta = np.asarray(delta)
    x_col = np.asarray(x_col, dtype=np.float64)
    if y.shape != x_col.shape or y.shape != delta.shape:
        raise ValueError("y, delta and x_col must have equal length")
    if np.ptp(x_col) == 0:
        raise ValueError("covariate is constant, coefficient undefined")
    if not np.any(delta == 1):
        raise ValueError("no events, coefficient undefined")

    order = np.argsort(y, kind="stable")
    y_s = y[order]
    d_s = np.asarray(delta)[order] == 1
    # centering leaves the partial likelihood unchanged but tames exp()
    x_s = x_col[order] - x_col.mean()
    first_tie = np.searchsorted(y_s, y_s, side="left")[d_s]

    def loglik_score_info(beta):
        eta = np.clip(x_s * beta, -500.0, 500.0)
        shift = eta.max()
        w = np.exp(eta - shift)
        s0 = np.cumsum(w[::-1])[::-1][first_tie]
        s1 = np.cumsum((x_s * w)[::-1])[::-1][first_tie]
        s2 = np.cumsum((x_s * x_s * w)[::-1])[::-1][first_tie]
        mean = s1 / s0
        loglik = float((eta[d_s] - (np.log(s0) + shift)).sum())
        score = float((x_s[d_s] - mean).sum())
        info = float((s2 / s0 - mean * mean).sum())
        return loglik, score, info

    beta = 0.0
    loglik, score, info = loglik_score_info(beta)
    for _ in range(COX_MAX_ITER):
        if abs(score) <= COX_SCORE_TOL:
            break
        step = score / info if info > 0 else np.sign(score)
        # backtrack until the likelihood improves
        for _ in range(40):
            candidate = beta + step
            cand_ll, cand_score, cand_info = loglik_score_info(candidate)
            if cand_ll >= loglik:
                break
            step *= 0.5
        beta, loglik, score, info = candidate, cand_ll, cand_score, cand_info
        if abs(beta) > COX_MAX_ABS_COEF:
            warnings.warn("coefficient capped at |beta| = %g, likelihood appears monotone"
                          % COX_MAX_ABS_COEF)
            return float(np.sign(beta) * COX_MAX_ABS_COEF)
    return float(beta)


@dataclass
class ScreeningResult:
    """Covariate ranking by marginal concordance."""

    ranked_columns: np.ndarray
    scores: np.ndarray
    flagged: tuple = field(default=())

    def to_dict(self):
        return {
            "ranked": [int(j) for j in self.ranked_columns],
            "scores": [float(s) for s in self.scores],
        }


def screen_top_d(dataset, top, tau=None):
    """Rank covariates by the concordance of their marginal hazard marker.

    Each column gets a univariate proportional hazards fit; the
    concordance of the resulting relative risk exp(x_j * beta_j) is the
    column's score. Columns whose fit or scoring fails are assigned the
    uninformative score 0.5 and flagged.

    Parameters
    ----------
    dataset : `SurvivalDataset`
        The data to screen.

    top : `int`
        How many columns to keep, between 1 and n_features.

    tau : `float` or None
        Concordance horizon passed through to the metric.

    Returns
    -------
    output : `ScreeningResult`
        Columns sorted by decreasing score (ties kept in column order),
        truncated to ``top``, with the full score vector attached.
    """
    top = int(top)
    if not 1 <= top <= dataset.n_features:
        raise ValueError("top must be in [1, %d], got %d" % (dataset.n_features, top))
    if tau is None:
        tau = default_tau(dataset.y)
    scores = np.full(dataset.n_features, 0.5)
    flagged = []
    for j in range(dataset.n_features):
        try:
            beta = fit_univariate_cox(dataset.y, dataset.delta, dataset.x[:, j])
            marker = np.exp(np.clip(dataset.x[:, j] * beta, -700, 700))
            scores[j] = c_index_ipcw(dataset.y, dataset.delta, marker, tau=tau)
        except ValueError as exc:
            warnings.warn("column %d (%s) could not be scored: %s"
                          % (j, dataset.column_names[j], exc))
            flagged.append(j)
    ranked = np.argsort(-scores, kind="stable")[:top]
    return ScreeningResult(ranked, scores[ranked], tuple(flagged))
