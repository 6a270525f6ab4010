"""Probability-of-detection curves.

Hit/miss outcomes are modeled by a binomial GLM in defect size (optionally
plus SPR), fitted by iteratively reweighted least squares.  Confidence bands
are Wald bands on the linear predictor mapped through the inverse link.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.special import expit, logit, ndtr, ndtri
from scipy.stats import norm

Z95_TWO_SIDED = 1.959964
Z95_ONE_SIDED = 1.644854
LINKS = ("logit", "probit", "cloglog")
_EPS = 1e-12


class FitError(ValueError):
    pass


class SeparationError(FitError):
    """Outcomes are (quasi-)perfectly predicted; the MLE does not exist."""


class DegenerateDataError(SeparationError):
    """Only one outcome is present."""


class RankDeficiencyError(FitError):
    pass


class DetectabilityError(ValueError):
    """POD does not grow with defect size (beta <= 0)."""


class BracketError(ValueError):
    pass


# --------------------------------------------------------------------------
# link functions

def link(name: str, p):
    p = np.asarray(p, dtype=float)
    if name == "logit":
        return logit(p)
    if name == "probit":
        return ndtri(p)
    if name == "cloglog":
        return np.log(-np.log1p(-p))
    raise ValueError(f"unknown link {name!r}")


def inverse_link(name: str, eta):
    eta = np.asarray(eta, dtype=float)
    if name == "logit":
        return expit(eta)
    if name == "probit":
        return ndtr(eta)
    if name == "cloglog":
        return -np.expm1(-np.exp(eta))
    raise ValueError(f"unknown link {name!r}")


def _dmu_deta(name: str, eta):
    if name == "logit":
        p = expit(eta)
        return p * (1.0 - p)
    if name == "probit":
        return norm.pdf(eta)
    if name == "cloglog":
        return np.exp(eta - np.exp(eta))
    raise ValueError(f"unknown link {name!r}")


# --------------------------------------------------------------------------
# fits

@dataclass(frozen=True)
class PodFit:
    link: str
    coefficients: np.ndarray  # alpha, beta[, gamma]
    covariance: np.ndarray
    n_observations: int
    deviance: float
    converged: bool
    iterations: int = 0

    @property
    def multivariate(self) -> bool:
        return len(self.coefficients) == 3

    @property
    def alpha(self) -> float:
        return float(self.coefficients[0])

    @property
    def beta(self) -> float:
        return float(self.coefficients[1])

    @property
    def gamma(self) -> float | None:
        return float(self.coefficients[2]) if self.multivariate else None

    def standard_errors(self) -> np.ndarray:
        return np.sqrt(np.diag(self.covariance))


def _bernoulli_deviance(y, mu):
    mu = np.clip(mu, _EPS, 1.0 - _EPS)
    return float(-2.0 * np.sum(y * np.log(mu) + (1.0 - y) * np.log1p(-mu)))


def fit_glm(X: np.ndarray, y: np.ndarray, link_name: str = "logit",
            tol: float = 1e-8, max_iter: int = 100, separation_limit: float = 1e3,
            score_tol: float = 1e-7) -> PodFit:
    """Binomial GLM by IRLS.  ``X`` includes the intercept column.

    Converged means the deviance changed by less than ``tol`` and every
    component of the score is below ``score_tol``.
    """
    if link_name not in LINKS:
        raise ValueError(f"unknown link {link_name!r}; choose from {LINKS}")
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, k = X.shape
    if n < 10:
        raise FitError(f"need at least 10 observations, got {n}")
    if not np.all(np.isfinite(X)):
        raise FitError("covariates must be finite")
    if y.min() == y.max():
        raise DegenerateDataError("all outcomes are identical; both successes and failures are required")
    if np.linalg.matrix_rank(X) < k:
        raise RankDeficiencyError("design matrix is rank deficient (collinear covariates)")

    mu = (y + 0.5) / 2.0
    eta = link(link_name, mu)
    dev = _bernoulli_deviance(y, mu)
    beta = np.zeros(k)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        d = _dmu_deta(link_name, eta)
        d = np.where(np.abs(d) < _EPS, _EPS, d)
        var = np.clip(mu * (1.0 - mu), _EPS, None)
        w = d * d / var
        z = eta + (y - mu) / d
        XtW = X.T * w
        beta = np.linalg.solve(XtW @ X, XtW @ z)
        eta = X @ beta
        mu = np.clip(inverse_link(link_name, eta), _EPS, 1.0 - _EPS)
        new_dev = _bernoulli_deviance(y, mu)
        if np.max(np.abs(beta)) > separation_limit and new_dev < dev:
            raise SeparationError(
                f"coefficients diverge (max |coef| = {np.max(np.abs(beta)):.3g}) while deviance keeps "
                "decreasing: the outcomes are separated by the covariates"
            )
        change = abs(new_dev - dev)
        dev = new_dev
        # Fisher scoring is only linearly convergent for non-canonical links, so a
        # small deviance change alone can stop well short of the score root
        d = _dmu_deta(link_name, eta)
        score = X.T @ ((y - mu) * d / np.clip(mu * (1.0 - mu), _EPS, None))
        if change < tol and np.max(np.abs(score)) < score_tol:
            converged = True
            break
    if dev < 1e-6:
        # zero Bernoulli deviance means every fitted probability equals its outcome
        raise SeparationError("fitted probabilities are numerically 0 or 1: the outcomes are separated "
                              "by the covariates")

    d = _dmu_deta(link_name, eta)
    var = np.clip(mu * (1.0 - mu), _EPS, None)
    w = d * d / var
    info = (X.T * w) @ X
    cov = np.linalg.inv(info)
    cov = 0.5 * (cov + cov.T)
    return PodFit(link_name, beta, cov, n, dev, converged, it)


def fit_pod(sizes: Sequence[float], successes: Sequence[bool], link: str = "logit") -> PodFit:
    s = np.asarray(sizes, dtype=float)
    y = np.asarray(successes, dtype=float)
    if s.shape != y.shape:
        raise FitError("sizes and successes differ in length")
    X = np.column_stack([np.ones_like(s), s])
    return fit_glm(X, y, link)


def fit_pod_multi(sizes, sprs, successes, link: str = "logit") -> PodFit:
    s = np.asarray(sizes, dtype=float)
    r = np.asarray(sprs, dtype=float)
    y = np.asarray(successes, dtype=float)
    if not (s.shape == r.shape == y.shape):
        raise FitError("sizes, sprs and successes differ in length")
    if not np.all(np.isfinite(r)):
        raise FitError("SPR covariate must be finite")
    X = np.column_stack([np.ones_like(s), s, r])
    return fit_glm(X, y, link)


# --------------------------------------------------------------------------
# evaluation

@dataclass(frozen=True)
class PodPoint:
    s: float
    spr: float | None
    p: float
    lo95: float
    hi95: float


def _design_row(fit: PodFit, s: float, spr: float | None) -> np.ndarray:
    if fit.multivariate and spr is None:
        raise ValueError("multivariate fit needs an SPR value")
    if not fit.multivariate and spr is not None:
        raise ValueError("univariate fit takes no SPR value")
    return np.array([1.0, s] + ([spr] if fit.multivariate else []))


def _eta_sd(fit: PodFit, s: float, spr: float | None) -> tuple[float, float]:
    x = _design_row(fit, s, spr)
    eta = float(x @ fit.coefficients)
    var = float(x @ fit.covariance @ x)
    return eta, math.sqrt(max(var, 0.0))


def pod_eval(fit: PodFit, s: float, spr: float | None = None, level: float = 0.95) -> PodPoint:
    if not fit.converged:
        raise FitError("fit did not converge")
    z = Z95_TWO_SIDED if level == 0.95 else float(norm.ppf(0.5 + level / 2.0))
    eta, sd = _eta_sd(fit, s, spr)
    p, lo, hi = (float(v) for v in inverse_link(fit.link, [eta, eta - z * sd, eta + z * sd]))
    return PodPoint(float(s), spr, p, lo, hi)


def s90(fit: PodFit, spr: float | None = None) -> float:
    """Defect size with 90% detection probability."""
    if not fit.converged:
        raise FitError("fit did not converge")
    if fit.beta <= 0:
        raise DetectabilityError(f"beta = {fit.beta:.4g} <= 0: POD does not increase with size")
    x = _design_row(fit, 0.0, spr)
    offset = fit.alpha + (fit.gamma * x[2] if fit.multivariate else 0.0)
    return float((link(fit.link, 0.9) - offset) / fit.beta)


def s90_95(fit: PodFit, spr: float | None = None, tol: float = 1e-6) -> float:
    """Smallest size where the one-sided 95% lower POD bound reaches 0.9."""
    base = s90(fit, spr)
    target = float(link(fit.link, 0.9))

    def gap(s):
        eta, sd = _eta_sd(fit, s, spr)
        return eta - Z95_ONE_SIDED * sd - target

    if gap(base) >= 0:
        return base
    hi = base + 20.0 / fit.beta
    if gap(hi) < 0:
        raise BracketError(f"lower confidence bound never reaches 0.9 within [{base:.4g}, {hi:.4g}] mm")
    lo = base
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if gap(mid) >= 0:
            hi = mid
        else:
            lo = mid
    return hi


@dataclass(frozen=True)
class SizeComparison:
    s: float
    a: PodPoint
    b: PodPoint
    b_outside_a: bool
    a_outside_b: bool


@dataclass(frozen=True)
class Comparison:
    verdict: str  # indistinguishable | a_better | b_better
    details: list[SizeComparison]


def compare_fits(fit_a: PodFit, fit_b: PodFit, size_grid, spr: float | None = None) -> Comparison:
    if fit_a.link != fit_b.link:
        raise ValueError(f"links differ: {fit_a.link} vs {fit_b.link}")
    details = []
    margin = 0.0
    for s in size_grid:
        a = pod_eval(fit_a, float(s), spr)
        b = pod_eval(fit_b, float(s), spr)
        b_out = not (a.lo95 <= b.p <= a.hi95)
        a_out = not (b.lo95 <= a.p <= b.hi95)
        if b_out or a_out:
            margin += a.p - b.p
        details.append(SizeComparison(float(s), a, b, b_out, a_out))
    if not any(d.b_outside_a or d.a_outside_b for d in details):
        verdict = "indistinguishable"
    else:
        verdict = "a_better" if margin > 0 else "b_better"
    return Comparison(verdict, details)


# --------------------------------------------------------------------------
# records

def binarize(records, threshold: float = 0.5):
    """Mark each record successful iff F1 > threshold."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    return [replace(r, success=bool(r.f1 > threshold)) for r in records]


@dataclass(frozen=True)
class SizeHistogram:
    bin_edges: np.ndarray
    success_fraction: np.ndarray
    count: np.ndarray


def binned_histogram(records, n_bins: int) -> SizeHistogram:
    if n_bins < 2:
        raise ValueError("need at least 2 bins")
    if not records:
        raise ValueError("no records to bin")
    sizes = np.array([r.defect_size_mm for r in records], dtype=float)
    hits = np.array([bool(r.success) for r in records])
    edges = np.linspace(sizes.min(), sizes.max(), n_bins + 1)
    idx = np.clip(np.searchsorted(edges, sizes, side="right") - 1, 0, n_bins - 1)
    count = np.bincount(idx, minlength=n_bins)
    succ = np.bincount(idx, weights=hits, minlength=n_bins)
    frac = np.divide(succ, count, out=np.full(n_bins, np.nan), where=count > 0)
    return SizeHistogram(edges, frac, count)


# --------------------------------------------------------------------------
# persistence

def _g(x: float) -> str:
    return f"{x:.17g}"


def write_fit(path, fit: PodFit) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["link", fit.link])
        w.writerow(["coefficients", *map(_g, fit.coefficients)])
        w.writerow(["covariance", *map(_g, np.asarray(fit.covariance).ravel())])
        w.writerow(["n_observations", fit.n_observations])
        w.writerow(["deviance", _g(fit.deviance)])
        w.writerow(["converged", str(fit.converged).lower()])
        w.writerow(["iterations", fit.iterations])


def read_fit(path) -> PodFit:
    with open(path, newline="") as fh:
        rows = {r[0]: r[1:] for r in csv.reader(fh) if r}
    coef = np.array([float(v) for v in rows["coefficients"]])
    k = coef.size
    cov = np.array([float(v) for v in rows["covariance"]]).reshape(k, k)
    return PodFit(
        link=rows["link"][0],
        coefficients=coef,
        covariance=cov,
        n_observations=int(rows["n_observations"][0]),
        deviance=float(rows["deviance"][0]),
        converged=rows["converged"][0] == "true",
        iterations=int(rows.get("iterations", ["0"])[0]),
    )
