# This file is part of link_audit.
#
# This program is free software: you can redistribute it and/or modify
# it under the terms of the GNU General Public License as published by
# the Free Software Foundation, either version 3 of the License, or
# (at your option) any later version.
#
# This program is distributed in the hope that it will be useful,
# but WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
# GNU General Public License for more details.
#
# You should have received a copy of the GNU General Public License
# along with this program.  If not, see <https://www.gnu.org/licenses/>.

"""Gamma model of per-homepage reference counts and anomaly detection.
"""

import dataclasses
import enum
import json
import math
from collections import namedtuple
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import special

import lsst.pex.config as pexConfig
from lsst.utils.logging import getLogger

__all__ = ("DomainError", "DegenerateSample", "TooFewSamples", "NonPositiveSample", "TailSide",
           "TailProbability", "GammaModel", "AnomalyVerdict", "GammaFitConfig", "gammaPdf",
           "gammaCdf", "gammaSf", "digamma", "fitGamma", "ksStatistic", "tailProbability",
           "detectAnomalies", "selectSeries", "writeModel", "readModel")

logger = getLogger("linkaudit.gammaModel")

MAX_ITERATIONS = 100
SHAPE_TOLERANCE = 1e-10


class DomainError(ValueError):
    """Raised for arguments outside the domain of a distribution function."""


class DegenerateSample(ValueError):
    """Raised when a sample has zero variance."""


class TooFewSamples(ValueError):
    """Raised when fewer than two samples are available for a fit."""


class NonPositiveSample(ValueError):
    """Raised when a sample value is zero, negative or not finite."""


class TailSide(enum.Enum):
    HIGH_TAIL = "HighTail"
    LOW_TAIL = "LowTail"


TailProbability = namedtuple("TailProbability", ["prob", "side"])


class GammaFitConfig(pexConfig.Config):
    series = pexConfig.ChoiceField(
        doc="Per-homepage count the model describes",
        dtype=str, default="external",
        allowed={
            "external": "Number of external references on the homepage",
            "total": "Number of internal and external references on the homepage",
        }
    )
    truncationFloor = pexConfig.Field(dtype=float, default=None, optional=True,
                                      doc=("Discard counts below this value before fitting; "
                                           "None keeps every positive count"))
    alpha = pexConfig.RangeField(dtype=float, default=0.001, min=0.0, max=0.5,
                                 inclusiveMin=False, inclusiveMax=False,
                                 doc="Tail probability below which a homepage is flagged")


@dataclass(frozen=True)
class GammaModel:
    """Gamma distribution with shape ``k`` and scale ``theta`` plus fit diagnostics.

    ``momShape`` and ``momScale`` hold the method-of-moments estimate the
    maximum-likelihood solve started from.
    """
    shape: float
    scale: float
    n: int = 0
    logLikelihood: float = math.nan
    ksStatistic: float = math.nan
    momShape: Optional[float] = None
    momScale: Optional[float] = None
    iterations: int = 0
    series: str = "external"
    truncationFloor: Optional[float] = None
    alphaDefault: float = 0.001

    def __post_init__(self):
        _checkParameters(self.shape, self.scale)

    @property
    def mean(self):
        return self.shape*self.scale

    @property
    def variance(self):
        return self.shape*self.scale**2

    def median(self):
        return float(special.gammaincinv(self.shape, 0.5))*self.scale

    def quantile(self, q):
        return special.gammaincinv(self.shape, np.asarray(q, dtype=float))*self.scale

    def toDict(self):
        return {
            "shape": self.shape,
            "scale": self.scale,
            "n": self.n,
            "log_likelihood": _finite(self.logLikelihood),
            "ks_statistic": _finite(self.ksStatistic),
            "alpha_default": self.alphaDefault,
            "truncation_floor": self.truncationFloor,
            "series": self.series,
            "mom_shape": _finite(self.momShape),
            "mom_scale": _finite(self.momScale),
            "iterations": self.iterations,
        }

    @classmethod
    def fromDict(cls, data):
        return cls(shape=float(data["shape"]), scale=float(data["scale"]), n=int(data.get("n", 0)),
                   logLikelihood=_float(data.get("log_likelihood")),
                   ksStatistic=_float(data.get("ks_statistic")),
                   momShape=data.get("mom_shape"), momScale=data.get("mom_scale"),
                   iterations=int(data.get("iterations", 0)), series=data.get("series", "external"),
                   truncationFloor=data.get("truncation_floor"),
                   alphaDefault=float(data.get("alpha_default", 0.001)))


def _float(value):
    return math.nan if value is None else float(value)


def _finite(value):
    """Map NaN and infinities to `None`, which JSON writes as null."""
    if value is None or math.isfinite(value):
        return value
    return None


@dataclass(frozen=True)
class AnomalyVerdict:
    domain: str
    observed: int
    tailProb: float
    side: TailSide
    flagged: bool


def _checkParameters(k, theta):
    if not (k > 0 and theta > 0 and math.isfinite(k) and math.isfinite(theta)):
        raise DomainError(f"Gamma parameters must be positive and finite: shape={k}, scale={theta}")


def _checkArgument(x):
    x = np.asarray(x, dtype=float)
    if np.any(np.isnan(x)) or np.any(x < 0):
        raise DomainError("Gamma distribution functions require x >= 0")
    return x


def _output(values, x):
    return float(values) if np.ndim(x) == 0 else values


def gammaPdf(x, k, theta):
    """Gamma density ``x**(k-1) exp(-x/theta) / (Gamma(k) theta**k)``.

    Accepts scalars or arrays. At ``x = 0`` the density is 0 for ``k > 1``,
    ``1/theta`` for ``k = 1`` and infinite for ``k < 1``.
    """
    _checkParameters(k, theta)
    xa = _checkArgument(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        logPdf = (k - 1)*np.log(xa) - xa/theta - special.gammaln(k) - k*math.log(theta)
        pdf = np.exp(logPdf)
    if k > 1:
        atZero = 0.0
    elif k == 1:
        atZero = 1.0/theta
    else:
        atZero = np.inf
    pdf = np.where(xa == 0, atZero, pdf)
    return _output(pdf, x)


def gammaCdf(x, k, theta):
    """``P(X <= x)`` through the regularized lower incomplete gamma function."""
    _checkParameters(k, theta)
    xa = _checkArgument(x)
    return _output(special.gammainc(k, xa/theta), x)


def gammaSf(x, k, theta):
    """``P(X >= x)``, computed directly to keep precision in the upper tail."""
    _checkParameters(k, theta)
    xa = _checkArgument(x)
    return _output(special.gammaincc(k, xa/theta), x)


def digamma(x):
    """Logarithmic derivative of the gamma function, for ``x > 0``."""
    xa = np.asarray(x, dtype=float)
    if np.any(np.isnan(xa)) or np.any(xa <= 0):
        raise DomainError("digamma is only defined here for x > 0")
    return _output(special.digamma(xa), x)


def _solveShape(s, k0):
    """Solve ``log(k) - digamma(k) = s`` for ``k`` by safeguarded Newton iteration.

    The left-hand side decreases monotonically from +inf to 0, so the root is
    kept inside a bracket and any Newton step leaving it is replaced by
    bisection (or doubling while the bracket is still open above).
    """
    lo, hi = 0.0, math.inf
    k = k0 if k0 > 0 and math.isfinite(k0) else 0.5/s
    for iteration in range(1, MAX_ITERATIONS + 1):
        f = math.log(k) - special.digamma(k) - s
        if f > 0:
            lo = k
        else:
            hi = k
        fPrime = 1.0/k - special.polygamma(1, k)
        step = f/fPrime
        kNew = k - step
        if not (lo < kNew < hi) or not math.isfinite(kNew):
            kNew = 2*k if math.isinf(hi) else 0.5*(lo + hi)
        if abs(kNew - k) < SHAPE_TOLERANCE:
            return kNew, iteration
        k = kNew
    logger.warning("Shape solve did not converge in %d iterations (k=%g)", MAX_ITERATIONS, k)
    return k, MAX_ITERATIONS


def fitGamma(samples, series="external", truncationFloor=None):
    """Maximum-likelihood gamma fit.

    Parameters
    ----------
    samples : array_like
        Strictly positive values, at least two, not all equal.
    series, truncationFloor
        Recorded in the returned model; selection happens in `selectSeries`.

    Returns
    -------
    model : `GammaModel`
        ``scale = mean/shape`` where ``shape`` solves
        ``log(k) - digamma(k) = log(mean) - mean(log(x))``, started from the
        method-of-moments value ``mean**2/variance``.

    Raises
    ------
    TooFewSamples
        If fewer than two samples are given.
    NonPositiveSample
        If any sample is not a positive finite number.
    DegenerateSample
        If the sample variance is zero.
    """
    x = np.asarray(samples, dtype=float).ravel()
    n = x.size
    if n < 2:
        raise TooFewSamples(f"Need at least 2 samples to fit, got {n}")
    if not np.all(np.isfinite(x)) or np.any(x <= 0):
        raise NonPositiveSample("Gamma fit requires strictly positive samples")
    mean = x.mean()
    variance = x.var(ddof=1)
    if variance <= 0 or np.all(x == x[0]):
        raise DegenerateSample("Sample variance is zero")
    logX = np.log(x)
    s = math.log(mean) - logX.mean()
    if s <= 0:
        raise DegenerateSample("Sample is numerically constant")

    momShape = mean**2/variance
    shape, iterations = _solveShape(s, momShape)
    scale = mean/shape
    logLikelihood = float((shape - 1)*logX.sum() - x.sum()/scale
                          - n*special.gammaln(shape) - n*shape*math.log(scale))
    model = GammaModel(shape=shape, scale=scale, n=n, logLikelihood=logLikelihood,
                       momShape=momShape, momScale=mean/momShape, iterations=iterations,
                       series=series, truncationFloor=truncationFloor)
    ks = ksStatistic(x, model)
    logger.debug("Fitted gamma: shape=%g scale=%g (MoM %g, %g) in %d iterations, KS=%g",
                 shape, scale, momShape, mean/momShape, iterations, ks)
    return dataclasses.replace(model, ksStatistic=ks)


def ksStatistic(samples, model):
    """Largest distance between the empirical CDF of ``samples`` and the model CDF."""
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    n = x.size
    if n < 1:
        raise TooFewSamples("KS statistic needs at least one sample")
    cdf = gammaCdf(x, model.shape, model.scale)
    i = np.arange(1, n + 1)
    return float(max(np.max(i/n - cdf), np.max(cdf - (i - 1)/n)))


def tailProbability(x, model):
    """Two-sided tail probability ``min(P(X <= x), P(X >= x))`` and its side.

    Returns
    -------
    tail : `TailProbability`
        ``prob`` and ``side``; ties go to `TailSide.LOW_TAIL`.
    """
    low = gammaCdf(x, model.shape, model.scale)
    high = gammaSf(x, model.shape, model.scale)
    if low <= high:
        return TailProbability(float(low), TailSide.LOW_TAIL)
    return TailProbability(float(high), TailSide.HIGH_TAIL)


def _seriesValue(profile, series):
    return profile.externalCount if series == "external" else profile.totalRefs


def detectAnomalies(profiles, model, alpha=0.001, series=None):
    """Flag homepages whose count falls in either tail of ``model``.

    Parameters
    ----------
    profiles : iterable of `linkaudit.corpusStore.HomepageProfile`
    model : `GammaModel`
    alpha : `float`
        Flag threshold, in (0, 0.5).
    series : `str`, optional
        ``external`` or ``total``; defaults to the series the model was fitted on.

    Returns
    -------
    verdicts : `list` of `AnomalyVerdict`
        One per profile, sorted by ascending tail probability.
    """
    if not 0 < alpha < 0.5:
        raise DomainError(f"alpha must lie in (0, 0.5), got {alpha}")
    series = series or model.series
    verdicts = []
    for profile in profiles:
        observed = _seriesValue(profile, series)
        tail = tailProbability(observed, model)
        verdicts.append(AnomalyVerdict(domain=profile.domain, observed=observed, tailProb=tail.prob,
                                       side=tail.side, flagged=tail.prob < alpha))
    verdicts.sort(key=lambda v: (v.tailProb, v.domain))
    return verdicts


def selectSeries(profiles, series="external", truncationFloor=None):
    """Return the positive counts of ``series`` to fit, optionally left-truncated."""
    values = np.array([_seriesValue(p, series) for p in profiles], dtype=float)
    values = values[values > 0]
    if truncationFloor is not None:
        values = values[values >= truncationFloor]
    return values


def writeModel(model, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(model.toDict(), f, indent=2, sort_keys=True, allow_nan=False)
        f.write("\n")


def readModel(path):
    with open(path, encoding="utf-8") as f:
        return GammaModel.fromDict(json.load(f))
