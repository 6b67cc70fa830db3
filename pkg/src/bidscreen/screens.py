"""The nine per-tender bid-distribution statistics ("screens").

Every screen is a dimensionless function of the multiset of bid values in
one tender, invariant under scaling (price level, currency) and under
reordering. They are the initial node features of the tender graphs.

Throughout, sd means the sample standard deviation (n-1 denominator); the
bias-corrected skewness/kurtosis formulas below are its standard
companions. Tenders on which a screen is undefined (zero bid dispersion,
or zero dispersion among losing bids for the gap-ratio screens) raise
DegenerateTenderError rather than being imputed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data_model import Tender

SCREEN_NAMES = ["cv", "spread", "kurto", "diffp", "rd", "normd", "altd", "skew", "ks"]


class DegenerateTenderError(Exception):
    """A screen is undefined on this tender (zero dispersion somewhere)."""

    def __init__(self, screen: str, detail: str = ""):
        self.screen = screen
        msg = f"screen {screen!r} undefined: {detail}" if detail else f"screen {screen!r} undefined"
        super().__init__(msg)


@dataclass(frozen=True)
class ScreenVector:
    cv: float
    spread: float
    kurto: float
    diffp: float
    rd: float
    normd: float
    altd: float
    skew: float
    ks: float

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.cv, self.spread, self.kurto, self.diffp, self.rd,
             self.normd, self.altd, self.skew, self.ks],
            dtype=np.float64,
        )


def _values(bids) -> np.ndarray:
    v = np.asarray(list(bids), dtype=np.float64)
    if v.size < 3:
        raise ValueError(f"screens need at least 3 bids, got {v.size}")
    return v


def _sample_sd(v: np.ndarray) -> float:
    m = v.mean()
    return float(np.sqrt(np.sum((v - m) ** 2) / (v.size - 1)))


def _all_tied(v: np.ndarray) -> bool:
    # (v.min == v.max) rather than sd == 0: rounding in the mean can leave a
    # spurious tiny sd on exactly tied bids, which would blow up the ratios
    return bool(v.min() == v.max())


def compute_cv(bids) -> float:
    """Coefficient of variation: sample sd over mean. Zero when all bids tie."""
    v = _values(bids)
    if _all_tied(v):
        return 0.0
    return _sample_sd(v) / float(v.mean())


def compute_spread(bids) -> float:
    """Relative range: (max - min) / min."""
    v = _values(bids)
    lo = float(v.min())
    return (float(v.max()) - lo) / lo


def compute_kurtosis(bids) -> float:
    """Bias-corrected excess kurtosis of the bids.

    For n >= 4:
        n(n+1)/((n-1)(n-2)(n-3)) * sum(((b-mean)/sd)^4) - 3(n-1)^2/((n-2)(n-3))
    For n == 3 the correction divides by zero, so the population excess
    kurtosis m4/m2^2 - 3 is used instead; it equals -1.5 for every
    three-point sample with positive dispersion.
    """
    v = _values(bids)
    if _all_tied(v):
        raise DegenerateTenderError("kurto", "all bids equal")
    n = v.size
    m = v.mean()
    d = v - m
    sd = _sample_sd(v)
    if n == 3:
        m2 = float(np.mean(d ** 2))
        m4 = float(np.mean(d ** 4))
        return m4 / (m2 * m2) - 3.0
    s4 = float(np.sum((d / sd) ** 4))
    return (n * (n + 1)) / ((n - 1) * (n - 2) * (n - 3)) * s4 \
        - 3.0 * (n - 1) ** 2 / ((n - 2) * (n - 3))


def compute_diffp(bids) -> float:
    """Relative gap between the two lowest bids: (b2 - b1) / b1."""
    v = np.sort(_values(bids))
    return (float(v[1]) - float(v[0])) / float(v[0])


def compute_rd(bids) -> float:
    """Winner gap in units of losing-bid dispersion: (b2 - b1) / sd(losing).

    Losing bids are all bids except one instance of the minimum.
    """
    v = np.sort(_values(bids))
    losing = v[1:]
    if _all_tied(losing):
        raise DegenerateTenderError("rd", "losing bids all equal")
    return (float(v[1]) - float(v[0])) / _sample_sd(losing)


def compute_normd(bids) -> float:
    """Winner gap over the mean adjacent gap of the increasingly sorted bids.

    The adjacent gaps telescope, so the denominator is (max - min)/(n - 1).
    """
    v = np.sort(_values(bids))
    rng = float(v[-1]) - float(v[0])
    if rng == 0.0:
        raise DegenerateTenderError("normd", "all bids equal")
    mean_gap = rng / (v.size - 1)
    return (float(v[1]) - float(v[0])) / mean_gap


def compute_altd(bids) -> float:
    """Winner gap over the mean adjacent gap among the losing bids only.

    Denominator telescopes to (max - b2)/(n - 2); undefined when the losing
    bids all tie.
    """
    v = np.sort(_values(bids))
    losing_range = float(v[-1]) - float(v[1])
    if losing_range == 0.0:
        raise DegenerateTenderError("altd", "losing bids all equal")
    mean_gap = losing_range / (v.size - 2)
    return (float(v[1]) - float(v[0])) / mean_gap


def compute_skewness(bids) -> float:
    """Bias-corrected sample skewness:
    n/((n-1)(n-2)) * sum(((b-mean)/sd)^3)."""
    v = _values(bids)
    if _all_tied(v):
        raise DegenerateTenderError("skew", "all bids equal")
    n = v.size
    sd = _sample_sd(v)
    s3 = float(np.sum(((v - v.mean()) / sd) ** 3))
    return n / ((n - 1) * (n - 2)) * s3


def compute_ks(bids) -> float:
    """Kolmogorov-Smirnov-style uniformity statistic of sd-standardized bids.

    With bids sorted increasingly, x_i = b_i / sd and 1-based rank i:
        D+ = max_i(x_i - i/(n+1)),  D- = max_i(i/(n+1) - x_i),  KS = max(D+, D-).
    The x_i are not confined to [0, 1]; large values are expected for
    low-dispersion tenders.
    """
    v = np.sort(_values(bids))
    if _all_tied(v):
        raise DegenerateTenderError("ks", "all bids equal")
    sd = _sample_sd(v)
    n = v.size
    x = v / sd
    grid = np.arange(1, n + 1, dtype=np.float64) / (n + 1)
    d_plus = float(np.max(x - grid))
    d_minus = float(np.max(grid - x))
    return max(d_plus, d_minus)


def compute_screens(tender: Tender) -> ScreenVector:
    """All nine screens of one tender.

    Requires >= 3 bids and positive bid dispersion; degenerate tenders raise
    DegenerateTenderError with the offending screen named and the tender id
    attached.
    """
    values = tender.bid_values()
    v = _values(values)
    if _all_tied(v):
        raise DegenerateTenderError("cv/sd", f"all bids equal in tender {tender.tender_id!r}")
    try:
        return ScreenVector(
            cv=compute_cv(values),
            spread=compute_spread(values),
            kurto=compute_kurtosis(values),
            diffp=compute_diffp(values),
            rd=compute_rd(values),
            normd=compute_normd(values),
            altd=compute_altd(values),
            skew=compute_skewness(values),
            ks=compute_ks(values),
        )
    except DegenerateTenderError as exc:
        raise DegenerateTenderError(exc.screen, f"tender {tender.tender_id!r}: {exc}") from exc
