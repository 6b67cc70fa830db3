"""Seeded synthetic bid data for desk-scale verification.

Real cartel datasets are confidential, so this generator fabricates
markets whose screen distributions move in the empirically documented
directions: collusion lowers the coefficient of variation and the spread,
raises the gap-ratio screens, and skews bids negative (a lone low winner
under a tight cluster of cover bids).

Mechanics per tender:

* competitive: each sampled firm bids cost * (1 + |eps|),
  eps ~ N(0, sigma_comp); the cost itself is log-normal around cost_base
  (irrelevant to the screens, which are scale-invariant).
* collusive: a designated cartel winner bids cost * (1 + markup*u); the
  others submit cover bids clustered a fixed relative gap above the winner
  with dispersion sigma_coll << sigma_comp. A configurable fraction of
  collusive tenders is generated with weak manipulation (near-competitive
  dispersion) so that single-tender features are occasionally ambiguous,
  and outsiders can replace cartel members with a small probability.

Market structure mirrors a prosecuted cartel's life cycle. The firm pool
splits into a cartel block and a fringe. Collusive tenders draw their
bidders from the cartel (plus occasional fringe outsiders) and are
confined to a contiguous cartel window of the date range; competitive
tenders draw local windows of fringe firms and mostly fall in the
post-cartel period, with a minority of genuinely competitive tenders
inside the cartel window and a small share of ex-cartel firms bidding
competitively afterwards. Collusive and competitive tenders therefore
form internally well-connected clusters with few bidder-overlap edges
between them, and the time gaps across clusters are large, which is what
makes the temporal attention kernel informative. Everything is
deterministic under the spec seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from datetime import date, timedelta

import numpy as np

from .data_model import Bid, Label, MarketDataset, Tender
from .screens import SCREEN_NAMES, DegenerateTenderError, compute_screens


@dataclass
class SynthMarketSpec:
    market_id: str = "SYN"
    n_tenders: int = 200
    firm_pool: int = 24
    cartel_size: int = 8
    collusive_fraction: float = 0.45
    bids_per_tender: tuple[int, int] = (4, 8)
    date_range: tuple[date, date] = (date(2014, 1, 6), date(2021, 12, 27))
    cost_base: float = 1_000_000.0
    sigma_comp: float = 0.12         # relative dispersion of competitive bids
    sigma_coll: float = 0.03         # relative dispersion of the cover cluster
    cover_markup: float = 0.15       # winner's markup over cost, times U(0,1)
    cover_gap: float = 0.05          # relative gap between winner and covers
    outsider_prob: float = 0.15      # chance a collusive tender admits an outsider
    weak_collusion_prob: float = 0.25  # collusive tenders with ambiguous screens
    cartel_window: tuple[float, float] = (0.0, 0.55)  # fraction of the date span
    comp_in_window_prob: float = 0.30  # competitive tenders inside the cartel window
    excartel_comp_prob: float = 0.40   # competitive tenders with one ex-cartel bidder
    seed: int = 0

    def __post_init__(self):
        if self.cartel_size > self.firm_pool:
            raise ValueError("cartel_size cannot exceed firm_pool")
        if not 0.0 <= self.collusive_fraction <= 1.0:
            raise ValueError("collusive_fraction must be in [0, 1]")
        lo, hi = self.bids_per_tender
        if lo < 3 or hi < lo:
            raise ValueError("bids_per_tender must be a (min >= 3, max >= min) range")
        if not 0.0 < self.sigma_coll < self.sigma_comp:
            raise ValueError("need 0 < sigma_coll < sigma_comp: collusion tightens bids")
        if self.cover_markup <= 0 or self.cover_gap <= 0:
            raise ValueError("cover_markup and cover_gap must be positive")
        if self.date_range[1] <= self.date_range[0]:
            raise ValueError("date_range must be increasing")


def _window_indices(rng: np.random.Generator, pool: int, k: int, width: int) -> list[int]:
    """k distinct firm indices from a circular window of ``width`` around a
    random center; local sampling keeps bidder overlap clustered."""
    width = min(max(width, k), pool)
    center = int(rng.integers(pool))
    offsets = rng.choice(width, size=k, replace=False)
    return [int((center + o) % pool) for o in offsets]


def generate_market(spec: SynthMarketSpec) -> list[Tender]:
    """All tenders of one synthetic market, bit-reproducible from the seed."""
    lo, hi = spec.bids_per_tender
    if spec.collusive_fraction > 0 and spec.cartel_size < lo:
        raise ValueError(
            f"infeasible spec: cartel of {spec.cartel_size} cannot staff tenders "
            f"needing >= {lo} bids")
    rng = np.random.default_rng(spec.seed)
    firms = [f"{spec.market_id}_f{i:03d}" for i in range(spec.firm_pool)]
    cartel = firms[:spec.cartel_size]
    outsiders = firms[spec.cartel_size:]

    n_coll = round(spec.n_tenders * spec.collusive_fraction)
    flags = np.zeros(spec.n_tenders, dtype=bool)
    flags[:n_coll] = True
    rng.shuffle(flags)

    span_days = (spec.date_range[1] - spec.date_range[0]).days
    win_lo, win_hi = spec.cartel_window

    tenders: list[Tender] = []
    for idx, collusive in enumerate(flags):
        k = int(rng.integers(lo, hi + 1))
        cost = float(rng.lognormal(math.log(spec.cost_base), 0.2))
        if collusive:
            frac = rng.uniform(win_lo, win_hi)
            weak = rng.random() < spec.weak_collusion_prob
            gap = spec.cover_gap * (0.3 if weak else 1.0)
            sigma = 0.7 * spec.sigma_comp if weak else spec.sigma_coll

            n_cartel = min(k, spec.cartel_size)
            members = _window_indices(rng, spec.cartel_size, n_cartel,
                                      round(1.6 * n_cartel))
            bidders = [cartel[m] for m in members]
            k = len(bidders)

            winner = cost * (1.0 + spec.cover_markup * rng.uniform())
            values = [winner]
            for slot in range(1, k):
                values.append(winner * (1.0 + gap + abs(rng.normal(0.0, sigma))))
            # occasionally an outsider joins and undercuts the cartel level
            if outsiders and k > 1 and rng.random() < spec.outsider_prob:
                slot = int(rng.integers(1, k))
                bidders[slot] = outsiders[int(rng.integers(len(outsiders)))]
                values[slot] = cost * (1.0 + abs(rng.normal(0.0, spec.sigma_comp)))
        else:
            in_window = rng.random() < spec.comp_in_window_prob
            frac = rng.uniform(win_lo, win_hi) if in_window else rng.uniform(win_hi, 1.0)
            if outsiders:
                picks = _window_indices(rng, len(outsiders), k, round(1.6 * k))
                bidders = [outsiders[i] for i in picks]
            else:
                picks = _window_indices(rng, spec.firm_pool, k, round(1.6 * k))
                bidders = [firms[i] for i in picks]
            # an ex-cartel firm occasionally bids competitively
            if rng.random() < spec.excartel_comp_prob:
                firm = cartel[int(rng.integers(spec.cartel_size))]
                if firm not in bidders:
                    bidders[int(rng.integers(k))] = firm
            values = [cost * (1.0 + abs(rng.normal(0.0, spec.sigma_comp))) for _ in range(k)]

        tender_date = spec.date_range[0] + timedelta(days=int(frac * span_days))
        tenders.append(Tender(
            tender_id=f"{spec.market_id}_t{idx:04d}",
            market_id=spec.market_id,
            date=tender_date,
            label=Label.COLLUSIVE if collusive else Label.COMPETITIVE,
            bids=tuple(Bid(b, round(v, 2)) for b, v in zip(bidders, values)),
        ))
    return tenders


# Six market profiles spanning the documented heterogeneity: small/large
# firm pools, 4-16 bids per tender, varying cartel penetration and noise.
_SUITE_PROFILES = [
    dict(bids_per_tender=(4, 7), firm_pool=50, cartel_size=12,
         collusive_fraction=0.50, sigma_comp=0.12, sigma_coll=0.030),
    dict(bids_per_tender=(4, 9), firm_pool=58, cartel_size=14,
         collusive_fraction=0.40, sigma_comp=0.10, sigma_coll=0.025),
    dict(bids_per_tender=(5, 10), firm_pool=68, cartel_size=16,
         collusive_fraction=0.55, sigma_comp=0.14, sigma_coll=0.035),
    dict(bids_per_tender=(6, 12), firm_pool=80, cartel_size=20,
         collusive_fraction=0.45, sigma_comp=0.11, sigma_coll=0.028),
    dict(bids_per_tender=(8, 14), firm_pool=100, cartel_size=24,
         collusive_fraction=0.35, sigma_comp=0.13, sigma_coll=0.032),
    dict(bids_per_tender=(10, 16), firm_pool=115, cartel_size=28,
         collusive_fraction=0.50, sigma_comp=0.15, sigma_coll=0.040),
]


def generate_benchmark_suite(n_markets: int = 6, base_seed: int = 42) -> MarketDataset:
    """Heterogeneous multi-market dataset (~200 tenders per market) with
    disjoint firm pools; the desk-scale stand-in for a real cross-market
    evaluation."""
    ds = MarketDataset()
    for i in range(n_markets):
        profile = _SUITE_PROFILES[i % len(_SUITE_PROFILES)]
        market_id = f"SYN_{chr(ord('A') + i)}"
        spec = SynthMarketSpec(
            market_id=market_id,
            n_tenders=200,
            seed=base_seed + 1000 * (i + 1),
            **profile,
        )
        ds.markets[market_id] = generate_market(spec)
    return ds


@dataclass(frozen=True)
class CalibrationRow:
    screen: str
    label: str
    n: int
    median: float
    target: tuple[float, float] | None
    ok: bool | None  # None when no target band applies


@dataclass
class CalibrationReport:
    rows: list[CalibrationRow]
    passed: bool


# Reference bands for the default generator: collusive tenders cluster
# near CV 0.05, competitive near 0.07, the contrast the generator is
# calibrated to reproduce.
DEFAULT_CV_TARGETS: dict[str, dict[str, tuple[float, float]]] = {
    "cv": {"collusive": (0.03, 0.06), "competitive": (0.05, 0.09)},
}

MIN_CLASS_TENDERS = 30


def calibration_check(
    tenders: list[Tender],
    targets: dict[str, dict[str, tuple[float, float]]],
) -> CalibrationReport:
    """Compare per-class screen medians of a generated market against target
    bands. Always reports 9 screens x 2 classes; a class with fewer than
    MIN_CLASS_TENDERS usable tenders fails every band that targets it.
    """
    values: dict[str, dict[str, list[float]]] = {
        s: {"collusive": [], "competitive": []} for s in SCREEN_NAMES}
    counts = {"collusive": 0, "competitive": 0}
    for t in tenders:
        if t.label is Label.UNKNOWN:
            continue
        try:
            sv = compute_screens(t)
        except DegenerateTenderError:
            continue
        cls = t.label.value
        counts[cls] += 1
        arr = sv.as_array()
        for s, v in zip(SCREEN_NAMES, arr):
            values[s][cls].append(float(v))

    rows: list[CalibrationRow] = []
    passed = True
    for s in SCREEN_NAMES:
        for cls in ("collusive", "competitive"):
            xs = values[s][cls]
            med = float(np.median(xs)) if xs else math.nan
            band = targets.get(s, {}).get(cls)
            if band is None:
                ok = None
            elif counts[cls] < MIN_CLASS_TENDERS or math.isnan(med):
                ok = False
            else:
                ok = band[0] <= med <= band[1]
            if ok is False:
                passed = False
            rows.append(CalibrationRow(screen=s, label=cls, n=counts[cls],
                                       median=med, target=band, ok=ok))
    return CalibrationReport(rows=rows, passed=passed)
