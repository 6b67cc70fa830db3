from datetime import date

import pytest

from bidscreen.data_model import Bid, Label, MarketDataset, Tender
from bidscreen.synth import SynthMarketSpec, generate_market


def make_tender(bids, tender_id="t1", market_id="M", day=date(2020, 1, 1),
                label=Label.COMPETITIVE, bidders=None):
    if bidders is None:
        bidders = [f"f{i}" for i in range(len(bids))]
    return Tender(
        tender_id=tender_id,
        market_id=market_id,
        date=day,
        label=label,
        bids=tuple(Bid(b, float(v)) for b, v in zip(bidders, bids)),
    )


@pytest.fixture
def small_dataset() -> MarketDataset:
    """Two compact synthetic markets; enough signal to train quickly."""
    ds = MarketDataset()
    for i, mid in enumerate(["MKT_A", "MKT_B"]):
        spec = SynthMarketSpec(
            market_id=mid, n_tenders=60, firm_pool=30, cartel_size=8,
            collusive_fraction=0.5, bids_per_tender=(4, 7), seed=100 + i,
        )
        ds.markets[mid] = generate_market(spec)
    return ds
