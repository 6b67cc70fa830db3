"""Bid-rigging screening toolkit.

Statistical screens on bid distributions, per-market tender graphs with
bidder-overlap/temporal attention, a two-layer fixed-attention graph
classifier trained with exact hand-derived gradients, a
leave-one-market-out evaluation harness, and a calibrated synthetic-market
generator.
"""

__version__ = "0.1.0"

from .data_model import (
    Bid,
    Label,
    MarketDataset,
    Tender,
    filter_min_bids,
    parse_bids_csv,
    validate_dataset,
    write_bids_csv,
)
from .screens import SCREEN_NAMES, DegenerateTenderError, ScreenVector, compute_screens
from .graph import (
    TenderGraph,
    TenderNode,
    attention_weights,
    build_market_graph,
    delta_time,
    edge_score,
    jaccard,
    union_graph,
)
from .model import (
    GatParams,
    Hyperparams,
    backward,
    forward,
    gradient_check,
    init_params,
    loss_ce,
    predict_proba,
    sgd_momentum_step,
)
from .metrics import (
    ConfusionMatrix,
    EvalReport,
    accuracy,
    balanced_accuracy,
    confusion,
    evaluate,
    f1,
    roc_auc,
    roc_auc_trapezoid,
)
from .training import (
    FitResult,
    LomoReport,
    Normalizer,
    fit,
    fit_logistic_baseline,
    fit_normalizer,
    leave_one_market_out,
    split_validation,
)
from .synth import SynthMarketSpec, calibration_check, generate_benchmark_suite, generate_market
