"""Training and evaluation protocol.

For each held-out market: fit feature normalization on the remaining
markets only, split their union 85/15 into train/validation (stratified by
market and label; every node stays in the graph, the masks only gate the
loss), train full-batch with SGD + momentum and early stopping on the
validation loss, restore the best-validation snapshot, then retrain from
the same seeded initialization on all training nodes for exactly the
selected number of epochs. The refit model is evaluated on the held-out
market, whose graph is built stand-alone.

A screens-only L2-regularized logistic regression trained by plain
gradient descent serves as the tabular baseline.
"""

from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .data_model import MarketDataset, filter_min_bids
from .graph import TenderGraph, build_market_graph, union_graph
from .metrics import EvalReport, evaluate
from .model import (
    GatParams,
    Hyperparams,
    backward,
    forward,
    init_params,
    loss_ce,
    predict_proba,
    sgd_momentum_step,
    zero_velocity,
)
from .screens import SCREEN_NAMES

logger = logging.getLogger(__name__)

# A validation loss must undercut the best seen by this much to count as
# an improvement for early stopping; ties are not improvements.
MIN_DELTA = 1e-6


class TrainingError(Exception):
    pass


class DivergenceError(TrainingError):
    def __init__(self, epoch: int):
        self.epoch = epoch
        super().__init__(f"non-finite loss at epoch {epoch}")


class FoldError(TrainingError):
    pass


@dataclass(frozen=True)
class Normalizer:
    """Per-screen mean/sd fitted on training markets only."""

    mean: np.ndarray
    sd: np.ndarray

    def apply(self, feats: np.ndarray) -> np.ndarray:
        return (np.asarray(feats, dtype=np.float64) - self.mean) / self.sd

    def normalize_graph(self, g: TenderGraph) -> TenderGraph:
        return g.with_features(self.apply(g.features))


def fit_normalizer(train_graphs: list[TenderGraph]) -> Normalizer:
    """Mean and sample sd of each screen over all training-market nodes.

    A feature that is constant across the training nodes (or fewer than two
    nodes in total) leaves the sd undefined and raises TrainingError.
    """
    feats = np.vstack([g.features for g in train_graphs])
    if feats.shape[0] < 2:
        raise TrainingError("normalizer needs at least 2 training nodes")
    mean = feats.mean(axis=0)
    sd = feats.std(axis=0, ddof=1)
    for k, name in enumerate(SCREEN_NAMES):
        if sd[k] == 0.0:
            raise TrainingError(f"screen {name!r} is constant across training nodes")
    return Normalizer(mean=mean, sd=sd)


def _allocate(sizes: list[int], total: int) -> list[int]:
    """Largest-remainder split of ``total`` over strata proportional to size."""
    n = sum(sizes)
    quotas = [total * s / n for s in sizes]
    counts = [int(q) for q in quotas]
    short = total - sum(counts)
    order = sorted(range(len(sizes)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:short]:
        counts[i] += 1
    return [min(c, s) for c, s in zip(counts, sizes)]


def split_validation(
    g: TenderGraph, frac: float = 0.15, seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Partition the labeled nodes into train/validation boolean masks.

    Stratified by (market, label); falls back to label-only strata with a
    warning when the finer stratification cannot put both classes in both
    masks. Nodes stay in the graph either way; the masks only control which
    losses are computed.
    """
    labels = g.labels01()
    markets = g.node_markets()
    labeled = np.flatnonzero(labels >= 0)
    if labeled.size < 4:
        raise TrainingError(f"cannot split {labeled.size} labeled nodes")
    n_val = max(1, round(frac * labeled.size))
    rng = np.random.default_rng(seed)

    def try_split(keys: list) -> tuple[np.ndarray, np.ndarray]:
        strata: dict = {}
        for i in labeled:
            strata.setdefault(keys[i], []).append(int(i))
        names = sorted(strata)
        counts = _allocate([len(strata[k]) for k in names], n_val)
        val_idx: list[int] = []
        for name, k in zip(names, counts):
            members = np.array(strata[name])
            perm = rng.permutation(members.size)
            val_idx.extend(int(m) for m in members[perm[:k]])
        val_mask = np.zeros(g.n, dtype=bool)
        val_mask[val_idx] = True
        train_mask = np.zeros(g.n, dtype=bool)
        train_mask[labeled] = True
        train_mask[val_idx] = False
        return train_mask, val_mask

    def covers_both(mask: np.ndarray) -> bool:
        return bool(np.any(labels[mask] == 0) and np.any(labels[mask] == 1))

    by_market_label = [(markets[i], int(labels[i])) for i in range(g.n)]
    train_mask, val_mask = try_split(by_market_label)
    if covers_both(train_mask) and covers_both(val_mask):
        return train_mask, val_mask

    warnings.warn("per-(market,label) strata too small; falling back to label-only "
                  "stratification", stacklevel=2)
    by_label = [int(labels[i]) for i in range(g.n)]
    rng = np.random.default_rng(seed)
    train_mask, val_mask = try_split(by_label)
    if not (covers_both(train_mask) and covers_both(val_mask)):
        # force one node of each class into the short side
        for cls in (0, 1):
            cls_idx = labeled[labels[labeled] == cls]
            if cls_idx.size < 2:
                raise TrainingError(f"class {cls} has {cls_idx.size} labeled node(s); "
                                    "cannot populate both masks")
            if not np.any(val_mask[cls_idx]):
                pick = int(cls_idx[rng.integers(cls_idx.size)])
                val_mask[pick], train_mask[pick] = True, False
            if not np.any(train_mask[cls_idx]):
                pick = int(cls_idx[rng.integers(cls_idx.size)])
                train_mask[pick], val_mask[pick] = True, False
    return train_mask, val_mask


@dataclass
class FitResult:
    params: GatParams            # refit on all labeled nodes for best_epoch epochs
    best_params: GatParams       # best-validation snapshot from the selection run
    best_epoch: int              # 1-based epoch whose params minimized val loss
    train_curve: list[float]
    val_curve: list[float]
    stopped_early: bool


def _train_epochs(
    g: TenderGraph,
    h: Hyperparams,
    labels: np.ndarray,
    loss_mask: np.ndarray,
    n_epochs: int,
    val_mask: np.ndarray | None = None,
) -> tuple[GatParams, FitResult | None]:
    """Shared loop: selection run (val_mask given, early stopping) or plain
    refit for a fixed number of epochs."""
    params = init_params(h)
    velocity = zero_velocity(params)
    rng = np.random.default_rng(h.seed)

    if val_mask is None:
        for epoch in range(1, n_epochs + 1):
            logits, trace = forward(g, params, "train", rng, h.dropout)
            train_loss = loss_ce(logits, labels, loss_mask)
            if not math.isfinite(train_loss):
                raise DivergenceError(epoch)
            grads = backward(trace, labels, loss_mask)
            params, velocity = sgd_momentum_step(
                params, grads, velocity, h.learning_rate, h.momentum)
        return params, None

    train_curve: list[float] = []
    val_curve: list[float] = []
    best_val = math.inf
    best_epoch = 0
    best_params = params.copy()
    wait = 0
    stopped = False
    for epoch in range(1, n_epochs + 1):
        logits, trace = forward(g, params, "train", rng, h.dropout)
        train_loss = loss_ce(logits, labels, loss_mask)
        grads = backward(trace, labels, loss_mask)
        params, velocity = sgd_momentum_step(
            params, grads, velocity, h.learning_rate, h.momentum)
        val_logits, _ = forward(g, params, "eval")
        val_loss = loss_ce(val_logits, labels, val_mask)
        if not (math.isfinite(train_loss) and math.isfinite(val_loss)):
            raise DivergenceError(epoch)
        train_curve.append(train_loss)
        val_curve.append(val_loss)

        if val_loss < best_val - MIN_DELTA:
            wait = 0
        elif epoch > h.start_delay:
            wait += 1
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_params = params.copy()
        if epoch > h.start_delay and wait >= h.patience:
            stopped = True
            break

    result = FitResult(params=best_params, best_params=best_params,
                       best_epoch=best_epoch, train_curve=train_curve,
                       val_curve=val_curve, stopped_early=stopped)
    return params, result


def fit(
    g: TenderGraph,
    h: Hyperparams,
    train_mask: np.ndarray | None = None,
    val_mask: np.ndarray | None = None,
) -> FitResult:
    """Full-batch training with early stopping, then refit on everything.

    Expects normalized node features. Masks default to the seeded
    stratified 85/15 split. Early-stopping monitoring starts after
    ``start_delay`` epochs; training halts after ``patience`` monitored
    epochs without improvement or at ``max_epochs``. The refit runs on all
    labeled nodes for exactly ``best_epoch`` epochs from the same
    seed-derived initialization and provides the returned ``params``.
    """
    labels = g.labels01()
    if train_mask is None or val_mask is None:
        train_mask, val_mask = split_validation(g, h.val_fraction, h.seed)
    if not np.any(train_mask) or not np.any(val_mask):
        raise TrainingError("train and validation masks must both be non-empty")

    _, result = _train_epochs(g, h, labels, train_mask, h.max_epochs, val_mask=val_mask)
    all_mask = train_mask | val_mask
    refit_params, _ = _train_epochs(g, h, labels, all_mask, result.best_epoch)
    result.params = refit_params
    return result


@dataclass
class FoldOutcome:
    market_id: str
    report: EvalReport
    best_epoch: int
    lambda_final: float
    n_train: int
    n_test: int


@dataclass
class LomoReport:
    folds: list[FoldOutcome]
    failures: list[tuple[str, str]]
    macro: dict[str, float]

    @property
    def ok(self) -> bool:
        return not self.failures


def _macro_average(folds: list[FoldOutcome]) -> dict[str, float]:
    if not folds:
        return {}
    return {
        "accuracy": float(np.mean([f.report.accuracy for f in folds])),
        "balanced_accuracy": float(np.mean([f.report.balanced_accuracy for f in folds])),
        "f1": float(np.mean([f.report.f1 for f in folds])),
        "roc_auc": float(np.mean([f.report.roc_auc for f in folds])),
    }


def _run_fold(
    test_market: str,
    graphs: dict[str, TenderGraph],
    h: Hyperparams,
) -> FoldOutcome:
    train_graphs = [graphs[m] for m in sorted(graphs) if m != test_market]
    union = union_graph(train_graphs)
    union_labels = union.labels01()
    for cls in (0, 1):
        if not np.any(union_labels == cls):
            raise FoldError(f"training union for fold {test_market!r} lacks class {cls}")
    norm = fit_normalizer(train_graphs)
    train_g = norm.normalize_graph(union)
    test_g = norm.normalize_graph(graphs[test_market])

    result = fit(train_g, h)
    probs = predict_proba(test_g, result.params)
    test_labels = [nd.label for nd in test_g.nodes]
    report = evaluate(test_labels, probs[:, 1])
    return FoldOutcome(
        market_id=test_market,
        report=report,
        best_epoch=result.best_epoch,
        lambda_final=result.params.lam,
        n_train=train_g.n,
        n_test=test_g.n,
    )


def _fold_worker(args) -> tuple[str, FoldOutcome | None, str | None]:
    test_market, graphs, h = args
    try:
        return test_market, _run_fold(test_market, graphs, h), None
    except Exception as exc:  # fold failures are reported, not fatal
        return test_market, None, f"{type(exc).__name__}: {exc}"


def leave_one_market_out(
    ds: MarketDataset,
    h: Hyperparams,
    tau: float = 0.0,
    top_k: int | None = None,
    min_bids: int = 3,
    jobs: int = 1,
) -> LomoReport:
    """Hold out each market in turn, train on the rest, evaluate, and
    macro-average. Folds are independent; ``jobs`` > 1 runs them in
    parallel processes with order-normalized output.
    """
    filtered, dropped = filter_min_bids(ds, min_bids)
    if dropped:
        logger.info("dropped %d tender(s) with fewer than %d bids", dropped, min_bids)
    if filtered.n_markets < 2:
        raise TrainingError(f"leave-one-market-out needs >= 2 markets, got {filtered.n_markets}")

    epoch = filtered.earliest_date()
    graphs = {
        mid: build_market_graph(tenders, epoch, tau=tau, top_k=top_k)
        for mid, tenders in filtered.markets.items()
    }

    market_ids = sorted(graphs)
    tasks = [(mid, graphs, h) for mid in market_ids]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            raw = list(pool.map(_fold_worker, tasks))
    else:
        raw = [_fold_worker(t) for t in tasks]

    raw.sort(key=lambda r: r[0])
    folds = [out for _, out, err in raw if out is not None]
    failures = [(mid, err) for mid, out, err in raw if err is not None]
    for mid, err in failures:
        logger.warning("fold %s failed: %s", mid, err)
    return LomoReport(folds=folds, failures=failures, macro=_macro_average(folds))


# -- screens-only logistic baseline ------------------------------------------

def logistic_loss_grad(
    theta: np.ndarray, x_aug: np.ndarray, y: np.ndarray, reg: float,
) -> tuple[float, np.ndarray]:
    """Mean logistic loss with L2 penalty on the weights (bias excluded).

    ``x_aug`` carries a trailing ones column; theta = [w..., b].
    """
    z = x_aug @ theta
    # log(1 + exp(-yz)) with y in {-1, +1}, stably
    y_pm = 2.0 * y - 1.0
    m = -y_pm * z
    loss = float(np.mean(np.logaddexp(0.0, m)))
    p = 1.0 / (1.0 + np.exp(-z))
    grad = x_aug.T @ (p - y) / x_aug.shape[0]
    w_only = theta.copy()
    w_only[-1] = 0.0
    loss += 0.5 * reg * float(w_only @ w_only)
    grad = grad + reg * w_only
    return loss, grad


def fit_logistic_baseline(
    train_x: np.ndarray,
    train_y: np.ndarray,
    test_x: np.ndarray,
    reg: float = 1e-4,
    max_iter: int = 10_000,
    tol: float = 1e-8,
) -> np.ndarray:
    """L2-regularized logistic regression on the (normalized) screens.

    Plain gradient descent with a fixed step from the Lipschitz bound of
    the loss; stops at gradient norm < tol or max_iter, warning and keeping
    the best iterate if it never converges. Returns (n_test, 2)
    probabilities [P(competitive), P(collusive)].
    """
    x = np.asarray(train_x, dtype=np.float64)
    y = np.asarray(train_y, dtype=np.float64)
    x_aug = np.column_stack([x, np.ones(x.shape[0])])
    theta = np.zeros(x_aug.shape[1])

    # Hessian of the mean logistic loss is bounded by X'X/(4n) + reg*I.
    lip = 0.25 * float(np.linalg.eigvalsh(x_aug.T @ x_aug).max()) / x_aug.shape[0] + reg
    step = 1.0 / lip

    best_theta = theta
    best_loss = math.inf
    converged = False
    for _ in range(max_iter):
        loss, grad = logistic_loss_grad(theta, x_aug, y, reg)
        if loss < best_loss:
            best_loss, best_theta = loss, theta
        if float(np.linalg.norm(grad)) < tol:
            converged = True
            break
        theta = theta - step * grad
    if not converged:
        warnings.warn(f"logistic baseline did not reach gradient norm < {tol}; "
                      "returning the best iterate", stacklevel=2)
        theta = best_theta

    t_aug = np.column_stack([np.asarray(test_x, dtype=np.float64),
                             np.ones(np.asarray(test_x).shape[0])])
    p = 1.0 / (1.0 + np.exp(-(t_aug @ theta)))
    return np.column_stack([1.0 - p, p])
